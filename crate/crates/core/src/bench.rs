//! Desk-scale studies: primitive counts, dataflow order, fusion, vector
//! format structures and stream token breakdowns.
//!
//! Every study is deterministic for a given seed and returns plain rows that
//! serialize to CSV.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::custard::{lower, parse_einsum, CompiledGraph, LowerError, LowerOptions};
use crate::sim::{self, SimConfig, SimReport};
use crate::storage::{
    build, from_levels, gen_blocks, gen_runs, gen_sparse, gen_urandom, split_vector, DenseTensor, LevelFormat,
    StorageError, TensorStorage,
};

/// The expressions of the primitive-count table: name, expression, schedule.
pub const TABLE1: &[(&str, &str, &str)] = &[
    ("SpMV", "x(i) = B(i,j) * c(j)", "ij"),
    ("SpM*SpM", "X(i,j) = B(i,k) * C(k,j)", "ijk"),
    ("SpM*SpM", "X(i,j) = B(i,k) * C(k,j)", "ikj"),
    ("SpM*SpM", "X(i,j) = B(i,k) * C(k,j)", "kij"),
    ("SDDMM", "X(i,j) = B(i,j) * C(i,k) * D(j,k)", "ijk"),
    ("InnerProd", "x = B(i,j,k) * C(i,j,k)", "ijk"),
    ("TTV", "X(i,j) = B(i,j,k) * c(k)", "ijk"),
    ("TTM", "X(i,j,k) = B(i,j,l) * C(k,l)", "ijkl"),
    ("MTTKRP", "X(i,j) = B(i,k,l) * C(j,k) * D(j,l)", "ijkl"),
    ("Residual", "x(i) = b(i) - C(i,j) * d(j)", "ij"),
    ("MatTransMul", "x(i) = alpha * B(j,i) * c(j) + beta * d(i)", "ij"),
    ("MMAdd", "X(i,j) = B(i,j) + C(i,j)", "ij"),
    ("Plus3", "X(i,j) = B(i,j) + C(i,j) + D(i,j)", "ij"),
    ("Plus2", "X(i,j,k) = B(i,j,k) + C(i,j,k)", "ijk"),
];

/// Block classes in table column order.
pub const COUNT_CLASSES: [&str; 9] = ["scan", "repeat", "intersect", "union", "alu", "reduce", "crddrop", "write", "array"];

pub fn schedule(s: &str) -> Vec<String> {
    if s.contains(',') {
        s.split(',').map(|p| p.trim().to_string()).collect()
    } else {
        s.chars().map(String::from).collect()
    }
}

pub fn compile(expr: &str, order: &str, formats: &[(&str, &str)], opts: &LowerOptions) -> Result<CompiledGraph, LowerError> {
    let a = parse_einsum(expr).map_err(|e| LowerError::Unsupported(e.to_string()))?;
    let mut f = BTreeMap::new();
    for (t, s) in formats {
        f.insert(t.to_string(), LevelFormat::parse_list(s)?);
    }
    lower(&a, &schedule(order), &f, opts)
}

fn cycles(cg: &CompiledGraph, inputs: &BTreeMap<String, TensorStorage>) -> Result<u64, LowerError> {
    Ok(sim::run(&cg.graph, inputs, &SimConfig::default())?.report.cycles)
}

fn dense_cycles(cg: &CompiledGraph, dense: &BTreeMap<String, DenseTensor>) -> Result<u64, LowerError> {
    cycles(cg, &cg.prepare(dense)?)
}

fn named(list: Vec<(&str, DenseTensor)>) -> BTreeMap<String, DenseTensor> {
    list.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Table1Row {
    pub name: String,
    pub schedule: String,
    pub scan: usize,
    pub repeat: usize,
    pub intersect: usize,
    pub union: usize,
    pub alu: usize,
    pub reduce: usize,
    pub crddrop: usize,
    pub write: usize,
    pub array: usize,
}

impl Table1Row {
    pub fn counts(&self) -> [usize; 9] {
        [self.scan, self.repeat, self.intersect, self.union, self.alu, self.reduce, self.crddrop, self.write, self.array]
    }
}

pub fn table1() -> Result<Vec<Table1Row>, LowerError> {
    let mut rows = Vec::new();
    for (name, expr, order) in TABLE1 {
        let cg = compile(expr, order, &[], &LowerOptions::default())?;
        let c = cg.graph.primitive_counts();
        let g = |k: &str| c.get(k).copied().unwrap_or(0);
        rows.push(Table1Row {
            name: name.to_string(),
            schedule: order.to_string(),
            scan: g("scan"),
            repeat: g("repeat"),
            intersect: g("intersect"),
            union: g("union"),
            alu: g("alu"),
            reduce: g("reduce"),
            crddrop: g("crddrop"),
            write: g("write"),
            array: g("array"),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Fig12Row {
    pub order: String,
    pub cycles: u64,
}

pub const SPMSPM_ORDERS: [&str; 6] = ["ijk", "ikj", "jik", "jki", "kij", "kji"];

/// SpM*SpM on uniform random DCSR operands under all six loop orders.
pub fn fig12(i: usize, k: usize, j: usize, sparsity: f64, seed: u64) -> Result<Vec<Fig12Row>, LowerError> {
    let dense = named(vec![("B", gen_sparse(&[i, k], sparsity, 9, seed)), ("C", gen_sparse(&[k, j], sparsity, 9, seed + 1))]);
    let mut rows = Vec::new();
    for order in SPMSPM_ORDERS {
        let cg = compile("X(i,j) = B(i,k) * C(k,j)", order, &[("B", "ss"), ("C", "ss")], &LowerOptions::default())?;
        rows.push(Fig12Row { order: order.into(), cycles: dense_cycles(&cg, &dense)? });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Fig11Row {
    #[serde(rename = "K")]
    pub k: usize,
    pub variant: String,
    pub cycles: u64,
}

/// SDDMM with a sparse `n x n` sampling matrix and dense `n x K` factors,
/// fused, fused with locate, and unfused through a dense temporary.
pub fn fig11(n: usize, ks: &[usize], sparsity: f64, seed: u64) -> Result<Vec<Fig11Row>, LowerError> {
    let sddmm = "X(i,j) = B(i,j) * C(i,k) * D(j,k)";
    let fmts = [("B", "ss"), ("C", "dd"), ("D", "dd")];
    let fused = compile(sddmm, "ijk", &fmts, &LowerOptions::default())?;
    let locate = LowerOptions {
        locate: [("C".to_string(), "i".to_string()), ("D".to_string(), "j".to_string())].into(),
        ..Default::default()
    };
    let located = compile(sddmm, "ijk", &fmts, &locate)?;
    let dense_mm = compile("T(i,j) = C(i,k) * D(j,k)", "ijk", &[("C", "dd"), ("D", "dd")], &LowerOptions::default())?;
    let sample_t = compile("X(i,j) = B(i,j) * T(i,j)", "ij", &[("B", "ss"), ("T", "dd")], &LowerOptions::default())?;
    let b = gen_sparse(&[n, n], sparsity, 9, seed);
    let mut rows = Vec::new();
    for (t, &k) in ks.iter().enumerate() {
        let s = seed + 10 * (t as u64 + 1);
        let c = gen_sparse(&[n, k], 0.0, 9, s);
        let d = gen_sparse(&[n, k], 0.0, 9, s + 1);
        let inputs = named(vec![("B", b.clone()), ("C", c.clone()), ("D", d.clone())]);
        rows.push(Fig11Row { k, variant: "fused".into(), cycles: dense_cycles(&fused, &inputs)? });
        rows.push(Fig11Row { k, variant: "fused+locate".into(), cycles: dense_cycles(&located, &inputs)? });
        let mm_in = named(vec![("C", c), ("D", d)]);
        let run = sim::run(&dense_mm.graph, &dense_mm.prepare(&mm_in)?, &SimConfig::default())?;
        let tmp = dense_mm.graph.assemble(&run.written, "T", &[n, n], &dense_mm.output_mode_order)?;
        let second = dense_cycles(&sample_t, &named(vec![("B", b.clone()), ("T", from_levels(&tmp))]))?;
        rows.push(Fig11Row { k, variant: "unfused".into(), cycles: run.report.cycles + second });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Fig13Row {
    pub x: f64,
    pub config: String,
    pub cycles: u64,
}

/// Vector formats compared in the structure sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VecConfig {
    /// Compressed coordinates.
    Crd,
    /// Compressed coordinates with skip hints.
    CrdSkip,
    /// One bitvector level of 64-bit words.
    Bv,
    /// Split into 64 chunks, both levels compressed.
    SplitCrd,
    /// Split into 64 chunks, both levels bitvectors.
    SplitBv,
}

impl VecConfig {
    pub fn name(&self) -> &'static str {
        match self {
            VecConfig::Crd => "crd",
            VecConfig::CrdSkip => "crd+skip",
            VecConfig::Bv => "bv",
            VecConfig::SplitCrd => "split-crd",
            VecConfig::SplitBv => "split-bv",
        }
    }
}

pub const SPLIT: usize = 64;

/// Cycles of `x(i) = b(i) * c(i)` in the given format configuration.
pub fn vector_mul_cycles(b: &TensorStorage, c: &TensorStorage, cfg: VecConfig) -> Result<u64, LowerError> {
    let opts = LowerOptions { skip: cfg == VecConfig::CrdSkip, ..Default::default() };
    match cfg {
        VecConfig::Crd | VecConfig::CrdSkip | VecConfig::Bv => {
            let f = if cfg == VecConfig::Bv { "b64" } else { "s" };
            let cg = compile("x(i) = b(i) * c(i)", "i", &[("b", f), ("c", f)], &opts)?;
            dense_cycles(&cg, &named(vec![("b", from_levels(b)), ("c", from_levels(c))]))
        }
        VecConfig::SplitCrd | VecConfig::SplitBv => {
            let chunk = b.shape[0].div_ceil(SPLIT);
            let f = if cfg == VecConfig::SplitBv { format!("b64b{}", chunk.min(64)) } else { "ss".to_string() };
            let cg = compile("x(i,j) = b(i,j) * c(i,j)", "ij", &[("b", &f), ("c", &f)], &opts)?;
            let fc = [LevelFormat::Compressed; 2];
            let sb = from_levels(&split_vector(b, SPLIT, fc)?);
            let sc = from_levels(&split_vector(c, SPLIT, fc)?);
            dense_cycles(&cg, &named(vec![("b", sb), ("c", sc)]))
        }
    }
}

fn sweep(
    points: &[(f64, TensorStorage, TensorStorage)],
    configs: &[VecConfig],
) -> Result<Vec<Fig13Row>, LowerError> {
    let mut rows = Vec::new();
    for (x, b, c) in points {
        for &cfg in configs {
            rows.push(Fig13Row { x: *x, config: cfg.name().into(), cycles: vector_mul_cycles(b, c, cfg)? });
        }
    }
    Ok(rows)
}

pub const FIG13_DIM: usize = 2000;
pub const FIG13_SPARSITIES: [f64; 9] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98, 0.99, 0.995];
pub const FIG13_RUNS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
pub const FIG13_BLOCKS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

/// Uniform random vectors over a sparsity sweep.
pub fn fig13a(seed: u64) -> Result<Vec<Fig13Row>, LowerError> {
    let mut pts = Vec::new();
    for (t, &sp) in FIG13_SPARSITIES.iter().enumerate() {
        let nnz = ((1.0 - sp) * FIG13_DIM as f64).round() as usize;
        let s = seed + 2 * t as u64;
        pts.push((sp, gen_urandom("b", FIG13_DIM, nnz, s)?, gen_urandom("c", FIG13_DIM, nnz, s + 1)?));
    }
    sweep(&pts, &[VecConfig::Crd, VecConfig::CrdSkip, VecConfig::Bv])
}

/// Disjoint runs of increasing length, 400 nonzeros per vector.
pub fn fig13b(seed: u64) -> Result<Vec<Fig13Row>, LowerError> {
    let mut pts = Vec::new();
    for &r in &FIG13_RUNS {
        let (b, c) = gen_runs(FIG13_DIM, 400, r, seed)?;
        pts.push((r as f64, b, c));
    }
    sweep(&pts, &[VecConfig::Crd, VecConfig::CrdSkip, VecConfig::Bv])
}

/// Offset dense blocks of increasing size, 400 nonzeros per vector.
pub fn fig13c(seed: u64) -> Result<Vec<Fig13Row>, LowerError> {
    let mut pts = Vec::new();
    for &bs in &FIG13_BLOCKS {
        let (b, c) = gen_blocks(FIG13_DIM, 400, bs, seed)?;
        pts.push((bs as f64, b, c));
    }
    sweep(&pts, &[VecConfig::Crd, VecConfig::SplitCrd, VecConfig::Bv, VecConfig::SplitBv])
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Fig14Row {
    pub matrix: String,
    pub level: String,
    pub class: String,
    pub fraction: f64,
}

/// A DCSR matrix with the given number of nonzeros in each row, at random
/// columns.
pub fn matrix_with_rows(name: &str, cols: usize, row_nnz: &[usize], seed: u64) -> Result<TensorStorage, StorageError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    for (r, &n) in row_nnz.iter().enumerate() {
        if n > cols {
            return Err(StorageError::Infeasible(format!("{n} nonzeros in a row of {cols}")));
        }
        let mut c = sample(&mut rng, cols, n).into_vec();
        c.sort_unstable();
        points.extend(c.into_iter().map(|c| (vec![r, c], rng.gen_range(1..=9) as f64)));
    }
    let shape = [row_nnz.len(), cols];
    build(name, &shape, &[0, 1], &shape, &[LevelFormat::Compressed; 2], &points)
}

fn spread(rows: usize, nnz: usize) -> Vec<usize> {
    (0..rows).map(|r| nnz / rows + usize::from(r < nnz % rows)).collect()
}

/// Synthetic matrices with the shapes and nonzero counts of two public
/// matrices, `ch7-6-b1` (two nonzeros per row) and `rail507`.
pub fn fig14_standins(seed: u64) -> Result<Vec<(String, TensorStorage)>, StorageError> {
    Ok(vec![
        ("ch7-6-b1".into(), matrix_with_rows("B", 42, &spread(630, 1260), seed)?),
        ("rail507".into(), matrix_with_rows("B", 63009, &spread(507, 409_856), seed + 1)?),
    ])
}

/// Simulates `X(i,j) = B(i,j)` on a DCSR matrix.
pub fn identity_report(b: &TensorStorage) -> Result<SimReport, LowerError> {
    if b.order() != 2 || b.formats() != [LevelFormat::Compressed; 2] || b.mode_order != [0, 1] {
        return Err(LowerError::Unsupported("matrix identity expects a row-major DCSR matrix".into()));
    }
    let cg = compile("X(i,j) = B(i,j)", "ij", &[("B", "ss")], &LowerOptions::default())?;
    let mut inputs = BTreeMap::new();
    let mut b = b.clone();
    b.name = "B".into();
    inputs.insert("B".to_string(), b);
    Ok(sim::run(&cg.graph, &inputs, &SimConfig::default())?.report)
}

/// Token classes on the outer and inner coordinate streams of the matrix
/// identity, as fractions of all cycles; `stop/tokens` excludes idle cycles.
pub fn fig14(matrices: &[(String, TensorStorage)]) -> Result<Vec<Fig14Row>, LowerError> {
    let mut rows = Vec::new();
    for (m, b) in matrices {
        let rep = identity_report(b)?;
        for (level, node) in [("outer", "B_i"), ("inner", "B_j")] {
            let e = rep.edge(node, "crd").expect("identity graph scans both levels");
            let c = &e.counts;
            let total = (c.tokens() + c.idle) as f64;
            let frac = |n: u64| if total == 0.0 { 0.0 } else { n as f64 / total };
            for (class, f) in [
                ("crd", frac(c.coord)),
                ("stop", frac(c.stops())),
                ("done", frac(c.done)),
                ("idle", frac(c.idle)),
                ("stop/tokens", c.stop_fraction()),
            ] {
                rows.push(Fig14Row { matrix: m.clone(), level: level.into(), class: class.into(), fraction: f });
            }
        }
    }
    Ok(rows)
}

/// Stop fraction predicted for the inner stream of a DCSR scan: one stop
/// per nonempty row plus a final done token.
pub fn predicted_inner_stop_fraction(nnz: usize, nonempty_rows: usize) -> f64 {
    nonempty_rows as f64 / (nnz + nonempty_rows + 1) as f64
}

/// Random integer-valued inputs for `expr`: every index extent is drawn
/// from `1..=max_dim`, every tensor's sparsity from `sparsity`, and scalars
/// from `1..=5`.
pub fn random_inputs(
    expr: &str,
    seed: u64,
    max_dim: usize,
    sparsity: (f64, f64),
) -> Result<BTreeMap<String, DenseTensor>, LowerError> {
    let a = parse_einsum(expr).map_err(|e| LowerError::Unsupported(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims: BTreeMap<String, usize> = a.vars().into_iter().map(|v| (v, rng.gen_range(1..=max_dim.max(1)))).collect();
    let mut out = BTreeMap::new();
    for acc in a.rhs.accesses() {
        let shape: Vec<usize> = acc.vars.iter().map(|v| dims[v]).collect();
        let t = if shape.is_empty() {
            DenseTensor::from_vec(&[], vec![rng.gen_range(1..=5) as f64])?
        } else {
            gen_sparse(&shape, rng.gen_range(sparsity.0..=sparsity.1), 9, rng.gen())
        };
        out.insert(acc.tensor.clone(), t);
    }
    Ok(out)
}

/// One simulated channel's token breakdown.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ChannelRow {
    pub edge: String,
    pub kind: String,
    pub crd: u64,
    #[serde(rename = "ref")]
    pub reference: u64,
    pub val: u64,
    pub bv: u64,
    pub stop: u64,
    pub done: u64,
    pub empty: u64,
    pub idle: u64,
    pub stop_fraction: f64,
}

pub fn channel_rows(report: &SimReport) -> Vec<ChannelRow> {
    report
        .edges
        .iter()
        .map(|e| {
            let c = &e.counts;
            ChannelRow {
                edge: format!("{}.{} -> {}.{}", e.src, e.src_port, e.dst, e.dst_port),
                kind: e.kind.clone(),
                crd: c.coord,
                reference: c.reference,
                val: c.val,
                bv: c.bv,
                stop: c.stops(),
                done: c.done,
                empty: c.empty,
                idle: c.idle,
                stop_fraction: c.stop_fraction(),
            }
        })
        .collect()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
