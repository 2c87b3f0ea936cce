//! Lowering of index notation to a block graph.
//!
//! Variables are visited in schedule order. At each variable every access
//! that uses it gets a level scanner, the scanners are merged following the
//! expression (intersections under products, unions under sums), and the
//! accesses that do not use it are repeated over the merged coordinates.
//! Values are computed from the final references, reduced, and written.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::ast::{Access, Assignment, Expr, Sign};
use super::reference::{var_dims, RefError};
use crate::blocks::{AluOp, BlockConfig, DropMode};
use crate::graph::{GraphError, SamGraph};
use crate::sim::{self, SimConfig, SimError, SimReport};
use crate::storage::{from_levels, to_levels_ordered, DenseTensor, LevelFormat, StorageError, TensorStorage};
use crate::stream::StreamKind;

#[derive(Debug, Error)]
pub enum LowerError {
    #[error("bad schedule: {0}")]
    BadSchedule(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("`{tensor}` has {expected} levels but {found} formats were given")]
    FormatArity { tensor: String, expected: usize, found: usize },
    #[error("`{0}` is accessed with conflicting index orders")]
    InconsistentModes(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Reference(#[from] RefError),
}

#[derive(Debug, Clone, Default)]
pub struct LowerOptions {
    /// Let intersections send skip hints to their compressed scanners.
    pub skip: bool,
    /// `(tensor, var)` pairs whose level is looked up with a locate block
    /// instead of being scanned.
    pub locate: BTreeSet<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct CompiledGraph {
    pub graph: SamGraph,
    pub assignment: Assignment,
    pub schedule: Vec<String>,
    /// For each input, the logical mode stored at each level.
    pub mode_orders: BTreeMap<String, Vec<usize>>,
    /// For each input, the level formats in storage order.
    pub formats: BTreeMap<String, Vec<LevelFormat>>,
    pub output_mode_order: Vec<usize>,
}

impl CompiledGraph {
    /// Wraps a graph built elsewhere (for example read back from DOT). Level
    /// formats come from the graph's scanners and locators; levels no block
    /// touches are taken as compressed.
    pub fn from_graph(graph: SamGraph, assignment: Assignment, schedule: &[String]) -> Result<Self, LowerError> {
        let pos = check_schedule(&assignment, schedule)?;
        let mut mode_orders = BTreeMap::new();
        let mut formats = BTreeMap::new();
        for acc in assignment.rhs.accesses() {
            let mut order: Vec<usize> = (0..acc.vars.len()).collect();
            order.sort_by_key(|&m| pos[&acc.vars[m]]);
            mode_orders.insert(acc.tensor.clone(), order);
            formats.insert(acc.tensor.clone(), vec![LevelFormat::Compressed; acc.vars.len()]);
        }
        for n in &graph.nodes {
            if let BlockConfig::Scan { tensor, level, fmt, .. } | BlockConfig::Locate { tensor, level, fmt } = &n.block {
                let slot = formats
                    .get_mut(tensor)
                    .and_then(|f: &mut Vec<LevelFormat>| f.get_mut(*level))
                    .ok_or_else(|| LowerError::Unsupported(format!("graph reads level {level} of unknown `{tensor}`")))?;
                *slot = *fmt;
            }
        }
        let mut out_vars = assignment.output.vars.clone();
        out_vars.sort_by_key(|v| pos[v]);
        let output_mode_order =
            out_vars.iter().map(|v| assignment.output.vars.iter().position(|o| o == v).unwrap()).collect();
        Ok(Self { graph, assignment, schedule: schedule.to_vec(), mode_orders, formats, output_mode_order })
    }

    /// Stores dense inputs in the level order and formats the graph expects.
    pub fn prepare(&self, dense: &BTreeMap<String, DenseTensor>) -> Result<BTreeMap<String, TensorStorage>, LowerError> {
        let mut out = BTreeMap::new();
        for name in self.assignment.inputs() {
            let d = dense.get(&name).ok_or_else(|| RefError::MissingTensor(name.clone()))?;
            let t = if d.order() == 0 {
                TensorStorage::scalar(&name, d.data[0])
            } else {
                to_levels_ordered(&name, d, &self.formats[&name], &self.mode_orders[&name])?
            };
            out.insert(name, t);
        }
        Ok(out)
    }

    pub fn output_shape(&self, dense: &BTreeMap<String, DenseTensor>) -> Result<Vec<usize>, LowerError> {
        let dims = var_dims(&self.assignment, dense)?;
        Ok(self.assignment.output.vars.iter().map(|v| dims[v]).collect())
    }

    /// Evaluates the graph on whole streams and densifies the result.
    pub fn evaluate(&self, dense: &BTreeMap<String, DenseTensor>) -> Result<DenseTensor, LowerError> {
        let inputs = self.prepare(dense)?;
        let ev = self.graph.evaluate(&inputs)?;
        let out = self.graph.assemble(
            &ev.written,
            &self.assignment.output.tensor,
            &self.output_shape(dense)?,
            &self.output_mode_order,
        )?;
        Ok(densify(&out))
    }

    /// Simulates the graph; returns the densified result and the report.
    pub fn simulate(
        &self,
        dense: &BTreeMap<String, DenseTensor>,
        cfg: &SimConfig,
    ) -> Result<(DenseTensor, SimReport), LowerError> {
        let inputs = self.prepare(dense)?;
        let run = sim::run(&self.graph, &inputs, cfg)?;
        let out = self.graph.assemble(
            &run.written,
            &self.assignment.output.tensor,
            &self.output_shape(dense)?,
            &self.output_mode_order,
        )?;
        Ok((densify(&out), run.report))
    }
}

fn densify(t: &TensorStorage) -> DenseTensor {
    if t.order() == 0 {
        let mut d = DenseTensor::zeros(&[]);
        d.data = vec![t.vals.iter().sum()];
        return d;
    }
    from_levels(t)
}

/// Expression mirror with access ids at the leaves.
enum T {
    Leaf(usize),
    Mul(Vec<T>),
    Sum(Vec<(Sign, T)>),
}

impl T {
    fn build(e: &Expr, next: &mut usize) -> T {
        match e {
            Expr::Access(_) => {
                *next += 1;
                T::Leaf(*next - 1)
            }
            Expr::Mul(xs) => T::Mul(xs.iter().map(|x| T::build(x, next)).collect()),
            Expr::Sum(xs) => T::Sum(xs.iter().map(|(s, x)| (*s, T::build(x, next))).collect()),
        }
    }

    fn at(&self, path: &[usize]) -> &T {
        path.iter().fold(self, |t, &k| match t {
            T::Mul(xs) => &xs[k],
            T::Sum(xs) => &xs[k].1,
            T::Leaf(_) => unreachable!("path descends below a leaf"),
        })
    }

    fn leaves(&self, out: &mut Vec<usize>) {
        match self {
            T::Leaf(a) => out.push(*a),
            T::Mul(xs) => xs.iter().for_each(|x| x.leaves(out)),
            T::Sum(xs) => xs.iter().for_each(|(_, x)| x.leaves(out)),
        }
    }
}

type Src = (usize, String);

fn src(node: usize, port: &str) -> Src {
    (node, port.to_string())
}

struct Merged {
    crd: Src,
    refs: Vec<(usize, Src)>,
    /// Scanner node when this is an unmerged scan.
    scan: Option<usize>,
    fmt: LevelFormat,
}

struct Lowerer<'a> {
    accs: Vec<Access>,
    pos: BTreeMap<String, usize>,
    formats: BTreeMap<String, Vec<LevelFormat>>,
    opts: &'a LowerOptions,
    g: SamGraph,
    cur_ref: Vec<Src>,
    /// Variables whose merge can remove coordinates.
    filtering: BTreeSet<String>,
}

impl Lowerer<'_> {
    fn level_of(&self, a: usize, v: &str) -> usize {
        self.accs[a].vars.iter().filter(|u| self.pos[*u] < self.pos[v]).count()
    }

    fn has(&self, a: usize, v: &str) -> bool {
        self.accs[a].vars.iter().any(|u| u == v)
    }

    fn connect(&mut self, from: &Src, to: usize, port: &str) -> Result<(), LowerError> {
        Ok(self.g.connect(from.0, &from.1, to, port)?)
    }

    fn scan(&mut self, a: usize, v: &str) -> Result<Merged, LowerError> {
        let tensor = self.accs[a].tensor.clone();
        let level = self.level_of(a, v);
        let fmt = self.formats[&tensor][level];
        let id = self.g.add(format!("{tensor}_{v}"), BlockConfig::Scan { tensor, level, fmt, skip: false });
        let r = self.cur_ref[a].clone();
        self.connect(&r, id, "ref")?;
        let port = if matches!(fmt, LevelFormat::Bitvector(_)) { "bv" } else { "crd" };
        Ok(Merged { crd: src(id, port), refs: vec![(a, src(id, "ref"))], scan: Some(id), fmt })
    }

    fn merge(&mut self, t: &T, v: &str, located: &BTreeSet<usize>) -> Result<Option<Merged>, LowerError> {
        match t {
            T::Leaf(a) => {
                if self.has(*a, v) && !located.contains(a) {
                    Ok(Some(self.scan(*a, v)?))
                } else {
                    Ok(None)
                }
            }
            T::Mul(xs) => {
                let mut parts = Vec::new();
                for x in xs {
                    if let Some(m) = self.merge(x, v, located)? {
                        parts.push(m);
                    }
                }
                self.combine(parts, v, false)
            }
            T::Sum(xs) => {
                let mut users = 0;
                let mut parts = Vec::new();
                for (_, x) in xs {
                    let mut leaves = vec![];
                    x.leaves(&mut leaves);
                    if leaves.iter().any(|&a| self.has(a, v)) {
                        users += 1;
                    }
                    if let Some(m) = self.merge(x, v, located)? {
                        parts.push(m);
                    }
                }
                if users > 0 && users < xs.len() {
                    return Err(LowerError::Unsupported(format!(
                        "sum over `{v}` where some terms do not use it (broadcast addition)"
                    )));
                }
                self.combine(parts, v, true)
            }
        }
    }

    fn combine(&mut self, mut parts: Vec<Merged>, v: &str, union: bool) -> Result<Option<Merged>, LowerError> {
        if parts.len() <= 1 {
            return Ok(parts.pop());
        }
        let bv = parts.iter().filter(|m| matches!(m.fmt, LevelFormat::Bitvector(_))).count();
        if bv > 0 {
            if union || bv < parts.len() || parts.iter().any(|m| m.scan.is_none()) {
                return Err(LowerError::Unsupported(format!(
                    "bitvector levels at `{v}` must all be intersected directly with each other"
                )));
            }
            let m = parts.len();
            let id = self.g.add(format!("bvintersect_{v}"), BlockConfig::BvIntersect { arity: m });
            let mut refs = Vec::new();
            for (g, p) in parts.iter().enumerate() {
                self.connect(&p.crd, id, &format!("bv{g}"))?;
                self.connect(&p.refs[0].1, id, &format!("ref{g}"))?;
                refs.push((p.refs[0].0, src(id, &format!("ref{g}"))));
            }
            self.filtering.insert(v.to_string());
            return Ok(Some(Merged { crd: src(id, "crd"), refs, scan: None, fmt: LevelFormat::Compressed }));
        }
        let sizes: Vec<usize> = parts.iter().map(|m| m.refs.len()).collect();
        let skip = !union
            && self.opts.skip
            && parts.iter().all(|m| m.scan.is_some() && m.fmt == LevelFormat::Compressed);
        let (name, block) = if union {
            (format!("union_{v}"), BlockConfig::Union { refs: sizes })
        } else {
            self.filtering.insert(v.to_string());
            (format!("intersect_{v}"), BlockConfig::Intersect { refs: sizes, skip })
        };
        let id = self.g.add(name, block);
        let mut refs = Vec::new();
        for (g, p) in parts.iter().enumerate() {
            self.connect(&p.crd, id, &format!("crd{g}"))?;
            for (t, (a, r)) in p.refs.iter().enumerate() {
                let port = format!("ref{g}_{t}");
                self.connect(r, id, &port)?;
                refs.push((*a, src(id, &port)));
            }
            if skip {
                let sc = p.scan.unwrap();
                if let BlockConfig::Scan { skip, .. } = &mut self.g.nodes[sc].block {
                    *skip = true;
                }
                self.g.connect(id, &format!("skip{g}"), sc, "skip")?;
            }
        }
        Ok(Some(Merged { crd: src(id, "crd"), refs, scan: None, fmt: LevelFormat::Compressed }))
    }

    /// Lowers the iteration over `v`; returns its merged coordinate stream.
    fn var(&mut self, tree: &T, v: &str, scope: &[usize]) -> Result<Src, LowerError> {
        let node = tree.at(scope);
        let mut in_scope = vec![];
        node.leaves(&mut in_scope);
        let located: BTreeSet<usize> = in_scope
            .iter()
            .copied()
            .filter(|&a| self.has(a, v) && self.opts.locate.contains(&(self.accs[a].tensor.clone(), v.to_string())))
            .collect();
        let mut m = self
            .merge(node, v, &located)?
            .ok_or_else(|| LowerError::Unsupported(format!("every access using `{v}` is located; one must be scanned")))?;
        if m.scan.is_some() && matches!(m.fmt, LevelFormat::Bitvector(_)) {
            return Err(LowerError::Unsupported(format!("a lone bitvector level at `{v}` has nothing to intersect with")));
        }
        for &a in &located {
            let tensor = self.accs[a].tensor.clone();
            let level = self.level_of(a, v);
            let fmt = self.formats[&tensor][level];
            if fmt != LevelFormat::Dense && m.refs.len() != 1 {
                return Err(LowerError::Unsupported(format!(
                    "locating into sparse `{tensor}` at `{v}` needs a single leader reference"
                )));
            }
            let id = self.g.add(format!("locate_{tensor}_{v}"), BlockConfig::Locate { tensor, level, fmt });
            let parent = self.cur_ref[a].clone();
            self.connect(&m.crd, id, "crd")?;
            self.connect(&m.refs[0].1, id, "ref")?;
            self.connect(&parent, id, "parent")?;
            m.crd = src(id, "crd");
            m.refs[0].1 = src(id, "ref");
            m.refs.push((a, src(id, "found")));
            if fmt != LevelFormat::Dense {
                self.filtering.insert(v.to_string());
            }
        }
        for (a, r) in &m.refs {
            self.cur_ref[*a] = r.clone();
        }
        let lacking: Vec<usize> = in_scope.into_iter().filter(|&a| !self.has(a, v)).collect();
        for a in lacking {
            let id = self.g.add(format!("repeat_{}_{v}", self.accs[a].tensor), BlockConfig::Repeat);
            let r = self.cur_ref[a].clone();
            self.connect(&r, id, "ref")?;
            self.connect(&m.crd, id, "repsig")?;
            self.cur_ref[a] = src(id, "ref");
        }
        Ok(m.crd)
    }

    fn alu(&mut self, op: AluOp, a: &Src, b: &Src) -> Result<Src, LowerError> {
        let id = self.g.add(op.name(), BlockConfig::Alu { op });
        self.connect(a, id, "a")?;
        self.connect(b, id, "b")?;
        Ok(src(id, "val"))
    }

    fn value(&mut self, t: &T, path: &mut Vec<usize>, sub: &[(Vec<usize>, String)]) -> Result<Src, LowerError> {
        let mut val = match t {
            T::Leaf(a) => {
                let tensor = self.accs[*a].tensor.clone();
                let id = self.g.add(format!("{tensor}_vals"), BlockConfig::Array { tensor });
                let r = self.cur_ref[*a].clone();
                self.connect(&r, id, "ref")?;
                src(id, "val")
            }
            T::Mul(xs) => {
                let mut acc: Option<Src> = None;
                for (k, x) in xs.iter().enumerate() {
                    path.push(k);
                    let v = self.value(x, path, sub)?;
                    path.pop();
                    acc = Some(match acc {
                        None => v,
                        Some(a) => self.alu(AluOp::Mul, &a, &v)?,
                    });
                }
                acc.unwrap()
            }
            T::Sum(xs) => {
                let mut acc: Option<Src> = None;
                for (k, (s, x)) in xs.iter().enumerate() {
                    path.push(k);
                    let v = self.value(x, path, sub)?;
                    path.pop();
                    acc = Some(match (acc, s) {
                        (None, Sign::Plus) => v,
                        (None, Sign::Minus) => {
                            return Err(LowerError::Unsupported("a sum may not start with a negated term".into()))
                        }
                        (Some(a), Sign::Plus) => self.alu(AluOp::Add, &a, &v)?,
                        (Some(a), Sign::Minus) => self.alu(AluOp::Sub, &a, &v)?,
                    });
                }
                acc.unwrap()
            }
        };
        // variables summed at this node, innermost first
        for (_, v) in sub.iter().rev().filter(|(p, _)| p == path) {
            let id = self.g.add(format!("reduce_{v}"), BlockConfig::Reduce { n: 0, drop_empty: false });
            self.connect(&val, id, "val")?;
            val = src(id, "val");
        }
        Ok(val)
    }
}

fn check_schedule(a: &Assignment, schedule: &[String]) -> Result<BTreeMap<String, usize>, LowerError> {
    let vars = a.vars();
    let sched_set: BTreeSet<&String> = schedule.iter().collect();
    if schedule.len() != vars.len() || sched_set.len() != vars.len() || vars.iter().any(|v| !sched_set.contains(v)) {
        return Err(LowerError::BadSchedule(format!(
            "`{}` is not an ordering of the variables {{{}}}",
            schedule.join(","),
            vars.join(",")
        )));
    }
    Ok(schedule.iter().enumerate().map(|(k, v)| (v.clone(), k)).collect())
}

/// Default schedule: output variables, then reduced ones in order of first
/// appearance.
pub fn default_schedule(a: &Assignment) -> Vec<String> {
    a.vars()
}

pub fn lower(
    a: &Assignment,
    schedule: &[String],
    formats: &BTreeMap<String, Vec<LevelFormat>>,
    opts: &LowerOptions,
) -> Result<CompiledGraph, LowerError> {
    let pos = check_schedule(a, schedule)?;
    let accs: Vec<Access> = a.rhs.accesses().into_iter().cloned().collect();

    let mut mode_orders: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut fmts: BTreeMap<String, Vec<LevelFormat>> = BTreeMap::new();
    for acc in &accs {
        let mut order: Vec<usize> = (0..acc.vars.len()).collect();
        order.sort_by_key(|&m| pos[&acc.vars[m]]);
        if let Some(old) = mode_orders.get(&acc.tensor) {
            if *old != order {
                return Err(LowerError::InconsistentModes(acc.tensor.clone()));
            }
        }
        mode_orders.insert(acc.tensor.clone(), order);
        let f = formats.get(&acc.tensor).cloned().unwrap_or_else(|| vec![LevelFormat::Compressed; acc.vars.len()]);
        if f.len() != acc.vars.len() {
            return Err(LowerError::FormatArity { tensor: acc.tensor.clone(), expected: acc.vars.len(), found: f.len() });
        }
        fmts.insert(acc.tensor.clone(), f);
    }

    // scopes, and the ordering they demand
    let scopes: BTreeMap<String, Vec<usize>> = schedule.iter().map(|v| (v.clone(), a.scope_of(v))).collect();
    for v in schedule {
        for u in schedule {
            let (sv, su) = (&scopes[v], &scopes[u]);
            if su.len() < sv.len() && sv.starts_with(su) && pos[u] > pos[v] {
                return Err(LowerError::Unsupported(format!(
                    "`{v}` is summed inside a subexpression, so it must be scheduled after `{u}`"
                )));
            }
        }
    }

    let mut next = 0;
    let tree = T::build(&a.rhs, &mut next);
    let mut l = Lowerer {
        accs: accs.clone(),
        pos: pos.clone(),
        formats: fmts.clone(),
        opts,
        g: SamGraph::new(&a.to_string()),
        cur_ref: vec![],
        filtering: BTreeSet::new(),
    };
    for acc in &accs {
        let id = l.g.add(format!("root_{}", acc.tensor), BlockConfig::Root);
        l.cur_ref.push(src(id, "ref"));
    }
    let mut crd: BTreeMap<String, Src> = BTreeMap::new();
    for v in schedule {
        let c = l.var(&tree, v, &scopes[v])?;
        crd.insert(v.clone(), c);
    }

    let sub: Vec<(Vec<usize>, String)> =
        schedule.iter().filter(|v| !scopes[*v].is_empty()).map(|v| (scopes[v].clone(), v.clone())).collect();
    let mut val = l.value(&tree, &mut Vec::new(), &sub)?;

    let is_out = |v: &str| a.output.vars.iter().any(|o| o == v);
    let root_vars: Vec<String> = schedule.iter().filter(|v| scopes[*v].is_empty()).cloned().collect();
    let n = root_vars.len();
    let mut alive: Vec<Option<Src>> = vec![None; n];
    for p in (0..n).rev() {
        let v = &root_vars[p];
        let drop = p + 1 < n
            && root_vars[..=p].iter().any(|u| is_out(u))
            && root_vars[p + 1..].iter().any(|u| l.filtering.contains(u));
        if drop {
            let inner = alive[p + 1].clone().unwrap();
            let id = l.g.add(format!("crddrop_{v}_{}", root_vars[p + 1]), BlockConfig::CrdDrop { mode: DropMode::Crd });
            l.connect(&crd[v], id, "outer")?;
            l.connect(&inner, id, "inner")?;
            crd.insert(v.clone(), src(id, "outer"));
            if is_out(&root_vars[p + 1]) {
                crd.insert(root_vars[p + 1].clone(), src(id, "inner"));
            }
        }
        alive[p] = Some(crd[v].clone());
        if !is_out(v) {
            let outs: Vec<&String> = root_vars[p + 1..].iter().filter(|u| is_out(u)).collect();
            let id = l.g.add(format!("reduce_{v}"), BlockConfig::Reduce { n: outs.len() as u8, drop_empty: true });
            match outs.as_slice() {
                [] => {}
                [o] => {
                    l.connect(&crd[*o], id, "crd")?;
                    crd.insert((*o).clone(), src(id, "crd"));
                }
                [o1, o2] => {
                    l.connect(&crd[*o1], id, "crd_outer")?;
                    l.connect(&crd[*o2], id, "crd_inner")?;
                    crd.insert((*o1).clone(), src(id, "crd_outer"));
                    crd.insert((*o2).clone(), src(id, "crd_inner"));
                }
                _ => {
                    return Err(LowerError::Unsupported(format!(
                        "reducing `{v}` above {} output levels needs an order-{} reducer",
                        outs.len(),
                        outs.len()
                    )))
                }
            }
            l.connect(&val, id, "val")?;
            val = src(id, "val");
        }
    }

    let mut out_vars: Vec<String> = a.output.vars.clone();
    out_vars.sort_by_key(|v| pos[v]);
    if !sub.is_empty() {
        if let Some(last) = out_vars.last() {
            let id = l.g.add(format!("valdrop_{last}"), BlockConfig::CrdDrop { mode: DropMode::Val });
            l.connect(&crd[last], id, "crd")?;
            l.connect(&val, id, "val")?;
            crd.insert(last.clone(), src(id, "crd"));
            val = src(id, "val");
        }
    }
    let out = &a.output.tensor;
    for (k, v) in out_vars.iter().enumerate() {
        let id = l.g.add(format!("{out}_{v}"), BlockConfig::Write { tensor: out.clone(), level: k, kind: StreamKind::Crd });
        l.connect(&crd[v], id, "crd")?;
    }
    let id = l.g.add(format!("{out}_vals"), BlockConfig::Write { tensor: out.clone(), level: 0, kind: StreamKind::Val });
    l.connect(&val, id, "val")?;
    l.g.validate()?;

    let output_mode_order = out_vars.iter().map(|v| a.output.vars.iter().position(|o| o == v).unwrap()).collect();
    Ok(CompiledGraph {
        graph: l.g,
        assignment: a.clone(),
        schedule: schedule.to_vec(),
        mode_orders,
        formats: fmts,
        output_mode_order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::custard::ast::parse_einsum;
    use crate::custard::reference::reference_eval;
    use crate::storage::gen_sparse;

    fn sched(s: &str) -> Vec<String> {
        s.chars().map(String::from).collect()
    }

    #[test]
    fn spmv_counts_and_values() {
        let a = parse_einsum("x(i) = B(i,j) * c(j)").unwrap();
        let cg = lower(&a, &sched("ij"), &BTreeMap::new(), &LowerOptions::default()).unwrap();
        let counts = cg.graph.primitive_counts();
        let want = [("scan", 3), ("repeat", 1), ("intersect", 1), ("alu", 1), ("reduce", 1), ("crddrop", 1), ("write", 2), ("array", 2)];
        for (k, n) in want {
            assert_eq!(counts.get(k).copied().unwrap_or(0), n, "{k}");
        }
        let mut inputs = BTreeMap::new();
        inputs.insert("B".to_string(), gen_sparse(&[6, 7], 0.6, 9, 1));
        inputs.insert("c".to_string(), gen_sparse(&[7], 0.5, 9, 2));
        let want = reference_eval(&a, &inputs).unwrap();
        assert_eq!(cg.evaluate(&inputs).unwrap(), want);
        assert_eq!(cg.simulate(&inputs, &SimConfig::default()).unwrap().0, want);
    }

    #[test]
    fn rejects_bad_requests() {
        let a = parse_einsum("X(i,j) = B(i,j) + c(i)").unwrap();
        let e = lower(&a, &sched("ij"), &BTreeMap::new(), &LowerOptions::default());
        assert!(matches!(e, Err(LowerError::Unsupported(_))));
        let a = parse_einsum("x(i) = B(i,j) * c(j)").unwrap();
        assert!(matches!(lower(&a, &sched("i"), &BTreeMap::new(), &LowerOptions::default()), Err(LowerError::BadSchedule(_))));
        let mut f = BTreeMap::new();
        f.insert("B".to_string(), vec![LevelFormat::Dense]);
        assert!(matches!(lower(&a, &sched("ij"), &f, &LowerOptions::default()), Err(LowerError::FormatArity { .. })));
        let a = parse_einsum("x(i) = b(i) - C(i,j) * d(j)").unwrap();
        assert!(matches!(lower(&a, &sched("ji"), &BTreeMap::new(), &LowerOptions::default()), Err(LowerError::Unsupported(_))));
    }
}
