use std::collections::BTreeMap;

use samkit::custard::{lower, parse_einsum, reference_eval, LowerOptions};
use samkit::sim::SimConfig;
use samkit::storage::{gen_sparse, DenseTensor, LevelFormat};

const CLASSES: [&str; 9] = ["scan", "repeat", "intersect", "union", "alu", "reduce", "crddrop", "write", "array"];

struct Case {
    name: &'static str,
    expr: &'static str,
    schedule: &'static str,
    counts: [usize; 9],
}

const CASES: &[Case] = &[
    Case { name: "spmv", expr: "x(i) = B(i,j) * c(j)", schedule: "ij", counts: [3, 1, 1, 0, 1, 1, 1, 2, 2] },
    Case { name: "spmspm_ijk", expr: "X(i,j) = B(i,k) * C(k,j)", schedule: "ijk", counts: [4, 2, 1, 0, 1, 1, 2, 3, 2] },
    Case { name: "spmspm_ikj", expr: "X(i,j) = B(i,k) * C(k,j)", schedule: "ikj", counts: [4, 2, 1, 0, 1, 1, 1, 3, 2] },
    Case { name: "spmspm_kij", expr: "X(i,j) = B(i,k) * C(k,j)", schedule: "kij", counts: [4, 2, 1, 0, 1, 1, 0, 3, 2] },
    Case { name: "sddmm", expr: "X(i,j) = B(i,j) * C(i,k) * D(j,k)", schedule: "ijk", counts: [6, 3, 3, 0, 2, 1, 2, 3, 3] },
    Case { name: "innerprod", expr: "x = B(i,j,k) * C(i,j,k)", schedule: "ijk", counts: [6, 0, 3, 0, 1, 3, 0, 1, 2] },
    Case { name: "ttv", expr: "X(i,j) = B(i,j,k) * c(k)", schedule: "ijk", counts: [4, 2, 1, 0, 1, 1, 2, 3, 2] },
    Case { name: "ttm", expr: "X(i,j,k) = B(i,j,l) * C(k,l)", schedule: "ijkl", counts: [5, 3, 1, 0, 1, 1, 3, 4, 2] },
    Case { name: "mttkrp", expr: "X(i,j) = B(i,k,l) * C(j,k) * D(j,l)", schedule: "ijkl", counts: [7, 5, 3, 0, 2, 2, 3, 3, 3] },
    Case { name: "residual", expr: "x(i) = b(i) - C(i,j) * d(j)", schedule: "ij", counts: [4, 1, 1, 1, 2, 1, 1, 2, 3] },
    Case {
        name: "mattransmul",
        expr: "x(i) = alpha * B(j,i) * c(j) + beta * d(i)",
        schedule: "ij",
        counts: [4, 4, 1, 1, 4, 1, 1, 2, 5],
    },
    Case { name: "mmadd", expr: "X(i,j) = B(i,j) + C(i,j)", schedule: "ij", counts: [4, 0, 0, 2, 1, 0, 0, 3, 2] },
    Case { name: "plus3", expr: "X(i,j) = B(i,j) + C(i,j) + D(i,j)", schedule: "ij", counts: [6, 0, 0, 2, 2, 0, 0, 3, 3] },
    Case { name: "plus2", expr: "X(i,j,k) = B(i,j,k) + C(i,j,k)", schedule: "ijk", counts: [6, 0, 0, 3, 1, 0, 0, 4, 2] },
];

fn sched(s: &str) -> Vec<String> {
    s.chars().map(String::from).collect()
}

fn inputs(expr: &str, seed: u64) -> BTreeMap<String, DenseTensor> {
    let a = parse_einsum(expr).unwrap();
    let dims: BTreeMap<String, usize> = a.vars().into_iter().zip([5, 6, 4, 3]).collect();
    let mut out = BTreeMap::new();
    for (k, acc) in a.rhs.accesses().into_iter().enumerate() {
        let shape: Vec<usize> = acc.vars.iter().map(|v| dims[v]).collect();
        let t = if shape.is_empty() {
            DenseTensor::from_vec(&[], vec![2.0 + k as f64]).unwrap()
        } else {
            gen_sparse(&shape, 0.5, 9, seed + k as u64)
        };
        out.insert(acc.tensor.clone(), t);
    }
    out
}

#[test]
fn primitive_counts_per_expression() {
    for c in CASES {
        let a = parse_einsum(c.expr).unwrap();
        let cg = lower(&a, &sched(c.schedule), &BTreeMap::new(), &LowerOptions::default()).unwrap();
        let counts = cg.graph.primitive_counts();
        let got: Vec<usize> = CLASSES.iter().map(|k| counts.get(*k).copied().unwrap_or(0)).collect();
        assert_eq!(got, c.counts.to_vec(), "{}", c.name);
    }
}

#[test]
fn lowered_graphs_match_reference() {
    for c in CASES {
        let a = parse_einsum(c.expr).unwrap();
        let cg = lower(&a, &sched(c.schedule), &BTreeMap::new(), &LowerOptions::default()).unwrap();
        for seed in [1, 7, 31] {
            let ins = inputs(c.expr, seed);
            let want = reference_eval(&a, &ins).unwrap();
            assert_eq!(cg.evaluate(&ins).unwrap(), want, "{} functional seed {seed}", c.name);
            let (got, _) = cg.simulate(&ins, &SimConfig::default()).unwrap();
            assert_eq!(got, want, "{} simulated seed {seed}", c.name);
        }
    }
}

#[test]
fn formats_skip_and_locate_preserve_values() {
    let a = parse_einsum("X(i,j) = B(i,k) * C(k,j)").unwrap();
    let ins = inputs("X(i,j) = B(i,k) * C(k,j)", 3);
    let want = reference_eval(&a, &ins).unwrap();
    let mut f = BTreeMap::new();
    f.insert("B".to_string(), vec![LevelFormat::Dense, LevelFormat::Compressed]);
    f.insert("C".to_string(), vec![LevelFormat::Dense, LevelFormat::Compressed]);
    for s in ["ijk", "ikj", "jik", "jki", "kij", "kji"] {
        for skip in [false, true] {
            let opts = LowerOptions { skip, ..Default::default() };
            let cg = lower(&a, &sched(s), &f, &opts).unwrap();
            assert_eq!(cg.simulate(&ins, &SimConfig::default()).unwrap().0, want, "{s} skip={skip}");
        }
    }
    // dense C located from B's coordinates
    let a = parse_einsum("x(i) = B(i,j) * c(j)").unwrap();
    let ins = inputs("x(i) = B(i,j) * c(j)", 5);
    let mut f = BTreeMap::new();
    f.insert("c".to_string(), vec![LevelFormat::Dense]);
    let opts = LowerOptions { locate: [("c".to_string(), "j".to_string())].into(), ..Default::default() };
    let cg = lower(&a, &sched("ij"), &f, &opts).unwrap();
    assert_eq!(cg.graph.primitive_counts().get("locate"), Some(&1));
    assert_eq!(cg.simulate(&ins, &SimConfig::default()).unwrap().0, reference_eval(&a, &ins).unwrap());
    // bitvector intersection
    let mut f = BTreeMap::new();
    f.insert("B".to_string(), vec![LevelFormat::Dense, LevelFormat::Bitvector(4)]);
    f.insert("c".to_string(), vec![LevelFormat::Bitvector(4)]);
    let cg = lower(&a, &sched("ij"), &f, &LowerOptions::default()).unwrap();
    assert_eq!(cg.simulate(&ins, &SimConfig::default()).unwrap().0, reference_eval(&a, &ins).unwrap());
}

#[test]
fn graphs_survive_dot_and_rewrap() {
    use samkit::custard::CompiledGraph;
    use samkit::graph::{from_dot, to_dot};
    let a = parse_einsum("X(i,j) = B(i,k) * C(k,j)").unwrap();
    let mut f = BTreeMap::new();
    f.insert("C".to_string(), vec![LevelFormat::Dense, LevelFormat::Compressed]);
    let cg = lower(&a, &sched("ikj"), &f, &LowerOptions { skip: true, ..Default::default() }).unwrap();
    let back = from_dot(&to_dot(&cg.graph)).unwrap();
    let re = CompiledGraph::from_graph(back, a.clone(), &sched("ikj")).unwrap();
    assert_eq!(re.formats, cg.formats);
    assert_eq!(re.mode_orders, cg.mode_orders);
    assert_eq!(re.output_mode_order, cg.output_mode_order);
    let ins = inputs("X(i,j) = B(i,k) * C(k,j)", 9);
    assert_eq!(re.simulate(&ins, &SimConfig::default()).unwrap().0, reference_eval(&a, &ins).unwrap());
}

#[test]
fn reductions_over_an_empty_outer_level_stay_aligned() {
    let a = parse_einsum("x(i) = b(i) - C(i,j) * d(j)").unwrap();
    let cg = lower(&a, &sched("ij"), &BTreeMap::new(), &LowerOptions::default()).unwrap();
    let dense = BTreeMap::from([
        ("b".to_string(), DenseTensor::zeros(&[3])),
        ("C".to_string(), DenseTensor::zeros(&[3, 2])),
        ("d".to_string(), DenseTensor::from_vec(&[2], vec![0.0, 7.0]).unwrap()),
    ]);
    assert_eq!(cg.evaluate(&dense).unwrap(), DenseTensor::zeros(&[3]));
    assert_eq!(cg.simulate(&dense, &SimConfig::default()).unwrap().0, DenseTensor::zeros(&[3]));
}

#[test]
fn table_expressions_hold_on_denser_inputs() {
    for (_, expr, order) in samkit::bench::TABLE1 {
        let a = parse_einsum(expr).unwrap();
        let cg = lower(&a, &sched(order), &BTreeMap::new(), &LowerOptions::default()).unwrap();
        for seed in 0..30 {
            let dense = samkit::bench::random_inputs(expr, seed, 5, (0.0, 0.99)).unwrap();
            let want = reference_eval(&a, &dense).unwrap();
            assert_eq!(cg.simulate(&dense, &SimConfig::default()).unwrap().0, want, "{expr} seed {seed}");
        }
    }
}
