//! Property bodies shared by the proptest suite and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use samkit::bench::TABLE1;
use samkit::blocks::functional as f;
use samkit::custard::{lower, parse_einsum, reference_eval, LowerOptions};
use samkit::sim::{self, SimConfig};
use samkit::storage::{from_levels, gen_sparse, to_levels, DenseTensor, Level, LevelFormat};
use samkit::stream::{StreamKind, Token, TokenStream};

pub type R = Result<(), TestCaseError>;

pub fn crds(c: &BTreeSet<u64>) -> Vec<Token> {
    c.iter().map(|&x| Token::Crd(x)).collect()
}

/// Depth-2 coordinate stream of `fibers`, closed as one outer fiber.
pub fn nested(fibers: &[BTreeSet<u64>]) -> Vec<Token> {
    let mut out = Vec::new();
    for (k, fib) in fibers.iter().enumerate() {
        out.extend(crds(fib));
        out.push(Token::Stop(if k + 1 == fibers.len() { 1 } else { 0 }));
    }
    out.push(Token::Done);
    out
}

pub fn fiber_sets() -> impl Strategy<Value = Vec<BTreeSet<u64>>> {
    prop::collection::vec(prop::collection::btree_set(0u64..40, 0..8), 1..8)
}

pub fn set() -> impl Strategy<Value = BTreeSet<u64>> {
    prop::collection::btree_set(0u64..64, 0..20)
}

pub fn dense(order: usize) -> impl Strategy<Value = DenseTensor> {
    (prop::collection::vec(1usize..6, order), 0.0f64..1.0, any::<u64>())
        .prop_map(|(shape, sp, seed)| gen_sparse(&shape, sp, 9, seed))
}

pub fn fmt_list(order: usize) -> impl Strategy<Value = Vec<LevelFormat>> {
    prop::collection::vec(
        prop_oneof![Just(LevelFormat::Dense), Just(LevelFormat::Compressed), Just(LevelFormat::Bitvector(4))],
        order,
    )
}

/// Text form parses back to the same stream, which stays valid.
pub fn stream_round_trip(fibers: Vec<BTreeSet<u64>>) -> R {
    let s = TokenStream::new(StreamKind::Crd, nested(&fibers));
    prop_assert!(s.validate().is_ok());
    let back = TokenStream::parse(StreamKind::Crd, &s.to_string()).unwrap();
    prop_assert_eq!(back, s);
    Ok(())
}

/// Storage built from a dense tensor densifies back to it.
pub fn storage_round_trip(d: DenseTensor, fmts: Vec<LevelFormat>) -> R {
    let t = to_levels("T", &d, &fmts).unwrap();
    prop_assert!(t.validate().is_ok());
    prop_assert_eq!(from_levels(&t), d);
    Ok(())
}

/// Writing the streams a compressed scanner emits rebuilds the level.
pub fn scan_write_round_trip(d: DenseTensor) -> R {
    let t = to_levels("B", &d, &[LevelFormat::Compressed, LevelFormat::Compressed]).unwrap();
    let (c0, r0) = f::scan(&t.levels[0], &f::root()).unwrap();
    let (c1, _) = f::scan(&t.levels[1], &r0).unwrap();
    for (level, stream) in [(&t.levels[0], c0), (&t.levels[1], c1)] {
        let (seg, crd) = f::write_level(&stream).unwrap();
        let Level::Compressed { seg: s, crd: c } = level else { unreachable!() };
        // an empty top level still records its single (empty) fiber
        if !c.is_empty() {
            prop_assert_eq!(&seg, s);
        }
        prop_assert_eq!(&crd, c);
    }
    Ok(())
}

fn coords_of(s: &[Token]) -> BTreeSet<u64> {
    s.iter().filter_map(|t| if let Token::Crd(c) = t { Some(*c) } else { None }).collect()
}

fn single(c: &BTreeSet<u64>) -> (Vec<Token>, Vec<Token>) {
    let mut crd = crds(c);
    crd.extend([Token::Stop(0), Token::Done]);
    let mut refs: Vec<Token> = (0..c.len() as u64).map(Token::Ref).collect();
    refs.extend([Token::Stop(0), Token::Done]);
    (crd, refs)
}

/// Intersection and union compute set intersection and union, keep the
/// stream shape, and are idempotent.
pub fn merge_laws(a: BTreeSet<u64>, b: BTreeSet<u64>) -> R {
    let (ca, ra) = single(&a);
    let (cb, rb) = single(&b);
    let ins: [&[Token]; 4] = [&ca, &ra, &cb, &rb];
    let i = f::intersect(&ins, &[1, 1]).unwrap();
    let u = f::union(&ins, &[1, 1]).unwrap();
    prop_assert_eq!(coords_of(&i[0]), a.intersection(&b).copied().collect::<BTreeSet<_>>());
    prop_assert_eq!(coords_of(&u[0]), a.union(&b).copied().collect::<BTreeSet<_>>());
    for out in i.iter().chain(&u) {
        let tail: Vec<Token> = out.iter().copied().filter(|t| t.is_control() && *t != Token::Empty).collect();
        prop_assert_eq!(tail, vec![Token::Stop(0), Token::Done]);
    }
    let same: [&[Token]; 4] = [&ca, &ra, &ca, &ra];
    prop_assert_eq!(&f::intersect(&same, &[1, 1]).unwrap()[0], &ca);
    let uu = f::union(&same, &[1, 1]).unwrap();
    prop_assert_eq!(&uu[0], &ca);
    prop_assert!(uu.iter().flatten().all(|t| *t != Token::Empty));
    Ok(())
}

/// Reducers neither lose nor invent value mass.
pub fn sum_conservation(fibers: Vec<BTreeSet<u64>>, seed: u64) -> R {
    let crd = nested(&fibers);
    let vals: Vec<Token> = crd
        .iter()
        .enumerate()
        .map(|(k, t)| match t {
            Token::Crd(_) => Token::Val(((seed as usize + 7 * k) % 9 + 1) as f64),
            other => *other,
        })
        .collect();
    let total: f64 = vals.iter().filter_map(|t| if let Token::Val(v) = t { Some(*v) } else { None }).sum();
    let sum = |s: &[Token]| s.iter().filter_map(|t| if let Token::Val(v) = t { Some(*v) } else { None }).sum::<f64>();
    for drop in [false, true] {
        let sc = f::reduce_scalar(&vals, drop).unwrap();
        prop_assert_eq!(sum(&sc), total);
        let (vc, vv) = f::reduce_vector(&crd, &vals, drop).unwrap();
        prop_assert_eq!(sum(&vv), total);
        prop_assert_eq!(coords_of(&vc), fibers.iter().flatten().copied().collect::<BTreeSet<_>>());
    }
    Ok(())
}

/// The dropper removes exactly the outer coordinates with empty fibers.
pub fn crd_drop_exact(fibers: Vec<BTreeSet<u64>>) -> R {
    prop_assume!(fibers.iter().any(|f| !f.is_empty()));
    let mut outer: Vec<Token> = (0..fibers.len() as u64).map(Token::Crd).collect();
    outer.extend([Token::Stop(0), Token::Done]);
    let (oo, oi) = f::crd_drop(&outer, &nested(&fibers)).unwrap();
    let kept: Vec<BTreeSet<u64>> = fibers.iter().filter(|f| !f.is_empty()).cloned().collect();
    let mut want_outer: Vec<Token> =
        fibers.iter().enumerate().filter(|(_, f)| !f.is_empty()).map(|(k, _)| Token::Crd(k as u64)).collect();
    want_outer.extend([Token::Stop(0), Token::Done]);
    prop_assert_eq!(oo, want_outer);
    prop_assert_eq!(oi, nested(&kept));
    Ok(())
}

/// Results do not depend on channel capacities or skip hints, and the
/// simulator produces the same streams as whole-stream evaluation.
pub fn timing_independence(b: DenseTensor, c: DenseTensor, order: usize) -> R {
    let a = parse_einsum("X(i,j) = B(i,k) * C(k,j)").unwrap();
    let orders = ["ijk", "ikj", "jik", "jki", "kij", "kji"];
    let sched: Vec<String> = orders[order % 6].chars().map(String::from).collect();
    let inputs: BTreeMap<String, DenseTensor> = [("B".to_string(), b), ("C".to_string(), c)].into();
    let want = reference_eval(&a, &inputs).unwrap();
    for skip in [false, true] {
        let cg = lower(&a, &sched, &BTreeMap::new(), &LowerOptions { skip, ..Default::default() }).unwrap();
        let st = cg.prepare(&inputs).unwrap();
        let ev = cg.graph.evaluate(&st).unwrap();
        for cap in [None, Some(2), Some(3)] {
            let run = sim::run(&cg.graph, &st, &SimConfig { capacity: cap, ..Default::default() }).unwrap();
            prop_assert_eq!(&run.written, &ev.written);
        }
        prop_assert_eq!(cg.evaluate(&inputs).unwrap(), want.clone());
    }
    Ok(())
}

/// Two runs on the same inputs give byte-identical reports.
pub fn determinism(b: DenseTensor, c: DenseTensor) -> R {
    let a = parse_einsum("X(i,j) = B(i,k) * C(k,j)").unwrap();
    let sched: Vec<String> = "ikj".chars().map(String::from).collect();
    let cg = lower(&a, &sched, &BTreeMap::new(), &LowerOptions { skip: true, ..Default::default() }).unwrap();
    let inputs: BTreeMap<String, DenseTensor> = [("B".to_string(), b), ("C".to_string(), c)].into();
    let x = cg.simulate(&inputs, &SimConfig::default()).unwrap().1;
    let y = cg.simulate(&inputs, &SimConfig::default()).unwrap().1;
    prop_assert_eq!(serde_json::to_string(&x).unwrap(), serde_json::to_string(&y).unwrap());
    Ok(())
}

/// Simulated output of a table expression equals the dense oracle.
pub fn compiler_correct(case: usize, seed: u64, hi: usize) -> R {
    let (_, expr, order) = TABLE1[case % TABLE1.len()];
    let a = parse_einsum(expr).unwrap();
    let sched: Vec<String> = order.chars().map(String::from).collect();
    let cg = lower(&a, &sched, &BTreeMap::new(), &LowerOptions::default()).unwrap();
    let inputs = samkit::bench::random_inputs(expr, seed, hi, (0.3, 0.99)).unwrap();
    let want = reference_eval(&a, &inputs).unwrap();
    let (got, _) = cg.simulate(&inputs, &SimConfig::default()).unwrap();
    prop_assert_eq!(got, want, "{} seed {}", expr, seed);
    Ok(())
}
