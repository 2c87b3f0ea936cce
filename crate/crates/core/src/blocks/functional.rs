//! Whole-stream semantics of every block.
//!
//! These functions consume complete input streams and return complete output
//! streams. They share no code with the state machines in
//! [`super::machines`], which makes them usable as an oracle for the
//! simulator.

use std::collections::BTreeMap;

use super::{AluOp, BlockError};
use crate::storage::{bit_base, Level};
use crate::stream::{BitWord, Token};

pub type Toks = Vec<Token>;

struct Cursor<'a> {
    s: &'a [Token],
    i: usize,
    block: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(s: &'a [Token], block: &'static str) -> Self {
        Self { s, i: 0, block }
    }

    fn peek(&self) -> Result<Token, BlockError> {
        self.s.get(self.i).copied().ok_or(BlockError::Truncated { block: self.block.into() })
    }

    fn next(&mut self) -> Result<Token, BlockError> {
        let t = self.peek()?;
        self.i += 1;
        Ok(t)
    }
}

fn unexpected(block: &str, token: Token, port: &str) -> BlockError {
    BlockError::UnexpectedToken { block: block.into(), token: token.to_string(), port: port.into() }
}

fn misaligned(block: &str, detail: impl Into<String>) -> BlockError {
    BlockError::ShapeMisaligned { block: block.into(), detail: detail.into() }
}

fn lockstep(block: &str, detail: impl Into<String>) -> BlockError {
    BlockError::LockstepViolation { block: block.into(), detail: detail.into() }
}

fn val_of(t: Token) -> Option<f64> {
    match t {
        Token::Val(v) => Some(v),
        Token::Empty => Some(0.0),
        _ => None,
    }
}

pub fn root() -> Toks {
    vec![Token::Ref(0), Token::Done]
}

/// Prefix popcounts of a bitvector level's words.
pub fn word_bases(words: &[u64]) -> Vec<usize> {
    let mut out = Vec::with_capacity(words.len() + 1);
    out.push(0);
    for w in words {
        out.push(out.last().unwrap() + w.count_ones() as usize);
    }
    out
}

/// Level scanner for any level format. Returns the coordinate stream (or
/// bitvector stream for bitvector levels) and the reference stream.
pub fn scan(level: &Level, refs_in: &[Token]) -> Result<(Toks, Toks), BlockError> {
    let bases = match level {
        Level::Bitvector { words, .. } => word_bases(words),
        _ => vec![],
    };
    let mut cur = Cursor::new(refs_in, "scan");
    let (mut crds, mut refs) = (Vec::new(), Vec::new());
    loop {
        let tok = cur.next()?;
        match tok {
            Token::Ref(_) | Token::Empty => {
                if let Token::Ref(r) = tok {
                    let r = r as usize;
                    match level {
                        Level::Dense { dim } => {
                            for c in 0..*dim {
                                crds.push(Token::Crd(c as u64));
                                refs.push(Token::Ref((r * dim + c) as u64));
                            }
                        }
                        Level::Compressed { seg, crd } => {
                            if r + 1 >= seg.len() {
                                return Err(BlockError::RefOutOfRange { block: "scan".into(), r: r as u64 });
                            }
                            for q in seg[r]..seg[r + 1] {
                                crds.push(Token::Crd(crd[q] as u64));
                                refs.push(Token::Ref(q as u64));
                            }
                        }
                        Level::Bitvector { seg, words, b } => {
                            if r + 1 >= seg.len() {
                                return Err(BlockError::RefOutOfRange { block: "scan".into(), r: r as u64 });
                            }
                            for w in seg[r]..seg[r + 1] {
                                crds.push(Token::Bits(BitWord::new(words[w], *b)));
                                refs.push(Token::Ref(bases[w] as u64));
                            }
                        }
                    }
                }
                let boundary = match cur.peek()? {
                    Token::Stop(n) => {
                        cur.next()?;
                        Token::Stop(n + 1)
                    }
                    _ => Token::Stop(0),
                };
                crds.push(boundary);
                refs.push(boundary);
            }
            Token::Stop(n) => {
                crds.push(Token::Stop(n + 1));
                refs.push(Token::Stop(n + 1));
            }
            Token::Done => {
                crds.push(Token::Done);
                refs.push(Token::Done);
                return Ok((crds, refs));
            }
            other => return Err(unexpected("scan", other, "ref")),
        }
    }
}

/// Consumes the next fiber-carrying token (Ref or Empty) of a lockstep input.
fn take_ref(cur: &mut Cursor, block: &str) -> Result<Token, BlockError> {
    match cur.next()? {
        t @ (Token::Ref(_) | Token::Empty) => Ok(t),
        other => Err(lockstep(block, format!("expected a reference, found {other}"))),
    }
}

fn expect_tok(cur: &mut Cursor, want: Token, block: &str) -> Result<(), BlockError> {
    let got = cur.next()?;
    if got != want {
        return Err(lockstep(block, format!("expected {want}, found {got}")));
    }
    Ok(())
}

/// Replicates each reference across the matching fiber of `repsig`.
pub fn repeat(ref_in: &[Token], repsig: &[Token]) -> Result<Toks, BlockError> {
    let mut refs = Cursor::new(ref_in, "repeat");
    let mut held: Option<Token> = None;
    let mut out = Vec::with_capacity(repsig.len());
    for &tok in repsig {
        match tok {
            Token::Crd(_) => {
                if held.is_none() {
                    held = Some(take_ref(&mut refs, "repeat")?);
                }
                out.push(held.unwrap());
            }
            Token::Stop(n) => {
                if held.is_none() {
                    match refs.peek()? {
                        Token::Stop(m) if n >= 1 && m == n - 1 => {
                            refs.next()?;
                            out.push(tok);
                            continue;
                        }
                        _ => {
                            take_ref(&mut refs, "repeat")?;
                        }
                    }
                }
                out.push(tok);
                held = None;
                if n >= 1 {
                    expect_tok(&mut refs, Token::Stop(n - 1), "repeat")?;
                }
            }
            Token::Done => {
                expect_tok(&mut refs, Token::Done, "repeat")?;
                out.push(Token::Done);
                return Ok(out);
            }
            other => return Err(unexpected("repeat", other, "repsig")),
        }
    }
    Err(BlockError::Truncated { block: "repeat".into() })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum MergeKind {
    Intersect,
    Union,
}

/// Splits port-ordered merge inputs (`crd0, ref0_*, crd1, ...`) into groups.
fn merge_groups<'a>(inputs: &[&'a [Token]], refs: &[usize]) -> Result<Vec<(&'a [Token], Vec<&'a [Token]>)>, BlockError> {
    let need: usize = refs.iter().map(|k| k + 1).sum();
    if inputs.len() != need {
        return Err(BlockError::Config { block: "merge".into(), detail: format!("{} inputs for {need} ports", inputs.len()) });
    }
    let mut at = 0;
    let mut out = Vec::new();
    for &k in refs {
        out.push((inputs[at], inputs[at + 1..at + 1 + k].to_vec()));
        at += 1 + k;
    }
    Ok(out)
}

fn merge(kind: MergeKind, inputs: &[&[Token]], refs: &[usize]) -> Result<Vec<Toks>, BlockError> {
    let name = if kind == MergeKind::Intersect { "intersect" } else { "union" };
    let groups = merge_groups(inputs, refs)?;
    let nout = 1 + refs.iter().sum::<usize>();
    let mut out: Vec<Toks> = vec![Vec::new(); nout];
    let mut idx = vec![0usize; groups.len()];
    let head = |g: usize, idx: &[usize]| -> Result<Token, BlockError> {
        groups[g].0.get(idx[g]).copied().ok_or(BlockError::Truncated { block: name.into() })
    };
    loop {
        let heads: Vec<Token> = (0..groups.len()).map(|g| head(g, &idx)).collect::<Result<_, _>>()?;
        if heads.iter().all(|t| *t == Token::Done) {
            for o in out.iter_mut() {
                o.push(Token::Done);
            }
            return Ok(out);
        }
        if heads.iter().all(|t| t.is_control()) {
            let first = heads[0];
            if heads.iter().any(|t| *t != first) {
                return Err(misaligned(name, format!("control tokens differ: {heads:?}")));
            }
            for (g, (_, rs)) in groups.iter().enumerate() {
                for r in rs {
                    if r.get(idx[g]) != Some(&first) {
                        return Err(misaligned(name, "reference stream does not match coordinate stream"));
                    }
                }
            }
            for o in out.iter_mut() {
                o.push(first);
            }
            idx.iter_mut().for_each(|i| *i += 1);
            continue;
        }
        let crd_of = |t: &Token| match t {
            Token::Crd(c) => Some(*c),
            _ => None,
        };
        match kind {
            MergeKind::Intersect => {
                let all_crd: Option<Vec<u64>> = heads.iter().map(crd_of).collect();
                if let Some(cs) = &all_crd {
                    if cs.iter().all(|c| *c == cs[0]) {
                        out[0].push(Token::Crd(cs[0]));
                        let mut o = 1;
                        for (g, (_, rs)) in groups.iter().enumerate() {
                            for r in rs {
                                out[o].push(r[idx[g]]);
                                o += 1;
                            }
                        }
                        idx.iter_mut().for_each(|i| *i += 1);
                        continue;
                    }
                }
                let max = heads.iter().map(|t| crd_of(t).unwrap_or(u64::MAX)).max().unwrap();
                for (g, t) in heads.iter().enumerate() {
                    if matches!(crd_of(t), Some(c) if c < max) {
                        idx[g] += 1;
                    }
                }
            }
            MergeKind::Union => {
                let min = heads.iter().filter_map(crd_of).min().unwrap();
                out[0].push(Token::Crd(min));
                let mut o = 1;
                for (g, (_, rs)) in groups.iter().enumerate() {
                    let here = crd_of(&heads[g]) == Some(min);
                    for r in rs {
                        out[o].push(if here { r[idx[g]] } else { Token::Empty });
                        o += 1;
                    }
                    if here {
                        idx[g] += 1;
                    }
                }
            }
        }
    }
}

/// m-ary intersection. `inputs` are in port order; outputs are the merged
/// coordinates followed by every input reference stream.
pub fn intersect(inputs: &[&[Token]], refs: &[usize]) -> Result<Vec<Toks>, BlockError> {
    merge(MergeKind::Intersect, inputs, refs)
}

/// m-ary union; absent inputs contribute `N` on their reference streams.
pub fn union(inputs: &[&[Token]], refs: &[usize]) -> Result<Vec<Toks>, BlockError> {
    merge(MergeKind::Union, inputs, refs)
}

/// Intersection of bitvector streams. Inputs are `bv0, ref0, bv1, ref1, ...`;
/// outputs are a coordinate stream and one reference stream per input.
pub fn bv_intersect(inputs: &[&[Token]]) -> Result<Vec<Toks>, BlockError> {
    let m = inputs.len() / 2;
    let mut out: Vec<Toks> = vec![Vec::new(); m + 1];
    let mut idx = vec![0usize; m];
    let mut word = 0u64;
    loop {
        let heads: Vec<Token> = (0..m)
            .map(|g| inputs[2 * g].get(idx[g]).copied().ok_or(BlockError::Truncated { block: "bvintersect".into() }))
            .collect::<Result<_, _>>()?;
        if heads.iter().all(|t| t.is_control()) {
            if heads.iter().any(|t| *t != heads[0]) {
                return Err(misaligned("bvintersect", format!("control tokens differ: {heads:?}")));
            }
            for o in out.iter_mut() {
                o.push(heads[0]);
            }
            if heads[0] == Token::Done {
                return Ok(out);
            }
            idx.iter_mut().for_each(|i| *i += 1);
            word = 0;
            continue;
        }
        let words: Option<Vec<BitWord>> = heads
            .iter()
            .map(|t| match t {
                Token::Bits(w) => Some(*w),
                _ => None,
            })
            .collect();
        match words {
            Some(ws) => {
                let and = ws.iter().fold(u64::MAX, |acc, w| acc & w.bits);
                let b = ws[0].width as u64;
                for k in 0..b as u32 {
                    if and >> k & 1 == 1 {
                        out[0].push(Token::Crd(word * b + k as u64));
                        for g in 0..m {
                            let base = match inputs[2 * g + 1].get(idx[g]) {
                                Some(Token::Ref(r)) => *r,
                                other => {
                                    return Err(misaligned("bvintersect", format!("word without reference: {other:?}")))
                                }
                            };
                            out[g + 1].push(Token::Ref(base + ws[g].rank(k) as u64));
                        }
                    }
                }
                idx.iter_mut().for_each(|i| *i += 1);
                word += 1;
            }
            None => {
                // one side ran out of words; the rest of the fiber cannot match
                for (g, t) in heads.iter().enumerate() {
                    if matches!(t, Token::Bits(_)) {
                        idx[g] += 1;
                    }
                }
            }
        }
    }
}

pub fn array_load(vals: &[f64], refs: &[Token]) -> Result<Toks, BlockError> {
    refs.iter()
        .map(|&t| match t {
            Token::Ref(r) => vals
                .get(r as usize)
                .map(|v| Token::Val(*v))
                .ok_or(BlockError::RefOutOfRange { block: "array".into(), r }),
            Token::Empty | Token::Stop(_) | Token::Done => Ok(t),
            other => Err(unexpected("array", other, "ref")),
        })
        .collect()
}

/// Scatters `data` into a zeroed memory of `capacity` values.
pub fn array_store(refs: &[Token], data: &[Token], capacity: usize) -> Result<Vec<f64>, BlockError> {
    let mut mem = vec![0.0; capacity];
    if refs.len() != data.len() {
        return Err(misaligned("array_store", "stream lengths differ"));
    }
    for (&r, &d) in refs.iter().zip(data) {
        match (r, d) {
            (Token::Ref(r), d) => {
                let v = val_of(d).ok_or_else(|| misaligned("array_store", format!("{d} paired with a reference")))?;
                *mem.get_mut(r as usize).ok_or(BlockError::RefOutOfRange { block: "array_store".into(), r })? = v;
            }
            (Token::Empty, _) => {}
            (a, b) if a == b => {}
            (a, b) => return Err(misaligned("array_store", format!("{a} vs {b}"))),
        }
    }
    Ok(mem)
}

/// A reducer closing an empty outer level cannot tell it from one empty
/// inner fiber, so it emits a lone zero there. Such a phantom shows up as a
/// zero facing the closing stop of an empty fiber on an aligned input.
fn phantom(fresh: bool, stop: Token, v: Token) -> bool {
    fresh && matches!(stop, Token::Stop(_)) && v == Token::Val(0.0)
}

pub fn alu(op: AluOp, a: &[Token], b: &[Token]) -> Result<Toks, BlockError> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    let mut fresh = true;
    while i < a.len() && j < b.len() {
        let (x, y) = (a[i], b[j]);
        if phantom(fresh, x, y) {
            j += 1;
            continue;
        }
        if phantom(fresh, y, x) {
            i += 1;
            continue;
        }
        out.push(match (val_of(x), val_of(y)) {
            (Some(x), Some(y)) => Token::Val(op.apply(x, y)),
            _ if x == y && x.is_control() => x,
            _ => return Err(misaligned("alu", format!("{x} vs {y}"))),
        });
        fresh = val_of(x).is_none();
        i += 1;
        j += 1;
    }
    if i != a.len() || j != b.len() {
        return Err(misaligned("alu", format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(out)
}

/// Sums each innermost fiber into one value.
pub fn reduce_scalar(vals: &[Token], drop_empty: bool) -> Result<Toks, BlockError> {
    let mut out = Vec::new();
    let mut sum = 0.0;
    let mut any = false;
    for &t in vals {
        match t {
            Token::Val(_) | Token::Empty => {
                sum += val_of(t).unwrap();
                any = true;
            }
            Token::Stop(n) => {
                if any || !drop_empty {
                    out.push(Token::Val(sum));
                }
                if n >= 1 {
                    out.push(Token::Stop(n - 1));
                }
                sum = 0.0;
                any = false;
            }
            Token::Done => {
                if any {
                    out.push(Token::Val(sum));
                }
                out.push(Token::Done);
                return Ok(out);
            }
            other => return Err(unexpected("reduce", other, "val")),
        }
    }
    Err(BlockError::Truncated { block: "reduce".into() })
}

/// Stop token whose emission waits until the next fiber proves to be
/// non-empty, so that dropped fibers do not leave stray boundaries.
#[derive(Default)]
struct Pending(Option<u32>);

impl Pending {
    fn flush(&mut self, outs: &mut [&mut Toks], offset: &[u32]) {
        if let Some(l) = self.0.take() {
            for (o, d) in outs.iter_mut().zip(offset) {
                o.push(Token::Stop(l + d));
            }
        }
    }

    fn raise(&mut self, l: u32) {
        self.0 = self.0.map(|p| p.max(l));
    }
}

/// Accumulates coordinates within each group delimited by a stop of level
/// one or more, emitting them sorted with summed values.
pub fn reduce_vector(crd: &[Token], vals: &[Token], drop_empty: bool) -> Result<(Toks, Toks), BlockError> {
    if crd.len() != vals.len() {
        return Err(misaligned("reduce", "crd and val lengths differ"));
    }
    let (mut oc, mut ov) = (Vec::new(), Vec::new());
    let mut acc: BTreeMap<u64, f64> = BTreeMap::new();
    let mut pending = Pending::default();
    for (&c, &v) in crd.iter().zip(vals) {
        match (c, v) {
            (Token::Crd(c), v) if val_of(v).is_some() => *acc.entry(c).or_insert(0.0) += val_of(v).unwrap(),
            (Token::Stop(0), Token::Stop(0)) => {}
            (Token::Stop(n), Token::Stop(m)) if n == m => {
                if !acc.is_empty() {
                    pending.flush(&mut [&mut oc, &mut ov], &[0, 0]);
                    for (k, s) in std::mem::take(&mut acc) {
                        oc.push(Token::Crd(k));
                        ov.push(Token::Val(s));
                    }
                    if drop_empty {
                        pending.0 = Some(n - 1);
                    } else {
                        oc.push(Token::Stop(n - 1));
                        ov.push(Token::Stop(n - 1));
                    }
                } else if drop_empty {
                    pending.raise(n - 1);
                } else {
                    oc.push(Token::Stop(n - 1));
                    ov.push(Token::Stop(n - 1));
                }
            }
            (Token::Done, Token::Done) => {
                for (k, s) in std::mem::take(&mut acc) {
                    oc.push(Token::Crd(k));
                    ov.push(Token::Val(s));
                }
                pending.flush(&mut [&mut oc, &mut ov], &[0, 0]);
                oc.push(Token::Done);
                ov.push(Token::Done);
                return Ok((oc, ov));
            }
            (a, b) => return Err(misaligned("reduce", format!("{a} vs {b}"))),
        }
    }
    Err(BlockError::Truncated { block: "reduce".into() })
}

/// Accumulates a matrix per group of the outer coordinate stream delimited by
/// stops of level one or more.
pub fn reduce_matrix(
    outer: &[Token],
    inner: &[Token],
    vals: &[Token],
    drop_empty: bool,
) -> Result<(Toks, Toks, Toks), BlockError> {
    if inner.len() != vals.len() {
        return Err(misaligned("reduce", "inner crd and val lengths differ"));
    }
    let (mut oo, mut oi, mut ov) = (Vec::new(), Vec::new(), Vec::new());
    let mut acc: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    let mut pending = Pending::default();
    let mut j = 0usize;
    let mut expect: Option<u32> = None;
    let inner_at = |j: usize| -> Result<(Token, Token), BlockError> {
        match (inner.get(j), vals.get(j)) {
            (Some(a), Some(b)) => Ok((*a, *b)),
            _ => Err(BlockError::Truncated { block: "reduce".into() }),
        }
    };
    for &t in outer {
        match t {
            Token::Crd(i) => {
                if expect.is_some() {
                    return Err(lockstep("reduce", "outer coordinate where a stop was due"));
                }
                loop {
                    let (c, v) = inner_at(j)?;
                    j += 1;
                    match (c, v) {
                        (Token::Crd(c), v) if val_of(v).is_some() => {
                            *acc.entry((i, c)).or_insert(0.0) += val_of(v).unwrap()
                        }
                        (Token::Stop(l), Token::Stop(m)) if l == m => {
                            if l >= 1 {
                                expect = Some(l - 1);
                            }
                            break;
                        }
                        (a, b) => return Err(misaligned("reduce", format!("{a} vs {b}"))),
                    }
                }
            }
            Token::Stop(m) => {
                if expect == Some(m) {
                    expect = None;
                } else if expect.is_some() {
                    return Err(lockstep("reduce", format!("outer S{m} does not close the inner fiber")));
                } else {
                    let (c, v) = inner_at(j)?;
                    j += 1;
                    if c != Token::Stop(m + 1) || v != c {
                        return Err(lockstep("reduce", format!("expected S{} on inner, found {c}", m + 1)));
                    }
                }
                if m == 0 {
                    continue;
                }
                if !acc.is_empty() {
                    pending.flush(&mut [&mut oo, &mut oi, &mut ov], &[0, 1, 1]);
                    let entries = std::mem::take(&mut acc);
                    let mut row: Option<u64> = None;
                    for ((i, c), s) in entries {
                        if row != Some(i) {
                            if row.is_some() {
                                oi.push(Token::Stop(0));
                                ov.push(Token::Stop(0));
                            }
                            oo.push(Token::Crd(i));
                            row = Some(i);
                        }
                        oi.push(Token::Crd(c));
                        ov.push(Token::Val(s));
                    }
                    if drop_empty {
                        pending.0 = Some(m - 1);
                    } else {
                        oo.push(Token::Stop(m - 1));
                        oi.push(Token::Stop(m));
                        ov.push(Token::Stop(m));
                    }
                } else if drop_empty {
                    pending.raise(m - 1);
                } else {
                    oo.push(Token::Stop(m - 1));
                    oi.push(Token::Stop(m));
                    ov.push(Token::Stop(m));
                }
            }
            Token::Done => {
                pending.flush(&mut [&mut oo, &mut oi, &mut ov], &[0, 1, 1]);
                for o in [&mut oo, &mut oi, &mut ov] {
                    o.push(Token::Done);
                }
                return Ok((oo, oi, ov));
            }
            other => return Err(unexpected("reduce", other, "crd_outer")),
        }
    }
    Err(BlockError::Truncated { block: "reduce".into() })
}

/// Removes outer coordinates whose inner fiber is empty, together with
/// those fibers.
pub fn crd_drop(outer: &[Token], inner: &[Token]) -> Result<(Toks, Toks), BlockError> {
    let mut ic = Cursor::new(inner, "crddrop");
    let (mut oo, mut oi) = (Vec::new(), Vec::new());
    let mut expect: Option<u32> = None;
    let mut pending = Pending::default();
    for &t in outer {
        match t {
            Token::Crd(_) => {
                if expect.is_some() {
                    return Err(lockstep("crddrop", "outer coordinate where a stop was due"));
                }
                let mut fiber = Vec::new();
                let level = loop {
                    match ic.next()? {
                        Token::Stop(l) => break l,
                        Token::Done => return Err(lockstep("crddrop", "inner ended inside a fiber")),
                        p => fiber.push(p),
                    }
                };
                if fiber.is_empty() {
                    pending.raise(level);
                } else {
                    pending.flush(&mut [&mut oi], &[0]);
                    oo.push(t);
                    oi.extend(fiber);
                    pending.0 = Some(level);
                }
                if level >= 1 {
                    expect = Some(level - 1);
                }
            }
            Token::Stop(n) => {
                if expect == Some(n) {
                    expect = None;
                } else if expect.is_some() {
                    return Err(lockstep("crddrop", format!("outer S{n} does not close the inner fiber")));
                } else {
                    expect_tok(&mut ic, Token::Stop(n + 1), "crddrop")?;
                    pending.raise(n + 1);
                }
                oo.push(t);
            }
            Token::Done => {
                expect_tok(&mut ic, Token::Done, "crddrop")?;
                pending.flush(&mut [&mut oi], &[0]);
                oo.push(Token::Done);
                oi.push(Token::Done);
                return Ok((oo, oi));
            }
            other => return Err(unexpected("crddrop", other, "outer")),
        }
    }
    Err(BlockError::Truncated { block: "crddrop".into() })
}

/// Removes aligned (coordinate, value) pairs whose value is zero or empty.
pub fn val_drop(crd: &[Token], vals: &[Token]) -> Result<(Toks, Toks), BlockError> {
    let (mut oc, mut ov) = (Vec::new(), Vec::new());
    let (mut i, mut j) = (0, 0);
    let mut fresh = true;
    while i < crd.len() && j < vals.len() {
        let (c, v) = (crd[i], vals[j]);
        if phantom(fresh, c, v) {
            j += 1;
            continue;
        }
        match (c, v) {
            (Token::Crd(_), v) if val_of(v).is_some() => {
                if val_of(v).unwrap() != 0.0 {
                    oc.push(c);
                    ov.push(v);
                }
            }
            (a, b) if a == b && a.is_control() => {
                oc.push(a);
                ov.push(b);
            }
            (a, b) => return Err(misaligned("crddrop", format!("{a} vs {b}"))),
        }
        fresh = c.is_control();
        i += 1;
        j += 1;
    }
    if i != crd.len() || j != vals.len() {
        return Err(misaligned("crddrop", "crd and val lengths differ"));
    }
    Ok((oc, ov))
}

/// Builds `(seg, crd)` arrays from a coordinate stream.
pub fn write_level(s: &[Token]) -> Result<(Vec<usize>, Vec<usize>), BlockError> {
    let mut seg = vec![0];
    let mut crd = Vec::new();
    let mut open = false;
    for &t in s {
        match t {
            Token::Crd(c) => {
                crd.push(c as usize);
                open = true;
            }
            Token::Stop(_) => {
                seg.push(crd.len());
                open = false;
            }
            Token::Done => {
                if open {
                    seg.push(crd.len());
                }
                return Ok((seg, crd));
            }
            other => return Err(unexpected("write", other, "crd")),
        }
    }
    Err(BlockError::Truncated { block: "write".into() })
}

pub fn write_vals(s: &[Token]) -> Result<Vec<f64>, BlockError> {
    let mut out = Vec::new();
    for &t in s {
        match t {
            Token::Val(_) | Token::Empty => out.push(val_of(t).unwrap()),
            Token::Stop(_) => {}
            Token::Done => return Ok(out),
            other => return Err(unexpected("write", other, "val")),
        }
    }
    Err(BlockError::Truncated { block: "write".into() })
}

/// Position of coordinate `c` in the fiber of `level` under parent `parent`.
pub fn locate_in(level: &Level, parent: u64, c: u64) -> Result<Option<u64>, BlockError> {
    let r = parent as usize;
    match level {
        Level::Dense { dim } => Ok(((c as usize) < *dim).then_some(parent * *dim as u64 + c)),
        Level::Compressed { seg, crd } => {
            if r + 1 >= seg.len() {
                return Err(BlockError::RefOutOfRange { block: "locate".into(), r: parent });
            }
            let fiber = &crd[seg[r]..seg[r + 1]];
            Ok(fiber.binary_search(&(c as usize)).ok().map(|k| (seg[r] + k) as u64))
        }
        Level::Bitvector { seg, words, b } => {
            if r + 1 >= seg.len() {
                return Err(BlockError::RefOutOfRange { block: "locate".into(), r: parent });
            }
            let (w, k) = (c as usize / *b as usize, c as u32 % *b as u32);
            if seg[r] + w >= seg[r + 1] || words[seg[r] + w] >> k & 1 == 0 {
                return Ok(None);
            }
            let word = BitWord::new(words[seg[r] + w], *b);
            Ok(Some((bit_base(words, seg[r] + w) + word.rank(k) as usize) as u64))
        }
    }
}

/// Looks up each coordinate of `crd` in the follower level. Hits emit the
/// coordinate, the leader reference and the found position; misses are
/// dropped.
pub fn locate(level: &Level, crd: &[Token], leader: &[Token], parent: &[Token]) -> Result<(Toks, Toks, Toks), BlockError> {
    if crd.len() != leader.len() {
        return Err(misaligned("locate", "crd and ref lengths differ"));
    }
    let mut par = Cursor::new(parent, "locate");
    let (mut oc, mut or, mut of) = (Vec::new(), Vec::new(), Vec::new());
    let mut held: Option<Token> = None;
    for (&c, &l) in crd.iter().zip(leader) {
        match c {
            Token::Crd(x) => {
                if held.is_none() {
                    held = Some(take_ref(&mut par, "locate")?);
                }
                if let Some(Token::Ref(p)) = held {
                    if let Some(pos) = locate_in(level, p, x)? {
                        oc.push(c);
                        or.push(l);
                        of.push(Token::Ref(pos));
                    }
                }
            }
            Token::Stop(n) => {
                if l != c {
                    return Err(misaligned("locate", format!("{c} vs {l}")));
                }
                for o in [&mut oc, &mut or, &mut of] {
                    o.push(c);
                }
                if held.is_none() {
                    match par.peek()? {
                        Token::Stop(m) if n >= 1 && m == n - 1 => {
                            par.next()?;
                            continue;
                        }
                        _ => {
                            take_ref(&mut par, "locate")?;
                        }
                    }
                }
                held = None;
                if n >= 1 {
                    expect_tok(&mut par, Token::Stop(n - 1), "locate")?;
                }
            }
            Token::Done => {
                expect_tok(&mut par, Token::Done, "locate")?;
                for o in [&mut oc, &mut or, &mut of] {
                    o.push(Token::Done);
                }
                return Ok((oc, or, of));
            }
            other => return Err(unexpected("locate", other, "crd")),
        }
    }
    Err(BlockError::Truncated { block: "locate".into() })
}

fn pack_words(coords: &[u64], b: u8) -> Vec<Token> {
    let Some(&last) = coords.last() else { return vec![] };
    let bw = b as u64;
    let mut words = vec![0u64; (last / bw + 1) as usize];
    for &c in coords {
        words[(c / bw) as usize] |= 1 << (c % bw);
    }
    words.into_iter().map(|w| Token::Bits(BitWord::new(w, b))).collect()
}

/// Packs each fiber's coordinates into `b`-bit words.
pub fn bv_convert(b: u8, crd: &[Token]) -> Result<Toks, BlockError> {
    let mut out = Vec::new();
    let mut fiber = Vec::new();
    for &t in crd {
        match t {
            Token::Crd(c) => fiber.push(c),
            Token::Stop(_) | Token::Done => {
                out.extend(pack_words(&fiber, b));
                fiber.clear();
                out.push(t);
                if t == Token::Done {
                    return Ok(out);
                }
            }
            other => return Err(unexpected("bvconvert", other, "crd")),
        }
    }
    Err(BlockError::Truncated { block: "bvconvert".into() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{StreamKind, TokenStream};

    fn t(kind: StreamKind, s: &str) -> Toks {
        TokenStream::parse(kind, s).unwrap().tokens
    }
    fn c(s: &str) -> Toks {
        t(StreamKind::Crd, s)
    }
    fn r(s: &str) -> Toks {
        t(StreamKind::Ref, s)
    }
    fn v(s: &str) -> Toks {
        t(StreamKind::Val, s)
    }
    fn bv(s: &str) -> Toks {
        t(StreamKind::Bv, s)
    }

    fn fig2_levels() -> (Level, Level, Vec<f64>) {
        (
            Level::Compressed { seg: vec![0, 3], crd: vec![0, 1, 3] },
            Level::Compressed { seg: vec![0, 1, 3, 5], crd: vec![1, 0, 2, 1, 3] },
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
        )
    }

    #[test]
    fn scan_compressed_examples() {
        let (bi, bj, _) = fig2_levels();
        assert_eq!(scan(&bi, &r("0,D")).unwrap(), (c("0,1,3,S0,D"), r("0,1,2,S0,D")));
        assert_eq!(
            scan(&bj, &r("0,1,2,S0,D")).unwrap(),
            (c("1,S0,0,2,S0,1,3,S1,D"), r("0,S0,1,2,S0,3,4,S1,D"))
        );
        assert_eq!(scan(&bi, &r("D")).unwrap(), (c("D"), r("D")));
        assert!(matches!(scan(&bi, &r("5,D")), Err(BlockError::RefOutOfRange { .. })));
        // an empty reference yields an empty fiber
        assert_eq!(scan(&bj, &r("N,1,S0,D")).unwrap().0, c("S0,0,2,S1,D"));
    }

    #[test]
    fn scan_dense_examples() {
        let d3 = Level::Dense { dim: 3 };
        assert_eq!(scan(&d3, &r("0,D")).unwrap(), (c("0,1,2,S0,D"), r("0,1,2,S0,D")));
        let d2 = Level::Dense { dim: 2 };
        assert_eq!(scan(&d2, &r("0,1,S0,D")).unwrap(), (c("0,1,S0,0,1,S1,D"), r("0,1,S0,2,3,S1,D")));
        let d0 = Level::Dense { dim: 0 };
        assert_eq!(scan(&d0, &r("0,1,S0,D")).unwrap().0, c("S0,S1,D"));
    }

    #[test]
    fn scan_bitvector_example() {
        // coordinates {0, 2, 6, 8, 9} in 4-bit words
        let level = Level::Bitvector { seg: vec![0, 3], words: vec![0b0101, 0b0100, 0b0011], b: 4 };
        let (bits, refs) = scan(&level, &r("0,D")).unwrap();
        assert_eq!(bits, bv("B:0101,B:0100,B:0011,S0,D"));
        assert_eq!(refs, r("0,2,3,S0,D"));
        let single = Level::Bitvector { seg: vec![0, 2], words: vec![0, 0b0001], b: 4 };
        assert_eq!(scan(&single, &r("0,D")).unwrap().0, bv("B:0000,B:0001,S0,D"));
    }

    #[test]
    fn repeat_examples() {
        assert_eq!(repeat(&r("0,D"), &c("0,2,6,8,9,S0,D")).unwrap(), r("0,0,0,0,0,S0,D"));
        assert_eq!(repeat(&r("5,7,S0,D"), &c("0,S0,1,2,S1,D")).unwrap(), r("5,S0,7,7,S1,D"));
        assert_eq!(repeat(&r("D"), &c("D")).unwrap(), r("D"));
        assert_eq!(repeat(&r("N,3,S0,D"), &c("0,1,S0,2,S1,D")).unwrap(), r("N,N,S0,3,S1,D"));
        // an empty repeat-signal fiber still consumes its reference
        assert_eq!(repeat(&r("4,5,S0,D"), &c("S0,1,S1,D")).unwrap(), r("S0,5,S1,D"));
        assert!(matches!(repeat(&r("D"), &c("0,S0,D")), Err(BlockError::LockstepViolation { .. })));
    }

    #[test]
    fn intersect_examples() {
        let out = intersect(&[&c("0,2,3,S0,D"), &r("0,1,2,S0,D"), &c("2,3,4,S0,D"), &r("0,1,2,S0,D")], &[1, 1]).unwrap();
        assert_eq!(out, vec![c("2,3,S0,D"), r("1,2,S0,D"), r("0,1,S0,D")]);
        let out = intersect(&[&c("0,1,S0,D"), &r("0,1,S0,D"), &c("2,3,S0,D"), &r("0,1,S0,D")], &[1, 1]).unwrap();
        assert_eq!(out[0], c("S0,D"));
        let a = c("0,4,S0,1,S1,D");
        let ar = r("3,4,S0,5,S1,D");
        let out = intersect(&[&a, &ar, &a, &ar], &[1, 1]).unwrap();
        assert_eq!(out, vec![a.clone(), ar.clone(), ar.clone()]);
        let out = intersect(&[&c("1,S0,D"), &r("0,S0,D"), &c("1,S1,D"), &r("0,S1,D")], &[1, 1]);
        assert!(matches!(out, Err(BlockError::ShapeMisaligned { .. })));
    }

    #[test]
    fn union_examples() {
        let out = union(&[&c("0,2,S0,D"), &r("0,1,S0,D"), &c("1,2,S0,D"), &r("0,1,S0,D")], &[1, 1]).unwrap();
        assert_eq!(out, vec![c("0,1,2,S0,D"), r("0,N,1,S0,D"), r("N,0,1,S0,D")]);
        let out = union(&[&c("0,2,S0,D"), &r("0,1,S0,D"), &c("S0,D"), &r("S0,D")], &[1, 1]).unwrap();
        assert_eq!(out, vec![c("0,2,S0,D"), r("0,1,S0,D"), r("N,N,S0,D")]);
        // three-way union with two references riding on the last input
        let out = union(
            &[&c("0,S0,D"), &r("0,S0,D"), &c("1,S0,D"), &r("0,S0,D"), &c("0,1,S0,D"), &r("4,5,S0,D"), &r("6,7,S0,D")],
            &[1, 1, 2],
        )
        .unwrap();
        assert_eq!(out[0], c("0,1,S0,D"));
        assert_eq!(out[3], r("4,5,S0,D"));
        assert_eq!(out[4], r("6,7,S0,D"));
    }

    #[test]
    fn bv_intersect_words() {
        let a = bv("B:0101,B:0100,B:0011,S0,D");
        let ar = r("0,2,3,S0,D");
        let b = bv("B:0111,B:0000,S0,D");
        let br = r("0,3,S0,D");
        let out = bv_intersect(&[&a, &ar, &b, &br]).unwrap();
        assert_eq!(out, vec![c("0,2,S0,D"), r("0,1,S0,D"), r("0,2,S0,D")]);
    }

    #[test]
    fn array_examples() {
        let (_, _, vals) = fig2_levels();
        assert_eq!(array_load(&vals, &r("0,S0,1,2,S0,3,4,S1,D")).unwrap(), v("1,S0,2,3,S0,4,5,S1,D"));
        assert_eq!(array_load(&vals, &r("N,0,S0,D")).unwrap(), v("N,1,S0,D"));
        assert_eq!(array_load(&vals, &r("D")).unwrap(), v("D"));
        assert!(array_load(&vals, &r("9,D")).is_err());
        assert_eq!(array_store(&r("0,1,S0,D"), &v("7,8,S0,D"), 2).unwrap(), vec![7.0, 8.0]);
        assert_eq!(array_store(&r("D"), &v("D"), 0).unwrap(), Vec::<f64>::new());
        assert_eq!(array_store(&r("2,0,S0,D"), &v("9,1,S0,D"), 3).unwrap(), vec![1.0, 0.0, 9.0]);
    }

    #[test]
    fn alu_examples() {
        assert_eq!(alu(AluOp::Mul, &v("2,3,S0,D"), &v("4,5,S0,D")).unwrap(), v("8,15,S0,D"));
        assert_eq!(alu(AluOp::Add, &v("N,3,S0,D"), &v("2,N,S0,D")).unwrap(), v("2,3,S0,D"));
        assert_eq!(alu(AluOp::Sub, &v("5,S0,D"), &v("N,S0,D")).unwrap(), v("5,S0,D"));
        assert!(alu(AluOp::Add, &v("1,S0,D"), &v("S0,D")).is_err());
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(reduce_scalar(&v("1,S0,2,3,S0,4,5,S1,D"), true).unwrap(), v("1,5,9,S0,D"));
        assert_eq!(reduce_scalar(&v("S0,D"), false).unwrap(), v("0,D"));
        assert_eq!(reduce_scalar(&v("S0,D"), true).unwrap(), v("D"));
        assert_eq!(reduce_scalar(&v("D"), true).unwrap(), v("D"));
        let (oc, ov) = reduce_vector(&c("1,S0,0,2,S0,1,3,S1,D"), &v("1,S0,2,3,S0,4,5,S1,D"), true).unwrap();
        assert_eq!(oc, c("0,1,2,3,S0,D"));
        assert_eq!(ov, v("2,5,3,5,S0,D"));
        let (oc, _) = reduce_vector(&c("4,1,S1,D"), &v("1,2,S1,D"), false).unwrap();
        assert_eq!(oc, c("1,4,S0,D"));
        // two groups under one outer fiber stay independent
        let (oc, ov) = reduce_vector(&c("1,S0,1,S1,2,S0,3,S2,D"), &v("1,S0,2,S1,3,S0,4,S2,D"), true).unwrap();
        assert_eq!(oc, c("1,S0,2,3,S1,D"));
        assert_eq!(ov, v("3,S0,3,4,S1,D"));
        // an empty group is dropped without leaving a stray boundary
        let (oc, _) = reduce_vector(&c("1,S1,S1,2,S1,D"), &v("1,S1,S1,2,S1,D"), true).unwrap();
        assert_eq!(oc, c("1,S0,2,S0,D"));
    }

    #[test]
    fn reduce_matrix_sums_outer_products() {
        // k = 0: rows {0, 2}; k = 1: row {0}
        let outer = c("0,2,S0,0,S1,D");
        let inner = c("1,S0,0,S1,1,3,S2,D");
        let vals = v("1,S0,2,S1,3,4,S2,D");
        let (oo, oi, ov) = reduce_matrix(&outer, &inner, &vals, true).unwrap();
        assert_eq!(oo, c("0,2,S0,D"));
        assert_eq!(oi, c("1,3,S0,0,S1,D"));
        assert_eq!(ov, v("4,4,S0,2,S1,D"));
    }

    #[test]
    fn crd_drop_examples() {
        let (o, i) = crd_drop(&c("0,1,2,3,S0,D"), &c("1,S0,0,2,S0,S0,1,3,S1,D")).unwrap();
        assert_eq!(o, c("0,1,3,S0,D"));
        assert_eq!(i, c("1,S0,0,2,S0,1,3,S1,D"));
        let (o, i) = crd_drop(&c("0,1,S0,D"), &c("1,S0,2,S1,D")).unwrap();
        assert_eq!((o, i), (c("0,1,S0,D"), c("1,S0,2,S1,D")));
        let (o, i) = crd_drop(&c("0,1,S0,D"), &c("S0,S1,D")).unwrap();
        assert_eq!((o, i), (c("S0,D"), c("D")));
        // the last fiber of an outer fiber is dropped: its boundary moves back
        let (o, i) = crd_drop(&c("0,1,S0,2,S1,D"), &c("4,S0,S1,5,S2,D")).unwrap();
        assert_eq!(o, c("0,S0,2,S1,D"));
        assert_eq!(i, c("4,S1,5,S2,D"));
        let (oc, ov) = val_drop(&c("0,1,2,S0,D"), &v("1,0,N,S0,D")).unwrap();
        assert_eq!((oc, ov), (c("0,S0,D"), v("1,S0,D")));
    }

    #[test]
    fn write_examples() {
        assert_eq!(write_level(&c("1,S0,0,2,S0,1,3,S1,D")).unwrap(), (vec![0, 1, 3, 5], vec![1, 0, 2, 1, 3]));
        assert_eq!(write_level(&c("D")).unwrap(), (vec![0], vec![]));
        assert_eq!(write_vals(&v("1,5,9,S0,D")).unwrap(), vec![1.0, 5.0, 9.0]);
    }

    #[test]
    fn locate_examples() {
        let dense = Level::Dense { dim: 4 };
        let (oc, or, of) = locate(&dense, &c("2,S0,D"), &r("7,S0,D"), &r("0,D")).unwrap();
        assert_eq!((oc, or, of), (c("2,S0,D"), r("7,S0,D"), r("2,S0,D")));
        let comp = Level::Compressed { seg: vec![0, 3], crd: vec![0, 2, 3] };
        assert_eq!(locate_in(&comp, 0, 3).unwrap(), Some(2));
        assert_eq!(locate_in(&comp, 0, 1).unwrap(), None);
        let (oc, _, of) = locate(&comp, &c("1,3,S0,D"), &r("0,1,S0,D"), &r("0,D")).unwrap();
        assert_eq!((oc, of), (c("3,S0,D"), r("2,S0,D")));
    }

    #[test]
    fn bv_convert_examples() {
        assert_eq!(bv_convert(4, &c("0,2,6,8,9,S0,D")).unwrap(), bv("B:0101,B:0100,B:0011,S0,D"));
        assert_eq!(bv_convert(4, &c("D")).unwrap(), bv("D"));
        assert_eq!(bv_convert(8, &c("7,S0,D")).unwrap(), bv("B:10000000,S0,D"));
    }
}
