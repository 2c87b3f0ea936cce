//! Cycle-level state machines.
//!
//! A machine sees the head of each input channel as it stood at the start of
//! the tick, may pop each input at most once, and queues outputs in an
//! [`Outbox`]. The simulator flushes one token per output port per tick and
//! only steps a machine whose outbox is empty, so blocks that emit a burst
//! (reducers, droppers, bitvector intersection) naturally stall.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use super::{AluOp, BlockConfig, BlockError, DropMode};
use crate::storage::{Level, TensorStorage};
use crate::stream::{BitWord, StreamKind, Token};

/// A skip hint: advance fiber `fiber` of the receiving scanner to the first
/// coordinate at or above `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hint {
    pub fiber: u64,
    pub target: u64,
}

/// What travels on a channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Wire {
    Tok(Token),
    Hint(Hint),
}

/// Input side of a machine for one tick.
pub trait Io {
    fn peek(&self, port: usize) -> Option<Token>;
    fn pop(&mut self, port: usize) -> Option<Token>;
    fn pop_hint(&mut self, port: usize) -> Option<Hint>;
}

#[derive(Debug, Default)]
pub struct Outbox {
    pub queues: Vec<VecDeque<Wire>>,
}

impl Outbox {
    pub fn new(ports: usize) -> Self {
        Self { queues: vec![VecDeque::new(); ports] }
    }

    pub fn push(&mut self, port: usize, tok: Token) {
        self.queues[port].push_back(Wire::Tok(tok));
    }

    pub fn hint(&mut self, port: usize, fiber: u64, target: u64) {
        self.queues[port].push_back(Wire::Hint(Hint { fiber, target }));
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(|q| q.is_empty())
    }

    fn all(&mut self, ports: impl IntoIterator<Item = usize>, tok: Token) {
        for p in ports {
            self.push(p, tok);
        }
    }
}

/// Final contents of a writer.
#[derive(Debug, Clone, PartialEq)]
pub enum Written {
    Level { seg: Vec<usize>, crd: Vec<usize> },
    Vals(Vec<f64>),
}

pub trait Machine {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError>;
    /// True once the machine has queued its last token.
    fn finished(&self) -> bool;
    fn written(&self) -> Option<Written> {
        None
    }
    /// True while the machine is doing internal work that neither pops nor
    /// pushes, so the simulator does not mistake it for a deadlock.
    fn busy(&self) -> bool {
        false
    }
}

fn lockstep(block: &str, detail: impl Into<String>) -> BlockError {
    BlockError::LockstepViolation { block: block.into(), detail: detail.into() }
}

fn misaligned(block: &str, detail: impl Into<String>) -> BlockError {
    BlockError::ShapeMisaligned { block: block.into(), detail: detail.into() }
}

fn unexpected(block: &str, token: Token, port: &str) -> BlockError {
    BlockError::UnexpectedToken { block: block.into(), token: token.to_string(), port: port.into() }
}

fn num(t: Token) -> Option<f64> {
    match t {
        Token::Val(v) => Some(v),
        Token::Empty => Some(0.0),
        _ => None,
    }
}

/// Builds the machine for a block, resolving tensor operands by name.
pub fn build(cfg: &BlockConfig, tensors: &BTreeMap<String, TensorStorage>) -> Result<Box<dyn Machine>, BlockError> {
    let tensor = |name: &str| {
        tensors
            .get(name)
            .ok_or_else(|| BlockError::Config { block: cfg.kind_name().into(), detail: format!("no tensor `{name}`") })
    };
    let level = |name: &str, k: usize| -> Result<Arc<Level>, BlockError> {
        tensor(name)?
            .levels
            .get(k)
            .cloned()
            .map(Arc::new)
            .ok_or_else(|| BlockError::Config { block: cfg.kind_name().into(), detail: format!("`{name}` has no level {k}") })
    };
    Ok(match cfg {
        BlockConfig::Root => Box::new(RootM { sent: 0 }),
        BlockConfig::Scan { tensor, level: k, skip, .. } => Box::new(ScanM::new(level(tensor, *k)?, *skip)),
        BlockConfig::Repeat => Box::new(RepeatM::default()),
        BlockConfig::Intersect { refs, skip } => Box::new(MergeM::new(refs.clone(), false, *skip)),
        BlockConfig::Union { refs } => Box::new(MergeM::new(refs.clone(), true, false)),
        BlockConfig::BvIntersect { arity } => Box::new(BvIntersectM { m: *arity, word: 0, done: false }),
        BlockConfig::Array { tensor: name } => Box::new(ArrayM { vals: Arc::new(tensor(name)?.vals.clone()), done: false }),
        BlockConfig::Alu { op } => Box::new(AluM { op: *op, done: false, fresh: true }),
        BlockConfig::Reduce { n: 0, drop_empty } => Box::new(ScalarReduceM { drop_empty: *drop_empty, ..Default::default() }),
        BlockConfig::Reduce { n: 1, drop_empty } => Box::new(VectorReduceM { drop_empty: *drop_empty, ..Default::default() }),
        BlockConfig::Reduce { drop_empty, .. } => Box::new(MatrixReduceM { drop_empty: *drop_empty, ..Default::default() }),
        BlockConfig::CrdDrop { mode: DropMode::Crd } => Box::new(CrdDropM::default()),
        BlockConfig::CrdDrop { mode: DropMode::Val } => Box::new(ValDropM { done: false, fresh: true }),
        BlockConfig::Write { kind, .. } => Box::new(WriteM {
            vals: *kind == StreamKind::Val,
            seg: vec![0],
            crd: vec![],
            out: vec![],
            open: false,
            done: false,
        }),
        BlockConfig::Locate { tensor, level: k, .. } => Box::new(LocateM { level: level(tensor, *k)?, parent: None, owe_stop: None, done: false }),
        BlockConfig::BvConvert { b } => Box::new(BvConvertM { b: *b, fiber: vec![], done: false }),
    })
}

struct RootM {
    sent: u8,
}

impl Machine for RootM {
    fn step(&mut self, _: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        match self.sent {
            0 => out.push(0, Token::Ref(0)),
            1 => out.push(0, Token::Done),
            _ => return Ok(()),
        }
        self.sent += 1;
        Ok(())
    }

    fn finished(&self) -> bool {
        self.sent >= 2
    }
}

enum ScanState {
    Idle,
    /// Emitting positions `pos..end` of fiber `r`.
    Fiber { r: usize, pos: usize, end: usize },
    Boundary,
    Finished,
}

struct ScanM {
    level: Arc<Level>,
    bases: Vec<u64>,
    skip: bool,
    state: ScanState,
    /// Fibers completed so far; matches the hint's fiber index.
    fibers: u64,
    hint: Option<Hint>,
    /// Ticks left in a galloping search started by a hint.
    probing: u32,
}

impl ScanM {
    fn new(level: Arc<Level>, skip: bool) -> Self {
        let mut bases = vec![0];
        if let Level::Bitvector { words, .. } = &*level {
            for w in words {
                bases.push(bases.last().unwrap() + w.count_ones() as u64);
            }
        }
        Self { level, bases, skip, state: ScanState::Idle, fibers: 0, hint: None, probing: 0 }
    }

    fn range(&self, r: usize) -> Result<(usize, usize), BlockError> {
        let oob = || BlockError::RefOutOfRange { block: "scan".into(), r: r as u64 };
        match &*self.level {
            Level::Dense { dim } => Ok((0, *dim)),
            Level::Compressed { seg, .. } | Level::Bitvector { seg, .. } => {
                if r + 1 >= seg.len() {
                    return Err(oob());
                }
                Ok((seg[r], seg[r + 1]))
            }
        }
    }

    fn emit(&self, r: usize, pos: usize, out: &mut Outbox) {
        match &*self.level {
            Level::Dense { dim } => {
                out.push(0, Token::Crd(pos as u64));
                out.push(1, Token::Ref((r * dim + pos) as u64));
            }
            Level::Compressed { crd, .. } => {
                out.push(0, Token::Crd(crd[pos] as u64));
                out.push(1, Token::Ref(pos as u64));
            }
            Level::Bitvector { words, b, .. } => {
                out.push(0, Token::Bits(BitWord::new(words[pos], *b)));
                out.push(1, Token::Ref(self.bases[pos]));
            }
        }
    }

    /// Jumps past coordinates below the hinted target of the current fiber.
    fn apply_hint(&mut self, pos: usize, end: usize) -> usize {
        let Some(h) = self.hint else { return pos };
        if h.fiber < self.fibers {
            self.hint = None;
            return pos;
        }
        if h.fiber > self.fibers {
            return pos;
        }
        self.hint = None;
        match &*self.level {
            Level::Compressed { crd, .. } => pos + crd[pos..end].partition_point(|&c| (c as u64) < h.target),
            Level::Dense { .. } => pos.max(h.target.min(end as u64) as usize),
            Level::Bitvector { .. } => pos,
        }
    }
}

impl Machine for ScanM {
    fn busy(&self) -> bool {
        self.probing > 0 || matches!(self.state, ScanState::Fiber { .. }) && self.hint.is_some()
    }

    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        if self.skip {
            while let Some(h) = io.pop_hint(1) {
                if h.fiber >= self.fibers && self.hint.map_or(true, |old| old.fiber != h.fiber || old.target < h.target) {
                    self.hint = Some(h);
                }
            }
        }
        match self.state {
            ScanState::Finished => {}
            ScanState::Idle => {
                let Some(tok) = io.peek(0) else { return Ok(()) };
                io.pop(0);
                match tok {
                    Token::Ref(r) => {
                        let (start, end) = self.range(r as usize)?;
                        if start < end {
                            self.emit(r as usize, start, out);
                            self.state = ScanState::Fiber { r: r as usize, pos: start + 1, end };
                        } else {
                            self.state = ScanState::Boundary;
                        }
                    }
                    Token::Empty => self.state = ScanState::Boundary,
                    Token::Stop(n) => out.all([0, 1], Token::Stop(n + 1)),
                    Token::Done => {
                        out.all([0, 1], Token::Done);
                        self.state = ScanState::Finished;
                    }
                    other => return Err(unexpected("scan", other, "ref")),
                }
            }
            ScanState::Fiber { r, pos, end } => {
                if self.probing > 0 {
                    self.probing -= 1;
                    return Ok(());
                }
                let to = self.apply_hint(pos, end);
                if to > pos {
                    // galloping over k coordinates probes ceil(log2(k+1)) times
                    let k = (to - pos) as u32;
                    self.probing = (u32::BITS - k.leading_zeros()) - 1;
                    self.state = ScanState::Fiber { r, pos: to, end };
                    return Ok(());
                }
                if pos < end {
                    self.emit(r, pos, out);
                    self.state = ScanState::Fiber { r, pos: pos + 1, end };
                } else {
                    self.state = ScanState::Boundary;
                    return self.step(io, out);
                }
            }
            ScanState::Boundary => {
                // the boundary level depends on the next input token
                let Some(tok) = io.peek(0) else { return Ok(()) };
                let stop = match tok {
                    Token::Stop(n) => {
                        io.pop(0);
                        Token::Stop(n + 1)
                    }
                    _ => Token::Stop(0),
                };
                out.all([0, 1], stop);
                self.fibers += 1;
                self.state = ScanState::Idle;
            }
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        matches!(self.state, ScanState::Finished)
    }
}

#[derive(Default)]
struct RepeatM {
    held: Option<Token>,
    owe_stop: Option<u32>,
    done: bool,
}

impl Machine for RepeatM {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        if let Some(k) = self.owe_stop {
            let Some(t) = io.peek(0) else { return Ok(()) };
            if t != Token::Stop(k) {
                return Err(lockstep("repeat", format!("expected S{k} on ref, found {t}")));
            }
            io.pop(0);
            self.owe_stop = None;
            return Ok(());
        }
        let Some(sig) = io.peek(1) else { return Ok(()) };
        match sig {
            Token::Crd(_) => {
                if self.held.is_none() {
                    match io.peek(0) {
                        None => return Ok(()),
                        Some(t @ (Token::Ref(_) | Token::Empty)) => {
                            io.pop(0);
                            self.held = Some(t);
                        }
                        Some(t) => return Err(lockstep("repeat", format!("expected a reference, found {t}"))),
                    }
                }
                io.pop(1);
                out.push(0, self.held.unwrap());
            }
            Token::Stop(n) => {
                let ref_popped = if self.held.is_none() {
                    let Some(r) = io.peek(0) else { return Ok(()) };
                    match r {
                        Token::Stop(m) if n >= 1 && m == n - 1 => {
                            io.pop(0);
                            io.pop(1);
                            out.push(0, sig);
                            return Ok(());
                        }
                        Token::Ref(_) | Token::Empty => {
                            io.pop(0);
                            true
                        }
                        t => return Err(lockstep("repeat", format!("expected a reference, found {t}"))),
                    }
                } else {
                    false
                };
                io.pop(1);
                out.push(0, sig);
                self.held = None;
                if n >= 1 {
                    if !ref_popped && io.peek(0) == Some(Token::Stop(n - 1)) {
                        io.pop(0);
                    } else {
                        self.owe_stop = Some(n - 1);
                    }
                }
            }
            Token::Done => {
                let Some(r) = io.peek(0) else { return Ok(()) };
                if r != Token::Done {
                    return Err(lockstep("repeat", format!("expected D on ref, found {r}")));
                }
                io.pop(0);
                io.pop(1);
                out.push(0, Token::Done);
                self.done = true;
            }
            other => return Err(unexpected("repeat", other, "repsig")),
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }
}

/// Intersection or union over m groups, one decision per tick.
struct MergeM {
    refs: Vec<usize>,
    /// Input port of each group's coordinate stream.
    crd_port: Vec<usize>,
    /// Output port of each group's first reference stream.
    out_port: Vec<usize>,
    union: bool,
    skip: bool,
    stops: Vec<u64>,
    last_hint: Vec<Option<(u64, u64)>>,
    nout: usize,
    done: bool,
}

impl MergeM {
    fn new(refs: Vec<usize>, union: bool, skip: bool) -> Self {
        let (mut crd_port, mut out_port) = (vec![], vec![]);
        let (mut i, mut o) = (0, 1);
        for &k in &refs {
            crd_port.push(i);
            out_port.push(o);
            i += 1 + k;
            o += k;
        }
        let m = refs.len();
        Self { refs, crd_port, out_port, union, skip, stops: vec![0; m], last_hint: vec![None; m], nout: o, done: false }
    }

    fn name(&self) -> &'static str {
        if self.union {
            "union"
        } else {
            "intersect"
        }
    }

    fn ref_heads(&self, io: &dyn Io, g: usize) -> Option<Vec<Token>> {
        (0..self.refs[g]).map(|t| io.peek(self.crd_port[g] + 1 + t)).collect()
    }

    fn pop_group(&self, io: &mut dyn Io, g: usize) {
        for t in 0..=self.refs[g] {
            io.pop(self.crd_port[g] + t);
        }
    }
}

impl Machine for MergeM {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        let m = self.refs.len();
        let heads: Option<Vec<Token>> = (0..m).map(|g| io.peek(self.crd_port[g])).collect();
        let Some(heads) = heads else { return Ok(()) };
        if heads.iter().all(|t| t.is_control()) {
            let first = heads[0];
            if heads.iter().any(|t| *t != first) {
                return Err(misaligned(self.name(), format!("control tokens differ: {heads:?}")));
            }
            let refs: Option<Vec<Vec<Token>>> = (0..m).map(|g| self.ref_heads(io, g)).collect();
            let Some(refs) = refs else { return Ok(()) };
            if refs.iter().flatten().any(|t| *t != first) {
                return Err(misaligned(self.name(), "reference stream does not match coordinate stream"));
            }
            for g in 0..m {
                self.pop_group(io, g);
                self.stops[g] += 1;
            }
            out.all(0..self.nout, first);
            self.done = first == Token::Done;
            return Ok(());
        }
        let crd = |t: &Token| match t {
            Token::Crd(c) => Some(*c),
            _ => None,
        };
        if self.union {
            let min = heads.iter().filter_map(crd).min().unwrap();
            let here: Vec<bool> = heads.iter().map(|t| crd(t) == Some(min)).collect();
            let mut refs = vec![];
            for g in 0..m {
                if here[g] {
                    let Some(r) = self.ref_heads(io, g) else { return Ok(()) };
                    refs.push(r);
                } else {
                    refs.push(vec![Token::Empty; self.refs[g]]);
                }
            }
            out.push(0, Token::Crd(min));
            for g in 0..m {
                for (t, tok) in refs[g].iter().enumerate() {
                    out.push(self.out_port[g] + t, *tok);
                }
                if here[g] {
                    self.pop_group(io, g);
                }
            }
            return Ok(());
        }
        let max = heads.iter().map(|t| crd(t).unwrap_or(u64::MAX)).max().unwrap();
        if heads.iter().all(|t| crd(t) == Some(max)) {
            let refs: Option<Vec<Vec<Token>>> = (0..m).map(|g| self.ref_heads(io, g)).collect();
            let Some(refs) = refs else { return Ok(()) };
            out.push(0, Token::Crd(max));
            for g in 0..m {
                for (t, tok) in refs[g].iter().enumerate() {
                    out.push(self.out_port[g] + t, *tok);
                }
                self.pop_group(io, g);
            }
            return Ok(());
        }
        for g in 0..m {
            if matches!(crd(&heads[g]), Some(c) if c < max) {
                if self.ref_heads(io, g).is_some() {
                    self.pop_group(io, g);
                }
                if self.skip {
                    let h = (self.stops[g], max);
                    if self.last_hint[g] != Some(h) {
                        out.hint(self.nout + g, h.0, h.1);
                        self.last_hint[g] = Some(h);
                    }
                }
            }
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }
}

struct BvIntersectM {
    m: usize,
    word: u64,
    done: bool,
}

impl Machine for BvIntersectM {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        let m = self.m;
        let heads: Option<Vec<Token>> = (0..m).map(|g| io.peek(2 * g)).collect();
        let Some(heads) = heads else { return Ok(()) };
        let refs: Option<Vec<Token>> = (0..m).map(|g| io.peek(2 * g + 1)).collect();
        if heads.iter().all(|t| t.is_control()) {
            let Some(refs) = refs else { return Ok(()) };
            if heads.iter().chain(&refs).any(|t| *t != heads[0]) {
                return Err(misaligned("bvintersect", format!("control tokens differ: {heads:?}")));
            }
            for p in 0..2 * m {
                io.pop(p);
            }
            out.all(0..=m, heads[0]);
            self.word = 0;
            self.done = heads[0] == Token::Done;
            return Ok(());
        }
        let words: Option<Vec<BitWord>> = heads
            .iter()
            .map(|t| match t {
                Token::Bits(w) => Some(*w),
                _ => None,
            })
            .collect();
        let Some(words) = words else {
            // drain the longer side
            for g in 0..m {
                if matches!(heads[g], Token::Bits(_)) {
                    io.pop(2 * g);
                    io.pop(2 * g + 1);
                }
            }
            return Ok(());
        };
        let Some(refs) = refs else { return Ok(()) };
        let bases: Vec<u64> = refs
            .iter()
            .map(|t| match t {
                Token::Ref(r) => Ok(*r),
                other => Err(misaligned("bvintersect", format!("word without reference: {other}"))),
            })
            .collect::<Result<_, _>>()?;
        let and = words.iter().fold(u64::MAX, |acc, w| acc & w.bits);
        let width = words[0].width as u32;
        for k in (0..width).filter(|k| and >> k & 1 == 1) {
            out.push(0, Token::Crd(self.word * width as u64 + k as u64));
            for g in 0..m {
                out.push(g + 1, Token::Ref(bases[g] + words[g].rank(k) as u64));
            }
        }
        for p in 0..2 * m {
            io.pop(p);
        }
        self.word += 1;
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }
}

struct ArrayM {
    vals: Arc<Vec<f64>>,
    done: bool,
}

impl Machine for ArrayM {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        let Some(t) = io.peek(0) else { return Ok(()) };
        let v = match t {
            Token::Ref(r) => {
                Token::Val(*self.vals.get(r as usize).ok_or(BlockError::RefOutOfRange { block: "array".into(), r })?)
            }
            Token::Empty | Token::Stop(_) | Token::Done => t,
            other => return Err(unexpected("array", other, "ref")),
        };
        io.pop(0);
        out.push(0, v);
        self.done = v == Token::Done;
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }
}

struct AluM {
    op: AluOp,
    done: bool,
    /// No value seen since the last control token.
    fresh: bool,
}

impl Machine for AluM {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        let (Some(a), Some(b)) = (io.peek(0), io.peek(1)) else { return Ok(()) };
        // a reducer's zero for an empty outer level, see functional::alu
        for (k, stop, v) in [(1, a, b), (0, b, a)] {
            if self.fresh && matches!(stop, Token::Stop(_)) && v == Token::Val(0.0) {
                io.pop(k);
                return Ok(());
            }
        }
        self.fresh = num(a).is_none();
        let r = match (num(a), num(b)) {
            (Some(x), Some(y)) => Token::Val(self.op.apply(x, y)),
            _ if a == b && a.is_control() => a,
            _ => return Err(misaligned("alu", format!("{a} vs {b}"))),
        };
        io.pop(0);
        io.pop(1);
        out.push(0, r);
        self.done = r == Token::Done;
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }
}

#[derive(Default)]
struct ScalarReduceM {
    drop_empty: bool,
    sum: f64,
    seen: bool,
    done: bool,
}

impl Machine for ScalarReduceM {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        let Some(t) = io.pop(0) else { return Ok(()) };
        match t {
            Token::Val(_) | Token::Empty => {
                self.sum += num(t).unwrap();
                self.seen = true;
            }
            Token::Stop(n) => {
                if self.seen || !self.drop_empty {
                    out.push(0, Token::Val(self.sum));
                }
                if n > 0 {
                    out.push(0, Token::Stop(n - 1));
                }
                self.sum = 0.0;
                self.seen = false;
            }
            Token::Done => {
                if self.seen {
                    out.push(0, Token::Val(self.sum));
                }
                out.push(0, Token::Done);
                self.done = true;
            }
            other => return Err(unexpected("reduce", other, "val")),
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }
}

#[derive(Default)]
struct VectorReduceM {
    drop_empty: bool,
    acc: BTreeMap<u64, f64>,
    /// Group boundary held back until a non-empty group follows.
    held: Option<u32>,
    done: bool,
}

impl VectorReduceM {
    fn release(&mut self, out: &mut Outbox) {
        if let Some(l) = self.held.take() {
            out.all([0, 1], Token::Stop(l));
        }
    }

    fn drain(&mut self, out: &mut Outbox) {
        for (c, v) in std::mem::take(&mut self.acc) {
            out.push(0, Token::Crd(c));
            out.push(1, Token::Val(v));
        }
    }
}

impl Machine for VectorReduceM {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        let (Some(c), Some(v)) = (io.peek(0), io.peek(1)) else { return Ok(()) };
        io.pop(0);
        io.pop(1);
        match (c, v) {
            (Token::Crd(k), v) if num(v).is_some() => *self.acc.entry(k).or_default() += num(v).unwrap(),
            (Token::Stop(0), Token::Stop(0)) => {}
            (Token::Stop(n), Token::Stop(m)) if n == m => {
                let boundary = n - 1;
                if self.acc.is_empty() {
                    if !self.drop_empty {
                        out.all([0, 1], Token::Stop(boundary));
                    } else if let Some(h) = self.held.as_mut() {
                        *h = (*h).max(boundary);
                    }
                } else {
                    self.release(out);
                    self.drain(out);
                    if self.drop_empty {
                        self.held = Some(boundary);
                    } else {
                        out.all([0, 1], Token::Stop(boundary));
                    }
                }
            }
            (Token::Done, Token::Done) => {
                self.drain(out);
                self.release(out);
                out.all([0, 1], Token::Done);
                self.done = true;
            }
            (a, b) => return Err(misaligned("reduce", format!("{a} vs {b}"))),
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }
}

#[derive(Default)]
struct MatrixReduceM {
    drop_empty: bool,
    acc: BTreeMap<u64, BTreeMap<u64, f64>>,
    row: Option<u64>,
    /// Outer stop still owed after an inner fiber closed above level 0.
    owed: Option<u32>,
    held: Option<u32>,
    done: bool,
}

impl MatrixReduceM {
    fn release(&mut self, out: &mut Outbox) {
        if let Some(l) = self.held.take() {
            out.push(0, Token::Stop(l));
            out.all([1, 2], Token::Stop(l + 1));
        }
    }

    fn close_group(&mut self, level: u32, out: &mut Outbox) {
        if self.acc.is_empty() {
            if !self.drop_empty {
                out.push(0, Token::Stop(level - 1));
                out.all([1, 2], Token::Stop(level));
            } else if let Some(h) = self.held.as_mut() {
                *h = (*h).max(level - 1);
            }
            return;
        }
        self.release(out);
        let rows = std::mem::take(&mut self.acc);
        let last = rows.len() - 1;
        for (n, (i, cols)) in rows.into_iter().enumerate() {
            out.push(0, Token::Crd(i));
            for (j, v) in cols {
                out.push(1, Token::Crd(j));
                out.push(2, Token::Val(v));
            }
            if n < last {
                out.all([1, 2], Token::Stop(0));
            }
        }
        if self.drop_empty {
            self.held = Some(level - 1);
        } else {
            out.push(0, Token::Stop(level - 1));
            out.all([1, 2], Token::Stop(level));
        }
    }
}

impl Machine for MatrixReduceM {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        if let Some(i) = self.row {
            let (Some(c), Some(v)) = (io.peek(1), io.peek(2)) else { return Ok(()) };
            io.pop(1);
            io.pop(2);
            match (c, v) {
                (Token::Crd(j), v) if num(v).is_some() => {
                    *self.acc.entry(i).or_default().entry(j).or_default() += num(v).unwrap()
                }
                (Token::Stop(l), Token::Stop(m)) if l == m => {
                    self.row = None;
                    if l > 0 {
                        self.owed = Some(l - 1);
                    }
                }
                (a, b) => return Err(misaligned("reduce", format!("{a} vs {b}"))),
            }
            return Ok(());
        }
        let Some(o) = io.peek(0) else { return Ok(()) };
        match o {
            Token::Crd(i) => {
                if self.owed.is_some() {
                    return Err(lockstep("reduce", "outer coordinate where a stop was due"));
                }
                io.pop(0);
                self.row = Some(i);
            }
            Token::Stop(m) => {
                if self.owed == Some(m) {
                    self.owed = None;
                    io.pop(0);
                } else if self.owed.is_some() {
                    return Err(lockstep("reduce", format!("outer S{m} does not close the inner fiber")));
                } else {
                    let (Some(c), Some(v)) = (io.peek(1), io.peek(2)) else { return Ok(()) };
                    if c != Token::Stop(m + 1) || v != c {
                        return Err(lockstep("reduce", format!("expected S{} on inner, found {c}", m + 1)));
                    }
                    io.pop(0);
                    io.pop(1);
                    io.pop(2);
                }
                if m > 0 {
                    self.close_group(m, out);
                }
            }
            Token::Done => {
                let (Some(c), Some(v)) = (io.peek(1), io.peek(2)) else { return Ok(()) };
                if c != Token::Done || v != Token::Done {
                    return Err(lockstep("reduce", "inner stream not done with the outer"));
                }
                io.pop(0);
                io.pop(1);
                io.pop(2);
                self.release(out);
                out.all(0..3, Token::Done);
                self.done = true;
            }
            other => return Err(unexpected("reduce", other, "crd_outer")),
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }
}

#[derive(Default)]
struct CrdDropM {
    /// Outer coordinate whose inner fiber is being buffered.
    current: Option<(Token, Vec<Token>)>,
    owed: Option<u32>,
    held: Option<u32>,
    done: bool,
}

impl Machine for CrdDropM {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        if let Some((crd, buf)) = self.current.as_mut() {
            let Some(t) = io.pop(1) else { return Ok(()) };
            match t {
                Token::Stop(l) => {
                    if buf.is_empty() {
                        if let Some(h) = self.held.as_mut() {
                            *h = (*h).max(l);
                        }
                    } else {
                        if let Some(h) = self.held.take() {
                            out.push(1, Token::Stop(h));
                        }
                        out.push(0, *crd);
                        for tok in buf.drain(..) {
                            out.push(1, tok);
                        }
                        self.held = Some(l);
                    }
                    if l > 0 {
                        self.owed = Some(l - 1);
                    }
                    self.current = None;
                }
                Token::Done => return Err(lockstep("crddrop", "inner ended inside a fiber")),
                p => buf.push(p),
            }
            return Ok(());
        }
        let Some(o) = io.peek(0) else { return Ok(()) };
        match o {
            Token::Crd(_) => {
                if self.owed.is_some() {
                    return Err(lockstep("crddrop", "outer coordinate where a stop was due"));
                }
                io.pop(0);
                self.current = Some((o, vec![]));
            }
            Token::Stop(n) => {
                if self.owed == Some(n) {
                    self.owed = None;
                } else if self.owed.is_some() {
                    return Err(lockstep("crddrop", format!("outer S{n} does not close the inner fiber")));
                } else {
                    let Some(i) = io.peek(1) else { return Ok(()) };
                    if i != Token::Stop(n + 1) {
                        return Err(lockstep("crddrop", format!("expected S{} on inner, found {i}", n + 1)));
                    }
                    io.pop(1);
                    if let Some(h) = self.held.as_mut() {
                        *h = (*h).max(n + 1);
                    }
                }
                io.pop(0);
                out.push(0, o);
            }
            Token::Done => {
                let Some(i) = io.peek(1) else { return Ok(()) };
                if i != Token::Done {
                    return Err(lockstep("crddrop", format!("expected D on inner, found {i}")));
                }
                io.pop(0);
                io.pop(1);
                if let Some(h) = self.held.take() {
                    out.push(1, Token::Stop(h));
                }
                out.all([0, 1], Token::Done);
                self.done = true;
            }
            other => return Err(unexpected("crddrop", other, "outer")),
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }
}

struct ValDropM {
    done: bool,
    fresh: bool,
}

impl Machine for ValDropM {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        let (Some(c), Some(v)) = (io.peek(0), io.peek(1)) else { return Ok(()) };
        if self.fresh && matches!(c, Token::Stop(_)) && v == Token::Val(0.0) {
            io.pop(1);
            return Ok(());
        }
        self.fresh = c.is_control();
        io.pop(0);
        io.pop(1);
        match (c, v) {
            (Token::Crd(_), v) if num(v).is_some() => {
                if num(v) != Some(0.0) {
                    out.push(0, c);
                    out.push(1, v);
                }
            }
            _ if c == v && c.is_control() => {
                out.all([0, 1], c);
                self.done = c == Token::Done;
            }
            _ => return Err(misaligned("crddrop", format!("{c} vs {v}"))),
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }
}

struct WriteM {
    vals: bool,
    seg: Vec<usize>,
    crd: Vec<usize>,
    out: Vec<f64>,
    open: bool,
    done: bool,
}

impl Machine for WriteM {
    fn step(&mut self, io: &mut dyn Io, _: &mut Outbox) -> Result<(), BlockError> {
        let Some(t) = io.pop(0) else { return Ok(()) };
        match (t, self.vals) {
            (Token::Crd(c), false) => {
                self.crd.push(c as usize);
                self.open = true;
            }
            (Token::Val(_) | Token::Empty, true) => self.out.push(num(t).unwrap()),
            (Token::Stop(_), _) => {
                self.seg.push(self.crd.len());
                self.open = false;
            }
            (Token::Done, _) => {
                if self.open {
                    self.seg.push(self.crd.len());
                }
                self.done = true;
            }
            (other, _) => return Err(unexpected("write", other, if self.vals { "val" } else { "crd" })),
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }

    fn written(&self) -> Option<Written> {
        if !self.done {
            return None;
        }
        Some(if self.vals {
            Written::Vals(self.out.clone())
        } else {
            Written::Level { seg: self.seg.clone(), crd: self.crd.clone() }
        })
    }
}

struct LocateM {
    level: Arc<Level>,
    parent: Option<Token>,
    owe_stop: Option<u32>,
    done: bool,
}

impl LocateM {
    fn find(&self, p: u64, c: u64) -> Result<Option<u64>, BlockError> {
        let r = p as usize;
        let oob = || BlockError::RefOutOfRange { block: "locate".into(), r: p };
        Ok(match &*self.level {
            Level::Dense { dim } => ((c as usize) < *dim).then(|| p * *dim as u64 + c),
            Level::Compressed { seg, crd } => {
                let (lo, hi) = (*seg.get(r).ok_or_else(oob)?, *seg.get(r + 1).ok_or_else(oob)?);
                let k = lo + crd[lo..hi].partition_point(|&x| (x as u64) < c);
                (k < hi && crd[k] as u64 == c).then_some(k as u64)
            }
            Level::Bitvector { seg, words, b } => {
                let (lo, hi) = (*seg.get(r).ok_or_else(oob)?, *seg.get(r + 1).ok_or_else(oob)?);
                let w = lo + (c / *b as u64) as usize;
                let bit = (c % *b as u64) as u32;
                if w >= hi || words[w] >> bit & 1 == 0 {
                    None
                } else {
                    let before: u64 = words[..w].iter().map(|x| x.count_ones() as u64).sum();
                    Some(before + BitWord::new(words[w], *b).rank(bit) as u64)
                }
            }
        })
    }
}

impl Machine for LocateM {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        if let Some(k) = self.owe_stop {
            let Some(t) = io.peek(2) else { return Ok(()) };
            if t != Token::Stop(k) {
                return Err(lockstep("locate", format!("expected S{k} on parent, found {t}")));
            }
            io.pop(2);
            self.owe_stop = None;
            return Ok(());
        }
        let (Some(c), Some(l)) = (io.peek(0), io.peek(1)) else { return Ok(()) };
        let take_parent = |io: &mut dyn Io| -> Result<Option<Token>, BlockError> {
            match io.peek(2) {
                None => Ok(None),
                Some(t @ (Token::Ref(_) | Token::Empty)) => {
                    io.pop(2);
                    Ok(Some(t))
                }
                Some(t) => Err(lockstep("locate", format!("expected a parent reference, found {t}"))),
            }
        };
        match c {
            Token::Crd(x) => {
                if self.parent.is_none() {
                    match take_parent(io)? {
                        None => return Ok(()),
                        p => self.parent = p,
                    }
                }
                io.pop(0);
                io.pop(1);
                if let Some(Token::Ref(p)) = self.parent {
                    if let Some(pos) = self.find(p, x)? {
                        out.push(0, c);
                        out.push(1, l);
                        out.push(2, Token::Ref(pos));
                    }
                }
            }
            Token::Stop(n) => {
                if l != c {
                    return Err(misaligned("locate", format!("{c} vs {l}")));
                }
                let mut popped = false;
                if self.parent.is_none() {
                    let Some(p) = io.peek(2) else { return Ok(()) };
                    if n >= 1 && p == Token::Stop(n - 1) {
                        io.pop(0);
                        io.pop(1);
                        io.pop(2);
                        out.all(0..3, c);
                        return Ok(());
                    }
                    take_parent(io)?;
                    popped = true;
                }
                io.pop(0);
                io.pop(1);
                out.all(0..3, c);
                self.parent = None;
                if n >= 1 {
                    if !popped && io.peek(2) == Some(Token::Stop(n - 1)) {
                        io.pop(2);
                    } else {
                        self.owe_stop = Some(n - 1);
                    }
                }
            }
            Token::Done => {
                let Some(p) = io.peek(2) else { return Ok(()) };
                if p != Token::Done {
                    return Err(lockstep("locate", format!("expected D on parent, found {p}")));
                }
                for port in 0..3 {
                    io.pop(port);
                }
                out.all(0..3, Token::Done);
                self.done = true;
            }
            other => return Err(unexpected("locate", other, "crd")),
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }
}

struct BvConvertM {
    b: u8,
    fiber: Vec<u64>,
    done: bool,
}

impl Machine for BvConvertM {
    fn step(&mut self, io: &mut dyn Io, out: &mut Outbox) -> Result<(), BlockError> {
        let Some(t) = io.pop(0) else { return Ok(()) };
        match t {
            Token::Crd(c) => self.fiber.push(c),
            Token::Stop(_) | Token::Done => {
                if let Some(&last) = self.fiber.last() {
                    let b = self.b as u64;
                    let mut words = vec![0u64; (last / b) as usize + 1];
                    for c in self.fiber.drain(..) {
                        words[(c / b) as usize] |= 1 << (c % b);
                    }
                    for w in words {
                        out.push(0, Token::Bits(BitWord::new(w, self.b)));
                    }
                }
                out.push(0, t);
                self.done = t == Token::Done;
            }
            other => return Err(unexpected("bvconvert", other, "crd")),
        }
        Ok(())
    }

    fn finished(&self) -> bool {
        self.done
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::functional as f;
    use crate::stream::TokenStream;

    /// Runs one machine against fully available inputs, honouring the
    /// one-pop-per-port and one-push-per-port rules.
    fn drive(m: &mut dyn Machine, inputs: Vec<Vec<Token>>, nout: usize) -> (Vec<Vec<Token>>, usize) {
        struct Q {
            q: Vec<VecDeque<Token>>,
            popped: Vec<bool>,
        }
        impl Io for Q {
            fn peek(&self, p: usize) -> Option<Token> {
                if self.popped[p] {
                    None
                } else {
                    self.q[p].front().copied()
                }
            }
            fn pop(&mut self, p: usize) -> Option<Token> {
                let t = self.peek(p)?;
                self.popped[p] = true;
                self.q[p].pop_front();
                Some(t)
            }
            fn pop_hint(&mut self, _: usize) -> Option<Hint> {
                None
            }
        }
        let n = inputs.len();
        let mut io = Q { q: inputs.into_iter().map(VecDeque::from).collect(), popped: vec![false; n] };
        let mut ob = Outbox::new(nout);
        let mut outs = vec![vec![]; nout];
        let mut ticks = 0;
        while !(m.finished() && ob.is_empty()) {
            ticks += 1;
            assert!(ticks < 10_000, "machine did not finish");
            io.popped.iter_mut().for_each(|p| *p = false);
            if ob.is_empty() {
                m.step(&mut io, &mut ob).unwrap();
            }
            for (p, q) in ob.queues.iter_mut().enumerate() {
                if let Some(Wire::Tok(t)) = q.pop_front() {
                    outs[p].push(t);
                }
            }
        }
        (outs, ticks)
    }

    fn c(s: &str) -> Vec<Token> {
        TokenStream::parse(StreamKind::Crd, s).unwrap().tokens
    }
    fn r(s: &str) -> Vec<Token> {
        TokenStream::parse(StreamKind::Ref, s).unwrap().tokens
    }
    fn v(s: &str) -> Vec<Token> {
        TokenStream::parse(StreamKind::Val, s).unwrap().tokens
    }

    #[test]
    fn scan_matches_function_and_timing() {
        let lvl = Level::Compressed { seg: vec![0, 1, 3, 5], crd: vec![1, 0, 2, 1, 3] };
        let input = r("0,1,2,S0,D");
        let mut m = ScanM::new(Arc::new(lvl.clone()), false);
        let (outs, ticks) = drive(&mut m, vec![input.clone()], 2);
        let (fc, fr) = f::scan(&lvl, &input).unwrap();
        assert_eq!(outs, vec![fc, fr]);
        // per fiber: one tick per coordinate plus a boundary, then D
        assert_eq!(ticks, 2 + 3 + 3 + 1);
    }

    #[test]
    fn lockstep_machines_match_functions() {
        let mut m = RepeatM::default();
        let (outs, _) = drive(&mut m, vec![r("4,5,S0,D"), c("S0,1,S1,D")], 1);
        assert_eq!(outs[0], f::repeat(&r("4,5,S0,D"), &c("S0,1,S1,D")).unwrap());

        let (o, i) = (c("0,1,2,3,S0,D"), c("1,S0,0,2,S0,S0,1,3,S1,D"));
        let mut m = CrdDropM::default();
        let (outs, _) = drive(&mut m, vec![o.clone(), i.clone()], 2);
        let (fo, fi) = f::crd_drop(&o, &i).unwrap();
        assert_eq!(outs, vec![fo, fi]);

        let (oc, ic, vv) = (c("0,2,S0,0,S1,D"), c("1,S0,0,S1,1,3,S2,D"), v("1,S0,2,S1,3,4,S2,D"));
        let mut m = MatrixReduceM { drop_empty: true, ..Default::default() };
        let (outs, _) = drive(&mut m, vec![oc.clone(), ic.clone(), vv.clone()], 3);
        let (a, b, d) = f::reduce_matrix(&oc, &ic, &vv, true).unwrap();
        assert_eq!(outs, vec![a, b, d]);
    }

    #[test]
    fn merge_machines_match_functions() {
        let ins = vec![c("0,2,S0,D"), r("0,1,S0,D"), c("1,2,S0,D"), r("0,1,S0,D")];
        let slices: Vec<&[Token]> = ins.iter().map(|s| s.as_slice()).collect();
        let mut m = MergeM::new(vec![1, 1], true, false);
        assert_eq!(drive(&mut m, ins.clone(), 3).0, f::union(&slices, &[1, 1]).unwrap());
        let mut m = MergeM::new(vec![1, 1], false, false);
        assert_eq!(drive(&mut m, ins.clone(), 3).0, f::intersect(&slices, &[1, 1]).unwrap());
    }
}
