//! Fibertree tensor storage.
//!
//! A tensor of order `n` is stored as `n` levels, outermost first, plus a
//! value array. Level `k` holds the coordinates of logical mode
//! `mode_order[k]`. Positions ("references") flow from one level to the
//! next: the fiber under position `p` of level `k` is addressed by `p` in
//! level `k + 1`, and positions of the last level index `vals`.

mod gen;
mod io;

pub use gen::{gen_blocks, gen_runs, gen_sparse, gen_urandom};
pub use io::{load_frostt, load_matrix_market, parse_frostt, parse_matrix_market, write_frostt, write_matrix_market};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported field type `{0}`")]
    UnsupportedField(String),
    #[error("line {line}: expected {expected} indices, found {found}")]
    InconsistentOrder { line: usize, expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown format letter `{0}`")]
    UnknownFormatLetter(String),
    #[error("bad permutation {0:?}")]
    BadPermutation(Vec<usize>),
    #[error("bad split: {0}")]
    BadSplit(String),
    #[error("infeasible pattern: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Storage format of one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LevelFormat {
    Dense,
    Compressed,
    Bitvector(u8),
}

impl LevelFormat {
    /// Parses a run of format letters such as `ss`, `ds` or `b64b8`.
    /// A bare `b` means 64-bit words.
    pub fn parse_list(text: &str) -> Result<Vec<LevelFormat>, StorageError> {
        let mut out = Vec::new();
        let chars: Vec<char> = text.trim().chars().collect();
        let mut i = 0;
        while i < chars.len() {
            match chars[i] {
                'd' => out.push(LevelFormat::Dense),
                's' | 'c' => out.push(LevelFormat::Compressed),
                'b' => {
                    let start = i + 1;
                    let mut end = start;
                    while end < chars.len() && chars[end].is_ascii_digit() {
                        end += 1;
                    }
                    let width: u8 = if end == start {
                        64
                    } else {
                        let digits: String = chars[start..end].iter().collect();
                        digits
                            .parse()
                            .map_err(|_| StorageError::UnknownFormatLetter(digits.clone()))?
                    };
                    if ![4, 8, 16, 32, 64].contains(&width) {
                        return Err(StorageError::UnknownFormatLetter(format!("b{width}")));
                    }
                    out.push(LevelFormat::Bitvector(width));
                    i = end;
                    continue;
                }
                other => return Err(StorageError::UnknownFormatLetter(other.to_string())),
            }
            i += 1;
        }
        Ok(out)
    }

    pub fn letter(&self) -> String {
        match self {
            LevelFormat::Dense => "d".into(),
            LevelFormat::Compressed => "s".into(),
            LevelFormat::Bitvector(64) => "b".into(),
            LevelFormat::Bitvector(b) => format!("b{b}"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LevelFormat::Dense => "dense",
            LevelFormat::Compressed => "compressed",
            LevelFormat::Bitvector(_) => "bitvector",
        }
    }
}

pub fn format_string(fmts: &[LevelFormat]) -> String {
    fmts.iter().map(|f| f.letter()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Level {
    Dense { dim: usize },
    Compressed { seg: Vec<usize>, crd: Vec<usize> },
    /// `seg` indexes `words`; a fiber's words cover coordinates from 0 up to
    /// its last set bit, so interior zero words are kept.
    Bitvector { seg: Vec<usize>, words: Vec<u64>, b: u8 },
}

impl Level {
    pub fn format(&self) -> LevelFormat {
        match self {
            Level::Dense { .. } => LevelFormat::Dense,
            Level::Compressed { .. } => LevelFormat::Compressed,
            Level::Bitvector { b, .. } => LevelFormat::Bitvector(*b),
        }
    }

    /// Number of fibers this level stores (parent positions it accepts).
    /// Dense levels accept any parent position.
    pub fn fiber_count(&self) -> Option<usize> {
        match self {
            Level::Dense { .. } => None,
            Level::Compressed { seg, .. } | Level::Bitvector { seg, .. } => {
                Some(seg.len().saturating_sub(1))
            }
        }
    }

    /// Number of child positions given `parents` fibers.
    pub fn positions(&self, parents: usize) -> usize {
        match self {
            Level::Dense { dim } => parents * dim,
            Level::Compressed { crd, .. } => crd.len(),
            Level::Bitvector { words, .. } => words.iter().map(|w| w.count_ones() as usize).sum(),
        }
    }

    /// The `(coordinate, position)` pairs of the fiber under parent `p`.
    pub fn fiber(&self, p: usize) -> Vec<(usize, usize)> {
        match self {
            Level::Dense { dim } => (0..*dim).map(|c| (c, p * dim + c)).collect(),
            Level::Compressed { seg, crd } => (seg[p]..seg[p + 1]).map(|q| (crd[q], q)).collect(),
            Level::Bitvector { seg, words, b } => {
                let mut base = bit_base(words, seg[p]);
                let mut out = Vec::new();
                for (w, word) in words[seg[p]..seg[p + 1]].iter().enumerate() {
                    for k in 0..*b as usize {
                        if word >> k & 1 == 1 {
                            out.push((w * *b as usize + k, base));
                            base += 1;
                        }
                    }
                }
                out
            }
        }
    }

    fn check(&self, parents: usize) -> Result<(), String> {
        match self {
            Level::Dense { .. } => Ok(()),
            Level::Compressed { seg, crd } => {
                check_seg(seg, crd.len(), parents)?;
                for f in seg.windows(2) {
                    if crd[f[0]..f[1]].windows(2).any(|w| w[0] >= w[1]) {
                        return Err("coordinates not strictly increasing".into());
                    }
                }
                Ok(())
            }
            Level::Bitvector { seg, words, .. } => check_seg(seg, words.len(), parents),
        }
    }
}

fn check_seg(seg: &[usize], len: usize, parents: usize) -> Result<(), String> {
    if seg.first() != Some(&0) || seg.last() != Some(&len) {
        return Err(format!("seg must run from 0 to {len}"));
    }
    if seg.windows(2).any(|w| w[0] > w[1]) {
        return Err("seg decreases".into());
    }
    if seg.len() != parents + 1 {
        return Err(format!("{} fibers stored, {parents} referenced", seg.len() - 1));
    }
    Ok(())
}

/// Number of set bits in `words[..upto]`: the value position of the first
/// coordinate of a bitvector fiber starting at word `upto`.
pub fn bit_base(words: &[u64], upto: usize) -> usize {
    words[..upto].iter().map(|w| w.count_ones() as usize).sum()
}

/// Row-major dense tensor used as the oracle representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, StorageError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(StorageError::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (i, d)| acc * d + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    /// Nonzero entries in row-major order.
    pub fn nonzeros(&self) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::new();
        for (o, v) in self.data.iter().enumerate() {
            if *v != 0.0 {
                out.push((self.unravel(o), *v));
            }
        }
        out
    }

    pub fn unravel(&self, mut o: usize) -> Vec<usize> {
        let mut idx = vec![0; self.shape.len()];
        for k in (0..self.shape.len()).rev() {
            idx[k] = o % self.shape[k].max(1);
            o /= self.shape[k].max(1);
        }
        idx
    }

    /// Reorders modes: result mode `k` is input mode `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, StorageError> {
        check_perm(perm, self.order())?;
        let shape: Vec<usize> = perm.iter().map(|&m| self.shape[m]).collect();
        let mut out = DenseTensor::zeros(&shape);
        for o in 0..self.data.len() {
            let idx = self.unravel(o);
            let pidx: Vec<usize> = perm.iter().map(|&m| idx[m]).collect();
            out.set(&pidx, self.data[o]);
        }
        Ok(out)
    }
}

fn check_perm(perm: &[usize], order: usize) -> Result<(), StorageError> {
    let mut seen = vec![false; order];
    if perm.len() != order {
        return Err(StorageError::BadPermutation(perm.to_vec()));
    }
    for &m in perm {
        if m >= order || seen[m] {
            return Err(StorageError::BadPermutation(perm.to_vec()));
        }
        seen[m] = true;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorStorage {
    pub name: String,
    pub shape: Vec<usize>,
    pub levels: Vec<Level>,
    pub vals: Vec<f64>,
    pub mode_order: Vec<usize>,
}

impl TensorStorage {
    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn formats(&self) -> Vec<LevelFormat> {
        self.levels.iter().map(Level::format).collect()
    }

    /// Dimension of storage level `k`.
    pub fn level_dim(&self, k: usize) -> usize {
        self.shape[self.mode_order[k]]
    }

    /// Order-0 tensor holding one value.
    pub fn scalar(name: &str, v: f64) -> Self {
        Self { name: name.into(), shape: vec![], levels: vec![], vals: vec![v], mode_order: vec![] }
    }

    /// Checks structural invariants.
    pub fn validate(&self) -> Result<(), StorageError> {
        let bad = |m: String| StorageError::ShapeMismatch(format!("{}: {m}", self.name));
        check_perm(&self.mode_order, self.order())?;
        if self.levels.len() != self.order() {
            return Err(bad("one level per mode required".into()));
        }
        let mut parents = 1;
        for (k, level) in self.levels.iter().enumerate() {
            level.check(parents).map_err(|m| bad(format!("level {k}: {m}")))?;
            parents = level.positions(parents);
        }
        if self.vals.len() != parents {
            return Err(bad(format!("{} values for {parents} positions", self.vals.len())));
        }
        Ok(())
    }

    /// Stored nonzero count (explicit zeros in dense levels excluded).
    pub fn nnz(&self) -> usize {
        self.vals.iter().filter(|v| **v != 0.0).count()
    }

    /// Visits every stored point as (storage-order coordinates, value).
    pub fn for_each_point(&self, mut f: impl FnMut(&[usize], f64)) {
        let mut coords = Vec::with_capacity(self.order());
        self.walk(0, 0, &mut coords, &mut f);
    }

    fn walk(&self, k: usize, p: usize, coords: &mut Vec<usize>, f: &mut impl FnMut(&[usize], f64)) {
        if k == self.levels.len() {
            f(coords, self.vals[p]);
            return;
        }
        for (c, q) in self.levels[k].fiber(p) {
            coords.push(c);
            self.walk(k + 1, q, coords, f);
            coords.pop();
        }
    }
}

impl fmt::Display for TensorStorage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {:?} {}", self.name, self.shape, format_string(&self.formats()))?;
        for (k, level) in self.levels.iter().enumerate() {
            match level {
                Level::Dense { dim } => writeln!(f, "  level {k}: dense dim={dim}")?,
                Level::Compressed { seg, crd } => writeln!(f, "  level {k}: seg={seg:?} crd={crd:?}")?,
                Level::Bitvector { seg, words, b } => {
                    let w: Vec<String> = words.iter().map(|w| format!("{w:0width$b}", width = *b as usize)).collect();
                    writeln!(f, "  level {k}: seg={seg:?} words={w:?}")?
                }
            }
        }
        write!(f, "  vals={:?}", self.vals)
    }
}

/// Builds storage from a dense tensor. `formats` are in storage order and
/// `mode_order[k]` names the logical mode stored at level `k`.
pub fn to_levels_ordered(
    name: &str,
    dense: &DenseTensor,
    formats: &[LevelFormat],
    mode_order: &[usize],
) -> Result<TensorStorage, StorageError> {
    if formats.len() != dense.order() {
        return Err(StorageError::ShapeMismatch(format!(
            "{} format letters for an order-{} tensor",
            formats.len(),
            dense.order()
        )));
    }
    check_perm(mode_order, dense.order())?;
    let mut points: Vec<(Vec<usize>, f64)> = dense
        .nonzeros()
        .into_iter()
        .map(|(idx, v)| (mode_order.iter().map(|&m| idx[m]).collect(), v))
        .collect();
    points.sort_by(|a, b| a.0.cmp(&b.0));
    let dims: Vec<usize> = mode_order.iter().map(|&m| dense.shape[m]).collect();
    build(name, &dense.shape, mode_order, &dims, formats, &points)
}

/// Builds storage in identity mode order.
pub fn to_levels(name: &str, dense: &DenseTensor, formats: &[LevelFormat]) -> Result<TensorStorage, StorageError> {
    let order: Vec<usize> = (0..dense.order()).collect();
    to_levels_ordered(name, dense, formats, &order)
}

/// Builds storage from points already in storage order and sorted,
/// without duplicates.
pub(crate) fn build(
    name: &str,
    shape: &[usize],
    mode_order: &[usize],
    dims: &[usize],
    formats: &[LevelFormat],
    points: &[(Vec<usize>, f64)],
) -> Result<TensorStorage, StorageError> {
    if dims.is_empty() {
        let v = points.first().map(|p| p.1).unwrap_or(0.0);
        return Ok(TensorStorage {
            name: name.into(),
            shape: vec![],
            levels: vec![],
            vals: vec![v],
            mode_order: vec![],
        });
    }
    // each fiber is a range of `points`
    let mut fibers: Vec<(usize, usize)> = vec![(0, points.len())];
    let mut levels = Vec::new();
    for (k, fmt) in formats.iter().enumerate() {
        let mut next = Vec::new();
        match fmt {
            LevelFormat::Dense => {
                for &(lo, hi) in &fibers {
                    let mut at = lo;
                    for c in 0..dims[k] {
                        let start = at;
                        while at < hi && points[at].0[k] == c {
                            at += 1;
                        }
                        next.push((start, at));
                    }
                }
                levels.push(Level::Dense { dim: dims[k] });
            }
            LevelFormat::Compressed => {
                let mut seg = vec![0];
                let mut crd = Vec::new();
                for &(lo, hi) in &fibers {
                    for (c, range) in groups(points, k, lo, hi) {
                        crd.push(c);
                        next.push(range);
                    }
                    seg.push(crd.len());
                }
                levels.push(Level::Compressed { seg, crd });
            }
            LevelFormat::Bitvector(b) => {
                let bw = *b as usize;
                let mut seg = vec![0];
                let mut words: Vec<u64> = Vec::new();
                for &(lo, hi) in &fibers {
                    let start = words.len();
                    for (c, range) in groups(points, k, lo, hi) {
                        let w = start + c / bw;
                        if words.len() <= w {
                            words.resize(w + 1, 0);
                        }
                        words[w] |= 1u64 << (c % bw);
                        next.push(range);
                    }
                    seg.push(words.len());
                }
                levels.push(Level::Bitvector { seg, words, b: *b });
            }
        }
        fibers = next;
    }
    let vals = fibers
        .iter()
        .map(|&(lo, hi)| if hi > lo { points[lo].1 } else { 0.0 })
        .collect();
    let t = TensorStorage {
        name: name.into(),
        shape: shape.to_vec(),
        levels,
        vals,
        mode_order: mode_order.to_vec(),
    };
    t.validate()?;
    Ok(t)
}

fn groups(points: &[(Vec<usize>, f64)], k: usize, lo: usize, hi: usize) -> Vec<(usize, (usize, usize))> {
    let mut out = Vec::new();
    let mut at = lo;
    while at < hi {
        let c = points[at].0[k];
        let start = at;
        while at < hi && points[at].0[k] == c {
            at += 1;
        }
        out.push((c, (start, at)));
    }
    out
}

/// Densifies storage in logical mode order.
pub fn from_levels(t: &TensorStorage) -> DenseTensor {
    let mut out = DenseTensor::zeros(&t.shape);
    let mut logical = vec![0; t.order()];
    t.for_each_point(|coords, v| {
        for (k, &c) in coords.iter().enumerate() {
            logical[t.mode_order[k]] = c;
        }
        let o = out.offset(&logical);
        out.data[o] += v;
    });
    out
}

/// Re-stores `t` so that level `k` holds logical mode `perm[k]`, keeping the
/// per-level formats.
pub fn reorder_modes(t: &TensorStorage, perm: &[usize]) -> Result<TensorStorage, StorageError> {
    check_perm(perm, t.order())?;
    to_levels_ordered(&t.name, &from_levels(t), &t.formats(), perm)
}

/// Splits a vector into `s` chunks of `ceil(dim / s)` coordinates. The result
/// has shape `[s, chunk]`; coordinate `c` maps to `(c / chunk, c % chunk)`.
pub fn split_vector(t: &TensorStorage, s: usize, formats: [LevelFormat; 2]) -> Result<TensorStorage, StorageError> {
    if t.order() != 1 {
        return Err(StorageError::BadSplit(format!("expected an order-1 tensor, got order {}", t.order())));
    }
    if s == 0 {
        return Err(StorageError::BadSplit("split factor must be positive".into()));
    }
    let dim = t.shape[0];
    let chunk = dim.div_ceil(s).max(1);
    let mut points = Vec::new();
    t.for_each_point(|c, v| {
        if v != 0.0 {
            points.push((vec![c[0] / chunk, c[0] % chunk], v));
        }
    });
    build(&t.name, &[s, chunk], &[0, 1], &[s, chunk], &formats, &points)
}

/// Inverse of [`split_vector`], truncating padding back to `dim`.
pub fn unsplit_vector(t: &TensorStorage, dim: usize) -> DenseTensor {
    let d = from_levels(t);
    let chunk = t.shape[1];
    let mut out = DenseTensor::zeros(&[dim]);
    for (idx, v) in d.nonzeros() {
        out.data[idx[0] * chunk + idx[1]] = v;
    }
    out
}
