//! Deterministic synthetic tensors.
//!
//! Values are small positive integers so that sums and products stay exact
//! in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build, DenseTensor, LevelFormat, StorageError, TensorStorage};

fn vector(name: &str, dim: usize, coords: &[usize], rng: &mut ChaCha8Rng) -> Result<TensorStorage, StorageError> {
    let points: Vec<(Vec<usize>, f64)> = coords.iter().map(|&c| (vec![c], rng.gen_range(1..=9) as f64)).collect();
    build(name, &[dim], &[0], &[dim], &[LevelFormat::Compressed], &points)
}

/// A compressed vector with `nnz` uniformly chosen coordinates.
pub fn gen_urandom(name: &str, dim: usize, nnz: usize, seed: u64) -> Result<TensorStorage, StorageError> {
    if nnz > dim {
        return Err(StorageError::Infeasible(format!("{nnz} nonzeros in dimension {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = sample(&mut rng, dim, nnz).into_vec();
    coords.sort_unstable();
    vector(name, dim, &coords, &mut rng)
}

/// Two vectors with `nnz` nonzeros each. The first stores runs of `run_len`
/// consecutive coordinates; after each run the second places `run_len`
/// isolated nonzeros, one every other coordinate. Units are spread evenly
/// over the dimension, so the two vectors never share a coordinate.
pub fn gen_runs(dim: usize, nnz: usize, run_len: usize, seed: u64) -> Result<(TensorStorage, TensorStorage), StorageError> {
    if run_len == 0 {
        return Err(StorageError::Infeasible("run length must be positive".into()));
    }
    let units = nnz.div_ceil(run_len);
    let stride = if units == 0 { dim } else { dim / units };
    if units > 0 && stride < 3 * run_len {
        return Err(StorageError::Infeasible(format!(
            "{units} runs of {run_len} do not fit in dimension {dim}"
        )));
    }
    let mut a = Vec::with_capacity(nnz);
    let mut b = Vec::with_capacity(nnz);
    for u in 0..units {
        let s = u * stride;
        let len = run_len.min(nnz - u * run_len);
        a.extend(s..s + len);
        b.extend((0..len).map(|t| s + run_len + 1 + 2 * t));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((vector("b", dim, &a, &mut rng)?, vector("c", dim, &b, &mut rng)?))
}

/// Two vectors made of dense blocks of `block` coordinates. Each vector has
/// `ceil(nnz / block)` blocks at evenly spaced offsets; the second vector's
/// blocks sit half a spacing after the first's.
pub fn gen_blocks(dim: usize, nnz: usize, block: usize, seed: u64) -> Result<(TensorStorage, TensorStorage), StorageError> {
    if block == 0 {
        return Err(StorageError::Infeasible("block size must be positive".into()));
    }
    let count = nnz.div_ceil(block);
    let stride = if count == 0 { dim } else { dim / count };
    let shift = stride / 2;
    if count > 0 && (stride < block || (count - 1) * stride + shift + block > dim) {
        return Err(StorageError::Infeasible(format!("{count} blocks of {block} do not fit in dimension {dim}")));
    }
    let mut a = Vec::with_capacity(nnz);
    let mut b = Vec::with_capacity(nnz);
    for k in 0..count {
        let len = block.min(nnz - k * block);
        let s = k * stride;
        a.extend(s..s + len);
        b.extend(s + shift..s + shift + len);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((vector("b", dim, &a, &mut rng)?, vector("c", dim, &b, &mut rng)?))
}

/// Dense tensor whose entries are nonzero with probability `1 - sparsity`,
/// holding integers in `1..=max_val`.
pub fn gen_sparse(shape: &[usize], sparsity: f64, max_val: u32, seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = DenseTensor::zeros(shape);
    for v in t.data.iter_mut() {
        if rng.gen::<f64>() >= sparsity {
            *v = rng.gen_range(1..=max_val.max(1)) as f64;
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::{from_levels, Level};

    fn coords(t: &TensorStorage) -> Vec<usize> {
        match &t.levels[0] {
            Level::Compressed { crd, .. } => crd.clone(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn urandom_counts() {
        let t = gen_urandom("v", 2000, 100, 7).unwrap();
        let c = coords(&t);
        assert_eq!(c.len(), 100);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(t, gen_urandom("v", 2000, 100, 7).unwrap());
        assert!(gen_urandom("v", 10, 11, 0).is_err());
    }

    #[test]
    fn runs_counts() {
        for run in [1, 2, 4, 8, 16, 32, 64, 128] {
            let (a, b) = gen_runs(2000, 400, run, 1).unwrap();
            assert_eq!(a.vals.len(), 400, "run {run}");
            assert_eq!(b.vals.len(), 400, "run {run}");
            let ca = coords(&a);
            let cb = coords(&b);
            assert!(ca.iter().all(|c| cb.binary_search(c).is_err()));
            assert!(ca.last().unwrap() < &2000 && cb.last().unwrap() < &2000);
        }
        assert!(gen_runs(2000, 400, 0, 1).is_err());
    }

    #[test]
    fn blocks_counts() {
        let (a, b) = gen_blocks(2000, 400, 400, 3).unwrap();
        assert_eq!(coords(&a), (0..400).collect::<Vec<_>>());
        assert_eq!(b.vals.len(), 400);
        for bs in [1, 2, 4, 8, 16, 32, 64, 128, 200] {
            let (a, b) = gen_blocks(2000, 400, bs, 3).unwrap();
            assert_eq!(a.vals.len(), 400, "block {bs}");
            assert_eq!(b.vals.len(), 400, "block {bs}");
        }
    }

    #[test]
    fn sparse_dense_is_reproducible() {
        let a = gen_sparse(&[5, 6], 0.8, 9, 11);
        assert_eq!(a, gen_sparse(&[5, 6], 0.8, 9, 11));
        assert!(a.data.iter().all(|v| v.fract() == 0.0));
        let t = crate::storage::to_levels("A", &a, &[LevelFormat::Compressed; 2]).unwrap();
        assert_eq!(from_levels(&t), a);
    }
}
