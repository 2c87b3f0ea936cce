//! Matrix Market and FROSTT text formats. Files are 1-based; storage is
//! 0-based.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{build, from_levels, LevelFormat, StorageError, TensorStorage};

fn perr(line: usize, msg: impl Into<String>) -> StorageError {
    StorageError::Parse { line, msg: msg.into() }
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("T").to_string()
}

pub fn load_matrix_market(path: &Path) -> Result<TensorStorage, StorageError> {
    let text = std::fs::read_to_string(path)?;
    parse_matrix_market(&stem(path), &text)
}

/// Parses Matrix Market text into DCSR storage. Duplicates are summed;
/// symmetric and skew-symmetric files are expanded.
pub fn parse_matrix_market(name: &str, text: &str) -> Result<TensorStorage, StorageError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file"))?;
    let words: Vec<String> = header.split_whitespace().map(|w| w.to_ascii_lowercase()).collect();
    if words.len() < 4 || words[0] != "%%matrixmarket" || words[1] != "matrix" {
        return Err(perr(1, "missing %%MatrixMarket matrix header"));
    }
    let layout = words[2].as_str();
    let field = words[3].as_str();
    let symmetry = words.get(4).map(String::as_str).unwrap_or("general");
    match field {
        "real" | "integer" | "double" | "pattern" => {}
        other => return Err(StorageError::UnsupportedField(other.into())),
    }
    if !matches!(layout, "coordinate" | "array") {
        return Err(perr(1, format!("unknown layout `{layout}`")));
    }
    if !matches!(symmetry, "general" | "symmetric" | "skew-symmetric") {
        return Err(StorageError::UnsupportedField(symmetry.into()));
    }

    let mut body = lines.filter(|(_, l)| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('%')
    });
    let (size_no, size_line) = body.next().ok_or_else(|| perr(2, "missing size line"))?;
    let size: Vec<usize> = size_line
        .split_whitespace()
        .map(|w| w.parse().map_err(|_| perr(size_no + 1, "bad size line")))
        .collect::<Result<_, _>>()?;
    let (rows, cols) = match size.as_slice() {
        [r, c, ..] => (*r, *c),
        _ => return Err(perr(size_no + 1, "bad size line")),
    };

    let mut entries: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut add = |i: usize, j: usize, v: f64| {
        *entries.entry((i, j)).or_insert(0.0) += v;
        if i != j {
            match symmetry {
                "symmetric" => *entries.entry((j, i)).or_insert(0.0) += v,
                "skew-symmetric" => *entries.entry((j, i)).or_insert(0.0) -= v,
                _ => {}
            }
        }
    };
    if layout == "coordinate" {
        for (no, line) in body {
            let f: Vec<&str> = line.split_whitespace().collect();
            let need = if field == "pattern" { 2 } else { 3 };
            if f.len() < need {
                return Err(perr(no + 1, format!("expected {need} fields")));
            }
            let i: usize = f[0].parse().map_err(|_| perr(no + 1, "bad row index"))?;
            let j: usize = f[1].parse().map_err(|_| perr(no + 1, "bad column index"))?;
            if i == 0 || j == 0 || i > rows || j > cols {
                return Err(perr(no + 1, format!("index ({i},{j}) out of range")));
            }
            let v = if field == "pattern" {
                1.0
            } else {
                f[2].parse().map_err(|_| perr(no + 1, "bad value"))?
            };
            add(i - 1, j - 1, v);
        }
    } else {
        // column-major dense listing
        let mut k = 0;
        for (no, line) in body {
            let v: f64 = line.trim().parse().map_err(|_| perr(no + 1, "bad value"))?;
            if k >= rows * cols {
                return Err(perr(no + 1, "too many values"));
            }
            if v != 0.0 {
                add(k % rows, k / rows, v);
            }
            k += 1;
        }
    }
    let points: Vec<(Vec<usize>, f64)> = entries.into_iter().map(|((i, j), v)| (vec![i, j], v)).collect();
    build(name, &[rows, cols], &[0, 1], &[rows, cols], &[LevelFormat::Compressed; 2], &points)
}

pub fn write_matrix_market(t: &TensorStorage) -> String {
    let d = from_levels(t);
    let nz = d.nonzeros();
    let mut s = String::from("%%MatrixMarket matrix coordinate real general\n");
    let _ = writeln!(s, "{} {} {}", d.shape[0], d.shape.get(1).copied().unwrap_or(1), nz.len());
    for (idx, v) in nz {
        let j = idx.get(1).copied().unwrap_or(0);
        let _ = writeln!(s, "{} {} {}", idx[0] + 1, j + 1, v);
    }
    s
}

pub fn load_frostt(path: &Path) -> Result<TensorStorage, StorageError> {
    let text = std::fs::read_to_string(path)?;
    parse_frostt(&stem(path), &text)
}

/// Parses `.tns` text (one nonzero per line: 1-based indices then value) into
/// an all-compressed tensor with modes in file order.
pub fn parse_frostt(name: &str, text: &str) -> Result<TensorStorage, StorageError> {
    let mut order = None;
    let mut entries: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        if f.len() < 2 {
            return Err(perr(no + 1, "expected indices and a value"));
        }
        let n = f.len() - 1;
        match order {
            None => order = Some(n),
            Some(o) if o != n => {
                return Err(StorageError::InconsistentOrder { line: no + 1, expected: o, found: n })
            }
            _ => {}
        }
        let mut idx = Vec::with_capacity(n);
        for w in &f[..n] {
            let i: usize = w.parse().map_err(|_| perr(no + 1, format!("bad index `{w}`")))?;
            if i == 0 {
                return Err(perr(no + 1, "indices are 1-based"));
            }
            idx.push(i - 1);
        }
        let v: f64 = f[n].parse().map_err(|_| perr(no + 1, format!("bad value `{}`", f[n])))?;
        *entries.entry(idx).or_insert(0.0) += v;
    }
    let order = order.ok_or_else(|| perr(1, "no entries"))?;
    let mut shape = vec![0; order];
    for idx in entries.keys() {
        for (k, &i) in idx.iter().enumerate() {
            shape[k] = shape[k].max(i + 1);
        }
    }
    let points: Vec<(Vec<usize>, f64)> = entries.into_iter().collect();
    let modes: Vec<usize> = (0..order).collect();
    build(name, &shape, &modes, &shape, &vec![LevelFormat::Compressed; order], &points)
}

pub fn write_frostt(t: &TensorStorage) -> String {
    let d = from_levels(t);
    let mut s = String::new();
    for (idx, v) in d.nonzeros() {
        for i in idx {
            let _ = write!(s, "{} ", i + 1);
        }
        let _ = writeln!(s, "{v}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::Level;

    #[test]
    fn example_matrix() {
        let text = "%%MatrixMarket matrix coordinate real general\n% comment\n4 4 5\n1 2 1\n2 1 2\n2 3 3\n4 2 4\n4 4 5\n";
        let t = parse_matrix_market("B", text).unwrap();
        assert_eq!(t.levels[0], Level::Compressed { seg: vec![0, 3], crd: vec![0, 1, 3] });
        assert_eq!(t.levels[1], Level::Compressed { seg: vec![0, 1, 3, 5], crd: vec![1, 0, 2, 1, 3] });
        assert_eq!(t.vals, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let again = parse_matrix_market("B", &write_matrix_market(&t)).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn empty_and_duplicates() {
        let t = parse_matrix_market("E", "%%MatrixMarket matrix coordinate real general\n3 3 0\n").unwrap();
        assert_eq!(t.levels[0], Level::Compressed { seg: vec![0, 0], crd: vec![] });
        assert!(t.vals.is_empty());
        let t = parse_matrix_market("D", "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1\n1 1 2\n").unwrap();
        assert_eq!(t.vals, vec![3.0]);
    }

    #[test]
    fn symmetric_and_array() {
        let t = parse_matrix_market("S", "%%MatrixMarket matrix coordinate integer symmetric\n2 2 2\n1 1 1\n2 1 4\n").unwrap();
        assert_eq!(from_levels(&t).data, vec![1.0, 4.0, 4.0, 0.0]);
        let t = parse_matrix_market("A", "%%MatrixMarket matrix array real general\n2 2\n1\n0\n0\n2\n").unwrap();
        assert_eq!(from_levels(&t).data, vec![1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn rejects_complex() {
        let r = parse_matrix_market("C", "%%MatrixMarket matrix coordinate complex general\n1 1 1\n1 1 1 0\n");
        assert!(matches!(r, Err(StorageError::UnsupportedField(_))));
    }

    #[test]
    fn frostt_files() {
        let t = parse_frostt("T", "1 1 1 1.0\n1 2 3 2.0\n2 1 2 3.0\n").unwrap();
        assert_eq!(t.levels.len(), 3);
        assert_eq!(t.vals.len(), 3);
        assert_eq!(t.shape, vec![2, 2, 3]);
        let t = parse_frostt("S", "1 1 1 7.0\n").unwrap();
        assert_eq!(t.vals, vec![7.0]);
        for level in &t.levels {
            assert_eq!(level, &Level::Compressed { seg: vec![0, 1], crd: vec![0] });
        }
        let r = parse_frostt("R", "1 1 1 1.0\n1 2 2.0\n");
        assert!(matches!(r, Err(StorageError::InconsistentOrder { line: 2, .. })));
        let r = parse_frostt("R", "1 x 1 1.0\n");
        assert!(matches!(r, Err(StorageError::Parse { line: 1, .. })));
    }
}
