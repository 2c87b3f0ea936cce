//! Dense reference evaluation by exhaustive iteration over index values.

use std::collections::BTreeMap;

use thiserror::Error;

use super::ast::{Assignment, Expr, Sign};
use crate::storage::DenseTensor;

#[derive(Debug, Error, PartialEq)]
pub enum RefError {
    #[error("no input named `{0}`")]
    MissingTensor(String),
    #[error("`{tensor}` has order {found} but is accessed with {expected} indices")]
    OrderMismatch { tensor: String, expected: usize, found: usize },
    #[error("index `{var}` has conflicting extents {a} and {b}")]
    DimMismatch { var: String, a: usize, b: usize },
}

/// Extent of every index variable, read off the input shapes.
pub fn var_dims(a: &Assignment, inputs: &BTreeMap<String, DenseTensor>) -> Result<BTreeMap<String, usize>, RefError> {
    let mut dims: BTreeMap<String, usize> = BTreeMap::new();
    for acc in a.rhs.accesses() {
        let t = inputs.get(&acc.tensor).ok_or_else(|| RefError::MissingTensor(acc.tensor.clone()))?;
        if t.order() != acc.vars.len() {
            return Err(RefError::OrderMismatch { tensor: acc.tensor.clone(), expected: acc.vars.len(), found: t.order() });
        }
        for (v, &d) in acc.vars.iter().zip(&t.shape) {
            match dims.get(v) {
                Some(&old) if old != d => return Err(RefError::DimMismatch { var: v.clone(), a: old, b: d }),
                _ => {
                    dims.insert(v.clone(), d);
                }
            }
        }
    }
    Ok(dims)
}

enum Body<'a> {
    Leaf(&'a DenseTensor, Vec<usize>),
    Mul(Vec<Compiled<'a>>),
    Sum(Vec<(f64, Compiled<'a>)>),
}

/// A subexpression together with the variables summed over at it.
struct Compiled<'a> {
    body: Body<'a>,
    sums: Vec<usize>,
}

impl Compiled<'_> {
    fn eval(&self, idx: &mut [usize], ext: &[usize], scratch: &mut Vec<usize>) -> f64 {
        if self.sums.is_empty() {
            return self.body_eval(idx, ext, scratch);
        }
        if self.sums.iter().any(|&v| ext[v] == 0) {
            return 0.0;
        }
        for &v in &self.sums {
            idx[v] = 0;
        }
        let mut total = 0.0;
        loop {
            total += self.body_eval(idx, ext, scratch);
            let mut k = self.sums.len();
            loop {
                if k == 0 {
                    return total;
                }
                k -= 1;
                let v = self.sums[k];
                idx[v] += 1;
                if idx[v] < ext[v] {
                    break;
                }
                idx[v] = 0;
            }
        }
    }

    fn body_eval(&self, idx: &mut [usize], ext: &[usize], scratch: &mut Vec<usize>) -> f64 {
        match &self.body {
            Body::Leaf(t, vars) => {
                scratch.clear();
                scratch.extend(vars.iter().map(|&v| idx[v]));
                if t.order() == 0 {
                    t.data[0]
                } else {
                    t.get(scratch)
                }
            }
            Body::Mul(xs) => {
                let mut p = 1.0;
                for x in xs {
                    p *= x.eval(idx, ext, scratch);
                    if p == 0.0 {
                        break;
                    }
                }
                p
            }
            Body::Sum(xs) => xs.iter().map(|(s, x)| s * x.eval(idx, ext, scratch)).sum(),
        }
    }
}

fn compile<'a>(
    e: &Expr,
    path: &mut Vec<usize>,
    scopes: &[Vec<usize>],
    vars: &[String],
    inputs: &'a BTreeMap<String, DenseTensor>,
) -> Compiled<'a> {
    let sub = |k: usize, x: &Expr, path: &mut Vec<usize>| {
        path.push(k);
        let c = compile(x, path, scopes, vars, inputs);
        path.pop();
        c
    };
    let body = match e {
        Expr::Access(a) => {
            Body::Leaf(&inputs[&a.tensor], a.vars.iter().map(|v| vars.iter().position(|x| x == v).unwrap()).collect())
        }
        Expr::Mul(xs) => Body::Mul(xs.iter().enumerate().map(|(k, x)| sub(k, x, path)).collect()),
        Expr::Sum(xs) => Body::Sum(
            xs.iter()
                .enumerate()
                .map(|(k, (s, x))| (if *s == Sign::Plus { 1.0 } else { -1.0 }, sub(k, x, path)))
                .collect(),
        ),
    };
    let sums = (0..vars.len()).filter(|&v| !scopes[v].is_empty() && scopes[v] == *path).collect();
    Compiled { body, sums }
}

/// Evaluates `a` on dense inputs. Each reduced variable is summed over its
/// scope (see [`Assignment::scope_of`]). Order-0 inputs hold a single value.
pub fn reference_eval(a: &Assignment, inputs: &BTreeMap<String, DenseTensor>) -> Result<DenseTensor, RefError> {
    let dims = var_dims(a, inputs)?;
    let vars = a.vars();
    let extents: Vec<usize> = vars.iter().map(|v| dims[v]).collect();
    let out_shape: Vec<usize> = a.output.vars.iter().map(|v| dims[v]).collect();
    let mut out = DenseTensor::zeros(&out_shape);
    if out_shape.is_empty() {
        out.data = vec![0.0];
    }
    let scopes: Vec<Vec<usize>> = vars.iter().map(|v| a.scope_of(v)).collect();
    let mut body = compile(&a.rhs, &mut Vec::new(), &scopes, &vars, inputs);
    let n_out = a.output.vars.len();
    // reduced variables scoped at the root are iterated with the outputs
    body.sums.clear();
    if extents.iter().any(|&d| d == 0) {
        return Ok(out);
    }
    let mut idx = vec![0usize; vars.len()];
    let outer: Vec<usize> = (0..vars.len()).filter(|&v| scopes[v].is_empty()).collect();
    let mut scratch = Vec::new();
    loop {
        let v = body.eval(&mut idx, &extents, &mut scratch);
        if v != 0.0 {
            let o = if n_out == 0 { 0 } else { out.offset(&idx[..n_out]) };
            out.data[o] += v;
        }
        // odometer increment, last variable fastest
        let mut k = outer.len();
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            let v = outer[k];
            idx[v] += 1;
            if idx[v] < extents[v] {
                break;
            }
            idx[v] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::custard::ast::parse_einsum;

    fn inputs(list: &[(&str, DenseTensor)]) -> BTreeMap<String, DenseTensor> {
        list.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn spmv_and_scalars() {
        let b = DenseTensor::from_vec(&[2, 3], vec![1., 0., 2., 0., 3., 0.]).unwrap();
        let c = DenseTensor::from_vec(&[3], vec![4., 5., 6.]).unwrap();
        let a = parse_einsum("x(i) = B(i,j) * c(j)").unwrap();
        let x = reference_eval(&a, &inputs(&[("B", b.clone()), ("c", c.clone())])).unwrap();
        assert_eq!(x.data, vec![16.0, 15.0]);
        let a = parse_einsum("x = c(i) * c(i)").unwrap();
        assert_eq!(reference_eval(&a, &inputs(&[("c", c.clone())])).unwrap().data, vec![77.0]);
        let alpha = DenseTensor::from_vec(&[], vec![2.0]).unwrap();
        let a = parse_einsum("x(j) = alpha * B(i,j) - c(j)").unwrap();
        let x = reference_eval(&a, &inputs(&[("alpha", alpha), ("B", b), ("c", c)])).unwrap();
        assert_eq!(x.data, vec![2.0 - 4.0, 6.0 - 5.0, 4.0 - 6.0]);
    }

    #[test]
    fn shape_errors() {
        let a = parse_einsum("x(i) = B(i,j) * c(j)").unwrap();
        let b = DenseTensor::zeros(&[2, 3]);
        let c = DenseTensor::zeros(&[4]);
        assert!(matches!(reference_eval(&a, &inputs(&[("B", b.clone()), ("c", c)])), Err(RefError::DimMismatch { .. })));
        assert_eq!(reference_eval(&a, &inputs(&[("B", b)])), Err(RefError::MissingTensor("c".into())));
    }
}
