use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// `c += op(a) * op(b)` for row-major slices, `op(a)` being `m x k` and
/// `op(b)` being `k x n`.
///
/// Every output element accumulates its `k` products in increasing `k` order,
/// so results match a naive triple loop bit for bit.
pub(crate) fn gemm_acc<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    ta: Transpose,
    b: &[T],
    tb: Transpose,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if tb == Transpose::Yes {
        let bt = transpose2(b, n, k);
        return gemm_acc(m, n, k, a, ta, &bt, Transpose::No, c);
    }
    match ta {
        Transpose::No => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n..(i + 1) * n];
                for (p, &aip) in arow.iter().enumerate() {
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                }
            }
        }
        Transpose::Yes => {
            // a is stored k x m
            for p in 0..k {
                let acol = &a[p * m..(p + 1) * m];
                let brow = &b[p * n..(p + 1) * n];
                for (i, &aip) in acol.iter().enumerate() {
                    if aip == T::zero() {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                }
            }
        }
    }
}

fn transpose2<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn mat_dims(t: &Tensor<impl Scalar>, tr: Transpose) -> (usize, usize) {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    match tr {
        Transpose::No => (r, c),
        Transpose::Yes => (c, r),
    }
}

/// Two-dimensional matrix product `op(a) * op(b)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, ta: Transpose, b: &Tensor<T>, tb: Transpose) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shapes("matmul", a.shape(), b.shape()));
    }
    let (m, k) = mat_dims(a, ta);
    let (k2, n) = mat_dims(b, tb);
    if k != k2 {
        return Err(Error::shapes("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(m, n, k, a.data(), ta, b.data(), tb, &mut out);
    Tensor::new(&[m, n], out)
}

/// Batched product over a shared leading axis: `[B, ., .] x [B, ., .]`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, ta: Transpose, b: &Tensor<T>, tb: Transpose) -> Result<Tensor<T>> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(Error::shapes("bmm", a.shape(), b.shape()));
    }
    let batch = a.shape()[0];
    let (m, k) = mat_dims(a, ta);
    let (k2, n) = mat_dims(b, tb);
    if k != k2 {
        return Err(Error::shapes("bmm", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
        gemm_acc(
            m,
            n,
            k,
            &ad[i * m * k..(i + 1) * m * k],
            ta,
            &bd[i * k * n..(i + 1) * k * n],
            tb,
            c,
        );
    });
    Tensor::new(&[batch, m, n], out)
}

/// Tensor contraction over the paired axes `(axis of a, axis of b)`.
///
/// The result carries the free axes of `a` followed by the free axes of `b`,
/// each in their original order. A full contraction yields shape `[1]`.
pub fn contract<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, pairs: &[(usize, usize)]) -> Result<Tensor<T>> {
    let plan = ContractPlan::new(a.shape(), b.shape(), pairs)?;
    let ap = a.permute(&plan.a_perm)?.into_reshape(&[plan.m, plan.k])?;
    let bp = b.permute(&plan.b_perm)?.into_reshape(&[plan.k, plan.n])?;
    matmul(&ap, Transpose::No, &bp, Transpose::No)?.into_reshape(&plan.out_shape)
}

/// Axis bookkeeping shared by the tensor-level and tape-level contraction.
#[derive(Clone, Debug)]
pub(crate) struct ContractPlan {
    pub a_perm: Vec<usize>,
    pub b_perm: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

impl ContractPlan {
    pub fn new(a: &[usize], b: &[usize], pairs: &[(usize, usize)]) -> Result<Self> {
        let mut a_used = vec![false; a.len()];
        let mut b_used = vec![false; b.len()];
        for &(i, j) in pairs {
            if i >= a.len() || j >= b.len() || a_used[i] || b_used[j] || a[i] != b[j] {
                return Err(Error::shapes("contract", a, b));
            }
            a_used[i] = true;
            b_used[j] = true;
        }
        let a_free: Vec<usize> = (0..a.len()).filter(|&i| !a_used[i]).collect();
        let b_free: Vec<usize> = (0..b.len()).filter(|&j| !b_used[j]).collect();
        let mut a_perm = a_free.clone();
        a_perm.extend(pairs.iter().map(|p| p.0));
        let mut b_perm: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        b_perm.extend(&b_free);
        let m = a_free.iter().map(|&i| a[i]).product();
        let k = pairs.iter().map(|p| a[p.0]).product();
        let n = b_free.iter().map(|&j| b[j]).product();
        let mut out_shape: Vec<usize> = a_free.iter().map(|&i| a[i]).collect();
        out_shape.extend(b_free.iter().map(|&j| b[j]));
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(ContractPlan {
            a_perm,
            b_perm,
            m,
            k,
            n,
            out_shape,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn(&[m, n], |ix| {
            let (i, j) = (ix / n, ix % n);
            (0..k).fold(0.0, |s, p| s + a.get(&[i, p]) * b.get(&[p, j]))
        })
    }

    #[test]
    fn matmul_two_by_two() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 0.0, 0.0, 1.0, 3.0]).unwrap();
        let b = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]).unwrap();
        let c = matmul(&a, Transpose::No, &b, Transpose::No).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 6.0, -2.0]);
    }

    #[test]
    fn transposed_variants_agree() {
        let a = Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.11).cos());
        let reference = naive(&a, &b);
        let at = a.permute(&[1, 0]).unwrap();
        let bt = b.permute(&[1, 0]).unwrap();
        for (x, tx, y, ty) in [
            (&a, Transpose::No, &b, Transpose::No),
            (&at, Transpose::Yes, &b, Transpose::No),
            (&a, Transpose::No, &bt, Transpose::Yes),
            (&at, Transpose::Yes, &bt, Transpose::Yes),
        ] {
            assert_eq!(matmul(x, tx, y, ty).unwrap(), reference);
        }
    }

    #[test]
    fn contract_zero_tensor() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let z = Tensor::<f64>::zeros(&[4, 3]);
        let c = contract(&a, &z, &[(2, 0), (1, 1)]).unwrap();
        assert_eq!(c.shape(), &[2]);
        assert!(c.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn contract_matches_index_loop() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sqrt());
        let b = Tensor::from_fn(&[4, 5, 3], |i| 1.0 / (1.0 + i as f64));
        let c = contract(&a, &b, &[(1, 2), (2, 0)]).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        for i in 0..2 {
            for j in 0..5 {
                let mut s = 0.0;
                for p in 0..3 {
                    for q in 0..4 {
                        s += a.get(&[i, p, q]) * b.get(&[q, j, p]);
                    }
                }
                assert!((c.get(&[i, j]) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contract_rejects_mismatched_extents() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(contract(&a, &b, &[(1, 0)]).is_err());
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let a = Tensor::from_fn(&[3, 4, 2], |i| (i as f64 * 0.3).sin());
        let b = Tensor::from_fn(&[3, 2, 5], |i| (i as f64 * 0.7).cos());
        let c = bmm(&a, Transpose::No, &b, Transpose::No).unwrap();
        let asplit = a.split(0, &[1, 1, 1]).unwrap();
        let bsplit = b.split(0, &[1, 1, 1]).unwrap();
        for i in 0..3 {
            let ai = asplit[i].reshape(&[4, 2]).unwrap();
            let bi = bsplit[i].reshape(&[2, 5]).unwrap();
            let ci = matmul(&ai, Transpose::No, &bi, Transpose::No).unwrap();
            assert_eq!(&c.data()[i * 20..(i + 1) * 20], ci.data());
        }
    }
}
