//! Routing primitives, as plain tensor kernels and as recorded tape ops.
//!
//! Votes are laid out `[C, P, J, Z]`: child slot, parent position, parent
//! type, pose component. Every reduction accumulates in index order starting
//! from zero, so a loop-by-loop transliteration reproduces the results
//! exactly.

use crate::autodiff::{BackwardArgs, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn last_axis<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<usize> {
    match x.shape().last() {
        Some(&n) if x.rank() >= 1 => Ok(n),
        _ => Err(Error::invalid(op, "needs at least one axis")),
    }
}

/// Squash every vector along the last axis:
/// `v = (|p|^2 / (1 + |p|^2)) * (p / |p|)`, with `0 -> 0`.
pub fn squash<T: Scalar>(p: &Tensor<T>) -> Result<Tensor<T>> {
    let z = last_axis("squash", p)?;
    let mut out = p.clone();
    for v in out.data_mut().chunks_mut(z) {
        squash_in_place(v);
    }
    Ok(out)
}

#[inline]
fn squash_in_place<T: Scalar>(v: &mut [T]) {
    let n2 = v.iter().fold(T::zero(), |acc, &x| acc + x * x);
    if n2 == T::zero() {
        return;
    }
    let n = n2.sqrt();
    let gain = n2 / (T::one() + n2);
    for x in v.iter_mut() {
        *x = gain * (*x / n);
    }
}

/// Max-shifted softmax along the last axis.
pub fn softmax_last<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let n = last_axis("softmax", logits)?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x = *x / total;
        }
    }
    Ok(out)
}

/// Euclidean length of each vector along the last axis (axis removed).
pub fn norm_last<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let z = last_axis("norm", x)?;
    let data: Vec<T> = x
        .data()
        .chunks(z)
        .map(|v| v.iter().fold(T::zero(), |acc, &a| acc + a * a).sqrt())
        .collect();
    let mut shape = x.shape()[..x.rank() - 1].to_vec();
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(&shape, data)
}

fn vote_dims<T: Scalar>(r: &Tensor<T>, u: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match (r.shape(), u.shape()) {
        ([c, p, j], [c2, p2, j2, z]) if c == c2 && p == p2 && j == j2 => Ok((*c, *p, *j, *z)),
        _ => Err(Error::shapes("vote_sum", r.shape(), u.shape())),
    }
}

/// `s[p, j, :] = sum_c r[c, p, j] * u[c, p, j, :]`.
pub fn vote_sum<T: Scalar>(r: &Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, p, j, z) = vote_dims(r, u)?;
    let mut s = vec![T::zero(); p * j * z];
    let (rd, ud) = (r.data(), u.data());
    for ci in 0..c {
        for pj in 0..p * j {
            let w = rd[ci * p * j + pj];
            let src = &ud[(ci * p * j + pj) * z..][..z];
            for (d, &x) in s[pj * z..(pj + 1) * z].iter_mut().zip(src) {
                *d += w * x;
            }
        }
    }
    Tensor::new(&[p, j, z], s)
}

/// `a[c, p, j] = u[c, p, j, :] . v[p, j, :]`.
pub fn agreement<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, p, j, z) = match (u.shape(), v.shape()) {
        ([c, p, j, z], [p2, j2, z2]) if p == p2 && j == j2 && z == z2 => (*c, *p, *j, *z),
        _ => return Err(Error::shapes("agreement", u.shape(), v.shape())),
    };
    let (ud, vd) = (u.data(), v.data());
    let data = (0..c * p * j)
        .map(|idx| {
            let pj = idx % (p * j);
            let a = &ud[idx * z..][..z];
            let b = &vd[pj * z..][..z];
            a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
        })
        .collect();
    Tensor::new(&[c, p, j], data)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn squash(&self) -> Result<Var<'t, T>> {
        let value = squash(&self.value())?;
        let z = *value.shape().last().unwrap();
        self.tape().push(
            "squash",
            value,
            &[*self],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let mut g = a.grad.clone();
                let pd = a.inputs[0].data();
                for (k, gv) in g.data_mut().chunks_mut(z).enumerate() {
                    let p = &pd[k * z..][..z];
                    let n2 = p.iter().fold(T::zero(), |acc, &x| acc + x * x);
                    if n2 == T::zero() {
                        gv.iter_mut().for_each(|x| *x = T::zero());
                        continue;
                    }
                    // v = f(n) p with f = n / (1 + n^2)
                    let n = n2.sqrt();
                    let one = T::one();
                    let f = n / (one + n2);
                    let df_over_n = (one - n2) / ((one + n2) * (one + n2) * n);
                    let pg = p.iter().zip(gv.iter()).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    for (x, &pi) in gv.iter_mut().zip(p) {
                        *x = f * *x + df_over_n * pg * pi;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn softmax_last(&self) -> Result<Var<'t, T>> {
        let value = softmax_last(&self.value())?;
        let n = *value.shape().last().unwrap();
        self.tape().push(
            "softmax",
            value,
            &[*self],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let mut g = a.grad.clone();
                for (gv, y) in g.data_mut().chunks_mut(n).zip(a.out.data().chunks(n)) {
                    let dot = gv.iter().zip(y).fold(T::zero(), |acc, (&g, &y)| acc + g * y);
                    for (x, &yi) in gv.iter_mut().zip(y) {
                        *x = yi * (*x - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Length of each vector along the last axis. The gradient at a zero
    /// vector is taken as zero.
    pub fn norm_last(&self) -> Result<Var<'t, T>> {
        let value = norm_last(&self.value())?;
        let z = *self.shape().last().unwrap();
        self.tape().push(
            "norm",
            value,
            &[*self],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let x = a.inputs[0];
                let mut g = Tensor::zeros(x.shape());
                for (k, gv) in g.data_mut().chunks_mut(z).enumerate() {
                    let n = a.out.data()[k];
                    if n == T::zero() {
                        continue;
                    }
                    let scale = a.grad.data()[k] / n;
                    for (o, &xi) in gv.iter_mut().zip(&x.data()[k * z..][..z]) {
                        *o = scale * xi;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Routing-weighted vote sum; see [`vote_sum`]. `self` is `r`.
    pub fn vote_sum(&self, votes: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = vote_sum(&self.value(), &votes.value())?;
        self.tape().push(
            "vote_sum",
            value,
            &[*self, votes],
            Box::new(|a: &BackwardArgs<'_, T>| {
                let (r, u, g) = (a.inputs[0], a.inputs[1], a.grad);
                let (c, p, j, z) = vote_dims(r, u).expect("checked in forward");
                let (ud, gd) = (u.data(), g.data());
                let dr = a.needs[0].then(|| {
                    let data = (0..c * p * j)
                        .map(|idx| {
                            let pj = idx % (p * j);
                            ud[idx * z..][..z]
                                .iter()
                                .zip(&gd[pj * z..][..z])
                                .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
                        })
                        .collect();
                    Tensor::new(r.shape(), data).expect("shape")
                });
                let du = a.needs[1].then(|| {
                    let mut out = vec![T::zero(); u.len()];
                    for (idx, &w) in r.data().iter().enumerate() {
                        let pj = idx % (p * j);
                        for (o, &y) in out[idx * z..][..z].iter_mut().zip(&gd[pj * z..][..z]) {
                            *o = w * y;
                        }
                    }
                    Tensor::new(u.shape(), out).expect("shape")
                });
                vec![dr, du]
            }),
        )
    }

    /// Agreement between votes (`self`) and parent poses; see [`agreement`].
    pub fn agreement(&self, parents: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = agreement(&self.value(), &parents.value())?;
        self.tape().push(
            "agreement",
            value,
            &[*self, parents],
            Box::new(|a: &BackwardArgs<'_, T>| {
                let (u, v, g) = (a.inputs[0], a.inputs[1], a.grad);
                let (p, j, z) = (v.shape()[0], v.shape()[1], v.shape()[2]);
                let (ud, vd) = (u.data(), v.data());
                let du = a.needs[0].then(|| {
                    let mut out = vec![T::zero(); u.len()];
                    for (idx, &w) in g.data().iter().enumerate() {
                        let pj = idx % (p * j);
                        for (o, &y) in out[idx * z..][..z].iter_mut().zip(&vd[pj * z..][..z]) {
                            *o = w * y;
                        }
                    }
                    Tensor::new(u.shape(), out).expect("shape")
                });
                let dv = a.needs[1].then(|| {
                    let mut out = vec![T::zero(); v.len()];
                    for (idx, &w) in g.data().iter().enumerate() {
                        let pj = idx % (p * j);
                        for (o, &x) in out[pj * z..][..z].iter_mut().zip(&ud[idx * z..][..z]) {
                            *o += w * x;
                        }
                    }
                    Tensor::new(v.shape(), out).expect("shape")
                });
                vec![du, dv]
            }),
        )
    }
}
