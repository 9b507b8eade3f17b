use super::{BackwardArgs, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{self, Padding, Tensor, Transpose};

fn same_tape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.tape, b.tape), "variables belong to different tapes");
}

fn unary<'t, T: Scalar>(
    x: &Var<'t, T>,
    op: &'static str,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Result<Var<'t, T>> {
    let value = x.value().map(f);
    x.tape.push(
        op,
        value,
        &[*x],
        Box::new(move |a: &BackwardArgs<'_, T>| {
            let data = a
                .grad
                .data()
                .iter()
                .zip(a.inputs[0].data())
                .zip(a.out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(a.grad.shape(), data).expect("same shape"))]
        }),
    )
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, &other);
        let value = self.value().broadcast_with(&other.value(), "add", |a, b| a + b)?;
        self.tape.push(
            "add",
            value,
            &[*self, other],
            Box::new(|a: &BackwardArgs<'_, T>| {
                vec![
                    a.needs[0].then(|| a.grad.sum_to_shape(a.inputs[0].shape())),
                    a.needs[1].then(|| a.grad.sum_to_shape(a.inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, &other);
        let value = self.value().broadcast_with(&other.value(), "sub", |a, b| a - b)?;
        self.tape.push(
            "sub",
            value,
            &[*self, other],
            Box::new(|a: &BackwardArgs<'_, T>| {
                vec![
                    a.needs[0].then(|| a.grad.sum_to_shape(a.inputs[0].shape())),
                    a.needs[1].then(|| a.grad.map(|g| -g).sum_to_shape(a.inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, &other);
        let value = self.value().broadcast_with(&other.value(), "mul", |a, b| a * b)?;
        self.tape.push(
            "mul",
            value,
            &[*self, other],
            Box::new(|a: &BackwardArgs<'_, T>| {
                let (x, y) = (a.inputs[0], a.inputs[1]);
                let gx = a.needs[0].then(|| {
                    a.grad
                        .broadcast_with(y, "mul", |g, y| g * y)
                        .expect("broadcast checked in forward")
                        .sum_to_shape(x.shape())
                });
                let gy = a.needs[1].then(|| {
                    a.grad
                        .broadcast_with(x, "mul", |g, x| g * x)
                        .expect("broadcast checked in forward")
                        .sum_to_shape(y.shape())
                });
                vec![gx, gy]
            }),
        )
    }

    pub fn div(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, &other);
        let value = self.value().broadcast_with(&other.value(), "div", |a, b| a / b)?;
        self.tape.push(
            "div",
            value,
            &[*self, other],
            Box::new(|a: &BackwardArgs<'_, T>| {
                let (x, y) = (a.inputs[0], a.inputs[1]);
                let gx = a.needs[0].then(|| {
                    a.grad
                        .broadcast_with(y, "div", |g, y| g / y)
                        .expect("broadcast checked in forward")
                        .sum_to_shape(x.shape())
                });
                let gy = a.needs[1].then(|| {
                    // d(x/y)/dy = -(x/y)/y = -out/y
                    let q = a.out.broadcast_with(y, "div", |o, y| -o / y).expect("broadcast checked");
                    a.grad.zip_map(&q, |g, q| g * q).expect("same shape").sum_to_shape(y.shape())
                });
                vec![gx, gy]
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t, T>> {
        let c: T = lit(c);
        unary(self, "add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Var<'t, T>> {
        let c: T = lit(c);
        unary(self, "mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Result<Var<'t, T>> {
        unary(self, "neg", |x| -x, |_, _| -T::one())
    }

    pub fn exp(&self) -> Result<Var<'t, T>> {
        unary(self, "exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Result<Var<'t, T>> {
        unary(self, "ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn square(&self) -> Result<Var<'t, T>> {
        unary(self, "square", |x| x * x, |x, _| x + x)
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        unary(
            self,
            "relu",
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        unary(
            self,
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t, T>> {
        let (lo, hi): (T, T) = (lit(lo), lit(hi));
        unary(
            self,
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let value = Tensor::scalar(self.value().sum());
        self.tape.push(
            "sum",
            value,
            &[*self],
            Box::new(|a: &BackwardArgs<'_, T>| vec![Some(Tensor::full(a.inputs[0].shape(), a.grad.item()))]),
        )
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let n = self.value().len();
        self.sum()?.mul_scalar(1.0 / n as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let value = self.value().sum_axis(axis)?;
        self.tape.push(
            "sum_axis",
            value,
            &[*self],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                let shape = a.inputs[0].shape();
                let mut kept = shape.to_vec();
                kept[axis] = 1;
                let g = a.grad.reshape(&kept).expect("kept-dim reshape");
                let full = Tensor::<T>::zeros(shape).broadcast_with(&g, "sum_axis", |_, g| g).expect("broadcast");
                vec![Some(full)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshape(shape)?;
        self.tape.push(
            "reshape",
            value,
            &[*self],
            Box::new(|a: &BackwardArgs<'_, T>| vec![Some(a.grad.reshape(a.inputs[0].shape()).expect("same size"))]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.push(
            "permute",
            value,
            &[*self],
            Box::new(move |a: &BackwardArgs<'_, T>| vec![Some(a.grad.permute(&inverse).expect("valid inverse"))]),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no tensors"))?;
        for p in parts {
            same_tape(first, p);
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| &**v).collect();
        let value = Tensor::concat(&refs, axis)?;
        let sizes: Vec<usize> = refs.iter().map(|v| v.shape()[axis]).collect();
        first.tape.push(
            "concat",
            value,
            parts,
            Box::new(move |a: &BackwardArgs<'_, T>| {
                a.grad.split(axis, &sizes).expect("split mirrors concat").into_iter().map(Some).collect()
            }),
        )
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, &other);
        let value = tensor::matmul(&self.value(), Transpose::No, &other.value(), Transpose::No)?;
        self.tape.push(
            "matmul",
            value,
            &[*self, other],
            Box::new(|a: &BackwardArgs<'_, T>| {
                let (x, y) = (a.inputs[0], a.inputs[1]);
                vec![
                    a.needs[0].then(|| tensor::matmul(a.grad, Transpose::No, y, Transpose::Yes).expect("shapes")),
                    a.needs[1].then(|| tensor::matmul(x, Transpose::Yes, a.grad, Transpose::No).expect("shapes")),
                ]
            }),
        )
    }

    /// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, &other);
        let value = tensor::bmm(&self.value(), Transpose::No, &other.value(), Transpose::No)?;
        self.tape.push(
            "bmm",
            value,
            &[*self, other],
            Box::new(|a: &BackwardArgs<'_, T>| {
                let (x, y) = (a.inputs[0], a.inputs[1]);
                vec![
                    a.needs[0].then(|| tensor::bmm(a.grad, Transpose::No, y, Transpose::Yes).expect("shapes")),
                    a.needs[1].then(|| tensor::bmm(x, Transpose::Yes, a.grad, Transpose::No).expect("shapes")),
                ]
            }),
        )
    }

    /// Tensor contraction over paired axes; see [`tensor::contract`].
    pub fn contract(&self, other: Var<'t, T>, pairs: &[(usize, usize)]) -> Result<Var<'t, T>> {
        use crate::tensor::linalg_plan;
        let plan = linalg_plan(&self.shape(), &other.shape(), pairs)?;
        let a = self.permute(&plan.a_perm)?.reshape(&[plan.m, plan.k])?;
        let b = other.permute(&plan.b_perm)?.reshape(&[plan.k, plan.n])?;
        a.matmul(b)?.reshape(&plan.out_shape)
    }

    /// Patch lowering of an `h x w x c` grid; see [`tensor::conv2d_lower`].
    pub fn conv2d_lower(&self, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Var<'t, T>> {
        let input = self.value();
        let value = tensor::conv2d_lower(&input, kh, kw, stride, padding)?;
        let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let geometry = tensor::conv_geometry(h, w, kh, kw, stride, padding)?;
        self.tape.push(
            "conv2d_lower",
            value,
            &[*self],
            Box::new(move |a: &BackwardArgs<'_, T>| vec![Some(tensor::conv_lower_adjoint(a.grad, &geometry, c))]),
        )
    }

    /// Transposed-convolution scatter; see [`tensor::deconv2d_scatter`].
    pub fn deconv2d_scatter(
        &self,
        channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Var<'t, T>> {
        let value = tensor::deconv2d_scatter(&self.value(), channels, kh, kw, stride, padding)?;
        let (h, w) = (value.shape()[0], value.shape()[1]);
        let geometry = tensor::conv_geometry(h, w, kh, kw, stride, padding)?;
        self.tape.push(
            "deconv2d_scatter",
            value,
            &[*self],
            Box::new(move |a: &BackwardArgs<'_, T>| {
                vec![Some(tensor::conv_lower_with(a.grad, &geometry, channels))]
            }),
        )
    }

    /// Zero-insertion upsampling; see [`tensor::dilate`].
    pub fn dilate(&self, stride: usize) -> Result<Var<'t, T>> {
        let value = tensor::dilate(&self.value(), stride)?;
        self.tape.push(
            "dilate",
            value,
            &[*self],
            Box::new(move |a: &BackwardArgs<'_, T>| vec![Some(tensor::subsample(a.grad, stride).expect("dilated"))]),
        )
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor`. Used to plant a known-bad backward rule in test fixtures.
    pub fn scale_grad(&self, factor: f64) -> Result<Var<'t, T>> {
        let f: T = lit(factor);
        unary(self, "scale_grad", |x| x, move |_, _| f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::testing::{check_gradient, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-5;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mul_by_zero_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[2, 2]));
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(*x.mul(z).unwrap().value(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn elementwise_gradients() {
        for seed in 0..10 {
            let mut r = rng(seed);
            let a = random_tensor(&[3, 4], &mut r);
            let b = random_tensor(&[4], &mut r).map(|x| x.abs() + 0.5);
            let err = check_gradient(&[a.clone(), b.clone()], |_, v| {
                let s = v[0].add(v[1])?.mul(v[0])?.div(v[1])?.sub(v[1])?;
                s.sigmoid()?.add_scalar(1.0)?.ln()?.exp()?.square()?.mul_scalar(0.3)?.neg()?.sum()
            });
            assert!(err < TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn relu_and_clamp_gradients() {
        let mut r = rng(4);
        let a = random_tensor(&[5, 3], &mut r);
        let err = check_gradient(&[a], |_, v| v[0].relu()?.add(v[0].clamp(-0.5, 0.5)?)?.square()?.sum());
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn shape_op_gradients() {
        for seed in 0..10 {
            let mut r = rng(100 + seed);
            let a = random_tensor(&[2, 3, 4], &mut r);
            let b = random_tensor(&[2, 1, 4], &mut r);
            let w = random_tensor(&[2, 5, 4], &mut r);
            let err = check_gradient(&[a, b, w], |_, v| {
                let c = Var::concat(&[v[0], v[1]], 1)?;
                let p = c.permute(&[2, 0, 1])?.reshape(&[4, 8])?;
                let s = p.sum_axis(0)?.square()?.sum()?;
                let t = c.sum_axis(1)?.mul(v[2].sum_axis(1)?)?.sum()?;
                s.add(t)
            });
            assert!(err < TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn contraction_gradients() {
        for seed in 0..10 {
            let mut r = rng(200 + seed);
            let a = random_tensor(&[4, 5], &mut r);
            let b = random_tensor(&[5, 6], &mut r);
            let err = check_gradient(&[a, b], |_, v| v[0].contract(v[1], &[(1, 0)])?.square()?.sum());
            assert!(err < 1e-6, "seed {seed}: {err}");
            let x = random_tensor(&[3, 4, 2], &mut r);
            let y = random_tensor(&[3, 2, 5], &mut r);
            let err = check_gradient(&[x, y], |_, v| v[0].bmm(v[1])?.square()?.sum());
            assert!(err < TOL, "seed {seed}: {err}");
        }
    }

    #[test]
    fn lowering_gradients() {
        for seed in 0..10 {
            let mut r = rng(300 + seed);
            let x = random_tensor(&[4, 6, 2], &mut r);
            let err = check_gradient(&[x], |_, v| {
                let cols = v[0].conv2d_lower(3, 3, 2, Padding::Same)?;
                let back = cols.square()?.deconv2d_scatter(2, 3, 3, 2, Padding::Same)?;
                back.dilate(2)?.square()?.sum()
            });
            assert!(err < TOL, "seed {seed}: {err}");
        }
    }
}
