use rand::Rng;

pub(crate) use crate::gradcheck::check_gradient;
use crate::tensor::Tensor;

pub(crate) fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}
