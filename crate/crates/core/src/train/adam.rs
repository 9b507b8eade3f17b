use crate::error::{Error, Result};
use crate::model::NamedTensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("adam", format!("invalid hyperparameters {self:?}")))
        }
    }
}

/// Moment accumulators for every parameter tensor, kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(config: AdamConfig, params: &[NamedTensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        AdamState {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One bias-corrected update. Non-finite or misshapen gradients reject
    /// the whole step before any parameter or moment is touched.
    pub fn step<T: Scalar>(&mut self, params: &mut [NamedTensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::invalid("adam", "parameter and gradient counts differ"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::shapes("adam", p.value.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::invalid("adam", format!("non-finite gradient for `{}`", p.name)));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (x, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + epsilon);
                *x = <T as Scalar>::from_f64(x.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(values: &[f64]) -> Vec<NamedTensor<f64>> {
        vec![NamedTensor {
            name: "p".into(),
            value: Tensor::new(&[values.len()], values.to_vec()).unwrap(),
        }]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = params(&[1.0, -2.0]);
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        let mut p = params(&[0.0, 0.0]);
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(cfg, &p);
        let g = Tensor::new(&[2], vec![3.0, -0.5]).unwrap();
        for _ in 0..50 {
            let before = p[0].value.clone();
            s.step(&mut p, std::slice::from_ref(&g)).unwrap();
            let d = p[0].value.data()[0] - before.data()[0];
            assert!((d + 0.01).abs() < 1e-6, "{d}");
            let d = p[0].value.data()[1] - before.data()[1];
            assert!((d - 0.01).abs() < 1e-6, "{d}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = params(&[1.0, -2.0, 0.5]);
        let f = |p: &[NamedTensor<f64>]| p[0].value.data().iter().map(|x| x * x).sum::<f64>();
        let initial = f(&p);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(cfg, &p);
        for _ in 0..200 {
            let g = p[0].value.map(|x| 2.0 * x);
            s.step(&mut p, &[g]).unwrap();
        }
        assert!(f(&p) < 1e-3 * initial, "{}", f(&p));
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut p = params(&[1.0, 2.0]);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let before = (p.clone(), s.clone());
        let err = s.step(&mut p, &[Tensor::new(&[2], vec![0.1, f64::NAN]).unwrap()]).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        assert_eq!((p, s), before);
    }
}
