//! Locally-constrained dynamic routing by agreement.
//!
//! Each parent position owns its own logits `b[c, p, j]`: child slot `c`
//! (kernel offset and child capsule type), parent position `p`, parent type
//! `j`. The routing softmax normalizes over parent types, so every child
//! slot splits its vote across the parent types at its single parent
//! position.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoutingConfig {
    /// Routing iterations `d >= 1`.
    pub iterations: usize,
    /// When false the coupling coefficients stay uniform and no iteration runs.
    pub enabled: bool,
    /// Treat the coefficients as constants when differentiating: the logit
    /// updates see detached votes and only the final weighted sum carries
    /// gradient to the votes.
    pub stop_gradient: bool,
}

impl RoutingConfig {
    pub fn dynamic(iterations: usize) -> Self {
        RoutingConfig {
            iterations,
            enabled: true,
            stop_gradient: false,
        }
    }

    pub fn uniform() -> Self {
        RoutingConfig {
            iterations: 1,
            enabled: false,
            stop_gradient: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("route", "routing needs at least one iteration"));
        }
        Ok(())
    }
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self::dynamic(3)
    }
}

/// Coefficients and agreements seen during one iteration.
#[derive(Clone, Debug)]
pub struct RoutingSnapshot<T> {
    pub coefficients: Tensor<T>,
    /// Agreement added to the logits after this iteration; `None` for the
    /// last iteration, whose update would never be read.
    pub agreement: Option<Tensor<T>>,
}

/// Logits, coefficients and an optional per-iteration trace for one
/// routing invocation.
#[derive(Clone, Debug)]
pub struct RoutingState<T> {
    pub logits: Tensor<T>,
    pub coefficients: Tensor<T>,
    pub iterations: usize,
    pub trace: Vec<RoutingSnapshot<T>>,
}

/// Route votes `[C, P, J, Z]` to parents `[P, J, Z]`.
///
/// Runs `b <- 0`, then `d` times: `r <- softmax(b)`, `s <- sum_c r u`,
/// `v <- squash(s)`, `b <- b + u . v`.
pub fn route<'t, T: Scalar>(votes: Var<'t, T>, config: &RoutingConfig) -> Result<Var<'t, T>> {
    route_traced(votes, config, false).map(|(v, _)| v)
}

/// [`route`], additionally returning the routing state. With `trace` set,
/// the state records the coefficients and agreements of every iteration.
pub fn route_traced<'t, T: Scalar>(
    votes: Var<'t, T>,
    config: &RoutingConfig,
    trace: bool,
) -> Result<(Var<'t, T>, RoutingState<T>)> {
    config.validate()?;
    let shape = votes.shape();
    let [c, p, j, _z] = shape[..] else {
        return Err(Error::invalid("route", format!("votes must be [C, P, J, Z], got {shape:?}")));
    };
    let tape = votes.tape();
    let logit_shape = [c, p, j];

    if !config.enabled {
        let uniform = T::one() / <T as Scalar>::from_usize(j);
        let r = tape.constant(Tensor::full(&logit_shape, uniform));
        let parents = r.vote_sum(votes)?.squash()?;
        let state = RoutingState {
            logits: Tensor::zeros(&logit_shape),
            coefficients: (*r.value()).clone(),
            iterations: 0,
            trace: Vec::new(),
        };
        return Ok((parents, state));
    }

    let routed_votes = if config.stop_gradient { votes.detach() } else { votes };
    let mut logits = tape.constant(Tensor::zeros(&logit_shape));
    let mut snapshots = Vec::new();
    let mut last = None;
    for it in 0..config.iterations {
        let final_pass = it + 1 == config.iterations;
        let r = logits.softmax_last()?;
        let u = if final_pass { votes } else { routed_votes };
        let v = r.vote_sum(u)?.squash()?;
        let agreement = if final_pass {
            None
        } else {
            let a = routed_votes.agreement(v)?;
            logits = logits.add(a)?;
            Some(a)
        };
        if trace {
            snapshots.push(RoutingSnapshot {
                coefficients: (*r.value()).clone(),
                agreement: agreement.map(|a| (*a.value()).clone()),
            });
        }
        last = Some((v, r));
    }
    let (parents, r) = last.expect("at least one iteration");
    let state = RoutingState {
        logits: (*logits.value()).clone(),
        coefficients: (*r.value()).clone(),
        iterations: config.iterations,
        trace: snapshots,
    };
    Ok((parents, state))
}

/// Routing softmax over parent types (the last axis of the logits).
pub fn routing_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    super::ops::softmax_last(logits)
}
