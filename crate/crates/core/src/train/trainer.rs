use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{AdamConfig, AdamState};
use super::checkpoint::save_checkpoint;
use super::metrics::MetricsLog;
use super::schedule::{Action, Schedule, ScheduleTracker};
use crate::autodiff::Tape;
use crate::capsule::threshold_mask;
use crate::data::{augment, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::loss::{dice, median};
use crate::model::{ForwardOptions, Model};
use crate::tensor::Tensor;

/// Default step size for desk-scale runs; [`AdamConfig::default`] keeps the
/// much smaller full-scale value.
pub const DESK_LEARNING_RATE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub schedule: Schedule,
    pub max_iterations: usize,
    pub augment: AugmentConfig,
    /// Seeds the sample order and the augmentation stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig {
                learning_rate: DESK_LEARNING_RATE,
                ..AdamConfig::default()
            },
            schedule: Schedule::default(),
            max_iterations: 20_000,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.schedule.validate()?;
        self.augment.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Mean loss and per-sample dice of a model on a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub dice: Vec<(String, f64)>,
}

impl Evaluation {
    pub fn median_dice(&self) -> Result<f64> {
        median(&self.dice.iter().map(|d| d.1).collect::<Vec<_>>())
    }
}

/// Loss and thresholded-dice of `model` on every sample.
pub fn evaluate(model: &Model<f32>, samples: &[Sample], threshold: f64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Dataset("no samples".into()));
    }
    let mut total = 0.0;
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let tape = Tape::new();
        let params = model.bind_constant(&tape);
        let parts = model.loss(&tape, &params, &s.image, &s.mask, &ForwardOptions::default())?;
        total += parts.total.value().item() as f64;
        let mask = threshold_mask(&parts.lengths.value(), threshold);
        scores.push((s.id.clone(), dice(&mask, &s.mask)?));
    }
    Ok(Evaluation {
        loss: total / samples.len() as f64,
        dice: scores,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters at the best validation dice, or the final ones when no
    /// validation ran.
    pub model: Model<f32>,
    pub iterations: usize,
    pub best_iteration: Option<usize>,
    pub best_dice: Option<f64>,
    pub stopped_early: bool,
}

fn diverged(iteration: usize, e: impl std::fmt::Display) -> Error {
    Error::Diverged {
        iteration,
        reason: e.to_string(),
    }
}

/// One gradient evaluation on one (augmented) sample.
fn sample_gradients(model: &Model<f32>, sample: &Sample) -> Result<(f64, Vec<Tensor<f32>>)> {
    let tape = Tape::new();
    let params = model.bind(&tape);
    let parts = model.loss(&tape, &params, &sample.image, &sample.mask, &ForwardOptions::default())?;
    let loss = parts.total.value().item() as f64;
    let grads = tape.backward(parts.total)?;
    Ok((loss, params.iter().map(|&p| grads.get_or_zeros(p)).collect()))
}

/// Train `model` with Adam on `train_set`, validating on `val_set`.
///
/// Events go to `log` as they happen, so the log survives a divergence.
/// With a `checkpoint` path every new best-dice model is saved there; on
/// divergence the file keeps the last good model and a `Diverged` error is
/// returned.
pub fn train(
    mut model: Model<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    log: &mut MetricsLog,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() && config.max_iterations > 0 {
        return Err(Error::Dataset("no training samples".into()));
    }
    let schedule = &config.schedule;
    let threshold = model.config().threshold;
    let mut adam = AdamState::new(config.adam, model.params());
    let mut tracker = ScheduleTracker::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    let mut stopped_early = false;
    let mut iteration = 0;
    log.record(0, "lr", adam.learning_rate());

    while iteration < config.max_iterations {
        iteration += 1;
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        let mut loss = 0.0;
        for _ in 0..schedule.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let sample = &train_set[order.pop().expect("refilled above")];
            let sample = augment(sample, rng.next_u64(), &config.augment);
            let (l, grads) = sample_gradients(&model, &sample).map_err(|e| diverged(iteration, e))?;
            loss += l;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let mut grads = sum.expect("batch size is positive");
        if schedule.batch_size > 1 {
            let scale = 1.0 / schedule.batch_size as f32;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= scale));
        }
        loss /= schedule.batch_size as f64;
        if !loss.is_finite() {
            return Err(diverged(iteration, "loss is not finite"));
        }
        log.record(iteration, "loss", loss);
        adam.step(model.params_mut(), &grads).map_err(|e| diverged(iteration, e))?;

        let due = iteration % schedule.validate_every == 0 || iteration == config.max_iterations;
        if !due || val_set.is_empty() {
            continue;
        }
        let eval = evaluate(&model, val_set, threshold).map_err(|e| diverged(iteration, e))?;
        let val_dice = eval.median_dice()?;
        log.record(iteration, "val_loss", eval.loss);
        log.record(iteration, "val_dice", val_dice);
        if tracker.is_best_dice(val_dice) {
            log.record(iteration, "best_dice", val_dice);
            if let Some(path) = checkpoint {
                save_checkpoint(&model, path)?;
            }
            best = Some((iteration, val_dice, model.clone()));
        }
        match tracker.tick(schedule, iteration, eval.loss, val_dice) {
            Action::Continue => {}
            Action::Decay => {
                adam.set_learning_rate(schedule.decayed(adam.learning_rate()));
                log.record(iteration, "lr", adam.learning_rate());
            }
            Action::Stop => {
                log.record(iteration, "stop", "patience");
                stopped_early = true;
                break;
            }
        }
    }

    let (best_iteration, best_dice, model) = match best {
        Some((i, d, m)) => (Some(i), Some(d), m),
        None => {
            if let Some(path) = checkpoint {
                save_checkpoint(&model, path)?;
            }
            (None, None, model)
        }
    };
    Ok(TrainOutcome {
        model,
        iterations: iteration,
        best_iteration,
        best_dice,
        stopped_early,
    })
}
