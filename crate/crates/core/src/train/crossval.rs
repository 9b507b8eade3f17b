use std::fs;
use std::path::Path;

use super::metrics::MetricsLog;
use super::trainer::{train, TrainConfig};
use crate::data::{kfold_split, Sample};
use crate::error::{Error, Result};
use crate::loss::median;
use crate::model::{Model, ModelConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    /// Median per-sample dice on the held-out fold.
    pub dice: f64,
    pub best_iteration: Option<usize>,
    pub iterations: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub median_dice: f64,
}

/// k-fold cross-validation of a freshly initialized model per fold.
///
/// Each fold trains on the other folds and validates (and early-stops) on
/// its own held-out samples. With `k = 1` the model trains and validates on
/// the whole set. With `out_dir`, fold `i` writes `fold{i}.sgcp` (plus its
/// `.cfg`) and `fold{i}.log`; a diverging fold still writes its log.
/// `on_fold` sees each result as it completes.
pub fn cross_validate(
    config: &ModelConfig,
    samples: &[Sample],
    k: usize,
    train_config: &TrainConfig,
    out_dir: Option<&Path>,
    on_fold: impl FnMut(&FoldResult),
) -> Result<CrossValidation> {
    let all: Vec<usize> = (0..k).collect();
    cross_validate_folds(config, samples, k, &all, train_config, out_dir, on_fold)
}

/// [`cross_validate`] restricted to the listed folds of the same `k`-way
/// split; each fold trains exactly as it would in the full run.
pub fn cross_validate_folds(
    config: &ModelConfig,
    samples: &[Sample],
    k: usize,
    selected: &[usize],
    train_config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_fold: impl FnMut(&FoldResult),
) -> Result<CrossValidation> {
    if selected.is_empty() {
        return Err(Error::Config("no folds selected".into()));
    }
    if let Some(f) = selected.iter().find(|&&f| f >= k) {
        return Err(Error::Config(format!("fold {f} outside 0..{k}")));
    }
    config.validate()?;
    train_config.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("no samples".into()));
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = kfold_split(&ids, k, train_config.seed)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let pick = |ids: &[String]| -> Vec<Sample> {
        ids.iter()
            .map(|id| samples.iter().find(|s| &s.id == id).expect("split ids come from samples").clone())
            .collect()
    };
    let mut folds = Vec::with_capacity(selected.len());
    for &fold in selected {
        let train_set = pick(&split.train_ids(fold));
        let test_set = pick(split.test_ids(fold));
        let model = Model::build(config.clone(), train_config.seed)?;
        let fold_config = TrainConfig {
            seed: train_config.seed.wrapping_add(fold as u64),
            ..train_config.clone()
        };
        let mut log = MetricsLog::new();
        log.record(0, "fold", fold);
        log.record(0, "model", &config.name);
        for layer in config.layers.iter().filter(|l| l.is_capsule()) {
            log.record(0, &format!("routing.{}", layer.name), layer.routing.enabled);
        }
        let checkpoint = out_dir.map(|d| d.join(format!("fold{fold}.sgcp")));
        let outcome = train(model, &train_set, &test_set, &fold_config, &mut log, checkpoint.as_deref());
        if let Some(dir) = out_dir {
            log.write(&dir.join(format!("fold{fold}.log")))?;
        }
        let outcome = outcome?;
        let dice = match outcome.best_dice {
            Some(d) => d,
            None => super::evaluate(&outcome.model, &test_set, config.threshold)?.median_dice()?,
        };
        let result = FoldResult {
            fold,
            dice,
            best_iteration: outcome.best_iteration,
            iterations: outcome.iterations,
            stopped_early: outcome.stopped_early,
        };
        on_fold(&result);
        folds.push(result);
    }
    let median_dice = median(&folds.iter().map(|f| f.dice).collect::<Vec<_>>())?;
    Ok(CrossValidation { folds, median_dice })
}
