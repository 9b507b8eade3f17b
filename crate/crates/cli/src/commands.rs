use std::fs;
use std::io::Write;
use std::path::Path;

use capsroute::capsule::{perturb_capsule, CapsuleGrid};
use capsroute::data::{encode_pfg, encode_pgm, load_dataset, read_exclusions, read_gray, save_dataset, synth_generate, Sample};
use capsroute::model::{
    count_unet_params, gradcheck_model, parse_model_config, preset, reduction_percent, sabour_layer_params,
    ForwardOptions, GradcheckOptions, KeyValues, Model, ModelConfig, UnetConfig,
};
use capsroute::train::{cross_validate_folds, evaluate, load_checkpoint};
use capsroute::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{EvalArgs, GradcheckArgs, ParamsArgs, PerturbArgs, PredictArgs, SynthArgs, TrainArgs};

/// Largest input extent `gradcheck` accepts.
const GRADCHECK_MAX_SIZE: usize = 16;

pub fn synth(args: &SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let samples = synth_generate(args.n, args.size, args.size, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    save_dataset(&args.out, &samples)?;
    writeln!(out, "wrote {} samples to {}", samples.len(), args.out.display())?;
    Ok(())
}

fn load_samples(dir: &Path, exclude: Option<&Path>) -> CliResult<Vec<Sample>> {
    let excluded = match exclude {
        Some(p) => read_exclusions(p)?,
        None => Vec::new(),
    };
    Ok(load_dataset(dir, &excluded)?)
}

fn check_extents(config: &ModelConfig, samples: &[Sample]) -> CliResult<()> {
    let want = (config.input_height, config.input_width);
    match samples.iter().find(|s| (s.height(), s.width()) != want) {
        Some(s) => Err(Error::Config(format!(
            "sample `{}` is {}x{} but model `{}` expects {}x{}",
            s.id,
            s.height(),
            s.width(),
            config.name,
            want.0,
            want.1
        ))
        .into()),
        None => Ok(()),
    }
}

fn run_config(args: &TrainArgs) -> CliResult<RunConfig> {
    let mut run = match (&args.config, &args.preset) {
        (Some(path), _) => RunConfig::parse(&fs::read_to_string(path)?)?,
        (None, Some(name)) => RunConfig::from_preset(name)?,
        (None, None) => return Err(CliError::Usage("train needs --config or --preset".into())),
    };
    if let Some(d) = &args.data {
        run.data = Some(d.clone());
    }
    if let Some(e) = &args.exclude {
        run.exclude = Some(e.clone());
    }
    if let Some(k) = args.folds {
        run.folds = k;
    }
    if let Some(s) = args.seed {
        run.train.seed = s;
    }
    if let Some(o) = &args.out {
        run.out = o.clone();
    }
    if let Some(n) = args.iterations {
        run.train.max_iterations = n;
    }
    if let Some(lr) = args.learning_rate {
        run.train.adam.learning_rate = lr;
    }
    if args.no_augment {
        run.train.augment = capsroute::data::AugmentConfig::disabled();
    }
    run.validate()?;
    if run.data.is_none() {
        return Err(CliError::Usage("train needs --data or `data.path`".into()));
    }
    Ok(run)
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let run = run_config(args)?;
    let data = run.data.as_deref().expect("checked by run_config");
    let samples = load_samples(data, run.exclude.as_deref())?;
    if samples.is_empty() {
        return Err(Error::Dataset("no samples".into()).into());
    }
    if run.folds > samples.len() {
        return Err(Error::Config(format!("{} folds need at least {} samples, found {}", run.folds, run.folds, samples.len())).into());
    }
    check_extents(&run.model, &samples)?;
    let selected: Vec<usize> = match args.fold {
        Some(f) if f >= run.folds => {
            return Err(CliError::Usage(format!("--fold {f} outside 0..{}", run.folds)));
        }
        Some(f) => vec![f],
        None => (0..run.folds).collect(),
    };
    fs::create_dir_all(&run.out)?;
    fs::write(run.out.join("run.cfg"), run.to_text())?;
    writeln!(
        out,
        "training {} on {} samples, {} fold(s), up to {} iterations each",
        run.model.name,
        samples.len(),
        run.folds,
        run.train.max_iterations
    )?;
    let mut report_error = None;
    let cv = cross_validate_folds(&run.model, &samples, run.folds, &selected, &run.train, Some(&run.out), |f| {
        let best = f.best_iteration.map_or_else(|| "none".to_string(), |i| i.to_string());
        let line = format!(
            "fold {}: dice {:.4} (best iteration {best}, {} iterations{})",
            f.fold,
            f.dice,
            f.iterations,
            if f.stopped_early { ", stopped early" } else { "" }
        );
        if let Err(e) = writeln!(out, "{line}") {
            report_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = report_error {
        return Err(e.into());
    }
    writeln!(out, "median dice: {:.4}", cv.median_dice)?;
    Ok(())
}

fn threshold_or_default(threshold: Option<f64>, model: &Model<f32>) -> CliResult<f64> {
    let t = threshold.unwrap_or(model.config().threshold);
    if !(t.is_finite() && t >= 0.0) {
        return Err(CliError::Usage(format!("threshold {t} must be finite and >= 0")));
    }
    Ok(t)
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let threshold = threshold_or_default(args.threshold, &model)?;
    let samples = load_samples(&args.data, args.exclude.as_deref())?;
    check_extents(model.config(), &samples)?;
    let result = evaluate(&model, &samples, threshold)?;
    writeln!(out, "id\tdice")?;
    for (id, d) in &result.dice {
        writeln!(out, "{id}\t{d:.6}")?;
    }
    writeln!(out, "mean loss\t{:.6}", result.loss)?;
    writeln!(out, "median dice\t{:.6}", result.median_dice()?)?;
    Ok(())
}

fn load_image_for(model: &Model<f32>, path: &Path) -> CliResult<Tensor<f32>> {
    let image = read_gray(path)?;
    let c = model.config();
    if image.shape() != [c.input_height, c.input_width] {
        return Err(Error::Config(format!(
            "image `{}` is {}x{} but model `{}` expects {}x{}",
            path.display(),
            image.shape()[0],
            image.shape()[1],
            c.name,
            c.input_height,
            c.input_width
        ))
        .into());
    }
    Ok(image)
}

pub fn predict(args: &PredictArgs, out: &mut dyn Write) -> CliResult<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let threshold = threshold_or_default(args.threshold, &model)?;
    let image = load_image_for(&model, &args.image)?;
    let p = model.predict(&image, threshold)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("mask.pgm"), encode_pgm(&p.mask))?;
    fs::write(args.out.join("lengths.pfg"), encode_pfg(&p.lengths))?;
    fs::write(args.out.join("reconstruction.pgm"), encode_pgm(&p.reconstruction))?;
    let positive = p.mask.data().iter().filter(|&&m| m > 0.0).count();
    writeln!(out, "{positive} of {} pixels positive; wrote {}", p.mask.len(), args.out.display())?;
    Ok(())
}

/// Noisy disk on a darker background, deterministic in `seed`.
fn gradcheck_sample(size: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let (cy, cx) = (rng.gen_range(0.35..0.65) * s, rng.gen_range(0.35..0.65) * s);
    let r = rng.gen_range(0.2..0.3) * s;
    let target = Tensor::from_fn(&[size, size], |i| {
        let (y, x) = ((i / size) as f64 + 0.5 - cy, (i % size) as f64 + 0.5 - cx);
        if y * y + x * x < r * r {
            1.0
        } else {
            0.0
        }
    });
    let image = Tensor::from_fn(&[size, size], |i| 0.2 + 0.6 * target.data()[i] + 0.1 * rng.gen::<f64>());
    (image, target)
}

pub fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.size == 0 || args.size > GRADCHECK_MAX_SIZE {
        return Err(CliError::Usage(format!("--size must be in 1..={GRADCHECK_MAX_SIZE}")));
    }
    if !(args.tolerance.is_finite() && args.tolerance > 0.0) {
        return Err(CliError::Usage("--tolerance must be positive".into()));
    }
    let mut config = preset(&args.preset)?;
    config.input_height = args.size;
    config.input_width = args.size;
    config.validate()?;
    if let Some(layer) = &args.inject_fault {
        if !config.layers.iter().any(|l| &l.name == layer && l.is_capsule()) {
            return Err(CliError::Usage(format!("no capsule layer named `{layer}`")));
        }
    }
    if args.iterations == Some(0) {
        return Err(CliError::Usage("--iterations must be at least 1".into()));
    }
    let model = Model::<f64>::build(config, args.seed)?;
    let (image, target) = gradcheck_sample(args.size, args.seed);
    let options = GradcheckOptions {
        entries_per_block: (args.entries > 0).then_some(args.entries),
        seed: args.seed,
        forward: ForwardOptions {
            iterations: args.iterations,
            grad_fault: args.inject_fault.clone().map(|l| (l, 1.5)),
            ..ForwardOptions::default()
        },
        ..GradcheckOptions::default()
    };
    let reports = gradcheck_model(&model, &image, &target, &options)?;
    let mut layers: Vec<(String, usize, f64)> = Vec::new();
    for r in &reports {
        match layers.last_mut() {
            Some(last) if last.0 == r.layer => {
                last.1 += r.checked;
                last.2 = last.2.max(r.max_rel_error);
            }
            _ => layers.push((r.layer.clone(), r.checked, r.max_rel_error)),
        }
    }
    writeln!(out, "layer\tchecked\tmax_rel_error\tstatus")?;
    let mut failed = Vec::new();
    for (layer, checked, err) in &layers {
        // a NaN error must fail too
        let pass = *err <= args.tolerance;
        if !pass {
            failed.push(layer.clone());
        }
        writeln!(out, "{layer}\t{checked}\t{err:.3e}\t{}", if pass { "ok" } else { "FAIL" })?;
    }
    if failed.is_empty() {
        writeln!(out, "gradcheck passed at tolerance {:e}", args.tolerance)?;
        Ok(())
    } else {
        writeln!(out, "gradcheck failed: {}", failed.join(", "))?;
        Err(CliError::Failed(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn model_config(preset_name: Option<&str>, config: Option<&Path>) -> CliResult<ModelConfig> {
    match (preset_name, config) {
        (_, Some(path)) => {
            let mut kv = KeyValues::parse(&fs::read_to_string(path)?)?;
            Ok(parse_model_config(&mut kv)?)
        }
        (Some(name), None) => Ok(preset(name)?),
        (None, None) => Ok(preset("segcaps")?),
    }
}

fn total_of(config: &ModelConfig) -> CliResult<u64> {
    let model = Model::<f32>::build(config.clone(), 0)?;
    Ok(model.param_count() as u64)
}

pub fn params(args: &ParamsArgs, out: &mut dyn Write) -> CliResult<()> {
    if let Some(example) = &args.example {
        return match example.as_str() {
            "sabour-layer" => {
                writeln!(out, "sabour-layer\t{}", sabour_layer_params())?;
                Ok(())
            }
            other => Err(CliError::Usage(format!("unknown example `{other}` (try sabour-layer)"))),
        };
    }
    let config = model_config(args.preset.as_deref(), args.config.as_deref())?;
    let reference = match args.reference.as_deref() {
        None => None,
        Some("unet") => Some(("unet".to_string(), count_unet_params(&UnetConfig::default()).iter().map(|r| r.count).sum())),
        Some(name) => Some((name.to_string(), total_of(&preset(name)?)?)),
    };
    let model = Model::<f32>::build(config, 0)?;
    writeln!(out, "layer\tparameters")?;
    for (name, n) in model.layer_param_counts() {
        writeln!(out, "{name}\t{n}")?;
    }
    let total = model.param_count() as u64;
    writeln!(out, "total\t{total}")?;
    if let Some((name, count)) = reference {
        writeln!(out, "reference {name}\t{count}")?;
        writeln!(out, "reduction\t{:.2}%", reduction_percent(total, count)?)?;
    }
    Ok(())
}

fn parse_dims(spec: &str, pose_dim: usize) -> CliResult<Vec<usize>> {
    let bad = || CliError::Usage(format!("invalid --dims `{spec}` (use `a..b` or `i,j,k`)"));
    let dims: Vec<usize> = match spec.split_once("..") {
        Some((a, b)) => {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            (a..b).collect()
        }
        None => spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?,
    };
    if dims.is_empty() {
        return Err(bad());
    }
    match dims.iter().find(|&&d| d >= pose_dim) {
        Some(d) => Err(CliError::Usage(format!("dimension {d} outside [0, {pose_dim})"))),
        None => Ok(dims),
    }
}

/// `steps` evenly spaced values over `[-range, range]`; a single step is 0.
fn deltas(range: f64, steps: usize) -> Vec<f64> {
    if steps == 1 {
        return vec![0.0];
    }
    (0..steps)
        .map(|i| -range + 2.0 * range * i as f64 / (steps - 1) as f64)
        .collect()
}

pub fn perturb(args: &PerturbArgs, out: &mut dyn Write) -> CliResult<()> {
    if !(args.range.is_finite() && args.range >= 0.0) {
        return Err(CliError::Usage("--range must be finite and >= 0".into()));
    }
    if args.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let model = load_checkpoint(&args.checkpoint)?;
    let pose_dim = model.config().layers.last().expect("validated config has layers").out_dim;
    let dims = match &args.dims {
        Some(s) => parse_dims(s, pose_dim)?,
        None => (0..pose_dim).collect(),
    };
    let threshold = threshold_or_default(args.threshold, &model)?;
    let image = load_image_for(&model, &args.image)?;
    let mask = model.predict(&image, threshold)?.mask;
    let grid = CapsuleGrid::new(model.segmentation_poses(&image)?)?;
    let decoder = model.decoder();
    let deltas = deltas(args.range, args.steps);
    let (h, w) = (grid.height(), grid.width());
    let cols = deltas.len();
    let mut composite = Tensor::<f32>::zeros(&[dims.len() * h, cols * w]);
    let stride = cols * w;
    for (row, &dim) in dims.iter().enumerate() {
        let tiles = perturb_capsule(&grid, &mask, &decoder, dim, &deltas)?;
        for (col, tile) in tiles.iter().enumerate() {
            for y in 0..h {
                let dst = (row * h + y) * stride + col * w;
                composite.data_mut()[dst..dst + w].copy_from_slice(&tile.data()[y * w..(y + 1) * w]);
            }
        }
    }
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, encode_pgm(&composite))?;
    writeln!(
        out,
        "wrote {}x{} grid ({} dims x {} deltas) to {}",
        dims.len(),
        cols,
        dims.len(),
        cols,
        args.out.display()
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse_ranges_and_lists() {
        assert_eq!(parse_dims("0..4", 16).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_dims("3, 5,15", 16).unwrap(), vec![3, 5, 15]);
        assert!(parse_dims("0..17", 16).is_err());
        assert!(parse_dims("16", 16).is_err());
        assert!(parse_dims("4..4", 16).is_err());
        assert!(parse_dims("x", 16).is_err());
    }

    #[test]
    fn deltas_are_symmetric() {
        assert_eq!(deltas(0.25, 1), vec![0.0]);
        assert_eq!(deltas(0.25, 5), vec![-0.25, -0.125, 0.0, 0.125, 0.25]);
        assert_eq!(deltas(0.0, 3), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradcheck_sample_is_binary_and_seeded() {
        let (image, target) = gradcheck_sample(16, 3);
        assert!(target.data().iter().all(|&t| t == 0.0 || t == 1.0));
        assert!(target.data().contains(&1.0) && target.data().contains(&0.0));
        assert_eq!(gradcheck_sample(16, 3).0, image);
        assert_ne!(gradcheck_sample(16, 4).0, image);
    }
}
