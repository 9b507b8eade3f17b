//! Run configuration: the model plus `train.*`, `augment.*`, `data.*` and
//! `run.*` sections of the `section.key = value` format.

use std::fmt::Write as _;
use std::path::PathBuf;

use capsroute::data::AugmentConfig;
use capsroute::model::{parse_model_config, preset, write_model_config, KeyValues, ModelConfig};
use capsroute::train::{DecayMode, TrainConfig};
use capsroute::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    /// File of sample ids to leave out.
    pub exclude: Option<PathBuf>,
    pub folds: usize,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn from_model(model: ModelConfig) -> Self {
        RunConfig {
            model,
            train: TrainConfig::default(),
            data: None,
            exclude: None,
            folds: 1,
            out: PathBuf::from("runs"),
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        Ok(Self::from_model(preset(name)?))
    }

    /// Parse a full config file; any key left unread is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut run = Self::from_model(parse_model_config(&mut kv)?);
        parse_train(&mut kv, &mut run.train)?;
        parse_augment(&mut kv, &mut run.train.augment)?;
        run.data = kv.get("data.path").map(PathBuf::from);
        run.exclude = kv.get("data.exclude").map(PathBuf::from);
        run.folds = kv.parse_or("data.folds", run.folds)?;
        run.train.seed = kv.parse_or("run.seed", run.train.seed)?;
        if let Some(out) = kv.get("run.out") {
            run.out = PathBuf::from(out);
        }
        kv.finish()?;
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.folds == 0 {
            return Err(Error::Config("`data.folds` must be at least 1".into()));
        }
        Ok(())
    }

    /// Self-contained text that [`RunConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let mut s = write_model_config(&self.model);
        let t = &self.train;
        let a = &t.adam;
        let sc = &t.schedule;
        let _ = writeln!(s);
        for (k, v) in [
            ("learning_rate", format!("{:?}", a.learning_rate)),
            ("beta1", format!("{:?}", a.beta1)),
            ("beta2", format!("{:?}", a.beta2)),
            ("epsilon", format!("{:?}", a.epsilon)),
            ("iterations", t.max_iterations.to_string()),
            ("plateau", sc.plateau.to_string()),
            ("patience", sc.patience.to_string()),
            ("decay_factor", format!("{:?}", sc.decay_factor)),
            ("decay_mode", sc.decay_mode.as_str().to_string()),
            ("batch_size", sc.batch_size.to_string()),
            ("validate_every", sc.validate_every.to_string()),
        ] {
            let _ = writeln!(s, "train.{k} = {v}");
        }
        let g = &t.augment;
        let _ = writeln!(s);
        for (k, v) in [
            ("probability", format!("{:?}", g.probability)),
            ("scale", g.scale.to_string()),
            ("flip", g.flip.to_string()),
            ("shift", g.shift.to_string()),
            ("rotate", g.rotate.to_string()),
            ("elastic", g.elastic.to_string()),
            ("noise", g.noise.to_string()),
            ("scale_range", format!("{:?}", g.scale_range)),
            ("shift_fraction", format!("{:?}", g.shift_fraction)),
            ("max_rotation_degrees", format!("{:?}", g.max_rotation_degrees)),
            ("elastic_alpha", format!("{:?}", g.elastic_alpha)),
            ("elastic_sigma", format!("{:?}", g.elastic_sigma)),
            ("noise_std", format!("{:?}", g.noise_std)),
        ] {
            let _ = writeln!(s, "augment.{k} = {v}");
        }
        let _ = writeln!(s);
        if let Some(d) = &self.data {
            let _ = writeln!(s, "data.path = {}", d.display());
        }
        if let Some(e) = &self.exclude {
            let _ = writeln!(s, "data.exclude = {}", e.display());
        }
        let _ = writeln!(s, "data.folds = {}", self.folds);
        let _ = writeln!(s, "run.seed = {}", t.seed);
        let _ = writeln!(s, "run.out = {}", self.out.display());
        s
    }
}

fn parse_train(kv: &mut KeyValues, t: &mut TrainConfig) -> Result<()> {
    t.adam.learning_rate = kv.parse_or("train.learning_rate", t.adam.learning_rate)?;
    t.adam.beta1 = kv.parse_or("train.beta1", t.adam.beta1)?;
    t.adam.beta2 = kv.parse_or("train.beta2", t.adam.beta2)?;
    t.adam.epsilon = kv.parse_or("train.epsilon", t.adam.epsilon)?;
    t.max_iterations = kv.parse_or("train.iterations", t.max_iterations)?;
    let sc = &mut t.schedule;
    sc.plateau = kv.parse_or("train.plateau", sc.plateau)?;
    sc.patience = kv.parse_or("train.patience", sc.patience)?;
    sc.decay_factor = kv.parse_or("train.decay_factor", sc.decay_factor)?;
    if let Some(mode) = kv.get("train.decay_mode") {
        sc.decay_mode = DecayMode::parse(&mode)?;
    }
    sc.batch_size = kv.parse_or("train.batch_size", sc.batch_size)?;
    sc.validate_every = kv.parse_or("train.validate_every", sc.validate_every)?;
    Ok(())
}

fn parse_augment(kv: &mut KeyValues, a: &mut AugmentConfig) -> Result<()> {
    if !kv.parse_or("augment.enabled", true)? {
        *a = AugmentConfig::disabled();
    }
    a.probability = kv.parse_or("augment.probability", a.probability)?;
    a.scale = kv.parse_or("augment.scale", a.scale)?;
    a.flip = kv.parse_or("augment.flip", a.flip)?;
    a.shift = kv.parse_or("augment.shift", a.shift)?;
    a.rotate = kv.parse_or("augment.rotate", a.rotate)?;
    a.elastic = kv.parse_or("augment.elastic", a.elastic)?;
    a.noise = kv.parse_or("augment.noise", a.noise)?;
    a.scale_range = kv.parse_or("augment.scale_range", a.scale_range)?;
    a.shift_fraction = kv.parse_or("augment.shift_fraction", a.shift_fraction)?;
    a.max_rotation_degrees = kv.parse_or("augment.max_rotation_degrees", a.max_rotation_degrees)?;
    a.elastic_alpha = kv.parse_or("augment.elastic_alpha", a.elastic_alpha)?;
    a.elastic_sigma = kv.parse_or("augment.elastic_sigma", a.elastic_sigma)?;
    a.noise_std = kv.parse_or("augment.noise_std", a.noise_std)?;
    Ok(())
}
