//! Line-oriented `section.key = value` configuration text.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use super::presets::preset;
use super::spec::{LayerKind, LayerSpec, LossConfig, ModelConfig};
use crate::capsule::RoutingConfig;
use crate::error::{Error, Result};
use crate::loss::{MarginParams, SegmentationLoss};

#[derive(Clone, Debug)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

/// Parsed `section.key = value` lines. Every key must be consumed before
/// [`KeyValues::finish`]; leftovers are reported as unknown.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: Vec<Entry>,
    used: BTreeSet<String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `section.key = value`")))?;
            let key = key.trim();
            let value = value.trim();
            let valid = key
                .split_once('.')
                .is_some_and(|(s, k)| !s.is_empty() && !k.is_empty() && !k.contains('.'));
            if !valid || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {line}: malformed key `{key}`")));
            }
            if entries.iter().any(|e| e.key == key) {
                return Err(Error::Config(format!("line {line}: duplicate key `{key}`")));
            }
            entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(KeyValues {
            entries,
            used: BTreeSet::new(),
        })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.iter().any(|e| e.key == key)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.entries
            .iter()
            .any(|e| e.key.split_once('.').is_some_and(|(s, _)| s == section))
    }

    /// Raw value of `key`, marking it consumed.
    pub fn get(&mut self, key: &str) -> Option<String> {
        let e = self.entries.iter().find(|e| e.key == key)?;
        self.used.insert(key.to_string());
        Some(e.value.clone())
    }

    /// Parsed value of `key`, if present.
    pub fn parse_opt<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        let line = self.entries.iter().find(|e| e.key == key).map(|e| e.line);
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("line {}: invalid value `{v}` for `{key}`", line.unwrap_or(0)))
            }),
        }
    }

    pub fn parse_or<V: FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    pub fn require<V: FromStr>(&mut self, key: &str) -> Result<V> {
        self.parse_opt(key)?
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    /// Fail on any key nobody consumed.
    pub fn finish(&self) -> Result<()> {
        match self.entries.iter().find(|e| !self.used.contains(&e.key)) {
            Some(e) => Err(Error::Config(format!("line {}: unknown key `{}`", e.line, e.key))),
            None => Ok(()),
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid list `{v}` for `{key}`")))
        })
        .collect()
}

/// `auto` or a number.
fn parse_auto(kv: &mut KeyValues, key: &str) -> Result<Option<Option<f64>>> {
    match kv.get(key) {
        None => Ok(None),
        Some(v) if v == "auto" => Ok(Some(None)),
        Some(v) => v
            .parse()
            .map(|x| Some(Some(x)))
            .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))),
    }
}

/// Read the `model.*`, `loss.*` and `layerN.*` sections of `kv`. With
/// `model.preset` the named architecture is the starting point and only
/// `model.threshold`, `model.decoder` and `loss.*` may override it.
pub fn parse_model_config(kv: &mut KeyValues) -> Result<ModelConfig> {
    let preset_name: Option<String> = kv.get("model.preset");
    let has_layers = kv.has_section("layer0");
    let mut config = match (&preset_name, has_layers) {
        (Some(_), true) => return Err(Error::Config("`model.preset` cannot be combined with layer sections".into())),
        (None, false) => return Err(Error::Config("config needs `model.preset` or layer sections".into())),
        (Some(p), false) => {
            for key in ["model.name", "model.height", "model.width"] {
                if kv.contains(key) {
                    return Err(Error::Config(format!("`{key}` cannot override a preset")));
                }
            }
            preset(p)?
        }
        (None, true) => {
            let mut layers = Vec::new();
            let mut i = 0;
            while kv.has_section(&format!("layer{i}")) {
                layers.push(parse_layer(kv, i)?);
                i += 1;
            }
            ModelConfig {
                name: kv.parse_or("model.name", "custom".to_string())?,
                input_height: kv.require("model.height")?,
                input_width: kv.require("model.width")?,
                layers,
                ..ModelConfig::new("custom", 1, Vec::new(), LossConfig::bce())
            }
        }
    };
    if let Some(t) = kv.parse_opt("model.threshold")? {
        config.threshold = t;
    }
    if let Some(v) = kv.get("model.decoder") {
        config.decoder_widths = parse_list("model.decoder", &v)?;
    }
    parse_loss(kv, &mut config.loss)?;
    config.validate()?;
    Ok(config)
}

fn parse_layer(kv: &mut KeyValues, i: usize) -> Result<LayerSpec> {
    let key = |k: &str| format!("layer{i}.{k}");
    let kind = LayerKind::parse(&kv.require::<String>(&key("kind"))?)?;
    let name: String = kv.require(&key("name"))?;
    let kernel = kv.require(&key("kernel"))?;
    let dim = kv.require(&key("dim"))?;
    let stride = kv.parse_or(&key("stride"), 1)?;
    let types = kv.parse_or(&key("types"), 1)?;
    let routing = RoutingConfig {
        iterations: kv.parse_or(&key("iterations"), if kind == LayerKind::Conv2d { 1 } else { 3 })?,
        enabled: kv.parse_or(&key("routing"), kind != LayerKind::Conv2d)?,
        stop_gradient: kv.parse_or(&key("stop_gradient"), false)?,
    };
    let skip = kv.get(&key("skip"));
    Ok(LayerSpec {
        name,
        kind,
        kernel,
        stride,
        out_types: types,
        out_dim: dim,
        routing,
        skip,
    })
}

fn parse_loss(kv: &mut KeyValues, loss: &mut LossConfig) -> Result<()> {
    if let Some(kind) = kv.get("loss.kind") {
        loss.kind = match kind.as_str() {
            "bce" => SegmentationLoss::Bce,
            "margin" => SegmentationLoss::Margin(MarginParams::default()),
            other => return Err(Error::Config(format!("unknown loss `{other}`"))),
        };
    }
    let margin_keys = ["loss.margin_upper", "loss.margin_lower", "loss.negative_scale"];
    match &mut loss.kind {
        SegmentationLoss::Margin(m) => {
            m.upper = kv.parse_or(margin_keys[0], m.upper)?;
            m.lower = kv.parse_or(margin_keys[1], m.lower)?;
            m.negative_scale = kv.parse_or(margin_keys[2], m.negative_scale)?;
        }
        SegmentationLoss::Bce => {
            if let Some(k) = margin_keys.iter().find(|k| kv.contains(k)) {
                return Err(Error::Config(format!("`{k}` only applies to the margin loss")));
            }
        }
    }
    let pos = parse_auto(kv, "loss.positive_weight")?;
    let neg = parse_auto(kv, "loss.negative_weight")?;
    match (pos, neg) {
        (None, None) => {}
        (Some(Some(p)), Some(Some(n))) => loss.class_weights = Some((p, n)),
        (Some(None), Some(None)) | (Some(None), None) | (None, Some(None)) => loss.class_weights = None,
        _ => {
            return Err(Error::Config(
                "set both class weights to numbers, or both to `auto`".into(),
            ))
        }
    }
    if let Some(r) = parse_auto(kv, "loss.reconstruction")? {
        loss.reconstruction = r;
    }
    Ok(())
}

fn auto(v: Option<f64>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| format!("{x:?}"))
}

/// Self-contained text form of `config` (layers spelled out, no preset).
pub fn write_model_config(config: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model.name = {}", config.name);
    let _ = writeln!(s, "model.height = {}", config.input_height);
    let _ = writeln!(s, "model.width = {}", config.input_width);
    let _ = writeln!(s, "model.threshold = {:?}", config.threshold);
    let widths: Vec<String> = config.decoder_widths.iter().map(|w| w.to_string()).collect();
    let _ = writeln!(s, "model.decoder = {}", widths.join(","));
    match config.loss.kind {
        SegmentationLoss::Bce => {
            let _ = writeln!(s, "loss.kind = bce");
        }
        SegmentationLoss::Margin(m) => {
            let _ = writeln!(s, "loss.kind = margin");
            let _ = writeln!(s, "loss.margin_upper = {:?}", m.upper);
            let _ = writeln!(s, "loss.margin_lower = {:?}", m.lower);
            let _ = writeln!(s, "loss.negative_scale = {:?}", m.negative_scale);
        }
    }
    let (p, n) = match config.loss.class_weights {
        Some((p, n)) => (Some(p), Some(n)),
        None => (None, None),
    };
    let _ = writeln!(s, "loss.positive_weight = {}", auto(p));
    let _ = writeln!(s, "loss.negative_weight = {}", auto(n));
    let _ = writeln!(s, "loss.reconstruction = {}", auto(config.loss.reconstruction));
    for (i, l) in config.layers.iter().enumerate() {
        let _ = writeln!(s);
        let _ = writeln!(s, "layer{i}.name = {}", l.name);
        let _ = writeln!(s, "layer{i}.kind = {}", l.kind.as_str());
        let _ = writeln!(s, "layer{i}.kernel = {}", l.kernel);
        let _ = writeln!(s, "layer{i}.stride = {}", l.stride);
        let _ = writeln!(s, "layer{i}.types = {}", l.out_types);
        let _ = writeln!(s, "layer{i}.dim = {}", l.out_dim);
        if l.is_capsule() {
            let _ = writeln!(s, "layer{i}.iterations = {}", l.routing.iterations);
            let _ = writeln!(s, "layer{i}.routing = {}", l.routing.enabled);
            let _ = writeln!(s, "layer{i}.stop_gradient = {}", l.routing.stop_gradient);
        } else {
            let _ = writeln!(s, "layer{i}.routing = false");
        }
        if let Some(src) = &l.skip {
            let _ = writeln!(s, "layer{i}.skip = {src}");
        }
    }
    s
}
