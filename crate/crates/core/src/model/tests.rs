use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::capsule::KernelMode;

fn sample(size: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = size as f64 / 2.0;
    let r = size as f64 / 4.0;
    let target = Tensor::from_fn(&[size, size], |i| {
        let (x, y) = ((i / size) as f64 - c, (i % size) as f64 - c);
        if x * x + y * y < r * r {
            1.0
        } else {
            0.0
        }
    });
    let image = Tensor::from_fn(&[size, size], |i| 0.2 + 0.6 * target.data()[i] + 0.1 * rng.gen::<f64>());
    (image, target)
}

#[test]
fn every_preset_validates() {
    for name in PRESETS {
        let c = preset(name).unwrap();
        c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(c.name, *name);
    }
    assert!(preset("nope").is_err());
}

#[test]
fn small_preset_runs_forward() {
    let model = Model::<f32>::build(preset("segcaps-small").unwrap(), 1).unwrap();
    let image = Tensor::full(&[64, 64], 0.5f32);
    let p = model.predict(&image, 0.5).unwrap();
    assert_eq!(p.lengths.shape(), &[64, 64]);
    assert_eq!(p.mask.shape(), &[64, 64]);
    assert_eq!(p.reconstruction.shape(), &[64, 64]);
    assert!(p.lengths.data().iter().all(|&l| (0.0..1.0).contains(&l)));
    assert!(model.predict(&Tensor::zeros(&[32, 32]), 0.5).is_err());
}

#[test]
fn baseline_has_three_layers() {
    for name in ["baseline-caps", "baseline-caps-small"] {
        let c = preset(name).unwrap();
        assert_eq!(c.layers.len(), 3);
        assert_eq!(c.layers[0].kind, LayerKind::Conv2d);
        assert_eq!(c.layers[1].kind, LayerKind::ConvCapsule);
        assert_eq!(c.layers[2].kind, LayerKind::Readout);
    }
}

#[test]
fn r1_differs_only_in_routing_flags() {
    for (full, r1) in [
        ("segcaps", "segcaps-r1"),
        ("segcaps-small", "segcaps-r1-small"),
        ("segcaps-tiny", "segcaps-r1-tiny"),
    ] {
        let a = preset(full).unwrap();
        let mut b = preset(r1).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            if la.is_capsule() {
                assert_eq!(lb.routing.enabled, la.stride != 1, "{}", lb.name);
            }
        }
        b.name = a.name.clone();
        for (la, lb) in a.layers.iter().zip(b.layers.iter_mut()) {
            lb.routing.enabled = la.routing.enabled;
        }
        assert_eq!(a, b);
        let ma = Model::<f32>::build(a, 0).unwrap();
        let mb = Model::<f32>::build(preset(r1).unwrap(), 0).unwrap();
        assert_eq!(ma.param_count(), mb.param_count());
    }
}

/// Per-layer closed-form counts.
fn counted(config: &ModelConfig) -> Vec<(String, usize)> {
    let layers = config.resolve().unwrap();
    let mut out: Vec<(String, usize)> = config
        .layers
        .iter()
        .zip(&layers)
        .map(|(spec, r)| {
            let n = match spec.kind {
                LayerKind::Conv2d => spec.kernel * spec.kernel * spec.out_dim + spec.out_dim,
                _ => count_capsule_params(r.input, spec.out_types, spec.out_dim, (spec.kernel, spec.kernel), false)
                    as usize,
            };
            (spec.name.clone(), n)
        })
        .collect();
    let last = layers.last().unwrap().output;
    let mut fan = last.types * last.dim;
    let mut dec = 0;
    for &w in &config.decoder_widths {
        dec += fan * w + w;
        fan = w;
    }
    out.push(("decoder".into(), dec));
    out
}

#[test]
fn counters_match_allocated_parameters() {
    for name in PRESETS {
        let config = preset(name).unwrap();
        let want = counted(&config);
        let model = Model::<f32>::build(config, 3).unwrap();
        assert_eq!(model.layer_param_counts(), want, "{name}");
        let total: usize = want.iter().map(|(_, n)| n).sum();
        assert_eq!(model.param_count(), total);
    }
}

#[test]
fn full_preset_budget_and_reduction() {
    let model = Model::<f32>::build(preset("segcaps").unwrap(), 0).unwrap();
    let n = model.param_count() as u64;
    assert!(n <= 1_600_000, "{n}");
    let unet: u64 = count_unet_params(&UnetConfig::default()).iter().map(|r| r.count).sum();
    assert!(reduction_percent(n, unet).unwrap() >= 94.0);
}

#[test]
fn skip_source_extent_mismatch_names_layer() {
    let mut c = preset("segcaps-small").unwrap();
    let i = c.layers.iter().position(|l| l.name == "dec2").unwrap();
    c.layers[i].skip = Some("enc1a".into());
    let err = c.validate().unwrap_err().to_string();
    assert!(err.contains("dec2") && err.contains("enc1a"), "{err}");
    c.layers[i].skip = Some("later".into());
    assert!(c.validate().is_err());
}

#[test]
fn structural_errors() {
    let mut c = preset("segcaps-tiny").unwrap();
    c.layers.pop();
    assert!(c.validate().is_err());
    let mut c = preset("segcaps-tiny").unwrap();
    c.layers.last_mut().unwrap().out_types = 2;
    assert!(c.validate().is_err());
    let mut c = preset("segcaps-tiny").unwrap();
    c.input_height = 15;
    assert!(c.validate().is_err());
    let mut c = preset("segcaps-tiny").unwrap();
    c.layers[1].name = "conv1".into();
    assert!(c.validate().is_err());
    let mut c = preset("segcaps-tiny").unwrap();
    c.decoder_widths = vec![4, 2];
    assert!(c.validate().is_err());
    let mut c = preset("segcaps-tiny").unwrap();
    let deconv = c.layers.iter_mut().find(|l| l.geometry().mode == KernelMode::Deconv).unwrap();
    deconv.stride = 3;
    assert!(c.validate().is_err());
}

#[test]
fn config_text_round_trip() {
    for name in PRESETS {
        let c = preset(name).unwrap();
        let text = write_model_config(&c);
        let mut kv = KeyValues::parse(&text).unwrap();
        let back = parse_model_config(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, c, "{name}");
    }
}

#[test]
fn config_text_errors() {
    let mut kv = KeyValues::parse("model.preset = segcaps-tiny\nmodel.bogus = 1\n").unwrap();
    parse_model_config(&mut kv).unwrap();
    assert!(kv.finish().unwrap_err().to_string().contains("model.bogus"));
    assert!(KeyValues::parse("novalue\n").is_err());
    assert!(KeyValues::parse("a.b = 1\na.b = 2\n").is_err());
    assert!(KeyValues::parse("nosection = 1\n").is_err());
    let mut kv = KeyValues::parse("model.preset = segcaps-tiny\nloss.kind = margin\nloss.margin_upper = 0.05\n").unwrap();
    assert!(parse_model_config(&mut kv).is_err());
    let mut kv = KeyValues::parse("model.preset = segcaps-tiny # comment\nmodel.threshold = 0.7\n").unwrap();
    assert_eq!(parse_model_config(&mut kv).unwrap().threshold, 0.7);
}

#[test]
fn cast_round_trip() {
    let m = Model::<f32>::build(preset("segcaps-tiny").unwrap(), 9).unwrap();
    let back: Model<f32> = m.cast::<f64>().cast();
    assert_eq!(back, m);
}

#[test]
fn from_params_rejects_wrong_shapes() {
    let m = Model::<f32>::build(preset("segcaps-tiny").unwrap(), 9).unwrap();
    let mut params = m.params().to_vec();
    params[2].value = Tensor::zeros(&[1, 2, 3]);
    let err = Model::from_params(m.config().clone(), params).unwrap_err();
    assert!(matches!(err, Error::CheckpointShape { ref name, .. } if name == &m.params()[2].name));
    assert!(Model::from_params(m.config().clone(), m.params()[1..].to_vec()).is_err());
}

#[test]
fn reconstruction_sees_only_masked_poses() {
    let model = Model::<f64>::build(preset("segcaps-tiny").unwrap(), 2).unwrap();
    let (image, _) = sample(16, 1);
    let p = model.predict(&image, 2.0).unwrap();
    assert!(p.mask.data().iter().all(|&m| m == 0.0));
    let first = p.reconstruction.data()[0];
    assert!(p.reconstruction.data().iter().all(|&r| r == first));
}

#[test]
fn tiny_model_gradients() {
    let (image, target) = sample(16, 4);
    for name in ["segcaps-tiny", "segcaps-r1-tiny"] {
        let model = Model::<f64>::build(preset(name).unwrap(), 5).unwrap();
        for d in [1, 3] {
            let options = GradcheckOptions {
                entries_per_block: Some(6),
                forward: ForwardOptions {
                    iterations: Some(d),
                    ..ForwardOptions::default()
                },
                ..GradcheckOptions::default()
            };
            for r in gradcheck_model(&model, &image, &target, &options).unwrap() {
                assert!(r.max_rel_error <= 1e-4, "{name} d={d} {}: {}", r.param, r.max_rel_error);
            }
        }
    }
}

#[test]
fn injected_fault_is_attributed() {
    let (image, target) = sample(16, 4);
    let model = Model::<f64>::build(preset("segcaps-tiny").unwrap(), 5).unwrap();
    let options = GradcheckOptions {
        entries_per_block: Some(4),
        forward: ForwardOptions {
            grad_fault: Some(("enc2a".into(), 1.5)),
            ..ForwardOptions::default()
        },
        ..GradcheckOptions::default()
    };
    let reports = gradcheck_model(&model, &image, &target, &options).unwrap();
    for r in &reports {
        assert_eq!(r.max_rel_error > 1e-4, r.layer == "enc2a", "{r:?}");
    }
}
