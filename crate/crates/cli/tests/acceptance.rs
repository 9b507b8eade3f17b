//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `ACCEPTANCE_ONLY=1,2,12` restricts the run to the listed criteria.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use capsroute::capsule::{
    conv_capsule, route, route_traced, softmax_last, squash, weight_shape, CapsuleGrid, KernelGeometry, RoutingConfig,
    TransformKernel,
};
use capsroute::loss::{dice, masked_mse, weighted_bce, weighted_margin, LossWeights, MarginParams};
use capsroute::model::{count_unet_params, preset, Model, UnetConfig, PRESETS};
use capsroute::tensor::{conv2d_lower, deconv2d_scatter, Padding};
use capsroute::train::{decode_checkpoint, load_checkpoint, save_checkpoint};
use capsroute::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Iterations per fold for the toy segmentation runs.
const TOY_ITERATIONS: usize = 1500;
const TOY_FOLDS: usize = 4;
const TOY_SEED: u64 = 1;

type Check = Result<String, String>;

fn capsroute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsroute"))
        .args(args)
        .env("CAPSROUTE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn succeeded(o: &Output) -> Result<String, String> {
    if o.status.success() {
        Ok(stdout(o))
    } else {
        Err(format!("exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn within(elapsed: Duration, limit: Duration) -> Check {
    if elapsed < limit {
        Ok(String::new())
    } else {
        Err(format!("took {elapsed:.1?}, limit {limit:?}"))
    }
}

fn field<'a>(text: &'a str, prefix: &str) -> Result<&'a str, String> {
    text.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .ok_or_else(|| format!("no `{prefix}` line in output"))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn c1_sabour_layer() -> Check {
    let start = Instant::now();
    let text = succeeded(&capsroute(&["params", "--example", "sabour-layer"]))?;
    let count: u64 = field(&text, "sabour-layer\t")?.trim().parse().map_err(|e| format!("{e}"))?;
    within(start.elapsed(), Duration::from_secs(1))?;
    if count == 1_474_560 {
        Ok(format!("{count} parameters"))
    } else {
        Err(format!("{count} != 1474560"))
    }
}

fn c2_unet_counter() -> Check {
    let start = Instant::now();
    let total: u64 = count_unet_params(&UnetConfig::default()).iter().map(|r| r.count).sum();
    within(start.elapsed(), Duration::from_secs(1))?;
    let rel = (total as f64 - 31.0e6).abs() / 31.0e6;
    if rel <= 0.05 {
        Ok(format!("{total} parameters, {:.2}% from 31.0 M", 100.0 * rel))
    } else {
        Err(format!("{total} is {:.2}% from 31.0 M", 100.0 * rel))
    }
}

fn c3_reduction() -> Check {
    let start = Instant::now();
    let text = succeeded(&capsroute(&["params", "--preset", "segcaps", "--reference", "unet"]))?;
    let r: f64 = field(&text, "reduction\t")?
        .trim_end_matches('%')
        .parse()
        .map_err(|e| format!("{e}"))?;
    let total = field(&text, "total\t")?.to_string();
    within(start.elapsed(), Duration::from_secs(1))?;
    if r >= 94.0 {
        Ok(format!("{r:.2}% fewer ({total} parameters)"))
    } else {
        Err(format!("only {r:.2}%"))
    }
}

/// Loop-by-loop locally-constrained routing of a same-padded convolutional
/// capsule layer, written independently of the library kernels.
fn naive_routing(children: &CapsuleGrid<f64>, kernel: &TransformKernel<f64>, d: usize) -> Vec<f64> {
    let (h, w, tin) = (children.height(), children.width(), children.num_types());
    let (tout, zout) = (kernel.out_types(), kernel.out_dim());
    let g = kernel.geometry;
    let (oh, ow) = (h.div_ceil(g.stride), w.div_ceil(g.stride));
    let (ph, pw) = ((g.kh - 1) / 2, (g.kw - 1) / 2);
    let mut out = Vec::new();
    for x in 0..oh {
        for y in 0..ow {
            let mut u_hat: Vec<Vec<Vec<f64>>> = Vec::new();
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    for t in 0..tin {
                        let cx = (x * g.stride + ki) as isize - ph as isize;
                        let cy = (y * g.stride + kj) as isize - pw as isize;
                        let inside = cx >= 0 && cy >= 0 && (cx as usize) < h && (cy as usize) < w;
                        let mut per_parent = Vec::new();
                        for j in 0..tout {
                            let mut u = vec![0.0; zout];
                            if inside {
                                let pose = children.pose(cx as usize, cy as usize, t);
                                for (b, ub) in u.iter_mut().enumerate() {
                                    let mut acc = 0.0;
                                    for (a, &pa) in pose.iter().enumerate() {
                                        acc += pa * kernel.weights.get(&[ki, kj, t, a, j, b]);
                                    }
                                    *ub = acc;
                                }
                            }
                            per_parent.push(u);
                        }
                        u_hat.push(per_parent);
                    }
                }
            }
            let mut logits = vec![vec![0.0; tout]; u_hat.len()];
            let mut v = vec![vec![0.0; zout]; tout];
            for _ in 0..d {
                let mut r = Vec::new();
                for b in &logits {
                    let m = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = b.iter().map(|&x| (x - m).exp()).collect();
                    let mut total = 0.0;
                    for &x in &e {
                        total += x;
                    }
                    r.push(e.iter().map(|&x| x / total).collect::<Vec<f64>>());
                }
                for j in 0..tout {
                    let mut s = vec![0.0; zout];
                    for (c, per_parent) in u_hat.iter().enumerate() {
                        for b in 0..zout {
                            s[b] += r[c][j] * per_parent[j][b];
                        }
                    }
                    let mut n2 = 0.0;
                    for &x in &s {
                        n2 += x * x;
                    }
                    v[j] = if n2 == 0.0 {
                        s
                    } else {
                        let n = n2.sqrt();
                        let gain = n2 / (1.0 + n2);
                        s.iter().map(|&x| gain * (x / n)).collect()
                    };
                }
                for (c, per_parent) in u_hat.iter().enumerate() {
                    for j in 0..tout {
                        let mut a = 0.0;
                        for b in 0..zout {
                            a += per_parent[j][b] * v[j][b];
                        }
                        logits[c][j] += a;
                    }
                }
            }
            for vj in &v {
                out.extend_from_slice(vj);
            }
        }
    }
    out
}

fn c4_routing_oracle() -> Check {
    let start = Instant::now();
    let mut cases = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (tin, tout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (zin, zout) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let k = [1, 3][rng.gen_range(0..2)];
        let stride = rng.gen_range(1..=2);
        let g = KernelGeometry::conv(k, stride);
        let grid = CapsuleGrid::new(random_tensor(&[h, w, tin, zin], &mut rng)).map_err(|e| e.to_string())?;
        let kernel = TransformKernel::new(random_tensor(&weight_shape(&g, tin, zin, tout, zout), &mut rng), g)
            .map_err(|e| e.to_string())?;
        for d in 1..=3 {
            let got = conv_capsule(&grid, &kernel, d, true).map_err(|e| e.to_string())?;
            if got.poses().data() != &naive_routing(&grid, &kernel, d)[..] {
                return Err(format!("seed {seed}, d={d}: outputs differ"));
            }
            cases += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("{cases} cases bitwise equal"))
}

fn gradcheck_run(iterations: &str) -> Result<f64, String> {
    let text = succeeded(&capsroute(&["gradcheck", "--preset", "segcaps-tiny", "--size", "16", "--iterations", iterations]))?;
    let mut worst = 0.0f64;
    let mut deconv_seen = false;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() == 4 {
            worst = worst.max(cols[2].parse::<f64>().map_err(|e| format!("{line}: {e}"))?);
            deconv_seen |= cols[0].starts_with("dec");
        }
    }
    if !deconv_seen {
        return Err("no deconvolutional layer in the report".into());
    }
    Ok(worst)
}

fn c5_gradients() -> Check {
    let start = Instant::now();
    let d1 = gradcheck_run("1")?;
    let d3 = gradcheck_run("3")?;
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!("max relative error {d1:.2e} (d=1), {d3:.2e} (d=3), deconv layers included"))
}

fn c6_routing_invariants() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut sum_err, mut uniform_err, mut shift_err, mut max_norm) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (c, p, j, z) = (rng.gen_range(1..=9), rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=8));
        let votes = random_tensor(&[c, p, j, z], &mut rng).map(|v| v * 3.0);
        let tape = Tape::new();
        let d = rng.gen_range(1..=4);
        let (_, state) = route_traced(tape.constant(votes.clone()), &RoutingConfig::dynamic(d), true)
            .map_err(|e| e.to_string())?;
        for snap in &state.trace {
            for row in snap.coefficients.data().chunks(j) {
                sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }

        let routed = route(tape.constant(votes.clone()), &RoutingConfig::dynamic(1)).map_err(|e| e.to_string())?;
        let equal = route(tape.constant(votes), &RoutingConfig::uniform()).map_err(|e| e.to_string())?;
        for (a, b) in routed.value().data().iter().zip(equal.value().data()) {
            uniform_err = uniform_err.max((a - b).abs());
        }

        let scale = 10f64.powf(rng.gen_range(-4.0..4.0));
        let raw = random_tensor(&[z], &mut rng).map(|v| v * scale);
        let squashed = squash(&raw).map_err(|e| e.to_string())?;
        max_norm = max_norm.max(squashed.data().iter().map(|x| x * x).sum::<f64>().sqrt());

        let logits = random_tensor(&[j], &mut rng).map(|v| v * 10.0);
        let shift = rng.gen_range(-50.0..50.0);
        let a = softmax_last(&logits).map_err(|e| e.to_string())?;
        let b = softmax_last(&logits.map(|v| v + shift)).map_err(|e| e.to_string())?;
        for (x, y) in a.data().iter().zip(b.data()) {
            shift_err = shift_err.max((x - y).abs());
        }
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    let ok = sum_err <= 1e-6 && max_norm < 1.0 && uniform_err <= 1e-7 && shift_err <= 1e-7;
    let summary = format!(
        "1000 cases each: |sum-1| {sum_err:.1e}, max squash norm {max_norm:.9}, d=1 vs equal {uniform_err:.1e}, shift {shift_err:.1e}"
    );
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn c7_adjoint() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let stride = rng.gen_range(1..=2);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let (oh, ow, c) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=4));
        let x = random_tensor(&[oh * stride, ow * stride, c], &mut rng);
        let y = random_tensor(&[oh, ow, k * k * c], &mut rng);
        let lowered = conv2d_lower(&x, k, k, stride, Padding::Same).map_err(|e| e.to_string())?;
        let scattered = deconv2d_scatter(&y, c, k, k, stride, Padding::Same).map_err(|e| e.to_string())?;
        let lhs = lowered.dot(&y).map_err(|e| e.to_string())?;
        let rhs = x.dot(&scattered).map_err(|e| e.to_string())?;
        worst = worst.max((lhs - rhs).abs());
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    if worst <= 1e-10 {
        Ok(format!("100 shapes, max |<conv x, y> - <x, deconv y>| = {worst:.1e}"))
    } else {
        Err(format!("max gap {worst:.1e}"))
    }
}

struct ToyRun {
    median: f64,
    elapsed: Duration,
}

fn toy_train(data: &Path, out: &Path, name: &str, fold: Option<usize>) -> Result<ToyRun, String> {
    let start = Instant::now();
    let folds = TOY_FOLDS.to_string();
    let iterations = TOY_ITERATIONS.to_string();
    let seed = TOY_SEED.to_string();
    let fold_arg = fold.map(|f| f.to_string());
    let mut args = vec![
        "train",
        "--preset",
        name,
        "--data",
        data.to_str().unwrap(),
        "--folds",
        &folds,
        "--seed",
        &seed,
        "--iterations",
        &iterations,
        "--out",
        out.to_str().unwrap(),
    ];
    if let Some(f) = &fold_arg {
        args.extend(["--fold", f]);
    }
    let text = succeeded(&capsroute(&args))?;
    let median = field(&text, "median dice: ")?.trim().parse().map_err(|e| format!("{e}"))?;
    Ok(ToyRun {
        median,
        elapsed: start.elapsed(),
    })
}

struct ToyResults {
    small: Result<ToyRun, String>,
    r1: Result<ToyRun, String>,
    baseline: Result<ToyRun, String>,
}

fn run_toy(root: &Path) -> ToyResults {
    let data = root.join("data");
    if let Err(e) = succeeded(&capsroute(&["synth", "--n", "200", "--size", "64", "--seed", "7", "--out", data.to_str().unwrap()])) {
        return ToyResults {
            small: Err(e.clone()),
            r1: Err(e.clone()),
            baseline: Err(e),
        };
    }
    ToyResults {
        small: toy_train(&data, &root.join("segcaps-small"), "segcaps-small", None),
        r1: toy_train(&data, &root.join("segcaps-r1-small"), "segcaps-r1-small", None),
        baseline: toy_train(&data, &root.join("baseline-caps-small"), "baseline-caps-small", None),
    }
}

fn c8_toy_segmentation(toy: &ToyResults) -> Check {
    let small = toy.small.as_ref().map_err(|e| format!("segcaps-small: {e}"))?;
    let base = toy.baseline.as_ref().map_err(|e| format!("baseline-caps-small: {e}"))?;
    let total = small.elapsed + base.elapsed + toy.r1.as_ref().map_or(Duration::ZERO, |r| r.elapsed);
    let summary = format!(
        "segcaps-small {:.4}, baseline-caps-small {:.4}, {TOY_ITERATIONS} iterations x {TOY_FOLDS} folds, {:.0} s training",
        small.median,
        base.median,
        total.as_secs_f64()
    );
    within(total, Duration::from_secs(7200)).map_err(|e| format!("{summary}; {e}"))?;
    if small.median >= 0.90 && base.median >= 0.75 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn c9_r1_variant(toy: &ToyResults) -> Check {
    let small = toy.small.as_ref().map_err(|e| format!("segcaps-small: {e}"))?;
    let r1 = toy.r1.as_ref().map_err(|e| format!("segcaps-r1-small: {e}"))?;
    let gap = 100.0 * (small.median - r1.median);
    let summary = format!("segcaps-r1-small {:.4} vs segcaps-small {:.4} ({gap:+.2} points)", r1.median, small.median);
    if gap <= 3.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn c10_reproducibility(root: &Path) -> Check {
    let first = root.join("segcaps-small");
    let again = root.join("rerun");
    toy_train(&root.join("data"), &again, "segcaps-small", Some(0))?;
    for f in ["fold0.sgcp", "fold0.cfg", "fold0.log"] {
        let a = fs::read(first.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(again.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok("fold 0 checkpoint, config and metrics log bitwise identical across two runs".into())
}

fn c11_checkpoints() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, name) in PRESETS.iter().enumerate() {
        let model = Model::<f32>::build(preset(name).map_err(|e| e.to_string())?, i as u64).map_err(|e| e.to_string())?;
        let path = tmp.path().join(format!("{name}.sgcp"));
        save_checkpoint(&model, &path).map_err(|e| e.to_string())?;
        let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
        if back.config() != model.config() {
            return Err(format!("{name}: config changed"));
        }
        for (a, b) in model.params().iter().zip(back.params()) {
            let same = a.name == b.name
                && a.value.shape() == b.value.shape()
                && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(format!("{name}: tensor `{}` changed", a.name));
            }
        }
    }
    let bytes = fs::read(tmp.path().join("segcaps-tiny.sgcp")).map_err(|e| e.to_string())?;
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x10;
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    let mut trailing = bytes.clone();
    trailing.push(0);
    let corrupt = [
        ("flipped byte", flipped),
        ("bad magic", bad_magic),
        ("bad version", bad_version),
        ("truncated", bytes[..bytes.len() - 3].to_vec()),
        ("trailing byte", trailing),
        ("empty", Vec::new()),
    ];
    for (what, data) in &corrupt {
        if decode_checkpoint(data).is_ok() {
            return Err(format!("{what} accepted"));
        }
    }
    let wrong = tmp.path().join("wrong.sgcp");
    fs::copy(tmp.path().join("segcaps-small.sgcp"), &wrong).map_err(|e| e.to_string())?;
    fs::copy(tmp.path().join("segcaps-tiny.cfg"), wrong.with_extension("cfg")).map_err(|e| e.to_string())?;
    if load_checkpoint(&wrong).is_ok() {
        return Err("checkpoint loaded against a mismatched config".into());
    }
    Ok(format!("{} presets bitwise round trip, {} corruptions and a config mismatch rejected", PRESETS.len(), corrupt.len()))
}

fn c12_losses() -> Check {
    let tape = Tape::new();
    let ones = LossWeights::new(1.0, 1.0, 0.0).map_err(|e| e.to_string())?;
    let target = Tensor::from_fn(&[4, 4], |i| (i % 3 == 0) as u8 as f64);
    let half = tape.constant(Tensor::full(&[4, 4], 0.5));
    let bce = weighted_bce(half, &target, &ones).map_err(|e| e.to_string())?.value().item();
    let bce_err = (bce - std::f64::consts::LN_2).abs();

    let pred = Tensor::new(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]).map_err(|e| e.to_string())?;
    let truth = Tensor::new(&[1, 4], vec![1.0, 0.0, 1.0, 0.0]).map_err(|e| e.to_string())?;
    let d = dice(&pred, &truth).map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rec = random_tensor(&[5, 7], &mut rng);
    let img = random_tensor(&[5, 7], &mut rng);
    let mask = Tensor::from_fn(&[5, 7], |_| rng.gen_bool(0.4) as u8 as f64);
    let mse = masked_mse(tape.constant(rec.clone()), &img, &mask).map_err(|e| e.to_string())?.value().item();
    let (mut num, mut count) = (0.0, 0.0);
    for i in 0..35 {
        let e = rec.data()[i] - img.data()[i];
        num += mask.data()[i] * e * e;
        count += mask.data()[i];
    }
    let mse_err = (mse - num / f64::max(count, 1.0)).abs();

    let margin = MarginParams::default();
    let lengths = Tensor::from_fn(&[4, 4], |i| if target.data()[i] == 1.0 { 0.95 } else { 0.05 });
    let hinge = weighted_margin(tape.constant(lengths), &target, &ones, &margin)
        .map_err(|e| e.to_string())?
        .value()
        .item();

    let summary = format!("BCE - ln2 {bce_err:.1e}, dice {d}, masked MSE gap {mse_err:.1e}, margin {hinge}");
    if bce_err <= 1e-7 && d == 0.5 && mse_err <= 1e-7 && hinge == 0.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut failures = 0;
    let mut report = |n: usize, name: &str, check: Check| {
        match &check {
            Ok(detail) => println!("[PASS] {n:>2} {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("[FAIL] {n:>2} {name}: {detail}");
            }
        }
    };
    let quick: [(usize, &str, fn() -> Check); 7] = [
        (1, "parameter arithmetic", c1_sabour_layer),
        (2, "U-Net counter", c2_unet_counter),
        (3, "reduction claim", c3_reduction),
        (4, "routing oracle equivalence", c4_routing_oracle),
        (5, "gradient suite", c5_gradients),
        (6, "routing invariants", c6_routing_invariants),
        (7, "adjoint identity", c7_adjoint),
    ];
    for (n, name, f) in quick {
        if wanted(n) {
            report(n, name, f());
        }
    }
    if wanted(8) || wanted(9) || wanted(10) {
        let toy = run_toy(tmp.path());
        if wanted(8) {
            report(8, "toy segmentation bar", c8_toy_segmentation(&toy));
        }
        if wanted(9) {
            report(9, "R1 variant", c9_r1_variant(&toy));
        }
        if wanted(10) {
            let check = match &toy.small {
                Ok(_) => c10_reproducibility(tmp.path()),
                Err(e) => Err(format!("first run failed: {e}")),
            };
            report(10, "reproducibility", check);
        }
    }
    if wanted(11) {
        report(11, "checkpoint round trip", c11_checkpoints());
    }
    if wanted(12) {
        report(12, "loss and metric exactness", c12_losses());
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
