//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use osegnet::data::{load_index, synth_generate, Split};
use osegnet::eval::evaluate;
use osegnet::gradcheck::{run_gradcheck, GradcheckOptions};
use osegnet::kernels::conv2d_transpose;
use osegnet::layers::{Conv2d, OperLayer};
use osegnet::loss::{dice_loss, focal_loss, hybrid_loss, LossConfig};
use osegnet::metrics::{
    detect_sample, metrics_from_confusion, pixel_confusion, ConfusionCounts, Granularity,
};
use osegnet::train::{load_split, train_run};
use osegnet::{ModelConfig, OSegNetModel, OpKind, RunConfig, Tensor};

/// Tolerance on reference percentages, in percentage points.
const PERCENT_TOL: f64 = 0.005;
/// Q=1 reduction tolerance (max absolute difference).
const REDUCTION_TOL: f32 = 1e-6;
const FOCAL_TOL: f64 = 1e-4;
const TOY_MIN_PIXEL_F1: f64 = 0.90;
const TOY_MIN_DETECTION_ACC: f64 = 0.90;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionCounts {
    ConfusionCounts {
        tp,
        fp,
        tn,
        fn_,
        granularity: Granularity::Sample,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn metric_arithmetic() -> Outcome {
    // Confusion counts and the rows they produce, in the column order
    // Sensitivity, Specificity, Precision, F1, F2, Accuracy.
    let rows = [
        (
            (2057, 40, 25556, 56),
            [97.35, 99.84, 98.09, 97.72, 97.50, 99.65],
        ),
        (
            (2082, 113, 25483, 31),
            [98.53, 99.56, 94.85, 96.66, 97.77, 99.48],
        ),
    ];
    let mut worst = 0.0f64;
    for ((tp, fp, tn, fn_), expected) in rows {
        let m = metrics_from_confusion(&counts(tp, fp, tn, fn_)).unwrap();
        let got = [
            m.sensitivity,
            m.specificity,
            m.precision,
            m.f1,
            m.f2,
            m.accuracy,
        ];
        for (g, e) in got.iter().zip(expected) {
            worst = worst.max((g * 100.0 - e).abs());
        }
    }
    outcome(
        worst <= PERCENT_TOL,
        format!("max deviation {worst:.4} pp (tol {PERCENT_TOL})"),
    )
}

fn q1_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f32;
    let configs = 60;
    for _ in 0..configs {
        let n = rng.random_range(1..=3);
        let cin = rng.random_range(1..=4);
        let cout = rng.random_range(1..=4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let (h, w) = (rng.random_range(3..=9), rng.random_range(3..=9));
        let x = random_tensor(&mut rng, &[n, cin, h, w], -1.0, 1.0);

        let mut oper = OperLayer::new(1, cin, cout, k, stride, false, &mut rng).unwrap();
        oper.bias = random_tensor(&mut rng, &[cout], -0.5, 0.5);
        let mut conv = Conv2d::new(cin, cout, k, stride, &mut rng);
        conv.kernel = oper.kernel.clone();
        conv.bias = oper.bias.clone();
        worst = worst.max(max_abs_diff(
            &oper.apply(&x).unwrap(),
            &conv.apply(&x).unwrap(),
        ));

        let mut oper_t = OperLayer::new(1, cin, cout, k, stride, true, &mut rng).unwrap();
        oper_t.bias = random_tensor(&mut rng, &[cout], -0.5, 0.5);
        let plain = conv2d_transpose(&x, &oper_t.kernel, &oper_t.bias, stride).unwrap();
        worst = worst.max(max_abs_diff(&oper_t.apply(&x).unwrap(), &plain));
    }
    outcome(
        worst <= REDUCTION_TOL,
        format!("{configs} configurations, max |Δ| {worst:.2e} (tol {REDUCTION_TOL:e})"),
    )
}

fn gradient_suite() -> Outcome {
    let mut worst_iso = 0.0f64;
    let mut worst_e2e = 0.0f64;
    let mut failures = Vec::new();
    for q in 1..=5 {
        let report = run_gradcheck(&GradcheckOptions {
            q_order: q,
            seed: 100 + q as u64,
            ..GradcheckOptions::default()
        })
        .unwrap();
        worst_iso = report
            .isolated
            .iter()
            .fold(worst_iso, |m, c| m.max(c.error));
        worst_e2e = report
            .end_to_end
            .iter()
            .fold(worst_e2e, |m, c| m.max(c.error));
        if let Some(f) = report.worst_failure() {
            failures.push(format!("Q={q}: {} {}", f.kind, f.label));
        }
        if report.sampled_params < 200 {
            failures.push(format!(
                "Q={q}: only {} parameters sampled",
                report.sampled_params
            ));
        }
    }
    // A corrupted backward rule must be caught and attributed.
    let control = run_gradcheck(&GradcheckOptions {
        fault: Some((OpKind::ConvTranspose2d, 1.5)),
        ..GradcheckOptions::default()
    })
    .unwrap();
    let caught = control
        .worst_failure()
        .is_some_and(|f| f.kind == "oper-transpose");
    if !caught {
        failures.push("corrupted transpose rule not detected".into());
    }
    outcome(
        failures.is_empty(),
        format!(
            "Q=1..5 isolated max {worst_iso:.2e} (<1e-3), end-to-end max {worst_e2e:.2e} (<1e-2), negative control {}{}",
            if caught { "caught" } else { "missed" },
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn param_affinity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = ModelConfig::default();
    let counts: Vec<usize> = (1..=5)
        .map(|q| {
            let cfg = ModelConfig {
                q_order: q,
                ..base.clone()
            };
            OSegNetModel::build(cfg, &mut rng)
                .unwrap()
                .count_params()
                .trainable
        })
        .collect();
    let diffs: Vec<usize> = counts.windows(2).map(|w| w[1] - w[0]).collect();
    // 9·(256·128 + 128·64 + 64·32 + 32·16 + 16·8 + 8·1)
    let closed_form = 392_904;
    // Same closed form with a 1024-channel bottleneck, about 1.28M.
    let wide = ModelConfig {
        encoder_channels: vec![64, 128, 256, 512, 1024],
        ..base
    };
    let wide_slope = wide.q_slope();
    let ok = diffs.iter().all(|&d| d == closed_form) && wide_slope == 1_277_640;
    outcome(
        ok,
        format!(
            "increments {diffs:?} vs closed form {closed_form}; 1024-channel slope {wide_slope}"
        ),
    )
}

fn toy_training(dir: &Path) -> Outcome {
    let data = dir.join("toy-data");
    let index = load_index(&synth_generate(250, 64, 1, &data).unwrap()).unwrap();
    let cfg = RunConfig {
        q_order: 3,
        input_size: 64,
        lr: 1e-3,
        epochs: 30,
        seed: 1,
        out_dir: dir.join("toy-run"),
        ..RunConfig::default()
    };
    let train_count = index.split(Split::Train).count();
    let test_count = index.split(Split::Test).count();
    let start = Instant::now();
    let outcome_ = train_run(&cfg, &index, false).unwrap();
    let test = load_split(&index, Split::Test, cfg.input_size).unwrap();
    let report = evaluate(&outcome_.trainer.model, &test, cfg.threshold as f32).unwrap();
    let elapsed = start.elapsed();
    let f1 = report.pixel.1.f1;
    let acc = report.detection.1.accuracy;
    outcome(
        f1 >= TOY_MIN_PIXEL_F1
            && acc >= TOY_MIN_DETECTION_ACC
            && elapsed < Duration::from_secs(600)
            && (train_count, test_count) == (200, 50),
        format!(
            "{train_count}/{test_count} split, {} epochs: pixel F1 {f1:.4} (≥{TOY_MIN_PIXEL_F1}), detection accuracy {acc:.4} (≥{TOY_MIN_DETECTION_ACC}), {:.0} s (<600)",
            cfg.epochs,
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = LossConfig::default();
    let mut ok = true;
    for _ in 0..200 {
        let n = rng.random_range(1..=3);
        let len = rng.random_range(1..=32);
        let p = Tensor::new(
            &[n, len],
            (0..n * len)
                .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let q = random_tensor(&mut rng, &[n, len], 0.0, 1.0);
        let d = dice_loss(&p, &q, cfg.dice_smooth).unwrap();
        ok &= (0.0..=1.0).contains(&d);
        ok &= dice_loss(&p, &p, cfg.dice_smooth).unwrap() == 0.0;
        let f = focal_loss(&p, &q, cfg.gamma, cfg.alpha, cfg.prob_clip).unwrap();
        ok &= hybrid_loss(&p, &q, &cfg).unwrap().to_bits() == (d + f).to_bits();
    }
    let one = Tensor::from_slice(&[1.0]);
    let zero = Tensor::from_slice(&[0.0]);
    let q = Tensor::from_slice(&[0.9]);
    let a = focal_loss(&one, &q, 2.0, 0.25, cfg.prob_clip).unwrap() as f64;
    let b = focal_loss(&zero, &q, 2.0, 0.25, cfg.prob_clip).unwrap() as f64;
    ok &= (a - 2.634e-4).abs() <= FOCAL_TOL && (b - 1.3988).abs() <= FOCAL_TOL;
    outcome(ok, format!("focal(1, 0.9) = {a:.4e}, focal(0, 0.9) = {b:.4}; dice range, zero and bitwise sum on 200 draws"))
}

fn detection_rule() -> Outcome {
    let t = 0.5;
    let mut ok = !detect_sample(&[0.0; 16], t);
    let mut single = [0.0f32; 16];
    single[7] = 0.6;
    ok &= detect_sample(&single, t);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gt = Tensor::zeros(&[1, 1, 8, 8]);
    let mut agree = 0;
    for _ in 0..1000 {
        let density = rng.random_range(0.0..0.05);
        let pred: Vec<f32> = (0..64)
            .map(|_| {
                if rng.random_bool(density) {
                    rng.random_range(0.5..1.0)
                } else {
                    rng.random_range(0.0..0.5)
                }
            })
            .collect();
        let flagged = detect_sample(&pred, t);
        let gt_rand = Tensor::new(
            &[1, 1, 8, 8],
            (0..64)
                .map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let p = Tensor::new(&[1, 1, 8, 8], pred).unwrap();
        let c = pixel_confusion(&p, &gt_rand, t).unwrap();
        let c0 = pixel_confusion(&p, &gt, t).unwrap();
        if flagged == (c.tp + c.fp > 0) && flagged == (c0.fp > 0) {
            agree += 1;
        }
    }
    ok &= agree == 1000;
    outcome(
        ok,
        format!("control/positive cases hold; equivalence on {agree}/1000 random masks"),
    )
}

fn run_cli(cwd: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_osegnet"))
        .current_dir(cwd)
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "osegnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// `log.csv` without the wall-clock column.
fn log_without_timing(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism(dir: &Path) -> Outcome {
    let config = "q_order = 2\ninput_size = 32\nencoder_channels = 4,8,8,8,8\nepochs = 2\nlr = 1e-3\nseed = 5\ndata_index = data/index.tsv\nout_dir = run\n";
    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let root = dir.join(name);
        fs::create_dir_all(&root).unwrap();
        fs::write(root.join("run.cfg"), config).unwrap();
        run_cli(
            &root,
            &[
                "synth", "--out", "data", "--count", "20", "--size", "32", "--seed", "9",
            ],
        );
        run_cli(&root, &["train", "--config", "run.cfg"]);
        run_cli(&root, &["eval", "--config", "run.cfg"]);
        let img = "data/images/s00004.pgm";
        run_cli(
            &root,
            &[
                "predict", "--config", "run.cfg", "--image", img, "--mask", "prob.pgm",
            ],
        );
        run_cli(
            &root,
            &[
                "predict", "--config", "run.cfg", "--image", img, "--mask", "bin.pgm", "--binary",
            ],
        );
        let read = |p: &str| fs::read(root.join(p)).unwrap();
        artifacts.push((
            [
                read("run/checkpoint.osgn"),
                read("run/run.log"),
                read("run/pixel_metrics.csv"),
                read("run/detection_metrics.csv"),
                read("prob.pgm"),
                read("bin.pgm"),
            ],
            log_without_timing(&root.join("run/log.csv")),
        ));
    }
    let same = artifacts[0] == artifacts[1];
    outcome(same, "two synth→train→eval→predict runs: checkpoints, run logs, reports, masks and training logs (timing column excluded) identical")
}

fn brute_force_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = 0.5f32;
    let mut mismatches = 0u64;
    let mut checked = 0u64;
    for gt_bits in 0u32..(1 << 16) {
        let gt = Tensor::new(
            &[1, 1, 4, 4],
            (0..16).map(|i| ((gt_bits >> i) & 1) as f32).collect(),
        )
        .unwrap();
        for _ in 0..4 {
            let pred_bits: u32 = rng.random_range(0..1 << 16);
            // Soft scores on either side of the threshold, including it exactly.
            let pred: Vec<f32> = (0..16)
                .map(|i| {
                    if (pred_bits >> i) & 1 == 1 {
                        [t, 0.75, 1.0][rng.random_range(0..3)]
                    } else {
                        [0.0, 0.25, 0.499][rng.random_range(0..3)]
                    }
                })
                .collect();
            let p = Tensor::new(&[1, 1, 4, 4], pred).unwrap();
            let c = pixel_confusion(&p, &gt, t).unwrap();
            let m = metrics_from_confusion(&c).unwrap();

            let (pp, g) = (pred_bits, gt_bits);
            let tp = (pp & g).count_ones() as u64;
            let fp = (pp & !g & 0xffff).count_ones() as u64;
            let fn_ = (!pp & g & 0xffff).count_ones() as u64;
            let tn = 16 - tp - fp - fn_;
            let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            let gt_size = g.count_ones() as u64;
            let pred_size = pp.count_ones() as u64;
            let expected = [
                ratio(tp, gt_size),
                ratio(tn, 16 - gt_size),
                ratio(tp, pred_size),
                ratio(tp + tn, 16),
                ratio(2 * tp, pred_size + gt_size),
                ratio(5 * tp, pred_size + 4 * gt_size),
            ];
            let got = [
                m.sensitivity,
                m.specificity,
                m.precision,
                m.accuracy,
                m.f1,
                m.f2,
            ];
            let counts_ok = (c.tp, c.fp, c.tn, c.fn_) == (tp, fp, tn, fn_);
            if !counts_ok
                || got
                    .iter()
                    .zip(&expected)
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                mismatches += 1;
            }
            checked += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{checked} mask pairs over all 2^16 ground truths, {mismatches} mismatches"),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>, Option<Duration>);
    let criteria: Vec<Criterion> = vec![
        (
            "metric arithmetic",
            Box::new(metric_arithmetic),
            Some(Duration::from_secs(1)),
        ),
        (
            "Q=1 reduction",
            Box::new(q1_reduction),
            Some(Duration::from_secs(30)),
        ),
        (
            "gradient suite",
            Box::new(gradient_suite),
            Some(Duration::from_secs(300)),
        ),
        (
            "parameter-count affinity",
            Box::new(param_affinity),
            Some(Duration::from_secs(1)),
        ),
        (
            "toy training convergence",
            Box::new(|| toy_training(dir.path())),
            None,
        ),
        ("loss properties", Box::new(loss_properties), None),
        (
            "detection rule",
            Box::new(detection_rule),
            Some(Duration::from_secs(10)),
        ),
        ("determinism", Box::new(|| determinism(dir.path())), None),
        (
            "brute-force metric oracle",
            Box::new(brute_force_oracle),
            None,
        ),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let in_budget = budget.is_none_or(|b| elapsed < b);
        let passed = result.passed && in_budget;
        if !passed {
            failed += 1;
        }
        let budget_note = match budget {
            Some(b) => format!(
                " [{:.2} s, budget {} s]",
                elapsed.as_secs_f64(),
                b.as_secs()
            ),
            None => format!(" [{:.2} s]", elapsed.as_secs_f64()),
        };
        println!(
            "criterion {}: {} {name}: {}{budget_note}",
            i + 1,
            if passed { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
