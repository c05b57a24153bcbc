mod common;

use common::*;
use signprop_core::harness::{gen_blobs, load_dataset, run, run_replicas, train, Split, Trainer, CSV_HEADER};
use signprop_core::{Error, LayerSpec, RuleKind};

fn mnist_or_skip(name: &str) -> bool {
    if !mnist_available() {
        eprintln!("{name}: MNIST files not found under {}, skipping", data_root().display());
        return false;
    }
    true
}

fn mixed_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv {
            channels: 4,
            kernel: 4,
            stride: 2,
            padding: 0,
            bias: true,
            relu: false,
            rule: None,
        },
        LayerSpec::BatchNorm { relu: true },
        LayerSpec::dense_relu(32),
        LayerSpec::Residual { hidden: 16, rule: None },
        LayerSpec::dense(10),
    ]
}

#[test]
fn every_setting_completes_an_epoch_on_mnist() {
    if !mnist_or_skip("every_setting_completes_an_epoch_on_mnist") {
        return;
    }
    let data = load_dataset(&mnist_dataset(1000, Some(500)), 0).unwrap();
    for (rule, last) in SETTINGS {
        let cfg = config(mnist_dataset(1000, Some(500)), mixed_layers(), rule, last, 1, 3);
        let r = train(&cfg, &data).unwrap();
        let test: Vec<_> = r.rows(Split::Test).collect();
        assert_eq!(test.len(), 2);
        assert!(test[1].loss.unwrap().is_finite(), "{}: {test:?}", cfg.assignment().label());
        assert!(r.summary.final_train_loss.is_finite());
        assert_eq!(r.rows(Split::Diag).filter(|d| d.epoch == 1).count(), 5);
    }
}

#[test]
fn every_setting_separates_tight_blobs() {
    for (rule, last) in SETTINGS {
        let cfg = config(blobs(3, 8, 100, 0.01), mlp(&[16], 3), rule, last, 10, 5);
        let data = load_dataset(&cfg.dataset, cfg.seed).unwrap();
        let r = train(&cfg, &data).unwrap();
        let final_train = r.rows(Split::Train).last().unwrap();
        assert_eq!(final_train.top1, Some(1.0), "{}", cfg.assignment().label());
    }
}

#[test]
fn bp_reaches_full_test_accuracy_on_separable_blobs() {
    let cfg = config(blobs(3, 8, 100, 0.01), mlp(&[16], 3), RuleKind::Symmetric, None, 5, 2);
    let data = load_dataset(&cfg.dataset, cfg.seed).unwrap();
    let r = train(&cfg, &data).unwrap();
    assert_eq!(r.summary.final_test_top1, 1.0);
}

/// Accuracy of the Bayes classifier for two equal-prior isotropic Gaussians,
/// by midpoint quadrature of `max(p0, p1) / 2` over a grid.
fn bayes_accuracy_2d(c0: [f64; 2], c1: [f64; 2], sigma: f64) -> f64 {
    let density = |x: f64, y: f64, c: [f64; 2]| {
        let r2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
        (-r2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma)
    };
    let half = 10.0 * sigma + c0[0].abs().max(c0[1].abs()).max(c1[0].abs()).max(c1[1].abs());
    let steps = 1200;
    let h = 2.0 * half / steps as f64;
    let mut total = 0.0;
    for i in 0..steps {
        let x = -half + (i as f64 + 0.5) * h;
        for j in 0..steps {
            let y = -half + (j as f64 + 0.5) * h;
            total += density(x, y, c0).max(density(x, y, c1)) / 2.0;
        }
    }
    total * h * h
}

#[test]
fn overlapping_blobs_stay_below_full_accuracy() {
    let spread = 1.5;
    let blobs_data = gen_blobs(2, 2, 400, spread, 0.25, 1.0, 4).unwrap();
    let c = blobs_data.centers.data();
    let bayes = bayes_accuracy_2d([c[0], c[1]], [c[2], c[3]], spread);

    // Closed form Φ(d / 2σ) cross-checks the quadrature.
    let d = ((c[0] - c[2]).powi(2) + (c[1] - c[3]).powi(2)).sqrt();
    let z = d / (2.0 * spread);
    let phi = 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
    assert!((bayes - phi).abs() < 1e-6, "{bayes} vs {phi}");
    assert!(bayes < 0.95, "{bayes}");

    for (rule, last) in SETTINGS {
        let cfg = config(blobs(2, 2, 400, spread), mlp(&[8], 2), rule, last, 5, 4);
        let data = load_dataset(&cfg.dataset, cfg.seed).unwrap();
        let r = train(&cfg, &data).unwrap();
        let acc = r.summary.final_test_top1;
        let n = data.test.len() as f64;
        assert!(acc < 1.0);
        assert!(acc <= bayes + 4.0 * (bayes * (1.0 - bayes) / n).sqrt(), "{acc} vs bayes {bayes}");
    }
}

/// Abramowitz-Stegun 7.1.26 is too coarse for a 1e-6 comparison, so this
/// uses the series for small z and the continued fraction tail otherwise.
fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 3.0 {
        let mut sum = x;
        let mut term = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-17 {
                break;
            }
        }
        2.0 / std::f64::consts::PI.sqrt() * sum
    } else {
        let mut f = 0.0;
        for k in (1..60).rev() {
            f = (k as f64 / 2.0) / (x + f);
        }
        1.0 - (-x * x).exp() / std::f64::consts::PI.sqrt() / (x + f)
    }
}

#[test]
fn untrained_network_is_at_chance() {
    let cfg = config(blobs(10, 16, 200, 1.0), mlp(&[32], 10), RuleKind::SignSymmetric, None, 0, 6);
    let data = load_dataset(&cfg.dataset, cfg.seed).unwrap();
    let r = train(&cfg, &data).unwrap();
    assert_eq!(r.summary.epochs, 0);
    assert!((r.summary.final_test_top1 - 0.1).abs() <= 0.05, "{}", r.summary.final_test_top1);
    if mnist_or_skip("untrained_network_is_at_chance") {
        let cfg = config(mnist_dataset(2000, None), mlp(&[256, 256], 10), RuleKind::Symmetric, None, 0, 1);
        let data = load_dataset(&cfg.dataset, cfg.seed).unwrap();
        let r = train(&cfg, &data).unwrap();
        assert!((r.summary.final_test_top1 - 0.1).abs() <= 0.05, "{}", r.summary.final_test_top1);
    }
}

#[test]
fn sign_symmetry_loss_falls_through_the_first_epoch() {
    if !mnist_or_skip("sign_symmetry_loss_falls_through_the_first_epoch") {
        return;
    }
    let cfg = config(mnist_dataset(10000, Some(1000)), mlp(&[256, 256], 10), RuleKind::SignSymmetric, None, 1, 1);
    let data = load_dataset(&cfg.dataset, cfg.seed).unwrap();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    t.record_initial().unwrap();
    t.train_epoch().unwrap();
    let quarters: Vec<f64> = t
        .batch_losses
        .chunks(t.batch_losses.len().div_ceil(4))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let initial = t.metrics[0].loss.unwrap();
    assert!(initial > quarters[0], "{initial} then {quarters:?}");
    assert!(quarters.windows(2).all(|w| w[1] < w[0]), "{quarters:?}");
}

#[test]
fn rule_swap_leaves_initial_losses_unchanged() {
    let rows = |rule, last| {
        let cfg = config(blobs(4, 6, 60, 0.8), mlp(&[12, 8], 4), rule, last, 1, 9);
        let data = load_dataset(&cfg.dataset, cfg.seed).unwrap();
        let r = train(&cfg, &data).unwrap();
        let initial: Vec<(u64, u64)> = r
            .metrics
            .iter()
            .filter(|m| m.epoch == 0 && m.split != Split::Diag)
            .map(|m| (m.loss.unwrap().to_bits(), m.top1.unwrap().to_bits()))
            .collect();
        let after: f64 = r.rows(Split::Test).last().unwrap().loss.unwrap();
        (initial, after)
    };
    let (bp_initial, bp_after) = rows(RuleKind::Symmetric, None);
    let mut after = vec![bp_after];
    for (rule, last) in SETTINGS.into_iter().skip(1).chain([(RuleKind::SignTimesRandom, None)]) {
        let (initial, a) = rows(rule, last);
        assert_eq!(initial, bp_initial, "{rule:?} {last:?}");
        after.push(a);
    }
    // The rules do change training.
    after.dedup();
    assert!(after.len() > 1);
}

#[test]
fn metrics_are_bit_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(blobs(3, 5, 80, 0.7), mlp(&[10], 3), RuleKind::FixedRandom, Some(RuleKind::Symmetric), 3, 12);
    cfg.optimizer.kind = signprop_core::OptimizerKind::BatchManhattan;
    cfg.optimizer.lr = 0.01;
    let a = run(&cfg, Some(&dir.path().join("a"))).unwrap();
    let b = run(&cfg, Some(&dir.path().join("b"))).unwrap();
    let read = |p: &str| std::fs::read(dir.path().join(p).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(a.csv(), b.csv());
    let csv = String::from_utf8(read("a")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    for p in ["summary.json", "run.log", "snapshot/manifest.json", "snapshot/layer0.weight.bin"] {
        assert!(dir.path().join("a").join(p).is_file(), "{p}");
    }
}

#[test]
fn diverging_run_aborts_with_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(blobs(3, 5, 80, 0.7), mlp(&[10], 3), RuleKind::SignSymmetric, None, 3, 1);
    cfg.optimizer.lr = 1e300;
    let err = run(&cfg, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let log = std::fs::read_to_string(dir.path().join("run.log")).unwrap();
    let last = log.lines().last().unwrap();
    assert!(last.contains("aborted") && last.contains("epoch") && last.contains("batch"), "{log}");
    assert!(dir.path().join("metrics.csv").is_file());
    assert!(!dir.path().join("summary.json").exists());
}

#[test]
fn replicas_write_per_seed_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(blobs(3, 4, 40, 0.5), mlp(&[8], 3), RuleKind::SignSymmetric, None, 1, 0);
    let results = run_replicas(&cfg, &[1, 2], Some(dir.path())).unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0].summary.seed, 1);
    assert_ne!(results[0].csv(), results[1].csv());
    assert!(dir.path().join("seed-2/metrics.csv").is_file());
}
