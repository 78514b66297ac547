//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]`/`[FAIL]` line (run with `--nocapture` to see them all).
//!
//! Fast property criteria (1-7) verify the numeric core against independent
//! oracles at pinned tolerances. Criteria 8 and 9 train the full pipeline on
//! the synthetic grating dataset end to end.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use temviro_core::featuremap::FeatureMap;
use temviro_core::imageio::Split;
use temviro_core::metrics;
use temviro_core::model::{ArchConfig, FusionMode};
use temviro_core::nn::gradcheck;
use temviro_core::nn::tape::Tape;
use temviro_core::nn::tensor::Tensor;
use temviro_core::preprocess::{dct2, idct2, local_std_filter, FilterSpec};
use temviro_core::threads;
use temviro_core::trainer::{self, synth, TrainConfig};

/// Serializes the tests that pin the worker count or hog both cores.
static HEAVY: Mutex<()> = Mutex::new(());

fn report(criterion: &str, failures: &[String]) {
    if failures.is_empty() {
        println!("[PASS] {criterion}");
    } else {
        println!("[FAIL] {criterion}: {}", failures.join("; "));
    }
    assert!(failures.is_empty(), "{criterion}: {}", failures.join("; "));
}

fn rand_map(rng: &mut Xoshiro256StarStar, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0))
}

/// Direct quadruple-loop evaluation of the 2D cosine-transform definition.
fn dct2_direct(img: &FeatureMap) -> FeatureMap {
    let (m_dim, n_dim) = (img.height(), img.width());
    let alpha = |i: usize, n: usize| -> f64 {
        if i == 0 {
            1.0 / (n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        }
    };
    FeatureMap::from_fn(m_dim, n_dim, |k, l| {
        let mut acc = 0.0;
        for m in 0..m_dim {
            for n in 0..n_dim {
                acc += img.get(m, n)
                    * ((k as f64) * std::f64::consts::PI * (2.0 * m as f64 + 1.0)
                        / (2.0 * m_dim as f64))
                        .cos()
                    * ((l as f64) * std::f64::consts::PI * (2.0 * n as f64 + 1.0)
                        / (2.0 * n_dim as f64))
                        .cos();
            }
        }
        alpha(k, m_dim) * alpha(l, n_dim) * acc
    })
}

#[test]
fn criterion_1_dct_correctness() {
    let mut failures = Vec::new();
    let mut rng = Xoshiro256StarStar::seed_from_u64(101);
    // Separable transform equals the direct definition on 200 random
    // matrices with sizes from 1x1 to 16x16, within 1e-9 absolute.
    for case in 0..200 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let img = rand_map(&mut rng, h, w);
        let fast = dct2(&img);
        let direct = dct2_direct(&img);
        let max_err = fast
            .values()
            .iter()
            .zip(direct.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if max_err > 1e-9 {
            failures.push(format!("case {case} ({h}x{w}): separable error {max_err:.2e}"));
            break;
        }
        // Parseval energy identity within 1e-9 relative.
        let e_img: f64 = img.values().iter().map(|v| v * v).sum();
        let e_coef: f64 = fast.values().iter().map(|v| v * v).sum();
        if e_img > 0.0 && ((e_img - e_coef).abs() / e_img) > 1e-9 {
            failures.push(format!(
                "case {case}: energy mismatch {} vs {}",
                e_img, e_coef
            ));
            break;
        }
    }
    // Round trip through the inverse on a 128x128 image, within 1e-9.
    let img = rand_map(&mut rng, 128, 128);
    let back = idct2(&dct2(&img));
    let max_err = back
        .values()
        .iter()
        .zip(img.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if max_err > 1e-9 {
        failures.push(format!("128x128 inverse round trip error {max_err:.2e}"));
    }
    report(
        "criterion 1: separable DCT vs direct definition, Parseval, inverse round trip",
        &failures,
    );
}

/// Reference filter: reflect indices arithmetically (no shared padding
/// code), then mean and population deviation per window.
fn std_filter_direct(img: &FeatureMap, ws: usize) -> FeatureMap {
    let k = (ws as isize - 1) / 2;
    let (h, w) = (img.height(), img.width());
    let fix = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i - 1) as usize
        } else if i as usize >= n {
            2 * n - 1 - i as usize
        } else {
            i as usize
        }
    };
    FeatureMap::from_fn(h, w, |r, c| {
        let mut vals = Vec::with_capacity(ws * ws);
        for u in -k..=k {
            for v in -k..=k {
                vals.push(img.get(fix(r as isize + u, h), fix(c as isize + v, w)));
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / vals.len() as f64).sqrt()
    })
}

#[test]
fn criterion_2_filter_correctness() {
    let mut failures = Vec::new();
    let mut rng = Xoshiro256StarStar::seed_from_u64(102);
    for case in 0..100 {
        let (h, w) = (rng.gen_range(5..=32), rng.gen_range(5..=32));
        let img = rand_map(&mut rng, h, w);
        for ws in [3usize, 5] {
            let got = local_std_filter(&img, FilterSpec::new(ws).unwrap()).unwrap();
            let want = std_filter_direct(&img, ws);
            let max_err = got
                .values()
                .iter()
                .zip(want.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if max_err > 1e-12 {
                failures.push(format!(
                    "case {case} ({h}x{w}, window {ws}): oracle error {max_err:.2e}"
                ));
            }
        }
    }
    // Constant images map to exactly zero.
    for value in [0.0, 0.1, 1.0 / 3.0, 0.9] {
        let img = FeatureMap::from_fn(9, 11, |_, _| value);
        let out = local_std_filter(&img, FilterSpec::default()).unwrap();
        if out.values().iter().any(|&v| v != 0.0) {
            failures.push(format!("constant image {value} did not map to exactly 0"));
        }
    }
    // Shift invariance and absolute-scale equivariance within 1e-12.
    let img = rand_map(&mut rng, 14, 14);
    let spec = FilterSpec::default();
    let base = local_std_filter(&img, spec).unwrap();
    for c in [1.5, -2.0, 7.25] {
        let shifted = FeatureMap::from_fn(14, 14, |r, cc| img.get(r, cc) + c);
        let out = local_std_filter(&shifted, spec).unwrap();
        let err = out
            .values()
            .iter()
            .zip(base.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if err > 1e-12 {
            failures.push(format!("shift by {c} moved the filter output by {err:.2e}"));
        }
        let scaled = FeatureMap::from_fn(14, 14, |r, cc| img.get(r, cc) * c);
        let out = local_std_filter(&scaled, spec).unwrap();
        let err = out
            .values()
            .iter()
            .zip(base.values())
            .map(|(a, b)| (a - c.abs() * b).abs())
            .fold(0.0, f64::max);
        if err > 1e-12 {
            failures.push(format!("scale by {c} broke |c|-equivariance by {err:.2e}"));
        }
    }
    report(
        "criterion 2: std filter vs brute-force oracle, zero on constants, shift/scale laws",
        &failures,
    );
}

#[test]
fn criterion_3_gradient_checks() {
    let mut failures = Vec::new();
    for check in gradcheck::run_all(&gradcheck::default_seeds()) {
        if !check.passed {
            failures.push(format!(
                "{}: max relative error {:.3e} (tolerance {:.0e})",
                check.layer,
                check.max_rel_error,
                gradcheck::FD_TOLERANCE
            ));
        }
    }
    report(
        "criterion 3: central-difference gradient checks for every layer type (10 seeds)",
        &failures,
    );
}

#[test]
fn criterion_4_shape_rules() {
    let mut failures = Vec::new();
    let mut rng = Xoshiro256StarStar::seed_from_u64(104);
    for _ in 0..50 {
        let m = rng.gen_range(3..40);
        let n = rng.gen_range(3..40);
        let s = if m.min(n) >= 3 { 3 } else { 1 };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, m, n]), false);
        let w = tape.leaf(Tensor::zeros(&[2, 1, s, s]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let y = tape.conv2d(x, w, b).unwrap();
        if tape.value(y).shape() != [1, 2, m - s + 1, n - s + 1] {
            failures.push(format!(
                "conv {m}x{n} kernel {s} gave {:?}",
                tape.value(y).shape()
            ));
        }
        let p = rng.gen_range(1..=3.min(m - s + 1).min(n - s + 1));
        let pooled = tape.maxpool2d(y, p).unwrap();
        if tape.value(pooled).shape() != [1, 2, (m - s + 1) / p, (n - s + 1) / p] {
            failures.push(format!(
                "pool {p} on {}x{} gave {:?}",
                m - s + 1,
                n - s + 1,
                tape.value(pooled).shape()
            ));
        }
    }
    // The worked floor-rule case: 7x7 pooled by 3 is 2x2.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 1, 7, 7]), false);
    let y = tape.maxpool2d(x, 3).unwrap();
    if tape.value(y).shape() != [1, 1, 2, 2] {
        failures.push(format!("7x7 pool 3 gave {:?}", tape.value(y).shape()));
    }
    report(
        "criterion 4: conv (m-s+1) and pool floor(m/p) shape rules across a size sweep",
        &failures,
    );
}

#[test]
fn criterion_5_metrics_identities() {
    let mut failures = Vec::new();
    // (a) 66 errors among 2576 samples is 97.44% accuracy (2 decimals).
    let mut counts = vec![0u64; 14 * 14];
    for c in 0..14 {
        counts[c * 14 + c] = 184;
    }
    // Move 66 samples of class 0 off the diagonal.
    counts[0] -= 66;
    counts[1] += 66;
    let names: Vec<String> = (0..14).map(|i| format!("c{i}")).collect();
    let cm = metrics::ConfusionMatrix::from_counts(counts, names).unwrap();
    let acc = metrics::accuracy(&cm).unwrap() * 100.0;
    if (acc - 97.44).abs() > 0.005 {
        failures.push(format!("accuracy {acc:.4} != 97.44 +- 0.005"));
    }
    // (b) Two reference per-class F1 identities.
    if (metrics::f1_score(96.57, 91.85) - 94.15).abs() > 0.005 {
        failures.push("F1(96.57, 91.85) != 94.15 +- 0.005".into());
    }
    if (metrics::f1_score(95.77, 98.37) - 97.05).abs() > 0.005 {
        failures.push("F1(95.77, 98.37) != 97.05 +- 0.005".into());
    }
    // (c) Macro mean of the 14 reference F1 values.
    let f1s = [
        98.35, 99.18, 97.85, 99.46, 94.15, 97.05, 96.24, 93.83, 97.53, 99.46, 100.0, 99.45,
        92.10, 99.46,
    ];
    let mean = f1s.iter().sum::<f64>() / 14.0;
    if (mean - 97.44).abs() > 0.005 {
        failures.push(format!("macro F1 {mean:.4} != 97.44 +- 0.005"));
    }
    // (d) Perfect diagonal has kappa exactly 1.
    let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
    let perfect =
        metrics::ConfusionMatrix::from_labels(&[0, 1, 2, 3], &[0, 1, 2, 3], &names).unwrap();
    if metrics::qwk(&perfect).unwrap() != 1.0 {
        failures.push("QWK of a perfect diagonal is not exactly 1.0".into());
    }
    // (e) KLD(uniform || one-hot, J=14) = ln 14 within 1e-9.
    let uniform = vec![1.0 / 14.0; 14];
    let target = metrics::one_hot(&[3], 14).unwrap();
    let k = metrics::kld(&uniform, &target, 14).unwrap();
    if (k - 14.0f64.ln()).abs() > 1e-9 {
        failures.push(format!("KLD {k} != ln 14 +- 1e-9"));
    }
    report(
        "criterion 5: reference metric identities (accuracy, F1, macro F1, QWK, KLD)",
        &failures,
    );
}

fn tiny_synth(dir: &std::path::Path, seed: u64) -> temviro_core::imageio::DatasetManifest {
    synth::generate(
        dir,
        &synth::SynthOptions {
            classes: 4,
            train_per_class: 12,
            test_per_class: 4,
            size: 128,
            seed,
        },
    )
    .unwrap()
}

#[test]
fn criterion_6_bitwise_deterministic_training() {
    let _guard = HEAVY.lock().unwrap();
    let mut failures = Vec::new();
    // Single-threaded f64 mode for the whole criterion.
    threads::set_thread_cap(1);
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let data = dir.path().join(format!("data_{tag}"));
        let manifest = tiny_synth(&data, 33);
        let mut cfg = TrainConfig::new(ArchConfig::compact(4));
        cfg.epochs = 3;
        cfg.batch_size = 16;
        cfg.seed = 5;
        let out = dir.path().join(format!("run_{tag}"));
        let outcome = trainer::train(&cfg, &manifest, &out).unwrap();
        (
            std::fs::read(&outcome.history_path).unwrap(),
            std::fs::read(&outcome.best_checkpoint).unwrap(),
            std::fs::read(&outcome.last_checkpoint).unwrap(),
        )
    };
    let a = run("a");
    let b = run("b");
    if a.0 != b.0 {
        failures.push("histories differ".into());
    }
    if a.1 != b.1 {
        failures.push("best checkpoints differ".into());
    }
    if a.2 != b.2 {
        failures.push("last checkpoints differ".into());
    }
    // Hand the default parallel mode back to the remaining tests.
    threads::set_thread_cap(
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    );
    report(
        "criterion 6: identical seeds give bitwise-identical histories and checkpoints",
        &failures,
    );
}

#[test]
fn criterion_7_checkpoint_round_trip() {
    let _guard = HEAVY.lock().unwrap();
    let mut failures = Vec::new();
    // Train briefly so running statistics and weights are non-trivial.
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_synth(&dir.path().join("data"), 44);
    let mut cfg = TrainConfig::new(ArchConfig::compact(4));
    cfg.epochs = 1;
    cfg.batch_size = 16;
    cfg.seed = 6;
    let outcome = trainer::train(&cfg, &manifest, &dir.path().join("run")).unwrap();
    let loaded = trainer::open_checkpoint(&outcome.best_checkpoint).unwrap();

    // Rebuild the reference model from the second (identical) checkpoint to
    // compare forward outputs bitwise on random probes.
    let reference = trainer::open_checkpoint(&outcome.last_checkpoint).unwrap();
    let mut rng = Xoshiro256StarStar::seed_from_u64(107);
    for probe in 0..10 {
        let data1: Vec<f64> = (0..128 * 128).map(|_| rng.gen_range(0.0..1.0)).collect();
        let data2: Vec<f64> = (0..128 * 128).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x1 = Tensor::from_vec(&[1, 1, 128, 128], data1).unwrap();
        let x2 = Tensor::from_vec(&[1, 1, 128, 128], data2).unwrap();
        let a = loaded.model.forward_fused(Some(&x1), Some(&x2)).unwrap();
        let b = reference.model.forward_fused(Some(&x1), Some(&x2)).unwrap();
        if a != b {
            failures.push(format!("probe {probe}: forward outputs differ"));
        }
    }
    report(
        "criterion 7: checkpoint save/load reproduces forward outputs bitwise on 10 probes",
        &failures,
    );
}

#[test]
fn criterion_8_and_9_synthetic_end_to_end() {
    let _guard = HEAVY.lock().unwrap();
    let mut failures8 = Vec::new();
    let mut failures9 = Vec::new();

    let dir = tempfile::tempdir().unwrap();
    let manifest = synth::generate(
        &dir.path().join("data"),
        &synth::SynthOptions {
            classes: 4,
            train_per_class: 200,
            test_per_class: 50,
            size: 128,
            seed: 2024,
        },
    )
    .unwrap();
    let cache = dir.path().join("cache");

    let seeds = [1u64, 2, 3];
    let modes = [
        FusionMode::Fused,
        FusionMode::Branch1Only,
        FusionMode::Branch2Only,
    ];
    let mut best = vec![vec![0.0f64; modes.len()]; seeds.len()];
    for (si, &seed) in seeds.iter().enumerate() {
        for (mi, &mode) in modes.iter().enumerate() {
            let mut arch = ArchConfig::compact(4);
            arch.mode = mode;
            let mut cfg = TrainConfig::new(arch);
            cfg.epochs = 10;
            cfg.batch_size = 32;
            cfg.seed = seed;
            cfg.cache_dir = Some(cache.clone());
            let out = dir.path().join(format!("run_{}_{}", mode.name(), seed));
            let outcome = trainer::train(&cfg, &manifest, &out).unwrap();
            let acc = outcome.history.best_record().unwrap().test.accuracy;
            best[si][mi] = acc;
            println!(
                "  seed {seed} mode {:<8} best test accuracy {:.4} @ epoch {}",
                mode.name(),
                acc,
                outcome.history.best_epoch
            );
        }
    }

    // A converged fused model labels a held-out exemplar with its class.
    if best[0][0] == 1.0 {
        let run = dir.path().join(format!("run_{}_{}", FusionMode::Fused.name(), seeds[0]));
        let ckpt = trainer::open_checkpoint(&run.join("best.tvck")).unwrap();
        let exemplar = manifest
            .records
            .iter()
            .find(|r| r.class_id == 0 && r.split == Split::Test)
            .unwrap();
        let (name, _) = trainer::predict(&ckpt, &exemplar.path).unwrap();
        assert_eq!(name, manifest.class_names[0]);
    }

    // Criterion 8: fused reaches >= 90% within the epoch budget for at
    // least 2 of the 3 fixed seeds.
    let fused_hits = best.iter().filter(|row| row[0] >= 0.90).count();
    if fused_hits < 2 {
        failures8.push(format!(
            "only {fused_hits} of 3 fused seeds reached 90% (accuracies {:?})",
            best.iter().map(|r| r[0]).collect::<Vec<_>>()
        ));
    }
    report(
        "criterion 8: fused model reaches 90% test accuracy for at least 2 of 3 seeds",
        &failures8,
    );

    // Criterion 9: fusion keeps pace with the better single branch
    // (within 2 percentage points) for the same seeds.
    for (si, &seed) in seeds.iter().enumerate() {
        let fused = best[si][0];
        let single = best[si][1].max(best[si][2]);
        if fused < single - 0.02 {
            failures9.push(format!(
                "seed {seed}: fused {fused:.4} trails best branch {single:.4} by more than 2pp"
            ));
        }
    }
    report(
        "criterion 9: fused accuracy within 2pp of the best single branch per seed",
        &failures9,
    );
}

#[test]
fn criterion_7b_mismatched_checkpoint_is_rejected() {
    // Companion to criterion 7: a checkpoint never silently misloads into a
    // different architecture or dataset.
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_synth(&dir.path().join("data"), 55);
    let mut cfg = TrainConfig::new(ArchConfig::compact(4));
    cfg.epochs = 1;
    cfg.batch_size = 16;
    let outcome = trainer::train(&cfg, &manifest, &dir.path().join("run")).unwrap();
    let ckpt = trainer::open_checkpoint(&outcome.best_checkpoint).unwrap();

    // Evaluating against a manifest with different class names fails.
    let other = tiny_synth(&dir.path().join("other"), 56);
    let mut renamed = other.clone();
    renamed.class_names = vec!["w".into(), "x".into(), "y".into(), "z".into()];
    assert!(trainer::evaluate(&ckpt, &renamed, Split::Test, None).is_err());
    println!("[PASS] criterion 7 companion: mismatched checkpoints are rejected loudly");
}
