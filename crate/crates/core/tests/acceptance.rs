//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero when a gating criterion fails. Criteria 5 and 7 are trend
//! reports: their outcome is printed but does not gate.
//!
//! `EMP_CIFAR_DIR` points at an extracted `cifar-10-batches-bin` directory;
//! without it the CIFAR-10 run and the canonical-file check are skipped.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use emp_core::cli::{probe_encoder, run_ablation, summarize_ablation, Prepared};
use emp_core::config::{DatasetConfig, DatasetKind, RunConfig, SyntheticConfig};
use emp_core::data::{encode_cifar, load_cifar, parse_cifar, CifarVariant, DataError};
use emp_core::encoder::EncoderConfig;
use emp_core::eval::{knn_eval, linear_probe, FeatureTable, ProbeConfig, Provenance};
use emp_core::linalg::Matrix;
use emp_core::losses::{invariance, invariance_grad, tcr, tcr_grad, tcr_via, GramSide, PatchProjections, TcrParams};
use emp_core::nn::rel_error;
use emp_core::rng::Rng;
use emp_core::trainer::{emp_grad_check, train, GradCheckConfig, TrainConfig, TrainOptions};

mod common;
use common::{binomial_p_value, knn_brute, random_rows, unit_columns};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Criterion {
    id: u32,
    name: &'static str,
    gating: bool,
    run: fn() -> Outcome,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn within(outcome: Outcome, elapsed: Duration, limit: Duration) -> Outcome {
    match outcome {
        Outcome::Pass(d) if elapsed > limit => Outcome::Fail(format!("{d}; took {elapsed:.1?} > {limit:?}")),
        other => other,
    }
}

// Shared setup of the toy-scale training criteria: toy encoder on the
// 8-class texture dataset, 16 px crops fed at 16 px, batch 64.
const TOY_BATCH: usize = 64;

fn toy_config(seed: u64, n_patches: usize, batch_size: usize, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::synthetic(seed);
    cfg.deterministic = true;
    cfg.dataset = DatasetConfig::synthetic(SyntheticConfig {
        classes: 8,
        per_class: 128,
        test_per_class: 64,
        size: 32,
        seed: 7,
    });
    cfg.encoder.preset = Some("toy".into());
    let d = EncoderConfig::toy().projector.output;
    cfg.train = TrainConfig {
        n_patches,
        batch_size,
        steps: Some(steps),
        patch_size: 16,
        out_size: 16,
        // 0.3 collapses the toy network within the first few steps and 0.03
        // leaves it near its random-init features
        lr0: 0.1,
        loss: TcrParams {
            lambda: TcrParams::balanced_lambda(d, batch_size, 0.2),
            ..TcrParams::default()
        },
        seed,
        deterministic: true,
        ..TrainConfig::default()
    };
    cfg.eval.m_eval = 16;
    cfg
}

fn prepared(cfg: &RunConfig) -> Prepared {
    emp_core::cli::prepare(cfg).expect("valid acceptance config")
}

fn c1_gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = 1 + rng.below(16);
        let b = 1 + rng.below(16);
        let n = 2 + rng.below(3);
        let z = unit_columns(d, b, &mut rng);
        let g = tcr_grad(&z, 0.2).unwrap();
        let mats: Vec<Matrix> = (0..n).map(|_| unit_columns(d, b, &mut rng)).collect();
        let inv_g = invariance_grad(&PatchProjections::from_matrices(mats.clone()).unwrap());
        let inv = |m: &[Matrix]| invariance(&PatchProjections::from_matrices(m.to_vec()).unwrap());
        for r in 0..d {
            for c in 0..b {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp.set(r, c, z.get(r, c) + h);
                zm.set(r, c, z.get(r, c) - h);
                let fd = (tcr(&zp, 0.2).unwrap() - tcr(&zm, 0.2).unwrap()) / (2.0 * h);
                worst = worst.max(rel_error(g.get(r, c), fd));
                for i in 0..n {
                    let (mut p, mut m) = (mats.clone(), mats.clone());
                    p[i].set(r, c, mats[i].get(r, c) + h);
                    m[i].set(r, c, mats[i].get(r, c) - h);
                    let fd = (inv(&p) - inv(&m)) / (2.0 * h);
                    worst = worst.max(rel_error(inv_g[i].get(r, c), fd));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    within(
        check(worst <= 1e-6, format!("max rel error {worst:.2e} over 20 instances")),
        elapsed,
        Duration::from_secs(5),
    )
}

fn c2_logdet_duality() -> Outcome {
    let mut rng = Rng::new(102);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let d = 1 + rng.below(24);
        let b = 1 + rng.below(24);
        let z = if i % 2 == 0 {
            unit_columns(d, b, &mut rng)
        } else {
            // rank ≤ 2 plus a 1e-7 perturbation, columns renormalized
            let basis = unit_columns(d, 2, &mut rng);
            let mut m = Matrix::from_fn(d, b, |r, c| {
                basis.get(r, 0) * ((c + 1) as f64).cos() + basis.get(r, 1) * ((c + 1) as f64).sin()
            });
            for v in m.as_mut_slice() {
                *v += 1e-7 * rng.normal();
            }
            for c in 0..b {
                let norm = m.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
                for r in 0..d {
                    let v = m.get(r, c) / norm;
                    m.set(r, c, v);
                }
            }
            m
        };
        let f = tcr_via(&z, 0.2, GramSide::Feature).unwrap();
        let s = tcr_via(&z, 0.2, GramSide::Sample).unwrap();
        worst = worst.max((f - s).abs());
    }
    check(worst <= 1e-9, format!("max |R_dxd - R_bxb| = {worst:.2e} over 100 matrices"))
}

fn c3_end_to_end_gradcheck() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        n_patches: 3,
        batch_size: 4,
        size: 16,
        ..GradCheckConfig::default()
    };
    let report = match emp_grad_check(&EncoderConfig::desk(), &TcrParams::default(), &cfg) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let checked: usize = report.blocks.iter().map(|b| b.checked).sum();
    let max = report.max_rel_error();
    within(
        check(
            max <= 1e-4,
            format!("desk encoder, {} blocks, {checked} entries, max rel error {max:.2e}", report.blocks.len()),
        ),
        start.elapsed(),
        Duration::from_secs(120),
    )
}

fn c4_collapse_diagnostic() -> Outcome {
    let steps = 200;
    let d = EncoderConfig::toy().projector.output as f64;
    let final_rank = |tcr_weight: f64| {
        let mut cfg = toy_config(1, 8, TOY_BATCH, steps);
        cfg.train.loss.tcr_weight = tcr_weight;
        let prep = prepared(&cfg);
        let out = train(&prep.cfg.train, &prep.train, &prep.encoder, prep.norm, &TrainOptions::default()).unwrap();
        out.metrics.last().unwrap().effective_rank
    };
    let inv_only = final_rank(0.0);
    let full = final_rank(1.0);
    check(
        inv_only <= 3.0 && full >= 0.25 * d,
        format!("invariance only: rank {inv_only:.2} (<= 3); full objective: rank {full:.2} (>= {:.0})", 0.25 * d),
    )
}

fn c5_patch_count_trend() -> Outcome {
    let start = Instant::now();
    let ns = [2, 8, 32];
    let prep = prepared(&toy_config(1, 2, TOY_BATCH, 300));
    let runs = run_ablation(&prep, &ns, &[TOY_BATCH], &[1, 2, 3], None, |r| {
        println!("    n={:<2} seed {}: probe {:.4}, rank {:.2}", r.n_patches, r.seed, r.probe_accuracy, r.final_rank)
    })
    .unwrap();
    let means: Vec<f64> = summarize_ablation(&runs).iter().map(|c| c.3).collect();
    let ok = means.windows(2).all(|w| w[1] >= w[0] - 0.01);
    let detail = ns
        .iter()
        .zip(&means)
        .map(|(n, a)| format!("n={n}: {:.1}%", 100.0 * a))
        .collect::<Vec<_>>()
        .join(", ");
    within(
        check(ok, format!("mean probe accuracy over 3 seeds: {detail}")),
        start.elapsed(),
        Duration::from_secs(20 * 60),
    )
}

fn cifar_dir() -> Option<PathBuf> {
    std::env::var_os("EMP_CIFAR_DIR").map(PathBuf::from)
}

fn c6_one_pass_cifar() -> Outcome {
    let Some(dir) = cifar_dir() else {
        return Outcome::Skip("EMP_CIFAR_DIR not set".into());
    };
    let start = Instant::now();
    let mut cfg = RunConfig::synthetic(0);
    cfg.deterministic = true;
    cfg.dataset = DatasetConfig {
        kind: DatasetKind::Cifar10,
        train_paths: vec![dir.join("data_batch_1.bin")],
        test_paths: vec![dir.join("test_batch.bin")],
        train_limit: Some(10_000),
        test_limit: Some(2_000),
        synthetic: SyntheticConfig::default(),
        norm: None,
    };
    cfg.train.n_patches = 16;
    cfg.train.epochs = 1;
    cfg.train.deterministic = true;
    let prep = match emp_core::cli::prepare(&cfg) {
        Ok(p) => p,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let out = train(&prep.cfg.train, &prep.train, &prep.encoder, prep.norm, &TrainOptions::default()).unwrap();
    let acc = probe_encoder(&prep, &out.encoder).unwrap().test_accuracy;
    within(
        check(acc >= 0.35, format!("one epoch, 10k images: probe accuracy {:.1}%", 100.0 * acc)),
        start.elapsed(),
        Duration::from_secs(45 * 60),
    )
}

fn c7_batch_size() -> Outcome {
    let steps = 300;
    let acc = |b: usize| {
        let prep = prepared(&toy_config(1, 8, b, steps));
        let out = train(&prep.cfg.train, &prep.train, &prep.encoder, prep.norm, &TrainOptions::default()).unwrap();
        probe_encoder(&prep, &out.encoder).unwrap().test_accuracy
    };
    let (small, large) = (acc(50), acc(200));
    let gap = (small - large).abs();
    check(
        gap <= 0.03,
        format!(
            "{steps} steps: b=50 {:.1}%, b=200 {:.1}%, gap {:.1} pp",
            100.0 * small,
            100.0 * large,
            100.0 * gap
        ),
    )
}

fn c8_determinism() -> Outcome {
    let mut cfg = toy_config(4, 4, 32, 0);
    cfg.dataset.synthetic.per_class = 16;
    cfg.train.steps = None;
    cfg.train.epochs = 2;
    let prep = prepared(&cfg);
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut files = Vec::new();
    for d in &dirs {
        let opts = TrainOptions {
            out_dir: Some(d.path().to_path_buf()),
            sidecar: Some(prep.cfg.to_toml()),
            record_projections: false,
        };
        files = train(&prep.cfg.train, &prep.train, &prep.encoder, prep.norm, &opts)
            .unwrap()
            .checkpoints
            .iter()
            .map(|p| p.strip_prefix(d.path()).unwrap().to_path_buf())
            .collect();
    }
    files.push("metrics.csv".into());
    let differing: Vec<String> = files
        .iter()
        .filter(|f| std::fs::read(dirs[0].path().join(f)).unwrap() != std::fs::read(dirs[1].path().join(f)).unwrap())
        .map(|f| f.display().to_string())
        .collect();
    check(
        differing.is_empty(),
        format!("{} files compared, differing: {differing:?}", files.len()),
    )
}

fn c9_data_layer() -> Outcome {
    // two hand-built records
    let mut bytes = Vec::new();
    for (label, seed) in [(3u8, 5u32), (9u8, 11u32)] {
        bytes.push(label);
        bytes.extend((0..3072u32).map(|i| ((i * seed + label as u32) % 256) as u8));
    }
    let ds = match parse_cifar(&bytes, CifarVariant::Cifar10) {
        Ok(ds) => ds,
        Err(e) => return Outcome::Fail(format!("fixture rejected: {e}")),
    };
    let exact = ds.labels == [3, 9]
        && ds.images.iter().zip([(3u32, 5u32), (9, 11)]).all(|(img, (label, seed))| {
            img.data()
                .iter()
                .enumerate()
                .all(|(i, &v)| v == ((i as u32 * seed + label) % 256) as f32 / 255.0)
        })
        && ds.images[0].get(1, 0, 0) == ((1024 * 5 + 3) % 256) as f32 / 255.0;
    let truncated = matches!(
        parse_cifar(&bytes[..bytes.len() - 1], CifarVariant::Cifar10),
        Err(DataError::TruncatedFile { .. })
    );
    let roundtrip = encode_cifar(&ds, CifarVariant::Cifar10).map(|b| b == bytes).unwrap_or(false);
    let mut detail = format!("fixture exact: {exact}, truncated rejected: {truncated}, re-encode identical: {roundtrip}");
    let mut ok = exact && truncated && roundtrip;
    if let Some(dir) = cifar_dir() {
        match load_cifar(&dir.join("data_batch_1.bin"), CifarVariant::Cifar10) {
            Ok(ds) => {
                detail.push_str(&format!(", data_batch_1.bin: {} records", ds.len()));
                ok &= ds.len() == 10_000;
            }
            Err(e) => {
                detail.push_str(&format!(", data_batch_1.bin: {e}"));
                ok = false;
            }
        }
    } else {
        detail.push_str(", canonical file not supplied");
    }
    check(ok, detail)
}

fn table(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> FeatureTable {
    FeatureTable::new(Matrix::from_rows(&rows).unwrap(), labels, Provenance::default()).unwrap()
}

fn c10_eval_oracles() -> Outcome {
    let mut rng = Rng::new(110);
    let mut knn_ok = true;
    for _ in 0..40 {
        let n_train = 1 + rng.below(150);
        let n_test = 1 + rng.below(200 - n_train);
        let d = 1 + rng.below(8);
        let classes = 1 + rng.below(6);
        let k = 1 + rng.below(n_train.min(30));
        let train = random_rows(n_train, d, &mut rng);
        let test = random_rows(n_test, d, &mut rng);
        let ty: Vec<usize> = (0..n_train).map(|i| if i == 0 { classes - 1 } else { rng.below(classes) }).collect();
        let qy: Vec<usize> = (0..n_test).map(|_| rng.below(classes)).collect();
        let ours = knn_eval(&table(train.clone(), ty.clone()), &table(test.clone(), qy.clone()), k).unwrap();
        knn_ok &= ours == knn_brute(&train, &ty, &test, &qy, k);
    }

    let classes = 4;
    let centers = random_rows(classes, 12, &mut rng);
    let sample = |n: usize, shuffle: bool, rng: &mut Rng| {
        let rows = (0..n)
            .map(|i| centers[i % classes].iter().map(|c| 5.0 * c + 0.5 * rng.normal()).collect())
            .collect();
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        if shuffle {
            rng.shuffle(&mut labels);
        }
        table(rows, labels)
    };
    let cfg = ProbeConfig::default();
    let sep = linear_probe(&sample(400, false, &mut rng), &sample(400, false, &mut rng), &cfg).unwrap();
    let test = sample(400, true, &mut rng);
    let perm = linear_probe(&sample(400, true, &mut rng), &test, &cfg).unwrap();
    let correct = (perm.test_accuracy * test.len() as f64).round() as usize;
    let p = binomial_p_value(correct, test.len(), 1.0 / classes as f64);
    check(
        knn_ok && sep.test_accuracy >= 0.99 && p > 0.01,
        format!(
            "knn == brute force on 40 instances: {knn_ok}; separable probe {:.1}%; permuted labels {:.1}% (binomial p {p:.3})",
            100.0 * sep.test_accuracy,
            100.0 * perm.test_accuracy
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; a name filter
    // limits the run to criteria whose number or name contains it.
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria = [
        Criterion { id: 1, name: "gradient oracle", gating: true, run: c1_gradient_oracle },
        Criterion { id: 2, name: "log-det duality", gating: true, run: c2_logdet_duality },
        Criterion { id: 3, name: "end-to-end gradient check", gating: true, run: c3_end_to_end_gradcheck },
        Criterion { id: 4, name: "collapse diagnostic", gating: true, run: c4_collapse_diagnostic },
        Criterion { id: 5, name: "patch-count trend", gating: true, run: c5_patch_count_trend },
        Criterion { id: 6, name: "one-pass CIFAR-10", gating: true, run: c6_one_pass_cifar },
        Criterion { id: 7, name: "batch-size insensitivity", gating: false, run: c7_batch_size },
        Criterion { id: 8, name: "determinism", gating: true, run: c8_determinism },
        Criterion { id: 9, name: "data layer", gating: true, run: c9_data_layer },
        Criterion { id: 10, name: "evaluation oracles", gating: true, run: c10_eval_oracles },
    ];
    let mut gating_failures = 0;
    for c in &criteria {
        if let Some(f) = &filter {
            let hit = match f.parse::<u32>() {
                Ok(id) => id == c.id,
                Err(_) => c.name.contains(f.as_str()),
            };
            if !hit {
                continue;
            }
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                if c.gating {
                    gating_failures += 1;
                }
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        let note = if c.gating { "" } else { " [report only]" };
        println!("criterion {:>2} {tag} {}{note}: {detail} ({secs:.1}s)", c.id, c.name);
    }
    if gating_failures > 0 {
        println!("{gating_failures} gating criteria failed");
        std::process::exit(1);
    }
}
