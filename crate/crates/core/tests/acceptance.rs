//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line with the measured numbers.
//!
//! Criteria 4 and 5 are empirical claims about training outcomes. Their
//! verdict is always printed; it only fails the test when
//! `DB_ACCEPTANCE_STRICT=1` is set. Every other criterion is asserted.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use domain_balancing::dfi::{build_table, inter_class_compactness, DfiConfig};
use domain_balancing::eval::{
    per_domain_report, rank1_identification, tar_at_far, verification_accuracy, RandomEmbedder,
};
use domain_balancing::experiment::{
    build_dataset, build_pairs, dfi_report, init_state, run_ablation, run_ksweep, train, Arm,
    ExperimentConfig,
};
use domain_balancing::gradcheck::{run_gradcheck, GradcheckConfig, COMPONENTS};
use domain_balancing::losses::{
    cosface_forward, dbm_forward, softmax_forward, FeatureBatch, LossConfig, LossKind,
};
use domain_balancing::model::TrainState;
use domain_balancing::{Matrix, Rng};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const EMBED_DIM: usize = 64;

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn strict() -> bool {
    std::env::var("DB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1")
}

fn report(n: u32, ok: bool, detail: String) {
    println!("criterion {n}: {} {detail}", verdict(ok));
}

fn db() -> Command {
    Command::new(env!("CARGO_BIN_EXE_db"))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_1_gradient_suite() {
    let cfg = GradcheckConfig::default();
    let start = Instant::now();
    let mut worst = vec![0.0f64; COMPONENTS.len()];
    for seed in 0..20 {
        let r = run_gradcheck(&cfg, seed).unwrap();
        for (w, c) in worst.iter_mut().zip(&r.components) {
            *w = w.max(c.max_rel_error);
        }
    }
    let lib_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let status = db().args(["gradcheck", "--seeds", "20"]).output().unwrap();
    let cli_secs = start.elapsed().as_secs_f64();

    let max = worst.iter().cloned().fold(0.0, f64::max);
    let ok = max < 1e-5 && lib_secs < 10.0 && cli_secs < 10.0 && status.status.success();
    let per: Vec<String> = COMPONENTS
        .iter()
        .zip(&worst)
        .map(|(n, w)| format!("{n}={w:.2e}"))
        .collect();
    report(
        1,
        ok,
        format!(
            "max rel error {max:.2e} over 20 seeds [{}]; library {lib_secs:.2}s, cli {cli_secs:.2}s exit {:?}",
            per.join(" "),
            status.status.code()
        ),
    );
    assert!(ok);
}

fn random_instance(rng: &mut Rng) -> (FeatureBatch, Matrix, LossConfig) {
    let b = 1 + rng.below(16);
    let c = 2 + rng.below(20);
    let d = 2 + rng.below(16);
    let x = Matrix::seeded_gaussian(rng, b, d);
    let w = Matrix::seeded_gaussian(rng, c, d);
    let y = (0..b).map(|_| rng.below(c)).collect();
    let cfg = LossConfig {
        kind: LossKind::Dbm,
        scale_s: 1.0 + 63.0 * rng.uniform(),
        margin_m: 0.8 * rng.uniform(),
        lambda: 0.01,
    };
    (FeatureBatch::new(x, y, false).unwrap(), w, cfg)
}

#[test]
fn criterion_2_reduction_identities() {
    let mut rng = Rng::new(2024);
    let mut worst_cos: f64 = 0.0;
    let mut worst_soft: f64 = 0.0;
    for _ in 0..100 {
        let (batch, w, cfg) = random_instance(&mut rng);
        let ones = vec![1.0; w.rows()];
        let dbm = dbm_forward(&batch, &w, &ones, &cfg).unwrap();
        let cos = cosface_forward(&batch, &w, &cfg).unwrap();
        worst_cos = worst_cos
            .max((dbm.value - cos.value).abs())
            .max(max_abs_diff(
                dbm.grad_features.data(),
                cos.grad_features.data(),
            ))
            .max(max_abs_diff(
                dbm.grad_prototypes.data(),
                cos.grad_prototypes.data(),
            ));

        let beta: Vec<f64> = (0..w.rows()).map(|_| 3.0 * rng.uniform()).collect();
        let zero = LossConfig {
            margin_m: 0.0,
            ..cfg.clone()
        };
        let dbm0 = dbm_forward(&batch, &w, &beta, &zero).unwrap();
        let soft = softmax_forward(&batch, &w, &zero).unwrap();
        worst_soft = worst_soft
            .max((dbm0.value - soft.value).abs())
            .max(max_abs_diff(
                dbm0.grad_features.data(),
                soft.grad_features.data(),
            ))
            .max(max_abs_diff(
                dbm0.grad_prototypes.data(),
                soft.grad_prototypes.data(),
            ));
    }

    let base = ExperimentConfig::default();
    let ds = build_dataset(&base).unwrap();
    let mut unit = base.with_arm(Arm::Dbm);
    unit.model.dfi.fixed_beta = Some(1.0);
    let (_, h_dbm) = train(&unit, &ds).unwrap();
    let (_, h_cos) = train(&base.with_arm(Arm::Cosface), &ds).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    h_dbm.write_csv(&mut a).unwrap();
    h_cos.write_csv(&mut b).unwrap();
    let identical = a == b;

    let ok = worst_cos <= 1e-12 && worst_soft <= 1e-12 && identical;
    report(
        2,
        ok,
        format!(
            "unit-beta vs cosine margin {worst_cos:.1e}, zero-margin vs softmax {worst_soft:.1e} over 100 instances; \
             unit-table history identical to cosface: {identical} ({} bytes)",
            a.len()
        ),
    );
    assert!(ok);
}

/// 50 classes at mutual cosine 0.9 and 5 at mutual cosine 0.1, in disjoint
/// subspaces, each row slightly jittered.
fn two_cluster_layout(rng: &mut Rng) -> (Matrix, usize) {
    let (tight, sparse) = (50, 5);
    let dim = 2 + tight + sparse;
    let mut rows = Vec::new();
    for i in 0..tight {
        let mut r = vec![0.0; dim];
        r[0] = 0.9f64.sqrt();
        r[2 + i] = 0.1f64.sqrt();
        rows.push(r);
    }
    for j in 0..sparse {
        let mut r = vec![0.0; dim];
        r[1] = 0.1f64.sqrt();
        r[2 + tight + j] = 0.9f64.sqrt();
        rows.push(r);
    }
    for r in &mut rows {
        for v in r.iter_mut() {
            *v += 0.01 * rng.gaussian();
        }
    }
    (
        Matrix::from_rows(&rows)
            .unwrap()
            .l2_normalize_rows()
            .unwrap(),
        tight,
    )
}

#[test]
fn criterion_3_dfi_structure() {
    let mut rng = Rng::new(33);
    let cfg = DfiConfig {
        k_neighbors: 4,
        ..DfiConfig::default()
    };
    let (protos, tight) = two_cluster_layout(&mut rng);
    let table = build_table(&protos, &cfg, 0).unwrap();
    let max_head = table.beta[..tight].iter().cloned().fold(f64::MIN, f64::max);
    let min_tail = table.beta[tight..].iter().cloned().fold(f64::MAX, f64::min);
    let separated = min_tail > max_head;

    let mut monotone_trials = 0;
    let mut worst_product: f64 = 0.0;
    for _ in 0..100 {
        let c = 5 + rng.below(116);
        let scale_s = DfiConfig::default().scale_s;
        let p = Matrix::seeded_gaussian(&mut rng, c, EMBED_DIM)
            .l2_normalize_rows()
            .unwrap();
        let mut monotone = true;
        for class in 0..c {
            let mut prev = f64::NEG_INFINITY;
            for k in 1..c {
                let kc = DfiConfig {
                    k_neighbors: k,
                    scale_s,
                    ..DfiConfig::default()
                };
                let ic = inter_class_compactness(&p, class, &kc).unwrap();
                monotone &= ic > prev;
                prev = ic;
            }
        }
        monotone_trials += monotone as usize;
        let kc = DfiConfig {
            k_neighbors: c - 1,
            scale_s,
            ..DfiConfig::default()
        };
        if let Ok(t) = build_table(&p, &kc, 0) {
            for (b, ic) in t.beta.iter().zip(&t.ic) {
                worst_product = worst_product.max((b * ic - kc.epsilon).abs());
            }
        }
    }
    for (b, ic) in table.beta.iter().zip(&table.ic) {
        worst_product = worst_product.max((b * ic - cfg.epsilon).abs());
    }

    let ok = separated && monotone_trials == 100 && worst_product <= 1e-12;
    report(
        3,
        ok,
        format!(
            "two-cluster min sparse beta {min_tail:.4} vs max tight beta {max_head:.4}; \
             IC strictly increasing in K on {monotone_trials}/100 layouts; max |beta*IC - eps| {worst_product:.1e}"
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_4_frequency_tracks_domain() {
    let start = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        }
        .with_arm(Arm::Full);
        let ds = build_dataset(&cfg).unwrap();
        let (state, _) = train(&cfg, &ds).unwrap();
        let r = dfi_report(&state, &cfg.model.dfi, Some(&ds)).unwrap();
        let (head, tail) = (r.head_mean_beta().unwrap(), r.tail_mean_beta().unwrap());
        wins += (tail > head) as usize;
        lines.push(format!("seed {seed}: tail {tail:.4} head {head:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = wins >= 4 && secs < 300.0;
    report(
        4,
        ok,
        format!(
            "tail mean beta > head mean beta in {wins}/5 seeds ({}); {secs:.1}s",
            lines.join(", ")
        ),
    );
    if strict() {
        assert!(ok);
    }
}

#[test]
fn criterion_5_ablation_direction() {
    let arms = [Arm::Cosface, Arm::RbmOnly, Arm::RbmNoGate, Arm::Full];
    let mut mean = [0.0f64; 4];
    let (mut head_gain, mut tail_gain) = (0.0, 0.0);
    for seed in SEEDS {
        let base = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let table = run_ablation(&base, &arms, |_, _| {}).unwrap();
        let tail = table.num_domains - 1;
        for (m, arm) in mean.iter_mut().zip(arms) {
            *m += table.row(arm).unwrap().mean_domain_acc().unwrap() / SEEDS.len() as f64;
        }
        let full = table.row(Arm::Full).unwrap();
        let cos = table.row(Arm::Cosface).unwrap();
        head_gain +=
            (full.domain_acc(0).unwrap() - cos.domain_acc(0).unwrap()) / SEEDS.len() as f64;
        tail_gain +=
            (full.domain_acc(tail).unwrap() - cos.domain_acc(tail).unwrap()) / SEEDS.len() as f64;
    }
    let [cosface, rbm_only, rbm_no_gate, full] = mean;
    let a = full >= cosface;
    let b = tail_gain >= head_gain;
    let c = rbm_no_gate <= rbm_only;
    let ok = a && b && c;
    report(
        5,
        ok,
        format!(
            "(a) {} full - cosface = {:+.4}; (b) {} tail gain {tail_gain:+.4} vs head gain {head_gain:+.4}; \
             (c) {} rbm_only - rbm_no_gate = {:+.4}  [means: cosface {cosface:.4} rbm_only {rbm_only:.4} \
             rbm_no_gate {rbm_no_gate:.4} full {full:.4}]",
            verdict(a),
            full - cosface,
            verdict(b),
            verdict(c),
            rbm_only - rbm_no_gate
        ),
    );
    if strict() {
        assert!(ok);
    }
}

#[test]
fn criterion_6_k_sweep() {
    let start = Instant::now();
    let base = ExperimentConfig::default();
    let table = run_ksweep(&base, &[]).unwrap();
    let ks: Vec<usize> = table.rows.iter().map(|r| r.k).collect();
    let c = build_dataset(&base).unwrap().num_classes();
    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    let csv_rows = String::from_utf8(csv).unwrap().lines().count() - 1;
    let ordered = table.rows.iter().all(|r| r.ic_strictly_increasing);
    let ic_rises = table.rows.windows(2).all(|w| w[1].mean_ic > w[0].mean_ic);
    let ok = ks == vec![10, 100, c - 1] && csv_rows == 3 && ordered;
    let cells: Vec<String> = table
        .rows
        .iter()
        .map(|r| {
            format!(
                "K={} mean IC {:.3} acc {:.4}",
                r.k, r.mean_ic, r.mean_domain_verif_acc
            )
        })
        .collect();
    report(
        6,
        ok,
        format!(
            "sweep over {ks:?} (C={c}) emitted {csv_rows} rows; per-class IC strictly increasing at every K: {ordered}; \
             mean IC rising across runs: {ic_rises}; {}; {:.1}s",
            cells.join(", "),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(ok);
}

fn run_pipeline(dir: &Path, cfg_json: &str) {
    fs::write(dir.join("config.json"), cfg_json).unwrap();
    for args in [
        vec!["--config", "config.json", "generate"],
        vec!["--config", "config.json", "train"],
        vec!["--config", "config.json", "eval"],
        vec![
            "--config",
            "config.json",
            "dfi-report",
            "--dataset",
            "out/dataset.dbds",
        ],
    ] {
        let out = db().current_dir(dir).args(&args).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn resume_matches(cfg: &ExperimentConfig) -> (bool, bool) {
    let ds = build_dataset(cfg).unwrap();
    let resolved = cfg.resolved().unwrap();
    let set = ds.training_set();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("mid.dbck");

    let rows: Vec<usize> = (0..resolved.optim.batch_size).collect();
    let x = set.inputs.select_rows(&rows);
    let y: Vec<usize> = rows.iter().map(|&i| set.labels[i]).collect();
    let lr = resolved.optim.lr;
    let mut straight = init_state(cfg).unwrap();
    straight.train_step(&x, &y, &resolved.optim, lr).unwrap();
    straight.train_step(&x, &y, &resolved.optim, lr).unwrap();
    let mut split = init_state(cfg).unwrap();
    split.train_step(&x, &y, &resolved.optim, lr).unwrap();
    split.save_checkpoint(&ckpt).unwrap();
    let mut split = TrainState::load_checkpoint(&ckpt).unwrap();
    split.train_step(&x, &y, &resolved.optim, lr).unwrap();
    let steps_equal = straight == split;

    let mut optim = resolved.optim.clone();
    optim.epochs = 4;
    let mut full = init_state(cfg).unwrap();
    let h_full = full.fit(&set, &optim, |_| {}).unwrap();
    let mut half = init_state(cfg).unwrap();
    let mut first = optim.clone();
    first.epochs = 2;
    let mut h_half = half.fit(&set, &first, |_| {}).unwrap();
    half.save_checkpoint(&ckpt).unwrap();
    let mut resumed = TrainState::load_checkpoint(&ckpt).unwrap();
    h_half
        .epochs
        .extend(resumed.fit(&set, &optim, |_| {}).unwrap().epochs);
    let epochs_equal = full == resumed && h_full == h_half;
    (steps_equal, epochs_equal)
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let cfg_json = serde_json::to_string_pretty(&ExperimentConfig {
        seed: 7,
        ..ExperimentConfig::default()
    })
    .unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path(), &cfg_json);
    run_pipeline(b.path(), &cfg_json);
    let files = [
        "dataset.dbds",
        "pairs.csv",
        "checkpoint.dbck",
        "history.csv",
        "metrics.json",
        "per_domain.csv",
        "dfi.csv",
        "dfi.json",
        "resolved_config.json",
    ];
    let mut differing = Vec::new();
    let mut bytes = 0;
    for f in files {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        bytes += x.len();
        if x != y {
            differing.push(f);
        }
    }
    let (steps_equal, epochs_equal) = resume_matches(&ExperimentConfig::default());
    let ok = differing.is_empty() && steps_equal && epochs_equal;
    report(
        7,
        ok,
        format!(
            "{} artifacts ({bytes} bytes) identical across runs, differing {differing:?}; \
             resume after 1 of 2 steps exact: {steps_equal}; resume after 2 of 4 epochs exact: {epochs_equal}",
            files.len() - differing.len()
        ),
    );
    assert!(ok);
}

fn brute_force_accuracy(sims: &[f64], same: &[bool]) -> f64 {
    let mut candidates = vec![f64::NEG_INFINITY, f64::INFINITY];
    candidates.extend_from_slice(sims);
    candidates
        .iter()
        .map(|&t| {
            sims.iter()
                .zip(same)
                .filter(|(&s, &y)| (s >= t) == y)
                .count()
        })
        .max()
        .unwrap() as f64
        / sims.len() as f64
}

fn tar_oracle(pos: &[f64], neg: &[f64], far: f64) -> f64 {
    // Highest acceptance rate over thresholds whose false accepts stay within budget.
    let budget = (far * neg.len() as f64).floor() as usize;
    let mut candidates: Vec<f64> = pos.iter().chain(neg).cloned().collect();
    candidates.push(f64::INFINITY);
    candidates
        .iter()
        .filter(|&&t| neg.iter().filter(|&&n| n >= t).count() <= budget)
        .map(|&t| pos.iter().filter(|&&p| p >= t).count() as f64 / pos.len() as f64)
        .fold(0.0, f64::max)
}

#[test]
fn criterion_8_metric_correctness() {
    let mut rng = Rng::new(88);
    let mut sweep_mismatch = 0;
    for _ in 0..1000 {
        let levels = 2 + rng.below(10);
        let sims: Vec<f64> = (0..20)
            .map(|_| rng.below(levels) as f64 / levels as f64 - 0.5)
            .collect();
        let same: Vec<bool> = (0..20).map(|_| rng.uniform() < 0.5).collect();
        let (acc, _) = verification_accuracy(&sims, &same).unwrap();
        if (acc - brute_force_accuracy(&sims, &same)).abs() > 1e-12 {
            sweep_mismatch += 1;
        }
    }

    let mut tar_mismatch = 0;
    for _ in 0..200 {
        let pos: Vec<f64> = (0..50).map(|_| (rng.below(20) as f64) / 20.0).collect();
        let neg: Vec<f64> = (0..400)
            .map(|_| (rng.below(20) as f64) / 20.0 - 0.3)
            .collect();
        for r in tar_at_far(&pos, &neg, &[1e-2, 5e-2]) {
            if (r.tar.unwrap() - tar_oracle(&pos, &neg, r.far)).abs() > 1e-12 {
                tar_mismatch += 1;
            }
        }
    }

    let gallery = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]).unwrap();
    let gallery_labels = [0, 1, 2, 3];
    let probes =
        Matrix::from_rows(&[[0.9, 0.1], [0.1, 0.9], [0.2, -0.9], [-0.5, 0.6], [1.0, 1.0]]).unwrap();
    let probe_labels = [0, 1, 3, 2, 0];
    // Nearest gallery rows: 0, 1, 3, 1 and a tie between 0 and 1 broken towards 0.
    let rank1 = rank1_identification(&probes, &probe_labels, &gallery, &gallery_labels).unwrap();
    let rank1_ok = (rank1 - 0.8).abs() < 1e-12;

    let mut random = Vec::new();
    for seed in SEEDS {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        let pairs = build_pairs(&cfg, &ds).unwrap();
        let model = RandomEmbedder {
            seed,
            dim: EMBED_DIM,
        };
        random.push(
            per_domain_report(&model, &ds, &pairs, &cfg.eval.far_levels)
                .unwrap()
                .overall_verif_acc,
        );
    }
    let random_mean = random.iter().sum::<f64>() / random.len() as f64;
    let random_ok = (random_mean - 0.5).abs() <= 0.05;

    let ok = sweep_mismatch == 0 && tar_mismatch == 0 && rank1_ok && random_ok;
    report(
        8,
        ok,
        format!(
            "threshold sweep mismatches {sweep_mismatch}/1000; TAR@FAR mismatches {tar_mismatch}/400; rank-1 {rank1} \
             (oracle 0.8); random-model accuracy mean {random_mean:.4} over 5 seeds {random:.4?}"
        ),
    );
    assert!(ok);
}
