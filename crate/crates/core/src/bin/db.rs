use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use domain_balancing::dfi::DfiConfig;
use domain_balancing::experiment::{
    build_dataset, build_pairs, dfi_report, evaluate, init_state, run_ablation, run_ksweep, Arm,
    ExperimentConfig,
};
use domain_balancing::gradcheck::{run_gradcheck, GradcheckConfig, COMPONENTS};
use domain_balancing::model::TrainState;
use domain_balancing::synth::{PairList, SyntheticDataset};
use domain_balancing::{Error, Result};

/// Domain balancing training and evaluation toolkit.
///
/// Exit codes: 0 success, 1 usage or configuration error, 2 IO or file
/// format error, 3 numerical failure (including a failed gradient check).
#[derive(Parser)]
#[command(name = "db", version)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configuration's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and verification pairs.
    Generate,
    /// Train one arm on a generated dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Overrides the configuration's arm.
        #[arg(long)]
        arm: Option<Arm>,
    },
    /// Evaluate a checkpoint on the held-out pairs.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Per-class compactness and frequency values of a checkpoint.
    DfiReport {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Joins against this dataset's domain ids.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        /// Offset added to analytic gradients (negative control).
        #[arg(long, hide = true)]
        perturb: Option<f64>,
    },
    /// Train and evaluate every arm on one dataset.
    Ablation {
        /// Comma-separated subset of arms.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<Arm>,
    },
    /// Train the configured arm once per neighbour count.
    Ksweep {
        /// Comma-separated neighbour counts; default 10, 100 and C-1.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("--config <file> is required".into()))?;
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &cli.out {
            cfg.output_dir = out.display().to_string();
        }
        let out = PathBuf::from(&cfg.output_dir);
        fs::create_dir_all(&out)?;
        Ok(Ctx { cfg, out })
    }

    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn echo_config(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        write_json(&dir.join("resolved_config.json"), &cfg.resolved()?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::Gradcheck {
        seeds,
        batch,
        classes,
        dim,
        hidden,
        perturb,
    } = &cli.command
    {
        let mut gc = GradcheckConfig::default();
        gc.batch = batch.unwrap_or(gc.batch);
        gc.classes = classes.unwrap_or(gc.classes);
        gc.dim = dim.unwrap_or(gc.dim);
        gc.hidden = hidden.unwrap_or(gc.hidden);
        gc.perturb = perturb.unwrap_or(0.0);
        let first = cli.seed.unwrap_or(0);
        return gradcheck(&gc, first, *seeds, cli.out.as_deref());
    }

    let ctx = Ctx::new(&cli)?;
    match cli.command {
        Command::Generate => generate(&ctx),
        Command::Train { dataset, arm } => {
            let mut cfg = ctx.cfg.clone();
            if let Some(arm) = arm {
                cfg.arm = arm;
            }
            let ds = SyntheticDataset::load(&ctx.path(&dataset, "dataset.dbds"))?;
            train(&ctx, &cfg, &ds, &ctx.out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            dataset,
            pairs,
        } => {
            let state = TrainState::load_checkpoint(&ctx.path(&checkpoint, "checkpoint.dbck"))?;
            let ds = SyntheticDataset::load(&ctx.path(&dataset, "dataset.dbds"))?;
            let pairs = PairList::load(&ctx.path(&pairs, "pairs.csv"))?;
            let report = evaluate(&state, &ds, &pairs, &ctx.cfg.eval.far_levels)?;
            write_json(&ctx.out.join("metrics.json"), &report)?;
            write_with(&ctx.out.join("per_domain.csv"), |w| {
                report.write_domain_csv(w)
            })?;
            println!("domain  n_pos  n_neg  accuracy  threshold");
            for d in &report.per_domain {
                println!(
                    "{:>6}  {:>5}  {:>5}  {:>8.4}  {:>9.4}",
                    d.domain_id, d.n_pos, d.n_neg, d.accuracy, d.threshold
                );
            }
            println!(
                "overall {:.4}  mean per-domain {:.4}  rank-1 {:.4}",
                report.overall_verif_acc, report.mean_domain_verif_acc, report.rank1
            );
            for (far, tar) in &report.tar_at_far {
                match tar {
                    Some(t) => println!("TAR@FAR={far}: {t:.4}"),
                    None => println!("TAR@FAR={far}: undefined (too few negatives)"),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DfiReport {
            checkpoint,
            dataset,
            k,
            epsilon,
            scale,
        } => {
            let state = TrainState::load_checkpoint(&ctx.path(&checkpoint, "checkpoint.dbck"))?;
            let mut dfi: DfiConfig = state.config.dfi.clone();
            dfi.k_neighbors = k.unwrap_or(dfi.k_neighbors);
            dfi.epsilon = epsilon.unwrap_or(dfi.epsilon);
            dfi.scale_s = scale.unwrap_or(dfi.scale_s);
            dfi.validate(state.config.num_classes)?;
            let ds = match &dataset {
                Some(p) => Some(SyntheticDataset::load(p)?),
                None => None,
            };
            let report = dfi_report(&state, &dfi, ds.as_ref())?;
            write_with(&ctx.out.join("dfi.csv"), |w| report.write_csv(w))?;
            write_json(&ctx.out.join("dfi.json"), &report)?;
            let s = report.table.summary();
            println!(
                "K={} classes={} beta min {:.4} mean {:.4} max {:.4}",
                dfi.k_neighbors, s.count, s.min, s.mean, s.max
            );
            if let Some(means) = &report.mean_beta_by_domain {
                for (d, m) in means.iter().enumerate() {
                    println!("domain {d}: mean beta {m:.4}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablation { arms } => {
            let arms = if arms.is_empty() {
                Arm::ALL.to_vec()
            } else {
                arms
            };
            let mut io_error = None;
            let table = run_ablation(&ctx.cfg, &arms, |arm, outcome| {
                let dir = ctx.out.join(arm.name());
                let res = (|| -> Result<()> {
                    fs::create_dir_all(&dir)?;
                    ctx.echo_config(&dir, &ctx.cfg.with_arm(arm))?;
                    if let Some((state, history)) = outcome {
                        state.save_checkpoint(&dir.join("checkpoint.dbck"))?;
                        write_with(&dir.join("history.csv"), |w| history.write_csv(w))?;
                    }
                    Ok(())
                })();
                if let Err(e) = res {
                    io_error.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_error {
                return Err(e);
            }
            for row in &table.rows {
                if let Some(r) = &row.report {
                    write_json(&ctx.out.join(row.arm.name()).join("metrics.json"), r)?;
                }
            }
            write_with(&ctx.out.join("ablation.csv"), |w| table.write_csv(w))?;
            write_json(&ctx.out.join("ablation.json"), &table)?;
            ctx.echo_config(&ctx.out, &ctx.cfg)?;
            let mut text = Vec::new();
            table.write_csv(&mut text)?;
            print!("{}", String::from_utf8_lossy(&text));
            Ok(ExitCode::SUCCESS)
        }
        Command::Ksweep { k } => {
            let table = run_ksweep(&ctx.cfg, &k)?;
            write_with(&ctx.out.join("ksweep.csv"), |w| table.write_csv(w))?;
            write_json(&ctx.out.join("ksweep.json"), &table)?;
            ctx.echo_config(&ctx.out, &ctx.cfg)?;
            let mut text = Vec::new();
            table.write_csv(&mut text)?;
            print!("{}", String::from_utf8_lossy(&text));
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { .. } => unreachable!(),
    }
}

fn generate(ctx: &Ctx) -> Result<ExitCode> {
    let ds = build_dataset(&ctx.cfg)?;
    let pairs = build_pairs(&ctx.cfg, &ds)?;
    ds.save(&ctx.out.join("dataset.dbds"))?;
    pairs.save(&ctx.out.join("pairs.csv"))?;
    ctx.echo_config(&ctx.out, &ctx.cfg)?;
    println!(
        "classes {}  samples {}  input_dim {}",
        ds.num_classes(),
        ds.len(),
        ds.input_dim()
    );
    for (d, n) in ds.domain_class_counts().iter().enumerate() {
        println!("domain {d}: {n} classes");
    }
    println!("pairs {}", pairs.len());
    Ok(ExitCode::SUCCESS)
}

fn train(ctx: &Ctx, cfg: &ExperimentConfig, ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    let resolved = cfg.resolved()?;
    let mut state = init_state(&resolved)?;
    if ds.input_dim() != resolved.model.input_dim || ds.num_classes() != resolved.model.num_classes
    {
        return Err(Error::DimMismatch {
            op: "train",
            left: (ds.num_classes(), ds.input_dim()),
            right: (resolved.model.num_classes, resolved.model.input_dim),
        });
    }
    let history = state.fit(&ds.training_set(), &resolved.optim, |r| {
        println!(
            "epoch {:>2}  lr {:<8}  loss {:.5}{}",
            r.epoch,
            r.lr,
            r.loss_total,
            r.loss_rrm
                .map(|v| format!("  rrm {v:.5}"))
                .unwrap_or_default()
        );
    })?;
    state.save_checkpoint(&dir.join("checkpoint.dbck"))?;
    write_with(&dir.join("history.csv"), |w| history.write_csv(w))?;
    ctx.echo_config(dir, cfg)
}

fn gradcheck(
    cfg: &GradcheckConfig,
    first: u64,
    seeds: u64,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let mut worst = vec![0.0f64; COMPONENTS.len()];
    let mut reports = Vec::new();
    for seed in first..first + seeds.max(1) {
        let r = run_gradcheck(cfg, seed)?;
        for (w, c) in worst.iter_mut().zip(&r.components) {
            *w = w.max(c.max_rel_error);
        }
        reports.push(r);
    }
    let passed = reports.iter().all(|r| r.passed);
    for (name, w) in COMPONENTS.iter().zip(&worst) {
        let verdict = if *w < cfg.tolerance { "ok" } else { "FAIL" };
        println!("{name:<8} max rel error {w:.3e}  {verdict}");
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("gradcheck.json"), &reports)?;
    }
    Ok(if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}
