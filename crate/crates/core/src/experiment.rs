//! Experiment configuration and the multi-run harnesses behind the CLI:
//! ablation arms, the neighbour-count sweep and the frequency/domain join.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dfi::{build_table, inter_class_compactness, DfiConfig, DfiTable};
use crate::error::{Error, Result};
use crate::eval::{per_domain_report, MetricsReport, DEFAULT_FAR_LEVELS};
use crate::losses::LossKind;
use crate::model::{History, ModelConfig, OptimConfig, TrainState};
use crate::rbm::GateMode;
use crate::synth::{generate, make_verification_pairs, PairList, SynthConfig, SyntheticDataset};
use crate::tensor::{mean, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Softmax,
    Cosface,
    Dbm,
    RbmOnly,
    RbmNoGate,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::Softmax,
        Arm::Cosface,
        Arm::Dbm,
        Arm::RbmOnly,
        Arm::RbmNoGate,
        Arm::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Softmax => "softmax",
            Arm::Cosface => "cosface",
            Arm::Dbm => "dbm",
            Arm::RbmOnly => "rbm_only",
            Arm::RbmNoGate => "rbm_no_gate",
            Arm::Full => "full",
        }
    }

    /// Overwrites the loss kind and block settings the arm controls.
    pub fn apply(self, m: &mut ModelConfig) {
        let (kind, rbm, gate, rrm) = match self {
            Arm::Softmax => (LossKind::Softmax, false, GateMode::Soft, false),
            Arm::Cosface => (LossKind::Cosface, false, GateMode::Soft, false),
            Arm::Dbm => (LossKind::Dbm, false, GateMode::Soft, false),
            Arm::RbmOnly => (LossKind::Cosface, true, GateMode::Soft, true),
            Arm::RbmNoGate => (LossKind::Cosface, true, GateMode::Fixed(1.0), false),
            Arm::Full => (LossKind::Dbm, true, GateMode::Soft, true),
        };
        m.loss.kind = kind;
        if kind == LossKind::Softmax {
            m.loss.margin_m = 0.0;
        }
        m.use_rbm = rbm;
        m.gate = gate;
        m.use_rrm = rrm;
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown arm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pairs_per_domain_pos: usize,
    pub pairs_per_domain_neg: usize,
    pub far_levels: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pairs_per_domain_pos: 300,
            pairs_per_domain_neg: 300,
            far_levels: DEFAULT_FAR_LEVELS.to_vec(),
        }
    }
}

/// One JSON document describing a run. `model.input_dim` and
/// `model.num_classes` are derived from `synth`; the arm overrides the loss
/// kind and block settings; `seed` drives data, pairs and initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub arm: Arm,
    pub seed: u64,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            arm: Arm::Full,
            seed: 0,
            output_dir: "out".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn with_arm(&self, arm: Arm) -> Self {
        ExperimentConfig {
            arm,
            ..self.clone()
        }
    }

    /// The configuration with every derived field filled in.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.synth.seed = cfg.seed;
        cfg.model.input_dim = cfg.synth.input_dim;
        cfg.model.num_classes = cfg.synth.num_classes();
        cfg.arm.apply(&mut cfg.model);
        cfg.synth.validate()?;
        cfg.model.validate()?;
        cfg.optim.validate()?;
        Ok(cfg)
    }

    fn pair_seed(&self) -> u64 {
        Rng::derived(self.seed, 1).next_u64()
    }

    fn init_seed(&self) -> u64 {
        Rng::derived(self.seed, 2).next_u64()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<SyntheticDataset> {
    generate(&cfg.resolved()?.synth)
}

pub fn build_pairs(cfg: &ExperimentConfig, ds: &SyntheticDataset) -> Result<PairList> {
    make_verification_pairs(
        ds,
        cfg.eval.pairs_per_domain_pos,
        cfg.eval.pairs_per_domain_neg,
        cfg.pair_seed(),
    )
}

pub fn init_state(cfg: &ExperimentConfig) -> Result<TrainState> {
    let cfg = cfg.resolved()?;
    let mut state = TrainState::init(cfg.model.clone(), cfg.init_seed())?;
    state.provenance = cfg.to_json();
    Ok(state)
}

pub fn train(cfg: &ExperimentConfig, ds: &SyntheticDataset) -> Result<(TrainState, History)> {
    let resolved = cfg.resolved()?;
    check_dataset(&resolved, ds)?;
    let mut state = init_state(&resolved)?;
    let history = state.fit(&ds.training_set(), &resolved.optim, |_| {})?;
    Ok((state, history))
}

fn check_dataset(cfg: &ExperimentConfig, ds: &SyntheticDataset) -> Result<()> {
    if ds.input_dim() != cfg.model.input_dim || ds.num_classes() != cfg.model.num_classes {
        return Err(Error::DimMismatch {
            op: "dataset vs model",
            left: (ds.num_classes(), ds.input_dim()),
            right: (cfg.model.num_classes, cfg.model.input_dim),
        });
    }
    Ok(())
}

pub fn evaluate(
    state: &TrainState,
    ds: &SyntheticDataset,
    pairs: &PairList,
    far_levels: &[f64],
) -> Result<MetricsReport> {
    if ds.input_dim() != state.config.input_dim {
        return Err(Error::DimMismatch {
            op: "eval",
            left: (ds.len(), ds.input_dim()),
            right: (state.config.num_classes, state.config.input_dim),
        });
    }
    let mut report = per_domain_report(state, ds, pairs, far_levels)?;
    report.config = state.provenance.clone();
    Ok(report)
}

/// Per-class frequency values joined with the generator's domain ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfiReport {
    pub k_neighbors: usize,
    pub table: DfiTable,
    pub class_domains: Option<Vec<usize>>,
    /// Mean β per domain, head first.
    pub mean_beta_by_domain: Option<Vec<f64>>,
    pub config: serde_json::Value,
}

impl DfiReport {
    pub fn head_mean_beta(&self) -> Option<f64> {
        self.mean_beta_by_domain
            .as_ref()
            .and_then(|v| v.first().copied())
    }

    pub fn tail_mean_beta(&self) -> Option<f64> {
        self.mean_beta_by_domain
            .as_ref()
            .and_then(|v| v.last().copied())
    }

    /// `class_id,ic,beta,neighbor_ids`, with a `domain_id` column after
    /// `class_id` when the dataset was joined.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let t = &self.table;
        match &self.class_domains {
            None => t.write_csv(w),
            Some(domains) => {
                writeln!(w, "class_id,domain_id,ic,beta,neighbor_ids")?;
                for c in 0..t.num_classes() {
                    let ids: Vec<String> =
                        t.neighbor_ids[c].iter().map(|i| i.to_string()).collect();
                    writeln!(
                        w,
                        "{c},{},{},{},{}",
                        domains[c],
                        t.ic[c],
                        t.beta[c],
                        ids.join(";")
                    )?;
                }
                Ok(())
            }
        }
    }
}

/// Rebuilds the table from a model's prototypes under `dfi` and, when a
/// dataset is given, averages β per ground-truth domain.
pub fn dfi_report(
    state: &TrainState,
    dfi: &DfiConfig,
    ds: Option<&SyntheticDataset>,
) -> Result<DfiReport> {
    let protos = state.prototypes.l2_normalize_rows()?;
    let table = build_table(&protos, dfi, state.iteration)?;
    let (class_domains, mean_beta_by_domain) = match ds {
        Some(ds) => {
            if ds.num_classes() != table.num_classes() {
                return Err(Error::DimMismatch {
                    op: "dfi-report join",
                    left: (ds.num_classes(), 0),
                    right: (table.num_classes(), 0),
                });
            }
            let labels = ds.domain_labels();
            let means = (0..labels.num_domains())
                .map(|d| {
                    mean(
                        &labels
                            .classes_in(d)
                            .iter()
                            .map(|&c| table.beta[c])
                            .collect::<Vec<_>>(),
                    )
                })
                .collect::<Result<Vec<f64>>>()?;
            (Some(labels.as_slice().to_vec()), Some(means))
        }
        None => (None, None),
    };
    Ok(DfiReport {
        k_neighbors: dfi.k_neighbors,
        table,
        class_domains,
        mean_beta_by_domain,
        config: state.provenance.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn mean_domain_acc(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.mean_domain_verif_acc)
    }

    pub fn domain_acc(&self, d: usize) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.domain_accuracy(d))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub baseline: Arm,
    pub num_domains: usize,
    pub rows: Vec<AblationRow>,
    pub config: serde_json::Value,
}

impl AblationTable {
    pub fn row(&self, arm: Arm) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    /// Columns: arm, status, overall and mean per-domain accuracy, one column
    /// per domain (head first), and the mean-accuracy delta against the
    /// baseline arm. Failed arms keep their row with empty metric cells.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let domains: Vec<String> = (0..self.num_domains)
            .map(|d| format!("domain_{d}_acc"))
            .collect();
        writeln!(
            w,
            "arm,status,overall_verif_acc,mean_domain_acc,{},delta_vs_{}",
            domains.join(","),
            self.baseline
        )?;
        let base = self
            .row(self.baseline)
            .and_then(AblationRow::mean_domain_acc);
        for row in &self.rows {
            match &row.report {
                Some(r) => {
                    let per: Vec<String> = (0..self.num_domains)
                        .map(|d| {
                            r.domain_accuracy(d)
                                .map(|v| v.to_string())
                                .unwrap_or_default()
                        })
                        .collect();
                    let delta = base
                        .map(|b| (r.mean_domain_verif_acc - b).to_string())
                        .unwrap_or_default();
                    writeln!(
                        w,
                        "{},ok,{},{},{},{}",
                        row.arm,
                        r.overall_verif_acc,
                        r.mean_domain_verif_acc,
                        per.join(","),
                        delta
                    )?;
                }
                None => {
                    let blanks = vec![""; self.num_domains + 3].join(",");
                    let reason = row.error.as_deref().unwrap_or("failed").replace(',', ";");
                    writeln!(w, "{},failed: {reason},{blanks}", row.arm)?;
                }
            }
        }
        Ok(())
    }
}

/// Trains and evaluates every arm on one shared dataset and pair list.
/// `on_arm` sees each finished arm with its state (absent on failure).
pub fn run_ablation(
    base: &ExperimentConfig,
    arms: &[Arm],
    mut on_arm: impl FnMut(Arm, Option<(&TrainState, &History)>),
) -> Result<AblationTable> {
    let ds = build_dataset(base)?;
    let pairs = build_pairs(base, &ds)?;
    let mut rows = Vec::with_capacity(arms.len());
    for &arm in arms {
        let cfg = base.with_arm(arm);
        let outcome = train(&cfg, &ds).and_then(|(state, history)| {
            let report = evaluate(&state, &ds, &pairs, &cfg.eval.far_levels)?;
            Ok((state, history, report))
        });
        match outcome {
            Ok((state, history, report)) => {
                on_arm(arm, Some((&state, &history)));
                rows.push(AblationRow {
                    arm,
                    report: Some(report),
                    error: None,
                });
            }
            Err(e) => {
                on_arm(arm, None);
                rows.push(AblationRow {
                    arm,
                    report: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(AblationTable {
        baseline: Arm::Cosface,
        num_domains: ds.num_domains(),
        rows,
        config: base.resolved()?.to_json(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub mean_ic: f64,
    pub head_mean_beta: f64,
    pub tail_mean_beta: f64,
    pub overall_verif_acc: f64,
    pub mean_domain_verif_acc: f64,
    /// On this run's final prototypes, every class's compactness rises
    /// strictly along the swept neighbour counts.
    pub ic_strictly_increasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepTable {
    pub arm: Arm,
    pub rows: Vec<KSweepRow>,
    pub config: serde_json::Value,
}

impl KSweepTable {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "k,mean_ic,head_mean_beta,tail_mean_beta,overall_verif_acc,mean_domain_verif_acc,ic_strictly_increasing"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.k,
                r.mean_ic,
                r.head_mean_beta,
                r.tail_mean_beta,
                r.overall_verif_acc,
                r.mean_domain_verif_acc,
                r.ic_strictly_increasing
            )?;
        }
        Ok(())
    }
}

/// Neighbour counts of the sweep: the given values, or 10, 100 and C − 1,
/// deduplicated, sorted and capped at C − 1.
pub fn sweep_ks(num_classes: usize, requested: &[usize]) -> Vec<usize> {
    let max = num_classes.saturating_sub(1);
    let mut ks: Vec<usize> = if requested.is_empty() {
        vec![10, 100, max]
    } else {
        requested.to_vec()
    };
    ks.retain(|&k| k >= 1 && k <= max);
    ks.sort_unstable();
    ks.dedup();
    ks
}

/// Trains the configured arm once per neighbour count and reports the
/// frequency statistics and accuracy of each run.
pub fn run_ksweep(base: &ExperimentConfig, ks: &[usize]) -> Result<KSweepTable> {
    let ds = build_dataset(base)?;
    let pairs = build_pairs(base, &ds)?;
    let ks = sweep_ks(ds.num_classes(), ks);
    if ks.is_empty() {
        return Err(Error::InvalidConfig("no admissible neighbour count".into()));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in &ks {
        let mut cfg = base.clone();
        cfg.model.dfi.k_neighbors = k;
        let (state, _) = train(&cfg, &ds)?;
        let report = evaluate(&state, &ds, &pairs, &cfg.eval.far_levels)?;
        let dfi = dfi_report(&state, &cfg.model.dfi, Some(&ds))?;
        rows.push(KSweepRow {
            k,
            mean_ic: mean(&dfi.table.ic)?,
            head_mean_beta: dfi.head_mean_beta().unwrap_or(f64::NAN),
            tail_mean_beta: dfi.tail_mean_beta().unwrap_or(f64::NAN),
            overall_verif_acc: report.overall_verif_acc,
            mean_domain_verif_acc: report.mean_domain_verif_acc,
            ic_strictly_increasing: ic_increasing_in_k(&state, &cfg.model.dfi, &ks)?,
        });
    }
    Ok(KSweepTable {
        arm: base.arm,
        rows,
        config: base.resolved()?.to_json(),
    })
}

fn ic_increasing_in_k(state: &TrainState, dfi: &DfiConfig, ks: &[usize]) -> Result<bool> {
    let protos = state.prototypes.l2_normalize_rows()?;
    for c in 0..protos.rows() {
        let mut prev = f64::NEG_INFINITY;
        for &k in ks {
            let cfg = DfiConfig {
                k_neighbors: k,
                ..dfi.clone()
            };
            let ic = inter_class_compactness(&protos, c, &cfg)?;
            if !(ic > prev) {
                return Ok(false);
            }
            prev = ic;
        }
    }
    Ok(true)
}
