//! Domain frequency indicator.
//!
//! For each class prototype `w` the inter-class compactness is
//! `IC(w) = ln Σ_{k ∈ KNN(w)} exp(s · cos(w_k, w))` over the K most similar
//! *other* prototypes, and the indicator is `β = ε / IC(w)`. Classes sitting
//! in crowded regions of the hypersphere (head domains) get a large IC and a
//! small β; isolated classes (tail domains) get a large β.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Matrix};

/// Prototype rows must be unit norm within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// How often the table is rebuilt during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPeriod {
    /// Once per pass over the training set.
    Epoch,
    Iterations(u64),
}

impl RefreshPeriod {
    pub fn resolve(self, steps_per_epoch: u64) -> u64 {
        match self {
            RefreshPeriod::Epoch => steps_per_epoch.max(1),
            RefreshPeriod::Iterations(n) => n.max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DfiConfig {
    pub k_neighbors: usize,
    pub epsilon: f64,
    pub scale_s: f64,
    pub refresh_period: RefreshPeriod,
    /// Optional upper clamp on β; off by default.
    pub beta_max: Option<f64>,
    /// Replaces every β with this constant (IC is still computed). Used for
    /// reduction checks, e.g. a unit table turns the balancing margin into a
    /// plain cosine margin.
    pub fixed_beta: Option<f64>,
}

impl Default for DfiConfig {
    fn default() -> Self {
        DfiConfig {
            k_neighbors: 100,
            epsilon: 5.5,
            scale_s: 30.0,
            refresh_period: RefreshPeriod::Epoch,
            beta_max: None,
            fixed_beta: None,
        }
    }
}

impl DfiConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.k_neighbors < 1 || self.k_neighbors + 1 > num_classes {
            return Err(Error::KTooLarge {
                k: self.k_neighbors,
                classes: num_classes,
            });
        }
        if !(self.epsilon > 0.0) || !(self.scale_s > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "dfi epsilon ({}) and scale_s ({}) must be positive",
                self.epsilon, self.scale_s
            )));
        }
        if let RefreshPeriod::Iterations(0) = self.refresh_period {
            return Err(Error::InvalidConfig(
                "dfi refresh_period must be >= 1".into(),
            ));
        }
        if let Some(b) = self.beta_max {
            if !(b >= 0.0) {
                return Err(Error::InvalidConfig(format!("beta_max {b} must be >= 0")));
            }
        }
        if let Some(b) = self.fixed_beta {
            if !(b >= 0.0) {
                return Err(Error::InvalidConfig(format!("fixed_beta {b} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfiTable {
    pub ic: Vec<f64>,
    pub beta: Vec<f64>,
    pub neighbor_ids: Vec<Vec<usize>>,
    pub built_at_iteration: u64,
}

impl DfiTable {
    pub fn num_classes(&self) -> usize {
        self.beta.len()
    }

    /// β of each sample's class.
    pub fn targets_for(&self, labels: &[usize]) -> Result<Vec<f64>> {
        labels
            .iter()
            .map(|&l| {
                self.beta.get(l).copied().ok_or(Error::LabelOutOfRange {
                    label: l,
                    classes: self.beta.len(),
                })
            })
            .collect()
    }

    pub fn is_due(&self, iteration: u64, period: u64) -> bool {
        iteration.saturating_sub(self.built_at_iteration) >= period.max(1)
    }

    pub fn summary(&self) -> BetaSummary {
        BetaSummary::of(&self.beta)
    }

    /// CSV with columns `class_id,ic,beta,neighbor_ids`; neighbours are
    /// semicolon-joined in descending-cosine order.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "class_id,ic,beta,neighbor_ids")?;
        for c in 0..self.num_classes() {
            let ids: Vec<String> = self.neighbor_ids[c].iter().map(|i| i.to_string()).collect();
            writeln!(w, "{},{},{},{}", c, self.ic[c], self.beta[c], ids.join(";"))?;
        }
        Ok(())
    }
}

/// Distribution summary of the β column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// 10th, 20th, ..., 90th percentiles (linear interpolation).
    pub deciles: Vec<f64>,
}

impl BetaSummary {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let quantile = |q: f64| -> f64 {
            if n == 0 {
                return f64::NAN;
            }
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        };
        BetaSummary {
            count: n,
            min: sorted.first().copied().unwrap_or(f64::NAN),
            max: sorted.last().copied().unwrap_or(f64::NAN),
            mean: if n == 0 {
                f64::NAN
            } else {
                sorted.iter().sum::<f64>() / n as f64
            },
            deciles: (1..10).map(|i| quantile(i as f64 / 10.0)).collect(),
        }
    }
}

fn check_k(k: usize, classes: usize) -> Result<()> {
    if k < 1 || k + 1 > classes {
        Err(Error::KTooLarge { k, classes })
    } else {
        Ok(())
    }
}

/// The `k` most similar classes to `c` from one row of cosines, excluding `c`
/// itself. Ties go to the lower class id.
fn top_k_from_cosines(cosines: &[f64], c: usize, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..cosines.len()).filter(|&j| j != c).collect();
    ids.sort_by(|&a, &b| cosines[b].total_cmp(&cosines[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

fn cosines_to(prototypes: &Matrix, c: usize) -> Vec<f64> {
    let wc = prototypes.row(c);
    prototypes
        .row_iter()
        .map(|w| crate::tensor::dot(w, wc).clamp(-1.0, 1.0))
        .collect()
}

fn check_class(prototypes: &Matrix, c: usize) -> Result<()> {
    if c >= prototypes.rows() {
        return Err(Error::LabelOutOfRange {
            label: c,
            classes: prototypes.rows(),
        });
    }
    Ok(())
}

/// Ids of the `k` classes whose prototypes have the largest cosine to class
/// `c`, most similar first.
pub fn nearest_neighbors(prototypes: &Matrix, c: usize, k: usize) -> Result<Vec<usize>> {
    check_k(k, prototypes.rows())?;
    check_class(prototypes, c)?;
    prototypes.check_unit_rows(UNIT_NORM_TOL)?;
    Ok(top_k_from_cosines(&cosines_to(prototypes, c), c, k))
}

/// `IC = ln Σ exp(s · cos)` over the given neighbour cosines.
pub fn compactness_from_cosines(cosines: &[f64], scale_s: f64) -> Result<f64> {
    let scaled: Vec<f64> = cosines.iter().map(|c| scale_s * c).collect();
    log_sum_exp(&scaled)
}

pub fn inter_class_compactness(prototypes: &Matrix, c: usize, cfg: &DfiConfig) -> Result<f64> {
    let ids = nearest_neighbors(prototypes, c, cfg.k_neighbors)?;
    let cos = cosines_to(prototypes, c);
    let nn: Vec<f64> = ids.iter().map(|&j| cos[j]).collect();
    compactness_from_cosines(&nn, cfg.scale_s)
}

/// Full table for all classes. `prototypes` must already be row-normalized.
pub fn build_table(prototypes: &Matrix, cfg: &DfiConfig, iteration: u64) -> Result<DfiTable> {
    let classes = prototypes.rows();
    check_k(cfg.k_neighbors, classes)?;
    prototypes.check_unit_rows(UNIT_NORM_TOL)?;
    let gram = prototypes.matmul_bt(prototypes)?;

    let mut ic = Vec::with_capacity(classes);
    let mut beta = Vec::with_capacity(classes);
    let mut neighbor_ids = Vec::with_capacity(classes);
    for c in 0..classes {
        let cos: Vec<f64> = gram.row(c).iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let ids = top_k_from_cosines(&cos, c, cfg.k_neighbors);
        let nn: Vec<f64> = ids.iter().map(|&j| cos[j]).collect();
        let value = compactness_from_cosines(&nn, cfg.scale_s)?;
        if !(value > 0.0) {
            return Err(Error::NonPositiveCompactness {
                class: c,
                ic: value,
            });
        }
        let mut b = cfg.epsilon / value;
        if let Some(max) = cfg.beta_max {
            b = b.clamp(0.0, max);
        }
        if let Some(fixed) = cfg.fixed_beta {
            b = fixed;
        }
        ic.push(value);
        beta.push(b);
        neighbor_ids.push(ids);
    }
    Ok(DfiTable {
        ic,
        beta,
        neighbor_ids,
        built_at_iteration: iteration,
    })
}

/// Rebuilds the table from `prototypes` once `period` iterations have passed
/// since it was last built; otherwise hands it back untouched.
pub fn refresh_if_due(
    table: DfiTable,
    prototypes: &Matrix,
    cfg: &DfiConfig,
    iteration: u64,
    period: u64,
) -> Result<DfiTable> {
    if table.is_due(iteration, period) {
        build_table(prototypes, cfg, iteration)
    } else {
        Ok(table)
    }
}
