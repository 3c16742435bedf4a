//! Central-difference verification of every hand-written backward pass.
//!
//! Relative error per entry is `|a − n| / max(|a|, |n|, floor)` where `a` is
//! the analytic and `n` the numeric derivative; the floor turns the measure
//! into an absolute one for entries that are essentially zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, cosface_forward, dbm_forward, rrm_loss, softmax_forward, FeatureBatch,
    LossConfig, LossKind,
};
use crate::rbm::{rbm_backward, rbm_forward, GateMode, Mode, RbmParams};
use crate::tensor::{Matrix, Rng};

pub const COMPONENTS: [&str; 5] = ["softmax", "cosface", "dbm", "rrm", "rbm"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub batch: usize,
    pub classes: usize,
    pub dim: usize,
    pub hidden: usize,
    pub scale_s: f64,
    pub margin_m: f64,
    /// Weight of the gate regression term in the block check.
    pub lambda: f64,
    pub step: f64,
    pub floor: f64,
    pub tolerance: f64,
    /// Added to the first analytic entry of every component. Non-zero values
    /// exist only to prove that the checker can fail.
    pub perturb: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            batch: 6,
            classes: 8,
            dim: 12,
            hidden: 3,
            scale_s: 30.0,
            margin_m: 0.35,
            lambda: 1.0,
            step: 1e-5,
            floor: 1e-4,
            tolerance: 1e-5,
            perturb: 0.0,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 || self.batch > 8 || self.classes < 2 || self.classes > 10 {
            return Err(Error::InvalidConfig(
                "gradcheck needs 2 <= B <= 8 and 2 <= C <= 10".into(),
            ));
        }
        if self.dim == 0 || self.dim > 16 || self.hidden == 0 || self.hidden > 4 {
            return Err(Error::InvalidConfig(
                "gradcheck needs 1 <= d <= 16 and 1 <= h <= 4".into(),
            ));
        }
        if !(self.step > 0.0) || !(self.floor > 0.0) {
            return Err(Error::InvalidConfig("step and floor must be > 0".into()));
        }
        Ok(())
    }

    fn loss(&self, kind: LossKind) -> LossConfig {
        LossConfig {
            kind,
            scale_s: self.scale_s,
            margin_m: self.margin_m,
            lambda: self.lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub components: Vec<ComponentResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_error(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.max_rel_error)
    }
}

/// Compares `analytic` with central differences of `f` around `params`.
fn compare(
    cfg: &GradcheckConfig,
    params: &[Vec<f64>],
    mut analytic: Vec<Vec<f64>>,
    f: impl Fn(&[Vec<f64>]) -> Result<f64>,
) -> Result<(f64, usize)> {
    if let Some(first) = analytic.iter_mut().find(|t| !t.is_empty()) {
        first[0] += cfg.perturb;
    }
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut work = params.to_vec();
    for (t, an) in analytic.iter().enumerate() {
        for (i, &a) in an.iter().enumerate() {
            let orig = work[t][i];
            work[t][i] = orig + cfg.step;
            let up = f(&work)?;
            work[t][i] = orig - cfg.step;
            let down = f(&work)?;
            work[t][i] = orig;
            let n = (up - down) / (2.0 * cfg.step);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(cfg.floor);
            if !err.is_finite() {
                return Err(Error::NonFinite("gradcheck"));
            }
            worst = worst.max(err);
            entries += 1;
        }
    }
    Ok((worst, entries))
}

fn gaussian_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.gaussian()).collect()
}

fn labels(rng: &mut Rng, b: usize, c: usize) -> Vec<usize> {
    (0..b).map(|_| rng.below(c)).collect()
}

fn check_classification(
    cfg: &GradcheckConfig,
    kind: LossKind,
    rng: &mut Rng,
) -> Result<(f64, usize)> {
    let (b, c, d) = (cfg.batch, cfg.classes, cfg.dim);
    let x = gaussian_vec(rng, b * d, 1.0);
    let w = gaussian_vec(rng, c * d, 1.0);
    let y = labels(rng, b, c);
    let beta: Vec<f64> = (0..c).map(|_| 0.5 + 1.5 * rng.uniform()).collect();
    let loss_cfg = cfg.loss(kind);
    let run = |p: &[Vec<f64>]| {
        let batch = FeatureBatch::new(Matrix::new(b, d, p[0].clone())?, y.clone(), false)?;
        let protos = Matrix::new(c, d, p[1].clone())?;
        match kind {
            LossKind::Softmax => softmax_forward(&batch, &protos, &loss_cfg),
            LossKind::Cosface => cosface_forward(&batch, &protos, &loss_cfg),
            LossKind::Dbm => dbm_forward(&batch, &protos, &beta, &loss_cfg),
        }
    };
    let params = vec![x, w];
    let out = run(&params)?;
    let analytic = vec![
        out.grad_features.into_data(),
        out.grad_prototypes.into_data(),
    ];
    compare(cfg, &params, analytic, |p| Ok(run(p)?.value))
}

fn check_rrm(cfg: &GradcheckConfig, rng: &mut Rng) -> Result<(f64, usize)> {
    let gate: Vec<f64> = (0..cfg.batch).map(|_| 2.0 * rng.uniform()).collect();
    let targets: Vec<f64> = (0..cfg.batch).map(|_| 2.0 * rng.uniform()).collect();
    let out = rrm_loss(&gate, &targets)?;
    compare(cfg, &[gate], vec![out.grad_gate], |p| {
        Ok(rrm_loss(&p[0], &targets)?.value)
    })
}

/// The block followed by the balancing-margin loss and the weighted gate
/// regression, differentiated with respect to its input, every block
/// parameter and the prototypes.
fn check_rbm(cfg: &GradcheckConfig, rng: &mut Rng) -> Result<(f64, usize)> {
    let (b, c, d, h) = (cfg.batch, cfg.classes, cfg.dim, cfg.hidden);
    let mut base = RbmParams::init(d, h, GateMode::Soft, rng)?;
    base.w2 = Matrix::seeded_gaussian(rng, h, d).scale(0.5);
    base.b1 = gaussian_vec(rng, h, 0.1);
    base.b2 = gaussian_vec(rng, d, 0.1);
    base.bn.gamma = (0..h).map(|_| 0.5 + rng.uniform()).collect();
    base.bn.beta_shift = gaussian_vec(rng, h, 0.2);
    base.gate_w = gaussian_vec(rng, d, 0.3);
    base.gate_b = 0.1 * rng.gaussian();
    let x = gaussian_vec(rng, b * d, 1.0);
    let w = gaussian_vec(rng, c * d, 1.0);
    let y = labels(rng, b, c);
    let beta: Vec<f64> = (0..c).map(|_| 0.5 + 1.5 * rng.uniform()).collect();
    let targets: Vec<f64> = y.iter().map(|&l| beta[l]).collect();
    let loss_cfg = cfg.loss(LossKind::Dbm);

    let unpack = |p: &[Vec<f64>]| -> Result<(Matrix, RbmParams, Matrix)> {
        let mut r = base.clone();
        r.w1 = Matrix::new(d, h, p[1].clone())?;
        r.b1 = p[2].clone();
        r.bn.gamma = p[3].clone();
        r.bn.beta_shift = p[4].clone();
        r.w2 = Matrix::new(h, d, p[5].clone())?;
        r.b2 = p[6].clone();
        r.gate_w = p[7].clone();
        r.gate_b = p[8][0];
        Ok((
            Matrix::new(b, d, p[0].clone())?,
            r,
            Matrix::new(c, d, p[9].clone())?,
        ))
    };
    let objective = |p: &[Vec<f64>], with_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let (x, mut r, protos) = unpack(p)?;
        let fwd = rbm_forward(&x, &mut r, Mode::Train)?;
        let batch = FeatureBatch::new(fwd.x_re.clone(), y.clone(), false)?;
        let cls = dbm_forward(&batch, &protos, &beta, &loss_cfg)?;
        let rrm = rrm_loss(&fwd.gate, &targets)?;
        let total = combined_loss(cls, Some(&rrm), cfg.lambda);
        if !with_grads {
            return Ok((total.value, Vec::new()));
        }
        let (gx, g) = rbm_backward(
            &total.classification.grad_features,
            &total.grad_gate,
            &fwd.cache,
            &r,
        )?;
        let mut grads = vec![gx.into_data()];
        grads.extend(g.tensors().into_iter().map(<[f64]>::to_vec));
        grads.push(total.classification.grad_prototypes.into_data());
        Ok((total.value, grads))
    };

    let mut params = vec![x];
    params.extend(base.trainable().into_iter().map(<[f64]>::to_vec));
    params.push(w);
    let (_, analytic) = objective(&params, true)?;
    compare(cfg, &params, analytic, |p| Ok(objective(p, false)?.0))
}

/// Runs every component on instances drawn from `seed`.
pub fn run_gradcheck(cfg: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut components = Vec::with_capacity(COMPONENTS.len());
    for (i, name) in COMPONENTS.iter().enumerate() {
        let mut rng = Rng::derived(seed, i as u64);
        let (max_rel_error, entries) = match *name {
            "softmax" => check_classification(cfg, LossKind::Softmax, &mut rng)?,
            "cosface" => check_classification(cfg, LossKind::Cosface, &mut rng)?,
            "dbm" => check_classification(cfg, LossKind::Dbm, &mut rng)?,
            "rrm" => check_rrm(cfg, &mut rng)?,
            _ => check_rbm(cfg, &mut rng)?,
        };
        components.push(ComponentResult {
            name: name.to_string(),
            max_rel_error,
            entries,
            passed: max_rel_error < cfg.tolerance,
        });
    }
    let passed = components.iter().all(|c| c.passed);
    Ok(GradcheckReport {
        seed,
        components,
        passed,
    })
}
