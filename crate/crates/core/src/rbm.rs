//! Residual balancing mapping: `x_re = x + f(x) · R(x)`.
//!
//! `R(x) = relu(BN(x·W1 + b1))·W2 + b2` is a bottleneck FC→BN→FC branch and
//! `f(x) = softplus(x·g_w + g_b)` is a scalar, non-negative soft gate per
//! sample. The gate is regressed onto the sample's class β by the trainer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, relu, sigmoid, softplus, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// How the per-sample gate is produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Learned affine head followed by softplus.
    Soft,
    /// Constant gate value for every sample; the gate head is unused.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta_shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Retention factor: `running = momentum·running + (1 − momentum)·batch`.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; width],
            beta_shift: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    mode: Mode,
}

/// Normalizes each column of `z`, then applies `gamma`/`beta_shift`.
///
/// Train mode uses the batch mean and population variance and folds them into
/// the running statistics; eval mode uses the running statistics only.
pub fn batchnorm_forward(z: &Matrix, state: &mut BatchNormState, mode: Mode) -> Result<Matrix> {
    batchnorm_forward_cached(z, state, mode).map(|(out, _)| out)
}

pub(crate) fn batchnorm_forward_cached(
    z: &Matrix,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<(Matrix, BatchNormCache)> {
    let (b, h) = z.shape();
    if h != state.width() {
        return Err(Error::DimMismatch {
            op: "batchnorm_forward",
            left: z.shape(),
            right: (1, state.width()),
        });
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if b < 2 {
                return Err(Error::BatchTooSmall { batch: b });
            }
            let mean: Vec<f64> = z.column_sums().into_iter().map(|s| s / b as f64).collect();
            let mut var = vec![0.0; h];
            for r in z.row_iter() {
                for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            for v in &mut var {
                *v /= b as f64;
            }
            let keep = state.momentum;
            for j in 0..h {
                state.running_mean[j] = keep * state.running_mean[j] + (1.0 - keep) * mean[j];
                state.running_var[j] = keep * state.running_var[j] + (1.0 - keep) * var[j];
            }
            (mean, var)
        }
        Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let mut xhat = Matrix::zeros(b, h);
    let mut out = Matrix::zeros(b, h);
    for i in 0..b {
        for j in 0..h {
            let xh = (z.get(i, j) - mean[j]) * inv_std[j];
            xhat.set(i, j, xh);
            out.set(i, j, state.gamma[j] * xh + state.beta_shift[j]);
        }
    }
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            mode,
        },
    ))
}

/// Returns `(dL/dz, dL/dgamma, dL/dbeta_shift)`.
pub(crate) fn batchnorm_backward(
    grad_out: &Matrix,
    cache: &BatchNormCache,
    state: &BatchNormState,
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (b, h) = grad_out.shape();
    let mut g_gamma = vec![0.0; h];
    let mut g_beta = vec![0.0; h];
    for i in 0..b {
        for j in 0..h {
            let g = grad_out.get(i, j);
            g_gamma[j] += g * cache.xhat.get(i, j);
            g_beta[j] += g;
        }
    }
    let mut grad_z = Matrix::zeros(b, h);
    match cache.mode {
        Mode::Eval => {
            for i in 0..b {
                for j in 0..h {
                    grad_z.set(i, j, grad_out.get(i, j) * state.gamma[j] * cache.inv_std[j]);
                }
            }
        }
        Mode::Train => {
            // dz = inv_std/B · (B·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), with dx̂ = g·gamma
            let bf = b as f64;
            for j in 0..h {
                let mut sum = 0.0;
                let mut sum_xhat = 0.0;
                for i in 0..b {
                    let dxh = grad_out.get(i, j) * state.gamma[j];
                    sum += dxh;
                    sum_xhat += dxh * cache.xhat.get(i, j);
                }
                for i in 0..b {
                    let dxh = grad_out.get(i, j) * state.gamma[j];
                    let v =
                        cache.inv_std[j] / bf * (bf * dxh - sum - cache.xhat.get(i, j) * sum_xhat);
                    grad_z.set(i, j, v);
                }
            }
        }
    }
    (grad_z, g_gamma, g_beta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbmParams {
    /// d × h
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub bn: BatchNormState,
    /// h × d
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub gate_w: Vec<f64>,
    pub gate_b: f64,
    pub gate: GateMode,
    /// Bumped on every parameter update; forward caches record it.
    pub generation: u64,
}

impl RbmParams {
    /// He-style init for `W1`, a small `W2` so the block starts close to the
    /// identity, and a zero gate head (`f(x) = ln 2`).
    pub fn init(
        feature_dim: usize,
        hidden_dim: usize,
        gate: GateMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        if feature_dim == 0 || hidden_dim == 0 {
            return Err(Error::InvalidConfig("rbm dims must be >= 1".into()));
        }
        let w1 = Matrix::seeded_gaussian(rng, feature_dim, hidden_dim)
            .scale((2.0 / feature_dim as f64).sqrt());
        let w2 = Matrix::seeded_gaussian(rng, hidden_dim, feature_dim)
            .scale(0.1 / (hidden_dim as f64).sqrt());
        Ok(RbmParams {
            w1,
            b1: vec![0.0; hidden_dim],
            bn: BatchNormState::new(hidden_dim),
            w2,
            b2: vec![0.0; feature_dim],
            gate_w: vec![0.0; feature_dim],
            gate_b: 0.0,
            gate,
            generation: 0,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    /// Trainable tensors in a fixed order:
    /// w1, b1, gamma, beta_shift, w2, b2, gate_w, gate_b.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        vec![
            self.w1.data_mut(),
            &mut self.b1,
            &mut self.bn.gamma,
            &mut self.bn.beta_shift,
            self.w2.data_mut(),
            &mut self.b2,
            &mut self.gate_w,
            std::slice::from_mut(&mut self.gate_b),
        ]
    }

    pub fn trainable(&self) -> Vec<&[f64]> {
        vec![
            self.w1.data(),
            &self.b1,
            &self.bn.gamma,
            &self.bn.beta_shift,
            self.w2.data(),
            &self.b2,
            &self.gate_w,
            std::slice::from_ref(&self.gate_b),
        ]
    }
}

/// Gradients with the same layout as [`RbmParams::trainable`].
#[derive(Clone, Debug, PartialEq)]
pub struct RbmGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta_shift: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub gate_w: Vec<f64>,
    pub gate_b: f64,
}

impl RbmGrads {
    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w1.data(),
            &self.b1,
            &self.gamma,
            &self.beta_shift,
            self.w2.data(),
            &self.b2,
            &self.gate_w,
            std::slice::from_ref(&self.gate_b),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct RbmCache {
    x: Matrix,
    bn: BatchNormCache,
    bn_out: Matrix,
    hidden: Matrix,
    residual: Matrix,
    gate_pre: Vec<f64>,
    gate: Vec<f64>,
    generation: u64,
}

#[derive(Clone, Debug)]
pub struct RbmForward {
    pub x_re: Matrix,
    pub gate: Vec<f64>,
    pub residual: Matrix,
    pub cache: RbmCache,
}

pub fn rbm_forward(x: &Matrix, p: &mut RbmParams, mode: Mode) -> Result<RbmForward> {
    let d = p.feature_dim();
    if x.cols() != d {
        return Err(Error::DimMismatch {
            op: "rbm_forward",
            left: x.shape(),
            right: (d, p.hidden_dim()),
        });
    }
    if mode == Mode::Train && x.rows() < 2 {
        return Err(Error::BatchTooSmall { batch: x.rows() });
    }
    let mut z1 = x.matmul(&p.w1)?;
    z1.add_row_broadcast(&p.b1)?;
    let (bn_out, bn) = batchnorm_forward_cached(&z1, &mut p.bn, mode)?;
    let hidden = bn_out.map(relu);
    let mut residual = hidden.matmul(&p.w2)?;
    residual.add_row_broadcast(&p.b2)?;

    let (gate_pre, gate): (Vec<f64>, Vec<f64>) = match p.gate {
        GateMode::Soft => x
            .row_iter()
            .map(|r| {
                let u = dot(r, &p.gate_w) + p.gate_b;
                (u, softplus(u))
            })
            .unzip(),
        GateMode::Fixed(v) => (vec![0.0; x.rows()], vec![v; x.rows()]),
    };

    let mut x_re = x.clone();
    for i in 0..x.rows() {
        let g = gate[i];
        for (o, r) in x_re.row_mut(i).iter_mut().zip(residual.row(i)) {
            *o += g * r;
        }
    }
    Ok(RbmForward {
        x_re,
        gate: gate.clone(),
        residual: residual.clone(),
        cache: RbmCache {
            x: x.clone(),
            bn,
            bn_out,
            hidden,
            residual,
            gate_pre,
            gate,
            generation: p.generation,
        },
    })
}

/// Backward pass given `dL/dx_re` and an extra gradient arriving directly on
/// the gate output (the weighted regression term).
pub fn rbm_backward(
    grad_x_re: &Matrix,
    grad_gate_extra: &[f64],
    cache: &RbmCache,
    p: &RbmParams,
) -> Result<(Matrix, RbmGrads)> {
    if cache.generation != p.generation {
        return Err(Error::StaleCache);
    }
    let b = cache.x.rows();
    if grad_x_re.shape() != cache.x.shape() {
        return Err(Error::DimMismatch {
            op: "rbm_backward",
            left: grad_x_re.shape(),
            right: cache.x.shape(),
        });
    }
    if grad_gate_extra.len() != b {
        return Err(Error::LengthMismatch {
            left: grad_gate_extra.len(),
            right: b,
        });
    }

    let mut grad_x = grad_x_re.clone();

    // residual path
    let mut grad_residual = grad_x_re.clone();
    for i in 0..b {
        let g = cache.gate[i];
        for v in grad_residual.row_mut(i) {
            *v *= g;
        }
    }
    let grad_w2 = cache.hidden.matmul_at(&grad_residual)?;
    let grad_b2 = grad_residual.column_sums();
    let mut grad_hidden = grad_residual.matmul_bt(&p.w2)?;
    for (g, a) in grad_hidden.data_mut().iter_mut().zip(cache.bn_out.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
    let (grad_z1, grad_gamma, grad_shift) = batchnorm_backward(&grad_hidden, &cache.bn, &p.bn);
    let grad_w1 = cache.x.matmul_at(&grad_z1)?;
    let grad_b1 = grad_z1.column_sums();
    grad_x.add_assign(&grad_z1.matmul_bt(&p.w1)?)?;

    // gate path
    let mut grad_gate_w = vec![0.0; p.feature_dim()];
    let mut grad_gate_b = 0.0;
    if let GateMode::Soft = p.gate {
        for i in 0..b {
            let g_gate = dot(grad_x_re.row(i), cache.residual.row(i)) + grad_gate_extra[i];
            let g_pre = g_gate * sigmoid(cache.gate_pre[i]);
            grad_gate_b += g_pre;
            let xi = cache.x.row(i);
            for (gw, xv) in grad_gate_w.iter_mut().zip(xi) {
                *gw += g_pre * xv;
            }
            for (gx, w) in grad_x.row_mut(i).iter_mut().zip(&p.gate_w) {
                *gx += g_pre * w;
            }
        }
    }

    Ok((
        grad_x,
        RbmGrads {
            w1: grad_w1,
            b1: grad_b1,
            gamma: grad_gamma,
            beta_shift: grad_shift,
            w2: grad_w2,
            b2: grad_b2,
            gate_w: grad_gate_w,
            gate_b: grad_gate_b,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn block(seed: u64, d: usize, h: usize) -> RbmParams {
        let mut rng = Rng::new(seed);
        let mut p = RbmParams::init(d, h, GateMode::Soft, &mut rng).unwrap();
        p.w2 = Matrix::seeded_gaussian(&mut rng, h, d);
        p.gate_w = (0..d).map(|_| 0.3 * rng.gaussian()).collect();
        p.gate_b = 0.2;
        p.b1 = (0..h).map(|_| rng.gaussian()).collect();
        p.b2 = (0..d).map(|_| rng.gaussian()).collect();
        p.bn.gamma = (0..h).map(|_| 1.0 + 0.2 * rng.gaussian()).collect();
        p.bn.beta_shift = (0..h).map(|_| 0.2 * rng.gaussian()).collect();
        p
    }

    #[test]
    fn batchnorm_examples() {
        let mut st = BatchNormState::new(1);
        let z = Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let out = batchnorm_forward(&z, &mut st, Mode::Train).unwrap();
        assert_abs_diff_eq!(out.get(0, 0), -1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(out.get(1, 0), 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(st.running_mean[0], 0.2, epsilon = 1e-15);

        let mut st = BatchNormState::new(2);
        st.eps = 1e-300;
        let z = Matrix::from_rows(&[vec![0.3, -2.0]]).unwrap();
        let out = batchnorm_forward(&z, &mut st, Mode::Eval).unwrap();
        assert_eq!(out, z);

        let mut st = BatchNormState::new(1);
        let z = Matrix::from_rows(&[vec![4.0], vec![4.0], vec![4.0]]).unwrap();
        let out = batchnorm_forward(&z, &mut st, Mode::Train).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let one = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(
            batchnorm_forward(&one, &mut st, Mode::Train),
            Err(Error::BatchTooSmall { batch: 1 })
        ));
    }

    #[test]
    fn closed_gate_is_identity() {
        let mut p = block(1, 4, 2);
        p.gate_w = vec![0.0; 4];
        p.gate_b = -800.0;
        let mut rng = Rng::new(2);
        let x = Matrix::seeded_gaussian(&mut rng, 3, 4);
        let fwd = rbm_forward(&x, &mut p, Mode::Train).unwrap();
        assert!(fwd.gate.iter().all(|&g| g == 0.0));
        assert_eq!(fwd.x_re, x);

        let g = Matrix::seeded_gaussian(&mut rng, 3, 4);
        let (gx, grads) = rbm_backward(&g, &[0.0; 3], &fwd.cache, &p).unwrap();
        assert_eq!(gx, g);
        assert!(grads.w1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_residual_is_identity() {
        let mut p = block(3, 4, 2);
        p.w2 = Matrix::zeros(2, 4);
        p.b2 = vec![0.0; 4];
        let mut rng = Rng::new(4);
        let x = Matrix::seeded_gaussian(&mut rng, 5, 4);
        assert_eq!(rbm_forward(&x, &mut p, Mode::Train).unwrap().x_re, x);
    }

    #[test]
    fn forced_gate_and_residual_arithmetic() {
        let mut rng = Rng::new(5);
        let mut p = RbmParams::init(2, 1, GateMode::Soft, &mut rng).unwrap();
        p.w2 = Matrix::zeros(1, 2);
        p.b2 = vec![0.2, -0.4];
        p.gate_b = (0.5f64.exp() - 1.0).ln();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let fwd = rbm_forward(&x, &mut p, Mode::Train).unwrap();
        assert_abs_diff_eq!(fwd.gate[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(fwd.x_re.get(0, 0), 1.1, epsilon = 1e-12);
        assert_abs_diff_eq!(fwd.x_re.get(0, 1), 1.8, epsilon = 1e-12);

        let mut fixed = p.clone();
        fixed.gate = GateMode::Fixed(1.0);
        let fwd = rbm_forward(&x, &mut fixed, Mode::Train).unwrap();
        assert_abs_diff_eq!(fwd.x_re.get(1, 0), 1.2, epsilon = 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut p = block(6, 8, 2);
        let mut rng = Rng::new(7);
        let x = Matrix::seeded_gaussian(&mut rng, 4, 8);
        let fwd = rbm_forward(&x, &mut p, Mode::Train).unwrap();
        let (gx, grads) = rbm_backward(&Matrix::zeros(4, 8), &[0.0; 4], &fwd.cache, &p).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(grads.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_cache_and_shape_errors() {
        let mut p = block(8, 4, 2);
        let mut rng = Rng::new(9);
        let x = Matrix::seeded_gaussian(&mut rng, 3, 4);
        let fwd = rbm_forward(&x, &mut p, Mode::Train).unwrap();
        for t in p.trainable_mut() {
            t[0] += 0.0;
        }
        assert!(matches!(
            rbm_backward(&Matrix::zeros(3, 4), &[0.0; 3], &fwd.cache, &p),
            Err(Error::StaleCache)
        ));
        let one = Matrix::zeros(1, 4);
        assert!(matches!(
            rbm_forward(&one, &mut p, Mode::Train),
            Err(Error::BatchTooSmall { .. })
        ));
        assert!(rbm_forward(&one, &mut p, Mode::Eval).is_ok());
        assert!(matches!(
            rbm_forward(&Matrix::zeros(3, 5), &mut p, Mode::Eval),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn eval_mode_ignores_batch_composition() {
        let mut p = block(10, 6, 3);
        let mut rng = Rng::new(11);
        let x = Matrix::seeded_gaussian(&mut rng, 5, 6);
        let full = rbm_forward(&x, &mut p, Mode::Eval).unwrap().x_re;
        let single = rbm_forward(&x.select_rows(&[2]), &mut p, Mode::Eval)
            .unwrap()
            .x_re;
        assert_eq!(single.row(0), full.row(2));
    }

    #[test]
    fn gate_is_non_negative() {
        let mut p = block(12, 6, 3);
        p.gate_b = -5.0;
        let mut rng = Rng::new(13);
        let x = Matrix::seeded_gaussian(&mut rng, 20, 6).scale(10.0);
        let fwd = rbm_forward(&x, &mut p, Mode::Eval).unwrap();
        assert!(fwd.gate.iter().all(|&g| g >= 0.0));
    }

    /// Scalar objective `Σ G ⊙ x_re + Σ e ⊙ gate` checked by central differences
    /// on the input and every parameter.
    fn fd_worst(mode: Mode) -> f64 {
        let (b, d, h) = (4, 8, 2);
        let mut rng = Rng::new(31);
        let p0 = block(30, d, h);
        let x = Matrix::seeded_gaussian(&mut rng, b, d);
        let g_up = Matrix::seeded_gaussian(&mut rng, b, d);
        let e_up: Vec<f64> = (0..b).map(|_| rng.gaussian()).collect();
        let objective = |x: &Matrix, p: &RbmParams| -> f64 {
            let mut p = p.clone();
            let f = rbm_forward(x, &mut p, mode).unwrap();
            dot(f.x_re.data(), g_up.data()) + dot(&f.gate, &e_up)
        };
        let mut p = p0.clone();
        let fwd = rbm_forward(&x, &mut p, mode).unwrap();
        let (gx, grads) = rbm_backward(&g_up, &e_up, &fwd.cache, &p).unwrap();
        let h_step = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
        let mut worst: f64 = 0.0;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h_step;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h_step;
            let fd = (objective(&xp, &p0) - objective(&xm, &p0)) / (2.0 * h_step);
            worst = worst.max(rel(fd, gx.data()[i]));
        }
        let analytic = grads.tensors();
        for (t, an) in analytic.iter().enumerate() {
            for i in 0..an.len() {
                let mut pp = p0.clone();
                pp.trainable_mut()[t][i] += h_step;
                let mut pm = p0.clone();
                pm.trainable_mut()[t][i] -= h_step;
                let fd = (objective(&x, &pp) - objective(&x, &pm)) / (2.0 * h_step);
                worst = worst.max(rel(fd, an[i]));
            }
        }
        worst
    }

    #[test]
    fn gradients_match_central_differences() {
        assert!(fd_worst(Mode::Train) < 1e-5);
        assert!(fd_worst(Mode::Eval) < 1e-5);
    }
}
