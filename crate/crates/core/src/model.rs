//! MLP embedding backbone, prototype head, optional balancing block, and the
//! SGD training loop that ties the frequency table, gate regression and
//! margin loss together.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dfi::{build_table, DfiConfig, DfiTable};
use crate::error::{Error, Result};
use crate::eval::Embedder;
use crate::losses::{
    classification_forward, combined_loss, rrm_loss, FeatureBatch, LossConfig, LossKind,
};
use crate::rbm::{rbm_backward, rbm_forward, BatchNormState, GateMode, Mode, RbmGrads, RbmParams};
use crate::synth::TrainingSet;
use crate::tensor::{read_u32, read_u64, relu, Matrix, Rng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub use_rbm: bool,
    pub gate: GateMode,
    /// Bottleneck width of the residual branch; `None` means `feature_dim / 4`.
    pub rbm_hidden_dim: Option<usize>,
    /// Regress the soft gate onto β. Only meaningful with a soft gate.
    pub use_rrm: bool,
    /// Per-entry std of the initial prototypes; `None` means `1/sqrt(feature_dim)`.
    pub prototype_init_std: Option<f64>,
    pub loss: LossConfig,
    pub dfi: DfiConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            hidden_dims: vec![128],
            feature_dim: 64,
            num_classes: 0,
            use_rbm: true,
            gate: GateMode::Soft,
            rbm_hidden_dim: None,
            use_rrm: true,
            prototype_init_std: None,
            loss: LossConfig::default(),
            dfi: DfiConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn rbm_hidden(&self) -> usize {
        self.rbm_hidden_dim.unwrap_or((self.feature_dim / 4).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig("model dims must be >= 1".into()));
        }
        if self.rbm_hidden() == 0 {
            return Err(Error::InvalidConfig("rbm_hidden_dim must be >= 1".into()));
        }
        self.loss.validate()?;
        self.dfi.validate(self.num_classes)
    }

    fn rrm_active(&self) -> bool {
        self.use_rbm && self.use_rrm && self.gate == GateMode::Soft
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_steps: Vec<u64>,
    pub lr_gamma: f64,
    pub epochs: u64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_steps: vec![5, 8, 11],
            lr_gamma: 0.1,
            epochs: 15,
            batch_size: 128,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be > 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.lr_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_steps must be strictly increasing".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }

    /// Learning rate used during (1-based) `epoch`: the base rate times
    /// `lr_gamma` for every step epoch already completed.
    pub fn lr_at(&self, epoch: u64) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&s| epoch > s).count();
        self.lr * self.lr_gamma.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// in × out
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss_cls: f64,
    pub loss_rrm: Option<f64>,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub loss_dbm: f64,
    pub loss_rrm: Option<f64>,
    pub loss_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// CSV columns `epoch,lr,loss_dbm,loss_rrm,loss_total`; `loss_rrm` is
    /// empty for runs without gate regression.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "epoch,lr,loss_dbm,loss_rrm,loss_total")?;
        for r in &self.epochs {
            let rrm = r.loss_rrm.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{}",
                r.epoch, r.lr, r.loss_dbm, rrm, r.loss_total
            )?;
        }
        Ok(())
    }
}

/// Gradients for every trainable tensor, in [`TrainState::trainable`] order.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<(Matrix, Vec<f64>)>,
    pub prototypes: Matrix,
    pub rbm: Option<RbmGrads>,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in &self.layers {
            out.push(w.data());
            out.push(b);
        }
        out.push(self.prototypes.data());
        if let Some(r) = &self.rbm {
            out.extend(r.tensors());
        }
        out
    }
}

struct BackboneCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: ModelConfig,
    pub layers: Vec<Dense>,
    /// Class prototypes, stored unnormalized.
    pub prototypes: Matrix,
    pub rbm: Option<RbmParams>,
    pub dfi_table: DfiTable,
    pub velocity: Vec<Vec<f64>>,
    /// Completed epochs.
    pub epoch: u64,
    pub iteration: u64,
    /// Set by [`TrainState::fit`]; resolves an epoch-long DFI refresh period.
    pub steps_per_epoch: Option<u64>,
    pub rng: Rng,
    /// Free-form provenance stored in checkpoints (e.g. the experiment config).
    pub provenance: serde_json::Value,
}

/// Returned by [`TrainState::forward_embed`].
#[derive(Clone, Debug)]
pub struct Embedding {
    /// Unit-norm rows.
    pub features: Matrix,
    pub gate: Option<Vec<f64>>,
}

impl TrainState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden_dims);
        dims.push(config.feature_dim);
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weight: Matrix::seeded_gaussian(&mut rng, w[0], w[1])
                    .scale((2.0 / w[0] as f64).sqrt()),
                bias: vec![0.0; w[1]],
            })
            .collect();
        let prototypes = Matrix::seeded_gaussian(&mut rng, config.num_classes, config.feature_dim)
            .scale(
                config
                    .prototype_init_std
                    .unwrap_or(1.0 / (config.feature_dim as f64).sqrt()),
            );
        let rbm = if config.use_rbm {
            Some(RbmParams::init(
                config.feature_dim,
                config.rbm_hidden(),
                config.gate,
                &mut rng,
            )?)
        } else {
            None
        };
        let dfi_table = build_table(&prototypes.l2_normalize_rows()?, &config.dfi, 0)?;
        let mut state = TrainState {
            config,
            layers,
            prototypes,
            rbm,
            dfi_table,
            velocity: Vec::new(),
            epoch: 0,
            iteration: 0,
            steps_per_epoch: None,
            rng,
            provenance: serde_json::Value::Null,
        };
        state.velocity = state
            .trainable()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Ok(state)
    }

    /// Trainable tensors: each layer's weight and bias, the prototypes, then
    /// the balancing block (see [`RbmParams::trainable`]).
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(&l.bias);
        }
        out.push(self.prototypes.data());
        if let Some(r) = &self.rbm {
            out.extend(r.trainable());
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(&mut l.bias);
        }
        out.push(self.prototypes.data_mut());
        if let Some(r) = &mut self.rbm {
            out.extend(r.trainable_mut());
        }
        out
    }

    fn backbone_forward(&self, inputs: &Matrix) -> Result<(Matrix, BackboneCache)> {
        if inputs.cols() != self.config.input_dim {
            return Err(Error::DimMismatch {
                op: "forward_embed",
                left: inputs.shape(),
                right: (self.config.input_dim, self.config.feature_dim),
            });
        }
        let mut cache = BackboneCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut a = inputs.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.matmul(&layer.weight)?;
            z.add_row_broadcast(&layer.bias)?;
            cache.inputs.push(a);
            a = if l < last { z.map(relu) } else { z.clone() };
            cache.pre.push(z);
        }
        Ok((a, cache))
    }

    fn backbone_backward(
        &self,
        grad_out: Matrix,
        cache: &BackboneCache,
    ) -> Result<Vec<(Matrix, Vec<f64>)>> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out;
        let last = self.layers.len() - 1;
        for l in (0..self.layers.len()).rev() {
            if l < last {
                for (gv, z) in g.data_mut().iter_mut().zip(cache.pre[l].data()) {
                    if *z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let gw = cache.inputs[l].matmul_at(&g)?;
            let gb = g.column_sums();
            if l > 0 {
                g = g.matmul_bt(&self.layers[l].weight)?;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        Ok(grads)
    }

    /// Backbone → optional balancing block → L2 normalization.
    pub fn forward_embed(&self, inputs: &Matrix, mode: Mode) -> Result<Embedding> {
        let (x, _) = self.backbone_forward(inputs)?;
        let (x, gate) = match &self.rbm {
            Some(p) => {
                // Running statistics only move during training steps.
                let mut p = p.clone();
                let mode = if mode == Mode::Train && inputs.rows() < 2 {
                    Mode::Eval
                } else {
                    mode
                };
                let f = rbm_forward(&x, &mut p, mode)?;
                (f.x_re, Some(f.gate))
            }
            None => (x, None),
        };
        Ok(Embedding {
            features: x.l2_normalize_rows()?,
            gate,
        })
    }

    fn refresh_period(&self) -> u64 {
        self.config
            .dfi
            .refresh_period
            .resolve(self.steps_per_epoch.unwrap_or(1))
    }

    /// Loss and gradients of `L_cls + λ·L_rrm` on one batch. Updates batch
    /// norm running statistics but no trainable parameter.
    pub fn compute_gradients(
        &mut self,
        inputs: &Matrix,
        labels: &[usize],
    ) -> Result<(StepMetrics, Gradients)> {
        if inputs.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                left: inputs.rows(),
                right: labels.len(),
            });
        }
        let (x, bcache) = self.backbone_forward(inputs)?;
        let rbm_out = match &mut self.rbm {
            Some(p) => Some(rbm_forward(&x, p, Mode::Train)?),
            None => None,
        };
        let x_re = rbm_out.as_ref().map_or(&x, |f| &f.x_re).clone();
        let batch = FeatureBatch::new(x_re, labels.to_vec(), false)?;
        let cls = classification_forward(
            &batch,
            &self.prototypes,
            &self.dfi_table.beta,
            &self.config.loss,
        )?;
        let rrm = match (&rbm_out, self.config.rrm_active()) {
            (Some(f), true) => Some(rrm_loss(&f.gate, &self.dfi_table.targets_for(labels)?)?),
            _ => None,
        };
        let total = combined_loss(cls, rrm.as_ref(), self.config.loss.lambda);

        let (grad_x, rbm_grads) = match (&rbm_out, &self.rbm) {
            (Some(f), Some(p)) => {
                let (gx, g) = rbm_backward(
                    &total.classification.grad_features,
                    &total.grad_gate,
                    &f.cache,
                    p,
                )?;
                (gx, Some(g))
            }
            _ => (total.classification.grad_features.clone(), None),
        };
        let layers = self.backbone_backward(grad_x, &bcache)?;
        let metrics = StepMetrics {
            loss_cls: total.classification.value,
            loss_rrm: total.rrm_value,
            loss_total: total.value,
        };
        Ok((
            metrics,
            Gradients {
                layers,
                prototypes: total.classification.grad_prototypes,
                rbm: rbm_grads,
            },
        ))
    }

    /// One SGD step: `v ← μ·v + g + wd·θ`, `θ ← θ − lr·v`, then the frequency
    /// table is rebuilt if its refresh period has elapsed.
    pub fn train_step(
        &mut self,
        inputs: &Matrix,
        labels: &[usize],
        optim: &OptimConfig,
        lr: f64,
    ) -> Result<StepMetrics> {
        let (metrics, grads) = self.compute_gradients(inputs, labels)?;
        if !metrics.loss_total.is_finite() {
            return Err(Error::NonFinite("train_step loss"));
        }
        let grads: Vec<Vec<f64>> = grads.tensors().into_iter().map(<[f64]>::to_vec).collect();
        let mut velocity = std::mem::take(&mut self.velocity);
        for ((theta, v), g) in self
            .trainable_mut()
            .into_iter()
            .zip(velocity.iter_mut())
            .zip(&grads)
        {
            for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = optim.momentum * *vi + gi + optim.weight_decay * *t;
                *t -= lr * *vi;
            }
        }
        self.velocity = velocity;
        self.iteration += 1;
        let period = self.refresh_period();
        if self.dfi_table.is_due(self.iteration, period) {
            self.rebuild_dfi()?;
        }
        Ok(metrics)
    }

    pub fn rebuild_dfi(&mut self) -> Result<()> {
        self.dfi_table = build_table(
            &self.prototypes.l2_normalize_rows()?,
            &self.config.dfi,
            self.iteration,
        )?;
        Ok(())
    }

    /// Runs the remaining epochs up to `optim.epochs`, shuffling the training
    /// set each epoch with the state's generator. A trailing batch of a single
    /// sample is dropped.
    pub fn fit(
        &mut self,
        data: &TrainingSet,
        optim: &OptimConfig,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<History> {
        optim.validate()?;
        let mut history = History::default();
        if self.epoch >= optim.epochs {
            return Ok(history);
        }
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if optim.batch_size > data.len() {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} exceeds {} training samples",
                optim.batch_size,
                data.len()
            )));
        }
        if data.inputs.cols() != self.config.input_dim {
            return Err(Error::DimMismatch {
                op: "fit",
                left: data.inputs.shape(),
                right: (self.config.input_dim, self.config.feature_dim),
            });
        }
        let n = data.len();
        let steps = (n / optim.batch_size + usize::from(n % optim.batch_size >= 2)) as u64;
        if steps == 0 {
            return Err(Error::InvalidConfig(
                "no batch of at least two samples".into(),
            ));
        }
        self.steps_per_epoch = Some(steps);

        let mut order: Vec<usize> = (0..n).collect();
        while self.epoch < optim.epochs {
            let epoch = self.epoch + 1;
            let lr = optim.lr_at(epoch);
            order.sort_unstable();
            self.rng.shuffle(&mut order);
            let (mut cls, mut rrm, mut total, mut count) = (0.0, 0.0, 0.0, 0usize);
            let mut has_rrm = false;
            for chunk in order.chunks(optim.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let x = data.inputs.select_rows(chunk);
                let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
                let m = self.train_step(&x, &y, optim, lr)?;
                cls += m.loss_cls;
                total += m.loss_total;
                if let Some(r) = m.loss_rrm {
                    rrm += r;
                    has_rrm = true;
                }
                count += 1;
            }
            let c = count as f64;
            let record = EpochRecord {
                epoch,
                lr,
                loss_dbm: cls / c,
                loss_rrm: has_rrm.then_some(rrm / c),
                loss_total: total / c,
            };
            self.epoch = epoch;
            on_epoch(&record);
            history.epochs.push(record);
        }
        Ok(history)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::read_checkpoint(&mut BufReader::new(File::open(path)?))
    }

    /// Layout: magic `DBCK`, u32 version, u64 header length, JSON header, then
    /// matrix blocks: per layer weight and bias; prototypes; if present the
    /// block's w1, b1, gamma, beta_shift, running_mean, running_var, w2, b2,
    /// gate_w, gate_b; the frequency table's ic, beta and neighbour ids; one
    /// velocity block per trainable tensor.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            epoch: self.epoch,
            iteration: self.iteration,
            steps_per_epoch: self.steps_per_epoch,
            rng: self.rng.clone(),
            dfi_built_at: self.dfi_table.built_at_iteration,
            rbm: self.rbm.as_ref().map(|r| RbmHeader {
                gate: r.gate,
                momentum: r.bn.momentum,
                eps: r.bn.eps,
                generation: r.generation,
            }),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let vector = |v: &[f64]| Matrix::row_vector(v.to_vec());
        for l in &self.layers {
            l.weight.write_to(w)?;
            vector(&l.bias).write_to(w)?;
        }
        self.prototypes.write_to(w)?;
        if let Some(r) = &self.rbm {
            r.w1.write_to(w)?;
            vector(&r.b1).write_to(w)?;
            vector(&r.bn.gamma).write_to(w)?;
            vector(&r.bn.beta_shift).write_to(w)?;
            vector(&r.bn.running_mean).write_to(w)?;
            vector(&r.bn.running_var).write_to(w)?;
            r.w2.write_to(w)?;
            vector(&r.b2).write_to(w)?;
            vector(&r.gate_w).write_to(w)?;
            vector(&[r.gate_b]).write_to(w)?;
        }
        let t = &self.dfi_table;
        vector(&t.ic).write_to(w)?;
        vector(&t.beta).write_to(w)?;
        let k = t.neighbor_ids.first().map_or(0, Vec::len);
        let ids: Vec<f64> = t.neighbor_ids.iter().flatten().map(|&i| i as f64).collect();
        Matrix::new(t.neighbor_ids.len(), k, ids)?.write_to(w)?;
        for v in &self.velocity {
            vector(v).write_to(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = read_u64(r)?;
        let mut json = Vec::new();
        r.take(len).read_to_end(&mut json)?;
        if json.len() as u64 != len {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "truncated checkpoint header",
            )));
        }
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let cfg = header.config;

        let mut block = |rows: usize, cols: usize| -> Result<Matrix> {
            let m = Matrix::read_from(r)?;
            if m.shape() != (rows, cols) {
                return Err(Error::Format(format!(
                    "checkpoint block {:?} where ({rows}, {cols}) was expected",
                    m.shape()
                )));
            }
            Ok(m)
        };
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.hidden_dims);
        dims.push(cfg.feature_dim);
        let mut layers = Vec::new();
        for win in dims.windows(2) {
            let weight = block(win[0], win[1])?;
            let bias = block(1, win[1])?.into_data();
            layers.push(Dense { weight, bias });
        }
        let prototypes = block(cfg.num_classes, cfg.feature_dim)?;
        let rbm = match header.rbm {
            Some(h) => {
                let (d, hid) = (cfg.feature_dim, cfg.rbm_hidden());
                let w1 = block(d, hid)?;
                let b1 = block(1, hid)?.into_data();
                let gamma = block(1, hid)?.into_data();
                let beta_shift = block(1, hid)?.into_data();
                let running_mean = block(1, hid)?.into_data();
                let running_var = block(1, hid)?.into_data();
                let w2 = block(hid, d)?;
                let b2 = block(1, d)?.into_data();
                let gate_w = block(1, d)?.into_data();
                let gate_b = block(1, 1)?.data()[0];
                Some(RbmParams {
                    w1,
                    b1,
                    bn: BatchNormState {
                        gamma,
                        beta_shift,
                        running_mean,
                        running_var,
                        momentum: h.momentum,
                        eps: h.eps,
                    },
                    w2,
                    b2,
                    gate_w,
                    gate_b,
                    gate: h.gate,
                    generation: h.generation,
                })
            }
            None => None,
        };
        let c = cfg.num_classes;
        let ic = block(1, c)?.into_data();
        let beta = block(1, c)?.into_data();
        let ids = Matrix::read_from(r)?;
        if ids.rows() != c {
            return Err(Error::Format(
                "neighbour id block has wrong row count".into(),
            ));
        }
        let neighbor_ids = ids
            .row_iter()
            .map(|row| row.iter().map(|&v| v as usize).collect())
            .collect();
        let mut state = TrainState {
            config: cfg,
            layers,
            prototypes,
            rbm,
            dfi_table: DfiTable {
                ic,
                beta,
                neighbor_ids,
                built_at_iteration: header.dfi_built_at,
            },
            velocity: Vec::new(),
            epoch: header.epoch,
            iteration: header.iteration,
            steps_per_epoch: header.steps_per_epoch,
            rng: header.rng,
            provenance: header.provenance,
        };
        let lens: Vec<usize> = state.trainable().iter().map(|t| t.len()).collect();
        let mut velocity = Vec::with_capacity(lens.len());
        for n in lens {
            velocity.push(Matrix::read_from(r)?.into_data());
            if velocity.last().map(Vec::len) != Some(n) {
                return Err(Error::Format("velocity block has wrong length".into()));
            }
        }
        state.velocity = velocity;
        Ok(state)
    }
}

impl Embedder for TrainState {
    fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_embed(inputs, Mode::Eval)?.features)
    }
}

#[derive(Serialize, Deserialize)]
struct RbmHeader {
    gate: GateMode,
    momentum: f64,
    eps: f64,
    generation: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    epoch: u64,
    iteration: u64,
    steps_per_epoch: Option<u64>,
    rng: Rng,
    dfi_built_at: u64,
    rbm: Option<RbmHeader>,
    provenance: serde_json::Value,
}

/// Classification loss kind implied by a config; convenience for reports.
pub fn loss_kind(cfg: &ModelConfig) -> LossKind {
    cfg.loss.kind
}
