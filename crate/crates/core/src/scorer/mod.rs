//! Per-point crack confidence.
//!
//! A window goes in as a [`NormalizedVoxel`] and comes out as one
//! confidence per member point. Behind that contract sits a compact
//! network over hand-made local descriptors ([`features`]) trained with
//! the focal loss ([`loss`]).

pub mod features;
pub mod loss;
pub mod network;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{self, DatasetStats, FeatureMask, NormalizationStats, NormalizedVoxel};
use crate::error::{Error, Result};
use crate::voxelizer::derive_seed;
use features::{extract_features, feature_width, FeatureMatrix};
use loss::{focal_term, sigmoid_confidence};
use network::{Adam, Dense, Dropout, Gradients, Mlp};

pub use loss::{focal_loss, focal_loss_gradient};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub gamma: f64,
    /// Weight of the crack class, in (0,1).
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// The learning rate is multiplied by `decay_factor` every
    /// `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Jitter window coordinates every epoch.
    pub perturb: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            gamma: 4.0,
            alpha: 0.75,
            epochs: 101,
            learning_rate: 0.01,
            decay_factor: 0.5,
            decay_every: 10,
            batch_size: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            hidden: vec![64, 64, 32],
            dropout: 0.5,
            perturb: true,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("focal gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("focal alpha must be in (0,1), got {}", self.alpha));
        }
        if !(self.learning_rate > 0.0 && self.decay_factor > 0.0 && self.epsilon > 0.0) {
            return bad("learning rate, decay factor and epsilon must be positive".into());
        }
        if self.batch_size == 0 || self.decay_every == 0 || self.epochs == 0 {
            return bad("epochs, batch size and decay interval must be positive".into());
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden layer widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// The focal-loss grid searched by the sweep runner: every γ paired with
/// every crack-class weight.
pub fn focal_sweep_grid() -> Vec<(f64, f64)> {
    let mut grid = Vec::new();
    for gamma in [2.0, 3.0, 4.0, 5.0] {
        for alpha in [0.10, 0.25, 0.50, 0.75, 0.90] {
            grid.push((gamma, alpha));
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (best validation F1).
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tlr\ttrain_loss\tval_loss\tprecision\trecall\tf1\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.epoch, e.learning_rate, e.train_loss, e.val_loss, e.precision, e.recall, e.f1
            ));
        }
        out.push_str(&format!("# best_epoch\t{}\n", self.best_epoch));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerModel {
    pub net: Mlp,
    pub mask: FeatureMask,
    pub stats: NormalizationStats,
    /// Features are mapped to `(f - shift) * scale` before the network.
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub config: TrainingConfig,
}

/// Builds an untrained model whose every output equals the crack prior
/// `N_pos / (N_pos + N_neg)`: output weights start at zero and the output
/// bias at `ln(N_pos / N_neg)`.
pub fn init_model(
    config: &TrainingConfig,
    dataset: DatasetStats,
    stats: NormalizationStats,
    mask: FeatureMask,
    seed: u64,
) -> Result<ScorerModel> {
    config.validate()?;
    if dataset.positives == 0 || dataset.negatives == 0 {
        return Err(Error::DegenerateClasses {
            positives: dataset.positives,
            negatives: dataset.negatives,
        });
    }
    let width = feature_width(mask);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut fan_in = width;
    for &h in &config.hidden {
        let mut d = Dense::zeros(fan_in, h);
        let bound = 1.0 / (fan_in as f64).sqrt();
        d.weights.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        layers.push(d);
        fan_in = h;
    }
    let mut out = Dense::zeros(fan_in, 1);
    out.bias[0] = (dataset.positives as f64 / dataset.negatives as f64).ln();
    layers.push(out);

    let hidden = config.hidden.len();
    let dropout = (config.dropout > 0.0 && hidden >= 2).then(|| Dropout {
        after_layer: hidden - 2,
        rate: config.dropout,
    });
    Ok(ScorerModel {
        net: Mlp { layers, dropout },
        mask,
        stats,
        input_shift: vec![0.0; width],
        input_scale: vec![1.0; width],
        config: config.clone(),
    })
}

impl ScorerModel {
    fn standardize(&self, f: &mut FeatureMatrix) {
        assert_eq!(f.cols, self.input_shift.len(), "feature width does not match the model");
        for row in f.data.chunks_mut(f.cols) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.input_shift[k]) * self.input_scale[k];
            }
        }
    }

    fn inputs(&self, voxel: &NormalizedVoxel) -> FeatureMatrix {
        assert_eq!(voxel.mask, self.mask, "voxel features differ from the model's feature mask");
        let mut f = extract_features(voxel);
        self.standardize(&mut f);
        f
    }

    fn confidences(&self, f: &FeatureMatrix) -> Vec<f64> {
        self.net.forward(&f.data, f.rows).into_iter().map(sigmoid_confidence).collect()
    }
}

/// Confidence for each member of the window, in member order.
pub fn predict(model: &ScorerModel, voxel: &NormalizedVoxel) -> Vec<f64> {
    model.confidences(&model.inputs(voxel))
}

/// Precision, recall and F1 of `confidence >= 0.5` against labels.
fn scores_at_half(conf: &[f64], labels: &[u8]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&c, &y) in conf.iter().zip(labels) {
        match (c >= 0.5, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Runs the full schedule and returns the weights of the epoch with the
/// best validation F1 (earliest on ties) together with the history.
pub fn train(
    model: &ScorerModel,
    train_set: &[NormalizedVoxel],
    val_set: &[NormalizedVoxel],
    config: &TrainingConfig,
) -> Result<(ScorerModel, TrainingHistory)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    let mut model = model.clone();
    model.config = config.clone();
    fit_standardization(&mut model, train_set);

    let val_inputs: Vec<FeatureMatrix> = val_set.par_iter().map(|v| model.inputs(v)).collect();
    let val_labels: Vec<u8> = val_set.iter().flat_map(|v| v.labels.iter().copied()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.net, config.beta1, config.beta2, config.epsilon);
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, ScorerModel)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut point_count = 0usize;
        for batch in order.chunks(config.batch_size) {
            let batch_points: usize = batch.iter().map(|&i| train_set[i].len()).sum();
            let inv = 1.0 / batch_points as f64;
            let parts: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&i| {
                    let salt = derive_seed(config.seed, ((epoch as u64) << 32) | i as u64);
                    voxel_gradient(&model, &train_set[i], config, salt, inv)
                })
                .collect();
            let mut grads = Gradients::zeros_like(&model.net);
            for (loss, g) in &parts {
                loss_sum += loss;
                grads.add(g);
            }
            point_count += batch_points;
            adam.update(&mut model.net, &grads, lr);
        }
        let train_loss = loss_sum / point_count as f64;
        let weights_finite = model
            .net
            .layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|w| w.is_finite()));
        if !train_loss.is_finite() || !weights_finite {
            return Err(Error::Diverged {
                epoch,
                loss: train_loss,
            });
        }

        let val_conf: Vec<f64> = val_inputs.par_iter().flat_map(|f| model.confidences(f)).collect();
        let val_loss = focal_loss(&val_conf, &val_labels, config.gamma, config.alpha)?;
        let (precision, recall, f1) = scores_at_half(&val_conf, &val_labels);
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            val_loss,
            precision,
            recall,
            f1,
        });
        log::info!(
            "epoch {epoch:>3} lr {lr:.2e} loss {train_loss:.5} val {val_loss:.5} P {precision:.3} R {recall:.3} F1 {f1:.3}"
        );
        if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
            best = Some((f1, model.clone()));
            history.best_epoch = epoch;
        }
    }
    Ok((best.map(|b| b.1).unwrap_or(model), history))
}

/// Loss sum and gradient (scaled by `scale`) of one window.
fn voxel_gradient(
    model: &ScorerModel,
    voxel: &NormalizedVoxel,
    config: &TrainingConfig,
    salt: u64,
    scale: f64,
) -> (f64, Gradients) {
    let f = if config.perturb {
        let mut v = voxel.clone();
        dataset::perturb(&mut v, model.stats.d, salt);
        model.inputs(&v)
    } else {
        model.inputs(voxel)
    };
    let trace = model.net.forward_trace(&f.data, f.rows, Some(salt ^ 0xD50F));
    let mut loss = 0.0;
    let d_logits: Vec<f64> = trace
        .logits()
        .iter()
        .zip(&voxel.labels)
        .map(|(&z, &y)| {
            let (l, g) = focal_term(sigmoid_confidence(z), y, config.gamma, config.alpha);
            loss += l;
            g * scale
        })
        .collect();
    (loss, model.net.backward(&trace, &d_logits))
}

/// Sets the input affine map to zero mean and unit variance over the
/// unperturbed training features. Constant columns keep scale 1.
fn fit_standardization(model: &mut ScorerModel, train_set: &[NormalizedVoxel]) {
    let width = model.input_shift.len();
    let feats: Vec<FeatureMatrix> = train_set.par_iter().map(extract_features).collect();
    let mut sum = vec![0.0; width];
    let mut sq = vec![0.0; width];
    let mut n = 0usize;
    for f in &feats {
        for row in f.data.chunks(f.cols) {
            for k in 0..width {
                sum[k] += row[k];
                sq[k] += row[k] * row[k];
            }
        }
        n += f.rows;
    }
    for k in 0..width {
        let mean = sum[k] / n as f64;
        let var = (sq[k] / n as f64 - mean * mean).max(0.0);
        model.input_shift[k] = mean;
        model.input_scale[k] = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    }
}

const MAGIC: &[u8; 8] = b"CRKSCORE";
const VERSION: u32 = 1;

impl ScorerModel {
    /// Versioned little-endian container: header, feature mask,
    /// normalization stats, training configuration, input map, layers.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u8(self.mask.rgb as u8 | (self.mask.intensity as u8) << 1);
        self.stats.min.iter().chain(&self.stats.max).for_each(|&v| w.f64(v));
        w.f64(self.stats.d);
        let c = &self.config;
        for v in [c.gamma, c.alpha, c.learning_rate, c.decay_factor, c.beta1, c.beta2, c.epsilon, c.dropout] {
            w.f64(v);
        }
        for v in [c.epochs, c.decay_every, c.batch_size] {
            w.u32(v as u32);
        }
        w.u8(c.perturb as u8);
        w.u64(c.seed);
        w.u32(c.hidden.len() as u32);
        c.hidden.iter().for_each(|&h| w.u32(h as u32));
        w.f64s(&self.input_shift);
        w.f64s(&self.input_scale);
        match self.net.dropout {
            Some(d) => {
                w.u32(d.after_layer as u32);
                w.f64(d.rate);
            }
            None => {
                w.u32(u32::MAX);
                w.f64(0.0);
            }
        }
        w.u32(self.net.layers.len() as u32);
        for l in &self.net.layers {
            w.u32(l.inputs as u32);
            w.u32(l.outputs as u32);
            l.weights.iter().for_each(|&v| w.f64(v));
            l.bias.iter().for_each(|&v| w.f64(v));
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Model("not a scorer model file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Model(format!("unsupported model version {version}")));
        }
        let bits = r.u8()?;
        let mask = FeatureMask {
            rgb: bits & 1 != 0,
            intensity: bits & 2 != 0,
        };
        let mut min = [0.0; 4];
        let mut max = [0.0; 4];
        for v in min.iter_mut().chain(max.iter_mut()) {
            *v = r.f64()?;
        }
        let stats = NormalizationStats { min, max, d: r.f64()? };
        let mut reals = [0.0; 8];
        for v in &mut reals {
            *v = r.f64()?;
        }
        let [gamma, alpha, learning_rate, decay_factor, beta1, beta2, epsilon, dropout] = reals;
        let epochs = r.u32()? as usize;
        let decay_every = r.u32()? as usize;
        let batch_size = r.u32()? as usize;
        let perturb = r.u8()? != 0;
        let seed = r.u64()?;
        let nh = r.u32()? as usize;
        let hidden = (0..nh).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let config = TrainingConfig {
            gamma,
            alpha,
            epochs,
            learning_rate,
            decay_factor,
            decay_every,
            batch_size,
            beta1,
            beta2,
            epsilon,
            hidden,
            dropout,
            perturb,
            seed,
        };
        let input_shift = r.f64s()?;
        let input_scale = r.f64s()?;
        let after = r.u32()?;
        let rate = r.f64()?;
        let dropout = (after != u32::MAX).then_some(Dropout {
            after_layer: after as usize,
            rate,
        });
        let nl = r.u32()? as usize;
        let mut layers = Vec::with_capacity(nl);
        for _ in 0..nl {
            let inputs = r.u32()? as usize;
            let outputs = r.u32()? as usize;
            let mut d = Dense::zeros(inputs, outputs);
            for v in d.weights.iter_mut().chain(d.bias.iter_mut()) {
                *v = r.f64()?;
            }
            layers.push(d);
        }
        if r.pos != bytes.len() {
            return Err(Error::Model("trailing bytes after model".into()));
        }
        let model = ScorerModel {
            net: Mlp { layers, dropout },
            mask,
            stats,
            input_shift,
            input_scale,
            config,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let width = feature_width(self.mask);
        let layers = &self.net.layers;
        let ok = !layers.is_empty()
            && layers[0].inputs == width
            && layers.windows(2).all(|w| w[0].outputs == w[1].inputs)
            && layers.last().unwrap().outputs == 1
            && self.input_shift.len() == width
            && self.input_scale.len() == width;
        if ok {
            Ok(())
        } else {
            Err(Error::Model("layer shapes are inconsistent".into()))
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Model("truncated model file".into()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }
}
