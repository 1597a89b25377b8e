//! Minibatch training with early stopping, and inference helpers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{ForwardPass, Mode, ModelSpec, Network, Weights, OUTPUT_CHANNELS};
use super::tensor::Tensor;
use crate::dataprep::PatchSample;
use crate::error::{validation, Error, Result};
use crate::loss::{nll_and_grad, transform, LossConfig, RawParamMaps};
use crate::shash::ShashParams;
use crate::verify::r_squared;

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.9;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    #[serde(default)]
    pub loss: LossConfig,
    pub seed: u64,
    /// Optional cap on optimizer steps across all epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            loss: LossConfig::default(),
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return validation("batch_size must be >= 1");
        }
        if self.max_epochs == 0 {
            return validation("max_epochs must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return validation("learning_rate must be positive");
        }
        if self.patience == 0 {
            return validation("patience must be >= 1");
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_r2: Option<f64>,
    pub steps: usize,
}

/// Trained weights together with the epoch they were taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub weights: Weights,
    pub epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a monitored loss. Epochs are 1-based.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0 }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            StopDecision::Improved
        } else if epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

enum OptState {
    Sgd,
    Adam { m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: i32 },
}

impl OptState {
    fn new(kind: Optimizer, w: &Weights) -> Self {
        match kind {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam => OptState::Adam { m: w.zeros_like(), v: w.zeros_like(), t: 0 },
        }
    }

    fn step(&mut self, w: &mut Weights, grads: &[Vec<f64>], lr: f64) {
        match self {
            OptState::Sgd => {
                for (p, g) in w.params.iter_mut().zip(grads) {
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t);
                let c2 = 1.0 - ADAM_BETA2.powi(*t);
                for (((p, g), mi), vi) in w.params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for k in 0..p.len() {
                        mi[k] = ADAM_BETA1 * mi[k] + (1.0 - ADAM_BETA1) * g[k];
                        vi[k] = ADAM_BETA2 * vi[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                        p[k] -= lr * (mi[k] / c1) / ((vi[k] / c2).sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
    }
}

/// Splits a `[n, 4, 1, h, w]` output into pixel-major parameter maps.
pub fn output_to_maps(out: &Tensor) -> Result<RawParamMaps> {
    let [n, c, d, h, w] = out.shape;
    if c != OUTPUT_CHANNELS || d != 1 {
        return validation(format!("expected a 4-channel 2-D output, got {c} channels x {d} depth"));
    }
    let plane = h * w;
    let mut maps =
        [Vec::with_capacity(n * plane), Vec::with_capacity(n * plane), Vec::with_capacity(n * plane), Vec::with_capacity(n * plane)];
    for b in 0..n {
        let item = out.item(b);
        for (ch, map) in maps.iter_mut().enumerate() {
            map.extend_from_slice(&item[ch * plane..(ch + 1) * plane]);
        }
    }
    let [y1, y2, y3, y4] = maps;
    RawParamMaps::new(y1, y2, y3, y4)
}

fn maps_to_tensor(maps: RawParamMaps, shape: [usize; 5]) -> Tensor {
    let [n, _, _, h, w] = shape;
    let plane = h * w;
    let mut data = vec![0.0; n * OUTPUT_CHANNELS * plane];
    for (ch, map) in [maps.y1, maps.y2, maps.y3, maps.y4].iter().enumerate() {
        for b in 0..n {
            let dst = (b * OUTPUT_CHANNELS + ch) * plane;
            data[dst..dst + plane].copy_from_slice(&map[b * plane..(b + 1) * plane]);
        }
    }
    Tensor::from_vec(shape, data)
}

fn batch_truth(samples: &[&PatchSample]) -> Vec<f64> {
    samples.iter().flat_map(|s| s.y.iter().map(|&v| v as f64)).collect()
}

fn check_dataset(spec: &ModelSpec, samples: &[PatchSample], what: &str) -> Result<()> {
    if samples.is_empty() {
        return validation(format!("{what} split is empty"));
    }
    for s in samples {
        spec.check_patch(s.levels, s.height, s.width)?;
        if s.y.iter().any(|v| !v.is_finite()) {
            return validation(format!("{what} sample {:?} has non-finite labels", s.meta));
        }
    }
    Ok(())
}

/// Result of one training-mode forward and backward pass.
pub struct BatchStep {
    /// Mean weighted NLL over the batch pixels, excluding the L2 term.
    pub loss: f64,
    /// Gradients of loss plus L2 penalty, per parameter tensor.
    pub grads: Vec<Vec<f64>>,
    pub pass: ForwardPass,
    pub pixels: usize,
}

/// Loss and parameter gradients for one batch in training mode.
pub fn batch_loss_and_grad(net: &Network, weights: &Weights, batch: &[&PatchSample], loss: &LossConfig) -> Result<BatchStep> {
    let x = net.spec.input_tensor(batch)?;
    let pass = net.forward(weights, &x, Mode::Train)?;
    if pass.output().data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("non-finite network output".into()));
    }
    let maps = output_to_maps(pass.output())?;
    let truth = batch_truth(batch);
    let (value, grad_maps) = nll_and_grad(&maps, &truth, loss)?;
    if !value.is_finite() {
        return Err(Error::Diverged("non-finite training loss".into()));
    }
    let mut grads = net.backward(weights, &pass, maps_to_tensor(grad_maps, pass.output().shape));
    net.l2_penalty(weights, Some(&mut grads));
    Ok(BatchStep { loss: value, grads, pass, pixels: truth.len() })
}

/// Mean loss and median-vs-truth R² of `samples` under eval-mode weights.
pub fn evaluate_loss(
    net: &Network,
    w: &Weights,
    samples: &[PatchSample],
    loss: &LossConfig,
    batch_size: usize,
) -> Result<(f64, Option<f64>)> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut truth_all = Vec::new();
    let mut median_all = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PatchSample> = chunk.iter().collect();
        let x = net.spec.input_tensor(&refs)?;
        let out = net.predict_raw(w, &x)?;
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("non-finite network output during evaluation".into()));
        }
        let maps = output_to_maps(&out)?;
        let truth = batch_truth(&refs);
        let params = transform(&maps)?;
        let (l, _) = crate::loss::nll(&params, &truth, loss)?;
        total += l * truth.len() as f64;
        count += truth.len();
        median_all.extend(params.iter().map(ShashParams::median));
        truth_all.extend(truth);
    }
    let r2 = r_squared(&truth_all, &median_all).ok();
    Ok((total / count as f64, r2))
}

/// Trains `spec` on `train`, monitoring `val`, and returns the weights
/// with the lowest validation loss.
pub fn train(spec: &ModelSpec, train: &[PatchSample], val: &[PatchSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(spec, train, val, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    spec: &ModelSpec,
    train: &[PatchSample],
    val: &[PatchSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = Network::new(spec)?;
    check_dataset(spec, train, "train")?;
    check_dataset(spec, val, "validation")?;
    let mut weights = net.init_weights(cfg.seed);
    let mut opt = OptState::new(cfg.optimizer, &weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = weights.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0usize;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_pixels = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&PatchSample> = idx.iter().map(|&i| &train[i]).collect();
            let step = batch_loss_and_grad(&net, &weights, &batch, &cfg.loss).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("{msg} at epoch {epoch}, step {steps}")),
                other => other,
            })?;
            let (loss, grads, pass) = (step.loss, step.grads, step.pass);
            let truth_len = step.pixels;
            opt.step(&mut weights, &grads, cfg.learning_rate);
            for (i, (mean, var)) in pass.batch_stats.iter().enumerate() {
                for (r, &b) in weights.buffers[2 * i].iter_mut().zip(mean) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
                for (r, &b) in weights.buffers[2 * i + 1].iter_mut().zip(var) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
            if !weights.is_finite() {
                return Err(Error::Diverged(format!("non-finite weights after step {steps} (epoch {epoch})")));
            }
            epoch_loss += loss * truth_len as f64;
            epoch_pixels += truth_len;
            steps += 1;
        }
        if epoch_pixels == 0 {
            break;
        }
        let (val_loss, val_r2) = evaluate_loss(&net, &weights, val, &cfg.loss, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite validation loss at epoch {epoch}")));
        }
        let record = EpochRecord { epoch, train_loss: epoch_loss / epoch_pixels as f64, val_loss, val_r2, steps };
        on_epoch(&record);
        history.push(record);
        match stopper.update(epoch, val_loss) {
            StopDecision::Improved => best = weights.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break 'epochs,
        }
    }
    if history.is_empty() {
        return validation("training ran no steps");
    }
    Ok(TrainOutcome {
        state: ModelState { spec: spec.clone(), weights: best, epoch: stopper.best_epoch, best_val_loss: stopper.best },
        history,
        steps,
    })
}

/// Per-pixel distribution parameters for each sample.
pub fn predict_params(state: &ModelState, samples: &[PatchSample], batch_size: usize) -> Result<Vec<Vec<ShashParams>>> {
    let net = Network::new(&state.spec)?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&PatchSample> = chunk.iter().collect();
        let x = state.spec.input_tensor(&refs)?;
        let params = transform(&output_to_maps(&net.predict_raw(&state.weights, &x)?)?)?;
        let plane = chunk[0].pixels();
        out.extend(params.chunks(plane).map(<[ShashParams]>::to_vec));
    }
    Ok(out)
}

/// Requested products: quantile levels and exceedance thresholds (m/s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Products {
    pub quantiles: Vec<f64>,
    pub exceedance: Vec<f64>,
}

impl Default for Products {
    fn default() -> Self {
        Products { quantiles: vec![0.5, 0.8, 0.95], exceedance: vec![5.0, 10.0, 15.0] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductMaps {
    /// `(p, map)` per requested quantile.
    pub quantiles: Vec<(f64, Vec<f64>)>,
    /// `(v, map of P(w > v))` per requested level.
    pub exceedance: Vec<(f64, Vec<f64>)>,
}

pub fn product_maps(params: &[ShashParams], products: &Products) -> Result<ProductMaps> {
    let quantiles = products
        .quantiles
        .iter()
        .map(|&p| Ok((p, params.iter().map(|d| d.quantile(p)).collect::<Result<Vec<_>>>()?)))
        .collect::<Result<_>>()?;
    let exceedance = products.exceedance.iter().map(|&v| (v, params.iter().map(|d| d.sf(v)).collect())).collect();
    Ok(ProductMaps { quantiles, exceedance })
}

/// Quantile and exceedance maps for each sample.
pub fn predict(state: &ModelState, samples: &[PatchSample], products: &Products) -> Result<Vec<ProductMaps>> {
    for &p in &products.quantiles {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile level {p} must lie in (0, 1)")));
        }
    }
    predict_params(state, samples, 32)?.iter().map(|p| product_maps(p, products)).collect()
}
