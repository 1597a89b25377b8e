//! Random hyperparameter search.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{ModelSpec, Network, SkipStyle};
use super::train::{evaluate_loss, train, ModelState, Optimizer, TrainConfig};
use crate::dataprep::PatchSample;
use crate::error::{validation, Error, Result};

/// Candidate values per hyperparameter. The defaults are editable
/// placeholders sized for CPU runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperSpace {
    pub kernel_size: Vec<usize>,
    pub base_filters: Vec<usize>,
    pub depth: Vec<usize>,
    pub skip_style: Vec<SkipStyle>,
    pub optimizer: Vec<Optimizer>,
    pub learning_rate: Vec<f64>,
    pub batch_norm: Vec<bool>,
    pub batch_size: Vec<usize>,
    pub weight_above: Vec<f64>,
    pub weight_threshold: Vec<f64>,
    pub l2_reg: Vec<f64>,
}

impl Default for HyperSpace {
    fn default() -> Self {
        HyperSpace {
            kernel_size: vec![3, 5],
            base_filters: vec![4, 8, 16],
            depth: vec![1, 2, 3],
            skip_style: vec![SkipStyle::Unet, SkipStyle::Unet3plus],
            optimizer: vec![Optimizer::Adam, Optimizer::Sgd],
            learning_rate: vec![1e-3, 3e-4],
            batch_norm: vec![false, true],
            batch_size: vec![16, 32],
            weight_above: vec![1.0, 2.0, 5.0],
            weight_threshold: vec![5.0, 10.0],
            l2_reg: vec![0.0, 1e-4],
        }
    }
}

impl HyperSpace {
    pub fn validate(&self) -> Result<()> {
        let lens = [
            ("kernel_size", self.kernel_size.len()),
            ("base_filters", self.base_filters.len()),
            ("depth", self.depth.len()),
            ("skip_style", self.skip_style.len()),
            ("optimizer", self.optimizer.len()),
            ("learning_rate", self.learning_rate.len()),
            ("batch_norm", self.batch_norm.len()),
            ("batch_size", self.batch_size.len()),
            ("weight_above", self.weight_above.len()),
            ("weight_threshold", self.weight_threshold.len()),
            ("l2_reg", self.l2_reg.len()),
        ];
        if let Some((name, _)) = lens.iter().find(|(_, n)| *n == 0) {
            return validation(format!("hyperparameter list '{name}' is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub spec: ModelSpec,
    pub train: TrainConfig,
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("validated nonempty")
}

/// Draws `n` configurations uniformly and independently from `space`.
/// Fields not in the space (input mode, levels, epochs) come from `base`.
pub fn sample_hyperparameters(space: &HyperSpace, base: &Trial, n: usize, seed: u64) -> Result<Vec<Trial>> {
    space.validate()?;
    if n == 0 {
        return validation("number of draws must be >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut spec = base.spec.clone();
        let mut cfg = base.train.clone();
        spec.kernel_size = *pick(&mut rng, &space.kernel_size);
        spec.base_filters = *pick(&mut rng, &space.base_filters);
        spec.depth = *pick(&mut rng, &space.depth);
        spec.skip_style = *pick(&mut rng, &space.skip_style);
        spec.batch_norm = *pick(&mut rng, &space.batch_norm);
        spec.l2_reg = *pick(&mut rng, &space.l2_reg);
        cfg.optimizer = *pick(&mut rng, &space.optimizer);
        cfg.learning_rate = *pick(&mut rng, &space.learning_rate);
        cfg.batch_size = *pick(&mut rng, &space.batch_size);
        cfg.loss.weight_policy.weight_above = *pick(&mut rng, &space.weight_above);
        cfg.loss.weight_policy.threshold = *pick(&mut rng, &space.weight_threshold);
        cfg.seed = base.train.seed.wrapping_add(i as u64);
        out.push(Trial { spec, train: cfg });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub index: usize,
    pub trial: Trial,
    pub val_loss: Option<f64>,
    pub val_r2: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub results: Vec<TrialResult>,
    /// Index into `results` of the run with the highest validation R².
    pub best: usize,
    pub best_state: ModelState,
}

/// Trains every draw and keeps the one with the highest validation R²
/// between predicted median and truth. Failed runs are recorded and skipped.
pub fn hypersearch(
    space: &HyperSpace,
    base: &Trial,
    n: usize,
    seed: u64,
    train_set: &[PatchSample],
    val_set: &[PatchSample],
    mut on_trial: impl FnMut(&TrialResult),
) -> Result<SearchOutcome> {
    let trials = sample_hyperparameters(space, base, n, seed)?;
    let mut results = Vec::with_capacity(n);
    let mut best: Option<(usize, f64, ModelState)> = None;
    for (index, trial) in trials.into_iter().enumerate() {
        let outcome = train(&trial.spec, train_set, val_set, &trial.train).and_then(|o| {
            let net = Network::new(&trial.spec)?;
            let (loss, r2) = evaluate_loss(&net, &o.state.weights, val_set, &trial.train.loss, trial.train.batch_size)?;
            Ok((o.state, loss, r2))
        });
        let result = match outcome {
            Ok((state, loss, r2)) => {
                if let Some(r) = r2 {
                    if best.as_ref().is_none_or(|(_, b, _)| r > *b) {
                        best = Some((index, r, state.clone()));
                    }
                }
                TrialResult { index, trial, val_loss: Some(loss), val_r2: r2, best_epoch: Some(state.epoch), error: None }
            }
            Err(e @ (Error::Diverged(_) | Error::Validation(_))) => {
                TrialResult { index, trial, val_loss: None, val_r2: None, best_epoch: None, error: Some(e.to_string()) }
            }
            Err(e) => return Err(e),
        };
        on_trial(&result);
        results.push(result);
    }
    let (best, _, best_state) = best.ok_or_else(|| Error::Diverged("no hyperparameter trial produced a usable model".into()))?;
    Ok(SearchOutcome { results, best, best_state })
}
