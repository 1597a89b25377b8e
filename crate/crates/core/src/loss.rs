//! Output-map transforms and the floored, weighted negative log likelihood.
//!
//! The network emits four unconstrained maps. Location and skewness are
//! taken as-is; scale and tailweight go through `exp(x / (10 e))`, which is
//! the `10e`-th root of `exp(x)` without forming the overflowing power.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::numeric::pairwise_sum;
use crate::shash::ShashParams;

/// Divisor applied to the raw scale and tailweight outputs before exponentiation.
pub const PARAM_SLOPE: f64 = 10.0 * E;

pub const DEFAULT_EPSILON: f64 = 1e-7;

/// Four raw output maps, flattened over the same pixel order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawParamMaps {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub y3: Vec<f64>,
    pub y4: Vec<f64>,
}

impl RawParamMaps {
    pub fn new(y1: Vec<f64>, y2: Vec<f64>, y3: Vec<f64>, y4: Vec<f64>) -> Result<Self> {
        let n = y1.len();
        if y2.len() != n || y3.len() != n || y4.len() != n {
            return validation("raw parameter maps have different lengths");
        }
        Ok(RawParamMaps { y1, y2, y3, y4 })
    }

    /// Splits a channel-major `[4, pixels]` buffer.
    pub fn from_channels(data: &[f64]) -> Result<Self> {
        if !data.len().is_multiple_of(4) {
            return validation("channel buffer length is not a multiple of 4");
        }
        let n = data.len() / 4;
        Ok(RawParamMaps {
            y1: data[..n].to_vec(),
            y2: data[n..2 * n].to_vec(),
            y3: data[2 * n..3 * n].to_vec(),
            y4: data[3 * n..].to_vec(),
        })
    }

    pub fn zeros(n: usize) -> Self {
        RawParamMaps { y1: vec![0.0; n], y2: vec![0.0; n], y3: vec![0.0; n], y4: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.y1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y1.is_empty()
    }

    pub fn pixel(&self, i: usize) -> [f64; 4] {
        [self.y1[i], self.y2[i], self.y3[i], self.y4[i]]
    }

    pub fn into_channels(self) -> Vec<f64> {
        let mut out = self.y1;
        out.extend(self.y2);
        out.extend(self.y3);
        out.extend(self.y4);
        out
    }
}

/// Two-valued pixel weighting: `weight_above` where truth >= threshold, 1 elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightPolicy {
    #[serde(rename = "weight_threshold")]
    pub threshold: f64,
    pub weight_above: f64,
}

impl Default for WeightPolicy {
    fn default() -> Self {
        WeightPolicy { threshold: 10.0, weight_above: 1.0 }
    }
}

impl WeightPolicy {
    pub const WEIGHT_BELOW: f64 = 1.0;

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) || !self.threshold.is_finite() {
            return validation(format!("weight threshold {} must be finite and >= 0", self.threshold));
        }
        if !(self.weight_above >= 1.0) || !self.weight_above.is_finite() {
            return validation(format!("weight_above {} must be finite and >= 1", self.weight_above));
        }
        Ok(())
    }

    #[inline]
    pub fn weight(&self, truth: f64) -> f64 {
        if truth >= self.threshold {
            self.weight_above
        } else {
            Self::WEIGHT_BELOW
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub epsilon: f64,
    #[serde(flatten)]
    pub weight_policy: WeightPolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { epsilon: DEFAULT_EPSILON, weight_policy: WeightPolicy::default() }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return validation(format!("epsilon {} must be positive", self.epsilon));
        }
        self.weight_policy.validate()
    }
}

#[inline]
fn pixel_params(raw: [f64; 4]) -> ShashParams {
    ShashParams { mu: raw[0], sigma: (raw[1] / PARAM_SLOPE).exp(), gamma: raw[2], tau: (raw[3] / PARAM_SLOPE).exp() }
}

fn check_finite(raw: &RawParamMaps) -> Result<()> {
    let ok = [&raw.y1, &raw.y2, &raw.y3, &raw.y4].iter().all(|m| m.iter().all(|v| v.is_finite()));
    if ok {
        Ok(())
    } else {
        validation("raw parameter maps contain non-finite values")
    }
}

/// Maps raw outputs to distribution parameters. `sigma` and `tau` are
/// strictly positive for every finite input.
pub fn transform(raw: &RawParamMaps) -> Result<Vec<ShashParams>> {
    check_finite(raw)?;
    Ok((0..raw.len()).map(|i| pixel_params(raw.pixel(i))).collect())
}

#[inline]
fn pixel_loss(params: &ShashParams, truth: f64, cfg: &LossConfig) -> f64 {
    // exp underflows to exactly 0 far in the tail; the floor keeps the log finite.
    let p = params.log_pdf(truth).exp();
    -(p + cfg.epsilon).ln() * cfg.weight_policy.weight(truth)
}

/// Weighted floored NLL. Returns the mean over pixels and the per-pixel losses.
pub fn nll(params: &[ShashParams], truth: &[f64], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    if params.len() != truth.len() {
        return validation(format!("{} parameter pixels vs {} truth pixels", params.len(), truth.len()));
    }
    if params.is_empty() {
        return validation("loss over zero pixels");
    }
    let per_pixel: Vec<f64> = params.iter().zip(truth).map(|(p, &y)| pixel_loss(p, y, cfg)).collect();
    Ok((pairwise_sum(&per_pixel) / per_pixel.len() as f64, per_pixel))
}

/// Loss of one pixel and its gradient with respect to the raw outputs.
#[inline]
pub fn pixel_loss_and_grad(raw: [f64; 4], truth: f64, cfg: &LossConfig) -> (f64, [f64; 4]) {
    let params = pixel_params(raw);
    let weight = cfg.weight_policy.weight(truth);
    let p = params.log_pdf(truth).exp();
    let loss = -(p + cfg.epsilon).ln() * weight;
    if p == 0.0 {
        return (loss, [0.0; 4]);
    }
    // d/dθ [-ln(p + eps)] = -(p / (p + eps)) dlogp/dθ
    let scale = -weight * p / (p + cfg.epsilon);
    let g = params.grad_log_pdf(truth);
    (loss, [scale * g[0], scale * g[1] * params.sigma / PARAM_SLOPE, scale * g[2], scale * g[3] * params.tau / PARAM_SLOPE])
}

/// Mean loss and its gradient with respect to each raw map.
pub fn nll_and_grad(raw: &RawParamMaps, truth: &[f64], cfg: &LossConfig) -> Result<(f64, RawParamMaps)> {
    if raw.len() != truth.len() {
        return validation(format!("{} raw pixels vs {} truth pixels", raw.len(), truth.len()));
    }
    if raw.is_empty() {
        return validation("loss over zero pixels");
    }
    check_finite(raw)?;
    let n = raw.len();
    let inv_n = 1.0 / n as f64;
    let mut losses = Vec::with_capacity(n);
    let mut grad = RawParamMaps::zeros(n);
    for (i, &y) in truth.iter().enumerate() {
        let (l, g) = pixel_loss_and_grad(raw.pixel(i), y, cfg);
        losses.push(l);
        grad.y1[i] = g[0] * inv_n;
        grad.y2[i] = g[1] * inv_n;
        grad.y3[i] = g[2] * inv_n;
        grad.y4[i] = g[3] * inv_n;
    }
    Ok((pairwise_sum(&losses) * inv_n, grad))
}

pub fn nll_grad(raw: &RawParamMaps, truth: &[f64], cfg: &LossConfig) -> Result<RawParamMaps> {
    nll_and_grad(raw, truth, cfg).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(raw: [f64; 4]) -> RawParamMaps {
        RawParamMaps::new(vec![raw[0]], vec![raw[1]], vec![raw[2]], vec![raw[3]]).unwrap()
    }

    #[test]
    fn transform_identities() {
        let p = transform(&single([1.5, 0.0, -0.3, 0.0])).unwrap()[0];
        assert_eq!((p.mu, p.sigma, p.gamma, p.tau), (1.5, 1.0, -0.3, 1.0));
        let p = transform(&single([0.0, PARAM_SLOPE, 0.0, PARAM_SLOPE])).unwrap()[0];
        assert_abs_diff_eq!(p.sigma, E, epsilon = 1e-14);
        assert_abs_diff_eq!(p.tau, E, epsilon = 1e-14);
    }

    #[test]
    fn transform_does_not_overflow() {
        let p = transform(&single([0.0, 700.0, 0.0, -700.0])).unwrap()[0];
        assert!(p.sigma.is_finite());
        assert_abs_diff_eq!(p.sigma.ln(), 700.0 / PARAM_SLOPE, epsilon = 1e-12);
        assert!(p.tau > 0.0);
    }

    #[test]
    fn transform_rejects_non_finite() {
        assert!(transform(&single([f64::NAN, 0.0, 0.0, 0.0])).is_err());
        assert!(transform(&single([0.0, f64::INFINITY, 0.0, 0.0])).is_err());
    }

    #[test]
    fn floor_bounds_loss_when_density_vanishes() {
        let cfg = LossConfig::default();
        let params = [ShashParams::normal(0.0, 1.0).unwrap()];
        let (l, _) = nll(&params, &[1e3], &cfg).unwrap();
        assert_abs_diff_eq!(l, 7.0 * 10f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 16.1181, epsilon = 1e-4);
    }

    #[test]
    fn loss_at_mode_of_standard_normal() {
        let cfg = LossConfig::default();
        let params = [ShashParams::normal(0.0, 1.0).unwrap()];
        let (l, _) = nll(&params, &[0.0], &cfg).unwrap();
        let expected = -(0.398_942_280_401_432_7f64 + 1e-7).ln();
        assert_abs_diff_eq!(l, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.918939, epsilon = 1e-6);
    }

    #[test]
    fn weighting_multiplies_pixel_loss() {
        // sigma chosen so the unweighted loss at the mode is 2.0
        let plain = LossConfig::default();
        let weighted = LossConfig { weight_policy: WeightPolicy { threshold: 10.0, weight_above: 5.0 }, ..plain };
        let params = [ShashParams::normal(12.0, (2.0 - 0.918_938_533_204_672_8f64).exp()).unwrap()];
        let (u, _) = nll(&params, &[12.0], &plain).unwrap();
        assert_abs_diff_eq!(u, 2.0, epsilon = 1e-5);
        let (w, _) = nll(&params, &[12.0], &weighted).unwrap();
        assert_abs_diff_eq!(w, 5.0 * u, epsilon = 1e-12);
        assert_abs_diff_eq!(w, 10.0, epsilon = 1e-4);
        let below = [ShashParams::normal(3.0, 1.0).unwrap()];
        assert_eq!(nll(&below, &[3.0], &plain).unwrap().0, nll(&below, &[3.0], &weighted).unwrap().0);
    }

    #[test]
    fn shape_mismatch_is_validation_error() {
        let cfg = LossConfig::default();
        let params = [ShashParams::normal(0.0, 1.0).unwrap()];
        assert!(nll(&params, &[0.0, 1.0], &cfg).is_err());
        assert!(nll_grad(&RawParamMaps::zeros(2), &[0.0], &cfg).is_err());
    }

    #[test]
    fn gradient_vanishes_at_symmetric_mode() {
        let g = nll_grad(&single([3.0, 0.0, 0.0, 0.0]), &[3.0], &LossConfig::default()).unwrap();
        assert_abs_diff_eq!(g.y1[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = LossConfig { epsilon: 1e-7, weight_policy: WeightPolicy { threshold: 5.0, weight_above: 3.0 } };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let raw =
                [rng.random_range(-5.0..5.0), rng.random_range(-20.0..20.0), rng.random_range(-1.5..1.5), rng.random_range(-15.0..15.0)];
            // truths inside the bulk of the distribution, where the floor is inactive
            let truth = pixel_params(raw).quantile(rng.random_range(0.02..0.98)).unwrap();
            let (_, g) = pixel_loss_and_grad(raw, truth, &cfg);
            for k in 0..4 {
                let h = 1e-5;
                let mut plus = raw;
                let mut minus = raw;
                plus[k] += h;
                minus[k] -= h;
                let fd = (pixel_loss_and_grad(plus, truth, &cfg).0 - pixel_loss_and_grad(minus, truth, &cfg).0) / (2.0 * h);
                let err = (g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1e-8);
                assert!(err < 1e-4, "k={k} analytic={} fd={fd}", g[k]);
            }
        }
    }

    #[test]
    fn doubling_weight_doubles_gradient_above_threshold() {
        let mk = |w| LossConfig { epsilon: 1e-7, weight_policy: WeightPolicy { threshold: 10.0, weight_above: w } };
        let raw = RawParamMaps::new(vec![8.0, 3.0], vec![5.0, 2.0], vec![0.2, -0.1], vec![1.0, -1.0]).unwrap();
        let truth = [12.0, 4.0];
        let g1 = nll_grad(&raw, &truth, &mk(2.0)).unwrap();
        let g2 = nll_grad(&raw, &truth, &mk(4.0)).unwrap();
        for (a, b) in [(&g1.y1, &g2.y1), (&g1.y2, &g2.y2), (&g1.y3, &g2.y3), (&g1.y4, &g2.y4)] {
            assert_abs_diff_eq!(b[0], 2.0 * a[0], epsilon = 1e-15);
            assert_eq!(b[1], a[1]);
        }
    }

    #[test]
    fn unit_weight_reduces_to_unweighted_loss() {
        let cfg = LossConfig { epsilon: 1e-7, weight_policy: WeightPolicy { threshold: 0.0, weight_above: 1.0 } };
        let params: Vec<_> = (0..10).map(|i| ShashParams::new(i as f64, 2.0, 0.1, 1.2).unwrap()).collect();
        let truth: Vec<f64> = (0..10).map(|i| i as f64 * 1.1).collect();
        let (l, per) = nll(&params, &truth, &cfg).unwrap();
        let by_hand: f64 = params.iter().zip(&truth).map(|(p, &y)| -(p.pdf(y) + 1e-7).ln()).sum::<f64>() / 10.0;
        assert_abs_diff_eq!(l, by_hand, epsilon = 1e-12);
        assert_eq!(per.len(), 10);
    }

    #[test]
    fn loss_config_json_uses_flat_keys() {
        let cfg: LossConfig = serde_json::from_str(r#"{"epsilon":1e-7,"weight_threshold":10.0,"weight_above":2.0}"#).unwrap();
        assert_eq!(cfg.weight_policy.weight_above, 2.0);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("weight_threshold"));
    }
}
