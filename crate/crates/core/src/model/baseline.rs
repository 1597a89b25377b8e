//! Linear regression of updraft on composite reflectivity.

use serde::{Deserialize, Serialize};

use crate::dataprep::{PatchSample, ScalerParams};
use crate::error::{validation, Result};
use crate::numeric::mean;

/// Composite reflectivity (dBZ) the baseline is fitted and applied above.
pub const BASELINE_MASK_DBZ: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub slope: f64,
    pub intercept: f64,
    pub mask_dbz: f64,
}

impl LinearBaseline {
    /// Ordinary least squares on pairs whose composite exceeds the mask.
    pub fn fit(composite_dbz: &[f64], w: &[f64]) -> Result<Self> {
        if composite_dbz.len() != w.len() {
            return validation("composite and updraft lengths differ");
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) =
            composite_dbz.iter().zip(w).filter(|(z, _)| **z > BASELINE_MASK_DBZ).map(|(&z, &v)| (z, v)).unzip();
        if xs.len() < 2 {
            return validation(format!("need at least two points above {BASELINE_MASK_DBZ} dBZ, got {}", xs.len()));
        }
        let (xbar, ybar) = (mean(&xs), mean(&ys));
        let sxx: Vec<f64> = xs.iter().map(|x| (x - xbar) * (x - xbar)).collect();
        let sxy: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).collect();
        let sxx = crate::numeric::pairwise_sum(&sxx);
        if sxx == 0.0 {
            return validation("composite reflectivity is constant above the mask");
        }
        let slope = crate::numeric::pairwise_sum(&sxy) / sxx;
        Ok(LinearBaseline { slope, intercept: ybar - slope * xbar, mask_dbz: BASELINE_MASK_DBZ })
    }

    pub fn predict_value(&self, composite_dbz: f64) -> f64 {
        if composite_dbz > self.mask_dbz {
            self.slope * composite_dbz + self.intercept
        } else {
            0.0
        }
    }

    pub fn predict(&self, composite_dbz: &[f64]) -> Vec<f64> {
        composite_dbz.iter().map(|&z| self.predict_value(z)).collect()
    }

    /// Fits on scaled samples, undoing the scaler to recover dBZ.
    pub fn fit_samples(samples: &[PatchSample], scaler: &ScalerParams) -> Result<Self> {
        let (mut z, mut w) = (Vec::new(), Vec::new());
        for s in samples {
            z.extend(composite_dbz(s, scaler));
            w.extend(s.y.iter().map(|&v| v as f64));
        }
        Self::fit(&z, &w)
    }

    pub fn predict_sample(&self, sample: &PatchSample, scaler: &ScalerParams) -> Vec<f64> {
        self.predict(&composite_dbz(sample, scaler))
    }
}

/// Composite reflectivity of a scaled sample, in dBZ.
pub fn composite_dbz(sample: &PatchSample, scaler: &ScalerParams) -> Vec<f64> {
    sample.composite().iter().map(|&v| scaler.invert_value(v)).collect()
}
