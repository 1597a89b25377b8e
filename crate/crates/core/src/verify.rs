//! Deterministic and probabilistic verification metrics.
//!
//! Metrics that have no defined value for a given input (an empty
//! selection, a zero-variance truth field) return
//! [`Error::UndefinedMetric`] instead of NaN.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::numeric::{mean, pairwise_sum};
use crate::shash::ShashParams;

pub const PIT_BINS: usize = 10;

fn undefined<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::UndefinedMetric(msg.into()))
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return validation(format!("length mismatch: {a} vs {b}"));
    }
    Ok(())
}

/// Root-mean-square error over all pixels.
pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(truth.len(), pred.len())?;
    if truth.is_empty() {
        return undefined("rmse of an empty field");
    }
    let sq: Vec<f64> = truth.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).collect();
    Ok(mean(&sq).sqrt())
}

/// RMSE restricted to pixels whose truth is at least `t`.
pub fn crmse(truth: &[f64], pred: &[f64], t: f64) -> Result<f64> {
    check_len(truth.len(), pred.len())?;
    let sq: Vec<f64> = truth.iter().zip(pred).filter(|(y, _)| **y >= t).map(|(y, p)| (y - p) * (y - p)).collect();
    if sq.is_empty() {
        return undefined(format!("no truth pixels >= {t} for crmse"));
    }
    Ok(mean(&sq).sqrt())
}

/// Pixels strictly above `t`.
pub fn binary_mask(field: &[f64], t: f64) -> Vec<bool> {
    field.iter().map(|&v| v > t).collect()
}

/// Intersection over union of the masks `a > t` and `b > t`.
pub fn iou(a: &[f64], b: &[f64], t: f64) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (ma, mb) = (x > t, y > t);
        inter += (ma && mb) as usize;
        union += (ma || mb) as usize;
    }
    if union == 0 {
        return undefined(format!("both masks empty at threshold {t}"));
    }
    Ok(inter as f64 / union as f64)
}

/// Coefficient of determination `1 - SSres/SStot`.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(truth.len(), pred.len())?;
    if truth.len() < 2 {
        return undefined("r2 needs at least two pixels");
    }
    let ybar = mean(truth);
    let res: Vec<f64> = truth.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).collect();
    let tot: Vec<f64> = truth.iter().map(|y| (y - ybar) * (y - ybar)).collect();
    let ss_tot = pairwise_sum(&tot);
    if ss_tot == 0.0 {
        return undefined("truth has zero variance");
    }
    Ok(1.0 - pairwise_sum(&res) / ss_tot)
}

/// Probability integral transform of each truth under its distribution.
pub fn pit(params: &[ShashParams], truth: &[f64]) -> Result<Vec<f64>> {
    check_len(params.len(), truth.len())?;
    Ok(params.iter().zip(truth).map(|(p, &y)| p.cdf(y)).collect())
}

/// Normalized PIT histogram over ten equal bins on `[0, 1]`. Bins are
/// right-exclusive except the last, which includes 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitHistogram {
    pub edges: Vec<f64>,
    pub freq: Vec<f64>,
}

impl PitHistogram {
    pub fn from_values(pit: &[f64]) -> Result<Self> {
        if pit.is_empty() {
            return undefined("PIT histogram of no values");
        }
        let mut counts = [0usize; PIT_BINS];
        for &v in pit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("PIT value {v} outside [0, 1]")));
            }
            counts[((v * PIT_BINS as f64) as usize).min(PIT_BINS - 1)] += 1;
        }
        let n = pit.len() as f64;
        Ok(PitHistogram {
            edges: (0..=PIT_BINS).map(|k| k as f64 / PIT_BINS as f64).collect(),
            freq: counts.iter().map(|&c| c as f64 / n).collect(),
        })
    }

    pub fn from_freq(freq: Vec<f64>) -> Result<Self> {
        if freq.is_empty() || freq.iter().any(|&f| !(f >= 0.0)) {
            return validation("histogram frequencies must be nonempty and >= 0");
        }
        let b = freq.len();
        Ok(PitHistogram { edges: (0..=b).map(|k| k as f64 / b as f64).collect(), freq })
    }
}

/// Root-mean-square deviation of the bin frequencies from uniform.
pub fn pitd(hist: &PitHistogram) -> f64 {
    let b = hist.freq.len() as f64;
    let dev: Vec<f64> = hist.freq.iter().map(|f| (f - 1.0 / b).powi(2)).collect();
    (pairwise_sum(&dev) / b).sqrt()
}

/// Fraction of truths inside the predicted interquartile range, bounds
/// inclusive.
pub fn iqr_rate(params: &[ShashParams], truth: &[f64]) -> Result<f64> {
    check_len(params.len(), truth.len())?;
    if truth.is_empty() {
        return undefined("iqr rate of no pixels");
    }
    let mut hits = 0usize;
    for (p, &y) in params.iter().zip(truth) {
        if p.quantile(0.25)? <= y && y <= p.quantile(0.75)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / truth.len() as f64)
}

/// Percentage of pixels strictly above `t`.
pub fn area_fraction(field: &[f64], t: f64) -> Result<f64> {
    if field.is_empty() {
        return undefined("area fraction of an empty field");
    }
    let above = field.iter().filter(|&&v| v > t).count();
    Ok(100.0 * above as f64 / field.len() as f64)
}

pub fn area_fraction_series(frames: &[Vec<f64>], t: f64) -> Result<Vec<f64>> {
    frames.iter().map(|f| area_fraction(f, t)).collect()
}

/// Per-frame IoU; frames where both masks are empty yield `None`.
pub fn iou_series(truth: &[Vec<f64>], pred: &[Vec<f64>], t: f64) -> Result<Vec<Option<f64>>> {
    check_len(truth.len(), pred.len())?;
    truth
        .iter()
        .zip(pred)
        .map(|(a, b)| match iou(a, b, t) {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Predictions for one evaluation frame.
#[derive(Debug, Clone)]
pub enum Prediction {
    Distribution(Vec<ShashParams>),
    Deterministic(Vec<f64>),
}

impl Prediction {
    pub fn len(&self) -> usize {
        match self {
            Prediction::Distribution(p) => p.len(),
            Prediction::Deterministic(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Median map (the value itself for deterministic predictions).
    pub fn median(&self) -> Vec<f64> {
        match self {
            Prediction::Distribution(p) => p.iter().map(ShashParams::median).collect(),
            Prediction::Deterministic(v) => v.clone(),
        }
    }
}

/// Truth and prediction for a single frame, with an optional mask of
/// evaluated pixels.
#[derive(Debug, Clone)]
pub struct EvalPairs {
    pub truth: Vec<f64>,
    pub pred: Prediction,
    pub mask: Option<Vec<bool>>,
}

impl EvalPairs {
    pub fn new(truth: Vec<f64>, pred: Prediction, mask: Option<Vec<bool>>) -> Result<Self> {
        check_len(truth.len(), pred.len())?;
        if let Some(m) = &mask {
            check_len(truth.len(), m.len())?;
        }
        Ok(EvalPairs { truth, pred, mask })
    }

    fn keep(&self, i: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[i])
    }

    pub fn n(&self) -> usize {
        (0..self.truth.len()).filter(|&i| self.keep(i)).count()
    }

    fn selected_truth(&self) -> Vec<f64> {
        self.truth.iter().enumerate().filter(|(i, _)| self.keep(*i)).map(|(_, &v)| v).collect()
    }

    fn selected_median(&self) -> Vec<f64> {
        let m = self.pred.median();
        m.into_iter().enumerate().filter(|(i, _)| self.keep(*i)).map(|(_, v)| v).collect()
    }

    fn selected_params(&self) -> Option<Vec<ShashParams>> {
        match &self.pred {
            Prediction::Distribution(p) => Some(p.iter().enumerate().filter(|(i, _)| self.keep(*i)).map(|(_, &v)| v).collect()),
            Prediction::Deterministic(_) => None,
        }
    }
}

/// Wall-clock timings of repeated batches, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub batch_size: usize,
    pub timings_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl Timings {
    pub fn from_samples(batch_size: usize, timings_ms: Vec<f64>) -> Self {
        let mean_ms = if timings_ms.is_empty() { 0.0 } else { mean(&timings_ms) };
        let var = if timings_ms.len() > 1 {
            let dev: Vec<f64> = timings_ms.iter().map(|t| (t - mean_ms).powi(2)).collect();
            pairwise_sum(&dev) / (timings_ms.len() - 1) as f64
        } else {
            0.0
        };
        Timings { batch_size, timings_ms, mean_ms, std_ms: var.sqrt() }
    }

    pub fn per_image_ms(&self) -> f64 {
        self.mean_ms / self.batch_size as f64
    }
}

/// Times `n_batches` calls of `run_batch`. Inputs should be prepared by
/// the caller so that loading is excluded.
pub fn timeit(batch_size: usize, n_batches: usize, mut run_batch: impl FnMut() -> Result<()>) -> Result<Timings> {
    if batch_size == 0 || n_batches == 0 {
        return validation("batch_size and n_batches must be positive");
    }
    let mut samples = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let start = Instant::now();
        run_batch()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Timings::from_samples(batch_size, samples))
}

/// Truth and predicted area fractions per frame for one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaSeries {
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
}

/// Evaluation summary. Threshold-keyed entries are `null` when the
/// metric is undefined for the data; the reason is listed in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub rmse: f64,
    pub crmse: BTreeMap<String, Option<f64>>,
    pub iou: BTreeMap<String, Option<f64>>,
    pub r2: Option<f64>,
    pub pitd: Option<f64>,
    pub pit_hist: Option<Vec<f64>>,
    pub iqrr: Option<f64>,
    /// Distance of the IQR rate from its ideal value 0.5.
    pub iqrr_offset: Option<f64>,
    pub area_fraction_series: BTreeMap<String, AreaSeries>,
    pub iou_series: BTreeMap<String, Vec<Option<f64>>>,
    pub timings: Option<Timings>,
    pub undefined: Vec<String>,
}

fn threshold_key(t: f64) -> String {
    format!("{t}")
}

fn optional(result: Result<f64>, undefined_list: &mut Vec<String>) -> Result<Option<f64>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(msg)) => {
            undefined_list.push(msg);
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Evaluates a sequence of frames. Pixel metrics pool every frame; the
/// area and IoU series have one entry per frame.
pub fn evaluate(frames: &[EvalPairs], thresholds: &[f64]) -> Result<EvalReport> {
    if frames.is_empty() {
        return undefined("no frames to evaluate");
    }
    let mut truth = Vec::new();
    let mut median = Vec::new();
    let mut params = Vec::new();
    let mut probabilistic = true;
    for f in frames {
        truth.extend(f.selected_truth());
        median.extend(f.selected_median());
        match f.selected_params() {
            Some(p) => params.extend(p),
            None => probabilistic = false,
        }
    }
    let mut undefined_list = Vec::new();
    let rmse_value = rmse(&truth, &median)?;
    let mut crmse_map = BTreeMap::new();
    let mut iou_map = BTreeMap::new();
    let mut area_map = BTreeMap::new();
    let mut iou_series_map = BTreeMap::new();
    let truth_frames: Vec<Vec<f64>> = frames.iter().map(EvalPairs::selected_truth).collect();
    let median_frames: Vec<Vec<f64>> = frames.iter().map(EvalPairs::selected_median).collect();
    for &t in thresholds {
        let key = threshold_key(t);
        crmse_map.insert(key.clone(), optional(crmse(&truth, &median, t), &mut undefined_list)?);
        iou_map.insert(key.clone(), optional(iou(&truth, &median, t), &mut undefined_list)?);
        area_map.insert(
            key.clone(),
            AreaSeries { truth: area_fraction_series(&truth_frames, t)?, pred: area_fraction_series(&median_frames, t)? },
        );
        iou_series_map.insert(key, iou_series(&truth_frames, &median_frames, t)?);
    }
    let r2 = optional(r_squared(&truth, &median), &mut undefined_list)?;
    let (pitd_value, pit_hist, iqrr) = if probabilistic {
        let hist = PitHistogram::from_values(&pit(&params, &truth)?)?;
        (Some(pitd(&hist)), Some(hist.freq), Some(iqr_rate(&params, &truth)?))
    } else {
        (None, None, None)
    };
    Ok(EvalReport {
        n: truth.len(),
        rmse: rmse_value,
        crmse: crmse_map,
        iou: iou_map,
        r2,
        pitd: pitd_value,
        pit_hist,
        iqrr,
        iqrr_offset: iqrr.map(|v| (v - 0.5).abs()),
        area_fraction_series: area_map,
        iou_series: iou_series_map,
        timings: None,
        undefined: undefined_list,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-frame time series as CSV: `frame,threshold,truth_area,pred_area,iou`.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("frame,threshold,truth_area,pred_area,iou\n");
        for (key, series) in &self.area_fraction_series {
            let ious = &self.iou_series[key];
            for (i, (a, b)) in series.truth.iter().zip(&series.pred).enumerate() {
                let iou = ious[i].map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{i},{key},{a},{b},{iou}");
            }
        }
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: Option<&Path>) -> Result<()> {
        std::fs::write(json_path, self.to_json()?)?;
        if let Some(p) = csv_path {
            std::fs::write(p, self.series_csv())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_worked_example() {
        assert_eq!(rmse(&[0.0, 0.0, 3.0, 4.0], &[0.0; 4]).unwrap(), 2.5);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn crmse_worked_example() {
        assert_eq!(crmse(&[12.0, 3.0], &[9.0, 0.0], 5.0).unwrap(), 3.0);
        assert!(matches!(crmse(&[1.0], &[0.0], 5.0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn crmse_at_negative_infinity_is_rmse() {
        let y = [1.0, -2.0, 7.5];
        let p = [0.0, 1.0, 2.0];
        assert_eq!(crmse(&y, &p, f64::NEG_INFINITY).unwrap(), rmse(&y, &p).unwrap());
    }

    #[test]
    fn iou_cases() {
        let a = [6.0, 6.0, 0.0, 0.0];
        assert_eq!(iou(&a, &a, 5.0).unwrap(), 1.0);
        assert_eq!(iou(&a, &[0.0, 0.0, 6.0, 6.0], 5.0).unwrap(), 0.0);
        let a = [9.0, 9.0, 9.0, 9.0, 0.0, 0.0];
        let b = [9.0, 9.0, 0.0, 0.0, 9.0, 9.0];
        assert_abs_diff_eq!(iou(&a, &b, 5.0).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(iou(&[0.0], &[0.0], 5.0), Err(Error::UndefinedMetric(_))));
        // strict threshold
        assert!(iou(&[5.0], &[5.0], 5.0).is_err());
    }

    #[test]
    fn r2_cases() {
        assert_eq!(r_squared(&[0.0, 1.0, 2.0], &[0.0, 0.0, 2.0]).unwrap(), 0.5);
        assert_eq!(r_squared(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(r_squared(&[3.0, 1.0], &[3.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(r_squared(&[2.0, 2.0], &[1.0, 2.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn pitd_cases() {
        assert_eq!(pitd(&PitHistogram::from_freq(vec![0.1; 10]).unwrap()), 0.0);
        let mut one_hot = vec![0.0; 10];
        one_hot[4] = 1.0;
        assert_abs_diff_eq!(pitd(&PitHistogram::from_freq(one_hot).unwrap()), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn pit_histogram_binning() {
        let h = PitHistogram::from_values(&[0.0, 0.1, 0.95, 1.0]).unwrap();
        assert_eq!(h.freq[0], 0.25);
        assert_eq!(h.freq[1], 0.25);
        assert_eq!(h.freq[9], 0.5);
        assert_abs_diff_eq!(h.freq.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(PitHistogram::from_values(&[]).is_err());
    }

    #[test]
    fn pit_at_median_is_half() {
        let params = vec![ShashParams::new(1.0, 2.0, 0.4, 1.3).unwrap(); 5];
        let truth: Vec<f64> = params.iter().map(ShashParams::median).collect();
        for v in pit(&params, &truth).unwrap() {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn iqr_rate_far_above() {
        let params = vec![ShashParams::normal(0.0, 1.0).unwrap(); 10];
        assert_eq!(iqr_rate(&params, &[100.0; 10]).unwrap(), 0.0);
    }

    #[test]
    fn area_fraction_cases() {
        assert_eq!(area_fraction(&[6.0; 4], 5.0).unwrap(), 100.0);
        assert_eq!(area_fraction(&[1.0; 4], 5.0).unwrap(), 0.0);
        let mut field = vec![0.0; 2500];
        field[..125].fill(7.0);
        assert_eq!(area_fraction(&field, 5.0).unwrap(), 5.0);
    }

    #[test]
    fn iou_symmetric_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..20.0)).collect();
            let b: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..20.0)).collect();
            assert_eq!(iou(&a, &b, 10.0).unwrap(), iou(&b, &a, 10.0).unwrap());
        }
    }

    #[test]
    fn timing_count_and_stats() {
        let t = timeit(32, 30, || Ok(())).unwrap();
        assert_eq!(t.timings_ms.len(), 30);
        assert!(t.std_ms >= 0.0);
        let fixed = Timings::from_samples(2, vec![1.0, 3.0]);
        assert_eq!(fixed.mean_ms, 2.0);
        assert_abs_diff_eq!(fixed.std_ms, 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(fixed.per_image_ms(), 1.0);
    }

    #[test]
    fn evaluate_perfect_prediction() {
        let truth = vec![0.0, 6.0, 12.0, 20.0];
        let frames = vec![EvalPairs::new(truth.clone(), Prediction::Deterministic(truth), None).unwrap()];
        let r = evaluate(&frames, &[5.0, 10.0, 15.0]).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.iou["5"], Some(1.0));
        assert_eq!(r.r2, Some(1.0));
        assert!(r.pitd.is_none());
        assert!(r.series_csv().lines().count() == 4);
    }

    #[test]
    fn evaluate_records_undefined() {
        let truth = vec![1.0, 2.0];
        let params = vec![ShashParams::normal(1.5, 1.0).unwrap(); 2];
        let frames = vec![EvalPairs::new(truth, Prediction::Distribution(params), None).unwrap()];
        let r = evaluate(&frames, &[50.0]).unwrap();
        assert_eq!(r.crmse["50"], None);
        assert_eq!(r.iou["50"], None);
        assert_eq!(r.undefined.len(), 2);
        assert!(r.pitd.is_some());
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in ["rmse", "crmse", "iou", "r2", "pitd", "pit_hist", "iqrr", "area_fraction_series", "timings"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn mask_restricts_pixels() {
        let frames = vec![EvalPairs::new(
            vec![0.0, 0.0, 3.0, 4.0, 100.0],
            Prediction::Deterministic(vec![0.0; 5]),
            Some(vec![true, true, true, true, false]),
        )
        .unwrap()];
        let r = evaluate(&frames, &[]).unwrap();
        assert_eq!(r.n, 4);
        assert_eq!(r.rmse, 2.5);
    }
}
