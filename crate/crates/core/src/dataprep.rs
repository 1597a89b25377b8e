//! Patch datasets: slicing, convection filtering, min-max scaling,
//! half-precision archival, and a synthetic storm generator used in place
//! of model-simulated training data.
//!
//! Patches store reflectivity channel-first as `[level][row][col]`; labels
//! are the column-maximum vertical velocity `[row][col]` in m/s.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::grid_io::{linspace, read_grid, write_grid, Dtype, Grid3D, HeightDatum};

pub const CONVECTION_THRESHOLD: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleMeta {
    pub source: String,
    pub origin: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub levels: usize,
    pub height: usize,
    pub width: usize,
    /// Reflectivity, `[level][row][col]`. NaN marks no data before scaling.
    pub x: Vec<f32>,
    /// Column-max vertical velocity, `[row][col]`.
    pub y: Vec<f32>,
    pub meta: SampleMeta,
}

impl PatchSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn max_label(&self) -> f64 {
        self.y.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64))
    }

    /// Column maximum of the reflectivity channels.
    pub fn composite(&self) -> Vec<f32> {
        let n = self.pixels();
        let mut out = vec![f32::NEG_INFINITY; n];
        for l in 0..self.levels {
            for (o, &v) in out.iter_mut().zip(&self.x[l * n..(l + 1) * n]) {
                if v > *o {
                    *o = v;
                }
            }
        }
        out
    }

    /// Checks the patch can pass through `depth` halvings.
    pub fn check_divisible(&self, depth: usize) -> Result<()> {
        let f = 1usize << depth;
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return validation(format!("patch {}x{} is not divisible by 2^{depth}", self.height, self.width));
        }
        Ok(())
    }
}

/// Cuts a `size = (rows, cols)` window at `origin` out of co-registered
/// reflectivity and vertical-velocity volumes.
pub fn slice_patch(refl: &Grid3D, w: &Grid3D, origin: (usize, usize), size: (usize, usize)) -> Result<PatchSample> {
    refl.validate()?;
    w.validate()?;
    if refl.y_coords != w.y_coords || refl.x_coords != w.x_coords {
        return validation("reflectivity and vertical velocity grids are not co-registered");
    }
    let (oy, ox) = origin;
    let (h, wd) = size;
    if h == 0 || wd == 0 {
        return validation("patch size must be positive");
    }
    if oy + h > refl.ny() || ox + wd > refl.nx() {
        return validation(format!("patch {h}x{wd} at ({oy}, {ox}) exceeds the {}x{} domain", refl.ny(), refl.nx()));
    }
    let mut x = Vec::with_capacity(refl.nz() * h * wd);
    for z in 0..refl.nz() {
        for r in oy..oy + h {
            for c in ox..ox + wd {
                let v = refl.get(z, r, c);
                x.push(if refl.is_missing(v) { f32::NAN } else { v });
            }
        }
    }
    let mut y = Vec::with_capacity(h * wd);
    for r in oy..oy + h {
        for c in ox..ox + wd {
            let col = (0..w.nz()).map(|z| w.get(z, r, c)).filter(|&v| !w.is_missing(v));
            let m = col.fold(f32::NEG_INFINITY, f32::max);
            if m == f32::NEG_INFINITY {
                return validation(format!("vertical velocity column at ({r}, {c}) has no valid values"));
            }
            y.push(m);
        }
    }
    Ok(PatchSample { levels: refl.nz(), height: h, width: wd, x, y, meta: SampleMeta { source: refl.name.clone(), origin: [oy, ox] } })
}

/// Keeps a patch only if some label pixel reaches `threshold` (m/s).
pub fn convection_filter(sample: &PatchSample, threshold: f64) -> bool {
    sample.max_label() >= threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: f64,
    pub max: f64,
    #[serde(default)]
    pub fitted_on: String,
}

impl ScalerParams {
    pub fn new(min: f64, max: f64, fitted_on: impl Into<String>) -> Result<Self> {
        if !min.is_finite() || !max.is_finite() || max <= min {
            return validation(format!("scaler needs max > min, got min={min} max={max}"));
        }
        Ok(ScalerParams { min, max, fitted_on: fitted_on.into() })
    }

    /// Maps `[min, max]` onto `[0, 1]`, clipping outside values. No-data
    /// (NaN) maps to 0.
    #[inline]
    pub fn apply_value(&self, v: f32) -> f32 {
        if v.is_nan() {
            return 0.0;
        }
        (((v as f64 - self.min) / (self.max - self.min)).clamp(0.0, 1.0)) as f32
    }

    pub fn apply(&self, values: &[f32]) -> Vec<f32> {
        values.iter().map(|&v| self.apply_value(v)).collect()
    }

    pub fn invert_value(&self, s: f32) -> f64 {
        self.min + s as f64 * (self.max - self.min)
    }
}

/// Min-max scaler over the reflectivity of the training samples.
pub fn fit_scaler(train: &[PatchSample], fitted_on: &str) -> Result<ScalerParams> {
    if train.is_empty() {
        return validation("cannot fit a scaler on zero samples");
    }
    let (lo, hi) = train
        .par_iter()
        .map(|s| {
            s.x.iter().filter(|v| !v.is_nan()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)))
        })
        .reduce(|| (f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)));
    if !(hi > lo) {
        return validation("training reflectivity is constant; min-max scaling is undefined");
    }
    ScalerParams::new(lo, hi, fitted_on)
}

pub fn apply_scaler(sample: &PatchSample, scaler: &ScalerParams) -> PatchSample {
    PatchSample { x: scaler.apply(&sample.x), ..sample.clone() }
}

/// Converts values to IEEE half precision after checking they lie in
/// `[lo, hi]`.
pub fn quantize_f16(values: &[f32], lo: f32, hi: f32) -> Result<Vec<f16>> {
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                Err(Error::Validation(format!("cannot archive non-finite value {v}")))
            } else if v < lo || v > hi {
                Err(Error::Validation(format!("value {v} outside the archival range [{lo}, {hi}]")))
            } else {
                Ok(f16::from_f32(v))
            }
        })
        .collect()
}

pub fn dequantize_f16(values: &[f16]) -> Vec<f32> {
    values.iter().map(|v| v.to_f32()).collect()
}

/// Half-precision rounding of a scaled sample, matching what gets archived.
/// Inputs must be in `[0, 1]`; labels only need to fit the half range.
pub fn quantize_sample(sample: &PatchSample) -> Result<PatchSample> {
    let x = dequantize_f16(&quantize_f16(&sample.x, 0.0, 1.0)?);
    let y = dequantize_f16(&quantize_f16(&sample.y, -f16::MAX.to_f32(), f16::MAX.to_f32())?);
    Ok(PatchSample { x, y, ..sample.clone() })
}

/// Settings for the synthetic storm generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub ny: usize,
    pub nx: usize,
    pub nz: usize,
    /// Horizontal spacing, km.
    pub spacing_km: f64,
    /// Height of the top level, km AGL; levels start at 0.5 km.
    pub top_km: f64,
    pub n_storms: usize,
    /// Peak reflectivity range, dBZ.
    pub intensity: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { ny: 64, nx: 64, nz: 12, spacing_km: 3.0, top_km: 17.0, n_storms: 6, intensity: (40.0, 65.0) }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ny == 0 || self.nx == 0 || self.nz == 0 {
            return validation("synthetic domain dims must be positive");
        }
        if !(self.spacing_km > 0.0) || !(self.top_km > 0.5) {
            return validation("spacing must be positive and the top above 0.5 km");
        }
        let (lo, hi) = self.intensity;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return validation("intensity range must satisfy min <= max");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Storm {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    peak_dbz: f64,
    echo_top_km: f64,
    updraft: f64,
}

/// Column-max updraft implied by a storm's echo top and core reflectivity,
/// before noise. Monotone increasing in both.
pub fn synthetic_updraft_strength(echo_top_km: f64, peak_dbz: f64) -> f64 {
    4.0 + 1.6 * (echo_top_km - 5.0) + 0.3 * (peak_dbz - 40.0)
}

fn storm_profile(z: f64, top: f64) -> f64 {
    let base = 0.45 * top;
    if z <= base {
        1.0
    } else {
        (-0.5 * ((z - base) / (0.25 * top)).powi(2)).exp()
    }
}

fn updraft_profile(z: f64, top: f64) -> f64 {
    (-0.5 * ((z - 0.55 * top) / (0.3 * top)).powi(2)).exp()
}

/// Generates co-located reflectivity (dBZ) and vertical velocity (m/s)
/// volumes. Storms are anisotropic Gaussian plumes; each carries an updraft
/// core narrower than its echo whose strength rises with echo-top height and
/// peak reflectivity, plus noise. Deterministic in `seed`.
pub fn synth_storms(seed: u64, cfg: &SynthConfig) -> Result<(Grid3D, Grid3D)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y_coords: Vec<f64> = (0..cfg.ny).map(|i| i as f64 * cfg.spacing_km).collect();
    let x_coords: Vec<f64> = (0..cfg.nx).map(|i| i as f64 * cfg.spacing_km).collect();
    let z_coords = linspace(0.5, cfg.top_km, cfg.nz);
    let extent_y = y_coords[cfg.ny - 1].max(cfg.spacing_km);
    let extent_x = x_coords[cfg.nx - 1].max(cfg.spacing_km);
    let noise = Normal::new(0.0, 1.5).expect("valid normal");

    let storms: Vec<Storm> = (0..cfg.n_storms)
        .map(|_| {
            let peak_dbz = rng.random_range(cfg.intensity.0..=cfg.intensity.1);
            let echo_top_km = rng.random_range(5.0..=16.0f64).min(cfg.top_km);
            let updraft = (synthetic_updraft_strength(echo_top_km, peak_dbz) + noise.sample(&mut rng)).max(1.0);
            Storm {
                cy: rng.random_range(0.0..=extent_y),
                cx: rng.random_range(0.0..=extent_x),
                ry: rng.random_range(6.0..=18.0),
                rx: rng.random_range(6.0..=18.0),
                peak_dbz,
                echo_top_km,
                updraft,
            }
        })
        .collect();

    let plane = cfg.ny * cfg.nx;
    let n = cfg.nz * plane;
    let mut refl = vec![0f32; n];
    let mut w = vec![0f32; n];
    let bg_noise = Normal::new(0.0, 0.3).expect("valid normal");
    for (z_idx, &z) in z_coords.iter().enumerate() {
        for (yi, &y) in y_coords.iter().enumerate() {
            for (xi, &x) in x_coords.iter().enumerate() {
                let mut r = -rng.random_range(0.0..5.0f64);
                let mut v: f64 = bg_noise.sample(&mut rng);
                for s in &storms {
                    let d2 = ((y - s.cy) / s.ry).powi(2) + ((x - s.cx) / s.rx).powi(2);
                    let echo = s.peak_dbz * (-0.5 * d2).exp() * storm_profile(z, s.echo_top_km);
                    r = r.max(echo);
                    let core = s.updraft * (-0.5 * d2 / 0.36).exp() * updraft_profile(z, s.echo_top_km);
                    v = v.max(core);
                }
                let i = z_idx * plane + yi * cfg.nx + xi;
                refl[i] = r as f32;
                w[i] = v as f32;
            }
        }
    }
    let name = format!("synth_{seed}");
    let refl = Grid3D::new(format!("{name}_refl"), "dBZ", z_coords.clone(), y_coords.clone(), x_coords.clone(), HeightDatum::Agl, refl)?;
    let w = Grid3D::new(format!("{name}_w"), "m/s", z_coords, y_coords, x_coords, HeightDatum::Agl, w)?;
    Ok((refl, w))
}

/// Sample-source abstraction so training can stream from disk.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<PatchSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [PatchSample] {
    fn len(&self) -> usize {
        <[PatchSample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<PatchSample> {
        <[PatchSample]>::get(self, index).cloned().ok_or_else(|| Error::Validation(format!("sample index {index} out of range")))
    }
}

impl SampleSource for Vec<PatchSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<PatchSample> {
        SampleSource::get(self.as_slice(), index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareConfig {
    pub patch: (usize, usize),
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub threshold: f64,
    /// Random slices attempted per requested sample before giving up.
    pub max_attempts_per_sample: usize,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            patch: (32, 32),
            n_train: 512,
            n_val: 128,
            n_test: 128,
            threshold: CONVECTION_THRESHOLD,
            max_attempts_per_sample: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub train: Vec<PatchSample>,
    pub val: Vec<PatchSample>,
    pub test: Vec<PatchSample>,
    pub scaler: ScalerParams,
}

/// Scene pair: `(reflectivity, vertical velocity)`.
pub type Scene = (Grid3D, Grid3D);

fn draw_patches(scenes: &[&Scene], count: usize, cfg: &PrepareConfig, rng: &mut ChaCha8Rng) -> Result<Vec<PatchSample>> {
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return Ok(out);
    }
    if scenes.is_empty() {
        return validation("no scenes available for a non-empty split");
    }
    let mut seen = HashSet::new();
    let (h, w) = cfg.patch;
    let budget = count * cfg.max_attempts_per_sample.max(1);
    for attempt in 0..budget {
        if out.len() == count {
            break;
        }
        let (refl, vv) = scenes[attempt % scenes.len()];
        if refl.ny() < h || refl.nx() < w {
            return validation(format!("scene {} smaller than the {h}x{w} patch", refl.name));
        }
        let origin = (rng.random_range(0..=refl.ny() - h), rng.random_range(0..=refl.nx() - w));
        if !seen.insert((refl.name.clone(), origin)) {
            continue;
        }
        let patch = slice_patch(refl, vv, origin, cfg.patch)?;
        if convection_filter(&patch, cfg.threshold) {
            out.push(patch);
        }
    }
    if out.len() < count {
        return Err(Error::Validation(format!("only {} of {count} convective patches found; supply more scenes or storms", out.len())));
    }
    Ok(out)
}

/// Splits scenes into disjoint train/val/test groups, slices and filters
/// patches, fits the scaler on the training split and rounds everything to
/// half precision.
pub fn prepare_dataset(scenes: &[Scene], cfg: &PrepareConfig, seed: u64) -> Result<PreparedDataset> {
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    if total == 0 || cfg.n_train == 0 {
        return validation("dataset needs at least one training sample");
    }
    let names: HashSet<&str> = scenes.iter().map(|s| s.0.name.as_str()).collect();
    if names.len() != scenes.len() {
        return validation("scene names must be unique");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng);
    let n_scenes = scenes.len();
    let share = |n: usize| if n == 0 { 0 } else { ((n * n_scenes) as f64 / total as f64).round().max(1.0) as usize };
    let n_val_scenes = share(cfg.n_val);
    let n_test_scenes = share(cfg.n_test);
    if n_val_scenes + n_test_scenes >= n_scenes {
        return validation(format!("{n_scenes} scenes are too few for three disjoint splits"));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| &scenes[i]).collect::<Vec<_>>();
    let val_scenes = pick(&order[..n_val_scenes]);
    let test_scenes = pick(&order[n_val_scenes..n_val_scenes + n_test_scenes]);
    let train_scenes = pick(&order[n_val_scenes + n_test_scenes..]);

    let train = draw_patches(&train_scenes, cfg.n_train, cfg, &mut rng)?;
    let val = draw_patches(&val_scenes, cfg.n_val, cfg, &mut rng)?;
    let test = draw_patches(&test_scenes, cfg.n_test, cfg, &mut rng)?;

    let scaler = fit_scaler(&train, "train")?;
    let finish =
        |v: Vec<PatchSample>| -> Result<Vec<PatchSample>> { v.par_iter().map(|s| quantize_sample(&apply_scaler(s, &scaler))).collect() };
    Ok(PreparedDataset { train: finish(train)?, val: finish(val)?, test: finish(test)?, scaler })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub x_path: String,
    pub y_path: String,
    pub origin: [usize; 2],
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerRecord {
    pub min: f64,
    pub max: f64,
}

/// One split of an archived dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: String,
    pub samples: Vec<ManifestEntry>,
    pub scaler: ScalerRecord,
}

impl SplitManifest {
    pub fn keys(&self) -> HashSet<(String, [usize; 2])> {
        self.samples.iter().map(|e| (e.source.clone(), e.origin)).collect()
    }
}

/// Counts and fractions across splits, written alongside the split manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub counts: [usize; 3],
    pub fractions: [f64; 3],
    pub patch: (usize, usize),
    pub levels: usize,
    pub scaler: ScalerParams,
}

/// Errors unless no sample appears in two splits.
pub fn check_disjoint(manifests: &[SplitManifest]) -> Result<()> {
    for (i, a) in manifests.iter().enumerate() {
        let ka = a.keys();
        for b in &manifests[i + 1..] {
            if ka.intersection(&b.keys()).next().is_some() {
                return validation(format!("splits {} and {} share samples", a.split, b.split));
            }
        }
    }
    Ok(())
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn sample_grids(sample: &PatchSample) -> Result<(Grid3D, Grid3D)> {
    let ys: Vec<f64> = (0..sample.height).map(|i| (sample.meta.origin[0] + i) as f64).collect();
    let xs: Vec<f64> = (0..sample.width).map(|i| (sample.meta.origin[1] + i) as f64).collect();
    let zs: Vec<f64> = (0..sample.levels).map(|i| i as f64).collect();
    let mut x = Grid3D::new("x", "1", zs, ys.clone(), xs.clone(), HeightDatum::Agl, sample.x.clone())?;
    let mut y = Grid3D::from_2d("y", "m/s", ys, xs, sample.y.clone())?;
    x.dtype = Dtype::F16;
    y.dtype = Dtype::F16;
    Ok((x, y))
}

/// Writes each sample as a pair of half-precision ZGRID shards plus one
/// manifest per split and a summary file.
pub fn archive_dataset(data: &PreparedDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("shards"))?;
    let scaler = ScalerRecord { min: data.scaler.min, max: data.scaler.max };
    let splits = [&data.train, &data.val, &data.test];
    for (name, samples) in SPLITS.iter().zip(splits) {
        let mut entries = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let (xg, yg) = sample_grids(s)?;
            let x_path = format!("shards/{name}_{i:05}_x.zgrid");
            let y_path = format!("shards/{name}_{i:05}_y.zgrid");
            write_grid(&xg, dir.join(&x_path))?;
            write_grid(&yg, dir.join(&y_path))?;
            entries.push(ManifestEntry { x_path, y_path, origin: s.meta.origin, source: s.meta.source.clone() });
        }
        let manifest = SplitManifest { split: name.to_string(), samples: entries, scaler: scaler.clone() };
        fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&manifest)?)?;
    }
    let counts = [data.train.len(), data.val.len(), data.test.len()];
    let total = counts.iter().sum::<usize>().max(1) as f64;
    let summary = DatasetSummary {
        counts,
        fractions: counts.map(|c| c as f64 / total),
        patch: data.train.first().map_or((0, 0), |s| (s.height, s.width)),
        levels: data.train.first().map_or(0, |s| s.levels),
        scaler: data.scaler.clone(),
    };
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path, split: &str) -> Result<SplitManifest> {
    let text = fs::read_to_string(dir.join(format!("{split}.json")))?;
    Ok(serde_json::from_str(&text)?)
}

/// Split stored on disk; samples are read on demand.
#[derive(Debug, Clone)]
pub struct ManifestSource {
    root: PathBuf,
    pub manifest: SplitManifest,
}

impl ManifestSource {
    pub fn open(dir: &Path, split: &str) -> Result<Self> {
        Ok(ManifestSource { root: dir.to_path_buf(), manifest: read_manifest(dir, split)? })
    }

    pub fn load_all(&self) -> Result<Vec<PatchSample>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

impl SampleSource for ManifestSource {
    fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    fn get(&self, index: usize) -> Result<PatchSample> {
        let e = self.manifest.samples.get(index).ok_or_else(|| Error::Validation(format!("sample index {index} out of range")))?;
        let x = read_grid(self.root.join(&e.x_path))?;
        let y = read_grid(self.root.join(&e.y_path))?;
        if x.ny() != y.ny() || x.nx() != y.nx() || y.nz() != 1 {
            return validation(format!("shard pair {} / {} has mismatched shapes", e.x_path, e.y_path));
        }
        Ok(PatchSample {
            levels: x.nz(),
            height: x.ny(),
            width: x.nx(),
            x: x.values,
            y: y.values,
            meta: SampleMeta { source: e.source.clone(), origin: e.origin },
        })
    }
}
