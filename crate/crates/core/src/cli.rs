//! Batch command line: `synth`, `prepare`, `train`, `hypersearch`,
//! `predict`, `evaluate`, `regrid` and `timeit`.
//!
//! Settings resolve in three layers: built-in defaults, then the JSON file
//! given with `--config`, then command-line flags. Every run writes the
//! resolved settings to `<out>/<command>.resolved.json`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataprep::{
    archive_dataset, prepare_dataset, synth_storms, ManifestSource, PatchSample, PrepareConfig, ScalerParams, Scene, SynthConfig,
};
use crate::error::{validation, Error, Result};
use crate::grid_io::{read_grid, read_terrain, write_grid, Grid3D, HeightDatum};
use crate::model::{
    hypersearch, predict_params, product_maps, train_with, Checkpoint, HyperSpace, InputMode, ModelSpec, ModelState, Network, Optimizer,
    Products, SkipStyle, TrainConfig, Trial,
};
use crate::regrid::{block_mean, nn_resample, to_agl, LevelSpec};
use crate::verify::{evaluate, timeit, EvalPairs, Prediction, Timings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "updraft", version, about = "Radar reflectivity to updraft retrieval toolkit")]
pub struct Cli {
    /// JSON file with run settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic reflectivity/updraft scene pairs.
    Synth(SynthArgs),
    /// Slice, filter, scale and archive a patch dataset.
    Prepare(PrepareArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Random hyperparameter search.
    Hypersearch(HyperArgs),
    /// Write distribution, quantile and exceedance maps.
    Predict(PredictArgs),
    /// Compute verification metrics.
    Evaluate(EvaluateArgs),
    /// Resample, block-average or re-level a grid.
    Regrid(RegridArgs),
    /// Time batched inference.
    Timeit(TimeitArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub ny: Option<usize>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub nz: Option<usize>,
    #[arg(long)]
    pub storms: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Directory of `*_refl.zgrid` / `*_w.zgrid` pairs.
    #[arg(long)]
    pub scenes_dir: PathBuf,
    /// Square patch edge length.
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// composite_2d, levels_2d or volume_3d
    #[arg(long, value_parser = parse_enum::<InputMode>)]
    pub input_mode: Option<InputMode>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    /// unet or unet3plus
    #[arg(long, value_parser = parse_enum::<SkipStyle>)]
    pub skip: Option<SkipStyle>,
    #[arg(long)]
    pub batch_norm: Option<bool>,
    #[arg(long)]
    pub l2: Option<f64>,
    /// sgd or adam
    #[arg(long, value_parser = parse_enum::<Optimizer>)]
    pub optimizer: Option<Optimizer>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub weight_above: Option<f64>,
    #[arg(long)]
    pub weight_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub trials: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated quantile levels.
    #[arg(long, value_parser = parse_list)]
    pub quantiles: Option<FloatList>,
    /// Comma-separated exceedance levels, m/s.
    #[arg(long, value_parser = parse_list)]
    pub exceedance: Option<FloatList>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory written by `predict`.
    #[arg(long, conflicts_with_all = ["truth", "median"])]
    pub pred: Option<PathBuf>,
    /// Truth grids, one frame per level; pairs with `--median`.
    #[arg(long, num_args = 1..)]
    pub truth: Vec<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub median: Vec<PathBuf>,
    #[arg(long, value_parser = parse_list)]
    pub thresholds: Option<FloatList>,
    /// Timing report from `timeit` to attach.
    #[arg(long)]
    pub timings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegridArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Terrain grid; converts MSL heights to AGL.
    #[arg(long)]
    pub terrain: Option<PathBuf>,
    /// Target AGL levels as start:stop:count.
    #[arg(long)]
    pub levels: Option<String>,
    #[arg(long)]
    pub block_mean: Option<usize>,
    /// Grid whose horizontal coordinates are the resampling target.
    #[arg(long)]
    pub dst_coords: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TimeitArgs {
    /// Checkpoint to time; a freshly initialized model otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeitConfig {
    pub batch_size: usize,
    pub n_batches: usize,
    pub patch: usize,
}

impl Default for TimeitConfig {
    fn default() -> Self {
        TimeitConfig { batch_size: 32, n_batches: 30, patch: 32 }
    }
}

/// Contents of a `--config` file; any section may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: usize,
    pub synth: SynthConfig,
    pub prepare: PrepareConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub hyper_space: HyperSpace,
    pub trials: usize,
    pub products: Products,
    pub thresholds: Vec<f64>,
    pub timeit: TimeitConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scenes: 24,
            synth: SynthConfig::default(),
            prepare: PrepareConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            hyper_space: HyperSpace::default(),
            trials: 10,
            products: Products::default(),
            thresholds: vec![5.0, 10.0, 15.0],
            timeit: TimeitConfig::default(),
        }
    }
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value {s:?}"))
}

/// Comma-separated numbers, e.g. `5,10,15`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatList(pub Vec<f64>);

fn parse_list(s: &str) -> std::result::Result<FloatList, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("{p:?} is not a number")))
        .collect::<std::result::Result<_, _>>()
        .map(FloatList)
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_) | Error::Format(_) | Error::Domain(_) | Error::UndefinedMetric(_) | Error::Json(_) => EXIT_VALIDATION,
        Error::Io(_) | Error::Diverged(_) => EXIT_RUNTIME,
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return validation(format!("{what} {} does not exist", path.display()));
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            require_file(path, "config file")?;
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'a str,
    threads: Option<usize>,
    inputs: BTreeMap<&'a str, String>,
    config: &'a RunConfig,
}

fn write_resolved(out: &Path, command: &str, cli: &Cli, inputs: BTreeMap<&str, String>, cfg: &RunConfig) -> Result<()> {
    let resolved = Resolved { command, threads: cli.threads, inputs, config: cfg };
    write_json(&out.join(format!("{command}.resolved.json")), &resolved)
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return validation("--threads must be >= 1");
        }
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = load_config(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, &mut cfg, a, &out),
        Command::Prepare(a) => cmd_prepare(cli, &mut cfg, a, &out),
        Command::Train(a) => cmd_train(cli, &mut cfg, a, &out),
        Command::Hypersearch(a) => cmd_hypersearch(cli, &mut cfg, a, &out),
        Command::Predict(a) => cmd_predict(cli, &mut cfg, a, &out),
        Command::Evaluate(a) => cmd_evaluate(cli, &mut cfg, a, &out),
        Command::Regrid(a) => cmd_regrid(cli, &mut cfg, a, &out),
        Command::Timeit(a) => cmd_timeit(cli, &mut cfg, a, &out),
    }
}

fn cmd_synth(cli: &Cli, cfg: &mut RunConfig, a: &SynthArgs, out: &Path) -> Result<()> {
    if let Some(v) = a.scenes {
        cfg.scenes = v;
    }
    let s = &mut cfg.synth;
    s.ny = a.ny.unwrap_or(s.ny);
    s.nx = a.nx.unwrap_or(s.nx);
    s.nz = a.nz.unwrap_or(s.nz);
    s.n_storms = a.storms.unwrap_or(s.n_storms);
    s.validate()?;
    if cfg.scenes == 0 {
        return validation("--scenes must be >= 1");
    }
    let dir = out.join("scenes");
    fs::create_dir_all(&dir)?;
    for i in 0..cfg.scenes {
        let (refl, w) = synth_storms(cfg.seed.wrapping_add(i as u64), &cfg.synth)?;
        write_grid(&refl, dir.join(format!("{}.zgrid", refl.name)))?;
        write_grid(&w, dir.join(format!("{}.zgrid", w.name)))?;
    }
    eprintln!("wrote {} scene pairs to {}", cfg.scenes, dir.display());
    write_resolved(out, "synth", cli, BTreeMap::new(), cfg)
}

/// Reads `*_refl.zgrid` files with their `*_w.zgrid` partners, sorted by name.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    require_file(dir, "scenes directory")?;
    let mut refl_paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_refl.zgrid")))
        .collect();
    refl_paths.sort();
    if refl_paths.is_empty() {
        return validation(format!("no *_refl.zgrid files in {}", dir.display()));
    }
    refl_paths
        .iter()
        .map(|rp| {
            let name = rp.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let wp = rp.with_file_name(name.replace("_refl.zgrid", "_w.zgrid"));
            require_file(&wp, "updraft grid")?;
            let mut refl = read_grid(rp)?;
            // split assignment keys on scene names, so make them file-unique
            refl.name = name.trim_end_matches(".zgrid").to_string();
            Ok((refl, read_grid(&wp)?))
        })
        .collect()
}

fn cmd_prepare(cli: &Cli, cfg: &mut RunConfig, a: &PrepareArgs, out: &Path) -> Result<()> {
    let p = &mut cfg.prepare;
    if let Some(v) = a.patch {
        p.patch = (v, v);
    }
    p.n_train = a.n_train.unwrap_or(p.n_train);
    p.n_val = a.n_val.unwrap_or(p.n_val);
    p.n_test = a.n_test.unwrap_or(p.n_test);
    p.threshold = a.threshold.unwrap_or(p.threshold);
    let scenes = load_scenes(&a.scenes_dir)?;
    let data = prepare_dataset(&scenes, &cfg.prepare, cfg.seed)?;
    fs::create_dir_all(out)?;
    archive_dataset(&data, out)?;
    eprintln!("archived {}/{}/{} samples to {}", data.train.len(), data.val.len(), data.test.len(), out.display());
    let inputs = BTreeMap::from([("scenes_dir", a.scenes_dir.display().to_string())]);
    write_resolved(out, "prepare", cli, inputs, cfg)
}

fn apply_model_args(cfg: &mut RunConfig, a: &ModelArgs) {
    let m = &mut cfg.model;
    m.input_mode = a.input_mode.unwrap_or(m.input_mode);
    m.depth = a.depth.unwrap_or(m.depth);
    m.base_filters = a.filters.unwrap_or(m.base_filters);
    m.kernel_size = a.kernel.unwrap_or(m.kernel_size);
    m.skip_style = a.skip.unwrap_or(m.skip_style);
    m.batch_norm = a.batch_norm.unwrap_or(m.batch_norm);
    m.l2_reg = a.l2.unwrap_or(m.l2_reg);
    let t = &mut cfg.train;
    t.optimizer = a.optimizer.unwrap_or(t.optimizer);
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.max_epochs = a.epochs.unwrap_or(t.max_epochs);
    t.patience = a.patience.unwrap_or(t.patience);
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    let w = &mut t.loss.weight_policy;
    w.weight_above = a.weight_above.unwrap_or(w.weight_above);
    w.threshold = a.weight_threshold.unwrap_or(w.threshold);
    t.seed = cfg.seed;
}

struct Dataset {
    train: Vec<PatchSample>,
    val: Vec<PatchSample>,
    scaler: ScalerParams,
}

fn load_dataset(dir: &Path, cfg: &mut RunConfig) -> Result<Dataset> {
    require_file(&dir.join("train.json"), "training manifest")?;
    require_file(&dir.join("val.json"), "validation manifest")?;
    let train = ManifestSource::open(dir, "train")?;
    let rec = train.manifest.scaler.clone();
    let train = train.load_all()?;
    let val = ManifestSource::open(dir, "val")?.load_all()?;
    if let Some(s) = train.first() {
        cfg.model.levels = s.levels;
    }
    Ok(Dataset { train, val, scaler: ScalerParams::new(rec.min, rec.max, "train")? })
}

fn cmd_train(cli: &Cli, cfg: &mut RunConfig, a: &TrainArgs, out: &Path) -> Result<()> {
    apply_model_args(cfg, &a.model);
    let data = load_dataset(&a.data, cfg)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    fs::create_dir_all(out)?;
    let outcome = train_with(&cfg.model, &data.train, &data.val, &cfg.train, |r| {
        eprintln!("epoch {:>3}  train {:.5}  val {:.5}", r.epoch, r.train_loss, r.val_loss);
    })?;
    let mut metrics = BTreeMap::from([("val_loss".to_string(), outcome.state.best_val_loss)]);
    if let Some(r2) = outcome.history.iter().find(|r| r.epoch == outcome.state.epoch).and_then(|r| r.val_r2) {
        metrics.insert("val_r2".into(), r2);
    }
    Checkpoint::new(outcome.state, metrics, Some(data.scaler), Some(cfg.train.loss)).write(&out.join("model.ckpt"))?;
    write_json(&out.join("history.json"), &outcome.history)?;
    let inputs = BTreeMap::from([("data", a.data.display().to_string())]);
    write_resolved(out, "train", cli, inputs, cfg)
}

fn cmd_hypersearch(cli: &Cli, cfg: &mut RunConfig, a: &HyperArgs, out: &Path) -> Result<()> {
    apply_model_args(cfg, &a.model);
    if let Some(n) = a.trials {
        cfg.trials = n;
    }
    let data = load_dataset(&a.data, cfg)?;
    fs::create_dir_all(out)?;
    let base = Trial { spec: cfg.model.clone(), train: cfg.train.clone() };
    let search = hypersearch(&cfg.hyper_space, &base, cfg.trials, cfg.seed, &data.train, &data.val, |r| match (&r.error, r.val_r2) {
        (Some(e), _) => eprintln!("trial {:>3}  failed: {e}", r.index),
        (None, r2) => eprintln!("trial {:>3}  val_r2 {:?}", r.index, r2),
    })?;
    let best = &search.results[search.best];
    let mut metrics = BTreeMap::new();
    if let Some(v) = best.val_loss {
        metrics.insert("val_loss".to_string(), v);
    }
    if let Some(v) = best.val_r2 {
        metrics.insert("val_r2".to_string(), v);
    }
    Checkpoint::new(search.best_state, metrics, Some(data.scaler), Some(best.trial.train.loss)).write(&out.join("model.ckpt"))?;
    write_json(&out.join("trials.json"), &search.results)?;
    let inputs = BTreeMap::from([("data", a.data.display().to_string())]);
    write_resolved(out, "hypersearch", cli, inputs, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub source: String,
    pub origin: [usize; 2],
    pub truth: String,
    pub params: String,
    pub median: String,
    pub quantiles: String,
    pub exceedance: String,
}

fn frame_coords(s: &PatchSample) -> (Vec<f64>, Vec<f64>) {
    let ys = (0..s.height).map(|i| (s.meta.origin[0] + i) as f64).collect();
    let xs = (0..s.width).map(|i| (s.meta.origin[1] + i) as f64).collect();
    (ys, xs)
}

fn stacked(name: &str, units: &str, z: Vec<f64>, ys: &[f64], xs: &[f64], maps: &[&[f64]]) -> Result<Grid3D> {
    let values = maps.iter().flat_map(|m| m.iter().map(|&v| v as f32)).collect();
    Grid3D::new(name, units, z, ys.to_vec(), xs.to_vec(), HeightDatum::Agl, values)
}

fn ascending(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    if v.is_empty() {
        return validation(format!("at least one {what} is required"));
    }
    Ok(v)
}

fn cmd_predict(cli: &Cli, cfg: &mut RunConfig, a: &PredictArgs, out: &Path) -> Result<()> {
    require_file(&a.model, "checkpoint")?;
    if let Some(q) = &a.quantiles {
        cfg.products.quantiles = q.0.clone();
    }
    if let Some(e) = &a.exceedance {
        cfg.products.exceedance = e.0.clone();
    }
    cfg.products.quantiles = ascending(cfg.products.quantiles.clone(), "quantile level")?;
    cfg.products.exceedance = ascending(cfg.products.exceedance.clone(), "exceedance level")?;
    for &p in &cfg.products.quantiles {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile level {p} must lie in (0, 1)")));
        }
    }
    let ck = Checkpoint::read(&a.model)?;
    require_file(&a.data.join(format!("{}.json", a.split)), "split manifest")?;
    let source = ManifestSource::open(&a.data, &a.split)?;
    let samples = source.load_all()?;
    let params = predict_params(&ck.state, &samples, 32)?;
    let pred_dir = out.join("pred");
    fs::create_dir_all(&pred_dir)?;
    let data_root = fs::canonicalize(&a.data)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (s, p)) in samples.iter().zip(&params).enumerate() {
        let (ys, xs) = frame_coords(s);
        let maps = product_maps(p, &cfg.products)?;
        let cols: [Vec<f64>; 4] = [
            p.iter().map(|d| d.mu).collect(),
            p.iter().map(|d| d.sigma).collect(),
            p.iter().map(|d| d.gamma).collect(),
            p.iter().map(|d| d.tau).collect(),
        ];
        let median: Vec<f64> = p.iter().map(|d| d.median()).collect();
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        let grids = [
            ("params", stacked("shash_params", "mu,sigma,gamma,tau", vec![0.0, 1.0, 2.0, 3.0], &ys, &xs, &refs)?),
            ("median", stacked("median", "m/s", vec![0.0], &ys, &xs, &[&median])?),
            (
                "quantiles",
                stacked(
                    "quantiles",
                    "m/s",
                    cfg.products.quantiles.clone(),
                    &ys,
                    &xs,
                    &maps.quantiles.iter().map(|(_, m)| m.as_slice()).collect::<Vec<_>>(),
                )?,
            ),
            (
                "exceedance",
                stacked(
                    "exceedance",
                    "probability",
                    cfg.products.exceedance.clone(),
                    &ys,
                    &xs,
                    &maps.exceedance.iter().map(|(_, m)| m.as_slice()).collect::<Vec<_>>(),
                )?,
            ),
        ];
        let mut names = BTreeMap::new();
        for (kind, g) in grids {
            let file = format!("{i:05}_{kind}.zgrid");
            write_grid(&g, pred_dir.join(&file))?;
            names.insert(kind, format!("pred/{file}"));
        }
        entries.push(PredictionEntry {
            source: s.meta.source.clone(),
            origin: s.meta.origin,
            truth: data_root.join(&source.manifest.samples[i].y_path).display().to_string(),
            params: names["params"].clone(),
            median: names["median"].clone(),
            quantiles: names["quantiles"].clone(),
            exceedance: names["exceedance"].clone(),
        });
    }
    write_json(&out.join("predictions.json"), &entries)?;
    eprintln!("wrote predictions for {} samples to {}", entries.len(), pred_dir.display());
    let inputs =
        BTreeMap::from([("model", a.model.display().to_string()), ("data", a.data.display().to_string()), ("split", a.split.clone())]);
    write_resolved(out, "predict", cli, inputs, cfg)
}

fn grid_frames(g: &Grid3D) -> Vec<Vec<f64>> {
    (0..g.nz()).map(|z| g.level(z).iter().map(|&v| v as f64).collect()).collect()
}

fn frames_from_predictions(dir: &Path) -> Result<Vec<EvalPairs>> {
    let index = dir.join("predictions.json");
    require_file(&index, "prediction index")?;
    let entries: Vec<PredictionEntry> = serde_json::from_str(&fs::read_to_string(&index)?)?;
    entries
        .iter()
        .map(|e| {
            let truth = read_grid(&e.truth)?;
            let params = read_grid(dir.join(&e.params))?;
            if params.nz() != 4 || params.plane_len() != truth.plane_len() {
                return Err(Error::Format(format!("{} does not hold 4 parameter maps matching the truth", e.params)));
            }
            let dists = (0..params.plane_len())
                .map(|i| {
                    crate::shash::ShashParams::new(
                        params.level(0)[i] as f64,
                        params.level(1)[i] as f64,
                        params.level(2)[i] as f64,
                        params.level(3)[i] as f64,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let t: Vec<f64> = truth.level(0).iter().map(|&v| v as f64).collect();
            EvalPairs::new(t, Prediction::Distribution(dists), None)
        })
        .collect()
}

fn frames_from_grids(truth: &[PathBuf], median: &[PathBuf]) -> Result<Vec<EvalPairs>> {
    if truth.is_empty() || truth.len() != median.len() {
        return validation("--truth and --median need the same nonzero number of grids");
    }
    let mut frames = Vec::new();
    for (tp, mp) in truth.iter().zip(median) {
        require_file(tp, "truth grid")?;
        require_file(mp, "prediction grid")?;
        let (t, m) = (read_grid(tp)?, read_grid(mp)?);
        if t.dims() != m.dims() {
            return validation(format!("{} and {} differ in shape", tp.display(), mp.display()));
        }
        let mask: Vec<bool> = t.values.iter().zip(&m.values).map(|(&a, &b)| !t.is_missing(a) && !m.is_missing(b)).collect();
        let plane = t.plane_len();
        for (z, (tf, mf)) in grid_frames(&t).into_iter().zip(grid_frames(&m)).enumerate() {
            frames.push(EvalPairs::new(tf, Prediction::Deterministic(mf), Some(mask[z * plane..(z + 1) * plane].to_vec()))?);
        }
    }
    Ok(frames)
}

fn cmd_evaluate(cli: &Cli, cfg: &mut RunConfig, a: &EvaluateArgs, out: &Path) -> Result<()> {
    if let Some(t) = &a.thresholds {
        cfg.thresholds = t.0.clone();
    }
    let frames = match &a.pred {
        Some(dir) => frames_from_predictions(dir)?,
        None => frames_from_grids(&a.truth, &a.median)?,
    };
    let mut report = evaluate(&frames, &cfg.thresholds)?;
    if let Some(p) = &a.timings {
        require_file(p, "timing report")?;
        let timings: Timings = serde_json::from_str(&fs::read_to_string(p)?)?;
        report.timings = Some(timings);
    }
    fs::create_dir_all(out)?;
    report.write(&out.join("report.json"), Some(&out.join("series.csv")))?;
    eprintln!("rmse {:.4}  r2 {:?}  pitd {:?}  iqrr {:?}", report.rmse, report.r2, report.pitd, report.iqrr);
    let mut inputs = BTreeMap::new();
    if let Some(p) = &a.pred {
        inputs.insert("pred", p.display().to_string());
    }
    write_resolved(out, "evaluate", cli, inputs, cfg)
}

#[derive(Deserialize)]
struct Coords {
    y: Vec<f64>,
    x: Vec<f64>,
}

fn read_dst_coords(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    require_file(path, "destination coordinates")?;
    if path.extension().is_some_and(|e| e == "json") {
        let c: Coords = serde_json::from_str(&fs::read_to_string(path)?)?;
        return Ok((c.y, c.x));
    }
    let g = read_grid(path)?;
    Ok((g.y_coords, g.x_coords))
}

fn cmd_regrid(cli: &Cli, cfg: &mut RunConfig, a: &RegridArgs, out: &Path) -> Result<()> {
    require_file(&a.input, "input grid")?;
    let mut grid = read_grid(&a.input)?;
    if let Some(tp) = &a.terrain {
        require_file(tp, "terrain grid")?;
        let levels = match &a.levels {
            Some(s) => s.parse::<LevelSpec>()?,
            None => LevelSpec::default(),
        };
        grid = to_agl(&grid, &read_terrain(tp)?, &levels)?;
    } else if a.levels.is_some() {
        return validation("--levels requires --terrain");
    }
    if let Some(p) = &a.dst_coords {
        let (ys, xs) = read_dst_coords(p)?;
        grid = nn_resample(&grid, &ys, &xs)?;
    }
    if let Some(f) = a.block_mean {
        grid = block_mean(&grid, f)?;
    }
    fs::create_dir_all(out)?;
    let name = a.input.file_name().ok_or_else(|| Error::Validation("input path has no file name".into()))?;
    let dst = out.join(name);
    if fs::canonicalize(&a.input).ok() == fs::canonicalize(&dst).ok() {
        return validation("regrid output would overwrite its input; choose another --out");
    }
    write_grid(&grid, &dst)?;
    let inputs = BTreeMap::from([("in", a.input.display().to_string())]);
    write_resolved(out, "regrid", cli, inputs, cfg)
}

fn cmd_timeit(cli: &Cli, cfg: &mut RunConfig, a: &TimeitArgs, out: &Path) -> Result<()> {
    let t = &mut cfg.timeit;
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.n_batches = a.batches.unwrap_or(t.n_batches);
    t.patch = a.patch.unwrap_or(t.patch);
    let state = match &a.model {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Checkpoint::read(p)?.state
        }
        None => {
            let net = Network::new(&cfg.model)?;
            ModelState { spec: cfg.model.clone(), weights: net.init_weights(cfg.seed), epoch: 0, best_val_loss: f64::NAN }
        }
    };
    let timings = time_model(&state, &cfg.timeit, cfg.seed)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("timings.json"), &timings)?;
    eprintln!(
        "{} batches of {}: mean {:.2} ms, std {:.2} ms",
        timings.timings_ms.len(),
        timings.batch_size,
        timings.mean_ms,
        timings.std_ms
    );
    write_resolved(out, "timeit", cli, BTreeMap::new(), cfg)
}

/// Times inference on random inputs held in memory.
pub fn time_model(state: &ModelState, cfg: &TimeitConfig, seed: u64) -> Result<Timings> {
    let net = Network::new(&state.spec)?;
    net.check_weights(&state.weights)?;
    let spec = &state.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.patch * cfg.patch;
    let samples: Vec<PatchSample> = (0..cfg.batch_size)
        .map(|k| PatchSample {
            levels: spec.levels,
            height: cfg.patch,
            width: cfg.patch,
            x: (0..spec.levels * n).map(|_| rng.random_range(0.0..1.0)).collect(),
            y: vec![0.0; n],
            meta: crate::dataprep::SampleMeta { source: "timeit".into(), origin: [k, 0] },
        })
        .collect();
    let refs: Vec<&PatchSample> = samples.iter().collect();
    let x = spec.input_tensor(&refs)?;
    timeit(cfg.batch_size, cfg.n_batches, || net.predict_raw(&state.weights, &x).map(|_| ()))
}
