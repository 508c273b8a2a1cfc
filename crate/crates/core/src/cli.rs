//! Command-line front end. Every command is first resolved into a [`Job`],
//! which is stored in the output directory's manifest before any work starts
//! and can be replayed from there.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    collect_depth_stats, depth_histograms, evaluate, mean_psnr_ssim, metrics_csv, plot_histogram, Bins, DensityModel,
    DensityWeighting, EvalOptions, SpikeDensity, TrainedDensity, UniformDensity,
};
use crate::frame::CameraView;
use crate::io::{load_checkpoint, load_packs, save_checkpoint, save_depth, save_pack, save_png};
use crate::model::{nearest_views, Model};
use crate::scene::{depth_bounds, generate_packs, PackConfig, RealishNoise, ScenePack};
use crate::train::{
    mix_datasets, parse_key_values, run_arm, summarize, summary_csv, train, Arm, RunResult, TrainConfig,
};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "nvs",
    version,
    about = "Procedural scenes, training and evaluation of a source-view radiance model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate procedural scene packs.
    GenScenes(GenScenesArgs),
    /// Train a model and write a checkpoint and metrics log.
    Train(TrainArgs),
    /// Render every view of some scenes from their nearest other views.
    Render(RenderArgs),
    /// Score rendered views with PSNR and SSIM.
    Eval(EvalArgs),
    /// Depth deviation and error histograms.
    DepthStats(DepthStatsArgs),
    /// Train and score ablation arms, optionally sweeping the realish ratio.
    Ablate(AblateArgs),
    /// Re-run the job recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenScenesArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_scenes: Option<usize>,
    #[arg(long)]
    pub views_per_scene: Option<usize>,
    /// Image size as `WxH`.
    #[arg(long)]
    pub resolution: Option<String>,
    #[arg(long)]
    pub n_primitives: Option<usize>,
    /// Add pose, sensor and illumination noise.
    #[arg(long)]
    pub realish: bool,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training settings shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct TrainSettings {
    /// `key = value` file with training keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting point before the file and flags: `default`, `desk` or `toy`.
    #[arg(long, default_value = "default")]
    pub preset: String,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub settings: TrainSettings,
    /// Apply an ablation arm's switches.
    #[arg(long)]
    pub arm: Option<String>,
    /// Directory of scene packs.
    #[arg(long)]
    pub data: PathBuf,
    /// Realish packs mixed in by `mix_ratio`.
    #[arg(long)]
    pub realish_data: Option<PathBuf>,
    /// Held-out packs for the periodic PSNR.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelSource {
    #[arg(long, conflicts_with = "init_seed")]
    pub checkpoint: Option<PathBuf>,
    /// Use an untrained model with this seed instead of a checkpoint.
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Preset of the untrained model's architecture.
    #[arg(long, default_value = "default")]
    pub preset: String,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub n_source_views: Option<usize>,
    /// Render only the first `n` views of each scene.
    #[arg(long)]
    pub views_per_scene: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub n_source_views: Option<usize>,
    #[arg(long)]
    pub views_per_scene: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DepthStatsArgs {
    #[command(flatten)]
    pub model: ModelSource,
    /// `trained`, or the constructed `spike` and `uniform` models.
    #[arg(long, default_value = "trained")]
    pub density: String,
    #[arg(long)]
    pub data: PathBuf,
    /// `softmax` or `volume`.
    #[arg(long, default_value = "softmax")]
    pub weight_mode: String,
    /// `percentile` or `uniform:LO:HI`.
    #[arg(long, default_value = "percentile")]
    pub bins: String,
    #[arg(long, default_value_t = 50)]
    pub bin_count: usize,
    #[arg(long, default_value_t = 1)]
    pub pixel_stride: usize,
    #[arg(long)]
    pub n_source_views: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub settings: TrainSettings,
    /// Comma-separated arms; all six by default.
    #[arg(long)]
    pub arms: Option<String>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    /// Training packs.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out packs that are scored.
    #[arg(long)]
    pub test: PathBuf,
    /// Realish packs for the mix sweep.
    #[arg(long)]
    pub realish_data: Option<PathBuf>,
    /// Comma-separated realish ratios; needs `--realish-data`.
    #[arg(long, value_delimiter = ',')]
    pub mix_ratios: Vec<f64>,
    #[arg(long)]
    pub views_per_scene: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// A fully resolved command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    GenScenes(GenScenesJob),
    Train(TrainJob),
    Render(RenderJob),
    Eval(EvalJob),
    DepthStats(DepthStatsJob),
    Ablate(AblateJob),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenScenesJob {
    pub n_scenes: usize,
    pub pack: PackConfig,
    pub noise: Option<RealishNoise>,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub config: TrainConfig,
    pub data: PathBuf,
    pub realish_data: Option<PathBuf>,
    pub holdout: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    Checkpoint(PathBuf),
    Untrained { preset: String, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderJob {
    pub model: ModelSpec,
    pub data: PathBuf,
    pub n_source_views: usize,
    pub views_per_scene: Option<usize>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalJob {
    pub model: ModelSpec,
    pub data: PathBuf,
    pub n_source_views: usize,
    pub views_per_scene: Option<usize>,
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityKind {
    Trained,
    Spike,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthStatsJob {
    pub model: Option<ModelSpec>,
    pub density: DensityKind,
    pub data: PathBuf,
    pub weight_mode: DensityWeighting,
    pub deviation_bins: Bins,
    pub error_bins: Bins,
    pub pixel_stride: usize,
    pub n_source_views: usize,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateJob {
    pub config: TrainConfig,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub data: PathBuf,
    pub test: PathBuf,
    pub realish_data: Option<PathBuf>,
    pub mix_ratios: Vec<f64>,
    pub views_per_scene: Option<usize>,
    pub out: PathBuf,
}

/// Record of a run, written to its output directory before work begins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub started_unix: u64,
    pub seeds: Vec<u64>,
    pub outputs: Vec<PathBuf>,
    pub job: Job,
}

pub fn code_version() -> String {
    match option_env!("NVS_GIT_DESCRIBE") {
        Some(d) => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

fn existing(path: &Path) -> Result<PathBuf> {
    if !path.exists() {
        return Err(Error::invalid(format!("input {} does not exist", path.display())));
    }
    absolute(path)
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn parse_resolution(key: &str, s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| config_err(key, format!("`{s}` is not WxH")))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_err(key, format!("`{s}` is not WxH with positive sizes")))
    };
    Ok((p(w)?, p(h)?))
}

fn preset(name: &str) -> Result<TrainConfig> {
    match name {
        "default" => Ok(TrainConfig::default()),
        "desk" => Ok(TrainConfig::desk()),
        "toy" => Ok(TrainConfig::toy()),
        _ => Err(config_err(
            "preset",
            format!("`{name}` is not one of default, desk, toy"),
        )),
    }
}

impl TrainSettings {
    /// Preset, then config file, then `--iterations`, then `--set` pairs.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = preset(&self.preset)?;
        if let Some(path) = &self.config {
            for (k, v) in parse_key_values(&read_text(path)?)? {
                cfg.set(&k, &v)?;
            }
        }
        if let Some(n) = self.iterations {
            cfg.iterations = n;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| config_err(kv, "override must be KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ModelSource {
    fn resolve(&self) -> Result<ModelSpec> {
        match (&self.checkpoint, self.init_seed) {
            (Some(p), None) => Ok(ModelSpec::Checkpoint(existing(p)?)),
            (None, Some(seed)) => {
                preset(&self.preset)?;
                Ok(ModelSpec::Untrained {
                    preset: self.preset.clone(),
                    seed,
                })
            }
            _ => Err(Error::invalid("give either --checkpoint or --init-seed")),
        }
    }
}

impl ModelSpec {
    /// The model and the source-view count it was trained with.
    pub fn load(&self) -> Result<(Model, usize)> {
        match self {
            ModelSpec::Checkpoint(p) => {
                let (model, header) = load_checkpoint(p)?;
                let n = serde_json::from_value::<TrainConfig>(header.train)
                    .map(|c| c.n_source_views)
                    .unwrap_or(TrainConfig::default().n_source_views);
                Ok((model, n))
            }
            ModelSpec::Untrained { preset: name, seed } => {
                let cfg = preset(name)?;
                Ok((Model::new(cfg.model, *seed)?, cfg.n_source_views))
            }
        }
    }

    fn seeds(&self) -> Vec<u64> {
        match self {
            ModelSpec::Untrained { seed, .. } => vec![*seed],
            ModelSpec::Checkpoint(_) => Vec::new(),
        }
    }
}

fn source_views(spec: &Option<ModelSpec>, flag: Option<usize>) -> Result<usize> {
    match (flag, spec) {
        (Some(n), _) => Ok(n),
        (None, Some(m)) => Ok(m.load()?.1),
        (None, None) => Ok(TrainConfig::default().n_source_views),
    }
}

fn parse_bins(s: &str, count: usize) -> Result<Bins> {
    if s == "percentile" {
        return Ok(Bins::Percentile { count, quantile: 0.99 });
    }
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["uniform", lo, hi] => {
            let p = |v: &str| v.parse::<f64>().map_err(|e| config_err("bins", format!("`{v}`: {e}")));
            Ok(Bins::Uniform {
                count,
                lo: p(lo)?,
                hi: p(hi)?,
            })
        }
        _ => Err(config_err(
            "bins",
            format!("`{s}` is not `percentile` or `uniform:LO:HI`"),
        )),
    }
}

impl GenScenesArgs {
    pub fn resolve(&self) -> Result<GenScenesJob> {
        let mut pack = PackConfig {
            n_views: 12,
            ..Default::default()
        };
        let mut n_scenes = 2;
        let mut realish = self.realish;
        if let Some(path) = &self.config {
            for (k, v) in parse_key_values(&read_text(path)?)? {
                let num = |v: &str| v.parse::<usize>().map_err(|e| config_err(&k, format!("`{v}`: {e}")));
                match k.as_str() {
                    "n_scenes" => n_scenes = num(&v)?,
                    "views_per_scene" => pack.n_views = num(&v)?,
                    "n_primitives" => pack.n_primitives = num(&v)?,
                    "resolution" => (pack.width, pack.height) = parse_resolution(&k, &v)?,
                    "fov_x" => pack.fov_x = v.parse().map_err(|e| config_err(&k, format!("`{v}`: {e}")))?,
                    "realish" => realish = v == "true",
                    _ => return Err(config_err(&k, "unknown key")),
                }
            }
        }
        if let Some(n) = self.n_scenes {
            n_scenes = n;
        }
        if let Some(n) = self.views_per_scene {
            pack.n_views = n;
        }
        if let Some(n) = self.n_primitives {
            pack.n_primitives = n;
        }
        if let Some(r) = &self.resolution {
            (pack.width, pack.height) = parse_resolution("resolution", r)?;
        }
        if n_scenes == 0 || pack.n_views == 0 {
            return Err(config_err("n_scenes", "scene and view counts must be positive"));
        }
        Ok(GenScenesJob {
            n_scenes,
            pack,
            noise: realish.then(RealishNoise::default),
            seed: self.seed,
            out: absolute(&self.out)?,
        })
    }
}

fn parse_arms(list: Option<&str>) -> Result<Vec<Arm>> {
    match list {
        None => Ok(Arm::ALL.to_vec()),
        Some(s) => s.split(',').map(|a| Arm::parse(a.trim())).collect(),
    }
}

impl Cli {
    /// Resolves flags and config files into a job; `replay` reads it from a
    /// manifest and redirects its outputs.
    pub fn resolve(&self) -> Result<Job> {
        Ok(match &self.command {
            Command::GenScenes(a) => Job::GenScenes(a.resolve()?),
            Command::Train(a) => {
                let mut config = a.settings.resolve()?;
                if let Some(arm) = &a.arm {
                    config = Arm::parse(arm)?.configure(&config);
                }
                if config.mix_ratio > 0.0 && a.realish_data.is_none() {
                    return Err(config_err("mix_ratio", "a positive ratio needs --realish-data"));
                }
                Job::Train(TrainJob {
                    config,
                    data: existing(&a.data)?,
                    realish_data: a.realish_data.as_deref().map(existing).transpose()?,
                    holdout: a.holdout.as_deref().map(existing).transpose()?,
                    seed: a.seed,
                    out: absolute(&a.out)?,
                })
            }
            Command::Render(a) => {
                let model = a.model.resolve()?;
                Job::Render(RenderJob {
                    n_source_views: source_views(&Some(model.clone()), a.n_source_views)?,
                    model,
                    data: existing(&a.data)?,
                    views_per_scene: a.views_per_scene,
                    out: absolute(&a.out)?,
                })
            }
            Command::Eval(a) => {
                let model = a.model.resolve()?;
                Job::Eval(EvalJob {
                    n_source_views: source_views(&Some(model.clone()), a.n_source_views)?,
                    model,
                    data: existing(&a.data)?,
                    views_per_scene: a.views_per_scene,
                    out: absolute(&a.out)?,
                })
            }
            Command::DepthStats(a) => {
                let density = match a.density.as_str() {
                    "trained" => DensityKind::Trained,
                    "spike" => DensityKind::Spike,
                    "uniform" => DensityKind::Uniform,
                    other => {
                        return Err(config_err(
                            "density",
                            format!("`{other}` is not trained, spike or uniform"),
                        ))
                    }
                };
                let model = match density {
                    DensityKind::Trained => Some(a.model.resolve()?),
                    _ => None,
                };
                let weight_mode = match a.weight_mode.as_str() {
                    "softmax" => DensityWeighting::Softmax,
                    "volume" => DensityWeighting::Volume,
                    other => return Err(config_err("weight_mode", format!("`{other}` is not softmax or volume"))),
                };
                let bins = parse_bins(&a.bins, a.bin_count)?;
                Job::DepthStats(DepthStatsJob {
                    n_source_views: source_views(&model, a.n_source_views)?,
                    model,
                    density,
                    data: existing(&a.data)?,
                    weight_mode,
                    deviation_bins: bins,
                    error_bins: bins,
                    pixel_stride: a.pixel_stride.max(1),
                    out: absolute(&a.out)?,
                })
            }
            Command::Ablate(a) => {
                if !a.mix_ratios.is_empty() && a.realish_data.is_none() {
                    return Err(config_err("mix_ratios", "a mix sweep needs --realish-data"));
                }
                if a.seeds.is_empty() {
                    return Err(config_err("seeds", "give at least one seed"));
                }
                Job::Ablate(AblateJob {
                    config: a.settings.resolve()?,
                    arms: parse_arms(a.arms.as_deref())?,
                    seeds: a.seeds.clone(),
                    data: existing(&a.data)?,
                    test: existing(&a.test)?,
                    realish_data: a.realish_data.as_deref().map(existing).transpose()?,
                    mix_ratios: a.mix_ratios.clone(),
                    views_per_scene: a.views_per_scene,
                    out: absolute(&a.out)?,
                })
            }
            Command::Replay(a) => {
                let m: RunManifest = serde_json::from_str(&read_text(&a.manifest)?)?;
                m.job.with_out(absolute(&a.out)?)
            }
        })
    }
}

impl Job {
    pub fn out(&self) -> &Path {
        match self {
            Job::GenScenes(j) => &j.out,
            Job::Train(j) => &j.out,
            Job::Render(j) => &j.out,
            Job::Eval(j) => &j.out,
            Job::DepthStats(j) => &j.out,
            Job::Ablate(j) => &j.out,
        }
    }

    pub fn with_out(mut self, out: PathBuf) -> Self {
        match &mut self {
            Job::GenScenes(j) => j.out = out,
            Job::Train(j) => j.out = out,
            Job::Render(j) => j.out = out,
            Job::Eval(j) => j.out = out,
            Job::DepthStats(j) => j.out = out,
            Job::Ablate(j) => j.out = out,
        }
        self
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self {
            Job::GenScenes(j) => vec![j.seed],
            Job::Train(j) => vec![j.seed],
            Job::Render(j) => j.model.seeds(),
            Job::Eval(j) => j.model.seeds(),
            Job::DepthStats(j) => j.model.as_ref().map(|m| m.seeds()).unwrap_or_default(),
            Job::Ablate(j) => j.seeds.clone(),
        }
    }

    /// Files the job promises, relative to its output directory.
    pub fn outputs(&self) -> Vec<PathBuf> {
        let names: Vec<String> = match self {
            Job::GenScenes(j) => (0..j.n_scenes).map(|i| format!("scene_{i:04}")).collect(),
            Job::Train(_) => vec!["checkpoint.ckpt".into(), "metrics.log".into()],
            Job::Render(_) => vec!["renders".into()],
            Job::Eval(_) => vec!["metrics.csv".into(), "summary.json".into()],
            Job::DepthStats(_) => [
                "deviation.csv",
                "error.csv",
                "deviation.png",
                "error.png",
                "summary.json",
            ]
            .map(String::from)
            .to_vec(),
            Job::Ablate(j) => {
                let mut v = vec!["summary.csv".to_string(), "runs.csv".into(), "logs".into()];
                if !j.mix_ratios.is_empty() {
                    v.push("mix.csv".into());
                }
                v
            }
        };
        names.into_iter().map(PathBuf::from).collect()
    }

    /// Creates the output directory, writes the manifest, then does the work.
    pub fn run(&self) -> Result<()> {
        let out = self.out();
        if out.join(MANIFEST).exists() {
            return Err(Error::invalid(format!(
                "{} already holds a manifest; choose a fresh --out",
                out.display()
            )));
        }
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let manifest = RunManifest {
            version: code_version(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            seeds: self.seeds(),
            outputs: self.outputs(),
            job: self.clone(),
        };
        let path = out.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        match self {
            Job::GenScenes(j) => run_gen_scenes(j),
            Job::Train(j) => run_train(j),
            Job::Render(j) => run_render(j),
            Job::Eval(j) => run_eval(j),
            Job::DepthStats(j) => run_depth_stats(j),
            Job::Ablate(j) => run_ablate(j),
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_gen_scenes(j: &GenScenesJob) -> Result<()> {
    let packs = generate_packs(j.n_scenes, &j.pack, j.noise, j.seed)?;
    for (i, pack) in packs.iter().enumerate() {
        save_pack(&j.out.join(format!("scene_{i:04}")), pack)?;
    }
    log::info!("wrote {} scenes to {}", packs.len(), j.out.display());
    Ok(())
}

fn run_train(j: &TrainJob) -> Result<()> {
    let data = load_packs(&j.data)?;
    let packs = match &j.realish_data {
        Some(r) => mix_datasets(&data, &load_packs(r)?, j.config.mix_ratio, j.seed)?,
        None => data,
    };
    let holdout = match &j.holdout {
        Some(h) => load_packs(h)?,
        None => Vec::new(),
    };
    let log_path = j.out.join("metrics.log");
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut write_err = None;
    let res = train(&j.config, &packs, &holdout, j.seed, &mut |l| {
        if let Err(e) = writeln!(log_file, "{l}") {
            write_err.get_or_insert(e);
        }
        if l.iter % 100 == 0 {
            log::info!("{l}");
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    save_checkpoint(
        &j.out.join("checkpoint.ckpt"),
        &res.model,
        j.config.adam,
        serde_json::to_value(&j.config)?,
        res.adam_steps,
    )
}

fn sources_of(pack: &ScenePack, view: usize, n: usize) -> Vec<&CameraView> {
    nearest_views(&pack.views, &pack.views[view].camera, Some(view), n)
        .into_iter()
        .map(|i| &pack.views[i])
        .collect()
}

fn run_render(j: &RenderJob) -> Result<()> {
    let (model, _) = j.model.load()?;
    let packs = load_packs(&j.data)?;
    let dir = j.out.join("renders");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (si, pack) in packs.iter().enumerate() {
        let (near, far) = depth_bounds(pack)?;
        let n = j.views_per_scene.unwrap_or(pack.views.len()).min(pack.views.len());
        for vi in 0..n {
            let sources = sources_of(pack, vi, j.n_source_views);
            let r = model.render_view(&pack.views[vi].camera, &sources, near, far, 256)?;
            save_png(&dir.join(format!("rgb_s{si:04}_v{vi:04}.png")), &r.image)?;
            save_depth(&dir.join(format!("depth_s{si:04}_v{vi:04}.bin")), &r.depth)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    n_views: usize,
    mean_psnr: f64,
    mean_ssim: f64,
}

fn run_eval(j: &EvalJob) -> Result<()> {
    let (model, _) = j.model.load()?;
    let packs = load_packs(&j.data)?;
    let opts = EvalOptions {
        n_source_views: j.n_source_views,
        views_per_scene: j.views_per_scene,
        ..Default::default()
    };
    let rows = evaluate(&model, &packs, &opts, &[])?;
    write_file(&j.out.join("metrics.csv"), &metrics_csv(&rows))?;
    let (mean_psnr, mean_ssim) = mean_psnr_ssim(&rows);
    let summary = EvalSummary {
        n_views: rows.len(),
        mean_psnr,
        mean_ssim,
    };
    write_file(&j.out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)
}

#[derive(Serialize)]
struct DepthSummary {
    n_pixels: usize,
    skipped_scenes: usize,
    mean_deviation: f64,
    mean_error: f64,
}

fn run_depth_stats(j: &DepthStatsJob) -> Result<()> {
    let packs = load_packs(&j.data)?;
    let loaded;
    let density: Box<dyn DensityModel + '_> = match j.density {
        DensityKind::Spike => Box::new(SpikeDensity),
        DensityKind::Uniform => Box::new(UniformDensity),
        DensityKind::Trained => {
            let spec = j
                .model
                .as_ref()
                .ok_or_else(|| Error::invalid("trained density needs a model"))?;
            loaded = spec.load()?.0;
            Box::new(TrainedDensity {
                model: &loaded,
                n_source_views: j.n_source_views,
                chunk: 256,
            })
        }
    };
    let samples = collect_depth_stats(density.as_ref(), &packs, j.weight_mode, j.pixel_stride)?;
    if samples.error.is_empty() {
        return Err(Error::invalid("no pixel with ground-truth depth"));
    }
    let h = depth_histograms(&samples, j.deviation_bins, j.error_bins)?;
    write_file(&j.out.join("deviation.csv"), &h.deviation.to_csv())?;
    write_file(&j.out.join("error.csv"), &h.error.to_csv())?;
    plot_histogram(&h.deviation, 400, 240).save(j.out.join("deviation.png"))?;
    plot_histogram(&h.error, 400, 240).save(j.out.join("error.png"))?;
    let n = samples.error.len() as f64;
    let summary = DepthSummary {
        n_pixels: h.n_pixels,
        skipped_scenes: samples.skipped_scenes,
        mean_deviation: samples.deviation.iter().sum::<f64>() / n,
        mean_error: samples.error.iter().sum::<f64>() / n,
    };
    write_file(&j.out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)
}

fn runs_csv(runs: &[RunResult]) -> String {
    let mut s = String::from("arm,seed,psnr,ssim,first_loss,final_loss\n");
    for r in runs {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.arm, r.seed, r.psnr, r.ssim, r.first_loss, r.final_loss
        ));
    }
    s
}

fn run_ablate(j: &AblateJob) -> Result<()> {
    let train_packs = load_packs(&j.data)?;
    let test = load_packs(&j.test)?;
    let eval = EvalOptions {
        n_source_views: j.config.n_source_views,
        views_per_scene: j.views_per_scene,
        ..Default::default()
    };
    let logs = j.out.join("logs");
    fs::create_dir_all(&logs).map_err(|e| Error::io(&logs, e))?;
    let mut runs = Vec::new();
    for arm in &j.arms {
        let cfg = arm.configure(&j.config);
        let mut lines = String::new();
        let res = run_arm(
            arm.name(),
            &cfg,
            &train_packs,
            &test,
            &j.seeds,
            &eval,
            &mut |a, seed, l| {
                lines.push_str(&format!("arm={a} seed={seed} {l}\n"));
            },
        )?;
        write_file(&logs.join(format!("{}.log", arm.name())), &lines)?;
        log::info!("arm {} done", arm.name());
        runs.extend(res);
    }
    write_file(&j.out.join("runs.csv"), &runs_csv(&runs))?;
    write_file(&j.out.join("summary.csv"), &summary_csv(&summarize(&runs)))?;
    if let Some(realish_dir) = &j.realish_data {
        let realish = load_packs(realish_dir)?;
        let cfg = Arm::Full.configure(&j.config);
        let mut s = String::from("ratio,psnr,ssim\n");
        for &ratio in &j.mix_ratios {
            let mixed = mix_datasets(&train_packs, &realish, ratio, j.seeds[0])?;
            let mut lines = String::new();
            let res = run_arm("full", &cfg, &mixed, &test, &j.seeds, &eval, &mut |a, seed, l| {
                lines.push_str(&format!("arm={a} seed={seed} {l}\n"));
            })?;
            write_file(&logs.join(format!("mix_{ratio}.log")), &lines)?;
            let row = &summarize(&res)[0];
            s.push_str(&format!("{ratio},{},{}\n", row.psnr, row.ssim));
        }
        write_file(&j.out.join("mix.csv"), &s)?;
    }
    Ok(())
}

/// Entry point of the `nvs` binary.
pub fn run(cli: &Cli) -> Result<()> {
    cli.resolve()?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_parsing() {
        assert_eq!(parse_resolution("r", "64x48").unwrap(), (64, 48));
        assert!(parse_resolution("r", "64").is_err());
        assert!(parse_resolution("r", "0x4").is_err());
    }

    #[test]
    fn bins_parsing() {
        assert_eq!(
            parse_bins("percentile", 50).unwrap(),
            Bins::Percentile {
                count: 50,
                quantile: 0.99
            }
        );
        assert_eq!(
            parse_bins("uniform:0:2", 10).unwrap(),
            Bins::Uniform {
                count: 10,
                lo: 0.0,
                hi: 2.0
            }
        );
        assert!(parse_bins("log", 5).is_err());
    }

    #[test]
    fn seeds_are_required() {
        assert!(Cli::try_parse_from(["nvs", "gen-scenes", "--out", "x"]).is_err());
        assert!(Cli::try_parse_from(["nvs", "ablate", "--data", "a", "--test", "b", "--out", "c"]).is_err());
    }
}
