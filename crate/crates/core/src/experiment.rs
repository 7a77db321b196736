//! TOML experiment configs, single runs, grids, curve merging and the
//! input-SNR table.
//!
//! A config has the sections `data`, `operator`, `noise`, `model`, `train`
//! and `output`; a grid file is a config plus a `[grid]` table mapping dotted
//! keys to value lists, e.g. `"train.loss" = ["ll", "iw:1"]`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{center_tiles, ingest, Dataset, IngestLimits, Split, TileSource};
use crate::dncnn::DnCNNConfig;
use crate::error::{Error, Result};
use crate::eval::{baseline_psnr, MetricsReport};
use crate::operator::{input_snr, NoiseModel, OperatorKind};
use crate::train::{train, Checkpoint, OperatorSpec, TrainConfig};
use crate::unrolled::{Algorithm, LossSpec, UnrollPlan};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DEMUN_OUT";
/// Sampling rates accepted without an explicit `operator.m`.
pub const PAPER_RATES: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
/// Noise levels of the input-SNR table.
pub const SNR_SIGMAS: [f64; 4] = [0.01, 0.025, 0.05, 0.10];

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PER_IMAGE_FILE: &str = "per_image.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub images: usize,
    #[serde(default)]
    pub seed: u64,
}

fn desk_test() -> usize {
    200
}
fn desk_train() -> usize {
    1440
}
fn desk_val() -> usize {
    360
}

/// Tiles come from an image directory or from generated scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    pub k: usize,
    #[serde(default = "desk_test")]
    pub test: usize,
    #[serde(default = "desk_train")]
    pub train: usize,
    #[serde(default = "desk_val")]
    pub val: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_images: Option<usize>,
    /// Dataset cache file, written on first use and reloaded afterwards.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

impl DataSpec {
    /// Loads and splits the tiles.
    pub fn load(&self) -> Result<Dataset> {
        if let Some(cache) = self.cache.as_ref().filter(|p| p.exists()) {
            let ds = Dataset::load_cache(cache)?;
            if ds.k() != self.k {
                return Err(Error::config(
                    "data.cache",
                    format!("{} holds {1}x{1} tiles, config asks for k={2}", cache.display(), ds.k(), self.k),
                ));
            }
            return ds.split(self.test, self.train, self.val);
        }
        let limits = IngestLimits { max_images: self.max_images };
        let ds = match (&self.dir, &self.synthetic) {
            (Some(dir), None) => ingest(dir, self.k, limits)?,
            (None, Some(s)) => synthetic_dataset(s, self.k, self.max_images)?,
            _ => return Err(Error::config("data", "set exactly one of `dir` or `synthetic`")),
        };
        if let Some(cache) = &self.cache {
            ds.save_cache(cache)?;
        }
        ds.split(self.test, self.train, self.val)
    }
}

/// Tiles of `images` generated `3k x 3k` scenes, as if ingested from PNGs
/// named `scene_00000.png`, ...
fn synthetic_dataset(spec: &SyntheticSpec, k: usize, max_images: Option<usize>) -> Result<Dataset> {
    let count = max_images.map_or(spec.images, |m| m.min(spec.images));
    if count == 0 || k == 0 {
        return Err(Error::Empty("synthetic corpus with no images".into()));
    }
    let side = 3 * k;
    let mut tiles = Vec::with_capacity(count * 9 * k * k);
    let mut manifest = Vec::with_capacity(count * 9);
    for i in 0..count {
        let img = crate::synth::scene(side, spec.seed.wrapping_add(i as u64));
        let plane: Vec<f64> = img.pixels().map(|p| p[0] as f64).collect();
        let file = format!("scene_{i:05}.png");
        for (t, tile) in center_tiles(side, side, &plane, k).expect("scene is 3k wide").into_iter().enumerate() {
            tiles.extend(tile);
            manifest.push(TileSource { file: file.clone(), tile: t });
        }
    }
    Dataset::from_tiles(k, tiles, manifest)
}

fn default_noise() -> NoiseModel {
    NoiseModel::noiseless()
}
fn yes() -> bool {
    true
}
fn default_kernel() -> usize {
    3
}
fn default_eps() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub algorithm: Algorithm,
    pub steps: usize,
    #[serde(default = "yes")]
    pub residual: bool,
    pub depth: usize,
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub tie_weights: bool,
    #[serde(default = "default_eps")]
    pub amp_probe_eps: f64,
}

fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    /// Loss id: `ll`, `iw:<omega>` or `skip:<L>`.
    pub loss: String,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub data: DataSpec,
    pub operator: OperatorSpec,
    #[serde(default = "default_noise")]
    pub noise: NoiseModel,
    pub model: ModelSpec,
    pub train: TrainSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::config(origin, e.to_string().trim_end()))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Resolves relative data paths against the directory of the config file.
fn resolve_paths(cfg: &mut ExperimentConfig, base: &Path) {
    for p in [&mut cfg.data.dir, &mut cfg.data.cache, &mut cfg.output.dir].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text, "<toml>")?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&read_text(path)?)?;
        resolve_paths(&mut cfg, path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn loss(&self) -> Result<LossSpec> {
        self.train
            .loss
            .parse()
            .map_err(|e: Error| Error::config("train.loss", e.to_string()))
    }

    pub fn plan(&self) -> UnrollPlan {
        let m = &self.model;
        let mut plan = UnrollPlan::new(
            m.algorithm,
            m.steps,
            m.residual,
            DnCNNConfig {
                depth: m.depth,
                channels: m.channels,
                kernel: m.kernel,
                image_k: self.data.k,
            },
        );
        plan.tie_weights = m.tie_weights;
        plan.amp_probe_eps = m.amp_probe_eps;
        plan
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.dir.is_some() == d.synthetic.is_some() {
            return Err(Error::config("data", "set exactly one of `dir` or `synthetic`"));
        }
        if d.k == 0 {
            return Err(Error::config("data.k", "tile size must be positive"));
        }
        let n = d.k * d.k;
        match self.operator.m {
            Some(m) if m == 0 || m > n => {
                return Err(Error::config("operator.m", format!("m = {m} outside 1..={n}")));
            }
            Some(_) => {}
            None if !PAPER_RATES.contains(&self.operator.rate) => {
                return Err(Error::config(
                    "operator.rate",
                    format!(
                        "rate {} must be one of {PAPER_RATES:?}; set `operator.m` for other sizes",
                        self.operator.rate
                    ),
                ));
            }
            None => {}
        }
        if !(self.noise.sigma >= 0.0 && self.noise.sigma.is_finite()) {
            return Err(Error::config("noise.sigma", format!("{} must be >= 0", self.noise.sigma)));
        }
        let m = &self.model;
        if m.steps == 0 {
            return Err(Error::config("model.steps", "need at least one step"));
        }
        if m.channels == 0 {
            return Err(Error::config("model.channels", "need at least one channel"));
        }
        if m.kernel % 2 == 0 {
            return Err(Error::config("model.kernel", format!("kernel {} must be odd", m.kernel)));
        }
        if !(m.amp_probe_eps > 0.0 && m.amp_probe_eps.is_finite()) {
            return Err(Error::config("model.amp_probe_eps", "must be positive"));
        }
        let loss = self.loss()?;
        loss.validate(m.steps)
            .map_err(|e| Error::config("train.loss", e.to_string()))?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::config("train.epochs", "need at least one epoch"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("{} must be >= 0", t.lr)));
        }
        if let Some(c) = t.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.clip_norm", format!("{c} must be positive")));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seed: self.train.seed,
            loss: self.loss()?,
            plan: self.plan(),
            operator: self.operator,
            noise: self.noise,
            clip_norm: self.train.clip_norm,
        })
    }

    /// `operator.m`, or the rate-derived count.
    pub fn measurements(&self) -> Result<usize> {
        self.operator.measurements(self.data.k * self.data.k)
    }

    /// The configured output dir, else `$DEMUN_OUT/<name>`, else `runs/<name>`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.output.dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(self.name.as_deref().unwrap_or("run"))
    }
}

/// Scalar results of one run, also written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean_psnr: f64,
    pub curve: Vec<f64>,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub aborted: Option<String>,
    pub adjoint_psnr: f64,
    pub min_norm_psnr: f64,
    pub wall_seconds: f64,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains, evaluates on the test split and writes the run directory:
/// config echo, checkpoint, per-image and curve CSVs, and a summary.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(CONFIG_FILE), cfg.to_toml())?;
    let dataset = cfg.data.load()?;
    let tc = cfg.train_config()?;
    let ckpt = train(&tc, &dataset)?;
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    let mut report = ckpt.evaluate(&dataset, Split::Test)?;
    report.label = cfg.name.clone().unwrap_or_default();
    report.write_csvs(&out.join(PER_IMAGE_FILE), &out.join(CURVE_FILE))?;
    let op = ckpt.operator()?;
    let (adjoint_psnr, min_norm_psnr) = baseline_psnr(&op, &dataset, Split::Test, &tc.noise)?;
    let summary = RunSummary {
        mean_psnr: report.mean_psnr,
        curve: report.curve.clone(),
        best_epoch: ckpt.best_epoch,
        train_loss: ckpt.train_loss.clone(),
        val_loss: ckpt.val_loss.clone(),
        aborted: ckpt.aborted.clone(),
        adjoint_psnr,
        min_norm_psnr,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    write_file(&out.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Re-evaluates a stored checkpoint on `split` of the config's dataset.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, split: Split) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let k = ckpt.config.plan.projector.image_k;
    if k != cfg.data.k {
        return Err(Error::shape(
            "evaluate",
            format!("checkpoint is for {k}x{k} tiles, config data.k = {}", cfg.data.k),
        ));
    }
    let dataset = cfg.data.load()?;
    let mut report = ckpt.evaluate(&dataset, split)?;
    report.label = cfg.name.clone().unwrap_or_default();
    Ok(report)
}

/// A base config plus per-axis value lists keyed by dotted config paths.
#[derive(Clone, Debug)]
pub struct GridSpec {
    pub base: toml::Table,
    pub axes: Vec<(String, Vec<toml::Value>)>,
    /// Relative paths in cell configs resolve against this directory.
    pub base_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct GridCell {
    pub index: usize,
    pub assignments: Vec<(String, toml::Value)>,
    pub table: toml::Table,
    pub base_dir: Option<PathBuf>,
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut at = table;
    while let Some(key) = parts.next() {
        if parts.peek().is_none() {
            at.insert(key.to_string(), value);
            return Ok(());
        }
        at = at
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("grid.{path}"), format!("`{key}` is not a table")))?;
    }
    Err(Error::config("grid", "empty axis key"))
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl GridSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut base = parse_table(text, "<toml>")?;
        let grid = match base.remove("grid") {
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(Error::config("grid", "must be a table of value lists")),
            None => return Err(Error::config("grid", "missing `[grid]` table")),
        };
        let mut axes = Vec::new();
        for (key, values) in grid {
            let list = match values {
                toml::Value::Array(a) if !a.is_empty() => a,
                _ => return Err(Error::config(format!("grid.{key}"), "must be a non-empty list")),
            };
            axes.push((key, list));
        }
        Ok(Self { base, axes, base_dir: None })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut spec = Self::from_toml_str(&read_text(path)?)?;
        spec.base_dir = Some(path.parent().unwrap_or(Path::new(".")).to_path_buf());
        Ok(spec)
    }

    /// Number of cells: the product of the axis lengths.
    pub fn len(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian expansion in file order, last axis fastest.
    pub fn cells(&self) -> Result<Vec<GridCell>> {
        let mut cells = Vec::with_capacity(self.len());
        for index in 0..self.len() {
            let mut rem = index;
            let mut assignments = vec![(String::new(), toml::Value::Boolean(false)); self.axes.len()];
            for (a, (key, values)) in self.axes.iter().enumerate().rev() {
                assignments[a] = (key.clone(), values[rem % values.len()].clone());
                rem /= values.len();
            }
            let mut table = self.base.clone();
            for (key, value) in &assignments {
                set_path(&mut table, key, value.clone())?;
            }
            cells.push(GridCell {
                index,
                assignments,
                table,
                base_dir: self.base_dir.clone(),
            });
        }
        Ok(cells)
    }

    /// Applies `train.seed = seed` to the base config.
    pub fn override_seed(&mut self, seed: u64) -> Result<()> {
        set_path(&mut self.base, "train.seed", toml::Value::Integer(seed as i64))
    }
}

impl GridCell {
    pub fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_table(self.table.clone())?;
        if let Some(base) = &self.base_dir {
            resolve_paths(&mut cfg, base);
        }
        Ok(cfg)
    }

    pub fn dir_name(&self) -> String {
        format!("cell_{:03}", self.index)
    }
}

/// One row of the grid table.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub cell: usize,
    pub values: Vec<String>,
    pub seed: Option<u64>,
    pub outcome: std::result::Result<RunSummary, String>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `cell,<axes...>,seed,mean_psnr,adjoint_psnr,status,message`.
pub fn grid_table_csv(axes: &[String], rows: &[GridRow]) -> String {
    let mut s = String::from("cell");
    for a in axes {
        s.push(',');
        s.push_str(&csv_field(a));
    }
    s.push_str(",seed,mean_psnr,adjoint_psnr,status,message\n");
    for r in rows {
        let _ = write!(s, "{}", r.cell);
        for v in &r.values {
            let _ = write!(s, ",{}", csv_field(v));
        }
        let seed = r.seed.map(|v| v.to_string()).unwrap_or_default();
        match &r.outcome {
            Ok(sum) => {
                let _ = writeln!(s, ",{seed},{},{},ok,", sum.mean_psnr, sum.adjoint_psnr);
            }
            Err(msg) => {
                let _ = writeln!(s, ",{seed},,,failed,{}", csv_field(msg));
            }
        }
    }
    s
}

/// Runs every cell into `out/cell_NNN` on `jobs` worker threads and writes
/// `out/table.csv`. Failed cells are reported in the table, not dropped.
pub fn run_grid(grid: &GridSpec, out: &Path, jobs: usize) -> Result<Vec<GridRow>> {
    let cells = grid.cells()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<GridRow>> = Mutex::new(Vec::with_capacity(cells.len()));
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let cfg = cell.config();
                let seed = cfg.as_ref().ok().map(|c| c.train.seed);
                let outcome = cfg
                    .and_then(|c| run(&c, &out.join(cell.dir_name())))
                    .map_err(|e| e.to_string());
                match &outcome {
                    Ok(s) => log::info!("cell {}: {:.3} dB", cell.index, s.mean_psnr),
                    Err(e) => log::warn!("cell {} failed: {e}", cell.index),
                }
                rows.lock().unwrap().push(GridRow {
                    cell: cell.index,
                    values: cell.assignments.iter().map(|(_, v)| value_text(v)).collect(),
                    seed,
                    outcome,
                });
            });
        }
    });
    let mut rows = rows.into_inner().unwrap();
    rows.sort_by_key(|r| r.cell);
    let axes: Vec<String> = grid.axes.iter().map(|(k, _)| k.clone()).collect();
    write_file(&out.join("table.csv"), grid_table_csv(&axes, &rows))?;
    Ok(rows)
}

/// Long-format `run,rate,step,psnr_db` rows merged from run directories.
/// The run id is the directory name; PSNR values are copied verbatim.
pub fn merge_curves(run_dirs: &[PathBuf]) -> Result<String> {
    let mut s = String::from("run,rate,step,psnr_db\n");
    for dir in run_dirs {
        let cfg_path = dir.join(CONFIG_FILE);
        let cfg = ExperimentConfig::from_toml_str(&read_text(&cfg_path)?)?;
        let rate = cfg.measurements()? as f64 / (cfg.data.k * cfg.data.k) as f64;
        let curve_path = dir.join(CURVE_FILE);
        let text = read_text(&curve_path)?;
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let (step, psnr) = line
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("{}: bad row `{line}`", curve_path.display())))?;
            let _ = writeln!(s, "{},{rate},{step},{psnr}", csv_field(&id));
        }
    }
    Ok(s)
}

/// Input SNR in dB over the test split, one row per (rate, matrix kind) and
/// one column per noise level.
pub fn snr_table(cfg: &ExperimentConfig, rates: &[f64], sigmas: &[f64]) -> Result<String> {
    let dataset = cfg.data.load()?;
    let range = dataset.range(Split::Test)?;
    let mut s = String::from("rate,matrix");
    for sigma in sigmas {
        let _ = write!(s, ",sigma={sigma}");
    }
    s.push('\n');
    for &rate in rates {
        for kind in [OperatorKind::Gaussian, OperatorKind::Dct] {
            let op = OperatorSpec::from_rate(kind, rate, cfg.operator.seed).build(cfg.data.k)?;
            let _ = write!(s, "{rate},{kind}");
            for &sigma in sigmas {
                let noise = NoiseModel::new(sigma, cfg.noise.seed)?;
                let db = input_snr(&op, range.clone().map(|i| dataset.tile(i)), &noise)?;
                let _ = write!(s, ",{db:.4}");
            }
            s.push('\n');
        }
    }
    Ok(s)
}
