//! Command-line front end.
//!
//! Every command reads an optional TOML run config, applies trailing
//! `section.key=value` overrides, writes its outputs under `--out`, and ends
//! by writing `manifest.json` listing the files it produced and the seed.
//!
//! The run config has a top-level `seed` and `architecture` plus the
//! sections `[synth]`, `[model]`, `[train]` (with `[train.loss]`) and
//! `[data]`. The top-level seed is copied into every section, so it is the
//! only seed that matters.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::analysis::{consistency_table, level_heatmaps, region_miou, save_heatmap, DEFAULT_TAU};
use crate::checkpoint::load_checkpoint;
use crate::data::{
    export_image_folder, load_image_folder, make_synthetic, resize_square, Sample, SynthConfig, SynthDataset,
};
use crate::error::{HcastError, Result};
use crate::exec::Execution;
use crate::metrics::{assemble_report, read_predictions, render_table, write_predictions, MetricsReport};
use crate::model::{Architecture, Model, ModelConfig};
use crate::superpixel::save_overlay;
use crate::taxonomy::{load_taxonomy, TaxonomyTree};
use crate::trainer::{evaluate, run_ablation, train, TrainConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synth,
    Folder,
}

/// Where samples come from. Relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub taxonomy: Option<PathBuf>,
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub architecture: Architecture,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Parses TOML, applies overrides, and propagates the top-level seed.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| HcastError::Config(format!("run config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e| HcastError::Config(format!("run config: {e}")))?;
        cfg.synth.seed = cfg.seed;
        cfg.model.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `section.key=value` (any depth; a bare `key=value` sets a top-level
/// key). Values are parsed as TOML and fall back to plain strings.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| HcastError::Config(format!("override {spec:?} is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(HcastError::Config(format!("override {spec:?} has an empty key")));
    }
    let (last, parents) = keys.split_last().unwrap();
    let mut cursor = table;
    for k in parents {
        let entry = cursor.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| HcastError::Config(format!("override {spec:?}: {k} is not a section")))?;
    }
    cursor.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "hcast", version, about = "Hierarchical classification over nested superpixel segments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides of the form section.key=value.
    #[arg(value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset as image folders plus taxonomy CSV.
    MakeSynth(Common),
    /// Train a model and score it on the test split.
    Train(Common),
    /// Score a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an ablation suite: direction or loss_variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: String,
    },
    /// Heatmaps, segment overlays and coarse/fine agreement statistics.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test samples to render.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
    },
    /// Region mIoU of final-stage segments against synthetic masks.
    SegmentEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a prediction dump offline.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        /// Defaults to the directory holding the dump.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: Option<u64>,
    /// Paths relative to the output directory.
    pub files: Vec<String>,
}

enum Failure {
    Usage(String),
    Runtime(HcastError),
}

impl From<HcastError> for Failure {
    fn from(e: HcastError) -> Self {
        Failure::Runtime(e)
    }
}

/// Collects produced files for the manifest.
struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| HcastError::io(root, e))?;
        Ok(Outputs { root: root.to_path_buf(), files: Vec::new() })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn record(&mut self, path: PathBuf) {
        if !self.files.contains(&path) {
            self.files.push(path);
        }
    }

    fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| HcastError::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| HcastError::io(&path, e))?;
        self.record(path);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        self.write(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn record_checkpoint(&mut self, dir: &Path) {
        self.record(dir.join("model.bin"));
        self.record(dir.join("model.json"));
    }

    fn finish(self, command: &str, seed: Option<u64>) -> Result<()> {
        let files = self
            .files
            .iter()
            .map(|p| p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/"))
            .collect();
        let manifest = Manifest { command: command.into(), seed, files };
        let path = self.root.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| HcastError::io(&path, e))
    }
}

fn load_config(common: &Common) -> std::result::Result<(RunConfig, PathBuf), Failure> {
    let (text, base) = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            (text, path.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (String::new(), PathBuf::from(".")),
    };
    let cfg = RunConfig::from_toml(&text, &common.overrides).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((cfg, base))
}

fn resolve(base: &Path, p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = p.as_ref().ok_or_else(|| HcastError::Config(format!("data.{key} is required for folder data")))?;
    Ok(if p.is_absolute() { p.clone() } else { base.join(p) })
}

/// Builds or loads the dataset the config describes, at the model's image
/// size.
pub fn load_dataset(cfg: &RunConfig, base: &Path) -> Result<SynthDataset> {
    match cfg.data.source {
        DataSource::Synth => {
            if cfg.synth.image_size != cfg.model.image_size {
                return Err(HcastError::Config(format!(
                    "synth.image_size {} differs from model.image_size {}",
                    cfg.synth.image_size, cfg.model.image_size
                )));
            }
            make_synthetic(&cfg.synth)
        }
        DataSource::Folder => {
            let tax_path = resolve(base, &cfg.data.taxonomy, "taxonomy")?;
            let file = fs::File::open(&tax_path).map_err(|e| HcastError::io(&tax_path, e))?;
            let tree = load_taxonomy(BufReader::new(file))?;
            let split = |key: &str, dir: &Option<PathBuf>| -> Result<Vec<Sample>> {
                let load = load_image_folder(&resolve(base, dir, key)?, &tree)?;
                for (path, reason) in &load.errors {
                    log::warn!("skipping {}: {reason}", path.display());
                }
                Ok(load
                    .samples
                    .into_iter()
                    .map(|mut s| {
                        s.image = resize_square(&s.image, cfg.model.image_size);
                        s
                    })
                    .collect())
            };
            let train = split("train_dir", &cfg.data.train_dir)?;
            let test = split("test_dir", &cfg.data.test_dir)?;
            Ok(SynthDataset { tree, train, test })
        }
    }
}

fn build_model(cfg: &RunConfig, tree: &TaxonomyTree) -> Result<Model> {
    Model::build(cfg.model.clone(), tree, cfg.architecture)
}

fn write_report(out: &mut Outputs, report: &MetricsReport) -> Result<()> {
    out.write_json("report.json", report)?;
    out.write("report.txt", &render_table(report))
}

fn write_dump(out: &mut Outputs, records: &[crate::metrics::PredictionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_predictions(&mut buf, records)?;
    out.write("predictions.jsonl", &String::from_utf8(buf).expect("JSON is UTF-8"))
}

fn cmd_make_synth(common: &Common) -> std::result::Result<(), Failure> {
    let (cfg, _) = load_config(common)?;
    let data = make_synthetic(&cfg.synth)?;
    let mut out = Outputs::new(&common.out)?;
    out.write("taxonomy.csv", &data.tree.to_csv())?;
    for (split, samples) in [("train", &data.train), ("test", &data.test)] {
        for path in export_image_folder(samples, &data.tree, &out.path(split))? {
            out.record(path);
        }
    }
    out.write("config.toml", &cfg.to_toml())?;
    out.finish("make-synth", Some(cfg.seed))?;
    Ok(())
}

fn cmd_train(common: &Common) -> std::result::Result<(), Failure> {
    let (cfg, base) = load_config(common)?;
    let data = load_dataset(&cfg, &base)?;
    let mut model = build_model(&cfg, &data.tree)?;
    let mut out = Outputs::new(&common.out)?;
    let exec = Execution::default();
    let record = train(&mut model, &data.tree, &data.train, Some(&data.test), &cfg.train, Some(&common.out), exec)?;
    for dir in [&record.final_checkpoint, &record.best_checkpoint].into_iter().flatten() {
        out.record_checkpoint(dir);
    }
    out.write_json("run_record.json", &record)?;
    let (report, records) = evaluate(&model, &data.tree, &data.test, exec)?;
    write_dump(&mut out, &records)?;
    write_report(&mut out, &report)?;
    out.write("config.toml", &cfg.to_toml())?;
    out.finish("train", Some(cfg.seed))?;
    Ok(())
}

fn cmd_evaluate(common: &Common, checkpoint: &Path) -> std::result::Result<(), Failure> {
    let (cfg, base) = load_config(common)?;
    let data = load_dataset(&cfg, &base)?;
    let (model, _) = load_checkpoint(checkpoint, &data.tree)?;
    let mut out = Outputs::new(&common.out)?;
    let (report, records) = evaluate(&model, &data.tree, &data.test, Execution::default())?;
    write_dump(&mut out, &records)?;
    write_report(&mut out, &report)?;
    out.finish("evaluate", Some(cfg.seed))?;
    Ok(())
}

fn cmd_ablate(common: &Common, suite: &str) -> std::result::Result<(), Failure> {
    let suite = suite.parse().map_err(|e: HcastError| Failure::Usage(e.to_string()))?;
    let (cfg, base) = load_config(common)?;
    let data = load_dataset(&cfg, &base)?;
    let mut out = Outputs::new(&common.out)?;
    let arms_dir = out.path("arms");
    let table = run_ablation(suite, &cfg.model, &cfg.train, &data, Some(&arms_dir), Execution::default())?;
    for arm in &table.arms {
        if let Some(dir) = arm.record.as_ref().and_then(|r| r.final_checkpoint.as_ref()) {
            out.record_checkpoint(dir);
        }
    }
    out.write_json("ablation.json", &table)?;
    out.write("ablation.txt", &table.render())?;
    out.finish("ablate", Some(cfg.seed))?;
    Ok(())
}

fn cmd_analyze(common: &Common, checkpoint: &Path, samples: usize, tau: f64) -> std::result::Result<(), Failure> {
    let (cfg, base) = load_config(common)?;
    let data = load_dataset(&cfg, &base)?;
    let (model, _) = load_checkpoint(checkpoint, &data.tree)?;
    let mut out = Outputs::new(&common.out)?;
    let stats = consistency_table(&model, &data.test, tau, Execution::default())?;
    out.write_json("consistency.json", &stats)?;
    let heat_dir = out.path("heatmaps");
    let seg_dir = out.path("segments");
    fs::create_dir_all(&heat_dir).map_err(|e| HcastError::io(&heat_dir, e))?;
    fs::create_dir_all(&seg_dir).map_err(|e| HcastError::io(&seg_dir, e))?;
    for sample in data.test.iter().take(samples) {
        let stem = sample.id.replace('/', "_");
        let (_, maps) = level_heatmaps(&model, &sample.image)?;
        for map in &maps {
            for p in save_heatmap(&heat_dir, &format!("{stem}_level{}", map.level + 1), &sample.image, map)? {
                out.record(p);
            }
        }
        if let Some(h) = model.forward(&sample.image)?.hierarchy {
            for stage in 0..h.num_stages() {
                let path = seg_dir.join(format!("{stem}_stage{stage}.png"));
                save_overlay(&path, sample.image.view(), &h.project_segments(stage)?, cfg.seed)?;
                out.record(path);
            }
        }
    }
    out.finish("analyze", Some(cfg.seed))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SegmentEval {
    stage: usize,
    mean_miou: f64,
    per_sample: Vec<(String, f64)>,
}

fn cmd_segment_eval(common: &Common, checkpoint: &Path) -> std::result::Result<(), Failure> {
    let (cfg, base) = load_config(common)?;
    let data = load_dataset(&cfg, &base)?;
    let (model, _) = load_checkpoint(checkpoint, &data.tree)?;
    if model.architecture != Architecture::HCast {
        return Err(HcastError::Unsupported("segment evaluation needs a superpixel model".into()).into());
    }
    let outputs = Execution::default().map(&data.test, |s| -> Result<Option<(String, f64)>> {
        let Some(mask) = &s.mask else { return Ok(None) };
        if mask.iter().all(|&v| v == 0) {
            return Ok(None);
        }
        let h = model.forward(&s.image)?.hierarchy.expect("superpixel model");
        let pred = h.project_segments(h.num_stages() - 1)?;
        let gt: Array2<usize> = mask.mapv(usize::from);
        Ok(Some((s.id.clone(), region_miou(&pred, &gt)?)))
    });
    let per_sample: Vec<(String, f64)> =
        outputs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    if per_sample.is_empty() {
        return Err(HcastError::Unsupported("no test samples carry region masks".into()).into());
    }
    let mean_miou = per_sample.iter().map(|(_, v)| v).sum::<f64>() / per_sample.len() as f64;
    let mut out = Outputs::new(&common.out)?;
    out.write_json("segment_eval.json", &SegmentEval { stage: cfg.model.num_stages() - 1, mean_miou, per_sample })?;
    out.finish("segment-eval", Some(cfg.seed))?;
    Ok(())
}

fn cmd_metrics(pred: &Path, taxonomy: &Path, out_dir: Option<&Path>) -> std::result::Result<(), Failure> {
    let tax = fs::File::open(taxonomy).map_err(|e| HcastError::io(taxonomy, e))?;
    let tree = load_taxonomy(BufReader::new(tax))?;
    let dump = fs::File::open(pred).map_err(|e| HcastError::io(pred, e))?;
    let records = read_predictions(BufReader::new(dump))?;
    let report = assemble_report(&records, &tree)?;
    let root =
        out_dir.map(Path::to_path_buf).unwrap_or_else(|| pred.parent().map(Path::to_path_buf).unwrap_or_default());
    let mut out = Outputs::new(&root)?;
    write_report(&mut out, &report)?;
    print!("{}", render_table(&report));
    out.finish("metrics", None)?;
    Ok(())
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 1 on usage or configuration errors and 2 on
/// runtime errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::MakeSynth(c) => cmd_make_synth(c),
        Command::Train(c) => cmd_train(c),
        Command::Evaluate { common, checkpoint } => cmd_evaluate(common, checkpoint),
        Command::Ablate { common, suite } => cmd_ablate(common, suite),
        Command::Analyze { common, checkpoint, samples, tau } => cmd_analyze(common, checkpoint, *samples, *tau),
        Command::SegmentEval { common, checkpoint } => cmd_segment_eval(common, checkpoint),
        Command::Metrics { pred, taxonomy, out } => cmd_metrics(pred, taxonomy, out.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\nRun `hcast --help` for usage.");
            1
        }
        Err(Failure::Runtime(e @ HcastError::Config(_))) => {
            eprintln!("error: {e}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
