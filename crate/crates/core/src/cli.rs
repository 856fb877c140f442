//! Command implementations behind the `gads` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{bank_from_ids, read_feature_file, read_prototypes_file, BankScope, FeatureSet};
use crate::inference::{predict_set, read_map_file, write_map_file, AnomalyOutput, BankSet, InferenceConfig};
use crate::metrics::{aggregate, evaluate, format_table, AggregateReport, EvalReport};
use crate::synth::{generate, write_synth, SynthConfig, SynthPaths};
use crate::tensor::Grid;
use crate::training::{read_checkpoint, train_with_report, write_checkpoint, TrainConfig, TrainReport};

pub const SCORES_FILE: &str = "scores.csv";
pub const MAPS_DIR: &str = "maps";
pub const RAW_MAPS_FILE: &str = "maps.bin";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize)]
pub enum MapFormat {
    #[default]
    Pgm,
    Png,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize)]
pub enum ScopeArg {
    #[default]
    PerClass,
    WholeSet,
}

impl From<ScopeArg> for BankScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::PerClass => BankScope::PerClass,
            ScopeArg::WholeSet => BankScope::WholeSet,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gads",
    version,
    about = "Few-shot anomaly detection and segmentation on extracted features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train adapters and write one checkpoint per seed.
    Train(RunArgs),
    /// Score test features and export anomaly maps.
    Infer(RunArgs),
    /// Evaluate inference outputs against ground truth.
    Eval(RunArgs),
    /// Generate a synthetic planted-anomaly dataset.
    Synth(SynthArgs),
}

/// Flags shared by train, infer and eval.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Training feature container.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Test feature container (with ground truth for eval).
    #[arg(long)]
    pub test_features: Option<PathBuf>,
    /// Text prototype file.
    #[arg(long)]
    pub protos: Option<PathBuf>,
    /// Checkpoint path; `{seed}` is replaced by the seed.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Feature container holding normal prompt candidates.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Explicit prompt ids from the prompt container, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub prompt_ids: Vec<String>,
    #[arg(long = "shots", default_value_t = 2)]
    pub shots: usize,
    /// Seed; repeat for several runs.
    #[arg(long = "seed", default_values_t = [0u64])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.75)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Layers to use, comma separated; default is every layer.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<u32>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 48)]
    pub batch: usize,
    /// Prompts per bank during training.
    #[arg(long, default_value_t = 2)]
    pub train_shots: usize,
    #[arg(long, value_enum, default_value_t = ScopeArg::PerClass)]
    pub bank_scope: ScopeArg,
    /// Drop the class-token/text term from the image score.
    #[arg(long)]
    pub no_semantic_score: bool,
    #[arg(long, value_enum, default_value_t = MapFormat::Pgm)]
    pub map_format: MapFormat,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Planted-anomaly magnitude; 0 makes abnormal records indistinguishable.
    #[arg(long, default_value_t = 1.0)]
    pub magnitude: f64,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Feature dimension used for class tokens, patches and text.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            magnitude: self.magnitude,
            classes: self.classes,
            d_cls: self.dim,
            d_patch: self.dim,
            d_text: self.dim,
            ..Default::default()
        }
    }
}

/// Everything a command needs; built from flags and checked before any work.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub features: Option<PathBuf>,
    pub test_features: Option<PathBuf>,
    pub protos: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub prompt_ids: Vec<String>,
    /// Prompts per bank at inference.
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub map_format: MapFormat,
}

impl From<&RunArgs> for RunConfig {
    fn from(a: &RunArgs) -> Self {
        Self {
            train: TrainConfig {
                alpha: a.alpha,
                beta: a.beta,
                tau: a.tau,
                lr: a.lr,
                epochs: a.epochs,
                batch: a.batch,
                layers: a.layers.clone(),
                shots: a.train_shots,
                bank_scope: a.bank_scope.into(),
                semantic_score: !a.no_semantic_score,
                ..Default::default()
            },
            features: a.features.clone(),
            test_features: a.test_features.clone(),
            protos: a.protos.clone(),
            ckpt: a.ckpt.clone(),
            out: a.out.clone(),
            prompts: a.prompts.clone(),
            prompt_ids: a.prompt_ids.clone(),
            shots: a.shots,
            seeds: a.seeds.clone(),
            map_format: a.map_format,
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Argument(format!("--{flag} is required")))
}

fn existing<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let path = required(p, flag)?;
    if !path.is_file() {
        return Err(Error::Argument(format!("--{flag}: {} does not exist", path.display())));
    }
    Ok(path)
}

impl RunConfig {
    fn validate_common(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("--shots must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.train.validate()
    }

    /// Checkpoint path for `seed`.
    pub fn ckpt_for(&self, seed: u64) -> Result<PathBuf> {
        let template = required(&self.ckpt, "ckpt")?.to_string_lossy().into_owned();
        if template.contains("{seed}") {
            Ok(PathBuf::from(template.replace("{seed}", &seed.to_string())))
        } else if self.seeds.len() == 1 {
            Ok(PathBuf::from(template))
        } else {
            Err(Error::Argument(
                "--ckpt needs a `{seed}` placeholder when several seeds are given".into(),
            ))
        }
    }

    /// Per-seed inference output directory.
    pub fn run_dir(&self, seed: u64) -> Result<PathBuf> {
        Ok(required(&self.out, "out")?.join(format!("seed_{seed}")))
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig::from(&self.train)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub ckpt: PathBuf,
    pub report: TrainReport,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<TrainSummary>> {
    cfg.validate_common()?;
    let features = existing(&cfg.features, "features")?;
    let protos_path = existing(&cfg.protos, "protos")?;
    let ckpts = cfg.seeds.iter().map(|&s| cfg.ckpt_for(s)).collect::<Result<Vec<_>>>()?;
    let set = read_feature_file(features)?;
    let protos = read_prototypes_file(protos_path)?;
    let mut out = Vec::new();
    for (&seed, ckpt) in cfg.seeds.iter().zip(ckpts) {
        let tc = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let (params, report) = train_with_report(&set, &protos, &tc)?;
        if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_checkpoint(&params, &ckpt)?;
        out.push(TrainSummary { seed, ckpt, report });
    }
    Ok(out)
}

/// `printf("%.9g")`-style formatting.
pub fn format_score(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    const DIGITS: i32 = 9;
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..DIGITS).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{:.*}", (DIGITS - 1 - exp) as usize, x))
    }
}

/// 8-bit gray levels `round(255 * v)`, clamped to `[0, 255]`.
pub fn map_to_gray(map: &Grid) -> Vec<u8> {
    map.data
        .iter()
        .map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn encode_pgm(map: &Grid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.w, map.h).into_bytes();
    out.extend(map_to_gray(map));
    out
}

pub fn encode_png(map: &Grid) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, map.w as u32, map.h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(&map_to_gray(map))
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// File stem for the `index`-th map: position plus a filesystem-safe id.
pub fn map_stem(index: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:05}_{safe}")
}

pub fn write_scores_csv(outputs: &[AnomalyOutput], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["id", "score"]).map_err(csv_err)?;
    for o in outputs {
        w.write_record([o.id.as_str(), &format_score(o.score)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let score = rec
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad score row", path.display())))?;
            Ok((rec.get(0).unwrap_or_default().to_string(), score))
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn prompt_banks(cfg: &RunConfig, pool: &FeatureSet, seed: u64) -> Result<BankSet> {
    if cfg.prompt_ids.is_empty() {
        BankSet::sample(pool, cfg.shots, seed, cfg.train.bank_scope)
    } else {
        if cfg.prompt_ids.len() != cfg.shots {
            return Err(Error::Argument(format!(
                "{} prompt ids given for --shots {}",
                cfg.prompt_ids.len(),
                cfg.shots
            )));
        }
        bank_from_ids(pool, &cfg.prompt_ids).map(BankSet::Shared)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InferSummary {
    pub seed: u64,
    pub dir: PathBuf,
    pub records: usize,
}

pub fn cmd_infer(cfg: &RunConfig) -> Result<Vec<InferSummary>> {
    cfg.validate_common()?;
    let test_path = existing(&cfg.test_features, "test-features")?;
    let protos_path = existing(&cfg.protos, "protos")?;
    let pool_path = existing(&cfg.prompts, "prompts")?;
    let ckpts = cfg.seeds.iter().map(|&s| cfg.ckpt_for(s)).collect::<Result<Vec<_>>>()?;
    for c in &ckpts {
        if !c.is_file() {
            return Err(Error::Argument(format!("--ckpt: {} does not exist", c.display())));
        }
    }
    let test = read_feature_file(test_path)?;
    let protos = read_prototypes_file(protos_path)?;
    let pool = read_feature_file(pool_path)?;
    let icfg = cfg.inference();
    icfg.validate()?;
    let mut summaries = Vec::new();
    for (&seed, ckpt) in cfg.seeds.iter().zip(&ckpts) {
        let params = read_checkpoint(ckpt)?;
        let banks = prompt_banks(cfg, &pool, seed)?;
        let outputs = predict_set(test.records(), &banks, &params, &protos, &icfg)?;
        let dir = cfg.run_dir(seed)?;
        let maps_dir = dir.join(MAPS_DIR);
        std::fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
        write_scores_csv(&outputs, &dir.join(SCORES_FILE))?;
        write_map_file(&outputs, dir.join(RAW_MAPS_FILE))?;
        for (i, o) in outputs.iter().enumerate() {
            let stem = map_stem(i, &o.id);
            match cfg.map_format {
                MapFormat::Pgm => write_file(&maps_dir.join(format!("{stem}.pgm")), &encode_pgm(&o.map))?,
                MapFormat::Png => write_file(&maps_dir.join(format!("{stem}.png")), &encode_png(&o.map)?)?,
            }
        }
        summaries.push(InferSummary {
            seed,
            dir,
            records: outputs.len(),
        });
    }
    Ok(summaries)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub config: RunConfig,
    pub runs: Vec<(u64, EvalReport)>,
    pub aggregate: AggregateReport,
    #[serde(skip)]
    pub table: String,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalOutput> {
    cfg.validate_common()?;
    let test_path = existing(&cfg.test_features, "test-features")?;
    let out = required(&cfg.out, "out")?;
    let dirs = cfg.seeds.iter().map(|&s| cfg.run_dir(s)).collect::<Result<Vec<_>>>()?;
    for d in &dirs {
        if !d.join(RAW_MAPS_FILE).is_file() {
            return Err(Error::Argument(format!("no inference output in {}", d.display())));
        }
    }
    let test = read_feature_file(test_path)?;
    let mut runs = Vec::new();
    for (&seed, dir) in cfg.seeds.iter().zip(&dirs) {
        let outputs = read_map_file(dir.join(RAW_MAPS_FILE))?;
        runs.push((seed, evaluate(&outputs, test.records())?));
    }
    let reports: Vec<EvalReport> = runs.iter().map(|(_, r)| r.clone()).collect();
    let agg = aggregate(&reports);
    let table = format_table(&agg);
    let result = EvalOutput {
        config: cfg.clone(),
        runs,
        aggregate: agg,
        table,
    };
    let json = serde_json::to_vec_pretty(&result).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&out.join(REPORT_JSON), &json)?;
    write_file(&out.join(REPORT_TEXT), result.table.as_bytes())?;
    Ok(result)
}

pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<SynthPaths> {
    write_synth(&generate(cfg)?, out)
}
