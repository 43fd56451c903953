//! Command-line surface. Every command reads a [`RunConfig`], honours the
//! global seed and writes one artifact into the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::learnsched::{
    self, generate_labels, FeatureSource, LabelConfig, NetPrecisions, NetShape, SchedulerNet, TrainConfig,
    TrainReport, DEFAULT_HIDDEN,
};
use crate::metrics::{rouge_l, RougeScore};
use crate::perf::{self, HardwareConfig, ModelFootprint, PerfOptions, PerfReport};
use crate::quant::{PrecisionSet, UniformQuantizer, DEFAULT_GROUP_SIZE};
use crate::schedule::{
    allocate_phase_precisions, ScheduleEvaluator, avg_bitwidth, solve_static, CalibrationReport, FidelityEvaluator,
    PrecisionSchedule, QualityTarget, SolverOutcome, SwitchGrid, DEFAULT_GRID_POINTS, FULL_PRECISION,
};
use crate::tinylm::{
    generate, GenerationTrace, ModelConfig, ModelSource, ModelVariants, PrecisionScheduler, SamplerConfig,
    TensorError, Tokenizer,
};

const BUNDLED_CALIB: &str = include_str!("../data/calib.txt");
const BUNDLED_EVAL: &str = include_str!("../data/eval.txt");
const BUNDLED_TRAIN: &str = include_str!("../data/train.txt");

/// Settings shared by every command. Loaded from `--config` and then
/// overridden by explicit flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Weight file; defaults to `model.pmpd` in the output directory.
    pub model: Option<PathBuf>,
    pub precisions: Vec<u8>,
    /// Quality reference; measured at the highest precision when absent.
    pub q_ref: Option<f64>,
    #[serde(with = "crate::schedule::tolerance_serde")]
    pub epsilon: f64,
    pub grid_points: usize,
    /// Decode steps per generation, which is also the schedule horizon.
    pub horizon: usize,
    pub sampler: SamplerConfig,
    pub hardware: Option<PathBuf>,
    pub calib_corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub train_corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
    pub p_max: u8,
    pub group_size: usize,
    pub feature: FeatureSource,
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            precisions: vec![4, 3, 2],
            q_ref: None,
            epsilon: 0.05,
            grid_points: DEFAULT_GRID_POINTS,
            horizon: 32,
            sampler: SamplerConfig::greedy(),
            hardware: None,
            calib_corpus: None,
            eval_corpus: None,
            train_corpus: None,
            vocab: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            threads: None,
            p_max: 4,
            group_size: DEFAULT_GROUP_SIZE,
            feature: FeatureSource::LastBlock,
            hidden: DEFAULT_HIDDEN,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out_dir.join("model.pmpd"))
    }

    pub fn precision_set(&self) -> Result<PrecisionSet> {
        PrecisionSet::new(self.precisions.clone())
    }

    pub fn target(&self, q_ref: f64) -> Result<QualityTarget> {
        QualityTarget::new(q_ref, self.epsilon)
    }

    pub fn grid(&self) -> Result<SwitchGrid> {
        SwitchGrid::new(self.grid_points, self.horizon)
    }

    fn validate(&self) -> Result<()> {
        self.precision_set()?;
        self.target(self.q_ref.unwrap_or(1.0))?;
        self.grid()?;
        if self.threads == Some(0) {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Digest of every setting that can change an artifact. Paths, thread
    /// count and output location are left out so that runs in different
    /// directories agree.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        for p in [
            &mut c.model,
            &mut c.hardware,
            &mut c.calib_corpus,
            &mut c.eval_corpus,
            &mut c.train_corpus,
            &mut c.vocab,
        ] {
            *p = None;
        }
        c.out_dir = PathBuf::new();
        c.threads = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..16])
    }
}

/// Independent seed for one named consumer of randomness.
pub fn substream(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Common wrapper around every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub payload: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub config: ModelConfig,
    pub source: ModelSource,
    pub p_max: u8,
    pub group_size: usize,
    pub file_bytes: usize,
    pub file_sha256: String,
    pub tensors: Option<Vec<TensorError>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracesReport {
    pub scheduler: String,
    pub traces: Vec<GenerationTrace>,
    pub texts: Vec<String>,
    pub avg_bitwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub prompt: usize,
    pub rouge_l: RougeScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Vec<PromptScore>,
    pub mean_f1: f64,
    pub candidate_avg_bitwidth: f64,
    pub reference_avg_bitwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedScheduler {
    pub net: serde_json::Value,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfArtifact {
    pub hardware: HardwareConfig,
    pub footprint: ModelFootprint,
    pub options: PerfOptions,
    pub schedule: PrecisionSchedule,
    pub report: PerfReport,
}

#[derive(Debug, Parser)]
#[command(name = "pmpd", version, about = "Progressive mixed-precision decoding toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Comma-separated candidate bit-widths, e.g. `4,3,2`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub precisions: Option<Vec<u8>>,
    #[arg(long, global = true)]
    pub q_ref: Option<f64>,
    /// Quality slack; `inf` accepts everything.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub grid_points: Option<usize>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// Sample at this temperature instead of greedily.
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub hardware: Option<PathBuf>,
    #[arg(long, global = true)]
    pub calib_corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub train_corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a seeded random or supplied dense model into a weight file.
    Quantize(QuantizeArgs),
    /// Choose prefill and decode precisions on the calibration corpus.
    Calibrate,
    /// Search grid switch points for the lowest-bit feasible schedule.
    SolveStatic(SolveArgs),
    /// Build the learned-scheduler training set.
    GenLabels(LabelArgs),
    /// Train the learned scheduler on a labeled dataset.
    TrainScheduler(TrainArgs),
    /// Generate completions for the evaluation corpus.
    Generate(GenerateArgs),
    /// Score candidate traces against reference traces.
    Eval(EvalArgs),
    /// Model accelerator latency for a schedule.
    Perf(PerfArgs),
    /// Run every stage in order into the output directory.
    Pipeline,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Draw the toy model's weights from the seed.
    #[arg(long, conflicts_with = "dense")]
    pub random: bool,
    /// JSON file with `config` and `tensors` (name to row-major values).
    #[arg(long)]
    pub dense: Option<PathBuf>,
    #[arg(long)]
    pub pmax: Option<u8>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long, default_value = "model.pmpd")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Calibration report whose prefill precision bounds the decode set.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long, default_value = "schedule.json")]
    pub output: PathBuf,
}

/// Precisions of the learned scheduler. `gen-labels` and `train-scheduler`
/// must be given the same values.
#[derive(Debug, Clone, Default, Args)]
pub struct NetPrecisionArgs {
    /// Calibration report supplying the high (prefill) and low (decode) precisions.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub high: Option<u8>,
    #[arg(long)]
    pub low: Option<u8>,
    #[arg(long)]
    pub prefill: Option<u8>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[command(flatten)]
    pub precisions: NetPrecisionArgs,
    #[arg(long, default_value = "labels.jsonl")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub precisions: NetPrecisionArgs,
    #[arg(long, default_value = "labels.jsonl")]
    pub dataset: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value = "scheduler.json")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false, id = "scheduler")]
pub struct SchedulerChoice {
    /// Static schedule file (solver output or a bare schedule).
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Trained scheduler file.
    #[arg(long)]
    pub learned: Option<PathBuf>,
    /// One precision for prefill and every decode step.
    #[arg(long)]
    pub fixed_precision: Option<u8>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub scheduler: SchedulerChoice,
    /// Prompt file; defaults to the evaluation corpus.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long, default_value = "traces.json")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub references: PathBuf,
    #[arg(long, default_value = "eval.json")]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FootprintChoice {
    /// The model in the weight file.
    Toy,
    Vicuna7b,
    Mobile1_4b,
}

#[derive(Debug, Args)]
pub struct PerfArgs {
    #[arg(long)]
    pub schedule: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    pub footprint: FootprintChoice,
    #[arg(long)]
    pub prompt_len: Option<u64>,
    #[arg(long)]
    pub gen_len: Option<u64>,
    /// Use the 16K-MAC preset when no hardware file is given.
    #[arg(long)]
    pub large_npu: bool,
    /// Also write the report as CSV to this path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value = "perf.json")]
    pub output: PathBuf,
}

impl GlobalArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone().into();
                }
            )*};
        }
        take!(seed, out_dir, precisions, q_ref, epsilon, grid_points, horizon);
        take!(model, threads, hardware, calib_corpus, eval_corpus, train_corpus, vocab);
        if let Some(tau) = self.temperature {
            c.sampler = SamplerConfig::temperature(tau, 0);
        }
        // the sampler stream always follows the global seed
        if let crate::tinylm::SamplingMode::Temperature { tau } = c.sampler.mode {
            c.sampler = SamplerConfig::temperature(tau, substream(c.seed, "sampler"));
        }
        c.validate()?;
        Ok(c)
    }
}

/// Entry point used by the binary.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.global.resolve()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cfg, cli.command))
}

fn dispatch(cfg: &RunConfig, command: Command) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    match command {
        Command::Quantize(a) => cmd_quantize(cfg, &a).map(drop),
        Command::Calibrate => cmd_calibrate(cfg, Path::new("calibration.json")).map(drop),
        Command::SolveStatic(a) => cmd_solve_static(cfg, a.calibration.as_deref(), &a.output).map(drop),
        Command::GenLabels(a) => cmd_gen_labels(cfg, &a).map(drop),
        Command::TrainScheduler(a) => cmd_train_scheduler(cfg, &a).map(drop),
        Command::Generate(a) => cmd_generate(cfg, &a).map(drop),
        Command::Eval(a) => cmd_eval(cfg, &a.traces, &a.references, &a.output).map(drop),
        Command::Perf(a) => cmd_perf(cfg, &a).map(drop),
        Command::Pipeline => cmd_pipeline(cfg),
    }
}

/// Input files: taken as given when they exist, otherwise looked up in the
/// output directory so stages chain without repeating it.
fn in_path(cfg: &RunConfig, name: &Path) -> PathBuf {
    if name.exists() {
        name.to_path_buf()
    } else {
        out_path(cfg, name)
    }
}

fn out_path(cfg: &RunConfig, name: &Path) -> PathBuf {
    if name.is_absolute() {
        name.to_path_buf()
    } else {
        cfg.out_dir.join(name)
    }
}

/// Writes through a sibling temp file so a failed run never leaves a
/// half-written artifact.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_artifact<T: Serialize>(cfg: &RunConfig, command: &str, path: &Path, payload: &T) -> Result<()> {
    let a = Artifact {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        payload,
    };
    let mut text = serde_json::to_string_pretty(&a)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Payload of an artifact file, or the whole file when it is not wrapped.
fn read_payload<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let v: serde_json::Value = read_json(path)?;
    let inner = match v {
        serde_json::Value::Object(mut m) if m.contains_key("payload") && m.contains_key("config_hash") => {
            m.remove("payload").expect("checked")
        }
        other => other,
    };
    serde_json::from_value(inner).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    match &cfg.vocab {
        Some(p) => Tokenizer::from_vocab_file(p),
        None => Ok(Tokenizer::Bytes),
    }
}

fn load_model(cfg: &RunConfig) -> Result<ModelVariants> {
    let path = cfg.model_path();
    let bytes = fs::read(&path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    ModelVariants::from_bytes(&bytes)
}

/// One prompt per non-blank line, tokenized and checked against the context.
pub fn parse_corpus(text: &str, tok: &Tokenizer, model: &ModelConfig, max_new: usize) -> Result<Vec<Vec<u32>>> {
    let mut prompts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let ids = tok.encode(line)?;
        if ids.len() + max_new > model.max_context {
            return Err(Error::Length(format!(
                "prompt on line {} has {} tokens; with {max_new} new tokens it exceeds the context of {}",
                i + 1,
                ids.len(),
                model.max_context
            )));
        }
        prompts.push(ids);
    }
    if prompts.is_empty() {
        return Err(Error::Input("corpus has no prompts".into()));
    }
    Ok(prompts)
}

fn corpus(cfg: &RunConfig, path: Option<&Path>, bundled: &str, model: &ModelConfig) -> Result<Vec<Vec<u32>>> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?,
        None => bundled.to_string(),
    };
    parse_corpus(&text, &tokenizer(cfg)?, model, cfg.horizon)
}

fn check_vocab(cfg: &RunConfig, model: &ModelVariants) -> Result<()> {
    let tok = tokenizer(cfg)?;
    if tok.vocab_size() != model.config().vocab_size {
        return Err(Error::Config(format!(
            "tokenizer vocabulary {} does not match model vocabulary {}",
            tok.vocab_size(),
            model.config().vocab_size
        )));
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawWeights {
    config: ModelConfig,
    tensors: BTreeMap<String, Vec<f64>>,
}

pub fn cmd_quantize(cfg: &RunConfig, a: &QuantizeArgs) -> Result<QuantizeReport> {
    let p_max = a.pmax.unwrap_or(cfg.p_max);
    let group_size = a.group_size.unwrap_or(cfg.group_size);
    let model = match &a.dense {
        Some(path) => {
            let mut raw: RawWeights = read_json(path)?;
            let dense = raw
                .config
                .tensor_shapes()
                .into_iter()
                .map(|(name, _, _)| {
                    raw.tensors
                        .remove(&name)
                        .ok_or_else(|| Error::Input(format!("dense weights lack tensor `{name}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(extra) = raw.tensors.keys().next() {
                return Err(Error::Input(format!("unknown tensor `{extra}` in dense weights")));
            }
            ModelVariants::from_dense(
                raw.config,
                dense,
                &UniformQuantizer { p_max, group_size },
                ModelSource::External,
            )?
        }
        None => ModelVariants::random(ModelConfig::toy(), substream(cfg.seed, "weights"), p_max, group_size)?,
    };
    let bytes = model.to_bytes()?;
    let path = out_path(cfg, &a.output);
    write_atomic(&path, &bytes)?;

    let report = QuantizeReport {
        config: *model.config(),
        source: model.source().clone(),
        p_max,
        group_size,
        file_bytes: bytes.len(),
        file_sha256: hex::encode(Sha256::digest(&bytes)),
        tensors: model.quantization_report(),
    };
    if let Some(ts) = &report.tensors {
        for t in ts {
            println!(
                "{:<24} max_abs_error={:.3e} bound_excess={:.3e} {}",
                t.name,
                t.max_abs_error,
                t.max_bound_excess,
                if t.within_bound { "ok" } else { "OVER BOUND" }
            );
        }
        if ts.iter().any(|t| !t.within_bound) {
            return Err(Error::Contract("a tensor exceeded the half-step error bound".into()));
        }
    }
    write_artifact(cfg, "quantize", &path.with_extension("json"), &report)?;
    Ok(report)
}

fn evaluator<'a>(cfg: &RunConfig, model: &'a ModelVariants, prompts: &[Vec<u32>]) -> Result<FidelityEvaluator<'a>> {
    FidelityEvaluator::new(model, prompts, cfg.sampler, Some(tokenizer(cfg)?.eos()), cfg.horizon)
}

pub fn cmd_calibrate(cfg: &RunConfig, output: &Path) -> Result<CalibrationReport> {
    let model = load_model(cfg)?;
    check_vocab(cfg, &model)?;
    let prompts = corpus(cfg, cfg.calib_corpus.as_deref(), BUNDLED_CALIB, model.config())?;
    let ev = evaluator(cfg, &model, &prompts)?;
    let set = cfg.precision_set()?;
    let q_ref = resolve_q_ref(cfg, &ev, None)?;
    let report = allocate_phase_precisions(&ev, set.as_slice(), &cfg.target(q_ref)?, cfg.horizon)?;
    println!(
        "prefill {} / decode {}{}",
        report.prefill,
        report.decode,
        if report.fallback { " (fallback)" } else { "" }
    );
    write_artifact(cfg, "calibrate", &out_path(cfg, output), &report)?;
    Ok(report)
}

#[derive(Deserialize)]
struct ChosenPair {
    prefill: u8,
    decode: u8,
    q_ref: f64,
}

/// Configured reference quality, else the calibration report's, else the
/// measured quality of the all-`p_max` configuration.
fn resolve_q_ref(cfg: &RunConfig, ev: &FidelityEvaluator<'_>, calibration: Option<&ChosenPair>) -> Result<f64> {
    if let Some(q) = cfg.q_ref.or(calibration.map(|c| c.q_ref)) {
        return Ok(q);
    }
    let p = cfg.precision_set()?.p_max();
    let q = ev.quality(&PrecisionSchedule::uniform(p, p, cfg.horizon)?)?;
    log::info!("measured reference quality {q:.4} at {p} bits");
    Ok(q)
}

fn chosen_pair(cfg: &RunConfig, path: Option<&Path>) -> Result<Option<ChosenPair>> {
    path.map(|p| read_payload(&in_path(cfg, p))).transpose()
}

pub fn cmd_solve_static(cfg: &RunConfig, calibration: Option<&Path>, output: &Path) -> Result<SolverOutcome> {
    let model = load_model(cfg)?;
    check_vocab(cfg, &model)?;
    let set = cfg.precision_set()?;
    let pair = chosen_pair(cfg, calibration)?;
    let prefill = pair.as_ref().map_or(set.p_max(), |c| c.prefill);
    let decode: Vec<u8> = set.as_slice().iter().copied().filter(|&p| p <= prefill).collect();
    if decode.is_empty() {
        return Err(Error::Input(format!("no candidate precision at or below prefill {prefill}")));
    }
    let prompts = corpus(cfg, cfg.calib_corpus.as_deref(), BUNDLED_CALIB, model.config())?;
    let ev = evaluator(cfg, &model, &prompts)?;
    let target = cfg.target(resolve_q_ref(cfg, &ev, pair.as_ref())?)?;
    let outcome = solve_static(&ev, &decode, prefill, &target, &cfg.grid()?)?;
    println!(
        "schedule {:?} st={:?} feasible={} avg_bits={:.3}",
        outcome.schedule.precisions(),
        outcome.schedule.switch_points(),
        outcome.feasible(),
        outcome.schedule.avg_bitwidth(cfg.horizon)?
    );
    write_artifact(cfg, "solve-static", &out_path(cfg, output), &outcome)?;
    Ok(outcome)
}

fn net_precisions(cfg: &RunConfig, a: &NetPrecisionArgs) -> Result<NetPrecisions> {
    let set = cfg.precision_set()?;
    let pair = chosen_pair(cfg, a.calibration.as_deref())?;
    let high = a.high.or(pair.as_ref().map(|c| c.prefill)).unwrap_or(set.p_max());
    let low = a
        .low
        .or(pair.as_ref().map(|c| c.decode).filter(|&d| d < high))
        .unwrap_or(set.p_min());
    Ok(NetPrecisions {
        high,
        low,
        prefill: a.prefill.unwrap_or(high),
    })
}

pub fn cmd_gen_labels(cfg: &RunConfig, a: &LabelArgs) -> Result<Vec<learnsched::LabeledExample>> {
    let model = load_model(cfg)?;
    check_vocab(cfg, &model)?;
    let ps = net_precisions(cfg, &a.precisions)?;
    let prompts = corpus(cfg, cfg.train_corpus.as_deref(), BUNDLED_TRAIN, model.config())?;
    let lc = LabelConfig {
        high: ps.high,
        low: ps.low,
        prefill: ps.prefill,
        seed: substream(cfg.seed, "truncation"),
        feature: cfg.feature,
        sampler: cfg.sampler,
        eos: Some(tokenizer(cfg)?.eos()),
    };
    let (examples, skipped) = generate_labels(&model, &prompts, &cfg.grid()?, &lc)?;
    if examples.is_empty() {
        return Err(Error::Input("no prompt produced a usable label".into()));
    }
    let mut hist = vec![0usize; cfg.grid_points];
    for e in &examples {
        hist[e.label] += 1;
    }
    println!("{} examples ({skipped} skipped), label histogram {hist:?}", examples.len());
    write_atomic(&out_path(cfg, &a.output), learnsched::write_jsonl(&examples)?.as_bytes())?;
    Ok(examples)
}

pub fn cmd_train_scheduler(cfg: &RunConfig, a: &TrainArgs) -> Result<TrainedScheduler> {
    let dataset_path = in_path(cfg, &a.dataset);
    let text = fs::read_to_string(&dataset_path)
        .map_err(|e| Error::Input(format!("{}: {e}", dataset_path.display())))?;
    let data = learnsched::read_jsonl(&text)?;
    let first = data
        .first()
        .ok_or_else(|| Error::Input("labeled dataset is empty".into()))?;
    let precisions = net_precisions(cfg, &a.precisions)?;
    let mut net = SchedulerNet::new(
        NetShape {
            d_k: first.d_k,
            d_v: first.d_v,
            hidden: cfg.hidden,
        },
        cfg.grid()?,
        precisions,
        cfg.feature,
        substream(cfg.seed, "init"),
    )?;
    let tc = TrainConfig {
        epochs: a.epochs.unwrap_or(cfg.train.epochs),
        lr: a.lr.unwrap_or(cfg.train.lr),
        seed: substream(cfg.seed, "training"),
        ..cfg.train
    };
    let report = learnsched::train(&mut net, &data, &tc)?;
    println!("final loss {:.4}, train accuracy {:.3}", report.final_loss, report.accuracy);
    let out = TrainedScheduler {
        net: serde_json::from_str(&net.to_json()?)?,
        report,
    };
    write_artifact(cfg, "train-scheduler", &out_path(cfg, &a.output), &out)?;
    Ok(out)
}

fn load_learned(path: &Path) -> Result<SchedulerNet> {
    let v: serde_json::Value = read_payload(path)?;
    let net = match v {
        serde_json::Value::Object(mut m) if m.contains_key("net") => m.remove("net").expect("checked"),
        other => other,
    };
    SchedulerNet::from_json(&net.to_string())
}

pub fn cmd_generate(cfg: &RunConfig, a: &GenerateArgs) -> Result<TracesReport> {
    let model = load_model(cfg)?;
    check_vocab(cfg, &model)?;
    let tok = tokenizer(cfg)?;
    let prompts = corpus(cfg, a.prompts.as_deref().or(cfg.eval_corpus.as_deref()), BUNDLED_EVAL, model.config())?;
    let c = &a.scheduler;
    let (name, scheduler): (String, Box<dyn PrecisionScheduler + Sync>) = if let Some(p) = &c.schedule {
        let s = load_schedule(&in_path(cfg, p))?;
        (format!("static {:?} st={:?}", s.precisions(), s.switch_points()), Box::new(s))
    } else if let Some(p) = &c.learned {
        ("learned".to_string(), Box::new(load_learned(&in_path(cfg, p))?))
    } else {
        let p = c.fixed_precision.expect("clap enforces one scheduler");
        (format!("fixed {p}"), Box::new(PrecisionSchedule::uniform(p, p, cfg.horizon)?))
    };
    let traces = generate_all(cfg, &model, &prompts, scheduler.as_ref(), tok.eos())?;
    let report = traces_report(name, traces, &tok)?;
    println!("{}: {} traces, avg decode bits {:.3}", report.scheduler, report.traces.len(), report.avg_bitwidth);
    write_artifact(cfg, "generate", &out_path(cfg, &a.output), &report)?;
    Ok(report)
}

fn generate_all(
    cfg: &RunConfig,
    model: &ModelVariants,
    prompts: &[Vec<u32>],
    scheduler: &(dyn PrecisionScheduler + Sync),
    eos: u32,
) -> Result<Vec<GenerationTrace>> {
    use rayon::prelude::*;
    prompts
        .par_iter()
        .map(|p| generate(model, p, scheduler, cfg.sampler, Some(eos), cfg.horizon))
        .collect()
}

fn traces_report(scheduler: String, traces: Vec<GenerationTrace>, tok: &Tokenizer) -> Result<TracesReport> {
    let texts = traces.iter().map(|t| tok.decode(t.text_tokens())).collect();
    Ok(TracesReport {
        scheduler,
        avg_bitwidth: mean_decode_bits(&traces)?,
        traces,
        texts,
    })
}

fn mean_decode_bits(traces: &[GenerationTrace]) -> Result<f64> {
    let all: Vec<u8> = traces.iter().flat_map(|t| t.decode_precisions().iter().copied()).collect();
    if all.is_empty() {
        return Ok(0.0);
    }
    avg_bitwidth(&all)
}

fn load_schedule(path: &Path) -> Result<PrecisionSchedule> {
    let v: serde_json::Value = read_payload(path)?;
    let s = match v {
        serde_json::Value::Object(mut m) if m.contains_key("schedule") && m.contains_key("candidates") => {
            m.remove("schedule").expect("checked")
        }
        other => other,
    };
    let s: PrecisionSchedule =
        serde_json::from_value(s).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    s.ensure_valid()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    Ok(s)
}

pub fn eval_traces(candidates: &[GenerationTrace], references: &[GenerationTrace]) -> Result<EvalReport> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::Input(format!(
            "need equally many candidate and reference traces, got {} and {}",
            candidates.len(),
            references.len()
        )));
    }
    let scores = candidates
        .iter()
        .zip(references)
        .enumerate()
        .map(|(i, (c, r))| {
            if c.prompt != r.prompt {
                return Err(Error::Input(format!("trace {i} was generated from a different prompt")));
            }
            Ok(PromptScore {
                prompt: i,
                rouge_l: rouge_l(c.text_tokens(), r.text_tokens()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mean_f1: scores.iter().map(|s| s.rouge_l.f1).sum::<f64>() / scores.len() as f64,
        scores,
        candidate_avg_bitwidth: mean_decode_bits(candidates)?,
        reference_avg_bitwidth: mean_decode_bits(references)?,
    })
}

pub fn cmd_eval(cfg: &RunConfig, traces: &Path, references: &Path, output: &Path) -> Result<EvalReport> {
    let c: TracesReport = read_payload(&in_path(cfg, traces))?;
    let r: TracesReport = read_payload(&in_path(cfg, references))?;
    let report = eval_traces(&c.traces, &r.traces)?;
    println!("mean Rouge-L F1 {:.4} at {:.3} decode bits", report.mean_f1, report.candidate_avg_bitwidth);
    write_artifact(cfg, "eval", &out_path(cfg, output), &report)?;
    Ok(report)
}

pub fn cmd_perf(cfg: &RunConfig, a: &PerfArgs) -> Result<PerfArtifact> {
    let schedule = load_schedule(&in_path(cfg, &a.schedule))?;
    let hardware = match &cfg.hardware {
        Some(p) => read_json(p)?,
        None if a.large_npu => HardwareConfig::npu_16k(),
        None => HardwareConfig::npu_4k(),
    };
    hardware.validate()?;
    let footprint = match a.footprint {
        FootprintChoice::Toy => {
            let m = load_model(cfg)?;
            ModelFootprint::from_config(m.config(), m.group_size())?
        }
        FootprintChoice::Vicuna7b => ModelFootprint::vicuna_7b(),
        FootprintChoice::Mobile1_4b => ModelFootprint::mobile_1_4b(),
    };
    let options = PerfOptions::default();
    let gen_len = a.gen_len.unwrap_or(schedule.horizon() as u64);
    let report = perf::pipeline_perf(&footprint, &schedule, &hardware, &options, a.prompt_len.unwrap_or(64), gen_len)?;
    println!(
        "{:.1} tokens/s, {:.2}x vs fp16, {:.3} avg bits",
        report.tokens_per_s, report.speedup_vs_fp16, report.avg_bitwidth
    );
    if let Some(csv) = &a.csv {
        write_atomic(&out_path(cfg, csv), perf::reports_to_csv(std::slice::from_ref(&report)).as_bytes())?;
    }
    let out = PerfArtifact {
        hardware,
        footprint,
        options,
        schedule,
        report,
    };
    write_artifact(cfg, "perf", &out_path(cfg, &a.output), &out)?;
    Ok(out)
}

/// quantize, calibrate, solve, gen-labels, train, generate (reference,
/// static and learned), eval and perf, all into `cfg.out_dir`.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.model = None;
    let cfg = &cfg;
    cmd_quantize(
        cfg,
        &QuantizeArgs {
            random: true,
            dense: None,
            pmax: None,
            group_size: None,
            output: "model.pmpd".into(),
        },
    )?;
    let calib = out_path(cfg, Path::new("calibration.json"));
    cmd_calibrate(cfg, &calib)?;
    cmd_solve_static(cfg, Some(&calib), Path::new("schedule.json"))?;
    cmd_gen_labels(
        cfg,
        &LabelArgs {
            precisions: NetPrecisionArgs::default(),
            output: "labels.jsonl".into(),
        },
    )?;
    cmd_train_scheduler(
        cfg,
        &TrainArgs {
            precisions: NetPrecisionArgs::default(),
            dataset: "labels.jsonl".into(),
            epochs: None,
            lr: None,
            output: "scheduler.json".into(),
        },
    )?;
    let gen = |choice: SchedulerChoice, output: &str| {
        cmd_generate(
            cfg,
            &GenerateArgs {
                scheduler: choice,
                prompts: None,
                output: output.into(),
            },
        )
    };
    gen(
        SchedulerChoice {
            schedule: None,
            learned: None,
            fixed_precision: Some(FULL_PRECISION),
        },
        "references.json",
    )?;
    gen(
        SchedulerChoice {
            schedule: Some(out_path(cfg, Path::new("schedule.json"))),
            learned: None,
            fixed_precision: None,
        },
        "traces_static.json",
    )?;
    gen(
        SchedulerChoice {
            schedule: None,
            learned: Some(out_path(cfg, Path::new("scheduler.json"))),
            fixed_precision: None,
        },
        "traces_learned.json",
    )?;
    let refs = Path::new("references.json");
    cmd_eval(cfg, Path::new("traces_static.json"), refs, Path::new("eval_static.json"))?;
    cmd_eval(cfg, Path::new("traces_learned.json"), refs, Path::new("eval_learned.json"))?;
    cmd_perf(
        cfg,
        &PerfArgs {
            schedule: "schedule.json".into(),
            footprint: FootprintChoice::Toy,
            prompt_len: None,
            gen_len: None,
            large_npu: false,
            csv: None,
            output: "perf.json".into(),
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substreams_differ_by_name_and_seed() {
        assert_ne!(substream(1, "weights"), substream(1, "training"));
        assert_ne!(substream(1, "weights"), substream(2, "weights"));
        assert_eq!(substream(9, "x"), substream(9, "x"));
    }

    #[test]
    fn hash_ignores_paths_and_threads() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "/elsewhere".into(),
            threads: Some(3),
            model: Some("m.pmpd".into()),
            ..RunConfig::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn corpus_parsing() {
        let cfg = ModelConfig::toy();
        let p = parse_corpus("ab\n\n  \ncd\r\n", &Tokenizer::Bytes, &cfg, 8).unwrap();
        assert_eq!(p, vec![vec![97, 98], vec![99, 100]]);
        assert!(matches!(parse_corpus("\n \n", &Tokenizer::Bytes, &cfg, 8), Err(Error::Input(_))));
        let long = "x".repeat(cfg.max_context);
        assert!(matches!(parse_corpus(&long, &Tokenizer::Bytes, &cfg, 1), Err(Error::Length(_))));
    }

    #[test]
    fn bundled_corpora_fit_the_toy_context() {
        let cfg = ModelConfig::toy();
        for text in [BUNDLED_CALIB, BUNDLED_EVAL, BUNDLED_TRAIN] {
            assert!(parse_corpus(text, &Tokenizer::Bytes, &cfg, 64).unwrap().len() >= 20);
        }
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from(["pmpd", "--seed", "5", "--precisions", "3,2", "calibrate"]).unwrap();
        let c = cli.global.resolve().unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.precisions, vec![3, 2]);
        let bad = Cli::try_parse_from(["pmpd", "--precisions", "3,3", "calibrate"]).unwrap();
        assert!(bad.global.resolve().is_err());
    }

    #[test]
    fn generate_requires_exactly_one_scheduler() {
        assert!(Cli::try_parse_from(["pmpd", "generate"]).is_err());
        assert!(Cli::try_parse_from(["pmpd", "generate", "--fixed-precision", "4", "--learned", "x"]).is_err());
        assert!(Cli::try_parse_from(["pmpd", "generate", "--fixed-precision", "4"]).is_ok());
    }
}
