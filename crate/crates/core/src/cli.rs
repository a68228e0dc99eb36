//! The `eyedent` command line.
//!
//! Every command reads an optional JSON [`RunConfig`], applies its flags on
//! top, validates the result and echoes it as `effective_config.json` into
//! its output directory. Exit codes: 0 success, 1 runtime failure, 2 usage
//! or configuration error.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use eyedent_autograd::gradcheck::{self, SuiteOptions, SUITE_OPS};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Profile, RunConfig};
use crate::dataset::{self, Selection};
use crate::eval::{self, Decision, EnrollmentTemplate, RocCurve, Setting, SplitSpec, TestStream};
use crate::model::checkpoint;
use crate::model::train::Stage;
use crate::model::{EmbeddingVector, Head, ModelBundle, StageLog};
use crate::signal::{self, VelocitySequence};
use crate::sim;

pub const CONFIG_ECHO: &str = "effective_config.json";
pub const CHECKPOINT_FILE: &str = "model.eyid";
pub const TRAINING_LOG: &str = "training_log.json";
pub const TEMPLATE_SUFFIX: &str = ".template.json";
pub const ITERATIONS_FILE: &str = "iterations.csv";
const TEMPLATE_FORMAT: &str = "eyedent-template";
const TEMPLATE_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "eyedent", version, about = "Identify people from the micro-movements of their eyes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic gaze dataset with known identities.
    Synth(SynthArgs),
    /// Train the slow subnet, the fast subnet and the joint layers.
    Train(TrainArgs),
    /// Multi-class accuracy as a function of input duration.
    EvalClassify(EvalArgs),
    /// Write one embedding template per user.
    Enroll(EnrollArgs),
    /// Match test streams against every enrolled template.
    Identify(IdentifyArgs),
    /// Match test streams against one claimed identity.
    Verify(VerifyArgs),
    /// Write per-window embeddings as CSV.
    ExportEmbeddings(ExportArgs),
    /// Finite-difference check of every differentiable operator.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for simulation and training.
    #[arg(long, env = "EYID_SEED")]
    pub seed: Option<u64>,
    /// Accept hyperparameters outside the grid-search domains.
    #[arg(long)]
    pub unsafe_hparams: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub identities: Option<usize>,
    /// Sessions per identity.
    #[arg(long)]
    pub sessions: Option<usize>,
    /// Length of every session in seconds.
    #[arg(long)]
    pub seconds: Option<f64>,
    /// Sampling rate (Hz).
    #[arg(long)]
    pub rate: Option<f64>,
    /// Record both eyes.
    #[arg(long)]
    pub binocular: bool,
    /// Spread of identity parameters relative to the default population.
    #[arg(long)]
    pub separation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Slow,
    Fast,
    Joint,
    All,
}

impl StageArg {
    fn stages(self) -> &'static [Stage] {
        match self {
            StageArg::Slow => &[Stage::Slow],
            StageArg::Fast => &[Stage::Fast],
            StageArg::Joint => &[Stage::Joint],
            StageArg::All => &Stage::ALL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Slow,
    Fast,
    Joint,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Slow => Head::Slow,
            HeadArg::Fast => Head::Fast,
            HeadArg::Joint => Head::Joint,
        }
    }
}

/// Which gaze files to read.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory of `<subject>_<session>.csv` files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Only these session ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub sessions: Vec<String>,
    /// Only these subject ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub users: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for the checkpoint, training log and config echo.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StageArg::All)]
    pub stage: StageArg,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub train_stride: Option<usize>,
    #[arg(long)]
    pub holdout_fraction: Option<f64>,
    #[arg(long)]
    pub target_train_accuracy: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ModelArg {
    /// Checkpoint file.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = HeadArg::Joint)]
    pub head: HeadArg,
    /// Average left and right eye scores of each window.
    #[arg(long)]
    pub binocular: bool,
    /// Durations in seconds (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub durations: Vec<f64>,
    /// Cut every test sequence into independent pieces of this many seconds.
    #[arg(long)]
    pub chunk_seconds: Option<f64>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EnrollArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub data: DataArgs,
    /// Template directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory of templates written by `enroll`.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Length of each test stream in seconds; shorter sequences form one
    /// stream each.
    #[arg(long)]
    pub stream_seconds: Option<f64>,
    /// Accept a match when its running-max similarity exceeds this.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Random enrolled/impostor resamplings (identify only; 0 disables).
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct IdentifyArgs {
    #[command(flatten)]
    pub matching: MatchArgs,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub matching: MatchArgs,
    /// The claimed identity.
    #[arg(long)]
    pub user: String,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArg,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random cases per operator.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, env = "EYID_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Test hook: perturb the analytic gradient of this operator.
    #[arg(long)]
    pub corrupt: Option<String>,
    /// Directory for `gradcheck_report.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(anyhow!("{msg}"))
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::EvalClassify(a) => eval_classify(a),
        Command::Enroll(a) => enroll(a),
        Command::Identify(a) => identify(a.matching, None),
        Command::Verify(a) => identify(a.matching, Some(a.user)),
        Command::ExportEmbeddings(a) => export_embeddings(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Usage(e.into()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.training.seed = seed;
        cfg.sim.seed = seed;
    }
    cfg.unsafe_hparams |= common.unsafe_hparams;
    Ok(cfg)
}

fn finish_config(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate().map_err(|e| CliError::Usage(e.into()))?;
    if cfg.unsafe_hparams {
        warn!("hyperparameter domain checks are disabled");
    }
    Ok(())
}

fn required(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| usage(format!("--{name} is required (or set paths.{name} in the config)")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(CONFIG_ECHO), cfg)
}

fn load_data(args: &DataArgs, cfg: &RunConfig) -> CliResult<(PathBuf, Vec<VelocitySequence>)> {
    let dir = required(args.data.clone(), &cfg.paths.data, "data")?;
    let sel = Selection {
        sessions: args.sessions.clone(),
        users: args.users.clone(),
    };
    let seqs = dataset::load_dir(&dir, cfg.rate, &sel).context("loading gaze data")?;
    info!("loaded {} sequences from {}", seqs.len(), dir.display());
    Ok((dir, seqs))
}

fn load_model(arg: &ModelArg, cfg: &RunConfig) -> CliResult<(PathBuf, ModelBundle)> {
    let path = required(arg.model.clone(), &cfg.paths.model, "model")?;
    let bundle = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok((path, bundle))
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    let s = &mut cfg.sim;
    s.identity_count = a.identities.unwrap_or(s.identity_count);
    s.sessions_per_identity = a.sessions.unwrap_or(s.sessions_per_identity);
    s.duration_s = a.seconds.unwrap_or(s.duration_s);
    s.rate = a.rate.unwrap_or(s.rate);
    s.binocular |= a.binocular;
    if let Some(sep) = a.separation {
        cfg.population.separation = sep;
    }
    let out = required(a.out, &cfg.paths.out, "out")?;
    cfg.paths.out = Some(out.clone());
    finish_config(&cfg)?;
    prepare_out(&out, &cfg)?;
    let manifest = sim::make_dataset(&cfg.sim, &cfg.population, &out).context("writing dataset")?;
    println!(
        "wrote {} recordings of {} identities to {}",
        manifest.recordings.len(),
        manifest.identities.len(),
        out.display()
    );
    Ok(())
}

/// The training log: learning rates, batch size and the per-epoch history
/// of every stage run so far. It holds no paths or clock times, so equal
/// inputs give byte-identical logs.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainingLog {
    pub seed: u64,
    pub subnet_lr: f64,
    pub joint_lr: f64,
    pub batch_size: usize,
    pub labels: Vec<String>,
    pub stages: Vec<StageLog>,
    pub status: String,
    pub error: Option<String>,
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(p) = a.profile {
        cfg.profile = p;
        cfg.model = None;
    }
    let t = &mut cfg.training;
    t.max_epochs = a.max_epochs.unwrap_or(t.max_epochs);
    t.holdout_fraction = a.holdout_fraction.unwrap_or(t.holdout_fraction);
    if a.target_train_accuracy.is_some() {
        t.target_train_accuracy = a.target_train_accuracy;
    }
    cfg.windows.train_stride = a.train_stride.unwrap_or(cfg.windows.train_stride);
    let out = required(a.out, &cfg.paths.out, "out")?;
    cfg.paths.out = Some(out.clone());
    if a.data.data.is_some() {
        cfg.paths.data = a.data.data.clone();
    }
    finish_config(&cfg)?;
    let (_, seqs) = load_data(&a.data, &cfg)?;
    prepare_out(&out, &cfg)?;

    let mut bundle = match &a.init {
        Some(path) => checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let labels: Vec<String> = seqs
                .iter()
                .map(|s| s.subject_id.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let zscore = signal::fit_zscore(&seqs, &cfg.transform).context("fitting the fast-view scaling")?;
            ModelBundle::new(cfg.model_config(), labels, cfg.transform, zscore, cfg.training.seed).map_err(|e| CliError::Usage(e.into()))?
        }
    };
    let windows: Vec<_> = seqs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| bundle.windows_for(s, cfg.windows.train_stride, i))
        .collect();
    let refs: Vec<_> = windows.iter().collect();
    info!("{} training windows over {} classes", refs.len(), bundle.classes());

    let ckpt = out.join(CHECKPOINT_FILE);
    let mut failure = None;
    for &stage in a.stage.stages() {
        match bundle.train_stage(stage, &refs, &cfg.training) {
            Ok(log) => {
                info!(
                    "{} stage: {} epochs, train accuracy {:?}, {}",
                    stage.name(),
                    log.epochs.len(),
                    log.final_train_accuracy,
                    log.stop_reason
                );
                checkpoint::save(&bundle, &ckpt).context("saving checkpoint")?;
            }
            Err(e) => {
                failure = Some(anyhow!(e).context(format!("{} stage failed", stage.name())));
                break;
            }
        }
    }
    let log = TrainingLog {
        seed: bundle.meta.seed,
        subnet_lr: cfg.training.subnet_lr,
        joint_lr: cfg.training.joint_lr,
        batch_size: cfg.training.batch_size,
        labels: bundle.labels.clone(),
        stages: bundle.meta.stages.clone(),
        status: if failure.is_some() { "failed" } else { "ok" }.into(),
        error: failure.as_ref().map(|e| format!("{e:#}")),
    };
    write_json(&out.join(TRAINING_LOG), &log)?;
    match failure {
        Some(e) => Err(e.into()),
        None => {
            println!("wrote {}", ckpt.display());
            Ok(())
        }
    }
}

fn chunked(seqs: &[VelocitySequence], seconds: Option<f64>) -> Vec<VelocitySequence> {
    match seconds {
        Some(s) => seqs.iter().flat_map(|q| dataset::chunk(q, s)).collect(),
        None => seqs.to_vec(),
    }
}

fn eval_classify(a: EvalArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    if !a.durations.is_empty() {
        cfg.durations = a.durations.clone();
    }
    cfg.windows.eval_stride = a.stride.unwrap_or(cfg.windows.eval_stride);
    if a.chunk_seconds.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
        return Err(usage("--chunk-seconds must be positive"));
    }
    let out = required(a.out, &cfg.paths.out, "out")?;
    cfg.paths.out = Some(out.clone());
    finish_config(&cfg)?;
    let (_, bundle) = load_model(&a.model, &cfg)?;
    let (_, seqs) = load_data(&a.data, &cfg)?;
    prepare_out(&out, &cfg)?;
    let head = Head::from(a.head);
    let stride = cfg.windows.eval_stride;

    let mut scores = Vec::new();
    if a.binocular {
        let pairs = dataset::pair_eyes(&seqs)
            .ok_or_else(|| anyhow!("--binocular needs every recording to have aligned left and right eye data"))?;
        for (l, r) in pairs {
            let (ls, rs) = (
                chunked(std::slice::from_ref(l), a.chunk_seconds),
                chunked(std::slice::from_ref(r), a.chunk_seconds),
            );
            for (l, r) in ls.iter().zip(&rs) {
                let sl = eval::score_sequence(&bundle, l, stride, head).context("scoring")?;
                let sr = eval::score_sequence(&bundle, r, stride, head).context("scoring")?;
                scores.push(eval::fuse_sequences(&sl, &sr).context("fusing eyes")?);
            }
        }
    } else {
        for s in chunked(&seqs, a.chunk_seconds) {
            scores.push(eval::score_sequence(&bundle, &s, stride, head).context("scoring")?);
        }
    }
    let rows = eval::accuracy_vs_duration(&scores, &cfg.durations);
    let path = out.join("accuracy_vs_duration.csv");
    eval::write_duration_csv(create(&path)?, &rows).context("writing accuracy CSV")?;
    for r in &rows {
        println!(
            "{:>6} s  accuracy {:.4} ± {:.4}  ({} sequences)",
            r.duration_s, r.accuracy, r.stderr, r.sequences
        );
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    format: String,
    version: u32,
    model_fingerprint: String,
    user_id: String,
    stride: usize,
    embeddings: Vec<Vec<f32>>,
}

fn by_user(seqs: &[VelocitySequence]) -> Vec<(String, Vec<VelocitySequence>)> {
    let users: BTreeSet<&str> = seqs.iter().map(|s| s.subject_id.as_str()).collect();
    users
        .into_iter()
        .map(|u| (u.to_string(), seqs.iter().filter(|s| s.subject_id == u).cloned().collect()))
        .collect()
}

fn enroll(a: EnrollArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    cfg.windows.enroll_stride = a.stride.unwrap_or(cfg.windows.enroll_stride);
    let out = required(a.out, &cfg.paths.templates, "templates")?;
    cfg.paths.templates = Some(out.clone());
    finish_config(&cfg)?;
    let (_, bundle) = load_model(&a.model, &cfg)?;
    let (_, seqs) = load_data(&a.data, &cfg)?;
    prepare_out(&out, &cfg)?;
    let fingerprint = checkpoint::fingerprint(&bundle);
    for (user, mine) in by_user(&seqs) {
        let t = eval::enroll(&bundle, &user, &mine, cfg.windows.enroll_stride).context("enrolling")?;
        let file = TemplateFile {
            format: TEMPLATE_FORMAT.into(),
            version: TEMPLATE_VERSION,
            model_fingerprint: fingerprint.clone(),
            user_id: user.clone(),
            stride: cfg.windows.enroll_stride,
            embeddings: t.embeddings.into_iter().map(|e| e.values).collect(),
        };
        let path = out.join(format!("{user}{TEMPLATE_SUFFIX}"));
        write_json(&path, &file)?;
        println!("enrolled {user}: {} windows", file.embeddings.len());
    }
    Ok(())
}

fn read_templates(dir: &Path, fingerprint: &str) -> anyhow::Result<Vec<EnrollmentTemplate>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.to_str().is_some_and(|s| s.ends_with(TEMPLATE_SUFFIX)));
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let t: TemplateFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if t.format != TEMPLATE_FORMAT || t.version != TEMPLATE_VERSION {
            return Err(anyhow!(
                "{}: template format {} v{} is not supported (expected {TEMPLATE_FORMAT} v{TEMPLATE_VERSION})",
                path.display(),
                t.format,
                t.version
            ));
        }
        if t.model_fingerprint != fingerprint {
            return Err(anyhow!("{}: template was enrolled with a different model", path.display()));
        }
        out.push(EnrollmentTemplate {
            user_id: t.user_id,
            embeddings: t.embeddings.into_iter().map(EmbeddingVector::new).collect(),
        });
    }
    if out.is_empty() {
        return Err(anyhow!("no *{TEMPLATE_SUFFIX} files in {}", dir.display()));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct SettingReport {
    setting: Setting,
    genuine: usize,
    negative: usize,
    auc: Option<f64>,
    eer: Option<f64>,
    roc_file: Option<String>,
}

#[derive(Debug, Serialize)]
struct StreamReport {
    stream: usize,
    test_user: String,
    seconds: f64,
    best_template: String,
    best_score: f64,
    accepted: Option<bool>,
    time_to_identification_s: Option<f64>,
}

#[derive(Debug, Serialize)]
struct MatchReport {
    model_fingerprint: String,
    templates: Vec<String>,
    claimed_user: Option<String>,
    threshold: Option<f64>,
    settings: Vec<SettingReport>,
    streams: Vec<StreamReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    resampling: Option<ResamplingReport>,
}

#[derive(Debug, Serialize)]
struct SettingSummary {
    setting: Setting,
    iterations: usize,
    auc_mean: f64,
    auc_stderr: f64,
    eer_mean: f64,
    eer_stderr: f64,
}

#[derive(Debug, Serialize)]
struct ResamplingReport {
    iterations: usize,
    enrolled: usize,
    impostors: usize,
    file: String,
    settings: Vec<SettingSummary>,
}

/// Repeated random enrolled/impostor splits over the users that have both a
/// template and a test stream. Every iteration gets its own ROC, so its
/// thresholds are calibrated on that iteration alone; the summary is the
/// mean and standard error across iterations.
fn resample_identification(
    out: &Path,
    decisions: &[Decision],
    users: Vec<String>,
    cfg: &RunConfig,
) -> anyhow::Result<Option<ResamplingReport>> {
    let p = &cfg.protocol;
    let spec = SplitSpec {
        train: 0,
        enrolled: p.split.enrolled,
        impostors: p.split.impostors,
    };
    if p.iterations == 0 {
        return Ok(None);
    }
    if users.len() < spec.enrolled + spec.impostors {
        warn!(
            "resampling skipped: {} users with templates and test data, split needs {}",
            users.len(),
            spec.enrolled + spec.impostors
        );
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sim::derive_seed(cfg.training.seed, 0x5e5a, 0));
    let mut w = csv::Writer::from_writer(create(&out.join(ITERATIONS_FILE))?);
    w.write_record(["iteration", "setting", "genuine", "negative", "auc", "eer"])?;
    let settings = [Setting::Confusion, Setting::Impostor];
    let mut per: Vec<(Vec<f64>, Vec<f64>)> = vec![Default::default(); settings.len()];
    for it in 0..p.iterations {
        let part = eval::resample_protocol(&users, spec, &mut rng)?;
        let (mut genuine, mut confusion, mut impostor) = (Vec::new(), Vec::new(), Vec::new());
        for d in decisions.iter().filter(|d| part.enrolled.contains(&d.template_user)) {
            if d.genuine {
                genuine.push(d.score);
            } else if part.enrolled.contains(&d.test_user) {
                confusion.push(d.score);
            } else if part.impostors.contains(&d.test_user) {
                impostor.push(d.score);
            }
        }
        for (k, (setting, negative)) in settings.iter().zip([&confusion, &impostor]).enumerate() {
            if genuine.is_empty() || negative.is_empty() {
                continue;
            }
            let curve = eval::roc(&genuine, negative, *setting)?;
            let (auc, eer) = (eval::auc(&curve), eval::eer(&curve));
            w.write_record([
                it.to_string(),
                setting.name().into(),
                genuine.len().to_string(),
                negative.len().to_string(),
                auc.to_string(),
                eer.to_string(),
            ])?;
            per[k].0.push(auc);
            per[k].1.push(eer);
        }
    }
    w.flush()?;
    let summaries = settings
        .iter()
        .zip(&per)
        .filter(|(_, (aucs, _))| !aucs.is_empty())
        .map(|(&setting, (aucs, eers))| {
            let (auc_mean, auc_stderr) = eval::mean_stderr(aucs);
            let (eer_mean, eer_stderr) = eval::mean_stderr(eers);
            SettingSummary {
                setting,
                iterations: aucs.len(),
                auc_mean,
                auc_stderr,
                eer_mean,
                eer_stderr,
            }
        })
        .collect();
    Ok(Some(ResamplingReport {
        iterations: p.iterations,
        enrolled: spec.enrolled,
        impostors: spec.impostors,
        file: ITERATIONS_FILE.into(),
        settings: summaries,
    }))
}

fn setting_report(out: &Path, setting: Setting, genuine: &[f64], negative: &[f64]) -> anyhow::Result<SettingReport> {
    let mut r = SettingReport {
        setting,
        genuine: genuine.len(),
        negative: negative.len(),
        auc: None,
        eer: None,
        roc_file: None,
    };
    if genuine.is_empty() || negative.is_empty() {
        return Ok(r);
    }
    let curve: RocCurve = eval::roc(genuine, negative, setting)?;
    let file = format!("roc_{}.csv", setting.name());
    eval::write_roc_csv(create(&out.join(&file))?, &curve)?;
    r.auc = Some(eval::auc(&curve));
    r.eer = Some(eval::eer(&curve));
    r.roc_file = Some(file);
    Ok(r)
}

fn identify(a: MatchArgs, claimed: Option<String>) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    cfg.windows.eval_stride = a.stride.unwrap_or(cfg.windows.eval_stride);
    cfg.protocol.stream_seconds = a.stream_seconds.unwrap_or(cfg.protocol.stream_seconds);
    cfg.protocol.iterations = a.iterations.unwrap_or(cfg.protocol.iterations);
    if !(cfg.protocol.stream_seconds.is_finite() && cfg.protocol.stream_seconds > 0.0) {
        return Err(usage("stream length must be positive"));
    }
    let out = required(a.out, &cfg.paths.out, "out")?;
    let tdir = required(a.templates, &cfg.paths.templates, "templates")?;
    cfg.paths.out = Some(out.clone());
    cfg.paths.templates = Some(tdir.clone());
    finish_config(&cfg)?;
    let (_, bundle) = load_model(&a.model, &cfg)?;
    let fingerprint = checkpoint::fingerprint(&bundle);
    let mut templates = read_templates(&tdir, &fingerprint)?;
    if let Some(user) = &claimed {
        templates.retain(|t| &t.user_id == user);
        if templates.is_empty() {
            return Err(anyhow!("no template for claimed user {user:?}").into());
        }
    }
    let (_, seqs) = load_data(&a.data, &cfg)?;
    prepare_out(&out, &cfg)?;

    let stride = cfg.windows.eval_stride;
    let len = bundle.config.window_len;
    let mut streams = Vec::new();
    let mut seconds = Vec::new();
    let mut rates = Vec::new();
    for s in &seqs {
        let mut parts = dataset::chunk(s, cfg.protocol.stream_seconds);
        if parts.is_empty() {
            parts.push(s.clone());
        }
        for p in parts {
            let windows = bundle.windows_for(&p, stride, 0);
            if windows.is_empty() {
                warn!("{} session {}: too short for one window, skipped", p.subject_id, p.session_id);
                continue;
            }
            let refs: Vec<_> = windows.iter().collect();
            streams.push(TestStream {
                user_id: p.subject_id.clone(),
                embeddings: bundle.embed(&refs).context("embedding test stream")?,
            });
            seconds.push(p.len() as f64 / p.rate);
            rates.push(p.rate);
        }
    }
    if streams.is_empty() {
        return Err(anyhow!("no test stream is long enough for one window").into());
    }
    let scores = eval::identification_scores(&templates, &streams).context("matching")?;

    let mut decisions = csv::Writer::from_writer(create(&out.join("decisions.csv"))?);
    let mut traces = csv::Writer::from_writer(create(&out.join("traces.csv"))?);
    decisions
        .write_record(["stream", "test_user", "template_user", "score", "genuine", "accepted"])
        .map_err(anyhow::Error::from)?;
    traces
        .write_record(["stream", "test_user", "template_user", "window", "similarity", "running_max"])
        .map_err(anyhow::Error::from)?;
    for d in &scores.decisions {
        let accepted = a.threshold.map_or(String::new(), |t| (d.score > t).to_string());
        decisions
            .write_record([
                d.stream.to_string(),
                d.test_user.clone(),
                d.template_user.clone(),
                d.score.to_string(),
                d.genuine.to_string(),
                accepted,
            ])
            .map_err(anyhow::Error::from)?;
    }
    let mut reports = Vec::with_capacity(streams.len());
    for (k, s) in streams.iter().enumerate() {
        let mut best: Option<(String, f64)> = None;
        let mut tti = None;
        for t in &templates {
            let trace = eval::match_score(t, &s.embeddings).context("matching")?;
            for (i, (sim, run)) in trace.per_window.iter().zip(&trace.running_max).enumerate() {
                traces
                    .write_record([
                        k.to_string(),
                        s.user_id.clone(),
                        t.user_id.clone(),
                        i.to_string(),
                        sim.to_string(),
                        run.to_string(),
                    ])
                    .map_err(anyhow::Error::from)?;
            }
            let score = trace.final_score().expect("stream has windows");
            if best.as_ref().is_none_or(|(_, b)| score > *b) {
                best = Some((t.user_id.clone(), score));
            }
            if t.user_id == s.user_id {
                tti = a
                    .threshold
                    .and_then(|thr| eval::time_to_identification(&trace, thr, stride, len, rates[k]));
            }
        }
        let (best_template, best_score) = best.expect("at least one template");
        reports.push(StreamReport {
            stream: k,
            test_user: s.user_id.clone(),
            seconds: seconds[k],
            best_template,
            best_score,
            accepted: a.threshold.map(|t| best_score > t),
            time_to_identification_s: tti,
        });
    }
    decisions.flush().context("writing decisions")?;
    traces.flush().context("writing traces")?;

    let settings = match &claimed {
        Some(_) => {
            let negative: Vec<f64> = scores.confusion.iter().chain(&scores.impostor).copied().collect();
            vec![setting_report(&out, Setting::Verification, &scores.genuine, &negative)?]
        }
        None => vec![
            setting_report(&out, Setting::Confusion, &scores.genuine, &scores.confusion)?,
            setting_report(&out, Setting::Impostor, &scores.genuine, &scores.impostor)?,
        ],
    };
    let resampling = match &claimed {
        Some(_) => None,
        None => {
            let with_stream: BTreeSet<&str> = streams.iter().map(|s| s.user_id.as_str()).collect();
            let users = templates
                .iter()
                .map(|t| t.user_id.clone())
                .filter(|u| with_stream.contains(u.as_str()))
                .collect();
            resample_identification(&out, &scores.decisions, users, &cfg)?
        }
    };
    for s in &settings {
        match (s.auc, s.eer) {
            (Some(auc), Some(eer)) => println!(
                "{}: AUC {auc:.4}, EER {eer:.4} ({} genuine, {} negative)",
                s.setting.name(),
                s.genuine,
                s.negative
            ),
            _ => println!(
                "{}: {} genuine, {} negative scores (no ROC)",
                s.setting.name(),
                s.genuine,
                s.negative
            ),
        }
    }
    let report = MatchReport {
        model_fingerprint: fingerprint,
        templates: templates.iter().map(|t| t.user_id.clone()).collect(),
        claimed_user: claimed,
        threshold: a.threshold,
        settings,
        streams: reports,
        resampling,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(())
}

fn export_embeddings(a: ExportArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.common)?;
    cfg.windows.eval_stride = a.stride.unwrap_or(cfg.windows.eval_stride);
    let out = required(a.out, &cfg.paths.out, "out")?;
    cfg.paths.out = Some(out.clone());
    finish_config(&cfg)?;
    let (_, bundle) = load_model(&a.model, &cfg)?;
    let (_, seqs) = load_data(&a.data, &cfg)?;
    prepare_out(&out, &cfg)?;
    let mut rows = Vec::new();
    for s in &seqs {
        let windows = bundle.windows_for(s, cfg.windows.eval_stride, 0);
        let refs: Vec<_> = windows.iter().collect();
        let emb = bundle.embed(&refs).context("embedding")?;
        rows.extend(
            windows
                .iter()
                .map(|w| w.origin.start)
                .zip(emb)
                .map(|(start, e)| (s.subject_id.clone(), start, e)),
        );
    }
    let refs: Vec<_> = rows.iter().map(|(u, s, e)| (u.clone(), *s, e)).collect();
    let path = out.join("embeddings.csv");
    eval::write_embeddings_csv(create(&path)?, &refs).context("writing embeddings")?;
    println!("wrote {} embeddings to {}", refs.len(), path.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    if let Some(op) = &a.corrupt {
        if !SUITE_OPS.contains(&op.as_str()) {
            return Err(usage(format!("unknown operator {op:?}; expected one of {SUITE_OPS:?}")));
        }
    }
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let reports = gradcheck::run_suite(&SuiteOptions {
        seeds: a.seeds,
        base_seed: a.seed,
        corrupt: a.corrupt.clone(),
    });
    let mut out = std::io::stdout().lock();
    for r in &reports {
        let status = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{status} {:<18} max rel error {:.3e} over {} seeds",
            r.op, r.max_rel_error, r.seeds
        );
        if let Some(e) = &r.error {
            let _ = writeln!(out, "     {e}");
        }
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join("gradcheck_report.json"), &reports)?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(anyhow!("{failed} of {} operators failed the gradient check", reports.len()).into());
    }
    Ok(())
}
