//! The `fgdisc` command line: codec round trips, view extraction,
//! augmentation, training, sampling and evaluation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use fgdisc::metrics::{evaluate_corpus, feature_cosine_similarity, EvalConfig, HistogramKind, MetricsError};
use fgdisc::midi::{parse_smf, write_smf, MidiError, Score};
use fgdisc::model::{ModelError, SamplingConfig};
use fgdisc::remi::{decode, encode, from_json, from_text, to_json, to_text, validate, CodecConfig, CodecError, TokenSequence};
use fgdisc::train::{
    disc_pretrain, load_checkpoint, nll_pretrain, run_adversarial, save_checkpoint, write_metrics_csv, CheckpointError, Dataset,
    Phase, TrainError, TrainState, TrainingConfig,
};
use fgdisc::views::{pitch_augment, random_augment, view, ViewError, ViewKind, DEFAULT_MAX_SHIFT};

#[derive(Debug, Parser, Serialize)]
#[command(name = "fgdisc", version, about = "Symbolic music generation with fine-grained melody and rhythm discriminators")]
pub struct Cli {
    /// Print errors on stderr as a JSON object instead of plain text.
    #[arg(long, global = true)]
    pub json_errors: bool,

    /// Config file (TOML or JSON) holding training, model and codec settings.
    /// Values in it override the defaults; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Convert a MIDI file to REMI tokens.
    Encode(EncodeArgs),
    /// Convert REMI tokens back to a MIDI file.
    Decode(DecodeArgs),
    /// Mask a token file into its melody or rhythm view.
    Decouple(DecoupleArgs),
    /// Transpose every pitch of a token file.
    Augment(AugmentArgs),
    /// Run one training phase and write a checkpoint.
    Train(TrainArgs),
    /// Continue a condition with a trained generator.
    Generate(GenerateArgs),
    /// Compare a generated corpus with a real one.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    /// Input MIDI file.
    pub midi: PathBuf,
    /// Output token file (`.json` for JSON, text otherwise); stdout if absent.
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    /// Input token file (text or `.json`).
    pub tokens: PathBuf,
    /// Output MIDI file.
    #[arg(short, long, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DecoupleArgs {
    /// Which view to produce: melody masks velocities, rhythm masks pitches.
    #[arg(long, value_name = "melody|rhythm")]
    pub view: ViewKind,
    /// Input token file.
    pub tokens: PathBuf,
    /// Output token file; stdout if absent.
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("shift").required(true).args(["offset", "random"])))]
pub struct AugmentArgs {
    /// Transpose by exactly this many semitones.
    #[arg(long, allow_hyphen_values = true, value_name = "K")]
    pub offset: Option<i32>,
    /// Draw a nonzero offset that keeps all pitches in range.
    #[arg(long)]
    pub random: bool,
    /// Largest absolute offset for --random.
    #[arg(long, default_value_t = DEFAULT_MAX_SHIFT, value_name = "K")]
    pub max_shift: i32,
    /// Seed for --random.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Input token file.
    pub tokens: PathBuf,
    /// Output token file; stdout if absent.
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Phase to run: nll pretraining, discriminator pretraining or adversarial.
    #[arg(long, value_name = "nll|disc|adv")]
    pub phase: Phase,
    /// Directory of training pieces (`.mid`, `.midi`, token `.txt`/`.tokens`/`.json`).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Checkpoint to continue from; its settings replace the defaults.
    #[arg(long, value_name = "DIR")]
    pub resume: Option<PathBuf>,
    /// Named starting configuration for a fresh run.
    #[arg(long, value_name = "toy|paper")]
    pub preset: Option<String>,
    /// Stop the phase after this many optimizer steps.
    #[arg(long, value_name = "N")]
    pub steps: Option<u64>,
    /// Seed of a fresh run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the melody adversarial term.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the rhythm adversarial term.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Pieces per optimizer step.
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    pub ckpt: PathBuf,
    /// Condition as a token file or MIDI file.
    #[arg(long, value_name = "FILE")]
    pub condition: PathBuf,
    /// Sampling temperature; 0 decodes greedily.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Keep only the K most likely tokens; 0 keeps all.
    #[arg(long, default_value_t = 0, value_name = "K")]
    pub top_k: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Upper bound on sampled tokens.
    #[arg(long, default_value_t = 512, value_name = "N")]
    pub max_new_tokens: usize,
    /// Output file (`.mid` for MIDI, `.json` for JSON tokens, text otherwise); stdout if absent.
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Directory of generated pieces.
    #[arg(long, value_name = "DIR")]
    pub gen: PathBuf,
    /// Directory of reference pieces.
    #[arg(long, value_name = "DIR")]
    pub real: PathBuf,
    /// Report JSON file; stdout if absent.
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Also print the aligned summary table on stdout.
    #[arg(long)]
    pub table: bool,
    /// Directory for `pitch_histogram.csv` and `velocity_histogram.csv`.
    #[arg(long, value_name = "DIR")]
    pub histograms: Option<PathBuf>,
    /// JSON file `{"generated": [...], "real": [...]}` of precomputed feature vectors.
    #[arg(long, value_name = "FILE")]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Internal(_) => "internal",
        }
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyDataset | TrainError::Io(_) => CliError::Data(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            ModelError::SequenceTooLong { .. } | ModelError::EmptyInput | ModelError::Codec(_) => CliError::Data(e.to_string()),
            ModelError::ViewKindMismatch { .. } | ModelError::Tensor(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Train(t) => t.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let args: Vec<OsString> = args.into_iter().collect();
    let json_errors = args.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim_end().to_string());
            report(&err, json_errors);
            return err.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(err) => {
            report(&err, cli.json_errors);
            err.exit_code()
        }
    }
}

fn report(err: &CliError, json: bool) {
    if json {
        let obj = serde_json::json!({ "error": err.kind(), "message": err.to_string(), "exit_code": err.exit_code() });
        eprintln!("{obj}");
    } else {
        eprintln!("error: {err}");
    }
}

/// The clap command tree, for documentation checks.
pub fn command() -> clap::Command {
    Cli::command()
}

fn execute(cli: &Cli) -> Result<()> {
    let file = cli.config.as_deref().map(read_config_file).transpose()?;
    match &cli.command {
        Command::Encode(a) => {
            let codec = codec_config(file.as_ref())?;
            log_resolved(a, &codec);
            let score = read_midi(&a.midi)?;
            let seq = encode(&score, &codec).map_err(|e| data_err(&a.midi, e))?;
            write_tokens(&seq, a.output.as_deref())
        }
        Command::Decode(a) => {
            let codec = codec_config(file.as_ref())?;
            log_resolved(a, &codec);
            let seq = read_tokens(&a.tokens, &codec)?;
            let score = decode(&seq, &codec).map_err(|e| data_err(&a.tokens, e))?;
            write_midi(&score, &a.output)
        }
        Command::Decouple(a) => {
            let codec = codec_config(file.as_ref())?;
            log_resolved(a, &codec);
            let seq = read_tokens(&a.tokens, &codec)?;
            write_tokens(&view(&seq, a.view).seq, a.output.as_deref())
        }
        Command::Augment(a) => {
            let codec = codec_config(file.as_ref())?;
            log_resolved(a, &codec);
            let seq = read_tokens(&a.tokens, &codec)?;
            let out = match a.offset {
                Some(k) => pitch_augment(&seq, k).map_err(|e: ViewError| data_err(&a.tokens, e))?,
                None => {
                    if a.max_shift < 1 {
                        return Err(CliError::Usage("--max-shift must be at least 1".into()));
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
                    let (out, k) = random_augment(&seq, &mut rng, a.max_shift)
                        .ok_or_else(|| data_err(&a.tokens, format!("no nonzero shift up to {} fits", a.max_shift)))?;
                    log::info!("offset {k}");
                    out
                }
            };
            write_tokens(&out, a.output.as_deref())
        }
        Command::Train(a) => train(a, file.as_ref()),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a, file.as_ref()),
    }
}

fn log_resolved<A: Serialize, C: Serialize>(args: &A, config: &C) {
    log::info!(
        "resolved config: {}",
        serde_json::json!({ "args": serde_json::to_value(args).unwrap_or_default(), "config": serde_json::to_value(config).unwrap_or_default() })
    );
}

fn read_config_file(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let value: std::result::Result<serde_json::Value, String> = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    value.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Overlays `top` onto `base`, recursing into tables.
fn merge(base: &mut serde_json::Value, top: &serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, t) => *b = t.clone(),
    }
}

fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, file: Option<&serde_json::Value>) -> Result<T> {
    let Some(file) = file else {
        return serde_json::from_value(serde_json::to_value(base).expect("config serializes")).map_err(|e| CliError::Internal(e.to_string()));
    };
    let mut value = serde_json::to_value(base).expect("config serializes");
    merge(&mut value, file);
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config file: {e}")))
}

fn codec_config(file: Option<&serde_json::Value>) -> Result<CodecConfig> {
    let codec = match file.and_then(|f| f.get("codec")) {
        Some(section) => overlay(&CodecConfig::default(), Some(section))?,
        None => CodecConfig::default(),
    };
    codec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(codec)
}

fn read_midi(path: &Path) -> Result<Score> {
    let bytes = fs::read(path).map_err(|e| data_err(path, e))?;
    parse_smf(&bytes).map_err(|e: MidiError| data_err(path, e))
}

fn write_midi(score: &Score, path: &Path) -> Result<()> {
    let bytes = write_smf(score).map_err(|e| data_err(path, e))?;
    fs::write(path, bytes).map_err(|e| data_err(path, e))
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

fn is_midi(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "mid" || e == "midi")
}

/// Reads and validates a token file.
fn read_tokens(path: &Path, codec: &CodecConfig) -> Result<TokenSequence> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let seq = if is_json(path) { from_json(&text) } else { from_text(&text) }.map_err(|e: CodecError| data_err(path, e))?;
    validate(&seq, codec).map_err(|e| data_err(path, e))?;
    Ok(seq)
}

fn write_tokens(seq: &TokenSequence, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let text = if is_json(p) { to_json(seq) } else { to_text(seq) };
            fs::write(p, text).map_err(|e| data_err(p, e))
        }
        None => {
            println!("{}", to_text(seq).trim_end());
            Ok(())
        }
    }
}

fn piece_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| data_err(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_midi(p) || is_json(p) || p.extension().is_some_and(|e| e == "txt" || e == "tokens"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(data_err(dir, "no MIDI or token files"));
    }
    Ok(files)
}

fn load_sequences(dir: &Path, codec: &CodecConfig) -> Result<Vec<TokenSequence>> {
    piece_files(dir)?
        .iter()
        .map(|p| if is_midi(p) { encode(&read_midi(p)?, codec).map_err(|e| data_err(p, e)) } else { read_tokens(p, codec) })
        .collect()
}

fn load_scores(dir: &Path, codec: &CodecConfig) -> Result<Vec<Score>> {
    piece_files(dir)?
        .iter()
        .map(|p| if is_midi(p) { read_midi(p) } else { decode(&read_tokens(p, codec)?, codec).map_err(|e| data_err(p, e)) })
        .collect()
}

fn resolve_training(a: &TrainArgs, file: Option<&serde_json::Value>, resumed: Option<&TrainingConfig>) -> Result<TrainingConfig> {
    let base = match (resumed, &a.preset) {
        (Some(_), Some(_)) => return Err(CliError::Usage("--preset cannot be combined with --resume".into())),
        (Some(c), None) => c.clone(),
        (None, Some(p)) => TrainingConfig::preset(p).ok_or_else(|| CliError::Usage(format!("unknown preset `{p}`, expected toy or paper")))?,
        (None, None) => TrainingConfig::default(),
    };
    let mut cfg = overlay(&base, file)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate()?;
    if let Some(old) = resumed {
        if old.model != cfg.model || old.codec != cfg.codec || old.seed != cfg.seed {
            return Err(CliError::Usage("model, codec and seed are fixed by the resumed checkpoint".into()));
        }
    }
    Ok(cfg)
}

fn train(a: &TrainArgs, file: Option<&serde_json::Value>) -> Result<()> {
    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let cfg = resolve_training(a, file, resumed.as_ref().map(|s| &s.config))?;
    log_resolved(a, &cfg);
    let mut state = match resumed {
        Some(mut s) => {
            s.config = cfg.clone();
            s.set_lr(cfg.lr);
            s
        }
        None => TrainState::new(cfg.clone())?,
    };
    let mut seqs = load_sequences(&a.data, &cfg.codec)?;
    let total = seqs.len();
    seqs.retain(|s| s.len() <= cfg.model.max_len);
    if seqs.len() < total {
        log::warn!("skipped {} pieces longer than {} tokens", total - seqs.len(), cfg.model.max_len);
    }
    let data = Dataset::from_sequences(&seqs, cfg.cond_bars, &cfg.codec)?;
    let steps = match a.phase {
        Phase::Nll => nll_pretrain(&mut state, &data, a.steps)?,
        Phase::Disc => disc_pretrain(&mut state, &data, a.steps)?,
        Phase::Adv => run_adversarial(&mut state, &data, a.steps)?,
    };
    log::info!("{steps} steps, {} in total", state.step);
    save_checkpoint(&state, &a.out)?;
    let csv = fs::File::create(a.out.join("metrics.csv")).map_err(|e| data_err(&a.out, e))?;
    write_metrics_csv(&state.log, std::io::BufWriter::new(csv)).map_err(|e| data_err(&a.out, e))?;
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let state = load_checkpoint(&a.ckpt)?;
    let codec = state.config.codec.clone();
    let sampling = SamplingConfig { temperature: a.temperature, top_k: a.top_k, max_new_tokens: a.max_new_tokens };
    log_resolved(a, &sampling);
    let cond = if is_midi(&a.condition) {
        encode(&read_midi(&a.condition)?, &codec).map_err(|e| data_err(&a.condition, e))?
    } else {
        read_tokens(&a.condition, &codec)?
    };
    let out = state.generator.generate(&cond, &sampling, a.seed)?;
    match &a.output {
        Some(p) if is_midi(p) => write_midi(&decode(&out, &codec).map_err(|e| CliError::Internal(e.to_string()))?, p),
        other => write_tokens(&out, other.as_deref()),
    }
}

#[derive(serde::Deserialize)]
struct Features {
    generated: Vec<f64>,
    real: Vec<f64>,
}

fn eval(a: &EvalArgs, file: Option<&serde_json::Value>) -> Result<()> {
    let codec = codec_config(file)?;
    let cfg = EvalConfig { positions_per_bar: codec.positions_per_bar as usize, velocity_bins: codec.velocity_bins };
    log_resolved(a, &cfg);
    let gen = load_scores(&a.gen, &codec)?;
    let real = load_scores(&a.real, &codec)?;
    let mut report = evaluate_corpus(&gen, &real, &cfg)?;
    if let Some(p) = &a.features {
        let text = fs::read_to_string(p).map_err(|e| data_err(p, e))?;
        let f: Features = serde_json::from_str(&text).map_err(|e| data_err(p, e))?;
        report.feature_similarity = Some(feature_cosine_similarity(&f.generated, &f.real)?);
    }
    match &a.output {
        Some(p) => fs::write(p, report.to_json()).map_err(|e| data_err(p, e))?,
        None => println!("{}", report.to_json()),
    }
    if a.table {
        print!("{}", report.to_table());
    }
    if let Some(dir) = &a.histograms {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
        for (name, kind) in [("pitch_histogram.csv", HistogramKind::Pitch), ("velocity_histogram.csv", HistogramKind::Velocity)] {
            let p = dir.join(name);
            fs::write(&p, report.histogram_csv(kind)).map_err(|e| data_err(&p, e))?;
        }
    }
    Ok(())
}
