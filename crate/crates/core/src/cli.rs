//! Command-line front end. [`run`] parses arguments, executes one subcommand
//! and returns the process exit code:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success, or the compared files are similar |
//! | 1 | the compared files are dissimilar |
//! | 2 | usage, input or format error |
//! | 3 | numerical failure during training |

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::external::{ExternalHasher, ExternalKind};
use crate::eval::{
    self, AkashHasher, CurvePoint, EvalPlan, EvalReport, Hasher, SahashHasher, Scenario, calibrate_integer,
    curve_svg, merge_curves,
};
use crate::features::{compute_uneva, extract_features};
use crate::kernel_net::FeatureMapKind;
use crate::perturb::{PerturbSpec, apply_edit, hamming_distance, make_training_pairs};
use crate::sahash::{SahashDigest, sahash_digest, sahash_distance, sahash_similar};
use crate::similarity::{
    Digest, DigestEncoding, ThresholdConfig, calibrate_from_scores, deserialize_model, pair_score, serialize_model,
};
use crate::synth::{SynthConfig, synth_corpus};
use crate::trainer::{EpochStats, PairFeatures, TrainConfig, TrainedModel, derive_seed, train_features_checkpointed};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DISSIMILAR: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICS: i32 = 3;

/// Files larger than this are skipped (corpora) or rejected (single inputs)
/// unless `--max-file-size` says otherwise.
pub const DEFAULT_MAX_FILE_SIZE: u64 = 64 << 20;
/// Environment variable naming the default model file.
pub const MODEL_ENV: &str = "AKASH_MODEL";

const PAIR_STREAM: u64 = 0x7061_6972;
const CALIBRATION_STREAM: u64 = 0x6361_6c69;
const DISTINCT_STREAM: u64 = 0x6469_7374;
const CURVE_STREAM: u64 = 0x6375_7276;
const CALIBRATION_PAIRS: usize = 10_000;

#[derive(Parser, Debug)]
#[command(name = "akash", version, about = "Learned fuzzy hashing for binary files")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Worker threads for digesting and evaluation (default: one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic corpus.
    Synth(SynthArgs),
    /// Train a model on a directory of files.
    Train(TrainArgs),
    /// Print one digest per input file.
    Digest(DigestArgs),
    /// Score two files (or two digests) and print the result as JSON.
    Compare(CompareArgs),
    /// Write a perturbed copy of a file.
    Fuzz(FuzzArgs),
    /// Evaluate detection and rejection rates on a corpus.
    Eval(EvalArgs),
    /// Histogram-modulus baseline digests and comparison.
    Sahash(SahashArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    /// s = E = 128, batch 100, 200 epochs.
    Desk,
    /// s = E = 512, batch 1000, 5000 epochs.
    Full,
}

impl Preset {
    fn config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::default(),
        }
    }
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML file with `preset`, `max_file_size`, `[train]` and `[thresholds]`.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct ThresholdArgs {
    #[arg(long)]
    tau_delta: Option<f64>,
    #[arg(long)]
    tau_digest: Option<u32>,
    #[arg(long)]
    tau_uneva: Option<u32>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    files: usize,
    #[arg(long, default_value_t = 4096)]
    min_len: usize,
    #[arg(long, default_value_t = 65536)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch discrepancy CSV (default: `<out>.loss.csv`).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    keep_prob: Option<f64>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    embedding: Option<usize>,
    #[arg(long)]
    rho_max: Option<usize>,
    #[arg(long)]
    bandwidth: Option<f64>,
    /// fourier, laplace_exponential or laplace_levy.
    #[arg(long)]
    kind: Option<FeatureMapKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    early_stop: bool,
    /// Write `<out>.epoch<N>` snapshots every N epochs.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Store a delta threshold calibrated to this false-positive rate on
    /// distinct training files.
    #[arg(long)]
    calibrate_fp: Option<f64>,
    #[arg(long)]
    max_file_size: Option<u64>,
}

#[derive(Args, Debug)]
struct DigestArgs {
    #[arg(long, env = MODEL_ENV)]
    model: PathBuf,
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Store embeddings as 8-bit codes instead of float32.
    #[arg(long)]
    quantized: bool,
    #[arg(long)]
    max_file_size: Option<u64>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long, env = MODEL_ENV)]
    model: Option<PathBuf>,
    a: PathBuf,
    b: PathBuf,
    /// Treat A and B as files holding digests printed by `digest`.
    #[arg(long)]
    digests: bool,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    max_file_size: Option<u64>,
}

#[derive(Args, Debug)]
struct FuzzArgs {
    file: PathBuf,
    /// e.g. `bitsub:rho=10`, `insert:off=0,len=16`, `delete:off=4,len=2`,
    /// `overlay:len=64`, `truncate:len=64`.
    #[arg(long)]
    spec: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_file_size: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, env = MODEL_ENV)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Perturbation classes (default: all of bitsub, insert, delete,
    /// overlay, truncate).
    #[arg(long = "scenario", value_delimiter = ',')]
    scenarios: Vec<Scenario>,
    /// Skip perturbed pairs; only distinct pairs are scored.
    #[arg(long, conflicts_with = "scenarios")]
    no_scenarios: bool,
    #[arg(long, default_value_t = 10_000)]
    distinct_pairs: usize,
    #[arg(long, default_value_t = 500)]
    rho_max: usize,
    #[arg(long, default_value_t = 0.01)]
    edit_fraction: f64,
    /// Number of corpus files to draw robustness curves for.
    #[arg(long, default_value_t = 0)]
    curve_files: usize,
    #[arg(long, value_delimiter = ',', default_value = "10,50,100,250,500,1000")]
    rho_grid: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 100)]
    edit_events: usize,
    #[arg(long, default_value_t = 4096)]
    edit_max_len: usize,
    /// Path to an ssdeep executable; omitted or missing means no ssdeep column.
    #[arg(long)]
    ssdeep: Option<PathBuf>,
    #[arg(long)]
    sdhash: Option<PathBuf>,
    /// Calibrate tau_delta and tau_digest to this false-positive rate on the
    /// sampled distinct pairs before scoring.
    #[arg(long)]
    calibrate_fp: Option<f64>,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_file_size: Option<u64>,
}

#[derive(Args, Debug)]
struct SahashArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Compare exactly two files and print the result as JSON.
    #[arg(long)]
    compare: bool,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    max_file_size: Option<u64>,
}

/// Keys accepted in a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    preset: Option<Preset>,
    max_file_size: Option<u64>,
    /// Any subset of the training configuration keys.
    train: Option<toml::Table>,
    thresholds: Option<ThresholdOverlay>,
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdOverlay {
    tau_delta: Option<f64>,
    tau_digest: Option<u32>,
    tau_uneva: Option<u32>,
}

fn load_config(args: &ConfigArgs) -> Result<FileConfig> {
    let Some(path) = &args.config else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Defaults < model's calibrated delta < config file < flags.
fn resolve_thresholds(model_tau: Option<f64>, file: &FileConfig, flags: &ThresholdArgs) -> ThresholdConfig {
    let mut t = ThresholdConfig::default();
    if let Some(v) = model_tau {
        t.tau_delta = v;
    }
    let o = file.thresholds.unwrap_or_default();
    t.tau_delta = flags.tau_delta.or(o.tau_delta).unwrap_or(t.tau_delta);
    t.tau_digest = flags.tau_digest.or(o.tau_digest).unwrap_or(t.tau_digest);
    t.tau_uneva = flags.tau_uneva.or(o.tau_uneva).unwrap_or(t.tau_uneva);
    t
}

fn max_size(flag: Option<u64>, file: &FileConfig) -> u64 {
    flag.or(file.max_file_size).unwrap_or(DEFAULT_MAX_FILE_SIZE)
}

fn resolve_train_config(args: &TrainArgs, file: &FileConfig) -> Result<TrainConfig> {
    let base = args.preset.or(file.preset).unwrap_or(Preset::Desk).config();
    let mut cfg = match &file.train {
        None => base,
        Some(overlay) => {
            let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
            for (k, v) in overlay {
                table.insert(k.clone(), v.clone());
            }
            table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("[train]: {e}")))?
        }
    };
    macro_rules! overlay {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { cfg.$field = v; })*
        };
    }
    overlay!(epochs, batch_size, learning_rate, keep_prob, features, embedding, rho_max, bandwidth, kind);
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if args.early_stop {
        cfg.early_stop = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config<T: Serialize>(what: &str, value: &T) {
    match serde_json::to_string(value) {
        Ok(json) => log::info!("resolved {what}: {json}"),
        Err(e) => log::warn!("cannot echo {what}: {e}"),
    }
}

/// Reads one input file, enforcing the size cap.
pub fn read_input(path: &Path, max_size: u64) -> Result<Vec<u8>> {
    let len = fs::metadata(path)?.len();
    if len > max_size {
        return Err(Error::Range(format!("{} is {len} bytes, above the {max_size}-byte cap", path.display())));
    }
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::EmptyFile);
    }
    Ok(bytes)
}

/// A corpus member and its path relative to the corpus root.
#[derive(Clone, Debug)]
pub struct CorpusFile {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// Loads every regular file under `dir`, recursively and in path order.
/// Empty and oversized files are skipped with a warning.
pub fn read_corpus(dir: &Path, max_size: u64) -> Result<Vec<CorpusFile>> {
    let mut paths = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let entry = entry?;
            let ty = entry.file_type()?;
            if ty.is_dir() {
                stack.push(entry.path());
            } else if ty.is_file() {
                paths.push(entry.path());
            }
        }
    }
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let name = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().into_owned();
        let len = fs::metadata(&p)?.len();
        if len == 0 || len > max_size {
            log::warn!("skipping {name}: {len} bytes");
            continue;
        }
        out.push(CorpusFile { name, bytes: fs::read(&p)? });
    }
    if out.is_empty() {
        return Err(Error::InsufficientData(format!("no usable files under {}", dir.display())));
    }
    log::info!("read {} files from {}", out.len(), dir.display());
    Ok(out)
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path)?;
    deserialize_model(&bytes)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerics(_) => EXIT_NUMERICS,
        _ => EXIT_USAGE,
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.quiet);
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("cannot set worker count: {e}");
        }
    }
    let out = std::io::stdout();
    let mut out = out.lock();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Digest(a) => cmd_digest(&a, &mut out),
        Command::Compare(a) => cmd_compare(&a, &mut out),
        Command::Fuzz(a) => cmd_fuzz(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sahash(a) => cmd_sahash(&a, &mut out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let cfg = SynthConfig { files: a.files, min_len: a.min_len, max_len: a.max_len, seed: a.seed };
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config("need 0 < min_len <= max_len".into()));
    }
    fs::create_dir_all(&a.out)?;
    let width = a.files.saturating_sub(1).to_string().len().max(4);
    for (i, f) in synth_corpus(&cfg).iter().enumerate() {
        fs::write(a.out.join(format!("synth_{i:0width$}.bin")), f)?;
    }
    log::info!("wrote {} files to {}", a.files, a.out.display());
    Ok(EXIT_OK)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let file = load_config(&a.config)?;
    let cfg = resolve_train_config(a, &file)?;
    echo_config("training config", &cfg);
    let corpus = read_corpus(&a.corpus, max_size(a.max_file_size, &file))?;
    let bytes: Vec<&[u8]> = corpus.iter().map(|f| f.bytes.as_slice()).collect();
    let tp = make_training_pairs(&bytes, cfg.rho_max, derive_seed(cfg.master_seed, PAIR_STREAM))?;
    if tp.skipped > 0 {
        log::warn!("{} files too small for their drawn rho were skipped", tp.skipped);
    }
    let pairs: Vec<(&[u8], &[u8])> =
        tp.pairs.iter().map(|p| (p.original.as_slice(), p.perturbed.as_slice())).collect();

    let loss_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    let mut loss = BufWriter::new(fs::File::create(&loss_path)?);
    writeln!(loss, "{}", EpochStats::csv_header())?;
    let mut io_err = None;
    let mut sink = |s: &EpochStats| {
        if io_err.is_none() {
            if let Err(e) = writeln!(loss, "{}", s.csv_row()) {
                io_err = Some(e);
            }
        }
        if s.epoch.is_multiple_of(50) {
            log::info!("epoch {}: {:.6} {:.6}", s.epoch, s.delta_round1_mean, s.delta_round2_mean);
        }
    };
    let data = PairFeatures::from_pairs(&pairs, cfg.shift_bits)?;
    let mut save = |epoch: usize, m: &TrainedModel| -> Result<()> {
        let mut path = a.out.clone().into_os_string();
        path.push(format!(".epoch{epoch}"));
        fs::write(&path, serialize_model(m))?;
        Ok(())
    };
    let mut model = train_features_checkpointed(&data, &cfg, &mut sink, a.checkpoint_every, &mut save)?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    loss.flush()?;

    if let Some(fp) = a.calibrate_fp {
        model.tau_delta = Some(calibrate_on_corpus(&model, &pairs, &bytes, fp)?);
        log::info!("calibrated tau_delta = {}", model.tau_delta.unwrap_or_default());
    }
    fs::write(&a.out, serialize_model(&model))?;
    log::info!("model {} written to {}", hex::encode(model.fingerprint()), a.out.display());
    Ok(EXIT_OK)
}

fn calibrate_on_corpus(model: &TrainedModel, pairs: &[(&[u8], &[u8])], corpus: &[&[u8]], fp: f64) -> Result<f64> {
    let open = ThresholdConfig { tau_delta: f64::INFINITY, tau_digest: u32::MAX, tau_uneva: u32::MAX };
    let h = AkashHasher { model, thresholds: open };
    let pos: Vec<f64> = eval::score_pairs(&h, pairs)?.iter().map(|s| s.distance).collect();
    let idx = eval::sample_distinct_pairs(
        corpus.len(),
        CALIBRATION_PAIRS,
        derive_seed(model.config.master_seed, CALIBRATION_STREAM),
    )?;
    let neg_pairs: Vec<(&[u8], &[u8])> = idx.iter().map(|&(i, j)| (corpus[i], corpus[j])).collect();
    let neg: Vec<f64> = eval::score_pairs(&h, &neg_pairs)?.iter().map(|s| s.distance).collect();
    calibrate_from_scores(&pos, &neg, fp)
}

fn cmd_digest(a: &DigestArgs, out: &mut dyn Write) -> Result<i32> {
    let model = load_model(&a.model)?;
    let encoding = if a.quantized { DigestEncoding::Quantized8 } else { DigestEncoding::Float32 };
    for path in &a.files {
        let bytes = read_input(path, a.max_file_size.unwrap_or(DEFAULT_MAX_FILE_SIZE))?;
        let d = model.digest(&bytes)?;
        writeln!(out, "{}  {}", d.to_text(encoding), path.display())?;
    }
    Ok(EXIT_OK)
}

fn read_digest_file(path: &Path) -> Result<Digest> {
    let text = fs::read_to_string(path)?;
    let token = text.split_whitespace().next().ok_or_else(|| Error::format(0, "empty digest file"))?;
    Digest::from_text(token)
}

fn cmd_compare(a: &CompareArgs, out: &mut dyn Write) -> Result<i32> {
    let file = load_config(&a.config)?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    let thresholds = resolve_thresholds(model.as_ref().and_then(|m| m.tau_delta), &file, &a.thresholds);
    echo_config("thresholds", &thresholds);
    let (da, db) = if a.digests {
        let (da, db) = (read_digest_file(&a.a)?, read_digest_file(&a.b)?);
        if let Some(m) = &model {
            let fp = m.fingerprint();
            for d in [&da, &db] {
                if d.model_fingerprint != fp {
                    return Err(Error::ModelMismatch(hex::encode(d.model_fingerprint), hex::encode(fp)));
                }
            }
        }
        (da, db)
    } else {
        let model = model
            .as_ref()
            .ok_or_else(|| Error::Config(format!("comparing files needs --model or {MODEL_ENV}")))?;
        let cap = max_size(a.max_file_size, &file);
        (model.digest(&read_input(&a.a, cap)?)?, model.digest(&read_input(&a.b, cap)?)?)
    };
    let score = pair_score(&da, &db, &thresholds)?;
    writeln!(out, "{}", serde_json::to_string(&score).map_err(|e| Error::Config(e.to_string()))?)?;
    Ok(if score.similar { EXIT_OK } else { EXIT_DISSIMILAR })
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn cmd_fuzz(a: &FuzzArgs) -> Result<i32> {
    if same_file(&a.file, &a.out) {
        return Err(Error::Config("refusing to overwrite the input file".into()));
    }
    let f = read_input(&a.file, a.max_file_size.unwrap_or(DEFAULT_MAX_FILE_SIZE))?;
    let spec = PerturbSpec::parse(&a.spec, a.seed)?;
    let m = apply_edit(&f, &spec)?;
    fs::write(&a.out, &m)?;
    if f.len() == m.len() {
        log::info!("{spec}: {} bits differ", hamming_distance(&f, &m));
    } else {
        log::info!("{spec}: {} -> {} bytes", f.len(), m.len());
    }
    Ok(EXIT_OK)
}

struct EvalContext<'a> {
    names: Vec<String>,
    corpus: Vec<&'a [u8]>,
    cases: Vec<eval::PerturbedCase>,
    distinct: Vec<(usize, usize)>,
    curve_files: usize,
    rho_grid: &'a [usize],
    trials: usize,
    edit_events: usize,
    edit_max_len: usize,
    seed: u64,
    out_dir: &'a Path,
}

struct HasherCurves {
    name: String,
    bitsub: Vec<CurvePoint>,
    edit: Vec<CurvePoint>,
}

fn run_hasher<H: Hasher>(h: &H, ctx: &EvalContext<'_>) -> Result<(eval::HasherReport, HasherCurves)> {
    let (report, rows) = eval::evaluate(h, &ctx.names, &ctx.corpus, &ctx.cases, &ctx.distinct)?;
    let csv = BufWriter::new(fs::File::create(ctx.out_dir.join(format!("pairs_{}.csv", h.name())))?);
    eval::write_pairs_csv(&rows, csv)?;
    let mut bitsub = Vec::new();
    let mut edit = Vec::new();
    for (i, f) in ctx.corpus.iter().take(ctx.curve_files).enumerate() {
        let s = derive_seed(derive_seed(ctx.seed, CURVE_STREAM), i as u64);
        bitsub.push(eval::robustness_curve(h, f, ctx.rho_grid, ctx.trials, s)?);
        edit.push(eval::edit_curve(h, f, ctx.edit_events, ctx.edit_max_len, s)?);
    }
    let curves = HasherCurves { name: h.name().to_string(), bitsub: merge_curves(&bitsub), edit: merge_curves(&edit) };
    if ctx.curve_files > 0 {
        for (kind, pts) in [("bitsub", &curves.bitsub), ("edit", &curves.edit)] {
            let w = BufWriter::new(fs::File::create(ctx.out_dir.join(format!("curve_{kind}_{}.csv", h.name())))?);
            eval::write_curve_csv(pts, w)?;
        }
    }
    Ok((report, curves))
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let file = load_config(&a.config)?;
    let model = load_model(&a.model)?;
    let mut thresholds = resolve_thresholds(model.tau_delta, &file, &a.thresholds);
    let corpus = read_corpus(&a.corpus, max_size(a.max_file_size, &file))?;
    let bytes: Vec<&[u8]> = corpus.iter().map(|f| f.bytes.as_slice()).collect();
    let plan = EvalPlan {
        scenarios: if a.no_scenarios {
            Vec::new()
        } else if a.scenarios.is_empty() {
            Scenario::ALL.to_vec()
        } else {
            a.scenarios.clone()
        },
        rho_max: a.rho_max,
        edit_fraction: a.edit_fraction,
        distinct_pairs: a.distinct_pairs,
        seed: a.seed,
    };
    let (cases, skipped) = eval::build_cases(&bytes, &plan)?;
    let distinct = eval::sample_distinct_pairs(bytes.len(), plan.distinct_pairs, derive_seed(a.seed, DISTINCT_STREAM))?;

    if let Some(fp) = a.calibrate_fp {
        let open = ThresholdConfig { tau_delta: f64::INFINITY, tau_digest: u32::MAX, tau_uneva: thresholds.tau_uneva };
        let neg_pairs: Vec<(&[u8], &[u8])> = distinct.iter().map(|&(i, j)| (bytes[i], bytes[j])).collect();
        let akash_neg: Vec<f64> = eval::score_pairs(&AkashHasher { model: &model, thresholds: open }, &neg_pairs)?
            .iter()
            .map(|s| s.distance)
            .collect();
        thresholds.tau_delta = calibrate_from_scores(&akash_neg, &akash_neg, fp)?;
        let sahash_neg: Vec<u64> = eval::score_pairs(&SahashHasher::new(open), &neg_pairs)?
            .iter()
            .map(|s| if s.distance.is_finite() { s.distance as u64 } else { u64::MAX })
            .collect();
        thresholds.tau_digest = match calibrate_integer(&sahash_neg, fp)? {
            Some(t) => u32::try_from(t).unwrap_or(u32::MAX),
            None => {
                log::warn!("no sahash threshold reaches false-positive rate {fp}; using 0");
                0
            }
        };
    }
    echo_config("eval plan", &plan);
    echo_config("thresholds", &thresholds);

    fs::create_dir_all(&a.out_dir)?;
    let ctx = EvalContext {
        names: corpus.iter().map(|f| f.name.clone()).collect(),
        corpus: bytes,
        cases,
        distinct,
        curve_files: a.curve_files,
        rho_grid: &a.rho_grid,
        trials: a.trials,
        edit_events: a.edit_events,
        edit_max_len: a.edit_max_len,
        seed: a.seed,
        out_dir: &a.out_dir,
    };
    let mut report = EvalReport::new(plan, thresholds, ctx.names.len(), skipped);
    let mut curves = Vec::new();
    let mut push = |(r, c): (eval::HasherReport, HasherCurves)| {
        report.hashers.push(r);
        curves.push(c);
    };
    push(run_hasher(&AkashHasher { model: &model, thresholds }, &ctx)?);
    push(run_hasher(&SahashHasher::new(thresholds), &ctx)?);
    for (kind, path) in [(ExternalKind::Ssdeep, &a.ssdeep), (ExternalKind::Sdhash, &a.sdhash)] {
        let Some(path) = path else { continue };
        match ExternalHasher::locate(kind, path) {
            Some(h) => push(run_hasher(&h, &ctx)?),
            None => log::warn!("{kind} not found at {}; column omitted", path.display()),
        }
    }

    if ctx.curve_files > 0 {
        for (kind, label) in [("bitsub", "substituted bits"), ("edit", "edited bytes")] {
            let series: Vec<(String, Vec<(f64, f64)>)> = curves
                .iter()
                .map(|c| {
                    let pts = if kind == "bitsub" { &c.bitsub } else { &c.edit };
                    (c.name.clone(), pts.iter().map(|p| (p.magnitude as f64, p.mean)).collect())
                })
                .collect();
            fs::write(a.out_dir.join(format!("curve_{kind}.svg")), curve_svg(kind, label, &series))?;
        }
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(a.out_dir.join("report.json"), json + "\n")?;
    log::info!("report written to {}", a.out_dir.join("report.json").display());
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct SahashComparison {
    distance: u64,
    uneva_dist: u32,
    similar: bool,
    thresholds: ThresholdConfig,
}

fn cmd_sahash(a: &SahashArgs, out: &mut dyn Write) -> Result<i32> {
    let file = load_config(&a.config)?;
    let cap = max_size(a.max_file_size, &file);
    let shift = crate::features::DEFAULT_SHIFT;
    let digest = |p: &Path| -> Result<(SahashDigest, crate::features::UnevaVector)> {
        let bytes = read_input(p, cap)?;
        Ok((sahash_digest(&extract_features(&bytes, shift)?)?, compute_uneva(&bytes)?))
    };
    if !a.compare {
        for p in &a.files {
            writeln!(out, "{}  {}", digest(p)?.0.to_text(), p.display())?;
        }
        return Ok(EXIT_OK);
    }
    let [x, y] = a.files.as_slice() else {
        return Err(Error::Config("--compare needs exactly two files".into()));
    };
    let thresholds = resolve_thresholds(None, &file, &a.thresholds);
    let ((dx, ux), (dy, uy)) = (digest(x)?, digest(y)?);
    let distance = sahash_distance(&dx, &dy)?;
    let uneva_dist = ux.distance(&uy);
    let similar = sahash_similar(distance, uneva_dist, &thresholds);
    let cmp = SahashComparison { distance, uneva_dist, similar, thresholds };
    writeln!(out, "{}", serde_json::to_string(&cmp).map_err(|e| Error::Config(e.to_string()))?)?;
    Ok(if similar { EXIT_OK } else { EXIT_DISSIMILAR })
}
