//! The `rat` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rat_core::data::{load_csv, Dataset, Record, MISSING_ID};
use rat_core::model::{RatModel, Variant};
use rat_core::retrieval::{Eligibility, RetrievalIndex, RetrievalResult};
use rat_core::synthetic::{self, SyntheticConfig};
use rat_core::training::{self, parse_segments, Neighbors, Segment, Split, TrainConfig};
use serde::Serialize;

pub use config::CliConfig;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// A failure together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<rat_core::Error> for Failure {
    fn from(e: rat_core::Error) -> Self {
        use rat_core::Error::*;
        let code = match e {
            Io(_) | Csv(_) | Row { .. } | Data(_) | Format(_) => EXIT_DATA,
            InvalidArgument(_) => EXIT_USAGE,
            Shape(_) | Numeric(_) => EXIT_RUNTIME,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure { code: EXIT_RUNTIME, message: e.to_string() }
    }
}

type CmdResult = std::result::Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "rat", version, about = "Retrieval-augmented transformer for click-through-rate prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic neighbor-dependent task as CSV plus a matching config.
    Synth(SynthArgs),
    /// Build the retrieval index over the training split.
    BuildIndex(BuildIndexArgs),
    /// Retrieve the top-k matching training records for ad-hoc queries (JSON lines).
    Retrieve(RetrieveArgs),
    /// Train a model; writes model.ratm and train_log.jsonl.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split, optionally per user segment.
    Evaluate(EvaluateArgs),
    /// Train every block design with the same data and seed; writes a CSV table.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Experiment config file (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
}

/// Flags that override `[train]` keys of the config file.
#[derive(Args, Debug)]
struct TrainOverrides {
    /// Random seed [default: 42, or the config's value].
    #[arg(long)]
    seed: Option<u64>,
    /// Neighbors per target.
    #[arg(long)]
    k: Option<usize>,
    /// Block design: cascade, jm, ce, pa or intra.
    #[arg(long)]
    variant: Option<Variant>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; receives synthetic.csv and rat.toml.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = SyntheticConfig::default().num_users)]
    users: usize,
    /// Fields that carry no signal.
    #[arg(long, default_value_t = SyntheticConfig::default().num_distractors)]
    distractors: usize,
}

#[derive(Args, Debug)]
struct BuildIndexArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Index file [default: <out_dir>/index.rati].
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Index file [default: <out_dir>/index.rati].
    #[arg(long, value_name = "FILE")]
    index: Option<PathBuf>,
    /// A query such as `user=u3,d1=a`; unnamed fields are missing. Repeatable.
    #[arg(long = "query", value_name = "SPEC")]
    queries: Vec<String>,
    /// File with one query spec per line.
    #[arg(long, value_name = "FILE")]
    queries_file: Option<PathBuf>,
    /// Neighbors per query [default: the config's k].
    #[arg(long)]
    k: Option<usize>,
    /// Only retrieve records with a timestamp below this one.
    #[arg(long, value_name = "TS")]
    before: Option<i64>,
    /// Output file [default: stdout].
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory [default: the config's out_dir].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoint [default: <out_dir>/model.ratm].
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Comma-separated segments such as `tail10,tail20`; needs user_field.
    #[arg(long, value_name = "LIST")]
    segments: Option<String>,
    /// Also write the report to this file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// CSV file [default: <out_dir>/ablation.csv].
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a, &mut out),
        Command::BuildIndex(a) => cmd_build_index(&a, &mut out),
        Command::Retrieve(a) => cmd_retrieve(&a, &mut out),
        Command::Train(a) => cmd_train(&a, &mut out),
        Command::Evaluate(a) => cmd_evaluate(&a, &mut out),
        Command::Ablate(a) => cmd_ablate(&a, &mut out),
    };
    match result.and_then(|()| out.flush().map_err(Failure::from)) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

fn read_config(path: &Path) -> std::result::Result<CliConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let cfg = CliConfig::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let cfg = cfg.resolve(base);
    if !cfg.data.path.exists() {
        return Err(Failure::data(format!("dataset {} does not exist", cfg.data.path.display())));
    }
    Ok(cfg)
}

fn load_dataset(cfg: &CliConfig) -> std::result::Result<Dataset, Failure> {
    Ok(load_csv(&cfg.data.path, &cfg.data.schema)?)
}

fn create_parent(path: &Path) -> io::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir),
        _ => Ok(()),
    }
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = SyntheticConfig {
        num_users: a.users,
        num_distractors: a.distractors,
        seed: a.seed,
        ..Default::default()
    };
    let table = synthetic::generate(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let csv_path = a.out.join("synthetic.csv");
    synthetic::write_csv(&table, BufWriter::new(fs::File::create(&csv_path)?))?;

    let mut schema = rat_core::data::SchemaSpec::new(
        &table.label_name,
        table.timestamp_name.as_deref(),
        &table.field_names.iter().map(String::as_str).collect::<Vec<_>>(),
    );
    schema.split = SyntheticConfig::split();
    let config = CliConfig {
        out_dir: PathBuf::from("run"),
        user_field: Some("user".into()),
        data: config::DataConfig { path: PathBuf::from("synthetic.csv"), schema },
        train: TrainConfig { max_epochs: 5, seed: a.seed, ..Default::default() },
    };
    fs::write(a.out.join("rat.toml"), config.to_toml())?;
    writeln!(out, "wrote {} records to {} (seed {})", table.rows.len(), csv_path.display(), a.seed)?;
    Ok(())
}

fn cmd_build_index(a: &BuildIndexArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = read_config(&a.config.config)?;
    let ds = load_dataset(&cfg)?;
    let start = Instant::now();
    let index = RetrievalIndex::build(ds.train())?;
    let elapsed = start.elapsed();
    let path = a.out.clone().unwrap_or_else(|| cfg.out_dir.join("index.rati"));
    create_parent(&path)?;
    index.save(&path)?;
    writeln!(out, "pool size (N_P): {}", index.pool_size())?;
    writeln!(out, "distinct terms: {}", index.num_terms())?;
    writeln!(out, "build time: {:.3} ms", elapsed.as_secs_f64() * 1e3)?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

/// Encodes `field=value,...` against the dataset schema.
fn parse_query(ds: &Dataset, spec: &str) -> std::result::Result<Vec<u32>, Failure> {
    let mut ids = vec![MISSING_ID; ds.num_fields()];
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| Failure::data(format!("query term {part:?} is not field=value")))?;
        let f = ds
            .field_index(name.trim())
            .ok_or_else(|| Failure::data(format!("query names unknown field {:?}", name.trim())))?;
        ids[f] = ds.schema[f].vocab.id_of(value.trim());
    }
    Ok(ids)
}

#[derive(Serialize)]
struct RetrieveLine<'a> {
    query: usize,
    spec: &'a str,
    /// `null` on padding.
    neighbor_indices: Vec<Option<usize>>,
    scores: Vec<Option<f64>>,
    mask: &'a [bool],
}

fn retrieve_line<'a>(i: usize, spec: &'a str, r: &'a RetrievalResult) -> RetrieveLine<'a> {
    RetrieveLine {
        query: i,
        spec,
        neighbor_indices: r.neighbor_indices.iter().zip(&r.mask).map(|(&n, &m)| m.then_some(n)).collect(),
        scores: r.scores.iter().zip(&r.mask).map(|(&s, &m)| m.then_some(s)).collect(),
        mask: &r.mask,
    }
}

fn cmd_retrieve(a: &RetrieveArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = read_config(&a.config.config)?;
    let ds = load_dataset(&cfg)?;
    let index_path = a.index.clone().unwrap_or_else(|| cfg.out_dir.join("index.rati"));
    let index = RetrievalIndex::load(&index_path)?;
    if index.pool_size() != ds.train().len() || index.num_fields() != ds.num_fields() {
        return Err(Failure::data(format!(
            "{} does not index this dataset's training split ({} records, {} fields)",
            index_path.display(),
            ds.train().len(),
            ds.num_fields()
        )));
    }

    let mut specs = a.queries.clone();
    if let Some(path) = &a.queries_file {
        let text = fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        specs.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned));
    }
    if specs.is_empty() {
        return Err(Failure::usage("give at least one --query or a --queries-file"));
    }
    let (timestamp, eligibility) = match a.before {
        Some(ts) => (ts, Eligibility::StrictlyEarlier),
        None => (i64::MAX, Eligibility::WholePool),
    };
    let queries = specs
        .iter()
        .map(|s| Ok(Record { field_ids: parse_query(&ds, s)?, label: 0, timestamp, index: 0 }))
        .collect::<std::result::Result<Vec<_>, Failure>>()?;
    let k = a.k.unwrap_or(cfg.train.k);
    let results = index.retrieve_batch_matching(&queries, k, eligibility)?;

    let mut file;
    let sink: &mut dyn Write = match &a.out {
        Some(path) => {
            create_parent(path)?;
            file = BufWriter::new(fs::File::create(path)?);
            &mut file
        }
        None => out,
    };
    for (i, (spec, r)) in specs.iter().zip(&results).enumerate() {
        serde_json::to_writer(&mut *sink, &retrieve_line(i, spec, r)).map_err(io::Error::from)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

fn user_field(cfg: &CliConfig, ds: &Dataset) -> std::result::Result<Option<usize>, Failure> {
    cfg.user_field
        .as_deref()
        .map(|name| ds.field_index(name).ok_or_else(|| Failure::data(format!("user_field {name:?} is not a feature"))))
        .transpose()
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = read_config(&a.config.config)?;
    let mut train_cfg = cfg.train.clone();
    a.overrides.apply(&mut train_cfg);
    train_cfg.validate()?;
    let ds = load_dataset(&cfg)?;
    let index = RetrievalIndex::build(ds.train())?;
    let outcome = training::train(&ds, &index, &train_cfg)?;

    let dir = a.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&dir)?;
    let echo = serde_json::to_string(&train_cfg).map_err(io::Error::from)?;
    outcome.model.save(dir.join("model.ratm"), &echo)?;
    let mut log = BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?);
    training::write_log(&outcome.log, &mut log)?;
    log.flush()?;

    writeln!(
        out,
        "best epoch {} valid auc {:.6}; test auc {:.6} logloss {:.6} (seed {})",
        outcome.best_epoch, outcome.best_valid_auc, outcome.test.auc, outcome.test.logloss, train_cfg.seed
    )?;
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluateOutput<'a> {
    split: &'a str,
    seed: u64,
    #[serde(flatten)]
    report: training::EvalReport,
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = read_config(&a.config.config)?;
    let segments: Vec<Segment> = match &a.segments {
        Some(s) => parse_segments(s).map_err(|e| Failure::usage(e.to_string()))?,
        None => Vec::new(),
    };
    if !segments.is_empty() && cfg.user_field.is_none() {
        return Err(Failure::usage("--segments needs user_field in the config"));
    }
    let model_path = a.model.clone().unwrap_or_else(|| cfg.out_dir.join("model.ratm"));
    let (model, echo) = RatModel::load(&model_path)?;
    let train_cfg: TrainConfig = serde_json::from_str(&echo)
        .map_err(|e| Failure::data(format!("{}: bad config echo: {e}", model_path.display())))?;

    let ds = load_dataset(&cfg)?;
    if ds.vocab_sizes() != model.config().vocab_sizes {
        return Err(Failure::data(format!("{} was trained on a different dataset", model_path.display())));
    }
    let index = RetrievalIndex::build(ds.train())?;
    let neighbors = Neighbors::compute(&ds, &index, model.config().k)?;
    let user = user_field(&cfg, &ds)?;
    let report = training::evaluate(&model, &ds, a.split, &neighbors, &train_cfg, &segments, user)?;
    let split = match a.split {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    };
    let text = serde_json::to_string_pretty(&EvaluateOutput { split, seed: train_cfg.seed, report })
        .map_err(io::Error::from)?;
    writeln!(out, "{text}")?;
    if let Some(path) = &a.out {
        create_parent(path)?;
        fs::write(path, format!("{text}\n"))?;
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = read_config(&a.config.config)?;
    let mut train_cfg = cfg.train.clone();
    a.overrides.apply(&mut train_cfg);
    train_cfg.validate()?;
    let ds = load_dataset(&cfg)?;
    let index = RetrievalIndex::build(ds.train())?;
    let rows = training::ablate(&ds, &index, &train_cfg)?;

    let path = a.out.clone().unwrap_or_else(|| cfg.out_dir.join("ablation.csv"));
    create_parent(&path)?;
    training::write_ablation_csv(&rows, BufWriter::new(fs::File::create(&path)?))?;
    writeln!(out, "{:<8} {:>8} {:>8} {:>8} {:>12}", "variant", "auc", "logloss", "params", "runtime_us")?;
    for r in &rows {
        writeln!(out, "{:<8} {:>8.4} {:>8.4} {:>8} {:>12.1}", r.variant, r.auc, r.logloss, r.params, r.runtime_us)?;
    }
    writeln!(out, "seed {}; wrote {}", train_cfg.seed, path.display())?;
    Ok(())
}
