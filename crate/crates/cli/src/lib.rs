//! Command-line entry points for the whole life-cycle: turn session logs into
//! corpora, train the tagger and advisor, run seeded simulations, serve the
//! orchestrator and evaluate bundles.
//!
//! [`run`] takes argv and returns the exit code plus what to print, so the
//! binary is a thin wrapper and tests can drive every subcommand in-process.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use assist_core::advisor::{EnsembleConfig, VoteThresholds};
use assist_core::autotagger::{data_growth, f1_eval, train_tagger, HashedBagEncoder, TaggedMessage, TaggerConfig};
use assist_core::{AdvisorBundle, Tagger};
use assist_core::clientsim::read_storyboard_dir;
use assist_core::digest::sha256_hex;
use assist_core::domain::Domain;
use assist_core::operator::OperatorMode;
use assist_core::orchestrator::{export_training_data, ExportOptions, Models, TimeMetrics, TrainingExport};
use assist_core::sessionlog::{Mode, SessionLog};
use assist_core::simulate::{
    batch_metrics, bootstrap, derive_seed, schema_for, simulate_batch, train_advisor_bundle, PipelineConfig, SimConfig, StoryboardSource,
};
use assist_core::vectorcore::{Schema, DEFAULT_LABEL_COUNT};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

pub const SCHEMA_FILE: &str = "schema.json";
pub const TAGGER_FILE: &str = "tagger.json";
pub const ADVISOR_FILE: &str = "advisor.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Allowed drop of the ensemble below its best member before the comparison is flagged.
const BEST_MEMBER_TOLERANCE: f64 = 0.02;

#[derive(Debug, Parser)]
#[command(name = "assist", version, about = "Agent-assist tooling for chat call centers")]
pub struct Cli {
    /// Output format of the final report.
    #[arg(long, value_enum, global = true, default_value_t = ReportFormat::Text)]
    pub report: ReportFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Structured,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a directory of session logs into training corpora.
    Ingest(IngestArgs),
    /// Train the automatic tagger into a bundle directory.
    TrainTagger(TrainArgs),
    /// Train one advisor ensemble per advice type into a bundle directory.
    TrainAdvisor(TrainAdvisorArgs),
    /// Run seeded simulated sessions and report time metrics.
    Simulate(SimulateArgs),
    /// Run the orchestrator service until interrupted.
    Serve(ServeArgs),
    /// Evaluate a bundle: advisor top-2 accuracy, tagger F1, data growth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of `*.jsonl` session logs.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only operator-made tags.
    #[arg(long)]
    pub manual_only: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Log directory, or the output of `ingest`.
    #[arg(long)]
    pub data: PathBuf,
    /// Bundle directory; an existing schema there is reused.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Number of tag categories in a new schema.
    #[arg(long, default_value_t = DEFAULT_LABEL_COUNT)]
    pub labels: usize,
    #[arg(long)]
    pub manual_only: bool,
}

#[derive(Debug, Args)]
pub struct TrainAdvisorArgs {
    #[command(flatten)]
    pub common: TrainArgs,
    /// Voting thresholds as `first,secondary`.
    #[arg(long, value_parser = parse_thresholds)]
    pub thresholds: Option<VoteThresholds>,
    #[arg(long)]
    pub ensemble_size: Option<usize>,
    /// Domain definition (TOML); the bundled student-loan domain by default.
    #[arg(long)]
    pub domain: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimMode {
    /// Both operator policies on the same seeded sessions, with advice.
    Compare,
    /// Collect-mode sessions with hand tagging and no models.
    Collect,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 50)]
    pub sessions: usize,
    #[arg(long, default_value_t = 3)]
    pub clients: usize,
    #[arg(long)]
    pub seed: u64,
    /// Directory of `*.storyboard` files; random personas otherwise.
    #[arg(long)]
    pub storyboards: Option<PathBuf>,
    /// Bundle directory; compare mode bootstraps its own models without one.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SimMode::Compare)]
    pub mode: SimMode,
    /// Write the session logs here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub domain: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML config; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Bundle directory holding advisor, tagger and schema files.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// collect, advise_and_collect or advise_only.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub storyboards: Option<PathBuf>,
    #[arg(long)]
    pub max_clients: Option<usize>,
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_thresholds)]
    pub thresholds: Option<VoteThresholds>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Held-out logs (or `ingest` output) to score on; the stored holdout otherwise.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Training logs for the tagger data-growth comparison (needs --test).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_thresholds)]
    pub thresholds: Option<VoteThresholds>,
}

fn parse_thresholds(s: &str) -> Result<VoteThresholds, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [first, secondary] = parts.as_slice() else {
        return Err("expected `first,secondary`".into());
    };
    let parse = |x: &str| x.parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    let t = VoteThresholds {
        first: parse(first)?,
        secondary: parse(secondary)?,
    };
    if !(0.0..1.0).contains(&t.first) || !(0.0..1.0).contains(&t.secondary) {
        return Err("thresholds must lie in [0, 1)".into());
    }
    Ok(t)
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| format!("unknown mode {s:?} (collect, advise_and_collect, advise_only)"))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    BadArgs(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Training(String),
    #[error("{0}")]
    Simulation(String),
    #[error(transparent)]
    Server(#[from] assist_server::ServerError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::BadArgs(_) => "bad_args",
            CliError::Io { .. } => "io",
            CliError::Data(_) => "data",
            CliError::Training(_) => "training",
            CliError::Simulation(_) => "simulation",
            CliError::Server(assist_server::ServerError::PortInUse(_)) => "port_in_use",
            CliError::Server(assist_server::ServerError::BadConfig(_)) => "bad_config",
            CliError::Server(_) => "server",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BadArgs(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Final report of a subcommand. `results` mirrors the quantities the text
/// lines describe, so scripts can assert on them directly.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: &'static str,
    pub seed: u64,
    /// SHA-256 of every input file or directory, keyed by flag name.
    pub inputs: BTreeMap<String, String>,
    pub results: Value,
    #[serde(skip)]
    pub lines: Vec<String>,
}

impl Report {
    fn new(command: &'static str, seed: u64) -> Self {
        Self {
            command,
            seed,
            inputs: BTreeMap::new(),
            results: json!({}),
            lines: Vec::new(),
        }
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(name.to_string(), digest_path(path)?);
        Ok(())
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Structured => {
                let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
                s.push('\n');
                s
            }
            ReportFormat::Text => {
                let mut s = format!("{}\nseed: {}\n", self.command, self.seed);
                for (name, digest) in &self.inputs {
                    s.push_str(&format!("input {name}: sha256 {digest}\n"));
                }
                for line in &self.lines {
                    s.push_str(line);
                    s.push('\n');
                }
                s
            }
        }
    }
}

/// What the process should print and return.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run<I, S>(argv: I) -> Outcome
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Outcome {
                    code: 0,
                    stdout: e.to_string(),
                    stderr: String::new(),
                },
                _ => failure(&CliError::BadArgs(e.to_string().trim_end().to_string())),
            };
        }
    };
    match dispatch(&cli) {
        Ok(report) => Outcome {
            code: 0,
            stdout: report.render(cli.report),
            stderr: String::new(),
        },
        Err(e) => failure(&e),
    }
}

fn failure(e: &CliError) -> Outcome {
    Outcome {
        code: e.exit_code(),
        stdout: String::new(),
        stderr: format!("{}\n", json!({ "error": e.kind(), "message": e.to_string() })),
    }
}

fn dispatch(cli: &Cli) -> Result<Report, CliError> {
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::TrainTagger(a) => train_tagger_cmd(a),
        Command::TrainAdvisor(a) => train_advisor_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::Serve(a) => serve(a),
        Command::Eval(a) => eval(a),
    }
}

// ---------------------------------------------------------------------------
// Inputs

fn require_dir(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::BadArgs(format!("--{flag} {}: not a directory", path.display())))
    }
}

fn require_file(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::BadArgs(format!("--{flag} {}: no such file", path.display())))
    }
}

/// SHA-256 of a file, or of the sorted `(relative path, file digest)` list of a directory.
pub fn digest_path(path: &Path) -> Result<String, CliError> {
    if path.is_file() {
        return Ok(sha256_hex(&std::fs::read(path).map_err(io_err(path))?));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut listing = String::new();
    for (rel, full) in files {
        let digest = sha256_hex(&std::fs::read(&full).map_err(io_err(&full))?);
        listing.push_str(&format!("{rel}\0{digest}\n"));
    }
    Ok(sha256_hex(listing.as_bytes()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<(), CliError> {
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.push((rel, path));
        }
    }
    Ok(())
}

/// Logs live either directly in `dir` or under `dir/episodes` (ingest output).
fn load_export(dir: &Path, manual_only: bool) -> Result<TrainingExport, CliError> {
    let episodes = dir.join("episodes");
    let logs = if episodes.is_dir() { episodes } else { dir.to_path_buf() };
    let export = export_training_data(&logs, ExportOptions { manual_tags_only: manual_only })
        .map_err(|e| CliError::Data(format!("{}: {e}", logs.display())))?;
    if export.logs.is_empty() {
        return Err(CliError::Data(format!("{}: no usable session logs", logs.display())));
    }
    Ok(export)
}

fn load_domain(path: Option<&Path>) -> Result<Domain, CliError> {
    match path {
        Some(p) => {
            require_file("domain", p)?;
            Domain::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        }
        None => Ok(Domain::student_loans()),
    }
}

/// Reuses the bundle's schema when present so tagger and advisor agree on it.
fn bundle_schema(out: &Path, export: &TrainingExport, labels: usize) -> Result<(Schema, bool), CliError> {
    let path = out.join(SCHEMA_FILE);
    if path.is_file() {
        let schema = Schema::load(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        return Ok((schema, true));
    }
    if labels == 0 {
        return Err(CliError::BadArgs("--labels must be at least 1".into()));
    }
    let schema = schema_for(export, labels).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    schema.save(&path).map_err(io_err(&path))?;
    Ok((schema, false))
}

/// Drops tags on categories the schema does not cover.
fn restrict_corpus(corpus: &[TaggedMessage], schema: &Schema) -> Vec<TaggedMessage> {
    corpus
        .iter()
        .map(|m| TaggedMessage {
            text: m.text.clone(),
            tags: m.tags.iter().filter(|t| schema.labels.contains(&t.category)).cloned().collect(),
        })
        .collect()
}

/// Records what produced each bundle file.
fn update_manifest(out: &Path, file: &str, entry: Value) -> Result<(), CliError> {
    let path = out.join(MANIFEST_FILE);
    let mut manifest: BTreeMap<String, Value> = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        Err(_) => BTreeMap::new(),
    };
    manifest.insert(file.to_string(), entry);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(io_err(&path))
}

// ---------------------------------------------------------------------------
// Subcommands

fn ingest(a: &IngestArgs) -> Result<Report, CliError> {
    require_dir("data", &a.data)?;
    let mut report = Report::new("ingest", a.seed);
    report.input("data", &a.data)?;
    let export = load_export(&a.data, a.manual_only)?;
    export.write(&a.out).map_err(|e| CliError::Io {
        path: a.out.clone(),
        message: e.to_string(),
    })?;
    let r = &export.report;
    report.lines.push(format!(
        "{} files: {} sessions used, {} advise-only excluded, {} skipped",
        r.files,
        r.sessions_used,
        r.advise_only_excluded,
        r.skipped.len()
    ));
    for s in &r.skipped {
        report.lines.push(format!("  skipped {}: {}", s.file, s.reason));
    }
    report.lines.push(format!(
        "{} client messages, {} manual tags, {} automatic tags ({} dropped)",
        r.client_messages, r.manual_tags, r.auto_tags, r.dropped_auto_tags
    ));
    report.lines.push(format!("corpus rows: {}", export.corpus.len()));
    report.results = json!({ "export": r, "corpus_rows": export.corpus.len(), "out": a.out });
    Ok(report)
}

fn train_tagger_cmd(a: &TrainArgs) -> Result<Report, CliError> {
    require_dir("data", &a.data)?;
    let mut report = Report::new("train-tagger", a.seed);
    report.input("data", &a.data)?;
    let export = load_export(&a.data, a.manual_only)?;
    let (schema, reused) = bundle_schema(&a.out, &export, a.labels)?;
    let corpus = restrict_corpus(&export.corpus, &schema);
    let config = TaggerConfig {
        seed: a.seed,
        ..TaggerConfig::default()
    };
    let tagger: Tagger = train_tagger(&corpus, &schema, HashedBagEncoder::default(), &config)
        .map_err(|e| CliError::Training(e.to_string()))?;
    let path = a.out.join(TAGGER_FILE);
    tagger.save(&path).map_err(|e| CliError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let fit = f1_eval(&tagger, &corpus).map_err(|e| CliError::Training(e.to_string()))?;
    update_manifest(
        &a.out,
        TAGGER_FILE,
        json!({ "seed": a.seed, "data": report.inputs["data"], "schema_hash": schema.hash(), "config": config }),
    )?;
    report.lines.push(format!(
        "schema: {} labels ({}), hash {}",
        schema.n,
        if reused { "reused" } else { "new" },
        schema.hash()
    ));
    report.lines.push(format!("trained on {} messages", corpus.len()));
    report.lines.push(format!(
        "training-set F1 {:.4} (precision {:.4}, recall {:.4})",
        fit.f1, fit.precision, fit.recall
    ));
    report.results = json!({
        "rows": corpus.len(),
        "labels": schema.n,
        "schema_reused": reused,
        "schema_hash": schema.hash(),
        "training_f1": fit,
    });
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
struct TypeLine {
    rows: usize,
    unseen: usize,
    classes: usize,
    members: usize,
    ensemble_top2: f64,
    best_member_top2: f64,
    majority_baseline: f64,
    ensemble_at_least_best_member: bool,
}

impl TypeLine {
    fn text(&self, ty: impl std::fmt::Display) -> String {
        format!(
            "advisor {ty}: ensemble top-2 {:.4} vs best member {:.4} -> ensemble >= best member - {BEST_MEMBER_TOLERANCE}: {}; majority baseline {:.4} ({} rows, {} unseen, {} classes, {} members)",
            self.ensemble_top2,
            self.best_member_top2,
            if self.ensemble_at_least_best_member { "yes" } else { "no" },
            self.majority_baseline,
            self.rows,
            self.unseen,
            self.classes,
            self.members
        )
    }
}

/// Scores every ensemble on its stored holdout split.
fn holdout_lines(bundle: &AdvisorBundle) -> Result<BTreeMap<String, TypeLine>, CliError> {
    let mut out = BTreeMap::new();
    for (ty, e) in &bundle.ensembles {
        let err = |e: assist_core::advisor::AdvisorError| CliError::Training(e.to_string());
        let ensemble = e.evaluate_top_k(&e.holdout, 2).map_err(err)?;
        let best = e.member_accuracies(&e.holdout, 2).map_err(err)?.into_iter().fold(0.0, f64::max);
        let counts = e.holdout.class_counts();
        let majority = counts.iter().copied().max().unwrap_or(0) as f64 / e.holdout.len().max(1) as f64;
        out.insert(
            ty.to_string(),
            TypeLine {
                rows: e.holdout.len(),
                unseen: 0,
                classes: e.classes.len(),
                members: e.members.len(),
                ensemble_top2: ensemble,
                best_member_top2: best,
                majority_baseline: majority,
                ensemble_at_least_best_member: ensemble >= best - BEST_MEMBER_TOLERANCE,
            },
        );
    }
    Ok(out)
}

fn train_advisor_cmd(a: &TrainAdvisorArgs) -> Result<Report, CliError> {
    let c = &a.common;
    require_dir("data", &c.data)?;
    let mut report = Report::new("train-advisor", c.seed);
    report.input("data", &c.data)?;
    if let Some(d) = &a.domain {
        report.input("domain", d)?;
    }
    let domain = load_domain(a.domain.as_deref())?;
    let export = load_export(&c.data, c.manual_only)?;
    let (schema, reused) = bundle_schema(&c.out, &export, c.labels)?;
    let mut config = EnsembleConfig::default();
    if let Some(t) = a.thresholds {
        config.thresholds = t;
    }
    if let Some(n) = a.ensemble_size {
        if n == 0 {
            return Err(CliError::BadArgs("--ensemble-size must be at least 1".into()));
        }
        config.ensemble_size = n;
    }
    let (bundle, skipped) = train_advisor_bundle::<f64>(&export, &schema, &domain.advice_catalog(), &config, c.seed)
        .map_err(|e| CliError::Training(e.to_string()))?;
    let path = c.out.join(ADVISOR_FILE);
    bundle.save(&path).map_err(|e| CliError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    update_manifest(
        &c.out,
        ADVISOR_FILE,
        json!({ "seed": c.seed, "data": report.inputs["data"], "schema_hash": schema.hash(), "config": config }),
    )?;
    report.lines.push(format!(
        "schema: {} labels ({}), hash {}",
        schema.n,
        if reused { "reused" } else { "new" },
        schema.hash()
    ));
    let lines = holdout_lines(&bundle)?;
    let mut types = serde_json::Map::new();
    for (ty, e) in &bundle.ensembles {
        report.lines.push(format!(
            "{ty}: {} members after {} attempts, gate p_threshold {:.4}",
            e.members.len(),
            e.attempts,
            e.p_threshold
        ));
        let line = &lines[&ty.to_string()];
        report.lines.push(line.text(ty));
        types.insert(
            ty.to_string(),
            json!({ "attempts": e.attempts, "p_threshold": e.p_threshold, "holdout": line }),
        );
    }
    for (ty, why) in &skipped {
        report.lines.push(format!("{ty}: skipped ({why})"));
    }
    report.results = json!({
        "schema_hash": schema.hash(),
        "schema_reused": reused,
        "types": types,
        "skipped": skipped.iter().map(|(t, w)| json!({ "type": t.to_string(), "reason": w })).collect::<Vec<_>>(),
    });
    Ok(report)
}

fn load_bundle_dir(dir: &Path) -> Result<(Option<AdvisorBundle>, Option<Tagger>, Option<Schema>), CliError> {
    let data_err = |p: &Path, e: &dyn std::fmt::Display| CliError::Data(format!("{}: {e}", p.display()));
    let advisor_path = dir.join(ADVISOR_FILE);
    let tagger_path = dir.join(TAGGER_FILE);
    let schema_path = dir.join(SCHEMA_FILE);
    let advisor = match advisor_path.is_file() {
        true => Some(AdvisorBundle::load(&advisor_path).map_err(|e| data_err(&advisor_path, &e))?),
        false => None,
    };
    let tagger = match tagger_path.is_file() {
        true => Some(Tagger::load(&tagger_path).map_err(|e| data_err(&tagger_path, &e))?),
        false => None,
    };
    let schema = match schema_path.is_file() {
        true => Some(Schema::load(&schema_path).map_err(|e| data_err(&schema_path, &e))?),
        false => None,
    };
    Ok((advisor, tagger, schema))
}

fn metrics_json(m: &TimeMetrics) -> Value {
    serde_json::to_value(m).expect("metrics serialize")
}

fn metrics_row(name: &str, m: &TimeMetrics) -> String {
    format!(
        "{name:<16} {:>14.3} {:>14.3} {:>14.3}",
        m.total_session_time, m.total_waiting_time, m.max_waiting_time
    )
}

const METRICS_HEADER: &str = "policy           session (min)  waiting (min)  max wait (min)";

fn write_logs(dir: &Path, logs: &[SessionLog]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, log) in logs.iter().enumerate() {
        let name = format!("{}.jsonl", log.session_id().map_or_else(|| format!("s{i:04}"), str::to_string));
        let path = dir.join(name);
        log.write(&path).map_err(|e| CliError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<Report, CliError> {
    if a.sessions == 0 || a.clients == 0 {
        return Err(CliError::BadArgs("--sessions and --clients must be at least 1".into()));
    }
    let mut report = Report::new("simulate", a.seed);
    if let Some(d) = &a.domain {
        report.input("domain", d)?;
    }
    let domain = load_domain(a.domain.as_deref())?;
    let source = match &a.storyboards {
        Some(dir) => {
            require_dir("storyboards", dir)?;
            report.input("storyboards", dir)?;
            let boards = read_storyboard_dir(dir, &domain).map_err(|e| CliError::Data(e.to_string()))?;
            if boards.is_empty() {
                return Err(CliError::Data(format!("{}: no storyboards", dir.display())));
            }
            StoryboardSource::Library(boards)
        }
        None => StoryboardSource::Random,
    };
    let sim_err = |e: assist_core::orchestrator::OrchestratorError| CliError::Simulation(e.to_string());
    report.lines.push(format!("{} sessions x {} clients", a.sessions, a.clients));
    match a.mode {
        SimMode::Collect => {
            let config = SimConfig {
                clients: a.clients,
                ..SimConfig::collect()
            };
            let logs = simulate_batch::<f64>(&domain, &source, &Models::default(), &config, a.sessions, a.seed)
                .map_err(sim_err)?;
            let (mean, _) = batch_metrics(&logs).map_err(sim_err)?;
            if let Some(out) = &a.out {
                write_logs(out, &logs)?;
            }
            report.lines.push(METRICS_HEADER.into());
            report.lines.push(metrics_row("collect", &mean));
            report.results = json!({
                "mode": "collect",
                "sessions": a.sessions,
                "clients": a.clients,
                "collect": metrics_json(&mean),
            });
        }
        SimMode::Compare => {
            let models = match &a.bundle {
                Some(dir) => {
                    require_dir("bundle", dir)?;
                    report.input("bundle", dir)?;
                    let (advisor, tagger, _) = load_bundle_dir(dir)?;
                    match (advisor, tagger) {
                        (Some(advisor), Some(tagger)) => Models::new(advisor, tagger),
                        _ => {
                            return Err(CliError::BadArgs(format!(
                                "--bundle {}: needs both {ADVISOR_FILE} and {TAGGER_FILE}",
                                dir.display()
                            )))
                        }
                    }
                }
                None => {
                    let config = PipelineConfig {
                        clients: a.clients,
                        seed: derive_seed(a.seed, 0xb007),
                        ..PipelineConfig::default()
                    };
                    report.lines.push(format!(
                        "no bundle: bootstrapped models from {} collect sessions",
                        config.bootstrap_sessions
                    ));
                    let b = bootstrap::<f64>(&domain, &config).map_err(sim_err)?;
                    Models::new(b.advisor, b.tagger)
                }
            };
            let run = |operator| {
                let config = SimConfig {
                    clients: a.clients,
                    ..SimConfig::advise(operator)
                };
                simulate_batch(&domain, &source, &models, &config, a.sessions, a.seed).map_err(sim_err)
            };
            let follows = run(OperatorMode::FollowsAdvice)?;
            let ignores = run(OperatorMode::IgnoresAdvice)?;
            let (f, _) = batch_metrics(&follows).map_err(sim_err)?;
            let (i, _) = batch_metrics(&ignores).map_err(sim_err)?;
            if let Some(out) = &a.out {
                write_logs(&out.join("follows_advice"), &follows)?;
                write_logs(&out.join("ignores_advice"), &ignores)?;
            }
            let session_cut = 1.0 - f.total_session_time / i.total_session_time;
            let wait_cut = 1.0 - f.total_waiting_time / i.total_waiting_time;
            report.lines.push(METRICS_HEADER.into());
            report.lines.push(metrics_row("follows_advice", &f));
            report.lines.push(metrics_row("ignores_advice", &i));
            report.lines.push(format!(
                "reduction with advice: session time {:.1}%, waiting time {:.1}%",
                session_cut * 100.0,
                wait_cut * 100.0
            ));
            report.results = json!({
                "mode": "compare",
                "sessions": a.sessions,
                "clients": a.clients,
                "follows_advice": metrics_json(&f),
                "ignores_advice": metrics_json(&i),
                "session_time_reduction": session_cut,
                "waiting_time_reduction": wait_cut,
                "follows_lower_session_time": f.total_session_time < i.total_session_time,
                "follows_lower_waiting_time": f.total_waiting_time < i.total_waiting_time,
            });
        }
    }
    Ok(report)
}

fn serve(a: &ServeArgs) -> Result<Report, CliError> {
    let mut config = match &a.config {
        Some(p) => {
            require_file("config", p)?;
            assist_server::ServerConfig::load(p)?
        }
        None => assist_server::ServerConfig::default(),
    };
    let mut report = Report::new("serve", 0);
    if let Some(p) = &a.config {
        report.input("config", p)?;
    }
    if let Some(dir) = &a.bundle {
        require_dir("bundle", dir)?;
        report.input("bundle", dir)?;
        let present = |f: &str| Some(dir.join(f)).filter(|p| p.is_file());
        config.advisor_bundle = present(ADVISOR_FILE).or(config.advisor_bundle);
        config.tagger_bundle = present(TAGGER_FILE).or(config.tagger_bundle);
        config.schema = present(SCHEMA_FILE).or(config.schema);
    }
    if let Some(b) = &a.bind {
        config.bind = b.clone();
    }
    if let Some(p) = a.port {
        config.port = p;
    }
    if let Some(m) = a.mode {
        config.mode = m;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(d) = &a.storyboards {
        require_dir("storyboards", d)?;
        config.storyboards = Some(d.clone());
    }
    if let Some(n) = a.max_clients {
        config.max_clients = n;
    }
    if let Some(d) = &a.log_dir {
        config.log_dir = d.clone();
    }
    if a.thresholds.is_some() {
        config.thresholds = a.thresholds;
    }
    config.validate()?;
    report.seed = config.seed;

    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io {
            path: PathBuf::from("<runtime>"),
            message: e.to_string(),
        })?;
    let (addr, state) = runtime.block_on(async {
        let server = assist_server::Server::bind(config.clone()).await?;
        let addr = server.local_addr();
        let state = server.state();
        // The address is needed while serving, not after.
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        server.run(assist_server::shutdown_signal()).await?;
        Ok::<_, CliError>((addr, state))
    })?;
    let sessions = state.session_ids();
    report.lines.push(format!("served on {addr}: {} sessions, logs in {}", sessions.len(), config.log_dir.display()));
    report.results = json!({ "address": addr.to_string(), "mode": config.mode, "sessions": sessions });
    Ok(report)
}

fn eval(a: &EvalArgs) -> Result<Report, CliError> {
    require_dir("bundle", &a.bundle)?;
    if let Some(t) = &a.test {
        require_dir("test", t)?;
    }
    if let Some(d) = &a.data {
        require_dir("data", d)?;
        if a.test.is_none() {
            return Err(CliError::BadArgs("--data (data-growth comparison) needs --test".into()));
        }
    }
    let mut report = Report::new("eval", a.seed);
    report.input("bundle", &a.bundle)?;
    if let Some(t) = &a.test {
        report.input("test", t)?;
    }
    if let Some(d) = &a.data {
        report.input("data", d)?;
    }
    let (mut advisor, tagger, schema) = load_bundle_dir(&a.bundle)?;
    if advisor.is_none() && tagger.is_none() {
        return Err(CliError::BadArgs(format!(
            "--bundle {}: no {ADVISOR_FILE} or {TAGGER_FILE}",
            a.bundle.display()
        )));
    }
    if let (Some(b), Some(t)) = (advisor.as_mut(), a.thresholds) {
        for e in b.ensembles.values_mut() {
            e.thresholds = t;
        }
    }
    let test = a.test.as_deref().map(|t| load_export(t, false)).transpose()?;
    let mut results = serde_json::Map::new();

    if let Some(bundle) = &advisor {
        let lines = match &test {
            None => {
                report.lines.push("advisor: scored on the stored holdout split".into());
                holdout_lines(bundle)?
            }
            Some(export) => {
                report.lines.push("advisor: scored on --test demonstrations".into());
                let demos = export
                    .demonstrations(&bundle.schema, &bundle.catalog)
                    .map_err(|e| CliError::Data(e.to_string()))?;
                let mut out = BTreeMap::new();
                for (ty, e) in &bundle.ensembles {
                    let ev = e
                        .evaluate_demonstrations(&demos, &bundle.schema)
                        .map_err(|e| CliError::Data(e.to_string()))?;
                    let best = ev.best_member_top2();
                    out.insert(
                        ty.to_string(),
                        TypeLine {
                            rows: ev.rows,
                            unseen: ev.unseen,
                            classes: e.classes.len(),
                            members: e.members.len(),
                            ensemble_top2: ev.ensemble_top2,
                            best_member_top2: best,
                            majority_baseline: ev.majority_baseline,
                            ensemble_at_least_best_member: ev.ensemble_top2 >= best - BEST_MEMBER_TOLERANCE,
                        },
                    );
                }
                out
            }
        };
        for (ty, line) in &lines {
            report.lines.push(line.text(ty));
        }
        results.insert("advisor".into(), serde_json::to_value(&lines).expect("lines serialize"));
    }

    if let Some(tagger) = &tagger {
        let schema = schema.as_ref().or(advisor.as_ref().map(|b| &b.schema));
        if let (Some(export), Some(schema)) = (&test, schema) {
            let gold = restrict_corpus(&export.corpus, schema);
            let f1 = f1_eval(tagger, &gold).map_err(|e| CliError::Data(e.to_string()))?;
            report.lines.push(format!(
                "tagger F1 {:.4} (precision {:.4}, recall {:.4}) on {} messages",
                f1.f1,
                f1.precision,
                f1.recall,
                gold.len()
            ));
            results.insert("tagger".into(), json!({ "rows": gold.len(), "f1": f1 }));

            if let Some(data) = &a.data {
                let train = restrict_corpus(&load_export(data, false)?.corpus, schema);
                let config = TaggerConfig {
                    seed: a.seed,
                    ..TaggerConfig::default()
                };
                let g = data_growth::<f64>(&train, &gold, schema, &config, derive_seed(a.seed, 2002))
                    .map_err(|e| CliError::Training(e.to_string()))?;
                report.lines.push(format!(
                    "tagger data growth: F1 with 50% of {} rows {:.4}, with 100% {:.4} (change {:+.4})",
                    g.train_rows,
                    g.half.f1,
                    g.full.f1,
                    g.improvement()
                ));
                results.insert(
                    "data_growth".into(),
                    json!({ "report": g, "improvement": g.improvement(), "full_at_least_half": g.improvement() >= 0.0 }),
                );
            }
        } else if test.is_some() {
            report.lines.push("tagger: no schema in the bundle, F1 not computed".into());
        } else {
            report.lines.push("tagger: pass --test to compute F1".into());
        }
    }
    report.results = Value::Object(results);
    Ok(report)
}
