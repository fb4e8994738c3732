//! `mathcept`: command-line driver over the store, pipeline and agreement modules.
//!
//! Machine-readable results go to stdout, diagnostics to stderr. Exit status
//! is 0 on success, 1 on an operational error (or an incomplete batch) and 2
//! on a usage error.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use mathcept::agreement::diff;
use mathcept::annotation::{AnnotationSet, Provenance, SetOptions};
use mathcept::concepts::RuleConfig;
use mathcept::corpus::{export as export_corpus, ingest, Format, FILE_GOLD};
use mathcept::gateway::{prompt_hash, BatchOptions, Cassette, Gateway, GatewayConfig, Mode};
use mathcept::pipeline::{baseline_run, normalize_lexicon, refilter, run_batch, ExtractOptions};
use mathcept::prompting::{build_prompt, PromptTemplate, TemplateVersion};
use mathcept::store::{write_atomic, AdjudicationDecision, Store};
use mathcept_service::{router, serve, ServiceConfig, ENV_STORE, ENV_TOKEN};

#[derive(Parser, Debug)]
#[command(
    name = "mathcept",
    version,
    about = "Extract, compare and adjudicate mathematical concepts"
)]
struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = ENV_STORE, default_value = "mathcept-store")]
    store: PathBuf,
    /// Rule config (TOML) for normalization and filtering.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parallel requests during extraction.
    #[arg(long, global = true, default_value_t = 4)]
    workers: usize,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a corpus file as a new dataset, or import annotations into one.
    Ingest(IngestArgs),
    /// Write annotations (or the sentences) of a dataset.
    Export(ExportArgs),
    /// Run prompted extraction over a dataset and store the result.
    Extract(ExtractArgs),
    /// Lexicon-lookup baseline annotator.
    Baseline(BaselineArgs),
    /// Re-normalize and post-filter an annotator's set into a new annotator.
    Filter(FilterArgs),
    /// Agreement report (Jaccard, full agreement) between annotators.
    Agree(AgreeArgs),
    /// Concepts found by only one of two annotators.
    Diff(DiffArgs),
    /// Show the disagreement queue of two annotators, applying decisions first.
    AdjudicateQueue(QueueArgs),
    /// Serve the HTTP API (and optionally a static front end).
    Serve(ServeArgs),
    /// Check that a cassette answers every prompt of a dataset.
    ReplayVerify(ReplayArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Corpus file (`-` for stdin).
    #[arg(required_unless_present = "annotations")]
    file: Option<PathBuf>,
    /// csv or jsonl; guessed from the extension when omitted.
    #[arg(long)]
    format: Option<Format>,
    /// Dataset name; defaults to the file stem.
    #[arg(long)]
    name: Option<String>,
    /// Keep only a random sample of this many sentences.
    #[arg(long)]
    sample: Option<usize>,
    /// Seed for `--sample`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Import annotation JSONL (as written by `export`) instead of a corpus.
    #[arg(long, conflicts_with_all = ["file", "name", "sample", "format"], requires = "dataset")]
    annotations: Option<PathBuf>,
    /// Target dataset for `--annotations`.
    #[arg(long)]
    dataset: Option<String>,
    /// Provenance recorded for imported annotations.
    #[arg(long, value_enum, default_value_t = ProvenanceArg::Human)]
    provenance: ProvenanceArg,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    dataset: String,
    /// Only this annotator (default: all, sorted).
    #[arg(long)]
    annotator: Option<String>,
    /// Apply adjudication decisions and include verdicts.
    #[arg(long)]
    decisions: bool,
    /// Export the sentences instead of annotations.
    #[arg(long, conflicts_with_all = ["annotator", "decisions"])]
    sentences: bool,
    /// Sentence export format.
    #[arg(long, default_value = "jsonl", requires = "sentences")]
    format: Format,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    dataset: String,
    /// Annotator id the results are stored under.
    #[arg(long)]
    annotator: String,
    /// Prompt template generation: v1, v2 or v3.
    #[arg(long, default_value = "v3")]
    template: TemplateVersion,
    /// Custom template text (must contain the placeholders).
    #[arg(long)]
    template_file: Option<PathBuf>,
    /// Example bank for a custom template.
    #[arg(long, requires = "template_file")]
    examples_file: Option<PathBuf>,
    /// live, replay or record.
    #[arg(long, default_value = "replay")]
    mode: Mode,
    /// Exchange cassette (needed for replay and record).
    #[arg(long)]
    cassette: Option<PathBuf>,
    /// Resume file; replies already fetched are reused.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also store contiguous sub-spans as candidates.
    #[arg(long)]
    expand_subspans: bool,
    /// Model id (overrides the environment).
    #[arg(long)]
    model: Option<String>,
    /// Requests per minute (0 disables the limit).
    #[arg(long)]
    rpm: Option<u32>,
    /// Retries after a network error, 429 or 5xx.
    #[arg(long)]
    max_retries: Option<u32>,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    dataset: String,
    /// Newline-delimited term list.
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long, default_value = "baseline")]
    annotator: String,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    annotator: String,
    /// Annotator id for the filtered set (default `<annotator>.filtered`).
    #[arg(long)]
    into: Option<String>,
}

#[derive(Args, Debug)]
struct SetFlags {
    /// Compare case-insensitively.
    #[arg(long)]
    case_fold: bool,
    /// Count candidate concepts too.
    #[arg(long)]
    include_candidates: bool,
    /// Ignore adjudication decisions.
    #[arg(long)]
    raw: bool,
}

impl SetFlags {
    fn options(&self) -> SetOptions {
        SetOptions {
            case_fold: self.case_fold,
            include_candidates: self.include_candidates,
        }
    }
}

#[derive(Args, Debug)]
struct AgreeArgs {
    #[arg(long)]
    dataset: String,
    /// Comma-separated annotator ids (default: every annotator).
    #[arg(long, value_delimiter = ',')]
    annotators: Vec<String>,
    /// Write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    sets: SetFlags,
}

#[derive(Args, Debug)]
struct DiffArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
    #[command(flatten)]
    sets: SetFlags,
}

#[derive(Args, Debug)]
struct QueueArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
    /// JSONL of adjudication decisions to record first.
    #[arg(long)]
    decisions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Listen address; port 0 picks a free port (the address is printed).
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Directory served at `/`.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    /// Shared bearer token.
    #[arg(long, env = ENV_TOKEN, hide_env_values = true)]
    token: Option<String>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value = "v3")]
    template: TemplateVersion,
    #[arg(long)]
    template_file: Option<PathBuf>,
    #[arg(long, requires = "template_file")]
    examples_file: Option<PathBuf>,
    #[arg(long)]
    cassette: PathBuf,
    /// Also check that replaying reproduces this stored annotator exactly.
    #[arg(long)]
    annotator: Option<String>,
    #[arg(long)]
    expand_subspans: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ProvenanceArg {
    Human,
    Llm,
    RuleBaseline,
    FileGold,
}

impl From<ProvenanceArg> for Provenance {
    fn from(p: ProvenanceArg) -> Self {
        match p {
            ProvenanceArg::Human => Provenance::Human,
            ProvenanceArg::Llm => Provenance::Llm,
            ProvenanceArg::RuleBaseline => Provenance::RuleBaseline,
            ProvenanceArg::FileGold => Provenance::FileGold,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = match &cli.config {
        Some(p) => RuleConfig::from_file(p)?,
        None => RuleConfig::default(),
    };
    let store = Store::open_with(&cli.store, config)
        .with_context(|| format!("opening store {}", cli.store.display()))?;
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&store, a),
        Command::Export(a) => cmd_export(&store, a),
        Command::Extract(a) => cmd_extract(&store, a, cli.workers),
        Command::Baseline(a) => cmd_baseline(&store, a),
        Command::Filter(a) => cmd_filter(&store, a),
        Command::Agree(a) => cmd_agree(&store, a),
        Command::Diff(a) => cmd_diff(&store, a),
        Command::AdjudicateQueue(a) => cmd_queue(&store, a),
        Command::Serve(a) => cmd_serve(store, a),
        Command::ReplayVerify(a) => cmd_replay_verify(&store, a),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    if path == Path::new("-") {
        let mut buf = Vec::new();
        io::stdin().read_to_end(&mut buf)?;
        return Ok(buf);
    }
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_ingest(store: &Store, a: IngestArgs) -> Result<ExitCode> {
    if let Some(path) = a.annotations {
        let dataset = a.dataset.expect("clap requires --dataset");
        let raw = String::from_utf8(read_input(&path)?).context("annotations are not UTF-8")?;
        let n = store.import_annotations(&dataset, &raw, a.provenance.into())?;
        print_json(&json!({"dataset": dataset, "entries": n}))?;
        return Ok(ExitCode::SUCCESS);
    }

    let path = a.file.expect("clap requires a file");
    let format = match a.format {
        Some(f) => f,
        None => path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .parse()
            .context("cannot tell the format from the file name; pass --format")?,
    };
    let name = match a.name {
        Some(n) => n,
        None => path
            .file_stem()
            .and_then(|s| s.to_str())
            .filter(|s| *s != "-")
            .context("pass --name for stdin input")?
            .to_string(),
    };
    let raw = read_input(&path)?;
    let ingested = ingest(&raw, format, &name)?;
    for w in &ingested.warnings {
        eprintln!("warning: line {}: {}", w.line, w.message);
    }
    let mut dataset = ingested.dataset;
    if let Some(n) = a.sample {
        dataset = dataset.sample(n, a.seed, &name);
    }
    let mut gold = ingested.gold;
    if let (Some(set), Some(_)) = (&gold, a.sample) {
        let mut kept = AnnotationSet::new(FILE_GOLD, &name, set.provenance);
        for s in &dataset.sentences {
            if let Some(c) = set.concepts(&s.id) {
                kept.insert(&s.id, c.to_vec());
            }
        }
        gold = Some(kept);
    }
    let summary = store.create_dataset(dataset)?;
    let gold_sentences = match &gold {
        Some(set) if !set.is_empty() => store.put_set(set)?,
        _ => 0,
    };
    print_json(&json!({
        "name": summary.name,
        "sentence_count": summary.sentence_count,
        "warnings": ingested.warnings.len(),
        "gold_sentences": gold_sentences,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn emit(bytes: &[u8], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => Ok(write_atomic(p, bytes)?),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn cmd_export(store: &Store, a: ExportArgs) -> Result<ExitCode> {
    let bytes = if a.sentences {
        export_corpus(&*store.dataset(&a.dataset)?, a.format)?
    } else {
        store
            .snapshot()
            .export(&a.dataset, a.annotator.as_deref(), a.decisions)?
    };
    emit(&bytes, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn load_template(
    version: TemplateVersion,
    file: Option<&Path>,
    examples: Option<&Path>,
) -> Result<PromptTemplate> {
    Ok(match file {
        Some(f) => PromptTemplate::from_files(version, f, examples)?,
        None => PromptTemplate::builtin(version),
    })
}

fn open_cassette(path: Option<&Path>) -> Result<Option<Cassette>> {
    path.map(|p| Cassette::open(p).with_context(|| format!("opening cassette {}", p.display())))
        .transpose()
}

fn cmd_extract(store: &Store, a: ExtractArgs, workers: usize) -> Result<ExitCode> {
    let dataset = store.dataset(&a.dataset)?;
    let template = load_template(
        a.template,
        a.template_file.as_deref(),
        a.examples_file.as_deref(),
    )?;
    let mut config = GatewayConfig {
        mode: a.mode,
        ..GatewayConfig::default()
    }
    .with_env();
    if let Some(m) = a.model {
        config.model_id = m;
    }
    if let Some(r) = a.rpm {
        config.requests_per_minute = r;
    }
    if let Some(r) = a.max_retries {
        config.max_retries = r;
    }
    let gateway = Gateway::new(config, open_cassette(a.cassette.as_deref())?)?;

    let total = dataset.len();
    let done = Arc::new(AtomicUsize::new(0));
    let progress = {
        let done = done.clone();
        Arc::new(move |n: usize| {
            done.store(n, Ordering::Relaxed);
            if n.is_multiple_of(50) || n == total {
                info!("{n}/{total} sentences");
            }
        })
    };
    let batch = BatchOptions {
        concurrency: workers.max(1),
        checkpoint: a.checkpoint,
        progress: Some(progress),
        ..BatchOptions::default()
    };
    let options = ExtractOptions {
        expand_subspans: a.expand_subspans,
    };
    let run = run_batch(
        &dataset,
        &template,
        &gateway,
        store.config(),
        &a.annotator,
        &batch,
        options,
    )?;
    for f in &run.failures {
        eprintln!("failed: sentence {}: {}", f.sentence_id, f.error);
    }
    for id in &run.unparseable {
        eprintln!("warning: sentence {id}: reply had no concept list");
    }
    let stored = if run.set.is_empty() {
        0
    } else {
        store.put_set(&run.set)?
    };
    print_json(&json!({
        "dataset": a.dataset,
        "annotator": a.annotator,
        "sentences": total,
        "stored": stored,
        "failed": run.failures.len(),
        "unparseable": run.unparseable.len(),
        "kept": run.report.kept_count,
        "removed": run.report.removed.len(),
        "removed_by_reason": run.report.removed_by_reason(),
    }))?;
    Ok(if run.is_complete() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_baseline(store: &Store, a: BaselineArgs) -> Result<ExitCode> {
    let dataset = store.dataset(&a.dataset)?;
    let text = fs::read_to_string(&a.lexicon)
        .with_context(|| format!("reading {}", a.lexicon.display()))?;
    let entries = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let lexicon = normalize_lexicon(entries, store.config());
    let set = baseline_run(&dataset, &lexicon, store.config(), &a.annotator);
    store.put_set(&set)?;
    print_json(&json!({
        "dataset": a.dataset,
        "annotator": a.annotator,
        "lexicon": lexicon.len(),
        "concepts": set.global_set(SetOptions::default()).len(),
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_filter(store: &Store, a: FilterArgs) -> Result<ExitCode> {
    let into = a
        .into
        .unwrap_or_else(|| format!("{}.filtered", a.annotator));
    if into == a.annotator {
        bail!("--into must name a different annotator");
    }
    let state = store.snapshot();
    let (set, report) = refilter(
        state.raw_set(&a.dataset, &a.annotator)?,
        store.config(),
        &into,
    );
    store.put_set(&set)?;
    print_json(&json!({
        "dataset": a.dataset,
        "annotator": into,
        "input": report.input_count,
        "kept": report.kept_count,
        "added": report.added.len(),
        "removed_by_reason": report.removed_by_reason(),
        "removed": report.removed,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_agree(store: &Store, a: AgreeArgs) -> Result<ExitCode> {
    let state = store.snapshot();
    let annotators = if a.annotators.is_empty() {
        state.annotators(&a.dataset)
    } else {
        a.annotators
    };
    let report = state.agreement(&a.dataset, &annotators, a.sets.options(), !a.sets.raw)?;
    if let Some(p) = &a.out {
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        write_atomic(p, &bytes)?;
    }
    if a.json {
        print_json(&report)?;
    } else {
        print!("{}", report.to_table());
    }
    Ok(ExitCode::SUCCESS)
}

fn global(
    store: &Store,
    dataset: &str,
    annotator: &str,
    sets: &SetFlags,
) -> Result<BTreeSet<String>> {
    let state = store.snapshot();
    let set = if sets.raw {
        state.raw_set(dataset, annotator)?.clone()
    } else {
        state.adjudicated_set(dataset, annotator)?
    };
    Ok(set.global_set(sets.options()))
}

fn cmd_diff(store: &Store, a: DiffArgs) -> Result<ExitCode> {
    let left = global(store, &a.dataset, &a.a, &a.sets)?;
    let right = global(store, &a.dataset, &a.b, &a.sets)?;
    let d = diff(&left, &right);
    print_json(&json!({"a": a.a, "b": a.b, "diff": d}))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_queue(store: &Store, a: QueueArgs) -> Result<ExitCode> {
    if let Some(path) = &a.decisions {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut recorded = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let decision: AdjudicationDecision = serde_json::from_str(line)
                .with_context(|| format!("{}:{}: bad decision", path.display(), i + 1))?;
            store
                .submit_adjudication(decision)
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
            recorded += 1;
        }
        info!("recorded {recorded} decisions");
    }
    let queue = store
        .snapshot()
        .disagreement_queue(&a.dataset, &a.a, &a.b)?;
    print_json(&queue)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(store: Store, a: ServeArgs) -> Result<ExitCode> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        let app = router(
            Arc::new(store),
            ServiceConfig {
                token: a.token,
                static_dir: a.static_dir,
            },
        );
        serve(listener, app).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_replay_verify(store: &Store, a: ReplayArgs) -> Result<ExitCode> {
    let dataset = store.dataset(&a.dataset)?;
    let template = load_template(
        a.template,
        a.template_file.as_deref(),
        a.examples_file.as_deref(),
    )?;
    let cassette = Cassette::open(&a.cassette)
        .with_context(|| format!("opening cassette {}", a.cassette.display()))?;
    let missing: Vec<&str> = dataset
        .sentences
        .iter()
        .filter(|s| {
            cassette
                .get(&prompt_hash(&build_prompt(s, &template)))
                .is_none()
        })
        .map(|s| s.id.as_str())
        .collect();

    let mut matches = None;
    if let (Some(annotator), true) = (&a.annotator, missing.is_empty()) {
        let gateway = Gateway::new(GatewayConfig::default(), Some(cassette))?;
        let options = ExtractOptions {
            expand_subspans: a.expand_subspans,
        };
        let run = run_batch(
            &dataset,
            &template,
            &gateway,
            store.config(),
            annotator,
            &BatchOptions::default(),
            options,
        )?;
        let stored = store.snapshot().raw_set(&a.dataset, annotator)?.to_jsonl();
        matches = Some(run.set.to_jsonl() == stored);
    }
    print_json(&json!({
        "dataset": a.dataset,
        "sentences": dataset.len(),
        "missing": missing,
        "reproduces": matches,
    }))?;
    Ok(if missing.is_empty() && matches != Some(false) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
