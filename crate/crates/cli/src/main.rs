//! `docground` command line.
//!
//! Exit codes: 0 ok, 1 config error, 2 data/validation error, 3 transport
//! error, 4 replay miss.

use std::collections::HashSet;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use docground::answer_parser::parse_prediction;
use docground::dataset::{self, load_corpus, Split, Strictness};
use docground::harness::{self, render_report, Localizer, ReportFormat, ReportRow, RunConfig};
use docground::ocr_locator::locate;
use docground::prompting::{build_zero_shot, Strategy};
use docground::regressor::io::{read_checkpoint, read_embeddings, write_checkpoint};
use docground::regressor::{predict, train, TrainConfig};
use docground::vlm_client::{ReplaySource, TranscriptStore};

#[derive(Parser)]
#[command(name = "docground", version, about = "Spatial grounding toolkit for document VQA")]
struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus file and summarize it.
    Ingest(IngestArgs),
    /// Print the prompt for one QA.
    Prompt(PromptArgs),
    /// Send one QA to the endpoint (or replay store) and print the raw response.
    Query(QueryArgs),
    /// Parse a raw model response into a prediction.
    Parse(ParseArgs),
    /// Find an answer string among a document's OCR tokens.
    Locate(LocateArgs),
    /// Train the box regressor on an embedding file.
    Train(TrainArgs),
    /// Predict boxes for every record of an embedding file.
    Predict(PredictArgs),
    /// Run an evaluation and write artifacts and reports.
    Evaluate(EvaluateArgs),
    /// Combine finished runs into one report table.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    corpus: PathBuf,
    /// Clamp out-of-range boxes with a warning instead of rejecting them.
    #[arg(long)]
    lenient: bool,
    /// Keep only QAs with exactly one answer box.
    #[arg(long)]
    single_box: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// train,val,test fractions for documents without split hints.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_fractions)]
    fractions: (f64, f64, f64),
    /// Write the validated corpus here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Run configuration plus the overrides shared by several subcommands.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// zero_shot, cot or anchors.
    #[arg(long, value_parser = serde_enum::<Strategy>)]
    strategy: Option<Strategy>,
    /// model_box, docexplainer or ocr_baseline.
    #[arg(long, value_parser = serde_enum::<Localizer>)]
    localizer: Option<Localizer>,
    /// Answer from this transcript store.
    #[arg(long, conflicts_with = "live")]
    replay: Option<PathBuf>,
    /// Query the live endpoint even if the config names a replay store.
    #[arg(long)]
    live: bool,
    /// Append live responses to this transcript store.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PromptArgs {
    #[command(flatten)]
    run: Option<RunArgs>,
    #[arg(long, requires = "config")]
    qa_id: Option<String>,
    /// Build a zero-shot prompt for this question without a config.
    #[arg(long, conflicts_with = "config")]
    question: Option<String>,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    qa_id: String,
}

#[derive(Args)]
struct ParseArgs {
    /// File holding the raw response; stdin when absent.
    input: Option<PathBuf>,
}

#[derive(Args)]
struct LocateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    doc_id: String,
    #[arg(long)]
    answer: String,
    /// Only search this page.
    #[arg(long)]
    page: Option<usize>,
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TrainConfig JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split records by this corpus's documents; train on train, select on val.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_fractions)]
    fractions: (f64, f64, f64),
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-epoch loss and MeanIoU here as JSON.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// JSON lines output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only evaluate this split (train, val, test).
    #[arg(long)]
    eval_split: Option<Split>,
    /// Row label in the report.
    #[arg(long)]
    architecture: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, each holding a report.json.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "md", value_parser = |s: &str| s.parse::<ReportFormat>().map_err(|e| e.to_string()))]
    format: ReportFormat,
    /// Also write report.{csv,json,md} here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64), String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err("expected three comma-separated fractions".into()),
    }
}

fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| docground::Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| docground::Error::config(format!("{}: {e}", path.display())))
        .map_err(Into::into)
}

/// Like [`read_json`], but an unreadable file is a configuration problem.
fn read_config<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    if let Err(e) = fs::metadata(path) {
        bail!(docground::Error::config(format!("cannot read config {}: {e}", path.display())));
    }
    read_json(path)
}

fn print_json<T: Serialize>(v: &T) -> anyhow::Result<()> {
    emit(&(serde_json::to_string_pretty(v)? + "\n"))?;
    Ok(())
}

impl RunArgs {
    /// Config file values, with paths relative to the file, then flags.
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg: RunConfig = read_config(&self.config)?;
        cfg.resolve_paths(self.config.parent().unwrap_or(Path::new(".")));
        if let Some(s) = self.strategy {
            cfg.prompt.strategy = s;
        }
        if let Some(l) = self.localizer {
            cfg.localizer = l;
        }
        if self.live {
            cfg.replay = None;
        }
        if let Some(p) = &self.replay {
            cfg.replay = Some(p.clone());
        }
        if let Some(p) = &self.record {
            cfg.record = Some(p.clone());
        }
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
        if let Some(p) = &self.embeddings {
            cfg.embeddings = Some(p.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn strictness(lenient: bool) -> Strictness {
    if lenient {
        Strictness::Lenient
    } else {
        Strictness::Strict
    }
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    let loaded = load_corpus(&a.corpus, strictness(a.lenient))?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    let single = dataset::filter_single_box(&loaded.corpus);
    let corpus = if a.single_box { single.clone() } else { loaded.corpus.clone() };
    let splits = dataset::split(&corpus, a.seed, a.fractions)?;
    if let Some(out) = &a.out {
        dataset::write_corpus(&corpus, out)?;
    }
    print_json(&serde_json::json!({
        "documents": corpus.documents.len(),
        "qas": corpus.qas.len(),
        "single_box_qas": single.qas.len(),
        "warnings": loaded.warnings.len(),
        "splits": {
            "train": splits.train.qas.len(),
            "val": splits.val.qas.len(),
            "test": splits.test.qas.len(),
        },
    }))
}

fn prompt(a: PromptArgs) -> anyhow::Result<()> {
    let text = match (&a.run, &a.qa_id, &a.question) {
        (_, _, Some(q)) => build_zero_shot(q)?,
        (Some(run), Some(id), None) => harness::prepare_query(&run.load()?, id)?.prompt,
        _ => bail!(docground::Error::config("give --config with --qa-id, or --question")),
    };
    emit(&format!("{text}\n"))?;
    Ok(())
}

fn source_for(cfg: &RunConfig) -> anyhow::Result<Box<dyn docground::vlm_client::ResponseSource>> {
    if let Some(store) = &cfg.replay {
        return Ok(Box::new(ReplaySource::new(TranscriptStore::load(store)?)));
    }
    let mut client = docground::vlm_client::http::VlmClient::new();
    if let Some(rec) = &cfg.record {
        client = client.recording_to(rec)?;
    }
    Ok(Box::new(client))
}

fn query(a: QueryArgs) -> anyhow::Result<()> {
    let cfg = a.run.load()?;
    let source = source_for(&cfg)?;
    emit(&(harness::query_one(&cfg, &a.qa_id, source.as_ref())? + "\n"))?;
    Ok(())
}

fn parse(a: ParseArgs) -> anyhow::Result<()> {
    let raw = match &a.input {
        Some(p) => fs::read_to_string(p).map_err(|e| docground::Error::io(p, e))?,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
            s
        }
    };
    print_json(&parse_prediction(&raw))
}

fn locate_cmd(a: LocateArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus, strictness(a.lenient))?.corpus;
    let doc = corpus
        .documents
        .get(&a.doc_id)
        .ok_or_else(|| docground::Error::validation(format!("unknown doc_id {}", a.doc_id)))?;
    let tokens = match a.page {
        Some(p) => doc.page_tokens(p),
        None => doc.tokens.clone(),
    };
    print_json(&locate(&a.answer, &tokens))
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { cfg.$f = v; } )* };
    }
    set!(epochs, learning_rate, batch_size, latent, hidden, seed);

    let file = read_embeddings(&a.embeddings)?;
    let (with_target, without): (Vec<_>, Vec<_>) = file.records.into_iter().partition(|r| r.target.is_some());
    if !without.is_empty() {
        log::warn!("skipping {} records without a target box", without.len());
    }
    let (train_set, val_set) = match &a.corpus {
        None => (with_target, Vec::new()),
        Some(path) => {
            let corpus = load_corpus(path, Strictness::Strict)?.corpus;
            let splits = dataset::split(&corpus, cfg.seed, a.fractions)?;
            let ids = |qas: &[docground::dataset::QaRecord]| qas.iter().map(|q| q.qa_id.clone()).collect::<HashSet<_>>();
            let (tr, va) = (ids(&splits.train.qas), ids(&splits.val.qas));
            let train_set: Vec<_> = with_target.iter().filter(|r| tr.contains(&r.qa_id)).cloned().collect();
            let val_set: Vec<_> = with_target.iter().filter(|r| va.contains(&r.qa_id)).cloned().collect();
            (train_set, val_set)
        }
    };
    log::info!("training on {} records, validating on {}", train_set.len(), val_set.len());
    let outcome = train(&train_set, &val_set, &cfg)?;
    write_checkpoint(&a.out, &outcome.checkpoint)?;
    if let Some(h) = &a.history {
        fs::write(h, serde_json::to_string_pretty(&outcome.history)? + "\n")
            .map_err(|e| docground::Error::io(h, e))?;
    }
    let c = &outcome.checkpoint;
    print_json(&serde_json::json!({
        "checkpoint": a.out,
        "epoch": c.epoch,
        "val_mean_iou": c.val_mean_iou,
        "train_loss": c.train_loss,
        "train_records": train_set.len(),
        "val_records": val_set.len(),
    }))
}

fn predict_cmd(a: PredictArgs) -> anyhow::Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let file = read_embeddings(&a.embeddings)?;
    let mut out = String::new();
    for r in &file.records {
        let b = predict(&ckpt, r)?;
        out.push_str(&serde_json::to_string(&serde_json::json!({"qa_id": r.qa_id, "box": b}))?);
        out.push('\n');
    }
    match &a.out {
        Some(p) => fs::write(p, out).map_err(|e| docground::Error::io(p, e))?,
        None => emit(&out)?,
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let mut cfg = a.run.load()?;
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    if let Some(s) = a.eval_split {
        cfg.eval_split = Some(s);
    }
    if let Some(arch) = a.architecture {
        cfg.architecture = Some(arch);
    }
    let source = source_for(&cfg)?;
    let out = harness::run_eval_with(&cfg, source.as_ref())?;
    harness::write_run(&cfg.out_dir, &out)?;
    emit(&render_report(std::slice::from_ref(&out.row), ReportFormat::Markdown))?;
    log::info!("wrote {}", cfg.out_dir.display());
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for dir in &a.runs {
        let path = if dir.is_dir() { dir.join("report.json") } else { dir.clone() };
        let r: Vec<ReportRow> = read_json(&path)?;
        rows.extend(r);
    }
    if let Some(out) = &a.out {
        harness::write_reports(out, &rows)?;
    }
    emit(&render_report(&rows, a.format))?;
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<docground::Error>())
        .map_or(1, |d| d.exit_code() as u8)
}

/// Writes to stdout; a closed pipe comes back as an error instead of a panic.
fn emit(s: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(s.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Prompt(a) => prompt(a),
        Command::Query(a) => query(a),
        Command::Parse(a) => parse(a),
        Command::Locate(a) => locate_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn fractions_parse() {
        assert_eq!(parse_fractions("0.7, 0.2,0.1").unwrap(), (0.7, 0.2, 0.1));
        assert!(parse_fractions("0.5,0.5").is_err());
        assert!(parse_fractions("a,b,c").is_err());
    }

    #[test]
    fn enums_parse_from_wire_names() {
        assert_eq!(serde_enum::<Localizer>("ocr_baseline").unwrap(), Localizer::OcrBaseline);
        assert!(serde_enum::<Localizer>("nope").is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let e: anyhow::Error = docground::Error::validation("x").into();
        assert_eq!(exit_code(&e), 2);
        assert_eq!(exit_code(&anyhow!("plain")), 1);
        assert_eq!(exit_code(&e.context("while ingesting")), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
