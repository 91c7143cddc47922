//! End-to-end evaluation: prompt, query, parse, localize, score, report.
//!
//! The per-QA artifact file is the source of truth; report rows are derived
//! from it and can be recomputed from it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::answer_parser::{parse_prediction, ParseStatus, Prediction};
use crate::dataset::{self, filter_single_box, resolve_image, Corpus, QaRecord, Split, Strictness};
use crate::error::{Error, Result};
use crate::geometry::{iou, mean_iou, to_prompt_box, NormBox};
use crate::ocr_locator::{locate_with, MatchMode};
use crate::prompting::{Exemplar, PromptSpec, Strategy};
use crate::regressor::io::{read_checkpoint, read_embeddings, EmbeddingFile};
use crate::regressor::{predict, Checkpoint};
use crate::text_metrics::{anls_corpus, anls_single, AnlsConfig};
use crate::vlm_client::{sha256_hex, ModelEndpoint, ReplaySource, ResponseSource, TranscriptStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Localizer {
    /// The box the model itself returned.
    #[default]
    ModelBox,
    /// The embedding regressor.
    Docexplainer,
    /// OCR search for the predicted answer text.
    OcrBaseline,
}

impl Localizer {
    fn suffix(&self) -> &'static str {
        match self {
            Localizer::ModelBox => "",
            Localizer::Docexplainer => " + D.E.",
            Localizer::OcrBaseline => " + Naive OCR",
        }
    }
}

impl std::str::FromStr for Localizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model_box" => Ok(Localizer::ModelBox),
            "docexplainer" => Ok(Localizer::Docexplainer),
            "ocr_baseline" => Ok(Localizer::OcrBaseline),
            other => Err(Error::config(format!("unknown localizer {other:?}"))),
        }
    }
}

fn default_fractions() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub endpoint: ModelEndpoint,
    /// Answer from this transcript store instead of the network.
    #[serde(default)]
    pub replay: Option<PathBuf>,
    /// Append live responses to this transcript store.
    #[serde(default)]
    pub record: Option<PathBuf>,
    #[serde(default)]
    pub prompt: PromptSpec,
    #[serde(default)]
    pub localizer: Localizer,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub anls: AnlsConfig,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Only evaluate QAs in this split; all QAs when absent.
    #[serde(default)]
    pub eval_split: Option<Split>,
    /// Used when the corpus has no split hints (exemplar pool, `eval_split`).
    #[serde(default = "default_fractions")]
    pub split_fractions: (f64, f64, f64),
    /// Report label; defaults to the endpoint name plus a localizer suffix.
    #[serde(default)]
    pub architecture: Option<String>,
    #[serde(default)]
    pub lenient_boxes: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.endpoint.validate()?;
        self.anls.validate()?;
        if self.localizer == Localizer::Docexplainer && (self.checkpoint.is_none() || self.embeddings.is_none()) {
            return Err(Error::config("docexplainer localizer needs both checkpoint and embeddings paths"));
        }
        if self.prompt.strategy == Strategy::Cot && self.prompt.exemplars.is_empty() && self.prompt.exemplar_count == 0 {
            return Err(Error::config("cot prompting needs exemplars or exemplar_count >= 1"));
        }
        if self.prompt.strategy == Strategy::Anchors && self.prompt.anchor_budget == 0 {
            return Err(Error::config("anchors prompting needs anchor_budget >= 1"));
        }
        Ok(())
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.out_dir);
        for p in [&mut self.replay, &mut self.record, &mut self.checkpoint, &mut self.embeddings]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn architecture_label(&self) -> String {
        self.architecture
            .clone()
            .unwrap_or_else(|| format!("{}{}", self.endpoint.name, self.localizer.suffix()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub architecture: String,
    pub prompting: String,
    pub anls: f64,
    pub mean_iou: f64,
    pub n_qas: usize,
    pub n_parse_failures: usize,
    pub n_located: usize,
}

/// Everything recorded about one evaluated QA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaArtifact {
    pub qa_id: String,
    pub doc_id: String,
    pub page: usize,
    pub question: String,
    pub answer: String,
    pub prompt_sha256: String,
    pub raw_response: String,
    pub prediction: Prediction,
    pub localizer: Localizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_mode: Option<MatchMode>,
    #[serde(rename = "box")]
    pub bbox: Option<NormBox>,
    pub gt_box: NormBox,
    pub anls: f64,
    pub iou: f64,
}

pub struct RunOutput {
    pub row: ReportRow,
    pub artifacts: Vec<QaArtifact>,
}

struct Regressor {
    checkpoint: Checkpoint,
    embeddings: EmbeddingFile,
}

fn load_regressor(cfg: &RunConfig) -> Result<Option<Regressor>> {
    if cfg.localizer != Localizer::Docexplainer {
        return Ok(None);
    }
    let checkpoint = read_checkpoint(cfg.checkpoint.as_deref().expect("validated"))?;
    let embeddings = read_embeddings(cfg.embeddings.as_deref().expect("validated"))?;
    let d = checkpoint.dims();
    if (d.visual, d.text) != (embeddings.visual_dim, embeddings.text_dim) {
        return Err(Error::config(format!(
            "checkpoint expects embedding dims ({}, {}) but embedding file has ({}, {})",
            d.visual, d.text, embeddings.visual_dim, embeddings.text_dim
        )));
    }
    Ok(Some(Regressor { checkpoint, embeddings }))
}

/// Train-split QAs eligible as exemplars, in qa_id order.
fn exemplar_pool(corpus: &Corpus, cfg: &RunConfig) -> Result<Vec<QaRecord>> {
    let splits = dataset::split(corpus, cfg.seed, cfg.split_fractions)?;
    let mut pool: Vec<QaRecord> = splits
        .train
        .qas
        .into_iter()
        .filter(|q| !q.answer_boxes.is_empty())
        .collect();
    pool.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));
    Ok(pool)
}

fn exemplars_for(qa: &QaRecord, pool: &[QaRecord], cfg: &RunConfig) -> Vec<Exemplar> {
    pool.iter()
        .filter(|p| p.doc_id != qa.doc_id)
        .take(cfg.prompt.exemplar_count)
        .map(|p| Exemplar {
            question: p.question_text(cfg.prompt.question_field).to_string(),
            answer: p.answer_value.clone(),
            position: to_prompt_box(&p.answer_boxes[0].bbox),
        })
        .collect()
}

/// What the model sees for one QA.
pub struct PreparedQuery {
    pub prompt: String,
    pub image: Vec<u8>,
    pub tokens: Vec<crate::dataset::OcrToken>,
}

fn prepare(qa: &QaRecord, corpus: &Corpus, cfg: &RunConfig, pool: &[QaRecord]) -> Result<PreparedQuery> {
    let doc = corpus
        .documents
        .get(&qa.doc_id)
        .ok_or_else(|| Error::validation(format!("qa_id {} references unknown doc_id {}", qa.qa_id, qa.doc_id)))?;
    let gt = qa
        .answer_boxes
        .first()
        .ok_or_else(|| Error::validation(format!("qa_id {} has no answer box", qa.qa_id)))?;
    let page = &doc.pages[gt.page];
    let image_path = resolve_image(&cfg.corpus, &page.image);
    let image = fs::read(&image_path).map_err(|e| Error::io(&image_path, e))?;
    let tokens = doc.page_tokens(gt.page);

    let mut spec = cfg.prompt.clone();
    if spec.strategy == Strategy::Cot && spec.exemplars.is_empty() {
        spec.exemplars = exemplars_for(qa, pool, cfg);
    }
    let question = qa.question_text(cfg.prompt.question_field);
    let prompt = spec.render(question, &tokens).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("qa_id {}: {m}", qa.qa_id)),
        e => e,
    })?;
    Ok(PreparedQuery { prompt, image, tokens })
}

fn load_for_eval(cfg: &RunConfig) -> Result<Corpus> {
    let strictness = if cfg.lenient_boxes {
        Strictness::Lenient
    } else {
        Strictness::Strict
    };
    Ok(filter_single_box(&dataset::load_corpus(&cfg.corpus, strictness)?.corpus))
}

fn pool_for(corpus: &Corpus, cfg: &RunConfig) -> Result<Vec<QaRecord>> {
    if cfg.prompt.strategy == Strategy::Cot && cfg.prompt.exemplars.is_empty() {
        exemplar_pool(corpus, cfg)
    } else {
        Ok(Vec::new())
    }
}

/// The exact prompt and page image `run_eval` would send for `qa_id`.
pub fn prepare_query(cfg: &RunConfig, qa_id: &str) -> Result<PreparedQuery> {
    cfg.validate()?;
    let corpus = load_for_eval(cfg)?;
    let qa = corpus
        .qas
        .iter()
        .find(|q| q.qa_id == qa_id)
        .ok_or_else(|| Error::validation(format!("no single-box QA with qa_id {qa_id}")))?;
    prepare(qa, &corpus, cfg, &pool_for(&corpus, cfg)?)
}

/// Asks `source` about one QA and returns the raw response.
pub fn query_one(cfg: &RunConfig, qa_id: &str, source: &dyn ResponseSource) -> Result<String> {
    let q = prepare_query(cfg, qa_id)?;
    source.respond(&cfg.endpoint, &q.prompt, &q.image).map_err(|e| match e {
        Error::ReplayMiss { key, .. } => Error::ReplayMiss {
            key,
            qa_id: Some(qa_id.to_string()),
        },
        e => e,
    })
}

fn evaluate_one(
    qa: &QaRecord,
    corpus: &Corpus,
    cfg: &RunConfig,
    pool: &[QaRecord],
    source: &dyn ResponseSource,
    regressor: Option<&Regressor>,
) -> Result<QaArtifact> {
    let PreparedQuery { prompt, image, tokens } = prepare(qa, corpus, cfg, pool)?;
    let gt = qa.answer_boxes[0];
    let question = qa.question_text(cfg.prompt.question_field);

    let raw = source
        .respond(&cfg.endpoint, &prompt, &image)
        .map_err(|e| match e {
            Error::ReplayMiss { key, .. } => Error::ReplayMiss {
                key,
                qa_id: Some(qa.qa_id.clone()),
            },
            e => e,
        })?;
    let prediction = parse_prediction(&raw);
    let answered = prediction.status != ParseStatus::Failed;

    let (bbox, match_mode) = match cfg.localizer {
        Localizer::ModelBox => (prediction.bbox, None),
        Localizer::OcrBaseline => {
            let m = locate_with(&prediction.content, &tokens, &cfg.anls.normalize);
            (m.bbox, Some(m.mode))
        }
        Localizer::Docexplainer => {
            let r = regressor.expect("loaded for docexplainer");
            let rec = r.embeddings.get(&qa.qa_id).ok_or_else(|| {
                Error::config(format!("embedding file has no record for qa_id {}", qa.qa_id))
            })?;
            (Some(predict(&r.checkpoint, rec)?), None)
        }
    };

    let anls = if answered {
        anls_single(&prediction.content, &qa.answer_value, &cfg.anls)
    } else {
        0.0
    };
    let iou_score = bbox.map_or(0.0, |b| iou(&b, &gt.bbox));

    Ok(QaArtifact {
        qa_id: qa.qa_id.clone(),
        doc_id: qa.doc_id.clone(),
        page: gt.page,
        question: question.to_string(),
        answer: qa.answer_value.clone(),
        prompt_sha256: sha256_hex(prompt.as_bytes()),
        raw_response: raw,
        prediction,
        localizer: cfg.localizer,
        match_mode,
        bbox,
        gt_box: gt.bbox,
        anls,
        iou: iou_score,
    })
}

/// Aggregates artifacts into a report row (the artifacts must already be in
/// qa_id order for bit-stable sums).
pub fn summarize(artifacts: &[QaArtifact], architecture: &str, prompting: &str, anls: &AnlsConfig) -> ReportRow {
    let anls_score = anls_corpus(
        artifacts.iter().map(|a| {
            let answered = a.prediction.status != ParseStatus::Failed;
            (answered.then_some(a.prediction.content.as_str()), a.answer.as_str())
        }),
        anls,
    );
    let miou = mean_iou(artifacts.iter().map(|a| (a.bbox.as_ref(), &a.gt_box)));
    ReportRow {
        architecture: architecture.to_string(),
        prompting: prompting.to_string(),
        anls: anls_score,
        mean_iou: miou,
        n_qas: artifacts.len(),
        n_parse_failures: artifacts
            .iter()
            .filter(|a| a.prediction.status == ParseStatus::Failed)
            .count(),
        n_located: artifacts.iter().filter(|a| a.bbox.is_some()).count(),
    }
}

/// Runs an evaluation against an explicit response source.
pub fn run_eval_with(cfg: &RunConfig, source: &dyn ResponseSource) -> Result<RunOutput> {
    cfg.validate()?;
    let corpus = load_for_eval(cfg)?;
    let regressor = load_regressor(cfg)?;
    let pool = pool_for(&corpus, cfg)?;

    let mut qas: Vec<&QaRecord> = match cfg.eval_split {
        None => corpus.qas.iter().collect(),
        Some(s) => {
            let splits = dataset::split(&corpus, cfg.seed, cfg.split_fractions)?;
            let keep: std::collections::HashSet<String> = match s {
                Split::Train => splits.train.qas,
                Split::Val => splits.val.qas,
                Split::Test => splits.test.qas,
            }
            .into_iter()
            .map(|q| q.qa_id)
            .collect();
            corpus.qas.iter().filter(|q| keep.contains(&q.qa_id)).collect()
        }
    };
    qas.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));

    let workers = cfg.endpoint.max_concurrency.clamp(1, qas.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Vec<(usize, Result<QaArtifact>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(qa) = qas.get(i) else { break };
                        let r = evaluate_one(qa, &corpus, cfg, &pool, source, regressor.as_ref());
                        let failed = r.is_err();
                        done.push((i, r));
                        if failed {
                            // stop handing out work; other workers drain naturally
                            next.store(usize::MAX / 2, Ordering::Relaxed);
                            break;
                        }
                    }
                    done
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });

    let mut ordered: BTreeMap<usize, QaArtifact> = BTreeMap::new();
    let mut first_err: Option<(usize, Error)> = None;
    for (i, r) in results {
        match r {
            Ok(a) => {
                ordered.insert(i, a);
            }
            Err(e) => {
                if first_err.as_ref().is_none_or(|(j, _)| i < *j) {
                    first_err = Some((i, e));
                }
            }
        }
    }
    if let Some((_, e)) = first_err {
        return Err(e);
    }
    let artifacts: Vec<QaArtifact> = ordered.into_values().collect();
    let row = summarize(&artifacts, &cfg.architecture_label(), cfg.prompt.strategy.label(), &cfg.anls);
    Ok(RunOutput { row, artifacts })
}

/// Runs an evaluation with the source the config names: a replay store, or
/// the live endpoint.
pub fn run_eval(cfg: &RunConfig) -> Result<RunOutput> {
    match &cfg.replay {
        Some(path) => {
            let source = ReplaySource::new(TranscriptStore::load(path)?);
            run_eval_with(cfg, &source)
        }
        None => run_live(cfg),
    }
}

#[cfg(feature = "http")]
fn run_live(cfg: &RunConfig) -> Result<RunOutput> {
    let mut client = crate::vlm_client::http::VlmClient::new();
    if let Some(rec) = &cfg.record {
        client = client.recording_to(rec)?;
    }
    run_eval_with(cfg, &client)
}

#[cfg(not(feature = "http"))]
fn run_live(_cfg: &RunConfig) -> Result<RunOutput> {
    Err(Error::config("built without the `http` feature; use a replay store"))
}

pub fn artifacts_jsonl(artifacts: &[QaArtifact]) -> String {
    let mut out = String::new();
    for a in artifacts {
        out.push_str(&serde_json::to_string(a).expect("artifact serializes"));
        out.push('\n');
    }
    out
}

pub fn read_artifacts(path: &Path) -> Result<Vec<QaArtifact>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes `artifacts.jsonl` and `report.{csv,json,md}` into `dir`.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("artifacts.jsonl", artifacts_jsonl(&out.artifacts))?;
    write_reports(dir, std::slice::from_ref(&out.row))
}

pub fn write_reports(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, fmt) in [
        ("report.csv", ReportFormat::Csv),
        ("report.json", ReportFormat::Json),
        ("report.md", ReportFormat::Markdown),
    ] {
        let p = dir.join(name);
        fs::write(&p, render_report(rows, fmt)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(Error::config(format!("unknown report format {other:?}"))),
        }
    }
}

/// `.691` style: three decimals, no leading zero below 1.
fn metric(v: f64) -> String {
    let s = format!("{v:.3}");
    s.strip_prefix('0').map(str::to_string).unwrap_or(s)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Best and second-best distinct values of a column.
fn podium(values: impl Iterator<Item = f64>) -> (Option<f64>, Option<f64>) {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v.dedup();
    (v.first().copied(), v.get(1).copied())
}

fn decorate(v: f64, podium: (Option<f64>, Option<f64>)) -> String {
    let m = metric(v);
    if Some(v) == podium.0 {
        format!("**{m}**")
    } else if Some(v) == podium.1 {
        format!("<u>{m}</u>")
    } else {
        m
    }
}

pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("architecture,prompting,anls,mean_iou,n_qas,n_parse_failures,n_located\n");
            for r in rows {
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{:.6},{},{},{}",
                    csv_field(&r.architecture),
                    csv_field(&r.prompting),
                    r.anls,
                    r.mean_iou,
                    r.n_qas,
                    r.n_parse_failures,
                    r.n_located
                );
            }
            out
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
            s.push('\n');
            s
        }
        ReportFormat::Markdown => {
            let anls_p = podium(rows.iter().map(|r| r.anls));
            let iou_p = podium(rows.iter().map(|r| r.mean_iou));
            let cells: Vec<[String; 4]> = rows
                .iter()
                .map(|r| {
                    [
                        r.architecture.clone(),
                        r.prompting.clone(),
                        decorate(r.anls, anls_p),
                        decorate(r.mean_iou, iou_p),
                    ]
                })
                .collect();
            let header = ["Architecture", "Prompting", "ANLS", "MeanIoU"];
            let widths: Vec<usize> = (0..4)
                .map(|c| {
                    cells
                        .iter()
                        .map(|row| row[c].chars().count())
                        .chain([header[c].len(), 3])
                        .max()
                        .unwrap_or(3)
                })
                .collect();
            let line = |vals: [&str; 4]| {
                let mut s = String::from("|");
                for (v, w) in vals.iter().zip(&widths) {
                    let _ = write!(s, " {v:<w$} |");
                }
                s.push('\n');
                s
            };
            let mut out = line(header);
            out.push('|');
            for w in &widths {
                out.push_str(&format!(" {} |", "-".repeat(*w)));
            }
            out.push('\n');
            for c in &cells {
                out.push_str(&line([&c[0], &c[1], &c[2], &c[3]]));
            }
            out
        }
    }
}
