//! Regenerates the golden replay fixture.
//!
//! ```text
//! cargo run -p docground --example make_golden -- fixtures/golden
//! ```
//!
//! Writes a 25-QA corpus with placeholder page images, a transcript store of
//! scripted model responses, an EMB1 file, a trained checkpoint, `run.json`,
//! and the expected outputs of all three localizers under `expected/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use docground::dataset::{write_corpus, Corpus};
use docground::geometry::{to_prompt_box, PromptBox};
use docground::harness::{render_report, run_eval, run_eval_with, write_run, Localizer, ReportFormat, RunConfig};
use docground::regressor::io::{write_checkpoint, write_embeddings, EmbeddingFile};
use docground::regressor::{train, EmbeddingRecord, TrainConfig};
use docground::synth::planted_corpus;
use docground::vlm_client::{transcript_key, ModelEndpoint, ResponseSource, Transcript, TranscriptStore};

const N_QAS: usize = 25;
const ENDPOINT: &str = "fixture-vlm";

/// Answers by looking up which known question appears in the prompt, and
/// records every exchange.
struct Scripted {
    by_question: BTreeMap<String, String>,
    log: Mutex<Vec<Transcript>>,
}

impl ResponseSource for Scripted {
    fn respond(&self, ep: &ModelEndpoint, prompt: &str, image: &[u8]) -> docground::Result<String> {
        let (_, response) = self
            .by_question
            .iter()
            .find(|(q, _)| prompt.contains(&format!("Question: {q}\n")))
            .expect("scripted question");
        self.log.lock().unwrap().push(Transcript {
            key: transcript_key(&ep.name, prompt, image),
            endpoint: ep.name.clone(),
            response: response.clone(),
            latency_ms: 0,
            ts: "2026-01-01T00:00:00.000Z".into(),
        });
        Ok(response.clone())
    }
}

fn jittered(pb: PromptBox, rng: &mut ChaCha8Rng) -> PromptBox {
    // the kind of box VLMs tend to emit: right neighbourhood, wrong place
    let sign = |r: &mut ChaCha8Rng| if r.random_bool(0.5) { 1 } else { -1 };
    let dx = sign(rng) * rng.random_range(80..220);
    let dy = sign(rng) * rng.random_range(40..160);
    let w = (pb.w as f64 * rng.random_range(0.6..1.8)).round() as i64;
    let h = (pb.h as f64 * rng.random_range(0.8..2.5)).round() as i64;
    PromptBox::new(
        (pb.x + dx).clamp(0, 900),
        (pb.y + dy).clamp(0, 950),
        w.max(5),
        h.max(5),
    )
}

fn near(pb: PromptBox, rng: &mut ChaCha8Rng) -> PromptBox {
    PromptBox::new(
        (pb.x + rng.random_range(-15..15)).max(0),
        (pb.y + rng.random_range(-10..10)).max(0),
        pb.w + rng.random_range(0..40),
        pb.h + rng.random_range(0..15),
    )
}

fn typo(answer: &str) -> String {
    let mut chars: Vec<char> = answer.chars().collect();
    let last = chars.len() - 1;
    chars[last] = if chars[last] == 'q' { 'z' } else { 'q' };
    chars.into_iter().collect()
}

fn response(i: usize, answer: &str, filler: &str, pb: PromptBox, rng: &mut ChaCha8Rng) -> String {
    let j = |content: &str, b: PromptBox| {
        serde_json::json!({"content": content, "position": [b.x, b.y, b.w, b.h]}).to_string()
    };
    match i % 10 {
        0..=3 => j(answer, jittered(pb, rng)),
        4 => format!("```json\n{}\n```", j(answer, near(pb, rng))),
        5 => format!("The answer is {answer}."),
        6 => j(&typo(answer), jittered(pb, rng)),
        7 => {
            let b = jittered(pb, rng);
            format!("Sure! {{'content': '{answer}', 'position': [{}, {}, {}, {}],}}", b.x, b.y, b.w, b.h)
        }
        8 => j(filler, jittered(pb, rng)),
        _ => format!("Answer: {}\nI located it in the page body.", j(answer, pb)),
    }
}

fn embeddings(corpus: &Corpus, seed: u64) -> EmbeddingFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = corpus
        .qas
        .iter()
        .map(|qa| {
            let b = qa.answer_boxes[0].bbox;
            let mut noise = || rng.random_range(-0.05f32..0.05);
            let feats = [b.x1(), b.y1(), b.x2(), b.y2(), b.center_y(), b.width(), b.height(), 0.5];
            let visual: Vec<f32> = feats.iter().map(|&f| (2.0 * f - 1.0) as f32 + noise()).collect();
            let text: Vec<f32> = (0..8).map(|_| noise() * 10.0).collect();
            EmbeddingRecord {
                qa_id: qa.qa_id.clone(),
                visual,
                text,
                target: Some(b),
            }
        })
        .collect();
    EmbeddingFile {
        visual_dim: 8,
        text_dim: 8,
        records,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures/golden".into()));
    fs::create_dir_all(dir.join("images"))?;

    let (mut corpus, _) = planted_corpus(N_QAS, 2024);
    for doc in corpus.documents.values_mut() {
        for page in &mut doc.pages {
            page.image = format!("images/{}", page.image);
            fs::write(dir.join(&page.image), format!("placeholder page image {}\n", doc.doc_id))?;
        }
    }
    write_corpus(&corpus, &dir.join("corpus.ndjson"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut by_question = BTreeMap::new();
    for (i, qa) in corpus.qas.iter().enumerate() {
        let doc = &corpus.documents[&qa.doc_id];
        let filler = doc
            .tokens
            .iter()
            .map(|t| t.text.as_str())
            .find(|t| !qa.answer_value.split(' ').any(|a| a == *t))
            .expect("filler word");
        let pb = to_prompt_box(&qa.answer_boxes[0].bbox);
        by_question.insert(qa.question.clone(), response(i, &qa.answer_value, filler, pb, &mut rng));
    }

    let emb = embeddings(&corpus, 5);
    write_embeddings(&dir.join("embeddings.emb"), &emb)?;
    let cfg = TrainConfig {
        latent: 16,
        hidden: 16,
        learning_rate: 3e-3,
        batch_size: 8,
        epochs: 300,
        seed: 7,
        ..TrainConfig::default()
    };
    let outcome = train(&emb.records, &[], &cfg)?;
    write_checkpoint(&dir.join("regressor.dxv"), &outcome.checkpoint)?;

    let run_json = serde_json::json!({
        "corpus": "corpus.ndjson",
        "endpoint": {"name": ENDPOINT, "base_url": "http://127.0.0.1:9/v1", "flavor": "openai_chat", "max_concurrency": 4},
        "replay": "transcripts.jsonl",
        "checkpoint": "regressor.dxv",
        "embeddings": "embeddings.emb",
        "out_dir": "out",
        "seed": 0
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run_json)? + "\n")?;

    // record the store through the real harness so keys match exactly
    let mut run_cfg = load(&dir)?;
    run_cfg.replay = None;
    let scripted = Scripted {
        by_question,
        log: Mutex::new(Vec::new()),
    };
    run_eval_with(&run_cfg, &scripted)?;
    let mut log = scripted.log.into_inner().unwrap();
    log.sort_by(|a, b| a.key.cmp(&b.key));
    TranscriptStore::write_all(&dir.join("transcripts.jsonl"), &log)?;

    let mut rows = Vec::new();
    for loc in [Localizer::ModelBox, Localizer::Docexplainer, Localizer::OcrBaseline] {
        let mut cfg = load(&dir)?;
        cfg.localizer = loc;
        let out = run_eval(&cfg)?;
        write_run(&dir.join("expected").join(loc_name(loc)), &out)?;
        rows.push(out.row);
    }
    for (name, fmt) in [
        ("report.csv", ReportFormat::Csv),
        ("report.json", ReportFormat::Json),
        ("report.md", ReportFormat::Markdown),
    ] {
        fs::write(dir.join("expected").join(name), render_report(&rows, fmt))?;
    }
    print!("{}", render_report(&rows, ReportFormat::Markdown));
    Ok(())
}

fn loc_name(l: Localizer) -> &'static str {
    match l {
        Localizer::ModelBox => "model_box",
        Localizer::Docexplainer => "docexplainer",
        Localizer::OcrBaseline => "ocr_baseline",
    }
}

fn load(dir: &Path) -> Result<RunConfig, Box<dyn std::error::Error>> {
    let mut cfg: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)?;
    cfg.resolve_paths(dir);
    Ok(cfg)
}
