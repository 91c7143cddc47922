//! Corpus interchange format: newline-delimited JSON with `doc` and `qa`
//! records. Boxes on disk are `[x, y, w, h]` thousandths; in memory they are
//! [`NormBox`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{from_prompt_box, to_prompt_box, NormBox, PromptBox};

#[derive(Clone, Debug, PartialEq)]
pub struct OcrToken {
    pub text: String,
    pub bbox: NormBox,
    pub page: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageInfo {
    pub image: String,
    pub w: u32,
    pub h: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub pages: Vec<PageInfo>,
    pub tokens: Vec<OcrToken>,
}

impl DocumentRecord {
    pub fn page_tokens(&self, page: usize) -> Vec<OcrToken> {
        self.tokens.iter().filter(|t| t.page == page).cloned().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnswerBox {
    pub page: usize,
    pub bbox: NormBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!("unknown split label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaRecord {
    pub qa_id: String,
    pub doc_id: String,
    pub question: String,
    pub rephrased_question: String,
    pub answer_value: String,
    pub answer_boxes: Vec<AnswerBox>,
    pub split_hint: Option<Split>,
}

/// Which question text is shown to the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionField {
    #[default]
    Question,
    RephrasedQuestion,
}

impl QaRecord {
    pub fn question_text(&self, field: QuestionField) -> &str {
        match field {
            QuestionField::Question => &self.question,
            QuestionField::RephrasedQuestion => &self.rephrased_question,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub documents: BTreeMap<String, DocumentRecord>,
    pub qas: Vec<QaRecord>,
}

/// How out-of-range boxes in a corpus file are treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Strictness {
    #[default]
    Strict,
    /// Clamp into the page and keep a warning.
    Lenient,
}

#[derive(Debug)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub warnings: Vec<String>,
}

// On-disk line shapes.

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Doc(DocLine),
    Qa(QaLine),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocLine {
    doc_id: String,
    pages: Vec<PageInfo>,
    tokens: Vec<TokenLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenLine {
    t: String,
    page: usize,
    #[serde(rename = "box")]
    bbox: PromptBox,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QaLine {
    qa_id: String,
    doc_id: String,
    question: String,
    rephrased_question: String,
    answer: String,
    boxes: Vec<BoxLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxLine {
    page: usize,
    #[serde(rename = "box")]
    bbox: PromptBox,
}

struct BoxReader<'a> {
    strictness: Strictness,
    warnings: &'a mut Vec<String>,
}

impl BoxReader<'_> {
    fn read(&mut self, pb: PromptBox, owner: &str) -> Result<NormBox> {
        let c = from_prompt_box(pb);
        if c.clamped {
            match self.strictness {
                Strictness::Strict => {
                    return Err(Error::validation(format!(
                        "{owner}: box {pb} outside [0, 1000]"
                    )))
                }
                Strictness::Lenient => {
                    let msg = format!("{owner}: box {pb} clamped into [0, 1000]");
                    log::warn!("{msg}");
                    self.warnings.push(msg);
                }
            }
        }
        Ok(c.bbox)
    }
}

pub fn load_corpus(path: &Path, strictness: Strictness) -> Result<LoadedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path, strictness)
}

/// Parses corpus text; `origin` is only used in error messages.
pub fn parse_corpus(text: &str, origin: &Path, strictness: Strictness) -> Result<LoadedCorpus> {
    let mut warnings = Vec::new();
    let mut reader = BoxReader {
        strictness,
        warnings: &mut warnings,
    };
    let mut corpus = Corpus::default();
    let mut seen_qa = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        match line {
            Line::Doc(d) => {
                let doc = read_doc(d, &mut reader)?;
                if corpus.documents.contains_key(&doc.doc_id) {
                    return Err(Error::validation(format!(
                        "duplicate doc_id {:?} (line {lineno})",
                        doc.doc_id
                    )));
                }
                corpus.documents.insert(doc.doc_id.clone(), doc);
            }
            Line::Qa(q) => {
                let qa = read_qa(q, &mut reader)?;
                if !seen_qa.insert(qa.qa_id.clone()) {
                    return Err(Error::validation(format!(
                        "duplicate qa_id {:?} (line {lineno})",
                        qa.qa_id
                    )));
                }
                corpus.qas.push(qa);
            }
        }
    }
    validate_references(&corpus)?;
    Ok(LoadedCorpus { corpus, warnings })
}

fn read_doc(d: DocLine, reader: &mut BoxReader<'_>) -> Result<DocumentRecord> {
    let owner = format!("doc_id {}", d.doc_id);
    if d.doc_id.is_empty() {
        return Err(Error::validation("empty doc_id"));
    }
    if d.pages.iter().any(|p| p.w == 0 || p.h == 0) {
        return Err(Error::validation(format!("{owner}: page with zero pixel size")));
    }
    let mut tokens = Vec::with_capacity(d.tokens.len());
    for t in d.tokens {
        if t.t.trim().is_empty() {
            return Err(Error::validation(format!("{owner}: empty OCR token")));
        }
        if t.page >= d.pages.len() {
            return Err(Error::validation(format!(
                "{owner}: token {:?} on page {} but document has {} page(s)",
                t.t,
                t.page,
                d.pages.len()
            )));
        }
        let bbox = reader.read(t.bbox, &owner)?;
        tokens.push(OcrToken {
            text: t.t,
            bbox,
            page: t.page,
        });
    }
    Ok(DocumentRecord {
        doc_id: d.doc_id,
        pages: d.pages,
        tokens,
    })
}

fn read_qa(q: QaLine, reader: &mut BoxReader<'_>) -> Result<QaRecord> {
    let owner = format!("qa_id {}", q.qa_id);
    if q.qa_id.is_empty() {
        return Err(Error::validation("empty qa_id"));
    }
    if q.answer.trim().is_empty() {
        return Err(Error::validation(format!("{owner}: empty answer")));
    }
    let split_hint = q.split.as_deref().map(str::parse).transpose()?;
    let mut answer_boxes = Vec::with_capacity(q.boxes.len());
    for b in q.boxes {
        answer_boxes.push(AnswerBox {
            page: b.page,
            bbox: reader.read(b.bbox, &owner)?,
        });
    }
    Ok(QaRecord {
        qa_id: q.qa_id,
        doc_id: q.doc_id,
        question: q.question,
        rephrased_question: q.rephrased_question,
        answer_value: q.answer,
        answer_boxes,
        split_hint,
    })
}

fn validate_references(c: &Corpus) -> Result<()> {
    for qa in &c.qas {
        let doc = c.documents.get(&qa.doc_id).ok_or_else(|| {
            Error::validation(format!(
                "qa_id {} references unknown doc_id {:?}",
                qa.qa_id, qa.doc_id
            ))
        })?;
        if let Some(b) = qa.answer_boxes.iter().find(|b| b.page >= doc.pages.len()) {
            return Err(Error::validation(format!(
                "qa_id {}: answer box on page {} but doc_id {} has {} page(s)",
                qa.qa_id,
                b.page,
                doc.doc_id,
                doc.pages.len()
            )));
        }
    }
    Ok(())
}

/// Serializes a corpus back to interchange text (documents first, in id
/// order, then QAs in corpus order).
pub fn serialize_corpus(c: &Corpus) -> String {
    let mut out = String::new();
    for doc in c.documents.values() {
        let line = Line::Doc(DocLine {
            doc_id: doc.doc_id.clone(),
            pages: doc.pages.clone(),
            tokens: doc
                .tokens
                .iter()
                .map(|t| TokenLine {
                    t: t.text.clone(),
                    page: t.page,
                    bbox: to_prompt_box(&t.bbox),
                })
                .collect(),
        });
        out.push_str(&serde_json::to_string(&line).expect("corpus line serializes"));
        out.push('\n');
    }
    for qa in &c.qas {
        let line = Line::Qa(QaLine {
            qa_id: qa.qa_id.clone(),
            doc_id: qa.doc_id.clone(),
            question: qa.question.clone(),
            rephrased_question: qa.rephrased_question.clone(),
            answer: qa.answer_value.clone(),
            boxes: qa
                .answer_boxes
                .iter()
                .map(|b| BoxLine {
                    page: b.page,
                    bbox: to_prompt_box(&b.bbox),
                })
                .collect(),
            split: qa.split_hint.map(|s| split_label(s).to_string()),
        });
        out.push_str(&serde_json::to_string(&line).expect("corpus line serializes"));
        out.push('\n');
    }
    out
}

pub fn write_corpus(c: &Corpus, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(serialize_corpus(c).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn split_label(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Keeps only QAs with exactly one answer box. Documents are all kept.
pub fn filter_single_box(c: &Corpus) -> Corpus {
    Corpus {
        documents: c.documents.clone(),
        qas: c
            .qas
            .iter()
            .filter(|q| q.answer_boxes.len() == 1)
            .cloned()
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// Partitions QAs into train/val/test. Split hints are honored when every QA
/// carries one; otherwise whole documents are shuffled with `seed` and cut
/// by `fractions`.
pub fn split(c: &Corpus, seed: u64, fractions: (f64, f64, f64)) -> Result<Splits> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }

    let assignment: HashMap<&str, Split> = if !c.qas.is_empty() && c.qas.iter().all(|q| q.split_hint.is_some()) {
        c.qas
            .iter()
            .map(|q| (q.qa_id.as_str(), q.split_hint.unwrap()))
            .collect()
    } else {
        let mut doc_ids: Vec<&str> = c.documents.keys().map(String::as_str).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        doc_ids.shuffle(&mut rng);
        let n = doc_ids.len();
        let n_train = (ft * n as f64).round() as usize;
        let n_val = ((fv * n as f64).round() as usize).min(n - n_train.min(n));
        let doc_split: HashMap<&str, Split> = doc_ids
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let s = if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                (*d, s)
            })
            .collect();
        c.qas
            .iter()
            .map(|q| (q.qa_id.as_str(), doc_split[q.doc_id.as_str()]))
            .collect()
    };

    let pick = |s: Split| Corpus {
        documents: c.documents.clone(),
        qas: c
            .qas
            .iter()
            .filter(|q| assignment[q.qa_id.as_str()] == s)
            .cloned()
            .collect(),
    };
    Ok(Splits {
        train: pick(Split::Train),
        val: pick(Split::Val),
        test: pick(Split::Test),
    })
}

/// Resolves a page image path relative to the corpus file's directory.
pub fn resolve_image(corpus_path: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        corpus_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(p)
    }
}
