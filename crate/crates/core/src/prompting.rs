//! Prompt text for the three strategies: zero-shot, exemplar (CoT) and
//! OCR-anchor prompting. Output must stay byte-stable; replay stores are
//! keyed on it.

use serde::{Deserialize, Serialize};

use crate::dataset::{OcrToken, QuestionField};
use crate::error::{Error, Result};
use crate::geometry::{to_prompt_box, PromptBox};
use crate::ocr_locator::reading_order;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    ZeroShot,
    Cot,
    Anchors,
}

impl Strategy {
    /// Label used in report rows.
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::ZeroShot => "Zero-shot",
            Strategy::Cot => "CoT",
            Strategy::Anchors => "Anchors",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    pub answer: String,
    pub position: PromptBox,
}

pub const DEFAULT_EXEMPLARS: usize = 2;
pub const DEFAULT_ANCHOR_BUDGET: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSpec {
    pub strategy: Strategy,
    pub exemplars: Vec<Exemplar>,
    pub exemplar_count: usize,
    pub anchor_budget: usize,
    pub question_field: QuestionField,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::ZeroShot,
            exemplars: Vec::new(),
            exemplar_count: DEFAULT_EXEMPLARS,
            anchor_budget: DEFAULT_ANCHOR_BUDGET,
            question_field: QuestionField::Question,
        }
    }
}

impl PromptSpec {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::Cot if self.exemplars.is_empty() => {
                Err(Error::config("cot prompting needs at least one exemplar"))
            }
            Strategy::Anchors if self.anchor_budget == 0 => {
                Err(Error::config("anchors prompting needs anchor_budget >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Renders the prompt for one question. `tokens` are only consulted by
    /// the anchors strategy.
    pub fn render(&self, question: &str, tokens: &[OcrToken]) -> Result<String> {
        self.validate()?;
        match self.strategy {
            Strategy::ZeroShot => build_zero_shot(question),
            Strategy::Cot => build_cot(question, &self.exemplars),
            Strategy::Anchors => build_anchors(question, tokens, self.anchor_budget),
        }
    }
}

pub fn build_zero_shot(question: &str) -> Result<String> {
    if question.trim().is_empty() {
        return Err(Error::config("empty question"));
    }
    Ok(format!(
        "Based only on the document image, answer the following question:\n\
         Question: {question}\n\
         Provide ONLY a JSON response in the following format:\n\
         {{\n  \"content\": \"answer\",\n  \"position\": [x, y, w, h]\n}}\n\
         Each position value MUST be in the range [0, 1000]."
    ))
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

pub fn render_exemplar(ex: &Exemplar) -> String {
    let p = ex.position;
    format!(
        "Q: \"{}\" A: {{\"value\":{}, \"position\": [{}, {}, {}, {}]}}",
        ex.question,
        json_string(&ex.answer),
        p.x,
        p.y,
        p.w,
        p.h
    )
}

pub fn build_cot(question: &str, exemplars: &[Exemplar]) -> Result<String> {
    if exemplars.is_empty() {
        return Err(Error::config("cot prompting needs at least one exemplar"));
    }
    let body = build_zero_shot(question)?;
    let mut out = String::from("Examples:\n");
    for ex in exemplars {
        out.push_str(&render_exemplar(ex));
        out.push('\n');
    }
    out.push('\n');
    out.push_str(&body);
    Ok(out)
}

pub fn render_anchor(token: &OcrToken) -> String {
    format!("The word \"{}\" is at {}", token.text, to_prompt_box(&token.bbox))
}

/// Anchor lines for the first `budget` tokens in reading order, then the
/// zero-shot body. No tokens gives exactly the zero-shot prompt.
pub fn build_anchors(question: &str, tokens: &[OcrToken], budget: usize) -> Result<String> {
    if budget == 0 {
        return Err(Error::config("anchors prompting needs anchor_budget >= 1"));
    }
    let body = build_zero_shot(question)?;
    if tokens.is_empty() {
        return Ok(body);
    }
    let mut out = String::new();
    for t in reading_order(tokens).iter().take(budget) {
        out.push_str(&render_anchor(t));
        out.push('\n');
    }
    out.push('\n');
    out.push_str(&body);
    Ok(out)
}
