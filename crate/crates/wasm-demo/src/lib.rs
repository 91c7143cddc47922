//! Browser bindings for the docground demo page (`www/index.html`).
//!
//! Three operations: IoU between two prompt boxes, parsing a raw model
//! response, and locating an answer on a synthetic page with ANLS against
//! the planted answer. Everything crosses the boundary as numbers or JSON
//! strings; the plain functions below are what the wrappers call.

use serde_json::json;
use wasm_bindgen::prelude::*;

use docground::answer_parser::parse_prediction;
use docground::geometry::{from_prompt_box, iou, to_prompt_box, NormBox, PromptBox};
use docground::ocr_locator::locate;
use docground::synth::planted_corpus;
use docground::text_metrics::{anls_single, AnlsConfig};

fn prompt_box(v: &[f64]) -> Result<PromptBox, String> {
    match v {
        [x, y, w, h] => Ok(PromptBox::new(*x as i64, *y as i64, *w as i64, *h as i64)),
        _ => Err(format!("expected [x, y, w, h], got {} numbers", v.len())),
    }
}

fn norm_json(b: &NormBox) -> serde_json::Value {
    let pb = to_prompt_box(b);
    json!({"corners": b.to_array(), "prompt": [pb.x, pb.y, pb.w, pb.h]})
}

/// IoU of two `[x, y, w, h]` boxes in thousandths, with their clamped
/// corner forms.
pub fn compare_boxes(a: &[f64], b: &[f64]) -> Result<String, String> {
    let (ca, cb) = (from_prompt_box(prompt_box(a)?), from_prompt_box(prompt_box(b)?));
    let inter = ca.bbox.intersection_area(&cb.bbox);
    Ok(json!({
        "iou": iou(&ca.bbox, &cb.bbox),
        "intersection": inter,
        "union": ca.bbox.area() + cb.bbox.area() - inter,
        "a": norm_json(&ca.bbox),
        "b": norm_json(&cb.bbox),
        "clamped": [ca.clamped, cb.clamped],
    })
    .to_string())
}

/// The parsed prediction, with its box also given in thousandths.
pub fn parse_json(raw: &str) -> String {
    let p = parse_prediction(raw);
    json!({
        "status": p.status,
        "content": p.content,
        "box": p.bbox.as_ref().map(norm_json),
    })
    .to_string()
}

fn demo_doc(seed: u64) -> (docground::dataset::DocumentRecord, docground::dataset::QaRecord) {
    let (corpus, planted) = planted_corpus(1, seed);
    let qa = planted.into_iter().next().expect("one document").qa;
    (corpus.documents[&qa.doc_id].clone(), qa)
}

/// A one-page synthetic document: tokens, question and planted answer.
pub fn document_json(seed: u64) -> String {
    let (doc, qa) = demo_doc(seed);
    let tokens: Vec<_> = doc
        .tokens
        .iter()
        .map(|t| json!({"text": t.text, "box": t.bbox.to_array()}))
        .collect();
    json!({
        "doc_id": doc.doc_id,
        "question": qa.question,
        "answer": qa.answer_value,
        "gt_box": qa.answer_boxes[0].bbox.to_array(),
        "tokens": tokens,
    })
    .to_string()
}

/// Locates `answer` on the demo document for `seed` and scores it.
pub fn locate_json(seed: u64, answer: &str) -> String {
    let (doc, qa) = demo_doc(seed);
    let m = locate(answer, &doc.tokens);
    let gt = qa.answer_boxes[0].bbox;
    json!({
        "mode": m.mode,
        "box": m.bbox.map(|b| b.to_array()),
        "iou": m.bbox.map_or(0.0, |b| iou(&b, &gt)),
        "anls": anls_single(answer, &qa.answer_value, &AnlsConfig::default()),
    })
    .to_string()
}

#[wasm_bindgen(js_name = compareBoxes)]
pub fn compare_boxes_js(a: Vec<f64>, b: Vec<f64>) -> Result<String, JsValue> {
    compare_boxes(&a, &b).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = parseResponse)]
pub fn parse_response_js(raw: &str) -> String {
    parse_json(raw)
}

#[wasm_bindgen(js_name = demoDocument)]
pub fn demo_document_js(seed: u32) -> String {
    document_json(seed as u64)
}

#[wasm_bindgen(js_name = locateAnswer)]
pub fn locate_answer_js(seed: u32, answer: &str) -> String {
    locate_json(seed as u64, answer)
}
