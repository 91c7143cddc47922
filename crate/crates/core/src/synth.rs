//! Seeded synthetic data: embedding sets with recoverable targets, and OCR
//! corpora with planted answers. Used by tests, the demo, and fixture
//! generation; no external model or dataset needed.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{AnswerBox, Corpus, DocumentRecord, OcrToken, PageInfo, QaRecord};
use crate::geometry::{from_prompt_box, union_box, NormBox, PromptBox};
use crate::regressor::EmbeddingRecord;

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// `n` records whose target box is a fixed affine function of the
/// concatenated embeddings, plus Gaussian noise of std `sigma` on each
/// corner. Boxes are clamped into the page.
pub fn affine_records(n: usize, visual_dim: usize, text_dim: usize, sigma: f64, seed: u64) -> Vec<EmbeddingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = visual_dim + text_dim;
    let dirs: Vec<Vec<f64>> = (0..4).map(|_| unit_vector(&mut rng, d)).collect();
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    (0..n)
        .map(|i| {
            let visual: Vec<f32> = (0..visual_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let text: Vec<f32> = (0..text_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let z: Vec<f64> = visual.iter().chain(&text).map(|&v| v as f64).collect();
            let proj: Vec<f64> = dirs.iter().map(|a| a.iter().zip(&z).map(|(a, z)| a * z).sum()).collect();
            let cx = 0.5 + 0.15 * proj[0];
            let cy = 0.5 + 0.15 * proj[1];
            let w = (0.3 + 0.08 * proj[2]).max(0.05);
            let h = (0.2 + 0.06 * proj[3]).max(0.05);
            let mut c = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
            for v in &mut c {
                *v += noise.sample(&mut rng);
            }
            EmbeddingRecord {
                qa_id: format!("syn{i:05}"),
                visual,
                text,
                target: Some(NormBox::from_unordered(c[0], c[1], c[2], c[3])),
            }
        })
        .collect()
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "be", "do", "fa", "gu", "ha", "ji", "po", "ze",
];

fn word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(2..4);
    (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
}

/// A synthetic document with a planted answer.
#[derive(Clone, Debug)]
pub struct PlantedQa {
    pub qa: QaRecord,
    /// Token indices (in document order) of the planted run.
    pub run: Vec<usize>,
}

/// Builds `n_docs` single-page documents. Each has filler rows of random
/// words and one planted answer run of 1 to 3 words that occurs nowhere
/// else in the document. Token boxes sit on the 1/1000 grid so the corpus
/// survives serialization unchanged.
pub fn planted_corpus(n_docs: usize, seed: u64) -> (Corpus, Vec<PlantedQa>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut documents = BTreeMap::new();
    let mut planted = Vec::with_capacity(n_docs);
    for d in 0..n_docs {
        let doc_id = format!("doc{d:04}");
        let rows = rng.random_range(6..14);
        let answer_row = rng.random_range(0..rows);
        let answer_len = rng.random_range(1..4);
        let answer_words: Vec<String> = (0..answer_len).map(|k| format!("ans{d}x{k}{}", word(&mut rng))).collect();

        let mut tokens = Vec::new();
        let mut run = Vec::new();
        for r in 0..rows {
            let y = 40 + r as i64 * 60;
            let mut x = 30;
            let cols = rng.random_range(3..7);
            let answer_col = (r == answer_row).then(|| rng.random_range(0..cols));
            for c in 0..cols {
                let words: Vec<String> = if Some(c) == answer_col {
                    answer_words.clone()
                } else {
                    vec![word(&mut rng)]
                };
                for w in words {
                    // at most 5 fillers (<= 70 each) precede <= 3 answer words (<= 150 each)
                    let width = 10 * w.len() as i64;
                    if Some(c) == answer_col {
                        run.push(tokens.len());
                    }
                    tokens.push(OcrToken {
                        bbox: from_prompt_box(PromptBox::new(x, y, width, 20)).bbox,
                        text: w,
                        page: 0,
                    });
                    x += width + 10;
                }
            }
        }
        debug_assert_eq!(run.len(), answer_words.len());
        let gt = union_box(&run.iter().map(|&i| tokens[i].bbox).collect::<Vec<_>>()).expect("run nonempty");
        let qa = QaRecord {
            qa_id: format!("{doc_id}-q0"),
            doc_id: doc_id.clone(),
            question: format!("What is the reference of document {d}?"),
            rephrased_question: format!("Which reference appears in document {d}?"),
            answer_value: answer_words.join(" "),
            answer_boxes: vec![AnswerBox { page: 0, bbox: gt }],
            split_hint: None,
        };
        documents.insert(
            doc_id.clone(),
            DocumentRecord {
                doc_id,
                pages: vec![PageInfo {
                    image: format!("doc{d:04}_p0.png"),
                    w: 850,
                    h: 1100,
                }],
                tokens,
            },
        );
        planted.push(PlantedQa { qa: qa.clone(), run });
    }
    let qas = planted.iter().map(|p| p.qa.clone()).collect();
    (Corpus { documents, qas }, planted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{parse_corpus, serialize_corpus, Strictness};

    #[test]
    fn affine_records_are_deterministic() {
        let a = affine_records(5, 4, 3, 0.01, 9);
        assert_eq!(a, affine_records(5, 4, 3, 0.01, 9));
        assert_ne!(a, affine_records(5, 4, 3, 0.01, 10));
        assert!(a.iter().all(|r| r.target.is_some() && r.visual.len() == 4 && r.text.len() == 3));
    }

    #[test]
    fn planted_corpus_survives_serialization() {
        let (c, planted) = planted_corpus(20, 1);
        assert_eq!(c.qas.len(), 20);
        for p in &planted {
            let doc = &c.documents[&p.qa.doc_id];
            let words: Vec<&str> = p.run.iter().map(|&i| doc.tokens[i].text.as_str()).collect();
            assert_eq!(words.join(" "), p.qa.answer_value);
        }
        let text = serialize_corpus(&c);
        let back = parse_corpus(&text, std::path::Path::new("x"), Strictness::Strict).unwrap();
        assert_eq!(back.corpus, c);
    }
}
