//! Naive OCR localization: find the answer text among the page's OCR tokens
//! and return the box of the matching run, falling back to the answer's
//! first word.

use serde::{Deserialize, Serialize};

use crate::dataset::OcrToken;
use crate::geometry::{union_box, NormBox};
use crate::text_metrics::{normalize_text, NormalizePolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Full,
    FirstWord,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    #[serde(rename = "box")]
    pub bbox: Option<NormBox>,
    pub page: Option<usize>,
    /// `(start, count)` over the reading-ordered token list.
    pub span: Option<(usize, usize)>,
    pub mode: MatchMode,
}

impl MatchResult {
    fn none() -> Self {
        Self {
            bbox: None,
            page: None,
            span: None,
            mode: MatchMode::None,
        }
    }
}

/// Sorts tokens by page, then row, then left edge.
///
/// Rows are built greedily over tokens sorted by vertical center: a token
/// joins the current row when its center is within half the smaller of its
/// own and the row anchor's height.
pub fn reading_order(tokens: &[OcrToken]) -> Vec<OcrToken> {
    let mut idx: Vec<usize> = (0..tokens.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ta, tb) = (&tokens[a], &tokens[b]);
        ta.page
            .cmp(&tb.page)
            .then(ta.bbox.center_y().total_cmp(&tb.bbox.center_y()))
    });

    let mut out = Vec::with_capacity(tokens.len());
    let mut row: Vec<usize> = Vec::new();
    let flush = |row: &mut Vec<usize>, out: &mut Vec<OcrToken>| {
        row.sort_by(|&a, &b| tokens[a].bbox.x1().total_cmp(&tokens[b].bbox.x1()));
        out.extend(row.drain(..).map(|i| tokens[i].clone()));
    };
    for i in idx {
        if let Some(&anchor) = row.first() {
            let (a, t) = (&tokens[anchor], &tokens[i]);
            let tol = 0.5 * a.bbox.height().min(t.bbox.height());
            let same = a.page == t.page && (t.bbox.center_y() - a.bbox.center_y()).abs() < tol;
            if !same {
                flush(&mut row, &mut out);
            }
        }
        row.push(i);
    }
    flush(&mut row, &mut out);
    out
}

/// One whitespace-separated word of a normalized token, remembering which
/// token it came from.
struct Word {
    text: String,
    token: usize,
}

fn words_of(tokens: &[OcrToken], policy: &NormalizePolicy) -> Vec<Word> {
    tokens
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            normalize_text(&t.text, policy)
                .split_whitespace()
                .map(|w| Word {
                    text: w.to_string(),
                    token: i,
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn find_run(words: &[Word], ordered: &[OcrToken], needle: &[&str]) -> Option<(usize, usize)> {
    if needle.is_empty() || needle.len() > words.len() {
        return None;
    }
    (0..=words.len() - needle.len()).find_map(|start| {
        let run = &words[start..start + needle.len()];
        let page = ordered[run[0].token].page;
        let hit = run
            .iter()
            .zip(needle)
            .all(|(w, n)| w.text == *n && ordered[w.token].page == page);
        hit.then(|| {
            let first = run[0].token;
            let last = run[run.len() - 1].token;
            (first, last - first + 1)
        })
    })
}

/// Locates `answer` among `tokens` using the default normalization.
pub fn locate(answer: &str, tokens: &[OcrToken]) -> MatchResult {
    locate_with(answer, tokens, &NormalizePolicy::default())
}

pub fn locate_with(answer: &str, tokens: &[OcrToken], policy: &NormalizePolicy) -> MatchResult {
    let norm = normalize_text(answer, policy);
    let needle: Vec<&str> = norm.split_whitespace().collect();
    if needle.is_empty() {
        return MatchResult::none();
    }
    let ordered = reading_order(tokens);
    let words = words_of(&ordered, policy);

    let attempts = [(MatchMode::Full, &needle[..]), (MatchMode::FirstWord, &needle[..1])];
    for (mode, pattern) in attempts {
        if let Some((start, count)) = find_run(&words, &ordered, pattern) {
            let boxes: Vec<NormBox> = ordered[start..start + count].iter().map(|t| t.bbox).collect();
            return MatchResult {
                bbox: Some(union_box(&boxes).expect("run is nonempty")),
                page: Some(ordered[start].page),
                span: Some((start, count)),
                mode,
            };
        }
    }
    MatchResult::none()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(text: &str, page: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> OcrToken {
        OcrToken {
            text: text.into(),
            bbox: NormBox::new(x1, y1, x2, y2).unwrap(),
            page,
        }
    }

    fn texts(ts: &[OcrToken]) -> Vec<&str> {
        ts.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn same_row_sorted_by_x() {
        let ts = vec![tok("right", 0, 0.5, 0.1, 0.6, 0.12), tok("left", 0, 0.1, 0.1, 0.2, 0.12)];
        assert_eq!(texts(&reading_order(&ts)), ["left", "right"]);
    }

    #[test]
    fn pages_in_order() {
        let ts = vec![
            tok("p1", 1, 0.0, 0.0, 0.1, 0.02),
            tok("p0b", 0, 0.0, 0.9, 0.1, 0.92),
            tok("p0a", 0, 0.0, 0.1, 0.1, 0.12),
        ];
        assert_eq!(texts(&reading_order(&ts)), ["p0a", "p0b", "p1"]);
    }

    #[test]
    fn jittered_row_is_one_row() {
        // heights 0.02, centers differ by 0.006 < 0.01
        let ts = vec![
            tok("c", 0, 0.7, 0.100, 0.8, 0.120),
            tok("a", 0, 0.1, 0.106, 0.2, 0.126),
            tok("b", 0, 0.4, 0.103, 0.5, 0.123),
            tok("next", 0, 0.0, 0.2, 0.1, 0.22),
        ];
        assert_eq!(texts(&reading_order(&ts)), ["a", "b", "c", "next"]);
    }

    #[test]
    fn full_match_unions_run() {
        let ts = vec![
            tok("Seller:", 0, 0.05, 0.3, 0.15, 0.32),
            tok("Bailey", 0, 0.2, 0.3, 0.3, 0.32),
            tok("Group", 0, 0.31, 0.301, 0.4, 0.322),
            tok("Ltd", 0, 0.5, 0.5, 0.6, 0.52),
        ];
        let m = locate("Bailey Group", &ts);
        assert_eq!(m.mode, MatchMode::Full);
        assert_eq!(m.span, Some((1, 2)));
        assert_eq!(m.bbox, Some(NormBox::new(0.2, 0.3, 0.4, 0.322).unwrap()));
    }

    #[test]
    fn first_word_fallback_and_none() {
        let ts = vec![tok("Bailey", 0, 0.2, 0.3, 0.3, 0.32), tok("Group", 0, 0.31, 0.3, 0.4, 0.32)];
        let m = locate("Bailey Grp", &ts);
        assert_eq!(m.mode, MatchMode::FirstWord);
        assert_eq!(m.bbox, Some(ts[0].bbox));
        assert_eq!(locate("zebra", &ts).mode, MatchMode::None);
        assert_eq!(locate("   ", &ts).mode, MatchMode::None);
    }

    #[test]
    fn first_occurrence_wins() {
        let ts = vec![tok("total", 0, 0.1, 0.8, 0.2, 0.82), tok("Total", 0, 0.1, 0.1, 0.2, 0.12)];
        let m = locate("TOTAL", &ts);
        assert_eq!(m.bbox, Some(ts[1].bbox));
    }

    #[test]
    fn runs_do_not_cross_pages() {
        let ts = vec![tok("June", 0, 0.1, 0.9, 0.2, 0.92), tok("30,", 1, 0.0, 0.0, 0.1, 0.02)];
        let m = locate("June 30,", &ts);
        assert_eq!(m.mode, MatchMode::FirstWord);
        assert_eq!(m.page, Some(0));
    }

    #[test]
    fn multi_word_token_matches() {
        let ts = vec![tok("June 30, 1966", 0, 0.1, 0.1, 0.4, 0.12)];
        assert_eq!(locate("june 30, 1966", &ts).mode, MatchMode::Full);
    }
}
