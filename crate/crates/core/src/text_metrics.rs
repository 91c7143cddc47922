//! Edit distance and ANLS scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which canonicalization steps run before comparing strings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizePolicy {
    pub trim: bool,
    pub collapse_whitespace: bool,
    pub case_fold: bool,
}

impl Default for NormalizePolicy {
    fn default() -> Self {
        Self {
            trim: true,
            collapse_whitespace: true,
            case_fold: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnlsConfig {
    /// Similarities below this are scored 0.
    pub threshold: f64,
    pub normalize: NormalizePolicy,
}

impl Default for AnlsConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            normalize: NormalizePolicy::default(),
        }
    }
}

impl AnlsConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.threshold) {
            Ok(())
        } else {
            Err(Error::config(format!(
                "ANLS threshold {} outside [0, 1]",
                self.threshold
            )))
        }
    }
}

pub fn normalize_text(s: &str, policy: &NormalizePolicy) -> String {
    let mut out = if policy.trim { s.trim() } else { s }.to_string();
    if policy.collapse_whitespace {
        let mut collapsed = String::with_capacity(out.len());
        let mut in_ws = false;
        for c in out.chars() {
            if c.is_whitespace() {
                if !in_ws {
                    collapsed.push(' ');
                }
                in_ws = true;
            } else {
                collapsed.push(c);
                in_ws = false;
            }
        }
        out = collapsed;
    }
    if policy.case_fold {
        out = out.to_lowercase();
    }
    out
}

/// Levenshtein distance over Unicode scalar values, two-row DP.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_chars(&a, &b)
}

fn levenshtein_chars(a: &[char], b: &[char]) -> usize {
    // shorter string along the row
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized Levenshtein similarity, thresholded.
pub fn anls_single(pred: &str, gt: &str, cfg: &AnlsConfig) -> f64 {
    let p: Vec<char> = normalize_text(pred, &cfg.normalize).chars().collect();
    let g: Vec<char> = normalize_text(gt, &cfg.normalize).chars().collect();
    let longest = p.len().max(g.len());
    if longest == 0 {
        return 1.0;
    }
    let nls = 1.0 - levenshtein_chars(&p, &g) as f64 / longest as f64;
    if nls >= cfg.threshold {
        nls
    } else {
        0.0
    }
}

/// Mean ANLS over `(prediction, ground truth)` pairs; a missing prediction
/// scores 0 and an empty list scores 0.
pub fn anls_corpus<'a, I>(pairs: I, cfg: &AnlsConfig) -> f64
where
    I: IntoIterator<Item = (Option<&'a str>, &'a str)>,
{
    let (sum, n) = pairs.into_iter().fold((0.0, 0usize), |(s, n), (p, g)| {
        (s + p.map_or(0.0, |p| anls_single(p, g, cfg)), n + 1)
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
