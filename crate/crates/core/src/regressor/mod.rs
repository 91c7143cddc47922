//! Bounding-box regressor over frozen image/text embeddings.
//!
//! The backbone never runs here: embeddings arrive pre-computed in EMB1
//! files (see [`io`]), and only the projection, fusion and head layers are
//! trained.

pub mod io;
pub mod model;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NormBox;

pub use model::{backward, forward, huber, huber_loss, Dims, Linear, RegressorParams};
pub use train::{predict, train, Adam, Checkpoint, EpochStats, TrainOutcome};

/// What the text branch was fed when the embeddings were produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    Question,
    Answer,
    /// `"<question> [SEP] <answer>"`
    #[default]
    QuestionPlusAnswer,
}

impl TextMode {
    pub fn render(&self, question: &str, answer: &str) -> String {
        match self {
            TextMode::Question => question.to_string(),
            TextMode::Answer => answer.to_string(),
            TextMode::QuestionPlusAnswer => format!("{question} [SEP] {answer}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub qa_id: String,
    pub visual: Vec<f32>,
    pub text: Vec<f32>,
    pub target: Option<NormBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub latent: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub text_mode: TextMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent: 512,
            hidden: 512,
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            text_mode: TextMode::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.latent == 0 || self.hidden == 0 {
            return bad("latent and hidden dims must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("invalid Adam hyper-parameters");
        }
        Ok(())
    }
}
