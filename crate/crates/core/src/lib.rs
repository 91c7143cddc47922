//! # docground
//!
//! Spatial grounding for document VQA. The toolkit builds prompts for
//! vision-language models, parses their (often messy) answers, localizes
//! answers on the page and scores both the text (ANLS) and the box
//! (MeanIoU).
//!
//! ## Module map
//!
//! - [`geometry`] - normalized boxes, prompt-box conversion, IoU
//! - [`text_metrics`] - Levenshtein distance and ANLS
//! - [`dataset`] - corpus interchange format, filtering, splits
//! - [`prompting`] - zero-shot, exemplar and OCR-anchor prompts
//! - [`vlm_client`] - live HTTP querying and transcript record/replay
//! - [`answer_parser`] - raw model output to [`answer_parser::Prediction`]
//! - [`ocr_locator`] - the OCR search localization baseline
//! - [`regressor`] - the embedding-based box regressor and its file formats
//! - [`harness`] - end-to-end evaluation runs and report rendering

pub mod answer_parser;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod ocr_locator;
pub mod prompting;
pub mod regressor;
pub mod synth;
pub mod text_metrics;
pub mod vlm_client;

pub use error::{Error, Result};
pub use geometry::{iou, mean_iou, NormBox, PromptBox};
