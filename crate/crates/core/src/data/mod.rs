//! Synthetic grid-world VQA task, its file formats, tokenisation and
//! question-type classification.

mod generate;
mod io;
mod qtype;
mod text;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{ApplyMode, AttentionPrior, NormMode};
use crate::error::{bail, Result};
use crate::model::SampleInput;
use crate::numcore::Tensor;

pub use generate::{generate_dataset, GenSpec, Generated, SampleTruth, Template};
pub use io::{
    load_dataset, read_features, read_priors, read_questions, write_dataset, write_features, write_priors,
    write_questions, PriorEntry, QuestionRecord, QuestionReader,
};
pub use qtype::{classify_question_type, QuestionType};
pub use text::{tokenize, tokenize_and_embed, EmbeddedQuestion, Embeddings, MAX_TOKENS};

/// Annotator answers per question.
pub const NUM_ANSWERS: usize = 10;
/// Largest grid accepted for real features.
pub const MAX_CELLS: usize = 608;

/// Grid features of one image, `rows·cols × d_x`, row-major over cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub id: u32,
    pub rows: usize,
    pub cols: usize,
    pub features: Arc<Tensor>,
}

impl ImageGrid {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaSample {
    pub id: u32,
    pub question: String,
    pub answers: Vec<String>,
    pub image: u32,
    pub qtype: QuestionType,
    /// One weight per question token (before padding).
    pub text_prior: Option<Vec<f64>>,
    /// One weight per grid cell.
    pub image_prior: Option<Vec<f64>>,
}

/// Facts about a dataset that do not fit the per-record files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: Option<u64>,
    pub spec: Option<GenSpec>,
    pub d_x: usize,
    pub d_emb: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// Answer vocabulary; the classifier's output order.
    pub answers: Vec<String>,
    pub embeddings: Embeddings,
    pub images: BTreeMap<u32, ImageGrid>,
    pub train: Vec<VqaSample>,
    pub val: Vec<VqaSample>,
}

impl Dataset {
    pub fn answer_index(&self, answer: &str) -> Option<usize> {
        let a = answer.trim().to_lowercase();
        self.answers.iter().position(|x| *x == a)
    }

    /// Prepares a sample for the network. Priors, when present, are
    /// renormalised to `norm` over the valid positions.
    pub fn encode(&self, s: &VqaSample, norm: NormMode) -> Result<SampleInput> {
        let q = tokenize_and_embed(&s.question, &self.embeddings)?;
        let Some(img) = self.images.get(&s.image) else {
            bail!(Data, "sample {} refers to missing image {}", s.id, s.image);
        };
        let text_prior = match &s.text_prior {
            Some(p) => {
                if p.len() != q.len() {
                    bail!(
                        Data,
                        "sample {}: text prior of length {} for {} tokens",
                        s.id,
                        p.len(),
                        q.len()
                    );
                }
                let mut raw = p.clone();
                raw.resize(MAX_TOKENS, 0.0);
                Some(AttentionPrior::from_raw(&raw, Some(&q.mask), norm, ApplyMode::PerKey)?)
            }
            None => None,
        };
        let image_prior = match &s.image_prior {
            Some(p) => {
                if p.len() != img.cells() {
                    bail!(
                        Data,
                        "sample {}: image prior of length {} for {} cells",
                        s.id,
                        p.len(),
                        img.cells()
                    );
                }
                Some(AttentionPrior::from_raw(p, None, norm, ApplyMode::PerKey)?)
            }
            None => None,
        };
        Ok(SampleInput {
            question: q.embeddings,
            mask: q.mask,
            image: Arc::clone(&img.features),
            text_prior,
            image_prior,
        })
    }

    pub fn encode_all(&self, samples: &[VqaSample], norm: NormMode) -> Result<Vec<SampleInput>> {
        samples.iter().map(|s| self.encode(s, norm)).collect()
    }
}
