use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{IntegrationConfig, ModelConfig, QuestionEncoderKind, TextPriorSource};
use crate::attention::{AttentionBlock, AttentionPrior, NormMode, PriorRef};
use crate::error::{bail, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::params::{Bound, Init, LayerNorm, Linear, Lstm, ParamStore};
use crate::saliency::TextSaliencyNet;

/// One question–image pair ready for the network.
#[derive(Clone, Debug)]
pub struct SampleInput {
    /// `n×d_emb` word embeddings; masked rows are zero.
    pub question: Tensor,
    pub mask: Vec<bool>,
    /// `m×d_x` grid features, row-major over cells.
    pub image: Arc<Tensor>,
    pub text_prior: Option<AttentionPrior>,
    pub image_prior: Option<AttentionPrior>,
}

/// Per-answer sigmoid activations.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerScores(pub Vec<f64>);

impl AnswerScores {
    /// Highest score, ties to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.0.iter().enumerate() {
            if s > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct SampleOut {
    /// `1×A` pre-sigmoid scores.
    pub logits: Var,
    /// `1×n` reduction weights over question tokens.
    pub text_weights: Var,
    /// `1×m` reduction weights over grid cells.
    pub image_weights: Var,
    pub text_prior: Option<Var>,
    pub image_prior: Option<Var>,
}

/// Evaluation-mode forward result with plain values.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub scores: AnswerScores,
    pub text_weights: Vec<f64>,
    pub image_weights: Vec<f64>,
    pub text_prior: Option<Vec<f64>>,
    pub image_prior: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
enum QuestionEncoder {
    Recurrent(Lstm),
    Linear(Linear),
}

/// Scores positions with a two-layer MLP, softmaxes over valid positions and
/// projects the weighted sum.
#[derive(Clone, Debug)]
pub struct AttendedReduce {
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
    pub merge: Linear,
}

impl AttendedReduce {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_model: usize, d_out: usize) -> Self {
        AttendedReduce {
            mlp_hidden: Linear::new(store, init, &format!("{name}.mlp_hidden"), d_model, d_model),
            mlp_out: Linear::new(store, init, &format!("{name}.mlp_out"), d_model, 1),
            merge: Linear::new(store, init, &format!("{name}.merge"), d_model, d_out),
        }
    }

    pub fn numel(d_model: usize, d_out: usize) -> usize {
        Linear::numel(d_model, d_model) + Linear::numel(d_model, 1) + Linear::numel(d_model, d_out)
    }

    /// Returns the `1×d_out` attended vector and the `1×n` weights.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f: Var, mask: Option<&[bool]>) -> Result<(Var, Var)> {
        let h = self.mlp_hidden.forward(g, p, f)?;
        let h = g.relu(h)?;
        let s = self.mlp_out.forward(g, p, h)?;
        let s = g.transpose(s)?;
        let w = g.softmax(s, mask)?;
        let pooled = g.matmul(w, f)?;
        Ok((self.merge.forward(g, p, pooled)?, w))
    }
}

/// `LN(W_y·y + W_x·x)` followed by the answer projection.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub proj_y: Linear,
    pub proj_x: Linear,
    pub norm: LayerNorm,
    pub classifier: Linear,
}

impl FusionHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, d: usize, answers: usize) -> Self {
        FusionHead {
            proj_y: Linear::new(store, init, "fuse.proj_y", d, d),
            proj_x: Linear::new(store, init, "fuse.proj_x", d, d),
            norm: LayerNorm::new(store, "fuse.norm", d),
            classifier: Linear::new(store, init, "classifier", d, answers),
        }
    }

    pub fn numel(d: usize, answers: usize) -> usize {
        2 * Linear::numel(d, d) + LayerNorm::numel(d) + Linear::numel(d, answers)
    }

    /// Pre-sigmoid answer scores.
    pub fn logits(&self, g: &mut Graph, p: &Bound, y: Var, x: Var) -> Result<Var> {
        let a = self.proj_y.forward(g, p, y)?;
        let b = self.proj_x.forward(g, p, x)?;
        let s = g.add(a, b)?;
        let z = self.norm.forward(g, p, s)?;
        self.classifier.forward(g, p, z)
    }

    /// Sigmoid answer scores.
    pub fn fuse_and_classify(&self, g: &mut Graph, p: &Bound, y: Var, x: Var) -> Result<Var> {
        let l = self.logits(g, p, y, x)?;
        g.sigmoid(l)
    }
}

/// Encoder–decoder co-attention network with optional attention priors.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    q_enc: QuestionEncoder,
    q_proj: Linear,
    img_proj: Linear,
    encoder: Vec<AttentionBlock>,
    dec_sa: Vec<AttentionBlock>,
    dec_ga: Vec<AttentionBlock>,
    pub reduce_y: AttendedReduce,
    pub reduce_x: AttendedReduce,
    pub fusion: FusionHead,
    pub tsm: Option<TextSaliencyNet>,
}

impl Model {
    /// Deterministic initialisation from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let (s, i) = (&mut store, &mut init);
        let q_enc = match cfg.question_encoder {
            QuestionEncoderKind::Recurrent => QuestionEncoder::Recurrent(Lstm::new(s, i, "q_enc", cfg.d_emb, cfg.d_y)),
            QuestionEncoderKind::Linear => QuestionEncoder::Linear(Linear::new(s, i, "q_enc", cfg.d_emb, cfg.d_y)),
        };
        let q_proj = Linear::new(s, i, "q_proj", cfg.d_y, cfg.d_model);
        let img_proj = Linear::new(s, i, "img_proj", cfg.d_x, cfg.d_model);
        let b = cfg.block();
        let encoder = (1..=cfg.encoder_layers)
            .map(|l| AttentionBlock::new(s, i, &format!("enc{l}.sa"), b))
            .collect();
        let mut dec_sa = Vec::new();
        let mut dec_ga = Vec::new();
        for l in 1..=cfg.decoder_layers {
            dec_sa.push(AttentionBlock::new(s, i, &format!("dec{l}.sa"), b));
            dec_ga.push(AttentionBlock::new(s, i, &format!("dec{l}.ga"), b));
        }
        let reduce_y = AttendedReduce::new(s, i, "reduce_y", cfg.d_model, cfg.fused_dim);
        let reduce_x = AttendedReduce::new(s, i, "reduce_x", cfg.d_model, cfg.fused_dim);
        let fusion = FusionHead::new(s, i, cfg.fused_dim, cfg.answer_vocab_size);
        let tsm = match cfg.tsm {
            Some(t) => Some(TextSaliencyNet::new(s, i, "tsm", cfg.d_emb, t)?),
            None => None,
        };
        Ok(Model {
            cfg,
            store,
            q_enc,
            q_proj,
            img_proj,
            encoder,
            dec_sa,
            dec_ga,
            reduce_y,
            reduce_x,
            fusion,
            tsm,
        })
    }

    fn check_input(&self, s: &SampleInput) -> Result<()> {
        let (n, m) = (s.question.rows(), s.image.rows());
        if s.question.cols() != self.cfg.d_emb {
            bail!(
                Dimension,
                "question embeddings of width {}, model expects {}",
                s.question.cols(),
                self.cfg.d_emb
            );
        }
        if s.image.cols() != self.cfg.d_x {
            bail!(
                Dimension,
                "image features of width {}, model expects {}",
                s.image.cols(),
                self.cfg.d_x
            );
        }
        if s.mask.len() != n {
            bail!(Dimension, "token mask of length {} for {} tokens", s.mask.len(), n);
        }
        if !s.mask.iter().any(|&v| v) {
            bail!(Validation, "question has no valid token");
        }
        if let Some(p) = &s.text_prior {
            if p.len() != n {
                bail!(Dimension, "text prior of length {} for {} tokens", p.len(), n);
            }
        }
        if let Some(p) = &s.image_prior {
            if p.len() != m {
                bail!(Dimension, "image prior of length {} for {} cells", p.len(), m);
            }
        }
        Ok(())
    }

    fn provided_prior(g: &mut Graph, prior: &AttentionPrior, mask: Option<&[bool]>, norm: NormMode) -> Result<Var> {
        let w = if prior.norm() == norm {
            prior.weights().to_vec()
        } else {
            AttentionPrior::from_raw(prior.weights(), mask, norm, prior.apply())?.into_weights()
        };
        g.constant(Tensor::row_vector(w)?)
    }

    /// Full forward pass on `g`. Padded tokens are dropped before the
    /// encoder and given exactly zero reduction weight.
    pub fn forward_sample(&self, g: &mut Graph, p: &Bound, s: &SampleInput, integ: &IntegrationConfig) -> Result<SampleOut> {
        self.check_input(s)?;
        integ.validate(&self.cfg)?;
        let n = s.question.rows();
        let idx: Vec<usize> = (0..n).filter(|&i| s.mask[i]).collect();
        let all_valid = idx.len() == n;
        let q_full = g.constant(s.question.clone())?;

        let text_prior = if integ.text_layers.is_empty() {
            None
        } else {
            Some(match integ.text_source {
                TextPriorSource::Tsm => {
                    let tsm = self.tsm.as_ref().expect("validated");
                    tsm.forward(g, p, q_full, Some(&s.mask), integ.norm_mode)?
                }
                TextPriorSource::Provided => {
                    let Some(prior) = &s.text_prior else {
                        bail!(Config, "text layers {:?} need a text prior", integ.text_layers);
                    };
                    Self::provided_prior(g, prior, Some(&s.mask), integ.norm_mode)?
                }
            })
        };
        let image_prior = if integ.image_layers.is_empty() {
            None
        } else {
            let Some(prior) = &s.image_prior else {
                bail!(Config, "image layers {:?} need an image prior", integ.image_layers);
            };
            Some(Self::provided_prior(g, prior, None, integ.norm_mode)?)
        };

        let q = if all_valid { q_full } else { g.gather_rows(q_full, &idx)? };
        let y = match &self.q_enc {
            QuestionEncoder::Recurrent(l) => l.forward(g, p, q, false)?,
            QuestionEncoder::Linear(l) => l.forward(g, p, q)?,
        };
        let mut y = self.q_proj.forward(g, p, y)?;
        let text_alpha = match text_prior {
            Some(t) if !all_valid => {
                let col = g.transpose(t)?;
                let col = g.gather_rows(col, &idx)?;
                Some(g.transpose(col)?)
            }
            other => other,
        };
        for (l, block) in self.encoder.iter().enumerate() {
            let prior = match text_alpha {
                Some(alpha) if integ.text_layers.contains(&(l + 1)) => Some(PriorRef {
                    alpha,
                    apply: integ.apply_mode,
                }),
                _ => None,
            };
            y = block.self_attend(g, p, y, prior, None)?.output;
        }

        let img = g.shared_leaf(Arc::clone(&s.image), false)?;
        let mut x = self.img_proj.forward(g, p, img)?;
        for (l, (sa, ga)) in self.dec_sa.iter().zip(&self.dec_ga).enumerate() {
            let prior = match image_prior {
                Some(alpha) if integ.image_layers.contains(&(l + 1)) => Some(PriorRef {
                    alpha,
                    apply: integ.apply_mode,
                }),
                _ => None,
            };
            x = sa.self_attend(g, p, x, prior, None)?.output;
            x = ga.guided_attend(g, p, x, y, None, None)?.output;
        }

        let (y_att, wy) = self.reduce_y.forward(g, p, y, None)?;
        let (x_att, wx) = self.reduce_x.forward(g, p, x, None)?;
        let logits = self.fusion.logits(g, p, y_att, x_att)?;
        let text_weights = if all_valid {
            wy
        } else {
            let col = g.transpose(wy)?;
            let col = g.scatter_rows(col, &idx, n)?;
            g.transpose(col)?
        };
        Ok(SampleOut {
            logits,
            text_weights,
            image_weights: wx,
            text_prior,
            image_prior,
        })
    }

    /// Evaluation-mode forward for one sample.
    pub fn predict(&self, s: &SampleInput, integ: &IntegrationConfig) -> Result<Prediction> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false)?;
        let out = self.forward_sample(&mut g, &p, s, integ)?;
        let scores = g.sigmoid(out.logits)?;
        let vals = |v: Option<Var>| v.map(|v| g.value(v).data().to_vec());
        Ok(Prediction {
            scores: AnswerScores(g.value(scores).data().to_vec()),
            text_weights: g.value(out.text_weights).data().to_vec(),
            image_weights: g.value(out.image_weights).data().to_vec(),
            text_prior: vals(out.text_prior),
            image_prior: vals(out.image_prior),
        })
    }

    /// Evaluation-mode forward over a batch.
    pub fn forward(&self, batch: &[SampleInput], integ: &IntegrationConfig) -> Result<Vec<Prediction>> {
        batch.iter().map(|s| self.predict(s, integ)).collect()
    }

    /// Exact trainable-parameter count from closed-form per-layer sums.
    pub fn count_parameters(cfg: &ModelConfig, include_text_prior_net: bool) -> usize {
        let q_enc = match cfg.question_encoder {
            QuestionEncoderKind::Recurrent => Lstm::numel(cfg.d_emb, cfg.d_y),
            QuestionEncoderKind::Linear => Linear::numel(cfg.d_emb, cfg.d_y),
        };
        let blocks = (cfg.encoder_layers + 2 * cfg.decoder_layers) * AttentionBlock::numel(&cfg.block());
        let tsm = match (&cfg.tsm, include_text_prior_net) {
            (Some(t), true) => TextSaliencyNet::numel(cfg.d_emb, t),
            _ => 0,
        };
        q_enc
            + Linear::numel(cfg.d_y, cfg.d_model)
            + Linear::numel(cfg.d_x, cfg.d_model)
            + blocks
            + 2 * AttendedReduce::numel(cfg.d_model, cfg.fused_dim)
            + FusionHead::numel(cfg.fused_dim, cfg.answer_vocab_size)
            + tsm
    }

    /// Same count plus the word-embedding table (`vocab_size × d_emb`).
    pub fn count_parameters_with_embeddings(cfg: &ModelConfig, include_text_prior_net: bool) -> usize {
        Self::count_parameters(cfg, include_text_prior_net) + cfg.vocab_size * cfg.d_emb
    }
}
