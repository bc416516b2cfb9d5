//! Encoder–decoder co-attention network with configurable prior
//! integration points, attention reduction, fusion and answer head.

mod checkpoint;
mod config;
mod net;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use config::{IntegrationConfig, ModelConfig, QuestionEncoderKind, TextPriorSource};
pub use net::{AnswerScores, AttendedReduce, FusionHead, Model, Prediction, SampleInput, SampleOut};
