//! Multi-head attention with standard and prior-modulated scoring, and the
//! SA/GA blocks built from it.

mod blocks;
mod multihead;
mod prior;

pub use blocks::{AttentionBlock, BlockOut, FeedForward};
pub use multihead::{
    prior_modulated_attention, scaled_dot_attention, Attended, MultiHead, MultiHeadConfig, MultiHeadOut, PriorRef,
};
pub use prior::{ApplyMode, AttentionPrior, NormMode};
