//! Transformer building blocks shared by the encoder and the autoregressive
//! model: attention, FFN, pre-norm stacks, cross-attention, positional
//! tables and masks.

mod attention;
mod layers;
mod mask;
mod params;
mod positional;
mod stack;

pub use attention::{AttentionConfig, MultiHeadAttention};
pub use layers::{Ffn, Linear, Norm, INIT_STD, LN_EPS};
pub use mask::{AttentionMask, MASKED_LOGIT};
pub use params::{Init, ParamEntry, ParamId, ParamStore, Session};
pub use positional::PositionalEncoding;
pub use stack::{CrossAttention, CrossSpec, Layer, StackOptions, StackSpec, TransformerStack};
