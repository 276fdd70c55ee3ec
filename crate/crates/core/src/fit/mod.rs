//! Grouped local/global transformer over data and latent tokens, in encoder
//! and autoregressive form.

mod ar;
mod config;
mod decode;
mod grouping;
mod model;

pub use ar::{ar_loss, shift_back_latents, shift_latents, ShiftedLatents};
pub use config::{Danger, FitConfig, InputKind, Mode, Pattern};
pub use decode::{generate, sample, DecodeCache, Decoder, Sampler};
pub use grouping::{build_overlapped_groups, group_tokens, position_coords, GroupLayout, GroupedTokens};
pub use model::{parameter_count, Block, Embedding, FitModel, Input};

#[cfg(test)]
mod tests;
