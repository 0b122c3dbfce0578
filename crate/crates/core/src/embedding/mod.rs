//! Condition embeddings: toy text and image-patch encoders, Fourier box
//! codes, and grounding tokens.

mod fourier;
mod grounding;
mod patches;
mod text;
mod vocab;

pub use fourier::fourier_box_embedding;
pub use grounding::{build_grounding_tokens, init_grounding, GroundingSource, GroundingTokens};
pub use patches::{encode_image_patches, init_patch_encoder, patch_grid, PatchEncoderConfig};
pub use text::{encode_text, init_text_encoder, TextEncoderConfig};
pub use vocab::{words as prompt_words, TokenId, Vocab};
