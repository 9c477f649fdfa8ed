//! Text conditioning. A pluggable frozen-encoder interface produces fixed
//! (77, 1024) token-embedding sequences for cross-attention, and a small
//! trainable contrastive audio/text model plays the conditioning, caption
//! selection, and evaluation roles with one set of weights.

pub mod tokenizer;
pub mod toyclap;

use ndarray::Array2;

use crate::error::CoreError;

/// Conditioning sequence length (tokens).
pub const COND_TOKENS: usize = 77;
/// Conditioning embedding width after projection.
pub const COND_DIM: usize = 1024;

/// A caption encoded for cross-attention conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition {
    pub tokens: Array2<f32>,
    pub is_empty: bool,
}

impl TextCondition {
    pub fn new(tokens: Array2<f32>, is_empty: bool) -> Result<Self, CoreError> {
        if tokens.dim() != (COND_TOKENS, COND_DIM) {
            return Err(CoreError::Shape(format!(
                "text condition must be ({COND_TOKENS}, {COND_DIM}), got {:?}",
                tokens.dim()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Shape("text condition has non-finite values".into()));
        }
        Ok(TextCondition { tokens, is_empty })
    }
}

/// A frozen text encoder: deterministic, immutable weights.
pub trait TextEncoder {
    fn name(&self) -> &'static str;
    fn encode_text(&self, caption: &str) -> Result<TextCondition, CoreError>;
    /// The fixed empty-prompt representation c_∅ (encoding of "").
    fn empty_condition(&self) -> Result<TextCondition, CoreError> {
        self.encode_text("")
    }
}

/// Known adapter names. Only the toy contrastive model ships weights; the
/// pretrained adapters are plug-in points and report a configuration error
/// when requested without an implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterName {
    ToyClap,
    Clap,
    T5,
    Bert,
    Clip,
}

impl AdapterName {
    pub fn parse(s: &str) -> Result<Self, CoreError> {
        match s {
            "toy-clap" => Ok(AdapterName::ToyClap),
            "clap" => Ok(AdapterName::Clap),
            "t5" => Ok(AdapterName::T5),
            "bert" => Ok(AdapterName::Bert),
            "clip" => Ok(AdapterName::Clip),
            other => Err(CoreError::Config(format!("unknown text encoder '{other}'"))),
        }
    }
}

/// Load a text encoder by name. `toy-clap` reads a trained checkpoint; the
/// pretrained adapters have no bundled weights.
pub fn load_adapter(name: AdapterName, ckpt: &std::path::Path) -> Result<Box<dyn TextEncoder>, CoreError> {
    match name {
        AdapterName::ToyClap => Ok(Box::new(toyclap::ToyClap::load(ckpt)?)),
        other => Err(CoreError::Config(format!(
            "encoder {other:?} is a plug-in interface without bundled weights; use toy-clap"
        ))),
    }
}
