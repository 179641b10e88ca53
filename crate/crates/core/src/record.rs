//! Model identity records and the per-layer emotion vector set.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::math::{all_finite, norm};
use crate::vocab::{EMOTIONS, N_EMOTIONS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Instruct,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "base" | "b" | "pt" => Ok(Self::Base),
            "instruct" | "i" | "it" => Ok(Self::Instruct),
            other => Err(Error::Argument(format!("unknown variant '{other}'"))),
        }
    }
}

/// How a backend exposes the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Named hook points (`blocks.{N}.hook_resid_post`).
    NamedHook,
    /// A tuple of hidden states with the embeddings at index 0.
    HiddenStateSequence,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NamedHook => "named_hook",
            Self::HiddenStateSequence => "hidden_state_sequence",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "named_hook" | "tl" | "transformer_lens" | "hooked" => Ok(Self::NamedHook),
            "hidden_state_sequence" | "hf" | "hf_raw_hooks" | "hidden_states" => {
                Ok(Self::HiddenStateSequence)
            }
            other => Err(Error::Argument(format!("unknown backend kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Fp16,
    Bf16,
    Fp32,
    Int8,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fp16 => "fp16",
            Self::Bf16 => "bf16",
            Self::Fp32 => "fp32",
            Self::Int8 => "int8",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fp16" | "float16" | "half" => Ok(Self::Fp16),
            "bf16" | "bfloat16" => Ok(Self::Bf16),
            "fp32" | "float32" | "float" => Ok(Self::Fp32),
            "int8" | "8bit" => Ok(Self::Int8),
            other => Err(Error::Argument(format!("unknown precision '{other}'"))),
        }
    }
}

/// Identity and architecture metadata for one model (one model-table row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub family: String,
    pub variant: Variant,
    pub size_b: f64,
    pub n_layers: usize,
    pub d_model: usize,
    pub backend_kind: BackendKind,
    pub precision: Precision,
}

impl ModelRecord {
    pub fn validate(&self) -> Result<()> {
        if self.model_id.trim().is_empty() {
            return Err(Error::Invariant("model_id is empty".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::Invariant(format!("{}: n_layers must be >= 1", self.model_id)));
        }
        if self.d_model == 0 {
            return Err(Error::Invariant(format!("{}: d_model must be >= 1", self.model_id)));
        }
        if !(self.size_b > 0.0 && self.size_b.is_finite()) {
            return Err(Error::Invariant(format!(
                "{}: size_b must be positive, got {}",
                self.model_id, self.size_b
            )));
        }
        Ok(())
    }

    /// Directory name for this model: path separators become `_`.
    pub fn slug(&self) -> String {
        model_slug(&self.model_id)
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::Argument(format!(
                "layer {layer} out of range for {} ({} layers)",
                self.model_id, self.n_layers
            )));
        }
        Ok(())
    }
}

pub fn model_slug(model_id: &str) -> String {
    model_id.replace(['/', '\\'], "_")
}

/// The 21 per-emotion vectors of one model at one layer, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionVectorSet {
    pub model: ModelRecord,
    pub layer: usize,
    pub emotion_order: Vec<String>,
    vectors: Vec<f32>,
    pub centered: bool,
}

impl EmotionVectorSet {
    pub fn new(
        model: ModelRecord,
        layer: usize,
        emotion_order: Vec<String>,
        vectors: Vec<f32>,
        centered: bool,
    ) -> Result<Self> {
        let set = Self {
            model,
            layer,
            emotion_order,
            vectors,
            centered,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.check_layer(self.layer)?;
        if self.emotion_order.len() != N_EMOTIONS {
            return Err(Error::Invariant(format!(
                "expected {N_EMOTIONS} emotion rows, got {}",
                self.emotion_order.len()
            )));
        }
        if self.emotion_order.iter().zip(EMOTIONS).any(|(a, b)| a != b) {
            return Err(Error::Alignment(
                "emotion order differs from the canonical alphabetical vocabulary".into(),
            ));
        }
        let d = self.model.d_model;
        if self.vectors.len() != N_EMOTIONS * d {
            return Err(Error::Dimension {
                expected: N_EMOTIONS * d,
                found: self.vectors.len(),
            });
        }
        if self.centered && all_finite(&self.vectors) {
            let residual = self.centering_residual();
            let mean_norm = self.rows().map(norm).sum::<f64>() / N_EMOTIONS as f64;
            if residual > 1e-3 * mean_norm {
                return Err(Error::Invariant(format!(
                    "centered set sums to {residual:e} (mean row norm {mean_norm:e})"
                )));
            }
        }
        Ok(())
    }

    /// Max-abs entry of the column-wise sum of all rows.
    pub fn centering_residual(&self) -> f64 {
        let d = self.model.d_model;
        (0..d)
            .map(|c| {
                (0..N_EMOTIONS)
                    .map(|r| self.vectors[r * d + c] as f64)
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn d_model(&self) -> usize {
        self.model.d_model
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.model.d_model;
        &self.vectors[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.model.d_model)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vectors
    }

    pub fn into_vectors(self) -> Vec<f32> {
        self.vectors
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::vocab::canonical_labels;
    use alloc::vec;

    pub(crate) fn record(d_model: usize, n_layers: usize) -> ModelRecord {
        ModelRecord {
            model_id: "test/model".into(),
            family: "test".into(),
            variant: Variant::Instruct,
            size_b: 0.1,
            n_layers,
            d_model,
            backend_kind: BackendKind::NamedHook,
            precision: Precision::Fp32,
        }
    }

    #[test]
    fn parses_table_aliases() {
        assert_eq!("TL".parse::<BackendKind>().unwrap(), BackendKind::NamedHook);
        assert_eq!("HF".parse::<BackendKind>().unwrap(), BackendKind::HiddenStateSequence);
        assert_eq!("I".parse::<Variant>().unwrap(), Variant::Instruct);
        assert!("GGUF".parse::<BackendKind>().is_err());
        assert!("chat".parse::<Variant>().is_err());
    }

    #[test]
    fn slug_replaces_separators() {
        assert_eq!(model_slug("mistralai/Mistral-7B-v0.1"), "mistralai_Mistral-7B-v0.1");
    }

    #[test]
    fn record_invariants() {
        let mut r = record(8, 4);
        assert!(r.validate().is_ok());
        r.size_b = -1.0;
        assert!(r.validate().is_err());
        let mut r = record(8, 4);
        r.n_layers = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn vector_set_requires_21_rows() {
        let mut order = canonical_labels();
        order.pop();
        let err = EmotionVectorSet::new(record(8, 2), 0, order, vec![0.0; 20 * 8], false);
        assert!(matches!(err, Err(Error::Invariant(_))));
    }

    #[test]
    fn vector_set_rejects_dimension_mismatch() {
        let err = EmotionVectorSet::new(record(8, 2), 0, canonical_labels(), vec![0.0; 21 * 7], false);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn vector_set_checks_centering() {
        let mut v = vec![0.0f32; 21 * 2];
        v[0] = 1.0;
        let err = EmotionVectorSet::new(record(2, 2), 0, canonical_labels(), v.clone(), true);
        assert!(err.is_err());
        assert!(EmotionVectorSet::new(record(2, 2), 0, canonical_labels(), v, false).is_ok());
    }
}
