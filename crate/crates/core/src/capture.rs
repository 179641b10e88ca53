//! Backend-independent capture vocabulary: where a layer lives in each
//! backend style, which token position to read, and the captured matrix.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::math::all_finite;
use crate::record::{BackendKind, ModelRecord};
use crate::{Error, Result};

/// Which token position of a sequence to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    LastContentToken,
    ExplicitIndex(usize),
    /// `prompt_len + generated_len / 2`; resolved by the generation pipeline.
    MidGeneration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureRequest {
    pub text: String,
    pub layers: BTreeSet<usize>,
    pub position_policy: PositionPolicy,
    pub apply_chat_template: bool,
}

impl CaptureRequest {
    /// Plain forward pass at the last content token, no chat template.
    pub fn comprehension(text: impl Into<String>, layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            text: text.into(),
            layers: layers.into_iter().collect(),
            position_policy: PositionPolicy::LastContentToken,
            apply_chat_template: false,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Argument("capture request names no layers".into()));
        }
        if let Some(&bad) = self.layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Argument(format!(
                "layer {bad} out of range ({n_layers} layers)"
            )));
        }
        Ok(())
    }
}

/// Backend-specific location of the post-block residual state of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerLocus {
    /// `blocks.{N}.hook_resid_post`
    ResidPost(usize),
    /// Index into the hidden-state tuple, embeddings at 0.
    HiddenStateIndex(usize),
}

impl fmt::Display for LayerLocus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ResidPost(n) => write!(f, "blocks.{n}.hook_resid_post"),
            Self::HiddenStateIndex(i) => write!(f, "hidden_states[{i}]"),
        }
    }
}

pub fn map_layer_locus(kind: BackendKind, layer: usize, n_layers: usize) -> Result<LayerLocus> {
    if layer >= n_layers {
        return Err(Error::Argument(format!(
            "layer {layer} out of range ({n_layers} layers)"
        )));
    }
    Ok(match kind {
        BackendKind::NamedHook => LayerLocus::ResidPost(layer),
        BackendKind::HiddenStateSequence => LayerLocus::HiddenStateIndex(layer + 1),
    })
}

/// Index of the last content (non-padding) token; works for left or right
/// padding.
pub fn last_content_position(attention_mask: &[u8]) -> Result<usize> {
    attention_mask
        .iter()
        .rposition(|&m| m != 0)
        .ok_or_else(|| Error::Argument("attention mask has no content tokens".into()))
}

/// One `d_model` row per captured item at a single layer. Non-finite rows are
/// kept and flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMatrix {
    pub model: ModelRecord,
    pub layer: usize,
    rows: Vec<f32>,
    nan_flags: Vec<bool>,
}

impl ActivationMatrix {
    pub fn from_rows(model: ModelRecord, layer: usize, rows: Vec<Vec<f32>>) -> Result<Self> {
        let d = model.d_model;
        let mut flat = Vec::with_capacity(rows.len() * d);
        let mut flags = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::Argument(format!(
                    "row {i} has {} values, expected {d}",
                    r.len()
                )));
            }
            flags.push(!all_finite(r));
            flat.extend_from_slice(r);
        }
        Ok(Self {
            model,
            layer,
            rows: flat,
            nan_flags: flags,
        })
    }

    pub fn len(&self) -> usize {
        self.nan_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nan_flags.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.model.d_model;
        &self.rows[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.rows.chunks_exact(self.model.d_model)
    }

    pub fn nan_flags(&self) -> &[bool] {
        &self.nan_flags
    }

    pub fn any_non_finite(&self) -> bool {
        self.nan_flags.iter().any(|&f| f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::tests::record;
    use alloc::vec;

    #[test]
    fn hidden_state_sequence_offsets_by_one() {
        let hs = BackendKind::HiddenStateSequence;
        assert_eq!(map_layer_locus(hs, 11, 28).unwrap(), LayerLocus::HiddenStateIndex(12));
        assert_eq!(map_layer_locus(hs, 0, 28).unwrap(), LayerLocus::HiddenStateIndex(1));
        let hook = map_layer_locus(BackendKind::NamedHook, 11, 28).unwrap();
        assert_eq!(hook, LayerLocus::ResidPost(11));
        assert_eq!(alloc::string::ToString::to_string(&hook), "blocks.11.hook_resid_post");
        assert!(map_layer_locus(hs, 28, 28).is_err());
    }

    #[test]
    fn last_content_position_examples() {
        assert_eq!(last_content_position(&[1, 1, 1, 0, 0]).unwrap(), 2);
        assert_eq!(last_content_position(&[1]).unwrap(), 0);
        assert_eq!(last_content_position(&[0, 1, 1]).unwrap(), 2);
        assert!(last_content_position(&[0, 0]).is_err());
        assert!(last_content_position(&[]).is_err());
    }

    #[test]
    fn last_content_position_matches_scan_for_all_short_masks() {
        for len in 1..=4usize {
            for bits in 0u32..(1 << len) {
                let mask: Vec<u8> = (0..len).map(|i| ((bits >> i) & 1) as u8).collect();
                let mut oracle = None;
                for (i, &m) in mask.iter().enumerate() {
                    if m == 1 {
                        oracle = Some(i);
                    }
                }
                assert_eq!(last_content_position(&mask).ok(), oracle, "mask {mask:?}");
            }
        }
    }

    #[test]
    fn activation_matrix_flags_non_finite_rows() {
        let m = ActivationMatrix::from_rows(
            record(2, 3),
            1,
            vec![vec![1.0, 2.0], vec![f32::NAN, 0.0], vec![f32::INFINITY, 1.0]],
        )
        .unwrap();
        assert_eq!(m.nan_flags(), &[false, true, true]);
        assert!(m.any_non_finite());
        assert!(ActivationMatrix::from_rows(record(2, 3), 0, vec![vec![1.0]]).is_err());
    }

    #[test]
    fn request_layers_are_range_checked() {
        let r = CaptureRequest::comprehension("x", [0, 3]);
        assert!(r.validate(4).is_ok());
        assert!(r.validate(3).is_err());
    }
}
