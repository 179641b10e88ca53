//! Residual capture through a loaded model, producing core activation
//! matrices.

use std::collections::BTreeMap;

use emogeom_core::capture::{last_content_position, ActivationMatrix, CaptureRequest, PositionPolicy};
use emogeom_core::record::{ModelRecord, Variant};

use crate::error::{Error, Result};
use crate::lm::LanguageModel;

/// The record describing a loaded model. Table metadata, when given, must
/// agree with the checkpoint's shape; backend and precision always come from
/// the loaded handle.
pub fn model_record(model: &LanguageModel, table: Option<&ModelRecord>) -> Result<ModelRecord> {
    let (n_layers, d_model) = (model.n_layers(), model.d_model());
    let record = match table {
        Some(t) => {
            if t.n_layers != n_layers || t.d_model != d_model {
                return Err(Error::Validation(format!(
                    "{}: table lists {} layers x {}, checkpoint has {n_layers} x {d_model}",
                    t.model_id, t.n_layers, t.d_model
                )));
            }
            ModelRecord {
                backend_kind: model.backend,
                precision: model.precision,
                ..t.clone()
            }
        }
        None => ModelRecord {
            model_id: model.model_id.clone(),
            family: family_of(&model.model_id),
            variant: if model.chat_template.is_some() {
                Variant::Instruct
            } else {
                Variant::Base
            },
            size_b: model.parameter_count() as f64 / 1e9,
            n_layers,
            d_model,
            backend_kind: model.backend,
            precision: model.precision,
        },
    };
    record.validate()?;
    Ok(record)
}

fn family_of(model_id: &str) -> String {
    let name = model_id.rsplit('/').next().unwrap_or(model_id);
    name.split(['-', '_']).next().unwrap_or(name).to_string()
}

/// Token position a policy selects in a single unpadded sequence.
pub fn resolve_position(policy: PositionPolicy, len: usize) -> Result<usize> {
    match policy {
        PositionPolicy::LastContentToken => Ok(last_content_position(&vec![1u8; len])?),
        PositionPolicy::ExplicitIndex(i) if i < len => Ok(i),
        PositionPolicy::ExplicitIndex(i) => Err(Error::Validation(format!(
            "position {i} outside a {len}-token sequence"
        ))),
        PositionPolicy::MidGeneration => Err(Error::Validation(
            "mid-generation positions are resolved by the generation pipeline".into(),
        )),
    }
}

/// Rows at `position` of a full-sequence forward pass, one per layer.
pub fn rows_at(model: &LanguageModel, tokens: &[u32], layers: &[usize], position: usize) -> Result<BTreeMap<usize, Vec<f32>>> {
    let d = model.d_model();
    let states = model.residual_rows(tokens, layers).map_err(|e| match e {
        Error::Core(_) | Error::Validation(_) => e,
        other => Error::Capture {
            model_id: model.model_id.clone(),
            layer: layers.first().copied().unwrap_or(0),
            reason: other.to_string(),
        },
    })?;
    Ok(states
        .into_iter()
        .map(|(l, s)| (l, s[position * d..(position + 1) * d].to_vec()))
        .collect())
}

/// Captures one request; returns one single-row matrix per requested layer.
pub fn capture(model: &LanguageModel, record: &ModelRecord, request: &CaptureRequest) -> Result<Vec<ActivationMatrix>> {
    request.validate(model.n_layers())?;
    let tokens = model.encode_prompt(&request.text, request.apply_chat_template)?;
    let pos = resolve_position(request.position_policy, tokens.len())?;
    let layers: Vec<usize> = request.layers.iter().copied().collect();
    rows_at(model, &tokens, &layers, pos)?
        .into_iter()
        .map(|(l, row)| Ok(ActivationMatrix::from_rows(record.clone(), l, vec![row])?))
        .collect()
}

/// Captures every text unbatched at its last token; one matrix per layer
/// with rows in text order.
pub fn capture_texts(
    model: &LanguageModel,
    record: &ModelRecord,
    texts: &[String],
    layers: &[usize],
    apply_chat_template: bool,
) -> Result<BTreeMap<usize, ActivationMatrix>> {
    let mut per_layer: BTreeMap<usize, Vec<Vec<f32>>> = layers.iter().map(|&l| (l, Vec::new())).collect();
    for text in texts {
        let request = CaptureRequest {
            apply_chat_template,
            ..CaptureRequest::comprehension(text.clone(), layers.iter().copied())
        };
        for m in capture(model, record, &request)? {
            per_layer.get_mut(&m.layer).expect("requested").push(m.row(0).to_vec());
        }
    }
    per_layer
        .into_iter()
        .map(|(l, rows)| Ok((l, ActivationMatrix::from_rows(record.clone(), l, rows)?)))
        .collect()
}
