//! Additive steering along comprehension vectors and regime classification.

use std::collections::BTreeMap;

use emogeom_core::capture::LayerLocus;
use emogeom_core::geometry::SteeringRegime;
use emogeom_core::record::BackendKind;
use emogeom_core::steering::{classify_regime, strength_ladder, RegimeThresholds, SteeringTrace, DEFAULT_MULTIPLIERS};
use emogeom_core::vocab::{emotion_index, generation_subset, EmotionVocabulary};
use emogeom_core::{norm, Error as CoreError};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::forward::{Addition, HookName, Hooks};
use crate::lm::{GenerateOptions, LanguageModel};
use crate::registry::{load_vector_set, read_json, write_json, Artifact, DirLock, RunManifest};

use super::comprehension::{load_descriptors, load_sweep};
use super::Context;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    /// Emotions whose vectors are steered along; each yields one trace.
    pub emotions: Vec<String>,
    pub multipliers: Vec<f64>,
    pub thresholds: RegimeThresholds,
    pub max_new_tokens: usize,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            emotions: generation_subset(&EmotionVocabulary::canonical()),
            multipliers: DEFAULT_MULTIPLIERS.to_vec(),
            thresholds: RegimeThresholds::default(),
            max_new_tokens: 40,
        }
    }
}

/// Greedy completion of `prompt` with `strength * vector` added to the
/// post-block residual of `layer` from the last prompt position on.
pub fn apply_steering(
    model: &LanguageModel,
    vector: &[f32],
    layer: usize,
    strength: f64,
    prompt: &str,
    max_new_tokens: usize,
) -> Result<String> {
    if model.backend != BackendKind::NamedHook {
        return Err(CoreError::Capability {
            backend: model.backend.as_str().into(),
            action: "steer through residual hooks".into(),
        }
        .into());
    }
    if vector.len() != model.d_model() {
        return Err(CoreError::Dimension {
            expected: model.d_model(),
            found: vector.len(),
        }
        .into());
    }
    if (norm(vector) - 1.0).abs() > 1e-4 {
        return Err(Error::Validation("steering vector must be unit-normalized".into()));
    }
    if layer >= model.n_layers() {
        return Err(CoreError::Argument(format!("layer {layer} out of range")).into());
    }
    let tokens = model.encode_prompt(prompt, false)?;
    let hook: HookName = LayerLocus::ResidPost(layer).to_string().parse().map_err(Error::Validation)?;
    let hooks = Hooks {
        capture: Vec::new(),
        add: vec![Addition {
            hook,
            vector: vector.iter().map(|&x| (strength * x as f64) as f32).collect(),
            from_position: tokens.len() - 1,
        }],
    };
    let opts = GenerateOptions {
        max_new_tokens,
        sampling: None,
        stop_tokens: model.stop_tokens(),
    };
    let out = model.generate(&tokens, &opts, &hooks)?;
    model.tokenizer.decode(&out)
}

/// Severity order used to break ties between equally common regimes.
fn severity(r: SteeringRegime) -> u8 {
    match r {
        SteeringRegime::Explosive => 3,
        SteeringRegime::RepetitiveCollapse => 2,
        SteeringRegime::Surgical => 1,
        SteeringRegime::NotAvailable => 0,
    }
}

/// Most common regime across traces; ties go to the more severe regime.
pub fn aggregate_regime(regimes: &[SteeringRegime]) -> Option<SteeringRegime> {
    let mut counts: BTreeMap<u8, (usize, SteeringRegime)> = BTreeMap::new();
    for &r in regimes {
        counts.entry(severity(r)).or_insert((0, r)).0 += 1;
    }
    counts
        .into_iter()
        .max_by_key(|(sev, (n, _))| (*n, *sev))
        .map(|(_, (_, r))| r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringFile {
    pub model_id: String,
    pub layer: usize,
    pub prompt: String,
    pub mean_residual_norm: f64,
    pub multipliers: Vec<f64>,
    pub strengths: Vec<f64>,
    pub thresholds: RegimeThresholds,
    pub per_emotion_regime: Vec<(String, SteeringRegime)>,
    pub regime: SteeringRegime,
    pub traces: Vec<SteeringTrace>,
}

impl SteeringFile {
    /// Re-derives every regime from the stored scores and flags alone.
    pub fn replay(&self) -> Result<(Vec<SteeringRegime>, Option<SteeringRegime>)> {
        let per: Vec<SteeringRegime> = self
            .traces
            .iter()
            .map(|t| classify_regime(t, &self.thresholds))
            .collect::<emogeom_core::Result<_>>()?;
        let agg = aggregate_regime(&per);
        Ok((per, agg))
    }
}

/// Steers a named-hook model at its persisted best layer along each
/// configured emotion's unit vector and records the traces and regime.
pub fn run_steering(ctx: &Context, model: &LanguageModel, cfg: &SteeringConfig) -> Result<(SteeringFile, RunManifest)> {
    cfg.thresholds.validate()?;
    let model_id = &model.model_id;
    let _lock = DirLock::acquire(&ctx.layout.model_dir(model_id))?;
    let sweep = load_sweep(ctx, model_id)?;
    let layer = sweep.best_layer;
    let mean_norm = sweep.neutral_mean_norm.get(layer).copied().flatten().ok_or_else(|| {
        Error::Validation(format!("no finite neutral residual norm at layer {layer}"))
    })?;
    let strengths = strength_ladder(mean_norm, &cfg.multipliers)?;
    let (set, _) = load_vector_set(&ctx.layout.layer_dir(model_id, layer))?;
    let mut manifest = ctx.manifest("steer", model, Vec::new(), vec![format!("steering layer {layer}")]);

    let mut traces = Vec::with_capacity(cfg.emotions.len());
    for emotion in &cfg.emotions {
        let i = emotion_index(emotion)
            .ok_or_else(|| Error::Validation(format!("unknown steering emotion '{emotion}'")))?;
        let row = set.row(i);
        let n = norm(row);
        if !(n > 0.0 && n.is_finite()) {
            return Err(CoreError::ZeroNorm(emotion.clone()).into());
        }
        let unit: Vec<f32> = row.iter().map(|&x| (x as f64 / n) as f32).collect();
        let completions = strengths
            .iter()
            .map(|&s| apply_steering(model, &unit, layer, s, &ctx.corpus.steering_prompt, cfg.max_new_tokens))
            .collect::<Result<Vec<_>>>()?;
        traces.push(SteeringTrace::from_completions(model_id, layer, emotion, strengths.clone(), completions)?);
    }
    let per = traces
        .iter()
        .map(|t| classify_regime(t, &cfg.thresholds))
        .collect::<emogeom_core::Result<Vec<_>>>()?;
    let regime = aggregate_regime(&per).ok_or_else(|| Error::Validation("no steering emotions configured".into()))?;
    let file = SteeringFile {
        model_id: model_id.clone(),
        layer,
        prompt: ctx.corpus.steering_prompt.clone(),
        mean_residual_norm: mean_norm,
        multipliers: cfg.multipliers.clone(),
        strengths,
        thresholds: cfg.thresholds,
        per_emotion_regime: cfg.emotions.iter().cloned().zip(per).collect(),
        regime,
        traces,
    };
    manifest.finish();
    write_json(&ctx.layout.steering_traces(model_id), &Artifact::new(&manifest.manifest_id, &file))?;
    manifest.write(&ctx.layout)?;

    let mut desc = load_descriptors(ctx, model_id)?;
    desc.body.descriptors.steering_regime = regime;
    write_json(&ctx.layout.descriptors(model_id), &desc)?;
    Ok((file, manifest))
}

pub fn load_steering(path: &std::path::Path) -> Result<Artifact<SteeringFile>> {
    read_json(path)
}
