//! Comprehension extraction: passage capture at every layer, centered
//! vectors, the layer sweep and the best-layer descriptors.

use std::collections::BTreeMap;

use emogeom_core::comprehension::{build_emotion_vectors, layer_mean_cosine, LayerSweep};
use emogeom_core::geometry::{anisotropy, compute_rdm, descriptors, GeometryDescriptors, LayerAnisotropy, Rdm};
use emogeom_core::record::{EmotionVectorSet, ModelRecord};
use emogeom_core::{norm, Error as CoreError};
use serde::{Deserialize, Serialize};

use crate::capture::capture_texts;
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::registry::{
    load_vector_set, persist_vector_set, read_json, write_json, write_rdm, Artifact, DirLock, ReferenceDepth, RunLayout,
    RunManifest, SweepFile,
};
use crate::stimuli::CorpusBundle;

use super::Context;

/// Fractions of depth at which anisotropy is also reported.
pub const REFERENCE_FRACTIONS: [f64; 2] = [0.5, 0.75];

/// Passage activations per layer, grouped by emotion in vocabulary order.
pub type PassageActivations = BTreeMap<usize, Vec<Vec<Vec<f32>>>>;

pub fn passage_activations(
    model: &LanguageModel,
    record: &ModelRecord,
    corpus: &CorpusBundle,
    layers: &[usize],
) -> Result<PassageActivations> {
    let mut out: PassageActivations = layers.iter().map(|&l| (l, Vec::new())).collect();
    for (_, passages) in corpus.passages_in_order() {
        let per_layer = capture_texts(model, record, passages, layers, false)?;
        for (l, m) in per_layer {
            out.get_mut(&l)
                .expect("requested layer")
                .push(m.rows().map(<[f32]>::to_vec).collect());
        }
    }
    Ok(out)
}

/// Centered set at one layer, or `None` when an emotion has no finite
/// passage activation there.
pub fn vectors_at(record: &ModelRecord, layer: usize, groups: &[Vec<Vec<f32>>]) -> Result<Option<EmotionVectorSet>> {
    let views: Vec<Vec<&[f32]>> = groups
        .iter()
        .map(|g| g.iter().map(Vec::as_slice).collect())
        .collect();
    match build_emotion_vectors(record, layer, &views) {
        Ok(set) => Ok(Some(set)),
        Err(CoreError::Extraction { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Centered vector set at a single layer.
pub fn emotion_set_at(
    model: &LanguageModel,
    record: &ModelRecord,
    corpus: &CorpusBundle,
    layer: usize,
) -> Result<EmotionVectorSet> {
    let acts = passage_activations(model, record, corpus, &[layer])?;
    vectors_at(record, layer, &acts[&layer])?.ok_or_else(|| {
        Error::Capture {
            model_id: record.model_id.clone(),
            layer,
            reason: "an emotion has no finite passage activation".into(),
        }
    })
}

pub fn reference_layer(fraction: f64, n_layers: usize) -> usize {
    ((fraction * n_layers as f64).floor() as usize).min(n_layers - 1)
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub record: ModelRecord,
    pub sweep: LayerSweep,
    /// One entry per layer; `None` where the layer is null.
    pub sets: Vec<Option<EmotionVectorSet>>,
    pub neutral_anisotropy: Vec<Option<f64>>,
    pub neutral_mean_norm: Vec<Option<f64>>,
    pub reference_depths: Vec<ReferenceDepth>,
    pub best_rdm: Rdm,
    pub descriptors: GeometryDescriptors,
}

impl SweepOutput {
    pub fn best_set(&self) -> &EmotionVectorSet {
        self.sets[self.sweep.best_layer].as_ref().expect("best layer is non-null")
    }

    pub fn sweep_file(&self) -> SweepFile {
        SweepFile {
            model: self.record.clone(),
            per_layer_mean_cosine: self.sweep.per_layer_mean_cosine.clone(),
            neutral_anisotropy: self.neutral_anisotropy.clone(),
            neutral_mean_norm: self.neutral_mean_norm.clone(),
            best_layer: self.sweep.best_layer,
            best_layer_pct: self.sweep.best_layer_pct,
            first_null_layer: self.sweep.first_null_layer(),
            reference_depths: self.reference_depths.clone(),
        }
    }
}

/// Full layer sweep over the corpus.
pub fn sweep_model(model: &LanguageModel, record: &ModelRecord, corpus: &CorpusBundle) -> Result<SweepOutput> {
    let n = model.n_layers();
    let layers: Vec<usize> = (0..n).collect();
    let acts = passage_activations(model, record, corpus, &layers)?;
    let mut sets = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for l in 0..n {
        let set = vectors_at(record, l, &acts[&l])?;
        values.push(set.as_ref().and_then(layer_mean_cosine));
        sets.push(set);
    }
    let sweep = LayerSweep::from_values(values)?;

    let neutral = capture_texts(model, record, &corpus.neutral_sentences, &layers, false)?;
    let neutral_anisotropy: Vec<Option<f64>> = layers.iter().map(|l| anisotropy(&neutral[l]).ok()).collect();
    let neutral_mean_norm: Vec<Option<f64>> = layers
        .iter()
        .map(|l| {
            let m = &neutral[l];
            (!m.any_non_finite()).then(|| m.rows().map(norm).sum::<f64>() / m.len() as f64)
        })
        .collect();
    let reference_depths = REFERENCE_FRACTIONS
        .iter()
        .map(|&fraction| {
            let layer = reference_layer(fraction, n);
            ReferenceDepth {
                fraction,
                layer,
                anisotropy: neutral_anisotropy[layer],
            }
        })
        .collect();

    let best = sweep.best_layer;
    let best_set = sets[best].as_ref().expect("best layer is non-null");
    let best_rdm = compute_rdm(best_set)?;
    let value = neutral_anisotropy[best].ok_or_else(|| Error::Capture {
        model_id: record.model_id.clone(),
        layer: best,
        reason: "neutral activations are non-finite at the best layer".into(),
    })?;
    let descriptors = descriptors(record, &sweep, &best_rdm, LayerAnisotropy { layer: best, value }, None)?;
    Ok(SweepOutput {
        record: record.clone(),
        sweep,
        sets,
        neutral_anisotropy,
        neutral_mean_norm,
        reference_depths,
        best_rdm,
        descriptors,
    })
}

/// Top-level `meta.json` of a model directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: ModelRecord,
    pub corpus_hash: String,
    pub corpus_stand_in: bool,
    pub passages: usize,
    pub neutral_sentences: usize,
    pub apply_chat_template: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorsFile {
    pub model: ModelRecord,
    pub descriptors: GeometryDescriptors,
    pub reference_depths: Vec<ReferenceDepth>,
}

pub fn persist_sweep(out: &SweepOutput, ctx: &Context, manifest: &RunManifest) -> Result<()> {
    let id = &manifest.manifest_id;
    let model_id = &out.record.model_id;
    let dir = ctx.layout.model_dir(model_id);
    for set in out.sets.iter().flatten() {
        persist_vector_set(set, &dir, id)?;
        if let Ok(rdm) = compute_rdm(set) {
            write_rdm(&ctx.layout.layer_dir(model_id, set.layer).join("rdm.json"), &rdm, id)?;
        }
    }
    write_json(&ctx.layout.sweep(model_id), &Artifact::new(id, out.sweep_file()))?;
    let descriptors = DescriptorsFile {
        model: out.record.clone(),
        descriptors: out.descriptors.clone(),
        reference_depths: out.reference_depths.clone(),
    };
    write_json(&ctx.layout.descriptors(model_id), &Artifact::new(id, descriptors))?;
    let meta = ModelMeta {
        model: out.record.clone(),
        corpus_hash: ctx.corpus.content_hash(),
        corpus_stand_in: ctx.corpus.stand_in,
        passages: ctx.corpus.passage_count(),
        neutral_sentences: ctx.corpus.neutral_sentences.len(),
        apply_chat_template: false,
    };
    write_json(&ctx.layout.meta(model_id), &Artifact::new(id, meta))?;
    manifest.write(&ctx.layout)?;
    Ok(())
}

/// Sweeps a loaded model and persists everything under its model directory.
pub fn run_extract(ctx: &Context, model: &LanguageModel, record: &ModelRecord) -> Result<(SweepOutput, RunManifest)> {
    let _lock = DirLock::acquire(&ctx.layout.model_dir(&model.model_id))?;
    let mut manifest = ctx.manifest("extract", model, Vec::new(), Vec::new());
    let out = sweep_model(model, record, &ctx.corpus)?;
    manifest.finish();
    persist_sweep(&out, ctx, &manifest)?;
    Ok((out, manifest))
}

pub fn load_sweep(ctx: &Context, model_id: &str) -> Result<SweepFile> {
    Ok(read_json::<Artifact<SweepFile>>(&ctx.layout.sweep(model_id))?.body)
}

pub fn load_descriptors(ctx: &Context, model_id: &str) -> Result<Artifact<DescriptorsFile>> {
    read_json(&ctx.layout.descriptors(model_id))
}

/// Recomputes the layer sweep, RDMs and descriptors of a model from its
/// persisted vectors, without loading the model. `layers` limits which
/// layers get their `rdm.json` rewritten; the sweep always uses all of them.
pub fn reanalyze(layout: &RunLayout, model_id: &str, layers: Option<&[usize]>) -> Result<DescriptorsFile> {
    let _lock = DirLock::acquire(&layout.model_dir(model_id))?;
    let sweep_art: Artifact<SweepFile> = read_json(&layout.sweep(model_id))?;
    let old: Artifact<DescriptorsFile> = read_json(&layout.descriptors(model_id))?;
    let mut file = sweep_art.body;
    let n = file.model.n_layers;
    if let Some(ls) = layers {
        if let Some(&bad) = ls.iter().find(|&&l| l >= n) {
            return Err(CoreError::Argument(format!("layer {bad} out of range for {n} layers")).into());
        }
    }
    let mut values = Vec::with_capacity(n);
    let mut best_rdms = BTreeMap::new();
    for l in 0..n {
        let dir = layout.layer_dir(model_id, l);
        if !dir.join("vectors.f32").is_file() {
            values.push(None);
            continue;
        }
        let (set, id) = load_vector_set(&dir)?;
        values.push(layer_mean_cosine(&set));
        if let Ok(rdm) = compute_rdm(&set) {
            if layers.is_none_or(|ls| ls.contains(&l)) {
                write_rdm(&dir.join("rdm.json"), &rdm, &id)?;
            }
            best_rdms.insert(l, rdm);
        }
    }
    let sweep = LayerSweep::from_values(values)?;
    let best = sweep.best_layer;
    let rdm = best_rdms.remove(&best).ok_or_else(|| Error::Validation(format!("no RDM at best layer {best}")))?;
    let value = file
        .neutral_anisotropy
        .get(best)
        .copied()
        .flatten()
        .ok_or_else(|| Error::Validation(format!("no finite anisotropy at best layer {best}")))?;
    let regime = Some(old.body.descriptors.steering_regime);
    let d = descriptors(&file.model, &sweep, &rdm, LayerAnisotropy { layer: best, value }, regime)?;
    file.per_layer_mean_cosine = sweep.per_layer_mean_cosine.clone();
    file.best_layer = best;
    file.best_layer_pct = sweep.best_layer_pct;
    file.first_null_layer = sweep.first_null_layer();
    write_json(&layout.sweep(model_id), &Artifact::new(&sweep_art.manifest_id, &file))?;
    let out = DescriptorsFile {
        model: old.body.model,
        descriptors: d,
        reference_depths: old.body.reference_depths,
    };
    write_json(&layout.descriptors(model_id), &Artifact::new(&old.manifest_id, &out))?;
    Ok(out)
}
