//! Generation extraction: templated story prompts, decoding, and capture at
//! the protocol's position and layer.

use std::collections::HashMap;

use emogeom_core::genprotocol::{
    build_generation_vectors, extraction_position, resolve_layer, Centering, GenerationProtocol, GenerationRun,
    GenerationSample, GenerationVectors,
};
use emogeom_core::vocab::{generation_subset, EmotionVocabulary};
use serde::{Deserialize, Serialize};

use crate::capture::rows_at;
use crate::error::{Error, Result};
use crate::lm::forward::Hooks;
use crate::lm::{GenerateOptions, LanguageModel, Sampling};
use crate::registry::{write_f32, write_json, write_rdm, Artifact, RunManifest};
use crate::stimuli::CorpusBundle;

use super::Context;

struct Decoded {
    generated: Vec<u32>,
    activation: Option<Vec<f32>>,
}

/// Runs the protocol over the 20 generation emotions (and the neutral
/// stories when centering on the neutral baseline).
///
/// Greedy decoding of an identical prompt is deterministic, so repeated
/// generations of the same prompt are decoded once and reused.
pub fn run_generation(
    model: &LanguageModel,
    protocol: &GenerationProtocol,
    corpus: &CorpusBundle,
    best_layer: Option<usize>,
) -> Result<GenerationRun> {
    protocol.validate()?;
    if model.precision != protocol.precision {
        return Err(Error::Validation(format!(
            "protocol requires {} but the model is loaded at {}",
            protocol.precision, model.precision
        )));
    }
    if protocol.apply_chat_template && model.chat_template.is_none() {
        return Err(Error::Capability(format!(
            "{} has no chat template; the protocol applies one",
            model.model_id
        )));
    }
    if protocol.templates_per_emotion > corpus.story_templates.len() {
        return Err(Error::Validation(format!(
            "protocol wants {} templates, corpus has {}",
            protocol.templates_per_emotion,
            corpus.story_templates.len()
        )));
    }
    let layer = resolve_layer(protocol.extraction_layer, model.n_layers(), best_layer)?;
    let stop_tokens = model.stop_tokens();
    let mut memo: HashMap<Vec<u32>, (Vec<u32>, Option<Vec<f32>>)> = HashMap::new();
    let mut sample_index = 0u64;

    let mut decode = |prompt_text: &str| -> Result<(usize, Decoded)> {
        let prompt = model.encode_prompt(prompt_text, protocol.apply_chat_template)?;
        let seed = protocol.sampling.seed.wrapping_add(sample_index);
        sample_index += 1;
        if protocol.deterministic_decoding {
            if let Some((generated, activation)) = memo.get(&prompt) {
                let d = Decoded {
                    generated: generated.clone(),
                    activation: activation.clone(),
                };
                return Ok((prompt.len(), d));
            }
        }
        let opts = GenerateOptions {
            max_new_tokens: protocol.max_new_tokens,
            sampling: (!protocol.deterministic_decoding).then_some(Sampling {
                temperature: protocol.sampling.temperature,
                top_p: protocol.sampling.top_p,
                seed,
            }),
            stop_tokens: stop_tokens.clone(),
        };
        let generated = model.generate(&prompt, &opts, &Hooks::default())?;
        let activation = match extraction_position(protocol.extraction_position, prompt.len(), generated.len()) {
            None => None,
            Some(pos) => {
                let full: Vec<u32> = prompt.iter().chain(&generated).copied().collect();
                rows_at(model, &full, &[layer], pos)?.remove(&layer)
            }
        };
        if protocol.deterministic_decoding {
            memo.insert(prompt.clone(), (generated.clone(), activation.clone()));
        }
        Ok((prompt.len(), Decoded { generated, activation }))
    };

    let mut sample = |prompt_text: &str, template_index: usize, generation_index: usize| -> Result<GenerationSample> {
        let (prompt_len, d) = decode(prompt_text)?;
        Ok(GenerationSample {
            template_index,
            generation_index,
            text: model.tokenizer.decode(&d.generated)?,
            prompt_len,
            generated_len: d.generated.len(),
            degenerate: d.activation.is_none(),
            activation: d.activation.unwrap_or_default(),
        })
    };

    let labels = generation_subset(&EmotionVocabulary::canonical());
    let mut per_emotion_samples = Vec::with_capacity(labels.len());
    for label in labels {
        let mut samples = Vec::with_capacity(protocol.samples_per_emotion());
        for t in 0..protocol.templates_per_emotion {
            let prompt = corpus.story_prompt(t, &label);
            for g in 0..protocol.generations_per_template {
                samples.push(sample(&prompt, t, g)?);
            }
        }
        per_emotion_samples.push((label, samples));
    }
    let mut neutral_samples = Vec::new();
    if protocol.centering == Centering::NeutralBaseline {
        for (i, story) in corpus.neutral_stories.iter().enumerate() {
            neutral_samples.push(sample(story, i, 0)?);
        }
    }
    let run = GenerationRun {
        model_id: model.model_id.clone(),
        layer,
        protocol: protocol.clone(),
        per_emotion_samples,
        neutral_samples,
    };
    run.check_counts(corpus.neutral_stories.len())?;
    Ok(run)
}

/// One persisted sample without its activation (stored in
/// `activations.f32`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub emotion: String,
    pub template_index: usize,
    pub generation_index: usize,
    pub text: String,
    pub prompt_len: usize,
    pub generated_len: usize,
    pub degenerate: bool,
    /// Row in `activations.f32`, absent for degenerate samples.
    pub activation_row: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesFile {
    pub model_id: String,
    pub layer: usize,
    pub d_model: usize,
    pub protocol: GenerationProtocol,
    pub degenerate_count: usize,
    pub degenerate_policy: String,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationVectorMeta {
    pub model_id: String,
    pub layer: usize,
    pub labels: Vec<String>,
    pub d_model: usize,
    pub unit_normalized: bool,
    pub dtype: String,
}

pub const DEGENERATE_POLICY: &str = "samples with zero generated tokens are excluded from the means";

/// Writes samples, activations, vectors and the RDM under
/// `generation/<label>/`.
pub fn persist_generation(
    ctx: &Context,
    label: &str,
    run: &GenerationRun,
    vectors: &GenerationVectors,
    manifest: &RunManifest,
) -> Result<()> {
    let dir = ctx.layout.generation_dir(&run.model_id, label);
    let id = &manifest.manifest_id;
    let mut rows: Vec<f32> = Vec::new();
    let mut samples = Vec::new();
    let all = run
        .per_emotion_samples
        .iter()
        .flat_map(|(e, s)| s.iter().map(move |x| (e.as_str(), x)))
        .chain(run.neutral_samples.iter().map(|x| ("neutral", x)));
    let mut next_row = 0usize;
    for (emotion, s) in all {
        let activation_row = (!s.activation.is_empty()).then(|| {
            rows.extend_from_slice(&s.activation);
            next_row += 1;
            next_row - 1
        });
        samples.push(SampleRecord {
            emotion: emotion.into(),
            template_index: s.template_index,
            generation_index: s.generation_index,
            text: s.text.clone(),
            prompt_len: s.prompt_len,
            generated_len: s.generated_len,
            degenerate: s.degenerate,
            activation_row,
        });
    }
    write_f32(&dir.join("activations.f32"), &rows)?;
    let file = SamplesFile {
        model_id: run.model_id.clone(),
        layer: run.layer,
        d_model: vectors.d_model,
        protocol: run.protocol.clone(),
        degenerate_count: run.degenerate_count(),
        degenerate_policy: DEGENERATE_POLICY.into(),
        samples,
    };
    write_json(&dir.join("samples.json"), &Artifact::new(id, file))?;
    write_f32(&dir.join("vectors.f32"), vectors.as_slice())?;
    let meta = GenerationVectorMeta {
        model_id: vectors.model_id.clone(),
        layer: vectors.layer,
        labels: vectors.labels.clone(),
        d_model: vectors.d_model,
        unit_normalized: true,
        dtype: "f32le".into(),
    };
    write_json(&dir.join("meta.json"), &Artifact::new(id, meta))?;
    write_rdm(&dir.join("rdm.json"), &vectors.rdm()?, id)?;
    manifest.write(&ctx.layout)
        .map(|_| ())
}

/// Runs, builds vectors and persists one generation configuration.
pub fn run_and_persist(
    ctx: &Context,
    model: &LanguageModel,
    label: &str,
    protocol: &GenerationProtocol,
    best_layer: Option<usize>,
) -> Result<(GenerationRun, GenerationVectors, RunManifest)> {
    let seeds = if protocol.deterministic_decoding {
        Vec::new()
    } else {
        vec![protocol.sampling.seed]
    };
    let mut manifest = ctx.manifest(
        "gen-extract",
        model,
        seeds,
        vec![format!("generation preset {label}"), DEGENERATE_POLICY.into()],
    );
    let run = run_generation(model, protocol, &ctx.corpus, best_layer)?;
    let vectors = build_generation_vectors(&run)?;
    manifest.finish();
    persist_generation(ctx, label, &run, &vectors, &manifest)?;
    Ok((run, vectors, manifest))
}
