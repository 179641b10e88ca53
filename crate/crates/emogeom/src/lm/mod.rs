//! A small CPU runtime for Llama-family decoder checkpoints with two
//! capture backends and reduced-precision emulation.

pub mod chat;
pub mod config;
pub mod forward;
pub mod numeric;
pub mod tiny;
pub mod tokenizer;
pub mod weights;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use emogeom_core::capture::{map_layer_locus, LayerLocus};
use emogeom_core::record::{BackendKind, Precision};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use chat::ChatTemplate;
use config::ModelConfig;
use forward::{forward_hidden, forward_named, Folded, HookCache, HookName, Hooks, Kernels, KvCache};
use numeric::Numeric;
use tokenizer::Tokenizer;
use weights::Weights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Builtin(String),
    Directory(PathBuf),
}

pub struct LanguageModel {
    pub model_id: String,
    pub config: ModelConfig,
    pub precision: Precision,
    pub backend: BackendKind,
    pub tokenizer: Tokenizer,
    pub chat_template: Option<ChatTemplate>,
    pub source: ModelSource,
    weights: Weights,
    folded: Option<Folded>,
    inv_freq: Vec<f64>,
}

/// Decoding settings for [`LanguageModel::generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    /// `None` decodes greedily.
    pub sampling: Option<Sampling>,
    pub stop_tokens: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampling {
    pub temperature: f32,
    pub top_p: f32,
    pub seed: u64,
}

impl LanguageModel {
    pub fn new(
        model_id: impl Into<String>,
        config: ModelConfig,
        mut weights: Weights,
        tokenizer: Tokenizer,
        chat_template: Option<ChatTemplate>,
        precision: Precision,
        backend: BackendKind,
        source: ModelSource,
    ) -> Result<Self> {
        config.validate()?;
        weights.cast(precision);
        let num = Numeric(precision);
        let folded = (backend == BackendKind::NamedHook).then(|| Folded::new(&config, &weights, num));
        let inv_freq = config.inv_freq();
        Ok(Self {
            model_id: model_id.into(),
            config,
            precision,
            backend,
            tokenizer,
            chat_template,
            source,
            weights,
            folded,
            inv_freq,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.hidden_size
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.parameter_count()
    }

    fn kernels(&self) -> Kernels<'_> {
        Kernels {
            cfg: &self.config,
            num: Numeric(self.precision),
            inv_freq: &self.inv_freq,
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Validation("empty token sequence".into()));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Validation(format!("token id {t} outside the vocabulary")));
        }
        Ok(())
    }

    /// Full hidden-state list (`n_layers + 1` entries of `tokens × d`).
    /// Only the hidden-state-sequence backend exposes this view.
    pub fn hidden_states(&self, tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
        self.require(BackendKind::HiddenStateSequence, "return a hidden-state sequence")?;
        self.check_tokens(tokens)?;
        let mut cache = KvCache::new(self.n_layers());
        let out = forward_hidden(&self.kernels(), &self.weights, tokens, &mut cache, true);
        Ok(out.hidden_states.expect("requested"))
    }

    /// One forward pass reading and modifying named hook points.
    pub fn run_with_hooks(&self, tokens: &[u32], hooks: &Hooks) -> Result<(Vec<f32>, HookCache)> {
        let folded = self.folded.as_ref().ok_or_else(|| self.capability("run named hooks"))?;
        self.check_tokens(tokens)?;
        let mut cache = KvCache::new(self.n_layers());
        Ok(forward_named(&self.kernels(), folded, &self.weights, tokens, &mut cache, hooks))
    }

    /// Last-position logits for a plain forward pass.
    pub fn logits(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        self.check_tokens(tokens)?;
        let mut cache = KvCache::new(self.n_layers());
        self.step(tokens, &mut cache, &Hooks::default())
    }

    fn step(&self, tokens: &[u32], cache: &mut KvCache, hooks: &Hooks) -> Result<Vec<f32>> {
        match &self.folded {
            Some(f) => Ok(forward_named(&self.kernels(), f, &self.weights, tokens, cache, hooks).0),
            None => {
                if !hooks.add.is_empty() || !hooks.capture.is_empty() {
                    return Err(self.capability("run named hooks"));
                }
                Ok(forward_hidden(&self.kernels(), &self.weights, tokens, cache, false).last_logits)
            }
        }
    }

    /// Post-block residual rows for the requested layers, addressed through
    /// the backend's own locus convention.
    pub fn residual_rows(&self, tokens: &[u32], layers: &[usize]) -> Result<BTreeMap<usize, Vec<f32>>> {
        let n = self.n_layers();
        let loci: Vec<(usize, LayerLocus)> = layers
            .iter()
            .map(|&l| Ok((l, map_layer_locus(self.backend, l, n)?)))
            .collect::<Result<_>>()?;
        match self.backend {
            BackendKind::HiddenStateSequence => {
                let states = self.hidden_states(tokens)?;
                Ok(loci
                    .into_iter()
                    .map(|(l, locus)| match locus {
                        LayerLocus::HiddenStateIndex(i) => (l, states[i].clone()),
                        LayerLocus::ResidPost(_) => unreachable!("hidden-state backend maps to indices"),
                    })
                    .collect())
            }
            BackendKind::NamedHook => {
                let names: Vec<(usize, HookName)> = loci
                    .into_iter()
                    .map(|(l, locus)| {
                        let name: HookName = locus.to_string().parse().expect("locus names a hook point");
                        (l, name)
                    })
                    .collect();
                let hooks = Hooks {
                    capture: names.iter().map(|(_, n)| *n).collect(),
                    add: Vec::new(),
                };
                let (_, mut cache) = self.run_with_hooks(tokens, &hooks)?;
                Ok(names
                    .into_iter()
                    .map(|(l, name)| (l, cache.remove(&name).expect("captured")))
                    .collect())
            }
        }
    }

    /// Autoregressive decoding with a KV cache. Returns the new tokens,
    /// excluding the stop token that ended decoding.
    pub fn generate(&self, prompt: &[u32], opts: &GenerateOptions, hooks: &Hooks) -> Result<Vec<u32>> {
        self.check_tokens(prompt)?;
        let mut rng = opts.sampling.map(|s| ChaCha8Rng::seed_from_u64(s.seed));
        let mut cache = KvCache::new(self.n_layers());
        let mut logits = self.step(prompt, &mut cache, hooks)?;
        let mut out = Vec::new();
        while out.len() < opts.max_new_tokens {
            let next = match (opts.sampling, rng.as_mut()) {
                (Some(s), Some(rng)) => sample(&logits, s, rng),
                _ => argmax(&logits),
            };
            if opts.stop_tokens.contains(&next) {
                break;
            }
            out.push(next);
            if out.len() == opts.max_new_tokens {
                break;
            }
            logits = self.step(&[next], &mut cache, hooks)?;
        }
        Ok(out)
    }

    /// Config EOS ids plus the chat template's turn terminator.
    pub fn stop_tokens(&self) -> Vec<u32> {
        let mut stops = self.config.eos_token_ids.clone();
        if let Some(t) = self.chat_template {
            stops.extend(t.stop_tokens().iter().filter_map(|s| self.tokenizer.token_id(s)));
        }
        stops.sort_unstable();
        stops.dedup();
        stops
    }

    /// Tokenizes a prompt, wrapping it in chat markup when asked.
    pub fn encode_prompt(&self, text: &str, chat: bool) -> Result<Vec<u32>> {
        if chat {
            let t = self.chat_template.ok_or_else(|| {
                Error::Capability(format!("{} has no chat template", self.model_id))
            })?;
            let (wrapped, add) = t.apply(text);
            self.tokenizer.encode(&wrapped, add)
        } else {
            self.tokenizer.encode(text, true)
        }
    }

    fn require(&self, kind: BackendKind, action: &str) -> Result<()> {
        if self.backend == kind {
            Ok(())
        } else {
            Err(self.capability(action))
        }
    }

    fn capability(&self, action: &str) -> Error {
        Error::Core(emogeom_core::Error::Capability {
            backend: self.backend.as_str().into(),
            action: action.into(),
        })
    }

    /// Writes a hub-style directory (config, f32 safetensors, tokenizer
    /// marker) that [`load_model`] can read back.
    pub fn export_dir(&self, dir: &Path) -> Result<()> {
        if self.precision != Precision::Fp32 {
            return Err(Error::Validation("export requires an fp32 model".into()));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.json");
        let json = serde_json::to_string_pretty(&self.config.to_hf_json()).expect("serializable");
        std::fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))?;
        self.weights.save_safetensors(&dir.join("model.safetensors"), &self.config)?;
        let tc = dir.join("tokenizer_config.json");
        let chat = match self.chat_template {
            Some(ChatTemplate::Tiny) => serde_json::json!("<|user|>{{ content }}<|end|><|assistant|>"),
            _ => serde_json::Value::Null,
        };
        let body = serde_json::json!({ "emogeom_tokenizer": "bytes", "chat_template": chat });
        std::fs::write(&tc, body.to_string()).map_err(|e| Error::io(&tc, e))?;
        Ok(())
    }
}

fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] || (logits[best].is_nan() && !x.is_nan()) {
            best = i;
        }
    }
    best as u32
}

fn sample(logits: &[f32], s: Sampling, rng: &mut ChaCha8Rng) -> u32 {
    let t = s.temperature as f64;
    let m = logits.iter().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    if !m.is_finite() {
        return argmax(logits);
    }
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| (i, if x.is_finite() { ((x as f64 - m) / t).exp() } else { 0.0 }))
        .collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (k, p) in probs.iter().enumerate() {
        cum += p.1;
        if cum >= s.top_p as f64 {
            keep = k + 1;
            break;
        }
    }
    probs.truncate(keep);
    let z: f64 = probs.iter().map(|p| p.1).sum();
    let mut u = rng.random::<f64>() * z;
    for &(i, p) in &probs {
        if u < p {
            return i as u32;
        }
        u -= p;
    }
    probs.last().expect("non-empty").0 as u32
}

/// Where to look for checkpoints that are not built in.
#[derive(Debug, Clone, Default)]
pub struct ModelLocator {
    /// Directory of `<model_slug>/` checkpoint folders.
    pub model_dir: Option<PathBuf>,
    /// Hub cache root (`models--org--name/snapshots/...`).
    pub hub_cache: Option<PathBuf>,
}

impl ModelLocator {
    /// Reads `EMOGEOM_MODEL_DIR`, `HF_HUB_CACHE` and `HF_HOME`.
    pub fn from_env() -> Self {
        let hub_cache = std::env::var_os("HF_HUB_CACHE")
            .map(PathBuf::from)
            .or_else(|| std::env::var_os("HF_HOME").map(|h| PathBuf::from(h).join("hub")))
            .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache/huggingface/hub")));
        Self {
            model_dir: std::env::var_os("EMOGEOM_MODEL_DIR").map(PathBuf::from),
            hub_cache,
        }
    }

    pub fn locate(&self, model_id: &str) -> Option<PathBuf> {
        let direct = PathBuf::from(model_id);
        if direct.join("config.json").is_file() {
            return Some(direct);
        }
        if let Some(d) = &self.model_dir {
            let p = d.join(emogeom_core::record::model_slug(model_id));
            if p.join("config.json").is_file() {
                return Some(p);
            }
        }
        let cache = self.hub_cache.as_ref()?;
        let repo = cache.join(format!("models--{}", model_id.replace('/', "--")));
        let snapshots = repo.join("snapshots");
        if let Ok(rev) = std::fs::read_to_string(repo.join("refs/main")) {
            let p = snapshots.join(rev.trim());
            if p.join("config.json").is_file() {
                return Some(p);
            }
        }
        let mut found: Vec<PathBuf> = std::fs::read_dir(&snapshots)
            .ok()?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("config.json").is_file())
            .collect();
        found.sort();
        found.pop()
    }
}

/// Loads a built-in model or a local hub-format checkpoint.
pub fn load_model(
    model_id: &str,
    precision: Precision,
    backend: BackendKind,
    locator: &ModelLocator,
) -> Result<LanguageModel> {
    if let Some(b) = tiny::builtin(model_id) {
        return LanguageModel::new(
            model_id,
            b.config,
            b.weights,
            Tokenizer::Bytes,
            b.chat_template,
            precision,
            backend,
            ModelSource::Builtin(model_id.into()),
        );
    }
    let dir = locator.locate(model_id).ok_or_else(|| {
        Error::Model(format!(
            "weights for {model_id} not found; place a checkpoint under EMOGEOM_MODEL_DIR/{} or in the hub cache",
            emogeom_core::record::model_slug(model_id)
        ))
    })?;
    load_dir(model_id, &dir, precision, backend)
}

pub fn load_dir(model_id: &str, dir: &Path, precision: Precision, backend: BackendKind) -> Result<LanguageModel> {
    let config = ModelConfig::from_hf_file(&dir.join("config.json"))?;
    let weights = Weights::load_hf_dir(dir, &config)?;
    let tc_path = dir.join("tokenizer_config.json");
    let tc: serde_json::Value = match std::fs::read_to_string(&tc_path) {
        Ok(s) => serde_json::from_str(&s).map_err(|e| Error::parse(&tc_path, e))?,
        Err(_) => serde_json::Value::Null,
    };
    let tokenizer = if tc["emogeom_tokenizer"] == "bytes" {
        Tokenizer::Bytes
    } else {
        Tokenizer::from_file(&dir.join("tokenizer.json"))?
    };
    let template_text = match &tc["chat_template"] {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Array(xs) => xs
            .iter()
            .find(|x| x["name"] == "default")
            .and_then(|x| x["template"].as_str().map(String::from)),
        _ => std::fs::read_to_string(dir.join("chat_template.jinja")).ok(),
    };
    let chat_template = template_text.as_deref().and_then(ChatTemplate::detect);
    LanguageModel::new(
        model_id,
        config,
        weights,
        tokenizer,
        chat_template,
        precision,
        backend,
        ModelSource::Directory(dir.to_path_buf()),
    )
}
