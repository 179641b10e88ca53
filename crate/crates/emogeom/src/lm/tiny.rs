//! Seeded toy checkpoints for offline runs and tests. They share the
//! Llama block and the byte tokenizer; their weights carry no linguistic
//! knowledge.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::chat::ChatTemplate;
use super::config::{Architecture, ModelConfig, RopeScaling};
use super::tokenizer::{BYTE_BOS, BYTE_EOS, BYTE_VOCAB};
use super::weights::{Block, Linear, Weights};

pub const TINY_INSTRUCT: &str = "emogeom/tiny-instruct";
pub const TINY_BASE: &str = "emogeom/tiny-base";
/// Later MLPs are scaled so that fp16 activations overflow, giving NaN
/// layers at reduced precision while fp32 stays finite.
pub const TINY_OVERFLOW: &str = "emogeom/tiny-overflow";

pub const OVERFLOW_FROM_LAYER: usize = 3;

pub fn config() -> ModelConfig {
    ModelConfig {
        architecture: Architecture::Llama,
        vocab_size: BYTE_VOCAB,
        hidden_size: 64,
        intermediate_size: 128,
        num_layers: 6,
        num_heads: 4,
        num_kv_heads: 2,
        head_dim: 16,
        rms_norm_eps: 1e-5,
        rope_theta: 10000.0,
        rope_scaling: RopeScaling::None,
        attention_bias: false,
        tie_word_embeddings: true,
        bos_token_id: Some(BYTE_BOS),
        eos_token_ids: vec![BYTE_EOS],
    }
}

pub struct BuiltinModel {
    pub config: ModelConfig,
    pub weights: Weights,
    pub chat_template: Option<ChatTemplate>,
}

pub fn builtin(model_id: &str) -> Option<BuiltinModel> {
    let (seed, overflow, chat) = match model_id {
        TINY_INSTRUCT => (11, None, Some(ChatTemplate::Tiny)),
        TINY_BASE => (12, None, None),
        TINY_OVERFLOW => (13, Some(OVERFLOW_FROM_LAYER), None),
        _ => return None,
    };
    let config = config();
    let weights = random_weights(&config, seed, overflow);
    Some(BuiltinModel {
        config,
        weights,
        chat_template: chat,
    })
}

pub fn is_builtin(model_id: &str) -> bool {
    matches!(model_id, TINY_INSTRUCT | TINY_BASE | TINY_OVERFLOW)
}

fn random_weights(cfg: &ModelConfig, seed: u64, overflow_from: Option<usize>) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize, std: f32| -> Vec<f32> {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    };
    let d = cfg.hidden_size;
    let ff = cfg.intermediate_size;
    let embed = normal(cfg.vocab_size * d, 1.0);
    let mut blocks = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let mut lin = |out: usize, inp: usize, gain: f32| {
            Linear::new(normal(out * inp, gain / (inp as f32).sqrt()), None, out, inp).expect("shapes match")
        };
        let q = lin(cfg.q_dim(), d, 1.0);
        let k = lin(cfg.kv_dim(), d, 1.0);
        let v = lin(cfg.kv_dim(), d, 1.0);
        let o = lin(d, cfg.q_dim(), 0.5);
        let gate = lin(ff, d, 1.0);
        let up = lin(ff, d, 1.0);
        let mut down = lin(d, ff, 0.5);
        if overflow_from.is_some_and(|f| l >= f) {
            down.weight.iter_mut().for_each(|w| *w *= 1.0e5);
        }
        let attn_norm = normal(d, 0.1).into_iter().map(|x| 1.0 + x).collect();
        let mlp_norm = normal(d, 0.1).into_iter().map(|x| 1.0 + x).collect();
        blocks.push(Block {
            attn_norm,
            q,
            k,
            v,
            o,
            mlp_norm,
            gate,
            up,
            down,
        });
    }
    let final_norm = normal(d, 0.1).into_iter().map(|x| 1.0 + x).collect();
    Weights {
        embed,
        blocks,
        final_norm,
        lm_head: None,
    }
}
