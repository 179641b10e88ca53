//! Parity with reference activations produced by the `transformers`
//! implementation for two tiny random checkpoints (see
//! fixtures/make_fixtures.py).

use std::path::PathBuf;

use emogeom::lm::forward::{HookName, Hooks};
use emogeom::lm::{load_dir, GenerateOptions, LanguageModel};
use emogeom_core::record::{BackendKind, Precision};
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn reference(name: &str) -> Vec<Value> {
    let text = std::fs::read_to_string(fixture(name).join("reference.json")).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    v["cases"].as_array().unwrap().clone()
}

fn floats(v: &Value) -> Vec<f32> {
    v.as_array().unwrap().iter().flat_map(|x| match x {
        Value::Array(_) => floats(x),
        _ => vec![x.as_f64().unwrap() as f32],
    }).collect()
}

fn ids(v: &Value) -> Vec<u32> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as u32).collect()
}

fn max_rel_err(got: &[f32], want: &[f32]) -> f32 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f32, |m, x| m.max(x.abs())).max(1e-6);
    got.iter().zip(want).fold(0.0f32, |m, (a, b)| m.max((a - b).abs())) / scale
}

fn load(name: &str, backend: BackendKind) -> LanguageModel {
    load_dir(name, &fixture(name), Precision::Fp32, backend).unwrap()
}

fn check_hidden_states(name: &str) {
    let m = load(name, BackendKind::HiddenStateSequence);
    for case in reference(name) {
        let tokens = ids(&case["ids"]);
        let states = m.hidden_states(&tokens).unwrap();
        let want = case["hidden_states"].as_array().unwrap();
        assert_eq!(states.len(), want.len());
        for (i, (g, w)) in states.iter().zip(want).enumerate() {
            let err = max_rel_err(g, &floats(w));
            assert!(err < 1e-4, "{name} hidden_states[{i}] rel err {err}");
        }
        let logits = m.logits(&tokens).unwrap();
        assert!(max_rel_err(&logits, &floats(&case["last_logits"])) < 1e-4);
    }
}

#[test]
fn llama_hidden_states_match_reference() {
    check_hidden_states("tiny-llama");
}

#[test]
fn qwen2_hidden_states_match_reference() {
    check_hidden_states("tiny-qwen2");
}

#[test]
fn greedy_generation_matches_reference() {
    for name in ["tiny-llama", "tiny-qwen2"] {
        for backend in [BackendKind::HiddenStateSequence, BackendKind::NamedHook] {
            let m = load(name, backend);
            for case in reference(name) {
                let opts = GenerateOptions { max_new_tokens: 12, sampling: None, stop_tokens: vec![] };
                let got = m.generate(&ids(&case["ids"]), &opts, &Hooks::default()).unwrap();
                assert_eq!(got, ids(&case["greedy"]), "{name} {backend}");
            }
        }
    }
}

#[test]
fn named_hooks_match_hidden_states_before_the_final_norm() {
    for name in ["tiny-llama", "tiny-qwen2"] {
        let m = load(name, BackendKind::NamedHook);
        let n = m.n_layers();
        for case in reference(name) {
            let want = case["hidden_states"].as_array().unwrap();
            let hooks = Hooks {
                capture: (0..n).map(HookName::ResidPost).chain([HookName::Embed]).collect(),
                add: vec![],
            };
            let (_, cache) = m.run_with_hooks(&ids(&case["ids"]), &hooks).unwrap();
            assert!(max_rel_err(&cache[&HookName::Embed], &floats(&want[0])) < 1e-6);
            // The hub list ends with the normalized output, so the last
            // block is compared only through the other backend's pre-norm
            // residual (covered by the capture tests).
            for l in 0..n - 1 {
                let err = max_rel_err(&cache[&HookName::ResidPost(l)], &floats(&want[l + 1]));
                assert!(err < 1e-4, "{name} layer {l} rel err {err}");
            }
        }
    }
}

#[test]
fn tokenizer_matches_reference_ids() {
    for name in ["tiny-llama", "tiny-qwen2"] {
        let m = load(name, BackendKind::HiddenStateSequence);
        for case in reference(name) {
            let mut got = vec![m.config.bos_token_id.unwrap()];
            got.extend(m.tokenizer.encode(case["text"].as_str().unwrap(), false).unwrap());
            assert_eq!(got, ids(&case["ids"]));
        }
    }
}
