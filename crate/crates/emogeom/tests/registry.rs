use std::fs;
use std::path::{Path, PathBuf};

use emogeom::registry::{
    load_model_table, load_vector_set, persist_vector_set, read_json, read_rdm, write_json, write_rdm, Artifact,
    RunManifest,
};
use emogeom::stimuli::{bundled, load_corpus};
use emogeom::Error;
use emogeom_core::geometry::compute_rdm;
use emogeom_core::record::{BackendKind, EmotionVectorSet, ModelRecord, Precision, Variant};
use emogeom_core::vocab::canonical_labels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(rel)
}

fn random_set(seed: u64) -> EmotionVectorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 24;
    let model = ModelRecord {
        model_id: "org/some-model".into(),
        family: "some".into(),
        variant: Variant::Base,
        size_b: 0.5,
        n_layers: 4,
        d_model: d,
        backend_kind: BackendKind::NamedHook,
        precision: Precision::Fp16,
    };
    let values = (0..21 * d).map(|_| rng.random_range(-1e3f32..1e3) * 1e-3).collect();
    EmotionVectorSet::new(model, 2, canonical_labels(), values, false).unwrap()
}

#[test]
fn vectors_and_rdm_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let set = random_set(1);
    let path = persist_vector_set(&set, dir.path(), "abc").unwrap();
    assert!(path.ends_with("layers/2/vectors.f32"));
    assert_eq!(fs::metadata(&path).unwrap().len(), 21 * 24 * 4);
    let (back, id) = load_vector_set(path.parent().unwrap()).unwrap();
    assert_eq!(id, "abc");
    assert!(back.as_slice().iter().zip(set.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.model, set.model);

    let rdm = compute_rdm(&set).unwrap();
    let p = dir.path().join("rdm.json");
    write_rdm(&p, &rdm, "abc").unwrap();
    let (r2, id) = read_rdm(&p).unwrap();
    assert_eq!(id, "abc");
    assert!(r2.matrix().iter().zip(rdm.matrix()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn truncated_vector_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = persist_vector_set(&random_set(2), dir.path(), "x").unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_vector_set(path.parent().unwrap()).is_err());
}

#[test]
fn artifact_flattens_its_body() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.json");
    write_json(&p, &Artifact::new("m1", serde_json::json!({"x": 1.5}))).unwrap();
    let v: serde_json::Value = read_json(&p).unwrap();
    assert_eq!(v, serde_json::json!({"manifest_id": "m1", "x": 1.5}));
}

#[test]
fn manifest_id_ignores_timestamps() {
    let make = || {
        RunManifest::new("extract", "m", Precision::Fp16, BackendKind::NamedHook, "h", true, vec![7], vec![])
    };
    let mut a = make();
    std::thread::sleep(std::time::Duration::from_millis(1100));
    let b = make();
    a.finish();
    assert_eq!(a.manifest_id, b.manifest_id);
    let c = RunManifest::new("extract", "m", Precision::Int8, BackendKind::NamedHook, "h", true, vec![7], vec![]);
    assert_ne!(a.manifest_id, c.manifest_id);
    assert!(c.int8_scheme.is_some());
}

#[test]
fn bundled_table_has_twelve_complete_rows() {
    let rows = load_model_table(&data("table_a1.csv")).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.reported.is_some()));
    let q = rows.iter().find(|r| r.record.model_id == "Qwen/Qwen2.5-1.5B").unwrap();
    assert_eq!(q.record.variant, Variant::Base);
    assert_eq!(q.record.backend_kind, BackendKind::NamedHook);
    assert_eq!(q.reported.unwrap().best_layer, 15);
}

#[test]
fn table_rejects_partial_descriptors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    fs::write(
        &p,
        "model_id,family,variant,size_b,n_layers,d_model,backend,best_layer,best_layer_pct,anisotropy,rdm_std\nm,f,I,1,4,8,TL,1,25,,\n",
    )
    .unwrap();
    assert!(load_model_table(&p).is_err());
}

fn write_corpus(dir: &Path, passages: &str) -> [PathBuf; 3] {
    let ps = [dir.join("p.csv"), dir.join("n.txt"), dir.join("t.json")];
    fs::write(&ps[0], passages).unwrap();
    fs::copy(data("corpus/neutral_sentences.txt"), &ps[1]).unwrap();
    fs::copy(data("corpus/templates.json"), &ps[2]).unwrap();
    ps
}

#[test]
fn corpus_files_load_like_the_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(data("corpus/emotion_passages.csv")).unwrap();
    let [p, n, t] = write_corpus(dir.path(), &text);
    let c = load_corpus(&p, &n, &t).unwrap();
    assert_eq!(c.content_hash(), bundled().content_hash());
}

#[test]
fn corpus_missing_an_emotion_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(data("corpus/emotion_passages.csv")).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("brooding,")).collect();
    let [p, n, t] = write_corpus(dir.path(), &kept.join("\n"));
    match load_corpus(&p, &n, &t) {
        Err(Error::Validation(msg)) => assert!(msg.contains("brooding"), "{msg}"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn corpus_with_unknown_label_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(data("corpus/emotion_passages.csv")).unwrap();
    let [p, n, t] = write_corpus(dir.path(), &format!("{text}\nbored,\"Nothing happened all day.\"\n"));
    assert!(matches!(load_corpus(&p, &n, &t), Err(Error::Validation(_) | Error::Parse { .. })));
}
