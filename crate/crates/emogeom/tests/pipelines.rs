use emogeom::lm::tiny::{OVERFLOW_FROM_LAYER, TINY_BASE, TINY_INSTRUCT, TINY_OVERFLOW};
use emogeom::pipeline::comprehension::{load_descriptors, reanalyze, run_extract, sweep_model};
use emogeom::pipeline::decomposition::decompose_from_disk;
use emogeom::pipeline::equivalence::run_equivalence;
use emogeom::pipeline::generation::run_and_persist;
use emogeom::pipeline::steering::{load_steering, run_steering, SteeringConfig};
use emogeom::pipeline::Context;
use emogeom::registry::{read_rdm, write_rdm, RunLayout};
use emogeom::stimuli::bundled;
use emogeom::Error;
use emogeom_core::genprotocol::GenerationProtocol;
use emogeom_core::record::{BackendKind, Precision};
use emogeom_core::Error as CoreError;

fn ctx(root: &std::path::Path) -> Context {
    Context::new(RunLayout::new(root), bundled())
}

fn quick(protocol: GenerationProtocol) -> GenerationProtocol {
    GenerationProtocol {
        templates_per_emotion: 1,
        generations_per_template: 1,
        max_new_tokens: 12,
        ..protocol
    }
}

#[test]
fn overflow_model_reports_null_layers() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ctx(dir.path());
    let (model, rec) = ctx.load(TINY_OVERFLOW, Precision::Fp16, BackendKind::NamedHook).unwrap();
    let out = sweep_model(&model, &rec, &ctx.corpus).unwrap();
    assert_eq!(out.sweep.first_null_layer(), Some(OVERFLOW_FROM_LAYER));
    assert!(out.sweep.best_layer < OVERFLOW_FROM_LAYER);
    assert!(out.sets[OVERFLOW_FROM_LAYER].is_none());
}

#[test]
fn reanalyze_reproduces_persisted_descriptors() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ctx(dir.path());
    let (model, rec) = ctx.load(TINY_BASE, Precision::Fp16, BackendKind::NamedHook).unwrap();
    run_extract(&ctx, &model, &rec).unwrap();
    let before = load_descriptors(&ctx, TINY_BASE).unwrap();
    let after = reanalyze(&ctx.layout, TINY_BASE, None).unwrap();
    assert_eq!(before.body.descriptors, after.descriptors);
    let again = load_descriptors(&ctx, TINY_BASE).unwrap();
    assert_eq!(before.manifest_id, again.manifest_id);
}

#[test]
fn equivalence_needs_no_prior_run_and_rejects_bad_layers() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ctx(dir.path());
    let (r, _) = run_equivalence(&ctx, TINY_BASE, Some(1), Precision::Fp32).unwrap();
    assert_eq!(r.layer, 1);
    assert!(r.min_cosine > 0.9999, "{r:?}");
    assert!(ctx.layout.equivalence_report(TINY_BASE).is_file());
    assert!(run_equivalence(&ctx, TINY_BASE, Some(99), Precision::Fp32).is_err());
}

#[test]
fn steering_traces_replay_to_the_stored_regime() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ctx(dir.path());
    let (model, rec) = ctx.load(TINY_INSTRUCT, Precision::Fp16, BackendKind::NamedHook).unwrap();
    run_extract(&ctx, &model, &rec).unwrap();
    let cfg = SteeringConfig {
        emotions: vec!["sad".into(), "proud".into()],
        max_new_tokens: 16,
        ..Default::default()
    };
    let (file, _) = run_steering(&ctx, &model, &cfg).unwrap();
    assert_eq!(file.traces.len(), 2);
    assert_eq!(file.strengths.len(), cfg.multipliers.len());
    let stored = load_steering(&ctx.layout.steering_traces(TINY_INSTRUCT)).unwrap().body;
    assert_eq!(stored, file);
    let (_, agg) = stored.replay().unwrap();
    assert_eq!(agg, Some(stored.regime));
}

#[test]
fn steering_requires_named_hooks() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ctx(dir.path());
    let (model, rec) = ctx.load(TINY_INSTRUCT, Precision::Fp16, BackendKind::HiddenStateSequence).unwrap();
    run_extract(&ctx, &model, &rec).unwrap();
    let err = run_steering(&ctx, &model, &SteeringConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Capability(_) | Error::Core(CoreError::Capability { .. })), "{err}");
}

#[test]
fn reduced_decomposition_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = ctx(dir.path());
    let (model, rec) = ctx.load(TINY_INSTRUCT, Precision::Fp16, BackendKind::NamedHook).unwrap();
    let (out, _) = run_extract(&ctx, &model, &rec).unwrap();
    let best = Some(out.sweep.best_layer);

    // Without condition A there is nothing to anchor the report to.
    assert!(matches!(
        decompose_from_disk(&ctx, TINY_INSTRUCT),
        Err(Error::Core(CoreError::MissingCondition(_)))
    ));

    write_rdm(&ctx.layout.condition_dir(TINY_INSTRUCT, 'A').join("rdm.json"), &out.best_rdm, "a").unwrap();
    let int8 = ctx.load(TINY_INSTRUCT, Precision::Int8, BackendKind::NamedHook).unwrap().0;
    let runs = [
        ('B', &model, quick(GenerationProtocol::alternative(Precision::Fp16))),
        ('C', &model, quick(GenerationProtocol::matched(Precision::Fp16))),
        ('D', &int8, quick(GenerationProtocol::matched(Precision::Int8))),
    ];
    for (letter, m, protocol) in runs {
        let label = format!("quick_{letter}");
        let (_, vectors, manifest) = run_and_persist(&ctx, m, &label, &protocol, best).unwrap();
        let rdm = vectors.rdm().unwrap();
        assert_eq!(rdm.n(), 20);
        let path = ctx.layout.condition_dir(TINY_INSTRUCT, letter).join("rdm.json");
        write_rdm(&path, &rdm, &manifest.manifest_id).unwrap();
        let generated = ctx.layout.generation_dir(TINY_INSTRUCT, &label).join("rdm.json");
        assert_eq!(read_rdm(&generated).unwrap().0, rdm);
    }
    let report = decompose_from_disk(&ctx, TINY_INSTRUCT).unwrap();
    for i in 0..4 {
        assert!((report.full_matrix[i][i] - 1.0).abs() < 1e-12);
        for j in 0..4 {
            assert_eq!(report.full_matrix[i][j], report.full_matrix[j][i]);
        }
    }
    assert_eq!(report.rho_cd, report.full_matrix[2][3]);
    assert!(ctx.layout.decomposition_report(TINY_INSTRUCT).is_file());
}
