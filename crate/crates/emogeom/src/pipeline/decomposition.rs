//! The A/B/C/D condition runs and their contrast table.

use std::path::Path;

use emogeom_core::decomposition::{contrast_table, restrict_to_generation_subset, Condition, ConditionSet, ContrastReport};
use emogeom_core::genprotocol::GenerationProtocol;
use emogeom_core::geometry::Rdm;
use emogeom_core::record::{BackendKind, Precision};
use emogeom_core::Error as CoreError;

use crate::error::{Error, Result};
use crate::registry::{read_rdm, write_json, write_rdm, Artifact, DirLock};

use super::comprehension::{persist_sweep, sweep_model};
use super::generation::run_and_persist;
use super::Context;

/// Reads `conditions/<X>/rdm.json` for all four conditions from a model
/// directory. A is restricted to the generation emotions here.
pub fn assemble_conditions(model_dir: &Path, model_id: &str) -> Result<ConditionSet> {
    let mut rdms: [Option<Rdm>; 4] = Default::default();
    for (slot, c) in rdms.iter_mut().zip(Condition::ALL) {
        let path = model_dir.join("conditions").join(c.letter().to_string()).join("rdm.json");
        if path.is_file() {
            *slot = Some(read_rdm(&path)?.0);
        }
    }
    let [a, b, c, d] = rdms;
    let a = a.map(|a| restrict_to_generation_subset(&a)).transpose()?;
    Ok(ConditionSet::from_parts(model_id, a, b, c, d)?)
}

/// Runs the four conditions for one model and writes the contrast report.
///
/// A is comprehension at fp16 through `backend`; B, C and D are generation
/// runs (alternative fp16, matched fp16, matched int8) on the named-hook
/// engine at the layer each preset prescribes.
pub fn run_decomposition(ctx: &Context, model_id: &str, backend: BackendKind) -> Result<ContrastReport> {
    let model_dir = ctx.layout.model_dir(model_id);
    let _lock = DirLock::acquire(&model_dir)?;

    let (model, record) = ctx.load(model_id, Precision::Fp16, backend)?;
    let mut manifest = ctx.manifest("decompose:A", &model, Vec::new(), vec![Condition::A.description().into()]);
    let sweep = sweep_model(&model, &record, &ctx.corpus)?;
    manifest.finish();
    persist_sweep(&sweep, ctx, &manifest)?;
    write_rdm(
        &ctx.layout.condition_dir(model_id, 'A').join("rdm.json"),
        &sweep.best_rdm,
        &manifest.manifest_id,
    )?;
    let best = Some(sweep.sweep.best_layer);

    let generation = [
        (Condition::B, "alternative_fp16", GenerationProtocol::alternative(Precision::Fp16)),
        (Condition::C, "matched_fp16", GenerationProtocol::matched(Precision::Fp16)),
        (Condition::D, "matched_int8", GenerationProtocol::matched(Precision::Int8)),
    ];
    let mut loaded = (model, Precision::Fp16);
    for (cond, label, protocol) in generation {
        if loaded.1 != protocol.precision || loaded.0.backend != BackendKind::NamedHook {
            loaded = (ctx.load(model_id, protocol.precision, BackendKind::NamedHook)?.0, protocol.precision);
        }
        let (_, vectors, manifest) = run_and_persist(ctx, &loaded.0, label, &protocol, best)?;
        write_rdm(
            &ctx.layout.condition_dir(model_id, cond.letter()).join("rdm.json"),
            &vectors.rdm()?,
            &manifest.manifest_id,
        )?;
    }
    decompose_from_disk(ctx, model_id)
}

/// Assembles persisted conditions and writes `decomposition_report.json`.
pub fn decompose_from_disk(ctx: &Context, model_id: &str) -> Result<ContrastReport> {
    let model_dir = ctx.layout.model_dir(model_id);
    let set = assemble_conditions(&model_dir, model_id)?;
    let report = contrast_table(&set)?;
    let manifest_id = condition_manifest(&model_dir)?;
    write_json(&ctx.layout.decomposition_report(model_id), &Artifact::new(&manifest_id, report.clone()))?;
    Ok(report)
}

/// The report inherits the manifest of condition A.
fn condition_manifest(model_dir: &Path) -> Result<String> {
    let path = model_dir.join("conditions/A/rdm.json");
    read_rdm(&path).map(|(_, id)| id).map_err(|e| match e {
        Error::Io { .. } => Error::Core(CoreError::MissingCondition('A')),
        other => other,
    })
}
