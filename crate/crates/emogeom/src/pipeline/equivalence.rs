//! Cross-backend equivalence: the same corpus through the named-hook and
//! hidden-state routes at a matched layer.

use emogeom_core::equivalence::{compare_vector_sets, EquivalenceReport};
use emogeom_core::record::{BackendKind, Precision};

use crate::error::Result;
use crate::registry::{write_json, Artifact, DirLock, RunManifest};

use super::comprehension::{emotion_set_at, sweep_model};
use super::Context;

pub const REFERENCE_BACKEND: BackendKind = BackendKind::NamedHook;
pub const OTHER_BACKEND: BackendKind = BackendKind::HiddenStateSequence;

/// Runs both routes at `layer`, or at the reference route's best layer when
/// `layer` is `None`. The named-hook route is the reference.
pub fn run_equivalence(
    ctx: &Context,
    model_id: &str,
    layer: Option<usize>,
    precision: Precision,
) -> Result<(EquivalenceReport, RunManifest)> {
    let _lock = DirLock::acquire(&ctx.layout.model_dir(model_id))?;
    let (reference, ref_record) = ctx.load(model_id, precision, REFERENCE_BACKEND)?;
    let mut manifest = ctx.manifest(
        "equivalence",
        &reference,
        Vec::new(),
        vec![format!("reference backend {REFERENCE_BACKEND}, compared backend {OTHER_BACKEND}")],
    );
    let (reference_set, layer) = match layer {
        Some(l) => (emotion_set_at(&reference, &ref_record, &ctx.corpus, l)?, l),
        None => {
            let sweep = sweep_model(&reference, &ref_record, &ctx.corpus)?;
            let l = sweep.sweep.best_layer;
            (sweep.best_set().clone(), l)
        }
    };
    drop(reference);
    let (other, other_record) = ctx.load(model_id, precision, OTHER_BACKEND)?;
    let mut other_set = emotion_set_at(&other, &other_record, &ctx.corpus, layer)?;
    // Same model, same stimuli: only the capture route differs.
    other_set.model = reference_set.model.clone();
    let report = compare_vector_sets(&reference_set, REFERENCE_BACKEND, &other_set, OTHER_BACKEND)?;

    manifest.finish();
    write_json(
        &ctx.layout.equivalence_report(model_id),
        &Artifact::new(&manifest.manifest_id, report.clone()),
    )?;
    manifest.write(&ctx.layout)?;
    Ok((report, manifest))
}
