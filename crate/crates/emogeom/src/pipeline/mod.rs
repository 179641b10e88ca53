//! End-to-end pipelines that load models, capture activations and persist
//! artifacts under a run root.

pub mod comprehension;
pub mod decomposition;
pub mod equivalence;
pub mod generation;
pub mod steering;

use emogeom_core::record::{BackendKind, ModelRecord, Precision};

use crate::capture::model_record;
use crate::error::Result;
use crate::lm::{load_model, LanguageModel, ModelLocator};
use crate::registry::{ModelTableRow, RunLayout, RunManifest};
use crate::stimuli::CorpusBundle;

/// Everything a pipeline needs besides the model itself.
#[derive(Debug, Clone)]
pub struct Context {
    pub layout: RunLayout,
    pub corpus: CorpusBundle,
    pub locator: ModelLocator,
    pub table: Vec<ModelTableRow>,
}

impl Context {
    pub fn new(layout: RunLayout, corpus: CorpusBundle) -> Self {
        Self {
            layout,
            corpus,
            locator: ModelLocator::from_env(),
            table: Vec::new(),
        }
    }

    pub fn table_record(&self, model_id: &str) -> Option<&ModelRecord> {
        self.table
            .iter()
            .map(|r| &r.record)
            .find(|r| r.model_id == model_id)
    }

    /// Loads a model and builds its record.
    pub fn load(&self, model_id: &str, precision: Precision, backend: BackendKind) -> Result<(LanguageModel, ModelRecord)> {
        let model = load_model(model_id, precision, backend, &self.locator)?;
        let record = model_record(&model, self.table_record(model_id))?;
        Ok((model, record))
    }

    pub fn manifest(&self, command: &str, model: &LanguageModel, seeds: Vec<u64>, notes: Vec<String>) -> RunManifest {
        let mut notes = notes;
        if self.corpus.stand_in {
            notes.push("stimuli: bundled stand-in corpus, not the original passages or templates".into());
        }
        RunManifest::new(
            command,
            &model.model_id,
            model.precision,
            model.backend,
            &self.corpus.content_hash(),
            self.corpus.stand_in,
            seeds,
            notes,
        )
    }
}
