//! Single-file pipeline configuration (TOML or JSON).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use emogeom_core::record::{BackendKind, Precision};
use emogeom_core::rsa::ReliabilityThresholds;
use serde::{Deserialize, Serialize};

use super::ReportOptions;
use crate::error::{Error, Result};
use crate::pipeline::steering::SteeringConfig;
use crate::stimuli::{bundled, load_corpus, CorpusBundle};

/// Which optional analyses a run is expected to contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analyses {
    pub equivalence: bool,
    pub decomposition: bool,
    pub steering: bool,
}

impl Default for Analyses {
    fn default() -> Self {
        Self {
            equivalence: true,
            decomposition: true,
            steering: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub passages: Option<PathBuf>,
    pub neutral: Option<PathBuf>,
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub models_table: Option<PathBuf>,
    pub models: Vec<String>,
    pub corpus: CorpusConfig,
    pub precision: Precision,
    pub backend: BackendKind,
    /// Per-model backend, keyed by model id.
    pub backend_overrides: BTreeMap<String, BackendKind>,
    pub out: PathBuf,
    pub analyses: Analyses,
    pub reliability: ReliabilityThresholds,
    pub steering: SteeringConfig,
    pub report: ReportOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            models_table: None,
            models: Vec::new(),
            corpus: CorpusConfig::default(),
            precision: Precision::Fp16,
            backend: BackendKind::NamedHook,
            backend_overrides: BTreeMap::new(),
            out: PathBuf::from("runs"),
            analyses: Analyses::default(),
            reliability: ReliabilityThresholds::default(),
            steering: SteeringConfig::default(),
            report: ReportOptions::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses a TOML or JSON file (by extension, TOML otherwise). Relative
    /// paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?
        } else {
            toml::from_str(&text).map_err(|e| Error::parse(path, e))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            self.models_table.as_mut(),
            self.corpus.passages.as_mut(),
            self.corpus.neutral.as_mut(),
            self.corpus.templates.as_mut(),
            self.report.behavioral.as_mut(),
            self.report.out.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.out);
    }

    pub fn validate(&self) -> Result<()> {
        let inputs = [
            ("models_table", self.models_table.as_ref()),
            ("corpus.passages", self.corpus.passages.as_ref()),
            ("corpus.neutral", self.corpus.neutral.as_ref()),
            ("corpus.templates", self.corpus.templates.as_ref()),
            ("report.behavioral", self.report.behavioral.as_ref()),
        ];
        for (name, path) in inputs {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::Validation(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        let c = &self.corpus;
        let given = [&c.passages, &c.neutral, &c.templates].iter().filter(|p| p.is_some()).count();
        if given != 0 && given != 3 {
            return Err(Error::Validation(
                "corpus paths must be given together (passages, neutral, templates)".into(),
            ));
        }
        self.reliability.validate()?;
        self.steering.thresholds.validate()?;
        if !(self.report.reference_rho.is_finite() && self.report.reference_rho.abs() <= 1.0) {
            return Err(Error::Validation("report.reference_rho must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    pub fn corpus(&self) -> Result<CorpusBundle> {
        match (&self.corpus.passages, &self.corpus.neutral, &self.corpus.templates) {
            (Some(p), Some(n), Some(t)) => load_corpus(p, n, t),
            _ => Ok(bundled()),
        }
    }

    pub fn backend_for(&self, model_id: &str) -> BackendKind {
        self.backend_overrides.get(model_id).copied().unwrap_or(self.backend)
    }
}
