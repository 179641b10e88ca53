//! Consolidated report over a run root: five JSON tables, six figures and
//! an index, with explicit markers for anything absent.

pub mod config;
pub mod figures;
pub mod svg;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use emogeom_core::decomposition::ContrastReport;
use emogeom_core::equivalence::EquivalenceReport;
use emogeom_core::geometry::{GeometryDescriptors, Rdm, SteeringRegime};
use emogeom_core::record::{BackendKind, ModelRecord, Variant};
use emogeom_core::rsa::{
    rdm_of_rdms, rdm_similarity, size_correlations, CorrelationMethod, Outcome, Predictor, RdmOfRdms,
    Reliability, ReliabilityThresholds, RsaEntry, SizeCorrelationRow, SizePoint,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::pipeline::comprehension::{DescriptorsFile, ModelMeta};
use crate::pipeline::steering::SteeringFile;
use crate::registry::{
    load_model_table, read_json, read_rdm, write_json, Artifact, ModelTableRow, ReportedDescriptors, RunLayout,
};
use config::{Analyses, PipelineConfig};
use figures::{
    render_group_boxplot, render_grouped_bars, render_heatmaps, render_scatter_panels, write_figure, BarGroup,
    FigureFiles, Heatmap, ScatterPanel, ValueKind,
};
use svg::{Anchor, Svg};

/// Named set of model pairs for the pair-group box plot. `models` adds
/// every pair within the list; `pairs` adds explicit pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairGroup {
    pub name: String,
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default)]
    pub pairs: Vec<[String; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    /// Output directory; `<run root>/report` when unset.
    pub out: Option<PathBuf>,
    /// JSON object `{model_id: {facet: score}}`.
    pub behavioral: Option<PathBuf>,
    pub reference_rho: f64,
    pub pair_groups: Vec<PairGroup>,
    pub dissociation_pair: Option<[String; 2]>,
    /// Fall back to the model table's printed descriptors for models
    /// without a run.
    pub use_reported_descriptors: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            out: None,
            behavioral: None,
            reference_rho: 0.7,
            pair_groups: Vec::new(),
            dissociation_pair: None,
            use_reported_descriptors: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReportConfig {
    pub table: Vec<ModelTableRow>,
    pub reliability: ReliabilityThresholds,
    pub analyses: Analyses,
    pub options: ReportOptions,
}

impl ReportConfig {
    pub fn from_pipeline(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            table: match &cfg.models_table {
                Some(p) => load_model_table(p)?,
                None => Vec::new(),
            },
            reliability: cfg.reliability,
            analyses: cfg.analyses,
            options: cfg.report.clone(),
        })
    }
}

/// Something the report expected but could not find.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Missing {
    /// Model id, or `report` for bundle-level gaps.
    pub scope: String,
    pub item: String,
    pub reason: String,
}

impl Missing {
    fn new(scope: &str, item: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            scope: scope.into(),
            item: item.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Measured,
    Reported,
    Missing,
}

/// One row of the descriptors table (model-table columns plus regime,
/// provenance, reliability and behavioral annotations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorRow {
    pub model_id: String,
    pub family: String,
    pub variant: Variant,
    pub size_b: f64,
    pub n_layers: usize,
    pub d_model: usize,
    pub backend: BackendKind,
    pub precision: emogeom_core::record::Precision,
    pub best_layer: Option<usize>,
    /// Percentage of depth.
    pub best_layer_pct: Option<f64>,
    pub anisotropy: Option<f64>,
    pub rdm_std: Option<f64>,
    pub steering_regime: String,
    pub source: Source,
    pub reliability: Option<Reliability>,
    pub reference_depths: Vec<crate::registry::ReferenceDepth>,
    pub reported: Option<ReportedDescriptors>,
    pub behavioral: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
struct ModelData {
    record: ModelRecord,
    measured: Option<GeometryDescriptors>,
    reference_depths: Vec<crate::registry::ReferenceDepth>,
    rdm: Option<Rdm>,
    reported: Option<ReportedDescriptors>,
    has_run: bool,
    equivalence: Option<EquivalenceReport>,
    decomposition: Option<ContrastReport>,
    steering: Option<SteeringRegime>,
    stand_in: Option<bool>,
}

impl ModelData {
    fn new(record: ModelRecord) -> Self {
        Self {
            record,
            measured: None,
            reference_depths: Vec::new(),
            rdm: None,
            reported: None,
            has_run: false,
            equivalence: None,
            decomposition: None,
            steering: None,
            stand_in: None,
        }
    }

    fn sort_key(&self) -> (String, u64, u8, String) {
        let r = &self.record;
        let variant = match r.variant {
            Variant::Base => 0,
            Variant::Instruct => 1,
        };
        (r.family.to_lowercase(), r.size_b.to_bits(), variant, r.model_id.clone())
    }

    fn source(&self, use_reported: bool) -> Source {
        if self.measured.is_some() {
            Source::Measured
        } else if use_reported && self.reported.is_some() {
            Source::Reported
        } else {
            Source::Missing
        }
    }

    fn size_point(&self, use_reported: bool) -> Option<(SizePoint, Source)> {
        let r = &self.record;
        let (anisotropy, rdm_std, best_layer_pct) = match self.source(use_reported) {
            Source::Measured => {
                let d = self.measured.as_ref()?;
                (d.anisotropy, d.rdm_std, d.best_layer_pct * 100.0)
            }
            Source::Reported => {
                let d = self.reported?;
                (d.anisotropy, d.rdm_std, d.best_layer_pct)
            }
            Source::Missing => return None,
        };
        let p = SizePoint {
            model_id: r.model_id.clone(),
            size_b: r.size_b,
            d_model: r.d_model,
            anisotropy,
            rdm_std,
            best_layer_pct,
        };
        Some((p, self.source(use_reported)))
    }

    fn regime(&self) -> String {
        if let Some(r) = self.steering {
            return r.as_str().into();
        }
        if self.record.backend_kind == BackendKind::HiddenStateSequence {
            return SteeringRegime::NotAvailable.as_str().into();
        }
        if self.has_run { "missing" } else { "not_reported" }.into()
    }
}

fn short(model_id: &str) -> &str {
    model_id.rsplit('/').next().unwrap_or(model_id)
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Reads every model directory under the layout, recording gaps.
fn collect_runs(layout: &RunLayout, analyses: &Analyses, missing: &mut Vec<Missing>) -> Result<Vec<ModelData>> {
    let mut out = Vec::new();
    for dir in layout.model_dirs()? {
        let slug = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let desc_path = dir.join("descriptors.json");
        let eq_path = dir.join("equivalence_report.json");
        let equivalence: Option<Artifact<EquivalenceReport>> =
            if eq_path.is_file() { Some(read_json(&eq_path)?) } else { None };
        let meta_path = dir.join("meta.json");
        let meta: Option<Artifact<ModelMeta>> = if meta_path.is_file() { Some(read_json(&meta_path)?) } else { None };

        let mut data = if desc_path.is_file() {
            let d: Artifact<DescriptorsFile> = read_json(&desc_path)?;
            let mut m = ModelData::new(d.body.model.clone());
            m.reference_depths = d.body.reference_depths.clone();
            let layer = d.body.descriptors.best_layer;
            m.measured = Some(d.body.descriptors);
            let rdm_path = dir.join("layers").join(layer.to_string()).join("rdm.json");
            if rdm_path.is_file() {
                m.rdm = Some(read_rdm(&rdm_path)?.0);
            } else {
                missing.push(Missing::new(&m.record.model_id, rel(&layout.root, &rdm_path), "best-layer RDM not found"));
            }
            m
        } else if let Some(meta) = &meta {
            let m = ModelData::new(meta.body.model.clone());
            missing.push(Missing::new(&m.record.model_id, "descriptors.json", "no comprehension extraction"));
            m
        } else {
            let id = equivalence.as_ref().map_or(slug.clone(), |e| e.body.model_id.clone());
            missing.push(Missing::new(&id, "descriptors.json", "no comprehension extraction"));
            continue;
        };
        data.has_run = true;
        data.stand_in = meta.map(|m| m.body.corpus_stand_in);
        let id = data.record.model_id.clone();

        match equivalence {
            Some(e) => data.equivalence = Some(e.body),
            None if analyses.equivalence => {
                missing.push(Missing::new(&id, "equivalence_report.json", "equivalence not run"))
            }
            None => {}
        }
        let dec_path = dir.join("decomposition_report.json");
        if dec_path.is_file() {
            data.decomposition = Some(read_json::<Artifact<ContrastReport>>(&dec_path)?.body);
        } else if analyses.decomposition && data.record.variant == Variant::Instruct {
            missing.push(Missing::new(&id, "decomposition_report.json", "decomposition not run"));
        }
        let steer_path = dir.join("steering").join("traces.json");
        if steer_path.is_file() {
            data.steering = Some(read_json::<Artifact<SteeringFile>>(&steer_path)?.body.regime);
        } else if analyses.steering && data.record.backend_kind == BackendKind::NamedHook {
            missing.push(Missing::new(&id, "steering/traces.json", "steering not run"));
        }
        out.push(data);
    }
    Ok(out)
}

fn load_behavioral(path: Option<&Path>) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    match path {
        Some(p) => read_json(p),
        None => Ok(BTreeMap::new()),
    }
}

fn status(ok: bool, partial: bool) -> &'static str {
    match (ok, partial) {
        (true, false) => "ok",
        (true, true) => "partial",
        (false, _) => "missing",
    }
}

fn placeholder(name: &str, reason: &str, stem: &Path) -> Result<FigureFiles> {
    let mut s = Svg::new(520.0, 90.0);
    s.text(20.0, 36.0, 14.0, Anchor::Start, &format!("{name}: missing"));
    s.text(20.0, 62.0, 11.0, Anchor::Start, reason);
    write_figure(stem, s.finish(), &json!({"figure": name, "status": "missing", "reason": reason}))
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub out_dir: PathBuf,
    pub index: Value,
    pub missing: Vec<Missing>,
}

impl ReportBundle {
    pub fn complete(&self) -> bool {
        self.missing.is_empty()
    }
}

struct Emitter<'a> {
    out: &'a Path,
    figures: Vec<Value>,
    tables: Vec<Value>,
    missing: Vec<Missing>,
}

impl Emitter<'_> {
    fn figure(&mut self, name: &str, result: std::result::Result<FigureFiles, String>) -> Result<()> {
        let stem = self.out.join("figures").join(name);
        let (files, status) = match result {
            Ok(f) => (f, "ok"),
            Err(reason) => {
                self.missing.push(Missing::new("report", format!("figures/{name}"), reason.clone()));
                (placeholder(name, &reason, &stem)?, "missing")
            }
        };
        self.figures.push(json!({
            "name": name,
            "status": status,
            "svg": rel(self.out, &files.svg),
            "png": rel(self.out, &files.png),
            "json": rel(self.out, &files.json),
        }));
        Ok(())
    }

    fn table(&mut self, name: &str, status: &str, body: Value) -> Result<()> {
        let path = self.out.join("tables").join(format!("{name}.json"));
        let mut v = json!({"table": name, "status": status});
        if let (Value::Object(m), Value::Object(b)) = (&mut v, body) {
            m.extend(b);
        }
        write_json(&path, &v)?;
        self.tables.push(json!({"name": name, "status": status, "path": rel(self.out, &path)}));
        Ok(())
    }
}

/// Renders the dissociation figure for two models with RDMs.
fn dissociation(
    a: &ModelData,
    b: &ModelData,
    behavioral: &BTreeMap<String, BTreeMap<String, f64>>,
    stem: &Path,
) -> Result<FigureFiles> {
    let (ra, rb) = (a.rdm.as_ref().expect("rdm"), b.rdm.as_ref().expect("rdm"));
    let rho = rdm_similarity(ra, rb, CorrelationMethod::Spearman)?;
    let r = rdm_similarity(ra, rb, CorrelationMethod::Pearson)?;
    let panel = |m: &ModelData, rdm: &Rdm| {
        let n = rdm.n();
        let matrix = (0..n).map(|i| (0..n).map(|j| 1.0 - rdm.get(i, j)).collect()).collect();
        let aniso = m.measured.as_ref().map_or(f64::NAN, |d| d.anisotropy);
        Heatmap {
            title: format!(
                "{} (layer {} of {}, anisotropy {:.3})",
                short(&m.record.model_id),
                rdm.layer,
                m.record.n_layers,
                aniso
            ),
            labels: rdm.labels.clone(),
            matrix,
            kind: ValueKind::Distance,
            color_label: "cosine distance (1 - similarity)".into(),
            annotate: false,
        }
    };
    let mut footer = vec![format!("Spearman rho = {rho:.3}, Pearson r = {r:.3} (off-diagonal entries)")];
    let mut scores = BTreeMap::new();
    for m in [a, b] {
        if let Some(s) = behavioral.get(&m.record.model_id) {
            let parts: Vec<String> = s.iter().map(|(k, v)| format!("{k} {v:.2}")).collect();
            footer.push(format!("{}: {}", short(&m.record.model_id), parts.join(", ")));
            scores.insert(m.record.model_id.clone(), s.clone());
        }
    }
    let notes = BTreeMap::from([
        ("models".to_string(), json!([a.record.model_id, b.record.model_id])),
        ("spearman_rho".to_string(), json!(rho)),
        ("pearson_r".to_string(), json!(r)),
        ("behavioral".to_string(), json!(scores)),
    ]);
    render_heatmaps("dissociation", &[panel(a, ra), panel(b, rb)], &footer, notes, stem)
}

/// Pair groups for the box plot, from options or a size-class default
/// over instruct pairs.
fn pair_groups(
    opts: &ReportOptions,
    models: &[&ModelData],
    matrix: &RdmOfRdms,
    missing: &mut Vec<Missing>,
) -> Vec<(String, Vec<f64>, Vec<[String; 2]>)> {
    let mut out = Vec::new();
    if !opts.pair_groups.is_empty() {
        for g in &opts.pair_groups {
            let mut pairs: Vec<[String; 2]> = g.pairs.clone();
            for (i, a) in g.models.iter().enumerate() {
                for b in &g.models[i + 1..] {
                    pairs.push([a.clone(), b.clone()]);
                }
            }
            let mut values = Vec::new();
            let mut used = Vec::new();
            for [a, b] in pairs {
                match matrix.get(&a, &b) {
                    Some(v) => {
                        values.push(v);
                        used.push([a, b]);
                    }
                    None => missing.push(Missing::new("report", format!("pair {a} x {b}"), "no RDM for one model")),
                }
            }
            if values.is_empty() {
                missing.push(Missing::new("report", format!("pair group {}", g.name), "no available pairs"));
            } else {
                out.push((g.name.clone(), values, used));
            }
        }
        return out;
    }
    let instruct: Vec<&&ModelData> = models.iter().filter(|m| m.record.variant == Variant::Instruct).collect();
    let pool: Vec<&ModelData> = if instruct.len() >= 2 {
        instruct.into_iter().copied().collect()
    } else {
        models.to_vec()
    };
    let mut small = (Vec::new(), Vec::new());
    let mut large = (Vec::new(), Vec::new());
    for (i, a) in pool.iter().enumerate() {
        for b in &pool[i + 1..] {
            let (ia, ib) = (&a.record.model_id, &b.record.model_id);
            let v = matrix.get(ia, ib).expect("pool models are in the matrix");
            let slot = if a.record.size_b < 4.0 && b.record.size_b < 4.0 { &mut small } else { &mut large };
            slot.0.push(v);
            slot.1.push([ia.clone(), ib.clone()]);
        }
    }
    for (name, (v, p)) in [("both < 4B", small), ("any >= 4B", large)] {
        if !v.is_empty() {
            out.push((name.to_string(), v, p));
        }
    }
    out
}

/// Run directories merged with the model table, in family-grouped order.
fn gather(run_root: &Path, cfg: &ReportConfig) -> Result<(Vec<ModelData>, Vec<Missing>)> {
    let layout = RunLayout::new(run_root);
    let use_reported = cfg.options.use_reported_descriptors;
    let mut missing = Vec::new();
    let mut models = collect_runs(&layout, &cfg.analyses, &mut missing)?;
    for row in &cfg.table {
        match models.iter_mut().find(|m| m.record.model_id == row.record.model_id) {
            Some(m) => m.reported = row.reported,
            None => {
                let mut m = ModelData::new(row.record.clone());
                m.reported = row.reported;
                if m.source(use_reported) == Source::Missing {
                    missing.push(Missing::new(&m.record.model_id, "descriptors", "listed in the model table but not run"));
                }
                models.push(m);
            }
        }
    }
    models.sort_by_key(ModelData::sort_key);
    let mut seen = BTreeSet::new();
    if let Some(dup) = models.iter().find(|m| !seen.insert(m.record.model_id.clone())) {
        return Err(Error::Validation(format!("model {} appears in two run directories", dup.record.model_id)));
    }
    Ok((models, missing))
}

fn rsa_entries(models: &[&ModelData]) -> Vec<RsaEntry> {
    models
        .iter()
        .map(|m| RsaEntry {
            model_id: m.record.model_id.clone(),
            rdm: m.rdm.clone().expect("rdm"),
            anisotropy: m.measured.as_ref().map_or(f64::NAN, |d| d.anisotropy),
        })
        .collect()
}

/// Cross-model results without figures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rdm_of_rdms: Option<RdmOfRdms>,
    pub size_correlations: Option<Vec<SizeCorrelationRow>>,
    pub size_points: Vec<SizePoint>,
    pub missing: Vec<Missing>,
}

/// RDM-of-RDMs over models with measured RDMs and size correlations over
/// every model with descriptors.
pub fn compare(run_root: &Path, cfg: &ReportConfig) -> Result<Comparison> {
    cfg.reliability.validate()?;
    let (models, mut missing) = gather(run_root, cfg)?;
    let with_rdm: Vec<&ModelData> = models.iter().filter(|m| m.rdm.is_some()).collect();
    let rdm_of_rdms = if with_rdm.len() >= 2 {
        Some(rdm_of_rdms(&rsa_entries(&with_rdm), &cfg.reliability)?)
    } else {
        missing.push(Missing::new("report", "rdm_of_rdms", "needs RDMs from at least 2 models"));
        None
    };
    let size_points: Vec<SizePoint> = models
        .iter()
        .filter_map(|m| m.size_point(cfg.options.use_reported_descriptors).map(|p| p.0))
        .collect();
    let size = if size_points.len() >= 4 {
        match size_correlations(&size_points) {
            Ok(r) => Some(r),
            Err(emogeom_core::Error::UndefinedCorrelation(msg)) => {
                missing.push(Missing::new("report", "size_correlations", msg));
                None
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        missing.push(Missing::new("report", "size_correlations", "needs descriptors for at least 4 models"));
        None
    };
    missing.sort();
    Ok(Comparison {
        rdm_of_rdms,
        size_correlations: size,
        size_points,
        missing,
    })
}

/// Writes the report bundle for `run_root`. Gaps produce missing markers
/// (and placeholder figures) rather than errors.
pub fn emit_report(run_root: &Path, cfg: &ReportConfig) -> Result<ReportBundle> {
    cfg.reliability.validate()?;
    let out_dir = cfg.options.out.clone().unwrap_or_else(|| run_root.join("report"));
    let use_reported = cfg.options.use_reported_descriptors;
    let behavioral = load_behavioral(cfg.options.behavioral.as_deref())?;
    let (models, missing) = gather(run_root, cfg)?;

    let mut em = Emitter {
        out: &out_dir,
        figures: Vec::new(),
        tables: Vec::new(),
        missing,
    };

    // Descriptors table.
    let rows: Vec<DescriptorRow> = models
        .iter()
        .map(|m| {
            let source = m.source(use_reported);
            let (best_layer, best_layer_pct, anisotropy, rdm_std) = match source {
                Source::Measured => {
                    let d = m.measured.as_ref().expect("measured");
                    (Some(d.best_layer), Some(d.best_layer_pct * 100.0), Some(d.anisotropy), Some(d.rdm_std))
                }
                Source::Reported => {
                    let d = m.reported.expect("reported");
                    (Some(d.best_layer), Some(d.best_layer_pct), Some(d.anisotropy), Some(d.rdm_std))
                }
                Source::Missing => (None, None, None, None),
            };
            let r = &m.record;
            DescriptorRow {
                model_id: r.model_id.clone(),
                family: r.family.clone(),
                variant: r.variant,
                size_b: r.size_b,
                n_layers: r.n_layers,
                d_model: r.d_model,
                backend: r.backend_kind,
                precision: r.precision,
                best_layer,
                best_layer_pct,
                anisotropy,
                rdm_std,
                steering_regime: m.regime(),
                source,
                reliability: anisotropy.map(|a| cfg.reliability.classify(a)),
                reference_depths: m.reference_depths.clone(),
                reported: if source == Source::Measured { m.reported } else { None },
                behavioral: behavioral.get(&r.model_id).cloned().unwrap_or_default(),
            }
        })
        .collect();
    let stand_in = models.iter().filter_map(|m| m.stand_in).any(|s| s);
    let stimuli_note = stand_in.then_some(
        "stimuli: bundled stand-in corpus; passages and story templates are not the original wording",
    );
    let any_rows = rows.iter().any(|r| r.source != Source::Missing);
    let partial = rows.iter().any(|r| r.source == Source::Missing);
    em.table(
        "descriptors",
        status(any_rows, partial),
        json!({"reliability_thresholds": cfg.reliability, "stimuli_note": stimuli_note, "rows": rows}),
    )?;

    // RDM-of-RDMs and figure 1.
    let with_rdm: Vec<&ModelData> = models.iter().filter(|m| m.rdm.is_some()).collect();
    let rsa = if with_rdm.len() >= 2 {
        Some(rdm_of_rdms(&rsa_entries(&with_rdm), &cfg.reliability)?)
    } else {
        None
    };
    let families: Vec<&str> = with_rdm.iter().map(|m| m.record.family.as_str()).collect();
    match &rsa {
        Some(x) => {
            em.table(
                "rdm_of_rdms",
                "ok",
                json!({"method": "spearman_off_diagonal", "families": families, "result": x}),
            )?;
            let labels = x
                .model_order
                .iter()
                .zip(&x.reliability)
                .map(|(id, rel)| match rel {
                    Reliability::Unreliable => format!("{} \u{2020}", short(id)),
                    Reliability::Borderline => format!("{} *", short(id)),
                    Reliability::Ok => short(id).to_string(),
                })
                .collect();
            let h = Heatmap::similarity("RDM-of-RDMs (Spearman rho)", labels, x.matrix.clone(), "Spearman rho (similarity)");
            let footer = vec![format!(
                "\u{2020} unreliable (anisotropy > {}), * borderline (anisotropy > {})",
                cfg.reliability.unreliable_above, cfg.reliability.borderline_above
            )];
            let notes = BTreeMap::from([
                ("model_order".to_string(), json!(x.model_order)),
                ("families".to_string(), json!(families)),
                ("reliability".to_string(), json!(x.reliability)),
                ("anisotropy".to_string(), json!(x.anisotropy)),
            ]);
            let stem = out_dir.join("figures/fig1_rdm_of_rdms");
            em.figure("fig1_rdm_of_rdms", Ok(render_heatmaps("rdm_of_rdms", &[h], &footer, notes, &stem)?))?;
        }
        None => {
            let reason = format!("needs RDMs from at least 2 models, found {}", with_rdm.len());
            em.table("rdm_of_rdms", "missing", json!({"reason": reason}))?;
            em.figure("fig1_rdm_of_rdms", Err(reason))?;
        }
    }

    // Figure 2: dissociation pair.
    let pair: std::result::Result<(&ModelData, &ModelData), String> = match &cfg.options.dissociation_pair {
        Some([a, b]) => {
            let find = |id: &str| with_rdm.iter().copied().find(|m| m.record.model_id == id);
            find(a)
                .zip(find(b))
                .ok_or_else(|| format!("dissociation pair {a} x {b} lacks an RDM"))
        }
        None => {
            let instruct: Vec<&ModelData> =
                with_rdm.iter().copied().filter(|m| m.record.variant == Variant::Instruct).collect();
            let pool = if instruct.len() >= 2 { instruct } else { with_rdm.clone() };
            match pool.as_slice() {
                [a, b, ..] => Ok((*a, *b)),
                _ => Err("needs RDMs from at least 2 models".into()),
            }
        }
    };
    let fig2 = match pair {
        Ok((a, b)) => Ok(dissociation(a, b, &behavioral, &out_dir.join("figures/fig2_dissociation"))?),
        Err(e) => Err(e),
    };
    em.figure("fig2_dissociation", fig2)?;

    // Size correlations and figure 3.
    let points: Vec<(SizePoint, Source)> = models.iter().filter_map(|m| m.size_point(use_reported)).collect();
    let size_rows: Option<Vec<SizeCorrelationRow>> = if points.len() >= 4 {
        let ps: Vec<SizePoint> = points.iter().map(|p| p.0.clone()).collect();
        match size_correlations(&ps) {
            Ok(r) => Some(r),
            Err(emogeom_core::Error::UndefinedCorrelation(msg)) => {
                em.missing.push(Missing::new("report", "size_correlations", msg));
                None
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    let point_json: Vec<Value> = points
        .iter()
        .map(|(p, s)| {
            let mut v = json!(p);
            v["source"] = json!(s);
            v
        })
        .collect();
    match &size_rows {
        Some(rows) => {
            em.table("size_correlations", "ok", json!({"p_values": "uncorrected, t approximation on n - 2 df", "rows": rows, "points": point_json}))?;
            let find = |p: Predictor, o: Outcome| rows.iter().find(|r| r.predictor == p && r.outcome == o).expect("row");
            let panel = |p: Predictor, o: Outcome, title: &str, xl: &str, yl: &str| {
                let row = find(p, o);
                ScatterPanel {
                    title: title.into(),
                    x_label: xl.into(),
                    y_label: yl.into(),
                    points: points
                        .iter()
                        .map(|(sp, _)| {
                            let x = match p {
                                Predictor::SizeB => sp.size_b,
                                Predictor::DModel => sp.d_model as f64,
                            };
                            let y = match o {
                                Outcome::Anisotropy => sp.anisotropy,
                                Outcome::RdmStd => sp.rdm_std,
                                Outcome::BestLayerPct => sp.best_layer_pct,
                            };
                            (sp.model_id.clone(), x, y)
                        })
                        .collect(),
                    rho: row.rho,
                    p_uncorrected: row.p_uncorrected,
                }
            };
            let panels = [
                panel(Predictor::DModel, Outcome::Anisotropy, "(a) anisotropy vs d_model", "d_model", "anisotropy"),
                panel(Predictor::SizeB, Outcome::RdmStd, "(b) RDM std vs size", "parameters (B)", "RDM std"),
                panel(Predictor::SizeB, Outcome::BestLayerPct, "(c) best layer % vs size", "parameters (B)", "best layer %"),
            ];
            let stem = out_dir.join("figures/fig3_size_correlations");
            em.figure("fig3_size_correlations", Ok(render_scatter_panels("size_correlations", &panels, &stem)?))?;
        }
        None => {
            let reason = format!("needs descriptors for at least 4 models with varying size, found {}", points.len());
            em.table("size_correlations", "missing", json!({"reason": reason, "points": point_json}))?;
            em.figure("fig3_size_correlations", Err(reason))?;
        }
    }

    // Figure 4: pair groups.
    let fig4 = match &rsa {
        Some(x) => {
            let groups = pair_groups(&cfg.options, &with_rdm, x, &mut em.missing);
            if groups.is_empty() {
                Err("no model pairs to group".to_string())
            } else {
                let named: Vec<(String, Vec<f64>)> = groups.iter().map(|(n, v, _)| (n.clone(), v.clone())).collect();
                let stem = out_dir.join("figures/fig4_pair_groups");
                let files = render_group_boxplot(
                    &named,
                    Some(cfg.options.reference_rho),
                    "Pairwise RDM Spearman rho by pair group",
                    &stem,
                )?;
                // Record which pairs fed each group alongside the plotted values.
                let mut twin: Value = read_json(&files.json)?;
                twin["pairs"] = json!(groups.iter().map(|(n, _, p)| (n.clone(), p.clone())).collect::<BTreeMap<_, _>>());
                write_json(&files.json, &twin)?;
                Ok(files)
            }
        }
        None => Err("needs the RDM-of-RDMs matrix".to_string()),
    };
    em.figure("fig4_pair_groups", fig4)?;

    // Equivalence table.
    let eq: Vec<&EquivalenceReport> = models.iter().filter_map(|m| m.equivalence.as_ref()).collect();
    let eq_expected = cfg.analyses.equivalence && models.iter().any(|m| m.has_run);
    let eq_partial = cfg.analyses.equivalence && models.iter().any(|m| m.has_run && m.equivalence.is_none());
    let eq_status = if eq.is_empty() && !eq_expected { "not_requested" } else { status(!eq.is_empty(), eq_partial) };
    em.table("equivalence", eq_status, json!({"reports": eq}))?;

    // Decomposition table and figures 5 and 6.
    let dec: Vec<&ContrastReport> = models.iter().filter_map(|m| m.decomposition.as_ref()).collect();
    let dec_expected = cfg.analyses.decomposition && models.iter().any(|m| m.has_run && m.record.variant == Variant::Instruct);
    let dec_partial = cfg.analyses.decomposition
        && models.iter().any(|m| m.has_run && m.record.variant == Variant::Instruct && m.decomposition.is_none());
    let dec_status = if dec.is_empty() && !dec_expected { "not_requested" } else { status(!dec.is_empty(), dec_partial) };
    em.table(
        "decomposition",
        dec_status,
        json!({
            "conditions": {
                "A": "comprehension, fp16",
                "B": "generation, alternative sub-parameters, fp16",
                "C": "generation, matched sub-parameters, fp16",
                "D": "generation, matched sub-parameters, int8",
            },
            "reports": dec,
        }),
    )?;
    if dec.is_empty() {
        let reason = "no decomposition reports".to_string();
        em.figure("fig5_decomposition_matrices", Err(reason.clone()))?;
        em.figure("fig6_decomposition_contrasts", Err(reason))?;
    } else {
        let labels: Vec<String> = ["A", "B", "C", "D"].map(String::from).to_vec();
        let panels: Vec<Heatmap> = dec
            .iter()
            .map(|r| {
                Heatmap::similarity(
                    short(&r.model_id),
                    labels.clone(),
                    r.full_matrix.iter().map(|row| row.to_vec()).collect(),
                    "Spearman rho (similarity)",
                )
            })
            .collect();
        let stem = out_dir.join("figures/fig5_decomposition_matrices");
        let notes = BTreeMap::from([("model_order".to_string(), json!(dec.iter().map(|r| &r.model_id).collect::<Vec<_>>()))]);
        em.figure("fig5_decomposition_matrices", Ok(render_heatmaps("decomposition_matrices", &panels, &[], notes, &stem)?))?;

        let series: Vec<String> = ["A-C method", "B-C sub-parameters", "C-D precision", "A-D conflated"]
            .map(String::from)
            .to_vec();
        let groups: Vec<BarGroup> = dec
            .iter()
            .map(|r| BarGroup {
                name: short(&r.model_id).into(),
                values: vec![r.rho_ac, r.rho_bc, r.rho_cd, r.rho_ad],
            })
            .collect();
        let stem = out_dir.join("figures/fig6_decomposition_contrasts");
        em.figure(
            "fig6_decomposition_contrasts",
            Ok(render_grouped_bars("decomposition_contrasts", "Four-layer decomposition contrasts", &series, &groups, &[3], &stem)?),
        )?;
    }

    let mut missing = em.missing;
    missing.sort();
    missing.dedup();
    let index = json!({
        "complete": missing.is_empty(),
        "stimuli_note": stimuli_note,
        "models": models.iter().map(|m| &m.record.model_id).collect::<Vec<_>>(),
        "figures": em.figures,
        "tables": em.tables,
        "missing": missing,
    });
    write_json(&out_dir.join("report.json"), &index)?;
    Ok(ReportBundle {
        out_dir,
        index,
        missing,
    })
}
