//! Cosine RDMs and the per-model geometric descriptors.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::capture::ActivationMatrix;
use crate::comprehension::LayerSweep;
use crate::math::{all_finite, dot, mean_pairwise_cosine, norm, population_std};
use crate::record::{BackendKind, EmotionVectorSet, ModelRecord};
use crate::{Error, Result};

/// Square cosine-similarity matrix over labelled vectors.
///
/// Entries are similarities; distance views (`1 - s`) are produced only for
/// figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rdm {
    pub model_id: String,
    pub layer: usize,
    pub labels: Vec<String>,
    matrix: Vec<f64>,
    pub off_diag_std: f64,
    pub contains_nan: bool,
}

impl Rdm {
    /// Builds an RDM from a precomputed row-major matrix, checking shape and
    /// symmetry and recomputing the summary statistics.
    pub fn from_matrix(
        model_id: impl Into<String>,
        layer: usize,
        labels: Vec<String>,
        matrix: Vec<f64>,
    ) -> Result<Self> {
        let n = labels.len();
        if matrix.len() != n * n {
            return Err(Error::Dimension {
                expected: n * n,
                found: matrix.len(),
            });
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (matrix[i * n + j], matrix[j * n + i]);
                if (a - b).abs() > 1e-6 && !(a.is_nan() && b.is_nan()) {
                    return Err(Error::Invariant(format!(
                        "matrix not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        let mut rdm = Self {
            model_id: model_id.into(),
            layer,
            labels,
            matrix,
            off_diag_std: 0.0,
            contains_nan: false,
        };
        rdm.contains_nan = rdm.matrix.iter().any(|x| x.is_nan());
        rdm.off_diag_std = rdm_std(&rdm);
        Ok(rdm)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n() + j]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Row-major rows, convenient for JSON.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.matrix.chunks_exact(self.n()).map(<[f64]>::to_vec).collect()
    }

    /// Strict upper triangle, row by row (`n(n-1)/2` entries).
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(self.get(i, j));
            }
        }
        out
    }

    /// Every off-diagonal entry (both triangles).
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out.push(self.get(i, j));
                }
            }
        }
        out
    }

    /// The sub-RDM over `keep`, in the order given. Every label must exist.
    pub fn restrict(&self, keep: &[String]) -> Result<Self> {
        let idx: Vec<usize> = keep
            .iter()
            .map(|l| {
                self.labels
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| Error::Alignment(format!("label '{l}' not in RDM")))
            })
            .collect::<Result<_>>()?;
        let mut m = Vec::with_capacity(idx.len() * idx.len());
        for &i in &idx {
            for &j in &idx {
                m.push(self.get(i, j));
            }
        }
        Self::from_matrix(self.model_id.clone(), self.layer, keep.to_vec(), m)
    }

    /// Distance view `1 - similarity`.
    pub fn distance_matrix(&self) -> Vec<f64> {
        self.matrix.iter().map(|s| 1.0 - s).collect()
    }

    /// Checks symmetry (1e-6) and unit diagonal (1e-5) for nonzero rows.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.n();
        for i in 0..n {
            let d = self.get(i, i);
            if !d.is_nan() && (d - 1.0).abs() > 1e-5 {
                return Err(Error::Invariant(format!("diagonal entry {i} is {d}")));
            }
            for j in (i + 1)..n {
                let (a, b) = (self.get(i, j), self.get(j, i));
                if !(a.is_nan() && b.is_nan()) && (a - b).abs() > 1e-6 {
                    return Err(Error::Invariant(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(())
    }
}

/// Cosine RDM over labelled rows. Rows must be finite and nonzero.
pub fn compute_rdm_from_rows(
    model_id: &str,
    layer: usize,
    labels: &[String],
    rows: &[&[f32]],
) -> Result<Rdm> {
    if labels.len() != rows.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            found: rows.len(),
        });
    }
    let n = rows.len();
    let mut norms = Vec::with_capacity(n);
    for (label, row) in labels.iter().zip(rows) {
        if !all_finite(row) {
            return Err(Error::Argument(format!("vector for '{label}' is not finite")));
        }
        let nr = norm(row);
        if nr == 0.0 {
            return Err(Error::ZeroNorm(label.clone()));
        }
        norms.push(nr);
    }
    let mut m = alloc::vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let c = dot(rows[i], rows[j]) / (norms[i] * norms[j]);
            m[i * n + j] = c;
            m[j * n + i] = c;
        }
    }
    Rdm::from_matrix(model_id, layer, labels.to_vec(), m)
}

pub fn compute_rdm(set: &EmotionVectorSet) -> Result<Rdm> {
    let rows: Vec<&[f32]> = set.rows().collect();
    compute_rdm_from_rows(&set.model.model_id, set.layer, &set.emotion_order, &rows)
}

/// Population standard deviation of the strict upper triangle.
pub fn rdm_std(rdm: &Rdm) -> f64 {
    population_std(&rdm.upper_triangle())
}

/// Mean pairwise cosine of neutral-sentence activations at one layer.
pub fn anisotropy(neutral: &ActivationMatrix) -> Result<f64> {
    if neutral.len() < 2 {
        return Err(Error::Argument(format!(
            "anisotropy needs at least two rows, got {}",
            neutral.len()
        )));
    }
    if neutral.any_non_finite() {
        return Err(Error::Argument(format!(
            "non-finite neutral activations at layer {}; anisotropy unavailable",
            neutral.layer
        )));
    }
    let rows: Vec<&[f32]> = neutral.rows().collect();
    mean_pairwise_cosine(&rows).ok_or_else(|| {
        Error::Argument(format!("zero-norm neutral activation at layer {}", neutral.layer))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringRegime {
    Surgical,
    RepetitiveCollapse,
    Explosive,
    #[serde(alias = "not_available_hf_backend")]
    NotAvailable,
}

impl SteeringRegime {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Surgical => "surgical",
            Self::RepetitiveCollapse => "repetitive_collapse",
            Self::Explosive => "explosive",
            Self::NotAvailable => "not_available",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryDescriptors {
    pub model_id: String,
    pub anisotropy: f64,
    pub rdm_std: f64,
    pub best_layer: usize,
    pub best_layer_pct: f64,
    pub steering_regime: SteeringRegime,
}

/// Anisotropy as measured at a specific layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerAnisotropy {
    pub layer: usize,
    pub value: f64,
}

/// Assembles the descriptor record; every input must refer to the sweep's
/// best layer.
pub fn descriptors(
    model: &ModelRecord,
    sweep: &LayerSweep,
    rdm: &Rdm,
    anisotropy: LayerAnisotropy,
    regime: Option<SteeringRegime>,
) -> Result<GeometryDescriptors> {
    if sweep.n_layers() != model.n_layers {
        return Err(Error::Consistency(format!(
            "sweep covers {} layers, model has {}",
            sweep.n_layers(),
            model.n_layers
        )));
    }
    if rdm.model_id != model.model_id {
        return Err(Error::Consistency(format!(
            "RDM belongs to {}, not {}",
            rdm.model_id, model.model_id
        )));
    }
    if rdm.layer != sweep.best_layer || anisotropy.layer != sweep.best_layer {
        return Err(Error::Consistency(format!(
            "layers differ: best {}, RDM {}, anisotropy {}",
            sweep.best_layer, rdm.layer, anisotropy.layer
        )));
    }
    let steering_regime = match (model.backend_kind, regime) {
        (BackendKind::HiddenStateSequence, None | Some(SteeringRegime::NotAvailable)) => {
            SteeringRegime::NotAvailable
        }
        (BackendKind::HiddenStateSequence, Some(r)) => {
            return Err(Error::Consistency(format!(
                "steering regime '{}' reported for a hidden_state_sequence backend",
                r.as_str()
            )))
        }
        (BackendKind::NamedHook, r) => r.unwrap_or(SteeringRegime::NotAvailable),
    };
    let out = GeometryDescriptors {
        model_id: model.model_id.clone(),
        anisotropy: anisotropy.value,
        rdm_std: rdm.off_diag_std,
        best_layer: sweep.best_layer,
        best_layer_pct: sweep.best_layer_pct,
        steering_regime,
    };
    if !(out.anisotropy.is_finite() && out.rdm_std.is_finite()) {
        return Err(Error::Invariant("descriptors must be finite at the best layer".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::tests::record;
    use crate::vocab::canonical_labels;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i:02}")).collect()
    }

    #[test]
    fn orthogonal_rows_give_identity() {
        let rows: Vec<Vec<f32>> = (0..4)
            .map(|i| (0..4).map(|c| if c == i { 2.0 } else { 0.0 }).collect())
            .collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let rdm = compute_rdm_from_rows("m", 0, &labels(4), &refs).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(rdm.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn duplicate_rows_have_unit_similarity() {
        let a = [0.3f32, -1.0, 2.0];
        let b = [1.0f32, 1.0, 1.0];
        let rdm = compute_rdm_from_rows("m", 0, &labels(3), &[&a, &b, &a]).unwrap();
        assert!((rdm.get(0, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn miniature_matches_hand_cosines() {
        let a = [1.0f32, 0.0, 0.0, 0.0];
        let b = [1.0f32, 1.0, 0.0, 0.0];
        let c = [1.0f32, 2.0, 2.0, 0.0];
        let rdm = compute_rdm_from_rows("m", 0, &labels(3), &[&a, &b, &c]).unwrap();
        // ab = 1/sqrt2, ac = 1/3, bc = 3/(sqrt2*3)
        assert!((rdm.get(0, 1) - 1.0 / 2f64.sqrt()).abs() < 1e-9);
        assert!((rdm.get(0, 2) - 1.0 / 3.0).abs() < 1e-9);
        assert!((rdm.get(1, 2) - 1.0 / 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn zero_row_names_the_emotion() {
        let a = [1.0f32, 0.0];
        let z = [0.0f32, 0.0];
        let err = compute_rdm_from_rows("m", 0, &labels(2), &[&a, &z]).unwrap_err();
        assert_eq!(err, Error::ZeroNorm("e01".into()));
    }

    #[test]
    fn rdm_std_of_constant_off_diagonal_is_zero() {
        let n = 5;
        let m: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.3 }).collect();
        let rdm = Rdm::from_matrix("m", 0, labels(n), m).unwrap();
        assert!(rdm_std(&rdm).abs() < 1e-15);
    }

    #[test]
    fn rdm_std_matches_direct_formula_over_210_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 21;
        let mut m = vec![1.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.random_range(-1.0..1.0);
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        let rdm = Rdm::from_matrix("m", 0, labels(n), m.clone()).unwrap();
        let mut vals = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                vals.push(m[i * n + j]);
            }
        }
        assert_eq!(vals.len(), 210);
        let mu = vals.iter().sum::<f64>() / 210.0;
        let direct = (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 210.0).sqrt();
        assert!((rdm_std(&rdm) - direct).abs() < 1e-14);
        // duplication invariance
        let full = population_std(&rdm.off_diagonal());
        assert!((full - direct).abs() < 1e-12);
    }

    #[test]
    fn anisotropy_extremes() {
        let same: Vec<Vec<f32>> = (0..20).map(|_| vec![0.5, -2.0, 1.0]).collect();
        let m = ActivationMatrix::from_rows(record(3, 1), 0, same).unwrap();
        assert!((anisotropy(&m).unwrap() - 1.0).abs() < 1e-12);

        let ortho: Vec<Vec<f32>> = (0..20)
            .map(|i| (0..20).map(|c| if c == i { 1.0 } else { 0.0 }).collect())
            .collect();
        let m = ActivationMatrix::from_rows(record(20, 1), 0, ortho).unwrap();
        assert_eq!(anisotropy(&m).unwrap(), 0.0);

        let mut bad: Vec<Vec<f32>> = (0..20).map(|_| vec![1.0, 1.0, 1.0]).collect();
        bad[7][1] = f32::NAN;
        let m = ActivationMatrix::from_rows(record(3, 1), 0, bad).unwrap();
        assert!(anisotropy(&m).is_err());
    }

    #[test]
    fn restriction_drops_rows_and_columns() {
        let rows: Vec<Vec<f32>> = (0..21).map(|i| vec![1.0, i as f32, (i * i) as f32 * 0.1]).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let rdm = compute_rdm_from_rows("m", 0, &canonical_labels(), &refs).unwrap();
        let keep: Vec<String> = canonical_labels().into_iter().filter(|l| l != "neutral").collect();
        let sub = rdm.restrict(&keep).unwrap();
        assert_eq!(sub.n(), 20);
        // "proud" is index 18 in the full RDM and 17 after dropping neutral.
        assert_eq!(sub.get(17, 0), rdm.get(18, 0));
        assert!(rdm.restrict(&["joyful".into()]).is_err());
    }

    fn sweep_at(best: usize, n: usize) -> LayerSweep {
        let vals = (0..n).map(|l| Some(if l == best { -0.5 } else { 0.1 })).collect();
        LayerSweep::from_values(vals).unwrap()
    }

    fn rdm_at(model: &ModelRecord, layer: usize) -> Rdm {
        let rows: Vec<Vec<f32>> = (0..3).map(|i| vec![1.0, i as f32]).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        compute_rdm_from_rows(&model.model_id, layer, &labels(3), &refs).unwrap()
    }

    #[test]
    fn descriptors_reject_layer_mismatch() {
        let model = record(2, 8);
        let sweep = sweep_at(3, 8);
        let err = descriptors(&model, &sweep, &rdm_at(&model, 4), LayerAnisotropy { layer: 3, value: 0.5 }, None);
        assert!(matches!(err, Err(Error::Consistency(_))));
        let ok = descriptors(&model, &sweep, &rdm_at(&model, 3), LayerAnisotropy { layer: 3, value: 0.5 }, Some(SteeringRegime::Surgical)).unwrap();
        assert_eq!(ok.best_layer, 3);
        assert_eq!(ok.best_layer_pct, 3.0 / 8.0);
        assert_eq!(ok.steering_regime, SteeringRegime::Surgical);
    }

    #[test]
    fn hidden_state_backends_have_no_regime() {
        let mut model = record(2, 8);
        model.backend_kind = BackendKind::HiddenStateSequence;
        let sweep = sweep_at(2, 8);
        let d = descriptors(&model, &sweep, &rdm_at(&model, 2), LayerAnisotropy { layer: 2, value: 0.9 }, None).unwrap();
        assert_eq!(d.steering_regime, SteeringRegime::NotAvailable);
        assert!(descriptors(&model, &sweep, &rdm_at(&model, 2), LayerAnisotropy { layer: 2, value: 0.9 }, Some(SteeringRegime::Explosive)).is_err());
    }

    proptest! {
        #[test]
        fn rdm_is_invariant_to_positive_row_scaling(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 12;
            let rows: Vec<Vec<f32>> = (0..21).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
            let scaled: Vec<Vec<f32>> = rows.iter().map(|r| {
                let s = rng.random_range(0.01f32..100.0);
                r.iter().map(|x| x * s).collect()
            }).collect();
            let a: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
            let b: Vec<&[f32]> = scaled.iter().map(|r| r.as_slice()).collect();
            let ra = compute_rdm_from_rows("m", 0, &canonical_labels(), &a).unwrap();
            let rb = compute_rdm_from_rows("m", 0, &canonical_labels(), &b).unwrap();
            ra.check_invariants().unwrap();
            for (x, y) in ra.matrix().iter().zip(rb.matrix()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
