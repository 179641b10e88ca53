//! Agreement between two extraction routes over the same model, layer and
//! stimuli.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{compute_rdm, Rdm};
use crate::math::cosine;
use crate::record::{BackendKind, EmotionVectorSet};
use crate::rsa::{rdm_similarity, CorrelationMethod};
use crate::{Error, Result};

/// `||a - b||_F / ||a||_F`; `a` is the reference.
pub fn relative_frobenius(a: &Rdm, b: &Rdm) -> Result<f64> {
    if a.labels != b.labels {
        return Err(Error::Alignment("RDM label orders differ".into()));
    }
    let (mut diff, mut base) = (0.0, 0.0);
    for (x, y) in a.matrix().iter().zip(b.matrix()) {
        diff += (x - y) * (x - y);
        base += x * x;
    }
    if base == 0.0 {
        return Err(Error::ZeroNorm("reference RDM".into()));
    }
    Ok(libm::sqrt(diff / base))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub model_id: String,
    pub layer: usize,
    pub reference_backend: BackendKind,
    pub other_backend: BackendKind,
    pub per_emotion_cosine: Vec<(String, f64)>,
    pub mean_cosine: f64,
    pub min_cosine: f64,
    pub rdm_spearman: f64,
    pub relative_frobenius: f64,
}

/// Compares two vector sets built from the same stimuli through different
/// backends. `reference` supplies the Frobenius denominator.
pub fn compare_vector_sets(
    reference: &EmotionVectorSet,
    reference_backend: BackendKind,
    other: &EmotionVectorSet,
    other_backend: BackendKind,
) -> Result<EquivalenceReport> {
    if reference.model.model_id != other.model.model_id || reference.layer != other.layer {
        return Err(Error::Alignment(format!(
            "comparing {} layer {} against {} layer {}",
            reference.model.model_id, reference.layer, other.model.model_id, other.layer
        )));
    }
    if reference.emotion_order != other.emotion_order {
        return Err(Error::Alignment("emotion orders differ".into()));
    }
    if reference.d_model() != other.d_model() {
        return Err(Error::Dimension {
            expected: reference.d_model(),
            found: other.d_model(),
        });
    }
    let mut per_emotion_cosine = Vec::with_capacity(reference.emotion_order.len());
    for (i, e) in reference.emotion_order.iter().enumerate() {
        let c = cosine(reference.row(i), other.row(i));
        if !c.is_finite() {
            return Err(Error::ZeroNorm(format!("vector for {e}")));
        }
        per_emotion_cosine.push((e.clone(), c));
    }
    let n = per_emotion_cosine.len() as f64;
    let mean_cosine = per_emotion_cosine.iter().map(|(_, c)| c).sum::<f64>() / n;
    let min_cosine = per_emotion_cosine
        .iter()
        .map(|(_, c)| *c)
        .fold(f64::INFINITY, f64::min);
    let ra = compute_rdm(reference)?;
    let rb = compute_rdm(other)?;
    Ok(EquivalenceReport {
        model_id: reference.model.model_id.clone(),
        layer: reference.layer,
        reference_backend,
        other_backend,
        per_emotion_cosine,
        mean_cosine,
        min_cosine,
        rdm_spearman: rdm_similarity(&ra, &rb, CorrelationMethod::Spearman)?,
        relative_frobenius: relative_frobenius(&ra, &rb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::tests::record;
    use crate::vocab::canonical_labels;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn centered_set(rng: &mut ChaCha8Rng, d: usize) -> EmotionVectorSet {
        let mut v: Vec<f32> = (0..21 * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        for j in 0..d {
            let m = (0..21).map(|i| v[i * d + j]).sum::<f32>() / 21.0;
            for i in 0..21 {
                v[i * d + j] -= m;
            }
        }
        EmotionVectorSet::new(record(d, 4), 2, canonical_labels(), v, true).unwrap()
    }

    #[test]
    fn identical_sets_agree_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = centered_set(&mut rng, 12);
        let r = compare_vector_sets(&s, BackendKind::NamedHook, &s, BackendKind::HiddenStateSequence).unwrap();
        assert!((r.mean_cosine - 1.0).abs() < 1e-12);
        assert!((r.min_cosine - 1.0).abs() < 1e-12);
        assert!((r.rdm_spearman - 1.0).abs() < 1e-12);
        assert_eq!(r.relative_frobenius, 0.0);
        assert_eq!(r.per_emotion_cosine.len(), 21);
    }

    #[test]
    fn frobenius_of_known_perturbation() {
        let labels = vec!["a".into(), "b".into()];
        let a = Rdm::from_matrix("m", 0, labels.clone(), vec![1.0, 0.5, 0.5, 1.0]).unwrap();
        let b = Rdm::from_matrix("m", 0, labels, vec![1.0, 0.4, 0.4, 1.0]).unwrap();
        let want = (0.02f64 / 2.5).sqrt();
        assert!((relative_frobenius(&a, &b).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn small_noise_gives_near_unit_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = centered_set(&mut rng, 32);
        let noisy: Vec<f32> = s.as_slice().iter().map(|x| x * (1.0 + 1e-6 * rng.random_range(-1.0f32..1.0))).collect();
        let t = EmotionVectorSet::new(s.model.clone(), 2, canonical_labels(), noisy, true).unwrap();
        let r = compare_vector_sets(&s, BackendKind::NamedHook, &t, BackendKind::HiddenStateSequence).unwrap();
        assert!(r.min_cosine > 0.99999);
        assert!(r.relative_frobenius < 1e-4);
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = centered_set(&mut rng, 8);
        let t = EmotionVectorSet::new(s.model.clone(), 3, canonical_labels(), s.as_slice().to_vec(), true).unwrap();
        assert!(compare_vector_sets(&s, BackendKind::NamedHook, &t, BackendKind::NamedHook).is_err());
    }
}
