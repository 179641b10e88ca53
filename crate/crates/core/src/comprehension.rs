//! Centered per-emotion vectors and best-layer selection.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{all_finite, mean_pairwise_cosine};
use crate::record::{EmotionVectorSet, ModelRecord};
use crate::vocab::{canonical_labels, EMOTIONS, N_EMOTIONS};
use crate::{Error, Result};

/// Builds the centered vector set at one layer.
///
/// `groups[i]` holds the passage activations of `EMOTIONS[i]`. Non-finite
/// rows are dropped first; each emotion is averaged over its remaining
/// passages, then the unweighted mean of the 21 emotion means is subtracted.
pub fn build_emotion_vectors(
    model: &ModelRecord,
    layer: usize,
    groups: &[Vec<&[f32]>],
) -> Result<EmotionVectorSet> {
    model.check_layer(layer)?;
    if groups.len() != N_EMOTIONS {
        return Err(Error::Invariant(format!(
            "expected passage groups for {N_EMOTIONS} emotions, got {}",
            groups.len()
        )));
    }
    let d = model.d_model;
    let mut means = vec![0.0f64; N_EMOTIONS * d];
    for (e, rows) in groups.iter().enumerate() {
        let mut count = 0usize;
        let acc = &mut means[e * d..(e + 1) * d];
        for row in rows.iter().filter(|r| all_finite(r)) {
            if row.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    found: row.len(),
                });
            }
            for (a, &x) in acc.iter_mut().zip(row.iter()) {
                *a += x as f64;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Extraction {
                emotion: EMOTIONS[e].into(),
                layer,
                reason: "no finite passage activations".into(),
            });
        }
        acc.iter_mut().for_each(|a| *a /= count as f64);
    }

    let mut global = vec![0.0f64; d];
    for e in 0..N_EMOTIONS {
        for (g, m) in global.iter_mut().zip(&means[e * d..(e + 1) * d]) {
            *g += m;
        }
    }
    global.iter_mut().for_each(|g| *g /= N_EMOTIONS as f64);

    let centered: Vec<f32> = means
        .chunks_exact(d)
        .flat_map(|m| m.iter().zip(&global).map(|(x, g)| (x - g) as f32))
        .collect();
    EmotionVectorSet::new(model.clone(), layer, canonical_labels(), centered, true)
}

/// Mean cosine over the 210 unordered pairs of centered vectors; `None` when
/// any vector is non-finite or zero.
pub fn layer_mean_cosine(set: &EmotionVectorSet) -> Option<f64> {
    let rows: Vec<&[f32]> = set.rows().collect();
    mean_pairwise_cosine(&rows)
}

/// Argmin over non-null entries; ties go to the smaller index.
pub fn select_best_layer(per_layer_mean_cosine: &[Option<f64>]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in per_layer_mean_cosine.iter().enumerate() {
        if let Some(v) = *v {
            if v.is_nan() {
                continue;
            }
            match best {
                Some((_, b)) if v >= b => {}
                _ => best = Some((i, v)),
            }
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Argument("layer sweep has no finite entries".into()))
}

/// Best layer as a fraction of depth: `layer / n_layers` with 0-based
/// indices, so layer 11 of 28 is 0.393.
pub fn best_layer_fraction(layer: usize, n_layers: usize) -> f64 {
    layer as f64 / n_layers as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweep {
    pub per_layer_mean_cosine: Vec<Option<f64>>,
    pub best_layer: usize,
    pub best_layer_pct: f64,
}

impl LayerSweep {
    /// One entry per layer; errors when every layer is null.
    pub fn from_values(per_layer_mean_cosine: Vec<Option<f64>>) -> Result<Self> {
        let best_layer = select_best_layer(&per_layer_mean_cosine).map_err(|_| Error::Extraction {
            emotion: "*".into(),
            layer: 0,
            reason: "every layer is non-finite; model unusable at this precision".into(),
        })?;
        let best_layer_pct = best_layer_fraction(best_layer, per_layer_mean_cosine.len());
        Ok(Self {
            per_layer_mean_cosine,
            best_layer,
            best_layer_pct,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer_mean_cosine.len()
    }

    /// First null layer, if any.
    pub fn first_null_layer(&self) -> Option<usize> {
        self.per_layer_mean_cosine.iter().position(Option::is_none)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::tests::record;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn groups_from(data: &[Vec<Vec<f32>>]) -> Vec<Vec<&[f32]>> {
        data.iter().map(|g| g.iter().map(|r| r.as_slice()).collect()).collect()
    }

    /// Two-step oracle: per-emotion means, then subtract the mean of means.
    fn oracle(data: &[Vec<Vec<f32>>], d: usize) -> Vec<Vec<f64>> {
        let means: Vec<Vec<f64>> = data
            .iter()
            .map(|g| {
                (0..d)
                    .map(|c| g.iter().map(|r| r[c] as f64).sum::<f64>() / g.len() as f64)
                    .collect()
            })
            .collect();
        let global: Vec<f64> = (0..d)
            .map(|c| means.iter().map(|m| m[c]).sum::<f64>() / means.len() as f64)
            .collect();
        means
            .iter()
            .map(|m| m.iter().zip(&global).map(|(a, b)| a - b).collect())
            .collect()
    }

    fn random_groups(rng: &mut ChaCha8Rng, d: usize, per: usize) -> Vec<Vec<Vec<f32>>> {
        (0..N_EMOTIONS)
            .map(|_| {
                (0..per)
                    .map(|_| (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn identical_activations_center_to_zero() {
        let v = vec![0.5f32, -1.0, 3.0];
        let data: Vec<Vec<Vec<f32>>> = (0..N_EMOTIONS).map(|_| vec![v.clone(), v.clone()]).collect();
        let set = build_emotion_vectors(&record(3, 2), 1, &groups_from(&data)).unwrap();
        assert!(set.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_hot_means_center_analytically() {
        let d = 21;
        let data: Vec<Vec<Vec<f32>>> = (0..N_EMOTIONS)
            .map(|e| vec![(0..d).map(|c| if c == e { 1.0 } else { 0.0 }).collect()])
            .collect();
        let set = build_emotion_vectors(&record(d, 1), 0, &groups_from(&data)).unwrap();
        for e in 0..N_EMOTIONS {
            for c in 0..d {
                let want = if c == e { 1.0 - 1.0 / 21.0 } else { -1.0 / 21.0 };
                assert!((set.row(e)[c] as f64 - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn matches_two_step_oracle_on_three_passage_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_groups(&mut rng, 8, 3);
        let set = build_emotion_vectors(&record(8, 1), 0, &groups_from(&data)).unwrap();
        let want = oracle(&data, 8);
        for e in 0..N_EMOTIONS {
            for c in 0..8 {
                assert!((set.row(e)[c] as f64 - want[e][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unequal_passage_counts_use_unweighted_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = random_groups(&mut rng, 4, 2);
        data[3].push(vec![9.0, 9.0, 9.0, 9.0]);
        data[3].push(vec![-9.0, 1.0, 0.0, 2.0]);
        let set = build_emotion_vectors(&record(4, 1), 0, &groups_from(&data)).unwrap();
        let want = oracle(&data, 4);
        for e in 0..N_EMOTIONS {
            for c in 0..4 {
                assert!((set.row(e)[c] as f64 - want[e][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_finite_rows_are_dropped_and_empty_emotions_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = random_groups(&mut rng, 4, 2);
        let clean = build_emotion_vectors(&record(4, 3), 2, &groups_from(&data[..])).unwrap();
        data[0].push(vec![f32::NAN, 0.0, 0.0, 0.0]);
        let with_nan = build_emotion_vectors(&record(4, 3), 2, &groups_from(&data)).unwrap();
        assert_eq!(clean, with_nan);

        data[4] = vec![vec![f32::INFINITY, 0.0, 0.0, 0.0]];
        match build_emotion_vectors(&record(4, 3), 2, &groups_from(&data)) {
            Err(Error::Extraction { emotion, layer, .. }) => {
                assert_eq!(emotion, "brooding");
                assert_eq!(layer, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn select_best_layer_examples() {
        assert_eq!(select_best_layer(&[Some(0.9), Some(0.2), Some(0.5)]).unwrap(), 1);
        assert_eq!(select_best_layer(&[Some(0.4), None, Some(0.4)]).unwrap(), 0);
        assert_eq!(select_best_layer(&[None, Some(0.7), Some(0.3), None]).unwrap(), 2);
        assert!(select_best_layer(&[]).is_err());
        assert!(select_best_layer(&[None, None]).is_err());
    }

    #[test]
    fn all_null_sweep_is_an_extraction_error() {
        assert!(matches!(
            LayerSweep::from_values(vec![None, None, None]),
            Err(Error::Extraction { .. })
        ));
    }

    #[test]
    fn best_layer_fraction_matches_reported_depths() {
        let pct = |l, n| (best_layer_fraction(l, n) * 1000.0).round() / 10.0;
        assert_eq!(pct(11, 28), 39.3);
        assert_eq!(pct(15, 26), 57.7);
        assert_eq!(pct(13, 32), 40.6);
    }

    #[test]
    fn orthogonal_layer_wins_over_collinear_layers() {
        // Stub activations: layer 2 emotion means are one-hot (orthogonal after
        // centering up to the shared -1/21 offset); other layers are collinear
        // with distinct magnitudes.
        let d = 21;
        let model = record(d, 4);
        let mut values = Vec::new();
        let mut oracle_values = Vec::new();
        for layer in 0..4 {
            let data: Vec<Vec<Vec<f32>>> = (0..N_EMOTIONS)
                .map(|e| {
                    let row: Vec<f32> = if layer == 2 {
                        (0..d).map(|c| if c == e { 1.0 } else { 0.0 }).collect()
                    } else {
                        let s = if e % 2 == 0 { 1.0 } else { 3.0 };
                        (0..d).map(|_| s).collect()
                    };
                    vec![row]
                })
                .collect();
            let set = build_emotion_vectors(&model, layer, &groups_from(&data)).unwrap();
            values.push(layer_mean_cosine(&set));
            // Direct mean-cosine oracle over the centered rows.
            let rows: Vec<Vec<f64>> = set.rows().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
            let mut acc = 0.0;
            for i in 0..21 {
                for j in (i + 1)..21 {
                    let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    let ni: f64 = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nj: f64 = rows[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                    acc += dot / (ni * nj);
                }
            }
            oracle_values.push(acc / 210.0);
        }
        for (v, o) in values.iter().zip(&oracle_values) {
            assert!((v.unwrap() - o).abs() < 1e-9);
        }
        let sweep = LayerSweep::from_values(values).unwrap();
        assert_eq!(sweep.best_layer, 2);
        assert!((sweep.per_layer_mean_cosine[2].unwrap() + 1.0 / 20.0).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn equals_oracle_and_sums_to_zero(seed in any::<u64>(), d in 1usize..=16, per in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_groups(&mut rng, d, per);
            let set = build_emotion_vectors(&record(d, 1), 0, &groups_from(&data)).unwrap();
            let want = oracle(&data, d);
            for e in 0..N_EMOTIONS {
                for c in 0..d {
                    prop_assert!((set.row(e)[c] as f64 - want[e][c]).abs() < 1e-6);
                }
            }
            let mean_norm = set.rows().map(crate::norm).sum::<f64>() / 21.0;
            prop_assert!(set.centering_residual() <= 1e-3 * mean_norm.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn passage_order_does_not_matter(seed in any::<u64>(), d in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = random_groups(&mut rng, d, 3);
            let mut shuffled = data.clone();
            for g in shuffled.iter_mut() {
                g.reverse();
                g.swap(0, 1);
            }
            let a = build_emotion_vectors(&record(d, 1), 0, &groups_from(&data)).unwrap();
            let b = build_emotion_vectors(&record(d, 1), 0, &groups_from(&shuffled)).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn appending_nulls_keeps_best_layer(values in proptest::collection::vec(proptest::option::of(-1.0f64..1.0), 1..12), extra in 0usize..5) {
            prop_assume!(values.iter().any(Option::is_some));
            let best = select_best_layer(&values).unwrap();
            let mut padded = values.clone();
            padded.extend(core::iter::repeat_n(None, extra));
            prop_assert_eq!(select_best_layer(&padded).unwrap(), best);
        }
    }
}
