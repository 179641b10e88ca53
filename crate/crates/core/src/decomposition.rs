//! Four-condition method × precision decomposition.
//!
//! A: comprehension extraction at fp16, restricted to the generation
//! emotions. B: fp16 generation with the alternative sub-parameters.
//! C: fp16 generation with the matched sub-parameters. D: int8 generation
//! with the matched sub-parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::Rdm;
use crate::rsa::{rdm_similarity, CorrelationMethod};
use crate::vocab::NEUTRAL;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    A,
    B,
    C,
    D,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::A, Condition::B, Condition::C, Condition::D];

    pub fn letter(self) -> char {
        match self {
            Self::A => 'A',
            Self::B => 'B',
            Self::C => 'C',
            Self::D => 'D',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.letter() == c.to_ascii_uppercase())
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::A => "comprehension, fp16",
            Self::B => "generation, fp16, alternative sub-parameters",
            Self::C => "generation, fp16, matched sub-parameters",
            Self::D => "generation, int8, matched sub-parameters",
        }
    }
}

/// Drops the `neutral` row and column from a comprehension RDM.
pub fn restrict_to_generation_subset(rdm: &Rdm) -> Result<Rdm> {
    let keep: Vec<String> = rdm.labels.iter().filter(|l| l.as_str() != NEUTRAL).cloned().collect();
    rdm.restrict(&keep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSet {
    pub model_id: String,
    pub a: Rdm,
    pub b: Rdm,
    pub c: Rdm,
    pub d: Rdm,
}

impl ConditionSet {
    /// Validates that all four RDMs share one label order. A must already be
    /// restricted; an unrestricted 21-label A is refused rather than
    /// silently trimmed.
    pub fn new(model_id: impl Into<String>, a: Rdm, b: Rdm, c: Rdm, d: Rdm) -> Result<Self> {
        let set = Self {
            model_id: model_id.into(),
            a,
            b,
            c,
            d,
        };
        for cond in [Condition::B, Condition::C, Condition::D] {
            let r = set.get(cond);
            if r.labels != set.a.labels {
                let what = if set.a.labels.len() != r.labels.len() {
                    "different emotion subsets; restrict A first"
                } else {
                    "different emotion orders"
                };
                return Err(Error::Alignment(format!(
                    "conditions A and {} have {what}",
                    cond.letter()
                )));
            }
        }
        for cond in Condition::ALL {
            if set.get(cond).contains_nan {
                return Err(Error::Argument(format!(
                    "condition {} RDM contains NaN",
                    cond.letter()
                )));
            }
        }
        Ok(set)
    }

    /// Assembles a set from optional parts, naming the first missing one.
    pub fn from_parts(
        model_id: impl Into<String>,
        a: Option<Rdm>,
        b: Option<Rdm>,
        c: Option<Rdm>,
        d: Option<Rdm>,
    ) -> Result<Self> {
        let a = a.ok_or(Error::MissingCondition('A'))?;
        let b = b.ok_or(Error::MissingCondition('B'))?;
        let c = c.ok_or(Error::MissingCondition('C'))?;
        let d = d.ok_or(Error::MissingCondition('D'))?;
        Self::new(model_id, a, b, c, d)
    }

    pub fn get(&self, c: Condition) -> &Rdm {
        match c {
            Condition::A => &self.a,
            Condition::B => &self.b,
            Condition::C => &self.c,
            Condition::D => &self.d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastReport {
    pub model_id: String,
    pub rho_ac: f64,
    pub rho_bc: f64,
    pub rho_cd: f64,
    pub rho_ad: f64,
    /// `rho_ad / rho_cd`; `None` when `rho_cd` is zero.
    pub distortion_factor: Option<f64>,
    /// Rows and columns in A, B, C, D order.
    pub full_matrix: [[f64; 4]; 4],
}

pub fn contrast_table(set: &ConditionSet) -> Result<ContrastReport> {
    let mut m = [[1.0; 4]; 4];
    for i in 0..4 {
        for j in (i + 1)..4 {
            let rho = rdm_similarity(
                set.get(Condition::ALL[i]),
                set.get(Condition::ALL[j]),
                CorrelationMethod::Spearman,
            )?;
            m[i][j] = rho;
            m[j][i] = rho;
        }
    }
    let (a, b, c, d) = (0, 1, 2, 3);
    let rho_cd = m[c][d];
    let rho_ad = m[a][d];
    Ok(ContrastReport {
        model_id: set.model_id.clone(),
        rho_ac: m[a][c],
        rho_bc: m[b][c],
        rho_cd,
        rho_ad,
        distortion_factor: (rho_cd != 0.0).then(|| rho_ad / rho_cd),
        full_matrix: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compute_rdm_from_rows;
    use crate::vocab::{canonical_labels, EmotionVocabulary, generation_subset};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rdm(rng: &mut ChaCha8Rng, labels: &[String]) -> Rdm {
        let rows: Vec<Vec<f32>> = labels.iter().map(|_| (0..12).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        compute_rdm_from_rows("m", 0, labels, &refs).unwrap()
    }

    #[test]
    fn identical_conditions_give_unit_contrasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = generation_subset(&EmotionVocabulary::canonical());
        let r = rdm(&mut rng, &labels);
        let set = ConditionSet::new("m", r.clone(), r.clone(), r.clone(), r).unwrap();
        let t = contrast_table(&set).unwrap();
        for v in [t.rho_ac, t.rho_bc, t.rho_cd, t.rho_ad, t.distortion_factor.unwrap()] {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn headline_values_are_matrix_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = generation_subset(&EmotionVocabulary::canonical());
        let set = ConditionSet::new("m", rdm(&mut rng, &labels), rdm(&mut rng, &labels), rdm(&mut rng, &labels), rdm(&mut rng, &labels)).unwrap();
        let t = contrast_table(&set).unwrap();
        assert_eq!(t.rho_ac, t.full_matrix[0][2]);
        assert_eq!(t.rho_bc, t.full_matrix[1][2]);
        assert_eq!(t.rho_cd, t.full_matrix[2][3]);
        assert_eq!(t.rho_ad, t.full_matrix[0][3]);
        for i in 0..4 {
            assert_eq!(t.full_matrix[i][i], 1.0);
            for j in 0..4 {
                assert_eq!(t.full_matrix[i][j], t.full_matrix[j][i]);
            }
        }
        let f = t.distortion_factor.unwrap();
        if t.rho_cd > 0.0 {
            assert_eq!(f > 1.0, t.rho_ad > t.rho_cd);
        }
    }

    #[test]
    fn unrestricted_comprehension_rdm_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let full = rdm(&mut rng, &canonical_labels());
        let labels = generation_subset(&EmotionVocabulary::canonical());
        let g = rdm(&mut rng, &labels);
        let err = ConditionSet::new("m", full.clone(), g.clone(), g.clone(), g.clone()).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
        let a = restrict_to_generation_subset(&full).unwrap();
        assert_eq!(a.labels, labels);
        assert!(ConditionSet::new("m", a, g.clone(), g.clone(), g).is_ok());
    }

    #[test]
    fn permuted_order_and_missing_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels = generation_subset(&EmotionVocabulary::canonical());
        let r = rdm(&mut rng, &labels);
        let mut swapped = r.clone();
        swapped.labels.swap(2, 3);
        assert!(matches!(ConditionSet::new("m", r.clone(), r.clone(), swapped, r.clone()), Err(Error::Alignment(_))));
        let err = ConditionSet::from_parts("m", Some(r.clone()), Some(r.clone()), Some(r), None).unwrap_err();
        assert!(matches!(err, Error::MissingCondition('D')));
        assert!(format!("{err}").contains('D'));
    }
}
