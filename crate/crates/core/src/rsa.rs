//! Cross-model representational similarity: rank correlation between RDM
//! off-diagonals, the RDM-of-RDMs matrix with anisotropy reliability flags,
//! size correlations, and the per-RDM linear normalization that rank and
//! Pearson correlation are both invariant to.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{rdm_std, Rdm};
use crate::{Error, Result};

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension {
            expected: xs.len(),
            found: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::Argument(format!(
            "correlation needs at least 3 pairs, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Argument("correlation input contains non-finite values".into()));
    }
    Ok(())
}

fn pearson_unchecked(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input vector".into()));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson_unchecked(xs, ys)
}

/// Spearman's rho: Pearson correlation of average-rank vectors.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson_unchecked(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    #[default]
    Spearman,
    Pearson,
}

impl CorrelationMethod {
    pub fn apply(self, xs: &[f64], ys: &[f64]) -> Result<f64> {
        match self {
            Self::Spearman => spearman(xs, ys),
            Self::Pearson => pearson(xs, ys),
        }
    }
}

/// Correlation between the upper triangles of two RDMs over the same labels.
pub fn rdm_similarity(a: &Rdm, b: &Rdm, method: CorrelationMethod) -> Result<f64> {
    if a.labels != b.labels {
        return Err(Error::Alignment(format!(
            "RDMs of {} and {} have different emotion orders",
            a.model_id, b.model_id
        )));
    }
    method.apply(&a.upper_triangle(), &b.upper_triangle())
}

/// Entrywise `(x - (1 - anisotropy)) / std`, where std is the off-diagonal
/// standard deviation. Kept to demonstrate that correlation-based
/// comparison is unaffected by it.
pub fn linear_normalize_rdm(rdm: &Rdm, anisotropy: f64) -> Result<Rdm> {
    let sd = rdm_std(rdm);
    if !(sd > 0.0) {
        return Err(Error::Argument(format!(
            "RDM of {} has zero off-diagonal spread",
            rdm.model_id
        )));
    }
    let base = 1.0 - anisotropy;
    let m = rdm.matrix().iter().map(|x| (x - base) / sd).collect();
    Rdm::from_matrix(rdm.model_id.clone(), rdm.layer, rdm.labels.clone(), m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reliability {
    Ok,
    Borderline,
    Unreliable,
}

/// Anisotropy cut-offs for flagging RDMs whose cosine structure is noise
/// dominated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityThresholds {
    pub unreliable_above: f64,
    pub borderline_above: f64,
}

impl Default for ReliabilityThresholds {
    fn default() -> Self {
        Self {
            unreliable_above: 0.95,
            borderline_above: 0.90,
        }
    }
}

impl ReliabilityThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| t > 0.0 && t < 1.0;
        if !ok(self.unreliable_above) || !ok(self.borderline_above) {
            return Err(Error::Argument("reliability thresholds must lie in (0, 1)".into()));
        }
        if self.borderline_above > self.unreliable_above {
            return Err(Error::Argument(
                "borderline threshold exceeds the unreliable threshold".into(),
            ));
        }
        Ok(())
    }

    pub fn classify(&self, anisotropy: f64) -> Reliability {
        if anisotropy > self.unreliable_above {
            Reliability::Unreliable
        } else if anisotropy > self.borderline_above {
            Reliability::Borderline
        } else {
            Reliability::Ok
        }
    }
}

#[derive(Debug, Clone)]
pub struct RsaEntry {
    pub model_id: String,
    pub rdm: Rdm,
    pub anisotropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdmOfRdms {
    pub model_order: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub anisotropy: Vec<f64>,
    pub reliability: Vec<Reliability>,
}

impl RdmOfRdms {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.model_order.iter().position(|m| m == a)?;
        let j = self.model_order.iter().position(|m| m == b)?;
        Some(self.matrix[i][j])
    }
}

pub fn rdm_of_rdms(entries: &[RsaEntry], thresholds: &ReliabilityThresholds) -> Result<RdmOfRdms> {
    if entries.len() < 2 {
        return Err(Error::Argument(format!(
            "RDM-of-RDMs needs at least 2 models, got {}",
            entries.len()
        )));
    }
    thresholds.validate()?;
    let k = entries.len();
    let mut matrix = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let rho = rdm_similarity(&entries[i].rdm, &entries[j].rdm, CorrelationMethod::Spearman)?;
            matrix[i][j] = rho;
            matrix[j][i] = rho;
        }
    }
    Ok(RdmOfRdms {
        model_order: entries.iter().map(|e| e.model_id.clone()).collect(),
        matrix,
        anisotropy: entries.iter().map(|e| e.anisotropy).collect(),
        reliability: entries.iter().map(|e| thresholds.classify(e.anisotropy)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    SizeB,
    DModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Anisotropy,
    RdmStd,
    BestLayerPct,
}

/// One model's predictors and descriptors for the size analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub model_id: String,
    pub size_b: f64,
    pub d_model: usize,
    pub anisotropy: f64,
    pub rdm_std: f64,
    pub best_layer_pct: f64,
}

impl SizePoint {
    fn predictor(&self, p: Predictor) -> f64 {
        match p {
            Predictor::SizeB => self.size_b,
            Predictor::DModel => self.d_model as f64,
        }
    }

    fn outcome(&self, o: Outcome) -> f64 {
        match o {
            Outcome::Anisotropy => self.anisotropy,
            Outcome::RdmStd => self.rdm_std,
            Outcome::BestLayerPct => self.best_layer_pct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeCorrelationRow {
    pub predictor: Predictor,
    pub outcome: Outcome,
    pub rho: f64,
    pub p_uncorrected: f64,
    pub n: usize,
}

/// Spearman rho for every (predictor, outcome) pair with an uncorrected
/// two-sided p-value from the t approximation on `n - 2` degrees of freedom.
pub fn size_correlations(points: &[SizePoint]) -> Result<Vec<SizeCorrelationRow>> {
    if points.len() < 4 {
        return Err(Error::Argument(format!(
            "size correlations need at least 4 models, got {}",
            points.len()
        )));
    }
    let mut rows = Vec::new();
    for predictor in [Predictor::DModel, Predictor::SizeB] {
        let xs: Vec<f64> = points.iter().map(|p| p.predictor(predictor)).collect();
        for outcome in [Outcome::Anisotropy, Outcome::RdmStd, Outcome::BestLayerPct] {
            let ys: Vec<f64> = points.iter().map(|p| p.outcome(outcome)).collect();
            let rho = spearman(&xs, &ys).map_err(|e| match e {
                Error::UndefinedCorrelation(_) => Error::UndefinedCorrelation(format!(
                    "constant {predictor:?} or {outcome:?} across models"
                )),
                other => other,
            })?;
            rows.push(SizeCorrelationRow {
                predictor,
                outcome,
                rho,
                p_uncorrected: correlation_p_value(rho, points.len()),
                n: points.len(),
            });
        }
    }
    Ok(rows)
}

/// Two-sided p for H0: rho = 0 using `t = r sqrt((n-2)/(1-r^2))`.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = n as f64 - 2.0;
    if df <= 0.0 {
        return f64::NAN;
    }
    let r2 = r * r;
    if r2 >= 1.0 {
        return 0.0;
    }
    let t2 = r2 * df / (1.0 - r2);
    regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0)
}

/// `I_x(a, b)` by the modified Lentz continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * libm::log(x)
        + b * libm::log(1.0 - x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compute_rdm_from_rows;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rank by counting: 1 + #smaller + (#equal - 1) / 2.
    fn oracle_ranks(xs: &[f64]) -> Vec<f64> {
        xs.iter()
            .map(|&x| {
                let less = xs.iter().filter(|&&y| y < x).count() as f64;
                let eq = xs.iter().filter(|&&y| y == x).count() as f64;
                1.0 + less + (eq - 1.0) / 2.0
            })
            .collect()
    }

    fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn spearman_trivial_cases() {
        let xs = [0.3, -1.0, 2.5, 7.0, 0.1];
        assert!((spearman(&xs, &xs).unwrap() - 1.0).abs() < 1e-15);
        let mut sorted = xs;
        sorted.sort_by(f64::total_cmp);
        let mut rev = sorted;
        rev.reverse();
        assert!((spearman(&sorted, &rev).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_is_an_error_not_zero() {
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn pearson_linear_cases() {
        let xs = [1.0, 4.0, 2.0, 8.0, -3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_matches_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.random_range(3..40);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 * 0.5).collect();
            let want = naive_pearson(&oracle_ranks(&xs), &oracle_ranks(&ys));
            match spearman(&xs, &ys) {
                Ok(got) => assert!((got - want).abs() < 1e-12, "{got} vs {want}"),
                Err(_) => assert!(want.is_nan()),
            }
        }
    }

    #[test]
    fn spearman_exhaustive_over_permutations_of_four() {
        let base = [1.0, 2.0, 3.0, 4.0];
        let mut perms = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let p = [a, b, c, d];
                        if (0..4).all(|k| p.contains(&k)) {
                            perms.push(p);
                        }
                    }
                }
            }
        }
        assert_eq!(perms.len(), 24);
        for p in perms {
            let ys: Vec<f64> = p.iter().map(|&i| base[i] * 10.0).collect();
            // classic formula for distinct ranks: 1 - 6 sum d^2 / (n (n^2 - 1))
            let d2: f64 = p.iter().enumerate().map(|(i, &r)| ((i as f64) - r as f64).powi(2)).sum();
            let want = 1.0 - 6.0 * d2 / (4.0 * 15.0);
            assert!((spearman(&base, &ys).unwrap() - want).abs() < 1e-12);
        }
    }

    fn random_rdm(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rdm {
        let labels: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
        let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        compute_rdm_from_rows("m", 0, &labels, &refs).unwrap()
    }

    #[test]
    fn similarity_requires_same_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_rdm(&mut rng, 5, 4);
        let mut b = random_rdm(&mut rng, 5, 4);
        assert!((rdm_similarity(&a, &a, CorrelationMethod::Spearman).unwrap() - 1.0).abs() < 1e-15);
        b.labels.swap(0, 1);
        assert!(matches!(
            rdm_similarity(&a, &b, CorrelationMethod::Spearman),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn linear_normalization_matches_entrywise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = random_rdm(&mut rng, 21, 16);
        let t = linear_normalize_rdm(&r, 0.7).unwrap();
        let sd = rdm_std(&r);
        for (x, y) in r.matrix().iter().zip(t.matrix()) {
            assert!((y - (x - 0.3) / sd).abs() < 1e-12);
        }
        let flat = Rdm::from_matrix("m", 0, vec!["a".into(), "b".into()], vec![1.0, 0.2, 0.2, 1.0]).unwrap();
        assert!(linear_normalize_rdm(&flat, 0.5).is_err());
    }

    #[test]
    fn reliability_flags_follow_thresholds() {
        let t = ReliabilityThresholds::default();
        assert_eq!(t.classify(0.997), Reliability::Unreliable);
        assert_eq!(t.classify(0.93), Reliability::Borderline);
        assert_eq!(t.classify(0.95), Reliability::Borderline);
        assert_eq!(t.classify(0.848), Reliability::Ok);
        // 0.982 exceeds the 0.95 cut-off, so the invariant marks it unreliable
        // even though it is far less degenerate than 0.997.
        assert_eq!(t.classify(0.982), Reliability::Unreliable);
        let lenient = ReliabilityThresholds { unreliable_above: 0.99, borderline_above: 0.95 };
        assert_eq!(lenient.classify(0.982), Reliability::Borderline);
        assert!(ReliabilityThresholds { unreliable_above: 1.2, borderline_above: 0.9 }.validate().is_err());
    }

    #[test]
    fn two_identical_entries_give_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_rdm(&mut rng, 21, 8);
        let e = |id: &str| RsaEntry { model_id: id.into(), rdm: r.clone(), anisotropy: 0.5 };
        let m = rdm_of_rdms(&[e("a"), e("b")], &ReliabilityThresholds::default()).unwrap();
        for row in &m.matrix {
            for &v in row {
                assert!((v - 1.0).abs() < 1e-15);
            }
        }
        assert!(rdm_of_rdms(&[e("a")], &ReliabilityThresholds::default()).is_err());
    }

    #[test]
    fn p_values_match_reference_t_distribution() {
        // Two-sided p-values of the t approximation, frozen from an
        // independent implementation (scipy.stats.spearmanr, n = 12).
        let cases = [
            (-0.8819980775506043, 0.000147337235685503),
            (-0.8198340515786546, 0.0010953343467347296),
            (-0.4839888298676704, 0.11085964090460708),
            (-0.8905094008526767, 0.00010284643692729482),
        ];
        for (r, p) in cases {
            let got = correlation_p_value(r, 12);
            assert!(((got - p) / p).abs() < 1e-8, "{got} vs {p}");
        }
        assert_eq!(correlation_p_value(1.0, 12), 0.0);
        assert!((correlation_p_value(0.0, 12) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn size_correlations_reject_constant_predictor() {
        let pts: Vec<SizePoint> = (0..5)
            .map(|i| SizePoint { model_id: format!("m{i}"), size_b: 1.0, d_model: 64, anisotropy: i as f64, rdm_std: 0.1 * i as f64, best_layer_pct: 0.5 })
            .collect();
        assert!(size_correlations(&pts).is_err());
        assert!(size_correlations(&pts[..3]).is_err());
    }

    proptest! {
        #[test]
        fn linear_normalization_is_invisible_to_correlation(
            seed in any::<u64>(), a1 in -2.0f64..2.0, a2 in -2.0f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r1 = random_rdm(&mut rng, 21, 10);
            let r2 = random_rdm(&mut rng, 21, 10);
            let n1 = linear_normalize_rdm(&r1, a1).unwrap();
            let n2 = linear_normalize_rdm(&r2, a2).unwrap();
            for m in [CorrelationMethod::Spearman, CorrelationMethod::Pearson] {
                let raw = rdm_similarity(&r1, &r2, m).unwrap();
                let norm = rdm_similarity(&n1, &n2, m).unwrap();
                prop_assert!((raw - norm).abs() < 1e-12);
            }
        }

        #[test]
        fn full_off_diagonal_equals_upper_triangle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r1 = random_rdm(&mut rng, 21, 6);
            let r2 = random_rdm(&mut rng, 21, 6);
            let upper = spearman(&r1.upper_triangle(), &r2.upper_triangle()).unwrap();
            let full = spearman(&r1.off_diagonal(), &r2.off_diagonal()).unwrap();
            prop_assert!((upper - full).abs() < 1e-12);
        }

        #[test]
        fn mixing_similarity_and_distance_flips_sign(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r1 = random_rdm(&mut rng, 21, 6);
            let r2 = random_rdm(&mut rng, 21, 6);
            let sim = spearman(&r1.upper_triangle(), &r2.upper_triangle()).unwrap();
            let dist: Vec<f64> = r2.upper_triangle().iter().map(|s| 1.0 - s).collect();
            let mixed = spearman(&r1.upper_triangle(), &dist).unwrap();
            prop_assert!((sim + mixed).abs() < 1e-12);
        }
    }
}
