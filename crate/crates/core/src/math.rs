//! Small dense helpers shared by the analysis modules. All reductions run in
//! f64 regardless of the storage type of the inputs.

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Cosine similarity; NaN when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        return f64::NAN;
    }
    dot(a, b) / denom
}

pub(crate) fn all_finite(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population (divide-by-N) standard deviation.
pub(crate) fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    libm::sqrt(var)
}

/// Mean cosine over all unordered pairs `i < j`. `None` when any row is
/// non-finite or has zero norm, or when fewer than two rows are given.
pub(crate) fn mean_pairwise_cosine(rows: &[&[f32]]) -> Option<f64> {
    if rows.len() < 2 || rows.iter().any(|r| !all_finite(r)) {
        return None;
    }
    let norms: alloc::vec::Vec<f64> = rows.iter().map(|r| norm(r)).collect();
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return None;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            sum += dot(rows[i], rows[j]) / (norms[i] * norms[j]);
            count += 1;
        }
    }
    let m = sum / count as f64;
    m.is_finite().then_some(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_zero_vector_is_nan() {
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_nan());
    }

    #[test]
    fn population_std_divides_by_n() {
        let s = population_std(&[1.0, 3.0]);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn mean_pairwise_cosine_rejects_non_finite() {
        let a = [1.0f32, 0.0];
        let b = [f32::NAN, 1.0];
        assert_eq!(mean_pairwise_cosine(&[&a, &b]), None);
        let c = [0.0f32, 1.0];
        assert_eq!(mean_pairwise_cosine(&[&a, &c]), Some(0.0));
    }
}
