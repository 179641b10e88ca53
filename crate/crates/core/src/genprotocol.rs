//! Generation-mode extraction: protocol presets, extraction position and
//! layer resolution, and the mean-difference vectors built from generated
//! samples.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{compute_rdm_from_rows, Rdm};
use crate::math::{all_finite, norm};
use crate::record::Precision;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionPosition {
    MidGeneration,
    LastToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionLayer {
    Middle,
    Best,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    NeutralBaseline,
    GlobalMean,
}

/// Stochastic decoding parameters; ignored under deterministic decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f32,
    pub top_p: f32,
    /// Base seed; sample `k` uses `seed + k`.
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationProtocol {
    pub templates_per_emotion: usize,
    pub generations_per_template: usize,
    pub deterministic_decoding: bool,
    pub max_new_tokens: usize,
    pub extraction_position: ExtractionPosition,
    pub extraction_layer: ExtractionLayer,
    pub apply_chat_template: bool,
    pub centering: Centering,
    pub precision: Precision,
    #[serde(default)]
    pub sampling: SamplingParams,
}

impl GenerationProtocol {
    pub fn matched(precision: Precision) -> Self {
        Self {
            templates_per_emotion: 5,
            generations_per_template: 10,
            deterministic_decoding: true,
            max_new_tokens: 256,
            extraction_position: ExtractionPosition::MidGeneration,
            extraction_layer: ExtractionLayer::Middle,
            apply_chat_template: true,
            centering: Centering::NeutralBaseline,
            precision,
            sampling: SamplingParams::default(),
        }
    }

    pub fn alternative(precision: Precision) -> Self {
        Self {
            templates_per_emotion: 1,
            generations_per_template: 1,
            deterministic_decoding: false,
            max_new_tokens: 100,
            extraction_position: ExtractionPosition::LastToken,
            extraction_layer: ExtractionLayer::Best,
            apply_chat_template: false,
            centering: Centering::GlobalMean,
            precision,
            sampling: SamplingParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.precision, Precision::Fp16 | Precision::Int8) {
            return Err(Error::Argument(format!(
                "generation runs use fp16 or int8, not {:?}",
                self.precision
            )));
        }
        if self.templates_per_emotion == 0 || self.generations_per_template == 0 {
            return Err(Error::Argument("protocol requests zero samples".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Argument("max_new_tokens must be positive".into()));
        }
        let s = &self.sampling;
        if !self.deterministic_decoding
            && !(s.temperature > 0.0 && s.top_p > 0.0 && s.top_p <= 1.0)
        {
            return Err(Error::Argument(
                "stochastic decoding needs temperature > 0 and top_p in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn samples_per_emotion(&self) -> usize {
        self.templates_per_emotion * self.generations_per_template
    }

    /// Names of the eight sub-parameters on which two protocols differ.
    pub fn differing_fields(&self, other: &Self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut check = |name, differs: bool| {
            if differs {
                out.push(name);
            }
        };
        check("templates_per_emotion", self.templates_per_emotion != other.templates_per_emotion);
        check("generations_per_template", self.generations_per_template != other.generations_per_template);
        check("deterministic_decoding", self.deterministic_decoding != other.deterministic_decoding);
        check("max_new_tokens", self.max_new_tokens != other.max_new_tokens);
        check("extraction_position", self.extraction_position != other.extraction_position);
        check("extraction_layer", self.extraction_layer != other.extraction_layer);
        check("apply_chat_template", self.apply_chat_template != other.apply_chat_template);
        check("centering", self.centering != other.centering);
        out
    }
}

/// Token index (into prompt + generated) whose activation is captured, or
/// `None` for an empty generation.
pub fn extraction_position(
    policy: ExtractionPosition,
    prompt_len: usize,
    generated_len: usize,
) -> Option<usize> {
    if generated_len == 0 {
        return None;
    }
    Some(match policy {
        ExtractionPosition::MidGeneration => prompt_len + generated_len / 2,
        ExtractionPosition::LastToken => prompt_len + generated_len - 1,
    })
}

pub fn resolve_layer(choice: ExtractionLayer, n_layers: usize, best: Option<usize>) -> Result<usize> {
    match choice {
        ExtractionLayer::Middle => Ok(n_layers / 2),
        ExtractionLayer::Best => {
            let b = best.ok_or_else(|| {
                Error::Argument("best-layer extraction needs a comprehension sweep".into())
            })?;
            if b >= n_layers {
                return Err(Error::Argument(format!("best layer {b} outside 0..{n_layers}")));
            }
            Ok(b)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSample {
    pub template_index: usize,
    pub generation_index: usize,
    pub text: String,
    pub prompt_len: usize,
    pub generated_len: usize,
    /// Empty when the sample is degenerate.
    pub activation: Vec<f32>,
    pub degenerate: bool,
}

impl GenerationSample {
    fn usable(&self) -> bool {
        !self.degenerate && !self.activation.is_empty() && all_finite(&self.activation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRun {
    pub model_id: String,
    pub layer: usize,
    pub protocol: GenerationProtocol,
    pub per_emotion_samples: Vec<(String, Vec<GenerationSample>)>,
    pub neutral_samples: Vec<GenerationSample>,
}

impl GenerationRun {
    pub fn labels(&self) -> Vec<String> {
        self.per_emotion_samples.iter().map(|(l, _)| l.clone()).collect()
    }

    pub fn degenerate_count(&self) -> usize {
        self.per_emotion_samples
            .iter()
            .flat_map(|(_, s)| s)
            .chain(&self.neutral_samples)
            .filter(|s| s.degenerate)
            .count()
    }

    /// Checks sample counts against the protocol.
    pub fn check_counts(&self, n_neutral: usize) -> Result<()> {
        let want = self.protocol.samples_per_emotion();
        for (label, samples) in &self.per_emotion_samples {
            if samples.len() != want {
                return Err(Error::Invariant(format!(
                    "{label}: {} samples, protocol requires {want}",
                    samples.len()
                )));
            }
        }
        if self.protocol.centering == Centering::NeutralBaseline && self.neutral_samples.len() != n_neutral {
            return Err(Error::Invariant(format!(
                "{} neutral samples, expected {n_neutral}",
                self.neutral_samples.len()
            )));
        }
        Ok(())
    }
}

/// One unit vector per generation emotion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationVectors {
    pub model_id: String,
    pub layer: usize,
    pub labels: Vec<String>,
    pub d_model: usize,
    vectors: Vec<f32>,
}

impl GenerationVectors {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d_model..(i + 1) * self.d_model]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.d_model)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vectors
    }

    pub fn rdm(&self) -> Result<Rdm> {
        let rows: Vec<&[f32]> = self.rows().collect();
        compute_rdm_from_rows(&self.model_id, self.layer, &self.labels, &rows)
    }
}

fn mean_of<'a>(samples: impl Iterator<Item = &'a GenerationSample>, d: usize) -> Result<Option<Vec<f64>>> {
    let mut acc = vec![0.0f64; d];
    let mut n = 0usize;
    for s in samples.filter(|s| s.usable()) {
        if s.activation.len() != d {
            return Err(Error::Dimension {
                expected: d,
                found: s.activation.len(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(&s.activation) {
            *a += x as f64;
        }
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(Some(acc))
}

/// Per-emotion mean minus the protocol's baseline, scaled to unit norm.
/// Degenerate and non-finite samples are skipped.
pub fn build_generation_vectors(run: &GenerationRun) -> Result<GenerationVectors> {
    if run.per_emotion_samples.is_empty() {
        return Err(Error::Argument("generation run has no emotions".into()));
    }
    let d = run
        .per_emotion_samples
        .iter()
        .flat_map(|(_, s)| s)
        .find(|s| s.usable())
        .map(|s| s.activation.len())
        .ok_or_else(|| Error::Argument("generation run has no usable samples".into()))?;

    let mut means = Vec::with_capacity(run.per_emotion_samples.len());
    for (label, samples) in &run.per_emotion_samples {
        let m = mean_of(samples.iter(), d)?.ok_or_else(|| Error::Extraction {
            emotion: label.clone(),
            layer: run.layer,
            reason: "every sample is degenerate".into(),
        })?;
        means.push(m);
    }

    let baseline = match run.protocol.centering {
        Centering::NeutralBaseline => mean_of(run.neutral_samples.iter(), d)?.ok_or_else(|| {
            Error::Extraction {
                emotion: "neutral".into(),
                layer: run.layer,
                reason: "no usable neutral samples".into(),
            }
        })?,
        Centering::GlobalMean => {
            let mut g = vec![0.0f64; d];
            for m in &means {
                g.iter_mut().zip(m).for_each(|(a, x)| *a += x);
            }
            g.iter_mut().for_each(|a| *a /= means.len() as f64);
            g
        }
    };

    let mut vectors = Vec::with_capacity(means.len() * d);
    for ((label, _), m) in run.per_emotion_samples.iter().zip(&means) {
        let diff: Vec<f64> = m.iter().zip(&baseline).map(|(a, b)| a - b).collect();
        let n = libm::sqrt(diff.iter().map(|x| x * x).sum::<f64>());
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::ZeroNorm(format!("difference vector for {label}")));
        }
        vectors.extend(diff.iter().map(|x| (x / n) as f32));
    }
    debug_assert!(vectors.chunks_exact(d).all(|r| (norm(r) - 1.0).abs() < 1e-5));
    Ok(GenerationVectors {
        model_id: run.model_id.clone(),
        layer: run.layer,
        labels: run.labels(),
        d_model: d,
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(activation: Vec<f32>) -> GenerationSample {
        GenerationSample {
            template_index: 0,
            generation_index: 0,
            text: "x".into(),
            prompt_len: 3,
            generated_len: 2,
            activation,
            degenerate: false,
        }
    }

    fn run_of(groups: Vec<(String, Vec<Vec<f32>>)>, neutral: Vec<Vec<f32>>, centering: Centering) -> GenerationRun {
        let mut protocol = GenerationProtocol::matched(Precision::Fp16);
        protocol.centering = centering;
        GenerationRun {
            model_id: "m".into(),
            layer: 1,
            protocol,
            per_emotion_samples: groups
                .into_iter()
                .map(|(l, rows)| (l, rows.into_iter().map(sample).collect()))
                .collect(),
            neutral_samples: neutral.into_iter().map(sample).collect(),
        }
    }

    #[test]
    fn presets_differ_in_all_eight_fields() {
        let m = GenerationProtocol::matched(Precision::Fp16);
        let a = GenerationProtocol::alternative(Precision::Fp16);
        assert_eq!(m.differing_fields(&a).len(), 8);
        assert!(m.differing_fields(&m).is_empty());
        assert_eq!(m.samples_per_emotion(), 50);
        assert_eq!(a.samples_per_emotion(), 1);
        assert!(m.validate().is_ok() && a.validate().is_ok());
        assert!(GenerationProtocol::matched(Precision::Fp32).validate().is_err());
    }

    #[test]
    fn positions() {
        assert_eq!(extraction_position(ExtractionPosition::MidGeneration, 10, 7), Some(13));
        assert_eq!(extraction_position(ExtractionPosition::MidGeneration, 10, 1), Some(10));
        assert_eq!(extraction_position(ExtractionPosition::LastToken, 10, 7), Some(16));
        assert_eq!(extraction_position(ExtractionPosition::MidGeneration, 10, 0), None);
    }

    #[test]
    fn layers() {
        assert_eq!(resolve_layer(ExtractionLayer::Middle, 32, None).unwrap(), 16);
        assert_eq!(resolve_layer(ExtractionLayer::Middle, 27, None).unwrap(), 13);
        assert_eq!(resolve_layer(ExtractionLayer::Best, 28, Some(11)).unwrap(), 11);
        assert!(resolve_layer(ExtractionLayer::Best, 28, None).is_err());
    }

    #[test]
    fn unit_offset_from_neutral_is_recovered() {
        let neutral = vec![vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]];
        let run = run_of(
            vec![
                ("a".into(), vec![vec![3.0, 2.0, 2.0]]),
                ("b".into(), vec![vec![2.0, 2.0, 2.0 - 5.0], vec![2.0, 2.0, 2.0 + 3.0]]),
            ],
            neutral,
            Centering::NeutralBaseline,
        );
        let v = build_generation_vectors(&run).unwrap();
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.0, 0.0, -1.0]);
    }

    #[test]
    fn zero_difference_names_the_emotion() {
        let run = run_of(
            vec![("calm".into(), vec![vec![1.0, 1.0]])],
            vec![vec![1.0, 1.0]],
            Centering::NeutralBaseline,
        );
        match build_generation_vectors(&run) {
            Err(Error::ZeroNorm(msg)) => assert!(msg.contains("calm")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn degenerate_samples_are_excluded_and_counted() {
        let mut run = run_of(
            vec![("a".into(), vec![vec![2.0, 0.0], vec![100.0, 100.0]]), ("b".into(), vec![vec![0.0, 2.0]])],
            vec![vec![0.0, 0.0]],
            Centering::NeutralBaseline,
        );
        run.per_emotion_samples[0].1[1].degenerate = true;
        assert_eq!(run.degenerate_count(), 1);
        let v = build_generation_vectors(&run).unwrap();
        assert_eq!(v.row(0), &[1.0, 0.0]);
        run.per_emotion_samples[1].1[0].degenerate = true;
        assert!(matches!(build_generation_vectors(&run), Err(Error::Extraction { .. })));
    }

    fn oracle(groups: &[(String, Vec<Vec<f32>>)], neutral: &[Vec<f32>], centering: Centering) -> Vec<Vec<f64>> {
        let mean = |rows: &[Vec<f32>]| -> Vec<f64> {
            let d = rows[0].len();
            (0..d).map(|j| rows.iter().map(|r| r[j] as f64).sum::<f64>() / rows.len() as f64).collect()
        };
        let means: Vec<Vec<f64>> = groups.iter().map(|(_, r)| mean(r)).collect();
        let base: Vec<f64> = match centering {
            Centering::NeutralBaseline => mean(neutral),
            Centering::GlobalMean => (0..means[0].len())
                .map(|j| means.iter().map(|m| m[j]).sum::<f64>() / means.len() as f64)
                .collect(),
        };
        means
            .iter()
            .map(|m| {
                let d: Vec<f64> = m.iter().zip(&base).map(|(a, b)| a - b).collect();
                let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                d.iter().map(|x| x / n).collect()
            })
            .collect()
    }

    fn random_groups(rng: &mut ChaCha8Rng, k: usize, d: usize) -> (Vec<(String, Vec<Vec<f32>>)>, Vec<Vec<f32>>) {
        let row = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect::<Vec<f32>>();
        let groups = (0..k)
            .map(|i| {
                let n = rng.random_range(1..6);
                (format!("e{i:02}"), (0..n).map(|_| row(rng)).collect())
            })
            .collect();
        let neutral = (0..rng.random_range(1..11)).map(|_| row(rng)).collect();
        (groups, neutral)
    }

    proptest! {
        #[test]
        fn matches_direct_oracle(seed in any::<u64>(), global in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (groups, neutral) = random_groups(&mut rng, 20, 16);
            let centering = if global { Centering::GlobalMean } else { Centering::NeutralBaseline };
            let want = oracle(&groups, &neutral, centering);
            let got = build_generation_vectors(&run_of(groups, neutral, centering)).unwrap();
            for (i, w) in want.iter().enumerate() {
                prop_assert!((norm(got.row(i)) - 1.0).abs() < 1e-6);
                for (g, w) in got.row(i).iter().zip(w) {
                    prop_assert!((*g as f64 - w).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn invariant_to_sample_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (groups, neutral) = random_groups(&mut rng, 5, 8);
            let a = build_generation_vectors(&run_of(groups.clone(), neutral.clone(), Centering::NeutralBaseline)).unwrap();
            let mut shuffled = groups;
            for (_, rows) in shuffled.iter_mut() {
                rows.shuffle(&mut rng);
            }
            let mut neutral = neutral;
            neutral.shuffle(&mut rng);
            let b = build_generation_vectors(&run_of(shuffled, neutral, Centering::NeutralBaseline)).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
