//! Steering traces, the repetition score and the regime rubric.
//!
//! Classification reads only the persisted scores and empty flags, so a
//! trace can be re-classified without the model or the completions.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::SteeringRegime;
use crate::{Error, Result};

pub const N_STRENGTHS: usize = 5;
pub const DEFAULT_MULTIPLIERS: [f64; N_STRENGTHS] = [2.0, 4.0, 6.0, 8.0, 10.0];

/// Multiples of the layer's mean residual norm.
pub fn strength_ladder(mean_residual_norm: f64, multipliers: &[f64]) -> Result<Vec<f64>> {
    if !(mean_residual_norm > 0.0) || !mean_residual_norm.is_finite() {
        return Err(Error::Argument(format!(
            "residual norm must be positive and finite, got {mean_residual_norm}"
        )));
    }
    if multipliers.len() != N_STRENGTHS || multipliers.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Argument(format!(
            "need {N_STRENGTHS} strictly ascending multipliers"
        )));
    }
    Ok(multipliers.iter().map(|m| m * mean_residual_norm).collect())
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Longest stretch covered by back-to-back copies (at least two) of one
/// `k`-word unit.
fn longest_repeat(ws: &[String], k: usize) -> usize {
    let mut best = 0;
    for start in 0..ws.len() {
        let unit = match ws.get(start..start + k) {
            Some(u) => u,
            None => break,
        };
        let mut copies = 1;
        while ws
            .get(start + copies * k..start + (copies + 1) * k)
            .is_some_and(|next| next == unit)
        {
            copies += 1;
        }
        if copies >= 2 {
            best = best.max(copies * k);
        }
    }
    best
}

/// Fraction of the word stream covered by the longest run of a repeated
/// word or bigram, and whether the text had no words. Empty text scores 1.
pub fn repetition_score(text: &str) -> (f64, bool) {
    let ws = words(text);
    if ws.is_empty() {
        return (1.0, true);
    }
    let covered = longest_repeat(&ws, 1).max(longest_repeat(&ws, 2));
    (covered as f64 / ws.len() as f64, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringTrace {
    pub model_id: String,
    pub layer: usize,
    pub emotion: String,
    pub strengths: Vec<f64>,
    pub completions: Vec<String>,
    pub repetition_scores: Vec<f64>,
    pub empty_flags: Vec<bool>,
}

impl SteeringTrace {
    /// Scores each completion and builds a validated trace.
    pub fn from_completions(
        model_id: impl Into<String>,
        layer: usize,
        emotion: impl Into<String>,
        strengths: Vec<f64>,
        completions: Vec<String>,
    ) -> Result<Self> {
        let (repetition_scores, empty_flags) = completions.iter().map(|c| repetition_score(c)).unzip();
        let t = Self {
            model_id: model_id.into(),
            layer,
            emotion: emotion.into(),
            strengths,
            completions,
            repetition_scores,
            empty_flags,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let lens = [
            self.strengths.len(),
            self.completions.len(),
            self.repetition_scores.len(),
            self.empty_flags.len(),
        ];
        if lens.iter().any(|&l| l != N_STRENGTHS) {
            return Err(Error::Argument(format!(
                "trace needs {N_STRENGTHS} strengths, completions, scores and flags; got {lens:?}"
            )));
        }
        if self.strengths.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Argument("strengths must be strictly ascending".into()));
        }
        if self.repetition_scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Argument("repetition scores must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    /// Score above which a low-strength completion counts as collapsed.
    pub explosive_above: f64,
    /// Score below which a completion counts as coherent.
    pub coherent_below: f64,
}

impl RegimeThresholds {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x > 0.0 && x < 1.0;
        if !ok(self.explosive_above) || !ok(self.coherent_below) || self.coherent_below > self.explosive_above {
            return Err(Error::Argument(format!(
                "regime thresholds must lie in (0,1) with coherent <= explosive, got {} / {}",
                self.coherent_below, self.explosive_above
            )));
        }
        Ok(())
    }
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self {
            explosive_above: 0.8,
            coherent_below: 0.3,
        }
    }
}

/// Explosive if either of the two lowest strengths is empty or scores above
/// `explosive_above`; surgical if both are non-empty and below
/// `coherent_below`; repetitive collapse otherwise.
pub fn classify_regime(trace: &SteeringTrace, thresholds: &RegimeThresholds) -> Result<SteeringRegime> {
    trace.validate()?;
    let low = 0..2;
    if low
        .clone()
        .any(|i| trace.empty_flags[i] || trace.repetition_scores[i] > thresholds.explosive_above)
    {
        return Ok(SteeringRegime::Explosive);
    }
    if low.into_iter().all(|i| !trace.empty_flags[i] && trace.repetition_scores[i] < thresholds.coherent_below) {
        return Ok(SteeringRegime::Surgical);
    }
    Ok(SteeringRegime::RepetitiveCollapse)
}
