//! The fixed 21-emotion vocabulary.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Canonical emotion labels in alphabetical order. `neutral` is a category
/// for comprehension extraction and the baseline for generation extraction.
pub const EMOTIONS: [&str; 21] = [
    "afraid",
    "angry",
    "anxious",
    "blissful",
    "brooding",
    "calm",
    "desperate",
    "enthusiastic",
    "exasperated",
    "gloomy",
    "grateful",
    "guilty",
    "happy",
    "hopeful",
    "hostile",
    "loving",
    "nervous",
    "neutral",
    "proud",
    "reflective",
    "sad",
];

pub const NEUTRAL: &str = "neutral";

pub const N_EMOTIONS: usize = EMOTIONS.len();

/// Index of `label` in the canonical order.
pub fn emotion_index(label: &str) -> Option<usize> {
    EMOTIONS.iter().position(|&e| e == label)
}

pub fn canonical_labels() -> Vec<String> {
    EMOTIONS.iter().map(|s| s.to_string()).collect()
}

/// The validated 21-label vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct EmotionVocabulary {
    labels: Vec<String>,
}

impl EmotionVocabulary {
    pub fn canonical() -> Self {
        Self {
            labels: canonical_labels(),
        }
    }

    /// Accepts a label list only if it is exactly the canonical vocabulary.
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() != N_EMOTIONS {
            return Err(Error::Invariant(alloc::format!(
                "vocabulary must have {N_EMOTIONS} labels, got {}",
                labels.len()
            )));
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invariant("vocabulary is not strictly alphabetical".into()));
        }
        if let Some((got, want)) = labels.iter().zip(EMOTIONS).find(|(a, b)| a.as_str() != *b) {
            return Err(Error::Invariant(alloc::format!(
                "unexpected label '{got}' where '{want}' belongs"
            )));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

impl TryFrom<Vec<String>> for EmotionVocabulary {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        Self::new(labels)
    }
}

impl From<EmotionVocabulary> for Vec<String> {
    fn from(v: EmotionVocabulary) -> Self {
        v.labels
    }
}

/// The 20 generation emotions: the vocabulary with `neutral` removed, order
/// preserved.
pub fn generation_subset(vocab: &EmotionVocabulary) -> Vec<String> {
    vocab
        .labels
        .iter()
        .filter(|l| l.as_str() != NEUTRAL)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_vocabulary_is_sorted_and_bounded() {
        let v = EmotionVocabulary::canonical();
        assert_eq!(v.labels().len(), 21);
        assert_eq!(&v.labels()[..4], ["afraid", "angry", "anxious", "blissful"]);
        assert_eq!(v.labels().last().unwrap(), "sad");
        assert!(v.labels().iter().any(|l| l == "neutral"));
        assert!(EmotionVocabulary::new(canonical_labels()).is_ok());
    }

    #[test]
    fn generation_subset_drops_neutral() {
        let v = EmotionVocabulary::canonical();
        let sub = generation_subset(&v);
        assert_eq!(sub.len(), 20);
        assert!(!sub.iter().any(|l| l == NEUTRAL));
        assert_eq!(sub[0], "afraid");
        assert_eq!(sub[17], "proud");
    }

    #[test]
    fn generation_subset_is_idempotent_after_reinserting_neutral() {
        let sub = generation_subset(&EmotionVocabulary::canonical());
        let mut again = sub.clone();
        again.push(NEUTRAL.into());
        again.sort();
        let v = EmotionVocabulary::new(again).unwrap();
        assert_eq!(generation_subset(&v), sub);
    }

    #[test]
    fn rejects_wrong_vocabularies() {
        let mut short = canonical_labels();
        short.pop();
        assert!(EmotionVocabulary::new(short).is_err());
        let mut swapped = canonical_labels();
        swapped[20] = "serene".into();
        assert!(EmotionVocabulary::new(swapped).is_err());
        let mut unsorted = canonical_labels();
        unsorted.swap(0, 1);
        assert!(EmotionVocabulary::new(unsorted).is_err());
    }
}
