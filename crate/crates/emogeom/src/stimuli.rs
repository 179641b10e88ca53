//! Stimulus corpus: comprehension passages, neutral baselines and the
//! generation templates.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use emogeom_core::vocab::{emotion_index, EmotionVocabulary, EMOTIONS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const N_NEUTRAL_SENTENCES: usize = 20;
pub const N_STORY_TEMPLATES: usize = 5;
pub const N_NEUTRAL_STORIES: usize = 10;
pub const EMOTION_SLOT: &str = "{emotion}";

const BUNDLED_PASSAGES: &str = include_str!("../data/corpus/emotion_passages.csv");
const BUNDLED_NEUTRAL: &str = include_str!("../data/corpus/neutral_sentences.txt");
const BUNDLED_TEMPLATES: &str = include_str!("../data/corpus/templates.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusBundle {
    /// Passages per emotion label, in file order.
    pub passages: BTreeMap<String, Vec<String>>,
    pub neutral_sentences: Vec<String>,
    pub story_templates: Vec<String>,
    pub neutral_stories: Vec<String>,
    /// Fixed continuation prompt used for steering.
    pub steering_prompt: String,
    /// True for the openly written substitute corpus shipped with the crate.
    pub stand_in: bool,
}

#[derive(Deserialize)]
struct TemplateFile {
    #[serde(default)]
    stand_in: bool,
    story_templates: Vec<String>,
    neutral_stories: Vec<String>,
    steering_prompt: String,
}

/// Paths of the three corpus files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub passages: PathBuf,
    pub neutral: PathBuf,
    pub templates: PathBuf,
}

impl CorpusBundle {
    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.passages.keys().find(|k| emotion_index(k).is_none()) {
            return Err(Error::Validation(format!("unknown emotion label '{bad}'")));
        }
        let absent: Vec<&str> = EMOTIONS
            .iter()
            .copied()
            .filter(|e| self.passages.get(*e).is_none_or(|p| p.is_empty()))
            .collect();
        if !absent.is_empty() {
            return Err(Error::Validation(format!(
                "no passages for: {}",
                absent.join(", ")
            )));
        }
        check_count("neutral sentences", self.neutral_sentences.len(), N_NEUTRAL_SENTENCES)?;
        check_count("story templates", self.story_templates.len(), N_STORY_TEMPLATES)?;
        check_count("neutral stories", self.neutral_stories.len(), N_NEUTRAL_STORIES)?;
        if let Some(t) = self.story_templates.iter().find(|t| !t.contains(EMOTION_SLOT)) {
            return Err(Error::Validation(format!("story template lacks {EMOTION_SLOT}: '{t}'")));
        }
        if self.steering_prompt.trim().is_empty() {
            return Err(Error::Validation("steering prompt is empty".into()));
        }
        Ok(())
    }

    pub fn passage_count(&self) -> usize {
        self.passages.values().map(Vec::len).sum()
    }

    /// Passages of each canonical emotion, in vocabulary order.
    pub fn passages_in_order(&self) -> impl Iterator<Item = (&'static str, &[String])> {
        EMOTIONS
            .iter()
            .map(|&e| (e, self.passages.get(e).map(Vec::as_slice).unwrap_or(&[])))
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("corpus serializes");
        hex(&Sha256::digest(&bytes))
    }

    pub fn story_prompt(&self, template: usize, emotion: &str) -> String {
        self.story_templates[template].replace(EMOTION_SLOT, emotion)
    }

    /// The vocabulary the corpus is validated against.
    pub fn vocabulary(&self) -> EmotionVocabulary {
        EmotionVocabulary::canonical()
    }
}

fn check_count(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Validation(format!("expected {want} {what}, found {got}")));
    }
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_passages(text: &str, origin: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::parse(origin, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::parse(origin, format!("missing column '{name}'")))
    };
    let (ei, ti) = (col("emotion")?, col("text")?);
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(origin, e))?;
        let row = i + 2;
        let label = rec.get(ei).unwrap_or("").trim().to_string();
        if emotion_index(&label).is_none() {
            return Err(Error::parse(origin, format!("row {row}: unknown emotion label '{label}'")));
        }
        let passage = rec.get(ti).unwrap_or("");
        if passage.trim().is_empty() {
            return Err(Error::parse(origin, format!("row {row}: empty passage")));
        }
        out.entry(label).or_default().push(passage.to_string());
    }
    Ok(out)
}

fn parse_lines(text: &str) -> Vec<String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim_end_matches('\r').to_string())
        .collect()
}

fn assemble(passages: &str, neutral: &str, templates: &str, paths: &CorpusPaths) -> Result<CorpusBundle> {
    let t: TemplateFile = serde_json::from_str(templates).map_err(|e| Error::parse(&paths.templates, e))?;
    let bundle = CorpusBundle {
        passages: parse_passages(passages, &paths.passages)?,
        neutral_sentences: parse_lines(neutral),
        story_templates: t.story_templates,
        neutral_stories: t.neutral_stories,
        steering_prompt: t.steering_prompt,
        stand_in: t.stand_in,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(passages: &Path, neutral: &Path, templates: &Path) -> Result<CorpusBundle> {
    let paths = CorpusPaths {
        passages: passages.into(),
        neutral: neutral.into(),
        templates: templates.into(),
    };
    assemble(&read(passages)?, &read(neutral)?, &read(templates)?, &paths)
}

/// The stand-in corpus compiled into the crate.
pub fn bundled() -> CorpusBundle {
    let paths = CorpusPaths {
        passages: "<bundled>/emotion_passages.csv".into(),
        neutral: "<bundled>/neutral_sentences.txt".into(),
        templates: "<bundled>/templates.json".into(),
    };
    assemble(BUNDLED_PASSAGES, BUNDLED_NEUTRAL, BUNDLED_TEMPLATES, &paths).expect("bundled corpus is valid")
}
