//! Ingestion, validation, and generation of hate-speech/counterspeech corpora.
//!
//! A corpus is a JSON-lines file, one record per line:
//! `{"id": str, "hs": str, "cs": str, "intent": str, "target": str, "split": str}`.
//! Records are validated on load and kept in a stable order (sorted by id).
//! The synthetic generator produces a desk-scale corpus whose intent is
//! decidable by a rule-based oracle, which makes end-to-end runs verifiable
//! without any annotated data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// The five counterspeech intents, in fixed id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IntentCategory {
    Informative = 0,
    Question = 1,
    Denouncing = 2,
    Humor = 3,
    Positive = 4,
}

impl IntentCategory {
    pub const ALL: [IntentCategory; 5] = [
        IntentCategory::Informative,
        IntentCategory::Question,
        IntentCategory::Denouncing,
        IntentCategory::Humor,
        IntentCategory::Positive,
    ];

    pub const COUNT: usize = 5;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<IntentCategory> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            IntentCategory::Informative => "informative",
            IntentCategory::Question => "question",
            IntentCategory::Denouncing => "denouncing",
            IntentCategory::Humor => "humor",
            IntentCategory::Positive => "positive",
        }
    }

    pub fn parse(name: &str) -> Result<IntentCategory> {
        let lower = name.trim().to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == lower)
            .ok_or_else(|| Error::UnknownIntent { name: name.to_string() })
    }
}

impl fmt::Display for IntentCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The eight hate-speech target communities, in fixed id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TargetCategory {
    Muslims = 0,
    Migrants = 1,
    Women = 2,
    LgbtPlus = 3,
    Jews = 4,
    Poc = 5,
    Disabled = 6,
    Other = 7,
}

impl TargetCategory {
    pub const ALL: [TargetCategory; 8] = [
        TargetCategory::Muslims,
        TargetCategory::Migrants,
        TargetCategory::Women,
        TargetCategory::LgbtPlus,
        TargetCategory::Jews,
        TargetCategory::Poc,
        TargetCategory::Disabled,
        TargetCategory::Other,
    ];

    pub const COUNT: usize = 8;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<TargetCategory> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetCategory::Muslims => "Muslims",
            TargetCategory::Migrants => "Migrants",
            TargetCategory::Women => "Women",
            TargetCategory::LgbtPlus => "LGBT+",
            TargetCategory::Jews => "Jews",
            TargetCategory::Poc => "POC",
            TargetCategory::Disabled => "Disabled",
            TargetCategory::Other => "Other",
        }
    }

    pub fn parse(name: &str) -> Result<TargetCategory> {
        let trimmed = name.trim();
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name().eq_ignore_ascii_case(trimmed))
            .ok_or_else(|| Error::UnknownTarget { name: name.to_string() })
    }
}

impl fmt::Display for TargetCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(name: &str) -> Result<Split> {
        match name.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::UnknownSplit { name: name.to_string() }),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One (hate speech, target, intent, counterspeech) record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetExample {
    pub example_id: String,
    pub hate_speech: String,
    pub target: TargetCategory,
    pub intent: IntentCategory,
    pub counterspeech: String,
    pub split: Split,
}

/// Unicode NFC plus whitespace collapse. Casing is preserved.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitCounts {
    /// Distinct hate-speech texts.
    pub hate_speeches: usize,
    /// Counterspeech records.
    pub counterspeeches: usize,
}

/// Count summary of a corpus: per-split totals and the per-(target, intent)
/// counterspeech distribution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub total: SplitCounts,
    pub train: SplitCounts,
    pub dev: SplitCounts,
    pub test: SplitCounts,
    /// `per_target_intent[target.id()][intent.id()]` = counterspeech count.
    pub per_target_intent: [[usize; IntentCategory::COUNT]; TargetCategory::COUNT],
}

impl CorpusStats {
    pub fn split(&self, s: Split) -> SplitCounts {
        match s {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }

    pub fn compute(examples: &[DatasetExample]) -> CorpusStats {
        let mut stats = CorpusStats::default();
        let mut all_hs: BTreeSet<&str> = BTreeSet::new();
        let mut split_hs: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
        for ex in examples {
            all_hs.insert(ex.hate_speech.as_str());
            split_hs.entry(ex.split).or_default().insert(ex.hate_speech.as_str());
            let sc = match ex.split {
                Split::Train => &mut stats.train,
                Split::Dev => &mut stats.dev,
                Split::Test => &mut stats.test,
            };
            sc.counterspeeches += 1;
            stats.total.counterspeeches += 1;
            stats.per_target_intent[ex.target.id()][ex.intent.id()] += 1;
        }
        stats.total.hate_speeches = all_hs.len();
        for (split, set) in split_hs {
            match split {
                Split::Train => stats.train.hate_speeches = set.len(),
                Split::Dev => stats.dev.hate_speeches = set.len(),
                Split::Test => stats.test.hate_speeches = set.len(),
            }
        }
        stats
    }
}

/// A validated, immutable corpus. Records are sorted by `example_id`.
#[derive(Debug, Clone)]
pub struct Corpus {
    examples: Vec<DatasetExample>,
    stats: CorpusStats,
    warnings: Vec<String>,
}

impl Corpus {
    pub fn from_examples(mut examples: Vec<DatasetExample>) -> Result<Corpus> {
        examples.sort_by(|a, b| a.example_id.cmp(&b.example_id));
        let mut seen = BTreeSet::new();
        for ex in &examples {
            if !seen.insert(ex.example_id.as_str()) {
                return Err(Error::Corpus {
                    line: 0,
                    reason: format!("duplicate example id {:?}", ex.example_id),
                });
            }
        }
        let stats = CorpusStats::compute(&examples);
        let warnings = cross_split_warnings(&examples);
        Ok(Corpus { examples, stats, warnings })
    }

    pub fn examples(&self) -> &[DatasetExample] {
        &self.examples
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn split(&self, s: Split) -> impl Iterator<Item = &DatasetExample> {
        self.examples.iter().filter(move |e| e.split == s)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Hate speeches shared between splits are flagged, not rejected.
fn cross_split_warnings(examples: &[DatasetExample]) -> Vec<String> {
    let mut by_hs: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for ex in examples {
        by_hs.entry(ex.hate_speech.as_str()).or_default().insert(ex.split);
    }
    by_hs
        .into_iter()
        .filter(|(_, splits)| splits.len() > 1)
        .map(|(hs, splits)| {
            let names: Vec<&str> = splits.iter().map(|s| s.name()).collect();
            format!("hate speech {:?} appears in multiple splits: {}", hs, names.join(", "))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    hs: String,
    cs: String,
    intent: String,
    target: String,
    split: String,
}

fn validate_record(raw: RawRecord, line: usize) -> Result<DatasetExample> {
    let hate_speech = normalize_text(&raw.hs);
    if hate_speech.is_empty() {
        return Err(Error::Corpus { line, reason: "field \"hs\" is empty".into() });
    }
    let counterspeech = normalize_text(&raw.cs);
    if counterspeech.is_empty() {
        return Err(Error::Corpus { line, reason: "field \"cs\" is empty".into() });
    }
    if raw.id.trim().is_empty() {
        return Err(Error::Corpus { line, reason: "field \"id\" is empty".into() });
    }
    let intent = IntentCategory::parse(&raw.intent)
        .map_err(|e| Error::Corpus { line, reason: format!("field \"intent\": {e}") })?;
    let target = TargetCategory::parse(&raw.target)
        .map_err(|e| Error::Corpus { line, reason: format!("field \"target\": {e}") })?;
    let split = Split::parse(&raw.split)
        .map_err(|e| Error::Corpus { line, reason: format!("field \"split\": {e}") })?;
    Ok(DatasetExample {
        example_id: raw.id.trim().to_string(),
        hate_speech,
        target,
        intent,
        counterspeech,
        split,
    })
}

/// Load and validate a JSONL corpus. Blank lines are ignored.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&text).map_err(|e| Error::Corpus {
            line: line_no,
            reason: format!("malformed record: {e}"),
        })?;
        examples.push(validate_record(raw, line_no)?);
    }
    Corpus::from_examples(examples)
}

/// Write a corpus as JSONL, one record per line, in the stable record order.
pub fn write_corpus(path: &Path, examples: &[DatasetExample]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    for ex in examples {
        let raw = RawRecord {
            id: ex.example_id.clone(),
            hs: ex.hate_speech.clone(),
            cs: ex.counterspeech.clone(),
            intent: ex.intent.name().to_string(),
            target: ex.target.name().to_string(),
            split: ex.split.name().to_string(),
        };
        let json = serde_json::to_string(&raw).expect("record serialization cannot fail");
        writeln!(file, "{json}").map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Source taxonomy for legacy intent labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LegacyScheme {
    Benesch,
    Mathew,
}

impl LegacyScheme {
    pub fn name(self) -> &'static str {
        match self {
            LegacyScheme::Benesch => "benesch",
            LegacyScheme::Mathew => "mathew",
        }
    }
}

/// Map a legacy intent label onto the five-way taxonomy.
///
/// facts map to informative; denouncing, consequences, and
/// hypocrisy/contradictions collapse into denouncing; affiliation and
/// positive collapse into positive. The benesch "other" label has no
/// counterpart and is reported as unmappable.
pub fn map_legacy_intents(name: &str, scheme: LegacyScheme) -> Result<IntentCategory> {
    let key = name.trim().to_ascii_lowercase();
    let unmappable = || Error::UnmappableIntent {
        name: name.to_string(),
        scheme: scheme.name().to_string(),
    };
    match scheme {
        LegacyScheme::Benesch => match key.as_str() {
            "facts" => Ok(IntentCategory::Informative),
            "humor" => Ok(IntentCategory::Humor),
            "question" => Ok(IntentCategory::Question),
            "denouncing" | "consequences" | "hypocrisy" => Ok(IntentCategory::Denouncing),
            "affiliation" | "positive" => Ok(IntentCategory::Positive),
            "other" => Err(unmappable()),
            _ => Err(Error::UnknownIntent { name: name.to_string() }),
        },
        LegacyScheme::Mathew => match key.as_str() {
            "facts" => Ok(IntentCategory::Informative),
            "humor" => Ok(IntentCategory::Humor),
            "denouncing" | "consequences" | "contradictions" => Ok(IntentCategory::Denouncing),
            "affiliation" | "positive" => Ok(IntentCategory::Positive),
            _ => Err(Error::UnknownIntent { name: name.to_string() }),
        },
    }
}

/// Marker token that opens each synthetic counterspeech, keyed by intent.
fn intent_marker(intent: IntentCategory) -> &'static str {
    match intent {
        IntentCategory::Informative => "fact",
        IntentCategory::Question => "why",
        IntentCategory::Denouncing => "wrong",
        IntentCategory::Humor => "haha",
        IntentCategory::Positive => "peace",
    }
}

fn intent_closer(intent: IntentCategory) -> &'static str {
    match intent {
        IntentCategory::Informative => "indeed",
        IntentCategory::Question => "really",
        IntentCategory::Denouncing => "shame",
        IntentCategory::Humor => "lol",
        IntentCategory::Positive => "together",
    }
}

/// Apply the deterministic intent template to a hate-speech body.
fn apply_template(intent: IntentCategory, body: &[String]) -> String {
    let content: Vec<String> = if intent == IntentCategory::Humor {
        body.iter().rev().cloned().collect()
    } else {
        body.to_vec()
    };
    format!("{} {} {}", intent_marker(intent), content.join(" "), intent_closer(intent))
}

/// Rule-based intent detector for synthetic counterspeeches.
///
/// Decides purely from the opening marker token; returns `None` for text
/// that does not follow any template.
pub fn synthetic_intent_oracle(text: &str) -> Option<IntentCategory> {
    let first = text.split_whitespace().next()?;
    IntentCategory::ALL.iter().copied().find(|c| intent_marker(*c) == first)
}

/// Generate a deterministic synthetic corpus: `n_hate` hate speeches, each
/// paired with five counterspeeches (one per intent) derived from it by a
/// distinct template. Hate speeches carry a target marker token so the
/// target is decidable from the text. Splits partition hate speeches
/// 8:1:1 (train/dev/test) by index.
pub fn make_synthetic_corpus(
    seed: u64,
    n_hate: usize,
    vocab_size: usize,
) -> Result<Vec<DatasetExample>> {
    if n_hate < 1 {
        return Err(Error::Config("make-synthetic requires n_hate >= 1".into()));
    }
    if vocab_size < 20 {
        return Err(Error::Config("make-synthetic requires vocab_size >= 20".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n_hate * IntentCategory::COUNT);
    for h in 0..n_hate {
        let target = TargetCategory::from_id(h % TargetCategory::COUNT).unwrap();
        let body_len = rng.gen_range(4..=7);
        let body: Vec<String> = (0..body_len)
            .map(|_| format!("w{}", rng.gen_range(0..vocab_size)))
            .collect();
        let hate_speech = format!("tgt{} {}", target.id(), body.join(" "));
        let split = match h % 10 {
            8 => Split::Dev,
            9 => Split::Test,
            _ => Split::Train,
        };
        for intent in IntentCategory::ALL {
            examples.push(DatasetExample {
                example_id: format!("syn-{h:05}-{}", intent.name()),
                hate_speech: hate_speech.clone(),
                target,
                intent,
                counterspeech: apply_template(intent, &body),
                split,
            });
        }
    }
    Ok(examples)
}
