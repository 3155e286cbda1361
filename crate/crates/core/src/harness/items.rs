use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Categories kept for the reasoning-heavy benchmark subset.
pub const REASONING_CATEGORIES: [&str; 4] = [
    "instance reasoning",
    "logical reasoning",
    "math",
    "science & technology",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ItemKind {
    /// Option letter to option text.
    MultipleChoice(BTreeMap<String, String>),
    FreeForm,
}

/// On-disk form of an item: one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    id: String,
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_ref: Option<String>,
    kind: RawKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    options: BTreeMap<String, String>,
    gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawKind {
    MultipleChoice,
    FreeForm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawItem", into = "RawItem")]
pub struct BenchmarkItem {
    pub id: String,
    pub question: String,
    pub image_ref: Option<String>,
    pub kind: ItemKind,
    pub gold: String,
    pub category: Option<String>,
}

impl BenchmarkItem {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |reason: String| HarnessError::InvalidItem {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(bad("empty id".into()));
        }
        if self.question.trim().is_empty() {
            return Err(bad("empty question".into()));
        }
        if let ItemKind::MultipleChoice(options) = &self.kind {
            if options.is_empty() {
                return Err(bad("multiple choice without options".into()));
            }
            for letter in options.keys() {
                if letter.len() != 1 || !letter.chars().all(|c| c.is_ascii_uppercase()) {
                    return Err(bad(format!("option key {letter:?} is not a capital letter")));
                }
            }
            if !options.contains_key(&self.gold) {
                return Err(bad(format!("gold {:?} is not an option letter", self.gold)));
            }
        }
        Ok(())
    }

    /// The prompt text sent to the generator: question followed by options.
    pub fn prompt(&self) -> String {
        match &self.kind {
            ItemKind::FreeForm => self.question.clone(),
            ItemKind::MultipleChoice(options) => {
                let mut s = self.question.clone();
                s.push_str("\nOptions:");
                for (letter, text) in options {
                    s.push_str(&format!("\n{letter}. {text}"));
                }
                s
            }
        }
    }
}

impl TryFrom<RawItem> for BenchmarkItem {
    type Error = HarnessError;

    fn try_from(raw: RawItem) -> Result<Self, Self::Error> {
        let kind = match raw.kind {
            RawKind::MultipleChoice => ItemKind::MultipleChoice(raw.options),
            RawKind::FreeForm if raw.options.is_empty() => ItemKind::FreeForm,
            RawKind::FreeForm => {
                return Err(HarnessError::InvalidItem {
                    id: raw.id,
                    reason: "free-form item with options".into(),
                })
            }
        };
        let item = BenchmarkItem {
            id: raw.id,
            question: raw.question,
            image_ref: raw.image_ref,
            kind,
            gold: raw.gold,
            category: raw.category,
        };
        item.validate()?;
        Ok(item)
    }
}

impl From<BenchmarkItem> for RawItem {
    fn from(item: BenchmarkItem) -> Self {
        let (kind, options) = match item.kind {
            ItemKind::MultipleChoice(o) => (RawKind::MultipleChoice, o),
            ItemKind::FreeForm => (RawKind::FreeForm, BTreeMap::new()),
        };
        RawItem {
            id: item.id,
            question: item.question,
            image_ref: item.image_ref,
            kind,
            options,
            gold: item.gold,
            category: item.category,
        }
    }
}

pub fn read_items(path: &Path) -> Result<Vec<BenchmarkItem>, HarnessError> {
    let reader = BufReader::new(File::open(path)?);
    let mut items: Vec<BenchmarkItem> = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawItem = serde_json::from_str(&line)
            .map_err(|source| HarnessError::Parse { line: i + 1, source })?;
        let item = BenchmarkItem::try_from(raw)?;
        if !ids.insert(item.id.clone()) {
            return Err(HarnessError::InvalidItem {
                id: item.id,
                reason: "duplicate id".into(),
            });
        }
        items.push(item);
    }
    Ok(items)
}

pub fn write_items(path: &Path, items: &[BenchmarkItem]) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Keeps items whose category is in `keep` (case-insensitive). Uncategorized items are dropped.
pub fn filter_categories(items: &[BenchmarkItem], keep: &[&str]) -> Vec<BenchmarkItem> {
    items
        .iter()
        .filter(|it| {
            it.category
                .as_deref()
                .is_some_and(|c| keep.iter().any(|k| k.eq_ignore_ascii_case(c.trim())))
        })
        .cloned()
        .collect()
}

/// Synthetic items for the simulated world; graded by the hidden flag, not by `gold`.
pub fn sim_items(count: usize) -> Vec<BenchmarkItem> {
    (0..count)
        .map(|i| BenchmarkItem {
            id: format!("sim-{i:06}"),
            question: format!("Synthetic question {i}"),
            image_ref: None,
            kind: ItemKind::FreeForm,
            gold: "correct".into(),
            category: None,
        })
        .collect()
}
