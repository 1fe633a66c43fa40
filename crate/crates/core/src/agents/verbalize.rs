//! Mapping free-text annotator answers onto attribute categories.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::{Error, Label, Result};

/// One category and the lowercase keywords that name it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelKeywords {
    pub name: String,
    pub keywords: Vec<String>,
}

/// The attribute being inferred, its categories in label order, and the noun
/// used for items inside prompts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attribute: String,
    #[serde(default = "default_item_kind")]
    pub item_kind: String,
    pub labels: Vec<LabelKeywords>,
}

fn default_item_kind() -> String {
    "movie".into()
}

impl AttributeSchema {
    /// Binary gender schema; label 0 is male and label 1 is female.
    pub fn gender() -> Self {
        Self {
            attribute: "gender".into(),
            item_kind: default_item_kind(),
            labels: vec![
                LabelKeywords { name: "male".into(), keywords: vec!["male".into(), "man".into()] },
                LabelKeywords { name: "female".into(), keywords: vec!["female".into(), "woman".into()] },
            ],
        }
    }

    /// A schema whose only keyword per label is the label name itself.
    pub fn from_names(attribute: &str, names: &[String]) -> Result<Self> {
        let s = Self {
            attribute: attribute.into(),
            item_kind: default_item_kind(),
            labels: names
                .iter()
                .map(|n| LabelKeywords { name: n.to_lowercase(), keywords: vec![n.to_lowercase()] })
                .collect(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn arity(&self) -> usize {
        self.labels.len()
    }

    pub fn label_name(&self, label: usize) -> Option<&str> {
        self.labels.get(label).map(|l| l.name.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.labels.len() < 2 {
            return bad("attribute schema needs at least two labels".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.labels {
            if l.keywords.is_empty() {
                return bad(format!("label {} has no keywords", l.name));
            }
            for k in &l.keywords {
                if k.trim().is_empty() || *k != k.to_lowercase() {
                    return bad(format!("keyword {k:?} must be non-empty lowercase"));
                }
                if !seen.insert(k.as_str()) {
                    return bad(format!("keyword {k:?} is shared by two labels"));
                }
            }
        }
        Ok(())
    }

    fn matchers(&self) -> Vec<Regex> {
        self.labels
            .iter()
            .map(|l| {
                let alts: Vec<String> = l.keywords.iter().map(|k| regex::escape(k)).collect();
                Regex::new(&format!(r"(?i)\b(?:{})\b", alts.join("|"))).expect("escaped keywords")
            })
            .collect()
    }
}

/// Sentences that carry the annotator's verdict.
static CUE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:infer|inferred|infers|deduce|deduced|conclude|concluded|conclusion|verdict|likely|probably|i believe|i think|my guess)\b")
        .expect("static regex")
});

/// Words that, shortly before a keyword, negate it.
static NEGATION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:not|no|never|nor|isn't|unlikely|than)\W+(?:\w+\W+){0,2}$").expect("static regex")
});

static SENTENCE_END: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[.!?]+(?:\s+|$)|\n+").expect("static regex"));

fn sentences(text: &str) -> Vec<&str> {
    SENTENCE_END.split(text).map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Labels with at least one non-negated keyword hit in `span`.
fn hits(span: &str, matchers: &[Regex]) -> Vec<usize> {
    matchers
        .iter()
        .enumerate()
        .filter(|(_, re)| re.find_iter(span).any(|m| !NEGATION.is_match(&span[..m.start()])))
        .map(|(i, _)| i)
        .collect()
}

fn single(span: &str, matchers: &[Regex]) -> Label {
    match hits(span, matchers).as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

/// Resolves a response to a label, trying spans from most to least specific:
///
/// 1. verdict sentences (those with an inference cue): every one that names
///    exactly one label must agree;
/// 2. the final sentence;
/// 3. the whole text.
///
/// A span naming zero or several labels defers to the next; if none resolves
/// the answer is an abstention. Negated mentions ("not male") do not count.
pub fn verbalize(raw_text: &str, schema: &AttributeSchema) -> Result<Label> {
    if schema.labels.is_empty() {
        return Err(Error::Config("attribute schema has no labels".into()));
    }
    let matchers = schema.matchers();
    let sents = sentences(raw_text);

    let verdicts: Vec<usize> = sents
        .iter()
        .filter(|s| CUE.is_match(s))
        .filter_map(|s| single(s, &matchers))
        .collect();
    if let Some(&first) = verdicts.first() {
        if verdicts.iter().all(|&v| v == first) {
            return Ok(Some(first));
        }
    }
    if let Some(last) = sents.last() {
        if let Some(l) = single(last, &matchers) {
            return Ok(Some(l));
        }
    }
    Ok(single(raw_text, &matchers))
}
