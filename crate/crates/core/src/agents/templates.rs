//! Prompt templates with `{name}` slots.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use regex::Regex;

use crate::{Error, Result};

/// The five prompts of the inference pipeline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Templates {
    pub persona: String,
    pub annotator_system: String,
    pub annotator_user: String,
    pub summarizer_system: String,
    pub summarizer_user: String,
}

const FILES: [&str; 5] = [
    "persona.txt",
    "annotator_system.txt",
    "annotator_user.txt",
    "summarizer_system.txt",
    "summarizer_user.txt",
];

impl Default for Templates {
    fn default() -> Self {
        Self {
            persona: include_str!("../../templates/persona.txt").trim_end().to_string(),
            annotator_system: include_str!("../../templates/annotator_system.txt").trim_end().to_string(),
            annotator_user: include_str!("../../templates/annotator_user.txt").trim_end().to_string(),
            summarizer_system: include_str!("../../templates/summarizer_system.txt").trim_end().to_string(),
            summarizer_user: include_str!("../../templates/summarizer_user.txt").trim_end().to_string(),
        }
    }
}

impl Templates {
    /// Loads templates from a directory; files that are absent keep the
    /// built-in text.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut t = Self::default();
        for (name, slot) in FILES.iter().zip([
            &mut t.persona,
            &mut t.annotator_system,
            &mut t.annotator_user,
            &mut t.summarizer_system,
            &mut t.summarizer_user,
        ]) {
            let path = dir.join(name);
            if path.exists() {
                *slot = fs::read_to_string(&path)?.trim_end().to_string();
            }
        }
        Ok(t)
    }

    /// Writes every template into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, text) in FILES.iter().zip([
            &self.persona,
            &self.annotator_system,
            &self.annotator_user,
            &self.summarizer_system,
            &self.summarizer_user,
        ]) {
            fs::write(dir.join(name), format!("{text}\n"))?;
        }
        Ok(())
    }
}

/// Fills every `{name}` slot. Unknown or unfilled slots are configuration
/// errors so a typo in a template file cannot silently reach a backend.
pub fn render(template: &str, values: &[(&str, &str)]) -> Result<String> {
    let map: BTreeMap<&str, &str> = values.iter().copied().collect();
    let slot = Regex::new(r"\{([a-z_]+)\}").expect("static regex");
    let mut missing = None;
    let out = slot.replace_all(template, |c: &regex::Captures| match map.get(&c[1]) {
        Some(v) => (*v).to_string(),
        None => {
            missing.get_or_insert_with(|| c[1].to_string());
            String::new()
        }
    });
    match missing {
        Some(name) => Err(Error::Config(format!("template slot {{{name}}} has no value"))),
        None => Ok(out.into_owned()),
    }
}
