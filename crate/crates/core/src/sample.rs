//! Cloze triples and their JSON-lines wire format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The token that replaces the answer in the query.
pub const PLACEHOLDER: &str = "⟨X⟩";

/// Where a generated sample came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub doc_id: String,
    /// Index of the query sentence within the source document.
    pub sentence: usize,
    /// Token index of the blanked occurrence within that sentence.
    pub occurrence: usize,
}

/// A ⟨document, query, answer⟩ triple. Serialises directly as one
/// JSON-lines record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClozeSample {
    pub document: Vec<String>,
    pub query: Vec<String>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<SampleMeta>,
}

impl ClozeSample {
    /// Position of the single placeholder in the query, if there is exactly one.
    pub fn placeholder_index(&self) -> Option<usize> {
        let mut it = self.query.iter().enumerate().filter(|(_, t)| *t == PLACEHOLDER);
        match (it.next(), it.next()) {
            (Some((i, _)), None) => Some(i),
            _ => None,
        }
    }

    /// The query with the answer put back in place of the placeholder.
    pub fn splice(&self) -> Option<Vec<String>> {
        let i = self.placeholder_index()?;
        let mut out = self.query.clone();
        out[i] = self.answer.clone();
        Some(out)
    }

    /// Checks the structural invariants that hold for any loaded triple:
    /// one placeholder in the query, the answer absent from the query and
    /// present in the document.
    pub fn check(&self) -> std::result::Result<(), String> {
        let placeholders = self.query.iter().filter(|t| *t == PLACEHOLDER).count();
        if placeholders != 1 {
            return Err(format!("query must contain exactly one {PLACEHOLDER}, found {placeholders}"));
        }
        if self.document.is_empty() {
            return Err("document is empty".into());
        }
        if self.answer.is_empty() || self.answer == PLACEHOLDER {
            return Err(format!("invalid answer {:?}", self.answer));
        }
        if self.query.contains(&self.answer) {
            return Err(format!("answer {:?} still appears in the query", self.answer));
        }
        if !self.document.contains(&self.answer) {
            return Err(format!("answer {:?} does not appear in the document", self.answer));
        }
        if let Some(tok) = self.document.iter().chain(&self.query).find(|t| t.is_empty()) {
            return Err(format!("empty token {tok:?}"));
        }
        Ok(())
    }

    /// [`Self::check`] as a validation error tagged with `line`.
    pub fn validate(&self, line: usize) -> Result<()> {
        self.check().map_err(|message| Error::Validation { line, message })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn sample() -> ClozeSample {
        ClozeSample {
            document: toks("the river ran ⟨X⟩ by the river bank"),
            query: toks("⟨X⟩ by the"),
            answer: "river".into(),
            candidates: None,
            meta: None,
        }
    }

    #[test]
    fn valid_sample_passes_and_splices() {
        let s = sample();
        s.validate(1).unwrap();
        assert_eq!(s.splice().unwrap(), toks("river by the"));
        assert_eq!(s.placeholder_index(), Some(0));
    }

    #[test]
    fn invariant_violations_are_reported() {
        let mut s = sample();
        s.query = toks("by the");
        assert!(matches!(s.validate(7), Err(Error::Validation { line: 7, .. })));

        let mut s = sample();
        s.query = toks("⟨X⟩ ⟨X⟩");
        assert!(s.check().is_err());

        let mut s = sample();
        s.query = toks("⟨X⟩ river");
        assert!(s.check().unwrap_err().contains("query"));

        let mut s = sample();
        s.answer = "sky".into();
        assert!(s.check().unwrap_err().contains("document"));
    }

    #[test]
    fn wire_format_omits_absent_fields() {
        let s = sample();
        let json = serde_json::to_string(&s).unwrap();
        assert!(!json.contains("candidates"));
        assert!(!json.contains("meta"));
        let back: ClozeSample = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<ClozeSample>(r#"{"document":["a"],"query":["⟨X⟩"],"answer":"a","extra":1}"#).is_err());
    }
}
