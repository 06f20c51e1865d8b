use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::sample::PLACEHOLDER;

/// A sentence-segmented, POS-tagged document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedDocument {
    pub doc_id: String,
    /// Each sentence is a non-empty list of `(token, tag)` pairs.
    pub sentences: Vec<Vec<(String, String)>>,
}

impl TaggedDocument {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().flatten().map(|(t, _)| t.as_str())
    }

    /// Writes the document back in the tagged-corpus text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("#doc {}\n", self.doc_id);
        for (i, s) in self.sentences.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            for (t, tag) in s {
                out.push_str(t);
                out.push('\t');
                out.push_str(tag);
                out.push('\n');
            }
        }
        out
    }
}

/// Parses the tagged-corpus format: a `#doc <id>` header opens each
/// document, every token line is `token<TAB>TAG`, and blank lines separate
/// sentences.
pub fn parse_tagged_corpus(text: &str) -> Result<Vec<TaggedDocument>> {
    let parse = |line: usize, message: String| Error::Parse { line, message };
    let mut docs: Vec<TaggedDocument> = Vec::new();
    let mut header_line = 0;
    let mut ids = BTreeSet::new();
    let mut sentence: Vec<(String, String)> = Vec::new();

    let close = |docs: &mut Vec<TaggedDocument>, sentence: &mut Vec<(String, String)>| {
        if !sentence.is_empty() {
            if let Some(d) = docs.last_mut() {
                d.sentences.push(std::mem::take(sentence));
            }
        }
    };

    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim_end_matches('\r');
        if let Some(id) = line.strip_prefix("#doc").filter(|r| r.is_empty() || r.starts_with(' ')) {
            close(&mut docs, &mut sentence);
            if let Some(d) = docs.last() {
                if d.sentences.is_empty() {
                    return Err(parse(header_line, format!("document {:?} has no sentences", d.doc_id)));
                }
            }
            let id = id.trim();
            if id.is_empty() {
                return Err(parse(n, "document header without an id".into()));
            }
            if !ids.insert(id.to_string()) {
                return Err(parse(n, format!("duplicate document id {id:?}")));
            }
            docs.push(TaggedDocument {
                doc_id: id.to_string(),
                sentences: Vec::new(),
            });
            header_line = n;
            continue;
        }
        if line.trim().is_empty() {
            close(&mut docs, &mut sentence);
            continue;
        }
        if docs.is_empty() {
            return Err(parse(n, "token line before the first \"#doc\" header".into()));
        }
        let (tok, tag) = line
            .split_once('\t')
            .ok_or_else(|| parse(n, "expected \"token<TAB>TAG\"".into()))?;
        if tok.is_empty() || tag.is_empty() || tag.contains('\t') {
            return Err(parse(n, "expected a non-empty token and a single tag".into()));
        }
        if tok == PLACEHOLDER {
            return Err(parse(n, format!("the placeholder {PLACEHOLDER} cannot appear in input text")));
        }
        sentence.push((tok.to_string(), tag.to_string()));
    }
    close(&mut docs, &mut sentence);
    if let Some(d) = docs.last() {
        if d.sentences.is_empty() {
            return Err(parse(header_line, format!("document {:?} has no sentences", d.doc_id)));
        }
    }
    Ok(docs)
}
