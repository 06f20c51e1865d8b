//! Frequency-ranked shortlist vocabulary with hashed unknown-word buckets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sample::{ClozeSample, PLACEHOLDER};

pub const PAD_ID: u32 = 0;
pub const PLACEHOLDER_ID: u32 = 1;
pub const UNK_BASE: u32 = 2;
pub const NUM_UNK: u32 = 10;
/// Ids below this are reserved; shortlist tokens start here.
pub const FIRST_WORD_ID: u32 = UNK_BASE + NUM_UNK;

const FORMAT: &str = "cas-vocab";
const FORMAT_VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Unknown-word id for a token outside the shortlist.
pub fn unk_id(token: &str) -> u32 {
    UNK_BASE + (fnv1a64(token.as_bytes()) % u64::from(NUM_UNK)) as u32
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    /// Shortlist tokens; `tokens[i]` has id `FIRST_WORD_ID + i`.
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, u32>,
    /// `None` keeps every token.
    shortlist: Option<usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.freqs == other.freqs && self.shortlist == other.shortlist
    }
}

/// Counts tokens and keeps the `shortlist` most frequent ones, ties broken
/// lexicographically. The placeholder is reserved and never counted.
pub fn build_vocab<I, S>(tokens: I, shortlist: Option<usize>) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if shortlist == Some(0) {
        return Err(Error::Config("shortlist size must be at least 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut seen_any = false;
    for tok in tokens {
        seen_any = true;
        let tok = tok.as_ref();
        if tok != PLACEHOLDER {
            *counts.entry(tok.to_string()).or_insert(0) += 1;
        }
    }
    if !seen_any {
        return Err(Error::Usage("cannot build a vocabulary from an empty token stream".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(k) = shortlist {
        ranked.truncate(k);
    }
    let (tokens, freqs) = ranked.into_iter().unzip();
    Vocabulary::from_parts(tokens, freqs, shortlist)
}

/// Vocabulary over every document and query token of `samples`.
pub fn build_from_samples(samples: &[ClozeSample], shortlist: Option<usize>) -> Result<Vocabulary> {
    build_vocab(
        samples.iter().flat_map(|s| s.document.iter().chain(&s.query)),
        shortlist,
    )
}

/// A sample mapped to ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub doc: Vec<u32>,
    pub query: Vec<u32>,
    pub answer: u32,
    pub candidates: Option<Vec<u32>>,
    /// Set when the answer id does not occur in `doc`, which only happens
    /// when unknown-word hashing separates the answer from its mentions.
    pub answer_missing: bool,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, freqs: Vec<u64>, shortlist: Option<usize>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let id = FIRST_WORD_ID + u32::try_from(i).map_err(|_| Error::Config("vocabulary too large".into()))?;
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            freqs,
            index,
            shortlist,
        })
    }

    /// Total number of ids, reserved ones included.
    pub fn size(&self) -> usize {
        FIRST_WORD_ID as usize + self.tokens.len()
    }

    pub fn shortlist(&self) -> Option<usize> {
        self.shortlist
    }

    /// Shortlist tokens with their build-time frequencies, in id order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> {
        self.tokens.iter().map(String::as_str).zip(self.freqs.iter().copied())
    }

    /// Total mapping: shortlist tokens get their id, the placeholder its
    /// reserved id, anything else an unknown-word bucket.
    pub fn token_to_id(&self, token: &str) -> u32 {
        if token == PLACEHOLDER {
            return PLACEHOLDER_ID;
        }
        self.index.get(token).copied().unwrap_or_else(|| unk_id(token))
    }

    pub fn id_to_token(&self, id: u32) -> Option<String> {
        match id {
            PAD_ID => Some("<pad>".into()),
            PLACEHOLDER_ID => Some(PLACEHOLDER.into()),
            i if i < FIRST_WORD_ID => Some(format!("<unk_{}>", i - UNK_BASE)),
            i => self.tokens.get((i - FIRST_WORD_ID) as usize).cloned(),
        }
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.token_to_id(t)).collect()
    }

    pub fn encode_sample(&self, sample: &ClozeSample) -> EncodedSample {
        let doc = self.encode(&sample.document);
        let answer = self.token_to_id(&sample.answer);
        EncodedSample {
            answer_missing: !doc.contains(&answer),
            query: self.encode(&sample.query),
            candidates: sample.candidates.as_ref().map(|c| self.encode(c)),
            doc,
            answer,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let limit = self.shortlist.map_or("unbounded".to_string(), |k| k.to_string());
        let _ = writeln!(out, "{FORMAT}\t{FORMAT_VERSION}\t{limit}");
        for (t, f) in self.entries() {
            let _ = writeln!(out, "{}\t{f}", escape(t));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse = |line: usize, message: String| Error::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| parse(1, "missing header".into()))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 3 || fields[0] != FORMAT {
            return Err(parse(1, format!("expected header \"{FORMAT}<TAB>version<TAB>shortlist\"")));
        }
        if fields[1] != FORMAT_VERSION.to_string() {
            return Err(parse(
                1,
                format!("unsupported vocabulary format version {} (expected {FORMAT_VERSION})", fields[1]),
            ));
        }
        let shortlist = match fields[2] {
            "unbounded" => None,
            k => Some(
                k.parse::<usize>()
                    .ok()
                    .filter(|&k| k > 0)
                    .ok_or_else(|| parse(1, format!("invalid shortlist size {k:?}")))?,
            ),
        };
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (n, line) in lines {
            let (tok, freq) = line
                .split_once('\t')
                .ok_or_else(|| parse(n, "expected \"token<TAB>frequency\"".into()))?;
            let tok = unescape(tok).ok_or_else(|| parse(n, format!("bad escape in {tok:?}")))?;
            if tok.is_empty() || tok == PLACEHOLDER {
                return Err(parse(n, format!("reserved or empty token {tok:?}")));
            }
            let freq = freq
                .parse::<u64>()
                .map_err(|_| parse(n, format!("invalid frequency {freq:?}")))?;
            if let Some(first) = seen.insert(tok.clone(), n) {
                return Err(parse(n, format!("duplicate token {tok:?} (first on line {first})")));
            }
            tokens.push(tok);
            freqs.push(freq);
        }
        if let Some(k) = shortlist {
            if tokens.len() > k {
                return Err(parse(1, format!("{} tokens exceed the shortlist of {k}", tokens.len())));
            }
        }
        Vocabulary::from_parts(tokens, freqs, shortlist)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn escape(t: &str) -> String {
    let mut out = String::with_capacity(t.len());
    for c in t.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(t: &str) -> Option<String> {
    let mut out = String::with_capacity(t.len());
    let mut chars = t.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match chars.next()? {
            '\\' => '\\',
            't' => '\t',
            'n' => '\n',
            'r' => '\r',
            _ => return None,
        });
    }
    Some(out)
}
