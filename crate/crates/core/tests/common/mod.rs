#![allow(dead_code)]

use cas_reader::datagen::TaggedDocument;
use rand::Rng;

const TAGS: [&str; 7] = ["NN", "NNS", "n", "VB", "DT", "JJ", "IN"];

/// A random tagged document over a small lexicon, so candidates repeat
/// often but not always. A word keeps its tag within a document most of
/// the time.
pub fn random_tagged_doc<R: Rng>(rng: &mut R, doc_id: String) -> TaggedDocument {
    let lexicon = rng.random_range(3..16);
    let tags: Vec<&str> = (0..lexicon).map(|_| TAGS[rng.random_range(0..TAGS.len())]).collect();
    let sentences = (0..rng.random_range(1..7))
        .map(|_| {
            (0..rng.random_range(1..9))
                .map(|_| {
                    let w = rng.random_range(0..lexicon);
                    let tag = if rng.random_bool(0.9) { tags[w] } else { TAGS[rng.random_range(0..TAGS.len())] };
                    (format!("w{w}"), tag.to_string())
                })
                .collect()
        })
        .collect();
    TaggedDocument { doc_id, sentences }
}
