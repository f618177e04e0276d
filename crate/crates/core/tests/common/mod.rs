//! Synthetic corpora shared by the integration tests.

#![allow(dead_code)]

use mlvae::corpus::{segment, Paragraph, Vocabulary};
use mlvae::trainer::Example;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Documents whose sentences all draw content words from one topic.
///
/// Sentence shape: `noun verb noun .` with both nouns from the document's
/// topic and the verb from a shared pool.
pub fn topic_corpus(docs: usize, topics: usize, nouns: usize, verbs: usize, sentences: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..docs)
        .map(|_| {
            let t = rng.random_range(0..topics);
            (0..sentences)
                .map(|_| {
                    let a = rng.random_range(0..nouns);
                    let v = rng.random_range(0..verbs);
                    let b = rng.random_range(0..nouns);
                    format!("t{t}n{a} v{v} t{t}n{b} .")
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Two-class corpus: every sentence carries one sentiment word from a
/// class-specific pool plus neutral words. Returns `(label, text)`.
pub fn sentiment_corpus(docs: usize, sentences: usize, seed: u64) -> Vec<(bool, String)> {
    const POS: [&str; 4] = ["good", "great", "tasty", "friendly"];
    const NEG: [&str; 4] = ["bad", "awful", "bland", "rude"];
    const SUBJ: [&str; 4] = ["food", "staff", "place", "service"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..docs)
        .map(|i| {
            let positive = i % 2 == 0;
            let pool = if positive { &POS } else { &NEG };
            let text = (0..sentences)
                .map(|_| {
                    let s = SUBJ[rng.random_range(0..SUBJ.len())];
                    let w = pool[rng.random_range(0..pool.len())];
                    format!("the {s} was {w} .")
                })
                .collect::<Vec<_>>()
                .join(" ");
            (positive, text)
        })
        .collect()
}

pub fn vocab_for(lines: &[String]) -> Vocabulary {
    let docs: Vec<_> = lines.iter().map(|l| segment(l).unwrap()).collect();
    Vocabulary::from_documents(&docs, 1000, 1).unwrap()
}

pub fn encode(lines: &[String], vocab: &Vocabulary) -> Vec<Paragraph> {
    lines.iter().map(|l| vocab.encode(&segment(l).unwrap()).unwrap()).collect()
}

pub fn examples(lines: &[String], vocab: &Vocabulary) -> Vec<Example> {
    encode(lines, vocab).into_iter().map(Example::document).collect()
}
