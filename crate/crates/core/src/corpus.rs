//! Text ingestion: sentence segmentation, vocabulary, padded batches.
//!
//! Documents are one per line, already lowercased and whitespace-tokenized.
//! A paragraph is a list of sentences; every sentence ends with the `END`
//! token, which is counted in its length.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const END: usize = 2;
pub const NUM_RESERVED: usize = 3;

pub const PAD_TOKEN: &str = "PAD";
pub const UNK_TOKEN: &str = "UNK";
pub const END_TOKEN: &str = "END";

pub const DEFAULT_MAX_SENTENCES: usize = 10;
pub const DEFAULT_MAX_WORDS: usize = 25;
pub const DEFAULT_VOCAB_SIZE: usize = 20_000;

const TERMINALS: [&str; 3] = [".", "!", "?"];

/// Splits a whitespace-tokenized line into sentences at terminal
/// punctuation tokens, appending `END` to each. A trailing fragment without
/// terminal punctuation becomes the last sentence.
pub fn segment(raw_line: &str) -> Result<Vec<Vec<String>>> {
    let mut sentences = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for tok in raw_line.split_whitespace() {
        current.push(tok.to_string());
        if TERMINALS.contains(&tok) {
            current.push(END_TOKEN.to_string());
            sentences.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        current.push(END_TOKEN.to_string());
        sentences.push(current);
    }
    if sentences.is_empty() {
        return Err(Error::Empty("line has no tokens".into()));
    }
    Ok(sentences)
}

/// Token/id bijection with `PAD`, `UNK`, `END` at ids 0, 1, 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let tokens: Vec<String> = [PAD_TOKEN, UNK_TOKEN, END_TOKEN].iter().map(|s| s.to_string()).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, ids }
    }

    /// Keeps the most frequent tokens with count `>= min_freq`, ties broken
    /// lexicographically, up to `max_size` entries including the reserved ones.
    pub fn build<'a, I>(tokens: I, max_size: usize, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size <= NUM_RESERVED {
            return Err(Error::Config(format!("vocabulary max_size must exceed {NUM_RESERVED}, got {max_size}")));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen_any = false;
        for t in tokens {
            seen_any = true;
            if t == PAD_TOKEN || t == UNK_TOKEN || t == END_TOKEN {
                continue;
            }
            *counts.entry(t).or_default() += 1;
        }
        if !seen_any {
            return Err(Error::Empty("vocabulary token stream".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut vocab = Vocabulary::with_reserved();
        for (tok, _) in ranked.into_iter().take(max_size - NUM_RESERVED) {
            vocab.ids.insert(tok.to_string(), vocab.tokens.len());
            vocab.tokens.push(tok.to_string());
        }
        Ok(vocab)
    }

    /// Builds from segmented documents (the `END` markers are ignored).
    pub fn from_documents(docs: &[Vec<Vec<String>>], max_size: usize, min_freq: usize) -> Result<Self> {
        Self::build(docs.iter().flatten().flatten().map(String::as_str), max_size, min_freq)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::Index {
            context: "vocabulary".into(),
            index: id,
            size: self.tokens.len(),
        })
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// Maps a segmented document to ids.
    pub fn encode(&self, sentences: &[Vec<String>]) -> Result<Paragraph> {
        Paragraph::new(
            sentences
                .iter()
                .map(|s| s.iter().map(|t| self.id(t)).collect())
                .collect(),
        )
    }

    /// Surface text of token ids, dropping `END` and `PAD`.
    pub fn decode_words(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .filter(|&&i| i != END && i != PAD)
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or(UNK_TOKEN))
            .collect()
    }

    /// Sentences joined by a single space, `END` markers dropped.
    pub fn render(&self, sentences: &[Vec<usize>]) -> String {
        sentences
            .iter()
            .map(|s| self.decode_words(s).join(" "))
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>id` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: &str| Error::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                message: message.to_string(),
            };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| parse_err("expected token<TAB>id"))?;
            let id: usize = id.trim().parse().map_err(|_| parse_err("id is not an integer"))?;
            pairs.push((tok.to_string(), id));
        }
        pairs.sort_by_key(|p| p.1);
        let mut tokens = Vec::with_capacity(pairs.len());
        for (expected, (tok, id)) in pairs.into_iter().enumerate() {
            if id != expected {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!("ids are not contiguous: missing {expected}"),
                });
            }
            tokens.push(tok);
        }
        if tokens.len() < NUM_RESERVED || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN || tokens[END] != END_TOKEN {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "reserved tokens PAD, UNK, END must occupy ids 0-2".into(),
            });
        }
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocabulary { tokens, ids })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, path)
    }
}

/// A document as sentences of token ids, each terminated by `END`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Paragraph {
    sentences: Vec<Vec<usize>>,
}

impl Paragraph {
    pub fn new(sentences: Vec<Vec<usize>>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Empty("paragraph with no sentences".into()));
        }
        for s in &sentences {
            if s.last() != Some(&END) {
                return Err(Error::Precondition("every sentence must end with END".into()));
            }
            if s.contains(&PAD) {
                return Err(Error::Precondition("PAD inside a sentence".into()));
            }
        }
        Ok(Paragraph { sentences })
    }

    pub fn sentences(&self) -> &[Vec<usize>] {
        &self.sentences
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    /// Tokens including `END` markers.
    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// All sentences concatenated, `END` markers kept.
    pub fn flattened(&self) -> Vec<usize> {
        self.sentences.concat()
    }

    /// Drops sentences beyond `max_sentences`; a sentence longer than
    /// `max_words` keeps its first `max_words - 1` tokens followed by `END`.
    pub fn truncated(&self, max_sentences: usize, max_words: usize, report: &mut IngestReport) -> Paragraph {
        let keep = self.sentences.len().min(max_sentences.max(1));
        report.sentences_dropped += self.sentences.len() - keep;
        let sentences = self.sentences[..keep]
            .iter()
            .map(|s| {
                if s.len() > max_words.max(1) {
                    report.tokens_truncated += s.len() - max_words.max(1);
                    let mut t = s[..max_words.max(1) - 1].to_vec();
                    t.push(END);
                    t
                } else {
                    s.clone()
                }
            })
            .collect();
        Paragraph { sentences }
    }
}

/// Counts of silently repaired or skipped input.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub lines_read: usize,
    pub lines_skipped: usize,
    pub sentences_dropped: usize,
    pub tokens_truncated: usize,
    pub warnings: Vec<String>,
}

impl IngestReport {
    fn skip(&mut self, line: usize, why: &str) {
        self.lines_skipped += 1;
        self.warnings.push(format!("line {line}: skipped ({why})"));
    }
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in &self.warnings {
            writeln!(f, "warning\t{w}")?;
        }
        writeln!(f, "lines_read\t{}", self.lines_read)?;
        writeln!(f, "lines_skipped\t{}", self.lines_skipped)?;
        writeln!(f, "sentences_dropped\t{}", self.sentences_dropped)?;
        write!(f, "tokens_truncated\t{}", self.tokens_truncated)
    }
}

/// Padded `[B, M_max, N_max]` token cube with mask and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub max_sentences: usize,
    pub max_words: usize,
    pub tokens: Vec<usize>,
    pub mask: Vec<u8>,
    pub sentence_counts: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn token(&self, b: usize, m: usize, n: usize) -> usize {
        self.tokens[(b * self.max_sentences + m) * self.max_words + n]
    }

    pub fn length(&self, b: usize, m: usize) -> usize {
        self.lengths[b * self.max_sentences + m]
    }

    /// The real (unpadded) content of row `b`.
    pub fn row(&self, b: usize) -> Paragraph {
        let sentences = (0..self.sentence_counts[b])
            .map(|m| (0..self.length(b, m)).map(|n| self.token(b, m, n)).collect())
            .collect();
        Paragraph { sentences }
    }
}

/// Pads already-encoded paragraphs, truncating to the caps.
pub fn pad_batch(paragraphs: &[Paragraph], max_sentences: usize, max_words: usize, report: &mut IngestReport) -> Result<PaddedBatch> {
    if max_sentences == 0 || max_words == 0 {
        return Err(Error::Config("batch caps must be positive".into()));
    }
    let b = paragraphs.len();
    let cube = max_sentences * max_words;
    let mut out = PaddedBatch {
        batch: b,
        max_sentences,
        max_words,
        tokens: vec![PAD; b * cube],
        mask: vec![0; b * cube],
        sentence_counts: Vec::with_capacity(b),
        lengths: vec![0; b * max_sentences],
    };
    for (i, p) in paragraphs.iter().enumerate() {
        let t = p.truncated(max_sentences, max_words, report);
        out.sentence_counts.push(t.num_sentences());
        for (m, s) in t.sentences.iter().enumerate() {
            out.lengths[i * max_sentences + m] = s.len();
            for (n, &tok) in s.iter().enumerate() {
                let k = (i * max_sentences + m) * max_words + n;
                out.tokens[k] = tok;
                out.mask[k] = 1;
            }
        }
    }
    Ok(out)
}

/// Encodes segmented documents with `vocab` and pads them.
pub fn encode_batch(
    documents: &[Vec<Vec<String>>],
    vocab: &Vocabulary,
    max_sentences: usize,
    max_words: usize,
    report: &mut IngestReport,
) -> Result<PaddedBatch> {
    let paragraphs = documents.iter().map(|d| vocab.encode(d)).collect::<Result<Vec<_>>>()?;
    pad_batch(&paragraphs, max_sentences, max_words, report)
}

/// A title (one sentence) paired with its abstract.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedText {
    pub condition: Vec<Vec<String>>,
    pub target: Vec<Vec<String>>,
}

/// Plain corpus text: one segmented document per nonempty line.
pub fn parse_corpus(text: &str, report: &mut IngestReport) -> Result<Vec<Vec<Vec<String>>>> {
    let mut docs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        report.lines_read += 1;
        match segment(line) {
            Ok(d) => docs.push(d),
            Err(_) => report.skip(ln + 1, "no tokens"),
        }
    }
    if docs.is_empty() {
        return Err(Error::Empty("corpus has no documents".into()));
    }
    Ok(docs)
}

/// Labeled corpus: `label<TAB>text` lines; lines without a tab get no label.
pub fn parse_labeled(text: &str, report: &mut IngestReport) -> Result<Vec<(Option<String>, Vec<Vec<String>>)>> {
    let mut docs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        report.lines_read += 1;
        let (label, body) = match line.split_once('\t') {
            Some((l, b)) => (Some(l.trim().to_string()), b),
            None => (None, line),
        };
        match segment(body) {
            Ok(d) => docs.push((label, d)),
            Err(_) => report.skip(ln + 1, "no tokens"),
        }
    }
    if docs.is_empty() {
        return Err(Error::Empty("labeled corpus has no documents".into()));
    }
    Ok(docs)
}

/// `title<TAB>abstract` lines. The title is a single sentence.
pub fn parse_paired(text: &str, report: &mut IngestReport) -> Result<Vec<PairedText>> {
    let mut pairs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        report.lines_read += 1;
        let Some((title, abs)) = line.split_once('\t') else {
            report.skip(ln + 1, "no tab separator");
            continue;
        };
        let mut title: Vec<String> = title.split_whitespace().map(str::to_string).collect();
        if title.is_empty() {
            report.skip(ln + 1, "empty title");
            continue;
        }
        let Ok(target) = segment(abs) else {
            report.skip(ln + 1, "empty abstract");
            continue;
        };
        title.push(END_TOKEN.to_string());
        pairs.push(PairedText {
            condition: vec![title],
            target,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Empty("paired corpus has no valid lines".into()));
    }
    Ok(pairs)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: &Path, report: &mut IngestReport) -> Result<Vec<Vec<Vec<String>>>> {
    parse_corpus(&read(path)?, report)
}

pub fn load_labeled(path: &Path, report: &mut IngestReport) -> Result<Vec<(Option<String>, Vec<Vec<String>>)>> {
    parse_labeled(&read(path)?, report)
}

pub fn load_paired(path: &Path, report: &mut IngestReport) -> Result<Vec<PairedText>> {
    parse_paired(&read(path)?, report)
}

/// Median sentence count (lower median for even sizes).
pub fn median_sentence_count(paragraphs: &[Paragraph]) -> usize {
    if paragraphs.is_empty() {
        return 1;
    }
    let mut counts: Vec<usize> = paragraphs.iter().map(Paragraph::num_sentences).collect();
    counts.sort_unstable();
    counts[(counts.len() - 1) / 2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn segment_examples() {
        assert_eq!(
            segment("good food . bad service .").unwrap(),
            vec![words("good food . END"), words("bad service . END")]
        );
        assert_eq!(segment("hello").unwrap(), vec![words("hello END")]);
        let lens: Vec<_> = segment("a . b ! c").unwrap().iter().map(Vec::len).collect();
        assert_eq!(lens, [3, 3, 2]);
        assert!(segment("   ").is_err());
    }

    #[test]
    fn vocab_examples() {
        let v = Vocabulary::build("a a b".split(' '), 10, 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.token(PAD).unwrap(), "PAD");

        let v = Vocabulary::build("a a b".split(' '), 10, 2).unwrap();
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), UNK);

        let v = Vocabulary::build("a a b".split(' '), 4, 1).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), 3);

        assert!(Vocabulary::build(std::iter::empty(), 10, 1).is_err());
        assert!(Vocabulary::build("a".split(' '), 3, 1).is_err());
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let v = Vocabulary::build("z y x y z x".split(' '), 10, 1).unwrap();
        assert_eq!((v.id("x"), v.id("y"), v.id("z")), (3, 4, 5));
    }

    #[test]
    fn vocab_tsv_roundtrip() {
        let v = Vocabulary::build("the cat sat on the mat".split(' '), 100, 1).unwrap();
        let back = Vocabulary::from_tsv(&v.to_tsv(), Path::new("mem")).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_tsv("a\t0\n", Path::new("mem")).is_err());
    }

    #[test]
    fn encode_batch_padding_and_truncation() {
        let v = Vocabulary::build("hi w".split(' '), 10, 1).unwrap();
        let mut rep = IngestReport::default();
        let b = encode_batch(&[vec![words("hi END")]], &v, 2, 4, &mut rep).unwrap();
        let hi = v.id("hi");
        assert_eq!(&b.tokens[..8], &[hi, END, PAD, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(b.sentence_counts, [1]);
        assert_eq!(&b.mask[..4], &[1, 1, 0, 0]);

        let long = vec![words("w w w w w w w w w w END")];
        let b = encode_batch(&[long], &v, 1, 4, &mut rep).unwrap();
        let w = v.id("w");
        assert_eq!(b.tokens, [w, w, w, END]);
        assert_eq!(rep.tokens_truncated, 7);

        let docs = vec![vec![words("hi END")], vec![words("hi END"), words("w END"), words("hi w END")]];
        let b = encode_batch(&docs, &v, 3, 5, &mut rep).unwrap();
        assert_eq!(b.sentence_counts, [1, 3]);
        assert_eq!(b.row(1).sentences()[2], vec![hi, w, END]);
    }

    #[test]
    fn paired_examples() {
        let mut rep = IngestReport::default();
        let p = parse_paired("a model\tit works . it scales .\nno tab here\ntitle\t \n", &mut rep).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].condition[0].len(), 3);
        assert_eq!(p[0].target.len(), 2);
        assert_eq!(rep.lines_skipped, 2);
        assert!(parse_paired("nothing valid\n", &mut IngestReport::default()).is_err());
    }

    #[test]
    fn paragraph_invariants() {
        assert!(Paragraph::new(vec![]).is_err());
        assert!(Paragraph::new(vec![vec![5]]).is_err());
        assert!(Paragraph::new(vec![vec![PAD, END]]).is_err());
        assert!(Paragraph::new(vec![vec![END]]).is_ok());
    }

    proptest! {
        #[test]
        fn segment_preserves_tokens(toks in proptest::collection::vec(prop_oneof![Just(".".to_string()), Just("!".to_string()), "[a-e]{1,3}"], 1..40)) {
            let line = toks.join(" ");
            let sents = segment(&line).unwrap();
            prop_assert!(sents.iter().all(|s| s.len() >= 2 && s.last().unwrap() == END_TOKEN));
            let rejoined: Vec<String> = sents.iter().flat_map(|s| s[..s.len() - 1].iter().cloned()).collect();
            prop_assert_eq!(rejoined, toks);
        }

        #[test]
        fn mask_matches_lengths(docs in proptest::collection::vec(proptest::collection::vec(1usize..12, 1..6), 1..5), m_max in 1usize..5, n_max in 1usize..8) {
            let paragraphs: Vec<Paragraph> = docs.iter().map(|d| {
                Paragraph::new(d.iter().map(|&len| { let mut s = vec![7; len - 1]; s.push(END); s }).collect()).unwrap()
            }).collect();
            let b = pad_batch(&paragraphs, m_max, n_max, &mut IngestReport::default()).unwrap();
            let mask_total: usize = b.mask.iter().map(|&m| m as usize).sum();
            prop_assert_eq!(mask_total, b.lengths.iter().sum::<usize>());
            for i in 0..b.batch {
                for s in b.row(i).sentences() {
                    prop_assert_eq!(*s.last().unwrap(), END);
                    prop_assert!(s.len() <= n_max);
                }
            }
        }

        #[test]
        fn vocab_roundtrips_known_tokens(toks in proptest::collection::vec("[a-h]{1,2}", 1..50)) {
            let v = Vocabulary::build(toks.iter().map(String::as_str), 10, 1).unwrap();
            for t in &toks {
                let id = v.id(t);
                let back = v.token(id).unwrap();
                if v.contains(t) { prop_assert_eq!(back, t.as_str()); } else { prop_assert_eq!(back, UNK_TOKEN); }
            }
        }
    }
}
