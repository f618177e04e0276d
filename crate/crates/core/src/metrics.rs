//! Generation metrics: corpus BLEU, self-BLEU, unique n-grams, n-gram
//! entropy, and a small CNN sentiment classifier.
//!
//! BLEU uses uniform weights over orders `1..=n`, no smoothing, clipping by
//! the maximum count in any single reference, and a brevity penalty against
//! the closest reference length (the shorter one on ties).

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{END, PAD};
use crate::ndcore::{Adam, AdamConfig, ConvBank, Embedding, Gradients, Graph, Linear, ParamStore};
use crate::{Error, Result};

fn ngram_counts<T: Eq + Hash>(seq: &[T], k: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if k > 0 && seq.len() >= k {
        for w in seq.windows(k) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Closest length to `c` in `sorted`, preferring the shorter on ties.
fn closest_length(sorted: &[usize], c: usize) -> usize {
    let i = sorted.partition_point(|&l| l < c);
    let above = sorted.get(i).copied();
    let below = i.checked_sub(1).map(|j| sorted[j]);
    match (below, above) {
        (Some(b), Some(a)) => {
            if a - c < c - b {
                a
            } else {
                b
            }
        }
        (Some(b), None) => b,
        (None, Some(a)) => a,
        (None, None) => c,
    }
}

fn bleu_from_parts(matches: &[usize], totals: &[usize], c: usize, r: usize) -> f64 {
    let mut log_sum = 0.0;
    for (&m, &t) in matches.iter().zip(totals) {
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = (1.0 - r as f64 / c as f64).min(0.0).exp();
    bp * (log_sum / matches.len() as f64).exp()
}

/// Reference statistics reused across many candidates.
#[derive(Debug, Clone)]
pub struct BleuReferences<'a, T> {
    n: usize,
    /// Per order, the maximum count of each k-gram over single references.
    max_counts: Vec<HashMap<&'a [T], usize>>,
    lengths: Vec<usize>,
}

impl<'a, T: Eq + Hash + Sync> BleuReferences<'a, T> {
    pub fn new(references: &'a [Vec<T>], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Precondition("BLEU order must be >= 1".into()));
        }
        if references.is_empty() {
            return Err(Error::Empty("BLEU reference set".into()));
        }
        let mut max_counts = vec![HashMap::new(); n];
        for r in references {
            for (k, table) in max_counts.iter_mut().enumerate() {
                for (g, c) in ngram_counts(r, k + 1) {
                    let e = table.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
        }
        let mut lengths: Vec<usize> = references.iter().map(Vec::len).collect();
        lengths.sort_unstable();
        Ok(BleuReferences { n, max_counts, lengths })
    }

    pub fn score(&self, candidate: &[T]) -> Result<f64> {
        if candidate.is_empty() {
            return Err(Error::Precondition("BLEU candidate is empty".into()));
        }
        let mut matches = Vec::with_capacity(self.n);
        let mut totals = Vec::with_capacity(self.n);
        for (k, table) in self.max_counts.iter().enumerate() {
            let counts = ngram_counts(candidate, k + 1);
            matches.push(counts.iter().map(|(g, &c)| c.min(table.get(g).copied().unwrap_or(0))).sum());
            totals.push(counts.values().sum());
        }
        let r = closest_length(&self.lengths, candidate.len());
        Ok(bleu_from_parts(&matches, &totals, candidate.len(), r))
    }
}

/// BLEU-n of one candidate against a pooled reference set.
pub fn bleu_n<T: Eq + Hash + Sync>(candidate: &[T], references: &[Vec<T>], n: usize) -> Result<f64> {
    BleuReferences::new(references, n)?.score(candidate)
}

/// Mean BLEU-n of every sample against the whole reference set.
pub fn corpus_bleu<T: Eq + Hash + Sync>(samples: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("BLEU sample set".into()));
    }
    let refs = BleuReferences::new(references, n)?;
    let scores = samples.par_iter().map(|s| refs.score(s)).collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Top-two single-sample counts of one n-gram, for leave-one-out clipping.
#[derive(Debug, Clone, Copy, Default)]
struct TopTwo {
    best: usize,
    owner: usize,
    second: usize,
}

impl TopTwo {
    fn push(&mut self, count: usize, owner: usize) {
        if count > self.best {
            self.second = self.best;
            self.best = count;
            self.owner = owner;
        } else if count > self.second {
            self.second = count;
        }
    }

    fn without(&self, owner: usize) -> usize {
        if self.owner == owner {
            self.second
        } else {
            self.best
        }
    }
}

/// Mean BLEU-n of every sample against all the other samples.
pub fn self_bleu<T: Eq + Hash + Sync>(samples: &[Vec<T>], n: usize) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Precondition(format!("self-BLEU needs at least 2 samples, got {}", samples.len())));
    }
    if n == 0 {
        return Err(Error::Precondition("BLEU order must be >= 1".into()));
    }
    let mut tables: Vec<HashMap<&[T], TopTwo>> = vec![HashMap::new(); n];
    for (i, s) in samples.iter().enumerate() {
        for (k, table) in tables.iter_mut().enumerate() {
            for (g, c) in ngram_counts(s, k + 1) {
                table.entry(g).or_default().push(c, i);
            }
        }
    }
    let mut lengths: Vec<usize> = samples.iter().map(Vec::len).collect();
    lengths.sort_unstable();
    let scores = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            if s.is_empty() {
                return Err(Error::Precondition("BLEU candidate is empty".into()));
            }
            let mut matches = Vec::with_capacity(n);
            let mut totals = Vec::with_capacity(n);
            for (k, table) in tables.iter().enumerate() {
                let counts = ngram_counts(s, k + 1);
                matches.push(counts.iter().map(|(g, &c)| c.min(table[g].without(i))).sum());
                totals.push(counts.values().sum());
            }
            let mut others = lengths.clone();
            let pos = others.binary_search(&s.len()).expect("own length is present");
            others.remove(pos);
            let r = closest_length(&others, s.len());
            Ok(bleu_from_parts(&matches, &totals, s.len(), r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn pooled_ngrams<T: Eq + Hash>(samples: &[Vec<T>], n: usize) -> Result<(HashMap<&[T], usize>, usize)> {
    if n == 0 {
        return Err(Error::Precondition("n-gram order must be >= 1".into()));
    }
    let mut pooled: HashMap<&[T], usize> = HashMap::new();
    let mut total = 0;
    for s in samples {
        for (g, c) in ngram_counts(s, n) {
            *pooled.entry(g).or_insert(0) += c;
            total += c;
        }
    }
    if total == 0 {
        return Err(Error::Empty(format!("no sample has {n} or more tokens")));
    }
    Ok((pooled, total))
}

/// Percentage of distinct n-grams among all n-gram occurrences.
pub fn unique_ngrams<T: Eq + Hash>(samples: &[Vec<T>], n: usize) -> Result<f64> {
    let (pooled, total) = pooled_ngrams(samples, n)?;
    Ok(100.0 * pooled.len() as f64 / total as f64)
}

/// Entropy in nats of the pooled empirical n-gram distribution.
pub fn ngram_entropy<T: Eq + Hash>(samples: &[Vec<T>], n: usize) -> Result<f64> {
    let (pooled, total) = pooled_ngrams(samples, n)?;
    let mut counts: Vec<usize> = pooled.into_values().collect();
    counts.sort_unstable();
    let t = total as f64;
    let h: f64 = counts.iter().map(|&c| c as f64 / t).map(|p| -p * p.ln()).sum();
    Ok(h.max(0.0))
}

/// Ordered `name -> value` pairs, printed as `name<TAB>value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in &self.entries {
            writeln!(f, "{name}\t{v:.6}")?;
        }
        Ok(())
    }
}

/// `B-2..4` against `references` when given, then `sB-2..4`, `uniq-2..4`
/// and `Etp-2`. Orders no sample is long enough for are skipped.
pub fn generation_report<T: Eq + Hash + Sync>(samples: &[Vec<T>], references: Option<&[Vec<T>]>) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set".into()));
    }
    let mut r = MetricReport::default();
    if let Some(refs) = references {
        for n in 2..=4 {
            r.push(format!("B-{n}"), corpus_bleu(samples, refs, n)?);
        }
    }
    if samples.len() >= 2 {
        for n in 2..=4 {
            r.push(format!("sB-{n}"), self_bleu(samples, n)?);
        }
    }
    for n in 2..=4 {
        match unique_ngrams(samples, n) {
            Ok(u) => r.push(format!("uniq-{n}"), u),
            Err(Error::Empty(_)) => {}
            Err(e) => return Err(e),
        }
    }
    match ngram_entropy(samples, 2) {
        Ok(h) => r.push("Etp-2", h),
        Err(Error::Empty(_)) => {}
        Err(e) => return Err(e),
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub d_emb: usize,
    pub widths: Vec<usize>,
    pub filters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            d_emb: 32,
            widths: vec![3, 4, 5],
            filters: 32,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// One labeled text: a class index and its token ids.
pub type Labeled = (usize, Vec<usize>);

/// Sentence CNN over the whole text followed by a linear class head.
#[derive(Debug, Clone)]
pub struct SentimentClassifier {
    pub store: ParamStore<f64>,
    embed: Embedding,
    cnn: ConvBank,
    head: Linear,
    classes: usize,
}

fn content(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| t != END && t != PAD).collect()
}

impl SentimentClassifier {
    fn logits(&self, g: &mut Graph<'_, f64>, tokens: &[usize]) -> Result<crate::ndcore::NodeId> {
        let toks = content(tokens);
        if toks.is_empty() {
            return Err(Error::Precondition("cannot classify an empty text".into()));
        }
        let rows = toks.iter().map(|&t| self.embed.forward(g, t)).collect::<Result<Vec<_>>>()?;
        let f = self.cnn.forward(g, &rows)?;
        self.head.forward(g, f)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Most probable class; ties go to the lowest index.
    pub fn classify(&self, tokens: &[usize]) -> Result<usize> {
        let mut g = Graph::new(&self.store);
        let l = self.logits(&mut g, tokens)?;
        let v = g.value(l);
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn accuracy(&self, data: &[Labeled]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("accuracy on an empty set".into()));
        }
        let hits = data
            .par_iter()
            .map(|(y, x)| self.classify(x).map(|p| usize::from(p == *y)))
            .collect::<Result<Vec<_>>>()?;
        Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
    }
}

/// Trains a classifier with cross-entropy and returns it with its accuracy on `test`.
pub fn sentiment_classifier(train: &[Labeled], test: &[Labeled], vocab: usize, cfg: &ClassifierConfig) -> Result<(SentimentClassifier, f64)> {
    let classes = train.iter().map(|(y, _)| y + 1).max().unwrap_or(0);
    let mut present = vec![false; classes];
    train.iter().for_each(|(y, _)| present[*y] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Precondition("classifier training set needs at least two labels".into()));
    }
    if test.iter().any(|(y, _)| *y >= classes) {
        return Err(Error::Precondition("test set has a label unseen in training".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let embed = Embedding::register(&mut store, "cls.embed", vocab, cfg.d_emb, &mut rng)?;
    let cnn = ConvBank::register(&mut store, "cls.cnn", cfg.d_emb, &cfg.widths, cfg.filters, &mut rng)?;
    let head = Linear::register(&mut store, "cls.out", cnn.d_out, classes, &mut rng)?;
    let mut clf = SentimentClassifier {
        store,
        embed,
        cnn,
        head,
        classes,
    };
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let inv = 1.0 / chunk.len() as f64;
            let per = chunk
                .par_iter()
                .map(|&i| {
                    let (y, x) = &train[i];
                    let mut g = Graph::new(&clf.store);
                    let l = clf.logits(&mut g, x)?;
                    let loss = g.softmax_xent(l, *y)?;
                    let loss = g.scale(loss, inv);
                    g.backward(loss)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Gradients::empty(clf.store.len());
            per.iter().for_each(|g| grads.merge(g));
            clf.store.zero_grad();
            grads.accumulate_into(&mut clf.store);
            clf.store.clip_grad_norm(5.0);
            adam.update(&mut clf.store)?;
        }
    }
    let acc = if test.is_empty() { f64::NAN } else { clf.accuracy(test)? };
    Ok((clf, acc))
}
