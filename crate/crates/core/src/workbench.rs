//! Experiments on a trained model: sampling, interpolation, attribute
//! arithmetic, conditional generation and latent export.
//!
//! Everything here runs on frozen 64-bit parameters. Latent codes are drawn
//! sequentially from one seeded generator and decoded in parallel, so output
//! depends only on the checkpoint, the options and the seed.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Paragraph, Vocabulary};
use crate::decoder::DecodedParagraph;
use crate::latent::{sample, standard_normal};
use crate::trainer::{LoadedModel, Trainer};
use crate::ndcore::Real;
use crate::{Error, Result};

pub const DEFAULT_SAMPLE_COUNT: usize = 1000;

/// Generation caps: sentences per paragraph and words per sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenOptions {
    pub sentences: usize,
    pub max_words: usize,
}

impl GenOptions {
    /// The checkpoint's defaults: the training-corpus median sentence count
    /// and the training word cap.
    pub fn for_model(m: &LoadedModel) -> Self {
        let sentences = if m.config.gen_sentences > 0 { m.config.gen_sentences } else { m.config.max_sentences };
        GenOptions {
            sentences,
            max_words: m.config.max_words,
        }
    }
}

/// How a code is taken from a posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeMode {
    Mean,
    Sample { seed: u64 },
}

impl LoadedModel {
    /// A 64-bit copy of a trainer's model.
    pub fn from_trainer<T: Real>(t: &Trainer<T>, vocab: Option<Vocabulary>) -> Self {
        LoadedModel {
            config: t.config.clone(),
            model: t.model.clone(),
            store: t.state.store.cast(),
            vocab,
        }
    }

    fn require_latent(&self) -> Result<()> {
        if self.model.variant.has_latent() {
            Ok(())
        } else {
            Err(Error::Usage(format!("{} has no latent code", self.model.variant)))
        }
    }

    pub fn decode(&self, z: &[f64], opts: GenOptions) -> Result<DecodedParagraph> {
        self.model.decode(&self.store, Some(z), opts.sentences, opts.max_words)
    }

    /// Text of a decoded paragraph, sentences joined by single spaces.
    pub fn render(&self, p: &DecodedParagraph) -> Result<String> {
        Ok(self.vocab()?.render(&p.sentences))
    }

    /// Bottom-latent posterior mean (or one sample) for a document.
    pub fn code(&self, doc: &Paragraph, mode: CodeMode) -> Result<Vec<f64>> {
        self.require_latent()?;
        let q = self.model.bottom_posterior(&self.store, doc)?;
        match mode {
            CodeMode::Mean => Ok(q.mean),
            CodeMode::Sample { seed } => {
                let eps = standard_normal(&mut ChaCha8Rng::seed_from_u64(seed), q.dim());
                sample(&q, &eps)
            }
        }
    }

    /// One draw of the bottom latent from the prior: `z ~ N(0, I)`, or
    /// `z2 ~ N(0, I)` then `z1 ~ p(z1 | z2)` for the two-level model.
    pub fn prior_sample(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.require_latent()?;
        if self.model.variant.is_two_level() {
            let z2 = standard_normal(rng, self.config.d_z2);
            let p1 = self.model.prior_ref()?.evaluate(&self.store, &z2)?;
            let eps = standard_normal(rng, self.config.d_z);
            sample(&p1, &eps)
        } else {
            Ok(standard_normal(rng, self.config.d_z))
        }
    }
}

/// Decodes `k` prior samples.
pub fn sample_unconditional(m: &LoadedModel, k: usize, seed: u64, opts: GenOptions) -> Result<Vec<DecodedParagraph>> {
    m.require_latent()?;
    if k == 0 {
        return Err(Error::Precondition("sample count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = (0..k).map(|_| m.prior_sample(&mut rng)).collect::<Result<Vec<_>>>()?;
    codes.par_iter().map(|z| m.decode(z, opts)).collect()
}

/// The `k + 2` points `A + (i / (k + 1)) (B - A)`. The endpoints are `A`
/// and `B` themselves rather than their rounded affine images.
pub fn interpolation_points(a: &[f64], b: &[f64], k: usize) -> Result<Vec<Vec<f64>>> {
    if a.len() != b.len() {
        return Err(Error::dim("interpolation endpoints", a.len(), b.len()));
    }
    if k == 0 {
        return Err(Error::Precondition("interpolation needs at least one intermediate step".into()));
    }
    let mut points: Vec<Vec<f64>> = (1..=k)
        .map(|i| {
            let t = i as f64 / (k + 1) as f64;
            a.iter().zip(b).map(|(&x, &y)| x + t * (y - x)).collect()
        })
        .collect();
    points.insert(0, a.to_vec());
    points.push(b.to_vec());
    Ok(points)
}

/// Decodes points on the segment between prior samples drawn from `seed_a` and `seed_b`.
pub fn interpolate(m: &LoadedModel, seed_a: u64, seed_b: u64, k: usize, opts: GenOptions) -> Result<Vec<(Vec<f64>, DecodedParagraph)>> {
    let a = m.prior_sample(&mut ChaCha8Rng::seed_from_u64(seed_a))?;
    let b = m.prior_sample(&mut ChaCha8Rng::seed_from_u64(seed_b))?;
    let points = interpolation_points(&a, &b, k)?;
    points
        .into_par_iter()
        .map(|z| {
            let d = m.decode(&z, opts)?;
            Ok((z, d))
        })
        .collect()
}

fn mean_code(m: &LoadedModel, docs: &[Paragraph], stochastic: Option<u64>, what: &str) -> Result<Vec<f64>> {
    if docs.is_empty() {
        return Err(Error::Empty(format!("{what} corpus")));
    }
    let codes = docs
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mode = match stochastic {
                Some(seed) => CodeMode::Sample {
                    seed: seed.wrapping_add(i as u64),
                },
                None => CodeMode::Mean,
            };
            m.code(d, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; codes[0].len()];
    for c in &codes {
        mean.iter_mut().zip(c).for_each(|(a, &x)| *a += x);
    }
    mean.iter_mut().for_each(|a| *a /= codes.len() as f64);
    Ok(mean)
}

/// `mean(positive codes) - mean(negative codes)`. Codes are posterior means,
/// or one posterior sample per document when `stochastic` carries a seed.
pub fn attribute_vector(m: &LoadedModel, positive: &[Paragraph], negative: &[Paragraph], stochastic: Option<u64>) -> Result<Vec<f64>> {
    let p = mean_code(m, positive, stochastic, "positive")?;
    let n = mean_code(m, negative, stochastic.map(|s| s ^ 0x9e37_79b9_7f4a_7c15), "negative")?;
    Ok(p.iter().zip(&n).map(|(a, b)| a - b).collect())
}

/// Posterior-mean code of `doc` shifted by `attribute`, and its decoding.
pub fn attribute_transfer(m: &LoadedModel, doc: &Paragraph, attribute: &[f64], opts: GenOptions) -> Result<(Vec<f64>, DecodedParagraph)> {
    let z = m.code(doc, CodeMode::Mean)?;
    if z.len() != attribute.len() {
        return Err(Error::dim("attribute vector", z.len(), attribute.len()));
    }
    let shifted: Vec<f64> = z.iter().zip(attribute).map(|(a, b)| a + b).collect();
    let out = m.decode(&shifted, opts)?;
    Ok((shifted, out))
}

/// Decoding of a document's own posterior mean.
pub fn reconstruct(m: &LoadedModel, doc: &Paragraph, opts: GenOptions) -> Result<DecodedParagraph> {
    let z = m.code(doc, CodeMode::Mean)?;
    m.decode(&z, opts)
}

/// Generates a target text from a condition with a paired checkpoint.
pub fn conditional_generate(m: &LoadedModel, title: &Paragraph, mode: CodeMode, opts: GenOptions) -> Result<DecodedParagraph> {
    if !m.config.paired {
        return Err(Error::Usage("conditional generation needs a checkpoint trained on paired data".into()));
    }
    let z = m.code(title, mode)?;
    m.decode(&z, opts)
}

/// One CSV row per document: the label (or nothing), then the posterior
/// mean of the bottom latent.
pub fn latents_csv(m: &LoadedModel, docs: &[(Option<String>, Paragraph)]) -> Result<String> {
    let codes = docs
        .par_iter()
        .map(|(_, d)| m.code(d, CodeMode::Mean))
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::new();
    for ((label, _), code) in docs.iter().zip(&codes) {
        if let Some(l) = label {
            if l.contains([',', '"', '\n']) {
                write!(out, "\"{}\"", l.replace('"', "\"\"")).unwrap();
            } else {
                out.push_str(l);
            }
        }
        for x in code {
            write!(out, ",{x:?}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_latents(m: &LoadedModel, docs: &[(Option<String>, Paragraph)], out: &Path) -> Result<()> {
    let text = latents_csv(m, docs)?;
    std::fs::write(out, text).map_err(|e| Error::io(out, e))
}
