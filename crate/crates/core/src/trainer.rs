//! Model assembly, the training loop and evaluation.
//!
//! A [`Model`] is a set of parameter handles for one of the five variants.
//! Parameters live in a [`ParamStore`]; each document gets its own graph,
//! and per-document gradients are reduced in document order so results do
//! not depend on thread scheduling.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{median_sentence_count, Paragraph, Vocabulary, DEFAULT_MAX_SENTENCES, DEFAULT_MAX_WORDS, DEFAULT_VOCAB_SIZE};
use crate::decoder::{DecodedParagraph, DecoderConfig, FlatDecoder, HierarchicalDecoder, DEFAULT_D_EMB, DEFAULT_D_PLAN, DEFAULT_D_WORD};
use crate::encoder::{Encoder, EncoderConfig};
use crate::latent::{
    joint_kl, kl_standard_node, log_density, sample_node, standard_normal, GaussianParams, PriorNetwork, DEFAULT_PRIOR_HIDDEN,
};
use crate::ndcore::{read_checkpoint, write_checkpoint, Adam, AdamConfig, Gradients, Graph, NodeId, ParamStore, Real};
use crate::{Error, Result};

pub const DEFAULT_D_LATENT: usize = 32;
pub const DEFAULT_ANNEAL_END: u64 = 10_000;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;
pub const DEFAULT_HELDOUT_FRACTION: f64 = 0.1;

const EVAL_SEED_OFFSET: u64 = 0x5eed_e7a1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    FlatLm,
    MlLm,
    FlatVae,
    MlVaeS,
    MlVaeD,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::FlatLm, Variant::MlLm, Variant::FlatVae, Variant::MlVaeS, Variant::MlVaeD];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::FlatLm => "flat-LM",
            Variant::MlLm => "ml-LM",
            Variant::FlatVae => "flat-VAE",
            Variant::MlVaeS => "ml-VAE-S",
            Variant::MlVaeD => "ml-VAE-D",
        }
    }

    /// Whether the variant has a latent code (and hence a KL term).
    pub fn has_latent(self) -> bool {
        matches!(self, Variant::FlatVae | Variant::MlVaeS | Variant::MlVaeD)
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(self, Variant::MlLm | Variant::MlVaeS | Variant::MlVaeD)
    }

    pub fn is_two_level(self) -> bool {
        self == Variant::MlVaeD
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected flat-LM, ml-LM, flat-VAE, ml-VAE-S or ml-VAE-D)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?} (expected f32 or f64)"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Everything needed to rebuild a model and rerun its training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_plan: usize,
    pub d_word: usize,
    /// Latent size of `z` (single-latent variants) or `z1`.
    pub d_z: usize,
    pub d_z2: usize,
    pub prior_hidden: usize,
    /// Hidden width of the encoder's two-layer `z2` MLP.
    pub top_hidden: usize,
    pub sentence_widths: Vec<usize>,
    pub sentence_filters: usize,
    pub paragraph_widths: Vec<usize>,
    pub paragraph_filters: usize,
    pub anneal_start: u64,
    pub anneal_end: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub precision: Precision,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub log_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub max_sentences: usize,
    pub max_words: usize,
    /// Sentences generated per paragraph; 0 until set from the training corpus.
    pub gen_sentences: usize,
    pub heldout_fraction: f64,
    /// Encoder reads a condition text, decoder reconstructs a paired target.
    pub paired: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::MlVaeD,
            vocab_size: DEFAULT_VOCAB_SIZE,
            d_emb: DEFAULT_D_EMB,
            d_plan: DEFAULT_D_PLAN,
            d_word: DEFAULT_D_WORD,
            d_z: DEFAULT_D_LATENT,
            d_z2: DEFAULT_D_LATENT,
            prior_hidden: DEFAULT_PRIOR_HIDDEN,
            top_hidden: DEFAULT_PRIOR_HIDDEN,
            sentence_widths: vec![3, 4, 5],
            sentence_filters: 64,
            paragraph_widths: vec![2, 3],
            paragraph_filters: 128,
            anneal_start: 0,
            anneal_end: DEFAULT_ANNEAL_END,
            batch_size: 32,
            max_steps: 20_000,
            seed: 0,
            precision: Precision::F32,
            learning_rate: AdamConfig::default().lr,
            clip_norm: DEFAULT_CLIP_NORM,
            log_every: 100,
            eval_every: 1000,
            checkpoint_every: 5000,
            max_sentences: DEFAULT_MAX_SENTENCES,
            max_words: DEFAULT_MAX_WORDS,
            gen_sentences: 0,
            heldout_fraction: DEFAULT_HELDOUT_FRACTION,
            paired: false,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_num(key, v)).collect()
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_emb", self.d_emb),
            ("d_plan", self.d_plan),
            ("d_word", self.d_word),
            ("d_z", self.d_z),
            ("d_z2", self.d_z2),
            ("prior_hidden", self.prior_hidden),
            ("top_hidden", self.top_hidden),
            ("sentence_filters", self.sentence_filters),
            ("paragraph_filters", self.paragraph_filters),
            ("batch_size", self.batch_size),
            ("max_sentences", self.max_sentences),
            ("max_words", self.max_words),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= crate::corpus::NUM_RESERVED {
            return Err(Error::Config("vocab_size must exceed the reserved tokens".into()));
        }
        if self.sentence_widths.is_empty() || self.paragraph_widths.is_empty() {
            return Err(Error::Config("CNN window lists must be nonempty".into()));
        }
        if self.sentence_widths.contains(&0) || self.paragraph_widths.contains(&0) {
            return Err(Error::Config("CNN window widths must be positive".into()));
        }
        if self.anneal_start > self.anneal_end {
            return Err(Error::Config(format!(
                "anneal_start ({}) exceeds anneal_end ({})",
                self.anneal_start, self.anneal_end
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config("heldout_fraction must lie in [0, 1)".into()));
        }
        if self.paired && !self.variant.has_latent() {
            return Err(Error::Config(format!("paired training needs an encoder; {} has none", self.variant)));
        }
        Ok(())
    }

    /// Sets one `key = value` field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "variant" => self.variant = v.parse()?,
            "vocab_size" => self.vocab_size = parse_num(key, v)?,
            "d_emb" => self.d_emb = parse_num(key, v)?,
            "d_plan" => self.d_plan = parse_num(key, v)?,
            "d_word" => self.d_word = parse_num(key, v)?,
            "d_z" => self.d_z = parse_num(key, v)?,
            "d_z2" => self.d_z2 = parse_num(key, v)?,
            "prior_hidden" => self.prior_hidden = parse_num(key, v)?,
            "top_hidden" => self.top_hidden = parse_num(key, v)?,
            "sentence_widths" => self.sentence_widths = parse_list(key, v)?,
            "sentence_filters" => self.sentence_filters = parse_num(key, v)?,
            "paragraph_widths" => self.paragraph_widths = parse_list(key, v)?,
            "paragraph_filters" => self.paragraph_filters = parse_num(key, v)?,
            "anneal_start" => self.anneal_start = parse_num(key, v)?,
            "anneal_end" => self.anneal_end = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "max_steps" => self.max_steps = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "precision" => self.precision = v.parse()?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "clip_norm" => self.clip_norm = parse_num(key, v)?,
            "log_every" => self.log_every = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "max_sentences" => self.max_sentences = parse_num(key, v)?,
            "max_words" => self.max_words = parse_num(key, v)?,
            "gen_sentences" => self.gen_sentences = parse_num(key, v)?,
            "heldout_fraction" => self.heldout_fraction = parse_num(key, v)?,
            "paired" => self.paired = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    /// Unset keys keep their defaults.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| parse_err("expected key = value".into()))?;
            cfg.set(k, v).map_err(|e| parse_err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab: self.vocab_size,
            d_emb: self.d_emb,
            sentence_widths: self.sentence_widths.clone(),
            sentence_filters: self.sentence_filters,
            paragraph_widths: self.paragraph_widths.clone(),
            paragraph_filters: self.paragraph_filters,
            d_latent: self.d_z,
            top: self.variant.is_two_level().then_some((self.top_hidden, self.d_z2)),
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            vocab: self.vocab_size,
            d_emb: self.d_emb,
            d_plan: self.d_plan,
            d_word: self.d_word,
            d_latent: self.variant.has_latent().then_some(self.d_z),
        }
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant = {}", self.variant)?;
        writeln!(f, "vocab_size = {}", self.vocab_size)?;
        writeln!(f, "d_emb = {}", self.d_emb)?;
        writeln!(f, "d_plan = {}", self.d_plan)?;
        writeln!(f, "d_word = {}", self.d_word)?;
        writeln!(f, "d_z = {}", self.d_z)?;
        writeln!(f, "d_z2 = {}", self.d_z2)?;
        writeln!(f, "prior_hidden = {}", self.prior_hidden)?;
        writeln!(f, "top_hidden = {}", self.top_hidden)?;
        writeln!(f, "sentence_widths = {}", join_list(&self.sentence_widths))?;
        writeln!(f, "sentence_filters = {}", self.sentence_filters)?;
        writeln!(f, "paragraph_widths = {}", join_list(&self.paragraph_widths))?;
        writeln!(f, "paragraph_filters = {}", self.paragraph_filters)?;
        writeln!(f, "anneal_start = {}", self.anneal_start)?;
        writeln!(f, "anneal_end = {}", self.anneal_end)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "max_steps = {}", self.max_steps)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "precision = {}", self.precision)?;
        writeln!(f, "learning_rate = {:?}", self.learning_rate)?;
        writeln!(f, "clip_norm = {:?}", self.clip_norm)?;
        writeln!(f, "log_every = {}", self.log_every)?;
        writeln!(f, "eval_every = {}", self.eval_every)?;
        writeln!(f, "checkpoint_every = {}", self.checkpoint_every)?;
        writeln!(f, "max_sentences = {}", self.max_sentences)?;
        writeln!(f, "max_words = {}", self.max_words)?;
        writeln!(f, "gen_sentences = {}", self.gen_sentences)?;
        writeln!(f, "heldout_fraction = {:?}", self.heldout_fraction)?;
        writeln!(f, "paired = {}", self.paired)
    }
}

/// KL weight: 0 before `s0`, a linear ramp to 1 at `s1`, 1 afterwards.
pub fn anneal(step: u64, s0: u64, s1: u64) -> f64 {
    if step < s0 {
        0.0
    } else if step >= s1 {
        1.0
    } else {
        (step - s0) as f64 / (s1 - s0) as f64
    }
}

/// One training document: the encoder reads `source`, the decoder
/// reconstructs `target`. They coincide except in paired mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Paragraph,
    pub target: Paragraph,
}

impl Example {
    pub fn document(p: Paragraph) -> Self {
        Example {
            source: p.clone(),
            target: p,
        }
    }

    pub fn paired(condition: Paragraph, target: Paragraph) -> Self {
        Example { source: condition, target }
    }
}

/// Standard-normal noise for one document's latent samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DocNoise {
    pub z: Vec<f64>,
    pub z2: Vec<f64>,
}

/// Per-document loss nodes.
#[derive(Debug, Clone, Copy)]
pub struct DocLoss {
    pub reconstruction: NodeId,
    pub kl: Option<NodeId>,
}

/// Parameter handles for one variant.
#[derive(Debug, Clone)]
pub struct Model {
    pub variant: Variant,
    pub encoder: Option<Encoder>,
    pub prior: Option<PriorNetwork>,
    pub hierarchical: Option<HierarchicalDecoder>,
    pub flat: Option<FlatDecoder>,
}

impl Model {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.variant;
        let encoder = if v.has_latent() { Some(Encoder::register(store, &cfg.encoder_config(), rng)?) } else { None };
        let prior = if v.is_two_level() {
            Some(PriorNetwork::register(store, cfg.d_z2, cfg.prior_hidden, cfg.d_z, rng)?)
        } else {
            None
        };
        let dcfg = cfg.decoder_config();
        let (hierarchical, flat) = if v.is_hierarchical() {
            (Some(HierarchicalDecoder::register(store, &dcfg, rng)?), None)
        } else {
            (None, Some(FlatDecoder::register(store, &dcfg, rng)?))
        };
        Ok(Model {
            variant: v,
            encoder,
            prior,
            hierarchical,
            flat,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.variant;
        let encoder = if v.has_latent() { Some(Encoder::lookup(store, &cfg.encoder_config())?) } else { None };
        let prior = if v.is_two_level() { Some(PriorNetwork::lookup(store)?) } else { None };
        let (hierarchical, flat) = if v.is_hierarchical() {
            (Some(HierarchicalDecoder::lookup(store, v.has_latent())?), None)
        } else {
            (None, Some(FlatDecoder::lookup(store, v.has_latent())?))
        };
        Ok(Model {
            variant: v,
            encoder,
            prior,
            hierarchical,
            flat,
        })
    }

    fn encoder_ref(&self) -> Result<&Encoder> {
        self.encoder
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("{} has no latent code", self.variant)))
    }

    pub fn prior_ref(&self) -> Result<&PriorNetwork> {
        self.prior
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("{} has no learned prior", self.variant)))
    }

    /// Decoder negative log-likelihood of `target` given an optional latent node.
    pub fn reconstruction<T: Real>(&self, g: &mut Graph<'_, T>, z: Option<NodeId>, target: &Paragraph) -> Result<NodeId> {
        match (&self.hierarchical, &self.flat) {
            (Some(h), _) => h.paragraph_nll(g, z, target),
            (None, Some(f)) => f.flat_nll(g, z, &target.flattened()),
            (None, None) => Err(Error::Config("model has no decoder".into())),
        }
    }

    /// Builds the reconstruction and KL nodes for one example.
    pub fn doc_loss<T: Real>(&self, g: &mut Graph<'_, T>, example: &Example, noise: &DocNoise) -> Result<DocLoss> {
        if !self.variant.has_latent() {
            let reconstruction = self.reconstruction(g, None, &example.target)?;
            return Ok(DocLoss { reconstruction, kl: None });
        }
        let enc = self.encoder_ref()?;
        let feature = enc.feature(g, &example.source)?;
        let (z, kl) = if self.variant.is_two_level() {
            let (q1, q2) = enc.posterior_pair(g, feature)?;
            let z2 = sample_node(g, q2, &noise.z2)?;
            let z1 = sample_node(g, q1, &noise.z)?;
            let jk = joint_kl(g, self.prior_ref()?, q1, q2, z2)?;
            (z1, jk.total)
        } else {
            let q = enc.posterior_single(g, feature)?;
            let z = sample_node(g, q, &noise.z)?;
            (z, kl_standard_node(g, q)?)
        };
        let reconstruction = self.reconstruction(g, Some(z), &example.target)?;
        Ok(DocLoss { reconstruction, kl: Some(kl) })
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, cfg: &ModelConfig, rng: &mut R) -> DocNoise {
        if !self.variant.has_latent() {
            return DocNoise::default();
        }
        let z = standard_normal(rng, cfg.d_z);
        let z2 = if self.variant.is_two_level() { standard_normal(rng, cfg.d_z2) } else { Vec::new() };
        DocNoise { z, z2 }
    }

    /// Posterior over the latent the decoder reads (`z` or `z1`).
    pub fn bottom_posterior<T: Real>(&self, store: &ParamStore<T>, source: &Paragraph) -> Result<GaussianParams> {
        let enc = self.encoder_ref()?;
        let mut g = Graph::new(store);
        let q = enc.bottom_posterior(&mut g, source)?;
        Ok(q.values(&g))
    }

    /// Greedy decoding from a latent value (`None` for the language models).
    pub fn decode<T: Real>(&self, store: &ParamStore<T>, z: Option<&[f64]>, max_sentences: usize, max_words: usize) -> Result<DecodedParagraph> {
        if self.variant.has_latent() != z.is_some() {
            return Err(Error::Usage(format!(
                "{} {} a latent code for decoding",
                self.variant,
                if self.variant.has_latent() { "needs" } else { "takes no" }
            )));
        }
        match (&self.hierarchical, &self.flat) {
            (Some(h), _) => h.decode_paragraph(store, z, max_sentences, max_words),
            (None, Some(f)) => f.decode_paragraph(store, z, max_sentences, max_words),
            (None, None) => Err(Error::Config("model has no decoder".into())),
        }
    }

    /// Decoder NLL of `target` at a fixed latent value.
    pub fn nll_at<T: Real>(&self, store: &ParamStore<T>, z: Option<&[f64]>, target: &Paragraph) -> Result<f64> {
        let mut g = Graph::new(store);
        let z = z.map(|z| g.input(z.iter().map(|&x| T::lit(x)).collect()));
        let n = self.reconstruction(&mut g, z, target)?;
        Ok(g.scalar(n).to_f64_lossy())
    }
}

/// Values of one optimization step. Losses are per-document batch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub reconstruction: f64,
    pub kl: f64,
    pub beta: f64,
    pub objective: f64,
    pub tokens: usize,
    pub documents: usize,
}

impl StepLoss {
    /// `exp((reconstruction + kl) / tokens)` over the step's documents.
    pub fn ppl_bound(&self) -> f64 {
        let per_doc_tokens = self.tokens as f64 / self.documents as f64;
        ((self.reconstruction + self.kl) / per_doc_tokens).exp()
    }
}

/// Loss and batch-averaged parameter gradients of `reconstruction + beta * kl`.
pub fn loss_step<T: Real>(
    store: &ParamStore<T>,
    model: &Model,
    batch: &[Example],
    noise: &[DocNoise],
    beta: f64,
) -> Result<(StepLoss, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::Empty("loss_step on an empty batch".into()));
    }
    if noise.len() != batch.len() {
        return Err(Error::dim("loss_step noise", batch.len(), noise.len()));
    }
    let inv = T::lit(1.0 / batch.len() as f64);
    let per_doc = batch
        .par_iter()
        .zip(noise.par_iter())
        .map(|(ex, nz)| {
            let mut g = Graph::new(store);
            let loss = model.doc_loss(&mut g, ex, nz)?;
            let recon = g.scalar(loss.reconstruction).to_f64_lossy();
            let (kl, total) = match loss.kl {
                Some(kl) => {
                    let weighted = g.scale(kl, T::lit(beta));
                    (g.scalar(kl).to_f64_lossy(), g.add(loss.reconstruction, weighted)?)
                }
                None => (0.0, loss.reconstruction),
            };
            let scaled = g.scale(total, inv);
            let grads = g.backward(scaled)?;
            Ok((recon, kl, ex.target.num_tokens(), grads))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads = Gradients::empty(store.len());
    let (mut recon, mut kl, mut tokens) = (0.0, 0.0, 0);
    for (r, k, t, gr) in &per_doc {
        recon += r;
        kl += k;
        tokens += t;
        grads.merge(gr);
    }
    let n = batch.len() as f64;
    let (reconstruction, kl) = (recon / n, kl / n);
    Ok((
        StepLoss {
            reconstruction,
            kl,
            beta,
            objective: reconstruction + beta * kl,
            tokens,
            documents: batch.len(),
        },
        grads,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub documents: usize,
    /// Tokens counted for perplexity: `END` included, `PAD` excluded.
    pub tokens: usize,
    /// Mean per-document NLL; for latent variants the bound `reconstruction + kl`.
    pub nll: f64,
    pub kl: f64,
    pub ppl: f64,
    /// Set when `nll` and `ppl` are upper bounds.
    pub bound: bool,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let le = if self.bound { "<=" } else { "" };
        writeln!(f, "documents\t{}", self.documents)?;
        writeln!(f, "tokens\t{}", self.tokens)?;
        writeln!(f, "nll\t{le}{}", self.nll)?;
        writeln!(f, "kl\t{}", self.kl)?;
        writeln!(f, "ppl\t{le}{}", self.ppl)
    }
}

/// NLL, KL and perplexity over `docs` with one posterior sample per
/// document drawn from a generator seeded by `seed`.
pub fn evaluate<T: Real>(store: &ParamStore<T>, cfg: &ModelConfig, model: &Model, docs: &[Example], seed: u64) -> Result<EvalReport> {
    if docs.is_empty() {
        return Err(Error::Empty("evaluate on an empty split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<DocNoise> = docs.iter().map(|_| model.draw_noise(cfg, &mut rng)).collect();
    let per_doc = docs
        .par_iter()
        .zip(noise.par_iter())
        .map(|(ex, nz)| {
            let mut g = Graph::new(store);
            let loss = model.doc_loss(&mut g, ex, nz)?;
            let recon = g.scalar(loss.reconstruction).to_f64_lossy();
            let kl = loss.kl.map_or(0.0, |k| g.scalar(k).to_f64_lossy());
            Ok((recon, kl, ex.target.num_tokens()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut nll, mut kl, mut tokens) = (0.0, 0.0, 0);
    for (r, k, t) in per_doc {
        nll += r + k;
        kl += k;
        tokens += t;
    }
    let n = docs.len() as f64;
    Ok(EvalReport {
        documents: docs.len(),
        tokens,
        nll: nll / n,
        kl: kl / n,
        ppl: (nll / tokens as f64).exp(),
        bound: model.variant.has_latent(),
    })
}

/// Importance-weighted estimate of `-log p(x)` with `samples` draws from the
/// posterior, for the single-latent variants.
pub fn importance_weighted_nll<T: Real, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    model: &Model,
    example: &Example,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if model.variant.is_two_level() || !model.variant.has_latent() {
        return Err(Error::Usage(format!("importance weighting is implemented for flat-VAE and ml-VAE-S, not {}", model.variant)));
    }
    if samples == 0 {
        return Err(Error::Precondition("importance weighting needs at least one sample".into()));
    }
    let q = model.bottom_posterior(store, &example.source)?;
    let prior = GaussianParams::standard(q.dim());
    let mut logw = Vec::with_capacity(samples);
    for _ in 0..samples {
        let eps = standard_normal(rng, q.dim());
        let z = crate::latent::sample(&q, &eps)?;
        let ll = -model.nll_at(store, Some(&z), &example.target)?;
        logw.push(ll + log_density(&prior, &z) - log_density(&q, &z));
    }
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logw.iter().map(|w| (w - m).exp()).sum::<f64>().ln();
    Ok(-(lse - (samples as f64).ln()))
}

/// One tab-separated log record.
#[derive(Debug, Clone, PartialEq)]
pub enum LogLine {
    Train { step: u64, loss: StepLoss },
    Eval { step: u64, report: EvalReport },
}

pub const TRAIN_LOG_HEADER: &str = "step\treconstruction\tkl\tbeta\tobjective\tppl_bound";

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogLine::Train { step, loss } => write!(
                f,
                "{step}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
                loss.reconstruction,
                loss.kl,
                loss.beta,
                loss.objective,
                loss.ppl_bound()
            ),
            LogLine::Eval { step, report } => write!(
                f,
                "eval\t{step}\t{:?}\t{:?}\t{:?}\t{}",
                report.nll,
                report.kl,
                report.ppl,
                if report.bound { "bound" } else { "exact" }
            ),
        }
    }
}

/// Parameters, optimizer, step counter and the noise generator.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Exponential moving averages of the logged losses.
    pub avg_reconstruction: f64,
    pub avg_kl: f64,
}

/// A model together with its training state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: ModelConfig,
    pub model: Model,
    pub state: TrainState<T>,
}

impl<T: Real> Trainer<T> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = Model::register(&mut store, &config, &mut rng)?;
        let adam = Adam::new(AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        });
        Ok(Trainer {
            config,
            model,
            state: TrainState {
                store,
                adam,
                step: 0,
                rng,
                avg_reconstruction: 0.0,
                avg_kl: 0.0,
            },
        })
    }

    pub fn beta(&self) -> f64 {
        if self.model.variant.has_latent() {
            anneal(self.state.step, self.config.anneal_start, self.config.anneal_end)
        } else {
            0.0
        }
    }

    /// One update: loss, backward, clip, Adam.
    pub fn step(&mut self, batch: &[Example]) -> Result<StepLoss> {
        let noise: Vec<DocNoise> = batch.iter().map(|_| self.model.draw_noise(&self.config, &mut self.state.rng)).collect();
        let beta = self.beta();
        let step = self.state.step + 1;
        let (loss, grads) = loss_step(&self.state.store, &self.model, batch, &noise, beta).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
            e => e,
        })?;
        if !loss.objective.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step} (reconstruction {}, kl {})",
                loss.reconstruction, loss.kl
            )));
        }
        let st = &mut self.state;
        st.store.zero_grad();
        grads.accumulate_into(&mut st.store);
        st.store.clip_grad_norm(T::lit(self.config.clip_norm));
        st.adam
            .update(&mut st.store)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        st.step = step;
        let a = if step == 1 { 1.0 } else { 0.02 };
        st.avg_reconstruction += a * (loss.reconstruction - st.avg_reconstruction);
        st.avg_kl += a * (loss.kl - st.avg_kl);
        Ok(loss)
    }

    pub fn evaluate(&self, docs: &[Example]) -> Result<EvalReport> {
        evaluate(&self.state.store, &self.config, &self.model, docs, self.config.seed.wrapping_add(EVAL_SEED_OFFSET))
    }

    /// Writes the checkpoint and its sidecars (see [`sidecar_paths`]).
    pub fn save(&self, path: &Path, vocab: Option<&Vocabulary>) -> Result<()> {
        save_model(path, &self.state.store, &self.config, vocab)
    }
}

/// `(config, vocabulary)` sidecar files stored next to a checkpoint.
pub fn sidecar_paths(checkpoint: &Path) -> (PathBuf, PathBuf) {
    let mut c = checkpoint.as_os_str().to_owned();
    c.push(".config");
    let mut v = checkpoint.as_os_str().to_owned();
    v.push(".vocab");
    (PathBuf::from(c), PathBuf::from(v))
}

pub fn save_model<T: Real>(path: &Path, store: &ParamStore<T>, cfg: &ModelConfig, vocab: Option<&Vocabulary>) -> Result<()> {
    write_checkpoint(path, store)?;
    let (c, v) = sidecar_paths(path);
    cfg.save(&c)?;
    if let Some(vocab) = vocab {
        vocab.save(&v)?;
    }
    Ok(())
}

/// A checkpoint loaded for inference, always in 64-bit.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub config: ModelConfig,
    pub model: Model,
    pub store: ParamStore<f64>,
    pub vocab: Option<Vocabulary>,
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let (c, v) = sidecar_paths(path);
        let config = ModelConfig::load(&c)?;
        let store = read_checkpoint::<f64>(path)?;
        let model = Model::lookup(&store, &config)?;
        let vocab = if v.exists() { Some(Vocabulary::load(&v)?) } else { None };
        Ok(LoadedModel { config, model, store, vocab })
    }

    pub fn vocab(&self) -> Result<&Vocabulary> {
        self.vocab
            .as_ref()
            .ok_or_else(|| Error::Usage("checkpoint has no vocabulary sidecar".into()))
    }
}

/// Where and how often `train` writes checkpoints.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint: Option<PathBuf>,
    /// Explicit evaluation split; otherwise `heldout_fraction` of the corpus.
    pub heldout: Option<Vec<Example>>,
    pub vocab: Option<Vocabulary>,
}

/// Seeded shuffle of `docs` into `(train, heldout)`. The held-out part is
/// `fraction` of the documents, rounded down, and empty for tiny corpora.
pub fn split_heldout(docs: &[Example], fraction: f64, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ EVAL_SEED_OFFSET));
    let n_held = ((docs.len() as f64) * fraction).floor() as usize;
    let n_held = n_held.min(docs.len().saturating_sub(1));
    let held = idx[..n_held].iter().map(|&i| docs[i].clone()).collect();
    let mut rest = idx[n_held..].to_vec();
    rest.sort_unstable();
    (rest.into_iter().map(|i| docs[i].clone()).collect(), held)
}

/// Runs `config.max_steps` updates over seeded shuffles of `corpus`,
/// calling `log` with each record.
pub fn train<T: Real>(config: ModelConfig, corpus: &[Example], opts: &TrainOptions, log: &mut dyn FnMut(&LogLine)) -> Result<Trainer<T>> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus is empty".into()));
    }
    let (train_docs, heldout) = match &opts.heldout {
        Some(h) => (corpus.to_vec(), h.clone()),
        None => split_heldout(corpus, config.heldout_fraction, config.seed),
    };
    let mut config = config;
    if config.gen_sentences == 0 {
        let targets: Vec<Paragraph> = train_docs.iter().map(|e| e.target.clone()).collect();
        config.gen_sentences = median_sentence_count(&targets).max(1);
    }
    let mut trainer = Trainer::<T>::new(config)?;
    let cfg = trainer.config.clone();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    while trainer.state.step < cfg.max_steps {
        batch.clear();
        while batch.len() < cfg.batch_size.min(train_docs.len()) {
            if cursor == order.len() {
                order = (0..train_docs.len()).collect();
                order.shuffle(&mut trainer.state.rng);
                cursor = 0;
            }
            batch.push(train_docs[order[cursor]].clone());
            cursor += 1;
        }
        let loss = trainer.step(&batch)?;
        let step = trainer.state.step;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.max_steps) {
            log(&LogLine::Train { step, loss });
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !heldout.is_empty() {
            log(&LogLine::Eval {
                step,
                report: trainer.evaluate(&heldout)?,
            });
        }
        if let Some(path) = &opts.checkpoint {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.max_steps {
                trainer.save(path, opts.vocab.as_ref())?;
            }
        }
    }
    if let Some(path) = &opts.checkpoint {
        trainer.save(path, opts.vocab.as_ref())?;
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::END;
    use crate::ndcore::grad_check;

    fn para(s: &[&[usize]]) -> Paragraph {
        Paragraph::new(s.iter().map(|x| x.to_vec()).collect()).unwrap()
    }

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            vocab_size: 9,
            d_emb: 3,
            d_plan: 4,
            d_word: 4,
            d_z: 2,
            d_z2: 2,
            prior_hidden: 3,
            top_hidden: 3,
            sentence_widths: vec![1, 2],
            sentence_filters: 2,
            paragraph_widths: vec![1, 2],
            paragraph_filters: 2,
            batch_size: 2,
            ..ModelConfig::default()
        }
    }

    fn docs() -> Vec<Example> {
        vec![
            Example::document(para(&[&[3, 4, 5, END], &[6, 7, END]])),
            Example::document(para(&[&[8, END], &[3, 3, 4, END]])),
        ]
    }

    #[test]
    fn anneal_examples() {
        assert_eq!(anneal(3, 10, 20), 0.0);
        assert_eq!(anneal(15, 10, 20), 0.5);
        assert_eq!(anneal(25, 10, 20), 1.0);
        assert_eq!(anneal(9, 10, 10), 0.0);
        assert_eq!(anneal(10, 10, 10), 1.0);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("vae".parse::<Variant>().is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = tiny(Variant::FlatVae);
        cfg.learning_rate = 0.003;
        cfg.paired = true;
        let back = ModelConfig::parse(&cfg.to_string(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        let err = ModelConfig::parse("d_emb = 4\nbogus = 1\n", Path::new("c")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(ModelConfig::parse("anneal_start = 5\nanneal_end = 4", Path::new("c")).is_err());
        assert!(ModelConfig::parse("batch_size = 0", Path::new("c")).is_err());
        assert!(ModelConfig::parse("variant = flat-LM\npaired = true", Path::new("c")).is_err());
    }

    #[test]
    fn beta_zero_objective_is_reconstruction() {
        for v in Variant::ALL {
            let t = Trainer::<f64>::new(tiny(v)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let noise: Vec<_> = docs().iter().map(|_| t.model.draw_noise(&t.config, &mut rng)).collect();
            let (loss, _) = loss_step(&t.state.store, &t.model, &docs(), &noise, 0.0).unwrap();
            assert_eq!(loss.objective, loss.reconstruction, "{v}");
            if !v.has_latent() {
                assert_eq!(loss.kl, 0.0);
            }
            let (loss, _) = loss_step(&t.state.store, &t.model, &docs(), &noise, 0.3).unwrap();
            assert_eq!(loss.objective, loss.reconstruction + 0.3 * loss.kl);
        }
    }

    #[test]
    fn collapsed_two_level_kl_is_zero() {
        let mut t = Trainer::<f64>::new(tiny(Variant::MlVaeD)).unwrap();
        let st = &mut t.state.store;
        for id in st.ids().collect::<Vec<_>>() {
            let name = st.name(id).to_string();
            if name.starts_with("prior.") || name.starts_with("enc.z") {
                st.value_mut(id).fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise: Vec<_> = docs().iter().map(|_| t.model.draw_noise(&t.config, &mut rng)).collect();
        let (loss, _) = loss_step(&t.state.store, &t.model, &docs(), &noise, 1.0).unwrap();
        assert!(loss.kl.abs() < 1e-15);
    }

    #[test]
    fn objective_gradients_pass_grad_check() {
        for v in Variant::ALL {
            let t = Trainer::<f64>::new(tiny(v)).unwrap();
            let mut store = t.state.store.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for id in store.ids().collect::<Vec<_>>() {
                for x in store.value_mut(id).data_mut() {
                    *x = rng.random_range(-0.6..0.6);
                }
            }
            let noise: Vec<_> = docs().iter().map(|_| t.model.draw_noise(&t.config, &mut rng)).collect();
            let batch = docs();
            let model = t.model.clone();
            let report = grad_check(
                &store,
                |g| {
                    let mut terms = Vec::new();
                    for (ex, nz) in batch.iter().zip(&noise) {
                        let l = model.doc_loss(g, ex, nz)?;
                        terms.push(l.reconstruction);
                        if let Some(kl) = l.kl {
                            terms.push(g.scale(kl, 0.7));
                        }
                    }
                    let s = g.add_n(&terms)?;
                    Ok(g.scale(s, 0.5))
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{v}: {:?}", report.worst());

            // the reduced gradients of loss_step agree with the single-graph ones
            let (_, grads) = loss_step(&store, &model, &batch, &noise, 0.7).unwrap();
            for e in &report.entries {
                if let Some(gr) = grads.param(store.id(&e.name).unwrap()) {
                    assert!(gr.iter().all(|x| x.is_finite()));
                }
            }
        }
    }

    #[test]
    fn uniform_flat_lm_perplexity_is_vocab_size() {
        let cfg = tiny(Variant::FlatLm);
        let mut t = Trainer::<f64>::new(cfg.clone()).unwrap();
        for id in t.state.store.ids().collect::<Vec<_>>() {
            t.state.store.value_mut(id).fill(0.0);
        }
        let r = t.evaluate(&docs()).unwrap();
        assert!((r.ppl - cfg.vocab_size as f64).abs() < 1e-9);
        assert_eq!(r.kl, 0.0);
        assert!(!r.bound);
        assert_eq!(r.tokens, 13);
        assert!(t.evaluate(&[]).is_err());
    }

    #[test]
    fn lm_evaluation_is_teacher_forced_nll() {
        for v in [Variant::FlatLm, Variant::MlLm] {
            let t = Trainer::<f64>::new(tiny(v)).unwrap();
            let r = t.evaluate(&docs()).unwrap();
            let direct: f64 = docs().iter().map(|d| t.model.nll_at(&t.state.store, None, &d.target).unwrap()).sum();
            assert!((r.nll - direct / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vae_bound_exceeds_importance_weighted_estimate() {
        for v in [Variant::FlatVae, Variant::MlVaeS] {
            let mut cfg = tiny(v);
            cfg.anneal_end = 20;
            cfg.max_steps = 150;
            cfg.learning_rate = 0.01;
            cfg.heldout_fraction = 0.0;
            let t = train::<f64>(cfg, &docs(), &TrainOptions::default(), &mut |_| {}).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mean_se = |xs: &[f64]| {
                let n = xs.len() as f64;
                let m = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
                (m, (var / n).sqrt())
            };
            for ex in docs() {
                let iw: Vec<f64> = (0..10)
                    .map(|_| importance_weighted_nll(&t.state.store, &t.model, &ex, 100, &mut rng).unwrap())
                    .collect();
                let bounds: Vec<f64> = (0..1000)
                    .map(|s| evaluate(&t.state.store, &t.config, &t.model, &[ex.clone()], s).unwrap().nll)
                    .collect();
                let (iw, iw_se) = mean_se(&iw);
                let (b, b_se) = mean_se(&bounds);
                assert!(b + 3.0 * (b_se + iw_se) >= iw, "{v}: bound {b} (se {b_se}) < iw {iw} (se {iw_se})");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let mut cfg = tiny(Variant::MlVaeD);
        cfg.max_steps = 30;
        cfg.log_every = 10;
        cfg.learning_rate = 0.01;
        cfg.anneal_end = 10;
        let run = || {
            let mut lines = Vec::new();
            let t = train::<f32>(cfg.clone(), &docs(), &TrainOptions::default(), &mut |l| lines.push(l.to_string())).unwrap();
            (t.state.store.to_checkpoint_bytes(), lines)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 3);
        for line in &la {
            let f: Vec<f64> = line.split('\t').map(|x| x.parse().unwrap()).collect();
            assert_eq!(f[4], f[1] + f[3] * f[2]);
            assert!(f[2] >= 0.0);
        }
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let mut t = Trainer::<f64>::new(tiny(Variant::FlatLm)).unwrap();
        t.step(&docs()).unwrap();
        let id = t.state.store.id("dec.flat.out.b").unwrap();
        t.state.store.value_mut(id).data_mut()[0] = f64::NAN;
        let err = t.step(&docs()).unwrap_err();
        assert!(err.to_string().contains("step 2"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let t = Trainer::<f32>::new(tiny(Variant::MlVaeD)).unwrap();
        t.save(&path, None).unwrap();
        let loaded = LoadedModel::load(&path).unwrap();
        assert_eq!(loaded.config, t.config);
        assert!(loaded.vocab().is_err());
        let ex = &docs()[0];
        let a = t.model.bottom_posterior(&t.state.store, &ex.source).unwrap();
        let b = loaded.model.bottom_posterior(&loaded.store, &ex.source).unwrap();
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn heldout_split_is_seeded() {
        let many: Vec<Example> = (0..20).map(|i| Example::document(para(&[&[3 + i % 5, END]]))).collect();
        let (a, ha) = split_heldout(&many, 0.1, 4);
        let (b, hb) = split_heldout(&many, 0.1, 4);
        assert_eq!((a.len(), ha.len()), (18, 2));
        assert_eq!((a, ha), (b, hb));
        assert_eq!(split_heldout(&many[..1], 0.5, 0).1.len(), 0);
    }
}
