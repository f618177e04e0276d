//! Generative networks.
//!
//! [`HierarchicalDecoder`] turns a latent code into a sequence of plan
//! vectors with a sentence-level LSTM, then decodes every sentence with a
//! word-level LSTM whose parameters are shared across sentences. Without a
//! latent code it runs as the multi-level language model: the sentence LSTM
//! then reads the final word-level hidden state of the previous sentence.
//!
//! [`FlatDecoder`] is a single word-level LSTM over the whole paragraph, used
//! by the flat baselines.

use rand::Rng;

use crate::corpus::{Paragraph, END, PAD};
use crate::ndcore::{Embedding, Graph, Init, Linear, Lstm, NodeId, ParamId, ParamStore, Real, INIT_SCALE};
use crate::{Error, Result};

pub const DEFAULT_D_EMB: usize = 128;
pub const DEFAULT_D_PLAN: usize = 256;
pub const DEFAULT_D_WORD: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub d_emb: usize,
    pub d_plan: usize,
    pub d_word: usize,
    /// Latent dimension; `None` for the language-model baselines.
    pub d_latent: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// `END` was produced.
    End,
    /// The word cap was reached first.
    Length,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedParagraph {
    pub sentences: Vec<Vec<usize>>,
    pub stop_reasons: Vec<StopReason>,
    /// Set when generation ended on an `END`-only sentence (which is not kept).
    pub stopped_on_empty: bool,
}

/// LSTM state `(h, c)` recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct State {
    pub h: NodeId,
    pub c: NodeId,
}

/// Argmax over every id except `PAD`; ties go to the lowest id.
fn argmax_lowest<T: Real>(v: &[T]) -> usize {
    let mut best = PAD + 1;
    for (i, &x) in v.iter().enumerate().skip(PAD + 2) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn latent_node<T: Real>(g: &mut Graph<'_, T>, z: &[f64]) -> NodeId {
    g.input(z.iter().map(|&x| T::lit(x)).collect())
}

/// Parameters: `dec.sent.*` for the sentence level, `dec.word.*` for the word level.
#[derive(Debug, Clone)]
pub struct HierarchicalDecoder {
    pub embed: Embedding,
    pub start: ParamId,
    pub sent_init: Option<Linear>,
    pub sent_lstm: Lstm,
    pub word_init: Linear,
    pub word_lstm: Lstm,
    pub out: Linear,
}

impl HierarchicalDecoder {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let embed = Embedding::register(store, "dec.word.embed", cfg.vocab, cfg.d_emb, rng)?;
        let start = store.register("dec.word.start", &[cfg.d_emb], Init::Uniform(INIT_SCALE), rng)?;
        let (sent_init, sent_in) = match cfg.d_latent {
            Some(d_z) => (Some(Linear::register(store, "dec.sent.init", d_z, cfg.d_plan, rng)?), d_z),
            None => (None, cfg.d_word),
        };
        let sent_lstm = Lstm::register(store, "dec.sent.lstm", sent_in, cfg.d_plan, rng)?;
        let word_init = Linear::register(store, "dec.word.init", cfg.d_plan, cfg.d_word, rng)?;
        let word_lstm = Lstm::register(store, "dec.word.lstm", cfg.d_emb + cfg.d_plan, cfg.d_word, rng)?;
        let out = Linear::register(store, "dec.word.out", cfg.d_word, cfg.vocab, rng)?;
        Ok(HierarchicalDecoder {
            embed,
            start,
            sent_init,
            sent_lstm,
            word_init,
            word_lstm,
            out,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, conditioned: bool) -> Result<Self> {
        Ok(HierarchicalDecoder {
            embed: Embedding::lookup(store, "dec.word.embed")?,
            start: store.id("dec.word.start")?,
            sent_init: if conditioned { Some(Linear::lookup(store, "dec.sent.init")?) } else { None },
            sent_lstm: Lstm::lookup(store, "dec.sent.lstm")?,
            word_init: Linear::lookup(store, "dec.word.init")?,
            word_lstm: Lstm::lookup(store, "dec.word.lstm")?,
            out: Linear::lookup(store, "dec.word.out")?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.out.d_out
    }

    fn sentence_start<T: Real>(&self, g: &mut Graph<'_, T>, z: Option<NodeId>) -> Result<State> {
        let hidden = self.sent_lstm.hidden;
        let h = match (z, &self.sent_init) {
            (Some(z), Some(init)) => {
                let pre = init.forward(g, z)?;
                g.relu(pre)
            }
            (None, None) => g.zeros(hidden),
            (Some(_), None) => return Err(Error::Config("latent code given to an unconditioned decoder".into())),
            (None, Some(_)) => return Err(Error::Config("conditioned decoder needs a latent code".into())),
        };
        let c = g.zeros(hidden);
        Ok(State { h, c })
    }

    /// `h_0 = ReLU(MLP(z))`, then `M` sentence-LSTM steps each reading `z`.
    pub fn plan_vectors<T: Real>(&self, g: &mut Graph<'_, T>, z: NodeId, m: usize) -> Result<Vec<NodeId>> {
        if m < 1 {
            return Err(Error::Precondition("plan_vectors needs M >= 1".into()));
        }
        let mut state = self.sentence_start(g, Some(z))?;
        let mut plans = Vec::with_capacity(m);
        for _ in 0..m {
            let (h, c) = self.sent_lstm.step(g, z, state.h, state.c)?;
            state = State { h, c };
            plans.push(h);
        }
        Ok(plans)
    }

    /// Word-LSTM state for a sentence: `h = tanh(MLP(plan))`, `c = 0`.
    pub fn word_start<T: Real>(&self, g: &mut Graph<'_, T>, plan: NodeId) -> Result<State> {
        let pre = self.word_init.forward(g, plan)?;
        let h = g.tanh(pre);
        let c = g.zeros(self.word_lstm.hidden);
        Ok(State { h, c })
    }

    /// One word step from the previous word's embedding; returns the new
    /// state and the vocabulary logits.
    pub fn word_step<T: Real>(&self, g: &mut Graph<'_, T>, plan: NodeId, state: State, prev: NodeId) -> Result<(State, NodeId)> {
        let x = g.concat(&[prev, plan]);
        let (h, c) = self.word_lstm.step(g, x, state.h, state.c)?;
        let logits = self.out.forward(g, h)?;
        Ok((State { h, c }, logits))
    }

    fn run_sentence<T: Real>(&self, g: &mut Graph<'_, T>, plan: NodeId, sentence: &[usize], mask: Option<&[bool]>) -> Result<(NodeId, NodeId)> {
        if sentence.is_empty() {
            return Err(Error::Precondition("word_nll on an empty sentence".into()));
        }
        let mut state = self.word_start(g, plan)?;
        let mut prev = g.param(self.start);
        let mut terms = Vec::with_capacity(sentence.len());
        for (i, &target) in sentence.iter().enumerate() {
            let (next, logits) = self.word_step(g, plan, state, prev)?;
            state = next;
            if mask.is_none_or(|m| m.get(i).copied().unwrap_or(false)) {
                terms.push(g.softmax_xent(logits, target)?);
            }
            if i + 1 < sentence.len() {
                prev = self.embed.forward(g, target)?;
            }
        }
        let loss = if terms.is_empty() { g.zeros(1) } else { g.add_n(&terms)? };
        Ok((loss, state.h))
    }

    /// Teacher-forced summed cross-entropy of one sentence given its plan
    /// vector. Masked-out positions contribute nothing.
    pub fn word_nll<T: Real>(&self, g: &mut Graph<'_, T>, plan: NodeId, sentence: &[usize], mask: Option<&[bool]>) -> Result<NodeId> {
        Ok(self.run_sentence(g, plan, sentence, mask)?.0)
    }

    /// Summed token NLL of a paragraph. With `z = None` the decoder acts as
    /// the multi-level language model.
    pub fn paragraph_nll<T: Real>(&self, g: &mut Graph<'_, T>, z: Option<NodeId>, paragraph: &Paragraph) -> Result<NodeId> {
        let sentences = paragraph.sentences();
        let mut terms = Vec::with_capacity(sentences.len());
        match z {
            Some(z) => {
                let plans = self.plan_vectors(g, z, sentences.len())?;
                for (plan, s) in plans.into_iter().zip(sentences) {
                    terms.push(self.word_nll(g, plan, s, None)?);
                }
            }
            None => {
                let mut state = self.sentence_start(g, None)?;
                let mut input = g.zeros(self.sent_lstm.d_in);
                for s in sentences {
                    let (h, c) = self.sent_lstm.step(g, input, state.h, state.c)?;
                    state = State { h, c };
                    let (loss, last) = self.run_sentence(g, h, s, None)?;
                    terms.push(loss);
                    input = last;
                }
            }
        }
        g.add_n(&terms)
    }

    /// Greedy decoding of one sentence; ties go to the lowest token id.
    /// Returns the tokens, the stop reason and the final word hidden state.
    pub fn greedy_decode_sentence<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        plan: NodeId,
        max_words: usize,
    ) -> Result<(Vec<usize>, StopReason, NodeId)> {
        if max_words < 1 {
            return Err(Error::Precondition("greedy decoding needs N_max >= 1".into()));
        }
        let mut state = self.word_start(g, plan)?;
        let mut prev = g.param(self.start);
        let mut tokens = Vec::new();
        while tokens.len() < max_words {
            let (next, logits) = self.word_step(g, plan, state, prev)?;
            state = next;
            let tok = argmax_lowest(g.value(logits));
            tokens.push(tok);
            if tok == END {
                return Ok((tokens, StopReason::End, state.h));
            }
            prev = self.embed.forward(g, tok)?;
        }
        Ok((tokens, StopReason::Length, state.h))
    }

    /// Generates up to `max_sentences` sentences, stopping early on a
    /// sentence that is `END` alone.
    pub fn decode_paragraph<T: Real>(
        &self,
        store: &ParamStore<T>,
        z: Option<&[f64]>,
        max_sentences: usize,
        max_words: usize,
    ) -> Result<DecodedParagraph> {
        if max_sentences < 1 {
            return Err(Error::Precondition("decode_paragraph needs M_gen >= 1".into()));
        }
        let mut g = Graph::new(store);
        let z = z.map(|z| latent_node(&mut g, z));
        let mut state = self.sentence_start(&mut g, z)?;
        let mut input = match z {
            Some(z) => z,
            None => g.zeros(self.sent_lstm.d_in),
        };
        let mut out = DecodedParagraph {
            sentences: Vec::new(),
            stop_reasons: Vec::new(),
            stopped_on_empty: false,
        };
        for _ in 0..max_sentences {
            let (h, c) = self.sent_lstm.step(&mut g, input, state.h, state.c)?;
            state = State { h, c };
            let (tokens, reason, last) = self.greedy_decode_sentence(&mut g, h, max_words)?;
            if tokens == [END] {
                out.stopped_on_empty = true;
                break;
            }
            out.sentences.push(tokens);
            out.stop_reasons.push(reason);
            if z.is_none() {
                input = last;
            }
        }
        Ok(out)
    }
}

/// Single word-level LSTM over the flattened paragraph. Parameters `dec.flat.*`.
#[derive(Debug, Clone)]
pub struct FlatDecoder {
    pub embed: Embedding,
    pub start: ParamId,
    pub init: Option<Linear>,
    pub lstm: Lstm,
    pub out: Linear,
}

impl FlatDecoder {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let embed = Embedding::register(store, "dec.flat.embed", cfg.vocab, cfg.d_emb, rng)?;
        let start = store.register("dec.flat.start", &[cfg.d_emb], Init::Uniform(INIT_SCALE), rng)?;
        let init = match cfg.d_latent {
            Some(d_z) => Some(Linear::register(store, "dec.flat.init", d_z, cfg.d_word, rng)?),
            None => None,
        };
        let lstm = Lstm::register(store, "dec.flat.lstm", cfg.d_emb, cfg.d_word, rng)?;
        let out = Linear::register(store, "dec.flat.out", cfg.d_word, cfg.vocab, rng)?;
        Ok(FlatDecoder {
            embed,
            start,
            init,
            lstm,
            out,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, conditioned: bool) -> Result<Self> {
        Ok(FlatDecoder {
            embed: Embedding::lookup(store, "dec.flat.embed")?,
            start: store.id("dec.flat.start")?,
            init: if conditioned { Some(Linear::lookup(store, "dec.flat.init")?) } else { None },
            lstm: Lstm::lookup(store, "dec.flat.lstm")?,
            out: Linear::lookup(store, "dec.flat.out")?,
        })
    }

    fn start_state<T: Real>(&self, g: &mut Graph<'_, T>, z: Option<NodeId>) -> Result<State> {
        let h = match (z, &self.init) {
            (Some(z), Some(init)) => {
                let pre = init.forward(g, z)?;
                g.tanh(pre)
            }
            (None, _) => g.zeros(self.lstm.hidden),
            (Some(_), None) => return Err(Error::Config("latent code given to an unconditioned flat decoder".into())),
        };
        let c = g.zeros(self.lstm.hidden);
        Ok(State { h, c })
    }

    fn step<T: Real>(&self, g: &mut Graph<'_, T>, state: State, prev: NodeId) -> Result<(State, NodeId)> {
        let (h, c) = self.lstm.step(g, prev, state.h, state.c)?;
        let logits = self.out.forward(g, h)?;
        Ok((State { h, c }, logits))
    }

    /// Teacher-forced summed cross-entropy over a token stream (sentence
    /// `END`s are ordinary tokens).
    pub fn flat_nll<T: Real>(&self, g: &mut Graph<'_, T>, z: Option<NodeId>, stream: &[usize]) -> Result<NodeId> {
        if stream.is_empty() {
            return Err(Error::Precondition("flat_nll on an empty stream".into()));
        }
        let mut state = self.start_state(g, z)?;
        let mut prev = g.param(self.start);
        let mut terms = Vec::with_capacity(stream.len());
        for (i, &target) in stream.iter().enumerate() {
            let (next, logits) = self.step(g, state, prev)?;
            state = next;
            terms.push(g.softmax_xent(logits, target)?);
            if i + 1 < stream.len() {
                prev = self.embed.forward(g, target)?;
            }
        }
        g.add_n(&terms)
    }

    /// Greedy generation split into sentences at `END`; a sentence hitting
    /// `max_words` is cut and generation continues with the next one.
    pub fn decode_paragraph<T: Real>(
        &self,
        store: &ParamStore<T>,
        z: Option<&[f64]>,
        max_sentences: usize,
        max_words: usize,
    ) -> Result<DecodedParagraph> {
        if max_sentences < 1 || max_words < 1 {
            return Err(Error::Precondition("decode_paragraph needs M_gen >= 1 and N_max >= 1".into()));
        }
        let mut g = Graph::new(store);
        let z = z.map(|z| latent_node(&mut g, z));
        let mut state = self.start_state(&mut g, z)?;
        let mut prev = g.param(self.start);
        let mut out = DecodedParagraph {
            sentences: Vec::new(),
            stop_reasons: Vec::new(),
            stopped_on_empty: false,
        };
        let mut current = Vec::new();
        while out.sentences.len() < max_sentences {
            let (next, logits) = self.step(&mut g, state, prev)?;
            state = next;
            let tok = argmax_lowest(g.value(logits));
            current.push(tok);
            if tok == END {
                if current.len() == 1 {
                    out.stopped_on_empty = true;
                    break;
                }
                out.sentences.push(std::mem::take(&mut current));
                out.stop_reasons.push(StopReason::End);
            } else if current.len() == max_words {
                out.sentences.push(std::mem::take(&mut current));
                out.stop_reasons.push(StopReason::Length);
            }
            prev = self.embed.forward(&mut g, tok)?;
        }
        Ok(out)
    }
}
