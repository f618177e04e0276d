//! Hierarchical CNN inference network.
//!
//! Each sentence is embedded and pooled by a sentence-level CNN into a
//! fixed-length vector; the sequence of sentence vectors is pooled by a
//! paragraph-level CNN into the paragraph feature. Gaussian heads on top of
//! the feature give `q(z|x)` for single-latent models, or `q(z1|x)` and
//! `q(z2|x)` for the two-level model. Both posteriors of the two-level model
//! read the same CNN stack.

use rand::Rng;

use crate::corpus::Paragraph;
use crate::latent::{GaussianHead, GaussianNodes};
use crate::ndcore::{ConvBank, Embedding, Graph, Linear, NodeId, ParamStore, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub d_emb: usize,
    pub sentence_widths: Vec<usize>,
    pub sentence_filters: usize,
    pub paragraph_widths: Vec<usize>,
    pub paragraph_filters: usize,
    /// Dimension of `z` (single) or `z1` (pair).
    pub d_latent: usize,
    /// Two-level heads: `(hidden width of the z2 MLP, dimension of z2)`.
    pub top: Option<(usize, usize)>,
}

impl EncoderConfig {
    pub fn d_sentence(&self) -> usize {
        self.sentence_widths.len() * self.sentence_filters
    }

    pub fn d_feature(&self) -> usize {
        self.paragraph_widths.len() * self.paragraph_filters
    }
}

#[derive(Debug, Clone)]
enum Heads {
    Single(GaussianHead),
    Pair {
        z1: GaussianHead,
        mlp1: Linear,
        mlp2: Linear,
        z2: GaussianHead,
    },
}

/// Parameters live under `enc.*`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed: Embedding,
    pub sentence_cnn: ConvBank,
    pub paragraph_cnn: ConvBank,
    heads: Heads,
}

impl Encoder {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let embed = Embedding::register(store, "enc.embed", cfg.vocab, cfg.d_emb, rng)?;
        let sentence_cnn = ConvBank::register(store, "enc.sent", cfg.d_emb, &cfg.sentence_widths, cfg.sentence_filters, rng)?;
        let paragraph_cnn = ConvBank::register(store, "enc.para", cfg.d_sentence(), &cfg.paragraph_widths, cfg.paragraph_filters, rng)?;
        let d_f = cfg.d_feature();
        let heads = match cfg.top {
            None => Heads::Single(GaussianHead::register(store, "enc.z", d_f, cfg.d_latent, rng)?),
            Some((hidden, d_z2)) => Heads::Pair {
                z1: GaussianHead::register(store, "enc.z1", d_f, cfg.d_latent, rng)?,
                mlp1: Linear::register(store, "enc.z2.mlp1", d_f, hidden, rng)?,
                mlp2: Linear::register(store, "enc.z2.mlp2", hidden, hidden, rng)?,
                z2: GaussianHead::register(store, "enc.z2", hidden, d_z2, rng)?,
            },
        };
        Ok(Encoder {
            embed,
            sentence_cnn,
            paragraph_cnn,
            heads,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, cfg: &EncoderConfig) -> Result<Self> {
        let heads = match cfg.top {
            None => Heads::Single(GaussianHead::lookup(store, "enc.z")?),
            Some(_) => Heads::Pair {
                z1: GaussianHead::lookup(store, "enc.z1")?,
                mlp1: Linear::lookup(store, "enc.z2.mlp1")?,
                mlp2: Linear::lookup(store, "enc.z2.mlp2")?,
                z2: GaussianHead::lookup(store, "enc.z2")?,
            },
        };
        Ok(Encoder {
            embed: Embedding::lookup(store, "enc.embed")?,
            sentence_cnn: ConvBank::lookup(store, "enc.sent", &cfg.sentence_widths)?,
            paragraph_cnn: ConvBank::lookup(store, "enc.para", &cfg.paragraph_widths)?,
            heads,
        })
    }

    pub fn is_pair(&self) -> bool {
        matches!(self.heads, Heads::Pair { .. })
    }

    /// Sentence vector from the unmasked tokens only.
    pub fn encode_sentence<T: Real>(&self, g: &mut Graph<'_, T>, tokens: &[usize], mask: Option<&[bool]>) -> Result<NodeId> {
        let mut rows = Vec::with_capacity(tokens.len());
        for (i, &tok) in tokens.iter().enumerate() {
            if mask.is_none_or(|m| m.get(i).copied().unwrap_or(false)) {
                rows.push(self.embed.forward(g, tok)?);
            }
        }
        if rows.is_empty() {
            return Err(Error::Precondition("encode_sentence needs at least one unmasked token".into()));
        }
        self.sentence_cnn.forward(g, &rows)
    }

    /// Paragraph feature from the first `count` sentence vectors.
    pub fn encode_paragraph<T: Real>(&self, g: &mut Graph<'_, T>, sentence_vectors: &[NodeId], count: usize) -> Result<NodeId> {
        if count == 0 || sentence_vectors.is_empty() {
            return Err(Error::Precondition("encode_paragraph needs at least one sentence".into()));
        }
        let count = count.min(sentence_vectors.len());
        self.paragraph_cnn.forward(g, &sentence_vectors[..count])
    }

    pub fn feature<T: Real>(&self, g: &mut Graph<'_, T>, paragraph: &Paragraph) -> Result<NodeId> {
        let vecs = paragraph
            .sentences()
            .iter()
            .map(|s| self.encode_sentence(g, s, None))
            .collect::<Result<Vec<_>>>()?;
        self.encode_paragraph(g, &vecs, vecs.len())
    }

    pub fn posterior_single<T: Real>(&self, g: &mut Graph<'_, T>, feature: NodeId) -> Result<GaussianNodes> {
        match &self.heads {
            Heads::Single(h) => h.forward(g, feature),
            Heads::Pair { .. } => Err(Error::Config("posterior_single on a two-level encoder".into())),
        }
    }

    /// `(q(z1|x), q(z2|x))`; the z2 branch passes through two ReLU MLP layers.
    pub fn posterior_pair<T: Real>(&self, g: &mut Graph<'_, T>, feature: NodeId) -> Result<(GaussianNodes, GaussianNodes)> {
        match &self.heads {
            Heads::Pair { z1, mlp1, mlp2, z2 } => {
                let q1 = z1.forward(g, feature)?;
                let a = mlp1.forward(g, feature)?;
                let a = g.relu(a);
                let b = mlp2.forward(g, a)?;
                let b = g.relu(b);
                let q2 = z2.forward(g, b)?;
                Ok((q1, q2))
            }
            Heads::Single(_) => Err(Error::Config("posterior_pair on a single-latent encoder".into())),
        }
    }

    /// The posterior the decoder reads from: `q(z|x)` or `q(z1|x)`.
    pub fn bottom_posterior<T: Real>(&self, g: &mut Graph<'_, T>, paragraph: &Paragraph) -> Result<GaussianNodes> {
        let f = self.feature(g, paragraph)?;
        match &self.heads {
            Heads::Single(h) => h.forward(g, f),
            Heads::Pair { z1, .. } => z1.forward(g, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::END;
    use crate::latent::{GaussianParams, LOG_VAR_MAX};
    use crate::ndcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(top: Option<(usize, usize)>) -> EncoderConfig {
        EncoderConfig {
            vocab: 9,
            d_emb: 3,
            sentence_widths: vec![1, 2],
            sentence_filters: 2,
            paragraph_widths: vec![1, 2],
            paragraph_filters: 3,
            d_latent: 2,
            top,
        }
    }

    fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            for x in store.value_mut(id).data_mut() {
                *x = rng.random_range(-scale..scale);
            }
        }
    }

    fn build(top: Option<(usize, usize)>) -> (ParamStore<f64>, Encoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, &cfg(top), &mut rng).unwrap();
        randomize(&mut store, 2, 0.7);
        (store, enc)
    }

    fn para(s: &[&[usize]]) -> Paragraph {
        Paragraph::new(s.iter().map(|x| x.to_vec()).collect()).unwrap()
    }

    #[test]
    fn sentence_mask_excludes_padding() {
        let (store, enc) = build(None);
        let mut g = Graph::new(&store);
        let a = enc.encode_sentence(&mut g, &[4, 5, END], None).unwrap();
        let b = enc
            .encode_sentence(&mut g, &[4, 5, END, 0, 0, 7], Some(&[true, true, true, false, false, false]))
            .unwrap();
        assert_eq!(g.value(a), g.value(b));
        let single = enc.encode_sentence(&mut g, &[6], None).unwrap();
        assert_eq!(g.value(single).len(), 4);
        assert!(enc.encode_sentence(&mut g, &[4], Some(&[false])).is_err());
    }

    #[test]
    fn paragraph_count_and_order() {
        let (store, enc) = build(None);
        let mut g = Graph::new(&store);
        let s1 = enc.encode_sentence(&mut g, &[3, 4, END], None).unwrap();
        let s2 = enc.encode_sentence(&mut g, &[7, 8, 6, END], None).unwrap();
        let s3 = enc.encode_sentence(&mut g, &[5, END], None).unwrap();
        let one = enc.encode_paragraph(&mut g, &[s1], 1).unwrap();
        assert_eq!(g.value(one).len(), 6);
        let ab = enc.encode_paragraph(&mut g, &[s1, s2, s3], 2).unwrap();
        let ab2 = enc.encode_paragraph(&mut g, &[s1, s2], 2).unwrap();
        assert_eq!(g.value(ab), g.value(ab2));
        let ba = enc.encode_paragraph(&mut g, &[s2, s1], 2).unwrap();
        assert_ne!(g.value(ab), g.value(ba));
        assert!(enc.encode_paragraph(&mut g, &[s1], 0).is_err());
    }

    #[test]
    fn zero_heads_give_standard_normal() {
        for top in [None, Some((4, 3))] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut store = ParamStore::<f64>::new();
            let enc = Encoder::register(&mut store, &cfg(top), &mut rng).unwrap();
            for id in store.ids().collect::<Vec<_>>() {
                if store.name(id).contains(".mu.") || store.name(id).contains(".logvar.") {
                    store.value_mut(id).fill(0.0);
                }
            }
            let mut g = Graph::new(&store);
            let f = enc.feature(&mut g, &para(&[&[3, END], &[4, 5, END]])).unwrap();
            if top.is_none() {
                let q = enc.posterior_single(&mut g, f).unwrap();
                assert_eq!(q.values(&g), GaussianParams::standard(2));
            } else {
                let (q1, q2) = enc.posterior_pair(&mut g, f).unwrap();
                assert_eq!(q1.values(&g), GaussianParams::standard(2));
                assert_eq!(q2.values(&g), GaussianParams::standard(3));
            }
        }
    }

    #[test]
    fn log_variance_is_clamped() {
        let (mut store, enc) = build(None);
        let b = store.id("enc.z.logvar.b").unwrap();
        store.value_mut(b).fill(20.0);
        let w = store.id("enc.z.logvar.w").unwrap();
        store.value_mut(w).fill(0.0);
        let mut g = Graph::new(&store);
        let f = enc.feature(&mut g, &para(&[&[3, END]])).unwrap();
        let q = enc.posterior_single(&mut g, f).unwrap();
        assert_eq!(g.value(q.log_var), &[LOG_VAR_MAX, LOG_VAR_MAX]);
    }

    #[test]
    fn z2_path_weights_do_not_touch_q_z1_but_cnn_touches_both() {
        let (mut store, enc) = build(Some((4, 3)));
        let p = para(&[&[3, 4, END], &[5, END]]);
        let eval = |store: &ParamStore<f64>| {
            let mut g = Graph::new(store);
            let f = enc.feature(&mut g, &p).unwrap();
            let (q1, q2) = enc.posterior_pair(&mut g, f).unwrap();
            (q1.values(&g), q2.values(&g))
        };
        let (a1, a2) = eval(&store);
        let id = store.id("enc.z2.mlp1.w").unwrap();
        store.value_mut(id).data_mut().iter_mut().for_each(|x| *x += 0.5);
        let (b1, b2) = eval(&store);
        assert_eq!(a1, b1);
        assert_ne!(a2, b2);
        let id = store.id("enc.sent.k1.w").unwrap();
        store.value_mut(id).data_mut().iter_mut().for_each(|x| *x += 0.3);
        let (c1, c2) = eval(&store);
        assert_ne!(b1, c1);
        assert_ne!(b2, c2);
    }

    #[test]
    fn encoder_gradients() {
        for top in [None, Some((4, 3))] {
            let (store, enc) = build(top);
            let p = para(&[&[3, 4, 8, END], &[5, END], &[6, 7, END]]);
            let report = grad_check(
                &store,
                |g| {
                    let f = enc.feature(g, &p)?;
                    let terms = if enc.is_pair() {
                        let (q1, q2) = enc.posterior_pair(g, f)?;
                        vec![q1.mean, q1.log_var, q2.mean, q2.log_var]
                    } else {
                        let q = enc.posterior_single(g, f)?;
                        vec![q.mean, q.log_var]
                    };
                    let parts: Vec<_> = terms
                        .into_iter()
                        .map(|t| {
                            let sq = g.mul(t, t).unwrap();
                            g.sum(sq)
                        })
                        .collect();
                    g.add_n(&parts)
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{:?}", report.worst());
        }
    }
}
