//! Parameter handles that register their arrays once and resolve to ids.

use rand::Rng;

use super::array::Real;
use super::graph::{Graph, NodeId};
use super::params::{Init, ParamId, ParamStore, INIT_SCALE};
use crate::Result;

/// Affine map `{name}.w` `[d_out, d_in]`, `{name}.b` `[d_out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.register(&format!("{name}.w"), &[d_out, d_in], Init::Uniform(INIT_SCALE), rng)?;
        let b = store.register(&format!("{name}.b"), &[d_out], Init::Zeros, rng)?;
        Ok(Linear { w, b, d_in, d_out })
    }

    /// Re-binds to parameters already present in `store`.
    pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let w = store.id(&format!("{name}.w"))?;
        let b = store.id(&format!("{name}.b"))?;
        let shape = store.value(w).shape();
        Ok(Linear {
            w,
            b,
            d_in: shape[1],
            d_out: shape[0],
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        g.linear(x, self.w, self.b)
    }
}

/// LSTM cell with fused gate weights `{name}.w` `[4H, d_in + H]` in
/// `[input, forget, candidate, output]` order. The forget-gate bias starts at 1.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.register(&format!("{name}.w"), &[4 * hidden, d_in + hidden], Init::Uniform(INIT_SCALE), rng)?;
        let b = store.register(&format!("{name}.b"), &[4 * hidden], Init::Zeros, rng)?;
        store.value_mut(b).data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|x| *x = T::one());
        Ok(Lstm { w, b, d_in, hidden })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let w = store.id(&format!("{name}.w"))?;
        let b = store.id(&format!("{name}.b"))?;
        let shape = store.value(w).shape();
        let hidden = shape[0] / 4;
        Ok(Lstm {
            w,
            b,
            d_in: shape[1] - hidden,
            hidden,
        })
    }

    pub fn step<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
        g.lstm_step(x, h, c, self.w, self.b)
    }
}

/// Embedding table `{name}` of shape `[vocab, dim]`.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.register(name, &[vocab, dim], Init::Uniform(INIT_SCALE), rng)?;
        Ok(Embedding { table, vocab, dim })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        let table = store.id(name)?;
        let shape = store.value(table).shape();
        Ok(Embedding {
            table,
            vocab: shape[0],
            dim: shape[1],
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, token: usize) -> Result<NodeId> {
        g.embed(self.table, token)
    }
}

/// A set of convolution filter banks sharing one input sequence; bank `k`
/// has weights `{name}.k{width}.w` `[filters, width * d_in]`.
#[derive(Debug, Clone)]
pub struct ConvBank {
    pub banks: Vec<(ParamId, ParamId, usize)>,
    pub d_in: usize,
    pub d_out: usize,
}

impl ConvBank {
    pub fn register<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        widths: &[usize],
        filters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut banks = Vec::with_capacity(widths.len());
        for &width in widths {
            let w = store.register(&format!("{name}.k{width}.w"), &[filters, width * d_in], Init::Uniform(INIT_SCALE), rng)?;
            let b = store.register(&format!("{name}.k{width}.b"), &[filters], Init::Zeros, rng)?;
            banks.push((w, b, width));
        }
        Ok(ConvBank {
            banks,
            d_in,
            d_out: widths.len() * filters,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, name: &str, widths: &[usize]) -> Result<Self> {
        let mut banks = Vec::with_capacity(widths.len());
        let mut d_in = 0;
        let mut d_out = 0;
        for &width in widths {
            let w = store.id(&format!("{name}.k{width}.w"))?;
            let b = store.id(&format!("{name}.k{width}.b"))?;
            let shape = store.value(w).shape();
            d_in = shape[1] / width;
            d_out += shape[0];
            banks.push((w, b, width));
        }
        Ok(ConvBank { banks, d_in, d_out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, rows: &[NodeId]) -> Result<NodeId> {
        g.conv1d_maxpool(rows, &self.banks)
    }
}
