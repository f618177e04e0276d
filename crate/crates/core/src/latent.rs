//! Diagonal-Gaussian latent algebra.
//!
//! Value-level functions ([`kl_standard`], [`kl_gaussians`], [`sample`],
//! [`log_density`]) work on plain `f64` vectors and serve as the reference
//! the graph-level versions are checked against. The graph-level helpers
//! record the same quantities on a [`Graph`] so they take part in training.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ndcore::{Graph, Linear, NodeId, ParamStore, Real};
use crate::{Error, Result};

pub const LOG_VAR_MIN: f64 = -8.0;
pub const LOG_VAR_MAX: f64 = 8.0;

/// Hidden width of the conditional prior network.
pub const DEFAULT_PRIOR_HIDDEN: usize = 64;

const LN_2PI: f64 = 1.8378770664093453;

/// Mean and log-variance of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::dim("GaussianParams", mean.len(), log_var.len()));
        }
        if mean.iter().chain(&log_var).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("GaussianParams".into()));
        }
        Ok(GaussianParams { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianParams {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| (0.5 * l).exp()).collect()
    }
}

/// A sampled pair from the two-level hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
}

/// `KL(q || N(0, I)) = 0.5 * sum(exp(lv) + mu^2 - 1 - lv)`.
pub fn kl_standard(q: &GaussianParams) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_var)
        .map(|(&m, &l)| 0.5 * (l.exp() + m * m - 1.0 - l))
        .sum::<f64>()
        .max(0.0)
}

/// `KL(q || p)` for diagonal Gaussians.
pub fn kl_gaussians(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::dim("kl_gaussians", q.dim(), p.dim()));
    }
    let kl: f64 = (0..q.dim())
        .map(|k| {
            let diff = q.mean[k] - p.mean[k];
            0.5 * (p.log_var[k] - q.log_var[k] + (q.log_var[k].exp() + diff * diff) / p.log_var[k].exp() - 1.0)
        })
        .sum();
    Ok(kl.max(0.0))
}

/// `mean + exp(log_var / 2) * noise`.
pub fn sample(p: &GaussianParams, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != p.dim() {
        return Err(Error::dim("sample noise", p.dim(), noise.len()));
    }
    Ok((0..p.dim())
        .map(|k| p.mean[k] + (0.5 * p.log_var[k]).exp() * noise[k])
        .collect())
}

/// Log density of `x` under a diagonal Gaussian.
pub fn log_density(p: &GaussianParams, x: &[f64]) -> f64 {
    (0..p.dim())
        .map(|k| {
            let d = x[k] - p.mean[k];
            -0.5 * (LN_2PI + p.log_var[k] + d * d / p.log_var[k].exp())
        })
        .sum()
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Mean and log-variance nodes of a Gaussian recorded on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianNodes {
    pub mean: NodeId,
    pub log_var: NodeId,
}

impl GaussianNodes {
    pub fn values<T: Real>(&self, g: &Graph<'_, T>) -> GaussianParams {
        GaussianParams {
            mean: g.value(self.mean).iter().map(|x| x.to_f64_lossy()).collect(),
            log_var: g.value(self.log_var).iter().map(|x| x.to_f64_lossy()).collect(),
        }
    }

    pub fn constant<T: Real>(g: &mut Graph<'_, T>, p: &GaussianParams) -> Self {
        GaussianNodes {
            mean: g.input(p.mean.iter().map(|&x| T::lit(x)).collect()),
            log_var: g.input(p.log_var.iter().map(|&x| T::lit(x)).collect()),
        }
    }
}

/// Reparameterized sample on the graph.
pub fn sample_node<T: Real>(g: &mut Graph<'_, T>, q: GaussianNodes, noise: &[f64]) -> Result<NodeId> {
    g.sample(q.mean, q.log_var, noise.iter().map(|&x| T::lit(x)).collect())
}

pub fn kl_standard_node<T: Real>(g: &mut Graph<'_, T>, q: GaussianNodes) -> Result<NodeId> {
    g.kl_standard(q.mean, q.log_var)
}

pub fn kl_gaussians_node<T: Real>(g: &mut Graph<'_, T>, q: GaussianNodes, p: GaussianNodes) -> Result<NodeId> {
    g.kl_gaussians(q.mean, q.log_var, p.mean, p.log_var)
}

/// Two linear maps producing a Gaussian; the log-variance is clamped to
/// `[LOG_VAR_MIN, LOG_VAR_MAX]`. Parameters `{prefix}.mu.*`, `{prefix}.logvar.*`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianHead {
    pub mean: Linear,
    pub log_var: Linear,
}

impl GaussianHead {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        Ok(GaussianHead {
            mean: Linear::register(store, &format!("{prefix}.mu"), d_in, d_out, rng)?,
            log_var: Linear::register(store, &format!("{prefix}.logvar"), d_in, d_out, rng)?,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(GaussianHead {
            mean: Linear::lookup(store, &format!("{prefix}.mu"))?,
            log_var: Linear::lookup(store, &format!("{prefix}.logvar"))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<GaussianNodes> {
        let mean = self.mean.forward(g, x)?;
        let raw = self.log_var.forward(g, x)?;
        let log_var = g.clamp(raw, T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
        Ok(GaussianNodes { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.d_out
    }
}

/// Learned conditional prior `p(z1 | z2)`: one ReLU hidden layer, then a
/// Gaussian head. Parameters under `prior.*`.
#[derive(Debug, Clone, Copy)]
pub struct PriorNetwork {
    pub hidden: Linear,
    pub head: GaussianHead,
}

impl PriorNetwork {
    pub fn register<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, d_z2: usize, hidden: usize, d_z1: usize, rng: &mut R) -> Result<Self> {
        Ok(PriorNetwork {
            hidden: Linear::register(store, "prior.hidden", d_z2, hidden, rng)?,
            head: GaussianHead::register(store, "prior", hidden, d_z1, rng)?,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        Ok(PriorNetwork {
            hidden: Linear::lookup(store, "prior.hidden")?,
            head: GaussianHead::lookup(store, "prior")?,
        })
    }

    pub fn prior_conditional<T: Real>(&self, g: &mut Graph<'_, T>, z2: NodeId) -> Result<GaussianNodes> {
        let pre = self.hidden.forward(g, z2)?;
        let h = g.relu(pre);
        self.head.forward(g, h)
    }

    /// Evaluates `p(z1 | z2)` outside of training.
    pub fn evaluate<T: Real>(&self, store: &ParamStore<T>, z2: &[f64]) -> Result<GaussianParams> {
        let mut g = Graph::new(store);
        let z = g.input(z2.iter().map(|&x| T::lit(x)).collect());
        let p = self.prior_conditional(&mut g, z)?;
        Ok(p.values(&g))
    }
}

/// The two terms of the hierarchical KL and their sum.
#[derive(Debug, Clone, Copy)]
pub struct JointKl {
    pub total: NodeId,
    /// `KL(q(z1|x) || p(z1|z2))` at the sampled `z2`.
    pub inner: NodeId,
    /// `KL(q(z2|x) || N(0, I))`.
    pub outer: NodeId,
}

/// Single-sample estimate of `KL(q(z1, z2 | x) || p(z1, z2))` with
/// `p(z2) = N(0, I)` and the learned `p(z1 | z2)` evaluated at `z2_sample`.
pub fn joint_kl<T: Real>(
    g: &mut Graph<'_, T>,
    prior: &PriorNetwork,
    q1: GaussianNodes,
    q2: GaussianNodes,
    z2_sample: NodeId,
) -> Result<JointKl> {
    let outer = kl_standard_node(g, q2)?;
    let p1 = prior.prior_conditional(g, z2_sample)?;
    let inner = kl_gaussians_node(g, q1, p1)?;
    let total = g.add(inner, outer)?;
    Ok(JointKl { total, inner, outer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::{grad_check, DenseArray};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gp(mean: &[f64], log_var: &[f64]) -> GaussianParams {
        GaussianParams::new(mean.to_vec(), log_var.to_vec()).unwrap()
    }

    #[test]
    fn kl_standard_examples() {
        assert_eq!(kl_standard(&GaussianParams::standard(5)), 0.0);
        assert!((kl_standard(&gp(&[1.0], &[0.0])) - 0.5).abs() < 1e-15);
        assert!((kl_standard(&gp(&[1.0, 1.0], &[0.0, 0.0])) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kl_gaussians_examples() {
        let q = gp(&[0.3, -1.0], &[0.2, -0.5]);
        assert!(kl_gaussians(&q, &q).unwrap().abs() < 1e-15);
        let v = kl_gaussians(&gp(&[0.0], &[0.0]), &gp(&[0.0], &[1.0])).unwrap();
        assert!((v - 0.5 * (1.0 + (-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((v - 0.18393972058572117).abs() < 1e-12);
        assert!(kl_gaussians(&q, &GaussianParams::standard(3)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = gp(&standard_normal(&mut rng, 4), &standard_normal(&mut rng, 4));
            let a = kl_gaussians(&q, &GaussianParams::standard(4)).unwrap();
            assert!((a - kl_standard(&q)).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_additive_over_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = gp(&standard_normal(&mut rng, 6), &standard_normal(&mut rng, 6));
        let p = gp(&standard_normal(&mut rng, 6), &standard_normal(&mut rng, 6));
        let whole = kl_gaussians(&q, &p).unwrap();
        let parts: f64 = (0..6)
            .map(|k| kl_gaussians(&gp(&[q.mean[k]], &[q.log_var[k]]), &gp(&[p.mean[k]], &[p.log_var[k]])).unwrap())
            .sum();
        assert!((whole - parts).abs() < 1e-12);
    }

    #[test]
    fn sample_examples() {
        let p = gp(&[1.5, -2.0], &[LOG_VAR_MIN, LOG_VAR_MIN]);
        let z = sample(&p, &[1.0, -1.0]).unwrap();
        assert!((z[0] - 1.5).abs() < 0.02 && (z[1] + 2.0).abs() < 0.02);
        assert_eq!(sample(&p, &[0.0, 0.0]).unwrap(), p.mean);
        assert!(sample(&p, &[0.0]).is_err());
    }

    #[test]
    fn sample_moments_match() {
        let p = gp(&[0.7, -1.3], &[0.4, -1.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let z = sample(&p, &standard_normal(&mut rng, 2)).unwrap();
            for k in 0..2 {
                sum[k] += z[k];
                sq[k] += z[k] * z[k];
            }
        }
        for k in 0..2 {
            let var = p.log_var[k].exp();
            let mean = sum[k] / n as f64;
            let emp_var = sq[k] / n as f64 - mean * mean;
            assert!((mean - p.mean[k]).abs() < 3.0 * (var / n as f64).sqrt());
            // Var of the sample variance for a Gaussian is 2 sigma^4 / n
            assert!((emp_var - var).abs() < 3.0 * (2.0 * var * var / n as f64).sqrt());
        }
    }

    #[test]
    fn graph_kl_matches_value_kl() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let q = gp(&[0.3, -0.2, 1.1], &[0.5, -0.7, 0.0]);
        let p = gp(&[-0.1, 0.4, 0.2], &[0.1, 0.3, -1.0]);
        let qn = GaussianNodes::constant(&mut g, &q);
        let pn = GaussianNodes::constant(&mut g, &p);
        let a = kl_standard_node(&mut g, qn).unwrap();
        let b = kl_gaussians_node(&mut g, qn, pn).unwrap();
        assert!((g.scalar(a) - kl_standard(&q)).abs() < 1e-14);
        assert!((g.scalar(b) - kl_gaussians(&q, &p).unwrap()).abs() < 1e-14);
    }

    fn zero_prior(store: &mut ParamStore<f64>, d: usize) -> PriorNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prior = PriorNetwork::register(store, d, 8, d, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        prior
    }

    #[test]
    fn zero_prior_is_standard_normal() {
        let mut store = ParamStore::<f64>::new();
        let prior = zero_prior(&mut store, 3);
        for z2 in [[0.0, 0.0, 0.0], [5.0, -3.0, 1.0]] {
            assert_eq!(prior.evaluate(&store, &z2).unwrap(), GaussianParams::standard(3));
        }
    }

    #[test]
    fn random_prior_is_not_constant() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prior = PriorNetwork::register(&mut store, 3, 8, 3, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            for x in store.value_mut(id).data_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        let a = prior.evaluate(&store, &[1.0, 0.0, -1.0]).unwrap();
        let b = prior.evaluate(&store, &[-1.0, 2.0, 0.5]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn joint_kl_reductions() {
        let mut store = ParamStore::<f64>::new();
        let prior = zero_prior(&mut store, 2);
        let mut g = Graph::new(&store);
        let std = GaussianParams::standard(2);
        let q1 = GaussianNodes::constant(&mut g, &std);
        let q2 = GaussianNodes::constant(&mut g, &std);
        let z2 = sample_node(&mut g, q2, &[0.3, -1.0]).unwrap();
        let j = joint_kl(&mut g, &prior, q1, q2, z2).unwrap();
        assert_eq!(g.scalar(j.total), 0.0);

        let a = gp(&[0.4, -1.0], &[0.3, 0.9]);
        let b = gp(&[1.2, 0.1], &[-0.6, 0.2]);
        let q1 = GaussianNodes::constant(&mut g, &a);
        let q2 = GaussianNodes::constant(&mut g, &b);
        let z2 = sample_node(&mut g, q2, &[0.5, 0.5]).unwrap();
        let j = joint_kl(&mut g, &prior, q1, q2, z2).unwrap();
        assert!((g.scalar(j.total) - kl_standard(&a) - kl_standard(&b)).abs() < 1e-12);
    }

    #[test]
    fn joint_kl_gradient_flows_into_z2_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::<f64>::new();
        let prior = PriorNetwork::register(&mut store, 3, 5, 2, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            for x in store.value_mut(id).data_mut() {
                *x = rng.random_range(-0.9..0.9);
            }
        }
        store.insert("q1.mu", DenseArray::from_vec(&[2], vec![0.2, -0.4]).unwrap()).unwrap();
        store.insert("q1.lv", DenseArray::from_vec(&[2], vec![0.1, -0.3]).unwrap()).unwrap();
        store.insert("q2.mu", DenseArray::from_vec(&[3], vec![0.5, -0.1, 0.3]).unwrap()).unwrap();
        store.insert("q2.lv", DenseArray::from_vec(&[3], vec![-0.2, 0.4, 0.0]).unwrap()).unwrap();
        let report = grad_check(
            &store,
            |g| {
                let q1 = GaussianNodes {
                    mean: g.param_named("q1.mu")?,
                    log_var: g.param_named("q1.lv")?,
                };
                let q2 = GaussianNodes {
                    mean: g.param_named("q2.mu")?,
                    log_var: g.param_named("q2.lv")?,
                };
                let z2 = sample_node(g, q2, &[0.7, -1.2, 0.4])?;
                Ok(joint_kl(g, &prior, q1, q2, z2)?.total)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
