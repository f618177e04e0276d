use rayon::prelude::*;

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::{Error, Result};

/// Worst-case agreement for one parameter array.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries whose relative error exceeds the tolerance.
    pub flagged: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.flagged == 0)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn eval<F>(store: &ParamStore<f64>, build_loss: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let loss = build_loss(&mut g)?;
    Ok(g.scalar(loss))
}

/// Compares analytic gradients with central differences
/// `(L(p + eps) - L(p - eps)) / 2 eps` for every parameter entry.
///
/// `build_loss` must be a pure function of the store; a loss that changes
/// between two evaluations at the same point is rejected as a usage error.
pub fn grad_check<F>(store: &ParamStore<f64>, build_loss: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId> + Sync,
{
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!("grad_check epsilon must be positive, got {eps}")));
    }
    let mut g = Graph::new(store);
    let loss = build_loss(&mut g)?;
    let base = g.scalar(loss);
    let grads = g.backward(loss)?;
    let again = eval(store, &build_loss)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Usage(format!(
            "grad_check loss is not deterministic ({base} vs {again}); seed its randomness"
        )));
    }

    let mut entries = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.value(id).len();
        let analytic: Vec<f64> = grads.param(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let numeric: Vec<f64> = (0..n)
            .into_par_iter()
            .map_init(
                || store.clone(),
                |local, k| -> Result<f64> { central_difference(local, id, k, eps, &build_loss) },
            )
            .collect::<Result<_>>()?;
        let mut entry = GradCheckEntry {
            name: store.name(id).to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            flagged: 0,
        };
        for (k, (&a, &num)) in analytic.iter().zip(&numeric).enumerate() {
            let err = rel_error(a, num);
            if err > tol {
                entry.flagged += 1;
            }
            if err > entry.max_rel_error || k == 0 {
                entry.max_rel_error = err;
                entry.worst_index = k;
                entry.analytic = a;
                entry.numeric = num;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { tol, entries })
}

fn central_difference<F>(store: &mut ParamStore<f64>, id: ParamId, k: usize, eps: f64, build_loss: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let orig = store.value(id).data()[k];
    store.value_mut(id).data_mut()[k] = orig + eps;
    let plus = eval(store, build_loss)?;
    store.value_mut(id).data_mut()[k] = orig - eps;
    let minus = eval(store, build_loss)?;
    store.value_mut(id).data_mut()[k] = orig;
    Ok((plus - minus) / (2.0 * eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::{DenseArray, Lstm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_loss_matches() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("p", DenseArray::from_vec(&[4], vec![0.3, -1.2, 2.5, 0.01]).unwrap())
            .unwrap();
        let report = grad_check(
            &store,
            |g| {
                let p = g.param_named("p")?;
                let sq = g.mul(p, p)?;
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error() < 1e-6);
    }

    #[test]
    fn unreachable_parameter_reports_zero() {
        let mut store = ParamStore::<f64>::new();
        store.insert("used", DenseArray::from_vec(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        store.insert("unused", DenseArray::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let report = grad_check(
            &store,
            |g| {
                let p = g.param_named("used")?;
                Ok(g.sum(p))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        let unused = report.entries.iter().find(|e| e.name == "unused").unwrap();
        assert_eq!((unused.analytic, unused.numeric, unused.max_rel_error), (0.0, 0.0, 0.0));
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("p", DenseArray::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        let counter = std::sync::atomic::AtomicU64::new(0);
        let err = grad_check(
            &store,
            |g| {
                let k = counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let p = g.param_named("p")?;
                let noise = g.input(vec![k as f64]);
                let s = g.add(p, noise)?;
                Ok(g.sum(s))
            },
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn lstm_step_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let cell = Lstm::register(&mut store, "cell", 3, 4, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            for x in store.value_mut(id).data_mut() {
                *x = rng.random_range(-0.8..0.8);
            }
        }
        let report = grad_check(
            &store,
            |g| {
                let x = g.input(vec![0.5, -0.3, 0.9]);
                let h = g.input(vec![0.1, 0.2, -0.4, 0.3]);
                let c = g.input(vec![-0.5, 0.7, 0.2, 0.0]);
                let (h1, c1) = cell.step(g, x, h, c)?;
                let (h2, c2) = cell.step(g, x, h1, c1)?;
                let both = g.mul(h2, c2)?;
                let t = g.tanh(both);
                Ok(g.sum(t))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
