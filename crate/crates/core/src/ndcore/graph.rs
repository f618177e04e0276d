use super::array::Real;
use super::params::{ParamId, ParamStore};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBankRef {
    w: ParamId,
    b: ParamId,
    width: usize,
    filters: usize,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Embed {
        table: ParamId,
        row: usize,
    },
    Lstm {
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w: ParamId,
        b: ParamId,
        /// Activated gates laid out as `[i, f, g, o]`.
        gates: Vec<T>,
        tanh_c: Vec<T>,
    },
    Slice {
        x: NodeId,
        start: usize,
    },
    Concat(Vec<NodeId>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddN(Vec<NodeId>),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Clamp {
        x: NodeId,
        lo: T,
        hi: T,
    },
    Sum(NodeId),
    Xent {
        logits: NodeId,
        target: usize,
        probs: Vec<T>,
    },
    ConvPool {
        rows: Vec<NodeId>,
        banks: Vec<ConvBankRef>,
        /// Winning window start per output unit.
        argmax: Vec<usize>,
    },
    KlStandard {
        mean: NodeId,
        log_var: NodeId,
    },
    KlGaussians {
        mean_q: NodeId,
        log_var_q: NodeId,
        mean_p: NodeId,
        log_var_p: NodeId,
    },
    Sample {
        mean: NodeId,
        log_var: NodeId,
        noise: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    op: Op<T>,
}

/// Reverse-mode tape over vector-valued nodes.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the reverse sweep is a single backward scan.
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<Option<Vec<T>>>,
    nodes: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(num_params: usize) -> Self {
        Gradients {
            params: vec![None; num_params],
            nodes: Vec::new(),
        }
    }

    /// Gradient with respect to a parameter, `None` if it was unreachable.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to an intermediate node.
    pub fn node(&self, id: NodeId) -> Option<&[T]> {
        self.nodes.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds another gradient buffer (parameter part only) into this one.
    pub fn merge(&mut self, other: &Gradients<T>) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.params.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = *x * factor);
        }
    }

    /// Adds the parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (i, g) in self.params.iter().enumerate() {
            if let Some(g) = g {
                let acc = store.grad_mut(ParamId(i));
                acc.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }
}

fn check_len(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::dim(context, expected, actual));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    /// The single entry of a length-1 node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, value: Vec<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; receives a gradient but propagates nowhere.
    pub fn input(&mut self, value: Vec<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.input(vec![T::zero(); len])
    }

    /// A whole parameter as a node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.store.value(id).data().to_vec();
        self.push(value, Op::Param(id))
    }

    pub fn param_named(&mut self, name: &str) -> Result<NodeId> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    /// `W x + b` with `W` of shape `[d_out, d_in]` and `b` of shape `[d_out]`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let wv = self.store.value(w);
        let bv = self.store.value(b);
        let name = self.store.name(w);
        if wv.shape().len() != 2 {
            return Err(Error::dim(name, "rank-2 weight", wv.shape().len()));
        }
        let (d_out, d_in) = (wv.shape()[0], wv.shape()[1]);
        check_len(name, d_in, self.nodes[x.0].value.len())?;
        check_len(self.store.name(b), d_out, bv.len())?;
        let xv = &self.nodes[x.0].value;
        let wd = wv.data();
        let out = (0..d_out)
            .map(|r| {
                let row = &wd[r * d_in..(r + 1) * d_in];
                row.iter().zip(xv).fold(bv.data()[r], |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Parameter-name form of [`Graph::linear`]: reads `{name}.w` and `{name}.b`.
    pub fn linear_named(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let w = self.store.id(&format!("{name}.w"))?;
        let b = self.store.id(&format!("{name}.b"))?;
        self.linear(x, w, b)
    }

    /// Row `row` of an embedding table of shape `[vocab, dim]`.
    pub fn embed(&mut self, table: ParamId, row: usize) -> Result<NodeId> {
        let tv = self.store.value(table);
        let (rows, dim) = (tv.shape()[0], tv.len() / tv.shape()[0]);
        if row >= rows {
            return Err(Error::Index {
                context: self.store.name(table).to_string(),
                index: row,
                size: rows,
            });
        }
        let value = tv.data()[row * dim..(row + 1) * dim].to_vec();
        Ok(self.push(value, Op::Embed { table, row }))
    }

    /// One LSTM step. Returns the node holding `[h'; c']` together with
    /// slices for `h'` and `c'`.
    pub fn lstm_step(&mut self, x: NodeId, h: NodeId, c: NodeId, w: ParamId, b: ParamId) -> Result<(NodeId, NodeId)> {
        let wv = self.store.value(w);
        let name = self.store.name(w);
        let hid = self.nodes[h.0].value.len();
        let d_in = self.nodes[x.0].value.len();
        check_len(name, 4 * hid * (d_in + hid), wv.len())?;
        if wv.shape() != [4 * hid, d_in + hid] {
            return Err(Error::dim(name, format!("[{}, {}]", 4 * hid, d_in + hid), format!("{:?}", wv.shape())));
        }
        check_len(self.store.name(b), 4 * hid, self.store.value(b).len())?;
        check_len(name, hid, self.nodes[c.0].value.len())?;

        let cols = d_in + hid;
        let xv = &self.nodes[x.0].value;
        let hv = &self.nodes[h.0].value;
        let cv = &self.nodes[c.0].value;
        let wd = wv.data();
        let bd = self.store.value(b).data();
        let mut gates = Vec::with_capacity(4 * hid);
        for r in 0..4 * hid {
            let row = &wd[r * cols..(r + 1) * cols];
            let mut acc = bd[r];
            for (a, &v) in row[..d_in].iter().zip(xv) {
                acc = acc + *a * v;
            }
            for (a, &v) in row[d_in..].iter().zip(hv) {
                acc = acc + *a * v;
            }
            let act = if r / hid == 2 { acc.tanh() } else { sigmoid(acc) };
            gates.push(act);
        }
        let mut out = vec![T::zero(); 2 * hid];
        let mut tanh_c = Vec::with_capacity(hid);
        for k in 0..hid {
            let (i, f, g, o) = (gates[k], gates[hid + k], gates[2 * hid + k], gates[3 * hid + k]);
            let c_new = f * cv[k] + i * g;
            let tc = c_new.tanh();
            out[k] = o * tc;
            out[hid + k] = c_new;
            tanh_c.push(tc);
        }
        let both = self.push(
            out,
            Op::Lstm {
                x,
                h,
                c,
                w,
                b,
                gates,
                tanh_c,
            },
        );
        let h_new = self.slice(both, 0, hid)?;
        let c_new = self.slice(both, hid, hid)?;
        Ok((h_new, c_new))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if start + len > xv.len() {
            return Err(Error::dim("slice", format!("end <= {}", xv.len()), start + len));
        }
        let value = xv[start..start + len].to_vec();
        Ok(self.push(value, Op::Slice { x, start }))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let value = parts.iter().flat_map(|p| self.nodes[p.0].value.iter().copied()).collect();
        self.push(value, Op::Concat(parts.to_vec()))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, ctx: &str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_len(ctx, av.len(), bv.len())?;
        Ok(av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let v = self.nodes[a.0].value.iter().map(|&x| x * factor).collect();
        self.push(v, Op::Scale(a, factor))
    }

    /// Elementwise sum of equally sized nodes.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::Empty("add_n of no terms".into()))?;
        let len = self.nodes[first.0].value.len();
        let mut acc = vec![T::zero(); len];
        for p in parts {
            let v = &self.nodes[p.0].value;
            check_len("add_n", len, v.len())?;
            acc.iter_mut().zip(v).for_each(|(a, &b)| *a = *a + b);
        }
        Ok(self.push(acc, Op::AddN(parts.to_vec())))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let v = self.nodes[x.0].value.iter().map(|&a| f(a)).collect();
        self.push(v, op)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |a| a.max(T::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |a| a.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |a| a.exp(), Op::Exp(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        self.unary(x, |a| a.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.iter().copied().sum();
        self.push(vec![s], Op::Sum(x))
    }

    /// `logsumexp(logits) - logits[target]`, stabilized by max subtraction.
    pub fn softmax_xent(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        if lv.len() < 2 {
            return Err(Error::dim("softmax_xent", "at least 2 classes", lv.len()));
        }
        if target >= lv.len() {
            return Err(Error::Index {
                context: "softmax_xent target".into(),
                index: target,
                size: lv.len(),
            });
        }
        if lv.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax_xent logits".into()));
        }
        let m = lv.iter().copied().fold(T::neg_infinity(), T::max);
        let mut probs: Vec<T> = lv.iter().map(|&x| (x - m).exp()).collect();
        let z: T = probs.iter().copied().sum();
        probs.iter_mut().for_each(|p| *p = *p / z);
        let loss = (m + z.ln() - lv[target]).max(T::zero());
        Ok(self.push(vec![loss], Op::Xent { logits, target, probs }))
    }

    /// Convolution over a sequence of equally sized rows followed by ReLU and
    /// max-over-time pooling, for each `(weight, bias, width)` bank. A sequence
    /// shorter than a window is zero-padded to that window's width.
    pub fn conv1d_maxpool(&mut self, rows: &[NodeId], banks: &[(ParamId, ParamId, usize)]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Precondition("conv1d_maxpool over an empty sequence".into()));
        }
        let d = self.nodes[rows[0].0].value.len();
        for r in rows {
            check_len("conv1d_maxpool row", d, self.nodes[r.0].value.len())?;
        }
        let mut refs = Vec::with_capacity(banks.len());
        for &(w, b, width) in banks {
            let wv = self.store.value(w);
            let name = self.store.name(w);
            if width == 0 || wv.shape().len() != 2 || wv.shape()[1] != width * d {
                return Err(Error::dim(name, format!("[filters, {}]", width * d), format!("{:?}", wv.shape())));
            }
            let filters = wv.shape()[0];
            check_len(self.store.name(b), filters, self.store.value(b).len())?;
            refs.push(ConvBankRef { w, b, width, filters });
        }
        let len = rows.len();
        let mut out = Vec::new();
        let mut argmax = Vec::new();
        for bank in &refs {
            let wd = self.store.value(bank.w).data();
            let bd = self.store.value(bank.b).data();
            let positions = len.max(bank.width) - bank.width + 1;
            for f in 0..bank.filters {
                let wrow = &wd[f * bank.width * d..(f + 1) * bank.width * d];
                let mut best = T::neg_infinity();
                let mut best_pos = 0;
                for p in 0..positions {
                    let mut acc = bd[f];
                    for o in 0..bank.width {
                        if p + o >= len {
                            break;
                        }
                        let rv = &self.nodes[rows[p + o].0].value;
                        for (a, &v) in wrow[o * d..(o + 1) * d].iter().zip(rv) {
                            acc = acc + *a * v;
                        }
                    }
                    if acc > best {
                        best = acc;
                        best_pos = p;
                    }
                }
                out.push(best.max(T::zero()));
                argmax.push(best_pos);
            }
        }
        Ok(self.push(
            out,
            Op::ConvPool {
                rows: rows.to_vec(),
                banks: refs,
                argmax,
            },
        ))
    }

    /// `KL(N(mean, exp(log_var)) || N(0, I))` summed over dimensions.
    pub fn kl_standard(&mut self, mean: NodeId, log_var: NodeId) -> Result<NodeId> {
        let (m, lv) = (&self.nodes[mean.0].value, &self.nodes[log_var.0].value);
        check_len("kl_standard", m.len(), lv.len())?;
        let half = T::lit(0.5);
        let kl: T = m
            .iter()
            .zip(lv)
            .map(|(&m, &l)| half * (l.exp() + m * m - T::one() - l))
            .sum();
        if !kl.is_finite() {
            return Err(Error::Numeric("kl_standard".into()));
        }
        Ok(self.push(vec![kl.max(T::zero())], Op::KlStandard { mean, log_var }))
    }

    /// `KL(q || p)` between diagonal Gaussians, summed over dimensions.
    pub fn kl_gaussians(&mut self, mean_q: NodeId, log_var_q: NodeId, mean_p: NodeId, log_var_p: NodeId) -> Result<NodeId> {
        let n = self.nodes[mean_q.0].value.len();
        for id in [log_var_q, mean_p, log_var_p] {
            check_len("kl_gaussians", n, self.nodes[id.0].value.len())?;
        }
        let half = T::lit(0.5);
        let (mq, lq, mp, lp) = (
            &self.nodes[mean_q.0].value,
            &self.nodes[log_var_q.0].value,
            &self.nodes[mean_p.0].value,
            &self.nodes[log_var_p.0].value,
        );
        let kl: T = (0..n)
            .map(|k| {
                let diff = mq[k] - mp[k];
                half * (lp[k] - lq[k] + (lq[k].exp() + diff * diff) / lp[k].exp() - T::one())
            })
            .sum();
        if !kl.is_finite() {
            return Err(Error::Numeric("kl_gaussians".into()));
        }
        Ok(self.push(
            vec![kl.max(T::zero())],
            Op::KlGaussians {
                mean_q,
                log_var_q,
                mean_p,
                log_var_p,
            },
        ))
    }

    /// Reparameterized sample `mean + exp(log_var / 2) * noise`.
    pub fn sample(&mut self, mean: NodeId, log_var: NodeId, noise: Vec<T>) -> Result<NodeId> {
        let (m, lv) = (&self.nodes[mean.0].value, &self.nodes[log_var.0].value);
        check_len("sample log_var", m.len(), lv.len())?;
        check_len("sample noise", m.len(), noise.len())?;
        let half = T::lit(0.5);
        let v = (0..m.len()).map(|k| m[k] + (half * lv[k]).exp() * noise[k]).collect();
        Ok(self.push(v, Op::Sample { mean, log_var, noise }))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss node is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got length {}",
                self.nodes[loss.0].value.len()
            )));
        }
        let nodes = &self.nodes;
        let store = self.store;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        let mut pgrads: Vec<Option<Vec<T>>> = vec![None; store.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let half = T::lit(0.5);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    add_into(&mut pgrads[p.0], g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b)
                    });
                }
                Op::Linear { x, w, b } => {
                    let wv = store.value(*w);
                    let (d_out, d_in) = (wv.shape()[0], wv.shape()[1]);
                    let xv = &nodes[x.0].value;
                    let wd = wv.data();
                    add_into(&mut pgrads[b.0], d_out, |buf| {
                        buf.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b)
                    });
                    add_into(&mut pgrads[w.0], d_out * d_in, |buf| {
                        for r in 0..d_out {
                            if g[r] == T::zero() {
                                continue;
                            }
                            let row = &mut buf[r * d_in..(r + 1) * d_in];
                            row.iter_mut().zip(xv).for_each(|(a, &v)| *a = *a + g[r] * v);
                        }
                    });
                    add_into(&mut grads[x.0], d_in, |buf| {
                        for r in 0..d_out {
                            if g[r] == T::zero() {
                                continue;
                            }
                            let row = &wd[r * d_in..(r + 1) * d_in];
                            buf.iter_mut().zip(row).for_each(|(a, &wv)| *a = *a + g[r] * wv);
                        }
                    });
                }
                Op::Embed { table, row } => {
                    let tv = store.value(*table);
                    let dim = g.len();
                    add_into(&mut pgrads[table.0], tv.len(), |buf| {
                        buf[row * dim..(row + 1) * dim]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, &b)| *a = *a + b)
                    });
                }
                Op::Lstm {
                    x,
                    h,
                    c,
                    w,
                    b,
                    gates,
                    tanh_c,
                } => {
                    let hid = tanh_c.len();
                    let xv = &nodes[x.0].value;
                    let hv = &nodes[h.0].value;
                    let cv = &nodes[c.0].value;
                    let d_in = xv.len();
                    let cols = d_in + hid;
                    let mut dz = vec![T::zero(); 4 * hid];
                    let mut dc_prev = vec![T::zero(); hid];
                    for k in 0..hid {
                        let (i, f, gg, o) = (gates[k], gates[hid + k], gates[2 * hid + k], gates[3 * hid + k]);
                        let dh = g[k];
                        let tc = tanh_c[k];
                        let dc = g[hid + k] + dh * o * (T::one() - tc * tc);
                        let d_o = dh * tc;
                        let d_i = dc * gg;
                        let d_g = dc * i;
                        let d_f = dc * cv[k];
                        dc_prev[k] = dc * f;
                        dz[k] = d_i * i * (T::one() - i);
                        dz[hid + k] = d_f * f * (T::one() - f);
                        dz[2 * hid + k] = d_g * (T::one() - gg * gg);
                        dz[3 * hid + k] = d_o * o * (T::one() - o);
                    }
                    add_into(&mut pgrads[b.0], 4 * hid, |buf| {
                        buf.iter_mut().zip(&dz).for_each(|(a, &v)| *a = *a + v)
                    });
                    add_into(&mut pgrads[w.0], 4 * hid * cols, |buf| {
                        for (r, &dzr) in dz.iter().enumerate() {
                            if dzr == T::zero() {
                                continue;
                            }
                            let row = &mut buf[r * cols..(r + 1) * cols];
                            row[..d_in].iter_mut().zip(xv).for_each(|(a, &v)| *a = *a + dzr * v);
                            row[d_in..].iter_mut().zip(hv).for_each(|(a, &v)| *a = *a + dzr * v);
                        }
                    });
                    let wd = store.value(*w).data();
                    let mut dxh = vec![T::zero(); cols];
                    for (r, &dzr) in dz.iter().enumerate() {
                        if dzr == T::zero() {
                            continue;
                        }
                        let row = &wd[r * cols..(r + 1) * cols];
                        dxh.iter_mut().zip(row).for_each(|(a, &wv)| *a = *a + dzr * wv);
                    }
                    add_into(&mut grads[x.0], d_in, |buf| {
                        buf.iter_mut().zip(&dxh[..d_in]).for_each(|(a, &v)| *a = *a + v)
                    });
                    add_into(&mut grads[h.0], hid, |buf| {
                        buf.iter_mut().zip(&dxh[d_in..]).for_each(|(a, &v)| *a = *a + v)
                    });
                    add_into(&mut grads[c.0], hid, |buf| {
                        buf.iter_mut().zip(&dc_prev).for_each(|(a, &v)| *a = *a + v)
                    });
                }
                Op::Slice { x, start } => {
                    let n = nodes[x.0].value.len();
                    add_into(&mut grads[x.0], n, |buf| {
                        buf[*start..start + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, &v)| *a = *a + v)
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        add_into(&mut grads[p.0], n, |buf| {
                            buf.iter_mut().zip(&g[off..off + n]).for_each(|(a, &v)| *a = *a + v)
                        });
                        off += n;
                    }
                }
                Op::Add(a, b) => {
                    for p in [a, b] {
                        add_into(&mut grads[p.0], g.len(), |buf| {
                            buf.iter_mut().zip(&g).for_each(|(x, &v)| *x = *x + v)
                        });
                    }
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads[a.0], g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(x, &v)| *x = *x + v)
                    });
                    add_into(&mut grads[b.0], g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(x, &v)| *x = *x - v)
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    add_into(&mut grads[a.0], g.len(), |buf| {
                        for k in 0..buf.len() {
                            buf[k] = buf[k] + g[k] * bv[k];
                        }
                    });
                    add_into(&mut grads[b.0], g.len(), |buf| {
                        for k in 0..buf.len() {
                            buf[k] = buf[k] + g[k] * av[k];
                        }
                    });
                }
                Op::Scale(a, factor) => {
                    add_into(&mut grads[a.0], g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(x, &v)| *x = *x + v * *factor)
                    });
                }
                Op::AddN(parts) => {
                    for p in parts {
                        add_into(&mut grads[p.0], g.len(), |buf| {
                            buf.iter_mut().zip(&g).for_each(|(x, &v)| *x = *x + v)
                        });
                    }
                }
                Op::Relu(x) => {
                    let xv = &nodes[x.0].value;
                    add_into(&mut grads[x.0], g.len(), |buf| {
                        for k in 0..buf.len() {
                            if xv[k] > T::zero() {
                                buf[k] = buf[k] + g[k];
                            }
                        }
                    });
                }
                Op::Tanh(x) => {
                    let yv = &node.value;
                    add_into(&mut grads[x.0], g.len(), |buf| {
                        for k in 0..buf.len() {
                            buf[k] = buf[k] + g[k] * (T::one() - yv[k] * yv[k]);
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let yv = &node.value;
                    add_into(&mut grads[x.0], g.len(), |buf| {
                        for k in 0..buf.len() {
                            buf[k] = buf[k] + g[k] * yv[k] * (T::one() - yv[k]);
                        }
                    });
                }
                Op::Exp(x) => {
                    let yv = &node.value;
                    add_into(&mut grads[x.0], g.len(), |buf| {
                        for k in 0..buf.len() {
                            buf[k] = buf[k] + g[k] * yv[k];
                        }
                    });
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &nodes[x.0].value;
                    add_into(&mut grads[x.0], g.len(), |buf| {
                        for k in 0..buf.len() {
                            if xv[k] >= *lo && xv[k] <= *hi {
                                buf[k] = buf[k] + g[k];
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let n = nodes[x.0].value.len();
                    add_into(&mut grads[x.0], n, |buf| buf.iter_mut().for_each(|a| *a = *a + g[0]));
                }
                Op::Xent { logits, target, probs } => {
                    add_into(&mut grads[logits.0], probs.len(), |buf| {
                        for (k, a) in buf.iter_mut().enumerate() {
                            let onehot = if k == *target { T::one() } else { T::zero() };
                            *a = *a + g[0] * (probs[k] - onehot);
                        }
                    });
                }
                Op::ConvPool { rows, banks, argmax } => {
                    let d = nodes[rows[0].0].value.len();
                    let len = rows.len();
                    let mut unit = 0;
                    for bank in banks {
                        let wd = store.value(bank.w).data();
                        let span = bank.width * d;
                        for f in 0..bank.filters {
                            let gu = g[unit];
                            let p = argmax[unit];
                            let active = node.value[unit] > T::zero();
                            unit += 1;
                            if !active || gu == T::zero() {
                                continue;
                            }
                            add_into(&mut pgrads[bank.b.0], bank.filters, |buf| buf[f] = buf[f] + gu);
                            let wrow = &wd[f * span..(f + 1) * span];
                            for o in 0..bank.width {
                                if p + o >= len {
                                    break;
                                }
                                let r = rows[p + o];
                                let rv = &nodes[r.0].value;
                                add_into(&mut pgrads[bank.w.0], bank.filters * span, |buf| {
                                    let seg = &mut buf[f * span + o * d..f * span + (o + 1) * d];
                                    seg.iter_mut().zip(rv).for_each(|(a, &v)| *a = *a + gu * v);
                                });
                                add_into(&mut grads[r.0], d, |buf| {
                                    buf.iter_mut()
                                        .zip(&wrow[o * d..(o + 1) * d])
                                        .for_each(|(a, &wv)| *a = *a + gu * wv);
                                });
                            }
                        }
                    }
                }
                Op::KlStandard { mean, log_var } => {
                    let (m, lv) = (&nodes[mean.0].value, &nodes[log_var.0].value);
                    let gs = g[0];
                    add_into(&mut grads[mean.0], m.len(), |buf| {
                        buf.iter_mut().zip(m).for_each(|(a, &mv)| *a = *a + gs * mv)
                    });
                    add_into(&mut grads[log_var.0], lv.len(), |buf| {
                        buf.iter_mut()
                            .zip(lv)
                            .for_each(|(a, &l)| *a = *a + gs * half * (l.exp() - T::one()))
                    });
                }
                Op::KlGaussians {
                    mean_q,
                    log_var_q,
                    mean_p,
                    log_var_p,
                } => {
                    let (mq, lq, mp, lp) = (
                        &nodes[mean_q.0].value,
                        &nodes[log_var_q.0].value,
                        &nodes[mean_p.0].value,
                        &nodes[log_var_p.0].value,
                    );
                    let n = mq.len();
                    let gs = g[0];
                    let mut d_mq = vec![T::zero(); n];
                    let mut d_lq = vec![T::zero(); n];
                    let mut d_lp = vec![T::zero(); n];
                    for k in 0..n {
                        let inv_vp = (-lp[k]).exp();
                        let diff = mq[k] - mp[k];
                        let vq = lq[k].exp();
                        d_mq[k] = gs * diff * inv_vp;
                        d_lq[k] = gs * half * (vq * inv_vp - T::one());
                        d_lp[k] = gs * half * (T::one() - (vq + diff * diff) * inv_vp);
                    }
                    add_into(&mut grads[mean_q.0], n, |buf| {
                        buf.iter_mut().zip(&d_mq).for_each(|(a, &v)| *a = *a + v)
                    });
                    add_into(&mut grads[mean_p.0], n, |buf| {
                        buf.iter_mut().zip(&d_mq).for_each(|(a, &v)| *a = *a - v)
                    });
                    add_into(&mut grads[log_var_q.0], n, |buf| {
                        buf.iter_mut().zip(&d_lq).for_each(|(a, &v)| *a = *a + v)
                    });
                    add_into(&mut grads[log_var_p.0], n, |buf| {
                        buf.iter_mut().zip(&d_lp).for_each(|(a, &v)| *a = *a + v)
                    });
                }
                Op::Sample { mean, log_var, noise } => {
                    let lv = &nodes[log_var.0].value;
                    add_into(&mut grads[mean.0], g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v)
                    });
                    add_into(&mut grads[log_var.0], g.len(), |buf| {
                        for k in 0..buf.len() {
                            buf[k] = buf[k] + g[k] * half * (half * lv[k]).exp() * noise[k];
                        }
                    });
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            params: pgrads,
            nodes: grads,
        })
    }
}
