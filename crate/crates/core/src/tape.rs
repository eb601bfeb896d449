//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] with output seeds walks the record in reverse and
//! returns the gradient of every node. Ops are coarse (a whole linear
//! layer, a whole grouped multi-head attention) so that a batch builds a
//! few hundred nodes rather than millions.

use ndarray::{s, Array2, ArrayView2, Zip};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a grouped attention call.
///
/// Rows of the query matrix are `groups` consecutive blocks of
/// `queries` rows; keys and values are `groups` blocks of `keys` rows.
/// Each query block only attends to its own key block.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub groups: usize,
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
    /// `true` marks a valid key; length `groups * keys`.
    pub key_mask: Vec<bool>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        scale: f64,
        // One probability matrix per (group, head).
        probs: Vec<Array2<f64>>,
    },
    ConcatHeads {
        a: Var,
        b: Var,
        heads: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ScaleRows {
        x: Var,
        factors: Vec<f64>,
    },
    Sinusoid {
        x: Var,
        periods: Vec<f64>,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of every node after [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no seed reaches it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

/// Column sums as a `1 × d` row, added in row order whatever the memory
/// layout, so results do not depend on how `a` was produced.
fn col_sum(a: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((1, a.ncols()));
    for row in a.rows() {
        Zip::from(out.row_mut(0)).and(&row).for_each(|o, &v| *o += v);
    }
    out
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Geometric periods from 1 to `max_period`, one per sin/cos pair.
pub fn sinusoid_periods(half: usize, max_period: f64) -> Vec<f64> {
    if half <= 1 {
        return vec![1.0; half];
    }
    (0..half)
        .map(|k| max_period.powf(k as f64 / (half - 1) as f64))
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Input or parameter node.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `x · w + b` with `b` a `1 × out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut y = self.value(x).dot(self.value(w));
        y += self.value(b);
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(self.value(b));
        self.push(y, Op::MatMul { a, b })
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add { a, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(sigmoid);
        self.push(y, Op::Sigmoid { x })
    }

    /// Row-wise layer normalization with `1 × d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let y = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Grouped multi-head attention `softmax(Q Kᵀ · scale) V` with masked keys.
    ///
    /// Masked keys receive exactly zero weight. A group with no valid key
    /// produces zero rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout, scale: f64) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttentionLayout {
            groups,
            queries,
            keys,
            heads,
            ..
        } = layout;
        assert_eq!(qv.nrows(), groups * queries, "query rows");
        assert_eq!(kv.nrows(), groups * keys, "key rows");
        assert_eq!(vv.nrows(), groups * keys, "value rows");
        assert_eq!(qv.ncols(), kv.ncols(), "query/key width");
        assert_eq!(layout.key_mask.len(), groups * keys, "key mask length");
        assert!(qv.ncols() % heads == 0 && vv.ncols() % heads == 0, "head split");
        let dq = qv.ncols() / heads;
        let dv = vv.ncols() / heads;

        let mut out = Array2::<f64>::zeros((groups * queries, vv.ncols()));
        let mut probs = Vec::with_capacity(groups * heads);
        for g in 0..groups {
            let (qr, kr) = (g * queries..(g + 1) * queries, g * keys..(g + 1) * keys);
            let mask = &layout.key_mask[kr.clone()];
            for h in 0..heads {
                let qh = qv.slice(s![qr.clone(), h * dq..(h + 1) * dq]);
                let kh = kv.slice(s![kr.clone(), h * dq..(h + 1) * dq]);
                let vh = vv.slice(s![kr.clone(), h * dv..(h + 1) * dv]);
                let mut p = qh.dot(&kh.t());
                for mut row in p.rows_mut() {
                    masked_softmax(row.as_slice_mut().unwrap(), mask, scale);
                }
                out.slice_mut(s![qr.clone(), h * dv..(h + 1) * dv]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                scale,
                probs,
            },
        )
    }

    /// Concatenates column blocks per head: head `h` of the output is
    /// `[a_h | b_h]`. With one head this is plain column concatenation.
    pub fn concat_heads(&mut self, a: Var, b: Var, heads: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.nrows(), bv.nrows());
        assert!(av.ncols() % heads == 0 && bv.ncols() % heads == 0);
        let (wa, wb) = (av.ncols() / heads, bv.ncols() / heads);
        let mut y = Array2::zeros((av.nrows(), av.ncols() + bv.ncols()));
        for h in 0..heads {
            let base = h * (wa + wb);
            y.slice_mut(s![.., base..base + wa]).assign(&av.slice(s![.., h * wa..(h + 1) * wa]));
            y.slice_mut(s![.., base + wa..base + wa + wb])
                .assign(&bv.slice(s![.., h * wb..(h + 1) * wb]));
        }
        self.push(y, Op::ConcatHeads { a, b, heads })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(y, Op::SliceCols { x, start })
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let mut y = self.value(x).clone();
        assert_eq!(y.nrows(), factors.len());
        for (mut row, f) in y.rows_mut().into_iter().zip(&factors) {
            row *= *f;
        }
        self.push(y, Op::ScaleRows { x, factors })
    }

    /// Maps an `n × 1` column to `n × dim` rows of
    /// `[sin(x·scale / p_k) | cos(x·scale / p_k)]`.
    pub fn sinusoid(&mut self, x: Var, dim: usize, max_period: f64, scale: f64) -> Var {
        assert!(dim % 2 == 0, "sinusoid dim must be even");
        assert_eq!(self.value(x).ncols(), 1);
        let half = dim / 2;
        let periods = sinusoid_periods(half, max_period);
        let xv = self.value(x);
        let mut y = Array2::zeros((xv.nrows(), dim));
        for (i, &val) in xv.column(0).iter().enumerate() {
            for (k, p) in periods.iter().enumerate() {
                let arg = val * scale / p;
                let (sn, cs) = sin_cos(arg);
                y[[i, k]] = sn;
                y[[i, half + k]] = cs;
            }
        }
        self.push(y, Op::Sinusoid { x, periods, scale })
    }

    /// Propagates the seeded output gradients back to every node.
    pub fn backward(&self, seeds: Vec<(Var, Array2<f64>)>) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.value(v).dim(), "seed shape");
            accumulate(&mut grads, v, g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, dy: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                accumulate(grads, *x, dy.dot(&self.value(*w).t()));
                accumulate(grads, *w, self.value(*x).t().dot(dy));
                accumulate(grads, *b, col_sum(dy));
            }
            Op::MatMul { a, b } => {
                accumulate(grads, *a, dy.dot(&self.value(*b).t()));
                accumulate(grads, *b, self.value(*a).t().dot(dy));
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, dy.clone());
                let bv = self.value(*b);
                if bv.dim() == dy.dim() {
                    accumulate(grads, *b, dy.clone());
                } else {
                    accumulate(grads, *b, col_sum(dy));
                }
            }
            Op::Relu { x } => {
                let mut dx = dy.clone();
                Zip::from(&mut dx).and(self.value(*x)).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let mut dx = dy.clone();
                Zip::from(&mut dx).and(&node.value).for_each(|d, &s| *d *= s * (1.0 - s));
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                accumulate(grads, *beta, col_sum(dy));
                accumulate(grads, *gamma, col_sum(&(dy * xhat)));
                let dxhat = dy * self.value(*gamma);
                let d = dxhat.ncols() as f64;
                let mut dx = Array2::zeros(dxhat.dim());
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let sum: f64 = dh.iter().sum();
                    let dot: f64 = dh.iter().zip(&xh).map(|(a, b)| a * b).sum();
                    let inv = inv_std[r];
                    Zip::from(&mut row)
                        .and(&dh)
                        .and(&xh)
                        .for_each(|o, &g, &h| *o = inv / d * (d * g - sum - h * dot));
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                scale,
                probs,
            } => {
                let (dq_full, dk_full, dv_full) =
                    self.attention_backward(*q, *k, *v, layout, *scale, probs, dy.view());
                accumulate(grads, *q, dq_full);
                accumulate(grads, *k, dk_full);
                accumulate(grads, *v, dv_full);
            }
            Op::ConcatHeads { a, b, heads } => {
                let (ca, cb) = (self.value(*a).ncols(), self.value(*b).ncols());
                let (wa, wb) = (ca / heads, cb / heads);
                let mut da = Array2::zeros((dy.nrows(), ca));
                let mut db = Array2::zeros((dy.nrows(), cb));
                for h in 0..*heads {
                    let base = h * (wa + wb);
                    da.slice_mut(s![.., h * wa..(h + 1) * wa])
                        .assign(&dy.slice(s![.., base..base + wa]));
                    db.slice_mut(s![.., h * wb..(h + 1) * wb])
                        .assign(&dy.slice(s![.., base + wa..base + wa + wb]));
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::SliceCols { x, start } => {
                let mut dx = Array2::zeros(self.value(*x).dim());
                dx.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                accumulate(grads, *x, dx);
            }
            Op::ScaleRows { x, factors } => {
                let mut dx = dy.clone();
                for (mut row, f) in dx.rows_mut().into_iter().zip(factors) {
                    row *= *f;
                }
                accumulate(grads, *x, dx);
            }
            Op::Sinusoid { x, periods, scale } => {
                let half = periods.len();
                let xv = self.value(*x);
                let mut dx = Array2::zeros(xv.dim());
                for i in 0..xv.nrows() {
                    let mut acc = 0.0;
                    for (k, p) in periods.iter().enumerate() {
                        let f = scale / p;
                        let arg = xv[[i, 0]] * f;
                        let (sn, cs) = sin_cos(arg);
                        acc += dy[[i, k]] * cs * f - dy[[i, half + k]] * sn * f;
                    }
                    dx[[i, 0]] = acc;
                }
                accumulate(grads, *x, dx);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        scale: f64,
        probs: &[Array2<f64>],
        dy: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let heads = layout.heads;
        let dq = qv.ncols() / heads;
        let dvw = vv.ncols() / heads;
        let mut gq = Array2::zeros(qv.dim());
        let mut gk = Array2::zeros(kv.dim());
        let mut gv = Array2::zeros(vv.dim());
        for g in 0..layout.groups {
            let qr = g * layout.queries..(g + 1) * layout.queries;
            let kr = g * layout.keys..(g + 1) * layout.keys;
            for h in 0..heads {
                let p = &probs[g * heads + h];
                let qc = h * dq..(h + 1) * dq;
                let vc = h * dvw..(h + 1) * dvw;
                let d_out = dy.slice(s![qr.clone(), vc.clone()]);
                let vh = vv.slice(s![kr.clone(), vc.clone()]);
                gv.slice_mut(s![kr.clone(), vc.clone()]).assign(&p.t().dot(&d_out));
                let dp = d_out.dot(&vh.t());
                let mut ds = p * &dp;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let total: f64 = row.iter().sum();
                    Zip::from(&mut row).and(&prow).for_each(|d, &pp| *d -= pp * total);
                }
                ds *= scale;
                let kh = kv.slice(s![kr.clone(), qc.clone()]);
                let qh = qv.slice(s![qr.clone(), qc.clone()]);
                gq.slice_mut(s![qr.clone(), qc.clone()]).assign(&ds.dot(&kh));
                gk.slice_mut(s![kr.clone(), qc.clone()]).assign(&ds.t().dot(&qh));
            }
        }
        (gq, gk, gv)
    }
}

/// `(sin x, cos x)` from separate libm calls. The optimizer may otherwise
/// merge the pair into `sincos`, whose result can differ in the last bit,
/// and whether it does depends on the build profile.
pub fn sin_cos(x: f64) -> (f64, f64) {
    (x.sin(), cos_unfused(x))
}

#[inline(never)]
fn cos_unfused(x: f64) -> f64 {
    x.cos()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn masked_softmax(row: &mut [f64], mask: &[bool], scale: f64) {
    let mut max = f64::NEG_INFINITY;
    for (x, &ok) in row.iter_mut().zip(mask) {
        if ok {
            *x *= scale;
            max = max.max(*x);
        }
    }
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for (x, &ok) in row.iter_mut().zip(mask) {
        if ok {
            *x = (*x - max).exp();
            total += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
