//! Reverse-mode differentiation over a fixed set of 2-D operations.
//!
//! Values live on a [`Tape`] in creation order; [`Tape::backward`] walks it in
//! reverse. Discrete routing decisions are made outside the tape, so the tape
//! only sees gathers and scatters with fixed indices.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
        probs: Vec<Mat>,
    },
    Softmax {
        x: Var,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterAdd {
        parts: Vec<(Var, Vec<usize>)>,
    },
    GatherElems {
        x: Var,
        coords: Vec<(usize, usize)>,
    },
    MulCol {
        x: Var,
        col: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Mat,
    },
    WeightedSum {
        x: Var,
        weights: Mat,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients of leaves indexed by [`Var`]; `None` where nothing flowed.
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    matmul_flops: u64,
}

fn row_softmax_masked(x: ArrayView2<'_, f64>, mask: Option<ArrayView2<'_, bool>>) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let allowed = |j: usize| mask.is_none_or(|m| m[[i, j]]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| allowed(*j))
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                out[[i, j]] = e;
                sum += e;
            }
        }
        out.row_mut(i).mapv_inplace(|v| v / sum);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add FLOPs (counted as 2) of every matrix product recorded so far.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul shape mismatch");
        let flops = 2 * (av.nrows() * av.ncols() * bv.ncols()) as u64;
        let out = av.dot(bv);
        self.matmul_flops += flops;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `x + bias` with `bias` a single row broadcast over all rows of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        assert_eq!(self.value(bias).nrows(), 1);
        let out = self.value(x) + self.value(bias);
        self.push(out, Op::AddRow(x, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x) * factor;
        self.push(out, Op::Scale(x, factor))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product attention over consecutive blocks of
    /// `seq_len` rows. Bidirectional unless `causal`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, seq_len: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        assert!(rows % seq_len == 0 && d % n_heads == 0);
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((rows, d));
        let mut probs = Vec::with_capacity(rows / seq_len * n_heads);
        for b in 0..rows / seq_len {
            let r = b * seq_len..(b + 1) * seq_len;
            for h in 0..n_heads {
                let c = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![r.clone(), c.clone()]);
                let kh = kv.slice(s![r.clone(), c.clone()]);
                let vh = vv.slice(s![r.clone(), c.clone()]);
                let mut scores = qh.dot(&kh.t()) * scale;
                if causal {
                    for i in 0..seq_len {
                        for j in i + 1..seq_len {
                            scores[[i, j]] = f64::NEG_INFINITY;
                        }
                    }
                }
                let p = row_softmax_masked(scores.view(), None);
                out.slice_mut(s![r.clone(), c]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.matmul_flops += 4 * (rows * seq_len * d) as u64;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                seq_len,
                probs,
            },
        )
    }

    /// Row softmax restricted to `mask` entries (others are 0). Rows with no
    /// allowed entry are all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&Array2<bool>>) -> Var {
        let out = row_softmax_masked(self.value(x).view(), mask.map(|m| m.view()));
        self.push(out, Op::Softmax { x })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros((rows.len(), xv.ncols()));
        for (r, &src) in rows.iter().enumerate() {
            out.row_mut(r).assign(&xv.row(src));
        }
        self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// An `n_rows x d` matrix where row `idx[r]` of each part accumulates
    /// row `r` of that part.
    pub fn scatter_add(&mut self, n_rows: usize, d: usize, parts: Vec<(Var, Vec<usize>)>) -> Var {
        let mut out = Mat::zeros((n_rows, d));
        for (part, idx) in &parts {
            let pv = self.value(*part);
            assert_eq!(pv.dim(), (idx.len(), d));
            for (r, &dst) in idx.iter().enumerate() {
                out.row_mut(dst).scaled_add(1.0, &pv.row(r));
            }
        }
        self.push(out, Op::ScatterAdd { parts })
    }

    /// Column vector of `x[i, j]` for each coordinate.
    pub fn gather_elems(&mut self, x: Var, coords: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let out = Mat::from_shape_fn((coords.len(), 1), |(r, _)| xv[coords[r]]);
        self.push(
            out,
            Op::GatherElems {
                x,
                coords: coords.to_vec(),
            },
        )
    }

    /// Scales row `i` of `x` by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let cv = self.value(col);
        assert_eq!(cv.dim(), (self.value(x).nrows(), 1));
        let out = self.value(x) * cv;
        self.push(out, Op::MulCol { x, col })
    }

    /// Mean cross-entropy of `logits[row]` against `class` over `(row, class)` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        assert!(!targets.is_empty());
        let lv = self.value(logits);
        let mut probs = Mat::zeros((targets.len(), lv.ncols()));
        let mut total = 0.0;
        for (r, &(row, class)) in targets.iter().enumerate() {
            let lr = lv.row(row);
            let max = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = lr.iter().map(|v| (v - max).exp()).sum();
            total += max + sum.ln() - lr[class];
            Zip::from(probs.row_mut(r))
                .and(&lr)
                .for_each(|p, &l| *p = (l - max).exp() / sum);
        }
        let out = Mat::from_elem((1, 1), total / targets.len() as f64);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Scalar `sum(x * weights)` for constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Mat) -> Var {
        assert_eq!(self.value(x).dim(), weights.dim());
        let out = Mat::from_elem((1, 1), (self.value(x) * &weights).sum());
        self.push(out, Op::WeightedSum { x, weights })
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let mut out = self.value(terms[0]).clone();
        for t in &terms[1..] {
            out += self.value(*t);
        }
        self.push(out, Op::Sum(terms.to_vec()))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Grads {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            // Leaves keep their gradient; interior gradients are consumed.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(x, bias) => {
                    acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(x, f) => acc(&mut grads, *x, &g * *f),
                Op::Silu(x) => {
                    let dx = Zip::from(&g).and(self.value(*x)).map_collect(|&g, &x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * gv;
                    let d = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(i);
                        let xh = xhat.row(i);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let c = inv_std[i] / d;
                        Zip::from(&mut row)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &a, &b| *o = c * (d * a - sum_dh - b * sum_dh_xh));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Embed { table, ids } => {
                    let mut dt = Mat::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        dt.row_mut(id).scaled_add(1.0, &g.row(r));
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    n_heads,
                    seq_len,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, d) = qv.dim();
                    let dh = d / n_heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros((rows, d));
                    let mut dk = Mat::zeros((rows, d));
                    let mut dv = Mat::zeros((rows, d));
                    for b in 0..rows / seq_len {
                        let r = b * seq_len..(b + 1) * seq_len;
                        for h in 0..*n_heads {
                            let c = h * dh..(h + 1) * dh;
                            let p = &probs[b * n_heads + h];
                            let go = g.slice(s![r.clone(), c.clone()]);
                            let qh = qv.slice(s![r.clone(), c.clone()]);
                            let kh = kv.slice(s![r.clone(), c.clone()]);
                            let vh = vv.slice(s![r.clone(), c.clone()]);
                            dv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&go));
                            let dp = go.dot(&vh.t());
                            let mut ds = p * &dp;
                            for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                                let dot = p.row(i).dot(&dp.row(i));
                                Zip::from(&mut row).and(&p.row(i)).for_each(|o, &pi| *o -= pi * dot);
                            }
                            ds *= scale;
                            dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kh));
                            dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qh));
                        }
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let mut dx = y * &g;
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dot = y.row(i).dot(&g.row(i));
                        Zip::from(&mut row).and(&y.row(i)).for_each(|o, &yi| *o -= yi * dot);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::GatherRows { x, rows } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (r, &src) in rows.iter().enumerate() {
                        dx.row_mut(src).scaled_add(1.0, &g.row(r));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::ScatterAdd { parts } => {
                    for (part, idx) in parts {
                        let mut dp = Mat::zeros((idx.len(), g.ncols()));
                        for (r, &dst) in idx.iter().enumerate() {
                            dp.row_mut(r).assign(&g.row(dst));
                        }
                        acc(&mut grads, *part, dp);
                    }
                }
                Op::GatherElems { x, coords } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (r, &c) in coords.iter().enumerate() {
                        dx[c] += g[[r, 0]];
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::MulCol { x, col } => {
                    let xv = self.value(*x);
                    let dcol = (&g * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *x, &g * self.value(*col));
                    acc(&mut grads, *col, dcol);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut dl = Mat::zeros(self.value(*logits).dim());
                    for (r, &(row, class)) in targets.iter().enumerate() {
                        dl.row_mut(row).scaled_add(scale, &probs.row(r));
                        dl[[row, class]] -= scale;
                    }
                    acc(&mut grads, *logits, dl);
                }
                Op::WeightedSum { x, weights } => acc(&mut grads, *x, weights * g[[0, 0]]),
                Op::Sum(terms) => {
                    for t in terms {
                        acc(&mut grads, *t, g.clone());
                    }
                }
            }
        }
        Grads(grads)
    }
}
