//! Tape of operations recorded during a forward pass, replayed in reverse by
//! [`Graph::backward`].
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order. Parameters are borrowed from a
//! [`ParamStore`] rather than copied.

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-token constants for the clipped group-relative policy surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTokens {
    /// Log-probabilities under the sampling policy.
    pub old_logp: Vec<f64>,
    /// Log-probabilities under the frozen reference policy.
    pub ref_logp: Vec<f64>,
    /// Group-normalized advantage of the trajectory each token belongs to.
    pub advantage: Vec<f64>,
    /// Averaging weight, `1 / (N * |o_i|)` for a token of trajectory `i`.
    pub weight: Vec<f64>,
    pub clip_eps: f64,
    pub kl_beta: f64,
}

impl PolicyTokens {
    pub fn len(&self) -> usize {
        self.old_logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_logp.is_empty()
    }
}

/// Value and derivative of one token's term of the clipped objective.
/// Returns `(surrogate, kl, d(surrogate - beta*kl)/d logp)`.
pub fn policy_token_term(logp: f64, t: &PolicyTokens, i: usize) -> (f64, f64, f64) {
    let a = t.advantage[i];
    let ratio = (logp - t.old_logp[i]).exp();
    let clipped_ratio = ratio.clamp(1.0 - t.clip_eps, 1.0 + t.clip_eps);
    let unclipped = ratio * a;
    let clipped = clipped_ratio * a;
    let (surrogate, dsur) = if unclipped <= clipped {
        (unclipped, ratio * a)
    } else {
        (clipped, 0.0)
    };
    let kappa = (t.ref_logp[i] - logp).exp();
    let kl = kappa - (t.ref_logp[i] - logp) - 1.0;
    let dkl = 1.0 - kappa;
    (surrogate, kl, dsur - t.kl_beta * dkl)
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: Vec<Tensor>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<Vec<f64>>,
    },
    TokenLogProbs {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<Vec<f64>>,
    },
    MseConst {
        x: Var,
        target: Tensor,
    },
    Sum(Var),
    Policy {
        logp: Var,
        tokens: PolicyTokens,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// A single forward/backward tape.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Looks up a parameter by name; panics if absent.
    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul_nt(self.value(a), self.value(b));
        self.push(out, Op::MatMulNT(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(ta.rows, ta.cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let ta = self.value(a);
        let tr = self.value(row);
        assert_eq!(tr.len(), ta.cols, "add_row width mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&tr.data) {
                *o += *b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| tensor::gelu(x)).collect();
        let out = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (out, xhat, rstd) =
            tensor::layer_norm(self.value(x), &self.value(gain).data, &self.value(bias).data);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention. `q: Tq x d`, `k, v: Tk x d`.
    /// With `causal`, `Tq == Tk` and row `i` only sees keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(tq.cols, tk.cols);
        assert_eq!(tk.rows, tv.rows);
        assert_eq!(tq.cols % heads, 0);
        if causal {
            assert_eq!(tq.rows, tk.rows, "causal attention needs square scores");
        }
        let dh = tq.cols / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(tq.rows, tv.cols);
        let dv = tv.cols / heads;
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut p = Tensor::zeros(tq.rows, tk.rows);
            for i in 0..tq.rows {
                let qi = &tq.row(i)[h * dh..(h + 1) * dh];
                let limit = if causal { i + 1 } else { tk.rows };
                let prow = p.row_mut(i);
                for j in 0..limit {
                    prow[j] = tensor::dot(qi, &tk.row(j)[h * dh..(h + 1) * dh]) * scale;
                }
                tensor::softmax_in_place(&mut prow[..limit]);
                let orow = &mut out.data[i * tv.cols + h * dv..i * tv.cols + (h + 1) * dv];
                for j in 0..limit {
                    let w = prow[j];
                    let vj = &tv.row(j)[h * dv..(h + 1) * dv];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += w * *x;
                    }
                }
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let out = {
            let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::vstack(&ts)
        };
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat_cols row mismatch");
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
                off += t.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    fn row_softmaxes(&self, logits: Var, rows: &[usize]) -> Vec<Vec<f64>> {
        let t = self.value(logits);
        rows.iter()
            .map(|&r| {
                let mut p = t.row(r).to_vec();
                tensor::softmax_in_place(&mut p);
                p
            })
            .collect()
    }

    /// Mean cross-entropy of `targets[i]` under `softmax(logits[rows[i]])`.
    /// An empty selection yields an exact zero with no gradient.
    pub fn cross_entropy(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Var {
        assert_eq!(rows.len(), targets.len());
        let t = self.value(logits);
        let mut total = 0.0;
        for (&r, &y) in rows.iter().zip(targets) {
            let row = t.row(r);
            total += tensor::log_sum_exp(row) - row[y];
        }
        let mean = if rows.is_empty() {
            0.0
        } else {
            total / rows.len() as f64
        };
        let probs = self.row_softmaxes(logits, rows);
        self.push(
            Tensor::scalar(mean),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// `n x 1` vector of `log softmax(logits[rows[i]])[targets[i]]`.
    pub fn token_log_probs(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Var {
        assert_eq!(rows.len(), targets.len());
        let t = self.value(logits);
        let data = rows
            .iter()
            .zip(targets)
            .map(|(&r, &y)| {
                let row = t.row(r);
                row[y] - tensor::log_sum_exp(row)
            })
            .collect();
        let probs = self.row_softmaxes(logits, rows);
        self.push(
            Tensor::from_vec(rows.len(), 1, data),
            Op::TokenLogProbs {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean squared difference against a constant target of the same shape.
    pub fn mse_const(&mut self, x: Var, target: &Tensor) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), target.shape(), "mse shape mismatch");
        let n = t.len().max(1) as f64;
        let s: f64 = t
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push(
            Tensor::scalar(s / n),
            Op::MseConst {
                x,
                target: target.clone(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Clipped policy objective `sum_t w_t * (min[clip(r)A, rA] - beta*KL_t)`
    /// over the token log-probs in `logp` (an `n x 1` vector).
    pub fn policy_objective(&mut self, logp: Var, tokens: PolicyTokens) -> Var {
        let lp = self.value(logp);
        assert_eq!(lp.len(), tokens.len(), "policy token count mismatch");
        let mut total = 0.0;
        for i in 0..tokens.len() {
            let (sur, kl, _) = policy_token_term(lp.data[i], &tokens, i);
            total += tokens.weight[i] * (sur - tokens.kl_beta * kl);
        }
        self.push(Tensor::scalar(total), Op::Policy { logp, tokens })
    }

    /// Reverse sweep from a scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out: Vec<Option<Tensor>> = vec![None; self.params.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => accumulate(&mut out[id.0], g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    tensor::matmul_nt_acc(&g, tb, &mut ga);
                    let mut gb = Tensor::zeros(tb.rows, tb.cols);
                    tensor::matmul_tn_acc(ta, &g, &mut gb);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = tensor::matmul(&g, tb);
                    let mut gb = Tensor::zeros(tb.rows, tb.cols);
                    tensor::matmul_tn_acc(&g, ta, &mut gb);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale_assign(-1.0);
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[b.0], neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = hadamard(&g, tb);
                    let gb = hadamard(&g, ta);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(a, row) => {
                    let tr = self.value(*row);
                    let mut gr = Tensor::zeros(tr.rows, tr.cols);
                    for r in 0..g.rows {
                        for (o, x) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += *x;
                        }
                    }
                    accumulate(&mut grads[row.0], gr);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale_assign(*s);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gelu(a) => {
                    let ta = self.value(*a);
                    let data = g
                        .data
                        .iter()
                        .zip(&ta.data)
                        .map(|(gv, &x)| gv * tensor::gelu_grad(x))
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_vec(g.rows, g.cols, data));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = &self.value(*gain).data;
                    let n = g.cols;
                    let mut gx = Tensor::zeros(g.rows, n);
                    let mut gg = Tensor::zeros(1, n);
                    let mut gb = Tensor::zeros(1, n);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut dxhat = vec![0.0; n];
                        for c in 0..n {
                            gg.data[c] += gr[c] * xh[c];
                            gb.data[c] += gr[c];
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>()
                            / n as f64;
                        let out = gx.row_mut(r);
                        for c in 0..n {
                            out[c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gain.0], gg);
                    accumulate(&mut grads[bias.0], gb);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    causal,
                    probs,
                } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dh = tq.cols / heads;
                    let dv = tv.cols / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor::zeros(tq.rows, tq.cols);
                    let mut gk = Tensor::zeros(tk.rows, tk.cols);
                    let mut gvv = Tensor::zeros(tv.rows, tv.cols);
                    let mut dp = vec![0.0; tk.rows];
                    for (h, p) in probs.iter().enumerate() {
                        for i in 0..tq.rows {
                            let limit = if *causal { i + 1 } else { tk.rows };
                            let go = &g.row(i)[h * dv..(h + 1) * dv];
                            let prow = p.row(i);
                            let mut sum_pdp = 0.0;
                            for j in 0..limit {
                                let vj = &tv.row(j)[h * dv..(h + 1) * dv];
                                dp[j] = tensor::dot(go, vj);
                                sum_pdp += prow[j] * dp[j];
                                let gvrow = &mut gvv.data
                                    [j * tv.cols + h * dv..j * tv.cols + (h + 1) * dv];
                                for (o, x) in gvrow.iter_mut().zip(go) {
                                    *o += prow[j] * *x;
                                }
                            }
                            let qi = &tq.row(i)[h * dh..(h + 1) * dh];
                            for j in 0..limit {
                                let ds = prow[j] * (dp[j] - sum_pdp) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &tk.row(j)[h * dh..(h + 1) * dh];
                                let gqrow = &mut gq.data
                                    [i * tq.cols + h * dh..i * tq.cols + (h + 1) * dh];
                                for (o, x) in gqrow.iter_mut().zip(kj) {
                                    *o += ds * *x;
                                }
                                let gkrow = &mut gk.data
                                    [j * tk.cols + h * dh..j * tk.cols + (h + 1) * dh];
                                for (o, x) in gkrow.iter_mut().zip(qi) {
                                    *o += ds * *x;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                    accumulate(&mut grads[v.0], gvv);
                }
                Op::Gather { table, ids } => {
                    let tt = self.value(*table);
                    let mut gt = Tensor::zeros(tt.rows, tt.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += *x;
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let t = self.value(*p);
                        let data = g.data[off * g.cols..(off + t.rows) * g.cols].to_vec();
                        accumulate(&mut grads[p.0], Tensor::from_vec(t.rows, t.cols, data));
                        off += t.rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let t = self.value(*p);
                        let mut gp = Tensor::zeros(t.rows, t.cols);
                        for r in 0..t.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + t.cols]);
                        }
                        accumulate(&mut grads[p.0], gp);
                        off += t.cols;
                    }
                }
                Op::SelectRows { x, idx } => {
                    let t = self.value(*x);
                    let mut gx = Tensor::zeros(t.rows, t.cols);
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += *v;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::CrossEntropy {
                    logits,
                    rows,
                    targets,
                    probs,
                } => {
                    if rows.is_empty() {
                        continue;
                    }
                    let t = self.value(*logits);
                    let mut gl = Tensor::zeros(t.rows, t.cols);
                    let s = g.item() / rows.len() as f64;
                    for ((&r, &y), p) in rows.iter().zip(targets).zip(probs) {
                        let out = gl.row_mut(r);
                        for (o, pv) in out.iter_mut().zip(p) {
                            *o += s * pv;
                        }
                        out[y] -= s;
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::TokenLogProbs {
                    logits,
                    rows,
                    targets,
                    probs,
                } => {
                    let t = self.value(*logits);
                    let mut gl = Tensor::zeros(t.rows, t.cols);
                    for (i, ((&r, &y), p)) in rows.iter().zip(targets).zip(probs).enumerate() {
                        let s = g.data[i];
                        let out = gl.row_mut(r);
                        for (o, pv) in out.iter_mut().zip(p) {
                            *o -= s * pv;
                        }
                        out[y] += s;
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::MseConst { x, target } => {
                    let t = self.value(*x);
                    let s = 2.0 * g.item() / t.len().max(1) as f64;
                    let data = t
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(a, b)| s * (a - b))
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(t.rows, t.cols, data));
                }
                Op::Sum(x) => {
                    let t = self.value(*x);
                    accumulate(&mut grads[x.0], Tensor::filled(t.rows, t.cols, g.item()));
                }
                Op::Policy { logp, tokens } => {
                    let lp = self.value(*logp);
                    let s = g.item();
                    let data = (0..tokens.len())
                        .map(|i| {
                            let (_, _, d) = policy_token_term(lp.data[i], tokens, i);
                            s * tokens.weight[i] * d
                        })
                        .collect();
                    accumulate(&mut grads[logp.0], Tensor::from_vec(lp.rows, lp.cols, data));
                }
            }
        }
        Gradients::from_vec(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}
