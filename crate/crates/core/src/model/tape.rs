//! Reverse-mode autodiff over row-major matrices.
//!
//! The graph is rebuilt for every sequence. Forward values are computed with
//! the kernels in [`super::kernels`], so a teacher-forced pass through the
//! graph reproduces the incremental decoder bit for bit.

use super::kernels::{
    add_bias, attention_row, embed_sum_row, linear_row, rmsnorm_row, sigmoid, silu, softmax_xent_row, swiglu_row,
    Rope,
};
use super::params::ParamStore;

pub(crate) type NodeId = usize;

enum Op {
    /// Per row, a list of `(param, table row)` summed in order.
    EmbedSum { terms: Vec<Vec<(usize, usize)>> },
    Linear { x: NodeId, w: usize, b: Option<usize> },
    Add(NodeId, NodeId),
    RmsNorm { x: NodeId, gain: usize, inv: Vec<f64> },
    Rope { x: NodeId, rope: Rope, positions: Vec<usize> },
    /// Causal attention within consecutive blocks of `block` rows.
    Attention { q: NodeId, k: NodeId, v: NodeId, n_heads: usize, block: usize, probs: Vec<f64> },
    SwiGlu { gate: NodeId, up: NodeId },
    RepeatRows { x: NodeId, times: usize },
    SelectRows { x: NodeId, rows: Vec<usize> },
    /// `scale · Σ -log softmax(row)[target]` over rows with a target.
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, scale: f64, probs: Vec<f64> },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Parameter gradients, shaped like the store.
#[derive(Debug, Clone)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros(params: &ParamStore) -> Self {
        Self { data: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.data {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) struct Graph<'p> {
    params: &'p ParamStore,
    eps: f64,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, eps: f64) -> Self {
        Self { params, eps, nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn row(&self, id: NodeId, r: usize) -> &[f64] {
        let c = self.nodes[id].cols;
        &self.nodes[id].value[r * c..(r + 1) * c]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        self.nodes.len() - 1
    }

    pub fn embed_sum(&mut self, terms: Vec<Vec<(usize, usize)>>, dim: usize) -> NodeId {
        let rows = terms.len();
        let mut value = vec![0.0; rows * dim];
        for (r, row_terms) in terms.iter().enumerate() {
            let refs: Vec<(&[f64], usize)> =
                row_terms.iter().map(|&(p, idx)| (self.params.tensors[p].data.as_slice(), idx)).collect();
            embed_sum_row(&refs, dim, &mut value[r * dim..(r + 1) * dim]);
        }
        self.push(rows, dim, value, Op::EmbedSum { terms })
    }

    pub fn linear(&mut self, x: NodeId, w: usize, b: Option<usize>) -> NodeId {
        let (rows, inp) = self.shape(x);
        let wt = &self.params.tensors[w];
        debug_assert_eq!(wt.shape[0], inp);
        let out = wt.shape[1];
        let mut value = vec![0.0; rows * out];
        for r in 0..rows {
            let o = &mut value[r * out..(r + 1) * out];
            linear_row(&self.nodes[x].value[r * inp..(r + 1) * inp], &wt.data, o);
            if let Some(b) = b {
                add_bias(o, &self.params.tensors[b].data);
            }
        }
        self.push(rows, out, value, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (rows, cols) = self.shape(a);
        debug_assert_eq!(self.shape(b), (rows, cols));
        let value = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x + y).collect();
        self.push(rows, cols, value, Op::Add(a, b))
    }

    pub fn rmsnorm(&mut self, x: NodeId, gain: usize) -> NodeId {
        let (rows, cols) = self.shape(x);
        let mut value = vec![0.0; rows * cols];
        let mut inv = Vec::with_capacity(rows);
        let g = &self.params.tensors[gain].data;
        for r in 0..rows {
            inv.push(rmsnorm_row(
                &self.nodes[x].value[r * cols..(r + 1) * cols],
                g,
                self.eps,
                &mut value[r * cols..(r + 1) * cols],
            ));
        }
        self.push(rows, cols, value, Op::RmsNorm { x, gain, inv })
    }

    pub fn rope(&mut self, x: NodeId, rope: &Rope, positions: Vec<usize>) -> NodeId {
        let (rows, cols) = self.shape(x);
        let mut value = self.nodes[x].value.clone();
        for (r, &pos) in positions.iter().enumerate() {
            rope.rotate(&mut value[r * cols..(r + 1) * cols], pos, 1.0);
        }
        self.push(rows, cols, value, Op::Rope { x, rope: rope.clone(), positions })
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, n_heads: usize, block: usize) -> NodeId {
        let (rows, d) = self.shape(q);
        let stride = n_heads * block;
        let mut probs = vec![0.0; rows * stride];
        let mut value = vec![0.0; rows * d];
        let mut scratch = Vec::new();
        for r in 0..rows {
            let start = (r / block) * block;
            let n_keys = r - start + 1;
            attention_row(
                &self.nodes[q].value[r * d..(r + 1) * d],
                &self.nodes[k].value[start * d..(r + 1) * d],
                &self.nodes[v].value[start * d..(r + 1) * d],
                n_keys,
                n_heads,
                &mut value[r * d..(r + 1) * d],
                &mut scratch,
                Some(&mut probs[r * stride..r * stride + n_heads * n_keys]),
            );
        }
        self.push(rows, d, value, Op::Attention { q, k, v, n_heads, block, probs })
    }

    pub fn swiglu(&mut self, gate: NodeId, up: NodeId) -> NodeId {
        let (rows, cols) = self.shape(gate);
        let mut value = vec![0.0; rows * cols];
        swiglu_row(&self.nodes[gate].value, &self.nodes[up].value, &mut value);
        self.push(rows, cols, value, Op::SwiGlu { gate, up })
    }

    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        let (rows, cols) = self.shape(x);
        let mut value = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                value.extend_from_slice(&self.nodes[x].value[r * cols..(r + 1) * cols]);
            }
        }
        self.push(rows * times, cols, value, Op::RepeatRows { x, times })
    }

    pub fn select_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let cols = self.nodes[x].cols;
        let mut value = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            value.extend_from_slice(&self.nodes[x].value[r * cols..(r + 1) * cols]);
        }
        self.push(rows.len(), cols, value, Op::SelectRows { x, rows })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<Option<usize>>, scale: f64) -> NodeId {
        let (rows, cols) = self.shape(logits);
        debug_assert_eq!(targets.len(), rows);
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                total += softmax_xent_row(
                    &self.nodes[logits].value[r * cols..(r + 1) * cols],
                    *t,
                    &mut probs[r * cols..(r + 1) * cols],
                );
            }
        }
        self.push(1, 1, vec![total * scale], Op::CrossEntropy { logits, targets, scale, probs })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let v = terms.iter().map(|&(n, w)| w * self.nodes[n].value[0]).sum();
        self.push(1, 1, vec![v], Op::WeightedSum { terms })
    }

    /// Accumulate `d loss / d param` into `grads`.
    pub fn backward(&self, loss: NodeId, grads: &mut Grads) {
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(dy) = g[id].take() else { continue };
            let node = &self.nodes[id];
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::EmbedSum { terms } => {
                    for (r, row_terms) in terms.iter().enumerate() {
                        let dr = &dy[r * cols..(r + 1) * cols];
                        for &(p, idx) in row_terms {
                            for (gp, d) in grads.data[p][idx * cols..(idx + 1) * cols].iter_mut().zip(dr) {
                                *gp += d;
                            }
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let inp = self.nodes[*x].cols;
                    let wt = &self.params.tensors[*w].data;
                    let xv = &self.nodes[*x].value;
                    let dx = slot(&mut g, *x, rows * inp);
                    for r in 0..rows {
                        let dr = &dy[r * cols..(r + 1) * cols];
                        let xr = &xv[r * inp..(r + 1) * inp];
                        for p in 0..inp {
                            let wrow = &wt[p * cols..(p + 1) * cols];
                            dx[r * inp + p] += wrow.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>();
                            let xp = xr[p];
                            if xp != 0.0 {
                                for (gw, d) in grads.data[*w][p * cols..(p + 1) * cols].iter_mut().zip(dr) {
                                    *gw += xp * d;
                                }
                            }
                        }
                        if let Some(b) = b {
                            for (gb, d) in grads.data[*b].iter_mut().zip(dr) {
                                *gb += d;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for n in [*a, *b] {
                        for (s, d) in slot(&mut g, n, rows * cols).iter_mut().zip(&dy) {
                            *s += d;
                        }
                    }
                }
                Op::RmsNorm { x, gain, inv } => {
                    let gv = &self.params.tensors[*gain].data;
                    let xv = &self.nodes[*x].value;
                    let dx = slot(&mut g, *x, rows * cols);
                    for r in 0..rows {
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let dr = &dy[r * cols..(r + 1) * cols];
                        let s = inv[r];
                        let mut dot = 0.0;
                        for c in 0..cols {
                            grads.data[*gain][c] += dr[c] * xr[c] * s;
                            dot += gv[c] * dr[c] * xr[c];
                        }
                        let k = s * s * s * dot / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] += s * gv[c] * dr[c] - xr[c] * k;
                        }
                    }
                }
                Op::Rope { x, rope, positions } => {
                    let mut back = dy.clone();
                    for (r, &pos) in positions.iter().enumerate() {
                        rope.rotate(&mut back[r * cols..(r + 1) * cols], pos, -1.0);
                    }
                    for (s, d) in slot(&mut g, *x, rows * cols).iter_mut().zip(&back) {
                        *s += d;
                    }
                }
                Op::Attention { q, k, v, n_heads, block, probs } => {
                    let d = cols;
                    let hd = d / n_heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let stride = n_heads * block;
                    let (qv, kv, vv) = (&self.nodes[*q].value, &self.nodes[*k].value, &self.nodes[*v].value);
                    let mut dq = vec![0.0; rows * d];
                    let mut dk = vec![0.0; rows * d];
                    let mut dv = vec![0.0; rows * d];
                    let mut dp = Vec::new();
                    for r in 0..rows {
                        let start = (r / block) * block;
                        let n_keys = r - start + 1;
                        for h in 0..*n_heads {
                            let p = &probs[r * stride + h * n_keys..r * stride + (h + 1) * n_keys];
                            let dout = &dy[r * d + h * hd..r * d + (h + 1) * hd];
                            dp.clear();
                            for i in 0..n_keys {
                                let row = (start + i) * d + h * hd;
                                let vh = &vv[row..row + hd];
                                dp.push(dout.iter().zip(vh).map(|(a, b)| a * b).sum::<f64>());
                                for (gv, o) in dv[row..row + hd].iter_mut().zip(dout) {
                                    *gv += p[i] * o;
                                }
                            }
                            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qh = &qv[r * d + h * hd..r * d + (h + 1) * hd];
                            for i in 0..n_keys {
                                let ds = p[i] * (dp[i] - mean) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let row = (start + i) * d + h * hd;
                                for c in 0..hd {
                                    dq[r * d + h * hd + c] += ds * kv[row + c];
                                    dk[row + c] += ds * qh[c];
                                }
                            }
                        }
                    }
                    for (n, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                        for (s, x) in slot(&mut g, n, rows * d).iter_mut().zip(&buf) {
                            *s += x;
                        }
                    }
                }
                Op::SwiGlu { gate, up } => {
                    let gv = &self.nodes[*gate].value;
                    let uv = &self.nodes[*up].value;
                    let mut dg = vec![0.0; rows * cols];
                    let mut du = vec![0.0; rows * cols];
                    for i in 0..rows * cols {
                        let x = gv[i];
                        let s = sigmoid(x);
                        dg[i] = dy[i] * uv[i] * s * (1.0 + x * (1.0 - s));
                        du[i] = dy[i] * silu(x);
                    }
                    for (n, buf) in [(*gate, dg), (*up, du)] {
                        for (s, x) in slot(&mut g, n, rows * cols).iter_mut().zip(&buf) {
                            *s += x;
                        }
                    }
                }
                Op::RepeatRows { x, times } => {
                    let in_rows = self.nodes[*x].rows;
                    let dx = slot(&mut g, *x, in_rows * cols);
                    for r in 0..rows {
                        let src = r / times;
                        for c in 0..cols {
                            dx[src * cols + c] += dy[r * cols + c];
                        }
                    }
                }
                Op::SelectRows { x, rows: picked } => {
                    let in_rows = self.nodes[*x].rows;
                    let dx = slot(&mut g, *x, in_rows * cols);
                    for (i, &src) in picked.iter().enumerate() {
                        for c in 0..cols {
                            dx[src * cols + c] += dy[i * cols + c];
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, scale, probs } => {
                    let lc = self.nodes[*logits].cols;
                    let lr = self.nodes[*logits].rows;
                    let up = dy[0] * scale;
                    let dl = slot(&mut g, *logits, lr * lc);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            for c in 0..lc {
                                dl[r * lc + c] += up * probs[r * lc + c];
                            }
                            dl[r * lc + t] -= up;
                        }
                    }
                }
                Op::WeightedSum { terms } => {
                    for &(n, w) in terms {
                        slot(&mut g, n, 1)[0] += w * dy[0];
                    }
                }
            }
        }
    }
}

fn slot(g: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    g[id].get_or_insert_with(|| vec![0.0; len])
}
