//! Reverse-mode automatic differentiation over dense row-major `f64` arrays.
//!
//! A [`Tape`] records every operation of a forward pass as a node in a flat
//! arena. Node ids are topologically ordered by construction, so
//! [`Tape::backward`] is a single reverse sweep. Everything is `f64` and
//! single-threaded per tape; parameters live outside the tape and are leased
//! in as leaves for each step.

use crate::error::{Error, Result};

/// Handle into a [`Tape`]. Cheap to copy; only valid for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// (m x n) + (n) broadcast over rows. The only broadcasting we support.
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    /// Row-wise softmax over the last dimension.
    Softmax(Var),
    /// Row-wise log-softmax over the last dimension.
    LogSoftmax(Var),
    /// Row-wise layer norm; aux holds (mean, inv_std) per row.
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    /// 1-D convolution over time. Input (t x c_in), weight (c_out x c_in * k),
    /// kernel k, stride s, padding p.
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Row gather from an embedding table; backward scatter-adds.
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    /// out[i] = x[i, ids[i]].
    Pick {
        x: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Mean(Var),
    Sum(Var),
    /// Elementwise product with a constant 0/1-scaled mask (dropout).
    MaskMul {
        x: Var,
        mask: Vec<f64>,
    },
    /// CTC negative log-likelihood of a label sequence given log-probs.
    /// aux holds d(loss)/d(log_probs) computed at forward time.
    Ctc {
        log_probs: Var,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
    aux: Vec<f64>,
}

/// Arena of recorded operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let n = data.len();
        self.nodes.push(Node {
            shape,
            data,
            grad: vec![0.0; n],
            requires_grad,
            op,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, shape: &[usize], data: &[f64], requires_grad: bool) -> Var {
        self.push(shape.to_vec(), data.to_vec(), requires_grad, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(&[1], &[v], false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("expected rank <= 2, got {s:?}"),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), data, rg, Op::Add(a, b))
    }

    /// `(m x n) + (n)`: bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.rows_cols(a);
        assert_eq!(self.shape(bias), &[n], "add_bias: bias length mismatch");
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += self.nodes[bias.0].data[c];
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(self.shape(a).to_vec(), data, rg, Op::AddBias(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), data, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * k).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Scale(a, k))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul: inner dims differ ({k} vs {k2})");
        let mut data = vec![0.0; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    let out = &mut data[i * n..(i + 1) * n];
                    for j in 0..n {
                        out[j] += aip * brow[j];
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], data, rg, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.rows_cols(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.nodes[a.0].data[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(vec![n, m], data, rg, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Relu(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.rows_cols(a);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &self.nodes[a.0].data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..n {
                let e = (row[c] - mx).exp();
                data[r * n + c] = e;
                z += e;
            }
            for c in 0..n {
                data[r * n + c] /= z;
            }
        }
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.rows_cols(a);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &self.nodes[a.0].data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lz = mx + z.ln();
            for c in 0..n {
                data[r * n + c] = row[c] - lz;
            }
        }
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (m, n) = self.rows_cols(x);
        assert_eq!(self.shape(gain), &[n]);
        assert_eq!(self.shape(bias), &[n]);
        let mut data = vec![0.0; m * n];
        let mut aux = vec![0.0; 2 * m];
        for r in 0..m {
            let row = &self.nodes[x.0].data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + EPS).sqrt();
            aux[2 * r] = mean;
            aux[2 * r + 1] = inv_std;
            for c in 0..n {
                let xhat = (row[c] - mean) * inv_std;
                data[r * n + c] =
                    xhat * self.nodes[gain.0].data[c] + self.nodes[bias.0].data[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let out = self.push(self.shape(x).to_vec(), data, rg, Op::LayerNorm { x, gain, bias });
        self.nodes[out.0].aux = aux;
        out
    }

    /// 1-D convolution over the time axis. `x` is `(t x c_in)`, `w` is
    /// `(c_out x c_in*kernel)`, `b` is `(c_out)`. Output `(t_out x c_out)`
    /// with `t_out = (t + 2*padding - kernel) / stride + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Var {
        let (t, c_in) = self.rows_cols(x);
        let (c_out, wk) = self.rows_cols(w);
        assert_eq!(wk, c_in * kernel, "conv1d: weight shape mismatch");
        assert_eq!(self.shape(b), &[c_out]);
        assert!(t + 2 * padding >= kernel, "conv1d: input too short");
        let t_out = (t + 2 * padding - kernel) / stride + 1;
        let mut data = vec![0.0; t_out * c_out];
        for to in 0..t_out {
            for co in 0..c_out {
                let mut acc = self.nodes[b.0].data[co];
                for k in 0..kernel {
                    let ti = (to * stride + k) as isize - padding as isize;
                    if ti < 0 || ti as usize >= t {
                        continue;
                    }
                    let ti = ti as usize;
                    for ci in 0..c_in {
                        acc += self.nodes[x.0].data[ti * c_in + ci]
                            * self.nodes[w.0].data[co * wk + k * c_in + ci];
                    }
                }
                data[to * c_out + co] = acc;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            vec![t_out, c_out],
            data,
            rg,
            Op::Conv1d { x, w, b, kernel, stride, padding },
        )
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.rows_cols(table);
        for &id in ids {
            assert!(id < v, "embed: id {id} out of range {v}");
        }
        let mut data = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            data[r * d..(r + 1) * d]
                .copy_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            vec![ids.len(), d],
            data,
            rg,
            Op::Embed { table, ids: ids.to_vec() },
        )
    }

    /// Picks one entry per row: `out[i] = x[i, ids[i]]`.
    pub fn pick(&mut self, x: Var, ids: &[usize]) -> Var {
        let (m, n) = self.rows_cols(x);
        assert_eq!(ids.len(), m, "pick: one id per row");
        let mut data = vec![0.0; m];
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < n, "pick: column {id} out of range {n}");
            data[r] = self.nodes[x.0].data[r * n + id];
        }
        let rg = self.rg(x);
        self.push(vec![m], data, rg, Op::Pick { x, ids: ids.to_vec() })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.rows_cols(x);
        assert!(start + len <= n, "slice_cols: out of range");
        let mut data = vec![0.0; m * len];
        for r in 0..m {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&self.nodes[x.0].data[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        self.push(vec![m, len], data, rg, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.rows_cols(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.rows_cols(p).1).collect::<Vec<_>>().iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let (pm, pn) = self.rows_cols(p);
            assert_eq!(pm, m, "concat_cols: row mismatch");
            for r in 0..m {
                data[r * total + off..r * total + off + pn]
                    .copy_from_slice(&self.nodes[p.0].data[r * pn..(r + 1) * pn]);
            }
            off += pn;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![m, total], data, rg, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.rows_cols(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.rows_cols(p);
            assert_eq!(pn, n, "concat_rows: column mismatch");
            data.extend_from_slice(&self.nodes[p.0].data);
            rows += pm;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![rows, n], data, rg, Op::ConcatRows(parts.to_vec()))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let m = self.nodes[a.0].data.iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![m], rg, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].data.iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    /// Dropout as an explicit seeded mask: entries of `mask` are either 0 or
    /// `1/keep`. Identity when `mask` is all ones.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Var {
        assert_eq!(mask.len(), self.nodes[x.0].data.len());
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), data, rg, Op::MaskMul { x, mask })
    }

    /// CTC negative log-likelihood. `log_probs` is `(t x v)` of per-frame
    /// log-distributions over the blank-extended vocabulary (blank = 0);
    /// `labels` are ids in `1..v` with no blanks. The alignment-posterior
    /// gradient is computed here and replayed in backward.
    pub fn ctc_nll(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let (t, v) = self.rows_cols(log_probs);
        if labels.is_empty() {
            return Err(Error::Contract("ctc: empty label sequence".into()));
        }
        for &l in labels {
            if l == 0 || l >= v {
                return Err(Error::Contract(format!(
                    "ctc: label {l} outside 1..{v} (0 is blank)"
                )));
            }
        }
        let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
        let min_t = labels.len() + repeats;
        if t < min_t {
            return Err(Error::CtcTargetTooLong {
                frames: t,
                required: min_t,
            });
        }

        // Blank-interleaved extended sequence: b, y1, b, y2, ..., b.
        let s_len = 2 * labels.len() + 1;
        let ext = |s: usize| -> usize {
            if s % 2 == 0 {
                0
            } else {
                labels[s / 2]
            }
        };
        let lp = |tt: usize, k: usize| self.nodes[log_probs.0].data[tt * v + k];
        const NEG_INF: f64 = f64::NEG_INFINITY;
        let lse = |a: f64, b: f64| -> f64 {
            if a == NEG_INF {
                b
            } else if b == NEG_INF {
                a
            } else if a > b {
                a + (b - a).exp().ln_1p()
            } else {
                b + (a - b).exp().ln_1p()
            }
        };

        // Forward variables; alpha[t][s] includes the emission at t.
        let mut alpha = vec![vec![NEG_INF; s_len]; t];
        alpha[0][0] = lp(0, 0);
        if s_len > 1 {
            alpha[0][1] = lp(0, ext(1));
        }
        for tt in 1..t {
            for s in 0..s_len {
                let mut a = alpha[tt - 1][s];
                if s >= 1 {
                    a = lse(a, alpha[tt - 1][s - 1]);
                }
                if s >= 2 && ext(s) != 0 && ext(s) != ext(s - 2) {
                    a = lse(a, alpha[tt - 1][s - 2]);
                }
                if a != NEG_INF {
                    alpha[tt][s] = a + lp(tt, ext(s));
                }
            }
        }
        let log_p = if s_len > 1 {
            lse(alpha[t - 1][s_len - 1], alpha[t - 1][s_len - 2])
        } else {
            alpha[t - 1][s_len - 1]
        };
        if !log_p.is_finite() {
            return Err(Error::Contract("ctc: zero-probability target".into()));
        }

        // Backward variables; beta[t][s] also includes the emission at t.
        let mut beta = vec![vec![NEG_INF; s_len]; t];
        beta[t - 1][s_len - 1] = lp(t - 1, ext(s_len - 1));
        if s_len > 1 {
            beta[t - 1][s_len - 2] = lp(t - 1, ext(s_len - 2));
        }
        for tt in (0..t - 1).rev() {
            for s in 0..s_len {
                let mut b = beta[tt + 1][s];
                if s + 1 < s_len {
                    b = lse(b, beta[tt + 1][s + 1]);
                }
                if s + 2 < s_len && ext(s + 2) != 0 && ext(s + 2) != ext(s) {
                    b = lse(b, beta[tt + 1][s + 2]);
                }
                if b != NEG_INF {
                    beta[tt][s] = b + lp(tt, ext(s));
                }
            }
        }

        // d(-log P)/d(log_probs[t,k]) = -exp(lse_{s: ext(s)=k}(alpha+beta) - logP - lp(t,k)).
        let mut grad = vec![0.0; t * v];
        for tt in 0..t {
            let mut acc = vec![NEG_INF; v];
            for s in 0..s_len {
                let k = ext(s);
                let ab = if alpha[tt][s] == NEG_INF || beta[tt][s] == NEG_INF {
                    NEG_INF
                } else {
                    alpha[tt][s] + beta[tt][s]
                };
                acc[k] = lse(acc[k], ab);
            }
            for k in 0..v {
                if acc[k] != NEG_INF {
                    grad[tt * v + k] = -(acc[k] - log_p - lp(tt, k)).exp();
                }
            }
        }

        let rg = self.rg(log_probs);
        let out = self.push(vec![1], vec![-log_p], rg, Op::Ctc { log_probs });
        self.nodes[out.0].aux = grad;
        Ok(out)
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every node that
    /// requires grad; fan-out accumulates additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = self.nodes[id].grad.clone();
                    self.accum(a, &g);
                    self.accum(b, &g);
                }
                Op::AddBias(a, bias) => {
                    let g = self.nodes[id].grad.clone();
                    self.accum(a, &g);
                    let (m, n) = self.rows_cols(a);
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                    self.accum(bias, &gb);
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[id].grad.clone();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::Scale(a, k) => {
                    let ga: Vec<f64> = self.nodes[id].grad.iter().map(|g| g * k).collect();
                    self.accum(a, &ga);
                }
                Op::Matmul(a, b) => {
                    let (m, kk) = self.rows_cols(a);
                    let (_, n) = self.rows_cols(b);
                    let g = self.nodes[id].grad.clone();
                    // dA = G * B^T
                    let mut ga = vec![0.0; m * kk];
                    {
                        let bd = &self.nodes[b.0].data;
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for p in 0..kk {
                                    ga[i * kk + p] += gij * bd[p * n + j];
                                }
                            }
                        }
                    }
                    // dB = A^T * G
                    let mut gb = vec![0.0; kk * n];
                    {
                        let ad = &self.nodes[a.0].data;
                        for i in 0..m {
                            for p in 0..kk {
                                let aip = ad[i * kk + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    }
                    self.accum(a, &ga);
                    self.accum(b, &gb);
                }
                Op::Transpose(a) => {
                    let (m, n) = self.rows_cols(a);
                    let g = self.nodes[id].grad.clone();
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = g[j * m + i];
                        }
                    }
                    self.accum(a, &ga);
                }
                Op::Relu(a) => {
                    let ga: Vec<f64> = self.nodes[id]
                        .grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accum(a, &ga);
                }
                Op::Softmax(a) => {
                    let (m, n) = self.rows_cols(a);
                    let g = self.nodes[id].grad.clone();
                    let p = self.nodes[id].data.clone();
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        let dot: f64 = (0..n).map(|c| g[r * n + c] * p[r * n + c]).sum();
                        for c in 0..n {
                            ga[r * n + c] = p[r * n + c] * (g[r * n + c] - dot);
                        }
                    }
                    self.accum(a, &ga);
                }
                Op::LogSoftmax(a) => {
                    let (m, n) = self.rows_cols(a);
                    let g = self.nodes[id].grad.clone();
                    let lp = self.nodes[id].data.clone();
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        let gs: f64 = (0..n).map(|c| g[r * n + c]).sum();
                        for c in 0..n {
                            ga[r * n + c] = g[r * n + c] - lp[r * n + c].exp() * gs;
                        }
                    }
                    self.accum(a, &ga);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (m, n) = self.rows_cols(x);
                    let g = self.nodes[id].grad.clone();
                    let aux = self.nodes[id].aux.clone();
                    let mut gx = vec![0.0; m * n];
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        let mean = aux[2 * r];
                        let inv_std = aux[2 * r + 1];
                        let row = &self.nodes[x.0].data[r * n..(r + 1) * n];
                        let gain_d = &self.nodes[gain.0].data;
                        // dL/dxhat
                        let dxhat: Vec<f64> =
                            (0..n).map(|c| g[r * n + c] * gain_d[c]).collect();
                        let xhat: Vec<f64> =
                            row.iter().map(|v| (v - mean) * inv_std).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum();
                        for c in 0..n {
                            gx[r * n + c] = inv_std / n as f64
                                * (n as f64 * dxhat[c] - s1 - xhat[c] * s2);
                            gg[c] += g[r * n + c] * xhat[c];
                            gb[c] += g[r * n + c];
                        }
                    }
                    self.accum(x, &gx);
                    self.accum(gain, &gg);
                    self.accum(bias, &gb);
                }
                Op::Conv1d { x, w, b, kernel, stride, padding } => {
                    let (t, c_in) = self.rows_cols(x);
                    let (c_out, wk) = self.rows_cols(w);
                    let t_out = self.rows_cols(Var(id)).0;
                    let g = self.nodes[id].grad.clone();
                    let mut gx = vec![0.0; t * c_in];
                    let mut gw = vec![0.0; c_out * wk];
                    let mut gb = vec![0.0; c_out];
                    for to in 0..t_out {
                        for co in 0..c_out {
                            let go = g[to * c_out + co];
                            if go == 0.0 {
                                continue;
                            }
                            gb[co] += go;
                            for k in 0..kernel {
                                let ti = (to * stride + k) as isize - padding as isize;
                                if ti < 0 || ti as usize >= t {
                                    continue;
                                }
                                let ti = ti as usize;
                                for ci in 0..c_in {
                                    gw[co * wk + k * c_in + ci] +=
                                        go * self.nodes[x.0].data[ti * c_in + ci];
                                    gx[ti * c_in + ci] +=
                                        go * self.nodes[w.0].data[co * wk + k * c_in + ci];
                                }
                            }
                        }
                    }
                    self.accum(x, &gx);
                    self.accum(w, &gw);
                    self.accum(b, &gb);
                }
                Op::Embed { table, ids } => {
                    let (_, d) = self.rows_cols(table);
                    let g = self.nodes[id].grad.clone();
                    let mut gt = vec![0.0; self.nodes[table.0].data.len()];
                    for (r, &tid) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[tid * d + c] += g[r * d + c];
                        }
                    }
                    self.accum(table, &gt);
                }
                Op::Pick { x, ids } => {
                    let (m, n) = self.rows_cols(x);
                    let g = self.nodes[id].grad.clone();
                    let mut gx = vec![0.0; m * n];
                    for (r, &c) in ids.iter().enumerate() {
                        gx[r * n + c] += g[r];
                    }
                    self.accum(x, &gx);
                }
                Op::SliceCols { x, start, len } => {
                    let (m, n) = self.rows_cols(x);
                    let g = self.nodes[id].grad.clone();
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        gx[r * n + start..r * n + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.accum(x, &gx);
                }
                Op::ConcatCols(parts) => {
                    let total = self.rows_cols(Var(id)).1;
                    let m = self.rows_cols(Var(id)).0;
                    let g = self.nodes[id].grad.clone();
                    let mut off = 0;
                    for &p in &parts {
                        let pn = self.rows_cols(p).1;
                        let mut gp = vec![0.0; m * pn];
                        for r in 0..m {
                            gp[r * pn..(r + 1) * pn]
                                .copy_from_slice(&g[r * total + off..r * total + off + pn]);
                        }
                        self.accum(p, &gp);
                        off += pn;
                    }
                }
                Op::ConcatRows(parts) => {
                    let g = self.nodes[id].grad.clone();
                    let mut off = 0;
                    for &p in &parts {
                        let len = self.nodes[p.0].data.len();
                        self.accum(p, &g[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].data.len();
                    let g = self.nodes[id].grad[0] / n as f64;
                    let ga = vec![g; n];
                    self.accum(a, &ga);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].data.len();
                    let g = self.nodes[id].grad[0];
                    let ga = vec![g; n];
                    self.accum(a, &ga);
                }
                Op::MaskMul { x, mask } => {
                    let ga: Vec<f64> = self.nodes[id]
                        .grad
                        .iter()
                        .zip(&mask)
                        .map(|(g, m)| g * m)
                        .collect();
                    self.accum(x, &ga);
                }
                Op::Ctc { log_probs } => {
                    let g = self.nodes[id].grad[0];
                    let ga: Vec<f64> = self.nodes[id].aux.iter().map(|d| d * g).collect();
                    self.accum(log_probs, &ga);
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let grad = &mut self.nodes[v.0].grad;
        debug_assert_eq!(grad.len(), g.len());
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }
}

/// Max relative disagreement between the analytic gradient of `f` and a
/// central finite difference at `point`.
///
/// The metric is `max_i |analytic_i - cd_i| / max(1, |cd_i|)`.
pub fn finite_diff_check<F>(f: F, shape: &[usize], point: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    assert!(eps > 0.0);
    let eval = |data: &[f64], requires_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(shape, data, requires_grad);
        let y = f(&mut tape, x);
        let val = tape.value(y);
        if !val.is_finite() {
            return Err(Error::Contract(format!("finite_diff_check: non-finite value {val}")));
        }
        if requires_grad {
            tape.backward(y)?;
            Ok((val, Some(tape.grad(x).to_vec())))
        } else {
            Ok((val, None))
        }
    };

    let (_, grad) = eval(point, true)?;
    let grad = grad.unwrap();
    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let (up, _) = eval(&probe, false)?;
        probe[i] = point[i] - eps;
        let (dn, _) = eval(&probe, false)?;
        probe[i] = point[i];
        let cd = (up - dn) / (2.0 * eps);
        let err = (grad[i] - cd).abs() / cd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
