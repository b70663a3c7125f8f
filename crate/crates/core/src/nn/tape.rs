//! Reverse-mode tape. Every op checks its output for NaN/Inf and fails hard.

use std::collections::BTreeMap;

use super::gemm::gemm;
use super::{Layout, NnError, ParamId, ParamStore, Result, Tensor};

/// Per-channel batch mean and variance from a training-mode batch norm.
pub type BatchMoments = (Vec<f64>, Vec<f64>);

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul {
        x: usize,
        w: usize,
    },
    AddRow {
        x: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        k: f64,
    },
    Relu {
        x: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        layout: Layout,
        col: Vec<f64>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Lstm(Box<LstmCache>),
    Downsample {
        x: usize,
        layout: Layout,
        factor: usize,
    },
    Upsample {
        x: usize,
        layout: Layout,
        factor: usize,
    },
    Mse {
        a: usize,
        b: usize,
        mask: Option<Vec<f64>>,
        denom: f64,
    },
    L1 {
        a: usize,
        b: usize,
        denom: f64,
    },
}

#[derive(Debug)]
struct LstmCache {
    x: usize,
    w_ih: usize,
    w_hh: usize,
    b: usize,
    layout: Layout,
    hidden: usize,
    reverse: bool,
    /// Activated gates (i, f, g, o) per row.
    gates: Vec<f64>,
    cells: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    done: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

fn col_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in g.chunks_exact(cols) {
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    s
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the loss w.r.t. `v`, available after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, false, "input")
    }

    /// Leaf that collects a gradient (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, true, "input")
    }

    /// Copies a parameter onto the tape once; later calls reuse the node so
    /// gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Param,
            store.is_optimized(id),
            "param",
        )?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NnError::Shape {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_layout(&self, op: &'static str, x: Var, layout: Layout) -> Result<()> {
        let t = self.value(x);
        if t.rows() != layout.rows() {
            return Err(NnError::Shape {
                op,
                left: t.shape().to_vec(),
                right: vec![layout.rows(), t.cols()],
            });
        }
        Ok(())
    }

    /// `x (N x I) * w (I x O)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.cols() != wt.rows() {
            return Err(NnError::Shape {
                op: "matmul",
                left: xt.shape().to_vec(),
                right: wt.shape().to_vec(),
            });
        }
        let (n, i, o) = (xt.rows(), xt.cols(), wt.cols());
        let mut y = vec![0.0; n * o];
        gemm(n, i, o, xt.data(), false, wt.data(), false, 0.0, &mut y);
        let ng = self.ng(x.0) || self.ng(w.0);
        self.push(
            Tensor::from_rows(n, o, y)?,
            Op::MatMul { x: x.0, w: w.0 },
            ng,
            "matmul",
        )
    }

    /// Adds a `1 x C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(b).len() != c {
            return Err(NnError::Shape {
                op: "add_row",
                left: self.value(x).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let bias = self.value(b).data().to_vec();
        let xt = self.value(x);
        let mut y = xt.data().to_vec();
        for row in y.chunks_exact_mut(c) {
            row.iter_mut().zip(&bias).for_each(|(a, b)| *a += b);
        }
        let out = Tensor::from_rows(xt.rows(), c, y)?;
        let ng = self.ng(x.0) || self.ng(b.0);
        self.push(out, Op::AddRow { x: x.0, b: b.0 }, ng, "add_row")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let y: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(out, Op::Add { a: a.0, b: b.0 }, ng, "add")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * k).collect())?;
        let ng = self.ng(x.0);
        self.push(out, Op::Scale { x: x.0, k }, ng, "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(0.0)).collect())?;
        let ng = self.ng(x.0);
        self.push(out, Op::Relu { x: x.0 }, ng, "relu")
    }

    /// Column-wise concatenation of equally tall matrices.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(NnError::Shape {
                    op: "concat",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut y = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                y.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(
            Tensor::from_rows(rows, total, y)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            ng,
            "concat",
        )
    }

    /// Kernel-5, stride-1 convolution over time with two frames of zero
    /// padding on each side of every sequence. `w` is `(5 * C_in) x C_out`
    /// with rows ordered (tap, input channel); `b` is `1 x C_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, layout: Layout) -> Result<Var> {
        const K: usize = super::CONV_KERNEL;
        self.check_layout("conv1d", x, layout)?;
        let cin = self.value(x).cols();
        let wt = self.value(w);
        if wt.rows() != K * cin || self.value(b).len() != wt.cols() {
            return Err(NnError::Shape {
                op: "conv1d",
                left: self.value(x).shape().to_vec(),
                right: wt.shape().to_vec(),
            });
        }
        let cout = wt.cols();
        let n = layout.rows();
        let xd = self.value(x).data();
        let mut col = vec![0.0; n * K * cin];
        for bi in 0..layout.batch {
            for t in 0..layout.len {
                let row = bi * layout.len + t;
                for k in 0..K {
                    let src = t as isize + k as isize - (K / 2) as isize;
                    if src < 0 || src >= layout.len as isize {
                        continue;
                    }
                    let s = (bi * layout.len + src as usize) * cin;
                    col[row * K * cin + k * cin..row * K * cin + (k + 1) * cin]
                        .copy_from_slice(&xd[s..s + cin]);
                }
            }
        }
        let mut y = vec![0.0; n * cout];
        gemm(n, K * cin, cout, &col, false, wt.data(), false, 0.0, &mut y);
        let bias = self.value(b).data();
        for row in y.chunks_exact_mut(cout) {
            row.iter_mut().zip(bias).for_each(|(a, b)| *a += b);
        }
        let ng = self.ng(x.0) || self.ng(w.0) || self.ng(b.0);
        self.push(
            Tensor::from_rows(n, cout, y)?,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                layout,
                col,
            },
            ng,
            "conv1d",
        )
    }

    /// Per-channel batch normalization over all rows. With `running` set the
    /// given statistics are used as constants (inference); otherwise batch
    /// statistics are used and returned as (mean, unbiased variance) for the
    /// caller's running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let xt = self.value(x);
        let (n, c) = (xt.rows(), xt.cols());
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(NnError::Shape {
                op: "batch_norm",
                left: xt.shape().to_vec(),
                right: self.value(gamma).shape().to_vec(),
            });
        }
        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let mut mean = vec![0.0; c];
                for row in xt.data().chunks_exact(c) {
                    mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in xt.data().chunks_exact(c) {
                    for j in 0..c {
                        var[j] += (row[j] - mean[j]).powi(2);
                    }
                }
                let unbiased: Vec<f64> = var
                    .iter()
                    .map(|v| v / (n.max(2) - 1) as f64)
                    .collect();
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean.clone(), var, Some((mean, unbiased)))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; n * c];
        let mut y = vec![0.0; n * c];
        for (r, row) in xt.data().chunks_exact(c).enumerate() {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                y[r * c + j] = g[j] * h + bt[j];
            }
        }
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        let batch_stats = stats.is_some();
        let v = self.push(
            Tensor::from_rows(n, c, y)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    /// Unidirectional LSTM over each sequence of the batch, zero initial
    /// state. `w_ih` is `I x 4H`, `w_hh` is `H x 4H`, `b` is `1 x 4H`, gate
    /// blocks ordered (input, forget, cell, output). With `reverse` the
    /// sequence is processed from the last frame to the first and outputs are
    /// written back at their original time index.
    pub fn lstm(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        layout: Layout,
        reverse: bool,
    ) -> Result<Var> {
        self.check_layout("lstm", x, layout)?;
        let (xt, wih, whh) = (self.value(x), self.value(w_ih), self.value(w_hh));
        let hd = whh.rows();
        let h4 = 4 * hd;
        if wih.rows() != xt.cols() || wih.cols() != h4 || whh.cols() != h4 || self.value(b).len() != h4
        {
            return Err(NnError::Shape {
                op: "lstm",
                left: xt.shape().to_vec(),
                right: wih.shape().to_vec(),
            });
        }
        let (n, i_dim) = (xt.rows(), xt.cols());
        let (bsz, tlen) = (layout.batch, layout.len);
        let mut xp = vec![0.0; n * h4];
        gemm(n, i_dim, h4, xt.data(), false, wih.data(), false, 0.0, &mut xp);
        let bias = self.value(b).data();
        for row in xp.chunks_exact_mut(h4) {
            row.iter_mut().zip(bias).for_each(|(a, b)| *a += b);
        }
        let mut gates = vec![0.0; n * h4];
        let mut cells = vec![0.0; n * hd];
        let mut tanh_c = vec![0.0; n * hd];
        let mut h_out = vec![0.0; n * hd];
        let mut h_prev = vec![0.0; bsz * hd];
        let mut c_prev = vec![0.0; bsz * hd];
        let mut rec = vec![0.0; bsz * h4];
        for s in 0..tlen {
            let t = if reverse { tlen - 1 - s } else { s };
            gemm(bsz, hd, h4, &h_prev, false, whh.data(), false, 0.0, &mut rec);
            for bi in 0..bsz {
                let row = bi * tlen + t;
                let a = &xp[row * h4..(row + 1) * h4];
                let r = &rec[bi * h4..(bi + 1) * h4];
                for j in 0..hd {
                    let ig = sigmoid(a[j] + r[j]);
                    let fg = sigmoid(a[hd + j] + r[hd + j]);
                    let gg = (a[2 * hd + j] + r[2 * hd + j]).tanh();
                    let og = sigmoid(a[3 * hd + j] + r[3 * hd + j]);
                    let c = fg * c_prev[bi * hd + j] + ig * gg;
                    let tc = c.tanh();
                    let h = og * tc;
                    let gr = &mut gates[row * h4..(row + 1) * h4];
                    gr[j] = ig;
                    gr[hd + j] = fg;
                    gr[2 * hd + j] = gg;
                    gr[3 * hd + j] = og;
                    cells[row * hd + j] = c;
                    tanh_c[row * hd + j] = tc;
                    h_out[row * hd + j] = h;
                    c_prev[bi * hd + j] = c;
                    h_prev[bi * hd + j] = h;
                }
            }
        }
        let ng = self.ng(x.0) || self.ng(w_ih.0) || self.ng(w_hh.0) || self.ng(b.0);
        self.push(
            Tensor::from_rows(n, hd, h_out)?,
            Op::Lstm(Box::new(LstmCache {
                x: x.0,
                w_ih: w_ih.0,
                w_hh: w_hh.0,
                b: b.0,
                layout,
                hidden: hd,
                reverse,
                gates,
                cells,
                tanh_c,
            })),
            ng,
            "lstm",
        )
    }

    /// Bottleneck downsampling of a `(B*T) x 2H` bidirectional output: code
    /// row `k` takes the forward half at frame `factor*k + factor-1` and the
    /// backward half at frame `factor*k`.
    pub fn downsample(&mut self, x: Var, layout: Layout, factor: usize) -> Result<Var> {
        self.check_layout("downsample", x, layout)?;
        let xt = self.value(x);
        let c = xt.cols();
        if factor == 0 || !layout.len.is_multiple_of(factor) || !c.is_multiple_of(2) {
            return Err(NnError::Shape {
                op: "downsample",
                left: xt.shape().to_vec(),
                right: vec![layout.len, factor],
            });
        }
        let half = c / 2;
        let tp = layout.len / factor;
        let mut y = vec![0.0; layout.batch * tp * c];
        for bi in 0..layout.batch {
            for k in 0..tp {
                let dst = &mut y[(bi * tp + k) * c..(bi * tp + k + 1) * c];
                let fwd = xt.row(bi * layout.len + k * factor + factor - 1);
                let bwd = xt.row(bi * layout.len + k * factor);
                dst[..half].copy_from_slice(&fwd[..half]);
                dst[half..].copy_from_slice(&bwd[half..]);
            }
        }
        let ng = self.ng(x.0);
        self.push(
            Tensor::from_rows(layout.batch * tp, c, y)?,
            Op::Downsample {
                x: x.0,
                layout,
                factor,
            },
            ng,
            "downsample",
        )
    }

    /// Copies code row `k` to frames `[factor*k, factor*k + factor)`;
    /// `layout` describes the upsampled output.
    pub fn upsample(&mut self, x: Var, layout: Layout, factor: usize) -> Result<Var> {
        let xt = self.value(x);
        if factor == 0 || !layout.len.is_multiple_of(factor) || xt.rows() != layout.batch * layout.len / factor
        {
            return Err(NnError::Shape {
                op: "upsample",
                left: xt.shape().to_vec(),
                right: vec![layout.rows(), xt.cols()],
            });
        }
        let c = xt.cols();
        let tp = layout.len / factor;
        let mut y = Vec::with_capacity(layout.rows() * c);
        for bi in 0..layout.batch {
            for t in 0..layout.len {
                y.extend_from_slice(xt.row(bi * tp + t / factor));
            }
        }
        let ng = self.ng(x.0);
        self.push(
            Tensor::from_rows(layout.rows(), c, y)?,
            Op::Upsample {
                x: x.0,
                layout,
                factor,
            },
            ng,
            "upsample",
        )
    }

    /// `sum_rows mask[r] * sum_c (a - b)^2 / denom`.
    pub fn mse(&mut self, a: Var, b: Var, mask: Option<&[f64]>, denom: f64) -> Result<Var> {
        self.check_same("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if let Some(m) = mask {
            if m.len() != ta.rows() {
                return Err(NnError::Shape {
                    op: "mse mask",
                    left: ta.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let mut s = 0.0;
        for (r, (ra, rb)) in ta.data().chunks_exact(c).zip(tb.data().chunks_exact(c)).enumerate() {
            let w = mask.map_or(1.0, |m| m[r]);
            if w != 0.0 {
                s += w * ra.iter().zip(rb).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            }
        }
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(
            Tensor::scalar(s / denom),
            Op::Mse {
                a: a.0,
                b: b.0,
                mask: mask.map(<[f64]>::to_vec),
                denom,
            },
            ng,
            "mse",
        )
    }

    /// `sum |a - b| / denom`.
    pub fn l1(&mut self, a: Var, b: Var, denom: f64) -> Result<Var> {
        self.check_same("l1", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum();
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(
            Tensor::scalar(s / denom),
            Op::L1 {
                a: a.0,
                b: b.0,
                denom,
            },
            ng,
            "l1",
        )
    }

    /// Populates gradients of the scalar `loss` and accumulates parameter
    /// gradients into `store`. A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.done {
            return Err(NnError::AlreadyBackward);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NnError::NotScalar(lt.shape().to_vec()));
        }
        self.done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (&id, &v) in &self.params {
            if store.is_optimized(id) {
                if let Some(g) = &grads[v.0] {
                    store.accumulate_grad(id, g);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let want = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul { x, w } => {
                let (xt, wt) = (val(*x), val(*w));
                let (n, k, o) = (xt.rows(), xt.cols(), wt.cols());
                if want(*x) {
                    let mut dx = vec![0.0; n * k];
                    gemm(n, o, k, g, false, wt.data(), true, 0.0, &mut dx);
                    add_into(&mut grads[*x], dx);
                }
                if want(*w) {
                    let mut dw = vec![0.0; k * o];
                    gemm(k, n, o, xt.data(), true, g, false, 0.0, &mut dw);
                    add_into(&mut grads[*w], dw);
                }
            }
            Op::AddRow { x, b } => {
                if want(*x) {
                    add_into(&mut grads[*x], g.to_vec());
                }
                if want(*b) {
                    add_into(&mut grads[*b], col_sums(g, val(*b).len()));
                }
            }
            Op::Add { a, b } => {
                if want(*a) {
                    add_into(&mut grads[*a], g.to_vec());
                }
                if want(*b) {
                    add_into(&mut grads[*b], g.to_vec());
                }
            }
            Op::Scale { x, k } => {
                if want(*x) {
                    add_into(&mut grads[*x], g.iter().map(|v| v * k).collect());
                }
            }
            Op::Relu { x } => {
                if want(*x) {
                    let d = val(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(xv, gv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    add_into(&mut grads[*x], d);
                }
            }
            Op::Concat { parts } => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if want(p) {
                        let mut d = Vec::with_capacity(val(p).len());
                        for row in g.chunks_exact(total) {
                            d.extend_from_slice(&row[off..off + w]);
                        }
                        add_into(&mut grads[p], d);
                    }
                    off += w;
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                layout,
                col,
            } => {
                const K: usize = super::CONV_KERNEL;
                let wt = val(*w);
                let cout = wt.cols();
                let cin = val(*x).cols();
                let n = layout.rows();
                if want(*w) {
                    let mut dw = vec![0.0; K * cin * cout];
                    gemm(K * cin, n, cout, col, true, g, false, 0.0, &mut dw);
                    add_into(&mut grads[*w], dw);
                }
                if want(*b) {
                    add_into(&mut grads[*b], col_sums(g, cout));
                }
                if want(*x) {
                    let mut dcol = vec![0.0; n * K * cin];
                    gemm(n, cout, K * cin, g, false, wt.data(), true, 0.0, &mut dcol);
                    let mut dx = vec![0.0; n * cin];
                    for bi in 0..layout.batch {
                        for t in 0..layout.len {
                            let row = bi * layout.len + t;
                            for k in 0..K {
                                let src = t as isize + k as isize - (K / 2) as isize;
                                if src < 0 || src >= layout.len as isize {
                                    continue;
                                }
                                let s = (bi * layout.len + src as usize) * cin;
                                let d = &dcol[row * K * cin + k * cin..row * K * cin + (k + 1) * cin];
                                dx[s..s + cin].iter_mut().zip(d).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                    add_into(&mut grads[*x], dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let n = g.len() / c;
                if want(*gamma) {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    add_into(&mut grads[*gamma], dg);
                }
                if want(*beta) {
                    add_into(&mut grads[*beta], col_sums(g, c));
                }
                if want(*x) {
                    let gm = val(*gamma).data();
                    let mut dx = vec![0.0; n * c];
                    if *batch_stats {
                        let mut s1 = vec![0.0; c];
                        let mut s2 = vec![0.0; c];
                        for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                let dh = gr[j] * gm[j];
                                s1[j] += dh;
                                s2[j] += dh * hr[j];
                            }
                        }
                        let nf = n as f64;
                        for r in 0..n {
                            for j in 0..c {
                                let dh = g[r * c + j] * gm[j];
                                dx[r * c + j] =
                                    inv_std[j] / nf * (nf * dh - s1[j] - xhat[r * c + j] * s2[j]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..c {
                                dx[r * c + j] = g[r * c + j] * gm[j] * inv_std[j];
                            }
                        }
                    }
                    add_into(&mut grads[*x], dx);
                }
            }
            Op::Lstm(cache) => self.backprop_lstm(cache, g, grads),
            Op::Downsample { x, layout, factor } => {
                if want(*x) {
                    let c = val(*x).cols();
                    let half = c / 2;
                    let tp = layout.len / factor;
                    let mut dx = vec![0.0; layout.rows() * c];
                    for bi in 0..layout.batch {
                        for k in 0..tp {
                            let src = &g[(bi * tp + k) * c..(bi * tp + k + 1) * c];
                            let fr = bi * layout.len + k * factor + factor - 1;
                            let br = bi * layout.len + k * factor;
                            for j in 0..half {
                                dx[fr * c + j] += src[j];
                            }
                            for j in half..c {
                                dx[br * c + j] += src[j];
                            }
                        }
                    }
                    add_into(&mut grads[*x], dx);
                }
            }
            Op::Upsample { x, layout, factor } => {
                if want(*x) {
                    let c = val(*x).cols();
                    let tp = layout.len / factor;
                    let mut dx = vec![0.0; layout.batch * tp * c];
                    for bi in 0..layout.batch {
                        for t in 0..layout.len {
                            let dst = (bi * tp + t / factor) * c;
                            let src = (bi * layout.len + t) * c;
                            for j in 0..c {
                                dx[dst + j] += g[src + j];
                            }
                        }
                    }
                    add_into(&mut grads[*x], dx);
                }
            }
            Op::Mse { a, b, mask, denom } => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.cols();
                let s = 2.0 * g[0] / denom;
                let d: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .enumerate()
                    .map(|(idx, (x, y))| {
                        let w = mask.as_ref().map_or(1.0, |m| m[idx / c]);
                        s * w * (x - y)
                    })
                    .collect();
                if want(*b) {
                    add_into(&mut grads[*b], d.iter().map(|v| -v).collect());
                }
                if want(*a) {
                    add_into(&mut grads[*a], d);
                }
            }
            Op::L1 { a, b, denom } => {
                let (ta, tb) = (val(*a), val(*b));
                let s = g[0] / denom;
                let d: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| {
                        let diff = x - y;
                        if diff > 0.0 {
                            s
                        } else if diff < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if want(*b) {
                    add_into(&mut grads[*b], d.iter().map(|v| -v).collect());
                }
                if want(*a) {
                    add_into(&mut grads[*a], d);
                }
            }
        }
        Ok(())
    }

    fn backprop_lstm(&self, c: &LstmCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |j: usize| &self.nodes[j].value;
        let want = |j: usize| self.nodes[j].needs_grad;
        let hd = c.hidden;
        let h4 = 4 * hd;
        let (bsz, tlen) = (c.layout.batch, c.layout.len);
        let n = c.layout.rows();
        let whh = val(c.w_hh).data();
        let mut da = vec![0.0; n * h4];
        let mut dh_next = vec![0.0; bsz * hd];
        let mut dc_next = vec![0.0; bsz * hd];
        let mut da_step = vec![0.0; bsz * h4];
        for s in (0..tlen).rev() {
            let t = if c.reverse { tlen - 1 - s } else { s };
            let prev_t = if s == 0 {
                None
            } else if c.reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            for bi in 0..bsz {
                let row = bi * tlen + t;
                let gr = &c.gates[row * h4..(row + 1) * h4];
                for j in 0..hd {
                    let dh = g[row * hd + j] + dh_next[bi * hd + j];
                    let (ig, fg, gg, og) = (gr[j], gr[hd + j], gr[2 * hd + j], gr[3 * hd + j]);
                    let tc = c.tanh_c[row * hd + j];
                    let cp = prev_t.map_or(0.0, |pt| c.cells[(bi * tlen + pt) * hd + j]);
                    let d_o = dh * tc;
                    let dc = dh * og * (1.0 - tc * tc) + dc_next[bi * hd + j];
                    let d_i = dc * gg;
                    let d_g = dc * ig;
                    let d_f = dc * cp;
                    dc_next[bi * hd + j] = dc * fg;
                    let st = &mut da_step[bi * h4..(bi + 1) * h4];
                    st[j] = d_i * ig * (1.0 - ig);
                    st[hd + j] = d_f * fg * (1.0 - fg);
                    st[2 * hd + j] = d_g * (1.0 - gg * gg);
                    st[3 * hd + j] = d_o * og * (1.0 - og);
                }
                da[row * h4..(row + 1) * h4].copy_from_slice(&da_step[bi * h4..(bi + 1) * h4]);
            }
            gemm(bsz, h4, hd, &da_step, false, whh, true, 0.0, &mut dh_next);
        }
        let xt = val(c.x);
        let i_dim = xt.cols();
        if want(c.w_ih) {
            let mut dw = vec![0.0; i_dim * h4];
            gemm(i_dim, n, h4, xt.data(), true, &da, false, 0.0, &mut dw);
            add_into(&mut grads[c.w_ih], dw);
        }
        if want(c.b) {
            add_into(&mut grads[c.b], col_sums(&da, h4));
        }
        if want(c.w_hh) {
            // hidden state entering each step, zero at the first processed frame
            let mut h_prev = vec![0.0; n * hd];
            for bi in 0..bsz {
                for s in 1..tlen {
                    let t = if c.reverse { tlen - 1 - s } else { s };
                    let pt = if c.reverse { t + 1 } else { t - 1 };
                    let (dst, src) = ((bi * tlen + t) * hd, (bi * tlen + pt) * hd);
                    for j in 0..hd {
                        let og = c.gates[(bi * tlen + pt) * h4 + 3 * hd + j];
                        h_prev[dst + j] = og * c.tanh_c[src + j];
                    }
                }
            }
            let mut dw = vec![0.0; hd * h4];
            gemm(hd, n, h4, &h_prev, true, &da, false, 0.0, &mut dw);
            add_into(&mut grads[c.w_hh], dw);
        }
        if want(c.x) {
            let mut dx = vec![0.0; n * i_dim];
            gemm(n, h4, i_dim, &da, false, val(c.w_ih).data(), true, 0.0, &mut dx);
            add_into(&mut grads[c.x], dx);
        }
    }
}
