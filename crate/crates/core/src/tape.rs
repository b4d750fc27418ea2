//! Tape-based reverse-mode automatic differentiation.
//!
//! Differentiation is explicit and opt-in: plain tensor code never allocates a
//! tape. A [`Tape`] records one node per operation (leaf values included), each
//! node holding its output value and the ids of its inputs. [`Tape::backward`]
//! seeds the loss with gradient one and walks the nodes in exact reverse
//! recording order, accumulating input gradients per node.
//!
//! The SSD scan is recorded as a single composite op: the forward pass saves the
//! per-step states it needs and the backward pass replays the recurrence in
//! reverse time. Reductions inside gradient kernels accumulate in f64, matching
//! the forward kernels, so gradients are bit-deterministic.

use crate::error::{Error, Result};
use crate::model::scan::{ssd_scan, SsdSaved};
use crate::tensor::{sigmoid, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
    },
    Silu {
        x: NodeId,
    },
    Softplus {
        x: NodeId,
    },
    Exp {
        x: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    RmsNorm {
        x: NodeId,
        w: NodeId,
        norm_len: usize,
        eps: f32,
    },
    Transpose {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Sum {
        x: NodeId,
    },
    Ssd {
        x: NodeId,
        b: NodeId,
        c: NodeId,
        dt: NodeId,
        a_log: NodeId,
        d_skip: NodeId,
        dt_bias: NodeId,
        saved: SsdSaved,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor,
    },
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given node, if it received one.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Recording of a forward computation, one node per operation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output value of a recorded node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    // ─── recorded operations ──────────────────────────────────────────────────

    /// Registers an input or parameter tensor as a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    pub fn conv1d_depthwise_causal(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self
            .value(x)
            .conv1d_depthwise_causal(self.value(w), self.value(bias))?;
        Ok(self.push(v, Op::Conv1d { x, w, bias }))
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).silu()?;
        Ok(self.push(v, Op::Silu { x }))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).softplus()?;
        Ok(self.push(v, Op::Softplus { x }))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).exp()?;
        Ok(self.push(v, Op::Exp { x }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row_broadcast(self.value(bias))?;
        Ok(self.push(v, Op::AddBias { a, bias }))
    }

    pub fn rmsnorm_scaled(&mut self, x: NodeId, w: NodeId, norm_len: usize, eps: f32) -> Result<NodeId> {
        let v = self.value(x).rmsnorm_scaled(self.value(w), norm_len, eps)?;
        Ok(self.push(v, Op::RmsNorm { x, w, norm_len, eps }))
    }

    pub fn transpose2(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose2()?;
        Ok(self.push(v, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape { x }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows { x, start }))
    }

    /// Row lookup into a `[rows, cols]` table, one output row per id.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let t = self.value(table);
        let (rows, cols) = t.dims2("tape.gather")?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in &ids {
            if id >= rows {
                return Err(Error::dim(
                    "tape.gather",
                    format!("row {id} out of table height {rows}"),
                ));
            }
            data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let v = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(v, Op::Gather { table, ids }))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum_f64() as f32);
        if !v.data()[0].is_finite() {
            return Err(Error::non_finite("tape.sum"));
        }
        Ok(self.push(v, Op::Sum { x }))
    }

    /// SSD scan over `x [T,H,P]`, `b/c [T,G,N]`, `dt [T,H]` with per-head
    /// `a_log/d_skip/dt_bias [H]`, initial state zero. Returns the per-step
    /// outputs `[T,H,P]`; the forward saves the states the adjoint needs.
    #[allow(clippy::too_many_arguments)]
    pub fn ssd(
        &mut self,
        x: NodeId,
        b: NodeId,
        c: NodeId,
        dt: NodeId,
        a_log: NodeId,
        d_skip: NodeId,
        dt_bias: NodeId,
    ) -> Result<NodeId> {
        let h = match self.value(x).shape() {
            [_, h, _] => *h,
            other => return Err(Error::dim("tape.ssd", format!("x rank {other:?}"))),
        };
        let p = self.value(x).shape()[2];
        let n = match self.value(b).shape() {
            [_, _, n] => *n,
            other => return Err(Error::dim("tape.ssd", format!("b rank {other:?}"))),
        };
        let h0 = Tensor::zeros(vec![h, p, n]);
        let (y, _, saved) = ssd_scan(
            self.value(x),
            self.value(b),
            self.value(c),
            self.value(dt),
            self.value(a_log),
            self.value(d_skip),
            self.value(dt_bias),
            &h0,
            true,
        )?;
        let saved = saved.expect("saved states requested");
        Ok(self.push(
            y,
            Op::Ssd {
                x,
                b,
                c,
                dt,
                a_log,
                d_skip,
                dt_bias,
                saved,
            },
        ))
    }

    /// Mean next-token cross-entropy: `logits` is `[T, V]`, `targets` has length
    /// T, and the loss is the mean over rows of `-log softmax(logits_t)[y_t]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (t, v) = lv.dims2("tape.cross_entropy")?;
        if targets.len() != t {
            return Err(Error::dim(
                "tape.cross_entropy",
                format!("{t} logit rows vs {} targets", targets.len()),
            ));
        }
        if t == 0 {
            return Err(Error::dim("tape.cross_entropy", "no target positions"));
        }
        let mut probs = vec![0.0f32; t * v];
        let mut loss = 0.0f64;
        let mut ids = Vec::with_capacity(t);
        for (row, &target) in targets.iter().enumerate() {
            let target = target as usize;
            if target >= v {
                return Err(Error::dim(
                    "tape.cross_entropy",
                    format!("target {target} out of vocab {v}"),
                ));
            }
            ids.push(target);
            let logit_row = &lv.data()[row * v..(row + 1) * v];
            let max = logit_row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0f64;
            for &l in logit_row {
                z += f64::from(l - max).exp();
            }
            let log_z = z.ln() + f64::from(max);
            loss += log_z - f64::from(logit_row[target]);
            for (slot, &l) in probs[row * v..(row + 1) * v].iter_mut().zip(logit_row) {
                *slot = ((f64::from(l) - log_z).exp()) as f32;
            }
        }
        loss /= t as f64;
        if !loss.is_finite() {
            return Err(Error::non_finite("tape.cross_entropy"));
        }
        let probs = Tensor::new(vec![t, v], probs)?;
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: ids,
                probs,
            },
        ))
    }

    // ─── backward ─────────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss node.
    ///
    /// Errors if `loss` is not on the tape or not scalar. Nodes recorded after
    /// the loss cannot influence it and receive no gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::dim("tape.backward", "loss node not on this tape"));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::dim(
                "tape.backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.step_backward(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(t) = g {
                if t.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: "tape.backward",
                        detail: Some(format!("gradient of node {i}")),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) -> Result<()> {
        grads[id.0] = Some(match grads[id.0].take() {
            Some(existing) => existing.add(&contribution)?,
            None => contribution,
        });
        Ok(())
    }

    fn step_backward(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let da = dy.matmul(&self.value(*b).transpose2()?)?;
                let db = self.value(*a).transpose2()?.matmul(dy)?;
                Self::accum(grads, *a, da)?;
                Self::accum(grads, *b, db)?;
            }
            Op::Conv1d { x, w, bias } => {
                let (dx, dw, db) = conv1d_backward(self.value(*x), self.value(*w), dy)?;
                Self::accum(grads, *x, dx)?;
                Self::accum(grads, *w, dw)?;
                Self::accum(grads, *bias, db)?;
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, &g)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                Self::accum(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::Softplus { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, &g)| g * sigmoid(x))
                    .collect();
                Self::accum(grads, *x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::Exp { x } => {
                // Reuse the forward output: d exp(x) = exp(x).
                let d = self.nodes[idx].value.mul(dy)?;
                Self::accum(grads, *x, d)?;
            }
            Op::Mul { a, b } => {
                Self::accum(grads, *a, dy.mul(self.value(*b))?)?;
                Self::accum(grads, *b, dy.mul(self.value(*a))?)?;
            }
            Op::Add { a, b } => {
                Self::accum(grads, *a, dy.clone())?;
                Self::accum(grads, *b, dy.clone())?;
            }
            Op::AddBias { a, bias } => {
                Self::accum(grads, *a, dy.clone())?;
                let (_, c) = dy.dims2("tape.add_bias.backward")?;
                let mut db = vec![0.0f64; c];
                for row in dy.data().chunks(c) {
                    for (slot, &g) in db.iter_mut().zip(row) {
                        *slot += f64::from(g);
                    }
                }
                let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                Self::accum(grads, *bias, Tensor::new(vec![c], db)?)?;
            }
            Op::RmsNorm { x, w, norm_len, eps } => {
                let (dx, dw) = rmsnorm_backward(self.value(*x), self.value(*w), *norm_len, *eps, dy)?;
                Self::accum(grads, *x, dx)?;
                Self::accum(grads, *w, dw)?;
            }
            Op::Transpose { x } => {
                Self::accum(grads, *x, dy.transpose2()?)?;
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                Self::accum(grads, *x, dy.reshape(shape)?)?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = xv.dims2("tape.slice_cols.backward")?;
                let (_, len) = dy.dims2("tape.slice_cols.backward")?;
                let mut dx = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    let dst = &mut dx.data_mut()[i * c + start..i * c + start + len];
                    dst.copy_from_slice(&dy.data()[i * len..(i + 1) * len]);
                }
                Self::accum(grads, *x, dx)?;
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let (r, c) = xv.dims2("tape.slice_rows.backward")?;
                let (len, _) = dy.dims2("tape.slice_rows.backward")?;
                let mut dx = Tensor::zeros(vec![r, c]);
                dx.data_mut()[start * c..(start + len) * c].copy_from_slice(dy.data());
                Self::accum(grads, *x, dx)?;
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let (rows, cols) = tv.dims2("tape.gather.backward")?;
                let mut dt = Tensor::zeros(vec![rows, cols]);
                for (row, &id) in ids.iter().enumerate() {
                    let src = &dy.data()[row * cols..(row + 1) * cols];
                    let dst = &mut dt.data_mut()[id * cols..(id + 1) * cols];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                Self::accum(grads, *table, dt)?;
            }
            Op::Sum { x } => {
                let g = dy.data()[0];
                let shape = self.value(*x).shape().to_vec();
                Self::accum(grads, *x, Tensor::filled(shape, g))?;
            }
            Op::Ssd {
                x,
                b,
                c,
                dt,
                a_log,
                d_skip,
                dt_bias,
                saved,
            } => {
                let out = ssd_backward(
                    self.value(*x),
                    self.value(*b),
                    self.value(*c),
                    self.value(*a_log),
                    self.value(*d_skip),
                    saved,
                    dy,
                )?;
                Self::accum(grads, *x, out.dx)?;
                Self::accum(grads, *b, out.db)?;
                Self::accum(grads, *c, out.dc)?;
                Self::accum(grads, *dt, out.ddt)?;
                Self::accum(grads, *a_log, out.da_log)?;
                Self::accum(grads, *d_skip, out.dd_skip)?;
                Self::accum(grads, *dt_bias, out.ddt_bias)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let g = f64::from(dy.data()[0]) / targets.len() as f64;
                let (t, v) = probs.dims2("tape.cross_entropy.backward")?;
                let mut dl = vec![0.0f32; t * v];
                for (row, &target) in targets.iter().enumerate() {
                    for col in 0..v {
                        let indicator = if col == target { 1.0 } else { 0.0 };
                        dl[row * v + col] =
                            ((f64::from(probs.data()[row * v + col]) - indicator) * g) as f32;
                    }
                }
                Self::accum(grads, *logits, Tensor::new(vec![t, v], dl)?)?;
            }
        }
        Ok(())
    }
}

// ─── gradient kernels ──────────────────────────────────────────────────────────

fn conv1d_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (ch, time) = x.dims2("tape.conv1d.backward")?;
    let (_, k) = w.dims2("tape.conv1d.backward")?;
    let mut dx = vec![0.0f32; ch * time];
    let mut dw = vec![0.0f64; ch * k];
    let mut db = vec![0.0f64; ch];
    for c in 0..ch {
        let xr = &x.data()[c * time..(c + 1) * time];
        let wr = &w.data()[c * k..(c + 1) * k];
        let gr = &dy.data()[c * time..(c + 1) * time];
        for t in 0..time {
            let g = f64::from(gr[t]);
            db[c] += g;
            for kk in 0..k {
                let src = t as isize - (k as isize - 1) + kk as isize;
                if src >= 0 {
                    let src = src as usize;
                    dx[c * time + src] += (f64::from(wr[kk]) * g) as f32;
                    dw[c * k + kk] += f64::from(xr[src]) * g;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![ch, time], dx)?,
        Tensor::new(vec![ch, k], dw.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(vec![ch], db.into_iter().map(|v| v as f32).collect())?,
    ))
}

fn rmsnorm_backward(
    x: &Tensor,
    w: &Tensor,
    norm_len: usize,
    eps: f32,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = *x.shape().last().expect("validated at forward");
    let mut dx = vec![0.0f32; x.numel()];
    let mut dw = vec![0.0f64; d];
    let l = norm_len as f64;
    for ((xr, gr), dxr) in x
        .data()
        .chunks(d)
        .zip(dy.data().chunks(d))
        .zip(dx.chunks_mut(d))
    {
        let mut sq = 0.0f64;
        for &v in xr {
            sq += f64::from(v) * f64::from(v);
        }
        let m = sq / l + f64::from(eps);
        let inv = 1.0 / m.sqrt();
        // s = sum_i dy_i * w_i * x_i feeds the derivative of the shared statistic.
        let mut s = 0.0f64;
        for i in 0..d {
            s += f64::from(gr[i]) * f64::from(w.data()[i]) * f64::from(xr[i]);
        }
        let inv3 = inv * inv * inv;
        for i in 0..d {
            let xi = f64::from(xr[i]);
            let gi = f64::from(gr[i]);
            let wi = f64::from(w.data()[i]);
            dxr[i] = (wi * inv * gi - xi * inv3 * s / l) as f32;
            dw[i] += xi * inv * gi;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![d], dw.into_iter().map(|v| v as f32).collect())?,
    ))
}

struct SsdGrads {
    dx: Tensor,
    db: Tensor,
    dc: Tensor,
    ddt: Tensor,
    da_log: Tensor,
    dd_skip: Tensor,
    ddt_bias: Tensor,
}

/// Reverse-time adjoint of the SSD recurrence.
///
/// Forward per step t: `delta = softplus(dt + dt_bias)`, `decay = exp(delta*a)`
/// with `a = -exp(a_log)`, `H_t = decay*H_{t-1} + delta*(x_t (x) B_t)`,
/// `y_t = H_t C_t + D*x_t`. The backward walks t from T-1 to 0 carrying the
/// state adjoint dH, using the saved post-update states for the readout and
/// decay terms.
fn ssd_backward(
    x: &Tensor,
    b: &Tensor,
    c: &Tensor,
    a_log: &Tensor,
    d_skip: &Tensor,
    saved: &SsdSaved,
    dy: &Tensor,
) -> Result<SsdGrads> {
    let (t_len, h_cnt, p_cnt) = match x.shape() {
        [t, h, p] => (*t, *h, *p),
        other => return Err(Error::dim("tape.ssd.backward", format!("x rank {other:?}"))),
    };
    let (g_cnt, n_cnt) = match b.shape() {
        [_, g, n] => (*g, *n),
        other => return Err(Error::dim("tape.ssd.backward", format!("b rank {other:?}"))),
    };
    let heads_per_group = h_cnt / g_cnt;
    let mut dx = vec![0.0f32; x.numel()];
    let mut db = vec![0.0f64; b.numel()];
    let mut dc = vec![0.0f64; c.numel()];
    let mut ddt = vec![0.0f32; t_len * h_cnt];
    let mut da_log = vec![0.0f32; h_cnt];
    let mut dd_skip = vec![0.0f32; h_cnt];
    let mut ddt_bias = vec![0.0f32; h_cnt];
    let state_stride = p_cnt * n_cnt;

    for h in 0..h_cnt {
        let g = h / heads_per_group;
        let a = -f64::from(a_log.data()[h]).exp();
        let d_h = f64::from(d_skip.data()[h]);
        let mut dh = vec![0.0f64; state_stride];
        let mut da = 0.0f64;
        let mut dd = 0.0f64;
        let mut ddtb = 0.0f64;
        for t in (0..t_len).rev() {
            let delta = f64::from(saved.delta[t * h_cnt + h]);
            let decay = f64::from(saved.decay[t * h_cnt + h]);
            let state_t = &saved.states[(t * h_cnt + h) * state_stride..][..state_stride];
            // Readout: y_t = H_t C_t + D x_t.
            for p in 0..p_cnt {
                let dyv = f64::from(dy.at3(t, h, p));
                if dyv != 0.0 {
                    let xv = f64::from(x.at3(t, h, p));
                    dd += dyv * xv;
                    dx[(t * h_cnt + h) * p_cnt + p] += (dyv * d_h) as f32;
                    for n in 0..n_cnt {
                        dh[p * n_cnt + n] += dyv * f64::from(c.at3(t, g, n));
                        dc[(t * g_cnt + g) * n_cnt + n] += dyv * f64::from(state_t[p * n_cnt + n]);
                    }
                }
            }
            // Recurrence: H_t = decay H_{t-1} + delta (x_t (x) B_t).
            let mut ddecay = 0.0f64;
            if t > 0 {
                let prev = &saved.states[((t - 1) * h_cnt + h) * state_stride..][..state_stride];
                for (dhv, &pv) in dh.iter().zip(prev) {
                    ddecay += *dhv * f64::from(pv);
                }
            }
            let mut ddelta = 0.0f64;
            for p in 0..p_cnt {
                let xv = f64::from(x.at3(t, h, p));
                let mut row_dot_b = 0.0f64;
                for n in 0..n_cnt {
                    let dhv = dh[p * n_cnt + n];
                    let bv = f64::from(b.at3(t, g, n));
                    row_dot_b += dhv * bv;
                    db[(t * g_cnt + g) * n_cnt + n] += dhv * delta * xv;
                }
                dx[(t * h_cnt + h) * p_cnt + p] += (delta * row_dot_b) as f32;
                ddelta += row_dot_b * xv;
            }
            // decay = exp(delta * a).
            ddelta += ddecay * a * decay;
            da += ddecay * delta * decay;
            // delta = softplus(v) and sigmoid(v) = 1 - exp(-delta).
            let sig = 1.0 - (-delta).exp();
            ddt[t * h_cnt + h] = (sig * ddelta) as f32;
            ddtb += sig * ddelta;
            // Carry the adjoint to H_{t-1}.
            for dhv in dh.iter_mut() {
                *dhv *= decay;
            }
        }
        // a = -exp(a_log) gives da/da_log = a.
        da_log[h] = (da * a) as f32;
        dd_skip[h] = dd as f32;
        ddt_bias[h] = ddtb as f32;
    }

    Ok(SsdGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        db: Tensor::new(b.shape().to_vec(), db.into_iter().map(|v| v as f32).collect())?,
        dc: Tensor::new(c.shape().to_vec(), dc.into_iter().map(|v| v as f32).collect())?,
        ddt: Tensor::new(vec![t_len, h_cnt], ddt)?,
        da_log: Tensor::new(vec![h_cnt], da_log)?,
        dd_skip: Tensor::new(vec![h_cnt], dd_skip)?,
        ddt_bias: Tensor::new(vec![h_cnt], ddt_bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_form_gradients_are_the_coefficients() {
        // loss = sum(w (*) x): dL/dw = x and dL/dx = w.
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![3], vec![2.0, -1.0, 0.5]).unwrap());
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 4.0, -2.0]).unwrap());
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), [1.0, 4.0, -2.0]);
        assert_eq!(grads.wrt(x).unwrap().data(), [2.0, -1.0, 0.5]);
    }

    #[test]
    fn softplus_gradient_is_sigmoid() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.softplus(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (&g, &xv) in grads.wrt(x).unwrap().data().iter().zip([-1.0f32, 0.0, 2.0].iter()) {
            assert!((g - sigmoid(xv)).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_gradients_match_analytic_form() {
        // loss = sum(A B): dA = ones * B^T, dB = A^T * ones.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let prod = tape.matmul(a, b).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), [11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), [4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn unused_nodes_get_no_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf(Tensor::scalar(3.0));
        let unused = tape.leaf(Tensor::scalar(7.0));
        let loss = tape.sum(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(used).is_some());
        assert!(grads.wrt(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let err = match tape.backward(x) {
            Ok(_) => panic!("non-scalar loss accepted"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn backward_rejects_foreign_node() {
        let mut other = Tape::new();
        let x = other.leaf(Tensor::scalar(1.0));
        let loss = other.sum(x).unwrap();
        let empty = Tape::new();
        assert!(empty.backward(loss).is_err());
    }

    #[test]
    fn node_reused_twice_accumulates_both_paths() {
        // loss = sum(x (*) x): gradient 2x.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -5.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), [6.0, -10.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        assert!((tape.value(loss).data()[0] - 3.0f32.ln()).abs() < 1e-6);
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(logits).unwrap();
        let third = 1.0 / 3.0;
        assert!((g.data()[0] - third).abs() < 1e-6);
        assert!((g.data()[1] - (third - 1.0)).abs() < 1e-6);
        assert!((g.data()[2] - third).abs() < 1e-6);
    }

    #[test]
    fn gather_routes_gradients_to_looked_up_rows() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let picked = tape.gather(table, vec![2, 0, 2]).unwrap();
        let loss = tape.sum(picked).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(table).unwrap().data(), [1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn slice_gradients_scatter_back_in_place() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let cols = tape.slice_cols(x, 1, 2).unwrap();
        let loss = tape.sum(cols).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), [0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }
}
