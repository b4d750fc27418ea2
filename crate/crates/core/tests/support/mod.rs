//! Shared fixtures for the integration suites.
//!
//! The centerpiece is `TwinGraph`: it records the same computation twice, once
//! on the autodiff tape and once as a straight-line f64 program. The replay is
//! written here from the op definitions alone, so central finite differences
//! of the replay give a value oracle that is independent of the crate's
//! kernels and precise enough to check gradients to 1e-4.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssmprune_core::{NodeId, Tape, Tensor};

// ─── Straight-line f64 program ───────────────────────────────────────────────

#[derive(Clone)]
enum Step {
    Leaf,
    Matmul(usize, usize),
    Conv1d(usize, usize, usize),
    Silu(usize),
    Softplus(usize),
    Exp(usize),
    Mul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    RmsNorm(usize, usize, usize, f64),
    Transpose(usize),
    Reshape(usize),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    Gather(usize, Vec<usize>),
    Sum(usize),
    Ssd {
        x: usize,
        b: usize,
        c: usize,
        dt: usize,
        a_log: usize,
        d_skip: usize,
        dt_bias: usize,
    },
    CrossEntropy(usize, Vec<usize>),
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus64(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// One computation recorded on the tape and as a replayable f64 program.
///
/// Leaves hold their master values in f64; the tape sees the f32 cast. Only
/// the final step may be read out as the scalar loss.
pub struct TwinGraph {
    pub tape: Tape,
    steps: Vec<Step>,
    shapes: Vec<Vec<usize>>,
    nodes: Vec<NodeId>,
    pub leaves: Vec<usize>,
    leaf_values: Vec<Vec<f64>>,
}

impl TwinGraph {
    pub fn new() -> TwinGraph {
        TwinGraph {
            tape: Tape::new(),
            steps: Vec::new(),
            shapes: Vec::new(),
            nodes: Vec::new(),
            leaves: Vec::new(),
            leaf_values: Vec::new(),
        }
    }

    fn push(&mut self, step: Step, shape: Vec<usize>, node: NodeId) -> usize {
        self.steps.push(step);
        self.shapes.push(shape);
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn shape(&self, id: usize) -> &[usize] {
        &self.shapes[id]
    }

    pub fn node(&self, id: usize) -> NodeId {
        self.nodes[id]
    }

    pub fn leaf_value(&self, leaf: usize) -> &[f64] {
        let slot = self.leaves.iter().position(|&l| l == leaf).unwrap();
        &self.leaf_values[slot]
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let f32s: Vec<f32> = data.iter().map(|&v| v as f32).collect();
        let node = self.tape.leaf(Tensor::new(shape.clone(), f32s).unwrap());
        let id = self.push(Step::Leaf, shape, node);
        self.leaves.push(id);
        self.leaf_values.push(data);
        id
    }

    pub fn matmul(&mut self, a: usize, b: usize) -> usize {
        let node = self.tape.matmul(self.nodes[a], self.nodes[b]).unwrap();
        let shape = vec![self.shapes[a][0], self.shapes[b][1]];
        self.push(Step::Matmul(a, b), shape, node)
    }

    pub fn conv1d(&mut self, x: usize, w: usize, bias: usize) -> usize {
        let node = self
            .tape
            .conv1d_depthwise_causal(self.nodes[x], self.nodes[w], self.nodes[bias])
            .unwrap();
        let shape = self.shapes[x].clone();
        self.push(Step::Conv1d(x, w, bias), shape, node)
    }

    pub fn silu(&mut self, x: usize) -> usize {
        let node = self.tape.silu(self.nodes[x]).unwrap();
        let shape = self.shapes[x].clone();
        self.push(Step::Silu(x), shape, node)
    }

    pub fn softplus(&mut self, x: usize) -> usize {
        let node = self.tape.softplus(self.nodes[x]).unwrap();
        let shape = self.shapes[x].clone();
        self.push(Step::Softplus(x), shape, node)
    }

    pub fn exp(&mut self, x: usize) -> usize {
        let node = self.tape.exp(self.nodes[x]).unwrap();
        let shape = self.shapes[x].clone();
        self.push(Step::Exp(x), shape, node)
    }

    pub fn mul(&mut self, a: usize, b: usize) -> usize {
        let node = self.tape.mul(self.nodes[a], self.nodes[b]).unwrap();
        let shape = self.shapes[a].clone();
        self.push(Step::Mul(a, b), shape, node)
    }

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        let node = self.tape.add(self.nodes[a], self.nodes[b]).unwrap();
        let shape = self.shapes[a].clone();
        self.push(Step::Add(a, b), shape, node)
    }

    pub fn add_bias(&mut self, a: usize, bias: usize) -> usize {
        let node = self
            .tape
            .add_row_broadcast(self.nodes[a], self.nodes[bias])
            .unwrap();
        let shape = self.shapes[a].clone();
        self.push(Step::AddBias(a, bias), shape, node)
    }

    pub fn rmsnorm(&mut self, x: usize, w: usize, norm_len: usize, eps: f32) -> usize {
        let node = self
            .tape
            .rmsnorm_scaled(self.nodes[x], self.nodes[w], norm_len, eps)
            .unwrap();
        let shape = self.shapes[x].clone();
        self.push(Step::RmsNorm(x, w, norm_len, f64::from(eps)), shape, node)
    }

    pub fn transpose(&mut self, x: usize) -> usize {
        let node = self.tape.transpose2(self.nodes[x]).unwrap();
        let shape = vec![self.shapes[x][1], self.shapes[x][0]];
        self.push(Step::Transpose(x), shape, node)
    }

    pub fn reshape(&mut self, x: usize, shape: Vec<usize>) -> usize {
        let node = self.tape.reshape(self.nodes[x], shape.clone()).unwrap();
        self.push(Step::Reshape(x), shape, node)
    }

    pub fn slice_cols(&mut self, x: usize, start: usize, len: usize) -> usize {
        let node = self.tape.slice_cols(self.nodes[x], start, len).unwrap();
        let shape = vec![self.shapes[x][0], len];
        self.push(Step::SliceCols(x, start, len), shape, node)
    }

    pub fn slice_rows(&mut self, x: usize, start: usize, len: usize) -> usize {
        let node = self.tape.slice_rows(self.nodes[x], start, len).unwrap();
        let shape = vec![len, self.shapes[x][1]];
        self.push(Step::SliceRows(x, start, len), shape, node)
    }

    pub fn gather(&mut self, table: usize, ids: Vec<usize>) -> usize {
        let node = self.tape.gather(self.nodes[table], ids.clone()).unwrap();
        let shape = vec![ids.len(), self.shapes[table][1]];
        self.push(Step::Gather(table, ids), shape, node)
    }

    pub fn sum(&mut self, x: usize) -> usize {
        let node = self.tape.sum(self.nodes[x]).unwrap();
        self.push(Step::Sum(x), vec![], node)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn ssd(
        &mut self,
        x: usize,
        b: usize,
        c: usize,
        dt: usize,
        a_log: usize,
        d_skip: usize,
        dt_bias: usize,
    ) -> usize {
        let node = self
            .tape
            .ssd(
                self.nodes[x],
                self.nodes[b],
                self.nodes[c],
                self.nodes[dt],
                self.nodes[a_log],
                self.nodes[d_skip],
                self.nodes[dt_bias],
            )
            .unwrap();
        let shape = self.shapes[x].clone();
        self.push(
            Step::Ssd {
                x,
                b,
                c,
                dt,
                a_log,
                d_skip,
                dt_bias,
            },
            shape,
            node,
        )
    }

    pub fn cross_entropy(&mut self, logits: usize, targets: &[u32]) -> usize {
        let node = self.tape.cross_entropy(self.nodes[logits], targets).unwrap();
        let ids = targets.iter().map(|&t| t as usize).collect();
        self.push(Step::CrossEntropy(logits, ids), vec![], node)
    }

    /// Replays the whole program in f64 with `overrides` in place of the leaf
    /// values and returns the final step's scalar.
    pub fn replay(&self, overrides: &[Vec<f64>]) -> f64 {
        assert_eq!(overrides.len(), self.leaves.len());
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(self.steps.len());
        let mut next_leaf = 0usize;
        for (i, step) in self.steps.iter().enumerate() {
            let out = match step {
                Step::Leaf => {
                    let v = overrides[next_leaf].clone();
                    next_leaf += 1;
                    v
                }
                Step::Matmul(a, b) => {
                    let (m, k) = (self.shapes[*a][0], self.shapes[*a][1]);
                    let n = self.shapes[*b][1];
                    let (av, bv) = (&vals[*a], &vals[*b]);
                    let mut out = vec![0.0; m * n];
                    for r in 0..m {
                        for c in 0..n {
                            let mut acc = 0.0;
                            for q in 0..k {
                                acc += av[r * k + q] * bv[q * n + c];
                            }
                            out[r * n + c] = acc;
                        }
                    }
                    out
                }
                Step::Conv1d(x, w, bias) => {
                    let (ch, time) = (self.shapes[*x][0], self.shapes[*x][1]);
                    let k = self.shapes[*w][1];
                    let (xv, wv, bv) = (&vals[*x], &vals[*w], &vals[*bias]);
                    let mut out = vec![0.0; ch * time];
                    for c in 0..ch {
                        for t in 0..time {
                            let mut acc = bv[c];
                            for kk in 0..k {
                                let src = t as isize - (k as isize - 1) + kk as isize;
                                if src >= 0 {
                                    acc += wv[c * k + kk] * xv[c * time + src as usize];
                                }
                            }
                            out[c * time + t] = acc;
                        }
                    }
                    out
                }
                Step::Silu(x) => vals[*x].iter().map(|&v| v * sigmoid64(v)).collect(),
                Step::Softplus(x) => vals[*x].iter().map(|&v| softplus64(v)).collect(),
                Step::Exp(x) => vals[*x].iter().map(|&v| v.exp()).collect(),
                Step::Mul(a, b) => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x * y).collect(),
                Step::Add(a, b) => vals[*a].iter().zip(&vals[*b]).map(|(x, y)| x + y).collect(),
                Step::AddBias(a, bias) => {
                    let cols = self.shapes[*a][1];
                    vals[*a]
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| v + vals[*bias][j % cols])
                        .collect()
                }
                Step::RmsNorm(x, w, norm_len, eps) => {
                    let d = *self.shapes[*x].last().unwrap();
                    let (xv, wv) = (&vals[*x], &vals[*w]);
                    let mut out = vec![0.0; xv.len()];
                    for (row_in, row_out) in xv.chunks(d).zip(out.chunks_mut(d)) {
                        let acc: f64 = row_in.iter().map(|&v| v * v).sum();
                        let inv = 1.0 / (acc / *norm_len as f64 + eps).sqrt();
                        for ((o, &v), &w) in row_out.iter_mut().zip(row_in).zip(wv.iter()) {
                            *o = w * v * inv;
                        }
                    }
                    out
                }
                Step::Transpose(x) => {
                    let (r, c) = (self.shapes[*x][0], self.shapes[*x][1]);
                    let xv = &vals[*x];
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = xv[i * c + j];
                        }
                    }
                    out
                }
                Step::Reshape(x) => vals[*x].clone(),
                Step::SliceCols(x, start, len) => {
                    let c = self.shapes[*x][1];
                    let xv = &vals[*x];
                    let rows = self.shapes[*x][0];
                    let mut out = Vec::with_capacity(rows * len);
                    for r in 0..rows {
                        out.extend_from_slice(&xv[r * c + start..r * c + start + len]);
                    }
                    out
                }
                Step::SliceRows(x, start, len) => {
                    let c = self.shapes[*x][1];
                    vals[*x][start * c..(start + len) * c].to_vec()
                }
                Step::Gather(table, ids) => {
                    let c = self.shapes[*table][1];
                    let tv = &vals[*table];
                    let mut out = Vec::with_capacity(ids.len() * c);
                    for &id in ids {
                        out.extend_from_slice(&tv[id * c..(id + 1) * c]);
                    }
                    out
                }
                Step::Sum(x) => vec![vals[*x].iter().sum()],
                Step::Ssd {
                    x,
                    b,
                    c,
                    dt,
                    a_log,
                    d_skip,
                    dt_bias,
                } => {
                    let (t_len, h_cnt, p_cnt) = (
                        self.shapes[*x][0],
                        self.shapes[*x][1],
                        self.shapes[*x][2],
                    );
                    let (g_cnt, n_cnt) = (self.shapes[*b][1], self.shapes[*b][2]);
                    let hpg = h_cnt / g_cnt;
                    let (xv, bv, cv, dtv) = (&vals[*x], &vals[*b], &vals[*c], &vals[*dt]);
                    let (av, dv, biasv) = (&vals[*a_log], &vals[*d_skip], &vals[*dt_bias]);
                    let mut state = vec![0.0f64; h_cnt * p_cnt * n_cnt];
                    let mut out = vec![0.0f64; t_len * h_cnt * p_cnt];
                    for t in 0..t_len {
                        for h in 0..h_cnt {
                            let g = h / hpg;
                            let a = -av[h].exp();
                            let delta = softplus64(dtv[t * h_cnt + h] + biasv[h]);
                            let decay = (delta * a).exp();
                            for p in 0..p_cnt {
                                let xval = xv[(t * h_cnt + h) * p_cnt + p];
                                let dx = delta * xval;
                                let mut read = 0.0;
                                for n in 0..n_cnt {
                                    let slot = (h * p_cnt + p) * n_cnt + n;
                                    state[slot] =
                                        decay * state[slot] + dx * bv[(t * g_cnt + g) * n_cnt + n];
                                    read += state[slot] * cv[(t * g_cnt + g) * n_cnt + n];
                                }
                                out[(t * h_cnt + h) * p_cnt + p] = read + dv[h] * xval;
                            }
                        }
                    }
                    out
                }
                Step::CrossEntropy(logits, ids) => {
                    let v = self.shapes[*logits][1];
                    let lv = &vals[*logits];
                    let mut loss = 0.0;
                    for (row, &target) in ids.iter().enumerate() {
                        let slice = &lv[row * v..(row + 1) * v];
                        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = slice.iter().map(|&l| (l - max).exp()).sum();
                        loss += z.ln() + max - slice[target];
                    }
                    vec![loss / ids.len() as f64]
                }
            };
            debug_assert_eq!(
                out.len(),
                self.shapes[i].iter().product::<usize>().max(1),
                "step {i} output length"
            );
            vals.push(out);
        }
        vals.last().unwrap()[0]
    }

    /// Central finite difference of the replayed loss wrt one leaf element.
    pub fn fd_grad(&self, leaf_slot: usize, elem: usize, h: f64) -> f64 {
        let mut plus = self.leaf_values.clone();
        let mut minus = self.leaf_values.clone();
        plus[leaf_slot][elem] += h;
        minus[leaf_slot][elem] -= h;
        (self.replay(&plus) - self.replay(&minus)) / (2.0 * h)
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_node(&self, slot: usize) -> NodeId {
        self.nodes[self.leaves[slot]]
    }

    pub fn leaf_len(&self, slot: usize) -> usize {
        self.leaf_values[slot].len()
    }

    pub fn leaf_elem(&self, slot: usize, elem: usize) -> f64 {
        self.leaf_values[slot][elem]
    }

    pub fn last_node(&self) -> NodeId {
        *self.nodes.last().unwrap()
    }

    pub fn base_leaves(&self) -> &[Vec<f64>] {
        &self.leaf_values
    }
}

// ─── Random graph generation ─────────────────────────────────────────────────

fn rand_data(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rand_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..5usize), rng.gen_range(1..5usize)]
}

/// A random chain of elementwise, matmul, conv, norm, slice, and gather ops
/// on small rank-2 tensors, ending in a scalar.
pub fn random_graph(seed: u64) -> TwinGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = TwinGraph::new();
    let shape = rand_shape(&mut rng);
    let n = shape.iter().product();
    let first = g.leaf(shape, rand_data(&mut rng, n, -1.5, 1.5));
    let mut pool = vec![first];
    let mut consumed = vec![false];

    let ops = rng.gen_range(3..9usize);
    for _ in 0..ops {
        let slot = rng.gen_range(0..pool.len());
        let pick = pool[slot];
        let (rows, cols) = (g.shape(pick)[0], g.shape(pick)[1]);
        let max_abs = g
            .leaf_like_max(pick)
            .unwrap_or(f64::INFINITY);
        let choice = rng.gen_range(0..11u32);
        let made = match choice {
            0 => {
                let k = rng.gen_range(1..4usize);
                let len = cols * k;
                let other = g.leaf(vec![cols, k], rand_data(&mut rng, len, -1.0, 1.0));
                g.matmul(pick, other)
            }
            1 => {
                if max_abs > 2.0 {
                    continue;
                }
                g.exp(pick)
            }
            2 => g.silu(pick),
            3 => g.softplus(pick),
            4 => {
                let len = rows * cols;
                let other = g.leaf(vec![rows, cols], rand_data(&mut rng, len, -1.2, 1.2));
                g.mul(pick, other)
            }
            5 => {
                let len = rows * cols;
                let other = g.leaf(vec![rows, cols], rand_data(&mut rng, len, -1.2, 1.2));
                g.add(pick, other)
            }
            6 => {
                let bias = g.leaf(vec![cols], rand_data(&mut rng, cols, -0.8, 0.8));
                g.add_bias(pick, bias)
            }
            7 => {
                let w = g.leaf(vec![cols], rand_data(&mut rng, cols, 0.5, 1.5));
                let norm_len = rng.gen_range(1..=cols + 2);
                g.rmsnorm(pick, w, norm_len, 1e-6)
            }
            8 => g.transpose(pick),
            9 => {
                let k = rng.gen_range(1..4usize);
                let w = g.leaf(vec![rows, k], rand_data(&mut rng, rows * k, -0.9, 0.9));
                let b = g.leaf(vec![rows], rand_data(&mut rng, rows, -0.4, 0.4));
                g.conv1d(pick, w, b)
            }
            _ => {
                let ids: Vec<usize> =
                    (0..rng.gen_range(1..4usize)).map(|_| rng.gen_range(0..rows)).collect();
                g.gather(pick, ids)
            }
        };
        consumed[slot] = true;
        pool.push(made);
        consumed.push(false);
    }

    let mut total = None;
    for (&tip, &used) in pool.iter().zip(&consumed) {
        if used {
            continue;
        }
        let (rows, cols) = (g.shape(tip)[0], g.shape(tip)[1]);
        let scalar = if cols >= 2 && rng.gen_bool(0.4) {
            let targets: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..cols) as u32).collect();
            g.cross_entropy(tip, &targets)
        } else {
            g.sum(tip)
        };
        total = Some(match total {
            None => scalar,
            Some(acc) => g.add(acc, scalar),
        });
    }
    g
}

impl TwinGraph {
    /// Max-abs of a node's current tape value, used to keep exp inputs tame.
    fn leaf_like_max(&self, id: usize) -> Option<f64> {
        let v = self.tape.value(self.nodes[id]);
        v.data()
            .iter()
            .map(|&x| f64::from(x).abs())
            .fold(None, |m, x| Some(m.map_or(x, |m: f64| m.max(x))))
    }
}

/// A scan-centric graph: random SSD inputs, optionally gated, summed.
pub fn ssd_graph(seed: u64) -> TwinGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = TwinGraph::new();
    let t = rng.gen_range(2..5usize);
    let h = [1usize, 2, 4][rng.gen_range(0..3)];
    let divisors: Vec<usize> = (1..=h).filter(|d| h % d == 0).collect();
    let grp = divisors[rng.gen_range(0..divisors.len())];
    let p = rng.gen_range(1..4usize);
    let n = rng.gen_range(1..4usize);

    let x = g.leaf(vec![t, h, p], rand_data(&mut rng, t * h * p, -1.0, 1.0));
    let b = g.leaf(vec![t, grp, n], rand_data(&mut rng, t * grp * n, -1.0, 1.0));
    let c = g.leaf(vec![t, grp, n], rand_data(&mut rng, t * grp * n, -1.0, 1.0));
    let dt = g.leaf(vec![t, h], rand_data(&mut rng, t * h, -1.0, 1.0));
    let a_log = g.leaf(vec![h], rand_data(&mut rng, h, -0.7, 1.2));
    let d_skip = g.leaf(vec![h], rand_data(&mut rng, h, 0.3, 1.4));
    let dt_bias = g.leaf(vec![h], rand_data(&mut rng, h, -0.8, 0.8));
    let y = g.ssd(x, b, c, dt, a_log, d_skip, dt_bias);
    let flat = g.reshape(y, vec![t, h * p]);
    let out = if rng.gen_bool(0.5) {
        let z = g.leaf(vec![t, h * p], rand_data(&mut rng, t * h * p, -1.0, 1.0));
        let gate = g.silu(z);
        g.mul(flat, gate)
    } else {
        flat
    };
    g.sum(out);
    g
}

/// A faithful single-block forward: embed, project, conv+silu, scan, gate,
/// norm, project out, residual, final norm, tied logits, mean cross-entropy.
pub fn block_graph(seed: u64) -> TwinGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h, p, n, grp, k, vocab, t) = (4usize, 2usize, 3usize, 2usize, 1usize, 2usize, 6usize, 4usize);
    let hp = h * p;
    let gn = grp * n;
    let width = 2 * hp + 2 * gn + h;

    let mut g = TwinGraph::new();
    let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..vocab)).collect();
    let emb = g.leaf(vec![vocab, d], rand_data(&mut rng, vocab * d, -0.9, 0.9));
    let x0 = g.gather(emb, tokens.clone());

    let w_in = g.leaf(vec![d, width], rand_data(&mut rng, d * width, -0.6, 0.6));
    let u = g.matmul(x0, w_in);
    let z = g.slice_cols(u, 0, hp);
    let xc = g.slice_cols(u, hp, hp);
    let bc = g.slice_cols(u, 2 * hp, gn);
    let cc = g.slice_cols(u, 2 * hp + gn, gn);
    let dt = g.slice_cols(u, 2 * hp + 2 * gn, h);

    let conv_branch = |g: &mut TwinGraph, rng: &mut ChaCha8Rng, src: usize, ch: usize| {
        let w = g.leaf(vec![ch, k], rand_data(rng, ch * k, -0.5, 0.5));
        let b = g.leaf(vec![ch], rand_data(rng, ch, -0.2, 0.2));
        let tr = g.transpose(src);
        let conv = g.conv1d(tr, w, b);
        let back = g.transpose(conv);
        g.silu(back)
    };
    let xs = conv_branch(&mut g, &mut rng, xc, hp);
    let bs = conv_branch(&mut g, &mut rng, bc, gn);
    let cs = conv_branch(&mut g, &mut rng, cc, gn);

    let x3 = g.reshape(xs, vec![t, h, p]);
    let b3 = g.reshape(bs, vec![t, grp, n]);
    let c3 = g.reshape(cs, vec![t, grp, n]);
    let a_log = g.leaf(vec![h], rand_data(&mut rng, h, -0.7, 1.2));
    let d_skip = g.leaf(vec![h], rand_data(&mut rng, h, 0.4, 1.4));
    let dt_bias = g.leaf(vec![h], rand_data(&mut rng, h, -0.8, 0.8));
    let y = g.ssd(x3, b3, c3, dt, a_log, d_skip, dt_bias);
    let yflat = g.reshape(y, vec![t, hp]);

    let gate = g.silu(z);
    let gated = g.mul(yflat, gate);
    let norm_w = g.leaf(vec![hp], rand_data(&mut rng, hp, 0.7, 1.3));
    let normed = g.rmsnorm(gated, norm_w, hp, 1e-6);
    let w_out = g.leaf(vec![hp, d], rand_data(&mut rng, hp * d, -0.6, 0.6));
    let proj = g.matmul(normed, w_out);
    let res = g.add(x0, proj);

    let ones = g.leaf(vec![d], vec![1.0; d]);
    let fnorm = g.rmsnorm(res, ones, d, 1e-6);
    let emb_t = g.transpose(emb);
    let logits = g.matmul(fnorm, emb_t);
    let predict = g.slice_rows(logits, 0, t - 1);
    let targets: Vec<u32> = tokens[1..].iter().map(|&v| v as u32).collect();
    g.cross_entropy(predict, &targets);
    g
}

// ─── Gradient comparison ─────────────────────────────────────────────────────

/// Walks sampled elements of every leaf, comparing tape gradients against
/// central differences of the f64 replay. Returns how many elements were
/// checked, the worst relative error, and a description of where it occurred.
pub fn grad_discrepancy(g: &mut TwinGraph) -> (usize, f64, String) {
    let loss = g.last_node();
    let grads = g.tape.backward(loss).expect("backward failed");
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut where_ = String::from("(no elements)");
    for slot in 0..g.leaf_count() {
        let grad = grads
            .wrt(g.leaf_node(slot))
            .unwrap_or_else(|| panic!("leaf {slot} has no gradient"));
        let gdata = grad.data();
        let len = g.leaf_len(slot);
        let stride = (len / 4).max(1);
        let mut e = slot % stride.min(len);
        while e < len {
            let v = g.leaf_elem(slot, e);
            let h = 1e-4 * v.abs().max(1.0);
            let fd = g.fd_grad(slot, e, h);
            let tape_g = f64::from(gdata[e]);
            let rel = (tape_g - fd).abs() / tape_g.abs().max(fd.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
                where_ = format!("leaf {slot} elem {e}: tape {tape_g} vs fd {fd}");
            }
            checked += 1;
            e += stride;
        }
    }
    (checked, worst, where_)
}

// ─── Rank statistics ─────────────────────────────────────────────────────────

/// Average ranks (1-based, ties averaged).
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation of two equal-length score lists.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (&x, &y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}
