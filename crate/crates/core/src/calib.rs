//! Calibration: token sets, streaming activation statistics, and the Taylor
//! gradient accumulator.
//!
//! A [`CalibSet`] is read either from NDJSON (one JSON array of token ids per
//! line, picked for `.json`/`.jsonl`/`.ndjson` extensions) or from a compact
//! binary framing (`CALB` magic). Statistics are collected with Welford/Chan
//! accumulators in f64, so splitting a stream into chunks and merging gives
//! the same moments as one pass (up to rounding), regardless of chunk order.
//! Sequences are processed in parallel but always merged in input order, so
//! results do not depend on the thread count.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{model_forward_with_taps, model_loss_taped, ModelDims, ModelParams};
use crate::tape::Tape;
use crate::tensor::Tensor;

const CALIB_MAGIC: &[u8; 4] = b"CALB";
const CALIB_VERSION: u32 = 1;

// ─── calibration token sets ─────────────────────────────────────────────────────

/// A set of token sequences used for calibration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibSet {
    pub sequences: Vec<Vec<u32>>,
}

impl CalibSet {
    pub fn new(sequences: Vec<Vec<u32>>) -> CalibSet {
        CalibSet { sequences }
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Non-empty set, non-empty sequences, all ids inside the vocabulary.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::Calib("calibration set has no sequences".into()));
        }
        for (i, seq) in self.sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Calib(format!("sequence {i} is empty")));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Calib(format!(
                    "sequence {i} holds token {bad}, vocabulary size is {vocab_size}"
                )));
            }
        }
        Ok(())
    }

    /// Binary framing: `CALB`, version, sequence count, then per sequence a
    /// length-prefixed list of little-endian u32 token ids.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CALIB_MAGIC);
        out.extend_from_slice(&CALIB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sequences.len() as u32).to_le_bytes());
        for seq in &self.sequences {
            out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
            for &t in seq {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<CalibSet> {
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() - cursor < n {
                return Err(Error::Calib("binary calibration file is truncated".into()));
            }
            let out = &bytes[cursor..cursor + n];
            cursor += n;
            Ok(out)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        if take(4)? != CALIB_MAGIC {
            return Err(Error::Calib("not a calibration file (bad magic)".into()));
        }
        let version = u32_at(take(4)?);
        if version != CALIB_VERSION {
            return Err(Error::Calib(format!("unsupported calibration version {version}")));
        }
        let n_seqs = u32_at(take(4)?) as usize;
        let mut sequences = Vec::with_capacity(n_seqs);
        for _ in 0..n_seqs {
            let len = u32_at(take(4)?) as usize;
            let raw = take(len * 4)?;
            sequences.push(raw.chunks_exact(4).map(u32_at).collect());
        }
        if cursor != bytes.len() {
            return Err(Error::Calib(format!(
                "{} trailing bytes after the last sequence",
                bytes.len() - cursor
            )));
        }
        Ok(CalibSet { sequences })
    }

    /// NDJSON framing: one JSON array of token ids per line.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for seq in &self.sequences {
            out.push_str(&serde_json::to_string(seq).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<CalibSet> {
        let mut sequences = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let seq: Vec<u32> = serde_json::from_str(line).map_err(|e| {
                Error::Calib(format!("line {}: expected a JSON array of token ids: {e}", lineno + 1))
            })?;
            sequences.push(seq);
        }
        Ok(CalibSet { sequences })
    }

    fn is_ndjson_path(path: &Path) -> bool {
        matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("json" | "jsonl" | "ndjson")
        )
    }

    /// Reads a calibration file, picking the framing from the extension.
    pub fn read_path(path: impl AsRef<Path>) -> Result<CalibSet> {
        let path = path.as_ref();
        if Self::is_ndjson_path(path) {
            Self::from_ndjson(&std::fs::read_to_string(path)?)
        } else {
            Self::from_binary(&std::fs::read(path)?)
        }
    }

    /// Writes a calibration file, picking the framing from the extension.
    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if Self::is_ndjson_path(path) {
            std::fs::write(path, self.to_ndjson())?;
        } else {
            std::fs::write(path, self.to_binary())?;
        }
        Ok(())
    }
}

// ─── streaming moments ──────────────────────────────────────────────────────────

/// Welford accumulator over feature rows.
#[derive(Debug, Clone)]
pub struct StatAccum {
    pub count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    sumsq: Vec<f64>,
}

impl StatAccum {
    pub fn new(dim: usize) -> StatAccum {
        StatAccum {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            sumsq: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push_row(&mut self, row: &[f32]) {
        debug_assert_eq!(row.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for (j, &v) in row.iter().enumerate() {
            let x = f64::from(v);
            let delta = x - self.mean[j];
            self.mean[j] += delta / n;
            self.m2[j] += delta * (x - self.mean[j]);
            self.sumsq[j] += x * x;
        }
    }

    /// Chan's parallel-merge update; `other` may cover a disjoint chunk of the
    /// same stream in any order.
    pub fn merge(&mut self, other: &StatAccum) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Calib(format!(
                "cannot merge stats of width {} into width {}",
                other.dim(),
                self.dim()
            )));
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for j in 0..self.dim() {
            let delta = other.mean[j] - self.mean[j];
            self.mean[j] += delta * nb / n;
            self.m2[j] += other.m2[j] + delta * delta * na * nb / n;
            self.sumsq[j] += other.sumsq[j];
        }
        self.count += other.count;
        Ok(())
    }

    pub fn finalize(&self) -> LayerStats {
        let count = self.count;
        let var = if count == 0 {
            vec![0.0; self.dim()]
        } else {
            self.m2.iter().map(|&m| (m / count as f64).max(0.0)).collect()
        };
        LayerStats {
            rows: count,
            mean: self.mean.clone(),
            var,
            feature_l2: self.sumsq.iter().map(|&s| s.sqrt()).collect(),
        }
    }
}

/// Final per-feature moments of one linear layer's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    /// Rows (tokens) observed.
    pub rows: u64,
    /// Per-feature mean.
    pub mean: Vec<f64>,
    /// Per-feature population variance.
    pub var: Vec<f64>,
    /// Per-feature l2 norm over all observed rows.
    pub feature_l2: Vec<f64>,
}

/// Activation statistics for every linear layer input, keyed like
/// `layers.0.in_proj`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub sequences: u64,
    pub tokens: u64,
    pub layers: BTreeMap<String, LayerStats>,
}

impl ActivationStats {
    pub fn layer(&self, key: &str) -> Result<&LayerStats> {
        self.layers
            .get(key)
            .ok_or_else(|| Error::Calib(format!("no activation stats for {key}")))
    }
}

/// Runs the model over every calibration sequence and collects input moments
/// for each linear layer (in_proj, out_proj, and the MLP projections).
pub fn collect_stats(
    m: &ModelParams,
    dims: &ModelDims,
    calib: &CalibSet,
) -> Result<ActivationStats> {
    calib.validate(dims.vocab_size)?;
    let per_seq: Vec<Result<BTreeMap<String, StatAccum>>> = calib
        .sequences
        .par_iter()
        .map(|seq| {
            let mut accums: BTreeMap<String, StatAccum> = BTreeMap::new();
            let mut tap = |name: &str, t: &Tensor| {
                let dim = *t.shape().last().unwrap();
                let acc = accums
                    .entry(name.to_string())
                    .or_insert_with(|| StatAccum::new(dim));
                for row in t.data().chunks(dim) {
                    acc.push_row(row);
                }
            };
            model_forward_with_taps(m, dims, seq, &mut tap)?;
            Ok(accums)
        })
        .collect();

    let mut merged: BTreeMap<String, StatAccum> = BTreeMap::new();
    for part in per_seq {
        for (name, acc) in part? {
            match merged.get_mut(&name) {
                Some(into) => into.merge(&acc)?,
                None => {
                    merged.insert(name, acc);
                }
            }
        }
    }
    Ok(ActivationStats {
        sequences: calib.sequences.len() as u64,
        tokens: calib.token_count() as u64,
        layers: merged.into_iter().map(|(k, v)| (k, v.finalize())).collect(),
    })
}

// ─── Taylor accumulator ─────────────────────────────────────────────────────────

/// Running sums of `(grad * weight)^2` per SSM parameter tensor.
///
/// Purely additive: merging two accumulators adds entries, so a second pass
/// over the same sequences doubles every value exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorAccumulator {
    pub sequences: u64,
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl TaylorAccumulator {
    pub fn empty() -> TaylorAccumulator {
        TaylorAccumulator {
            sequences: 0,
            tensors: BTreeMap::new(),
        }
    }

    pub fn tensor(&self, key: &str) -> Result<&[f64]> {
        self.tensors
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Calib(format!("no Taylor entries for {key}")))
    }

    pub fn merge(&mut self, other: &TaylorAccumulator) -> Result<()> {
        for (name, vals) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(into) => {
                    if into.len() != vals.len() {
                        return Err(Error::Calib(format!(
                            "Taylor entry {name} has {} values on one side and {} on the other",
                            into.len(),
                            vals.len()
                        )));
                    }
                    for (a, b) in into.iter_mut().zip(vals) {
                        *a += b;
                    }
                }
                None => {
                    self.tensors.insert(name.clone(), vals.clone());
                }
            }
        }
        self.sequences += other.sequences;
        Ok(())
    }
}

fn taylor_tracked(name: &str) -> bool {
    name != crate::model::names::EMBEDDING && !name.contains(".mlp.")
}

/// One backward pass per sequence, summing `(grad * weight)^2` for every SSM
/// parameter tensor.
pub fn accumulate_taylor(
    m: &ModelParams,
    dims: &ModelDims,
    calib: &CalibSet,
) -> Result<TaylorAccumulator> {
    calib.validate(dims.vocab_size)?;
    for (i, seq) in calib.sequences.iter().enumerate() {
        if seq.len() < 2 {
            return Err(Error::Calib(format!(
                "sequence {i} has {} tokens; Taylor needs at least 2",
                seq.len()
            )));
        }
    }
    let per_seq: Vec<Result<TaylorAccumulator>> = calib
        .sequences
        .par_iter()
        .map(|seq| {
            let mut tape = Tape::new();
            let (loss, params) = model_loss_taped(m, dims, seq, &mut tape)?;
            let grads = tape.backward(loss)?;
            let mut tensors = BTreeMap::new();
            for (name, node) in params.named() {
                if !taylor_tracked(&name) {
                    continue;
                }
                let w = tape.value(node);
                let entry: Vec<f64> = match grads.wrt(node) {
                    Some(g) => g
                        .data()
                        .iter()
                        .zip(w.data())
                        .map(|(&g, &w)| {
                            let gw = f64::from(g) * f64::from(w);
                            gw * gw
                        })
                        .collect(),
                    None => vec![0.0; w.numel()],
                };
                tensors.insert(name, entry);
            }
            Ok(TaylorAccumulator { sequences: 1, tensors })
        })
        .collect();

    let mut total = TaylorAccumulator::empty();
    for part in per_seq {
        total.merge(&part?)?;
    }
    Ok(total)
}

// ─── bundle ─────────────────────────────────────────────────────────────────────

/// Everything the pruning planners consume, saved as one JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibBundle {
    /// Dimensions of the model the statistics were collected on.
    pub dims: ModelDims,
    pub stats: ActivationStats,
    pub taylor: Option<TaylorAccumulator>,
}

impl CalibBundle {
    pub fn collect(
        m: &ModelParams,
        dims: &ModelDims,
        calib: &CalibSet,
        with_taylor: bool,
    ) -> Result<CalibBundle> {
        let stats = collect_stats(m, dims, calib)?;
        let taylor = if with_taylor {
            Some(accumulate_taylor(m, dims, calib)?)
        } else {
            None
        };
        Ok(CalibBundle {
            dims: dims.clone(),
            stats,
            taylor,
        })
    }

    /// Checks that the bundle was collected on a model with these dimensions.
    pub fn check_model(&self, dims: &ModelDims) -> Result<()> {
        if &self.dims != dims {
            return Err(Error::Calib(
                "calibration bundle was collected on a model with different dimensions".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CalibBundle> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn require_taylor(&self) -> Result<&TaylorAccumulator> {
        self.taylor.as_ref().ok_or_else(|| {
            Error::Calib("this plan needs Taylor scores; rerun calibration with gradients".into())
        })
    }
}
