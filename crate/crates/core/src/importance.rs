//! Importance scoring: which weights, channels, or heads matter least.
//!
//! Three scorers feed the pruning planners. WANDA scores individual weights by
//! `|w| * l2(input feature)`. Taylor scores aggregate accumulated
//! `(grad * weight)^2` over the in_proj columns attached to a state channel or
//! a head channel. The fluctuation scorer ranks whole heads by
//! `var(input) * ||out_proj row||^2` summed over the head's channels, then
//! standardizes per layer so scores are comparable across layers of different
//! scale.

use serde::{Deserialize, Serialize};

use crate::calib::{ActivationStats, TaylorAccumulator};
use crate::error::{Error, Result};
use crate::model::view::HeadView;
use crate::model::{layer_key, names, ModelDims, ModelParams};
use crate::tensor::Tensor;

/// What one score refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One score per weight entry.
    PerWeight,
    /// One score per (group, state-channel) pair, group-major.
    StateChannel,
    /// One score per (head, head-channel) pair, head-major.
    HeadChannel,
    /// One score per head.
    Head,
}

/// Scores for every layer at one granularity, exportable as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub method: String,
    pub granularity: Granularity,
    /// Per layer, flattened scores. State channels use index `g * N + n`,
    /// head channels `h * P + p`, heads `h`.
    pub layers: Vec<Vec<f64>>,
}

// ─── WANDA ──────────────────────────────────────────────────────────────────────

/// Per-weight WANDA scores for `w [d_in, d_out]`: `|w[i][j]| * feature_l2[i]`.
///
/// Returned row-major with the same shape as `w`.
pub fn wanda_scores(w: &Tensor, feature_l2: &[f64]) -> Result<Vec<f64>> {
    let (d_in, d_out) = w.dims2("wanda_scores")?;
    if feature_l2.len() != d_in {
        return Err(Error::dim(
            "wanda_scores",
            format!("{} feature norms for {d_in} input features", feature_l2.len()),
        ));
    }
    if let Some(&bad) = feature_l2.iter().find(|&&v| !v.is_finite() || v < 0.0) {
        return Err(Error::Calib(format!("feature l2 norm {bad} is not a finite nonnegative value")));
    }
    let mut out = vec![0.0f64; d_in * d_out];
    for i in 0..d_in {
        let norm = feature_l2[i];
        for j in 0..d_out {
            out[i * d_out + j] = f64::from(w.data()[i * d_out + j]).abs() * norm;
        }
    }
    Ok(out)
}

// ─── Taylor aggregation ─────────────────────────────────────────────────────────

fn in_proj_taylor<'a>(
    taylor: &'a TaylorAccumulator,
    layer: usize,
    d_model: usize,
    width: usize,
) -> Result<&'a [f64]> {
    let key = layer_key(layer, names::IN_PROJ_W);
    let acc = taylor.tensor(&key)?;
    if acc.len() != d_model * width {
        return Err(Error::Calib(format!(
            "Taylor entry {key} has {} values, expected {}",
            acc.len(),
            d_model * width
        )));
    }
    Ok(acc)
}

fn column_mean(acc: &[f64], width: usize, d_model: usize, cols: &[usize]) -> f64 {
    let mut sum = 0.0f64;
    for r in 0..d_model {
        let row = &acc[r * width..(r + 1) * width];
        for &c in cols {
            sum += row[c];
        }
    }
    sum / (cols.len() * d_model) as f64
}

/// Mean Taylor score of each state channel, from the in_proj columns that
/// produce its B and C entries.
pub fn taylor_state_scores(
    taylor: &TaylorAccumulator,
    m: &ModelParams,
    dims: &ModelDims,
) -> Result<ImportanceScores> {
    let mut layers = Vec::with_capacity(m.blocks.len());
    for (i, block) in m.blocks.iter().enumerate() {
        let view = HeadView::for_block(block, dims);
        let acc = in_proj_taylor(taylor, i, dims.d_model, view.in_proj_width())?;
        let mut scores = Vec::with_capacity(block.n_groups * dims.d_state);
        for g in 0..block.n_groups {
            for n in 0..dims.d_state {
                let cols = [view.b_col(g, n), view.c_col(g, n)];
                scores.push(column_mean(acc, view.in_proj_width(), dims.d_model, &cols));
            }
        }
        layers.push(scores);
    }
    Ok(ImportanceScores {
        method: "taylor".into(),
        granularity: Granularity::StateChannel,
        layers,
    })
}

/// Mean Taylor score of each head channel, from the in_proj columns that
/// produce its x and z entries.
pub fn taylor_head_channel_scores(
    taylor: &TaylorAccumulator,
    m: &ModelParams,
    dims: &ModelDims,
) -> Result<ImportanceScores> {
    let mut layers = Vec::with_capacity(m.blocks.len());
    for (i, block) in m.blocks.iter().enumerate() {
        let view = HeadView::for_block(block, dims);
        let acc = in_proj_taylor(taylor, i, dims.d_model, view.in_proj_width())?;
        let mut scores = Vec::with_capacity(view.d_inner());
        for h in 0..block.n_heads {
            for p in 0..dims.head_dim {
                let cols = [view.x_col(h, p), view.z_col(h, p)];
                scores.push(column_mean(acc, view.in_proj_width(), dims.d_model, &cols));
            }
        }
        layers.push(scores);
    }
    Ok(ImportanceScores {
        method: "taylor".into(),
        granularity: Granularity::HeadChannel,
        layers,
    })
}

// ─── fluctuation (whole heads) ──────────────────────────────────────────────────

/// Per-head fluctuation scores, raw and per-layer standardized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlapScores {
    /// `var * ||out_proj row||^2` summed over each head's channels.
    pub raw: Vec<Vec<f64>>,
    /// Raw scores standardized per layer (population mean/std); zeros when a
    /// layer's scores are all equal.
    pub standardized: Vec<Vec<f64>>,
}

impl FlapScores {
    pub fn to_scores(&self) -> ImportanceScores {
        ImportanceScores {
            method: "fluctuation".into(),
            granularity: Granularity::Head,
            layers: self.standardized.clone(),
        }
    }
}

/// Scores every head from out_proj input variance and out_proj row norms.
pub fn flap_head_scores(
    stats: &ActivationStats,
    m: &ModelParams,
    dims: &ModelDims,
) -> Result<FlapScores> {
    let mut raw = Vec::with_capacity(m.blocks.len());
    let mut standardized = Vec::with_capacity(m.blocks.len());
    for (i, block) in m.blocks.iter().enumerate() {
        let view = HeadView::for_block(block, dims);
        let ls = stats.layer(&layer_key(i, names::OUT_PROJ))?;
        if ls.var.len() != view.d_inner() {
            return Err(Error::Calib(format!(
                "layer {i}: out_proj stats cover {} features, layer has {}",
                ls.var.len(),
                view.d_inner()
            )));
        }
        let per_channel: Vec<f64> = (0..view.d_inner())
            .map(|j| {
                let row = &block.w_outproj.data()[j * dims.d_model..(j + 1) * dims.d_model];
                let norm_sq: f64 = row.iter().map(|&w| f64::from(w) * f64::from(w)).sum();
                ls.var[j] * norm_sq
            })
            .collect();
        let heads: Vec<f64> = (0..block.n_heads)
            .map(|h| view.out_rows(h).map(|j| per_channel[j]).sum())
            .collect();

        let n = heads.len() as f64;
        let mean = heads.iter().sum::<f64>() / n;
        let std = (heads.iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt();
        let z = if std > 0.0 {
            heads.iter().map(|&s| (s - mean) / std).collect()
        } else {
            vec![0.0; heads.len()]
        };
        raw.push(heads);
        standardized.push(z);
    }
    Ok(FlapScores { raw, standardized })
}
