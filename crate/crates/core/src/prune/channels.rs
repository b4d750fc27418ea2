//! Structured channel pruning along the state (B/C) and head-dim (x/z) axes.
//!
//! Planners turn per-channel importance scores into kept-index lists; the
//! heavy lifting lives in [`super::apply_plan`]. Keep counts are
//! `ceil((1 - ratio) * axis)` per group or head, so every group keeps the
//! same number of channels and pruned models stay rectangular.

use crate::error::{Error, Result};
use crate::importance::{Granularity, ImportanceScores};
use crate::model::{ModelDims, ModelParams};

use super::{LayerPlan, PrunePlan};

fn keep_count(ratio: f64, axis: usize, what: &str) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Plan(format!("{what} ratio {ratio} outside [0, 1]")));
    }
    let keep = ((1.0 - ratio) * axis as f64).ceil() as usize;
    if keep == 0 {
        return Err(Error::Plan(format!("{what} ratio {ratio} would remove every channel")));
    }
    Ok(keep.min(axis))
}

/// Indices of the `keep` highest scores, ascending. Ties keep the lower index.
fn top_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

fn check_scores(
    scores: &ImportanceScores,
    m: &ModelParams,
    want: Granularity,
    per_layer: impl Fn(usize) -> usize,
) -> Result<()> {
    if scores.granularity != want {
        return Err(Error::Plan(format!(
            "scores have {:?} granularity, planner needs {want:?}",
            scores.granularity
        )));
    }
    if scores.layers.len() != m.blocks.len() {
        return Err(Error::Plan(format!(
            "scores cover {} layers, model has {}",
            scores.layers.len(),
            m.blocks.len()
        )));
    }
    for (l, layer) in scores.layers.iter().enumerate() {
        let want_len = per_layer(l);
        if layer.len() != want_len {
            return Err(Error::Plan(format!(
                "layer {l}: {} scores, expected {want_len}",
                layer.len()
            )));
        }
        if layer.iter().any(|s| !s.is_finite()) {
            return Err(Error::Plan(format!("layer {l}: non-finite importance score")));
        }
    }
    Ok(())
}

/// Keeps the top `ceil((1 - ratio) * d_state)` state channels in every B/C
/// group. Scores are indexed `group * d_state + channel`.
pub fn plan_state_pruning(
    scores: &ImportanceScores,
    m: &ModelParams,
    dims: &ModelDims,
    ratio: f64,
) -> Result<PrunePlan> {
    check_scores(scores, m, Granularity::StateChannel, |l| {
        m.blocks[l].n_groups * dims.d_state
    })?;
    let keep = keep_count(ratio, dims.d_state, "state")?;
    let mut plan = PrunePlan::identity("state");
    for (l, layer_scores) in scores.layers.iter().enumerate() {
        let kept: Vec<Vec<usize>> = (0..m.blocks[l].n_groups)
            .map(|g| top_indices(&layer_scores[g * dims.d_state..(g + 1) * dims.d_state], keep))
            .collect();
        plan.layers.push(LayerPlan {
            layer: l,
            keep_heads: None,
            keep_channels: None,
            keep_state: Some(kept),
        });
    }
    Ok(plan)
}

/// Keeps the top `ceil((1 - ratio) * head_dim)` x/z channels in every head.
/// Scores are indexed `head * head_dim + channel`.
pub fn plan_headdim_pruning(
    scores: &ImportanceScores,
    m: &ModelParams,
    dims: &ModelDims,
    ratio: f64,
) -> Result<PrunePlan> {
    check_scores(scores, m, Granularity::HeadChannel, |l| {
        m.blocks[l].n_heads * dims.head_dim
    })?;
    let keep = keep_count(ratio, dims.head_dim, "head-dim")?;
    let mut plan = PrunePlan::identity("headdim");
    for (l, layer_scores) in scores.layers.iter().enumerate() {
        let kept: Vec<Vec<usize>> = (0..m.blocks[l].n_heads)
            .map(|h| top_indices(&layer_scores[h * dims.head_dim..(h + 1) * dims.head_dim], keep))
            .collect();
        plan.layers.push(LayerPlan {
            layer: l,
            keep_heads: None,
            keep_channels: Some(kept),
            keep_state: None,
        });
    }
    Ok(plan)
}
