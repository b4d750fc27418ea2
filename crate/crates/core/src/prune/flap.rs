//! Fluctuation-based structured head pruning with bias compensation.
//!
//! Heads compete globally: per-layer standardized fluctuation scores are
//! ranked across the whole model and the lowest `floor(ratio * total_heads)`
//! are dropped, so layers shrink unevenly. Grouped layers round their kept
//! count up to a multiple of the group count and keep the same number of
//! heads in every group; any layer that would lose everything keeps its best
//! head (or one full group) and is recorded as clamped. The mean contribution
//! of removed channels moves into an out_proj bias.

use crate::calib::ActivationStats;
use crate::error::{Error, Result};
use crate::importance::{flap_head_scores, FlapScores};
use crate::model::{ModelDims, ModelParams};

use super::report::PruneReport;
use super::{apply_plan, LayerPlan, PrunePlan};

/// Keeps the `keep` highest-scoring heads out of `candidates`, ascending.
/// Ties keep the lower index.
fn top_heads(scores: &[f64], candidates: impl Iterator<Item = usize>, keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

/// Turns fluctuation scores into a head-removal plan.
pub fn plan_flap(scores: &FlapScores, m: &ModelParams, ratio: f64) -> Result<PrunePlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Plan(format!("flap ratio {ratio} outside [0, 1]")));
    }
    if scores.standardized.len() != m.blocks.len() {
        return Err(Error::Plan(format!(
            "scores cover {} layers, model has {}",
            scores.standardized.len(),
            m.blocks.len()
        )));
    }
    for (l, block) in m.blocks.iter().enumerate() {
        if scores.standardized[l].len() != block.n_heads {
            return Err(Error::Plan(format!(
                "layer {l}: {} scores for {} heads",
                scores.standardized[l].len(),
                block.n_heads
            )));
        }
        if scores.standardized[l].iter().any(|s| !s.is_finite()) {
            return Err(Error::Plan(format!("layer {l}: non-finite fluctuation score")));
        }
    }

    let total: usize = m.blocks.iter().map(|b| b.n_heads).sum();
    let budget = (ratio * total as f64).floor() as usize;

    // Global ranking, weakest first; ties drop the lower layer, lower head.
    let mut ranked: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (l, layer_scores) in scores.standardized.iter().enumerate() {
        ranked.extend(layer_scores.iter().enumerate().map(|(h, &z)| (z, l, h)));
    }
    ranked.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut dropped: Vec<Vec<bool>> = m.blocks.iter().map(|b| vec![false; b.n_heads]).collect();
    for &(_, l, h) in ranked.iter().take(budget) {
        dropped[l][h] = true;
    }

    let mut plan = PrunePlan::identity("flap");
    plan.compensate = true;
    for (l, block) in m.blocks.iter().enumerate() {
        let h = block.n_heads;
        let g = block.n_groups;
        let layer_scores = &scores.standardized[l];
        let surviving = dropped[l].iter().filter(|&&d| !d).count();
        let grouped = g > 1 && g < h;
        let kept = if grouped {
            let per_group = h / g;
            let mut keep_per_group = surviving.div_ceil(g).max(1);
            keep_per_group = keep_per_group.min(per_group);
            if keep_per_group * g != surviving {
                plan.clamped_layers.push(l);
            }
            let mut kept = Vec::with_capacity(keep_per_group * g);
            for group in 0..g {
                let start = group * per_group;
                kept.extend(top_heads(layer_scores, start..start + per_group, keep_per_group));
            }
            kept.sort_unstable();
            kept
        } else if surviving == 0 {
            plan.clamped_layers.push(l);
            top_heads(layer_scores, 0..h, 1)
        } else {
            (0..h).filter(|&i| !dropped[l][i]).collect()
        };
        plan.layers.push(LayerPlan {
            layer: l,
            keep_heads: Some(kept),
            keep_channels: None,
            keep_state: None,
        });
    }
    Ok(plan)
}

/// Scores, plans, and applies fluctuation pruning in one call.
pub fn flap_prune(
    m: &ModelParams,
    dims: &ModelDims,
    stats: &ActivationStats,
    ratio: f64,
) -> Result<(ModelParams, ModelDims, PrunePlan, PruneReport)> {
    let scores = flap_head_scores(stats, m, dims)?;
    let plan = plan_flap(&scores, m, ratio)?;
    let (pruned, pruned_dims) = apply_plan(m, dims, &plan, Some(stats))?;
    let mut report = PruneReport::from_models(m, &pruned, 0);
    report.clamped_layers = plan.clamped_layers.clone();
    Ok((pruned, pruned_dims, plan, report))
}
