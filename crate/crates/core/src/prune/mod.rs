//! Pruning plans and the single application choke point.
//!
//! Every method produces a [`PrunePlan`]: a JSON-serializable record of what
//! to remove (kept-index lists per layer, a merge factor, or a WANDA
//! ratio/target set). [`apply_plan`] executes any plan against a model and is
//! the only place that rewrites tensors, so all five methods share one
//! dimensional-bookkeeping path. Index lists always refer to the model as
//! handed to [`apply_plan`]; structural removal happens first, then head/group
//! merging, then WANDA masking.

pub mod channels;
pub mod flap;
pub mod merge;
pub mod report;
pub mod wanda;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::ActivationStats;
use crate::error::{Error, Result};
use crate::model::view::HeadView;
use crate::model::{layer_key, names, BlockParams, ModelDims, ModelParams};
use crate::tensor::Tensor;

pub use channels::{plan_headdim_pruning, plan_state_pruning};
pub use flap::{flap_prune, plan_flap};
pub use merge::{merge_heads, plan_merge};
pub use report::{compression_report, zero_count, ComponentFractions, LayerCounts, PruneReport};
pub use wanda::{plan_wanda, wanda_apply, OutputAxis};

/// The five pruning methods, as selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    Wanda,
    State,
    HeadDim,
    Merge,
    Flap,
}

impl PruneMethod {
    pub fn name(self) -> &'static str {
        match self {
            PruneMethod::Wanda => "wanda",
            PruneMethod::State => "state",
            PruneMethod::HeadDim => "headdim",
            PruneMethod::Merge => "merge",
            PruneMethod::Flap => "flap",
        }
    }

    pub fn parse(s: &str) -> Result<PruneMethod> {
        match s {
            "wanda" => Ok(PruneMethod::Wanda),
            "state" => Ok(PruneMethod::State),
            "headdim" => Ok(PruneMethod::HeadDim),
            "merge" => Ok(PruneMethod::Merge),
            "flap" => Ok(PruneMethod::Flap),
            other => Err(Error::Plan(format!(
                "unknown method {other:?}; expected wanda, state, headdim, merge, or flap"
            ))),
        }
    }
}

/// Which linear layers WANDA masking touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetFilter {
    pub in_proj: bool,
    pub out_proj: bool,
    pub mlp: bool,
    /// The tied LM head (and therefore the embedding). Off by default; the
    /// full ratio sweep turns it on so ratio 1.0 degenerates to uniform logits.
    #[serde(default)]
    pub lm_head: bool,
}

impl Default for TargetFilter {
    fn default() -> TargetFilter {
        TargetFilter {
            in_proj: true,
            out_proj: true,
            mlp: true,
            lm_head: false,
        }
    }
}

impl TargetFilter {
    pub fn none() -> TargetFilter {
        TargetFilter {
            in_proj: false,
            out_proj: false,
            mlp: false,
            lm_head: false,
        }
    }

    pub fn all() -> TargetFilter {
        TargetFilter {
            in_proj: true,
            out_proj: true,
            mlp: true,
            lm_head: true,
        }
    }

    pub fn any(&self) -> bool {
        self.in_proj || self.out_proj || self.mlp || self.lm_head
    }

    /// Parses a comma-separated list like `in_proj,out_proj`.
    pub fn parse_list(s: &str) -> Result<TargetFilter> {
        let mut f = TargetFilter::none();
        for part in s.split(',') {
            match part.trim() {
                "in_proj" => f.in_proj = true,
                "out_proj" => f.out_proj = true,
                "mlp" => f.mlp = true,
                "lm_head" => f.lm_head = true,
                "" => {}
                other => {
                    return Err(Error::Plan(format!(
                        "unknown target {other:?}; expected in_proj, out_proj, mlp, or lm_head"
                    )))
                }
            }
        }
        if !f.any() {
            return Err(Error::Plan("target list selects nothing".into()));
        }
        Ok(f)
    }
}

/// Structural decisions for one layer. Absent fields mean "keep everything".
/// All indices refer to the unpruned layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    /// Kept head indices, ascending.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_heads: Option<Vec<usize>>,
    /// Kept head-dim channel indices per head (one list per original head).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_channels: Option<Vec<Vec<usize>>>,
    /// Kept state-channel indices per B/C group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_state: Option<Vec<Vec<usize>>>,
}

impl LayerPlan {
    pub fn identity(layer: usize) -> LayerPlan {
        LayerPlan {
            layer,
            keep_heads: None,
            keep_channels: None,
            keep_state: None,
        }
    }

    fn is_identity_for(&self, block: &BlockParams, dims: &ModelDims) -> bool {
        let full_heads = match &self.keep_heads {
            Some(v) => v.len() == block.n_heads,
            None => true,
        };
        let full_channels = match &self.keep_channels {
            Some(v) => v.iter().all(|c| c.len() == dims.head_dim),
            None => true,
        };
        let full_state = match &self.keep_state {
            Some(v) => v.iter().all(|s| s.len() == dims.d_state),
            None => true,
        };
        full_heads && full_channels && full_state
    }
}

/// A complete, auditable pruning decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    /// Which planner produced this: `wanda`, `state`, `headdim`, `merge`, `flap`, or `composed`.
    pub method: String,
    /// Fraction of each output unit's weights WANDA zeroes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wanda_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<TargetFilter>,
    /// Merge factor: B/C groups when layers have G > 1, X heads when G == 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_factor: Option<usize>,
    /// Add the removed out_proj rows' mean contribution to an output bias.
    #[serde(default)]
    pub compensate: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerPlan>,
    /// Layers whose kept-head count was raised above the budget (divisibility
    /// round-up or the keep-at-least-one-head clamp).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamped_layers: Vec<usize>,
}

impl PrunePlan {
    pub fn identity(method: &str) -> PrunePlan {
        PrunePlan {
            method: method.to_string(),
            wanda_ratio: None,
            targets: None,
            merge_factor: None,
            compensate: false,
            layers: Vec::new(),
            clamped_layers: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PrunePlan> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Checks every invariant against the model the plan will be applied to.
    pub fn validate(&self, m: &ModelParams, dims: &ModelDims) -> Result<()> {
        let fail = |msg: String| Err(Error::Plan(msg));
        if let Some(r) = self.wanda_ratio {
            if !(0.0..=1.0).contains(&r) {
                return fail(format!("wanda ratio {r} outside [0, 1]"));
            }
        }
        if let Some(f) = self.merge_factor {
            if f == 0 {
                return fail("merge factor 0".into());
            }
            if !f.is_power_of_two() {
                return fail(format!("merge factor {f} is not a power of two"));
            }
        }
        if self.layers.is_empty() {
            return Ok(());
        }
        if self.layers.len() != m.blocks.len() {
            return fail(format!(
                "plan covers {} layers, model has {}",
                self.layers.len(),
                m.blocks.len()
            ));
        }
        let mut channel_keep: Option<usize> = None;
        let mut state_keep: Option<usize> = None;
        for (i, lp) in self.layers.iter().enumerate() {
            if lp.layer != i {
                return fail(format!("layer plan {i} is labeled {}", lp.layer));
            }
            let block = &m.blocks[i];
            if let Some(heads) = &lp.keep_heads {
                check_index_list(heads, block.n_heads, &format!("layer {i} keep_heads"))?;
            }
            if let Some(channels) = &lp.keep_channels {
                if channels.len() != block.n_heads {
                    return fail(format!(
                        "layer {i}: {} channel lists for {} heads",
                        channels.len(),
                        block.n_heads
                    ));
                }
                for (h, list) in channels.iter().enumerate() {
                    check_index_list(list, dims.head_dim, &format!("layer {i} head {h} channels"))?;
                    match channel_keep {
                        None => channel_keep = Some(list.len()),
                        Some(k) if k == list.len() => {}
                        Some(k) => {
                            return fail(format!(
                                "layer {i} head {h} keeps {} channels, elsewhere {k} are kept",
                                list.len()
                            ))
                        }
                    }
                }
            }
            if let Some(state) = &lp.keep_state {
                if state.len() != block.n_groups {
                    return fail(format!(
                        "layer {i}: {} state lists for {} groups",
                        state.len(),
                        block.n_groups
                    ));
                }
                for (g, list) in state.iter().enumerate() {
                    check_index_list(list, dims.d_state, &format!("layer {i} group {g} state"))?;
                    match state_keep {
                        None => state_keep = Some(list.len()),
                        Some(k) if k == list.len() => {}
                        Some(k) => {
                            return fail(format!(
                                "layer {i} group {g} keeps {} state channels, elsewhere {k}",
                                list.len()
                            ))
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_index_list(list: &[usize], axis: usize, what: &str) -> Result<()> {
    if list.is_empty() {
        return Err(Error::Plan(format!("{what}: empty keep list")));
    }
    if !list.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Plan(format!("{what}: keep list is not strictly increasing")));
    }
    if *list.last().unwrap() >= axis {
        return Err(Error::Plan(format!(
            "{what}: index {} out of axis length {axis}",
            list.last().unwrap()
        )));
    }
    Ok(())
}

// ─── application ────────────────────────────────────────────────────────────────

struct LayerSurgery {
    kept_heads: Vec<usize>,
    channels: Vec<Vec<usize>>,
    kept_groups: Vec<usize>,
    state: Vec<Vec<usize>>,
}

fn resolve_layer(
    layer: usize,
    lp: &LayerPlan,
    block: &BlockParams,
    dims: &ModelDims,
) -> Result<LayerSurgery> {
    let all = |n: usize| (0..n).collect::<Vec<usize>>();
    let kept_heads = lp.keep_heads.clone().unwrap_or_else(|| all(block.n_heads));
    let channels = lp
        .keep_channels
        .clone()
        .unwrap_or_else(|| vec![all(dims.head_dim); block.n_heads]);
    let mha = block.n_groups == block.n_heads;
    let kept_groups = if mha {
        kept_heads.clone()
    } else {
        all(block.n_groups)
    };
    let state = lp
        .keep_state
        .clone()
        .unwrap_or_else(|| vec![all(dims.d_state); block.n_groups]);

    // Kept heads must land on the groups they were trained against under the
    // contiguous head->group mapping.
    let new_h = kept_heads.len();
    let new_g = kept_groups.len();
    if new_h % new_g != 0 {
        return Err(Error::Plan(format!(
            "layer {layer}: {new_h} kept heads is not a multiple of {new_g} kept groups"
        )));
    }
    let view = HeadView::for_block(block, dims);
    for (k, &h) in kept_heads.iter().enumerate() {
        let old_group = if mha { h } else { view.group_of_head(h) };
        let new_group = kept_groups[k * new_g / new_h];
        if old_group != new_group {
            return Err(Error::Plan(format!(
                "layer {layer}: kept head {h} belonged to group {old_group} but would read group {new_group} after pruning"
            )));
        }
    }
    Ok(LayerSurgery {
        kept_heads,
        channels,
        kept_groups,
        state,
    })
}

fn prune_block(
    layer: usize,
    block: &BlockParams,
    dims: &ModelDims,
    surgery: &LayerSurgery,
    compensate: bool,
    stats: Option<&ActivationStats>,
) -> Result<BlockParams> {
    let view = HeadView::for_block(block, dims);
    let LayerSurgery {
        kept_heads,
        channels,
        kept_groups,
        state,
    } = surgery;

    let mut proj_cols = Vec::new();
    for &h in kept_heads {
        proj_cols.extend(channels[h].iter().map(|&p| view.z_col(h, p)));
    }
    for &h in kept_heads {
        proj_cols.extend(channels[h].iter().map(|&p| view.x_col(h, p)));
    }
    for &g in kept_groups {
        proj_cols.extend(state[g].iter().map(|&n| view.b_col(g, n)));
    }
    for &g in kept_groups {
        proj_cols.extend(state[g].iter().map(|&n| view.c_col(g, n)));
    }
    for &h in kept_heads {
        proj_cols.push(view.dt_col(h));
    }

    let mut conv_rows = Vec::new();
    for &h in kept_heads {
        conv_rows.extend(channels[h].iter().map(|&p| view.conv_x_channels(h).start + p));
    }
    for &g in kept_groups {
        conv_rows.extend(state[g].iter().map(|&n| view.conv_b_channels(g).start + n));
    }
    for &g in kept_groups {
        conv_rows.extend(state[g].iter().map(|&n| view.conv_c_channels(g).start + n));
    }

    let mut inner_rows = Vec::new();
    for &h in kept_heads {
        inner_rows.extend(channels[h].iter().map(|&p| view.out_rows(h).start + p));
    }

    let mut outproj_bias = block.outproj_bias.clone();
    if compensate && inner_rows.len() < view.d_inner() {
        let stats = stats.ok_or_else(|| {
            Error::Calib("bias compensation needs activation stats for out_proj inputs".into())
        })?;
        let ls = stats.layer(&layer_key(layer, names::OUT_PROJ))?;
        if ls.mean.len() != view.d_inner() {
            return Err(Error::Calib(format!(
                "layer {layer}: out_proj stats cover {} features, layer has {}",
                ls.mean.len(),
                view.d_inner()
            )));
        }
        let kept: BTreeSet<usize> = inner_rows.iter().copied().collect();
        let mut delta = vec![0.0f64; dims.d_model];
        for j in 0..view.d_inner() {
            if kept.contains(&j) {
                continue;
            }
            let row = &block.w_outproj.data()[j * dims.d_model..(j + 1) * dims.d_model];
            for (col, &w) in row.iter().enumerate() {
                delta[col] += ls.mean[j] * f64::from(w);
            }
        }
        let mut bias = outproj_bias
            .take()
            .unwrap_or_else(|| Tensor::zeros(vec![dims.d_model]));
        for (b, d) in bias.data_mut().iter_mut().zip(&delta) {
            *b = (f64::from(*b) + d) as f32;
        }
        outproj_bias = Some(bias);
    }

    Ok(BlockParams {
        n_heads: kept_heads.len(),
        n_groups: kept_groups.len(),
        w_inproj: block.w_inproj.select_cols(&proj_cols)?,
        conv_w: block.conv_w.select_rows(&conv_rows)?,
        conv_b: block.conv_b.select_1d(&conv_rows)?,
        a_log: block.a_log.select_1d(kept_heads)?,
        d_skip: block.d_skip.select_1d(kept_heads)?,
        dt_bias: block.dt_bias.select_1d(kept_heads)?,
        norm_w: block.norm_w.select_1d(&inner_rows)?,
        w_outproj: block.w_outproj.select_rows(&inner_rows)?,
        outproj_bias,
        mlp: block.mlp.clone(),
    })
}

/// Applies a plan, returning the rewritten model and its updated dimensions.
///
/// `stats` is required when the plan masks weights (WANDA needs feature norms)
/// or compensates removed rows (needs out_proj input means). The input model
/// is never mutated.
pub fn apply_plan(
    m: &ModelParams,
    dims: &ModelDims,
    plan: &PrunePlan,
    stats: Option<&ActivationStats>,
) -> Result<(ModelParams, ModelDims)> {
    plan.validate(m, dims)?;
    let mut model = m.clone();
    let mut out_dims = dims.clone();

    if !plan.layers.is_empty() {
        let mut blocks = Vec::with_capacity(model.blocks.len());
        let mut new_head_dim = None;
        let mut new_d_state = None;
        for (i, lp) in plan.layers.iter().enumerate() {
            let block = &model.blocks[i];
            if lp.is_identity_for(block, &out_dims) {
                blocks.push(block.clone());
                continue;
            }
            let surgery = resolve_layer(i, lp, block, &out_dims)?;
            new_head_dim = Some(surgery.channels[surgery.kept_heads[0]].len());
            new_d_state = Some(surgery.state[surgery.kept_groups[0]].len());
            blocks.push(prune_block(i, block, &out_dims, &surgery, plan.compensate, stats)?);
        }
        model.blocks = blocks;
        if let Some(p) = new_head_dim {
            out_dims.head_dim = p;
        }
        if let Some(n) = new_d_state {
            out_dims.d_state = n;
        }
        out_dims = model.refreshed_dims(&out_dims);
    }

    if let Some(factor) = plan.merge_factor {
        merge::merge_in_place(&mut model, &mut out_dims, factor)?;
    }

    if let Some(ratio) = plan.wanda_ratio {
        let targets = plan.targets.unwrap_or_default();
        let stats = stats.ok_or_else(|| {
            Error::Calib("WANDA masking needs activation stats (feature norms)".into())
        })?;
        wanda::mask_model(&mut model, &out_dims, stats, ratio, &targets)?;
    }

    model.validate(&out_dims)?;
    Ok((model, out_dims))
}
