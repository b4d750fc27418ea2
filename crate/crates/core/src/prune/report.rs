//! Parameter accounting for pruned models.
//!
//! Reports come in two flavors: [`PruneReport::from_models`] counts the
//! tensors actually in memory, while [`compression_report`] works purely from
//! dimension structs so hypothetical configurations can be compared without
//! materializing billions of parameters. Both agree on uniform models.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{BlockParams, ModelDims, ModelParams};

/// Share of each component in the SSM parameter budget (MLPs excluded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentFractions {
    pub in_proj: f64,
    pub conv: f64,
    pub out_proj: f64,
    /// Per-head scalars and the gated norm weight.
    pub other: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub layer: usize,
    pub params_before: usize,
    pub params_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub total_params_before: usize,
    pub total_params_after: usize,
    pub ssm_params_before: usize,
    pub ssm_params_after: usize,
    /// `1 - ssm_after / ssm_before`.
    pub ssm_compression: f64,
    /// Removed plus masked-to-zero weights over the original total.
    pub whole_model_sparsity: f64,
    /// Previously nonzero weights set to zero by masking.
    pub zeroed_weights: usize,
    pub layers: Vec<LayerCounts>,
    pub fractions_before: ComponentFractions,
    pub fractions_after: ComponentFractions,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamped_layers: Vec<usize>,
}

struct ComponentTotals {
    in_proj: usize,
    conv: usize,
    out_proj: usize,
    other: usize,
}

impl ComponentTotals {
    fn ssm_total(&self) -> usize {
        self.in_proj + self.conv + self.out_proj + self.other
    }

    fn fractions(&self) -> ComponentFractions {
        let total = self.ssm_total() as f64;
        ComponentFractions {
            in_proj: self.in_proj as f64 / total,
            conv: self.conv as f64 / total,
            out_proj: self.out_proj as f64 / total,
            other: self.other as f64 / total,
        }
    }
}

fn block_components(b: &BlockParams) -> ComponentTotals {
    ComponentTotals {
        in_proj: b.w_inproj.numel(),
        conv: b.conv_w.numel() + b.conv_b.numel(),
        out_proj: b.w_outproj.numel()
            + b.outproj_bias.as_ref().map_or(0, |t| t.numel()),
        other: b.a_log.numel() + b.d_skip.numel() + b.dt_bias.numel() + b.norm_w.numel(),
    }
}

fn model_components(m: &ModelParams) -> ComponentTotals {
    let mut totals = ComponentTotals {
        in_proj: 0,
        conv: 0,
        out_proj: 0,
        other: 0,
    };
    for b in &m.blocks {
        let c = block_components(b);
        totals.in_proj += c.in_proj;
        totals.conv += c.conv;
        totals.out_proj += c.out_proj;
        totals.other += c.other;
    }
    totals
}

fn dims_components(d: &ModelDims) -> ComponentTotals {
    ComponentTotals {
        in_proj: d.n_layers * d.in_proj_params(),
        conv: d.n_layers * d.conv_params(),
        out_proj: d.n_layers * d.out_proj_params(),
        other: d.n_layers * d.misc_params(),
    }
}

impl PruneReport {
    /// Counts materialized tensors before and after surgery. `zeroed` is the
    /// number of weights masking newly set to zero (shapes unchanged).
    pub fn from_models(before: &ModelParams, after: &ModelParams, zeroed: usize) -> PruneReport {
        let layers = before
            .blocks
            .iter()
            .zip(&after.blocks)
            .enumerate()
            .map(|(layer, (b, a))| LayerCounts {
                layer,
                params_before: b.param_count(),
                params_after: a.param_count(),
            })
            .collect();
        let comp_before = model_components(before);
        let comp_after = model_components(after);
        let total_before = before.param_count();
        let total_after = after.param_count();
        PruneReport {
            total_params_before: total_before,
            total_params_after: total_after,
            ssm_params_before: comp_before.ssm_total(),
            ssm_params_after: comp_after.ssm_total(),
            ssm_compression: 1.0 - comp_after.ssm_total() as f64 / comp_before.ssm_total() as f64,
            whole_model_sparsity: ((total_before - total_after) + zeroed) as f64
                / total_before as f64,
            zeroed_weights: zeroed,
            layers,
            fractions_before: comp_before.fractions(),
            fractions_after: comp_after.fractions(),
            clamped_layers: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PruneReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Exact zeros across every tensor in the model, embedding included.
pub fn zero_count(m: &ModelParams) -> usize {
    let mut zeros = m.embedding.data().iter().filter(|&&v| v == 0.0).count();
    for b in &m.blocks {
        let mut tensors = vec![
            &b.w_inproj, &b.conv_w, &b.conv_b, &b.a_log, &b.d_skip, &b.dt_bias, &b.norm_w,
            &b.w_outproj,
        ];
        if let Some(bias) = &b.outproj_bias {
            tensors.push(bias);
        }
        if let Some(mlp) = &b.mlp {
            tensors.extend([&mlp.w_gate, &mlp.w_up, &mlp.w_down]);
        }
        for t in tensors {
            zeros += t.data().iter().filter(|&&v| v == 0.0).count();
        }
    }
    zeros
}

/// Closed-form report for uniform configurations; nothing is materialized.
pub fn compression_report(before: &ModelDims, after: &ModelDims) -> Result<PruneReport> {
    before.validate()?;
    after.validate()?;
    let comp_before = dims_components(before);
    let comp_after = dims_components(after);
    let per_layer_before = before.ssm_params_per_layer() + before.mlp_params_per_layer();
    let per_layer_after = after.ssm_params_per_layer() + after.mlp_params_per_layer();
    let layers = (0..before.n_layers.min(after.n_layers))
        .map(|layer| LayerCounts {
            layer,
            params_before: per_layer_before,
            params_after: per_layer_after,
        })
        .collect();
    let total_before = before.total_params();
    let total_after = after.total_params();
    Ok(PruneReport {
        total_params_before: total_before,
        total_params_after: total_after,
        ssm_params_before: comp_before.ssm_total(),
        ssm_params_after: comp_after.ssm_total(),
        ssm_compression: 1.0 - comp_after.ssm_total() as f64 / comp_before.ssm_total() as f64,
        whole_model_sparsity: (total_before.saturating_sub(total_after)) as f64
            / total_before as f64,
        zeroed_weights: 0,
        layers,
        fractions_before: comp_before.fractions(),
        fractions_after: comp_after.fractions(),
        clamped_layers: Vec::new(),
    })
}
