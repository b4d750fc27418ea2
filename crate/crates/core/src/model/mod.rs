//! Mamba-2-style model structure: dimensions, per-block parameters, and the
//! packed in_proj head layout.
//!
//! A model is an embedding table, a stack of blocks (SSD mixer plus an optional
//! gated MLP), a final unweighted rmsnorm, and a tied LM head. The in_proj
//! output packs `[z | x | B | C | dt]`; heads map to B/C groups in contiguous
//! blocks (`group = head * n_groups / n_heads`).
//!
//! Blocks carry their own `n_heads`/`n_groups` because whole-head pruning may
//! keep different counts per layer; the global [`ModelDims`] fields hold the
//! per-layer maximum and equal every layer's counts for uniform models.

pub mod forward;
pub mod scan;
pub mod view;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use forward::{block_forward, model_forward, model_forward_with_taps, model_loss_taped, TapedParams};
pub use scan::ssd_sequential;
pub use view::{split_in_proj, HeadView};

/// Epsilon inside every rmsnorm statistic.
pub const RMS_EPS: f32 = 1e-6;

/// Head pattern implied by the head/group counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadPattern {
    /// One B/C group per head (G == H).
    Mha,
    /// Several heads share each B/C group (1 < G < H).
    Gva,
    /// All heads share a single B/C group (G == 1).
    Mva,
}

impl HeadPattern {
    pub fn name(self) -> &'static str {
        match self {
            HeadPattern::Mha => "MHA",
            HeadPattern::Gva => "GVA",
            HeadPattern::Mva => "MVA",
        }
    }
}

/// Global model configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_layers: usize,
    /// Heads in the widest layer (every layer for uniform models).
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_state: usize,
    /// B/C groups in the widest layer.
    pub n_groups: usize,
    pub d_conv: usize,
    pub vocab_size: usize,
    /// Divisor of the gated rmsnorm statistic. Equals `n_heads * head_dim` at
    /// construction; head merging divides it, channel removal preserves it.
    pub norm_len: usize,
    #[serde(default)]
    pub has_mlp: bool,
    #[serde(default)]
    pub d_mlp: usize,
}

impl ModelDims {
    /// Inner width of the mixer, `n_heads * head_dim`.
    pub fn d_inner(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Packed in_proj output width, `2*H*P + 2*G*N + H`.
    pub fn in_proj_width(&self) -> usize {
        2 * self.d_inner() + 2 * self.n_groups * self.d_state + self.n_heads
    }

    /// Channels under the depthwise conv, `H*P + 2*G*N` (x, B, and C only).
    pub fn conv_channels(&self) -> usize {
        self.d_inner() + 2 * self.n_groups * self.d_state
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.n_groups
    }

    pub fn head_pattern(&self) -> HeadPattern {
        if self.n_groups == self.n_heads {
            HeadPattern::Mha
        } else if self.n_groups == 1 {
            HeadPattern::Mva
        } else {
            HeadPattern::Gva
        }
    }

    /// Structural sanity of the configuration itself.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_state", self.d_state),
            ("n_groups", self.n_groups),
            ("d_conv", self.d_conv),
            ("vocab_size", self.vocab_size),
            ("norm_len", self.norm_len),
        ] {
            if v == 0 {
                return Err(Error::dim("dims.validate", format!("{name} must be nonzero")));
            }
        }
        if self.n_heads % self.n_groups != 0 {
            return Err(Error::dim(
                "dims.validate",
                format!(
                    "n_heads {} not divisible by n_groups {}",
                    self.n_heads, self.n_groups
                ),
            ));
        }
        if self.has_mlp && self.d_mlp == 0 {
            return Err(Error::dim("dims.validate", "has_mlp set but d_mlp is 0"));
        }
        Ok(())
    }

    // ─── closed-form parameter counts (uniform models) ────────────────────────

    /// in_proj parameters per layer: `d_model * (2HP + 2GN + H)`.
    pub fn in_proj_params(&self) -> usize {
        self.d_model * self.in_proj_width()
    }

    /// Conv parameters per layer: `(HP + 2GN) * (K + 1)` (weight plus bias).
    pub fn conv_params(&self) -> usize {
        self.conv_channels() * (self.d_conv + 1)
    }

    /// out_proj parameters per layer: `HP * d_model`.
    pub fn out_proj_params(&self) -> usize {
        self.d_inner() * self.d_model
    }

    /// Per-head scalars plus the gated norm: `3H + HP`.
    pub fn misc_params(&self) -> usize {
        3 * self.n_heads + self.d_inner()
    }

    /// SSM-component parameters per layer.
    pub fn ssm_params_per_layer(&self) -> usize {
        self.in_proj_params() + self.conv_params() + self.out_proj_params() + self.misc_params()
    }

    /// MLP parameters per layer (gate, up, down), zero when absent.
    pub fn mlp_params_per_layer(&self) -> usize {
        if self.has_mlp {
            3 * self.d_model * self.d_mlp
        } else {
            0
        }
    }

    /// Embedding (and tied head) parameters.
    pub fn embedding_params(&self) -> usize {
        self.vocab_size * self.d_model
    }

    /// Whole-model parameter count.
    pub fn total_params(&self) -> usize {
        self.embedding_params()
            + self.n_layers * (self.ssm_params_per_layer() + self.mlp_params_per_layer())
    }
}

/// Optional gated MLP weights of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// `[d_model, d_mlp]`
    pub w_gate: Tensor,
    /// `[d_model, d_mlp]`
    pub w_up: Tensor,
    /// `[d_mlp, d_model]`
    pub w_down: Tensor,
}

/// Parameters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// Heads in this layer (may differ per layer after whole-head pruning).
    pub n_heads: usize,
    /// B/C groups in this layer.
    pub n_groups: usize,
    /// `[d_model, 2HP + 2GN + H]`, packed `[z | x | B | C | dt]`.
    pub w_inproj: Tensor,
    /// `[HP + 2GN, K]`: depthwise taps over the `[x | B | C]` channels.
    pub conv_w: Tensor,
    /// `[HP + 2GN]`
    pub conv_b: Tensor,
    /// `[H]`: state decay is `a = -exp(A_log)`.
    pub a_log: Tensor,
    /// `[H]`: skip gain on x in the SSD readout.
    pub d_skip: Tensor,
    /// `[H]`: bias inside `delta = softplus(dt + dt_bias)`.
    pub dt_bias: Tensor,
    /// `[HP]`: gated rmsnorm weight.
    pub norm_w: Tensor,
    /// `[HP, d_model]`
    pub w_outproj: Tensor,
    /// `[d_model]`, present after compensation-style pruning.
    pub outproj_bias: Option<Tensor>,
    pub mlp: Option<MlpParams>,
}

impl BlockParams {
    pub fn d_inner(&self, dims: &ModelDims) -> usize {
        self.n_heads * dims.head_dim
    }

    pub fn in_proj_width(&self, dims: &ModelDims) -> usize {
        2 * self.d_inner(dims) + 2 * self.n_groups * dims.d_state + self.n_heads
    }

    pub fn conv_channels(&self, dims: &ModelDims) -> usize {
        self.d_inner(dims) + 2 * self.n_groups * dims.d_state
    }

    /// Exact per-layer parameter count from materialized tensors.
    pub fn param_count(&self) -> usize {
        let mut count = self.w_inproj.numel()
            + self.conv_w.numel()
            + self.conv_b.numel()
            + self.a_log.numel()
            + self.d_skip.numel()
            + self.dt_bias.numel()
            + self.norm_w.numel()
            + self.w_outproj.numel();
        if let Some(b) = &self.outproj_bias {
            count += b.numel();
        }
        if let Some(mlp) = &self.mlp {
            count += mlp.w_gate.numel() + mlp.w_up.numel() + mlp.w_down.numel();
        }
        count
    }

    /// Shape check of every tensor in this block against its head/group counts.
    pub fn validate(&self, dims: &ModelDims, layer: usize) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::dim(
                "block.validate",
                format!("layer {layer}: {msg}"),
            ))
        };
        if self.n_heads == 0 || self.n_groups == 0 || self.n_heads % self.n_groups != 0 {
            return fail(format!(
                "bad head/group counts {}/{}",
                self.n_heads, self.n_groups
            ));
        }
        let width = self.in_proj_width(dims);
        if self.w_inproj.shape() != [dims.d_model, width] {
            return fail(format!(
                "in_proj {:?}, expected [{}, {width}]",
                self.w_inproj.shape(),
                dims.d_model
            ));
        }
        let ch = self.conv_channels(dims);
        if self.conv_w.shape() != [ch, dims.d_conv] {
            return fail(format!(
                "conv weight {:?}, expected [{ch}, {}]",
                self.conv_w.shape(),
                dims.d_conv
            ));
        }
        if self.conv_b.shape() != [ch] {
            return fail(format!("conv bias {:?}, expected [{ch}]", self.conv_b.shape()));
        }
        for (name, t) in [("A_log", &self.a_log), ("D", &self.d_skip), ("dt_bias", &self.dt_bias)] {
            if t.shape() != [self.n_heads] {
                return fail(format!("{name} {:?}, expected [{}]", t.shape(), self.n_heads));
            }
        }
        let d_inner = self.d_inner(dims);
        if self.norm_w.shape() != [d_inner] {
            return fail(format!("norm {:?}, expected [{d_inner}]", self.norm_w.shape()));
        }
        if self.w_outproj.shape() != [d_inner, dims.d_model] {
            return fail(format!(
                "out_proj {:?}, expected [{d_inner}, {}]",
                self.w_outproj.shape(),
                dims.d_model
            ));
        }
        if let Some(b) = &self.outproj_bias {
            if b.shape() != [dims.d_model] {
                return fail(format!("out_proj bias {:?}", b.shape()));
            }
        }
        match (&self.mlp, dims.has_mlp) {
            (Some(mlp), true) => {
                if mlp.w_gate.shape() != [dims.d_model, dims.d_mlp]
                    || mlp.w_up.shape() != [dims.d_model, dims.d_mlp]
                    || mlp.w_down.shape() != [dims.d_mlp, dims.d_model]
                {
                    return fail("mlp weight shapes".to_string());
                }
            }
            (None, false) => {}
            (Some(_), false) => return fail("mlp present but has_mlp is false".into()),
            (None, true) => return fail("has_mlp set but mlp weights missing".into()),
        }
        Ok(())
    }
}

/// Full parameter set of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[vocab_size, d_model]`; also the tied LM head.
    pub embedding: Tensor,
    pub blocks: Vec<BlockParams>,
}

impl ModelParams {
    /// Validates every tensor shape against `dims`, including the rule that the
    /// global head/group counts equal the per-layer maxima.
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        dims.validate()?;
        if self.embedding.shape() != [dims.vocab_size, dims.d_model] {
            return Err(Error::dim(
                "model.validate",
                format!(
                    "embedding {:?}, expected [{}, {}]",
                    self.embedding.shape(),
                    dims.vocab_size,
                    dims.d_model
                ),
            ));
        }
        if self.blocks.len() != dims.n_layers {
            return Err(Error::dim(
                "model.validate",
                format!("{} blocks vs n_layers {}", self.blocks.len(), dims.n_layers),
            ));
        }
        for (i, block) in self.blocks.iter().enumerate() {
            block.validate(dims, i)?;
        }
        let max_heads = self.blocks.iter().map(|b| b.n_heads).max().unwrap_or(0);
        let max_groups = self.blocks.iter().map(|b| b.n_groups).max().unwrap_or(0);
        if max_heads != dims.n_heads || max_groups != dims.n_groups {
            return Err(Error::dim(
                "model.validate",
                format!(
                    "dims carry heads/groups {}/{} but layer maxima are {max_heads}/{max_groups}",
                    dims.n_heads, dims.n_groups
                ),
            ));
        }
        Ok(())
    }

    /// True when every layer has the same head/group counts.
    pub fn is_uniform(&self) -> bool {
        self.blocks
            .windows(2)
            .all(|w| w[0].n_heads == w[1].n_heads && w[0].n_groups == w[1].n_groups)
    }

    /// Exact whole-model parameter count from materialized tensors.
    pub fn param_count(&self) -> usize {
        self.embedding.numel() + self.blocks.iter().map(BlockParams::param_count).sum::<usize>()
    }

    /// Copy of `dims` with head/group counts recomputed from the blocks.
    pub fn refreshed_dims(&self, dims: &ModelDims) -> ModelDims {
        let mut out = dims.clone();
        out.n_heads = self.blocks.iter().map(|b| b.n_heads).max().unwrap_or(dims.n_heads);
        out.n_groups = self.blocks.iter().map(|b| b.n_groups).max().unwrap_or(dims.n_groups);
        out
    }
}

/// Stats/Taylor key for a layer component, e.g. `layers.3.in_proj`.
pub fn layer_key(layer: usize, component: &str) -> String {
    format!("layers.{layer}.{component}")
}

/// Canonical tensor-name components shared by checkpoints, stats, and Taylor
/// accumulators.
pub mod names {
    pub const EMBEDDING: &str = "embedding.weight";
    pub const IN_PROJ_W: &str = "in_proj.weight";
    pub const CONV_W: &str = "conv1d.weight";
    pub const CONV_B: &str = "conv1d.bias";
    pub const A_LOG: &str = "A_log";
    pub const D: &str = "D";
    pub const DT_BIAS: &str = "dt_bias";
    pub const NORM_W: &str = "norm.weight";
    pub const OUT_PROJ_W: &str = "out_proj.weight";
    pub const OUT_PROJ_B: &str = "out_proj.bias";
    pub const MLP_GATE: &str = "mlp.gate.weight";
    pub const MLP_UP: &str = "mlp.up.weight";
    pub const MLP_DOWN: &str = "mlp.down.weight";
    /// Stats keys (linear-layer inputs) drop the `.weight` suffix.
    pub const IN_PROJ: &str = "in_proj";
    pub const OUT_PROJ: &str = "out_proj";
    pub const MLP_GATE_IN: &str = "mlp.gate";
    pub const MLP_UP_IN: &str = "mlp.up";
    pub const MLP_DOWN_IN: &str = "mlp.down";
    /// Stats key for the tied LM head's input (final-norm output).
    pub const LM_HEAD: &str = "lm_head";
}
