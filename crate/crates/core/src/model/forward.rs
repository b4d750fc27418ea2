//! Forward passes: plain, tapped (activation capture), and taped (autodiff).
//!
//! The three paths share one block pipeline: in_proj, split, causal conv with
//! silu over `[x | B | C]`, SSD scan, silu(z) gating, gated rmsnorm, out_proj,
//! residual add, then the optional gated MLP sublayer. The taped variant
//! records the identical computation on a [`Tape`] so Taylor gradients and
//! gradient checks exercise the same math as inference.

use crate::error::{Error, Result};
use crate::model::scan::ssd_sequential;
use crate::model::view::HeadView;
use crate::model::{layer_key, names, BlockParams, ModelDims, ModelParams, RMS_EPS};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Observer for linear-layer inputs, keyed like `layers.0.in_proj`.
pub type TapFn<'a> = dyn FnMut(&str, &Tensor) + 'a;

fn check_tokens(tokens: &[u32], vocab: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::dim("model.forward", "empty token sequence"));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::dim(
            "model.forward",
            format!("token {bad} out of vocab {vocab}"),
        ));
    }
    Ok(())
}

fn embed(embedding: &Tensor, tokens: &[u32]) -> Result<Tensor> {
    let (_, d_model) = embedding.dims2("model.embed")?;
    let mut data = Vec::with_capacity(tokens.len() * d_model);
    for &t in tokens {
        let t = t as usize;
        data.extend_from_slice(&embedding.data()[t * d_model..(t + 1) * d_model]);
    }
    Tensor::new(vec![tokens.len(), d_model], data)
}

// ─── plain forward ──────────────────────────────────────────────────────────────

fn block_forward_inner(
    layer: usize,
    block: &BlockParams,
    dims: &ModelDims,
    u: &Tensor,
    mut tap: Option<&mut TapFn>,
) -> Result<Tensor> {
    let view = HeadView::for_block(block, dims);
    let (t_len, _) = u.dims2("model.block_forward")?;
    let hp = view.d_inner();
    let gw = view.group_width();

    if let Some(tap) = tap.as_deref_mut() {
        tap(&layer_key(layer, names::IN_PROJ), u);
    }
    let proj = u.matmul(&block.w_inproj)?;
    let z = proj.slice_cols(0, hp)?;
    let xbc = proj.slice_cols(hp, hp + 2 * gw)?;
    let dt = proj.slice_cols(2 * hp + 2 * gw, block.n_heads)?;

    let conv = xbc
        .transpose2()?
        .conv1d_depthwise_causal(&block.conv_w, &block.conv_b)?
        .silu()?
        .transpose2()?;
    let x3 = conv
        .slice_cols(0, hp)?
        .reshape(vec![t_len, block.n_heads, dims.head_dim])?;
    let b3 = conv
        .slice_cols(hp, gw)?
        .reshape(vec![t_len, block.n_groups, dims.d_state])?;
    let c3 = conv
        .slice_cols(hp + gw, gw)?
        .reshape(vec![t_len, block.n_groups, dims.d_state])?;

    let h0 = Tensor::zeros(vec![block.n_heads, dims.head_dim, dims.d_state]);
    let (y, _) = ssd_sequential(
        &x3,
        &b3,
        &c3,
        &dt,
        &block.a_log,
        &block.d_skip,
        &block.dt_bias,
        &h0,
    )?;
    let gated = y.reshape(vec![t_len, hp])?.mul(&z.silu()?)?;
    let normed = gated.rmsnorm_scaled(&block.norm_w, dims.norm_len, RMS_EPS)?;
    if let Some(tap) = tap.as_deref_mut() {
        tap(&layer_key(layer, names::OUT_PROJ), &normed);
    }
    let mut mixed = normed.matmul(&block.w_outproj)?;
    if let Some(bias) = &block.outproj_bias {
        mixed = mixed.add_row_broadcast(bias)?;
    }
    let mut out = u.add(&mixed)?;

    if let Some(mlp) = &block.mlp {
        if let Some(tap) = tap.as_deref_mut() {
            tap(&layer_key(layer, names::MLP_GATE_IN), &out);
            tap(&layer_key(layer, names::MLP_UP_IN), &out);
        }
        let gate = out.matmul(&mlp.w_gate)?.silu()?;
        let up = out.matmul(&mlp.w_up)?;
        let act = gate.mul(&up)?;
        if let Some(tap) = tap.as_deref_mut() {
            tap(&layer_key(layer, names::MLP_DOWN_IN), &act);
        }
        out = out.add(&act.matmul(&mlp.w_down)?)?;
    }
    Ok(out)
}

/// One block over `u [T, d_model]`: SSM mixer with residual, then the optional
/// gated MLP with residual.
pub fn block_forward(block: &BlockParams, dims: &ModelDims, u: &Tensor) -> Result<Tensor> {
    block_forward_inner(0, block, dims, u, None)
}

/// Logits `[T, vocab]` for a token sequence: embedding, blocks, final
/// (unweighted) rmsnorm, tied LM head.
pub fn model_forward(m: &ModelParams, dims: &ModelDims, tokens: &[u32]) -> Result<Tensor> {
    model_forward_impl(m, dims, tokens, None)
}

/// [`model_forward`] that also reports every linear layer's input rows to `tap`.
pub fn model_forward_with_taps(
    m: &ModelParams,
    dims: &ModelDims,
    tokens: &[u32],
    tap: &mut TapFn,
) -> Result<Tensor> {
    model_forward_impl(m, dims, tokens, Some(tap))
}

fn model_forward_impl(
    m: &ModelParams,
    dims: &ModelDims,
    tokens: &[u32],
    mut tap: Option<&mut TapFn>,
) -> Result<Tensor> {
    check_tokens(tokens, dims.vocab_size)?;
    let mut h = embed(&m.embedding, tokens)?;
    for (layer, block) in m.blocks.iter().enumerate() {
        h = block_forward_inner(layer, block, dims, &h, tap.as_deref_mut())?;
    }
    let unit = Tensor::filled(vec![dims.d_model], 1.0);
    let normed = h.rmsnorm(&unit, RMS_EPS)?;
    if let Some(tap) = tap.as_deref_mut() {
        tap(names::LM_HEAD, &normed);
    }
    normed.matmul(&m.embedding.transpose2()?)
}

// ─── taped forward ──────────────────────────────────────────────────────────────

/// Leaf node ids for one block's parameters.
pub struct TapedBlock {
    pub n_heads: usize,
    pub n_groups: usize,
    pub w_inproj: NodeId,
    pub conv_w: NodeId,
    pub conv_b: NodeId,
    pub a_log: NodeId,
    pub d_skip: NodeId,
    pub dt_bias: NodeId,
    pub norm_w: NodeId,
    pub w_outproj: NodeId,
    pub outproj_bias: Option<NodeId>,
    pub mlp: Option<(NodeId, NodeId, NodeId)>,
}

impl TapedBlock {
    /// Registers every tensor of `block` as a leaf on `tape`.
    pub fn leaves(tape: &mut Tape, block: &BlockParams) -> TapedBlock {
        TapedBlock {
            n_heads: block.n_heads,
            n_groups: block.n_groups,
            w_inproj: tape.leaf(block.w_inproj.clone()),
            conv_w: tape.leaf(block.conv_w.clone()),
            conv_b: tape.leaf(block.conv_b.clone()),
            a_log: tape.leaf(block.a_log.clone()),
            d_skip: tape.leaf(block.d_skip.clone()),
            dt_bias: tape.leaf(block.dt_bias.clone()),
            norm_w: tape.leaf(block.norm_w.clone()),
            w_outproj: tape.leaf(block.w_outproj.clone()),
            outproj_bias: block.outproj_bias.as_ref().map(|b| tape.leaf(b.clone())),
            mlp: block.mlp.as_ref().map(|mlp| {
                (
                    tape.leaf(mlp.w_gate.clone()),
                    tape.leaf(mlp.w_up.clone()),
                    tape.leaf(mlp.w_down.clone()),
                )
            }),
        }
    }

    /// (tensor name, node) pairs for this block under the given layer index.
    pub fn named(&self, layer: usize) -> Vec<(String, NodeId)> {
        let mut out = vec![
            (layer_key(layer, names::IN_PROJ_W), self.w_inproj),
            (layer_key(layer, names::CONV_W), self.conv_w),
            (layer_key(layer, names::CONV_B), self.conv_b),
            (layer_key(layer, names::A_LOG), self.a_log),
            (layer_key(layer, names::D), self.d_skip),
            (layer_key(layer, names::DT_BIAS), self.dt_bias),
            (layer_key(layer, names::NORM_W), self.norm_w),
            (layer_key(layer, names::OUT_PROJ_W), self.w_outproj),
        ];
        if let Some(bias) = self.outproj_bias {
            out.push((layer_key(layer, names::OUT_PROJ_B), bias));
        }
        if let Some((gate, up, down)) = self.mlp {
            out.push((layer_key(layer, names::MLP_GATE), gate));
            out.push((layer_key(layer, names::MLP_UP), up));
            out.push((layer_key(layer, names::MLP_DOWN), down));
        }
        out
    }
}

/// Leaf node ids for a whole model.
pub struct TapedParams {
    pub embedding: NodeId,
    pub blocks: Vec<TapedBlock>,
}

impl TapedParams {
    pub fn leaves(tape: &mut Tape, m: &ModelParams) -> TapedParams {
        TapedParams {
            embedding: tape.leaf(m.embedding.clone()),
            blocks: m
                .blocks
                .iter()
                .map(|b| TapedBlock::leaves(tape, b))
                .collect(),
        }
    }

    /// (tensor name, node) pairs for every SSM parameter tensor, embedding last.
    pub fn named(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        for (layer, block) in self.blocks.iter().enumerate() {
            out.extend(block.named(layer));
        }
        out.push((names::EMBEDDING.to_string(), self.embedding));
        out
    }
}

/// The block pipeline recorded on a tape. `u` is a `[T, d_model]` node.
pub fn block_forward_taped(
    tape: &mut Tape,
    block: &TapedBlock,
    dims: &ModelDims,
    u: NodeId,
) -> Result<NodeId> {
    let view = HeadView::new(block.n_heads, block.n_groups, dims.head_dim, dims.d_state);
    let (t_len, _) = tape.value(u).dims2("model.block_forward_taped")?;
    let hp = view.d_inner();
    let gw = view.group_width();

    let proj = tape.matmul(u, block.w_inproj)?;
    let z = tape.slice_cols(proj, 0, hp)?;
    let xbc = tape.slice_cols(proj, hp, hp + 2 * gw)?;
    let dt = tape.slice_cols(proj, 2 * hp + 2 * gw, block.n_heads)?;

    let xbc_t = tape.transpose2(xbc)?;
    let conv = tape.conv1d_depthwise_causal(xbc_t, block.conv_w, block.conv_b)?;
    let conv = tape.silu(conv)?;
    let conv = tape.transpose2(conv)?;
    let x = tape.slice_cols(conv, 0, hp)?;
    let x3 = tape.reshape(x, vec![t_len, block.n_heads, dims.head_dim])?;
    let b = tape.slice_cols(conv, hp, gw)?;
    let b3 = tape.reshape(b, vec![t_len, block.n_groups, dims.d_state])?;
    let c = tape.slice_cols(conv, hp + gw, gw)?;
    let c3 = tape.reshape(c, vec![t_len, block.n_groups, dims.d_state])?;

    let y = tape.ssd(x3, b3, c3, dt, block.a_log, block.d_skip, block.dt_bias)?;
    let y2 = tape.reshape(y, vec![t_len, hp])?;
    let zs = tape.silu(z)?;
    let gated = tape.mul(y2, zs)?;
    let normed = tape.rmsnorm_scaled(gated, block.norm_w, dims.norm_len, RMS_EPS)?;
    let mut mixed = tape.matmul(normed, block.w_outproj)?;
    if let Some(bias) = block.outproj_bias {
        mixed = tape.add_row_broadcast(mixed, bias)?;
    }
    let mut out = tape.add(u, mixed)?;

    if let Some((w_gate, w_up, w_down)) = block.mlp {
        let gate = tape.matmul(out, w_gate)?;
        let gate = tape.silu(gate)?;
        let up = tape.matmul(out, w_up)?;
        let act = tape.mul(gate, up)?;
        let down = tape.matmul(act, w_down)?;
        out = tape.add(out, down)?;
    }
    Ok(out)
}

/// Records the full forward and mean next-token cross-entropy on `tape`.
///
/// Returns the scalar loss node and the parameter leaves. Requires at least two
/// tokens (one predicted position).
pub fn model_loss_taped(
    m: &ModelParams,
    dims: &ModelDims,
    tokens: &[u32],
    tape: &mut Tape,
) -> Result<(NodeId, TapedParams)> {
    check_tokens(tokens, dims.vocab_size)?;
    if tokens.len() < 2 {
        return Err(Error::dim(
            "model.loss",
            "need at least 2 tokens for a next-token loss",
        ));
    }
    let params = TapedParams::leaves(tape, m);
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut h = tape.gather(params.embedding, ids)?;
    for block in &params.blocks {
        h = block_forward_taped(tape, block, dims, h)?;
    }
    let unit = tape.leaf(Tensor::filled(vec![dims.d_model], 1.0));
    let normed = tape.rmsnorm_scaled(h, unit, dims.d_model, RMS_EPS)?;
    let head = tape.transpose2(params.embedding)?;
    let logits = tape.matmul(normed, head)?;
    let predict = tape.slice_rows(logits, 0, tokens.len() - 1)?;
    let loss = tape.cross_entropy(predict, &tokens[1..])?;
    Ok((loss, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpParams;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            head_dim: 2,
            d_state: 2,
            n_groups: 1,
            d_conv: 2,
            vocab_size: 8,
            norm_len: 4,
            has_mlp: false,
            d_mlp: 0,
        }
    }

    fn zero_block(dims: &ModelDims) -> BlockParams {
        BlockParams {
            n_heads: dims.n_heads,
            n_groups: dims.n_groups,
            w_inproj: Tensor::zeros(vec![dims.d_model, dims.in_proj_width()]),
            conv_w: Tensor::zeros(vec![dims.conv_channels(), dims.d_conv]),
            conv_b: Tensor::zeros(vec![dims.conv_channels()]),
            a_log: Tensor::zeros(vec![dims.n_heads]),
            d_skip: Tensor::zeros(vec![dims.n_heads]),
            dt_bias: Tensor::zeros(vec![dims.n_heads]),
            norm_w: Tensor::zeros(vec![dims.d_inner()]),
            w_outproj: Tensor::zeros(vec![dims.d_inner(), dims.d_model]),
            outproj_bias: None,
            mlp: None,
        }
    }

    /// Deterministic non-zero block for structural tests.
    fn patterned_block(dims: &ModelDims, salt: u32) -> BlockParams {
        let fill = |shape: Vec<usize>, scale: f32| {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|i| {
                    let v = ((i as u32).wrapping_mul(2654435761).wrapping_add(salt) >> 8) % 1000;
                    (v as f32 / 1000.0 - 0.5) * scale
                })
                .collect();
            Tensor::new(shape, data).unwrap()
        };
        BlockParams {
            n_heads: dims.n_heads,
            n_groups: dims.n_groups,
            w_inproj: fill(vec![dims.d_model, dims.in_proj_width()], 0.8),
            conv_w: fill(vec![dims.conv_channels(), dims.d_conv], 0.6),
            conv_b: fill(vec![dims.conv_channels()], 0.2),
            a_log: fill(vec![dims.n_heads], 0.5),
            d_skip: fill(vec![dims.n_heads], 1.0),
            dt_bias: fill(vec![dims.n_heads], 0.5),
            norm_w: fill(vec![dims.d_inner()], 1.0),
            w_outproj: fill(vec![dims.d_inner(), dims.d_model], 0.8),
            outproj_bias: None,
            mlp: None,
        }
    }

    fn patterned_model(dims: &ModelDims) -> ModelParams {
        let fill = |shape: Vec<usize>, scale: f32, salt: u32| {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|i| {
                    let v = ((i as u32).wrapping_mul(2246822519).wrapping_add(salt) >> 7) % 997;
                    (v as f32 / 997.0 - 0.5) * scale
                })
                .collect();
            Tensor::new(shape, data).unwrap()
        };
        ModelParams {
            embedding: fill(vec![dims.vocab_size, dims.d_model], 1.2, 11),
            blocks: (0..dims.n_layers)
                .map(|i| patterned_block(dims, 31 + i as u32))
                .collect(),
        }
    }

    #[test]
    fn zero_block_is_identity() {
        let dims = tiny_dims();
        let block = zero_block(&dims);
        let u = Tensor::new(vec![3, 4], (0..12).map(|i| i as f32 * 0.25).collect()).unwrap();
        let out = block_forward(&block, &dims, &u).unwrap();
        assert_eq!(out, u);
    }

    #[test]
    fn zero_outproj_block_is_identity_even_with_live_mixer() {
        let dims = tiny_dims();
        let mut block = patterned_block(&dims, 7);
        block.w_outproj = Tensor::zeros(vec![dims.d_inner(), dims.d_model]);
        let u = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f32 - 6.0) * 0.3).collect()).unwrap();
        let out = block_forward(&block, &dims, &u).unwrap();
        assert_eq!(out, u);
    }

    #[test]
    fn doubling_norm_weight_doubles_the_mixer_branch() {
        let dims = tiny_dims();
        let block = patterned_block(&dims, 3);
        let mut doubled = block.clone();
        doubled.norm_w = block.norm_w.scale(2.0).unwrap();
        let u = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f32 - 5.0) * 0.2).collect()).unwrap();
        let base = block_forward(&block, &dims, &u).unwrap();
        let twice = block_forward(&doubled, &dims, &u).unwrap();
        for i in 0..base.numel() {
            let branch = base.data()[i] - u.data()[i];
            let branch2 = twice.data()[i] - u.data()[i];
            assert!((branch2 - 2.0 * branch).abs() < 1e-5, "{branch} vs {branch2}");
        }
    }

    #[test]
    fn zero_model_emits_uniform_logits() {
        let dims = tiny_dims();
        let m = ModelParams {
            embedding: Tensor::zeros(vec![dims.vocab_size, dims.d_model]),
            blocks: vec![zero_block(&dims)],
        };
        let logits = model_forward(&m, &dims, &[1, 2, 3]).unwrap();
        for row in logits.data().chunks(dims.vocab_size) {
            for &v in row {
                assert_eq!(v, row[0]);
            }
        }
    }

    #[test]
    fn forward_is_causal() {
        let dims = tiny_dims();
        let m = patterned_model(&dims);
        let a = model_forward(&m, &dims, &[1, 2, 3, 4]).unwrap();
        let b = model_forward(&m, &dims, &[1, 2, 3, 7]).unwrap();
        // Rows before the changed position are bit-identical.
        let v = dims.vocab_size;
        assert_eq!(a.data()[..3 * v], b.data()[..3 * v]);
        assert_ne!(a.data()[3 * v..], b.data()[3 * v..]);
    }

    #[test]
    fn prefix_logits_are_stable_under_extension() {
        let dims = tiny_dims();
        let m = patterned_model(&dims);
        let short = model_forward(&m, &dims, &[5, 1, 6]).unwrap();
        let long = model_forward(&m, &dims, &[5, 1, 6, 2, 0]).unwrap();
        assert_eq!(short.data(), &long.data()[..short.numel()]);
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        let dims = tiny_dims();
        let m = patterned_model(&dims);
        assert!(model_forward(&m, &dims, &[1, 99]).is_err());
        assert!(model_forward(&m, &dims, &[]).is_err());
    }

    #[test]
    fn taps_fire_for_each_linear_layer() {
        let dims = tiny_dims();
        let m = patterned_model(&dims);
        let mut seen = Vec::new();
        let mut tap = |name: &str, t: &Tensor| seen.push((name.to_string(), t.shape().to_vec()));
        model_forward_with_taps(&m, &dims, &[1, 2, 3], &mut tap).unwrap();
        assert_eq!(
            seen,
            vec![
                ("layers.0.in_proj".to_string(), vec![3, 4]),
                ("layers.0.out_proj".to_string(), vec![3, 4]),
                ("lm_head".to_string(), vec![3, 4]),
            ]
        );
    }

    #[test]
    fn mlp_block_taps_and_forward() {
        let mut dims = tiny_dims();
        dims.has_mlp = true;
        dims.d_mlp = 5;
        let mut m = patterned_model(&dims);
        m.blocks[0].mlp = Some(MlpParams {
            w_gate: Tensor::filled(vec![4, 5], 0.1),
            w_up: Tensor::filled(vec![4, 5], 0.05),
            w_down: Tensor::filled(vec![5, 4], 0.1),
        });
        let mut seen = Vec::new();
        let mut tap = |name: &str, _: &Tensor| seen.push(name.to_string());
        model_forward_with_taps(&m, &dims, &[1, 2], &mut tap).unwrap();
        assert_eq!(
            seen,
            vec![
                "layers.0.in_proj",
                "layers.0.out_proj",
                "layers.0.mlp.gate",
                "layers.0.mlp.up",
                "layers.0.mlp.down",
                "lm_head",
            ]
        );
    }

    #[test]
    fn taped_forward_value_matches_plain_forward_loss() {
        let dims = tiny_dims();
        let m = patterned_model(&dims);
        let tokens = [1u32, 4, 2, 7, 3];
        let mut tape = Tape::new();
        let (loss, _) = model_loss_taped(&m, &dims, &tokens, &mut tape).unwrap();
        // Replicate the loss from the plain forward in f64.
        let logits = model_forward(&m, &dims, &tokens).unwrap();
        let v = dims.vocab_size;
        let mut total = 0.0f64;
        for (row, &target) in tokens[1..].iter().enumerate().map(|(i, t)| (i, t)) {
            let r = &logits.data()[row * v..(row + 1) * v];
            let max = r.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
            let z: f64 = r.iter().map(|&l| f64::from(l - max).exp()).sum();
            total += z.ln() + f64::from(max) - f64::from(r[target as usize]);
        }
        let expect = total / 4.0;
        let got = f64::from(tape.value(loss).data()[0]);
        assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
    }

    #[test]
    fn taped_loss_needs_two_tokens() {
        let dims = tiny_dims();
        let m = patterned_model(&dims);
        let mut tape = Tape::new();
        assert!(model_loss_taped(&m, &dims, &[3], &mut tape).is_err());
    }
}
