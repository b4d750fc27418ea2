//! Head/group merging by mean-pooling runs of `factor` adjacent units.
//!
//! Layers with B/C groups to spare (G > 1) merge groups: the x/z heads stay
//! put and only B/C projections shrink. Single-group layers (G == 1) merge
//! whole x heads instead; their out_proj row blocks are summed rather than
//! averaged so the residual write keeps its scale, and the gated-norm divisor
//! shrinks with the heads it normalizes over.

use crate::error::{Error, Result};
use crate::model::view::HeadView;
use crate::model::{BlockParams, ModelDims, ModelParams};
use crate::tensor::Tensor;

use super::PrunePlan;

#[derive(Clone, Copy, PartialEq)]
enum Reduce {
    Mean,
    Sum,
}

fn reduce_sources(w: &[f32], stride: impl Fn(usize) -> usize, srcs: &[usize], r: Reduce) -> f32 {
    let sum: f64 = srcs.iter().map(|&i| f64::from(w[stride(i)])).sum();
    match r {
        Reduce::Mean => (sum / srcs.len() as f64) as f32,
        Reduce::Sum => sum as f32,
    }
}

fn gather_cols(w: &Tensor, sources: &[Vec<usize>], r: Reduce) -> Result<Tensor> {
    let (rows, _) = w.dims2("merge.gather_cols")?;
    let cols = sources.len();
    let mut data = vec![0.0f32; rows * cols];
    let old_cols = w.shape()[1];
    for row in 0..rows {
        let src_row = &w.data()[row * old_cols..(row + 1) * old_cols];
        for (j, srcs) in sources.iter().enumerate() {
            data[row * cols + j] = reduce_sources(src_row, |i| i, srcs, r);
        }
    }
    Tensor::new(vec![rows, cols], data)
}

fn gather_rows(w: &Tensor, sources: &[Vec<usize>], r: Reduce) -> Result<Tensor> {
    let (_, cols) = w.dims2("merge.gather_rows")?;
    let rows = sources.len();
    let mut data = vec![0.0f32; rows * cols];
    for (j, srcs) in sources.iter().enumerate() {
        for col in 0..cols {
            data[j * cols + col] = reduce_sources(w.data(), |i| i * cols + col, srcs, r);
        }
    }
    Tensor::new(vec![rows, cols], data)
}

fn gather_1d(v: &Tensor, sources: &[Vec<usize>], r: Reduce) -> Result<Tensor> {
    let data = sources
        .iter()
        .map(|srcs| reduce_sources(v.data(), |i| i, srcs, r))
        .collect();
    Tensor::new(vec![sources.len()], data)
}

fn run(start: usize, factor: usize, step: impl Fn(usize) -> usize) -> Vec<usize> {
    (0..factor).map(|f| step(start * factor + f)).collect()
}

/// Builds a merge plan with the given factor.
pub fn plan_merge(factor: usize) -> Result<PrunePlan> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Plan(format!("merge factor {factor} is not a positive power of two")));
    }
    let mut plan = PrunePlan::identity("merge");
    plan.merge_factor = Some(factor);
    Ok(plan)
}

/// Merges heads or groups, returning the smaller model.
pub fn merge_heads(
    m: &ModelParams,
    dims: &ModelDims,
    factor: usize,
) -> Result<(ModelParams, ModelDims)> {
    let mut model = m.clone();
    let mut out = dims.clone();
    merge_in_place(&mut model, &mut out, factor)?;
    model.validate(&out)?;
    Ok((model, out))
}

fn merge_bc_block(block: &BlockParams, dims: &ModelDims, factor: usize) -> Result<BlockParams> {
    let view = HeadView::for_block(block, dims);
    let (h, g, p, n) = (block.n_heads, block.n_groups, dims.head_dim, dims.d_state);
    let g_new = g / factor;

    let mut cols: Vec<Vec<usize>> = Vec::new();
    for head in 0..h {
        cols.extend((0..p).map(|c| vec![view.z_col(head, c)]));
    }
    for head in 0..h {
        cols.extend((0..p).map(|c| vec![view.x_col(head, c)]));
    }
    for group in 0..g_new {
        cols.extend((0..n).map(|c| run(group, factor, |src| view.b_col(src, c))));
    }
    for group in 0..g_new {
        cols.extend((0..n).map(|c| run(group, factor, |src| view.c_col(src, c))));
    }
    cols.extend((0..h).map(|head| vec![view.dt_col(head)]));

    let mut conv: Vec<Vec<usize>> = Vec::new();
    for head in 0..h {
        conv.extend((0..p).map(|c| vec![view.conv_x_channels(head).start + c]));
    }
    for group in 0..g_new {
        conv.extend((0..n).map(|c| run(group, factor, |src| view.conv_b_channels(src).start + c)));
    }
    for group in 0..g_new {
        conv.extend((0..n).map(|c| run(group, factor, |src| view.conv_c_channels(src).start + c)));
    }

    Ok(BlockParams {
        n_heads: h,
        n_groups: g_new,
        w_inproj: gather_cols(&block.w_inproj, &cols, Reduce::Mean)?,
        conv_w: gather_rows(&block.conv_w, &conv, Reduce::Mean)?,
        conv_b: gather_1d(&block.conv_b, &conv, Reduce::Mean)?,
        a_log: block.a_log.clone(),
        d_skip: block.d_skip.clone(),
        dt_bias: block.dt_bias.clone(),
        norm_w: block.norm_w.clone(),
        w_outproj: block.w_outproj.clone(),
        outproj_bias: block.outproj_bias.clone(),
        mlp: block.mlp.clone(),
    })
}

fn merge_x_block(block: &BlockParams, dims: &ModelDims, factor: usize) -> Result<BlockParams> {
    let view = HeadView::for_block(block, dims);
    let (h, p, n) = (block.n_heads, dims.head_dim, dims.d_state);
    let h_new = h / factor;

    let mut cols: Vec<Vec<usize>> = Vec::new();
    for head in 0..h_new {
        cols.extend((0..p).map(|c| run(head, factor, |src| view.z_col(src, c))));
    }
    for head in 0..h_new {
        cols.extend((0..p).map(|c| run(head, factor, |src| view.x_col(src, c))));
    }
    cols.extend((0..n).map(|c| vec![view.b_col(0, c)]));
    cols.extend((0..n).map(|c| vec![view.c_col(0, c)]));
    cols.extend((0..h_new).map(|head| run(head, factor, |src| view.dt_col(src))));

    let mut conv: Vec<Vec<usize>> = Vec::new();
    for head in 0..h_new {
        conv.extend((0..p).map(|c| run(head, factor, |src| view.conv_x_channels(src).start + c)));
    }
    conv.extend((0..n).map(|c| vec![view.conv_b_channels(0).start + c]));
    conv.extend((0..n).map(|c| vec![view.conv_c_channels(0).start + c]));

    let mut inner: Vec<Vec<usize>> = Vec::new();
    for head in 0..h_new {
        inner.extend((0..p).map(|c| run(head, factor, |src| view.out_rows(src).start + c)));
    }
    let heads: Vec<Vec<usize>> = (0..h_new).map(|head| run(head, factor, |src| src)).collect();

    Ok(BlockParams {
        n_heads: h_new,
        n_groups: 1,
        w_inproj: gather_cols(&block.w_inproj, &cols, Reduce::Mean)?,
        conv_w: gather_rows(&block.conv_w, &conv, Reduce::Mean)?,
        conv_b: gather_1d(&block.conv_b, &conv, Reduce::Mean)?,
        a_log: gather_1d(&block.a_log, &heads, Reduce::Mean)?,
        d_skip: gather_1d(&block.d_skip, &heads, Reduce::Mean)?,
        dt_bias: gather_1d(&block.dt_bias, &heads, Reduce::Mean)?,
        norm_w: gather_1d(&block.norm_w, &inner, Reduce::Mean)?,
        w_outproj: gather_rows(&block.w_outproj, &inner, Reduce::Sum)?,
        outproj_bias: block.outproj_bias.clone(),
        mlp: block.mlp.clone(),
    })
}

pub(crate) fn merge_in_place(
    m: &mut ModelParams,
    dims: &mut ModelDims,
    factor: usize,
) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Plan(format!("merge factor {factor} is not a positive power of two")));
    }
    if factor == 1 {
        return Ok(());
    }
    let grouped = m.blocks.iter().filter(|b| b.n_groups > 1).count();
    if grouped != 0 && grouped != m.blocks.len() {
        return Err(Error::Plan(
            "merge needs a uniform branch: every layer with B/C groups or none".into(),
        ));
    }
    let bc = grouped == m.blocks.len();
    for (i, block) in m.blocks.iter().enumerate() {
        let units = if bc { block.n_groups } else { block.n_heads };
        if units % factor != 0 {
            let what = if bc { "groups" } else { "heads" };
            return Err(Error::Plan(format!(
                "layer {i}: {units} {what} not divisible by merge factor {factor}"
            )));
        }
    }
    if !bc && dims.norm_len % factor != 0 {
        return Err(Error::Plan(format!(
            "norm divisor {} not divisible by merge factor {factor}",
            dims.norm_len
        )));
    }

    let mut blocks = Vec::with_capacity(m.blocks.len());
    for block in &m.blocks {
        blocks.push(if bc {
            merge_bc_block(block, dims, factor)?
        } else {
            merge_x_block(block, dims, factor)?
        });
    }
    m.blocks = blocks;
    *dims = m.refreshed_dims(dims);
    if !bc {
        dims.norm_len /= factor;
    }
    Ok(())
}

/// Function-preserving inverse of a merge: every head (G == 1) or B/C group
/// (G > 1) is repeated `factor` times. X-head expansion scales the duplicated
/// out_proj rows by `1/factor` and the norm divisor by `factor`, so the
/// expanded model computes exactly what the input did — and merging it back
/// recovers the input. Used to validate merges and to build test fixtures.
pub fn expand_heads(
    m: &ModelParams,
    dims: &ModelDims,
    factor: usize,
) -> Result<(ModelParams, ModelDims)> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Plan(format!("expand factor {factor} is not a positive power of two")));
    }
    if factor == 1 {
        return Ok((m.clone(), dims.clone()));
    }
    let grouped = m.blocks.iter().filter(|b| b.n_groups > 1).count();
    if grouped != 0 && grouped != m.blocks.len() {
        return Err(Error::Plan(
            "expand needs a uniform branch: every layer with B/C groups or none".into(),
        ));
    }
    let bc = grouped == m.blocks.len();

    let mut out = m.clone();
    let mut out_dims = dims.clone();
    for block in &mut out.blocks {
        let view = HeadView::for_block(block, dims);
        let (h, g, p, n) = (block.n_heads, block.n_groups, dims.head_dim, dims.d_state);
        if bc {
            let mut cols = Vec::new();
            for head in 0..h {
                cols.extend((0..p).map(|c| view.z_col(head, c)));
            }
            for head in 0..h {
                cols.extend((0..p).map(|c| view.x_col(head, c)));
            }
            for group in 0..g {
                for _ in 0..factor {
                    cols.extend((0..n).map(|c| view.b_col(group, c)));
                }
            }
            for group in 0..g {
                for _ in 0..factor {
                    cols.extend((0..n).map(|c| view.c_col(group, c)));
                }
            }
            cols.extend((0..h).map(|head| view.dt_col(head)));
            let mut conv = Vec::new();
            for head in 0..h {
                conv.extend((0..p).map(|c| view.conv_x_channels(head).start + c));
            }
            for group in 0..g {
                for _ in 0..factor {
                    conv.extend((0..n).map(|c| view.conv_b_channels(group).start + c));
                }
            }
            for group in 0..g {
                for _ in 0..factor {
                    conv.extend((0..n).map(|c| view.conv_c_channels(group).start + c));
                }
            }
            block.w_inproj = block.w_inproj.select_cols(&cols)?;
            block.conv_w = block.conv_w.select_rows(&conv)?;
            block.conv_b = block.conv_b.select_1d(&conv)?;
            block.n_groups = g * factor;
        } else {
            let rep = |base: Vec<usize>| -> Vec<usize> {
                base.iter()
                    .flat_map(|&i| std::iter::repeat(i).take(factor))
                    .collect()
            };
            let mut cols = Vec::new();
            for head in 0..h {
                for _ in 0..factor {
                    cols.extend((0..p).map(|c| view.z_col(head, c)));
                }
            }
            for head in 0..h {
                for _ in 0..factor {
                    cols.extend((0..p).map(|c| view.x_col(head, c)));
                }
            }
            cols.extend((0..n).map(|c| view.b_col(0, c)));
            cols.extend((0..n).map(|c| view.c_col(0, c)));
            cols.extend(rep((0..h).map(|head| view.dt_col(head)).collect()));
            let mut conv = Vec::new();
            for head in 0..h {
                for _ in 0..factor {
                    conv.extend((0..p).map(|c| view.conv_x_channels(head).start + c));
                }
            }
            conv.extend((0..n).map(|c| view.conv_b_channels(0).start + c));
            conv.extend((0..n).map(|c| view.conv_c_channels(0).start + c));
            let mut inner = Vec::new();
            for head in 0..h {
                for _ in 0..factor {
                    inner.extend((0..p).map(|c| view.out_rows(head).start + c));
                }
            }
            let head_idx = rep((0..h).collect());
            block.w_inproj = block.w_inproj.select_cols(&cols)?;
            block.conv_w = block.conv_w.select_rows(&conv)?;
            block.conv_b = block.conv_b.select_1d(&conv)?;
            block.a_log = block.a_log.select_1d(&head_idx)?;
            block.d_skip = block.d_skip.select_1d(&head_idx)?;
            block.dt_bias = block.dt_bias.select_1d(&head_idx)?;
            block.norm_w = block.norm_w.select_1d(&inner)?;
            block.w_outproj = block.w_outproj.select_rows(&inner)?.scale(1.0 / factor as f32)?;
            block.n_heads = h * factor;
        }
    }
    out_dims = out.refreshed_dims(&out_dims);
    if !bc {
        out_dims.norm_len *= factor;
    }
    out.validate(&out_dims)?;
    Ok((out, out_dims))
}
