//! Seeded toy models and synthetic corpora.
//!
//! Generated models are "teacher-planted": B/C projection columns carry
//! log-spaced per-state-channel magnitudes (with a little per-group jitter),
//! so channel importance has a knowable ordering and ranking methods have
//! something real to find. Conv biases on B/C channels are zero, which makes
//! zeroing a state channel's columns exactly equivalent to removing it.
//! Everything is a pure function of the dims and one seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calib::CalibSet;
use crate::error::{Error, Result};
use crate::model::{model_forward, BlockParams, MlpParams, ModelDims, ModelParams};
use crate::tensor::Tensor;

/// Hard ceiling on materialized parameters; larger configurations exist for
/// closed-form arithmetic only.
pub const MAX_MATERIALIZED_PARAMS: usize = 100_000_000;

/// Named dimension presets.
pub fn preset_names() -> &'static [&'static str] {
    &["desk", "toy", "toy-gva", "toy-mha", "mamba2-2.7b", "phi-mamba"]
}

pub fn preset_dims(name: &str) -> Result<ModelDims> {
    let dims = match name {
        "desk" => ModelDims {
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            head_dim: 3,
            d_state: 4,
            n_groups: 1,
            d_conv: 2,
            vocab_size: 16,
            norm_len: 6,
            has_mlp: false,
            d_mlp: 0,
        },
        "toy" | "toy-gva" | "toy-mha" => ModelDims {
            d_model: 24,
            n_layers: 2,
            n_heads: 4,
            head_dim: 8,
            d_state: 8,
            n_groups: match name {
                "toy" => 1,
                "toy-gva" => 2,
                _ => 4,
            },
            d_conv: 4,
            vocab_size: 32,
            norm_len: 32,
            has_mlp: false,
            d_mlp: 0,
        },
        "mamba2-2.7b" => ModelDims {
            d_model: 2560,
            n_layers: 64,
            n_heads: 80,
            head_dim: 64,
            d_state: 128,
            n_groups: 1,
            d_conv: 4,
            vocab_size: 50288,
            norm_len: 5120,
            has_mlp: false,
            d_mlp: 0,
        },
        "phi-mamba" => ModelDims {
            d_model: 2048,
            n_layers: 24,
            n_heads: 32,
            head_dim: 64,
            d_state: 64,
            n_groups: 32,
            d_conv: 4,
            vocab_size: 51200,
            norm_len: 2048,
            has_mlp: true,
            d_mlp: 8192,
        },
        other => {
            return Err(Error::Dimension {
                op: "toy.preset",
                msg: format!("unknown preset {other:?}; known: {}", preset_names().join(", ")),
            })
        }
    };
    dims.validate()?;
    Ok(dims)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("uniform draws are finite")
}

/// Per-state-channel magnitudes, log-spaced 0.3 -> 1.8 and jittered per group.
fn state_scales(rng: &mut ChaCha8Rng, groups: usize, n: usize) -> Vec<f32> {
    let span = (n - 1).max(1) as f32;
    let mut scales = Vec::with_capacity(groups * n);
    for _ in 0..groups {
        for c in 0..n {
            let base = 0.3 * 6.0f32.powf(c as f32 / span);
            scales.push(base * rng.gen_range(0.85..1.15));
        }
    }
    scales
}

fn build_block(dims: &ModelDims, rng: &mut ChaCha8Rng) -> BlockParams {
    let (h, g, p, n, k) = (
        dims.n_heads,
        dims.n_groups,
        dims.head_dim,
        dims.d_state,
        dims.d_conv,
    );
    let d = dims.d_model;
    let width = dims.in_proj_width();

    let z_scale = uniform(rng, vec![h * p], 0.7, 1.3);
    let x_scale = uniform(rng, vec![h * p], 0.7, 1.3);
    let b_scale = state_scales(rng, g, n);
    let c_scale = state_scales(rng, g, n);
    let dt_scale = uniform(rng, vec![h], 0.7, 1.3);
    let mut col_scale = Vec::with_capacity(width);
    col_scale.extend_from_slice(z_scale.data());
    col_scale.extend_from_slice(x_scale.data());
    col_scale.extend_from_slice(&b_scale);
    col_scale.extend_from_slice(&c_scale);
    col_scale.extend_from_slice(dt_scale.data());

    let s = 1.0 / (d as f32).sqrt();
    let mut w_inproj = uniform(rng, vec![d, width], -s, s);
    for r in 0..d {
        for (c, scale) in col_scale.iter().enumerate() {
            w_inproj.data_mut()[r * width + c] *= scale;
        }
    }

    let channels = dims.conv_channels();
    let conv_w = uniform(rng, vec![channels, k], -0.5, 0.5);
    let mut conv_b = Tensor::zeros(vec![channels]);
    for c in 0..h * p {
        conv_b.data_mut()[c] = rng.gen_range(-0.2..0.2);
    }

    let s_out = 1.0 / (dims.d_inner() as f32).sqrt();
    let mlp = dims.has_mlp.then(|| {
        let sg = 1.0 / (d as f32).sqrt();
        let sd = 1.0 / (dims.d_mlp as f32).sqrt();
        MlpParams {
            w_gate: uniform(rng, vec![d, dims.d_mlp], -sg, sg),
            w_up: uniform(rng, vec![d, dims.d_mlp], -sg, sg),
            w_down: uniform(rng, vec![dims.d_mlp, d], -sd, sd),
        }
    });
    BlockParams {
        n_heads: h,
        n_groups: g,
        w_inproj,
        conv_w,
        conv_b,
        a_log: uniform(rng, vec![h], -0.7, 1.4),
        d_skip: uniform(rng, vec![h], 0.5, 1.5),
        dt_bias: uniform(rng, vec![h], -1.0, 1.0),
        norm_w: uniform(rng, vec![dims.d_inner()], 0.8, 1.2),
        w_outproj: uniform(rng, vec![dims.d_inner(), d], -s_out, s_out),
        outproj_bias: None,
        mlp,
    }
}

/// Builds a deterministic model from dims and a seed.
pub fn build_toy_model(dims: &ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let total = dims.total_params();
    if total > MAX_MATERIALIZED_PARAMS {
        return Err(Error::Dimension {
            op: "toy.build",
            msg: format!(
                "{total} parameters exceed the {MAX_MATERIALIZED_PARAMS} materialization \
                 ceiling; this configuration is for closed-form reports only"
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedding = uniform(&mut rng, vec![dims.vocab_size, dims.d_model], -0.9, 0.9);
    let blocks = (0..dims.n_layers).map(|_| build_block(dims, &mut rng)).collect();
    let m = ModelParams { embedding, blocks };
    m.validate(dims)?;
    Ok(m)
}

fn sample_sequence(
    m: &ModelParams,
    dims: &ModelDims,
    seed: u64,
    index: usize,
    seq_len: usize,
) -> Result<Vec<u32>> {
    let derived = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(derived);
    let v = dims.vocab_size;
    let mut tokens = vec![rng.gen_range(0..v) as u32];
    while tokens.len() < seq_len {
        let logits = model_forward(m, dims, &tokens)?;
        let row = &logits.data()[(tokens.len() - 1) * v..tokens.len() * v];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(f64::from(b)));
        let weights: Vec<f64> = row.iter().map(|&x| (f64::from(x) - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen_range(0.0..1.0) * total;
        let mut choice = v - 1;
        for (i, w) in weights.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                choice = i;
                break;
            }
        }
        tokens.push(choice as u32);
    }
    Ok(tokens)
}

/// Samples sequences from the model's own distribution (full-prefix
/// re-forward per token). Each sequence derives its own stream from the seed,
/// so the corpus is independent of thread count.
pub fn sample_corpus(
    m: &ModelParams,
    dims: &ModelDims,
    seed: u64,
    n_seqs: usize,
    seq_len: usize,
) -> Result<CalibSet> {
    if n_seqs == 0 || seq_len < 2 {
        return Err(Error::Calib(
            "corpus needs at least one sequence of at least two tokens".into(),
        ));
    }
    let sequences: Vec<Vec<u32>> = (0..n_seqs)
        .into_par_iter()
        .map(|i| sample_sequence(m, dims, seed, i, seq_len))
        .collect::<Result<_>>()?;
    Ok(CalibSet::new(sequences))
}
