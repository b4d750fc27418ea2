//! Perplexity, throughput, and sensitivity sweeps.
//!
//! Perplexity accumulates per-token negative log-likelihood in f64 with a
//! fixed reduction order, so results are bit-identical across thread counts.
//! Timing numbers are the one exception to determinism and stay out of
//! reports unless explicitly requested.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{ActivationStats, CalibSet};
use crate::error::{Error, Result};
use crate::model::{model_forward, ModelDims, ModelParams};
use crate::prune::wanda::mask_model;
use crate::prune::TargetFilter;

/// Corpus-level perplexity: `exp` of the mean per-token NLL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub perplexity: f64,
    pub mean_nll: f64,
    /// Predicted tokens (sequence lengths minus one each).
    pub tokens: usize,
}

fn sequence_nll(m: &ModelParams, dims: &ModelDims, tokens: &[u32]) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Ok((0.0, 0));
    }
    let logits = model_forward(m, dims, tokens)?;
    let v = dims.vocab_size;
    let mut nll = 0.0f64;
    for t in 0..tokens.len() - 1 {
        let row = &logits.data()[t * v..(t + 1) * v];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(f64::from(b)));
        let sum: f64 = row.iter().map(|&x| (f64::from(x) - max).exp()).sum();
        let lse = max + sum.ln();
        nll += lse - f64::from(row[tokens[t + 1] as usize]);
    }
    Ok((nll, tokens.len() - 1))
}

/// Evaluates perplexity over a token set. Sequences run in parallel; the
/// final reduction is sequential in sequence order.
pub fn perplexity(m: &ModelParams, dims: &ModelDims, data: &CalibSet) -> Result<Perplexity> {
    data.validate(dims.vocab_size)?;
    let per_seq: Vec<(f64, usize)> = data
        .sequences
        .par_iter()
        .map(|seq| sequence_nll(m, dims, seq))
        .collect::<Result<_>>()?;
    let mut nll = 0.0f64;
    let mut tokens = 0usize;
    for (n, t) in per_seq {
        nll += n;
        tokens += t;
    }
    if tokens == 0 {
        return Err(Error::Calib(
            "no predicted tokens: every sequence is shorter than two tokens".into(),
        ));
    }
    let mean_nll = nll / tokens as f64;
    if !mean_nll.is_finite() {
        return Err(Error::NonFinite {
            op: "eval.perplexity",
            detail: Some("mean NLL".into()),
        });
    }
    Ok(Perplexity {
        perplexity: mean_nll.exp(),
        mean_nll,
        tokens,
    })
}

// ─── sweeps ─────────────────────────────────────────────────────────────────────

/// One point of a masking-ratio sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub perplexity: f64,
    /// Zeroed weights over total parameters (shapes are unchanged).
    pub whole_model_sparsity: f64,
    /// True when this row's perplexity is lower than the previous ratio's.
    pub non_monotone_dip: bool,
}

fn sorted_ratios(ratios: &[f64]) -> Result<Vec<f64>> {
    if ratios.is_empty() {
        return Err(Error::Plan("sweep needs at least one ratio".into()));
    }
    for &r in ratios {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Plan(format!("sweep ratio {r} outside [0, 1]")));
        }
    }
    let mut sorted = ratios.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    sorted.dedup();
    Ok(sorted)
}

/// Masks every targeted layer at each ratio and measures perplexity. Ratios
/// are sorted ascending and deduplicated; rows where perplexity drops below
/// the previous row are flagged.
pub fn ratio_sweep(
    m: &ModelParams,
    dims: &ModelDims,
    stats: &ActivationStats,
    data: &CalibSet,
    ratios: &[f64],
    targets: TargetFilter,
) -> Result<Vec<SweepRow>> {
    if !targets.any() {
        return Err(Error::Plan("sweep targets select nothing".into()));
    }
    let sorted = sorted_ratios(ratios)?;
    let total = m.param_count() as f64;
    let mut rows: Vec<SweepRow> = sorted
        .par_iter()
        .map(|&ratio| {
            let mut masked = m.clone();
            let zeroed = mask_model(&mut masked, dims, stats, ratio, &targets)?;
            let p = perplexity(&masked, dims, data)?;
            Ok(SweepRow {
                ratio,
                perplexity: p.perplexity,
                whole_model_sparsity: zeroed as f64 / total,
                non_monotone_dip: false,
            })
        })
        .collect::<Result<_>>()?;
    mark_dips(&mut rows);
    Ok(rows)
}

fn mark_dips(rows: &mut [SweepRow]) {
    for i in 1..rows.len() {
        rows[i].non_monotone_dip = rows[i].perplexity < rows[i - 1].perplexity;
    }
}

/// One point of a per-component sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    /// Masked component: `in_proj` or `out_proj`.
    pub target: String,
    /// Per-layer masking ratio that hits the requested sparsity.
    pub ratio: f64,
    pub whole_model_sparsity: f64,
    pub perplexity: f64,
}

/// Compares in_proj-only against out_proj-only masking at matched
/// whole-model sparsities. The per-component ratio is `sparsity / fraction`
/// where fraction is that component's share of all parameters.
pub fn component_sweep(
    m: &ModelParams,
    dims: &ModelDims,
    stats: &ActivationStats,
    data: &CalibSet,
    sparsities: &[f64],
) -> Result<Vec<ComponentRow>> {
    if sparsities.is_empty() {
        return Err(Error::Plan("component sweep needs at least one sparsity".into()));
    }
    let total = m.param_count() as f64;
    let components: [(&str, TargetFilter, usize); 2] = [
        (
            "in_proj",
            TargetFilter {
                in_proj: true,
                out_proj: false,
                mlp: false,
                lm_head: false,
            },
            m.blocks.iter().map(|b| b.w_inproj.numel()).sum(),
        ),
        (
            "out_proj",
            TargetFilter {
                in_proj: false,
                out_proj: true,
                mlp: false,
                lm_head: false,
            },
            m.blocks.iter().map(|b| b.w_outproj.numel()).sum(),
        ),
    ];
    let mut cells = Vec::new();
    for (name, filter, count) in components {
        let fraction = count as f64 / total;
        for &s in sparsities {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Plan(format!("sparsity {s} outside [0, 1]")));
            }
            let ratio = s / fraction;
            if ratio > 1.0 + 1e-12 {
                return Err(Error::Plan(format!(
                    "sparsity {s} unreachable by masking {name} alone (fraction {fraction:.4})"
                )));
            }
            cells.push((name.to_string(), filter, ratio.min(1.0)));
        }
    }
    cells
        .par_iter()
        .map(|(name, filter, ratio)| {
            let mut masked = m.clone();
            let zeroed = mask_model(&mut masked, dims, stats, *ratio, filter)?;
            let p = perplexity(&masked, dims, data)?;
            Ok(ComponentRow {
                target: name.clone(),
                ratio: *ratio,
                whole_model_sparsity: zeroed as f64 / total,
                perplexity: p.perplexity,
            })
        })
        .collect()
}

// ─── throughput ─────────────────────────────────────────────────────────────────

/// A labeled throughput measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub label: String,
    pub tokens_per_second: f64,
    /// Relative to a baseline row, when one was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
}

/// Median tokens/second over `repeats` full-sequence forward passes (at
/// least three). Sequences are synthetic and fixed; no incremental cache is
/// used, so gains reflect parameter reduction only.
pub fn measure_throughput(
    m: &ModelParams,
    dims: &ModelDims,
    batch: usize,
    seq_len: usize,
    repeats: usize,
) -> Result<f64> {
    if batch == 0 || seq_len < 2 {
        return Err(Error::dim(
            "eval.throughput",
            "batch must be nonzero and seq_len at least 2",
        ));
    }
    let seqs: Vec<Vec<u32>> = (0..batch)
        .map(|b| {
            (0..seq_len)
                .map(|t| ((b * 131 + t * 31 + 7) % dims.vocab_size) as u32)
                .collect()
        })
        .collect();
    let mut rates = Vec::new();
    for _ in 0..repeats.max(3) {
        let start = Instant::now();
        for seq in &seqs {
            model_forward(m, dims, seq)?;
        }
        let secs = start.elapsed().as_secs_f64();
        if secs <= 0.0 {
            return Err(Error::dim("eval.throughput", "clock reported zero elapsed time"));
        }
        rates.push((batch * seq_len) as f64 / secs);
    }
    rates.sort_unstable_by(f64::total_cmp);
    let mid = rates.len() / 2;
    Ok(if rates.len() % 2 == 1 {
        rates[mid]
    } else {
        (rates[mid - 1] + rates[mid]) / 2.0
    })
}

// ─── report ─────────────────────────────────────────────────────────────────────

/// Everything one `eval` invocation produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ratio_sweep: Vec<SweepRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub component_sweep: Vec<ComponentRow>,
    /// Wall-clock numbers; excluded unless timing was requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub throughput: Vec<ThroughputRow>,
}

impl EvalReport {
    pub fn new(p: Perplexity) -> EvalReport {
        EvalReport {
            perplexity: p.perplexity,
            mean_nll: p.mean_nll,
            token_count: p.tokens,
            ratio_sweep: Vec::new(),
            component_sweep: Vec::new(),
            throughput: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EvalReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// CSV for ratio-sweep rows.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ratio,perplexity,whole_model_sparsity,non_monotone_dip\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.ratio, r.perplexity, r.whole_model_sparsity, r.non_monotone_dip
        ));
    }
    out
}

/// CSV for component-sweep rows.
pub fn component_csv(rows: &[ComponentRow]) -> String {
    let mut out = String::from("target,ratio,whole_model_sparsity,perplexity\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.target, r.ratio, r.whole_model_sparsity, r.perplexity
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::collect_stats;
    use crate::model::view::HeadView;
    use crate::prune::{apply_plan, LayerPlan, PrunePlan};
    use crate::runtime::with_threads;
    use crate::tensor::Tensor;
    use crate::toy::build_toy_model;

    fn dims() -> ModelDims {
        ModelDims {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            head_dim: 3,
            d_state: 4,
            n_groups: 1,
            d_conv: 2,
            vocab_size: 12,
            norm_len: 6,
            has_mlp: false,
            d_mlp: 0,
        }
    }

    fn corpus() -> CalibSet {
        CalibSet::new(vec![
            vec![0, 3, 7, 2, 9, 1, 4],
            vec![5, 5, 8, 11, 0, 2],
            vec![10, 6, 1, 3],
        ])
    }

    #[test]
    fn zero_model_scores_uniform_perplexity() {
        let d = dims();
        let mut m = build_toy_model(&d, 5).unwrap();
        m.embedding = Tensor::zeros(vec![d.vocab_size, d.d_model]);
        let p = perplexity(&m, &d, &corpus()).unwrap();
        assert!((p.perplexity - d.vocab_size as f64).abs() < 1e-9);
        assert_eq!(p.tokens, 6 + 5 + 3);
    }

    #[test]
    fn matches_manual_two_token_nll() {
        let d = dims();
        let m = build_toy_model(&d, 6).unwrap();
        let seq = [4u32, 9];
        let logits = model_forward(&m, &d, &seq).unwrap();
        let row: Vec<f64> = logits.data()[..d.vocab_size].iter().map(|&x| f64::from(x)).collect();
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let want = (lse - row[9]).exp();
        let p = perplexity(&m, &d, &CalibSet::new(vec![seq.to_vec()])).unwrap();
        assert!((p.perplexity - want).abs() < 1e-12 * want);
        assert_eq!(p.tokens, 1);
    }

    #[test]
    fn short_sequences_are_skipped_not_counted() {
        let d = dims();
        let m = build_toy_model(&d, 7).unwrap();
        let with_short = CalibSet::new(vec![vec![1], vec![2, 3, 4]]);
        let without = CalibSet::new(vec![vec![2, 3, 4]]);
        let a = perplexity(&m, &d, &with_short).unwrap();
        let b = perplexity(&m, &d, &without).unwrap();
        assert_eq!(a, b);
        let only_short = CalibSet::new(vec![vec![1], vec![2]]);
        assert!(perplexity(&m, &d, &only_short).is_err());
    }

    #[test]
    fn perplexity_is_bit_identical_across_thread_counts() {
        let d = dims();
        let m = build_toy_model(&d, 8).unwrap();
        let data = corpus();
        let one = with_threads(1, || perplexity(&m, &d, &data)).unwrap().unwrap();
        let four = with_threads(4, || perplexity(&m, &d, &data)).unwrap().unwrap();
        assert_eq!(one.mean_nll.to_bits(), four.mean_nll.to_bits());
    }

    #[test]
    fn perplexity_is_invariant_under_head_permutation() {
        let d = dims();
        let m = build_toy_model(&d, 9).unwrap();
        let view = HeadView::new(d.n_heads, d.n_groups, d.head_dim, d.d_state);
        let perm = [1usize, 0];
        let mut permuted = m.clone();
        for block in &mut permuted.blocks {
            let mut cols = Vec::new();
            for &h in &perm {
                cols.extend(view.z_cols(h));
            }
            for &h in &perm {
                cols.extend(view.x_cols(h));
            }
            cols.extend(view.b_cols(0));
            cols.extend(view.c_cols(0));
            for &h in &perm {
                cols.push(view.dt_col(h));
            }
            let mut conv = Vec::new();
            for &h in &perm {
                conv.extend(view.conv_x_channels(h));
            }
            conv.extend(view.conv_b_channels(0));
            conv.extend(view.conv_c_channels(0));
            let mut inner = Vec::new();
            for &h in &perm {
                inner.extend(view.out_rows(h));
            }
            block.w_inproj = block.w_inproj.select_cols(&cols).unwrap();
            block.conv_w = block.conv_w.select_rows(&conv).unwrap();
            block.conv_b = block.conv_b.select_1d(&conv).unwrap();
            block.a_log = block.a_log.select_1d(&perm).unwrap();
            block.d_skip = block.d_skip.select_1d(&perm).unwrap();
            block.dt_bias = block.dt_bias.select_1d(&perm).unwrap();
            block.norm_w = block.norm_w.select_1d(&inner).unwrap();
            block.w_outproj = block.w_outproj.select_rows(&inner).unwrap();
        }
        let data = corpus();
        let a = perplexity(&m, &d, &data).unwrap();
        let b = perplexity(&permuted, &d, &data).unwrap();
        assert!((a.mean_nll - b.mean_nll).abs() < 1e-9);
    }

    #[test]
    fn ratio_zero_row_equals_dense_exactly() {
        let d = dims();
        let m = build_toy_model(&d, 10).unwrap();
        let data = corpus();
        let stats = collect_stats(&m, &d, &data).unwrap();
        let dense = perplexity(&m, &d, &data).unwrap();
        let rows =
            ratio_sweep(&m, &d, &stats, &data, &[0.0, 0.5], TargetFilter::all()).unwrap();
        assert_eq!(rows[0].perplexity.to_bits(), dense.perplexity.to_bits());
        assert_eq!(rows[0].whole_model_sparsity, 0.0);
        assert!(!rows[0].non_monotone_dip);
        assert!(rows[1].whole_model_sparsity > 0.0);
    }

    #[test]
    fn full_masking_of_all_linear_layers_is_uniform() {
        let d = dims();
        let m = build_toy_model(&d, 11).unwrap();
        let data = corpus();
        let stats = collect_stats(&m, &d, &data).unwrap();
        let rows = ratio_sweep(&m, &d, &stats, &data, &[1.0], TargetFilter::all()).unwrap();
        assert!((rows[0].perplexity - d.vocab_size as f64).abs() < 1e-9);
    }

    #[test]
    fn sweep_sorts_and_dedups_ratios() {
        let d = dims();
        let m = build_toy_model(&d, 12).unwrap();
        let data = corpus();
        let stats = collect_stats(&m, &d, &data).unwrap();
        let rows = ratio_sweep(
            &m,
            &d,
            &stats,
            &data,
            &[0.5, 0.0, 0.5],
            TargetFilter::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].ratio, 0.0);
        assert_eq!(rows[1].ratio, 0.5);
        assert!(ratio_sweep(&m, &d, &stats, &data, &[], TargetFilter::default()).is_err());
        assert!(ratio_sweep(&m, &d, &stats, &data, &[1.5], TargetFilter::default()).is_err());
    }

    #[test]
    fn dip_marking_flags_decreases_only() {
        let row = |ratio: f64, ppl: f64| SweepRow {
            ratio,
            perplexity: ppl,
            whole_model_sparsity: 0.0,
            non_monotone_dip: false,
        };
        let mut rows = vec![row(0.0, 5.0), row(0.2, 7.0), row(0.4, 6.5), row(0.6, 9.0)];
        mark_dips(&mut rows);
        assert_eq!(
            rows.iter().map(|r| r.non_monotone_dip).collect::<Vec<_>>(),
            vec![false, false, true, false]
        );
    }

    #[test]
    fn component_sweep_matches_requested_sparsity() {
        let d = dims();
        let m = build_toy_model(&d, 13).unwrap();
        let data = corpus();
        let stats = collect_stats(&m, &d, &data).unwrap();
        let rows = component_sweep(&m, &d, &stats, &data, &[0.1]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].target, "in_proj");
        assert_eq!(rows[1].target, "out_proj");
        for r in &rows {
            assert!(r.perplexity.is_finite() && r.perplexity >= 1.0);
            assert!(r.whole_model_sparsity <= 0.1 + 1e-12);
            assert!(r.whole_model_sparsity > 0.0);
        }
        // Unreachable sparsity: out_proj is a small fraction of this model.
        assert!(component_sweep(&m, &d, &stats, &data, &[0.9]).is_err());
    }

    #[test]
    fn throughput_is_positive_and_prefers_smaller_models() {
        let d = ModelDims {
            d_model: 96,
            n_layers: 1,
            n_heads: 8,
            head_dim: 12,
            d_state: 16,
            n_groups: 1,
            d_conv: 4,
            vocab_size: 64,
            norm_len: 96,
            has_mlp: false,
            d_mlp: 0,
        };
        let m = build_toy_model(&d, 14).unwrap();
        let mut plan = PrunePlan::identity("flap");
        plan.layers = vec![LayerPlan {
            layer: 0,
            keep_heads: Some(vec![0, 1, 2, 3]),
            keep_channels: None,
            keep_state: None,
        }];
        let (half, hd) = apply_plan(&m, &d, &plan, None).unwrap();
        let dense = measure_throughput(&m, &d, 2, 128, 5).unwrap();
        let pruned = measure_throughput(&half, &hd, 2, 128, 5).unwrap();
        assert!(dense > 0.0);
        assert!(
            pruned >= dense,
            "half-width model should not be slower: {pruned:.0} vs {dense:.0} tok/s"
        );
        assert!(measure_throughput(&m, &d, 0, 16, 3).is_err());
    }

    #[test]
    fn report_roundtrips_and_skips_empty_sections() {
        let d = dims();
        let m = build_toy_model(&d, 15).unwrap();
        let p = perplexity(&m, &d, &corpus()).unwrap();
        let report = EvalReport::new(p);
        let json = serde_json::to_string(&report).unwrap();
        assert!(!json.contains("throughput"));
        assert!(!json.contains("ratio_sweep"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.json");
        report.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), report);
    }

    #[test]
    fn csv_emission_has_header_and_rows() {
        let rows = vec![SweepRow {
            ratio: 0.25,
            perplexity: 3.5,
            whole_model_sparsity: 0.1,
            non_monotone_dip: false,
        }];
        let csv = sweep_csv(&rows);
        assert_eq!(
            csv,
            "ratio,perplexity,whole_model_sparsity,non_monotone_dip\n0.25,3.5,0.1,false\n"
        );
        let crows = vec![ComponentRow {
            target: "in_proj".into(),
            ratio: 0.5,
            whole_model_sparsity: 0.2,
            perplexity: 4.0,
        }];
        assert_eq!(
            component_csv(&crows),
            "target,ratio,whole_model_sparsity,perplexity\nin_proj,0.5,0.2,4\n"
        );
    }
}
