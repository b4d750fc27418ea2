//! Magnitude-times-activation masking.
//!
//! Each weight is scored `|w| * l2(feature)` where the l2 norm comes from
//! calibration activations feeding that weight's input. Within every output
//! unit the lowest-scoring `floor(ratio * fan_in)` weights are zeroed; shapes
//! never change, so masked models drop in anywhere the dense one fits.

use serde::{Deserialize, Serialize};

use crate::calib::ActivationStats;
use crate::error::{Error, Result};
use crate::model::{layer_key, names, ModelDims, ModelParams};
use crate::tensor::Tensor;

use super::{PrunePlan, TargetFilter};

/// Which axis of a weight matrix holds the output units.
///
/// Projections stored `[d_in, d_out]` group per column; the tied LM head
/// (`[vocab, d_model]`, applied transposed) groups per row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputAxis {
    Cols,
    Rows,
}

/// Builds a whole-model masking plan.
pub fn plan_wanda(ratio: f64, targets: TargetFilter) -> Result<PrunePlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Plan(format!("wanda ratio {ratio} outside [0, 1]")));
    }
    if !targets.any() {
        return Err(Error::Plan("wanda targets select nothing".into()));
    }
    let mut plan = PrunePlan::identity("wanda");
    plan.wanda_ratio = Some(ratio);
    plan.targets = Some(targets);
    Ok(plan)
}

/// Masks one weight matrix. Returns the new tensor and how many previously
/// nonzero entries were zeroed. Score ties prune the lower index first.
pub fn wanda_apply(
    w: &Tensor,
    feature_l2: &[f64],
    ratio: f64,
    axis: OutputAxis,
) -> Result<(Tensor, usize)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Plan(format!("wanda ratio {ratio} outside [0, 1]")));
    }
    let (rows, cols) = w.dims2("wanda.apply")?;
    let fan_in = match axis {
        OutputAxis::Cols => rows,
        OutputAxis::Rows => cols,
    };
    if feature_l2.len() != fan_in {
        return Err(Error::Calib(format!(
            "wanda: {} feature norms for fan-in {fan_in}",
            feature_l2.len()
        )));
    }
    if feature_l2.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Calib("wanda: feature norms must be finite and non-negative".into()));
    }
    let k = (ratio * fan_in as f64).floor() as usize;
    let mut out = w.clone();
    if k == 0 {
        return Ok((out, 0));
    }
    let units = match axis {
        OutputAxis::Cols => cols,
        OutputAxis::Rows => rows,
    };
    let stride = |unit: usize, i: usize| match axis {
        OutputAxis::Cols => i * cols + unit,
        OutputAxis::Rows => unit * cols + i,
    };
    let mut zeroed = 0usize;
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(fan_in);
    for unit in 0..units {
        scored.clear();
        for i in 0..fan_in {
            let wv = f64::from(w.data()[stride(unit, i)].abs());
            scored.push((wv * feature_l2[i], i));
        }
        scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in scored.iter().take(k) {
            let slot = &mut out.data_mut()[stride(unit, i)];
            if *slot != 0.0 {
                zeroed += 1;
            }
            *slot = 0.0;
        }
    }
    Ok((out, zeroed))
}

/// Masks every targeted linear layer in place. Returns the total number of
/// newly zeroed weights.
pub(crate) fn mask_model(
    m: &mut ModelParams,
    dims: &ModelDims,
    stats: &ActivationStats,
    ratio: f64,
    targets: &TargetFilter,
) -> Result<usize> {
    let _ = dims;
    let mut zeroed = 0usize;
    for (l, block) in m.blocks.iter_mut().enumerate() {
        if targets.in_proj {
            let ls = stats.layer(&layer_key(l, names::IN_PROJ))?;
            let (w, n) = wanda_apply(&block.w_inproj, &ls.feature_l2, ratio, OutputAxis::Cols)?;
            block.w_inproj = w;
            zeroed += n;
        }
        if targets.out_proj {
            let ls = stats.layer(&layer_key(l, names::OUT_PROJ))?;
            let (w, n) = wanda_apply(&block.w_outproj, &ls.feature_l2, ratio, OutputAxis::Cols)?;
            block.w_outproj = w;
            zeroed += n;
        }
        if targets.mlp {
            if let Some(mlp) = &mut block.mlp {
                for (key, w) in [
                    (names::MLP_GATE_IN, &mut mlp.w_gate),
                    (names::MLP_UP_IN, &mut mlp.w_up),
                    (names::MLP_DOWN_IN, &mut mlp.w_down),
                ] {
                    let ls = stats.layer(&layer_key(l, key))?;
                    let (masked, n) = wanda_apply(w, &ls.feature_l2, ratio, OutputAxis::Cols)?;
                    *w = masked;
                    zeroed += n;
                }
            }
        }
    }
    if targets.lm_head {
        let ls = stats.layer(names::LM_HEAD)?;
        let (w, n) = wanda_apply(&m.embedding, &ls.feature_l2, ratio, OutputAxis::Rows)?;
        m.embedding = w;
        zeroed += n;
    }
    Ok(zeroed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example_masks_lowest_score_per_row() {
        let w = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let (out, zeroed) = wanda_apply(&w, &[1.0, 4.0], 0.5, OutputAxis::Rows).unwrap();
        // Scores: row 0 -> [1, 8] drops col 0; row 1 -> [3, 2] drops col 1.
        assert_eq!(out.data(), &[0.0, -2.0, 3.0, 0.0]);
        assert_eq!(zeroed, 2);
    }

    #[test]
    fn column_groups_zero_exact_counts() {
        let rows = 10;
        let cols = 4;
        let data: Vec<f32> = (0..rows * cols)
            .map(|i| 0.1 + ((i * 7919) % 113) as f32 / 57.0)
            .collect();
        let w = Tensor::new(vec![rows, cols], data).unwrap();
        let l2: Vec<f64> = (0..rows).map(|i| 0.5 + i as f64 * 0.3).collect();
        for ratio in [0.0, 0.25, 0.33, 0.5, 0.77, 1.0] {
            let (out, zeroed) = wanda_apply(&w, &l2, ratio, OutputAxis::Cols).unwrap();
            let want = (ratio * rows as f64).floor() as usize;
            for c in 0..cols {
                let zeros = (0..rows).filter(|&r| out.data()[r * cols + c] == 0.0).count();
                assert_eq!(zeros, want, "ratio {ratio} col {c}");
            }
            assert_eq!(zeroed, want * cols);
        }
    }

    #[test]
    fn ties_prune_lower_index_first() {
        let w = Tensor::filled(vec![4, 3], 1.0);
        let (out, _) = wanda_apply(&w, &[2.0; 4], 0.5, OutputAxis::Cols).unwrap();
        for c in 0..3 {
            assert_eq!(out.data()[c], 0.0);
            assert_eq!(out.data()[3 + c], 0.0);
            assert_eq!(out.data()[6 + c], 1.0);
            assert_eq!(out.data()[9 + c], 1.0);
        }
    }

    #[test]
    fn ratio_zero_returns_clone() {
        let w = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (out, zeroed) = wanda_apply(&w, &[1.0, 1.0], 0.0, OutputAxis::Cols).unwrap();
        assert_eq!(out, w);
        assert_eq!(zeroed, 0);
    }

    #[test]
    fn ratio_one_zeroes_every_weight() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, zeroed) = wanda_apply(&w, &[1.0, 1.0], 1.0, OutputAxis::Cols).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
        assert_eq!(zeroed, 4);
    }

    #[test]
    fn already_zero_weights_do_not_count() {
        let w = Tensor::new(vec![2, 1], vec![0.0, 5.0]).unwrap();
        let (_, zeroed) = wanda_apply(&w, &[3.0, 3.0], 0.5, OutputAxis::Cols).unwrap();
        assert_eq!(zeroed, 0);
    }

    #[test]
    fn mismatched_norm_length_is_rejected() {
        let w = Tensor::filled(vec![3, 2], 1.0);
        assert!(wanda_apply(&w, &[1.0, 1.0], 0.5, OutputAxis::Cols).is_err());
        assert!(wanda_apply(&w, &[1.0, 1.0, 1.0], 0.5, OutputAxis::Rows).is_err());
        assert!(wanda_apply(&w, &[1.0, f64::NAN, 1.0], 0.5, OutputAxis::Cols).is_err());
    }

    #[test]
    fn out_of_range_ratio_is_rejected() {
        let w = Tensor::filled(vec![2, 2], 1.0);
        assert!(wanda_apply(&w, &[1.0, 1.0], 1.5, OutputAxis::Cols).is_err());
        assert!(wanda_apply(&w, &[1.0, 1.0], -0.1, OutputAxis::Cols).is_err());
        assert!(plan_wanda(2.0, TargetFilter::default()).is_err());
    }

    #[test]
    fn plan_wanda_rejects_empty_targets() {
        assert!(plan_wanda(0.5, TargetFilter::none()).is_err());
        let plan = plan_wanda(0.5, TargetFilter::default()).unwrap();
        assert_eq!(plan.wanda_ratio, Some(0.5));
        assert!(plan.layers.is_empty());
    }
}
