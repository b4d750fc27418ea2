//! Sequential SSD scan.
//!
//! One step per token: `delta = softplus(dt + dt_bias)`, `a = -exp(A_log)`,
//! `H <- exp(delta*a) * H + delta * (x (x) B)`, `y = H C + D * x`. Heads map to
//! B/C groups in contiguous blocks. The scan is strictly causal and the state
//! update rounds to f32 each step while readouts accumulate in f64.

use crate::error::{Error, Result};
use crate::tensor::{softplus, Tensor};

/// Per-step values saved by the forward scan for the reverse-time adjoint.
pub(crate) struct SsdSaved {
    /// Post-update states, `[T, H, P, N]` flattened.
    pub states: Vec<f32>,
    /// `delta[t, h]`.
    pub delta: Vec<f32>,
    /// `decay[t, h] = exp(delta * a)`.
    pub decay: Vec<f32>,
}

/// Core scan shared by the plain forward and the tape op.
#[allow(clippy::too_many_arguments)]
pub(crate) fn ssd_scan(
    x: &Tensor,
    b: &Tensor,
    c: &Tensor,
    dt_raw: &Tensor,
    a_log: &Tensor,
    d_skip: &Tensor,
    dt_bias: &Tensor,
    h0: &Tensor,
    want_saved: bool,
) -> Result<(Tensor, Tensor, Option<SsdSaved>)> {
    let (t_len, h_cnt, p_cnt) = match x.shape() {
        [t, h, p] => (*t, *h, *p),
        other => return Err(Error::dim("model.ssd", format!("x shape {other:?}, expected [T,H,P]"))),
    };
    let (g_cnt, n_cnt) = match b.shape() {
        [t, g, n] if *t == t_len => (*g, *n),
        other => {
            return Err(Error::dim(
                "model.ssd",
                format!("B shape {other:?}, expected [{t_len},G,N]"),
            ))
        }
    };
    if c.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "model.ssd",
            lhs: b.shape().to_vec(),
            rhs: c.shape().to_vec(),
        });
    }
    if dt_raw.shape() != [t_len, h_cnt] {
        return Err(Error::dim(
            "model.ssd",
            format!("dt shape {:?}, expected [{t_len},{h_cnt}]", dt_raw.shape()),
        ));
    }
    for (name, t) in [("A_log", a_log), ("D", d_skip), ("dt_bias", dt_bias)] {
        if t.shape() != [h_cnt] {
            return Err(Error::dim(
                "model.ssd",
                format!("{name} shape {:?}, expected [{h_cnt}]", t.shape()),
            ));
        }
    }
    if h0.shape() != [h_cnt, p_cnt, n_cnt] {
        return Err(Error::dim(
            "model.ssd",
            format!("h0 shape {:?}, expected [{h_cnt},{p_cnt},{n_cnt}]", h0.shape()),
        ));
    }
    if g_cnt == 0 || h_cnt % g_cnt != 0 {
        return Err(Error::dim(
            "model.ssd",
            format!("{h_cnt} heads not divisible into {g_cnt} groups"),
        ));
    }
    let heads_per_group = h_cnt / g_cnt;
    let state_stride = p_cnt * n_cnt;

    let mut y = vec![0.0f32; t_len * h_cnt * p_cnt];
    let mut state: Vec<f32> = h0.data().to_vec();
    let mut saved = want_saved.then(|| SsdSaved {
        states: vec![0.0f32; t_len * h_cnt * state_stride],
        delta: vec![0.0f32; t_len * h_cnt],
        decay: vec![0.0f32; t_len * h_cnt],
    });

    for t in 0..t_len {
        for h in 0..h_cnt {
            let g = h / heads_per_group;
            let a = -f64::from(a_log.data()[h]).exp();
            let delta = f64::from(softplus(dt_raw.at2(t, h) + dt_bias.data()[h]));
            let decay = (delta * a).exp();
            let d_h = f64::from(d_skip.data()[h]);
            let hstate = &mut state[h * state_stride..(h + 1) * state_stride];
            for p in 0..p_cnt {
                let xv = f64::from(x.at3(t, h, p));
                let dx = delta * xv;
                let mut read = 0.0f64;
                for n in 0..n_cnt {
                    let updated =
                        decay * f64::from(hstate[p * n_cnt + n]) + dx * f64::from(b.at3(t, g, n));
                    let updated32 = updated as f32;
                    if !updated32.is_finite() {
                        return Err(Error::NonFinite {
                            op: "model.ssd",
                            detail: Some(format!("state at step {t}, head {h}")),
                        });
                    }
                    hstate[p * n_cnt + n] = updated32;
                    read += f64::from(updated32) * f64::from(c.at3(t, g, n));
                }
                let out = (read + d_h * xv) as f32;
                if !out.is_finite() {
                    return Err(Error::NonFinite {
                        op: "model.ssd",
                        detail: Some(format!("output at step {t}, head {h}")),
                    });
                }
                y[(t * h_cnt + h) * p_cnt + p] = out;
            }
            if let Some(s) = saved.as_mut() {
                s.states[(t * h_cnt + h) * state_stride..][..state_stride]
                    .copy_from_slice(&state[h * state_stride..(h + 1) * state_stride]);
                s.delta[t * h_cnt + h] = delta as f32;
                s.decay[t * h_cnt + h] = decay as f32;
            }
        }
    }

    let y = Tensor::new(vec![t_len, h_cnt, p_cnt], y)?;
    let h_final = Tensor::new(vec![h_cnt, p_cnt, n_cnt], state)?;
    Ok((y, h_final, saved))
}

/// Sequential SSD recurrence from an explicit initial state.
///
/// `x` is `[T,H,P]`, `b`/`c` are `[T,G,N]`, `dt_raw` is `[T,H]`, the per-head
/// vectors are `[H]`, and `h0` is `[H,P,N]`. Returns the outputs `[T,H,P]` and
/// the final state `[H,P,N]`.
#[allow(clippy::too_many_arguments)]
pub fn ssd_sequential(
    x: &Tensor,
    b: &Tensor,
    c: &Tensor,
    dt_raw: &Tensor,
    a_log: &Tensor,
    d_skip: &Tensor,
    dt_bias: &Tensor,
    h0: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (y, h_final, _) = ssd_scan(x, b, c, dt_raw, a_log, d_skip, dt_bias, h0, false)?;
    Ok((y, h_final))
}
