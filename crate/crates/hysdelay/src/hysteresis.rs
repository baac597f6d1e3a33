//! Nonideal relay with thresholds α < β, driven online by a sampled signal.

use thiserror::Error;

use crate::quad::{brent, golden_min};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threshold {
    Alpha,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelayState {
    pub value: i8,
    pub last_crossing: Option<(f64, Threshold)>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HysteresisError {
    #[error("sample times are not strictly increasing at index {0}")]
    NonMonotone(usize),
    #[error("times and values differ in length")]
    Length,
}

/// Relay value at time zero: +1 iff g(0) < β.
pub fn relay_init(g0: f64, alpha: f64, beta: f64) -> RelayState {
    debug_assert!(alpha < beta);
    RelayState { value: if g0 < beta { 1 } else { -1 }, last_crossing: None }
}

/// Result of driving the relay across a sampled path.
#[derive(Debug, Clone, PartialEq)]
pub struct Advance {
    pub state: RelayState,
    pub flips: Vec<f64>,
    pub grazing: bool,
}

/// Thresholds and tolerances for crossing detection.
#[derive(Debug, Clone, Copy)]
pub struct RelayConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tol_hit: f64,
    pub graze_tol: f64,
}

impl RelayConfig {
    pub fn new(alpha: f64, beta: f64) -> Self {
        let scale = 1f64.max((beta - alpha).abs());
        RelayConfig { alpha, beta, tol_hit: 1e-12 * scale, graze_tol: 1e-9 * scale }
    }
}

fn check_samples(times: &[f64], values: &[f64]) -> Result<(), HysteresisError> {
    if times.len() != values.len() {
        return Err(HysteresisError::Length);
    }
    for i in 1..times.len() {
        if !(times[i] > times[i - 1]) {
            return Err(HysteresisError::NonMonotone(i));
        }
    }
    Ok(())
}

/// First time in (t0, t1] at which `sign·(g − thr)` reaches zero, given `d0 < 0 ≤ d1`.
fn refine<F: FnMut(f64) -> f64>(g: &mut F, thr: f64, sign: f64, t0: f64, t1: f64, d1: f64, tol: f64) -> f64 {
    if d1 == 0.0 {
        return t1;
    }
    let tol_t = tol * t1.abs().max(1.0);
    brent(|t| sign * (g(t) - thr), t0, t1, tol_t)
}

/// Drive the relay over samples of a continuous signal whose exact values are
/// available through `g`. With `first_only`, stops at the first flip.
pub fn advance_with<F: FnMut(f64) -> f64>(
    state: RelayState,
    times: &[f64],
    values: &[f64],
    mut g: F,
    cfg: &RelayConfig,
    first_only: bool,
) -> Result<Advance, HysteresisError> {
    check_samples(times, values)?;
    let mut st = state;
    let mut flips = Vec::new();
    let mut grazing = false;
    let mut i = 0;
    let mut t_from = times.first().copied().unwrap_or(0.0);
    loop {
        while i + 1 < times.len() && times[i + 1] <= t_from {
            i += 1;
        }
        if i + 1 >= times.len() {
            break;
        }
        let (ta, tb) = (t_from.max(times[i]), times[i + 1]);
        let (thr, sign, other, other_sign, other_tag, tag) = if st.value == 1 {
            (cfg.beta, 1.0, cfg.alpha, -1.0, Threshold::Alpha, Threshold::Beta)
        } else {
            (cfg.alpha, -1.0, cfg.beta, 1.0, Threshold::Beta, Threshold::Alpha)
        };
        let ga = if ta == times[i] { values[i] } else { g(ta) };
        let gb = values[i + 1];
        let (da, db) = (sign * (ga - thr), sign * (gb - thr));
        // memory-only contact with the non-armed threshold
        let (oa, ob) = (other_sign * (ga - other), other_sign * (gb - other));
        if oa < 0.0 && ob >= 0.0 {
            let tc = refine(&mut g, other, other_sign, ta, tb, ob, cfg.tol_hit);
            st.last_crossing = Some((tc, other_tag));
        }
        if da < 0.0 && db >= 0.0 {
            let tc = refine(&mut g, thr, sign, ta, tb, db, cfg.tol_hit);
            st.value = -st.value;
            st.last_crossing = Some((tc, tag));
            flips.push(tc);
            if first_only {
                return Ok(Advance { state: st, flips, grazing });
            }
            t_from = tc;
            if tc == ta {
                i += 1;
            }
            continue;
        }
        // an interior extremum may hide a double crossing or a tangency
        if i + 2 < times.len() && db < 0.0 {
            let dc = sign * (values[i + 2] - thr);
            if db > da && db > dc {
                let (tm, neg_peak) = golden_min(|t| -sign * (g(t) - thr), ta, times[i + 2], 1e-10 * (times[i + 2] - ta));
                let peak = -neg_peak;
                if peak > 0.0 {
                    let tc = refine(&mut g, thr, sign, ta, tm, peak, cfg.tol_hit);
                    st.value = -st.value;
                    st.last_crossing = Some((tc, tag));
                    flips.push(tc);
                    if first_only {
                        return Ok(Advance { state: st, flips, grazing });
                    }
                    t_from = tc.max(ta + f64::EPSILON * ta.abs().max(1.0));
                    continue;
                } else if peak > -cfg.graze_tol {
                    grazing = true;
                }
            }
        }
        t_from = tb;
        i += 1;
    }
    Ok(Advance { state: st, flips, grazing })
}

/// Drive the relay over a sampled path using linear interpolation between samples.
pub fn relay_advance(state: RelayState, times: &[f64], values: &[f64], alpha: f64, beta: f64) -> Result<Advance, HysteresisError> {
    check_samples(times, values)?;
    let lin = |t: f64| {
        let j = times.partition_point(|&x| x <= t).clamp(1, times.len() - 1);
        let (t0, t1) = (times[j - 1], times[j]);
        let w = (t - t0) / (t1 - t0);
        values[j - 1] * (1.0 - w) + values[j] * w
    };
    advance_with(state, times, values, lin, &RelayConfig::new(alpha, beta), false)
}
