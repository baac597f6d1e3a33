//! Exact fixed-branch flows u± (method of steps), hit times, and the full
//! relay-delay system by alternating flows and relay switches.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::core::{Cell, Chunk, GridSpec, HistoryFunction, Numerics, PiecewiseFn, Segment, Side, SystemParams, Trajectory};
use crate::hysteresis::{advance_with, relay_init, RelayConfig, RelayState};
use crate::linalg::ExpCache;
use crate::quad::gl;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegratorError {
    #[error("step length {0} outside (0, 2T]")]
    StepLength(f64),
    #[error("flow time {0} outside (0, 2T)")]
    FlowTime(f64),
    #[error("horizon must be positive")]
    Horizon,
    #[error("hit-time precondition violated: M·x={mx} with threshold {thr} on branch {branch}")]
    Precondition { mx: f64, thr: f64, branch: i8 },
    #[error("history domain does not match 2T")]
    Domain,
    #[error("more than {0} switchings: accumulation suspected")]
    Accumulation(usize),
}

/// Threshold selector for hit times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Alpha,
    Beta,
}

/// Fixed relay value with precomputed exponential machinery.
#[derive(Debug)]
pub struct BranchFlow {
    pub params: SystemParams,
    pub branch: i8,
    pub n_per_t: usize,
    step: ExpCache<f64>,
    decay: ExpCache<f64>,
    a_zero: bool,
}

impl BranchFlow {
    pub fn new(params: &SystemParams, branch: i8, numerics: &Numerics) -> Arc<Self> {
        assert!(branch == 1 || branch == -1);
        let n = params.n;
        let mut aug = DMatrix::zeros(n + 1, n + 1);
        aug.view_mut((0, 0), (n, n)).copy_from(&(-&params.b));
        aug.view_mut((0, n), (n, 1)).copy_from(&(&params.k * branch as f64));
        Arc::new(BranchFlow {
            params: params.clone(),
            branch,
            n_per_t: numerics.n_per_t,
            step: ExpCache::new(aug),
            decay: ExpCache::new(-&params.b),
            a_zero: params.a.iter().all(|&x| x == 0.0),
        })
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::history(self.params.t, self.n_per_t)
    }

    /// (e^{−Bd}, ±∫₀ᵈ e^{−B(d−ξ)}k dξ).
    fn kick(&self, d: f64) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.params.n;
        let e = self.step.get(d);
        (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, 1)).column(0).into_owned())
    }

    /// ∫ e^{−B(σb−σ)} A φ(σ) dσ over [σa, σb] inside history cell `c`.
    fn delayed(&self, phi: &PiecewiseFn<f64>, c: &Cell, sa: f64, sb: f64) -> DVector<f64> {
        let n = self.params.n;
        let mut acc = DVector::zeros(n);
        if self.a_zero || sb <= sa {
            return acc;
        }
        let (z, w) = gl(4);
        let half = 0.5 * (sb - sa);
        for g in 0..4 {
            let s = sa + half * (1.0 + z[g]);
            let v = &self.params.a * phi.eval_cell(c.piece, c.j, s);
            let e = self.decay.get(half * (1.0 - z[g]));
            acc += (e * v) * (w[g] * half);
        }
        acc
    }
}

/// Dense fixed-branch solution on [0, t_end] from one anchor (φ, x).
#[derive(Debug, Clone)]
pub struct BranchSolution {
    flow: Arc<BranchFlow>,
    pub anchor: HistoryFunction,
    pub t_end: f64,
    pub knots: Vec<f64>,
    cells: Vec<Cell>,
    pub u: Vec<DVector<f64>>,
}

impl BranchSolution {
    pub fn branch(&self) -> i8 {
        self.flow.branch
    }

    /// u±(τ) for τ ∈ [0, t_end], propagated exactly from the nearest knot below.
    pub fn eval(&self, tau: f64) -> DVector<f64> {
        let i = self.knots.partition_point(|&k| k <= tau).saturating_sub(1);
        if self.knots[i] == tau || i == self.cells.len() {
            return self.u[i].clone();
        }
        let d = tau - self.knots[i];
        let (e, f) = self.flow.kick(d);
        let c = &self.cells[i];
        e * &self.u[i] + f + self.flow.delayed(&self.anchor.phi, c, c.lo, c.lo + d)
    }

    pub fn output(&self, tau: f64) -> f64 {
        self.flow.params.m.dot(&self.eval(tau))
    }

    pub fn outputs_at_knots(&self) -> Vec<f64> {
        self.u.iter().map(|v| self.flow.params.m.dot(v)).collect()
    }
}

/// Split cells longer than `hmax` so that knots are never sparser than the canonical grid.
fn fine_cells(phi: &PiecewiseFn<f64>, lo: f64, hi: f64, hmax: f64) -> Vec<Cell> {
    let mut out = Vec::new();
    for c in phi.cells_in(lo, hi) {
        let len = c.hi - c.lo;
        let m = ((len / hmax) - 1e-9).ceil().max(1.0) as usize;
        for i in 0..m {
            let a = if i == 0 { c.lo } else { c.lo + len * i as f64 / m as f64 };
            let b = if i + 1 == m { c.hi } else { c.lo + len * (i + 1) as f64 / m as f64 };
            out.push(Cell { piece: c.piece, j: c.j, lo: a, hi: b });
        }
    }
    out
}

/// u±(t) = e^{−Bt}x + ∫₀ᵗ e^{B(ξ−t)}Aφ(ξ−2T)dξ ± ∫₀ᵗ e^{B(ξ−t)}k dξ on [0, t1], t1 ≤ 2T.
pub fn step_fixed_branch(flow: &Arc<BranchFlow>, h: &HistoryFunction, t1: f64) -> Result<BranchSolution, IntegratorError> {
    let two_t = 2.0 * flow.params.t;
    if ((-h.phi.a()) - two_t).abs() > 1e-9 * two_t.max(1.0) || h.phi.b() != 0.0 {
        return Err(IntegratorError::Domain);
    }
    let two_t = -h.phi.a();
    if !(t1 > 0.0 && t1 <= two_t * (1.0 + 1e-12)) {
        return Err(IntegratorError::StepLength(t1));
    }
    let a = h.phi.a();
    let hmax = 1.01 * flow.params.t / flow.n_per_t as f64;
    let cells = fine_cells(&h.phi, a, (a + t1).min(0.0), hmax);
    let mut knots = Vec::with_capacity(cells.len() + 1);
    let mut u = Vec::with_capacity(cells.len() + 1);
    knots.push(0.0);
    u.push(h.x_right.clone());
    for (i, c) in cells.iter().enumerate() {
        let d = c.hi - c.lo;
        let (e, f) = flow.kick(d);
        let next = e * &u[i] + f + flow.delayed(&h.phi, c, c.lo, c.hi);
        u.push(next);
        knots.push(if i + 1 == cells.len() { t1 } else { c.hi - a });
    }
    Ok(BranchSolution { flow: flow.clone(), anchor: h.clone(), t_end: t1, knots, cells, u })
}

/// ψ±(φ, x, t): shifted history on (−2T, −t), fresh solution on (−t, 0), trace u±(t).
pub fn flow_psi(flow: &Arc<BranchFlow>, h: &HistoryFunction, x: &DVector<f64>, t: f64) -> Result<HistoryFunction, IntegratorError> {
    let two_t = -h.phi.a();
    if !(t > 0.0 && t < two_t) {
        return Err(IntegratorError::FlowTime(t));
    }
    let anchor = HistoryFunction::new(h.phi.clone(), x.clone());
    let sol = step_fixed_branch(flow, &anchor, t)?;
    Ok(rebase(&sol, t, &flow.grid()))
}

/// The history seen from time t along `sol` (t ≤ sol.t_end), resampled on `grid`.
pub fn rebase(sol: &BranchSolution, t: f64, grid: &GridSpec) -> HistoryFunction {
    let phi = &sol.anchor.phi;
    let two_t = -phi.a();
    // output breakpoint -> exact source coordinate (history side or solution side)
    let mut bps: Vec<(f64, f64, bool)> = vec![(-t, 0.0, true)];
    for b in phi.breakpoints() {
        if b - t > -two_t {
            bps.push((b - t, b, true));
        }
        if b + two_t < t {
            bps.push((b + two_t - t, b + two_t, false));
        }
    }
    let list: Vec<f64> = bps.iter().map(|b| b.0).collect();
    let seam = -t;
    let out = PiecewiseFn::sample(grid, &list, phi.dim(), |th, side| {
        if let Some(&(_, src, hist)) = bps.iter().find(|b| b.0 == th) {
            if th == seam {
                return if side == Side::Left { phi.value(0.0, Side::Left) } else { sol.anchor.x_right.clone() };
            }
            return if hist { phi.value(src, side) } else { sol.eval(src) };
        }
        if th < seam {
            phi.value(th + t, side)
        } else {
            sol.eval(th + t)
        }
    });
    HistoryFunction::new(out, sol.eval(t))
}

/// First t ∈ (0, horizon] with M·u±(t) = threshold; `None` if there is none.
pub fn hit_time(
    flow: &Arc<BranchFlow>,
    h: &HistoryFunction,
    x: &DVector<f64>,
    level: Level,
    horizon: f64,
    numerics: &Numerics,
) -> Result<Option<f64>, IntegratorError> {
    let p = &flow.params;
    let mx = p.output(x);
    let thr = if level == Level::Beta { p.beta } else { p.alpha };
    let ok = match (flow.branch, level) {
        (1, Level::Beta) => mx < p.beta,
        (-1, Level::Alpha) => mx > p.alpha,
        _ => false,
    };
    if !ok {
        return Err(IntegratorError::Precondition { mx, thr, branch: flow.branch });
    }
    if !(horizon > 0.0) {
        return Err(IntegratorError::Horizon);
    }
    let mut anchor = HistoryFunction::new(h.phi.clone(), x.clone());
    let mut t0 = 0.0;
    let cfg = relay_cfg(p, numerics);
    let state = RelayState { value: flow.branch, last_crossing: None };
    loop {
        let rem = horizon - t0;
        let window = rem.min(1.5 * p.t);
        let sol = step_fixed_branch(flow, &anchor, window)?;
        let ts = sol.knots.clone();
        let gs = sol.outputs_at_knots();
        let adv = advance_with(state, &ts, &gs, |tau| sol.output(tau), &cfg, true).expect("knots increase");
        if let Some(&tc) = adv.flips.first() {
            return Ok(Some(t0 + tc));
        }
        if window >= rem {
            return Ok(None);
        }
        anchor = rebase(&sol, window, &flow.grid());
        t0 += window;
    }
}

fn relay_cfg(p: &SystemParams, numerics: &Numerics) -> RelayConfig {
    let mut cfg = RelayConfig::new(p.alpha, p.beta);
    cfg.tol_hit = numerics.tol_hit * 1f64.max((p.beta - p.alpha).abs()) * 1e-2;
    cfg
}

/// The full system on [0, horizon] by alternating fixed-branch flows and relay switches.
pub fn integrate(params: &SystemParams, h: &HistoryFunction, horizon: f64, numerics: &Numerics) -> Result<Trajectory, IntegratorError> {
    if !(horizon > 0.0) {
        return Err(IntegratorError::Horizon);
    }
    let flows = [BranchFlow::new(params, -1, numerics), BranchFlow::new(params, 1, numerics)];
    let cfg = relay_cfg(params, numerics);
    let slack = 1e-9 * params.t.max(1.0);
    let mut state = relay_init(params.output(&h.x_right), params.alpha, params.beta);
    let mut anchor = h.clone();
    let mut t = 0.0;
    let mut segments: Vec<Segment> = Vec::new();
    let mut switching_times = Vec::new();
    let mut grazing = false;
    let mut current = Segment { t0: 0.0, t1: 0.0, relay: state.value, chunks: Vec::new(), times: Vec::new(), values: Vec::new() };
    while t < horizon {
        let flow = &flows[(state.value + 1) as usize / 2];
        let rem = horizon - t;
        let last = rem <= 1.5 * params.t;
        let window = if last { rem + slack } else { params.t };
        let sol = step_fixed_branch(flow, &anchor, window)?;
        let ts = sol.knots.clone();
        let gs = sol.outputs_at_knots();
        let adv = advance_with(state, &ts, &gs, |tau| sol.output(tau), &cfg, true).expect("knots increase");
        grazing |= adv.grazing;
        let (len, flipped) = match adv.flips.first() {
            Some(&tc) => (tc, true),
            None => (if last { rem } else { window }, false),
        };
        for (k, &tk) in sol.knots.iter().enumerate() {
            if tk < len && current.times.last().is_none_or(|&l| l < t + tk) {
                current.times.push(t + tk);
                current.values.push(sol.u[k].clone());
            }
        }
        current.times.push(t + len);
        current.values.push(sol.eval(len));
        current.chunks.push(Chunk { t0: t, t1: t + len, solution: sol.clone() });
        current.t1 = t + len;
        if flipped {
            switching_times.push(t + len);
            if switching_times.len() > numerics.max_switches {
                return Err(IntegratorError::Accumulation(numerics.max_switches));
            }
            state = adv.state;
            segments.push(current);
            current = Segment { t0: t + len, t1: t + len, relay: state.value, chunks: Vec::new(), times: Vec::new(), values: Vec::new() };
        } else {
            state.last_crossing = adv.state.last_crossing;
        }
        if t + len >= horizon {
            break;
        }
        anchor = rebase(&sol, len, &flow.grid());
        t += len;
    }
    if !current.chunks.is_empty() {
        segments.push(current);
    }
    Ok(Trajectory { params: params.clone(), segments, switching_times, history: h.clone(), horizon, grazing })
}

impl Trajectory {
    /// u(t) for t ∈ [−2T, horizon]; history values for t < 0.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        if t < 0.0 {
            return self.history.phi.value(t, Side::Right);
        }
        if t == 0.0 {
            return self.history.x_right.clone();
        }
        for seg in &self.segments {
            for c in &seg.chunks {
                if t <= c.t1 {
                    return c.solution.eval(t - c.t0);
                }
            }
        }
        let c = self.segments.last().unwrap().chunks.last().unwrap();
        c.solution.eval(t - c.t0)
    }

    /// Relay value on the segment containing t.
    pub fn relay_at(&self, t: f64) -> i8 {
        for seg in &self.segments {
            if t <= seg.t1 {
                return seg.relay;
            }
        }
        self.segments.last().map(|s| s.relay).unwrap_or(1)
    }

    /// Final state u(horizon).
    pub fn final_state(&self) -> DVector<f64> {
        self.eval(self.horizon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{validate_params, RawParams};

    fn s1() -> SystemParams {
        let t = 3f64.ln();
        validate_params(&RawParams {
            N: 1,
            A: vec![vec![0.0]],
            B: vec![vec![1.0]],
            k: vec![2.0],
            M: vec![1.0],
            alpha: -1.0,
            beta: 1.0,
            T: t,
            p: 1.5,
            s: 0.5,
            sigma: None,
        })
        .unwrap()
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn s1_plus_branch_closed_form() {
        let p = s1();
        let num = Numerics::default();
        let f = BranchFlow::new(&p, 1, &num);
        let h = HistoryFunction::constant(p.t, 64, v1(0.3), v1(-1.0));
        let sol = step_fixed_branch(&f, &h, p.t).unwrap();
        for &t in &[0.1, 0.5, 1.0, p.t] {
            assert!((sol.eval(t)[0] - (2.0 - 3.0 * (-t as f64).exp())).abs() < 1e-14);
        }
        assert!((sol.eval(p.t)[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn homogeneous_and_pure_integration_cases() {
        let mut p = s1();
        p.k = v1(0.0);
        p.b = DMatrix::from_element(1, 1, 0.7);
        let num = Numerics::default();
        let f = BranchFlow::new(&p, 1, &num);
        let h = HistoryFunction::constant(p.t, 32, v1(1.0), v1(2.0));
        let sol = step_fixed_branch(&f, &h, 1.5).unwrap();
        let err = (sol.eval(1.3)[0] - 2.0 * (-0.7f64 * 1.3).exp()).abs();
        assert!(err < 1e-13, "{err}");
        let mut q = s1();
        q.b = DMatrix::zeros(1, 1);
        q.k = v1(1.5);
        let f = BranchFlow::new(&q, 1, &num);
        let h = HistoryFunction::constant(q.t, 32, v1(0.0), v1(0.0));
        let sol = step_fixed_branch(&f, &h, 2.0).unwrap();
        assert!((sol.eval(1.7)[0] - 1.5 * 1.7).abs() < 1e-13);
    }

    #[test]
    fn step_length_errors() {
        let p = s1();
        let f = BranchFlow::new(&p, 1, &Numerics::default());
        let h = HistoryFunction::constant(p.t, 16, v1(0.0), v1(0.0));
        assert!(matches!(step_fixed_branch(&f, &h, 0.0), Err(IntegratorError::StepLength(_))));
        assert!(matches!(step_fixed_branch(&f, &h, 2.5 * p.t), Err(IntegratorError::StepLength(_))));
        assert!(matches!(flow_psi(&f, &h, &v1(0.0), 2.0 * p.t), Err(IntegratorError::FlowTime(_))));
    }

    #[test]
    fn delayed_scalar_closed_form() {
        // u' = 1 − u + a·c for constant history c on [0, 2T]
        let mut p = s1();
        p.a = DMatrix::from_element(1, 1, 0.4);
        p.k = v1(1.0);
        let f = BranchFlow::new(&p, 1, &Numerics::default());
        let h = HistoryFunction::constant(p.t, 128, v1(2.0), v1(0.5));
        let sol = step_fixed_branch(&f, &h, 2.0 * p.t).unwrap();
        let ueq = 1.0 + 0.4 * 2.0;
        for &t in &[0.3, 1.1, 2.0] {
            let exact = ueq + (0.5 - ueq) * (-t as f64).exp();
            assert!((sol.eval(t)[0] - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn s1_hit_times() {
        let p = s1();
        let num = Numerics::default();
        let fp = BranchFlow::new(&p, 1, &num);
        let fm = BranchFlow::new(&p, -1, &num);
        let h = HistoryFunction::constant(p.t, 256, v1(0.0), v1(-1.0));
        let t = hit_time(&fp, &h, &v1(-1.0), Level::Beta, 10.0 * p.t, &num).unwrap().unwrap();
        assert!((t - 3f64.ln()).abs() < 1e-12);
        let t = hit_time(&fm, &h, &v1(1.0), Level::Alpha, 10.0 * p.t, &num).unwrap().unwrap();
        assert!((t - 3f64.ln()).abs() < 1e-12);
        assert!(hit_time(&fp, &h, &v1(1.0), Level::Beta, 1.0, &num).is_err());
    }

    #[test]
    fn decaying_flow_never_hits() {
        let mut p = s1();
        p.k = v1(0.0);
        let num = Numerics::default();
        let f = BranchFlow::new(&p, 1, &num);
        let h = HistoryFunction::constant(p.t, 64, v1(0.0), v1(0.5));
        assert_eq!(hit_time(&f, &h, &v1(0.5), Level::Beta, 10.0 * p.t, &num).unwrap(), None);
    }

    #[test]
    fn s1_integrate_two_switchings() {
        let p = s1();
        let num = Numerics::default();
        let h = HistoryFunction::constant(p.t, 256, v1(0.0), v1(-1.0));
        let tr = integrate(&p, &h, 2.0 * p.t, &num).unwrap();
        assert_eq!(tr.switching_times.len(), 2);
        assert!((tr.switching_times[0] - p.t).abs() < 1e-12);
        assert!((tr.switching_times[1] - 2.0 * p.t).abs() < 1e-11);
        assert!((tr.final_state()[0] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn s1_first_switch_from_zero() {
        let p = s1();
        let num = Numerics::default();
        let h = HistoryFunction::constant(p.t, 256, v1(0.0), v1(0.0));
        let tr = integrate(&p, &h, 1.0, &num).unwrap();
        assert_eq!(tr.switching_times.len(), 1);
        assert!((tr.switching_times[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_stays_zero() {
        let mut p = s1();
        p.k = v1(0.0);
        let num = Numerics::default();
        let h = HistoryFunction::constant(p.t, 64, v1(0.0), v1(0.0));
        let tr = integrate(&p, &h, 10.0, &num).unwrap();
        assert!(tr.switching_times.is_empty());
        assert_eq!(tr.final_state()[0], 0.0);
        let f = BranchFlow::new(&p, 1, &num);
        let psi = flow_psi(&f, &h, &v1(0.0), 0.7).unwrap();
        assert_eq!(psi.phi.sup_norm(), 0.0);
        assert_eq!(psi.x_right[0], 0.0);
    }
}
