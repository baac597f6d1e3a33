//! Symmetric 2T-periodic orbits.
//!
//! Along a 2T-periodic solution u(t − 2T) = u(t), so the orbit also solves the
//! delay-free relay system u' = ±k − (B − A)u, whose fixed-branch flows have the
//! closed form e^{−Kt}x ± ∫₀ᵗ e^{−K(t−ξ)}k dξ with K = B − A. The shooting problem
//! is posed on that closed form and the result is checked against the full
//! delay integrator.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::core::{GridSpec, HistoryFunction, Numerics, PiecewiseFn, Side, SystemParams};
use crate::integrator::integrate;
use crate::linalg::ExpCache;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckItem {
    pub item: u8,
    pub name: &'static str,
    pub passed: bool,
    pub value: f64,
    pub detail: String,
}

/// Outcome of the four orbit checks plus the derivative relation at the switchings.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitReport {
    pub items: Vec<CheckItem>,
    pub switching_times: Vec<f64>,
    pub antisymmetry_residual: f64,
    pub transversality: f64,
}

impl OrbitReport {
    pub fn all_passed(&self) -> bool {
        self.items.iter().all(|c| c.passed)
    }

    pub fn failed_items(&self) -> Vec<u8> {
        let mut v: Vec<u8> = self.items.iter().filter(|c| !c.passed).map(|c| c.item).collect();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PeriodicError {
    #[error("no symmetric periodic orbit found: {0}")]
    NotFound(String),
    #[error("shooting did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("orbit fails assumption items {:?}", .0.failed_items())]
    Assumption(Box<OrbitReport>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyTolerances {
    pub section: f64,
    pub switching: f64,
    pub reproduction: f64,
    pub antisymmetry: f64,
    pub transversal: f64,
}

impl VerifyTolerances {
    pub fn from_numerics(n: &Numerics) -> Self {
        VerifyTolerances { section: 1e-10, switching: 1e-8, reproduction: 1e-8, antisymmetry: 1e-8, transversal: n.tol_transversal }
    }
}

/// The orbit (φ_α, x_α, T) together with its exact closed form.
#[derive(Debug, Clone)]
pub struct PeriodicOrbit {
    /// Parameters with T overwritten by the orbit's half-period.
    pub params: SystemParams,
    pub t: f64,
    pub x_alpha: DVector<f64>,
    pub x_beta: DVector<f64>,
    pub phi_alpha: HistoryFunction,
    pub phi_beta: HistoryFunction,
    /// φ'_α(0+) − φ'_α(0−).
    pub dphi_jump: DVector<f64>,
    /// M·u'_per(T−).
    pub transversality: f64,
    pub antisymmetry_residual: f64,
    pub k_mat: DMatrix<f64>,
    flow: ExpCache<f64>,
    n_per_t: usize,
}

fn aug_generator(kmat: &DMatrix<f64>, k: &DVector<f64>) -> DMatrix<f64> {
    let n = kmat.nrows();
    let mut g = DMatrix::zeros(n + 1, n + 1);
    g.view_mut((0, 0), (n, n)).copy_from(&(-kmat));
    g.view_mut((0, n), (n, 1)).copy_from(k);
    g
}

/// (e^{−Kt}, ∫₀ᵗ e^{−K(t−ξ)}k dξ).
fn ef(cache: &ExpCache<f64>, n: usize, t: f64) -> (DMatrix<f64>, DVector<f64>) {
    let e = cache.get(t);
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, 1)).column(0).into_owned())
}

impl PeriodicOrbit {
    /// Assemble the orbit object from (x_α, T) on the closed form.
    pub fn from_closed_form(params: &SystemParams, x_alpha: DVector<f64>, t: f64, n_per_t: usize) -> Self {
        let p = params.with_period(t);
        let n = p.n;
        let k_mat = &p.b - &p.a;
        let flow = ExpCache::new(aug_generator(&k_mat, &p.k));
        let (e, f) = ef(&flow, n, t);
        let x_beta = &e * &x_alpha + f;
        let dummy = HistoryFunction::constant(t, 4, DVector::zeros(n), DVector::zeros(n));
        let mut orbit = PeriodicOrbit {
            params: p,
            t,
            x_alpha: x_alpha.clone(),
            x_beta,
            phi_alpha: dummy.clone(),
            phi_beta: dummy,
            dphi_jump: DVector::zeros(n),
            transversality: 0.0,
            antisymmetry_residual: 0.0,
            k_mat,
            flow,
            n_per_t,
        };
        orbit.phi_alpha = orbit.shifted_history(2.0 * t);
        orbit.phi_beta = orbit.shifted_history(3.0 * t);
        orbit.dphi_jump = orbit.dphi_alpha(0.0, Side::Right) - orbit.dphi_alpha(0.0, Side::Left);
        orbit.transversality = orbit.params.m.dot(&orbit.du_per(t, Side::Left));
        orbit.antisymmetry_residual = orbit.exact_antisymmetry_residual();
        orbit
    }

    pub fn n_per_t(&self) -> usize {
        self.n_per_t
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::history(self.t, self.n_per_t)
    }

    /// Reduce t into [0, 2T], respecting the side at the wrap point.
    fn wrap(&self, t: f64, side: Side) -> f64 {
        let per = 2.0 * self.t;
        let eps = 1e-13 * per;
        let mut r = t.rem_euclid(per);
        if (r - self.t).abs() < eps {
            r = self.t;
        }
        if r > per - eps {
            r = if side == Side::Right { 0.0 } else { per };
        } else if r < eps {
            r = if side == Side::Left && t.abs() > eps { per } else { 0.0 };
        }
        r
    }

    /// u_per(t) extended 2T-periodically; one-sided at the switchings.
    pub fn u_per(&self, t: f64, side: Side) -> DVector<f64> {
        let n = self.params.n;
        let r = self.wrap(t, side);
        if r < self.t || (r == self.t && side == Side::Left) {
            let (e, f) = ef(&self.flow, n, r);
            e * &self.x_alpha + f
        } else {
            let (e, f) = ef(&self.flow, n, r - self.t);
            e * &self.x_beta - f
        }
    }

    pub fn du_per(&self, t: f64, side: Side) -> DVector<f64> {
        let r = self.wrap(t, side);
        let plus = r < self.t || (r == self.t && side == Side::Left);
        let s = if plus { 1.0 } else { -1.0 };
        -&self.k_mat * self.u_per(t, side) + &self.params.k * s
    }

    pub fn phi_alpha_at(&self, theta: f64, side: Side) -> DVector<f64> {
        self.u_per(theta + 2.0 * self.t, side)
    }

    /// φ'_α(θ), exact.
    pub fn dphi_alpha(&self, theta: f64, side: Side) -> DVector<f64> {
        self.du_per(theta + 2.0 * self.t, side)
    }

    /// φ'_β(θ) = u'_per(θ + 3T).
    pub fn dphi_beta(&self, theta: f64, side: Side) -> DVector<f64> {
        self.du_per(theta + 3.0 * self.t, side)
    }

    /// The history seen at time `s` along the orbit, θ ↦ u_per(θ + s), with trace u_per(s+).
    pub fn shifted_history(&self, s: f64) -> HistoryFunction {
        let per = 2.0 * self.t;
        let mut bps = Vec::new();
        for j in -4..=4 {
            for base in [0.0, self.t] {
                let b = base + per * j as f64 - s;
                if b > -per && b < 0.0 {
                    bps.push(b);
                }
            }
        }
        let phi = PiecewiseFn::sample(&self.grid(), &bps, self.params.n, |th, side| self.u_per(th + s, side));
        HistoryFunction::new(phi, self.u_per(s, Side::Right))
    }

    /// max ‖K e^{−Kt}(x_α + x_β)‖ over [0, T]: the closed-form mismatch of φ'_α(θ) and −φ'_α(θ+T).
    fn exact_antisymmetry_residual(&self) -> f64 {
        let n = self.params.n;
        let v = &self.x_alpha + &self.x_beta;
        (0..=64)
            .map(|i| {
                let (e, _) = ef(&self.flow, n, self.t * i as f64 / 64.0);
                (&self.k_mat * (e * &v)).norm()
            })
            .fold(0.0, f64::max)
    }
}

/// Residual of the shooting problem in (x, T).
fn shooting_residual(cache: &ExpCache<f64>, p: &SystemParams, x: &DVector<f64>, t: f64) -> DVector<f64> {
    let n = p.n;
    let (e, f) = ef(cache, n, t);
    let xb = &e * x + &f;
    let back = &e * &xb - &f;
    let mut r = DVector::zeros(n + 2);
    r[0] = p.m.dot(x) - p.alpha;
    r[1] = p.m.dot(&xb) - p.beta;
    r.rows_mut(2, n).copy_from(&(back - x));
    r
}

fn shooting_jacobian(cache: &ExpCache<f64>, p: &SystemParams, kmat: &DMatrix<f64>, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
    let n = p.n;
    let (e, f) = ef(cache, n, t);
    let xb = &e * x + &f;
    let dxb = -kmat * &xb + &p.k;
    let mut j = DMatrix::zeros(n + 2, n + 1);
    for c in 0..n {
        j[(0, c)] = p.m[c];
    }
    let me = e.transpose() * &p.m;
    for c in 0..n {
        j[(1, c)] = me[c];
    }
    let e2 = &e * &e - DMatrix::identity(n, n);
    j.view_mut((2, 0), (n, n)).copy_from(&e2);
    j[(1, n)] = p.m.dot(&dxb);
    let dback = -kmat * &e * &xb + &e * &dxb - (-kmat * &f + &p.k);
    j.view_mut((2, n), (n, 1)).copy_from(&dback);
    j
}

/// Symmetric half-map fixed point x(T) = −(I + e^{−KT})⁻¹ F_K(T).
fn symmetric_point(cache: &ExpCache<f64>, n: usize, t: f64) -> Option<DVector<f64>> {
    let (e, f) = ef(cache, n, t);
    let s = DMatrix::identity(n, n) + e;
    s.lu().solve(&f).map(|v| -v)
}

fn gauss_newton(cache: &ExpCache<f64>, p: &SystemParams, kmat: &DMatrix<f64>, mut x: DVector<f64>, mut t: f64, tol: f64) -> Result<(DVector<f64>, f64), PeriodicError> {
    let n = p.n;
    let scale = 1f64.max(x.norm());
    let mut res = shooting_residual(cache, p, &x, t).norm();
    for _ in 0..60 {
        if res < 1e-3 * tol * scale {
            break;
        }
        let j = shooting_jacobian(cache, p, kmat, &x, t);
        let r = shooting_residual(cache, p, &x, t);
        let svd = j.svd(true, true);
        let step = svd.solve(&(-r), 1e-14).map_err(|e| PeriodicError::NotFound(e.to_string()))?;
        let mut lam = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let xn = &x + step.rows(0, n) * lam;
            let tn = t + step[n] * lam;
            if tn > 0.0 {
                let rn = shooting_residual(cache, p, &xn, tn).norm();
                if rn < res || rn < 1e-3 * tol * scale {
                    x = xn;
                    t = tn;
                    res = rn;
                    accepted = true;
                    break;
                }
            }
            lam *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if res > tol * scale {
        return Err(PeriodicError::NoConvergence { iterations: 60, residual: res });
    }
    Ok((x, t))
}

/// Candidate half-periods: sign changes of M·x(T) − α along a geometric scan.
fn scan_candidates(cache: &ExpCache<f64>, p: &SystemParams) -> Vec<f64> {
    let n = p.n;
    let g = |t: f64| symmetric_point(cache, n, t).map(|x| p.m.dot(&x) - p.alpha);
    let (t_lo, t_hi, m) = (1e-4f64, 100.0f64, 6000usize);
    let ratio = (t_hi / t_lo).powf(1.0 / m as f64);
    let mut out = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for i in 0..=m {
        let t = t_lo * ratio.powi(i as i32);
        let cur = g(t).filter(|v| v.is_finite());
        if let (Some((t0, g0)), Some(g1)) = (prev, cur) {
            if g0 * g1 <= 0.0 && (g0 - g1).abs() < 1e6 {
                let r = crate::quad::brent(|s| g(s).unwrap_or(f64::NAN), t0, t, 1e-15 * t);
                out.push(r);
            }
        }
        prev = cur.map(|v| (t, v));
    }
    out
}

/// Locate a symmetric orbit (smallest verified half-period unless a guess is given).
pub fn find_periodic_orbit(params: &SystemParams, guess: Option<(DVector<f64>, f64)>, numerics: &Numerics) -> Result<PeriodicOrbit, PeriodicError> {
    let kmat = &params.b - &params.a;
    let cache = ExpCache::new(aug_generator(&kmat, &params.k));
    let tol = numerics.tol_orbit;
    let starts: Vec<(DVector<f64>, f64)> = match guess {
        Some(g) => vec![g],
        None => scan_candidates(&cache, params)
            .into_iter()
            .filter_map(|t| symmetric_point(&cache, params.n, t).map(|x| (x, t)))
            .collect(),
    };
    if starts.is_empty() {
        return Err(PeriodicError::NotFound("no half-period with a symmetric two-switching solution in (1e-4, 100)".into()));
    }
    let tols = VerifyTolerances::from_numerics(numerics);
    let mut first_failure = None;
    let mut last_err = None;
    for (x0, t0) in starts {
        match gauss_newton(&cache, params, &kmat, x0, t0, tol) {
            Ok((x, t)) => {
                let orbit = PeriodicOrbit::from_closed_form(params, x, t, numerics.n_per_t);
                let report = verify_orbit(&orbit, numerics, &tols);
                if report.all_passed() {
                    return Ok(orbit);
                }
                first_failure.get_or_insert(report);
            }
            Err(e) => last_err = Some(e),
        }
    }
    if let Some(r) = first_failure {
        return Err(PeriodicError::Assumption(Box::new(r)));
    }
    Err(last_err.unwrap())
}

/// Check section membership, switching pattern, anti-symmetry and transversality.
pub fn verify_orbit(orbit: &PeriodicOrbit, numerics: &Numerics, tol: &VerifyTolerances) -> OrbitReport {
    verify_history(orbit, &orbit.phi_alpha, numerics, tol)
}

/// Same checks for an arbitrary candidate history (φ, x) against the orbit's parameters.
pub fn verify_history(orbit: &PeriodicOrbit, h: &HistoryFunction, numerics: &Numerics, tol: &VerifyTolerances) -> OrbitReport {
    let p = &orbit.params;
    let t = orbit.t;
    let mut items = Vec::new();
    let scale = 1f64.max(p.alpha.abs().max(p.beta.abs()));

    let sec = (p.output(&h.x_right) - p.alpha).abs();
    items.push(CheckItem { item: 1, name: "section", passed: sec <= tol.section * scale, value: sec, detail: format!("|M·x − α| = {sec:e}") });

    let (times, repro) = match integrate(p, h, 2.0 * t, numerics) {
        Ok(tr) => {
            let mut err: f64 = 0.0;
            for i in 1..=128 {
                let s = 2.0 * t * i as f64 / 128.0;
                let side = if (s - t).abs() < 1e-12 { Side::Left } else { Side::Right };
                err = err.max((tr.eval(s) - orbit.u_per(s, side)).norm());
            }
            for i in 0..64 {
                let th = -2.0 * t * (i as f64 + 0.5) / 64.0;
                err = err.max((h.phi.value(th, Side::Right) - orbit.phi_alpha_at(th, Side::Right)).norm());
            }
            (tr.switching_times, err)
        }
        Err(_) => (Vec::new(), f64::INFINITY),
    };
    let placement = if times.len() == 2 { (times[0] - t).abs().max((times[1] - 2.0 * t).abs()) } else { f64::INFINITY };
    let sw_ok = placement <= tol.switching * t.max(1.0);
    items.push(CheckItem {
        item: 2,
        name: "two switchings at T and 2T",
        passed: sw_ok,
        value: placement,
        detail: format!("{} switchings {:?}", times.len(), times),
    });
    let scale_u = 1f64.max(orbit.x_alpha.norm());
    items.push(CheckItem {
        item: 2,
        name: "trajectory reproduces the history",
        passed: repro <= tol.reproduction * scale_u,
        value: repro,
        detail: format!("sup ‖u − u_per‖ = {repro:e}"),
    });

    // anti-symmetry of the interpolant's derivative at cell midpoints of (−2T, −T)
    let mut anti: f64 = 0.0;
    let mut dscale: f64 = 0.0;
    for th in h.phi.cells_in(-2.0 * t, -t).iter().map(|c| 0.5 * (c.lo + c.hi)) {
        let d1 = h.phi.deriv(th, Side::Right);
        let d2 = h.phi.deriv(th + t, Side::Right);
        anti = anti.max((&d1 + &d2).norm());
        dscale = dscale.max(d1.norm());
    }
    items.push(CheckItem {
        item: 3,
        name: "anti-symmetry",
        passed: anti <= tol.antisymmetry * dscale.max(1.0),
        value: anti,
        detail: format!("max ‖φ'(θ) + φ'(θ+T)‖ = {anti:e}"),
    });

    let tr = p.m.dot(&orbit.du_per(t, Side::Left));
    items.push(CheckItem {
        item: 4,
        name: "transversality",
        passed: tr.abs() > tol.transversal,
        value: tr,
        detail: format!("M·u'_per(T−) = {tr}"),
    });
    let other = p.m.dot(&orbit.du_per(2.0 * t, Side::Left));
    let rel = (tr + other).abs();
    items.push(CheckItem {
        item: 4,
        name: "M·u'(T−) = −M·u'(2T−)",
        passed: rel <= 1e-8 * tr.abs().max(1.0),
        value: rel,
        detail: format!("M·u'_per(2T−) = {other}"),
    });
    OrbitReport { items, switching_times: times, antisymmetry_residual: anti.max(orbit.antisymmetry_residual), transversality: tr }
}
