//! Cross-sections 𝕋_α, 𝕋_β, the hit maps P_β, P_α, the Poincaré map and the
//! reduced maps Π acting on (φ, w) with w ∈ ℝ^{N−1}.

use std::sync::Arc;

use nalgebra::DVector;
use thiserror::Error;

use crate::core::{GridSpec, HistoryFunction, Numerics, PiecewiseFn, Side, SystemParams};
use crate::integrator::{flow_psi, hit_time, BranchFlow, IntegratorError, Level};
use crate::norms::{composite_norm, lp_norm, NormSettings};
use crate::periodic::PeriodicOrbit;
use crate::quad::golden_min;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Section {
    Alpha,
    Beta,
}

impl Section {
    pub fn other(self) -> Section {
        match self {
            Section::Alpha => Section::Beta,
            Section::Beta => Section::Alpha,
        }
    }
}

/// A point (φ, x) with M·x on a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSectionPoint {
    pub phi: PiecewiseFn<f64>,
    pub x: DVector<f64>,
    pub section: Section,
}

impl CrossSectionPoint {
    pub fn new(phi: PiecewiseFn<f64>, x: DVector<f64>, section: Section) -> Self {
        CrossSectionPoint { phi, x, section }
    }

    pub fn history(&self) -> HistoryFunction {
        HistoryFunction::new(self.phi.clone(), self.x.clone())
    }
}

/// (φ, w): a section point with the first coordinate of x eliminated.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedPoint {
    pub phi: PiecewiseFn<f64>,
    pub w: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("no hit before horizon {horizon}")]
    NoHit { horizon: f64 },
    #[error("hit time {t} ≥ 2T = {two_t}")]
    LongHit { t: f64, two_t: f64 },
    #[error("point is not on the {section:?} section (M·x − threshold = {residual})")]
    OffSection { section: Section, residual: f64 },
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
}

/// E^ℝ x = (x₂, …, x_N).
pub fn project_e<S: crate::core::Scalar>(x: &DVector<S>) -> DVector<S> {
    x.rows(1, x.len() - 1).into_owned()
}

pub fn project_e_full(p: &CrossSectionPoint) -> ReducedPoint {
    ReducedPoint { phi: p.phi.clone(), w: project_e(&p.x) }
}

fn threshold(params: &SystemParams, section: Section) -> f64 {
    match section {
        Section::Alpha => params.alpha,
        Section::Beta => params.beta,
    }
}

/// R_α w or R_β w: the unique x with E^ℝ x = w on the chosen section.
pub fn lift_r(w: &DVector<f64>, section: Section, params: &SystemParams) -> DVector<f64> {
    let m = &params.m;
    let tail: f64 = (0..w.len()).map(|j| m[j + 1] * w[j]).sum();
    let mut x = DVector::zeros(w.len() + 1);
    x[0] = (threshold(params, section) - tail) / m[0];
    x.rows_mut(1, w.len()).copy_from(w);
    x
}

/// DR z = (−(1/m₀) Σ m_j z_j, z).
pub fn lift_dr<S: crate::core::Scalar>(z: &DVector<S>, params: &SystemParams) -> DVector<S> {
    let m = &params.m;
    let mut tail = S::zero();
    for j in 0..z.len() {
        tail += z[j] * S::from_real(m[j + 1]);
    }
    let mut x = DVector::zeros(z.len() + 1);
    x[0] = -tail / S::from_real(m[0]);
    x.rows_mut(1, z.len()).copy_from(z);
    x
}

/// Result of one hit map.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub point: CrossSectionPoint,
    pub t_hit: f64,
}

/// Both fixed-branch flows of one parameter set.
#[derive(Debug, Clone)]
pub struct MapContext {
    pub params: SystemParams,
    pub numerics: Numerics,
    plus: Arc<BranchFlow>,
    minus: Arc<BranchFlow>,
}

impl MapContext {
    pub fn new(params: &SystemParams, numerics: &Numerics) -> Self {
        MapContext {
            params: params.clone(),
            numerics: *numerics,
            plus: BranchFlow::new(params, 1, numerics),
            minus: BranchFlow::new(params, -1, numerics),
        }
    }

    pub fn for_orbit(orbit: &PeriodicOrbit, numerics: &Numerics) -> Self {
        let mut n = *numerics;
        n.n_per_t = orbit.n_per_t();
        Self::new(&orbit.params, &n)
    }

    pub fn grid(&self) -> GridSpec {
        self.plus.grid()
    }

    /// The u₊ flow.
    pub fn plus(&self) -> &Arc<BranchFlow> {
        &self.plus
    }

    /// The u₋ flow.
    pub fn minus(&self) -> &Arc<BranchFlow> {
        &self.minus
    }

    /// P_β on 𝕋_α (flow u₊ until M·u = β) or P_α on 𝕋_β (flow u₋ until M·u = α).
    pub fn hit_map(&self, pt: &CrossSectionPoint) -> Result<Hit, MapError> {
        let p = &self.params;
        let residual = p.output(&pt.x) - threshold(p, pt.section);
        let scale = 1f64.max(threshold(p, pt.section).abs());
        if residual.abs() > 1e-9 * scale {
            return Err(MapError::OffSection { section: pt.section, residual });
        }
        let (flow, level) = match pt.section {
            Section::Alpha => (&self.plus, Level::Beta),
            Section::Beta => (&self.minus, Level::Alpha),
        };
        let two_t = 2.0 * p.t;
        let h = pt.history();
        let t_hit = match hit_time(flow, &h, &pt.x, level, two_t, &self.numerics)? {
            Some(t) if t < two_t => t,
            Some(t) => return Err(MapError::LongHit { t, two_t }),
            None => {
                let far = 5.0 * two_t;
                return Err(match hit_time(flow, &h, &pt.x, level, far, &self.numerics)? {
                    Some(t) => MapError::LongHit { t, two_t },
                    None => MapError::NoHit { horizon: far },
                });
            }
        };
        let out = flow_psi(flow, &h, &pt.x, t_hit)?;
        Ok(Hit { point: CrossSectionPoint::new(out.phi, out.x_right, pt.section.other()), t_hit })
    }

    /// P = P_α ∘ P_β on 𝕋_α.
    pub fn poincare(&self, pt: &CrossSectionPoint) -> Result<CrossSectionPoint, MapError> {
        let beta = self.hit_map(pt)?;
        Ok(self.hit_map(&beta.point)?.point)
    }

    /// P¹, …, Pⁿ of `pt`.
    pub fn iterate(&self, pt: &CrossSectionPoint, n: usize) -> Result<Vec<CrossSectionPoint>, MapError> {
        let mut out = Vec::with_capacity(n);
        let mut cur = pt.clone();
        for _ in 0..n {
            cur = self.poincare(&cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    fn reduced(&self, rp: &ReducedPoint, from: Section) -> Result<ReducedPoint, MapError> {
        let x = lift_r(&rp.w, from, &self.params);
        let hit = self.hit_map(&CrossSectionPoint::new(rp.phi.clone(), x, from))?;
        Ok(project_e_full(&hit.point))
    }

    /// Π_β(φ, w) = E P_β(φ, R_α w).
    pub fn pi_beta(&self, rp: &ReducedPoint) -> Result<ReducedPoint, MapError> {
        self.reduced(rp, Section::Alpha)
    }

    /// Π_α(φ, w) = E P_α(φ, R_β w).
    pub fn pi_alpha(&self, rp: &ReducedPoint) -> Result<ReducedPoint, MapError> {
        self.reduced(rp, Section::Beta)
    }

    /// Π = Π_α Π_β.
    pub fn pi(&self, rp: &ReducedPoint) -> Result<ReducedPoint, MapError> {
        self.pi_alpha(&self.pi_beta(rp)?)
    }

    /// Π_βαβ = Π_β Π_α Π_β.
    pub fn pi_bab(&self, rp: &ReducedPoint) -> Result<ReducedPoint, MapError> {
        self.pi_beta(&self.pi(rp)?)
    }
}

/// ‖Pᵏ(φ_α + aν, R_α(w_α + a z)) − Pᵏ(φ_α, x_α)‖ for k = 0..=n in the composite norm.
///
/// Comparing against the iterated base point rather than (φ_α, x_α) itself
/// cancels the O(hⁿ) offset between the discrete map's fixed point and the orbit.
pub fn poincare_deviations(
    ctx: &MapContext,
    orbit: &PeriodicOrbit,
    nu: &PiecewiseFn<f64>,
    z: &DVector<f64>,
    amp: f64,
    n: usize,
    st: &NormSettings,
) -> Result<Vec<f64>, MapError> {
    let grid = GridSpec::history(orbit.t, orbit.n_per_t());
    let base = CrossSectionPoint::new(orbit.phi_alpha.phi.clone(), orbit.x_alpha.clone(), Section::Alpha);
    let w = project_e(&orbit.x_alpha) + z * amp;
    let x = lift_r(&w, Section::Alpha, &orbit.params);
    let start = CrossSectionPoint::new(PiecewiseFn::lincomb(&grid, &[(1.0, &base.phi), (amp, nu)]), x, Section::Alpha);
    let dev = |p: &CrossSectionPoint, q: &CrossSectionPoint| {
        let d = PiecewiseFn::lincomb(&grid, &[(1.0, &p.phi), (-1.0, &q.phi)]);
        composite_norm(&d, &project_e(&(&p.x - &q.x)), st)
    };
    let mut out = vec![dev(&start, &base)];
    let moved = ctx.iterate(&start, n)?;
    let reference = ctx.iterate(&base, n)?;
    out.extend(moved.iter().zip(&reference).map(|(p, q)| dev(p, q)));
    Ok(out)
}

/// (φ − u_per(· + s), x − u_per(s)) sampled with the breakpoints of both.
fn shifted_difference(phi: &PiecewiseFn<f64>, x: &DVector<f64>, orbit: &PeriodicOrbit, s: f64) -> (PiecewiseFn<f64>, DVector<f64>) {
    let per = 2.0 * orbit.t;
    let mut bps = phi.breakpoints();
    for j in -4..=4 {
        for base in [0.0, orbit.t] {
            let b = base + per * j as f64 - s;
            if b > -per && b < 0.0 {
                bps.push(b);
            }
        }
    }
    let grid = GridSpec::history(orbit.t, orbit.n_per_t());
    let d = PiecewiseFn::sample(&grid, &bps, phi.dim(), |th, side| phi.value(th, side) - orbit.u_per(th + s, side));
    (d, x - orbit.u_per(s, Side::Right))
}

/// Distance from (φ, x) to Γ in the composite norm.
///
/// The shift is located on a lattice of spacing T/n by a nodewise
/// least-squares match, refined by golden section on the L_p + Euclidean
/// distance, and the composite norm is evaluated at the refined shift
/// and at the best lattice shift; the smaller value is returned.
pub fn orbit_distance(phi: &PiecewiseFn<f64>, x: &DVector<f64>, orbit: &PeriodicOrbit, st: &NormSettings) -> f64 {
    let n = orbit.n_per_t();
    let h = orbit.t / n as f64;
    let period_cells = 2 * n;
    let lattice: Vec<DVector<f64>> = (0..period_cells).map(|i| orbit.u_per(h * i as f64, Side::Right)).collect();
    let nodes: Vec<DVector<f64>> = (0..period_cells).map(|i| phi.value(-orbit.t * 2.0 + h * i as f64, Side::Right)).collect();
    let mut best = (f64::INFINITY, 0usize);
    for j in 0..period_cells {
        let mut acc = (x - &lattice[j]).norm_squared();
        for (i, v) in nodes.iter().enumerate() {
            acc += h * (v - &lattice[(i + j) % period_cells]).norm_squared();
        }
        if acc < best.0 {
            best = (acc, j);
        }
    }
    let s0 = h * best.1 as f64;
    let cheap = |s: f64| {
        let (d, z) = shifted_difference(phi, x, orbit, s);
        lp_norm(&d, -2.0 * orbit.t, 0.0, st.p) + z.norm()
    };
    let (s_star, _) = golden_min(cheap, s0 - h, s0 + h, 1e-12 * orbit.t.max(1.0));
    [s_star, s0]
        .iter()
        .map(|&s| {
            let (d, z) = shifted_difference(phi, x, orbit, s);
            composite_norm(&d, &z, st)
        })
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{validate_params, RawParams};
    use crate::periodic::find_periodic_orbit;

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
            sigma: Some(t / 3.0),
        })
        .unwrap()
    }

    fn two_dim(m: Vec<f64>, alpha: f64) -> SystemParams {
        validate_params(&RawParams {
            N: 2,
            A: vec![vec![0.0; 2]; 2],
            B: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            k: vec![1.0, 0.0],
            M: m,
            alpha,
            beta: 2.0,
            T: 1.0,
            p: 1.5,
            s: 0.5,
            sigma: None,
        })
        .unwrap()
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn projection_and_lifts() {
        assert_eq!(project_e(&dv(&[1.0, 2.0, 3.0])), dv(&[2.0, 3.0]));
        assert_eq!(project_e(&dv(&[4.0])).len(), 0);
        let p = two_dim(vec![1.0, 0.0], -1.0);
        assert_eq!(lift_r(&dv(&[5.0]), Section::Alpha, &p), dv(&[-1.0, 5.0]));
        assert_eq!(lift_dr(&dv(&[1.0]), &p), dv(&[0.0, 1.0]));
        let q = two_dim(vec![2.0, 1.0], 1.0);
        let x = lift_r(&dv(&[3.0]), Section::Alpha, &q);
        assert_eq!(x, dv(&[-1.0, 3.0]));
        assert_eq!(q.m.dot(&x), 1.0);
        let d = lift_dr(&dv(&[4.0]), &q);
        assert_eq!(d, dv(&[-2.0, 4.0]));
        assert_eq!(q.m.dot(&d), 0.0);
        let s = s1();
        assert_eq!(lift_r(&DVector::zeros(0), Section::Beta, &s), dv(&[1.0]));
        assert_eq!(lift_dr(&DVector::<f64>::zeros(0), &s), dv(&[0.0]));
    }

    fn s1_orbit() -> (PeriodicOrbit, MapContext) {
        let p = s1();
        let num = Numerics { n_per_t: 64, ..Numerics::default() };
        let orbit = find_periodic_orbit(&p, None, &num).unwrap();
        let ctx = MapContext::for_orbit(&orbit, &num);
        (orbit, ctx)
    }

    fn grid_sup(a: &PiecewiseFn<f64>, b: &PiecewiseFn<f64>, grid: &GridSpec) -> f64 {
        PiecewiseFn::lincomb(grid, &[(1.0, a), (-1.0, b)]).sup_norm()
    }

    #[test]
    fn s1_hit_maps_follow_the_orbit() {
        let (orbit, ctx) = s1_orbit();
        let g = ctx.grid();
        let start = CrossSectionPoint::new(orbit.phi_alpha.phi.clone(), orbit.x_alpha.clone(), Section::Alpha);
        let b = ctx.hit_map(&start).unwrap();
        assert!((b.t_hit - 3f64.ln()).abs() < 1e-12);
        assert_eq!(b.point.section, Section::Beta);
        assert!((b.point.x[0] - 1.0).abs() < 1e-12);
        assert!(grid_sup(&b.point.phi, &orbit.phi_beta.phi, &g) < 1e-10);
        let a = ctx.hit_map(&b.point).unwrap();
        assert!((a.point.x[0] + 1.0).abs() < 1e-12);
        assert!(grid_sup(&a.point.phi, &orbit.phi_alpha.phi, &g) < 1e-8);
        let p = ctx.poincare(&start).unwrap();
        assert!(grid_sup(&p.phi, &start.phi, &g) < 1e-8);
    }

    #[test]
    fn off_section_and_missing_hit_are_errors() {
        let (orbit, ctx) = s1_orbit();
        let off = CrossSectionPoint::new(orbit.phi_alpha.phi.clone(), dv(&[-0.5]), Section::Alpha);
        assert!(matches!(ctx.hit_map(&off), Err(MapError::OffSection { .. })));
        // a pure decay never reaches β
        let mut p = ctx.params.clone();
        p.k = dv(&[0.5]);
        let c2 = MapContext::new(&p, &ctx.numerics);
        let pt = CrossSectionPoint::new(orbit.phi_alpha.phi.clone(), dv(&[-1.0]), Section::Alpha);
        assert!(matches!(c2.hit_map(&pt), Err(MapError::NoHit { .. })));
    }

    #[test]
    fn s1_history_perturbation_is_forgotten() {
        let (orbit, ctx) = s1_orbit();
        let g = ctx.grid();
        let bump = PiecewiseFn::sample(&g, &[], 1, |t, _| dv(&[1e-3 * (t * 2.0).sin()]));
        let phi = PiecewiseFn::lincomb(&g, &[(1.0, &orbit.phi_alpha.phi), (1.0, &bump)]);
        let start = CrossSectionPoint::new(phi, orbit.x_alpha.clone(), Section::Alpha);
        let it = ctx.iterate(&start, 2).unwrap();
        let d0 = grid_sup(&start.phi, &orbit.phi_alpha.phi, &g);
        let d2 = grid_sup(&it[1].phi, &orbit.phi_alpha.phi, &g);
        assert!(d0 > 1e-4 && d2 < 1e-9);
    }

    #[test]
    fn pi_matches_direct_composition() {
        let (orbit, ctx) = s1_orbit();
        let rp = ReducedPoint { phi: orbit.phi_alpha.phi.clone(), w: DVector::zeros(0) };
        let pi = ctx.pi(&rp).unwrap();
        let direct = ctx.poincare(&CrossSectionPoint::new(rp.phi.clone(), lift_r(&rp.w, Section::Alpha, &ctx.params), Section::Alpha)).unwrap();
        // the direct route keeps the unsnapped x on 𝕋_β, so agreement is to rounding
        assert!(grid_sup(&pi.phi, &direct.phi, &ctx.grid()) < 1e-12);
        let bab = ctx.pi_bab(&rp).unwrap();
        assert!(grid_sup(&bab.phi, &orbit.phi_beta.phi, &ctx.grid()) < 1e-8);
    }

    #[test]
    fn distance_to_orbit() {
        let (orbit, _) = s1_orbit();
        let st = NormSettings::from_params(&orbit.params);
        let d0 = orbit_distance(&orbit.phi_alpha.phi, &orbit.x_alpha, &orbit, &st);
        assert!(d0 < 1e-8, "{d0}");
        let sh = orbit.shifted_history(0.1);
        let d1 = orbit_distance(&sh.phi, &sh.x_right, &orbit, &st);
        assert!(d1 < 1e-8, "{d1}");
        let g = orbit.grid();
        let c = PiecewiseFn::constant(&g, dv(&[1e-3]));
        let phi = PiecewiseFn::lincomb(&g, &[(1.0, &orbit.phi_alpha.phi), (1.0, &c)]);
        let d2 = orbit_distance(&phi, &orbit.x_alpha, &orbit, &st);
        let bump = composite_norm(&c, &DVector::zeros(1), &st);
        assert!(d2 > 0.0 && d2 <= bump * (1.0 + 1e-9), "{d2} vs {bump}");
    }
}
