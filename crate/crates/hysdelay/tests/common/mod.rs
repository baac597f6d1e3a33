//! Shared helpers for integration tests: test systems and an RK4 event oracle.
#![allow(dead_code)]

use hysdelay::core::{validate_params, HistoryFunction, Numerics, RawParams, Side, SystemParams};
use hysdelay::periodic::{find_periodic_orbit, PeriodicOrbit};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn raw(n: usize, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, k: Vec<f64>, m: Vec<f64>, t: f64) -> RawParams {
    RawParams { N: n, A: a, B: b, k, M: m, alpha: -1.0, beta: 1.0, T: t, p: 1.5, s: 0.5, sigma: None }
}

pub fn s1_raw() -> RawParams {
    raw(1, vec![vec![0.0]], vec![vec![1.0]], vec![2.0], vec![1.0], 3f64.ln())
}

/// Weakly delayed scalar systems and two planar ones; all have verified orbits.
pub fn spectral_systems() -> Vec<(&'static str, RawParams)> {
    vec![
        ("scalar a=0.02", raw(1, vec![vec![0.02]], vec![vec![1.0]], vec![2.0], vec![1.0], 1.0)),
        ("scalar a=-0.02", raw(1, vec![vec![-0.02]], vec![vec![1.0]], vec![2.0], vec![1.0], 1.0)),
        ("scalar a=0.03", raw(1, vec![vec![0.03]], vec![vec![1.5]], vec![2.5], vec![1.0], 1.0)),
        ("scalar a=0.01", raw(1, vec![vec![0.01]], vec![vec![0.7]], vec![2.0], vec![1.0], 1.0)),
        ("scalar a=-0.03", raw(1, vec![vec![-0.03]], vec![vec![0.8]], vec![2.0], vec![1.0], 1.0)),
        (
            "planar diagonal delay",
            raw(2, vec![vec![0.02, 0.0], vec![0.0, 0.02]], vec![vec![1.0, 0.2], vec![-0.2, 1.5]], vec![2.0, 1.0], vec![1.0, 0.5], 1.0),
        ),
        (
            "planar rotation",
            raw(2, vec![vec![-0.02, 0.01], vec![0.0, -0.02]], vec![vec![0.5, 1.0], vec![-1.0, 0.5]], vec![2.0, 0.0], vec![1.0, 0.0], 1.0),
        ),
    ]
}

/// Scalar system with a real multiplier below −1.
pub fn unstable_raw() -> RawParams {
    raw(1, vec![vec![-0.8]], vec![vec![0.2]], vec![3.0], vec![1.0], 1.0)
}

pub fn orbit_for(r: &RawParams, n_per_t: usize) -> (PeriodicOrbit, Numerics) {
    let p = validate_params(r).unwrap();
    let num = Numerics { n_per_t, ..Numerics::default() };
    (find_periodic_orbit(&p, None, &num).unwrap(), num)
}

fn random_matrix<R: Rng>(rng: &mut R, n: usize, norm: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let s = m.clone().svd(false, false).singular_values.max();
    m * (norm / s)
}

/// A random system with N ≤ 3 and spectral norms of A, B at most 2.
pub fn random_system<R: Rng>(rng: &mut R) -> SystemParams {
    loop {
        let n = rng.random_range(1..=3);
        let (na, nb) = (rng.random_range(0.0..2.0), rng.random_range(0.2..2.0));
        let a = random_matrix(rng, n, na);
        let b = random_matrix(rng, n, nb);
        let rows = |m: &DMatrix<f64>| (0..n).map(|i| m.row(i).iter().copied().collect()).collect();
        let mut mv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        mv[0] = rng.random_range(0.5..1.5);
        let r = RawParams {
            N: n,
            A: rows(&a),
            B: rows(&b),
            k: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
            M: mv,
            alpha: -1.0,
            beta: 1.0,
            T: rng.random_range(0.3..1.2),
            p: 1.5,
            s: 0.5,
            sigma: None,
        };
        if let Ok(p) = validate_params(&r) {
            return p;
        }
    }
}

/// A smooth random history with an independent trace x.
pub fn random_history<R: Rng>(rng: &mut R, p: &SystemParams, n_per_t: usize) -> HistoryFunction {
    let n = p.n;
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grid = hysdelay::core::GridSpec::history(p.t, n_per_t);
    let phi = hysdelay::core::PiecewiseFn::sample(&grid, &[], n, |th, _| DVector::from_fn(n, |i, _| c[i] + d[i] * (th / p.t).sin()));
    let x = DVector::from_fn(n, |i, _| c[i] + rng.random_range(-0.3..0.3));
    HistoryFunction::new(phi, x)
}

/// One accepted RK4 step with cubic Hermite dense output.
#[derive(Debug, Clone)]
struct Step {
    t0: f64,
    t1: f64,
    u0: DVector<f64>,
    u1: DVector<f64>,
    f0: DVector<f64>,
    f1: DVector<f64>,
}

/// Fixed-step RK4 with bisection on switching events; delayed values from Hermite dense output.
pub struct Rk4Oracle {
    pub switching_times: Vec<f64>,
    pub min_switch_speed: f64,
    steps: Vec<Step>,
    history: HistoryFunction,
}

impl Rk4Oracle {
    pub fn eval(&self, t: f64) -> DVector<f64> {
        if t < 0.0 {
            return self.history.phi.value(t, Side::Right);
        }
        let i = self.steps.partition_point(|s| s.t1 < t).min(self.steps.len() - 1);
        let s = &self.steps[i];
        let h = s.t1 - s.t0;
        if h == 0.0 {
            return s.u0.clone();
        }
        let x = (t - s.t0) / h;
        let h00 = 2.0 * x * x * x - 3.0 * x * x + 1.0;
        let h10 = x * x * x - 2.0 * x * x + x;
        let h01 = -2.0 * x * x * x + 3.0 * x * x;
        let h11 = x * x * x - x * x;
        &s.u0 * h00 + &s.f0 * (h10 * h) + &s.u1 * h01 + &s.f1 * (h11 * h)
    }

    /// u(s − 2T), one-sided so that a step never sees the history jump at θ = 0 from the wrong side.
    fn delayed(&self, s: f64, two_t: f64, side: Side) -> DVector<f64> {
        let t = s - two_t;
        if t < 0.0 || (t.abs() < 1e-12 && side == Side::Left) {
            self.history.phi.value(t.min(0.0), side)
        } else {
            self.eval(t)
        }
    }

    fn rhs(&self, p: &SystemParams, relay: i8, s: f64, u: &DVector<f64>, side: Side) -> DVector<f64> {
        &p.k * relay as f64 - &p.b * u + &p.a * self.delayed(s, 2.0 * p.t, side)
    }

    fn step(&self, p: &SystemParams, relay: i8, t: f64, u: &DVector<f64>, h: f64) -> DVector<f64> {
        let k1 = self.rhs(p, relay, t, u, Side::Right);
        let k2 = self.rhs(p, relay, t + 0.5 * h, &(u + &k1 * (0.5 * h)), Side::Right);
        let k3 = self.rhs(p, relay, t + 0.5 * h, &(u + &k2 * (0.5 * h)), Side::Right);
        let k4 = self.rhs(p, relay, t + h, &(u + &k3 * h), Side::Left);
        u + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    pub fn run(p: &SystemParams, history: &HistoryFunction, horizon: f64, steps_per_t: usize) -> Self {
        let mut o = Rk4Oracle { switching_times: Vec::new(), min_switch_speed: f64::INFINITY, steps: Vec::new(), history: history.clone() };
        let two_t = 2.0 * p.t;
        let hmax = p.t / steps_per_t as f64;
        let mut relay: i8 = if p.output(&history.x_right) < p.beta { 1 } else { -1 };
        let mut breaks = vec![two_t];
        let mut t = 0.0;
        let mut u = history.x_right.clone();
        while t < horizon - 1e-14 {
            let next_break = breaks.iter().copied().filter(|&b| b > t).fold(horizon, f64::min);
            let h = hmax.min(next_break - t);
            let un = o.step(p, relay, t, &u, h);
            let (thr, up) = if relay == 1 { (p.beta, true) } else { (p.alpha, false) };
            let g = |v: &DVector<f64>| if up { p.output(v) - thr } else { thr - p.output(v) };
            let (hs, us, flip) = if g(&un) >= 0.0 {
                let (mut lo, mut hi) = (0.0, h);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if g(&o.step(p, relay, t, &u, mid)) >= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                (hi, o.step(p, relay, t, &u, hi), true)
            } else {
                (h, un, false)
            };
            let f0 = o.rhs(p, relay, t, &u, Side::Right);
            let f1 = o.rhs(p, relay, t + hs, &us, Side::Left);
            o.steps.push(Step { t0: t, t1: t + hs, u0: u.clone(), u1: us.clone(), f0, f1: f1.clone() });
            let hit_break = !flip && h == next_break - t;
            t = if hit_break { next_break } else { t + hs };
            u = us;
            if hit_break {
                breaks.push(next_break + two_t);
            }
            if flip {
                o.min_switch_speed = o.min_switch_speed.min(p.m.dot(&f1).abs());
                o.switching_times.push(t);
                relay = -relay;
                breaks.push(t + two_t);
            }
        }
        o
    }
}
