//! L_p, W¹_p and Sobolev–Slobodeckij norms of piecewise grid functions,
//! the composite perturbation-space norm, and log–log order fits.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::core::{PiecewiseFn, Scalar, SystemParams};
use crate::quad::{adaptive_gl, gl};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NormError {
    #[error("need at least two positive finite residuals, got {0}")]
    TooFewSamples(usize),
}

/// Exponents and the window carrying the fractional part of the B-norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSettings {
    pub p: f64,
    pub s: f64,
    pub t: f64,
    pub window: (f64, f64),
}

impl NormSettings {
    pub fn from_params(params: &SystemParams) -> Self {
        NormSettings { p: params.p, s: params.s, t: params.t, window: (-params.t - params.sigma, 0.0) }
    }
}

/// Remainder exponent γ = min{2 − 1/p, 1/p + s, 1 − s + 1/p}.
pub fn gamma_exponent(p: f64, s: f64) -> f64 {
    (2.0 - 1.0 / p).min(1.0 / p + s).min(1.0 - s + 1.0 / p)
}

/// Finite-difference order of the hit time, 2 − 1/p.
pub fn hit_time_exponent(p: f64) -> f64 {
    2.0 - 1.0 / p
}

pub fn lp_norm<S: Scalar>(f: &PiecewiseFn<S>, a: f64, b: f64, p: f64) -> f64 {
    let (x, w) = gl(8);
    let mut acc = 0.0;
    for c in f.cells_in(a, b) {
        let (m, h) = (0.5 * (c.lo + c.hi), 0.5 * (c.hi - c.lo));
        for g in 0..8 {
            acc += w[g] * h * f.eval_cell(c.piece, c.j, m + h * x[g]).norm().powf(p);
        }
    }
    acc.powf(1.0 / p)
}

/// (‖f‖_p^p + ‖f'‖_p^p)^{1/p}.
pub fn w1p_norm<S: Scalar>(f: &PiecewiseFn<S>, a: f64, b: f64, p: f64) -> f64 {
    let (x, w) = gl(8);
    let mut acc = 0.0;
    for c in f.cells_in(a, b) {
        let (m, h) = (0.5 * (c.lo + c.hi), 0.5 * (c.hi - c.lo));
        for g in 0..8 {
            let t = m + h * x[g];
            acc += w[g] * h * (f.eval_cell(c.piece, c.j, t).norm().powf(p) + f.deriv_cell(c.piece, c.j, t).norm().powf(p));
        }
    }
    acc.powf(1.0 / p)
}

/// Cubic of one cell in the local variable x = (t − c)/hw.
struct CellPoly<S: Scalar> {
    c: f64,
    hw: f64,
    dim: usize,
    coef: Vec<S>,
}

fn vandermonde_inverse() -> &'static [[f64; 4]; 4] {
    static V: OnceLock<[[f64; 4]; 4]> = OnceLock::new();
    V.get_or_init(|| {
        let xs: [f64; 4] = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        let v = DMatrix::from_fn(4, 4, |i, k| xs[i].powi(k as i32));
        let inv = v.try_inverse().unwrap();
        let mut out = [[0.0; 4]; 4];
        for i in 0..4 {
            for k in 0..4 {
                out[i][k] = inv[(i, k)];
            }
        }
        out
    })
}

impl<S: Scalar> CellPoly<S> {
    fn new(f: &PiecewiseFn<S>, piece: usize, j: usize, lo: f64, hi: f64) -> Self {
        let (c, hw) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        let xs = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        let vals: Vec<DVector<S>> = xs.iter().map(|&x| f.eval_cell(piece, j, c + hw * x)).collect();
        let dim = f.dim();
        let vi = vandermonde_inverse();
        let mut coef = vec![S::zero(); 4 * dim];
        for k in 0..4 {
            for i in 0..4 {
                for d in 0..dim {
                    coef[k * dim + d] += vals[i][d] * S::from_real(vi[k][i]);
                }
            }
        }
        CellPoly { c, hw, dim, coef }
    }

    #[inline]
    fn eval_into(&self, t: f64, out: &mut [S]) {
        let x = (t - self.c) / self.hw;
        for d in 0..self.dim {
            let a = &self.coef;
            let n = self.dim;
            out[d] = a[d] + (a[n + d] + (a[2 * n + d] + a[3 * n + d] * S::from_real(x)) * S::from_real(x)) * S::from_real(x);
        }
    }

    /// ‖(P(t+u) − P(t))/u‖ in t-units, free of cancellation.
    #[inline]
    fn diff_quot(&self, t: f64, u: f64) -> f64 {
        let x = (t - self.c) / self.hw;
        let v = u / self.hw;
        let n = self.dim;
        let a = &self.coef;
        let mut acc = 0.0;
        for d in 0..n {
            let q = a[n + d] + a[2 * n + d] * S::from_real(2.0 * x + v) + a[3 * n + d] * S::from_real(3.0 * x * x + 3.0 * x * v + v * v);
            acc += q.modulus_squared();
        }
        acc.sqrt() / self.hw
    }
}

#[inline]
fn dist<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x - *y).modulus_squared()).sum::<f64>().sqrt()
}

#[derive(Clone, Copy)]
struct Sub {
    poly: usize,
    lo: f64,
    hi: f64,
}

struct Seminorm<'a, S: Scalar> {
    polys: &'a [CellPoly<S>],
    g4: &'a [Vec<S>],
    g8: &'a [Vec<S>],
    p: f64,
    q: f64,
    dim: usize,
}

impl<S: Scalar> Seminorm<'_, S> {
    /// ∫∫_{I×I} |f(t) − f(ξ)|^p |t − ξ|^{−q}.
    fn diagonal(&self, c: Sub) -> f64 {
        let poly = &self.polys[c.poly];
        let len = c.hi - c.lo;
        let e = self.p - self.q + 1.0;
        let m = (3.0 / e).ceil().max(1.0);
        let (xr, wr) = gl(16);
        let (xi, wi) = gl(8);
        let mut acc = 0.0;
        for g in 0..16 {
            let r = 0.5 * (1.0 + xr[g]);
            let u = len * r.powf(m);
            let (a, b) = (c.lo, c.hi - u);
            let (mid, h) = (0.5 * (a + b), 0.5 * (b - a));
            let mut inner = 0.0;
            for k in 0..8 {
                inner += wi[k] * poly.diff_quot(mid + h * xi[k], u).powf(self.p);
            }
            inner *= h;
            acc += 0.5 * wr[g] * m * r.powf(m * e - 1.0) * inner;
        }
        2.0 * len.powf(e) * acc
    }

    /// ∫_I∫_J for adjacent equal-length I = [c − L, c], J = [c, c + L] (one ordering).
    fn duffy(&self, i: Sub, j: Sub) -> f64 {
        let (pi, pj) = (&self.polys[i.poly], &self.polys[j.poly]);
        let c = i.hi;
        let len = j.hi - j.lo;
        let m = (2.0 / (2.0 - self.q)).ceil().max(1.0);
        let (xr, wr) = gl(16);
        let (xw, ww) = gl(8);
        let mut a = vec![S::zero(); self.dim];
        let mut b = vec![S::zero(); self.dim];
        let mut acc = 0.0;
        for g in 0..16 {
            let r = 0.5 * (1.0 + xr[g]);
            let rho = len * r.powf(m);
            let jac = 0.5 * wr[g] * len * m * r.powf(m - 1.0) * rho.powf(1.0 - self.q);
            for k in 0..8 {
                let w = 0.5 * (1.0 + xw[k]);
                let kern = 0.5 * ww[k] * (1.0 + w).powf(-self.q);
                // triangle x ≥ y and its mirror
                pj.eval_into(c + rho, &mut b);
                pi.eval_into(c - rho * w, &mut a);
                let g1 = dist(&a, &b).powf(self.p);
                pj.eval_into(c + rho * w, &mut b);
                pi.eval_into(c - rho, &mut a);
                let g2 = dist(&a, &b).powf(self.p);
                acc += jac * kern * (g1 + g2);
            }
        }
        acc
    }

    fn tensor(&self, i: Sub, j: Sub, n: usize) -> f64 {
        let (x, _) = gl(n);
        let (pi, pj) = (&self.polys[i.poly], &self.polys[j.poly]);
        let (ci, hi) = (0.5 * (i.lo + i.hi), 0.5 * (i.hi - i.lo));
        let (cj, hj) = (0.5 * (j.lo + j.hi), 0.5 * (j.hi - j.lo));
        let mut va = vec![S::zero(); self.dim * n];
        let mut vb = vec![S::zero(); self.dim * n];
        for g in 0..n {
            pi.eval_into(ci + hi * x[g], &mut va[g * self.dim..(g + 1) * self.dim]);
            pj.eval_into(cj + hj * x[g], &mut vb[g * self.dim..(g + 1) * self.dim]);
        }
        self.tensor_vals(&va, &vb, ci, hi, cj, hj, n)
    }

    #[allow(clippy::too_many_arguments)]
    fn tensor_vals(&self, va: &[S], vb: &[S], ci: f64, hi: f64, cj: f64, hj: f64, n: usize) -> f64 {
        let (x, w) = gl(n);
        let d = self.dim;
        let mut acc = 0.0;
        for a in 0..n {
            let t = ci + hi * x[a];
            for b in 0..n {
                let xi = cj + hj * x[b];
                acc += w[a] * w[b] * dist(&va[a * d..(a + 1) * d], &vb[b * d..(b + 1) * d]).powf(self.p) * (xi - t).abs().powf(-self.q);
            }
        }
        acc * hi * hj
    }

    /// ∫_I∫_J for I left of J (one ordering).
    fn pair(&self, i: Sub, j: Sub, whole: Option<(usize, usize)>) -> f64 {
        let gap = j.lo - i.hi;
        let (li, lj) = (i.hi - i.lo, j.hi - j.lo);
        let l = li.max(lj);
        if gap <= 1e-14 * l {
            let rel = (li - lj).abs() / l;
            if rel < 1e-9 {
                return self.duffy(i, j);
            }
            if li > lj {
                let cut = i.hi - lj;
                return self.pair(Sub { hi: cut, ..i }, j, None) + self.duffy(Sub { lo: cut, ..i }, j);
            }
            let cut = j.lo + li;
            return self.duffy(i, Sub { hi: cut, ..j }) + self.pair(i, Sub { lo: cut, ..j }, None);
        }
        if gap >= 2.0 * l {
            if let Some((a, b)) = whole {
                let (ci, hi) = (0.5 * (i.lo + i.hi), 0.5 * li);
                let (cj, hj) = (0.5 * (j.lo + j.hi), 0.5 * lj);
                return self.tensor_vals(&self.g4[a], &self.g4[b], ci, hi, cj, hj, 4);
            }
            return self.tensor(i, j, 4);
        }
        if gap >= l {
            if let Some((a, b)) = whole {
                let (ci, hi) = (0.5 * (i.lo + i.hi), 0.5 * li);
                let (cj, hj) = (0.5 * (j.lo + j.hi), 0.5 * lj);
                return self.tensor_vals(&self.g8[a], &self.g8[b], ci, hi, cj, hj, 8);
            }
            return self.tensor(i, j, 8);
        }
        if li >= lj {
            let m = 0.5 * (i.lo + i.hi);
            self.pair(Sub { hi: m, ..i }, j, None) + self.pair(Sub { lo: m, ..i }, j, None)
        } else {
            let m = 0.5 * (j.lo + j.hi);
            self.pair(i, Sub { hi: m, ..j }, None) + self.pair(i, Sub { lo: m, ..j }, None)
        }
    }
}

/// ∫_a^b∫_a^b |f(t) − f(ξ)|^p / |t − ξ|^{1+sp} dt dξ.
pub fn fractional_seminorm_p<S: Scalar>(f: &PiecewiseFn<S>, a: f64, b: f64, p: f64, s: f64) -> f64 {
    let cells = f.cells_in(a, b);
    let polys: Vec<CellPoly<S>> = cells.iter().map(|c| CellPoly::new(f, c.piece, c.j, c.lo, c.hi)).collect();
    let dim = f.dim();
    let sample = |n: usize| -> Vec<Vec<S>> {
        let (x, _) = gl(n);
        cells
            .iter()
            .zip(&polys)
            .map(|(c, poly)| {
                let (m, h) = (0.5 * (c.lo + c.hi), 0.5 * (c.hi - c.lo));
                let mut v = vec![S::zero(); dim * n];
                for g in 0..n {
                    poly.eval_into(m + h * x[g], &mut v[g * dim..(g + 1) * dim]);
                }
                v
            })
            .collect()
    };
    let (g4, g8) = (sample(4), sample(8));
    let sn = Seminorm { polys: &polys, g4: &g4, g8: &g8, p, q: 1.0 + s * p, dim };
    let subs: Vec<Sub> = cells.iter().enumerate().map(|(i, c)| Sub { poly: i, lo: c.lo, hi: c.hi }).collect();
    (0..subs.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = sn.diagonal(subs[i]);
            for j in i + 1..subs.len() {
                acc += 2.0 * sn.pair(subs[i], subs[j], Some((i, j)));
            }
            acc
        })
        .sum()
}

/// ‖f‖_{L_p(a,b)} + [f]_{W^s_p(a,b)}.
pub fn fractional_norm<S: Scalar>(f: &PiecewiseFn<S>, a: f64, b: f64, p: f64, s: f64) -> f64 {
    lp_norm(f, a, b, p) + fractional_seminorm_p(f, a, b, p, s).powf(1.0 / p)
}

/// ‖φ‖_{L_p(−2T,0)} + ‖φ‖_{W^s_p(window)}.
pub fn b_norm<S: Scalar>(f: &PiecewiseFn<S>, st: &NormSettings) -> f64 {
    lp_norm(f, -2.0 * st.t, 0.0, st.p) + fractional_norm(f, st.window.0, st.window.1, st.p, st.s)
}

/// B-norm of the history part plus the Euclidean norm of the finite-dimensional part.
pub fn composite_norm<S: Scalar>(nu: &PiecewiseFn<S>, z: &DVector<S>, st: &NormSettings) -> f64 {
    b_norm(nu, st) + z.norm()
}

/// Least-squares fit of log r against log ε.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub used: usize,
}

pub fn estimate_order(samples: &[(f64, f64)]) -> Result<OrderFit, NormError> {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|(e, r)| *e > 0.0 && *r > 0.0 && e.is_finite() && r.is_finite())
        .map(|(e, r)| (e.ln(), r.ln()))
        .collect();
    let n = pts.len();
    if n < 2 {
        return Err(NormError::TooFewSamples(n));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(OrderFit { slope, intercept, r2, used: n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    /// ‖f(·+δ) − f − δf'‖_{L_p(a,b)}.
    Taylor,
    /// ‖f(·+δ) − f‖_{L_p(a,b)}.
    Translation,
    /// ‖f‖_{L_p(b−δ,b)}.
    Tail,
}

/// Probe samples (δ, lhs) and their fitted order; `fit` is `None` when every lhs vanishes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub samples: Vec<(f64, f64)>,
    pub fit: Option<OrderFit>,
}

/// Left-hand side of the chosen increment estimate over a δ ladder, with its fitted order.
/// `singular` lists points where f or f' is not smooth; quadrature is split there.
pub fn increment_probe(
    kind: ProbeKind,
    f: &dyn Fn(f64) -> f64,
    df: &dyn Fn(f64) -> f64,
    interval: (f64, f64),
    p: f64,
    singular: &[f64],
    deltas: &[f64],
) -> ProbeResult {
    let (a, b) = interval;
    let samples: Vec<(f64, f64)> = deltas
        .iter()
        .map(|&d| {
            let (lo, hi, integrand): (f64, f64, Box<dyn Fn(f64) -> f64>) = match kind {
                ProbeKind::Taylor => (a, b, Box::new(move |t| (f(t + d) - f(t) - d * df(t)).abs().powf(p))),
                ProbeKind::Translation => (a, b, Box::new(move |t| (f(t + d) - f(t)).abs().powf(p))),
                ProbeKind::Tail => (b - d, b, Box::new(move |t| f(t).abs().powf(p))),
            };
            let mut cuts = vec![lo, hi];
            for &x in singular {
                for y in [x, x - d] {
                    if y > lo && y < hi {
                        cuts.push(y);
                    }
                }
            }
            cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let total: f64 = cuts.windows(2).map(|w| adaptive_gl(&integrand, w[0], w[1], 1e-15)).sum();
            (d, total.powf(1.0 / p))
        })
        .collect();
    let fit = estimate_order(&samples).ok();
    ProbeResult { samples, fit }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::GridSpec;

    fn lin(cells: usize) -> PiecewiseFn<f64> {
        PiecewiseFn::sample(&GridSpec::new(0.0, 1.0, cells), &[], 1, |t, _| DVector::from_element(1, t))
    }

    #[test]
    fn lp_of_constant_and_linear() {
        let g = GridSpec::new(0.0, 1.0, 16);
        let c: PiecewiseFn<f64> = PiecewiseFn::constant(&g, DVector::from_element(1, -2.5));
        assert!((lp_norm(&c, 0.0, 1.0, 1.5) - 2.5).abs() < 1e-13);
        assert!((lp_norm(&lin(16), 0.0, 1.0, 2.0) - 1.0 / 3f64.sqrt()).abs() < 1e-13);
        let v: PiecewiseFn<f64> = PiecewiseFn::constant(&GridSpec::new(0.0, 2.0, 8), DVector::from_vec(vec![3.0, 0.0]));
        assert!((lp_norm(&v, 0.0, 2.0, 1.5) - 3.0 * 2f64.powf(1.0 / 1.5)).abs() < 1e-12);
    }

    #[test]
    fn fractional_of_linear_matches_closed_form() {
        let (p, s) = (1.5, 0.5);
        let semi = fractional_seminorm_p(&lin(32), 0.0, 1.0, p, s);
        let exact = 2.0 / (0.75 * 1.75);
        assert!((semi - exact).abs() < 1e-6 * exact, "{semi} vs {exact}");
        let norm = fractional_norm(&lin(32), 0.0, 1.0, p, s);
        let closed = (1.0 / (p + 1.0)).powf(1.0 / p) + exact.powf(1.0 / p);
        assert!((norm - closed).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_seminorm() {
        let c: PiecewiseFn<f64> = PiecewiseFn::constant(&GridSpec::new(-1.0, 0.0, 20), DVector::from_element(1, 4.0));
        assert!(fractional_seminorm_p(&c, -1.0, 0.0, 1.5, 0.5) < 1e-20);
    }

    #[test]
    fn step_function_seminorm_is_finite_and_settles() {
        // closed form for the unit jump at 1/2 on (0,1):
        // 2∫₀^{1/2}∫₀^{1/2}(x+y)^{−q} = 2·(2^{2−q}−2)(1/2)^{2−q}/((1−q)(2−q))
        let (p, s) = (1.5, 0.5);
        let q = 1.0 + s * p;
        let exact = 2.0 * (2f64.powf(2.0 - q) - 2.0) * 0.5f64.powf(2.0 - q) / ((1.0 - q) * (2.0 - q));
        for cells in [8, 32] {
            let f = PiecewiseFn::sample(&GridSpec::new(0.0, 1.0, cells), &[0.5], 1, |t, side| {
                DVector::from_element(1, if t < 0.5 || (t == 0.5 && side == crate::core::Side::Left) { 0.0 } else { 1.0 })
            });
            let v = fractional_seminorm_p(&f, 0.0, 1.0, p, s);
            assert!((v - exact).abs() < 1e-6 * exact, "{cells}: {v} vs {exact}");
        }
    }

    #[test]
    fn order_fit_recovers_powers() {
        let e: Vec<f64> = (0..7).map(|i| 10f64.powf(-2.0 - 0.5 * i as f64)).collect();
        let f = estimate_order(&e.iter().map(|&x| (x, x * x)).collect::<Vec<_>>()).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && f.r2 > 0.999999);
        let f = estimate_order(&e.iter().map(|&x| (x, 3.0 * x.powf(7.0 / 6.0))).collect::<Vec<_>>()).unwrap();
        assert!((f.slope - 7.0 / 6.0).abs() < 1e-12);
        assert!(estimate_order(&[(1e-2, 0.0), (1e-3, 1e-4)]).is_err());
    }

    #[test]
    fn gamma_default() {
        assert!((gamma_exponent(1.5, 0.5) - 7.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn increment_probes() {
        let deltas: Vec<f64> = (0..6).map(|i| 0.05 * 0.5f64.powi(i)).collect();
        let a1 = increment_probe(ProbeKind::Taylor, &|t: f64| t.sin(), &|t: f64| t.cos(), (0.0, 1.0), 1.5, &[], &deltas).fit.unwrap();
        assert!(a1.slope >= 1.0 + 1.0 / 1.5 - 0.05, "{a1:?}");
        let f = |t: f64| t.abs().powf(0.6);
        let a2 = increment_probe(ProbeKind::Translation, &f, &|_| 0.0, (-1.0, 0.5), 1.5, &[0.0], &deltas).fit.unwrap();
        assert!(a2.slope >= 0.45, "{a2:?}");
        let c = increment_probe(ProbeKind::Translation, &|_| 2.0, &|_| 0.0, (-1.0, 0.5), 1.5, &[], &deltas);
        assert!(c.samples.iter().all(|s| s.1 == 0.0));
        assert!(c.fit.is_none());
        let a6 = increment_probe(ProbeKind::Tail, &|t: f64| 1.0 + t, &|_| 1.0, (0.0, 1.0), 1.5, &[], &deltas).fit.unwrap();
        assert!(a6.slope >= 0.5 - 0.05);
    }
}
