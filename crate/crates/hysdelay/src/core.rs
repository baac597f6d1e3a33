//! Domain types shared by every module: validated system parameters and
//! breakpoint-aware piecewise-cubic grid functions.

use std::fmt;

use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Real or complex scalars carried by grid functions.
pub trait Scalar: ComplexField<RealField = f64> + Copy + Send + Sync {}
impl Scalar for f64 {}
impl Scalar for Complex64 {}

/// Parameter bundle as read from a config file or a binding, before validation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[allow(non_snake_case)]
pub struct RawParams {
    pub N: usize,
    pub A: Vec<Vec<f64>>,
    pub B: Vec<Vec<f64>>,
    pub k: Vec<f64>,
    pub M: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub T: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default)]
    pub sigma: Option<f64>,
}

fn default_p() -> f64 {
    1.5
}
fn default_s() -> f64 {
    0.5
}

/// One violated invariant of a parameter bundle.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("m₀=0")]
    M0Zero,
    #[error("α ≥ β (α={alpha}, β={beta})")]
    Thresholds { alpha: f64, beta: f64 },
    #[error("T must be positive (T={0})")]
    Period(f64),
    #[error("s={0} outside (0,1)")]
    SRange(f64),
    #[error("p ≤ 1 (p={0})")]
    PLow(f64),
    #[error("p ≥ min{{1/s,1/(1−s)}}={bound}")]
    PHigh { bound: f64 },
    #[error("σ={sigma} outside (0, T/3]={max}")]
    Sigma { sigma: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ParamRejection(pub Vec<Violation>);

impl fmt::Display for ParamRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "invalid parameters: {}", msgs.join("; "))
    }
}

/// Validated parameters of u' = k·H(Mu) − Bu + A u(t − 2T).
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    pub n: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub k: DVector<f64>,
    pub m: DVector<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub t: f64,
    pub p: f64,
    pub s: f64,
    pub sigma: f64,
}

fn matrix_from_rows(rows: &[Vec<f64>], n: usize, name: &str, out: &mut Vec<Violation>) -> DMatrix<f64> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        out.push(Violation::Dimension(format!("{name} must be {n}×{n}")));
        return DMatrix::zeros(n, n);
    }
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

/// Upper bound on p for a given s; p must lie strictly below it.
pub fn p_upper_bound(s: f64) -> f64 {
    (1.0 / s).min(1.0 / (1.0 - s))
}

/// Check every invariant and collect all violations.
pub fn validate_params(raw: &RawParams) -> Result<SystemParams, ParamRejection> {
    let mut v = Vec::new();
    let n = raw.N;
    if n == 0 {
        v.push(Violation::Dimension("N must be positive".into()));
        return Err(ParamRejection(v));
    }
    let a = matrix_from_rows(&raw.A, n, "A", &mut v);
    let b = matrix_from_rows(&raw.B, n, "B", &mut v);
    if raw.k.len() != n {
        v.push(Violation::Dimension(format!("k must have length {n}")));
    }
    if raw.M.len() != n {
        v.push(Violation::Dimension(format!("M must have length {n}")));
    }
    let k = DVector::from_fn(n, |i, _| raw.k.get(i).copied().unwrap_or(0.0));
    let m = DVector::from_fn(n, |i, _| raw.M.get(i).copied().unwrap_or(0.0));
    for (name, ok) in [
        ("A", a.iter().all(|x| x.is_finite())),
        ("B", b.iter().all(|x| x.is_finite())),
        ("k", k.iter().all(|x| x.is_finite())),
        ("M", m.iter().all(|x| x.is_finite())),
        ("thresholds", raw.alpha.is_finite() && raw.beta.is_finite()),
        ("T", raw.T.is_finite()),
        ("p,s", raw.p.is_finite() && raw.s.is_finite()),
    ] {
        if !ok {
            v.push(Violation::NonFinite(name));
        }
    }
    if raw.M.first() == Some(&0.0) {
        v.push(Violation::M0Zero);
    }
    if !(raw.alpha < raw.beta) {
        v.push(Violation::Thresholds { alpha: raw.alpha, beta: raw.beta });
    }
    if !(raw.T > 0.0) {
        v.push(Violation::Period(raw.T));
    }
    if !(raw.s > 0.0 && raw.s < 1.0) {
        v.push(Violation::SRange(raw.s));
    } else {
        if !(raw.p > 1.0) {
            v.push(Violation::PLow(raw.p));
        }
        let bound = p_upper_bound(raw.s);
        if !(raw.p < bound) {
            v.push(Violation::PHigh { bound });
        }
    }
    let sigma = raw.sigma.unwrap_or(raw.T / 3.0);
    let max = raw.T / 3.0;
    if !(sigma > 0.0 && sigma <= max * (1.0 + 1e-12)) {
        v.push(Violation::Sigma { sigma, max });
    }
    if !v.is_empty() {
        return Err(ParamRejection(v));
    }
    Ok(SystemParams { n, a, b, k, m, alpha: raw.alpha, beta: raw.beta, t: raw.T, p: raw.p, s: raw.s, sigma })
}

impl SystemParams {
    pub fn to_raw(&self) -> RawParams {
        let rows = |x: &DMatrix<f64>| (0..self.n).map(|i| (0..self.n).map(|j| x[(i, j)]).collect()).collect();
        RawParams {
            N: self.n,
            A: rows(&self.a),
            B: rows(&self.b),
            k: self.k.iter().copied().collect(),
            M: self.m.iter().copied().collect(),
            alpha: self.alpha,
            beta: self.beta,
            T: self.t,
            p: self.p,
            s: self.s,
            sigma: Some(self.sigma),
        }
    }

    /// N₁ = N − 1.
    pub fn n1(&self) -> usize {
        self.n - 1
    }

    /// Output functional M·x.
    pub fn output(&self, x: &DVector<f64>) -> f64 {
        self.m.dot(x)
    }

    /// Same system with a new half-delay; σ is clamped into (0, T/3].
    pub fn with_period(&self, t: f64) -> SystemParams {
        let mut q = self.clone();
        q.t = t;
        q.sigma = self.sigma.min(t / 3.0);
        q
    }
}

/// Which one-sided limit to take at a breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

/// Uniform background grid on [a, b] with `cells` cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub a: f64,
    pub b: f64,
    pub cells: usize,
}

impl GridSpec {
    pub fn new(a: f64, b: f64, cells: usize) -> Self {
        assert!(b > a && cells > 0);
        GridSpec { a, b, cells }
    }

    pub fn h(&self) -> f64 {
        (self.b - self.a) / self.cells as f64
    }

    /// Canonical history grid on (−2T, 0) with `n` cells per length-T window.
    pub fn history(t: f64, n: usize) -> Self {
        GridSpec::new(-2.0 * t, 0.0, 2 * n)
    }

    /// Nodes of the background grid merged with breakpoints, split into pieces.
    pub fn piece_nodes(&self, breakpoints: &[f64]) -> Vec<Vec<f64>> {
        let (a, b) = (self.a, self.b);
        let h = self.h();
        let edge = 1e-12 * (b - a).abs().max(1.0);
        let mut bps: Vec<f64> = breakpoints.iter().copied().filter(|&x| x > a + edge && x < b - edge).collect();
        bps.sort_by(|x, y| x.partial_cmp(y).unwrap());
        bps.dedup_by(|x, y| (*x - *y).abs() <= edge);
        let mut cuts = vec![a];
        cuts.extend(bps.iter().copied());
        cuts.push(b);
        let mut pieces = Vec::with_capacity(cuts.len() - 1);
        for w in cuts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let mut nodes = vec![lo];
            let i0 = ((lo - a) / h).floor() as i64;
            let i1 = ((hi - a) / h).ceil() as i64;
            for i in i0.max(0)..=i1.min(self.cells as i64) {
                let x = if i as usize == self.cells { b } else { a + h * i as f64 };
                if x > lo + 0.25 * h && x < hi - 0.25 * h {
                    nodes.push(x);
                }
            }
            nodes.push(hi);
            if nodes.len() < 4 {
                nodes = (0..4).map(|j| lo + (hi - lo) * j as f64 / 3.0).collect();
                nodes[3] = hi;
            }
            pieces.push(nodes);
        }
        pieces
    }
}

/// One smooth piece: nodes including both endpoints, values at the nodes
/// (endpoint values are the one-sided limits from inside the piece).
#[derive(Debug, Clone, PartialEq)]
pub struct Piece<S: Scalar> {
    pub nodes: Vec<f64>,
    pub values: Vec<DVector<S>>,
}

/// Piecewise local-cubic interpolant with explicit breakpoints between pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseFn<S: Scalar> {
    dim: usize,
    pieces: Vec<Piece<S>>,
}

/// Degree of the local interpolant.
pub const INTERP_DEGREE: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("t={t} outside [{a}, {b}]")]
    OutOfDomain { t: f64, a: f64, b: f64 },
}

fn lagrange4(x: &[f64], t: f64) -> [f64; 4] {
    let mut w = [1.0; 4];
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                w[i] *= (t - x[j]) / (x[i] - x[j]);
            }
        }
    }
    w
}

fn lagrange4_deriv(x: &[f64], t: f64) -> [f64; 4] {
    let mut w = [0.0; 4];
    for i in 0..4 {
        let mut denom = 1.0;
        for j in 0..4 {
            if j != i {
                denom *= x[i] - x[j];
            }
        }
        let mut s = 0.0;
        for l in 0..4 {
            if l == i {
                continue;
            }
            let mut prod = 1.0;
            for j in 0..4 {
                if j != i && j != l {
                    prod *= t - x[j];
                }
            }
            s += prod;
        }
        w[i] = s / denom;
    }
    w
}

/// A cell `[lo, hi]` inside piece `piece`, between nodes `j` and `j+1`.
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub piece: usize,
    pub j: usize,
    pub lo: f64,
    pub hi: f64,
}

impl<S: Scalar> PiecewiseFn<S> {
    pub fn from_pieces(dim: usize, pieces: Vec<Piece<S>>) -> Self {
        assert!(!pieces.is_empty());
        for p in &pieces {
            assert!(p.nodes.len() >= 4 && p.nodes.len() == p.values.len());
            assert!(p.nodes.windows(2).all(|w| w[1] > w[0]), "nodes must increase");
        }
        PiecewiseFn { dim, pieces }
    }

    /// Sample `f(t, side)` on the grid's nodes merged with `breakpoints`.
    pub fn sample<F: Fn(f64, Side) -> DVector<S>>(grid: &GridSpec, breakpoints: &[f64], dim: usize, f: F) -> Self {
        let pieces = grid
            .piece_nodes(breakpoints)
            .into_iter()
            .map(|nodes| {
                let last = nodes.len() - 1;
                let values = nodes
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| f(t, if i == last { Side::Left } else { Side::Right }))
                    .collect();
                Piece { nodes, values }
            })
            .collect();
        PiecewiseFn { dim, pieces }
    }

    pub fn constant(grid: &GridSpec, c: DVector<S>) -> Self {
        let dim = c.len();
        Self::sample(grid, &[], dim, |_, _| c.clone())
    }

    pub fn zeros(grid: &GridSpec, dim: usize) -> Self {
        Self::constant(grid, DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pieces(&self) -> &[Piece<S>] {
        &self.pieces
    }

    pub fn a(&self) -> f64 {
        self.pieces[0].nodes[0]
    }

    pub fn b(&self) -> f64 {
        *self.pieces.last().unwrap().nodes.last().unwrap()
    }

    /// Interior boundaries between pieces.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.pieces[..self.pieces.len() - 1].iter().map(|p| *p.nodes.last().unwrap()).collect()
    }

    /// All nodes, with breakpoints listed once.
    pub fn nodes(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, p) in self.pieces.iter().enumerate() {
            let skip = if i == 0 { 0 } else { 1 };
            out.extend(p.nodes[skip..].iter().copied());
        }
        out
    }

    pub fn node_count(&self) -> usize {
        self.pieces.iter().map(|p| p.nodes.len()).sum::<usize>() - (self.pieces.len() - 1)
    }

    fn locate_piece(&self, t: f64, side: Side) -> usize {
        let np = self.pieces.len();
        let ends: Vec<f64> = self.pieces.iter().map(|p| *p.nodes.last().unwrap()).collect();
        let idx = match side {
            Side::Right => ends.partition_point(|&e| e <= t),
            Side::Left => ends.partition_point(|&e| e < t),
        };
        idx.min(np - 1)
    }

    fn stencil(p: &Piece<S>, t: f64) -> usize {
        let m = p.nodes.len() - 1;
        let j = p.nodes.partition_point(|&x| x <= t).saturating_sub(1).min(m - 1);
        j.saturating_sub(1).min(m - 3)
    }

    /// Evaluate within piece `pi` using the stencil of cell `j`.
    pub fn eval_cell(&self, pi: usize, j: usize, t: f64) -> DVector<S> {
        let p = &self.pieces[pi];
        let m = p.nodes.len() - 1;
        let s0 = j.saturating_sub(1).min(m - 3);
        let w = lagrange4(&p.nodes[s0..s0 + 4], t);
        let mut out = DVector::zeros(self.dim);
        for i in 0..4 {
            out.axpy(S::from_real(w[i]), &p.values[s0 + i], S::one());
        }
        out
    }

    pub fn deriv_cell(&self, pi: usize, j: usize, t: f64) -> DVector<S> {
        let p = &self.pieces[pi];
        let m = p.nodes.len() - 1;
        let s0 = j.saturating_sub(1).min(m - 3);
        let w = lagrange4_deriv(&p.nodes[s0..s0 + 4], t);
        let mut out = DVector::zeros(self.dim);
        for i in 0..4 {
            out.axpy(S::from_real(w[i]), &p.values[s0 + i], S::one());
        }
        out
    }

    /// Value at `t` (clamped to the domain); one-sided at breakpoints.
    pub fn value(&self, t: f64, side: Side) -> DVector<S> {
        let t = t.clamp(self.a(), self.b());
        let pi = self.locate_piece(t, side);
        let p = &self.pieces[pi];
        if t == p.nodes[0] {
            return p.values[0].clone();
        }
        if t == *p.nodes.last().unwrap() {
            return p.values.last().unwrap().clone();
        }
        let s0 = Self::stencil(p, t);
        let w = lagrange4(&p.nodes[s0..s0 + 4], t);
        let mut out = DVector::zeros(self.dim);
        for i in 0..4 {
            out.axpy(S::from_real(w[i]), &p.values[s0 + i], S::one());
        }
        out
    }

    /// Checked evaluation on the closed domain.
    pub fn eval(&self, t: f64, side: Side) -> Result<DVector<S>, EvalError> {
        let (a, b) = (self.a(), self.b());
        if !(t >= a && t <= b) {
            return Err(EvalError::OutOfDomain { t, a, b });
        }
        Ok(self.value(t, side))
    }

    /// Derivative of the interpolant.
    pub fn deriv(&self, t: f64, side: Side) -> DVector<S> {
        let t = t.clamp(self.a(), self.b());
        let pi = self.locate_piece(t, side);
        let p = &self.pieces[pi];
        let s0 = Self::stencil(p, t);
        let w = lagrange4_deriv(&p.nodes[s0..s0 + 4], t);
        let mut out = DVector::zeros(self.dim);
        for i in 0..4 {
            out.axpy(S::from_real(w[i]), &p.values[s0 + i], S::one());
        }
        out
    }

    /// Smooth cells covering [lo, hi], clipped to it.
    pub fn cells_in(&self, lo: f64, hi: f64) -> Vec<Cell> {
        let mut out = Vec::new();
        for (pi, p) in self.pieces.iter().enumerate() {
            if *p.nodes.last().unwrap() <= lo || p.nodes[0] >= hi {
                continue;
            }
            for j in 0..p.nodes.len() - 1 {
                let (x0, x1) = (p.nodes[j], p.nodes[j + 1]);
                let (c0, c1) = (x0.max(lo), x1.min(hi));
                if c1 > c0 {
                    out.push(Cell { piece: pi, j, lo: c0, hi: c1 });
                }
            }
        }
        out
    }

    pub fn cells(&self) -> Vec<Cell> {
        self.cells_in(self.a(), self.b())
    }

    /// Resample onto `grid` with extra breakpoints, reading through `self`.
    pub fn resample(&self, grid: &GridSpec, extra: &[f64]) -> Self {
        let mut bps = self.breakpoints();
        bps.extend_from_slice(extra);
        Self::sample(grid, &bps, self.dim, |t, side| self.value(t, side))
    }

    /// Σ cᵢ fᵢ on the union of breakpoints over `grid`.
    pub fn lincomb(grid: &GridSpec, terms: &[(S, &PiecewiseFn<S>)]) -> Self {
        let dim = terms[0].1.dim;
        let mut bps = Vec::new();
        for (_, f) in terms {
            bps.extend(f.breakpoints());
        }
        Self::sample(grid, &bps, dim, |t, side| {
            let mut v = DVector::zeros(dim);
            for (c, f) in terms {
                v.axpy(*c, &f.value(t, side), S::one());
            }
            v
        })
    }

    /// Pointwise map of node values; same nodes and breakpoints.
    pub fn map_values<F: Fn(&DVector<S>) -> DVector<S>>(&self, f: F) -> Self {
        let pieces = self
            .pieces
            .iter()
            .map(|p| Piece { nodes: p.nodes.clone(), values: p.values.iter().map(&f).collect() })
            .collect();
        let dim = self.pieces[0].values.first().map(|v| f(v).len()).unwrap_or(self.dim);
        PiecewiseFn { dim, pieces }
    }

    pub fn scale(&self, c: S) -> Self {
        self.map_values(|v| v * c)
    }

    /// Largest node-value norm.
    pub fn sup_norm(&self) -> f64 {
        self.pieces.iter().flat_map(|p| p.values.iter()).map(|v| v.norm()).fold(0.0, f64::max)
    }
}

impl PiecewiseFn<f64> {
    pub fn to_complex(&self) -> PiecewiseFn<Complex64> {
        let pieces = self
            .pieces
            .iter()
            .map(|p| Piece {
                nodes: p.nodes.clone(),
                values: p.values.iter().map(|v| v.map(|x| Complex64::new(x, 0.0))).collect(),
            })
            .collect();
        PiecewiseFn { dim: self.dim, pieces }
    }
}

/// Initial data (φ on (−2T, 0), x = u(0+)).
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryFunction {
    pub phi: PiecewiseFn<f64>,
    pub x_right: DVector<f64>,
}

impl HistoryFunction {
    pub fn new(phi: PiecewiseFn<f64>, x_right: DVector<f64>) -> Self {
        assert_eq!(phi.dim(), x_right.len());
        HistoryFunction { phi, x_right }
    }

    /// Constant φ ≡ c with trace x.
    pub fn constant(t: f64, n_per_t: usize, c: DVector<f64>, x: DVector<f64>) -> Self {
        HistoryFunction::new(PiecewiseFn::constant(&GridSpec::history(t, n_per_t), c), x)
    }

    pub fn t(&self) -> f64 {
        -0.5 * self.phi.a()
    }

    pub fn dim(&self) -> usize {
        self.x_right.len()
    }

    /// One-sided history value; errors outside [−2T, 0).
    pub fn eval_history(&self, t: f64, side: Side) -> Result<DVector<f64>, EvalError> {
        let (a, b) = (self.phi.a(), self.phi.b());
        if !(t >= a && t < b) {
            return Err(EvalError::OutOfDomain { t, a, b });
        }
        Ok(self.phi.value(t, side))
    }
}

/// Numerical settings shared across modules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Numerics {
    /// Grid cells per length-T window.
    pub n_per_t: usize,
    pub tol_hit: f64,
    pub tol_orbit: f64,
    pub tol_transversal: f64,
    pub lambda_min: f64,
    pub margin: f64,
    pub max_switches: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            n_per_t: 256,
            tol_hit: 1e-12,
            tol_orbit: 1e-10,
            tol_transversal: 1e-8,
            lambda_min: 0.05,
            margin: 1e-3,
            max_switches: 1_000_000,
        }
    }
}

/// A chunk of a trajectory integrated from one anchor (φ⁽ⁱ⁾, x⁽ⁱ⁾).
#[derive(Debug, Clone)]
pub struct Chunk {
    pub t0: f64,
    pub t1: f64,
    pub solution: crate::integrator::BranchSolution,
}

/// Maximal interval on which the relay keeps one value.
#[derive(Debug, Clone)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub relay: i8,
    pub chunks: Vec<Chunk>,
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

/// Solution of the full hysteresis-delay system on [0, horizon].
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub params: SystemParams,
    pub segments: Vec<Segment>,
    pub switching_times: Vec<f64>,
    pub history: HistoryFunction,
    pub horizon: f64,
    pub grazing: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s1_raw() -> RawParams {
        let t = 3f64.ln();
        RawParams {
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
        }
    }

    #[test]
    fn accepts_s1() {
        assert!(validate_params(&s1_raw()).is_ok());
    }

    #[test]
    fn rejects_large_p() {
        let mut r = s1_raw();
        r.p = 2.5;
        let e = validate_params(&r).unwrap_err();
        assert_eq!(e.0, vec![Violation::PHigh { bound: 2.0 }]);
        assert!(e.to_string().contains("p ≥ min{1/s,1/(1−s)}=2"));
    }

    #[test]
    fn rejects_zero_m0() {
        let mut r = s1_raw();
        r.M = vec![0.0];
        let e = validate_params(&r).unwrap_err();
        assert_eq!(e.0, vec![Violation::M0Zero]);
        assert!(e.to_string().contains("m₀=0"));
    }

    #[test]
    fn lists_every_violation() {
        let mut r = s1_raw();
        r.M = vec![0.0];
        r.alpha = 2.0;
        r.sigma = Some(10.0);
        let e = validate_params(&r).unwrap_err();
        assert_eq!(e.0.len(), 3);
    }

    #[test]
    fn cubic_data_is_reproduced_off_grid() {
        let g = GridSpec::new(-2.0, 0.0, 16);
        let f = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t - 0.3 * t * t * t;
        let pf = PiecewiseFn::sample(&g, &[-0.77], 1, |t, _| DVector::from_element(1, f(t)));
        for &t in &[-1.99, -1.234, -0.77, -0.5001, -0.01] {
            assert!((pf.value(t, Side::Left)[0] - f(t)).abs() < 1e-13);
        }
    }

    #[test]
    fn one_sided_values_at_breakpoints() {
        let g = GridSpec::new(-2.0, 0.0, 8);
        let pf = PiecewiseFn::sample(&g, &[-1.0], 1, |t, side| {
            let v = if t < -1.0 || (t == -1.0 && side == Side::Left) { 1.0 } else { -1.0 };
            DVector::from_element(1, v)
        });
        assert_eq!(pf.value(-1.0, Side::Left)[0], 1.0);
        assert_eq!(pf.value(-1.0, Side::Right)[0], -1.0);
        assert_eq!(pf.breakpoints(), vec![-1.0]);
    }

    #[test]
    fn tiny_pieces_get_four_nodes() {
        let g = GridSpec::new(0.0, 1.0, 10);
        let pf: PiecewiseFn<f64> = PiecewiseFn::sample(&g, &[0.5, 0.5 + 1e-9], 1, |t, _| DVector::from_element(1, t));
        assert_eq!(pf.pieces().len(), 3);
        assert_eq!(pf.pieces()[1].nodes.len(), 4);
        assert!((pf.value(0.5 + 5e-10, Side::Left)[0] - (0.5 + 5e-10)).abs() < 1e-15);
    }

    #[test]
    fn history_eval_rejects_zero() {
        let h = HistoryFunction::constant(1.0, 8, DVector::from_element(1, 2.0), DVector::from_element(1, 0.0));
        assert!(h.eval_history(0.0, Side::Left).is_err());
        assert_eq!(h.eval_history(-1.3, Side::Left).unwrap()[0], 2.0);
    }
}
