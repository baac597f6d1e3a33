//! Spectrum of L_Π through the split L̃_Π = F + 𝒱 in the coordinates
//! U[ν] = (ν(θ−T), ν(θ)) on (−T, 0): Volterra inverses, the finite pencil
//! M(λ) = I − F(λI − 𝒱)⁻¹, its roots, and a dense discretization used as a
//! cross-check.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{GridSpec, Piece, PiecewiseFn, Scalar, Side, SystemParams};
use crate::linalg::{expm, to_complex, to_complex_vec, ExpCache};
use crate::linearization::{volterra_march, LinearizedMaps};
use crate::maps::{lift_dr, project_e};
use crate::norms::{composite_norm, NormSettings};

type C = Complex64;

fn c(x: f64) -> C {
    C::new(x, 0.0)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectrumError {
    #[error("μ = 0 has no Volterra inverse")]
    ZeroMu,
    #[error("λ = 0 is outside the pencil's domain")]
    ZeroLambda,
    #[error("argument-principle count {count} but {found} roots located")]
    CountMismatch { count: i64, found: usize },
}

/// U[ν] = (ν(θ−T), ν(θ)) on (−T, 0), `cells` cells per half.
pub fn u_transform<S: Scalar>(nu: &PiecewiseFn<S>, cells: usize) -> (PiecewiseFn<S>, PiecewiseFn<S>) {
    let t = -0.5 * nu.a();
    let g = GridSpec::new(-t, 0.0, cells);
    let bps = nu.breakpoints();
    let left: Vec<f64> = bps.iter().filter(|&&b| b < -t).map(|b| b + t).collect();
    let right: Vec<f64> = bps.iter().filter(|&&b| b > -t).copied().collect();
    let nu1 = PiecewiseFn::sample(&g, &left, nu.dim(), |th, side| nu.value(th - t, side));
    let nu2 = PiecewiseFn::sample(&g, &right, nu.dim(), |th, side| nu.value(th, side));
    (nu1, nu2)
}

/// U⁻¹(ν₁, ν₂) on (−2T, 0) with a breakpoint at −T.
pub fn u_inverse<S: Scalar>(nu1: &PiecewiseFn<S>, nu2: &PiecewiseFn<S>, grid: &GridSpec) -> PiecewiseFn<S> {
    let t = -nu1.a();
    let mut bps = vec![-t];
    bps.extend(nu1.breakpoints().iter().map(|b| b - t));
    bps.extend(nu2.breakpoints());
    PiecewiseFn::sample(grid, &bps, nu1.dim(), |th, side| {
        if th < -t || (th == -t && side == Side::Left) {
            nu1.value(th + t, side)
        } else {
            nu2.value(th, side)
        }
    })
}

/// V ν₁(θ) = ∫_{−T}^θ e^{B(ξ−θ)} A ν₁(ξ) dξ on (−T, 0), and its shifted inverses.
#[derive(Debug, Clone)]
pub struct VolterraOp {
    pub b: DMatrix<f64>,
    pub a: DMatrix<f64>,
    decay: ExpCache<f64>,
}

/// Rebuild `f`'s piece structure with new node values.
fn with_values<S: Scalar>(f: &PiecewiseFn<S>, vals: &[DVector<S>]) -> PiecewiseFn<S> {
    let mut k = 0;
    let mut pieces = Vec::with_capacity(f.pieces().len());
    for (pi, p) in f.pieces().iter().enumerate() {
        if pi > 0 {
            k -= 1;
        }
        let values = vals[k..k + p.nodes.len()].to_vec();
        k += p.nodes.len();
        pieces.push(Piece { nodes: p.nodes.clone(), values });
    }
    PiecewiseFn::from_pieces(f.dim(), pieces)
}

/// Σ cᵢfᵢ for functions sharing one node layout.
fn same_nodes_lincomb(terms: &[(C, &PiecewiseFn<C>)]) -> PiecewiseFn<C> {
    let first = terms[0].1;
    let pieces = (0..first.pieces().len())
        .map(|pi| {
            let nodes = first.pieces()[pi].nodes.clone();
            let values = (0..nodes.len())
                .map(|j| terms.iter().fold(DVector::zeros(first.dim()), |acc, (c, f)| acc + &f.pieces()[pi].values[j] * *c))
                .collect();
            Piece { nodes, values }
        })
        .collect();
    PiecewiseFn::from_pieces(first.dim(), pieces)
}

impl VolterraOp {
    pub fn new(b: &DMatrix<f64>, a: &DMatrix<f64>) -> Self {
        VolterraOp { b: b.clone(), a: a.clone(), decay: ExpCache::new(-b) }
    }

    /// V ν₁ on the nodes of ν₁ (continuous across ν₁'s breakpoints).
    pub fn apply<S: Scalar>(&self, nu1: &PiecewiseFn<S>) -> PiecewiseFn<S> {
        let decay = |h: f64| self.decay.get(h).map(S::from_real);
        let a = self.a.map(S::from_real);
        let nodes = nu1.nodes();
        let v = volterra_march(&decay, &a, nu1, 0.0, &DVector::zeros(nu1.dim()), &nodes);
        let first = nu1.pieces().iter().map(|p| p.nodes.len()).collect::<Vec<_>>();
        debug_assert_eq!(first.iter().sum::<usize>() - (first.len() - 1), v.len());
        with_values(nu1, &v)
    }

    /// (μI − V)⁻¹ρ on ρ's nodes.
    ///
    /// The closed form (ρ + w)/μ, w' = −(B − A/μ)w + Aρ/μ, w(−T) = 0, is
    /// followed by defect correction against `apply`, so the result inverts
    /// the discrete operator; for small |μ| the inverse amplifies by about
    /// e^{T‖A‖/|μ|} and the interpolation error of the closed form alone shows.
    pub fn inverse(&self, mu: C, rho: &PiecewiseFn<C>) -> Result<PiecewiseFn<C>, SpectrumError> {
        if mu == c(0.0) {
            return Err(SpectrumError::ZeroMu);
        }
        let defect = |x: &PiecewiseFn<C>| {
            let vx = self.apply(x);
            same_nodes_lincomb(&[(c(1.0), rho), (-mu, x), (c(1.0), &vx)])
        };
        let target = 1e-15 * rho.sup_norm();
        let mut x = self.closed_form_inverse(mu, rho);
        let mut d = defect(&x);
        let mut size = d.sup_norm();
        for _ in 0..4 {
            if size <= target {
                break;
            }
            let next = same_nodes_lincomb(&[(c(1.0), &x), (c(1.0), &self.closed_form_inverse(mu, &d))]);
            let nd = defect(&next);
            let nsize = nd.sup_norm();
            if !(nsize < size) {
                break;
            }
            (x, d, size) = (next, nd, nsize);
        }
        Ok(x)
    }

    fn closed_form_inverse(&self, mu: C, rho: &PiecewiseFn<C>) -> PiecewiseFn<C> {
        let a_mu = to_complex(&self.a) / mu;
        let cmat = to_complex(&self.b) - &a_mu;
        let cache = ExpCache::new(-cmat);
        let decay = |h: f64| cache.get(h);
        let nodes = rho.nodes();
        let w = volterra_march(&decay, &a_mu, rho, 0.0, &DVector::zeros(rho.dim()), &nodes);
        let mut k = 0;
        let mut pieces = Vec::new();
        for (pi, p) in rho.pieces().iter().enumerate() {
            if pi > 0 {
                k -= 1;
            }
            let values = p.values.iter().enumerate().map(|(i, r)| (r + &w[k + i]) / mu).collect();
            k += p.nodes.len();
            pieces.push(Piece { nodes: p.nodes.clone(), values });
        }
        PiecewiseFn::from_pieces(rho.dim(), pieces)
    }
}

/// 𝒱(ν₁, ν₂, z) = (ν₂, Vν₁, 0).
pub type Triple = (PiecewiseFn<C>, PiecewiseFn<C>, DVector<C>);

/// (λI − 𝒱)⁻¹(ρ₁, ρ₂, q): ν₁ = (λ²I − V)⁻¹[ρ₂ + λρ₁], ν₂ = λν₁ − ρ₁, z = q/λ.
pub fn resolve_calv(v: &VolterraOp, lambda: C, rho: &Triple) -> Result<Triple, SpectrumError> {
    if lambda == c(0.0) {
        return Err(SpectrumError::ZeroLambda);
    }
    let (r1, r2, q) = rho;
    let g = r2.lincomb_like(&[(c(1.0), r2), (lambda, r1)]);
    let nu1 = v.inverse(lambda * lambda, &g)?;
    let nu2 = nu1.lincomb_like(&[(lambda, &nu1), (c(-1.0), r1)]);
    Ok((nu1, nu2, q / lambda))
}

/// (λI − 𝒱)(ν₁, ν₂, z).
pub fn apply_shifted_calv(v: &VolterraOp, lambda: C, x: &Triple) -> Triple {
    let (n1, n2, z) = x;
    let vn1 = v.apply(n1);
    (n1.lincomb_like(&[(lambda, n1), (c(-1.0), n2)]), n2.lincomb_like(&[(lambda, n2), (c(-1.0), &vn1)]), z * lambda)
}

impl<S: Scalar> PiecewiseFn<S> {
    /// Σ cᵢ fᵢ on the grid implied by `self`'s uniform spacing and domain.
    fn lincomb_like(&self, terms: &[(S, &PiecewiseFn<S>)]) -> PiecewiseFn<S> {
        let cells = self.pieces().iter().map(|p| p.nodes.len() - 1).sum::<usize>().max(1);
        let h_guess = (self.b() - self.a()) / cells as f64;
        let grid = GridSpec::new(self.a(), self.b(), ((self.b() - self.a()) / h_guess).round() as usize);
        PiecewiseFn::lincomb(&grid, terms)
    }
}

/// One rank-one direction of F.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    /// (φ'_α(θ), φ'_α(θ−T), E^ℝ φ'_α(−T−)) with coefficient −M[(Vν₁)(0) + e^{−BT}DR z]/d.
    Phi,
    /// (0, e^{−B(θ+T)} DR eᵢ, E^ℝ e^{−BT} DR eᵢ) with coefficient zᵢ.
    Z(usize),
    /// (0, 0, eᵢ) with coefficient ((Vν₁)(0))ᵢ₊₁.
    W(usize),
}

/// F = Σ_k b_k ⊗ ℓ_k on Range(F), with closed-form resolvent actions.
#[derive(Debug, Clone)]
pub struct PencilModel {
    pub kinds: Vec<BasisKind>,
    pub pruned: Vec<String>,
    params: SystemParams,
    n: usize,
    t: f64,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    k_mat: DMatrix<f64>,
    m: DVector<f64>,
    d: f64,
    e_bt: DMatrix<f64>,
    dr: DMatrix<f64>,
    p_plus: DVector<f64>,
    p_minus: DVector<f64>,
    e_kt: DMatrix<f64>,
}

impl PencilModel {
    pub fn dim(&self) -> usize {
        self.kinds.len()
    }

    /// ρ₂ + λρ₁ = e^{−G(θ+T)} v for a basis vector, as (G, v).
    fn source(&self, kind: BasisKind, lambda: C) -> Option<(&DMatrix<f64>, DVector<C>)> {
        match kind {
            BasisKind::Phi => Some((&self.k_mat, to_complex_vec(&self.p_plus) + to_complex_vec(&self.p_minus) * lambda)),
            BasisKind::Z(i) => Some((&self.b, to_complex_vec(&self.dr.column(i).into_owned()))),
            BasisKind::W(_) => None,
        }
    }

    fn q(&self, kind: BasisKind) -> DVector<f64> {
        let n1 = self.n - 1;
        match kind {
            BasisKind::Phi => project_e(&(&self.e_kt * &self.p_plus)),
            BasisKind::Z(i) => project_e(&(&self.e_bt * self.dr.column(i))),
            BasisKind::W(i) => DVector::from_fn(n1, |r, _| if r == i { 1.0 } else { 0.0 }),
        }
    }

    /// exp(s·[[−C, A/μ], [0, −G]]), C = B − A/μ.
    fn block_exp(&self, g: &DMatrix<f64>, mu: C, s: f64) -> DMatrix<C> {
        let n = self.n;
        let a_mu = to_complex(&self.a) / mu;
        let mut gen = DMatrix::zeros(2 * n, 2 * n);
        gen.view_mut((0, 0), (n, n)).copy_from(&(-(to_complex(&self.b) - &a_mu)));
        gen.view_mut((0, n), (n, n)).copy_from(&a_mu);
        gen.view_mut((n, n), (n, n)).copy_from(&(-to_complex(g)));
        expm(&(gen * c(s)))
    }

    /// w(θ) = (V ν₁)(θ) for ν₁ = (λ²I − V)⁻¹[e^{−G(·+T)} v], at θ = −T + s.
    fn w_at(&self, g: &DMatrix<f64>, v: &DVector<C>, mu: C, s: f64) -> DVector<C> {
        let n = self.n;
        let e = self.block_exp(g, mu, s);
        e.view((0, n), (n, n)) * v
    }

    /// Ψ(λ)_{kj} = ℓ_k((λI − 𝒱)⁻¹ b_j).
    pub fn psi(&self, lambda: C) -> Result<DMatrix<C>, SpectrumError> {
        if lambda == c(0.0) {
            return Err(SpectrumError::ZeroLambda);
        }
        let mu = lambda * lambda;
        let dim = self.dim();
        let n = self.n;
        let mut psi = DMatrix::zeros(dim, dim);
        let mut cache: Vec<(*const DMatrix<f64>, DMatrix<C>)> = Vec::new();
        for (j, &kind) in self.kinds.iter().enumerate() {
            let w0 = match self.source(kind, lambda) {
                Some((g, v)) => {
                    let key = g as *const _;
                    let top = match cache.iter().find(|(k, _)| *k == key) {
                        Some((_, m)) => m.clone(),
                        None => {
                            let e = self.block_exp(g, mu, self.t);
                            let m = e.view((0, n), (n, n)).into_owned();
                            cache.push((key, m.clone()));
                            m
                        }
                    };
                    top * v
                }
                None => DVector::zeros(n),
            };
            let zq = to_complex_vec(&self.q(kind)) / lambda;
            for (k, &row) in self.kinds.iter().enumerate() {
                psi[(k, j)] = match row {
                    BasisKind::Phi => {
                        let drz = to_complex(&self.dr) * &zq;
                        let tot = &w0 + to_complex(&self.e_bt) * drz;
                        -to_complex_vec(&self.m).dot(&tot) / c(self.d)
                    }
                    BasisKind::Z(i) => zq[i],
                    BasisKind::W(i) => w0[i + 1],
                };
            }
        }
        Ok(psi)
    }

    /// M(λ) = I − Ψ(λ).
    pub fn pencil_matrix(&self, lambda: C) -> Result<DMatrix<C>, SpectrumError> {
        Ok(DMatrix::identity(self.dim(), self.dim()) - self.psi(lambda)?)
    }

    pub fn det(&self, lambda: C) -> Result<C, SpectrumError> {
        Ok(self.pencil_matrix(lambda)?.determinant())
    }

    /// The basis vector b_j in U coordinates on a grid of `cells` cells per half.
    pub fn basis_vector(&self, kind: BasisKind, cells: usize) -> Triple {
        let t = self.t;
        let g = GridSpec::new(-t, 0.0, cells);
        let n = self.n;
        let ek = ExpCache::new(-&self.k_mat);
        let eb = ExpCache::new(-&self.b);
        let (r1, r2): (PiecewiseFn<C>, PiecewiseFn<C>) = match kind {
            BasisKind::Phi => (
                PiecewiseFn::sample(&g, &[], n, |th, _| to_complex_vec(&(ek.get(th + t) * &self.p_minus))),
                PiecewiseFn::sample(&g, &[], n, |th, _| to_complex_vec(&(ek.get(th + t) * &self.p_plus))),
            ),
            BasisKind::Z(i) => (
                PiecewiseFn::zeros(&g, n),
                PiecewiseFn::sample(&g, &[], n, |th, _| to_complex_vec(&(eb.get(th + t) * self.dr.column(i)))),
            ),
            BasisKind::W(_) => (PiecewiseFn::zeros(&g, n), PiecewiseFn::zeros(&g, n)),
        };
        (r1, r2, to_complex_vec(&self.q(kind)))
    }

    /// (λI − 𝒱)⁻¹ Σ c_j b_j in closed form, sampled on `cells` cells per half.
    pub fn resolvent_of_combination(&self, lambda: C, coeffs: &DVector<C>, cells: usize) -> Triple {
        let t = self.t;
        let n = self.n;
        let mu = lambda * lambda;
        let g = GridSpec::new(-t, 0.0, cells);
        let ek = ExpCache::new(-&self.k_mat);
        let eb = ExpCache::new(-&self.b);
        let mut q = DVector::zeros(n - 1);
        for (j, &kind) in self.kinds.iter().enumerate() {
            q += to_complex_vec(&self.q(kind)) * coeffs[j];
        }
        let rho1 = |th: f64| -> DVector<C> {
            let mut acc = DVector::zeros(n);
            for (j, &kind) in self.kinds.iter().enumerate() {
                if kind == BasisKind::Phi {
                    acc += to_complex_vec(&(ek.get(th + t) * &self.p_minus)) * coeffs[j];
                }
            }
            acc
        };
        let nu1 = PiecewiseFn::sample(&g, &[], n, |th, _| {
            let mut acc = DVector::zeros(n);
            for (j, &kind) in self.kinds.iter().enumerate() {
                if let Some((gm, v)) = self.source(kind, lambda) {
                    let decay = if kind == BasisKind::Phi { ek.get(th + t) } else { eb.get(th + t) };
                    let src = to_complex(&decay) * &v;
                    acc += (src + self.w_at(gm, &v, mu, th + t)) * (coeffs[j] / mu);
                }
            }
            acc
        });
        let nu2 = PiecewiseFn::sample(&g, &[], n, |th, side| nu1.value(th, side) * lambda - rho1(th));
        (nu1, nu2, q / lambda)
    }

    /// Σ_k ℓ_k(x) b_k + 𝒱x for x in U coordinates, with ℓ evaluated by quadrature.
    pub fn model_apply(&self, v: &VolterraOp, x: &Triple, cells: usize) -> Triple {
        let (n1, n2, z) = x;
        let vn1 = v.apply(n1);
        let w0 = vn1.value(0.0, Side::Left);
        let drz = lift_dr(z, &self.params);
        let bracket = to_complex_vec(&self.m).dot(&(&w0 + to_complex(&self.e_bt) * drz));
        let g = GridSpec::new(-self.t, 0.0, cells);
        let mut out1 = PiecewiseFn::lincomb(&g, &[(c(1.0), n2)]);
        let mut out2 = PiecewiseFn::lincomb(&g, &[(c(1.0), &vn1)]);
        let mut out3 = DVector::zeros(self.n - 1);
        for &kind in &self.kinds {
            let coef = match kind {
                BasisKind::Phi => -bracket / c(self.d),
                BasisKind::Z(i) => z[i],
                BasisKind::W(i) => w0[i + 1],
            };
            let (b1, b2, b3) = self.basis_vector(kind, cells);
            out1 = PiecewiseFn::lincomb(&g, &[(c(1.0), &out1), (coef, &b1)]);
            out2 = PiecewiseFn::lincomb(&g, &[(c(1.0), &out2), (coef, &b2)]);
            out3 += b3 * coef;
        }
        (out1, out2, out3)
    }
}

/// Assemble F's rank-one directions at the orbit of `lin`.
pub fn build_pencil(lin: &LinearizedMaps) -> PencilModel {
    let p = &lin.params;
    let n = p.n;
    let t = lin.t();
    let orbit = &lin.orbit;
    let dr = DMatrix::from_fn(n, n - 1, |i, j| {
        let e = DVector::from_fn(n - 1, |r, _| if r == j { 1.0 } else { 0.0 });
        lift_dr(&e, p)[i]
    });
    let mut kinds = vec![BasisKind::Phi];
    let mut pruned = Vec::new();
    kinds.extend((0..n - 1).map(BasisKind::Z));
    if p.a.iter().all(|&x| x == 0.0) {
        if n > 1 {
            pruned.push("W directions: A = 0 makes (Vν₁)(0) vanish".to_string());
        }
    } else {
        kinds.extend((0..n - 1).map(BasisKind::W));
    }
    PencilModel {
        kinds,
        pruned,
        params: p.clone(),
        n,
        t,
        a: p.a.clone(),
        b: p.b.clone(),
        k_mat: orbit.k_mat.clone(),
        m: p.m.clone(),
        d: lin.d,
        e_bt: lin.e_bt.clone(),
        dr,
        p_plus: orbit.du_per(0.0, Side::Right),
        p_minus: orbit.du_per(t, Side::Right),
        e_kt: expm(&(-&orbit.k_mat * t)),
    }
}

/// Dense matrix of L_Π on the node values of the canonical grid (both sides at −T) ⊕ ℝ^{N−1}.
pub fn dense_matrix(lin: &LinearizedMaps) -> DMatrix<f64> {
    let grid = lin.grid();
    let t = lin.t();
    let n = lin.n();
    let n1 = n - 1;
    let sets = grid.piece_nodes(&[-t]);
    let per_piece: Vec<usize> = sets.iter().map(|s| s.len()).collect();
    let nodes_total: usize = per_piece.iter().sum();
    let dim = nodes_total * n + n1;
    let unit = |j: usize| -> (PiecewiseFn<f64>, DVector<f64>) {
        let mut k = 0;
        let pieces = sets
            .iter()
            .map(|nodes| {
                let values = nodes
                    .iter()
                    .map(|_| {
                        let v = DVector::from_fn(n, |r, _| if k * n + r == j { 1.0 } else { 0.0 });
                        k += 1;
                        v
                    })
                    .collect();
                Piece { nodes: nodes.clone(), values }
            })
            .collect();
        let z = DVector::from_fn(n1, |r, _| if nodes_total * n + r == j { 1.0 } else { 0.0 });
        (PiecewiseFn::from_pieces(n, pieces), z)
    };
    let cols: Vec<DVector<f64>> = (0..dim)
        .into_par_iter()
        .map(|j| {
            let (nu, z) = unit(j);
            let (out, zo) = lin.apply_lpi(&nu, &z);
            let mut col = DVector::zeros(dim);
            let mut k = 0;
            assert_eq!(out.pieces().len(), sets.len(), "output pieces follow the −T split");
            for p in out.pieces() {
                for v in &p.values {
                    col.rows_mut(k * n, n).copy_from(v);
                    k += 1;
                }
            }
            col.rows_mut(nodes_total * n, n1).copy_from(&zo);
            col
        })
        .collect();
    DMatrix::from_columns(&cols)
}

pub fn dense_eigenvalues(lin: &LinearizedMaps) -> Vec<C> {
    dense_matrix(lin).complex_eigenvalues().iter().copied().collect()
}

/// Search settings for the nonzero spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub lambda_min: f64,
    /// Nodes per rectangle side before adaptive refinement.
    pub nodes_per_side: usize,
    pub max_depth: usize,
    pub newton_tol: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { lambda_min: 0.05, nodes_per_side: 64, max_depth: 24, newton_tol: 1e-13 }
    }
}

/// A root of det M(λ) with its lifted eigenfunction.
#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub lambda: C,
    pub kernel: DVector<C>,
}

/// Roots in λ_min ≤ |λ| ≤ radius and the argument-principle count of that annulus.
#[derive(Debug, Clone)]
pub struct EigenSearch {
    pub pairs: Vec<Eigenpair>,
    pub count: i64,
    pub radius: f64,
}

fn phase_step(a: C, b: C) -> f64 {
    (b / a).arg()
}

/// Net change of arg f along a segment in ζ = ln λ, refining until steps are below π/4.
fn arg_change(f: &dyn Fn(C) -> C, z0: C, z1: C, nodes: usize, depth: usize) -> f64 {
    let pts: Vec<C> = (0..=nodes).map(|i| z0 + (z1 - z0) * (i as f64 / nodes as f64)).collect();
    let vals: Vec<C> = pts.iter().map(|&z| f(z)).collect();
    let mut total = 0.0;
    for i in 0..nodes {
        total += refine_arg(f, pts[i], pts[i + 1], vals[i], vals[i + 1], depth);
    }
    total
}

fn refine_arg(f: &dyn Fn(C) -> C, za: C, zb: C, fa: C, fb: C, depth: usize) -> f64 {
    let quarter = std::f64::consts::FRAC_PI_4;
    let d = phase_step(fa, fb);
    let zm = 0.5 * (za + zb);
    let fm = f(zm);
    let (d1, d2) = (phase_step(fa, fm), phase_step(fm, fb));
    // ln f must change little in modulus and phase, and the midpoint must agree
    let resolved = d.abs() < quarter
        && (fb.norm() / fa.norm()).ln().abs() < 1.0
        && d1.abs() < quarter
        && d2.abs() < quarter
        && (d1 + d2 - d).abs() < 1e-9;
    if resolved || depth == 0 {
        return d1 + d2;
    }
    refine_arg(f, za, zm, fa, fm, depth - 1) + refine_arg(f, zm, zb, fm, fb, depth - 1)
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Rect {
    /// Winding number of f around the rectangle (counter-clockwise). `rate` bounds
    /// |d ln f/dζ| on the rectangle so the initial sampling cannot skip whole turns.
    fn count(&self, f: &dyn Fn(C) -> C, nodes: usize, rate: f64) -> f64 {
        let corners = [C::new(self.x0, self.y0), C::new(self.x1, self.y0), C::new(self.x1, self.y1), C::new(self.x0, self.y1)];
        let mut total = 0.0;
        for i in 0..4 {
            let len = (corners[(i + 1) % 4] - corners[i]).norm();
            let n = nodes.max((len * rate / 0.5).ceil() as usize);
            total += arg_change(f, corners[i], corners[(i + 1) % 4], n, 30);
        }
        total / (2.0 * std::f64::consts::PI)
    }

    /// Count with node doubling until two successive resolutions agree.
    fn stable_count(&self, f: &dyn Fn(C) -> C, nodes: usize, rate: f64) -> i64 {
        let mut n = nodes;
        let mut prev = self.count(f, n, rate);
        while n < (1 << 16) {
            n *= 2;
            let next = self.count(f, n, rate);
            if (next - prev).abs() < 0.25 && (next - next.round()).abs() < 0.25 {
                return next.round() as i64;
            }
            prev = next;
        }
        prev.round() as i64
    }

    fn contains(&self, z: C) -> bool {
        z.re >= self.x0 && z.re <= self.x1 && z.im >= self.y0 && z.im <= self.y1
    }
}

impl PencilModel {
    /// Smallest radius beyond which ‖Ψ(λ)‖ < 1/2 on sampled circles, so no root lies outside.
    pub fn outer_radius(&self) -> f64 {
        let mut r = 2.0;
        loop {
            let worst = (0..64)
                .map(|i| {
                    let lam = C::from_polar(r, 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / 64.0);
                    self.psi(lam).map(|m| m.norm()).unwrap_or(f64::INFINITY)
                })
                .fold(0.0, f64::max);
            if worst < 0.5 || r > 1e6 {
                return r;
            }
            r *= 2.0;
        }
    }

    /// Rough bound on |d ln det M(e^ζ)/dζ| for |λ| ≥ λ_min, led by the e^{AT/λ²} factor.
    fn log_rate(&self, lambda_min: f64) -> f64 {
        let t = self.t;
        2.0 * self.a.norm() * t / (lambda_min * lambda_min) + t * (self.b.norm() + self.k_mat.norm()) + self.dim() as f64
    }

    fn newton(&self, z0: C, tol: f64) -> Option<C> {
        // Newton on det M(e^ζ) in the log coordinate
        let f = |z: C| self.det(z.exp()).unwrap_or(c(f64::NAN));
        let mut z = z0;
        for _ in 0..60 {
            let h = 1e-7 * (1.0 + z.norm());
            let fz = f(z);
            let df = (f(z + h) - f(z - h)) / (2.0 * h);
            if !fz.is_finite() || df.norm() == 0.0 {
                return None;
            }
            let step = fz / df;
            z -= step;
            if step.norm() < tol {
                return Some(z);
            }
        }
        None
    }

    /// Roots of det M(λ) with λ_min ≤ |λ| ≤ outer radius.
    pub fn find_eigenvalues(&self, opts: &SearchOptions) -> Result<EigenSearch, SpectrumError> {
        let radius = self.outer_radius();
        let f = |z: C| self.det(z.exp()).unwrap_or(c(f64::NAN));
        let pi = std::f64::consts::PI;
        // shift the cut off the real axis so that real roots are interior
        let full = Rect { x0: opts.lambda_min.ln(), x1: radius.ln(), y0: -pi + 1e-3, y1: pi + 1e-3 };
        let rate = self.log_rate(opts.lambda_min);
        let count = full.stable_count(&f, opts.nodes_per_side, rate);
        let mut roots: Vec<C> = Vec::new();
        let mut stack = vec![(full, count, 0usize)];
        while let Some((r, k, depth)) = stack.pop() {
            if k <= 0 {
                continue;
            }
            let w = r.x1 - r.x0;
            let h = r.y1 - r.y0;
            if k == 1 || depth >= opts.max_depth {
                let centre = C::new(0.5 * (r.x0 + r.x1), 0.5 * (r.y0 + r.y1));
                if let Some(z) = self.newton(centre, opts.newton_tol) {
                    if r.contains(z) && !roots.iter().any(|q| (q - z).norm() < 1e-8) {
                        roots.push(z);
                        if k == 1 {
                            continue;
                        }
                    }
                }
                if depth >= opts.max_depth {
                    continue;
                }
            }
            let halves = if w >= h {
                let xm = 0.5 * (r.x0 + r.x1);
                [Rect { x1: xm, ..r }, Rect { x0: xm, ..r }]
            } else {
                let ym = 0.5 * (r.y0 + r.y1);
                [Rect { y1: ym, ..r }, Rect { y0: ym, ..r }]
            };
            for q in halves {
                let kq = q.stable_count(&f, 16, rate);
                stack.push((q, kq, depth + 1));
            }
        }
        let mut pairs = Vec::new();
        for z in &roots {
            let lambda = z.exp();
            let m = self.pencil_matrix(lambda)?;
            pairs.push(Eigenpair { lambda, kernel: kernel_vector(&m) });
        }
        pairs.sort_by(|a, b| b.lambda.norm().partial_cmp(&a.lambda.norm()).unwrap());
        if pairs.len() as i64 != count {
            return Err(SpectrumError::CountMismatch { count, found: pairs.len() });
        }
        Ok(EigenSearch { pairs, count, radius })
    }

    /// (ν, z) = U⁻¹(λI − 𝒱)⁻¹ Σ c_j b_j for a kernel vector c of M(λ).
    pub fn eigenfunction(&self, pair: &Eigenpair, grid: &GridSpec) -> (PiecewiseFn<C>, DVector<C>) {
        let cells = grid.cells / 2;
        let (n1, n2, z) = self.resolvent_of_combination(pair.lambda, &pair.kernel, cells);
        (u_inverse(&n1, &n2, grid), z)
    }
}

/// Right singular vector of the smallest singular value.
fn kernel_vector(m: &DMatrix<C>) -> DVector<C> {
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("requested");
    let (i, _) = svd.singular_values.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    vt.row(i).adjoint().into_owned()
}

/// ‖L_Π v − λ v‖ / ‖v‖ in the composite norm.
pub fn eigen_residual(lin: &LinearizedMaps, lambda: C, nu: &PiecewiseFn<C>, z: &DVector<C>, st: &NormSettings) -> f64 {
    let (lnu, lz) = lin.apply_lpi(nu, z);
    let g = lin.grid();
    let res = PiecewiseFn::lincomb(&g, &[(c(1.0), &lnu), (-lambda, nu)]);
    let rz = lz - z * lambda;
    composite_norm(&res, &rz, st) / composite_norm(nu, z, st)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "r")]
pub enum Verdict {
    AsymptoticallyStable,
    Unstable,
    Marginal(f64),
}

/// Spectral radius estimate and the resulting verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub spectral_radius: f64,
    /// No root with |λ| ≥ λ_min: the radius is only known to be at most λ_min.
    pub radius_is_bound: bool,
    pub verdict: Verdict,
}

pub fn stability_verdict(search: &EigenSearch, opts: &SearchOptions, margin: f64) -> StabilityVerdict {
    let top = search.pairs.iter().map(|p| p.lambda.norm()).fold(0.0, f64::max);
    let radius_is_bound = search.pairs.is_empty();
    let r = top.max(opts.lambda_min);
    let verdict = if r < 1.0 - margin {
        Verdict::AsymptoticallyStable
    } else if r > 1.0 + margin {
        Verdict::Unstable
    } else {
        Verdict::Marginal(r)
    };
    StabilityVerdict { spectral_radius: r, radius_is_bound, verdict }
}
