//! Matrix exponentials with memoisation by step length.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::core::Scalar;

pub fn expm<S: Scalar>(m: &DMatrix<S>) -> DMatrix<S> {
    m.clone().exp()
}

/// `exp(t·G)` for a fixed generator, cached on the exact bit pattern of `t`.
#[derive(Debug)]
pub struct ExpCache<S: Scalar> {
    gen: DMatrix<S>,
    map: Mutex<HashMap<u64, DMatrix<S>>>,
}

impl<S: Scalar> Clone for ExpCache<S> {
    fn clone(&self) -> Self {
        ExpCache::new(self.gen.clone())
    }
}

impl<S: Scalar> ExpCache<S> {
    pub fn new(gen: DMatrix<S>) -> Self {
        ExpCache { gen, map: Mutex::new(HashMap::new()) }
    }

    pub fn generator(&self) -> &DMatrix<S> {
        &self.gen
    }

    pub fn get(&self, t: f64) -> DMatrix<S> {
        let key = t.to_bits();
        if let Some(m) = self.map.lock().unwrap().get(&key) {
            return m.clone();
        }
        let m = expm(&(&self.gen * S::from_real(t)));
        let mut map = self.map.lock().unwrap();
        if map.len() > 200_000 {
            map.clear();
        }
        map.insert(key, m.clone());
        m
    }
}

/// Propagators of `v' = −B v + c` used by the fixed-branch flows: `e^{−Bt}` and
/// `∫₀ᵗ e^{−B(t−ξ)} dξ · k` from the augmented exponential of `[[−B, k], [0, 0]]`.
#[derive(Debug, Clone)]
pub struct Propagator {
    n: usize,
    decay: ExpCache<f64>,
    forced: ExpCache<f64>,
}

impl Propagator {
    pub fn new(b: &DMatrix<f64>, k: &DVector<f64>) -> Self {
        let n = b.nrows();
        let mut aug = DMatrix::zeros(n + 1, n + 1);
        aug.view_mut((0, 0), (n, n)).copy_from(&(-b));
        aug.view_mut((0, n), (n, 1)).copy_from(k);
        Propagator { n, decay: ExpCache::new(-b), forced: ExpCache::new(aug) }
    }

    /// `e^{−Bt}`.
    pub fn decay(&self, t: f64) -> DMatrix<f64> {
        self.decay.get(t)
    }

    /// `∫₀ᵗ e^{−B(t−ξ)} k dξ`.
    pub fn forcing(&self, t: f64) -> DVector<f64> {
        let e = self.forced.get(t);
        e.view((0, self.n), (self.n, 1)).clone_owned().column(0).into_owned()
    }
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

pub fn to_complex_vec(v: &DVector<f64>) -> DVector<Complex64> {
    v.map(|x| Complex64::new(x, 0.0))
}

/// Real matrix times a real or complex vector.
pub fn real_mul<S: Scalar>(m: &DMatrix<f64>, v: &DVector<S>) -> DVector<S> {
    let mut out = DVector::zeros(m.nrows());
    for j in 0..m.ncols() {
        let vj = v[j];
        for i in 0..m.nrows() {
            out[i] += vj * S::from_real(m[(i, j)]);
        }
    }
    out
}

/// Mᵀv for a real row functional.
pub fn real_dot<S: Scalar>(m: &DVector<f64>, v: &DVector<S>) -> S {
    let mut acc = S::zero();
    for i in 0..m.len() {
        acc += v[i] * S::from_real(m[i]);
    }
    acc
}
