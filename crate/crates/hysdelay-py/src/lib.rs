//! Python bindings: systems, periodic orbits, simulation, spectra and norms.

use hysdelay::cli::norms_selftest as selftest_rows;
use hysdelay::core::{validate_params, GridSpec, HistoryFunction, Numerics, Piece, PiecewiseFn, RawParams, Side, SystemParams};
use hysdelay::integrator::integrate;
use hysdelay::linearization::LinearizedMaps;
use hysdelay::norms::{fractional_norm as frac_norm, gamma_exponent as gamma, hit_time_exponent as hit_exp};
use hysdelay::periodic::{find_periodic_orbit, verify_orbit, PeriodicOrbit, VerifyTolerances};
use hysdelay::spectrum::{build_pencil, dense_eigenvalues as dense_eigs, eigen_residual, stability_verdict, SearchOptions, Verdict};
use hysdelay::norms::NormSettings;
use nalgebra::DVector;
use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn runtime<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn numerics(n_per_t: usize) -> PyResult<Numerics> {
    if n_per_t < 4 {
        return Err(PyValueError::new_err("n_per_t must be at least 4"));
    }
    Ok(Numerics { n_per_t, ..Numerics::default() })
}

/// Validated system u' = kH(Mu) − Bu + Au(t−2T).
#[pyclass(name = "System", frozen, from_py_object)]
#[derive(Clone)]
struct PySystem {
    params: SystemParams,
}

#[pymethods]
impl PySystem {
    #[new]
    #[pyo3(signature = (a, b, k, m, t, alpha = -1.0, beta = 1.0, p = 1.5, s = 0.5))]
    #[allow(clippy::too_many_arguments)]
    fn new(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, k: Vec<f64>, m: Vec<f64>, t: f64, alpha: f64, beta: f64, p: f64, s: f64) -> PyResult<Self> {
        let raw = RawParams { N: k.len(), A: a, B: b, k, M: m, alpha, beta, T: t, p, s, sigma: None };
        let params = validate_params(&raw).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PySystem { params })
    }

    #[getter]
    fn n(&self) -> usize {
        self.params.n
    }

    #[getter]
    fn t(&self) -> f64 {
        self.params.t
    }

    fn __repr__(&self) -> String {
        format!("System(N={}, T={}, alpha={}, beta={})", self.params.n, self.params.t, self.params.alpha, self.params.beta)
    }
}

/// Symmetric two-switching periodic orbit.
#[pyclass(name = "Orbit", frozen)]
struct PyOrbit {
    orbit: PeriodicOrbit,
}

#[pymethods]
impl PyOrbit {
    #[getter]
    fn t(&self) -> f64 {
        self.orbit.t
    }

    #[getter]
    fn x_alpha(&self) -> Vec<f64> {
        self.orbit.x_alpha.iter().copied().collect()
    }

    #[getter]
    fn x_beta(&self) -> Vec<f64> {
        self.orbit.x_beta.iter().copied().collect()
    }

    #[getter]
    fn transversality(&self) -> f64 {
        self.orbit.transversality
    }

    #[getter]
    fn antisymmetry_residual(&self) -> f64 {
        self.orbit.antisymmetry_residual
    }

    #[getter]
    fn dphi_jump(&self) -> Vec<f64> {
        self.orbit.dphi_jump.iter().copied().collect()
    }

    #[getter]
    fn system(&self) -> PySystem {
        PySystem { params: self.orbit.params.clone() }
    }

    /// u_per(t), right limit.
    fn u(&self, t: f64) -> Vec<f64> {
        self.orbit.u_per(t, Side::Right).iter().copied().collect()
    }

    /// Checklist rows (item, name, passed, value).
    fn verify(&self) -> Vec<(u8, String, bool, f64)> {
        let num = Numerics { n_per_t: self.orbit.n_per_t(), ..Numerics::default() };
        let r = verify_orbit(&self.orbit, &num, &VerifyTolerances::from_numerics(&num));
        r.items.iter().map(|c| (c.item, c.name.to_string(), c.passed, c.value)).collect()
    }
}

#[pyfunction]
#[pyo3(signature = (system, n_per_t = 64))]
fn find_orbit(system: &PySystem, n_per_t: usize) -> PyResult<PyOrbit> {
    let orbit = find_periodic_orbit(&system.params, None, &numerics(n_per_t)?).map_err(runtime)?;
    Ok(PyOrbit { orbit })
}

/// Integrate from a constant history `phi` (x(0) = `x0`, default `phi`), or from the orbit's φ_α.
#[pyfunction]
#[pyo3(signature = (system, horizon, phi = None, x0 = None, orbit = None, n_per_t = 64))]
fn simulate<'py>(
    py: Python<'py>,
    system: &PySystem,
    horizon: f64,
    phi: Option<Vec<f64>>,
    x0: Option<Vec<f64>>,
    orbit: Option<&PyOrbit>,
    n_per_t: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let num = numerics(n_per_t)?;
    let (p, h) = match (orbit, phi) {
        (Some(o), _) => (o.orbit.params.clone(), o.orbit.phi_alpha.clone()),
        (None, Some(phi)) => {
            let n = system.params.n;
            let x0 = x0.unwrap_or_else(|| phi.clone());
            if phi.len() != n || x0.len() != n {
                return Err(PyValueError::new_err(format!("phi and x0 need length {n}")));
            }
            let h = HistoryFunction::constant(system.params.t, n_per_t, DVector::from_vec(phi), DVector::from_vec(x0));
            (system.params.clone(), h)
        }
        (None, None) => return Err(PyValueError::new_err("give either phi or orbit")),
    };
    let traj = integrate(&p, &h, horizon, &num).map_err(runtime)?;
    let (mut times, mut values, mut relay) = (Vec::new(), Vec::new(), Vec::new());
    for seg in &traj.segments {
        for (t, u) in seg.times.iter().zip(&seg.values) {
            times.push(*t);
            values.push(u.iter().copied().collect::<Vec<f64>>());
            relay.push(seg.relay);
        }
    }
    let d = PyDict::new(py);
    d.set_item("times", times)?;
    d.set_item("values", values)?;
    d.set_item("relay", relay)?;
    d.set_item("switching_times", traj.switching_times.clone())?;
    d.set_item("grazing", traj.grazing)?;
    Ok(d)
}

/// Nonzero spectrum of the linearized Poincaré map and the stability verdict.
#[pyfunction]
#[pyo3(signature = (orbit, lambda_min = 0.05, margin = None))]
fn stability<'py>(py: Python<'py>, orbit: &PyOrbit, lambda_min: f64, margin: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
    let lin = LinearizedMaps::new(&orbit.orbit).map_err(runtime)?;
    let st = NormSettings::from_params(&orbit.orbit.params);
    let model = build_pencil(&lin);
    let opts = SearchOptions { lambda_min, ..SearchOptions::default() };
    let search = model.find_eigenvalues(&opts).map_err(runtime)?;
    let grid = lin.grid();
    let residuals: Vec<f64> = search
        .pairs
        .iter()
        .map(|pair| {
            let (nu, z) = model.eigenfunction(pair, &grid);
            eigen_residual(&lin, pair.lambda, &nu, &z, &st)
        })
        .collect();
    let v = stability_verdict(&search, &opts, margin.unwrap_or(Numerics::default().margin));
    let verdict = match v.verdict {
        Verdict::AsymptoticallyStable => "asymptotically_stable",
        Verdict::Unstable => "unstable",
        Verdict::Marginal(_) => "marginal",
    };
    let d = PyDict::new(py);
    d.set_item("eigenvalues", search.pairs.iter().map(|p| p.lambda).collect::<Vec<Complex64>>())?;
    d.set_item("residuals", residuals)?;
    d.set_item("count", search.count)?;
    d.set_item("radius", search.radius)?;
    d.set_item("spectral_radius", v.spectral_radius)?;
    d.set_item("radius_is_bound", v.radius_is_bound)?;
    d.set_item("verdict", verdict)?;
    Ok(d)
}

/// Eigenvalues of the dense discretization of L_Π.
#[pyfunction]
fn dense_eigenvalues(orbit: &PyOrbit) -> PyResult<Vec<Complex64>> {
    let lin = LinearizedMaps::new(&orbit.orbit).map_err(runtime)?;
    Ok(dense_eigs(&lin))
}

/// W^{s,p}(a, b) norm of the cubic interpolant through scalar samples.
#[pyfunction]
fn fractional_norm(theta: Vec<f64>, values: Vec<f64>, a: f64, b: f64, p: f64, s: f64) -> PyResult<f64> {
    if theta.len() != values.len() || theta.len() < 4 {
        return Err(PyValueError::new_err("need at least 4 samples with matching lengths"));
    }
    if theta.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(PyValueError::new_err("theta must be strictly increasing"));
    }
    if !(theta[0] <= a && a < b && b <= theta[theta.len() - 1]) {
        return Err(PyValueError::new_err("[a, b] must lie inside the sampled range"));
    }
    let piece = Piece { nodes: theta, values: values.into_iter().map(|v| DVector::from_element(1, v)).collect() };
    let f = PiecewiseFn::from_pieces(1, vec![piece]);
    Ok(frac_norm(&f, a, b, p, s))
}

#[pyfunction]
fn gamma_exponent(p: f64, s: f64) -> f64 {
    gamma(p, s)
}

#[pyfunction]
fn hit_time_exponent(p: f64) -> f64 {
    hit_exp(p)
}

/// Rows (name, value, target, passed) of the norm self-test.
#[pyfunction]
fn norms_selftest() -> Vec<(String, f64, f64, bool)> {
    selftest_rows().into_iter().map(|r| (r.name, r.value, r.target, r.passed)).collect()
}

/// Node grid on [−2T, 0] with `n_per_t` cells per length-T window.
#[pyfunction]
fn history_grid(t: f64, n_per_t: usize) -> Vec<f64> {
    let g = GridSpec::history(t, n_per_t);
    (0..=g.cells).map(|i| g.a + g.h() * i as f64).collect()
}

#[pymodule]
fn hysdelay_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyOrbit>()?;
    m.add_function(wrap_pyfunction!(find_orbit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(stability, m)?)?;
    m.add_function(wrap_pyfunction!(dense_eigenvalues, m)?)?;
    m.add_function(wrap_pyfunction!(fractional_norm, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_exponent, m)?)?;
    m.add_function(wrap_pyfunction!(hit_time_exponent, m)?)?;
    m.add_function(wrap_pyfunction!(norms_selftest, m)?)?;
    m.add_function(wrap_pyfunction!(history_grid, m)?)?;
    Ok(())
}
