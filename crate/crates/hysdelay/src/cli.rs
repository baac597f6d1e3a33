//! Batch front end: `simulate`, `periodic`, `stability`, `convergence`, `norms-selftest`.
//!
//! Exit codes: 0 success, 1 I/O, 2 config, 3 integration diagnostic, 4 no orbit,
//! 5 orbit fails the assumption checklist, 6 pencil/dense disagreement,
//! 7 switching structure collapsed at every ε, 8 norm self-test failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{validate_params, GridSpec, HistoryFunction, Numerics, PiecewiseFn, RawParams, Side, SystemParams};
use crate::integrator::integrate;
use crate::linearization::{check_three_map_derivative, eps_ladder, hit_time_study, partial_t_study, smooth_direction, LinearizedMaps, OrderStudy};
use crate::maps::{poincare_deviations, MapContext};
use crate::norms::{increment_probe, composite_norm, fractional_norm, gamma_exponent, hit_time_exponent, NormSettings, ProbeKind};
use crate::periodic::{find_periodic_orbit, verify_orbit, OrbitReport, PeriodicError, PeriodicOrbit, VerifyTolerances};
use crate::spectrum::{build_pencil, dense_eigenvalues, eigen_residual, stability_verdict, SearchOptions, StabilityVerdict};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("i/o: {0}")]
    Io(String),
    #[error("config: {0}")]
    Config(String),
    #[error("integration: {0}")]
    Integration(String),
    #[error("no periodic orbit: {0}")]
    NoOrbit(String),
    #[error("orbit fails checklist items {0:?}")]
    Assumption(Vec<u8>),
    #[error("pencil and dense spectra disagree: {0}")]
    Disagreement(String),
    #[error("switching structure collapsed at every ε for direction(s) {0:?}")]
    Collapse(Vec<usize>),
    #[error("norm self-test failed: {0:?}")]
    SelfTest(Vec<String>),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Integration(_) => 3,
            CliError::NoOrbit(_) => 4,
            CliError::Assumption(_) => 5,
            CliError::Disagreement(_) => 6,
            CliError::Collapse(_) => 7,
            CliError::SelfTest(_) => 8,
        }
    }
}

fn io<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Io(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "hysdelay", version, about = "Relay-hysteresis delay systems: simulation, periodic orbits, spectral stability")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub orbit: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Grid cells per length-T window (overrides numerics.n_per_t).
    #[arg(long, global = true)]
    pub grid: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Integrate from the configured history; writes trajectory.csv and switching_times.csv.
    Simulate,
    /// Construct and verify the symmetric periodic orbit; writes orbit.json and periodic_report.json.
    Periodic,
    /// Spectrum of the linearized Poincaré map, dense cross-check and iterates; writes stability_report.json.
    Stability,
    /// Remainder-order studies for the linearization; writes convergence_report.json.
    Convergence,
    /// Norm property checks; writes norms_selftest.json.
    NormsSelftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HistoryKind {
    /// φ_α of the periodic orbit, x = x_α.
    #[default]
    Orbit,
    /// φ ≡ `phi`, x = `x0` (or `phi`).
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateBlock {
    pub horizon: Option<f64>,
    pub history: HistoryKind,
    pub phi: Option<Vec<f64>>,
    pub x0: Option<Vec<f64>>,
}

impl Default for SimulateBlock {
    fn default() -> Self {
        SimulateBlock { horizon: None, history: HistoryKind::Orbit, phi: None, x0: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityBlock {
    pub nodes_per_side: usize,
    pub dense_tol: f64,
    pub dense_check: bool,
    pub iterates: usize,
    pub perturbation: f64,
}

impl Default for StabilityBlock {
    fn default() -> Self {
        StabilityBlock { nodes_per_side: 64, dense_tol: 1e-4, dense_check: true, iterates: 20, perturbation: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceBlock {
    pub directions: usize,
    pub modes: usize,
    pub eps: Vec<f64>,
    /// Append the zero direction, which is reported and excluded.
    pub include_zero: bool,
}

impl Default for ConvergenceBlock {
    fn default() -> Self {
        ConvergenceBlock { directions: 3, modes: 3, eps: eps_ladder(), include_zero: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: RawParams,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub simulate: SimulateBlock,
    #[serde(default)]
    pub stability: StabilityBlock,
    #[serde(default)]
    pub convergence: ConvergenceBlock,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn params(&self) -> Result<SystemParams, CliError> {
        validate_params(&self.system).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Orbit file contents: parameters, the orbit's defining data and grid samples of φ_α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitFile {
    pub system: RawParams,
    pub t: f64,
    pub n_per_t: usize,
    pub x_alpha: Vec<f64>,
    pub x_beta: Vec<f64>,
    pub transversality: f64,
    pub dphi_jump: Vec<f64>,
    pub antisymmetry_residual: f64,
    pub theta: Vec<f64>,
    pub phi_alpha: Vec<Vec<f64>>,
}

impl OrbitFile {
    pub fn from_orbit(o: &PeriodicOrbit) -> Self {
        let theta = o.phi_alpha.phi.nodes();
        let phi_alpha = theta.iter().map(|&th| o.phi_alpha.phi.value(th, Side::Right).iter().copied().collect()).collect();
        OrbitFile {
            system: o.params.to_raw(),
            t: o.t,
            n_per_t: o.n_per_t(),
            x_alpha: o.x_alpha.iter().copied().collect(),
            x_beta: o.x_beta.iter().copied().collect(),
            transversality: o.transversality,
            dphi_jump: o.dphi_jump.iter().copied().collect(),
            antisymmetry_residual: o.antisymmetry_residual,
            theta,
            phi_alpha,
        }
    }

    /// Rebuild the orbit from (x_α, T) on a grid of `n_per_t` cells.
    pub fn to_orbit(&self, n_per_t: usize) -> Result<PeriodicOrbit, CliError> {
        let p = validate_params(&self.system).map_err(|e| CliError::Config(format!("orbit file: {e}")))?;
        if self.x_alpha.len() != p.n {
            return Err(CliError::Config("orbit file: x_alpha has the wrong length".into()));
        }
        Ok(PeriodicOrbit::from_closed_form(&p, DVector::from_vec(self.x_alpha.clone()), self.t, n_per_t))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub item: u8,
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub detail: String,
}

fn checklist(r: &OrbitReport) -> Vec<CheckRow> {
    r.items.iter().map(|c| CheckRow { item: c.item, name: c.name.to_string(), passed: c.passed, value: c.value, detail: c.detail.clone() }).collect()
}

/// 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(io)?;
    s.push('\n');
    write(path, &s)
}

struct Ctx {
    config: Option<RunConfig>,
    orbit_path: Option<PathBuf>,
    out: PathBuf,
    seed: u64,
    grid: Option<usize>,
}

impl Ctx {
    fn config(&self) -> Result<&RunConfig, CliError> {
        self.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))
    }

    fn numerics(&self) -> Result<Numerics, CliError> {
        let mut n = self.config()?.numerics;
        if let Some(g) = self.grid {
            n.n_per_t = g;
        }
        if n.n_per_t < 4 {
            return Err(CliError::Config("numerics.n_per_t must be at least 4".into()));
        }
        Ok(n)
    }

    fn find_orbit(&self) -> Result<PeriodicOrbit, CliError> {
        let num = self.numerics()?;
        find_periodic_orbit(&self.config()?.params()?, None, &num).map_err(|e| match e {
            PeriodicError::Assumption(r) => CliError::Assumption(r.failed_items()),
            other => CliError::NoOrbit(other.to_string()),
        })
    }

    /// The orbit from --orbit when given (re-verified), else a fresh search.
    fn orbit(&self) -> Result<PeriodicOrbit, CliError> {
        let num = self.numerics()?;
        match &self.orbit_path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                let file: OrbitFile = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("orbit file: {e}")))?;
                let orbit = file.to_orbit(num.n_per_t)?;
                let report = verify_orbit(&orbit, &num, &VerifyTolerances::from_numerics(&num));
                if !report.all_passed() {
                    return Err(CliError::Assumption(report.failed_items()));
                }
                Ok(orbit)
            }
            None => self.find_orbit(),
        }
    }
}

fn cmd_simulate(ctx: &Ctx) -> Result<String, CliError> {
    let cfg = ctx.config()?;
    let p = cfg.params()?;
    let num = ctx.numerics()?;
    let horizon = cfg.simulate.horizon.ok_or_else(|| CliError::Config("simulate.horizon is required".into()))?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(CliError::Config(format!("simulate.horizon must be positive (got {horizon})")));
    }
    let (p, h) = match cfg.simulate.history {
        HistoryKind::Orbit => {
            let o = ctx.orbit()?;
            (o.params.clone(), o.phi_alpha)
        }
        HistoryKind::Constant => {
            let phi = cfg.simulate.phi.clone().ok_or_else(|| CliError::Config("simulate.phi is required for a constant history".into()))?;
            let x0 = cfg.simulate.x0.clone().unwrap_or_else(|| phi.clone());
            if phi.len() != p.n || x0.len() != p.n {
                return Err(CliError::Config(format!("simulate.phi and simulate.x0 need length N={}", p.n)));
            }
            (p.clone(), HistoryFunction::constant(p.t, num.n_per_t, DVector::from_vec(phi), DVector::from_vec(x0)))
        }
    };
    let traj = integrate(&p, &h, horizon, &num).map_err(|e| CliError::Integration(e.to_string()))?;
    fs::create_dir_all(&ctx.out).map_err(io)?;
    let mut csv = String::from("t");
    for i in 1..=p.n {
        csv.push_str(&format!(",u{i}"));
    }
    csv.push_str(",relay\n");
    for seg in &traj.segments {
        for (t, u) in seg.times.iter().zip(&seg.values) {
            csv.push_str(&fmt17(*t));
            for v in u.iter() {
                csv.push(',');
                csv.push_str(&fmt17(*v));
            }
            csv.push_str(&format!(",{}\n", seg.relay));
        }
    }
    write(&ctx.out.join("trajectory.csv"), &csv)?;
    let mut sw = String::from("index,t\n");
    for (i, t) in traj.switching_times.iter().enumerate() {
        sw.push_str(&format!("{i},{}\n", fmt17(*t)));
    }
    write(&ctx.out.join("switching_times.csv"), &sw)?;
    if traj.grazing {
        return Err(CliError::Integration("grazing contact with a threshold detected".into()));
    }
    Ok(format!("simulate: {} switchings on [0, {horizon}]", traj.switching_times.len()))
}

#[derive(Debug, Serialize)]
struct PeriodicReport {
    t: f64,
    transversality: f64,
    dphi_jump: Vec<f64>,
    antisymmetry_residual: f64,
    switching_times: Vec<f64>,
    checklist: Vec<CheckRow>,
    all_passed: bool,
}

fn cmd_periodic(ctx: &Ctx) -> Result<String, CliError> {
    let num = ctx.numerics()?;
    let p = ctx.config()?.params()?;
    fs::create_dir_all(&ctx.out).map_err(io)?;
    let tol = VerifyTolerances::from_numerics(&num);
    let (orbit, report) = match find_periodic_orbit(&p, None, &num) {
        Ok(o) => {
            let r = verify_orbit(&o, &num, &tol);
            (o, r)
        }
        Err(PeriodicError::Assumption(r)) => {
            let rep = PeriodicReport {
                t: f64::NAN,
                transversality: r.transversality,
                dphi_jump: vec![],
                antisymmetry_residual: r.antisymmetry_residual,
                switching_times: r.switching_times.clone(),
                checklist: checklist(&r),
                all_passed: false,
            };
            write_json(&ctx.out.join("periodic_report.json"), &rep)?;
            return Err(CliError::Assumption(r.failed_items()));
        }
        Err(e) => return Err(CliError::NoOrbit(e.to_string())),
    };
    write_json(&ctx.out.join("orbit.json"), &OrbitFile::from_orbit(&orbit))?;
    let rep = PeriodicReport {
        t: orbit.t,
        transversality: orbit.transversality,
        dphi_jump: orbit.dphi_jump.iter().copied().collect(),
        antisymmetry_residual: orbit.antisymmetry_residual,
        switching_times: report.switching_times.clone(),
        checklist: checklist(&report),
        all_passed: report.all_passed(),
    };
    write_json(&ctx.out.join("periodic_report.json"), &rep)?;
    Ok(format!("periodic: T = {}", fmt17(orbit.t)))
}

#[derive(Debug, Serialize)]
pub struct EigenRow {
    pub re: f64,
    pub im: f64,
    pub abs: f64,
    pub residual: f64,
    pub dense_distance: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct DenseSummary {
    pub dimension: usize,
    pub count_above_lambda_min: usize,
    pub spectral_radius: f64,
    pub max_distance: f64,
    pub agrees: bool,
}

#[derive(Debug, Serialize)]
pub struct StabilityReport {
    pub t: f64,
    pub pencil_dimension: usize,
    pub pruned: Vec<String>,
    pub argument_principle_count: i64,
    pub search_radius: f64,
    pub lambda_min: f64,
    pub eigenvalues: Vec<EigenRow>,
    pub stability: StabilityVerdict,
    pub dense: Option<DenseSummary>,
    pub seed: u64,
    /// ‖Pᵏ(perturbed) − Pᵏ(base)‖ for k = 0..=iterates.
    pub iterates: Vec<f64>,
}

fn cmd_stability(ctx: &Ctx) -> Result<String, CliError> {
    let cfg = ctx.config()?;
    let num = ctx.numerics()?;
    let orbit = ctx.orbit()?;
    let lin = LinearizedMaps::new(&orbit).map_err(|e| CliError::NoOrbit(e.to_string()))?;
    let st = NormSettings::from_params(&orbit.params);
    let model = build_pencil(&lin);
    let opts = SearchOptions { lambda_min: num.lambda_min, nodes_per_side: cfg.stability.nodes_per_side, ..SearchOptions::default() };
    let search = model.find_eigenvalues(&opts).map_err(|e| CliError::Disagreement(e.to_string()))?;
    let verdict = stability_verdict(&search, &opts, num.margin);
    let dense = if cfg.stability.dense_check { Some(dense_eigenvalues(&lin)) } else { None };
    let grid = lin.grid();
    let mut rows = Vec::new();
    for pair in &search.pairs {
        let (nu, z) = model.eigenfunction(pair, &grid);
        let dd = dense.as_ref().map(|d| d.iter().map(|e| (e - pair.lambda).norm()).fold(f64::INFINITY, f64::min));
        rows.push(EigenRow {
            re: pair.lambda.re,
            im: pair.lambda.im,
            abs: pair.lambda.norm(),
            residual: eigen_residual(&lin, pair.lambda, &nu, &z, &st),
            dense_distance: dd,
        });
    }
    let dense_summary = dense.as_ref().map(|d| {
        let count = d.iter().filter(|e| e.norm() >= num.lambda_min).count();
        let max_distance = rows.iter().filter_map(|r| r.dense_distance).fold(0.0, f64::max);
        DenseSummary {
            dimension: d.len(),
            count_above_lambda_min: count,
            spectral_radius: d.iter().map(|e| e.norm()).fold(0.0, f64::max),
            max_distance,
            agrees: count == search.pairs.len() && max_distance <= cfg.stability.dense_tol,
        }
    });
    let mut iterates = Vec::new();
    if cfg.stability.iterates > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        let (nu, z) = smooth_direction(&mut rng, &lin, &st, 3);
        let mctx = MapContext::for_orbit(&orbit, &num);
        iterates = poincare_deviations(&mctx, &orbit, &nu, &z, cfg.stability.perturbation, cfg.stability.iterates, &st)
            .map_err(|e| CliError::Integration(e.to_string()))?;
    }
    let report = StabilityReport {
        t: orbit.t,
        pencil_dimension: model.dim(),
        pruned: model.pruned.clone(),
        argument_principle_count: search.count,
        search_radius: search.radius,
        lambda_min: num.lambda_min,
        eigenvalues: rows,
        stability: verdict,
        dense: dense_summary,
        seed: ctx.seed,
        iterates,
    };
    fs::create_dir_all(&ctx.out).map_err(io)?;
    write_json(&ctx.out.join("stability_report.json"), &report)?;
    if let Some(d) = &report.dense {
        if !d.agrees {
            return Err(CliError::Disagreement(format!(
                "pencil count {} vs dense {}, max distance {:e}",
                search.pairs.len(),
                d.count_above_lambda_min,
                d.max_distance
            )));
        }
    }
    Ok(format!("stability: r = {} ({:?})", fmt17(verdict.spectral_radius), verdict.verdict))
}

#[derive(Debug, Serialize)]
pub struct StudyRow {
    pub samples: Vec<(f64, f64)>,
    pub dropped: Vec<(f64, String)>,
    pub slope: Option<f64>,
    pub r2: Option<f64>,
    pub below_floor: bool,
    pub passed: bool,
}

fn study_row(s: &OrderStudy, min_slope: f64, min_r2: f64) -> StudyRow {
    StudyRow {
        samples: s.samples.clone(),
        dropped: s.dropped.clone(),
        slope: s.fit.map(|f| f.slope),
        r2: s.fit.map(|f| f.r2),
        below_floor: s.below_floor,
        passed: s.passes(min_slope, min_r2),
    }
}

#[derive(Debug, Serialize)]
pub struct DirectionRow {
    pub index: usize,
    pub excluded: Option<String>,
    pub three_map: Option<StudyRow>,
    pub hit_time: Option<StudyRow>,
}

#[derive(Debug, Serialize)]
pub struct ConvergenceReport {
    pub gamma: f64,
    pub hit_time_exponent: f64,
    pub threshold_three_map: f64,
    pub threshold_hit_time: f64,
    pub seed: u64,
    pub eps: Vec<f64>,
    pub directions: Vec<DirectionRow>,
    /// ‖ψ₊(T−δ) − ψ₊(T) + D_tψ₊δ‖ with δ > 0 and δ < 0, over the same ladder.
    pub partial_t_from_below: StudyRow,
    pub partial_t_from_above: StudyRow,
    pub all_passed: bool,
}

fn cmd_convergence(ctx: &Ctx) -> Result<String, CliError> {
    let cfg = ctx.config()?;
    let num = ctx.numerics()?;
    let orbit = ctx.orbit()?;
    let lin = LinearizedMaps::new(&orbit).map_err(|e| CliError::NoOrbit(e.to_string()))?;
    let st = NormSettings::from_params(&orbit.params);
    let mctx = MapContext::for_orbit(&orbit, &num);
    let (p, s) = (orbit.params.p, orbit.params.s);
    let gamma = gamma_exponent(p, s);
    let hit_exp = hit_time_exponent(p);
    let eps = &cfg.convergence.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut dirs: Vec<(PiecewiseFn<f64>, DVector<f64>)> =
        (0..cfg.convergence.directions).map(|_| smooth_direction(&mut rng, &lin, &st, cfg.convergence.modes)).collect();
    if cfg.convergence.include_zero {
        dirs.push((PiecewiseFn::zeros(&lin.grid(), lin.n()), DVector::zeros(lin.n() - 1)));
    }
    let mut rows = Vec::new();
    let mut collapsed = Vec::new();
    for (i, (nu, z)) in dirs.iter().enumerate() {
        if composite_norm(nu, z, &st) == 0.0 {
            rows.push(DirectionRow { index: i, excluded: Some("zero direction: residual vanishes identically".into()), three_map: None, hit_time: None });
            continue;
        }
        let three = check_three_map_derivative(&lin, &mctx, nu, z, eps, &st);
        let hit = hit_time_study(&lin, &mctx, nu, z, eps);
        if three.samples.is_empty() {
            collapsed.push(i);
        }
        rows.push(DirectionRow {
            index: i,
            excluded: None,
            three_map: Some(study_row(&three, gamma - 0.1, 0.98)),
            hit_time: Some(study_row(&hit, hit_exp - 0.1, 0.98)),
        });
    }
    let below = study_row(&partial_t_study(&lin, &mctx, eps, true, &st), gamma - 0.1, 0.98);
    let above = study_row(&partial_t_study(&lin, &mctx, eps, false, &st), gamma - 0.1, 0.98);
    let all_passed = below.passed
        && above.passed
        && rows.iter().all(|r| r.excluded.is_some() || (r.three_map.as_ref().unwrap().passed && r.hit_time.as_ref().unwrap().passed));
    let report = ConvergenceReport {
        gamma,
        hit_time_exponent: hit_exp,
        threshold_three_map: gamma - 0.1,
        threshold_hit_time: hit_exp - 0.1,
        seed: ctx.seed,
        eps: eps.clone(),
        directions: rows,
        partial_t_from_below: below,
        partial_t_from_above: above,
        all_passed,
    };
    fs::create_dir_all(&ctx.out).map_err(io)?;
    write_json(&ctx.out.join("convergence_report.json"), &report)?;
    if !collapsed.is_empty() {
        return Err(CliError::Collapse(collapsed));
    }
    Ok(format!("convergence: γ = {gamma:.6}, all passed = {all_passed}"))
}

#[derive(Debug, Serialize)]
pub struct SelfTestRow {
    pub name: String,
    pub value: f64,
    pub target: f64,
    pub passed: bool,
}

/// Closed forms and increment-order probes for the norm layer.
pub fn norms_selftest() -> Vec<SelfTestRow> {
    let mut rows = Vec::new();
    let (p, s): (f64, f64) = (1.5, 0.5);
    let g = GridSpec::new(0.0, 1.0, 64);
    let lin = PiecewiseFn::sample(&g, &[], 1, |t, _| DVector::from_element(1, t));
    let exact = (1.0 / (p + 1.0)).powf(1.0 / p) + (2.0 / (0.75 * 1.75f64)).powf(1.0 / p);
    let got = fractional_norm(&lin, 0.0, 1.0, p, s);
    rows.push(SelfTestRow { name: "fractional norm of θ on (0,1)".into(), value: (got - exact).abs(), target: 1e-4, passed: (got - exact).abs() <= 1e-4 });
    let deltas: Vec<f64> = (0..6).map(|i| 0.05 * 0.5f64.powi(i)).collect();
    let a1 = increment_probe(ProbeKind::Taylor, &|t: f64| t.sin(), &|t: f64| t.cos(), (0.0, 1.0), p, &[], &deltas);
    let slope = a1.fit.map(|f| f.slope).unwrap_or(f64::NAN);
    let bound = 1.0 + 1.0 / p - 0.05;
    rows.push(SelfTestRow { name: "Taylor remainder order, sin θ".into(), value: slope, target: bound, passed: slope >= bound });
    let a2 = increment_probe(ProbeKind::Translation, &|t: f64| t.abs().powf(0.6), &|t: f64| 0.6 * t.abs().powf(-0.4) * t.signum(), (-1.0, 0.5), p, &[0.0], &deltas);
    let slope = a2.fit.map(|f| f.slope).unwrap_or(f64::NAN);
    rows.push(SelfTestRow { name: "translation order, |θ|^0.6".into(), value: slope, target: s - 0.05, passed: slope >= s - 0.05 });
    let wiggle = PiecewiseFn::sample(&g, &[0.4], 1, |t, side| {
        let jump = if t > 0.4 || (t == 0.4 && side == Side::Right) { 0.5 } else { 0.0 };
        DVector::from_element(1, (5.0 * t).sin() + jump)
    });
    let outer = fractional_norm(&wiggle, 0.0, 1.0, p, s);
    let inner = fractional_norm(&wiggle, 0.25, 0.75, p, s);
    rows.push(SelfTestRow { name: "restriction monotonicity".into(), value: inner - outer, target: 0.0, passed: inner <= outer * (1.0 + 1e-10) });
    rows
}

fn cmd_norms_selftest(ctx: &Ctx) -> Result<String, CliError> {
    let rows = norms_selftest();
    fs::create_dir_all(&ctx.out).map_err(io)?;
    write_json(&ctx.out.join("norms_selftest.json"), &rows)?;
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    if !failed.is_empty() {
        return Err(CliError::SelfTest(failed));
    }
    Ok(format!("norms-selftest: {} checks passed", rows.len()))
}

/// Run one command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let config = match &cli.config {
        Some(path) => match fs::read_to_string(path) {
            Ok(text) => match RunConfig::from_toml(&text) {
                Ok(c) => Some(c),
                Err(e) => return report_err(e),
            },
            Err(e) => return report_err(CliError::Io(format!("{}: {e}", path.display()))),
        },
        None => None,
    };
    let ctx = Ctx { config, orbit_path: cli.orbit.clone(), out: cli.out.clone(), seed: cli.seed, grid: cli.grid };
    if cli.command != Command::NormsSelftest {
        if let Err(e) = ctx.config().and_then(|c| c.params()) {
            return report_err(e);
        }
    }
    let res = match cli.command {
        Command::Simulate => cmd_simulate(&ctx),
        Command::Periodic => cmd_periodic(&ctx),
        Command::Stability => cmd_stability(&ctx),
        Command::Convergence => cmd_convergence(&ctx),
        Command::NormsSelftest => cmd_norms_selftest(&ctx),
    };
    match res {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => report_err(e),
    }
}

fn report_err(e: CliError) -> i32 {
    eprintln!("error: {e}");
    e.code()
}
