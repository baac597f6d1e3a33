mod common;

use common::{random_history, random_system, Rk4Oracle};
use hysdelay::core::Numerics;
use hysdelay::integrator::integrate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Max deviation of the double-step integrator from the RK4 oracle, switching-time mismatch.
fn compare(seed: u64, n_per_t: usize) -> Option<(f64, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_system(&mut rng);
    let h = random_history(&mut rng, &p, n_per_t);
    let num = Numerics { n_per_t, ..Numerics::default() };
    let horizon = 4.0 * p.t;
    let traj = integrate(&p, &h, horizon, &num).ok()?;
    let oracle = Rk4Oracle::run(&p, &h, horizon, 2000);
    if traj.grazing || oracle.min_switch_speed < 1e-2 || traj.switching_times.len() != oracle.switching_times.len() {
        return None;
    }
    let dt = traj.switching_times.iter().zip(&oracle.switching_times).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut du: f64 = 0.0;
    for i in 0..=2000 {
        let t = horizon * i as f64 / 2000.0;
        if oracle.switching_times.iter().any(|&s| (s - t).abs() < 1e-6) {
            continue;
        }
        du = du.max((traj.eval(t) - oracle.eval(t)).norm());
    }
    Some((du, dt, traj.switching_times.len()))
}

#[test]
fn double_steps_match_rk4_oracle() {
    let mut checked = 0;
    for seed in 100..130 {
        if let Some((du, dt, _)) = compare(seed, 128) {
            assert!(du < 1e-6 && dt < 1e-6, "seed {seed}: du {du:e} dt {dt:e}");
            checked += 1;
        }
    }
    assert!(checked >= 20);
}

#[test]
fn oracle_reproduces_s1_switching_times() {
    let p = hysdelay::core::validate_params(&common::s1_raw()).unwrap();
    let (orbit, _) = common::orbit_for(&common::s1_raw(), 64);
    let o = Rk4Oracle::run(&p, &orbit.phi_alpha, 2.5 * p.t, 4000);
    let t = 3f64.ln();
    assert_eq!(o.switching_times.len(), 2);
    assert!((o.switching_times[0] - t).abs() < 1e-10);
    assert!((o.switching_times[1] - 2.0 * t).abs() < 1e-10);
}
