//! Values derived by hand or with an independent arbitrary-precision solver, frozen here.

mod common;

use common::{orbit_for, s1_raw, unstable_raw};
use hysdelay::linearization::LinearizedMaps;
use hysdelay::spectrum::{build_pencil, SearchOptions};

#[test]
fn s1_orbit_data() {
    let (o, _) = orbit_for(&s1_raw(), 64);
    assert!((o.t - 3f64.ln()).abs() < 1e-12);
    assert!((o.x_alpha[0] + 1.0).abs() < 1e-14);
    assert!((o.x_beta[0] - 1.0).abs() < 1e-14);
    // u' = 2 − u on the rising leg: 3 at u = −1, 1 at u = 1; the jump at θ = 0 is 3 − (−1)
    assert!((o.dphi_jump[0] - 4.0).abs() < 1e-12);
    assert!((o.transversality - 1.0).abs() < 1e-12);
}

#[test]
fn unstable_scalar_half_period_is_ln2() {
    // the symmetric orbit of u' = 3H(u) − 0.2u − 0.8u(t − 2T) closes at T = ln 2
    let (o, _) = orbit_for(&unstable_raw(), 64);
    assert!((o.t - 2f64.ln()).abs() < 1e-10, "{}", o.t);
}

#[test]
fn unstable_scalar_leading_multiplier() {
    // −x with x = exp(0.8 ln2 (1 − x⁻²)), x ≠ 1: mpmath findroot gives 1.11108767633453
    let (o, _) = orbit_for(&unstable_raw(), 64);
    let lin = LinearizedMaps::new(&o).unwrap();
    let s = build_pencil(&lin).find_eigenvalues(&SearchOptions { lambda_min: 0.3, ..SearchOptions::default() }).unwrap();
    let top = s.pairs.iter().max_by(|a, b| a.lambda.norm().partial_cmp(&b.lambda.norm()).unwrap()).unwrap();
    assert!((top.lambda.re + 1.11108767633453).abs() < 1e-9 && top.lambda.im.abs() < 1e-9, "{}", top.lambda);
}
