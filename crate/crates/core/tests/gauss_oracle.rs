//! Checks the normal CDF and quantile against an independent oracle:
//! a Maclaurin series for erf near the origin and a backward-evaluated
//! Laplace continued fraction for erfc in the tails. Neither path shares
//! code with the implementation under test.

use bitadapt_core::gauss::{gaussian_cdf, gaussian_quantile};

const SQRT_PI: f64 = 1.772_453_850_905_516;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// erf by its Maclaurin series; accurate to ~1e-16 for |z| <= 2.
fn erf_series(z: f64) -> f64 {
    let mut term = z;
    let mut sum = z;
    let mut n = 0usize;
    loop {
        n += 1;
        term *= -z * z / n as f64;
        let contrib = term / (2 * n + 1) as f64;
        sum += contrib;
        if contrib.abs() < 1e-18 * sum.abs().max(1e-300) || n > 200 {
            break;
        }
    }
    sum * 2.0 / SQRT_PI
}

/// erfc via the Laplace continued fraction
/// `erfc(z)·√π·e^{z²} = 1/(z + (1/2)/(z + (2/2)/(z + ...)))`,
/// evaluated by backward recurrence; reliable for z >= 1.
fn erfc_cf(z: f64) -> f64 {
    let mut f = z;
    for n in (1..=300).rev() {
        f = z + (n as f64 / 2.0) / f;
    }
    (-z * z).exp() / (SQRT_PI * f)
}

/// Oracle Φ(x) combining the two erf routes.
fn oracle_cdf(x: f64) -> f64 {
    let z = x / SQRT_2;
    if z.abs() <= 1.4 {
        0.5 * (1.0 + erf_series(z))
    } else if z > 0.0 {
        1.0 - 0.5 * erfc_cf(z)
    } else {
        0.5 * erfc_cf(-z)
    }
}

#[test]
fn oracle_agrees_with_known_values() {
    // Pinned reference points for the oracle itself.
    assert!((oracle_cdf(0.0) - 0.5).abs() < 1e-16);
    assert!((oracle_cdf(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
    assert!((oracle_cdf(-1.0) - (1.0 - 0.841_344_746_068_543)).abs() < 1e-12);
}

#[test]
fn cdf_matches_oracle_to_1e12() {
    let mut x = -8.0;
    while x <= 8.0 {
        let got = gaussian_cdf(x);
        let want = oracle_cdf(x);
        assert!((got - want).abs() <= 1e-12, "x = {x}: {got} vs {want}");
        x += 0.117;
    }
}

#[test]
fn cdf_spec_example() {
    assert!((gaussian_cdf(1.0) - 0.841_344_7).abs() < 1e-7);
}

#[test]
fn quantile_inverts_oracle() {
    for i in 1..40 {
        let p = i as f64 / 40.0;
        let x = gaussian_quantile(p).unwrap();
        assert!((oracle_cdf(x) - p).abs() <= 1e-10, "p = {p}");
    }
}

#[test]
fn quantile_spec_examples() {
    assert_eq!(gaussian_quantile(0.5).unwrap(), 0.0);
    assert!((gaussian_quantile(0.75).unwrap() - 0.674_489_7).abs() < 1e-7);
    let neg = gaussian_quantile(0.25).unwrap();
    let pos = gaussian_quantile(0.75).unwrap();
    assert!((neg + pos).abs() < 1e-12);
}

#[test]
fn quantile_cdf_identity_on_grid() {
    let mut x = -6.0;
    while x <= 6.0 {
        let back = gaussian_quantile(gaussian_cdf(x)).unwrap();
        assert!((back - x).abs() <= 1e-8, "x = {x}");
        x += 0.125;
    }
}
