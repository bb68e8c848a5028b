//! Complex digamma function.

use num_complex::Complex64;
use std::f64::consts::PI;

// B_{2k} / (2k) for k = 1..8
const ASYMPTOTIC: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
];

/// Digamma ψ(z) for complex `z` away from the poles at non-positive integers.
///
/// Uses the upward recurrence ψ(z) = ψ(z+1) − 1/z until Re z ≥ 12, then the
/// asymptotic Stirling series. The left half-plane is mapped through the
/// reflection formula.
pub fn digamma(z: Complex64) -> Complex64 {
    if z.re < 0.5 {
        let cot = (PI * z).cos() / (PI * z).sin();
        return digamma(Complex64::new(1.0, 0.0) - z) - PI * cot;
    }
    let mut z = z;
    let mut shift = Complex64::new(0.0, 0.0);
    while z.re < 12.0 {
        shift -= z.inv();
        z += 1.0;
    }
    let inv2 = (z * z).inv();
    let mut term = inv2;
    let mut series = Complex64::new(0.0, 0.0);
    for c in ASYMPTOTIC {
        series += c * term;
        term *= inv2;
    }
    shift + z.ln() - 0.5 * z.inv() - series
}
