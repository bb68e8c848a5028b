//! Symmetric random telegraph noise α(t) ∈ {−1, +1}.

use crate::error::{Error, Result};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

/// Denominator used in the closed form of `S₁`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum S1Denominator {
    /// `S₁ = i(Ω/η)(e^{−ν₊t/2} − e^{−ν₋t/2})`, the trajectory average
    /// `⟨α(t) e^{−iΩ∫α}⟩`.
    #[default]
    Eta,
    /// `S₁ = i(Ω/ν)(…)`, kept for comparison; not imaginary once 2Ω > ν.
    Nu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Amplitude Ω.
    pub omega_n: f64,
    /// Switching frequency ν; `⟨α(t)α(t′)⟩ = e^{−ν|t−t′|}`.
    pub nu: f64,
    pub seed: u64,
    #[serde(default)]
    pub s1_denominator: S1Denominator,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            omega_n: 0.75,
            nu: 1.0,
            seed: 1,
            s1_denominator: S1Denominator::Eta,
        }
    }
}

impl NoiseSpec {
    pub fn new(omega_n: f64, nu: f64, seed: u64) -> Result<Self> {
        let n = NoiseSpec {
            omega_n,
            nu,
            seed,
            s1_denominator: S1Denominator::default(),
        };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_n.is_finite() && self.omega_n >= 0.0) {
            return Err(Error::invalid("noise.omega_n", "must be finite and >= 0"));
        }
        if !(self.nu.is_finite() && self.nu > 0.0) {
            return Err(Error::invalid("noise.nu", "must be finite and > 0"));
        }
        if !self.kubo_number().is_finite() {
            return Err(Error::invalid("noise.nu", "Kubo number omega_n/nu overflows"));
        }
        Ok(())
    }

    pub fn kubo_number(&self) -> f64 {
        self.omega_n / self.nu
    }

    /// `η = √(ν² − 4Ω²)` on the principal branch (imaginary when 2Ω > ν).
    pub fn eta(&self) -> Complex64 {
        Complex64::new(self.nu * self.nu - 4.0 * self.omega_n * self.omega_n, 0.0).sqrt()
    }

    /// Averaged Kubo-oscillator propagators `(S₀(t), S₁(t))`.
    pub fn propagators(&self, t: f64) -> (Complex64, Complex64) {
        let (c, sh) = self.hyperbolic(t);
        let s0 = Complex64::new(c + self.nu * sh, 0.0);
        let s1_eta = Complex64::new(0.0, -2.0 * self.omega_n * sh);
        let s1 = match self.s1_denominator {
            S1Denominator::Eta => s1_eta,
            S1Denominator::Nu => s1_eta * self.eta() / self.nu,
        };
        (s0, s1)
    }

    /// `e^{−νt/2}cosh(ηt/2)` and `e^{−νt/2}sinh(ηt/2)/η`, continued through
    /// η² < 0 and the η → 0 limit in real arithmetic.
    fn hyperbolic(&self, t: f64) -> (f64, f64) {
        let eta2 = self.nu * self.nu - 4.0 * self.omega_n * self.omega_n;
        let half = 0.5 * t;
        let damp = (-self.nu * half).exp();
        let x2 = eta2 * half * half;
        if x2.abs() < 1e-8 {
            // cosh(x) ≈ 1 + x²/2, sinh(x)/x ≈ 1 + x²/6 with x = ηt/2
            return (damp * (1.0 + 0.5 * x2), damp * half * (1.0 + x2 / 6.0));
        }
        if eta2 > 0.0 {
            let eta = eta2.sqrt();
            let slow = (-(self.nu - eta) * half).exp();
            let fast = (-(self.nu + eta) * half).exp();
            (0.5 * (slow + fast), 0.5 * (slow - fast) / eta)
        } else {
            let w = (-eta2).sqrt();
            (damp * (w * half).cos(), damp * (w * half).sin() / w)
        }
    }

    /// Sample a stationary path on `[0, horizon]` from stream `stream_index`.
    pub fn sample_path(&self, horizon: f64, stream_index: u64) -> Result<NoisePath> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("horizon", "must be finite and > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream_index);
        let initial_sign: i8 = if rng.random::<bool>() { 1 } else { -1 };
        let wait = Exp::new(0.5 * self.nu).map_err(|e| Error::invalid("noise.nu", e.to_string()))?;
        let mut flip_times = Vec::new();
        let mut t = 0.0;
        loop {
            t += wait.sample(&mut rng);
            if t > horizon {
                break;
            }
            flip_times.push(t);
        }
        NoisePath::new(flip_times, initial_sign, horizon)
    }
}

/// One realization of α(t): piecewise constant, flipping at `flip_times`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    flip_times: Vec<f64>,
    initial_sign: i8,
    horizon: f64,
    // ∫₀^{flip_times[k]} α
    cumulative: Vec<f64>,
}

impl NoisePath {
    pub fn new(flip_times: Vec<f64>, initial_sign: i8, horizon: f64) -> Result<Self> {
        if initial_sign != 1 && initial_sign != -1 {
            return Err(Error::invalid("initial_sign", "must be +1 or -1"));
        }
        let increasing = flip_times.windows(2).all(|w| w[0] < w[1]);
        let inside = flip_times.iter().all(|&t| t > 0.0 && t <= horizon);
        if !increasing || !inside {
            return Err(Error::invalid(
                "flip_times",
                "must be strictly increasing inside (0, horizon]",
            ));
        }
        let mut cumulative = Vec::with_capacity(flip_times.len());
        let mut acc = 0.0;
        let mut prev = 0.0;
        let mut sign = initial_sign as f64;
        for &t in &flip_times {
            acc += sign * (t - prev);
            cumulative.push(acc);
            prev = t;
            sign = -sign;
        }
        Ok(NoisePath {
            flip_times,
            initial_sign,
            horizon,
            cumulative,
        })
    }

    /// Path with no flips.
    pub fn frozen(sign: i8, horizon: f64) -> Result<Self> {
        Self::new(Vec::new(), sign, horizon)
    }

    pub fn flip_times(&self) -> &[f64] {
        &self.flip_times
    }

    pub fn initial_sign(&self) -> i8 {
        self.initial_sign
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of flips at or before `t`.
    fn flips_before(&self, t: f64) -> usize {
        self.flip_times.partition_point(|&f| f <= t)
    }

    /// α(t), right-continuous at flips.
    pub fn sign_at(&self, t: f64) -> f64 {
        let k = self.flips_before(t);
        if k % 2 == 0 {
            self.initial_sign as f64
        } else {
            -(self.initial_sign as f64)
        }
    }

    fn primitive(&self, t: f64) -> f64 {
        let k = self.flips_before(t);
        if k == 0 {
            self.initial_sign as f64 * t
        } else {
            self.cumulative[k - 1] + self.sign_at(t) * (t - self.flip_times[k - 1])
        }
    }

    /// Oriented integral `∫_a^b α(ζ) dζ`.
    pub fn integrate(&self, a: f64, b: f64) -> Result<f64> {
        for t in [a, b] {
            if !(0.0..=self.horizon).contains(&t) {
                return Err(Error::OutOfHorizon {
                    t,
                    horizon: self.horizon,
                });
            }
        }
        Ok(self.primitive(b) - self.primitive(a))
    }

    /// `∫₀^t α` without the horizon check; callers stay on the grid.
    pub(crate) fn primitive_unchecked(&self, t: f64) -> f64 {
        self.primitive(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn propagators_at_origin_and_without_noise() {
        let n = NoiseSpec::new(0.6, 0.3, 0).unwrap();
        let (s0, s1) = n.propagators(0.0);
        assert_eq!(s0, Complex64::new(1.0, 0.0));
        assert_eq!(s1.norm(), 0.0);
        let quiet = NoiseSpec::new(0.0, 1.3, 0).unwrap();
        for t in [0.0, 0.5, 7.0] {
            let (s0, s1) = quiet.propagators(t);
            assert_eq!(s0, Complex64::new(1.0, 0.0));
            assert_eq!(s1.norm(), 0.0);
        }
    }

    #[test]
    fn propagator_example_value() {
        // e^{-1/2}(cosh(√0.75/2) + sinh(√0.75/2)/√0.75)
        let n = NoiseSpec::new(0.25, 1.0, 0).unwrap();
        let (s0, s1) = n.propagators(1.0);
        assert_relative_eq!(s0.re, 0.977_118_569_645_249, max_relative = 1e-12);
        assert_eq!(s1.re, 0.0);
        assert!(s1.im < 0.0);
    }

    #[test]
    fn critical_damping_limit() {
        let n = NoiseSpec::new(0.5, 1.0, 0).unwrap();
        for t in [0.3, 2.0, 9.0] {
            let (s0, s1) = n.propagators(t);
            let e = (-0.5 * t).exp();
            assert_relative_eq!(s0.re, e * (1.0 + 0.5 * t), max_relative = 1e-12);
            assert_relative_eq!(s1.im, -0.5 * t * e, max_relative = 1e-12);
        }
    }

    #[test]
    fn closed_form_matches_expanded_expression() {
        // direct complex evaluation of the two-exponential expression
        for (omega, nu) in [(0.75, 1.0), (0.75, 0.01), (0.1, 2.0)] {
            let n = NoiseSpec::new(omega, nu, 0).unwrap();
            let eta = n.eta();
            let np = nu + eta;
            let nm = nu - eta;
            for t in [0.2, 1.7, 6.0] {
                let ep = (-np * t / 2.0).exp();
                let em = (-nm * t / 2.0).exp();
                let s0 = (np * em - nm * ep) / (2.0 * eta);
                let s1 = Complex64::i() * omega / eta * (ep - em);
                let (g0, g1) = n.propagators(t);
                assert!((g0 - s0).norm() < 1e-12, "S0 {omega} {nu} {t}");
                assert!((g1 - s1).norm() < 1e-12, "S1 {omega} {nu} {t}");
            }
        }
    }

    #[test]
    fn nu_denominator_is_rescaled_eta_form() {
        let mut n = NoiseSpec::new(0.25, 1.0, 0).unwrap();
        let (_, eta_form) = n.propagators(2.0);
        n.s1_denominator = S1Denominator::Nu;
        let (_, nu_form) = n.propagators(2.0);
        assert_relative_eq!(nu_form.im, eta_form.im * 0.75f64.sqrt(), max_relative = 1e-13);
    }

    #[test]
    fn s0_solves_damped_oscillator() {
        let n = NoiseSpec::new(0.75, 1.0, 0).unwrap();
        let h = 1e-3;
        let s = |t: f64| n.propagators(t).0.re;
        for t in [0.5, 1.0, 3.0] {
            let d2 = (s(t + h) - 2.0 * s(t) + s(t - h)) / (h * h);
            let d1 = (s(t + h) - s(t - h)) / (2.0 * h);
            assert!((d2 + n.nu * d1 + n.omega_n.powi(2) * s(t)).abs() < 1e-5);
        }
        let d1 = (s(h) - s(0.0)) / h;
        assert!(d1.abs() < 1e-3);
    }

    #[test]
    fn frozen_path_integral() {
        let p = NoisePath::frozen(1, 5.0).unwrap();
        assert_eq!(p.integrate(0.0, 2.0).unwrap(), 2.0);
        assert_eq!(p.integrate(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(p.integrate(2.0, 0.0).unwrap(), -2.0);
        assert!(p.integrate(0.0, 6.0).is_err());
    }

    #[test]
    fn path_integral_matches_riemann_sum() {
        let n = NoiseSpec::new(0.75, 2.0, 11).unwrap();
        let path = n.sample_path(5.0, 3).unwrap();
        assert!(!path.flip_times().is_empty());
        let dt = 1e-4;
        let (a, b): (f64, f64) = (0.37, 4.21);
        let steps = ((b - a) / dt).round() as usize;
        let h = (b - a) / steps as f64;
        // midpoint sum is exact away from the cells containing a flip
        let sum: f64 = (0..steps).map(|k| path.sign_at(a + (k as f64 + 0.5) * h) * h).sum();
        let exact = path.integrate(a, b).unwrap();
        let flips = path.flip_times().iter().filter(|&&f| f > a && f < b).count();
        assert!((sum - exact).abs() <= 2.0 * h * flips as f64 + 1e-10);
        // segment-length sum reproduces the primitive exactly
        let mut pts = vec![a];
        pts.extend(path.flip_times().iter().copied().filter(|&f| f > a && f < b));
        pts.push(b);
        let seg: f64 = pts.windows(2).map(|w| path.sign_at(0.5 * (w[0] + w[1])) * (w[1] - w[0])).sum();
        assert!((seg - exact).abs() < 1e-10);
    }

    #[test]
    fn frozen_noise_limit() {
        let n = NoiseSpec::new(0.75, 1e-9, 5).unwrap();
        let flips: usize = (0..200).map(|s| n.sample_path(10.0, s).unwrap().flip_times().len()).sum();
        assert_eq!(flips, 0);
    }

    #[test]
    fn path_statistics() {
        let n = NoiseSpec::new(0.75, 0.8, 2024).unwrap();
        let paths = 10_000;
        let t = 3.0;
        let lag = 1.0 / n.nu;
        let (mut mean, mut corr, mut corr2) = (0.0, 0.0, 0.0);
        for s in 0..paths {
            let p = n.sample_path(t + lag, s).unwrap();
            let a = p.sign_at(t);
            let c = a * p.sign_at(t + lag);
            mean += a;
            corr += c;
            corr2 += c * c;
        }
        let m = paths as f64;
        mean /= m;
        let c = corr / m;
        let se = ((corr2 / m - c * c) / m).sqrt();
        assert!(mean.abs() < 3.0 / m.sqrt());
        assert!((c - (-1f64).exp()).abs() < 3.0 * se, "corr {c} se {se}");
    }

    #[test]
    fn monte_carlo_propagators() {
        let n = NoiseSpec::new(0.25, 1.0, 77).unwrap();
        let t = 1.0;
        let paths = 100_000;
        let (mut s0, mut s1) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
        for s in 0..paths {
            let p = n.sample_path(t, s).unwrap();
            let ph = Complex64::from_polar(1.0, -n.omega_n * p.integrate(0.0, t).unwrap());
            s0 += ph;
            s1 += p.sign_at(t) * ph;
        }
        s0 /= paths as f64;
        s1 /= paths as f64;
        let (e0, e1) = n.propagators(t);
        // per-sample spread of the phase factor is below Ωt
        let tol = 3.0 * 0.25 / (paths as f64).sqrt();
        assert!((s0 - e0).norm() < tol, "{s0} vs {e0}");
        assert!((s1 - e1).norm() < 3.0 / (paths as f64).sqrt(), "{s1} vs {e1}");
    }

    proptest! {
        #[test]
        fn propagator_reality(nu in 1e-3f64..5.0, omega in 0.0f64..3.0, t in 0.0f64..30.0) {
            let n = NoiseSpec::new(omega, nu, 0).unwrap();
            let (s0, s1) = n.propagators(t);
            prop_assert!(s0.im.abs() < 1e-12);
            prop_assert!(s1.re.abs() < 1e-12);
        }

        #[test]
        fn sampling_is_reproducible(seed in any::<u64>(), stream in 0u64..1000) {
            let n = NoiseSpec::new(0.5, 1.5, seed).unwrap();
            prop_assert_eq!(n.sample_path(20.0, stream).unwrap(), n.sample_path(20.0, stream).unwrap());
        }
    }
}
