//! Structured (damped central oscillator) bath: spectral density, bath
//! correlation exponents and the derived energy scales.
//!
//! All bath integrals carry the 1/2π normalization of the exponent
//! definitions, so that the reorganization energy is
//! `E_r = (1/2π) ∫ J(ω)/ω dω = κ²/ω₀` and the short-time forms
//! `Q₁ = E_r t`, `Q₂ = ξ t²` are the leading terms of the exact integrals.

use crate::error::{Error, Result};
use crate::quadrature::{self, Tolerance};
use crate::special::digamma;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Parameters of the structured spectral density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathSpec {
    /// System–bath coupling magnitude κ.
    pub kappa: f64,
    /// Central oscillator frequency ω₀.
    pub omega0: f64,
    /// Level broadening γ of the central oscillator.
    pub gamma: f64,
    /// Inverse temperature β.
    pub beta: f64,
}

/// How the bath correlation exponents are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExponentMode {
    /// Adaptive quadrature of the full frequency integrals.
    Exact,
    /// `Q₁ = E_r t`, `Q₂ = ξ t²`.
    #[default]
    ShortTime,
}

/// Real and imaginary exponents of the bath correlation function at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathExponents {
    pub q1: f64,
    pub q2: f64,
    pub mode: ExponentMode,
}

impl Default for BathSpec {
    fn default() -> Self {
        BathSpec {
            kappa: 2.0,
            omega0: 1.0,
            gamma: 0.5,
            beta: 0.02,
        }
    }
}

impl BathSpec {
    pub fn new(kappa: f64, omega0: f64, gamma: f64, beta: f64) -> Result<Self> {
        let bath = BathSpec {
            kappa,
            omega0,
            gamma,
            beta,
        };
        bath.validate()?;
        Ok(bath)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.kappa, self.omega0, self.gamma, self.beta]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("bath", "all bath parameters must be finite"));
        }
        if self.kappa < 0.0 {
            return Err(Error::invalid("bath.kappa", "must be >= 0"));
        }
        if self.omega0 <= 0.0 {
            return Err(Error::invalid("bath.omega0", "must be > 0"));
        }
        if self.gamma <= 0.0 {
            return Err(Error::invalid("bath.gamma", "must be > 0"));
        }
        if self.beta <= 0.0 {
            return Err(Error::invalid("bath.beta", "must be > 0"));
        }
        if self.gamma >= self.omega0 {
            return Err(Error::invalid(
                "bath.gamma",
                format!("must be below omega0 = {} (underdamped oscillator)", self.omega0),
            ));
        }
        Ok(())
    }

    /// `J(ω) = 8κ²γω₀ω / ((ω² − ω₀²)² + 4γ²ω²)`.
    pub fn spectral_density(&self, omega: f64) -> f64 {
        let w2 = omega * omega;
        let detune = w2 - self.omega0 * self.omega0;
        8.0 * self.kappa * self.kappa * self.gamma * self.omega0 * omega
            / (detune * detune + 4.0 * self.gamma * self.gamma * w2)
    }

    /// Closed-form reorganization energy `κ²/ω₀`.
    pub fn reorganization_energy(&self) -> f64 {
        self.kappa * self.kappa / self.omega0
    }

    /// `(1/2π) ∫₀^∞ J(ω)/ω dω` by adaptive quadrature; must reproduce
    /// [`BathSpec::reorganization_energy`].
    pub fn reorganization_energy_quadrature(&self) -> Result<f64> {
        let integrand = |w: f64| {
            let w2 = w * w;
            let detune = w2 - self.omega0 * self.omega0;
            8.0 * self.kappa * self.kappa * self.gamma * self.omega0
                / (detune * detune + 4.0 * self.gamma * self.gamma * w2)
        };
        let value = self.semi_infinite(&integrand, &self.resonance_breaks(), 0.0)?;
        Ok(value / (2.0 * PI))
    }

    /// Coefficient of the short-time Gaussian exponent `Q₂(t) = ξt²`:
    /// `ξ = E_r/β + κ²ω₀/(π√(ω₀²−γ²)) · Im ψ(1 + β(γ + i√(ω₀²−γ²))/2π)`.
    pub fn xi(&self) -> Result<f64> {
        if self.gamma >= self.omega0 {
            return Err(Error::invalid("bath.gamma", "xi requires gamma < omega0"));
        }
        let damped = (self.omega0 * self.omega0 - self.gamma * self.gamma).sqrt();
        let z = Complex64::new(1.0, 0.0) + self.beta * Complex64::new(self.gamma, damped) / (2.0 * PI);
        let k2 = self.kappa * self.kappa;
        Ok(self.reorganization_energy() / self.beta + k2 * self.omega0 / (PI * damped) * digamma(z).im)
    }

    /// Bath correlation exponents `Q₁(t)`, `Q₂(t)`.
    pub fn exponents(&self, t: f64, mode: ExponentMode) -> Result<BathExponents> {
        if !(t >= 0.0) {
            return Err(Error::invalid("t", "bath exponents need t >= 0"));
        }
        let (q1, q2) = match mode {
            ExponentMode::ShortTime => {
                let xi = self.xi()?;
                (self.reorganization_energy() * t, xi * t * t)
            }
            ExponentMode::Exact => self.exact_exponents(t)?,
        };
        Ok(BathExponents { q1, q2, mode })
    }

    fn exact_exponents(&self, t: f64) -> Result<(f64, f64)> {
        if t == 0.0 {
            return Ok((0.0, 0.0));
        }
        let pref = 8.0 * self.kappa * self.kappa * self.gamma * self.omega0;
        let j_over_w2 = move |w: f64| {
            let w2 = w * w;
            let detune = w2 - self.omega0 * self.omega0;
            pref / (w * (detune * detune + 4.0 * self.gamma * self.gamma * w2))
        };
        let beta = self.beta;
        let q1_integrand = |w: f64| j_over_w2(w) * (w * t).sin();
        let q2_integrand = |w: f64| {
            let s = (0.5 * w * t).sin();
            j_over_w2(w) * 2.0 * s * s / (0.5 * beta * w).tanh()
        };
        let mut breaks = self.resonance_breaks();
        let half_period = PI / t;
        breaks.push(half_period);
        let q1 = self
            .semi_infinite(&q1_integrand, &breaks, half_period)
            .map_err(|e| retag(e, t))?;
        let q2 = self
            .semi_infinite(&q2_integrand, &breaks, half_period)
            .map_err(|e| retag(e, t))?;
        Ok((q1 / (2.0 * PI), q2 / (2.0 * PI)))
    }

    fn resonance_breaks(&self) -> Vec<f64> {
        let mut b = vec![self.omega0 - self.gamma, self.omega0, self.omega0 + self.gamma];
        b.retain(|&x| x > 0.0);
        b
    }

    /// Integrate over `[0, ∞)` with an initial cutoff `ω₀ + 40γ`, doubled
    /// until the next tail slab contributes below 1e-8 of the running total.
    /// `period` > 0 splits panels at that spacing (oscillatory integrands).
    fn semi_infinite<F: Fn(f64) -> f64>(&self, f: &F, interior: &[f64], period: f64) -> Result<f64> {
        let tol = Tolerance {
            abs: 1e-14,
            rel: 1e-11,
            max_intervals: 20_000,
        };
        let mut cutoff = self.omega0 + 40.0 * self.gamma;
        let fail = |reason: String| Error::Quadrature { t: f64::NAN, reason };
        let mut total = quadrature::integrate_panels(f, &panel_breaks(0.0, cutoff, interior, period), tol)
            .map_err(fail)?
            .value;
        for _ in 0..30 {
            let tail = quadrature::integrate_panels(f, &panel_breaks(cutoff, 2.0 * cutoff, &[], period), tol)
                .map_err(fail)?
                .value;
            total += tail;
            cutoff *= 2.0;
            if tail.abs() < 1e-8 * total.abs().max(1e-300) {
                return Ok(total);
            }
        }
        Err(fail("frequency cutoff did not converge".into()))
    }
}

fn retag(e: Error, t: f64) -> Error {
    match e {
        Error::Quadrature { reason, .. } => Error::Quadrature { t, reason },
        other => other,
    }
}

fn panel_breaks(a: f64, b: f64, interior: &[f64], period: f64) -> Vec<f64> {
    let mut pts = vec![a, b];
    pts.extend(interior.iter().copied().filter(|&x| x > a && x < b));
    if period > 0.0 {
        let first = (a / period).floor() as i64 + 1;
        let mut k = first;
        // cap the panel count; the adaptive bisection handles the rest
        while (k as f64) * period < b && k - first < 20_000 {
            pts.push(k as f64 * period);
            k += 1;
        }
    }
    pts.sort_by(|x, y| x.total_cmp(y));
    pts.dedup_by(|x, y| (*x - *y).abs() < 1e-15);
    pts
}

/// Exponent threshold beyond which `e^{−Q₂}` is treated as zero when
/// truncating memory integrals.
pub const MEMORY_CUTOFF: f64 = 46.0;

/// Bath correlation exponents as consumed by the kernel builders.
#[derive(Debug, Clone, PartialEq)]
pub enum BathModel {
    ShortTime { reorganization: f64, xi: f64 },
    Tabulated { dt: f64, q1: Vec<f64>, q2: Vec<f64> },
}

impl BathModel {
    pub fn short_time(bath: &BathSpec) -> Result<Self> {
        bath.validate()?;
        Ok(BathModel::ShortTime {
            reorganization: bath.reorganization_energy(),
            xi: bath.xi()?,
        })
    }

    /// Exact exponents sampled at `n·dt`, `n < len`, linearly interpolated.
    pub fn tabulated(bath: &BathSpec, dt: f64, len: usize) -> Result<Self> {
        bath.validate()?;
        let mut q1 = Vec::with_capacity(len);
        let mut q2 = Vec::with_capacity(len);
        for n in 0..len {
            let e = bath.exponents(n as f64 * dt, ExponentMode::Exact)?;
            q1.push(e.q1);
            q2.push(e.q2);
        }
        Ok(BathModel::Tabulated { dt, q1, q2 })
    }

    pub fn build(bath: &BathSpec, mode: ExponentMode, dt: f64, len: usize) -> Result<Self> {
        match mode {
            ExponentMode::ShortTime => Self::short_time(bath),
            ExponentMode::Exact => Self::tabulated(bath, dt, len),
        }
    }

    /// `(Q₁(t), Q₂(t))`.
    #[inline]
    pub fn exponents(&self, t: f64) -> (f64, f64) {
        match self {
            BathModel::ShortTime { reorganization, xi } => (reorganization * t, xi * t * t),
            BathModel::Tabulated { dt, q1, q2 } => {
                let x = t / dt;
                let last = q1.len() - 1;
                if x >= last as f64 {
                    return (q1[last], q2[last]);
                }
                let i = x.floor() as usize;
                let f = x - i as f64;
                (
                    q1[i] + f * (q1[i + 1] - q1[i]),
                    q2[i] + f * (q2[i + 1] - q2[i]),
                )
            }
        }
    }

    /// Smallest time after which `Q₂ > MEMORY_CUTOFF` (memory integrals
    /// may be truncated there); infinite if `Q₂` never gets that large.
    pub fn memory_support(&self) -> f64 {
        match self {
            BathModel::ShortTime { xi, .. } => {
                if *xi > 0.0 {
                    (MEMORY_CUTOFF / xi).sqrt()
                } else {
                    f64::INFINITY
                }
            }
            BathModel::Tabulated { dt, q2, .. } => q2
                .iter()
                .position(|&q| q > MEMORY_CUTOFF)
                .map(|i| i as f64 * dt)
                .unwrap_or(f64::INFINITY),
        }
    }

    /// `ξ` for the short-time model; estimated from the curvature of the
    /// first tabulated samples otherwise.
    pub fn gaussian_rate(&self) -> f64 {
        match self {
            BathModel::ShortTime { xi, .. } => *xi,
            BathModel::Tabulated { dt, q2, .. } => {
                if q2.len() > 1 {
                    q2[1] / (dt * dt)
                } else {
                    0.0
                }
            }
        }
    }
}
