//! Noise-averaged memory kernels on a uniform time grid.
//!
//! Single-time kernels are cumulative integrals `Γ(t) = c ∫₀^t E(u) S_j(u) du`
//! in the lag variable `u = t − τ`; past the bath memory support the
//! integrand vanishes and the kernels stay constant. Two-time kernels
//! `Γ₃ⱼ(t₁,t₂)`, `Γ₄ⱼ(t₁,t₂)` are tabulated per anchor `t₂` over the lag
//! `d = t₁ − t₂`.

use crate::bath::{BathModel, BathSpec, ExponentMode};
use crate::dynamics::SystemSpec;
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::io::Write;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Uniform grid `tₙ = n·dt`, `n = 0..len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub len: usize,
}

impl TimeGrid {
    /// Smallest grid with step `dt` reaching `horizon`.
    pub fn new(dt: f64, horizon: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("grid.dt", "must be finite and > 0"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("grid.horizon", "must be finite and > 0"));
        }
        let steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
        Ok(TimeGrid { dt, len: steps + 1 })
    }

    pub fn horizon(&self) -> f64 {
        (self.len - 1) as f64 * self.dt
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(|n| self.time(n))
    }

    /// Index of the grid node nearest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.len - 1)
    }
}

/// Largest admissible step: `0.02·min(1/(|ε₀|+Ω), 1/√ξ, 1/ν)`.
pub fn resolution_bound(xi: f64, system: &SystemSpec, noise: &NoiseSpec) -> f64 {
    let scales = [
        1.0 / (system.epsilon0.abs() + noise.omega_n),
        1.0 / xi.max(0.0).sqrt(),
        1.0 / noise.nu,
    ];
    0.02 * scales.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Bath × bias factors entering the kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Elementary {
    /// `e^{−Q₂}cos Q₁ cos ε₀t`
    Cc,
    /// `e^{−Q₂}cos Q₁ sin ε₀t`
    Cs,
    /// `e^{−Q₂}sin Q₁ sin ε₀t`
    Ss,
    /// `e^{−Q₂}sin Q₁ cos ε₀t`
    Sc,
    /// `e^{−Q₂}cos Q₁ e^{+iε₀t}`
    CPlus,
    /// `e^{−Q₂}cos Q₁ e^{−iε₀t}`
    CMinus,
    /// `e^{−Q₂} e^{i(Q₁+ε₀t)}`
    FPlus,
    /// `e^{−Q₂} e^{i(Q₁−ε₀t)}`
    FMinus,
}

impl Elementary {
    pub const ALL: [Elementary; 8] = [
        Elementary::Cc,
        Elementary::Cs,
        Elementary::Ss,
        Elementary::Sc,
        Elementary::CPlus,
        Elementary::CMinus,
        Elementary::FPlus,
        Elementary::FMinus,
    ];

    pub fn eval(self, t: f64, bath: &BathModel, epsilon0: f64) -> Complex64 {
        let (q1, q2) = bath.exponents(t);
        let damp = (-q2).exp();
        let w = epsilon0 * t;
        let real = |x: f64| Complex64::new(damp * x, 0.0);
        match self {
            Elementary::Cc => real(q1.cos() * w.cos()),
            Elementary::Cs => real(q1.cos() * w.sin()),
            Elementary::Ss => real(q1.sin() * w.sin()),
            Elementary::Sc => real(q1.sin() * w.cos()),
            Elementary::CPlus => Complex64::from_polar(damp * q1.cos(), w),
            Elementary::CMinus => Complex64::from_polar(damp * q1.cos(), -w),
            Elementary::FPlus => Complex64::from_polar(damp, q1 + w),
            Elementary::FMinus => Complex64::from_polar(damp, q1 - w),
        }
    }
}

/// Labels of the tabulated single-time kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Single {
    G11,
    G12,
    G21,
    G22,
    G51,
    G52,
    G61,
    G62,
}

impl Single {
    pub const ALL: [Single; 8] = [
        Single::G11,
        Single::G12,
        Single::G21,
        Single::G22,
        Single::G51,
        Single::G52,
        Single::G61,
        Single::G62,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Single::G11 => "G11",
            Single::G12 => "G12",
            Single::G21 => "G21",
            Single::G22 => "G22",
            Single::G51 => "G51",
            Single::G52 => "G52",
            Single::G61 => "G61",
            Single::G62 => "G62",
        }
    }

    /// (integrand factor, propagator index, prefactor in units of V², extra `i`).
    fn recipe(self, form: KernelForm) -> (Elementary, usize, f64, bool) {
        let (c5, c6) = match form {
            KernelForm::Trajectory => (Elementary::CPlus, Elementary::CMinus),
            KernelForm::Literal => (Elementary::CMinus, Elementary::CPlus),
        };
        match self {
            Single::G11 => (Elementary::Cc, 0, 4.0, false),
            Single::G12 => (Elementary::Cs, 1, 4.0, true),
            Single::G21 => (Elementary::Ss, 0, 4.0, false),
            Single::G22 => (Elementary::Sc, 1, 4.0, true),
            Single::G51 => (c5, 0, 2.0, false),
            Single::G52 => (c5, 1, 2.0, false),
            Single::G61 => (c6, 0, 2.0, false),
            Single::G62 => (c6, 1, 2.0, false),
        }
    }
}

/// Two-time kernel families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TwoTime {
    G31,
    G32,
    G41,
    G42,
}

impl TwoTime {
    pub const ALL: [TwoTime; 4] = [TwoTime::G31, TwoTime::G32, TwoTime::G41, TwoTime::G42];

    fn is_three(self) -> bool {
        matches!(self, TwoTime::G31 | TwoTime::G32)
    }

    fn propagator(self) -> usize {
        match self {
            TwoTime::G31 | TwoTime::G41 => 0,
            TwoTime::G32 | TwoTime::G42 => 1,
        }
    }
}

/// Bias placement in the σ± kernels.
///
/// `Trajectory` is the exact noise average of the per-path kernels with phase
/// `ε₀u + Ω∫α`: `Γ₅·` carries `𝓔_c+`, `Γ₆·` carries `𝓔_c−`, and the two-time
/// kernels are `V²∫e^{−Q₂+iQ₁}(d + w)e^{∓iε₀w}S_j(w)dw` for `Γ₃·`/`Γ₄·`.
/// `Literal` keeps `𝓔_c−` on `Γ₅·`, `𝓔_c+` on `Γ₆·` and
/// `𝓔_f±(d + w)e^{±iε₀w}` on the two-time kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelForm {
    #[default]
    Trajectory,
    Literal,
}

impl KernelForm {
    // (bias inside the lag factor, sign of e^{iε₀w}) for the Γ₃· and Γ₄· families
    fn two_time(self, three: bool) -> (f64, f64) {
        match (self, three) {
            (KernelForm::Trajectory, true) => (0.0, -1.0),
            (KernelForm::Trajectory, false) => (0.0, 1.0),
            (KernelForm::Literal, true) => (1.0, 1.0),
            (KernelForm::Literal, false) => (-1.0, -1.0),
        }
    }

    fn lag_factor(t: f64, bath: &BathModel, bias: f64) -> Complex64 {
        let (q1, q2) = bath.exponents(t);
        Complex64::from_polar((-q2).exp(), q1 + bias * t)
    }
}

/// Precomputed kernels for one parameter point; immutable after build.
#[derive(Debug, Clone)]
pub struct KernelTable {
    grid: TimeGrid,
    epsilon0: f64,
    v2: f64,
    form: KernelForm,
    noise: NoiseSpec,
    bath: BathModel,
    support: f64,
    // lag samples up to the memory support
    s: [Vec<Complex64>; 2],
    // lag factors of the Γ₃· and Γ₄· families
    f3: Vec<Complex64>,
    f4: Vec<Complex64>,
    single: Vec<[Complex64; 8]>,
    // integrands, the time derivatives of `single`
    rate: Vec<[Complex64; 8]>,
}

impl KernelTable {
    pub fn build(
        grid: TimeGrid,
        bath: &BathSpec,
        exponents: ExponentMode,
        system: &SystemSpec,
        noise: &NoiseSpec,
    ) -> Result<Self> {
        Self::build_with(grid, bath, exponents, system, noise, KernelForm::default())
    }

    pub fn build_with(
        grid: TimeGrid,
        bath: &BathSpec,
        exponents: ExponentMode,
        system: &SystemSpec,
        noise: &NoiseSpec,
        form: KernelForm,
    ) -> Result<Self> {
        bath.validate()?;
        system.validate()?;
        noise.validate()?;
        let bound = resolution_bound(bath.xi()?, system, noise);
        if grid.dt > bound {
            return Err(Error::GridResolution { dt: grid.dt, bound });
        }
        let model = match exponents {
            ExponentMode::ShortTime => BathModel::short_time(bath)?,
            ExponentMode::Exact => tabulate_until_support(bath, grid)?,
        };
        Ok(Self::from_model_with(grid, model, system, noise, form))
    }

    /// Build from an explicit bath model, bypassing the resolution guard.
    pub fn from_model(grid: TimeGrid, bath: BathModel, system: &SystemSpec, noise: &NoiseSpec) -> Self {
        Self::from_model_with(grid, bath, system, noise, KernelForm::default())
    }

    pub fn from_model_with(grid: TimeGrid, bath: BathModel, system: &SystemSpec, noise: &NoiseSpec, form: KernelForm) -> Self {
        let support = bath.memory_support();
        let lags = if support.is_finite() {
            ((support / grid.dt).ceil() as usize + 2).min(grid.len)
        } else {
            grid.len
        };
        let mut s0 = Vec::with_capacity(lags);
        let mut s1 = Vec::with_capacity(lags);
        for n in 0..lags {
            let (a, b) = noise.propagators(grid.time(n));
            s0.push(a);
            s1.push(b);
        }
        let s = [s0, s1];
        let elem: Vec<Vec<Complex64>> = Elementary::ALL
            .iter()
            .map(|e| (0..lags).map(|n| e.eval(grid.time(n), &bath, system.epsilon0)).collect())
            .collect();
        let v2 = system.v * system.v;
        let samples: Vec<Vec<Complex64>> = Single::ALL
            .iter()
            .map(|k| {
                let (e, j, c, imag) = k.recipe(form);
                let idx = Elementary::ALL.iter().position(|x| *x == e).unwrap_or(0);
                let scale = if imag { Complex64::new(0.0, c * v2) } else { Complex64::new(c * v2, 0.0) };
                (0..lags).map(|n| elem[idx][n] * s[j][n] * scale).collect()
            })
            .collect();
        let h = grid.dt;
        let rate: Vec<[Complex64; 8]> = (0..lags).map(|n| std::array::from_fn(|k| samples[k][n])).collect();
        let mut single = Vec::with_capacity(lags);
        single.push([ZERO; 8]);
        let mut trap = [ZERO; 8];
        for n in 1..lags {
            let mut row = [ZERO; 8];
            for (k, f) in samples.iter().enumerate() {
                trap[k] += 0.5 * h * (f[n - 1] + f[n]);
                row[k] = trap[k] + endpoint_correction(&f[..=n], h).unwrap_or(ZERO);
            }
            single.push(row);
        }
        let lag = |three: bool| {
            let (bias, _) = form.two_time(three);
            (0..lags).map(|n| KernelForm::lag_factor(grid.time(n), &bath, bias * system.epsilon0)).collect::<Vec<_>>()
        };
        let f3 = lag(true);
        let f4 = lag(false);
        KernelTable {
            grid,
            epsilon0: system.epsilon0,
            v2,
            form,
            noise: *noise,
            bath,
            support,
            s,
            f3,
            f4,
            single,
            rate,
        }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn bath_model(&self) -> &BathModel {
        &self.bath
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn epsilon0(&self) -> f64 {
        self.epsilon0
    }

    pub fn form(&self) -> KernelForm {
        self.form
    }

    /// `V²`.
    pub fn v_squared(&self) -> f64 {
        self.v2
    }

    /// Lag beyond which every integrand is treated as zero.
    pub fn memory_support(&self) -> f64 {
        self.support
    }

    /// Number of tabulated lag samples.
    pub fn lag_len(&self) -> usize {
        self.single.len()
    }

    /// All single-time kernels at `t`, cubic Hermite between nodes.
    #[inline]
    pub fn singles_at(&self, t: f64) -> [Complex64; 8] {
        let h = self.grid.dt;
        let x = (t / h).max(0.0);
        let last = self.single.len() - 1;
        if x >= last as f64 {
            return self.single[last];
        }
        let i = x as usize;
        let th = x - i as f64;
        let th2 = th * th;
        let th3 = th2 * th;
        let h00 = 2.0 * th3 - 3.0 * th2 + 1.0;
        let h10 = (th3 - 2.0 * th2 + th) * h;
        let h01 = -2.0 * th3 + 3.0 * th2;
        let h11 = (th3 - th2) * h;
        let (a, b) = (&self.single[i], &self.single[i + 1]);
        let (da, db) = (&self.rate[i], &self.rate[i + 1]);
        let mut out = [ZERO; 8];
        for k in 0..8 {
            out[k] = h00 * a[k] + h01 * b[k] + h10 * da[k] + h11 * db[k];
        }
        out
    }

    pub fn single(&self, which: Single, t: f64) -> Complex64 {
        self.singles_at(t)[which as usize]
    }

    /// Single-time kernel value at grid node `n`.
    pub fn single_at_node(&self, which: Single, n: usize) -> Complex64 {
        self.single[n.min(self.single.len() - 1)][which as usize]
    }

    /// `Γ(t₁, t₂)` by trapezoid over `w = t₂ − τ` on nodes `m·dt`, with a
    /// final partial step when `t₂` is off-grid.
    pub fn two_time(&self, which: TwoTime, t1: f64, t2: f64) -> Result<Complex64> {
        if t1 < t2 {
            return Err(Error::TimeOrder { t1, t2 });
        }
        if t2 <= 0.0 {
            return Ok(ZERO);
        }
        let d = t1 - t2;
        if d > self.support {
            return Ok(ZERO);
        }
        let (bias, sign) = self.form.two_time(which.is_three());
        let j = which.propagator();
        let upper = t2;
        let f = |w: f64| {
            let (s0, s1) = self.noise.propagators(w);
            let s = if j == 0 { s0 } else { s1 };
            KernelForm::lag_factor(d + w, &self.bath, bias * self.epsilon0) * Complex64::from_polar(1.0, sign * self.epsilon0 * w) * s
        };
        let nodes = (upper / self.grid.dt - 1e-9).ceil().max(1.0) as usize;
        let h = upper / nodes as f64;
        let vals: Vec<Complex64> = (0..=nodes).map(|m| f(m as f64 * h)).collect();
        Ok(self.v2 * trapezoid(&vals, h))
    }

    /// Tabulate the two-time kernels at anchor node `t2 = n2·dt` over lags
    /// `d = k·dt` inside the memory support.
    pub fn two_time_table(&self, n2: usize) -> TwoTimeTable {
        let dt = self.grid.dt;
        let lag_nodes = self.f3.len();
        let mut values = Vec::new();
        if n2 == 0 {
            return TwoTimeTable { t2: 0.0, dt, values };
        }
        // phases e^{±iε₀w} on the anchor window
        let window = n2.min(lag_nodes - 1);
        let (_, sign3) = self.form.two_time(true);
        let (_, sign4) = self.form.two_time(false);
        let phase = |sign: f64| -> Vec<Complex64> {
            (0..=window).map(|m| Complex64::from_polar(1.0, sign * self.epsilon0 * m as f64 * dt)).collect()
        };
        let (p3, p4) = (phase(sign3), phase(sign4));
        let mut buf: [Vec<Complex64>; 4] = Default::default();
        for k in 0..lag_nodes {
            let m_end = window.min(lag_nodes - 1 - k);
            for b in buf.iter_mut() {
                b.clear();
            }
            for m in 0..=m_end {
                let a = self.f3[k + m] * p3[m];
                let b = self.f4[k + m] * p4[m];
                let (s0, s1) = (self.s[0][m], self.s[1][m]);
                buf[0].push(a * s0);
                buf[1].push(a * s1);
                buf[2].push(b * s0);
                buf[3].push(b * s1);
            }
            let mut row = [ZERO; 4];
            for (r, b) in row.iter_mut().zip(&buf) {
                *r = self.v2 * trapezoid(b, dt);
            }
            values.push(row);
        }
        TwoTimeTable {
            t2: n2 as f64 * dt,
            dt,
            values,
        }
    }

    /// Write the single-time kernels as CSV (`t`, then Re/Im per kernel).
    pub fn dump<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "# kernel table dt={} lag_nodes={} support={}", self.grid.dt, self.single.len(), self.support)?;
        let mut header = String::from("t");
        for k in Single::ALL {
            header.push_str(&format!(",re_{0},im_{0}", k.label()));
        }
        writeln!(out, "{header}")?;
        for (n, row) in self.single.iter().enumerate() {
            let mut line = crate::experiment::fmt_f64(self.grid.time(n));
            for v in row {
                line.push(',');
                line.push_str(&crate::experiment::fmt_f64(v.re));
                line.push(',');
                line.push_str(&crate::experiment::fmt_f64(v.im));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Trapezoid sum with third-order endpoint corrections (Gregory).
pub(crate) fn trapezoid(f: &[Complex64], h: f64) -> Complex64 {
    let n = f.len();
    if n < 2 {
        return ZERO;
    }
    let mut acc = 0.5 * (f[0] + f[n - 1]);
    for v in &f[1..n - 1] {
        acc += v;
    }
    acc * h + endpoint_correction(f, h).unwrap_or(ZERO)
}

/// `−h²/12 (f′(end) − f′(0))` with one-sided three-point differences.
pub(crate) fn endpoint_correction(f: &[Complex64], h: f64) -> Option<Complex64> {
    let n = f.len();
    if n < 3 {
        return None;
    }
    let start = -3.0 * f[0] + 4.0 * f[1] - f[2];
    let end = 3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3];
    Some(-h / 24.0 * (end - start))
}

fn tabulate_until_support(bath: &BathSpec, grid: TimeGrid) -> Result<BathModel> {
    let mut q1 = Vec::new();
    let mut q2 = Vec::new();
    for n in 0..grid.len {
        let e = bath.exponents(grid.time(n), ExponentMode::Exact)?;
        q1.push(e.q1);
        q2.push(e.q2);
        if e.q2 > crate::bath::MEMORY_CUTOFF {
            break;
        }
    }
    Ok(BathModel::Tabulated { dt: grid.dt, q1, q2 })
}

/// Two-time kernels at a fixed anchor over the lag `d = t₁ − t₂`.
#[derive(Debug, Clone)]
pub struct TwoTimeTable {
    t2: f64,
    dt: f64,
    values: Vec<[Complex64; 4]>,
}

impl TwoTimeTable {
    /// Table that is identically zero (QRT mode, or anchor at the origin).
    pub fn zero(t2: f64, dt: f64) -> Self {
        TwoTimeTable {
            t2,
            dt,
            values: Vec::new(),
        }
    }

    pub(crate) fn from_rows(t2: f64, dt: f64, values: Vec<[Complex64; 4]>) -> Self {
        TwoTimeTable { t2, dt, values }
    }

    pub fn anchor(&self) -> f64 {
        self.t2
    }

    /// `(Γ₃₁, Γ₃₂, Γ₄₁, Γ₄₂)` at `t₁`, zero past the tabulated lags.
    #[inline]
    pub fn at(&self, t1: f64) -> [Complex64; 4] {
        let x = ((t1 - self.t2) / self.dt).max(0.0);
        let i = x as usize;
        if i + 1 >= self.values.len() {
            return [ZERO; 4];
        }
        let f = x - i as f64;
        let (a, b) = (&self.values[i], &self.values[i + 1]);
        let mut out = [ZERO; 4];
        for k in 0..4 {
            out[k] = a[k] + f * (b[k] - a[k]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, Tolerance};
    use approx::assert_relative_eq;

    fn reference_bath() -> BathSpec {
        BathSpec::new(2.0, 1.0, 0.5, 0.02).unwrap()
    }

    fn system(eps: f64) -> SystemSpec {
        SystemSpec {
            epsilon0: eps,
            v: 1.0,
            initial_sz: 1.0,
        }
    }

    fn table(eps: f64, omega: f64, nu: f64, horizon: f64, refine: f64) -> KernelTable {
        let bath = reference_bath();
        let sys = system(eps);
        let noise = NoiseSpec::new(omega, nu, 0).unwrap();
        let dt = resolution_bound(bath.xi().unwrap(), &sys, &noise) / refine;
        KernelTable::build(TimeGrid::new(dt, horizon).unwrap(), &bath, ExponentMode::ShortTime, &sys, &noise).unwrap()
    }

    fn complex_quad(f: impl Fn(f64) -> Complex64, a: f64, b: f64) -> Complex64 {
        let tol = Tolerance {
            abs: 1e-15,
            rel: 1e-12,
            max_intervals: 10_000,
        };
        let re = integrate(|x| f(x).re, a, b, tol).unwrap().value;
        let im = integrate(|x| f(x).im, a, b, tol).unwrap().value;
        Complex64::new(re, im)
    }

    #[test]
    fn elementary_values() {
        let bath = BathModel::short_time(&reference_bath()).unwrap();
        assert_eq!(Elementary::FPlus.eval(0.0, &bath, 1.0), Complex64::new(1.0, 0.0));
        assert_eq!(Elementary::Cc.eval(0.0, &bath, 1.0).re, 1.0);
        assert_eq!(Elementary::Ss.eval(0.0, &bath, 1.0).re, 0.0);
        for t in [0.1, 0.5, 2.0] {
            assert_eq!(Elementary::Ss.eval(t, &bath, 0.0).norm(), 0.0);
        }
        let xi: f64 = 200.006_651_159_53;
        let want = (-xi).exp() * 4f64.cos() * 1f64.cos();
        let got = Elementary::Cc.eval(1.0, &bath, 1.0).re;
        assert!((got - want).abs() <= 1e-12 * want.abs() + 1e-300);
        let cold = BathModel::short_time(&BathSpec::new(2.0, 1.0, 0.5, 50.0).unwrap()).unwrap();
        let want = (-1.541_278_879_450_52f64).exp() * 4f64.cos() * 1f64.cos();
        assert_relative_eq!(Elementary::Cc.eval(1.0, &cold, 1.0).re, want, max_relative = 1e-12);
    }

    #[test]
    fn kernels_vanish_at_origin_and_without_noise() {
        let t = table(1.0, 0.0, 1.0, 3.0, 1.0);
        assert!(t.singles_at(0.0).iter().all(|v| v.norm() == 0.0));
        for n in 0..t.lag_len() {
            for k in [Single::G12, Single::G22, Single::G52, Single::G62] {
                assert!(t.single_at_node(k, n).norm() < 1e-12);
            }
        }
        assert_eq!(t.two_time(TwoTime::G32, 1.0, 0.5).unwrap().norm(), 0.0);
        assert_eq!(t.two_time(TwoTime::G42, 1.0, 0.5).unwrap().norm(), 0.0);
        assert_eq!(t.two_time(TwoTime::G31, 1.0, 0.0).unwrap().norm(), 0.0);
    }

    #[test]
    fn resolution_guard() {
        let bath = reference_bath();
        let sys = system(1.0);
        let noise = NoiseSpec::new(0.75, 1.0, 0).unwrap();
        let grid = TimeGrid::new(0.01, 1.0).unwrap();
        let err = KernelTable::build(grid, &bath, ExponentMode::ShortTime, &sys, &noise).unwrap_err();
        assert!(matches!(err, Error::GridResolution { .. }));
    }

    #[test]
    fn g11_matches_refined_quadrature() {
        let t = table(1.0, 0.75, 1.0, 2.0, 1.0);
        let bath = t.bath_model().clone();
        let noise = *t.noise();
        let end = t.grid().horizon();
        let f = |u: f64| 4.0 * Elementary::Cc.eval(u, &bath, 1.0) * noise.propagators(u).0;
        let exact = complex_quad(f, 0.0, end);
        let got = t.single(Single::G11, end);
        assert_relative_eq!(got.re, exact.re, max_relative = 1e-6);
    }

    #[test]
    fn grid_doubling_converges() {
        let coarse = table(1.0, 0.75, 1.0, 2.0, 1.0);
        let fine = table(1.0, 0.75, 1.0, 2.0, 2.0);
        for n in (0..coarse.lag_len()).step_by(7) {
            let tn = coarse.grid().time(n);
            for k in Single::ALL {
                let a = coarse.single(k, tn);
                let b = fine.single(k, tn);
                let scale = fine.single(k, 2.0).norm().max(1e-300);
                assert!((a - b).norm() <= 1e-4 * scale, "{k:?} at {tn}");
            }
        }
    }

    #[test]
    fn two_time_equal_times_matches_quadrature() {
        let t = table(1.0, 0.75, 1.0, 2.0, 1.0);
        let bath = t.bath_model().clone();
        let noise = *t.noise();
        let t2 = 0.3;
        let f = |w: f64| {
            Elementary::FPlus.eval(w, &bath, 0.0) * Complex64::from_polar(1.0, -w) * noise.propagators(w).0
        };
        let exact = complex_quad(f, 0.0, t2);
        let got = t.two_time(TwoTime::G31, t2, t2).unwrap();
        assert!((got - exact).norm() < 1e-6 * exact.norm(), "{got} {exact}");
    }

    #[test]
    fn literal_form_keeps_table_factors() {
        let t = table(1.0, 0.75, 1.0, 2.0, 1.0);
        let lit = KernelTable::from_model_with(t.grid(), t.bath_model().clone(), &system(1.0), t.noise(), KernelForm::Literal);
        let bath = t.bath_model().clone();
        let noise = *t.noise();
        let (t1, t2) = (0.35, 0.3);
        let f = |w: f64| {
            Elementary::FMinus.eval(t1 - t2 + w, &bath, 1.0) * Complex64::from_polar(1.0, -w) * noise.propagators(w).1
        };
        let exact = complex_quad(f, 0.0, t2);
        let got = lit.two_time(TwoTime::G42, t1, t2).unwrap();
        assert!((got - exact).norm() < 1e-6 * exact.norm(), "{got} {exact}");
        // Γ₅· and Γ₆· trade places between the forms
        let n = t.grid().index_of(1.5);
        assert_eq!(lit.single_at_node(Single::G51, n), t.single_at_node(Single::G61, n));
        assert_eq!(lit.single_at_node(Single::G62, n), t.single_at_node(Single::G52, n));
    }

    #[test]
    fn two_time_conjugation_and_table() {
        let t = table(1.0, 0.75, 1.0, 2.0, 1.0);
        let n2 = t.grid().index_of(1.0);
        let t2 = t.grid().time(n2);
        let tab = t.two_time_table(n2);
        for d in [0.0, 0.013, 0.05, 0.2] {
            let k = (d / t.grid().dt).round();
            let on_grid = t2 + k * t.grid().dt;
            let row = tab.at(on_grid);
            let direct = t.two_time(TwoTime::G32, on_grid, t2).unwrap();
            assert!((row[1] - direct).norm() < 1e-12 * (1.0 + direct.norm()), "d {d}");
        }
        assert_eq!(tab.at(t2 + 10.0), [ZERO; 4]);
        assert!(t.two_time(TwoTime::G31, 0.5, 1.0).is_err());
    }

    #[test]
    fn conjugation_without_reorganization_phase() {
        // with Q₁ ≡ 0 the two f-type factors are complex conjugates
        let sys = system(1.0);
        let noise = NoiseSpec::new(0.75, 1.0, 0).unwrap();
        let model = BathModel::ShortTime {
            reorganization: 0.0,
            xi: 200.0,
        };
        let grid = TimeGrid::new(1e-3, 2.0).unwrap();
        let t = KernelTable::from_model(grid, model, &sys, &noise);
        for (t1, t2) in [(1.0, 1.0), (1.05, 1.0), (0.5, 0.2)] {
            let g31 = t.two_time(TwoTime::G31, t1, t2).unwrap();
            let g41 = t.two_time(TwoTime::G41, t1, t2).unwrap();
            assert!((g41 - g31.conj()).norm() < 1e-12);
        }
    }

    #[test]
    fn kernels_bounded_by_envelope() {
        let t = table(0.0, 1.5, 0.3, 2.0, 1.0);
        let bath = t.bath_model().clone();
        let env = integrate(|u| (-bath.exponents(u).1).exp(), 0.0, 2.0, Tolerance::default()).unwrap().value;
        for n in 0..t.lag_len() {
            let row = t.singles_at(t.grid().time(n));
            for (k, v) in Single::ALL.iter().zip(row) {
                let c = if (*k as usize) < 4 { 4.0 } else { 2.0 };
                assert!(v.norm() <= c * env * (1.0 + 1e-9));
            }
        }
    }
}
