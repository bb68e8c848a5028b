//! Monte Carlo reference: the per-realization equations solved along sampled
//! telegraph paths, then averaged.
//!
//! Along a path the kernels carry the path phase
//! `Φ(t, u) = Ω(A(t) − A(t − u))`, `A` the primitive of α:
//!
//! ```text
//! Γ₁(t) = 4V² Re ∫ e^{−Q₂}cos Q₁ e^{i(ε₀u + Φ)} du
//! Γ₂(t) = 4V² Im ∫ e^{−Q₂}sin Q₁ e^{i(ε₀u + Φ)} du
//! Γ₅(t) = 2V²    ∫ e^{−Q₂}cos Q₁ e^{i(ε₀u + Φ)} du
//! Γ₃(t₁,t₂) = V² ∫ e^{−Q₂+iQ₁}(t₁ − t₂ + w) e^{+i(ε₀w + Φ(t₂, w))} dw
//! Γ₄(t₁,t₂) = V² ∫ e^{−Q₂+iQ₁}(t₁ − t₂ + w) e^{−i(ε₀w + Φ(t₂, w))} dw
//! ```
//!
//! Static bias and noise enter the phase together, so a path without flips
//! is a static bias `ε₀ ± Ω`. The exact noise average of these kernels is the
//! [`KernelForm::Trajectory`](crate::kernels::KernelForm::Trajectory) table. With state `(Z, P, M, z)` =
//! `(σz(t₁)σz(t₂), σ₊(t₁)σ₋(t₂), σ₋(t₁)σ₊(t₂), σz(t₁))` per path:
//!
//! ```text
//! dZ/dt₁ = −Γ₁Z − Γ₂ z(t₂) + 4Γ₃M + 4Γ₄P
//! dP/dt₁ = (iε(t₁) − Γ₅)P + Γ₃Z
//! dM/dt₁ = −(iε(t₁) + Γ₅*)M + Γ₄Z
//! dz/dt₁ = −Γ₁z − Γ₂
//! ```
//!
//! with `ε(t) = ε₀ + Ωα(t)`.

use crate::bath::BathModel;
use crate::dynamics::{Mode, SystemSpec};
use crate::error::{Error, Result};
use crate::kernels::{trapezoid, Elementary, KernelTable, TwoTimeTable};
use crate::noise::NoisePath;
use crate::ode::{self, OdeOptions};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Kernel labels evaluated along a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PathKernel {
    G1,
    G2,
    G3,
    G4,
    G5,
}

// Cumulative memory integrals of K(w)e^{i(ε₀ + Ωa)w}, K ∈ {e^{−Q₂}cos Q₁,
// e^{−Q₂}sin Q₁}, per sign a.
const FAMILIES: usize = 2;

/// Path-independent tables shared by every trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryKernels {
    dt: f64,
    lags: usize,
    epsilon0: f64,
    omega: f64,
    v2: f64,
    bath: BathModel,
    // [family][a = +1, −1]
    integrand: [[Vec<Complex64>; 2]; FAMILIES],
    cumulative: [[Vec<Complex64>; 2]; FAMILIES],
    // e^{−Q₂+iQ₁} on the lag grid
    lag_factor: Vec<Complex64>,
}

impl TrajectoryKernels {
    pub fn new(table: &KernelTable) -> Self {
        let grid = table.grid();
        let dt = grid.dt;
        let lags = table.lag_len();
        let bath = table.bath_model();
        let eps = table.epsilon0();
        let omega = table.noise().omega_n;
        let mut integrand: [[Vec<Complex64>; 2]; FAMILIES] = Default::default();
        let mut cumulative: [[Vec<Complex64>; 2]; FAMILIES] = Default::default();
        for fam in 0..FAMILIES {
            for (ai, a) in [1.0, -1.0].into_iter().enumerate() {
                let f: Vec<Complex64> = (0..lags).map(|n| family_integrand(fam, n as f64 * dt, bath, eps, omega * a)).collect();
                let mut cum = Vec::with_capacity(lags);
                cum.push(ZERO);
                let mut trap = ZERO;
                for n in 1..lags {
                    trap += 0.5 * dt * (f[n - 1] + f[n]);
                    cum.push(trap + crate::kernels::endpoint_correction(&f[..=n], dt).unwrap_or(ZERO));
                }
                integrand[fam][ai] = f;
                cumulative[fam][ai] = cum;
            }
        }
        let lag_factor = (0..lags).map(|n| Elementary::FPlus.eval(n as f64 * dt, bath, 0.0)).collect();
        TrajectoryKernels {
            dt,
            lags,
            epsilon0: eps,
            omega,
            v2: table.v_squared(),
            bath: bath.clone(),
            integrand,
            cumulative,
            lag_factor,
        }
    }

    fn window(&self) -> f64 {
        (self.lags - 1) as f64 * self.dt
    }

    // ∫₀^u of one family, cubic Hermite between nodes.
    #[inline]
    fn cum(&self, fam: usize, ai: usize, u: f64) -> Complex64 {
        let c = &self.cumulative[fam][ai];
        let f = &self.integrand[fam][ai];
        let x = u / self.dt;
        let i = (x as usize).min(self.lags - 1);
        if i + 1 >= self.lags {
            return c[self.lags - 1];
        }
        let th = x - i as f64;
        let th2 = th * th;
        let th3 = th2 * th;
        let h00 = 2.0 * th3 - 3.0 * th2 + 1.0;
        let h10 = th3 - 2.0 * th2 + th;
        let h01 = -2.0 * th3 + 3.0 * th2;
        let h11 = th3 - th2;
        h00 * c[i] + h01 * c[i + 1] + self.dt * (h10 * f[i] + h11 * f[i + 1])
    }

    /// `(Γ₁, Γ₂, Γ₅)` along `path` at time `t`, walking the flips inside the
    /// memory window.
    pub fn single(&self, path: &NoisePath, t: f64) -> Result<(f64, f64, Complex64)> {
        if !(0.0..=path.horizon()).contains(&t) {
            return Err(Error::OutOfHorizon { t, horizon: path.horizon() });
        }
        Ok(self.single_unchecked(path, t))
    }

    fn single_unchecked(&self, path: &NoisePath, t: f64) -> (f64, f64, Complex64) {
        let upper = t.min(self.window());
        // without coupling the flips only reorder rounding
        let flips = if self.omega == 0.0 { &[][..] } else { path.flip_times() };
        let hi = flips.partition_point(|&f| f < t);
        let lo = flips.partition_point(|&f| f <= t - upper);
        let mut a = path.initial_sign() as f64 * if hi % 2 == 0 { 1.0 } else { -1.0 };
        let mut acc = 0.0;
        let mut u_lo = 0.0;
        let mut sums = [ZERO; FAMILIES];
        let segment = |u_lo: f64, u_hi: f64, a: f64, acc: f64, sums: &mut [Complex64; FAMILIES]| {
            let ai = if a > 0.0 { 0 } else { 1 };
            let rot = Complex64::from_polar(1.0, acc - self.omega * a * u_lo);
            for (fam, s) in sums.iter_mut().enumerate() {
                *s += rot * (self.cum(fam, ai, u_hi) - self.cum(fam, ai, u_lo));
            }
        };
        for &f in flips[lo..hi].iter().rev() {
            let u_hi = t - f;
            segment(u_lo, u_hi, a, acc, &mut sums);
            acc += self.omega * a * (u_hi - u_lo);
            u_lo = u_hi;
            a = -a;
        }
        segment(u_lo, upper, a, acc, &mut sums);
        (4.0 * self.v2 * sums[0].re, 4.0 * self.v2 * sums[1].im, 2.0 * self.v2 * sums[0])
    }

    /// `(Γ₃, Γ₄)` along `path` at `(t₁, t₂)` on nodes spaced at most `dt`.
    pub fn two_time(&self, path: &NoisePath, t1: f64, t2: f64) -> Result<(Complex64, Complex64)> {
        if t1 < t2 {
            return Err(Error::TimeOrder { t1, t2 });
        }
        if t1 > path.horizon() || t2 < 0.0 {
            return Err(Error::OutOfHorizon { t: t1, horizon: path.horizon() });
        }
        let d = t1 - t2;
        if t2 == 0.0 || d > self.window() {
            return Ok((ZERO, ZERO));
        }
        let nodes = (t2 / self.dt - 1e-9).ceil().max(1.0) as usize;
        let h = t2 / nodes as f64;
        let mut g3 = Vec::new();
        let mut g4 = Vec::new();
        let a2 = path.integrate(0.0, t2)?;
        for m in 0..=nodes {
            let w = m as f64 * h;
            if d + w > self.window() + 1e-12 {
                break;
            }
            let phi = self.omega * (a2 - path.integrate(0.0, (t2 - w).max(0.0))?);
            let phase = Complex64::from_polar(1.0, self.epsilon0 * w + phi);
            let f = Elementary::FPlus.eval(d + w, &self.bath, 0.0);
            g3.push(f * phase);
            g4.push(f * phase.conj());
        }
        Ok((self.v2 * trapezoid(&g3, h), self.v2 * trapezoid(&g4, h)))
    }

    /// `(Γ₃, Γ₄)` at anchor node `n2` on lags `k·dt`, stored in the first and
    /// third columns of a [`TwoTimeTable`].
    fn two_time_rows(&self, path: &NoisePath, n2: usize) -> TwoTimeTable {
        let dt = self.dt;
        let t2 = n2 as f64 * dt;
        if n2 == 0 {
            return TwoTimeTable::zero(0.0, dt);
        }
        let window = n2.min(self.lags - 1);
        let a2 = path.primitive_unchecked(t2);
        let mut q3 = Vec::with_capacity(window + 1);
        let mut q4 = Vec::with_capacity(window + 1);
        for m in 0..=window {
            let w = m as f64 * dt;
            let phi = self.omega * (a2 - path.primitive_unchecked((t2 - w).max(0.0)));
            let phase = Complex64::from_polar(1.0, self.epsilon0 * w + phi);
            q3.push(phase);
            q4.push(phase.conj());
        }
        let mut rows = Vec::with_capacity(self.lags);
        let mut b3 = Vec::with_capacity(window + 1);
        let mut b4 = Vec::with_capacity(window + 1);
        for k in 0..self.lags {
            let m_end = window.min(self.lags - 1 - k);
            b3.clear();
            b4.clear();
            for m in 0..=m_end {
                b3.push(self.lag_factor[k + m] * q3[m]);
                b4.push(self.lag_factor[k + m] * q4[m]);
            }
            rows.push([self.v2 * trapezoid(&b3, dt), ZERO, self.v2 * trapezoid(&b4, dt), ZERO]);
        }
        TwoTimeTable::from_rows(t2, dt, rows)
    }

}

fn family_integrand(fam: usize, w: f64, bath: &BathModel, eps: f64, omega_a: f64) -> Complex64 {
    let (q1, q2) = bath.exponents(w);
    let damp = (-q2).exp();
    match fam {
        0 => Complex64::from_polar(damp * q1.cos(), (eps + omega_a) * w),
        _ => Complex64::from_polar(damp * q1.sin(), (eps + omega_a) * w),
    }
}

/// Single kernel along a path. `t2` is required for `G3` and `G4` and
/// ignored otherwise.
pub fn gamma_along_path(kernels: &TrajectoryKernels, which: PathKernel, t: f64, t2: Option<f64>, path: &NoisePath) -> Result<Complex64> {
    match which {
        PathKernel::G1 | PathKernel::G2 | PathKernel::G5 => {
            let (g1, g2, g5) = kernels.single(path, t)?;
            Ok(match which {
                PathKernel::G1 => Complex64::new(g1, 0.0),
                PathKernel::G2 => Complex64::new(g2, 0.0),
                _ => g5,
            })
        }
        PathKernel::G3 | PathKernel::G4 => {
            let t2 = t2.ok_or_else(|| Error::invalid("t2", "required for two-time kernels"))?;
            let (g3, g4) = kernels.two_time(path, t, t2)?;
            Ok(if which == PathKernel::G3 { g3 } else { g4 })
        }
    }
}

/// Per-path correlators: `z` on nodes `0..=n2`, the two-time series on
/// `t₁ = t₂ + k·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRun {
    pub path: NoisePath,
    pub t2: f64,
    pub sz_single: Vec<f64>,
    pub zz: Vec<Complex64>,
    pub sz: Vec<Complex64>,
    pub pm: Vec<Complex64>,
    pub mp: Vec<Complex64>,
}

/// Solve the per-path equations to `t₂ = n2·dt` and then over `n_tau`
/// further grid steps.
pub fn evolve_trajectory(
    kernels: &TrajectoryKernels,
    path: &NoisePath,
    system: &SystemSpec,
    n2: usize,
    n_tau: usize,
    mode: Mode,
    opts: &OdeOptions,
) -> Result<TrajectoryRun> {
    let dt = kernels.dt;
    let t2 = n2 as f64 * dt;
    let t_end = (n2 + n_tau) as f64 * dt;
    if t_end > path.horizon() * (1.0 + 1e-12) {
        return Err(Error::OutOfHorizon { t: t_end, horizon: path.horizon() });
    }
    // flips only matter when the noise couples
    let restarts: &[f64] = if kernels.omega == 0.0 { &[] } else { path.flip_times() };

    let outputs: Vec<f64> = (0..=n2).map(|n| n as f64 * dt).collect();
    let rhs = |t: f64, y: &[Complex64; 1]| {
        let (g1, g2, _) = kernels.single_unchecked(path, t);
        [-g1 * y[0] - g2]
    };
    let sol = ode::integrate(rhs, 0.0, [Complex64::new(system.initial_sz, 0.0)], &outputs, restarts, opts)?;
    let sz_single: Vec<f64> = sol.iter().map(|y| y[0].re).collect();
    let z2 = sz_single[n2];

    let two = match mode {
        Mode::Qrt => TwoTimeTable::zero(t2, dt),
        Mode::QrtPlus => kernels.two_time_rows(path, n2),
    };
    let eps = kernels.epsilon0;
    let omega = kernels.omega;
    let i = Complex64::i();
    let rhs = |t: f64, y: &[Complex64; 4]| {
        let (g1, g2, g5) = kernels.single_unchecked(path, t);
        let k = two.at(t);
        let (g3, g4) = (k[0], k[2]);
        let ie = i * (eps + omega * path.sign_at(t));
        [
            -g1 * y[0] - g2 * z2 + 4.0 * g3 * y[2] + 4.0 * g4 * y[1],
            (ie - g5) * y[1] + g3 * y[0],
            -(ie + g5.conj()) * y[2] + g4 * y[0],
            Complex64::new(-g1, 0.0) * y[3] - g2,
        ]
    };
    let outputs: Vec<f64> = (0..=n_tau).map(|k| (n2 + k) as f64 * dt).collect();
    let one = Complex64::new(1.0, 0.0);
    let y0 = [
        one,
        Complex64::new(0.5 * (1.0 + z2), 0.0),
        Complex64::new(0.5 * (1.0 - z2), 0.0),
        Complex64::new(z2, 0.0),
    ];
    let mut sol = ode::integrate(rhs, t2, y0, &outputs, restarts, opts)?;
    sol[0] = y0;
    Ok(TrajectoryRun {
        path: path.clone(),
        t2,
        sz_single,
        zz: sol.iter().map(|y| y[0]).collect(),
        pm: sol.iter().map(|y| y[1]).collect(),
        mp: sol.iter().map(|y| y[2]).collect(),
        sz: sol.iter().map(|y| y[3]).collect(),
    })
}

/// Sample mean with separate standard errors of the real and imaginary parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCEstimate {
    pub mean: Vec<Complex64>,
    pub stderr_re: Vec<f64>,
    pub stderr_im: Vec<f64>,
    pub n_paths: usize,
}

impl MCEstimate {
    /// `|Re(mean − reference)| / stderr_re` at each point; zero where both
    /// the difference and the error vanish.
    pub fn standardized_deviation_re(&self, reference: &[Complex64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(reference)
            .zip(&self.stderr_re)
            .map(|((m, r), s)| {
                let d = (m.re - r.re).abs();
                if d == 0.0 {
                    0.0
                } else {
                    d / s
                }
            })
            .collect()
    }

    /// Median of `stderr_re`.
    pub fn median_stderr_re(&self) -> f64 {
        let mut v: Vec<f64> = self.stderr_re.clone();
        v.sort_by(f64::total_cmp);
        if v.is_empty() {
            return 0.0;
        }
        v[v.len() / 2]
    }
}

#[derive(Debug, Clone)]
struct Moments {
    mean: Vec<Complex64>,
    m2_re: Vec<f64>,
    m2_im: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            mean: vec![ZERO; len],
            m2_re: vec![0.0; len],
            m2_im: vec![0.0; len],
        }
    }

    // Welford update; `n` counts the samples including this one.
    fn push(&mut self, n: usize, x: impl Iterator<Item = Complex64>) {
        let inv = 1.0 / n as f64;
        for (k, v) in x.enumerate() {
            let d = v - self.mean[k];
            self.mean[k] += d * inv;
            let d2 = v - self.mean[k];
            self.m2_re[k] += d.re * d2.re;
            self.m2_im[k] += d.im * d2.im;
        }
    }

    // Chan et al. pairwise combination.
    fn merge(&mut self, na: usize, other: &Moments, nb: usize) {
        if nb == 0 {
            return;
        }
        if na == 0 {
            *self = other.clone();
            return;
        }
        let n = (na + nb) as f64;
        let wb = nb as f64 / n;
        let cross = na as f64 * nb as f64 / n;
        for k in 0..self.mean.len() {
            let d = other.mean[k] - self.mean[k];
            self.mean[k] += d * wb;
            self.m2_re[k] += other.m2_re[k] + d.re * d.re * cross;
            self.m2_im[k] += other.m2_im[k] + d.im * d.im * cross;
        }
    }

    fn finish(self, n: usize) -> MCEstimate {
        let se = |m2: f64| if n > 1 { (m2 / ((n - 1) as f64 * n as f64)).sqrt() } else { 0.0 };
        MCEstimate {
            stderr_re: self.m2_re.iter().map(|&m| se(m)).collect(),
            stderr_im: self.m2_im.iter().map(|&m| se(m)).collect(),
            mean: self.mean,
            n_paths: n,
        }
    }
}

#[derive(Debug, Clone)]
struct Accumulator {
    n: usize,
    series: [Moments; 5],
}

impl Accumulator {
    fn new(n_single: usize, n_two: usize) -> Self {
        Accumulator {
            n: 0,
            series: [
                Moments::new(n_single),
                Moments::new(n_two),
                Moments::new(n_two),
                Moments::new(n_two),
                Moments::new(n_two),
            ],
        }
    }

    fn push(&mut self, run: &TrajectoryRun) {
        self.n += 1;
        let n = self.n;
        let [s, zz, sz, pm, mp] = &mut self.series;
        s.push(n, run.sz_single.iter().map(|&x| Complex64::new(x, 0.0)));
        zz.push(n, run.zz.iter().copied());
        sz.push(n, run.sz.iter().copied());
        pm.push(n, run.pm.iter().copied());
        mp.push(n, run.mp.iter().copied());
    }

    fn merge(&mut self, other: &Accumulator) {
        for (a, b) in self.series.iter_mut().zip(&other.series) {
            a.merge(self.n, b, other.n);
        }
        self.n += other.n;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloOptions {
    pub n_paths: usize,
    /// Paths per reduction block; blocks merge in index order.
    pub block_size: usize,
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
    pub mode: Mode,
    pub ode: OdeOptions,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        MonteCarloOptions {
            n_paths: 10_000,
            block_size: 64,
            workers: None,
            mode: Mode::QrtPlus,
            ode: OdeOptions::default(),
        }
    }
}

/// Trajectory averages. `sz_single` runs over `t = n·dt`, `n ≤ n2`; the
/// rest over `t₁ = t₂ + k·dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub t2: f64,
    pub dt: f64,
    pub mode: Mode,
    pub sz_single: MCEstimate,
    pub zz: MCEstimate,
    pub sz: MCEstimate,
    pub pm: MCEstimate,
    pub mp: MCEstimate,
}

impl MonteCarloResult {
    pub fn tau(&self) -> Vec<f64> {
        (0..self.zz.mean.len()).map(|k| k as f64 * self.dt).collect()
    }
}

/// Average [`evolve_trajectory`] over `n_paths` paths drawn from the noise
/// spec of `table`; path `i` uses RNG stream `i`.
pub fn monte_carlo(
    table: &KernelTable,
    system: &SystemSpec,
    n2: usize,
    n_tau: usize,
    opts: &MonteCarloOptions,
) -> Result<MonteCarloResult> {
    if opts.n_paths < 2 {
        return Err(Error::invalid("oracle.n_paths", "need at least two paths"));
    }
    if opts.block_size == 0 {
        return Err(Error::invalid("oracle.block_size", "must be positive"));
    }
    let grid = table.grid();
    if n2 + n_tau >= grid.len {
        return Err(Error::OutOfHorizon {
            t: grid.time(n2 + n_tau),
            horizon: grid.horizon(),
        });
    }
    let kernels = TrajectoryKernels::new(table);
    let noise = *table.noise();
    let horizon = grid.time(n2 + n_tau);
    let n_blocks = opts.n_paths.div_ceil(opts.block_size);
    let block = |b: usize| -> Result<Accumulator> {
        let mut acc = Accumulator::new(n2 + 1, n_tau + 1);
        let start = b * opts.block_size;
        let end = (start + opts.block_size).min(opts.n_paths);
        for i in start..end {
            let path = noise.sample_path(horizon, i as u64)?;
            let run = evolve_trajectory(&kernels, &path, system, n2, n_tau, opts.mode, &opts.ode)?;
            acc.push(&run);
        }
        Ok(acc)
    };
    let run_all = || -> Result<Accumulator> {
        let wave = 4 * rayon::current_num_threads().max(1);
        let mut total = Accumulator::new(n2 + 1, n_tau + 1);
        let mut b0 = 0;
        while b0 < n_blocks {
            let b1 = (b0 + wave).min(n_blocks);
            let parts: Vec<Result<Accumulator>> = (b0..b1).into_par_iter().map(block).collect();
            for p in parts {
                total.merge(&p?);
            }
            b0 = b1;
        }
        Ok(total)
    };
    let total = match opts.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run_all)?,
        None => run_all()?,
    };
    let n = total.n;
    let [s, zz, sz, pm, mp] = total.series;
    Ok(MonteCarloResult {
        t2: grid.time(n2),
        dt: grid.dt,
        mode: opts.mode,
        sz_single: s.finish(n),
        zz: zz.finish(n),
        sz: sz.finish(n),
        pm: pm.finish(n),
        mp: mp.finish(n),
    })
}

/// Sample average of `exp(−iΩ∫₀^t α)` on `times`.
pub fn propagator_estimate(noise: &crate::noise::NoiseSpec, times: &[f64], n_paths: usize) -> Result<MCEstimate> {
    let horizon = times.iter().copied().fold(0.0, f64::max);
    let mut m = Moments::new(times.len());
    for i in 0..n_paths {
        let path = noise.sample_path(horizon, i as u64)?;
        let vals: Vec<Complex64> = times
            .iter()
            .map(|&t| path.integrate(0.0, t).map(|a| Complex64::from_polar(1.0, -noise.omega_n * a)))
            .collect::<Result<_>>()?;
        m.push(i + 1, vals.into_iter());
    }
    Ok(m.finish(n_paths))
}
