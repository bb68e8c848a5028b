//! Noise-averaged single-time and two-time dynamics.
//!
//! The single-time pair `g₁ = ⟨σz⟩`, `g₂ = ⟨ασz⟩` obeys
//!
//! ```text
//! dg₁/dt = −Γ₁₁g₁ + Γ₁₂g₂ − Γ₂₁
//! dg₂/dt = −(ν + Γ₁₁)g₂ + Γ₁₂g₁ − Γ₂₂
//! ```
//!
//! and the two-time vector `Y = (⟨σzσz⟩, ⟨ασzσz⟩, ⟨σ₊σ₋⟩, ⟨ασ₊σ₋⟩, ⟨σ₋σ₊⟩, ⟨ασ₋σ₊⟩)`
//! obeys `dY/dt₁ = A(t₁,t₂)Y + b(t₁,t₂)`, started from the operator
//! identities at `t₁ = t₂`. QRT mode drops the two-time kernels.

use crate::error::{Error, Result};
use crate::kernels::{KernelTable, TwoTimeTable};
use crate::ode::{self, OdeOptions};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    /// Static bias ε₀.
    pub epsilon0: f64,
    /// Bare tunneling element V.
    pub v: f64,
    /// ⟨σz(0)⟩.
    pub initial_sz: f64,
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec {
            epsilon0: 1.0,
            v: 1.0,
            initial_sz: 1.0,
        }
    }
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon0.is_finite() {
            return Err(Error::invalid("system.epsilon0", "must be finite"));
        }
        if !self.v.is_finite() {
            return Err(Error::invalid("system.v", "must be finite"));
        }
        if !(self.initial_sz.abs() <= 1.0) {
            return Err(Error::invalid("system.initial_sz", "must lie in [-1, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Quantum regression theorem: single-time kernels only.
    Qrt,
    /// QRT plus the two-time correction kernels.
    #[serde(rename = "qrt+")]
    QrtPlus,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Qrt => "qrt",
            Mode::QrtPlus => "qrt+",
        }
    }
}

/// Sign layout of the first row of `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixLayout {
    /// Row 1 as obtained by averaging the trajectory equations:
    /// `(…, 4Γ₃₁, 4Γ₃₂, 4Γ₄₁, −4Γ₄₂)`.
    #[default]
    Derived,
    /// Row 1 with the alternative signs `(…, −4Γ₃₁, −4Γ₃₂, 4Γ₄₁, 4Γ₄₂)`.
    Alternate,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeneratorOptions {
    pub layout: MatrixLayout,
    /// Test hook: negate entry `(row, col)` of `A`.
    pub sign_mutation: Option<(usize, usize)>,
}

/// The six averaged correlators at one `(t₁, t₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationState {
    pub y: [Complex64; 6],
}

impl CorrelationState {
    /// `⟨σz(t₁)σz(t₂)⟩`
    pub fn zz(&self) -> Complex64 {
        self.y[0]
    }
    /// `⟨σ₊(t₁)σ₋(t₂)⟩`
    pub fn pm(&self) -> Complex64 {
        self.y[2]
    }
    /// `⟨σ₋(t₁)σ₊(t₂)⟩`
    pub fn mp(&self) -> Complex64 {
        self.y[4]
    }
}

/// `Y(t₂)` from the single-time values at the anchor.
pub fn equal_time_initials(g1: f64, g2: f64) -> CorrelationState {
    let c = |x: f64| Complex64::new(x, 0.0);
    CorrelationState {
        y: [c(1.0), c(0.0), c(0.5 * (1.0 + g1)), c(0.5 * g2), c(0.5 * (1.0 - g1)), c(-0.5 * g2)],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleTimeSeries {
    pub dt: f64,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

impl SingleTimeSeries {
    pub fn horizon(&self) -> f64 {
        (self.g1.len() - 1) as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.g1.len()).map(|n| n as f64 * self.dt).collect()
    }
}

/// Integrate `(g₁, g₂)` on grid nodes `0..=n_end`.
pub fn evolve_single_time(
    table: &KernelTable,
    initial_sz: f64,
    n_end: usize,
    opts: &OdeOptions,
) -> Result<SingleTimeSeries> {
    if !(initial_sz.abs() <= 1.0) {
        return Err(Error::invalid("system.initial_sz", "must lie in [-1, 1]"));
    }
    let grid = table.grid();
    let n_end = n_end.min(grid.len - 1);
    let nu = table.noise().nu;
    let outputs: Vec<f64> = (0..=n_end).map(|n| grid.time(n)).collect();
    let rhs = |t: f64, y: &[Complex64; 2]| {
        let k = table.singles_at(t);
        let (g11, g12, g21, g22) = (k[0], k[1], k[2], k[3]);
        [
            -g11 * y[0] + g12 * y[1] - g21,
            -(nu + g11) * y[1] + g12 * y[0] - g22,
        ]
    };
    let y0 = [Complex64::new(initial_sz, 0.0), ZERO];
    let sol = ode::integrate(rhs, 0.0, y0, &outputs, &[], opts)?;
    Ok(SingleTimeSeries {
        dt: grid.dt,
        g1: sol.iter().map(|y| y[0].re).collect(),
        g2: sol.iter().map(|y| y[1].re).collect(),
    })
}

/// Quasi-stationary anchor: the first grid time where `g₁` is within 1% of
/// its total change from its final value.
pub fn default_anchor(series: &SingleTimeSeries) -> f64 {
    let g = &series.g1;
    let last = *g.last().unwrap_or(&0.0);
    let span = (g[0] - last).abs();
    let n = g.iter().position(|&x| (x - last).abs() <= 0.01 * span).unwrap_or(g.len() - 1);
    n as f64 * series.dt
}

pub type Matrix6 = [[Complex64; 6]; 6];

/// `A(t₁,t₂)` and `b(t₁,t₂)`. `two` holds the two-time kernels at this
/// anchor; pass a zero table for QRT mode.
pub fn assemble_generator(
    t1: f64,
    table: &KernelTable,
    two: &TwoTimeTable,
    anchor: (f64, f64),
    mode: Mode,
    options: &GeneratorOptions,
) -> Result<(Matrix6, [Complex64; 6])> {
    let t2 = two.anchor();
    if t1 < t2 {
        return Err(Error::TimeOrder { t1, t2 });
    }
    Ok(generator(t1, table, two, anchor, mode, options))
}

#[inline]
fn generator(
    t1: f64,
    table: &KernelTable,
    two: &TwoTimeTable,
    (g1, g2): (f64, f64),
    mode: Mode,
    options: &GeneratorOptions,
) -> (Matrix6, [Complex64; 6]) {
    let k = table.singles_at(t1);
    let (g11, g12, g21, g22, g51, g52, g61, g62) = (k[0], k[1], k[2], k[3], k[4], k[5], k[6], k[7]);
    let [g31, g32, g41, g42] = match mode {
        Mode::Qrt => [ZERO; 4],
        Mode::QrtPlus => two.at(t1),
    };
    let nu = table.noise().nu;
    let i = Complex64::i();
    let ie = i * table.epsilon0();
    let iw = i * table.noise().omega_n;
    let (r13, r14, r16) = match options.layout {
        MatrixLayout::Derived => (4.0 * g31, 4.0 * g32, -4.0 * g42),
        MatrixLayout::Alternate => (-4.0 * g31, -4.0 * g32, 4.0 * g42),
    };
    let mut a = [
        [-g11, g12, r13, r14, 4.0 * g41, r16],
        [g12, -(nu + g11), 4.0 * g32, 4.0 * g31, -4.0 * g42, 4.0 * g41],
        [g41, -g42, ie - g51, iw + g52, ZERO, ZERO],
        [-g42, g41, iw + g52, -(nu - ie + g51), ZERO, ZERO],
        [g31, g32, ZERO, ZERO, -(ie + g61), -(iw + g62)],
        [g32, g31, ZERO, ZERO, -(iw + g62), -(nu + ie + g61)],
    ];
    if let Some((r, c)) = options.sign_mutation {
        a[r][c] = -a[r][c];
    }
    let decay = (-nu * (t1 - two.anchor())).exp();
    let b = [
        -g21 * g1 - decay * g22 * g2,
        -g22 * g1 - decay * g21 * g2,
        ZERO,
        ZERO,
        ZERO,
        ZERO,
    ];
    (a, b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoTimeOptions {
    pub ode: OdeOptions,
    pub generator: GeneratorOptions,
    pub qrt: bool,
    pub qrt_plus: bool,
}

impl Default for TwoTimeOptions {
    fn default() -> Self {
        TwoTimeOptions {
            ode: OdeOptions::default(),
            generator: GeneratorOptions::default(),
            qrt: true,
            qrt_plus: true,
        }
    }
}

/// Two-time correlators on `t₁ = t₂ + k·dt`, `k = 0..`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSeries {
    pub t2: f64,
    pub t1: Vec<f64>,
    pub qrt: Option<Vec<CorrelationState>>,
    pub qrt_plus: Option<Vec<CorrelationState>>,
    pub single_time: SingleTimeSeries,
}

impl CorrelationSeries {
    pub fn mode(&self, mode: Mode) -> Option<&[CorrelationState]> {
        match mode {
            Mode::Qrt => self.qrt.as_deref(),
            Mode::QrtPlus => self.qrt_plus.as_deref(),
        }
    }

    /// Lag axis `τ = t₁ − t₂`.
    pub fn tau(&self) -> Vec<f64> {
        self.t1.iter().map(|t| t - self.t2).collect()
    }
}

/// Evolve from the anchor node `n2` over `n_tau` further grid steps.
/// `single` must cover `n2`.
pub fn evolve_two_time(
    table: &KernelTable,
    single: &SingleTimeSeries,
    n2: usize,
    n_tau: usize,
    opts: &TwoTimeOptions,
) -> Result<CorrelationSeries> {
    let grid = table.grid();
    if n2 >= single.g1.len() {
        return Err(Error::OutOfHorizon {
            t: grid.time(n2),
            horizon: single.horizon(),
        });
    }
    if n2 + n_tau >= grid.len {
        return Err(Error::OutOfHorizon {
            t: grid.time(n2 + n_tau),
            horizon: grid.horizon(),
        });
    }
    let t2 = grid.time(n2);
    let anchor = (single.g1[n2], single.g2[n2]);
    let t1: Vec<f64> = (0..=n_tau).map(|k| grid.time(n2 + k)).collect();
    let run = |mode: Mode| -> Result<Vec<CorrelationState>> {
        let two = match mode {
            Mode::Qrt => TwoTimeTable::zero(t2, grid.dt),
            Mode::QrtPlus => table.two_time_table(n2),
        };
        let rhs = |t: f64, y: &[Complex64; 6]| {
            let (a, b) = generator(t, table, &two, anchor, mode, &opts.generator);
            let mut out = b;
            for r in 0..6 {
                for c in 0..6 {
                    out[r] += a[r][c] * y[c];
                }
            }
            out
        };
        let y0 = equal_time_initials(anchor.0, anchor.1);
        let sol = ode::integrate(rhs, t2, y0.y, &t1, &[], &opts.ode)?;
        let mut states = Vec::with_capacity(sol.len());
        for (t, y) in t1.iter().zip(sol) {
            let value = y[0].norm();
            if value > 1.0 + 1e-3 {
                return Err(Error::Physicality { value, t1: *t, t2 });
            }
            states.push(CorrelationState { y });
        }
        states[0] = y0;
        Ok(states)
    };
    let qrt = if opts.qrt { Some(run(Mode::Qrt)?) } else { None };
    let qrt_plus = if opts.qrt_plus { Some(run(Mode::QrtPlus)?) } else { None };
    Ok(CorrelationSeries {
        t2,
        t1,
        qrt,
        qrt_plus,
        single_time: single.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{BathSpec, ExponentMode};
    use crate::kernels::{resolution_bound, TimeGrid};
    use crate::noise::NoiseSpec;

    fn setup(eps: f64, v: f64, omega: f64, nu: f64, beta: f64, horizon: f64) -> KernelTable {
        let bath = BathSpec::new(2.0, 1.0, 0.5, beta).unwrap();
        let sys = SystemSpec {
            epsilon0: eps,
            v,
            initial_sz: 1.0,
        };
        let noise = NoiseSpec::new(omega, nu, 0).unwrap();
        let dt = resolution_bound(bath.xi().unwrap(), &sys, &noise);
        KernelTable::build(TimeGrid::new(dt, horizon).unwrap(), &bath, ExponentMode::ShortTime, &sys, &noise).unwrap()
    }

    #[test]
    fn equal_time_examples() {
        let c = |x: f64| Complex64::new(x, 0.0);
        assert_eq!(equal_time_initials(1.0, 0.0).y, [c(1.0), c(0.0), c(1.0), c(0.0), c(0.0), c(-0.0)]);
        assert_eq!(equal_time_initials(0.0, 0.0).y, [c(1.0), c(0.0), c(0.5), c(0.0), c(0.5), c(-0.0)]);
        let y = equal_time_initials(0.4, -0.1).y;
        let want = [1.0, 0.0, 0.7, -0.05, 0.3, 0.05];
        for (a, b) in y.iter().zip(want) {
            assert!((a.re - b).abs() < 1e-15 && a.im == 0.0);
        }
        assert_eq!(y[2] + y[4], c(1.0));
        assert_eq!(y[3] + y[5], c(0.0));
    }

    #[test]
    fn decoupled_system_is_static() {
        let t = setup(1.0, 0.0, 0.0, 1.0, 0.02, 5.0);
        let s = evolve_single_time(&t, 1.0, usize::MAX, &OdeOptions::default()).unwrap();
        assert!(s.g1.iter().all(|&g| (g - 1.0).abs() < 1e-12));
        let c = evolve_two_time(&t, &s, t.grid().index_of(1.0), 1000, &TwoTimeOptions::default()).unwrap();
        for st in c.qrt.unwrap() {
            assert!((st.pm().norm() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn decoupled_coherence_follows_noise_propagator() {
        let t = setup(1.0, 0.0, 0.75, 1.0, 0.02, 5.0);
        let s = evolve_single_time(&t, 0.2, usize::MAX, &OdeOptions::default()).unwrap();
        let c = evolve_two_time(&t, &s, t.grid().index_of(1.0), 2000, &TwoTimeOptions::default()).unwrap();
        for (tau, st) in c.tau().iter().zip(c.qrt.unwrap()) {
            let want = 0.6 * Complex64::from_polar(1.0, *tau) * t.noise().propagators(*tau).0;
            assert!((st.pm() - want).norm() < 1e-7, "tau {tau}");
        }
    }

    #[test]
    fn quiet_noise_leaves_alpha_components_zero() {
        let t = setup(1.0, 1.0, 0.0, 1.0, 0.02, 6.0);
        let s = evolve_single_time(&t, 1.0, usize::MAX, &OdeOptions::default()).unwrap();
        assert!(s.g2.iter().all(|g| g.abs() < 1e-10));
        let c = evolve_two_time(&t, &s, t.grid().index_of(2.0), 2000, &TwoTimeOptions::default()).unwrap();
        for st in c.qrt_plus.unwrap() {
            for k in [1, 3, 5] {
                assert!(st.y[k].norm() < 1e-10);
            }
        }
    }

    #[test]
    fn anchor_at_origin_modes_coincide() {
        let t = setup(1.0, 1.0, 0.75, 1.0, 0.02, 4.0);
        let s = evolve_single_time(&t, 1.0, 10, &OdeOptions::default()).unwrap();
        let c = evolve_two_time(&t, &s, 0, 2000, &TwoTimeOptions::default()).unwrap();
        assert_eq!(c.qrt, c.qrt_plus);
    }

    #[test]
    fn qrt_generator_structure() {
        let t = setup(1.0, 1.0, 0.75, 1.0, 0.02, 4.0);
        let n2 = t.grid().index_of(1.0);
        let two = t.two_time_table(n2);
        let t2 = two.anchor();
        let opts = GeneratorOptions::default();
        let (a, _) = assemble_generator(t2 + 0.01, &t, &two, (0.5, 0.1), Mode::Qrt, &opts).unwrap();
        for c in 2..6 {
            assert_eq!(a[0][c], ZERO);
            assert_eq!(a[1][c], ZERO);
        }
        for r in 2..6 {
            assert_eq!(a[r][0], ZERO);
            assert_eq!(a[r][1], ZERO);
        }
        let (p, _) = assemble_generator(t2 + 0.01, &t, &two, (0.5, 0.1), Mode::QrtPlus, &opts).unwrap();
        assert!(p[0][2].norm() > 0.0);
        assert!(assemble_generator(t2 - 0.1, &t, &two, (0.5, 0.1), Mode::Qrt, &opts).is_err());
        let zero = t.two_time_table(0);
        let (q0, _) = assemble_generator(0.3, &t, &zero, (1.0, 0.0), Mode::Qrt, &opts).unwrap();
        let (p0, _) = assemble_generator(0.3, &t, &zero, (1.0, 0.0), Mode::QrtPlus, &opts).unwrap();
        assert_eq!(q0, p0);
    }

    #[test]
    fn first_sample_is_equal_time_state() {
        let t = setup(1.0, 1.0, 0.75, 1.0, 0.02, 4.0);
        let s = evolve_single_time(&t, 1.0, usize::MAX, &OdeOptions::default()).unwrap();
        let n2 = t.grid().index_of(2.0);
        let c = evolve_two_time(&t, &s, n2, 100, &TwoTimeOptions::default()).unwrap();
        let init = equal_time_initials(s.g1[n2], s.g2[n2]);
        assert_eq!(c.qrt.unwrap()[0], init);
        assert_eq!(c.qrt_plus.unwrap()[0], init);
    }

    #[test]
    fn single_time_stays_physical() {
        for (eps, beta, nu) in [(1.0, 0.02, 1.0), (0.0, 50.0, 0.01), (1.0, 50.0, 0.3)] {
            let t = setup(eps, 1.0, 0.75, nu, beta, 20.0);
            let s = evolve_single_time(&t, 1.0, usize::MAX, &OdeOptions::default()).unwrap();
            assert!(s.g1.iter().all(|g| g.abs() <= 1.0 + 1e-6), "eps {eps} beta {beta}");
        }
    }
}
