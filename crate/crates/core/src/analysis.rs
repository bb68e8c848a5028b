//! Spectra, peak detection, relaxation fits and the QRT-violation measure.

use crate::error::{Error, Result};
use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{DMatrix, DVector, Dyn, Owned};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    #[default]
    None,
    /// Half-Hann taper `½(1 + cos πn/N)`, falling from 1 at τ = 0 to 0 at the end.
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerMode {
    /// `Re ∫₀^∞ e^{iωτ} C(τ) dτ`
    #[default]
    Re,
    /// `|∫₀^∞ e^{iωτ} C(τ) dτ|²`
    Abs2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOptions {
    pub window: Window,
    pub power_mode: PowerMode,
    /// Transform length as a multiple of the series length.
    pub padding: usize,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions {
            window: Window::None,
            power_mode: PowerMode::Re,
            padding: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    /// Angular frequencies, ascending, symmetric about 0 (one extra point on
    /// the negative side for even lengths).
    pub omega: Vec<f64>,
    pub power: Vec<f64>,
    pub options: SpectrumOptions,
    /// False when `|C|` at the last lag still exceeds 5% of `|C(0)|`.
    pub decayed: bool,
}

impl SpectrumResult {
    /// Frequency spacing.
    pub fn bin(&self) -> f64 {
        if self.omega.len() > 1 {
            self.omega[1] - self.omega[0]
        } else {
            0.0
        }
    }

    /// The part with `lo ≤ ω ≤ hi`.
    pub fn crop(&self, lo: f64, hi: f64) -> SpectrumResult {
        let (omega, power) = self
            .omega
            .iter()
            .zip(&self.power)
            .filter(|(w, _)| (lo..=hi).contains(*w))
            .map(|(w, p)| (*w, *p))
            .unzip();
        SpectrumResult {
            omega,
            power,
            options: self.options,
            decayed: self.decayed,
        }
    }
}

/// One-sided transform of `C` sampled at `tau` (uniform, starting at 0).
pub fn power_spectrum(tau: &[f64], values: &[Complex64], opts: &SpectrumOptions) -> Result<SpectrumResult> {
    let n = values.len();
    if n < 2 || tau.len() != n {
        return Err(Error::Analysis("spectrum needs at least two samples on a matching lag grid".into()));
    }
    let dt = tau[1] - tau[0];
    let uniform = dt > 0.0
        && tau[0].abs() <= 1e-9 * dt
        && tau
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-6 * dt);
    if !uniform {
        return Err(Error::Analysis("lag grid must be uniform and start at 0".into()));
    }
    if opts.padding == 0 {
        return Err(Error::invalid("analysis.padding", "must be at least 1"));
    }
    let m = n * opts.padding;
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    for (k, (b, v)) in buf.iter_mut().zip(values).enumerate() {
        let w = match opts.window {
            Window::None => 1.0,
            Window::Hann => 0.5 * (1.0 + (PI * k as f64 / (n - 1) as f64).cos()),
        };
        *b = v * w * dt;
    }
    // trapezoid weight at τ = 0
    buf[0] *= 0.5;
    FftPlanner::new().plan_fft_inverse(m).process(&mut buf);
    let step = 2.0 * PI / (m as f64 * dt);
    let half = m / 2;
    let mut omega = Vec::with_capacity(m);
    let mut power = Vec::with_capacity(m);
    // bins half..m are the negative frequencies
    for j in (half..m).chain(0..half) {
        let k = if j >= half { j as f64 - m as f64 } else { j as f64 };
        omega.push(k * step);
        power.push(match opts.power_mode {
            PowerMode::Re => buf[j].re,
            PowerMode::Abs2 => buf[j].norm_sqr(),
        });
    }
    let decayed = values[n - 1].norm() <= 0.05 * values[0].norm();
    Ok(SpectrumResult {
        omega,
        power,
        options: *opts,
        decayed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub index: usize,
    /// Position after parabolic refinement.
    pub omega: f64,
    pub power: f64,
    pub prominence: f64,
}

/// Local maxima whose prominence is at least `prominence_frac · max(power)`.
pub fn detect_peaks(spectrum: &SpectrumResult, prominence_frac: f64) -> Vec<Peak> {
    let p = &spectrum.power;
    let n = p.len();
    let top = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n < 3 || !(top > 0.0) {
        return Vec::new();
    }
    let threshold = prominence_frac * top;
    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if p[i] > p[i - 1] {
            // step over a plateau
            let mut j = i;
            while j + 1 < n && p[j + 1] == p[i] {
                j += 1;
            }
            if j + 1 < n && p[j + 1] < p[i] {
                let centre = (i + j) / 2;
                let prominence = prominence_at(p, i, j);
                if prominence >= threshold {
                    peaks.push(Peak {
                        index: centre,
                        omega: refine(spectrum, centre),
                        power: p[centre],
                        prominence,
                    });
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    peaks
}

fn prominence_at(p: &[f64], lo: usize, hi: usize) -> f64 {
    let h = p[lo];
    let mut left = h;
    for k in (0..lo).rev() {
        if p[k] > h {
            break;
        }
        left = left.min(p[k]);
    }
    let mut right = h;
    for &v in &p[hi + 1..] {
        if v > h {
            break;
        }
        right = right.min(v);
    }
    h - left.max(right)
}

fn refine(s: &SpectrumResult, i: usize) -> f64 {
    let (a, b, c) = (s.power[i - 1], s.power[i], s.power[i + 1]);
    let den = a - 2.0 * b + c;
    let shift = if den != 0.0 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
    s.omega[i] + shift * s.bin()
}

/// `p + (1 − p)e^{−kt}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub p: f64,
    pub k: f64,
    pub rms_residual: f64,
    /// Set when `k` is not identifiable (flat series); `k` is then 0.
    pub degenerate: bool,
}

/// `e^{−Λt}(a₁cos ω₁t + a₂cos ω₂t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DampedFit {
    pub lambda: f64,
    pub a1: f64,
    pub a2: f64,
    pub w1: f64,
    pub w2: f64,
    pub rms_residual: f64,
    /// Set when only one frequency is present; `a2` is 0 and `w2` repeats `w1`.
    pub degenerate: bool,
}

type Model = fn(&[f64], f64, &mut [f64]) -> f64;

struct Curve<'a> {
    t: &'a [f64],
    y: &'a [f64],
    x: DVector<f64>,
    model: Model,
}

impl LeastSquaresProblem<f64, Dyn, Dyn> for Curve<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        self.x.copy_from(x);
    }

    fn params(&self) -> DVector<f64> {
        self.x.clone()
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        let mut g = vec![0.0; self.x.len()];
        let r = DVector::from_iterator(
            self.t.len(),
            self.t
                .iter()
                .zip(self.y)
                .map(|(&t, &y)| (self.model)(self.x.as_slice(), t, &mut g) - y),
        );
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        let np = self.x.len();
        let mut jac = DMatrix::zeros(self.t.len(), np);
        let mut g = vec![0.0; np];
        for (row, &t) in self.t.iter().enumerate() {
            (self.model)(self.x.as_slice(), t, &mut g);
            for (c, v) in g.iter().enumerate() {
                jac[(row, c)] = *v;
            }
        }
        Some(jac)
    }
}

// Solve and return (params, rms) if the solver terminated cleanly.
fn least_squares(t: &[f64], y: &[f64], x0: &[f64], model: Model) -> Option<(Vec<f64>, f64)> {
    let problem = Curve {
        t,
        y,
        x: DVector::from_column_slice(x0),
        model,
    };
    let (solved, report) = LevenbergMarquardt::new().with_patience(200).minimize(problem);
    if !report.termination.was_successful() {
        return None;
    }
    let rms = (2.0 * report.objective_function / t.len() as f64).sqrt();
    rms.is_finite().then(|| (solved.x.as_slice().to_vec(), rms))
}

// At most `cap` evenly strided samples.
fn decimate<'a>(t: &'a [f64], y: &'a [f64], cap: usize) -> (Vec<f64>, Vec<f64>) {
    let stride = t.len().div_ceil(cap).max(1);
    (t.iter().step_by(stride).copied().collect(), y.iter().step_by(stride).copied().collect())
}

fn exp_model(x: &[f64], t: f64, g: &mut [f64]) -> f64 {
    let (p, k) = (x[0], x[1]);
    let e = (-k * t).exp();
    g[0] = 1.0 - e;
    g[1] = -(1.0 - p) * t * e;
    p + (1.0 - p) * e
}

/// Fit `p + (1 − p)e^{−kt}` with a few starting rates.
pub fn fit_exponential(t: &[f64], y: &[f64]) -> Result<ExpFit> {
    if t.len() != y.len() || t.len() < 20 {
        return Err(Error::Analysis("exponential fit needs at least 20 samples".into()));
    }
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        let p = y[y.len() - 1];
        return Ok(ExpFit {
            p,
            k: 0.0,
            rms_residual: rms(y.iter().map(|v| v - p)),
            degenerate: true,
        });
    }
    let (ts, ys) = decimate(t, y, 4000);
    let p0 = ys[ys.len() - 1];
    let k0 = log_linear_rate(&ts, &ys, p0).unwrap_or(1.0 / (ts[ts.len() - 1] - ts[0]));
    let mut best: Option<(Vec<f64>, f64)> = None;
    for scale in [0.3, 1.0, 3.0] {
        if let Some((x, r)) = least_squares(&ts, &ys, &[p0, k0 * scale], exp_model) {
            if x[1] >= 0.0 && best.as_ref().is_none_or(|b| r < b.1) {
                best = Some((x, r));
            }
        }
    }
    let (x, _) = best.ok_or_else(|| Error::FitFailed("exponential fit did not converge from any start".into()))?;
    let mut g = [0.0; 2];
    Ok(ExpFit {
        p: x[0],
        k: x[1],
        rms_residual: rms(t.iter().zip(y).map(|(&tt, &v)| exp_model(&x, tt, &mut g) - v)),
        degenerate: false,
    })
}

// Slope of log((y − p)/(1 − p)) while the ratio is clearly positive.
fn log_linear_rate(t: &[f64], y: &[f64], p: f64) -> Option<f64> {
    let amp = 1.0 - p;
    if amp.abs() < 1e-12 {
        return None;
    }
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(y)
        .map(|(&tt, &v)| (tt, (v - p) / amp))
        .take_while(|(_, r)| *r > 0.05)
        .filter(|(_, r)| *r < 1.0)
        .map(|(tt, r)| (tt, r.ln()))
        .collect();
    let slope = regression_slope(&pts)?;
    (slope < 0.0).then_some(-slope)
}

fn regression_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn rms(r: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = r.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

fn two_cos_model(x: &[f64], t: f64, g: &mut [f64]) -> f64 {
    let (l, a1, a2, w1, w2) = (x[0], x[1], x[2], x[3], x[4]);
    let e = (-l * t).exp();
    let (s1, c1) = (w1 * t).sin_cos();
    let (s2, c2) = (w2 * t).sin_cos();
    let v = e * (a1 * c1 + a2 * c2);
    g[0] = -t * v;
    g[1] = e * c1;
    g[2] = e * c2;
    g[3] = -e * a1 * t * s1;
    g[4] = -e * a2 * t * s2;
    v
}

fn one_cos_model(x: &[f64], t: f64, g: &mut [f64]) -> f64 {
    let (l, a, w) = (x[0], x[1], x[2]);
    let e = (-l * t).exp();
    let (s, c) = (w * t).sin_cos();
    g[0] = -t * e * a * c;
    g[1] = e * c;
    g[2] = -e * a * t * s;
    e * a * c
}

/// Fit `e^{−Λt}(a₁cos ω₁t + a₂cos ω₂t)`, starting from the two strongest
/// spectral peaks of the series.
pub fn fit_damped_cosines(t: &[f64], y: &[f64]) -> Result<DampedFit> {
    if t.len() != y.len() || t.len() < 50 {
        return Err(Error::Analysis("damped-cosine fit needs at least 50 samples".into()));
    }
    let tau: Vec<f64> = t.iter().map(|v| v - t[0]).collect();
    let values: Vec<Complex64> = y.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let opts = SpectrumOptions {
        power_mode: PowerMode::Abs2,
        ..Default::default()
    };
    let spec = power_spectrum(&tau, &values, &opts)?.crop(0.0, f64::INFINITY);
    let mut peaks = detect_peaks(&spec, 0.02);
    peaks.sort_by(|a, b| b.power.total_cmp(&a.power));
    let mut freqs: Vec<f64> = peaks.iter().take(2).map(|p| p.omega.max(0.0)).collect();
    if freqs.is_empty() {
        freqs.push(0.0);
    }
    freqs.sort_by(f64::total_cmp);
    let (ts, ys) = decimate(&tau, y, 4000);
    let lambda0 = envelope_rate(&ts, &ys, freqs[0]).max(1e-3);

    let finish = |x: &[f64], two: bool| -> DampedFit {
        let mut g = [0.0; 5];
        let model: Model = if two { two_cos_model } else { one_cos_model };
        let rms_residual = rms(tau.iter().zip(y).map(|(&tt, &v)| model(x, tt, &mut g) - v));
        if two {
            // order by frequency
            let (mut a1, mut a2, mut w1, mut w2) = (x[1], x[2], x[3].abs(), x[4].abs());
            if w1 > w2 {
                std::mem::swap(&mut w1, &mut w2);
                std::mem::swap(&mut a1, &mut a2);
            }
            DampedFit {
                lambda: x[0],
                a1,
                a2,
                w1,
                w2,
                rms_residual,
                degenerate: false,
            }
        } else {
            DampedFit {
                lambda: x[0],
                a1: x[1],
                a2: 0.0,
                w1: x[2].abs(),
                w2: x[2].abs(),
                rms_residual,
                degenerate: true,
            }
        }
    };

    if freqs.len() == 2 {
        let (a1, a2) = amplitudes(&ts, &ys, lambda0, freqs[0], freqs[1]);
        if let Some((x, _)) = least_squares(&ts, &ys, &[lambda0, a1, a2, freqs[0], freqs[1]], two_cos_model) {
            let fit = finish(&x, true);
            let amp = fit.a1.abs().max(fit.a2.abs());
            if fit.lambda >= 0.0 && fit.a1.abs().min(fit.a2.abs()) > 1e-3 * amp {
                return Ok(fit);
            }
        }
    }
    let a0 = ys[0];
    let (x, _) = least_squares(&ts, &ys, &[lambda0, a0, freqs[0]], one_cos_model)
        .ok_or_else(|| Error::FitFailed("damped-cosine fit did not converge".into()))?;
    Ok(finish(&x, false))
}

// Decay of the running maximum of |y| over one period of the slowest
// frequency, by log-linear regression.
fn envelope_rate(t: &[f64], y: &[f64], w: f64) -> f64 {
    let span = t[t.len() - 1] - t[0];
    let period = if w > 0.0 { 2.0 * PI / w } else { span / 10.0 };
    let chunks = ((span / period).floor() as usize).clamp(2, 200);
    let per = y.len() / chunks;
    if per == 0 {
        return 0.0;
    }
    let pts: Vec<(f64, f64)> = (0..chunks)
        .filter_map(|c| {
            let s = &y[c * per..(c + 1) * per];
            let m = s.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            (m > 0.0).then(|| (t[c * per + per / 2], m.ln()))
        })
        .collect();
    regression_slope(&pts).map(|s| -s).unwrap_or(0.0)
}

// Linear least squares for (a₁, a₂) with the nonlinear parameters fixed.
fn amplitudes(t: &[f64], y: &[f64], l: f64, w1: f64, w2: f64) -> (f64, f64) {
    let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&tt, &v) in t.iter().zip(y) {
        let e = (-l * tt).exp();
        let (f1, f2) = (e * (w1 * tt).cos(), e * (w2 * tt).cos());
        s11 += f1 * f1;
        s12 += f1 * f2;
        s22 += f2 * f2;
        b1 += f1 * v;
        b2 += f2 * v;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() < 1e-300 {
        return (y[0], 0.0);
    }
    ((b1 * s22 - b2 * s12) / det, (s11 * b2 - s12 * b1) / det)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub label: String,
    /// Percentage, `100 |I_QRT − I_QRT+| / I_QRT`.
    pub delta: f64,
}

/// `Δ = 100|I_QRT − I_QRT+|/I_QRT` with `I = ∫|c| dt` by trapezoid over the
/// common grid.
pub fn delta_measure(label: &str, qrt: &[Complex64], qrt_plus: &[Complex64], dt: f64) -> Result<DeltaReport> {
    if qrt.len() != qrt_plus.len() || qrt.len() < 2 {
        return Err(Error::Analysis("delta needs two series of equal length".into()));
    }
    let integral = |c: &[Complex64]| {
        let n = c.len();
        let inner: f64 = c[1..n - 1].iter().map(|v| v.norm()).sum();
        dt * (inner + 0.5 * (c[0].norm() + c[n - 1].norm()))
    };
    let (iq, ip) = (integral(qrt), integral(qrt_plus));
    if iq < 1e-12 {
        return Err(Error::Analysis(format!("delta for {label} is undefined: QRT integral vanishes")));
    }
    Ok(DeltaReport {
        label: label.to_string(),
        delta: 100.0 * ((iq - ip) / iq).abs(),
    })
}
