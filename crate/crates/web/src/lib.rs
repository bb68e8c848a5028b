//! Browser bindings. Each export takes and returns JSON so the page needs no
//! generated type glue; the `*_json` functions hold the logic and run natively.

use serde::{Deserialize, Serialize};
use ttcf::analysis::{detect_peaks, power_spectrum, Peak, SpectrumOptions};
use ttcf::bath::{BathSpec, ExponentMode};
use ttcf::dynamics::{evolve_single_time, evolve_two_time, CorrelationState, Mode, SystemSpec, TwoTimeOptions};
use ttcf::kernels::{resolution_bound, KernelTable, TimeGrid};
use ttcf::noise::NoiseSpec;
use wasm_bindgen::prelude::*;

/// Lag range cap so a page interaction stays interactive.
const MAX_TAU: f64 = 60.0;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagatorRequest {
    pub omega_n: f64,
    pub nu: f64,
    pub t_max: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagatorResponse {
    pub t: Vec<f64>,
    pub s0: Vec<f64>,
    pub s1_im: Vec<f64>,
}

pub fn propagators_json(request: &str) -> Result<String, String> {
    let r: PropagatorRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    if !(r.t_max > 0.0) || r.points < 2 || r.points > 100_000 {
        return Err("t_max must be positive and points in [2, 100000]".into());
    }
    let noise = NoiseSpec::new(r.omega_n, r.nu, 0).map_err(|e| e.to_string())?;
    let mut out = PropagatorResponse {
        t: Vec::with_capacity(r.points),
        s0: Vec::with_capacity(r.points),
        s1_im: Vec::with_capacity(r.points),
    };
    for i in 0..r.points {
        let t = r.t_max * i as f64 / (r.points - 1) as f64;
        let (s0, s1) = noise.propagators(t);
        out.t.push(t);
        out.s0.push(s0.re);
        out.s1_im.push(s1.im);
    }
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationRequest {
    pub beta: f64,
    pub epsilon0: f64,
    pub omega_n: f64,
    pub nu: f64,
    pub t2: f64,
    pub tau: f64,
    /// Output decimation; every `stride`-th lag is returned.
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize)]
pub struct Trace {
    pub zz: Vec<f64>,
    pub mp: Vec<f64>,
    pub pm: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationResponse {
    pub t2: f64,
    pub tau: Vec<f64>,
    pub qrt: Trace,
    pub qrt_plus: Trace,
}

struct Run {
    t2: f64,
    tau: Vec<f64>,
    qrt: Vec<CorrelationState>,
    qrt_plus: Vec<CorrelationState>,
}

fn correlate(r: &CorrelationRequest) -> Result<Run, String> {
    let err = |e: ttcf::Error| e.to_string();
    if !(r.tau > 0.0 && r.tau <= MAX_TAU) || !(r.t2 >= 0.0 && r.t2 <= MAX_TAU) {
        return Err(format!("t2 and tau must lie in (0, {MAX_TAU}]"));
    }
    let bath = BathSpec::new(2.0, 1.0, 0.5, r.beta).map_err(err)?;
    let system = SystemSpec {
        epsilon0: r.epsilon0,
        ..Default::default()
    };
    system.validate().map_err(err)?;
    let noise = NoiseSpec::new(r.omega_n, r.nu, 0).map_err(err)?;
    let dt = resolution_bound(bath.xi().map_err(err)?, &system, &noise);
    let grid = TimeGrid::new(dt, r.t2 + r.tau + 2.0 * dt).map_err(err)?;
    let table = KernelTable::build(grid, &bath, ExponentMode::ShortTime, &system, &noise).map_err(err)?;
    let n2 = grid.index_of(r.t2);
    let n_tau = ((r.tau / dt).round() as usize).min(grid.len - 1 - n2);
    let single = evolve_single_time(&table, system.initial_sz, n2, &Default::default()).map_err(err)?;
    let series = evolve_two_time(&table, &single, n2, n_tau, &TwoTimeOptions::default()).map_err(err)?;
    Ok(Run {
        t2: series.t2,
        tau: series.tau(),
        qrt: series.mode(Mode::Qrt).unwrap_or(&[]).to_vec(),
        qrt_plus: series.mode(Mode::QrtPlus).unwrap_or(&[]).to_vec(),
    })
}

fn trace(states: &[CorrelationState], stride: usize) -> Trace {
    let pick = |f: fn(&CorrelationState) -> f64| states.iter().step_by(stride).map(f).collect();
    Trace {
        zz: pick(|s| s.zz().re),
        mp: pick(|s| s.mp().re),
        pm: pick(|s| s.pm().re),
    }
}

pub fn correlations_json(request: &str) -> Result<String, String> {
    let r: CorrelationRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let stride = r.stride.max(1);
    let run = correlate(&r)?;
    let out = CorrelationResponse {
        t2: run.t2,
        tau: run.tau.iter().copied().step_by(stride).collect(),
        qrt: trace(&run.qrt, stride),
        qrt_plus: trace(&run.qrt_plus, stride),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumResponse {
    pub omega: Vec<f64>,
    pub qrt: Vec<f64>,
    pub qrt_plus: Vec<f64>,
    pub peaks: Vec<Peak>,
}

/// Absorption spectrum on `[−3, 4]` with the peak list of the corrected run.
pub fn spectrum_json(request: &str) -> Result<String, String> {
    let r: CorrelationRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let run = correlate(&r)?;
    let opts = SpectrumOptions::default();
    let spec = |states: &[CorrelationState]| {
        let mp: Vec<_> = states.iter().map(CorrelationState::mp).collect();
        power_spectrum(&run.tau, &mp, &opts).map(|s| s.crop(-3.0, 4.0)).map_err(|e| e.to_string())
    };
    let qrt = spec(&run.qrt)?;
    let plus = spec(&run.qrt_plus)?;
    let out = SpectrumResponse {
        peaks: detect_peaks(&plus, 0.05),
        omega: plus.omega,
        qrt: qrt.power,
        qrt_plus: plus.power,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Noise propagators `S₀(t)` and `Im S₁(t)`.
#[wasm_bindgen]
pub fn propagators(request: &str) -> Result<String, JsError> {
    propagators_json(request).map_err(|e| JsError::new(&e))
}

/// QRT and corrected correlators at anchor `t2`.
#[wasm_bindgen]
pub fn correlations(request: &str) -> Result<String, JsError> {
    correlations_json(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn spectrum(request: &str) -> Result<String, JsError> {
    spectrum_json(request).map_err(|e| JsError::new(&e))
}
