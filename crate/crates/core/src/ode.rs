//! Dormand–Prince 5(4) integrator over fixed-size complex states, with
//! dense output and optional restart points where the right-hand side
//! may jump.

use crate::error::{Error, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on the step; `None` leaves it to error control.
    pub h_max: Option<f64>,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions {
            rtol: 1e-8,
            atol: 1e-10,
            h_max: None,
            max_steps: 10_000_000,
        }
    }
}

impl OdeOptions {
    /// Both tolerances scaled by `factor`.
    pub fn scaled(self, factor: f64) -> Self {
        OdeOptions {
            rtol: self.rtol * factor,
            atol: self.atol * factor,
            ..self
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

type State<const D: usize> = [Complex64; D];

#[inline]
fn axpy<const D: usize>(y: &State<D>, terms: &[(f64, &State<D>)]) -> State<D> {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..D {
            out[i] += *c * k[i];
        }
    }
    out
}

/// Integrate `dy/dt = f(t, y)` from `(t0, y0)` and return the solution at
/// every time in `outputs` (sorted, all `>= t0`). No step crosses a time in
/// `restarts`; use them where `f` is discontinuous.
pub fn integrate<const D: usize, F>(
    mut f: F,
    t0: f64,
    y0: State<D>,
    outputs: &[f64],
    restarts: &[f64],
    opts: &OdeOptions,
) -> Result<Vec<State<D>>>
where
    F: FnMut(f64, &State<D>) -> State<D>,
{
    let mut result = Vec::with_capacity(outputs.len());
    let Some(&t_end) = outputs.last() else {
        return Ok(result);
    };
    if outputs.windows(2).any(|w| w[1] < w[0]) || outputs[0] < t0 {
        return Err(Error::Integrator {
            t: t0,
            reason: "output times must be sorted and not precede t0".into(),
        });
    }
    let mut stops: Vec<f64> = restarts.iter().copied().filter(|&r| r > t0 && r < t_end).collect();
    stops.sort_by(f64::total_cmp);
    stops.push(t_end);

    let mut t = t0;
    let mut y = y0;
    let mut out_idx = 0;
    while out_idx < outputs.len() && outputs[out_idx] <= t0 {
        result.push(y0);
        out_idx += 1;
    }
    let mut k1 = f(t, &y);
    let mut h = initial_step(&mut f, t, &y, &k1, t_end - t0, opts);
    let mut steps = 0usize;
    for &stop in &stops {
        while t < stop {
            steps += 1;
            if steps > opts.max_steps {
                return Err(Error::Integrator {
                    t,
                    reason: "step budget exhausted".into(),
                });
            }
            if let Some(hm) = opts.h_max {
                h = h.min(hm);
            }
            let last = t + h >= stop || stop - (t + h) < 1e-12 * stop.abs().max(1.0);
            let hh = if last { stop - t } else { h };
            if hh <= 1e-14 * t.abs().max(1.0) {
                if last {
                    t = stop;
                    break;
                }
                return Err(Error::Integrator {
                    t,
                    reason: format!("step size underflow (h = {hh:e})"),
                });
            }
            let k2 = f(t + C2 * hh, &axpy(&y, &[(hh * A21, &k1)]));
            let k3 = f(t + C3 * hh, &axpy(&y, &[(hh * A31, &k1), (hh * A32, &k2)]));
            let k4 = f(
                t + C4 * hh,
                &axpy(&y, &[(hh * A41, &k1), (hh * A42, &k2), (hh * A43, &k3)]),
            );
            let k5 = f(
                t + C5 * hh,
                &axpy(&y, &[(hh * A51, &k1), (hh * A52, &k2), (hh * A53, &k3), (hh * A54, &k4)]),
            );
            // stages at the segment end see the left limit of f
            let t_end_stage = if last { stop.next_down() } else { t + hh };
            let k6 = f(
                t_end_stage,
                &axpy(
                    &y,
                    &[(hh * A61, &k1), (hh * A62, &k2), (hh * A63, &k3), (hh * A64, &k4), (hh * A65, &k5)],
                ),
            );
            let y_new = axpy(
                &y,
                &[(hh * A71, &k1), (hh * A73, &k3), (hh * A74, &k4), (hh * A75, &k5), (hh * A76, &k6)],
            );
            let t_new = if last { stop } else { t + hh };
            let k7 = f(t_end_stage, &y_new);
            let mut err2 = 0.0;
            for i in 0..D {
                let e = hh * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = opts.atol + opts.rtol * y[i].norm().max(y_new[i].norm());
                err2 += (e.re / sc).powi(2) + (e.im / sc).powi(2);
            }
            let err = (err2 / (2 * D) as f64).sqrt();
            if !err.is_finite() {
                return Err(Error::Integrator {
                    t,
                    reason: "non-finite state".into(),
                });
            }
            if err <= 1.0 {
                while out_idx < outputs.len() && outputs[out_idx] <= t_new {
                    let theta = ((outputs[out_idx] - t) / hh).clamp(0.0, 1.0);
                    result.push(dense(&y, &y_new, hh, theta, [&k1, &k3, &k4, &k5, &k6, &k7]));
                    out_idx += 1;
                }
                t = t_new;
                y = y_new;
                k1 = k7;
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                if !last {
                    h = hh * fac;
                }
            } else {
                h = hh * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            }
        }
        if stop < t_end {
            // restart: derivative may jump here
            k1 = f(t, &y);
        }
    }
    while out_idx < outputs.len() {
        result.push(y);
        out_idx += 1;
    }
    Ok(result)
}

fn dense<const D: usize>(
    y0: &State<D>,
    y1: &State<D>,
    h: f64,
    theta: f64,
    k: [&State<D>; 6],
) -> State<D> {
    if theta == 1.0 {
        return *y1;
    }
    let [k1, k3, k4, k5, k6, k7] = k;
    let mut out = [Complex64::new(0.0, 0.0); D];
    let th1 = 1.0 - theta;
    for i in 0..D {
        let ydiff = y1[i] - y0[i];
        let bspl = h * k1[i] - ydiff;
        let r4 = ydiff - h * k7[i] - bspl;
        let r5 = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
        out[i] = y0[i] + theta * (ydiff + th1 * (bspl + theta * (r4 + th1 * r5)));
    }
    out
}

fn initial_step<const D: usize, F>(f: &mut F, t: f64, y: &State<D>, k1: &State<D>, span: f64, opts: &OdeOptions) -> f64
where
    F: FnMut(f64, &State<D>) -> State<D>,
{
    let mut d0: f64 = 0.0;
    let mut d1: f64 = 0.0;
    for i in 0..D {
        let sc = opts.atol + opts.rtol * y[i].norm();
        d0 += (y[i].norm() / sc).powi(2);
        d1 += (k1[i].norm() / sc).powi(2);
    }
    let (d0, d1) = ((d0 / D as f64).sqrt(), (d1 / D as f64).sqrt());
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(span);
    let y1 = axpy(y, &[(h0, k1)]);
    let k2 = f(t + h0, &y1);
    let mut d2: f64 = 0.0;
    for i in 0..D {
        let sc = opts.atol + opts.rtol * y[i].norm();
        d2 += ((k2[i] - k1[i]).norm() / sc).powi(2);
    }
    let d2 = (d2 / D as f64).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span).max(1e-12 * span)
}
