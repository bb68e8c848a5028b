//! Adaptive Gauss–Kronrod (7/15) quadrature on finite intervals.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd Kronrod nodes (1, 3, 5) and the centre.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_intervals: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            abs: 1e-13,
            rel: 1e-11,
            max_intervals: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Estimate {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (i, (&x, &w)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let lo = f(c - h * x);
        let hi = f(c + h * x);
        kronrod += w * (lo + hi);
        if i % 2 == 1 {
            gauss += WG[i / 2] * (lo + hi);
        }
    }
    Estimate {
        value: kronrod * h,
        error: ((kronrod - gauss) * h).abs(),
    }
}

/// Integrate `f` over `[a, b]`, bisecting the worst panel until the summed
/// error estimate meets the tolerance.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: Tolerance) -> Result<Estimate, String> {
    integrate_panels(&f, &[a, b], tol)
}

/// Same as [`integrate`] but starting from a caller-supplied panel partition
/// (strictly increasing breakpoints). Useful for oscillatory integrands.
pub fn integrate_panels<F: Fn(f64) -> f64>(
    f: &F,
    breaks: &[f64],
    tol: Tolerance,
) -> Result<Estimate, String> {
    let mut panels: Vec<(f64, f64, Estimate)> = breaks
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| (w[0], w[1], gk15(f, w[0], w[1])))
        .collect();
    loop {
        let value: f64 = panels.iter().map(|p| p.2.value).sum();
        let error: f64 = panels.iter().map(|p| p.2.error).sum();
        if !value.is_finite() {
            return Err("non-finite integrand".into());
        }
        if error <= tol.abs.max(tol.rel * value.abs()) {
            return Ok(Estimate { value, error });
        }
        if panels.len() >= tol.max_intervals {
            return Err(format!(
                "interval budget exhausted (value {value:e}, error {error:e})"
            ));
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2.error.total_cmp(&y.1 .2.error))
            .expect("at least one panel");
        let (a, b, _) = panels.swap_remove(worst);
        let m = 0.5 * (a + b);
        panels.push((a, m, gk15(f, a, m)));
        panels.push((m, b, gk15(f, m, b)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let est = integrate(|x| x.powi(5) - 3.0 * x * x, 0.0, 2.0, Tolerance::default()).unwrap();
        assert!((est.value - (64.0 / 6.0 - 8.0)).abs() < 1e-13);
    }

    #[test]
    fn oscillatory_with_panels() {
        let breaks: Vec<f64> = (0..=40).map(|k| k as f64 * std::f64::consts::PI / 4.0).collect();
        let est = integrate_panels(&|x: f64| (8.0 * x).sin() * (-x).exp(), &breaks, Tolerance::default()).unwrap();
        let b = 10.0 * std::f64::consts::PI;
        let exact = (8.0 - (-b).exp() * (8.0 * (8.0 * b).cos() + (8.0 * b).sin())) / 65.0;
        assert!((est.value - exact).abs() < 1e-12);
    }
}
