//! Globally adaptive Gauss–Kronrod (7/15) quadrature, nested for two dimensions.

use std::cell::Cell;

use crate::error::{Error, Result};

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
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
/// Gauss weights for the odd-indexed Kronrod nodes.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_INTERVALS: usize = 4000;
/// Panels before adaptation starts, so narrow features are not skipped.
const INITIAL_PANELS: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn kronrod<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> Piece {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let dx = r * XGK[j];
        let pair = f(c - dx) + f(c + dx);
        k += WGK[j] * pair;
        if j % 2 == 1 {
            g += WG[j / 2] * pair;
        }
    }
    Piece {
        a,
        b,
        value: k * r,
        error: ((k - g) * r).abs(),
    }
}

/// `int_a^b f` to `max(abs_tol, rel_tol |I|)`.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64> {
    let width = (b - a) / INITIAL_PANELS as f64;
    let mut pieces: Vec<Piece> = (0..INITIAL_PANELS)
        .map(|i| {
            let lo = a + i as f64 * width;
            let hi = if i + 1 == INITIAL_PANELS { b } else { lo + width };
            kronrod(&mut f, lo, hi)
        })
        .collect();
    loop {
        let value: f64 = pieces.iter().map(|p| p.value).sum();
        let error: f64 = pieces.iter().map(|p| p.error).sum();
        if !value.is_finite() || !error.is_finite() {
            return Err(Error::Quadrature {
                estimate: value,
                error,
            });
        }
        if error <= abs_tol.max(rel_tol * value.abs()) {
            return Ok(value);
        }
        if pieces.len() >= MAX_INTERVALS {
            return Err(Error::Quadrature {
                estimate: value,
                error,
            });
        }
        let worst = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let p = pieces.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        pieces.push(kronrod(&mut f, p.a, mid));
        pieces.push(kronrod(&mut f, mid, p.b));
    }
}

/// Integral of `f` over `[-1, 1]^d` for `d` in {1, 2}.
pub fn box_integral<F: Fn(&[f64]) -> f64>(dim: usize, f: F, rel_tol: f64) -> Result<f64> {
    let abs_tol = 1e-300;
    match dim {
        1 => integrate(|x| f(&[x]), -1.0, 1.0, abs_tol, rel_tol),
        2 => {
            let failure: Cell<Option<Error>> = Cell::new(None);
            let outer = integrate(
                |x| match integrate(|y| f(&[x, y]), -1.0, 1.0, abs_tol, 0.1 * rel_tol) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.set(Some(e));
                        f64::NAN
                    }
                },
                -1.0,
                1.0,
                abs_tol,
                rel_tol,
            );
            match failure.into_inner() {
                Some(e) => Err(e),
                None => outer,
            }
        }
        d => Err(Error::InvalidConfig(format!(
            "box quadrature supports 1 or 2 dimensions, got {d}"
        ))),
    }
}

/// Composite Simpson rule with `panels` (rounded up to even) per axis on
/// `[-1, 1]^d`; a fixed-grid cross-check for the adaptive rule.
pub fn simpson_box<F: Fn(&[f64]) -> f64>(dim: usize, f: F, panels: usize) -> Result<f64> {
    let n = panels.max(2).next_multiple_of(2);
    let h = 2.0 / n as f64;
    let w = |i: usize| match i {
        0 => 1.0,
        i if i == n => 1.0,
        i if i % 2 == 1 => 4.0,
        _ => 2.0,
    };
    let x = |i: usize| -1.0 + i as f64 * h;
    match dim {
        1 => Ok((0..=n).map(|i| w(i) * f(&[x(i)])).sum::<f64>() * h / 3.0),
        2 => {
            let mut acc = 0.0;
            for i in 0..=n {
                for j in 0..=n {
                    acc += w(i) * w(j) * f(&[x(i), x(j)]);
                }
            }
            Ok(acc * h * h / 9.0)
        }
        d => Err(Error::InvalidConfig(format!(
            "box quadrature supports 1 or 2 dimensions, got {d}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exponential() {
        let v = integrate(f64::exp, -1.0, 1.0, 0.0, 1e-12).unwrap();
        assert_relative_eq!(v, 1f64.exp() - (-1f64).exp(), max_relative = 1e-13);
    }

    #[test]
    fn normal_mass_in_unit_box() {
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let v = integrate(pdf, -1.0, 1.0, 0.0, 1e-12).unwrap();
        // P(|Z| < 1)
        assert_relative_eq!(v, 0.682_689_492_137_085_9, max_relative = 1e-13);
    }

    #[test]
    fn sharp_peak_is_resolved() {
        let s = 1e-2;
        let v = integrate(|x| (-(x - 0.3) * (x - 0.3) / (2.0 * s * s)).exp(), -1.0, 1.0, 0.0, 1e-10)
            .unwrap();
        assert_relative_eq!(v, s * (2.0 * std::f64::consts::PI).sqrt(), max_relative = 1e-9);
    }

    #[test]
    fn nested_product() {
        let v = box_integral(2, |a| (a[0] + 1.0) * (a[1] * a[1]), 1e-12).unwrap();
        assert_relative_eq!(v, 2.0 * (2.0 / 3.0), max_relative = 1e-12);
    }

    #[test]
    fn simpson_agrees_on_smooth_integrands() {
        let f = |a: &[f64]| (a[0] - 0.2).exp() * (1.0 + a[1] * a[1]);
        let adaptive = box_integral(2, f, 1e-12).unwrap();
        assert_relative_eq!(simpson_box(2, f, 400).unwrap(), adaptive, max_relative = 1e-10);
    }

    #[test]
    fn singular_integrand_fails() {
        let r = integrate(|x| 1.0 / x.abs().powf(1.2), -1.0, 1.0, 0.0, 1e-12);
        assert!(matches!(r, Err(Error::Quadrature { .. })));
    }
}
