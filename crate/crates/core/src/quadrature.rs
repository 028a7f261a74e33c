//! Adaptive Gauss–Kronrod (7/15) integration in one and two dimensions.

use std::cell::RefCell;

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Equal panels an adaptive integration starts from, so that a peak much
/// narrower than `[a, b]` is not missed by the first rule.
pub const INITIAL_PANELS: usize = 16;

/// Most subintervals an adaptive integration may create.
pub const MAX_SUBINTERVALS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Integral {
    pub value: f64,
    /// Sum of `|K15 − G7|` over the final subintervals.
    pub error: f64,
    pub evaluations: usize,
}

fn kronrod15(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let s = f(c - h * XGK[j]) + f(c + h * XGK[j]);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Integrates `f` over `[a, b]` to absolute error `abs_tol`, or fails with
/// a precision error.
pub fn integrate(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, abs_tol: f64) -> Result<Integral> {
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::Config(format!("integration bounds [{a}, {b}] must be finite and ordered")));
    }
    let mut intervals = Vec::with_capacity(INITIAL_PANELS);
    let w = (b - a) / INITIAL_PANELS as f64;
    for k in 0..INITIAL_PANELS {
        let lo = a + k as f64 * w;
        let hi = if k + 1 == INITIAL_PANELS { b } else { lo + w };
        let (v, e) = kronrod15(f, lo, hi);
        intervals.push((lo, hi, v, e));
    }
    let mut evaluations = 15 * INITIAL_PANELS;
    loop {
        let value: f64 = intervals.iter().map(|iv| iv.2).sum();
        let error: f64 = intervals.iter().map(|iv| iv.3).sum();
        if !value.is_finite() || !error.is_finite() {
            return Err(Error::Precision {
                tolerance: abs_tol,
                estimate: f64::INFINITY,
            });
        }
        if error <= abs_tol {
            return Ok(Integral {
                value,
                error,
                evaluations,
            });
        }
        let (worst, _) = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty");
        let (lo, hi, _, _) = intervals[worst];
        let mid = 0.5 * (lo + hi);
        if intervals.len() >= MAX_SUBINTERVALS || mid <= lo || mid >= hi {
            return Err(Error::Precision {
                tolerance: abs_tol,
                estimate: error,
            });
        }
        let (v1, e1) = kronrod15(f, lo, mid);
        let (v2, e2) = kronrod15(f, mid, hi);
        evaluations += 30;
        intervals[worst] = (lo, mid, v1, e1);
        intervals.push((mid, hi, v2, e2));
    }
}

/// Integrates `f(x, y)` over a rectangle by nesting [`integrate`]. Each
/// inner integral is solved to `abs_tol / (10 · (bx − ax))`, so the inner
/// errors together contribute at most a tenth of the budget.
pub fn integrate_2d(
    f: &mut dyn FnMut(f64, f64) -> f64,
    (ax, bx): (f64, f64),
    (ay, by): (f64, f64),
    abs_tol: f64,
) -> Result<Integral> {
    let inner_tol = abs_tol / (10.0 * (bx - ax));
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let mut evaluations = 0;
    let mut outer = |x: f64| {
        if failure.borrow().is_some() {
            return 0.0;
        }
        match integrate(&mut |y| f(x, y), ay, by, inner_tol) {
            Ok(r) => {
                evaluations += r.evaluations;
                r.value
            }
            Err(e) => {
                *failure.borrow_mut() = Some(e);
                0.0
            }
        }
    };
    let result = integrate(&mut outer, ax, bx, 0.9 * abs_tol);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let r = result?;
    Ok(Integral {
        value: r.value,
        error: r.error + abs_tol / 10.0,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let r = integrate(&mut |x| x.powi(10) - 3.0 * x, -1.0, 2.0, 1e-12).unwrap();
        let exact = (2f64.powi(11) + 1.0) / 11.0 - 1.5 * (4.0 - 1.0);
        assert!((r.value - exact).abs() < 1e-12);
    }

    #[test]
    fn gaussian_mass() {
        let r = integrate(
            &mut |x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            -10.0,
            10.0,
            1e-10,
        )
        .unwrap();
        assert!((r.value - 1.0).abs() < 1e-10);
    }

    #[test]
    fn separable_2d() {
        let r = integrate_2d(&mut |x, y| x.cos() * y.exp(), (0.0, 1.0), (0.0, 2.0), 1e-9).unwrap();
        let exact = 1f64.sin() * (2f64.exp() - 1.0);
        assert!((r.value - exact).abs() < 1e-9);
    }

    #[test]
    fn narrow_peak_is_found() {
        let s = 0.05;
        let r = integrate(&mut |x| (-0.5 * ((x - 1.3) / s).powi(2)).exp(), -10.0, 10.0, 1e-10).unwrap();
        assert!((r.value - s * (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn unreachable_tolerance_is_an_error() {
        let r = integrate(&mut |x: f64| (1.0 / x).sin(), 1e-9, 1.0, 1e-15);
        assert!(matches!(r, Err(Error::Precision { .. })));
    }
}
