//! One-dimensional quadrature on compact intervals.
//!
//! Kernel moment verification only ever integrates smooth functions on a
//! bounded support, so adaptive Simpson with a recursion cap is enough.
//! The composite rule is kept public because grid-refinement stability of
//! `∫K²` is part of the kernel acceptance checks.

use num_traits::Float;

/// Composite Simpson rule with `panels` subintervals (rounded up to even).
pub fn composite_simpson<F, G>(f: G, a: F, b: F, panels: usize) -> F
where
    F: Float,
    G: Fn(F) -> F,
{
    let m = if panels % 2 == 0 { panels.max(2) } else { panels + 1 };
    let n = F::from(m).unwrap();
    let h = (b - a) / n;
    let two = F::from(2.0).unwrap();
    let four = F::from(4.0).unwrap();
    let mut acc = f(a) + f(b);
    for idx in 1..m {
        let x = a + h * F::from(idx).unwrap();
        acc = acc + if idx % 2 == 0 { two * f(x) } else { four * f(x) };
    }
    acc * h / F::from(6.0).unwrap() * two
}

/// Adaptive Simpson integration of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F, G>(f: G, a: F, b: F, tol: F) -> F
where
    F: Float,
    G: Fn(F) -> F,
{
    let half = F::from(0.5).unwrap();
    let m = (a + b) * half;
    let fa = f(a);
    let fb = f(b);
    let fm = f(m);
    let whole = simpson_segment(a, b, fa, fm, fb);
    adaptive_step(&f, a, b, fa, fm, fb, whole, tol, 50)
}

fn simpson_segment<F: Float>(a: F, b: F, fa: F, fm: F, fb: F) -> F {
    let four = F::from(4.0).unwrap();
    (b - a) / F::from(6.0).unwrap() * (fa + four * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_step<F, G>(f: &G, a: F, b: F, fa: F, fm: F, fb: F, whole: F, tol: F, depth: u32) -> F
where
    F: Float,
    G: Fn(F) -> F,
{
    let half = F::from(0.5).unwrap();
    let m = (a + b) * half;
    let lm = (a + m) * half;
    let rm = (m + b) * half;
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson_segment(a, m, fa, flm, fm);
    let right = simpson_segment(m, b, fm, frm, fb);
    let delta = left + right - whole;
    let fifteen = F::from(15.0).unwrap();
    if depth == 0 || delta.abs() <= fifteen * tol {
        return left + right + delta / fifteen;
    }
    adaptive_step(f, a, m, fa, flm, fm, left, tol * half, depth - 1)
        + adaptive_step(f, m, b, fm, frm, fb, right, tol * half, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn simpson_integrates_cubic_exactly() {
        // Simpson is exact for cubics.
        let val = composite_simpson(|x: f64| x * x * x - 2.0 * x, -1.0, 2.0, 8);
        assert_abs_diff_eq!(val, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn adaptive_matches_known_integral() {
        let val = adaptive_simpson(|x: f64| (1.0 - x * x).powi(2), -1.0, 1.0, 1e-12);
        assert_abs_diff_eq!(val, 16.0 / 15.0, epsilon = 1e-11);
    }

    #[test]
    fn works_in_f32() {
        let val = composite_simpson(|x: f32| x * x, 0.0f32, 1.0f32, 64);
        assert!((val - 1.0 / 3.0).abs() < 1e-5);
    }
}
