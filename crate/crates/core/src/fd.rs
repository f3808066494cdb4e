//! Richardson-extrapolated central differences, the fallback for
//! derivatives that fields do not provide analytically.

use nalgebra::DVector;

/// Default base step for the fallback derivatives.
pub const FD_STEP: f64 = 1e-4;

/// Directional derivative `d/ds f(x + s u)` at `s = 0`.
///
/// Combines central differences at `h` and `h/2`; truncation error is
/// `O(h^4)`.
pub fn directional<F>(f: F, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let central = |step: f64| {
        let plus = f(&(x + u * step));
        let minus = f(&(x - u * step));
        (plus - minus) / (2.0 * step)
    };
    let coarse = central(h);
    let fine = central(0.5 * h);
    (fine * 4.0 - coarse) / 3.0
}

/// As [`directional`] for fallible evaluations.
pub fn try_directional<F, E>(f: F, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> Result<DVector<f64>, E>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, E>,
{
    let central = |step: f64| -> Result<DVector<f64>, E> {
        let plus = f(&(x + u * step))?;
        let minus = f(&(x - u * step))?;
        Ok((plus - minus) / (2.0 * step))
    };
    let coarse = central(h)?;
    let fine = central(0.5 * h)?;
    Ok((fine * 4.0 - coarse) / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use num_traits::Float;

    #[test]
    fn cubic_is_exact_to_rounding() {
        let f = |x: &DVector<f64>| DVector::from_vec(vec![x[0] * x[0] * x[0], x[0] * x[1]]);
        let x = DVector::from_vec(vec![1.3, -0.7]);
        let u = DVector::from_vec(vec![1.0, 2.0]);
        let d = directional(f, &x, &u, FD_STEP);
        assert!((d[0] - 3.0 * 1.3 * 1.3).abs() < 1e-9);
        assert!((d[1] - (-0.7 + 2.0 * 1.3)).abs() < 1e-9);
    }

    #[test]
    fn smooth_function() {
        let f = |x: &DVector<f64>| DVector::from_vec(vec![Float::sin(x[0])]);
        let x = DVector::from_vec(vec![0.4]);
        let u = DVector::from_vec(vec![1.0]);
        let d = directional(f, &x, &u, FD_STEP);
        assert!((d[0] - Float::cos(0.4_f64)).abs() < 1e-10);
    }
}
