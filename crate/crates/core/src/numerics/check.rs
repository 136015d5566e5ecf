//! Central finite differences as an oracle for the reverse pass.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error of one coordinate: `|fd - g| / (|g| + eps)`.
pub fn relative_error(fd: f64, analytic: f64, epsilon: f64) -> f64 {
    (fd - analytic).abs() / (analytic.abs() + epsilon)
}

/// `(f(x + eps) - f(x - eps)) / 2 eps` where `f(delta)` evaluates the
/// objective with one coordinate shifted by `delta`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, epsilon: f64) -> Result<f64> {
    let plus = f(epsilon)?;
    let minus = f(-epsilon)?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Numeric(format!(
            "objective not finite: {} / {}",
            plus, minus
        )));
    }
    Ok((plus - minus) / (2.0 * epsilon))
}

/// Picks up to `max` coordinates out of `len`, deterministically.
pub fn sample_coordinates(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, len, max).into_vec();
    picked.sort_unstable();
    picked
}

/// Compares the tape gradient of a scalar function against central finite
/// differences and returns the largest relative error over the sampled
/// coordinates. Runs in 64-bit.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, epsilon: f64, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let value = tape.value(y).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective not finite: {}", value)));
    }
    let grads = tape.backward(y)?;
    let g = grads
        .get(xv)
        .ok_or_else(|| Error::Usage("input gradient missing".into()))?;

    let eval = |shifted: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(shifted);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut worst: f64 = 0.0;
    for i in sample_coordinates(x.len(), max_coords, 0x5eed) {
        let fd = central_difference(
            |delta| {
                let mut shifted = x.clone();
                shifted.data_mut()[i] += delta;
                eval(shifted)
            },
            epsilon,
        )?;
        worst = worst.max(relative_error(fd, g.data()[i], epsilon));
    }
    Ok(worst)
}
