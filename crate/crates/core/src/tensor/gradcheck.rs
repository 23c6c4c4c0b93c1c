//! Central-difference verification of reverse-mode gradients.

use super::{backward, Tape, Tensor};
use crate::error::{Error, Result};

/// Floor used in the relative-error denominator.
pub const REL_EPS: f64 = 1e-12;

/// Compares the tape gradient of `f` at `x` against central differences
/// over the given coordinates, returning the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
///
/// `f` must be deterministic: it is evaluated twice at `x` up front and a
/// bitwise mismatch is a contract error (an unfrozen RNG stream inside `f`
/// would invalidate the comparison).
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    if let Some(&bad) = coords.iter().find(|&&i| i >= x.numel()) {
        return Err(Error::Input(format!(
            "coordinate {bad} out of range for {} elements",
            x.numel()
        )));
    }

    let probe_a = f(&x.detach())?.scalar_value()?;
    let probe_b = f(&x.detach())?.scalar_value()?;
    if probe_a.to_bits() != probe_b.to_bits() {
        return Err(Error::Contract(
            "function is not deterministic at fixed input (unfrozen RNG?)".into(),
        ));
    }

    let tape = Tape::new();
    let xt = tape.watch(x);
    let out = f(&xt)?;
    if !out.is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check requires a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let grads = backward(&out)?;
    let analytic = grads.wrt(&xt)?;
    let ad = analytic.data();

    let mut worst: f64 = 0.0;
    for &i in coords {
        let v = x.data()[i];
        let plus = f(&x.with_element(i, v + h))?.scalar_value()?;
        let minus = f(&x.with_element(i, v - h))?.scalar_value()?;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = ad[i].abs().max(numeric.abs()).max(REL_EPS);
        worst = worst.max((ad[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// [`finite_diff_check_at`] over every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, h, &coords)
}

/// Outcome of [`finite_diff_check_split`].
#[derive(Clone, Copy, Debug)]
pub struct SplitCheck {
    /// Max relative error over coordinates where either gradient estimate
    /// reaches the magnitude floor.
    pub max_rel: f64,
    /// Max absolute disagreement over the remaining (near-zero-gradient)
    /// coordinates, where the relative measure is dominated by rounding in
    /// the central difference itself.
    pub max_abs_small: f64,
    pub conditioned: usize,
    pub small: usize,
}

/// Like [`finite_diff_check_at`], but splits coordinates into two regimes:
/// relative error where `max(|analytic|, |numeric|) >= magnitude_floor`,
/// absolute error below it. A derivative of size `eps/h` is
/// indistinguishable from rounding noise, so a relative comparison there
/// measures conditioning rather than correctness.
pub fn finite_diff_check_split<F>(
    f: F,
    x: &Tensor,
    h: f64,
    coords: &[usize],
    magnitude_floor: f64,
) -> Result<SplitCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    let probe_a = f(&x.detach())?.scalar_value()?;
    let probe_b = f(&x.detach())?.scalar_value()?;
    if probe_a.to_bits() != probe_b.to_bits() {
        return Err(Error::Contract(
            "function is not deterministic at fixed input (unfrozen RNG?)".into(),
        ));
    }
    let tape = Tape::new();
    let xt = tape.watch(x);
    let out = f(&xt)?;
    if !out.is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check requires a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let analytic = backward(&out)?.wrt(&xt)?;
    let ad = analytic.data();

    let mut result = SplitCheck { max_rel: 0.0, max_abs_small: 0.0, conditioned: 0, small: 0 };
    for &i in coords {
        let v = x.data()[i];
        let plus = f(&x.with_element(i, v + h))?.scalar_value()?;
        let minus = f(&x.with_element(i, v - h))?.scalar_value()?;
        let numeric = (plus - minus) / (2.0 * h);
        let scale = ad[i].abs().max(numeric.abs());
        if scale >= magnitude_floor {
            result.conditioned += 1;
            result.max_rel = result.max_rel.max((ad[i] - numeric).abs() / scale.max(REL_EPS));
        } else {
            result.small += 1;
            result.max_abs_small = result.max_abs_small.max((ad[i] - numeric).abs());
        }
    }
    Ok(result)
}
