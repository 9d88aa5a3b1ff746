use crate::error::{check_open_unit, Error, Result};

/// `sqrt(ln(1/delta) / (2n))`.
pub fn hoeffding_penalty(n: usize, delta: f64) -> f64 {
    ((1.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// Smallest sample size whose Hoeffding penalty is strictly below `alpha`.
pub fn min_samples_for(alpha: f64, delta: f64) -> usize {
    let bound = (1.0 / delta).ln() / (2.0 * alpha * alpha);
    let mut n = bound.floor().max(1.0) as usize;
    while hoeffding_penalty(n, delta) >= alpha {
        n += 1;
    }
    n
}

/// Upper confidence bound on the risk from per-sample losses in `[0, 1]`:
/// the sample mean plus the Hoeffding penalty.
pub fn hoeffding_ucb(sample_losses: &[f64], delta: f64) -> Result<f64> {
    check_open_unit("delta", delta)?;
    if sample_losses.is_empty() {
        return Err(Error::Config("hoeffding_ucb needs at least one loss".into()));
    }
    if let Some(&value) = sample_losses.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidParameter {
            name: "loss",
            value,
            reason: "per-sample losses must lie in [0, 1]",
        });
    }
    Ok(ucb_unchecked(
        sample_losses,
        hoeffding_penalty(sample_losses.len(), delta),
    ))
}

#[inline]
pub(crate) fn ucb_unchecked(losses: &[f64], penalty: f64) -> f64 {
    mean(losses) + penalty
}

#[inline]
pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
