//! EMA parameter updates and scalar training schedules.
//!
//! Schedules are pure functions of a (possibly fractional) epoch
//! position; the trainer evaluates them per optimization step at
//! `epoch + step/steps_per_epoch`, so replaying a run reproduces the
//! exact schedule trace. Endpoint values are returned as exact literals.

use crate::error::{Error, Result};

/// Teacher-temperature ramp: linear 0.04 -> 0.07 over `n_tau_epochs`,
/// constant 0.07 afterwards.
pub fn tau_t_schedule(epoch: f64, n_tau_epochs: f64) -> Result<f64> {
    if epoch < 0.0 {
        return Err(Error::InvalidArg(format!("negative epoch {epoch}")));
    }
    if n_tau_epochs < 1.0 {
        return Err(Error::InvalidArg(format!(
            "tau ramp needs at least one epoch, got {n_tau_epochs}"
        )));
    }
    if epoch >= n_tau_epochs {
        return Ok(0.07);
    }
    Ok(0.04 + (0.07 - 0.04) * (epoch / n_tau_epochs))
}

/// Head-EMA decay: linear 0.998 -> 1.0 across the whole training.
pub fn zeta_schedule(epoch: f64, total_epochs: f64) -> Result<f64> {
    if epoch < 0.0 {
        return Err(Error::InvalidArg(format!("negative epoch {epoch}")));
    }
    if total_epochs < 1.0 {
        return Err(Error::InvalidArg("total_epochs must be >= 1".into()));
    }
    if epoch > total_epochs {
        return Err(Error::InvalidArg(format!(
            "epoch {epoch} beyond total {total_epochs}"
        )));
    }
    if epoch >= total_epochs {
        return Ok(1.0);
    }
    Ok(0.998 + (1.0 - 0.998) * (epoch / total_epochs))
}

/// Encoder-EMA decay: monotone linear interpolation between the
/// configured endpoints.
pub fn lambda_schedule(
    epoch: f64,
    total_epochs: f64,
    lambda_start: f64,
    lambda_end: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_start)
        || !(0.0..=1.0).contains(&lambda_end)
        || lambda_start > lambda_end
    {
        return Err(Error::InvalidArg(format!(
            "lambda bounds must satisfy 0 <= start <= end <= 1, got ({lambda_start}, {lambda_end})"
        )));
    }
    if epoch < 0.0 {
        return Err(Error::InvalidArg(format!("negative epoch {epoch}")));
    }
    if total_epochs < 1.0 {
        return Err(Error::InvalidArg("total_epochs must be >= 1".into()));
    }
    if epoch >= total_epochs {
        return Ok(lambda_end);
    }
    Ok(lambda_start + (lambda_end - lambda_start) * (epoch / total_epochs))
}

/// Learning rate: linear warm-up 0 -> base over `warmup_epochs`, then
/// cosine decay to 0 at `total_epochs`.
pub fn lr_schedule(epoch: f64, warmup_epochs: f64, total_epochs: f64, base_lr: f64) -> Result<f64> {
    if warmup_epochs >= total_epochs {
        return Err(Error::InvalidArg(format!(
            "warmup {warmup_epochs} must be shorter than training {total_epochs}"
        )));
    }
    if epoch < 0.0 {
        return Err(Error::InvalidArg(format!("negative epoch {epoch}")));
    }
    if warmup_epochs > 0.0 && epoch < warmup_epochs {
        return Ok(base_lr * (epoch / warmup_epochs));
    }
    if epoch >= total_epochs {
        return Ok(0.0);
    }
    let progress = (epoch - warmup_epochs) / (total_epochs - warmup_epochs);
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Elementwise EMA: `target = decay * target + (1 - decay) * source`,
/// applied once per optimization step after the optimizer update.
pub fn ema_update_array(
    target: &mut ndarray::Array2<f64>,
    source: &ndarray::Array2<f64>,
    decay: f64,
) -> Result<()> {
    if target.raw_dim() != source.raw_dim() {
        return Err(Error::Shape(format!(
            "EMA target {:?} vs source {:?}",
            target.shape(),
            source.shape()
        )));
    }
    target.zip_mut_with(source, |t, &s| *t = decay * *t + (1.0 - decay) * s);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn tau_t_endpoints_exact() {
        assert_eq!(tau_t_schedule(0.0, 10.0).unwrap(), 0.04);
        assert_eq!(tau_t_schedule(10.0, 10.0).unwrap(), 0.07);
        assert_eq!(tau_t_schedule(35.0, 10.0).unwrap(), 0.07);
        assert_abs_diff_eq!(tau_t_schedule(5.0, 10.0).unwrap(), 0.055, epsilon = 1e-12);
        assert!(tau_t_schedule(-1.0, 10.0).is_err());
        assert!(tau_t_schedule(0.0, 0.0).is_err());
    }

    #[test]
    fn zeta_endpoints_exact() {
        assert_eq!(zeta_schedule(0.0, 50.0).unwrap(), 0.998);
        assert_eq!(zeta_schedule(50.0, 50.0).unwrap(), 1.0);
        assert_abs_diff_eq!(zeta_schedule(25.0, 50.0).unwrap(), 0.999, epsilon = 1e-12);
        assert!(zeta_schedule(51.0, 50.0).is_err());
        assert!(zeta_schedule(-0.5, 50.0).is_err());
    }

    #[test]
    fn lambda_endpoints_and_monotonicity() {
        let (s, e) = (0.99995, 0.99999);
        assert_eq!(lambda_schedule(0.0, 100.0, s, e).unwrap(), s);
        assert_eq!(lambda_schedule(100.0, 100.0, s, e).unwrap(), e);
        let mut prev = 0.0;
        for epoch in 0..=100 {
            let v = lambda_schedule(f64::from(epoch), 100.0, s, e).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert!(lambda_schedule(0.0, 100.0, 0.9, 0.8).is_err());
        assert!(lambda_schedule(0.0, 100.0, -0.1, 0.5).is_err());
    }

    #[test]
    fn lr_warmup_and_cosine() {
        let base = 3e-4;
        assert_eq!(lr_schedule(0.0, 20.0, 300.0, base).unwrap(), 0.0);
        assert_eq!(lr_schedule(20.0, 20.0, 300.0, base).unwrap(), base);
        assert_eq!(lr_schedule(300.0, 20.0, 300.0, base).unwrap(), 0.0);
        // Midpoint of the cosine leg is base/2.
        assert_abs_diff_eq!(
            lr_schedule(160.0, 20.0, 300.0, base).unwrap(),
            base / 2.0,
            epsilon = 1e-15
        );
        // Zero warmup starts at full rate.
        assert_eq!(lr_schedule(0.0, 0.0, 10.0, base).unwrap(), base);
        assert!(lr_schedule(0.0, 300.0, 300.0, base).is_err());
    }

    #[test]
    fn schedules_are_pure() {
        for epoch in 0..40 {
            let e = f64::from(epoch);
            assert_eq!(
                tau_t_schedule(e, 10.0).unwrap(),
                tau_t_schedule(e, 10.0).unwrap()
            );
            assert_eq!(
                lr_schedule(e, 5.0, 40.0, 1e-3).unwrap(),
                lr_schedule(e, 5.0, 40.0, 1e-3).unwrap()
            );
        }
    }

    #[test]
    fn ema_update_cases() {
        let source = array![[0.0, 2.0]];
        let mut t = array![[1.0, 1.0]];
        ema_update_array(&mut t, &source, 1.0).unwrap();
        assert_eq!(t, array![[1.0, 1.0]]);

        let mut t = array![[1.0, 1.0]];
        ema_update_array(&mut t, &source, 0.0).unwrap();
        assert_eq!(t, source);

        let mut t = array![[1.0, 1.0]];
        ema_update_array(&mut t, &source, 0.9).unwrap();
        assert_abs_diff_eq!(t[[0, 0]], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(t[[0, 1]], 1.1, epsilon = 1e-15);

        let mut wrong = array![[1.0], [2.0]];
        assert!(ema_update_array(&mut wrong, &source, 0.5).is_err());
    }

    #[test]
    fn ema_twice_equals_squared_decay_against_frozen_source() {
        let source = array![[0.25, -0.5, 2.0]];
        let start = array![[1.0, 0.0, -1.0]];
        let d: f64 = 0.9;

        let mut twice = start.clone();
        ema_update_array(&mut twice, &source, d).unwrap();
        ema_update_array(&mut twice, &source, d).unwrap();

        // d^2 * t + (1 - d^2) * s
        let mut once = start.clone();
        ema_update_array(&mut once, &source, d * d).unwrap();

        for (a, b) in twice.iter().zip(once.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }
}
