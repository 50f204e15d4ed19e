use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interpolant `I_tau = alpha(tau) * x1 + sigma(tau) * noise`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpolantSchedule {
    /// `alpha = tau`, `sigma = 1 - tau`.
    #[default]
    Linear,
}

impl InterpolantSchedule {
    pub fn alpha(self, tau: f64) -> f64 {
        match self {
            InterpolantSchedule::Linear => tau,
        }
    }

    pub fn sigma(self, tau: f64) -> f64 {
        match self {
            InterpolantSchedule::Linear => 1.0 - tau,
        }
    }

    pub fn alpha_dot(self, _tau: f64) -> f64 {
        match self {
            InterpolantSchedule::Linear => 1.0,
        }
    }

    pub fn sigma_dot(self, _tau: f64) -> f64 {
        match self {
            InterpolantSchedule::Linear => -1.0,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::TauOutOfRange(tau))
    }
}

pub fn interpolate(x1: &[f64], noise: &[f64], tau: f64, schedule: InterpolantSchedule) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if x1.len() != noise.len() {
        return Err(Error::ShapeMismatch(format!("data has {} values, noise {}", x1.len(), noise.len())));
    }
    let (a, s) = (schedule.alpha(tau), schedule.sigma(tau));
    Ok(x1.iter().zip(noise).map(|(x, e)| s * e + a * x).collect())
}

/// `d I_tau / d tau`; for the linear schedule `x1 - noise` at every `tau`.
pub fn target_velocity(x1: &[f64], noise: &[f64], tau: f64, schedule: InterpolantSchedule) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let (a, s) = (schedule.alpha_dot(tau), schedule.sigma_dot(tau));
    Ok(x1.iter().zip(noise).map(|(x, e)| a * x + s * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LIN: InterpolantSchedule = InterpolantSchedule::Linear;

    #[test]
    fn endpoints_are_noise_and_data() {
        let x1 = [1.5, -2.0, 0.25];
        let e = [0.3, 0.7, -1.1];
        assert_eq!(interpolate(&x1, &e, 0.0, LIN).unwrap(), e);
        assert_eq!(interpolate(&x1, &e, 1.0, LIN).unwrap(), x1);
        let mid = interpolate(&x1, &e, 0.5, LIN).unwrap();
        for i in 0..3 {
            assert_eq!(mid[i], 0.5 * e[i] + 0.5 * x1[i]);
        }
        assert_eq!((LIN.alpha(0.0), LIN.alpha(1.0), LIN.sigma(0.0), LIN.sigma(1.0)), (0.0, 1.0, 1.0, 0.0));
    }

    #[test]
    fn tau_outside_unit_interval_is_rejected() {
        assert!(matches!(interpolate(&[1.0], &[0.0], 1.01, LIN), Err(Error::TauOutOfRange(_))));
        assert!(matches!(interpolate(&[1.0], &[0.0], -0.1, LIN), Err(Error::TauOutOfRange(_))));
    }

    proptest! {
        #[test]
        fn linear_path_identities(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..20),
            tau in 0.0f64..=1.0,
        ) {
            let x1: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let x0: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assert!((LIN.alpha(tau) + LIN.sigma(tau) - 1.0).abs() < 1e-15);
            let it = interpolate(&x1, &x0, tau, LIN).unwrap();
            let v = target_velocity(&x1, &x0, tau, LIN).unwrap();
            let v0 = target_velocity(&x1, &x0, 0.0, LIN).unwrap();
            for i in 0..x1.len() {
                prop_assert!((it[i] - (x0[i] + tau * (x1[i] - x0[i]))).abs() < 1e-12);
                prop_assert_eq!(v[i], v0[i]);
                prop_assert_eq!(v[i], x1[i] - x0[i]);
            }
        }
    }
}
