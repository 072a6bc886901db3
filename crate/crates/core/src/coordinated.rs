//! Trackers that are told which devices transmitted in each slot.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::joint::{Dynamics, JointBelief};
use crate::model::AccessPattern;

/// Independent single-device beliefs, one per device.
#[derive(Debug, Clone, PartialEq)]
pub struct PerDeviceBeliefs {
    pub devices: Vec<JointBelief>,
}

impl PerDeviceBeliefs {
    /// Marginals of a joint belief (cross-covariances dropped).
    pub fn from_joint(b: &JointBelief) -> Self {
        Self {
            devices: (0..b.devices()).map(|k| b.device(k)).collect(),
        }
    }

    pub fn to_joint(&self) -> Result<JointBelief> {
        JointBelief::block_diagonal(&self.devices)
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn predict(&self, dynamics: &Dynamics) -> PerDeviceBeliefs {
        PerDeviceBeliefs {
            devices: self
                .devices
                .iter()
                .enumerate()
                .map(|(k, b)| b.predict_device(dynamics, k))
                .collect(),
        }
    }
}

fn check_pattern(q: &AccessPattern, devices: usize) -> Result<()> {
    if q.len() != devices {
        return Err(Error::DimensionMismatch(format!(
            "pattern of length {} for {devices} devices",
            q.len()
        )));
    }
    Ok(())
}

/// Joint Kalman step on the stacked state. Silent slots are prediction only.
pub fn jc_kf_step(
    state: &JointBelief,
    y: &DVector<f64>,
    q: &AccessPattern,
    dynamics: &Dynamics,
) -> Result<JointBelief> {
    check_pattern(q, state.devices())?;
    let predicted = state.predict(dynamics);
    if q.active_count() == 0 {
        return Ok(predicted);
    }
    predicted.correct(y, &q.as_f64(), dynamics.noise())
}

/// Per-device filters that only use measurements with exactly one transmitter.
pub fn ci_kf_step(
    state: &PerDeviceBeliefs,
    y: &DVector<f64>,
    q: &AccessPattern,
    dynamics: &Dynamics,
) -> Result<PerDeviceBeliefs> {
    check_pattern(q, state.len())?;
    let mut next = state.predict(dynamics);
    if q.active_count() == 1 {
        let k = q.bits.iter().position(|&b| b).expect("one active device");
        next.devices[k] = next.devices[k].correct(y, &[1.0], dynamics.noise())?;
    }
    Ok(next)
}

/// Per-device filters that subtract the predicted contribution of the other
/// active devices from `y` and add their predicted covariance to the noise.
///
/// All fictitious measurements of a slot are built from the predicted beliefs.
pub fn bp_kf_step(
    state: &PerDeviceBeliefs,
    y: &DVector<f64>,
    q: &AccessPattern,
    dynamics: &Dynamics,
) -> Result<PerDeviceBeliefs> {
    check_pattern(q, state.len())?;
    let predicted = state.predict(dynamics);
    let active: Vec<usize> = (0..q.len()).filter(|&k| q.bits[k]).collect();
    let m = dynamics.antennas();
    let mut next = predicted.clone();
    for &k in &active {
        let mut y_hat = y.clone();
        let mut noise = dynamics.noise().clone();
        for &j in active.iter().filter(|&&j| j != k) {
            y_hat -= &predicted.devices[j].mean;
            noise = noise.plus(&predicted.devices[j].cov, m);
        }
        next.devices[k] = predicted.devices[k].correct(&y_hat, &[1.0], &noise)?;
    }
    Ok(next)
}
