//! Shared fixtures for the tracker benchmarks.

use anarchy_track::model::{substream, Simulator, Stream};
use anarchy_track::{JointBelief, ScenarioConfig};
use nalgebra::DVector;

/// A default scenario, its acquisition belief and `slots` despread measurements.
pub struct Fixture {
    pub sim: Simulator,
    pub initial: JointBelief,
    pub measurements: Vec<DVector<f64>>,
}

pub fn fixture(devices: usize, antennas: usize, slots: usize) -> Fixture {
    let mut cfg = ScenarioConfig::with_defaults(devices, antennas);
    cfg.acquisition_cov = 0.1;
    let sim = Simulator::new(&cfg).expect("default scenario is valid");
    let mut rng = substream(0, 0, Stream::State);
    let (mut h, initial) = sim.initial(&mut rng);
    let mut measurements = Vec::with_capacity(slots);
    for _ in 0..slots {
        h = sim.step_state(&h, &mut rng);
        let q = sim.sample_access(&mut rng);
        measurements.push(sim.emit_measurement(&h, &q, &mut rng).y);
    }
    Fixture {
        sim,
        initial,
        measurements,
    }
}
