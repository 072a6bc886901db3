//! Ground truth: pilots, channel evolution, random access and measurements.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::joint::{scalar_identity, Dynamics, JointBelief};

pub use crate::joint::build_b;

/// Model and experiment parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Devices sharing the pilot (`K`).
    pub devices: usize,
    /// Base-station antennas (`M`).
    pub antennas: usize,
    /// Pilot length.
    pub tau: usize,
    /// Number of access slots (`T`).
    pub slots: usize,
    pub a_blocks: Vec<DMatrix<f64>>,
    pub q_blocks: Vec<DMatrix<f64>>,
    pub r: DMatrix<f64>,
    pub lambdas: Vec<f64>,
    /// Receiver noise variance for the rate evaluation.
    pub sigma_v2: f64,
    /// Variance of the acquisition error: `P_{0|0} = acquisition_cov * I`.
    pub acquisition_cov: f64,
    pub seed: u64,
    pub trials: usize,
}

impl ScenarioConfig {
    /// `tau = 16`, `T = 200`, `A = 0.95 I`, `Q = (1 - 0.95^2) I`, `R = I`, `lambda_k = (K - 1) / K`.
    pub fn with_defaults(devices: usize, antennas: usize) -> Self {
        let rho: f64 = 0.95;
        let eye = DMatrix::<f64>::identity(antennas, antennas);
        let lambda = if devices == 0 {
            0.0
        } else {
            (devices as f64 - 1.0) / devices as f64
        };
        Self {
            devices,
            antennas,
            tau: 16,
            slots: 200,
            a_blocks: vec![&eye * rho; devices],
            q_blocks: vec![&eye * (1.0 - rho * rho); devices],
            r: eye,
            lambdas: vec![lambda; devices],
            sigma_v2: 1.0,
            acquisition_cov: 0.0,
            seed: 0,
            trials: 500,
        }
    }

    /// Replaces every block by `A = rho I`, `Q = (1 - rho^2) I`.
    pub fn with_rho(mut self, rho: f64) -> Self {
        let eye = DMatrix::<f64>::identity(self.antennas, self.antennas);
        self.a_blocks = vec![&eye * rho; self.devices];
        self.q_blocks = vec![&eye * (1.0 - rho * rho); self.devices];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.devices == 0 {
            return bad("K must be at least 1".into());
        }
        if self.antennas == 0 {
            return bad("M must be at least 1".into());
        }
        if self.tau < 1 {
            return bad("tau must be at least 1".into());
        }
        if self.lambdas.len() != self.devices {
            return bad(format!("{} access probabilities for K = {}", self.lambdas.len(), self.devices));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return bad(format!("access probability {l} outside [0, 1]"));
        }
        if self.a_blocks.len() != self.devices || self.q_blocks.len() != self.devices {
            return bad(format!("expected {} A and Q blocks", self.devices));
        }
        let m = self.antennas;
        for (name, blocks) in [("A", &self.a_blocks), ("Q", &self.q_blocks)] {
            if blocks.iter().any(|b| b.nrows() != m || b.ncols() != m) {
                return bad(format!("every {name} block must be {m}x{m}"));
            }
        }
        for q in &self.q_blocks {
            check_psd(q, "Q block")?;
        }
        if self.r.nrows() != m || self.r.ncols() != m {
            return bad(format!("R must be {m}x{m}"));
        }
        check_psd(&self.r, "R")?;
        if self.r.clone().cholesky().is_none() {
            return Err(Error::NonPositiveDefinite("R".into()));
        }
        if !(self.sigma_v2 > 0.0) {
            return bad("sigma_v2 must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.acquisition_cov) {
            return bad("acquisition_cov must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// The active-count estimator needs an unused pilot.
    pub fn validate_active_count(&self) -> Result<()> {
        if self.tau < 2 {
            return Err(Error::InvalidParameter(
                "the active-count estimator needs tau >= 2 (one unused pilot)".into(),
            ));
        }
        Ok(())
    }

    pub fn dynamics(&self) -> Result<Dynamics> {
        Dynamics::new(self.a_blocks.clone(), self.q_blocks.clone(), self.r.clone())
    }
}

fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !crate::filter_core::covariance_is_valid(m) {
        return Err(Error::InvalidParameter(format!("{what} must be symmetric positive semi-definite")));
    }
    Ok(())
}

/// Binary activity vector of one slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AccessPattern {
    pub bits: Vec<bool>,
}

impl AccessPattern {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn silent(k: usize) -> Self {
        Self { bits: vec![false; k] }
    }

    /// Device `k` alone.
    pub fn single(k: usize, devices: usize) -> Self {
        let mut bits = vec![false; devices];
        bits[k] = true;
        Self { bits }
    }

    /// Pattern number `index` in enumeration order: device `k` is bit `k`.
    pub fn from_index(index: usize, devices: usize) -> Self {
        Self {
            bits: (0..devices).map(|k| (index >> k) & 1 == 1).collect(),
        }
    }

    pub fn index(&self) -> usize {
        self.bits
            .iter()
            .enumerate()
            .map(|(k, &b)| (b as usize) << k)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Orthonormal pilot sequences stored as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotBook {
    pub columns: DMatrix<f64>,
}

impl PilotBook {
    pub fn tau(&self) -> usize {
        self.columns.ncols()
    }

    /// The pilot shared by the tracked group.
    pub fn first(&self) -> DVector<f64> {
        self.columns.column(0).into_owned()
    }

    /// A pilot nobody transmits.
    pub fn unused(&self) -> DVector<f64> {
        self.columns.column(self.tau() - 1).into_owned()
    }
}

/// Columns of the `tau x tau` identity.
pub fn make_pilots(tau: usize) -> PilotBook {
    PilotBook {
        columns: DMatrix::identity(tau, tau),
    }
}

/// Raw received block and its despread pilot observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotMeasurement {
    /// `M x tau` received signal.
    pub raw: DMatrix<f64>,
    /// `raw * phi_1`.
    pub y: DVector<f64>,
}

/// Per-purpose random substreams of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    State = 1,
    Access = 2,
    Noise = 3,
    Analysis = 4,
}

/// Generator for `stream` of trial `trial` under the master `seed`.
pub fn substream(seed: u64, trial: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial.wrapping_mul(8).wrapping_add(stream as u64));
    rng
}

/// The four generators a simulated trajectory draws from.
#[derive(Debug, Clone)]
pub struct TrialStreams {
    pub init: ChaCha8Rng,
    pub state: ChaCha8Rng,
    pub access: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl TrialStreams {
    pub fn new(seed: u64, trial: u64) -> Self {
        Self {
            init: substream(seed, trial, Stream::Init),
            state: substream(seed, trial, Stream::State),
            access: substream(seed, trial, Stream::Access),
            noise: substream(seed, trial, Stream::Noise),
        }
    }
}

pub(crate) fn normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// `KM` independent standard normals.
pub fn sample_initial_state<R: Rng + ?Sized>(devices: usize, antennas: usize, rng: &mut R) -> DVector<f64> {
    normals(devices * antennas, rng)
}

/// Independent Bernoulli activity draws.
pub fn sample_access<R: Rng + ?Sized>(lambdas: &[f64], rng: &mut R) -> AccessPattern {
    AccessPattern {
        bits: lambdas.iter().map(|&l| rng.random::<f64>() < l).collect(),
    }
}

/// A square root `L` with `L L^T = C` for a PSD matrix.
#[derive(Debug, Clone)]
pub enum CovFactor {
    Scaled(f64),
    Matrix(DMatrix<f64>),
}

impl CovFactor {
    pub fn new(c: &DMatrix<f64>) -> Self {
        if let Some(s) = scalar_identity(c) {
            return CovFactor::Scaled(s.max(0.0).sqrt());
        }
        if let Some(ch) = c.clone().cholesky() {
            return CovFactor::Matrix(ch.l());
        }
        let eig = c.clone().symmetric_eigen();
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        CovFactor::Matrix(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DVector<f64> {
        let z = normals(n, rng);
        match self {
            CovFactor::Scaled(s) => z * *s,
            CovFactor::Matrix(l) => l * z,
        }
    }
}

/// Draws channels, patterns and measurements for one scenario.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub config: ScenarioConfig,
    pub dynamics: Dynamics,
    pub pilots: PilotBook,
    q_factors: Vec<CovFactor>,
    r_factor: CovFactor,
    sigma_w: f64,
}

impl Simulator {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let m = config.antennas as f64;
        Ok(Self {
            dynamics: config.dynamics()?,
            pilots: make_pilots(config.tau),
            q_factors: config.q_blocks.iter().map(CovFactor::new).collect(),
            r_factor: CovFactor::new(&config.r),
            sigma_w: (config.r.trace() / m).sqrt(),
            config: config.clone(),
        })
    }

    /// True channels at slot 0 and the acquisition belief trackers start from.
    ///
    /// The estimate is drawn as `N(0, (1 - c) I)` and the truth as the
    /// estimate plus `N(0, c I)`, so the truth keeps unit power and is
    /// distributed as the belief `N(estimate, c I)` given the estimate.
    pub fn initial<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, JointBelief) {
        let k = self.config.devices;
        let m = self.config.antennas;
        let c = self.config.acquisition_cov;
        let estimate = sample_initial_state(k, m, rng) * (1.0 - c).sqrt();
        let truth = if c > 0.0 {
            &estimate + sample_initial_state(k, m, rng) * c.sqrt()
        } else {
            estimate.clone()
        };
        let belief = JointBelief::isotropic(estimate, k, m, c).expect("shapes follow the config");
        (truth, belief)
    }

    /// `h'_k = A_k h_k + u_k`, `u_k ~ N(0, Q_k)`.
    pub fn step_state<R: Rng + ?Sized>(&self, h: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        step_state(h, &self.config.a_blocks, &self.q_factors, rng)
    }

    pub fn sample_access<R: Rng + ?Sized>(&self, rng: &mut R) -> AccessPattern {
        sample_access(&self.config.lambdas, rng)
    }

    /// `Y = sum_k q_k h_k phi_1^T + W` and `y = Y phi_1`.
    ///
    /// The noise seen through `phi_1` is drawn from `N(0, R)`; the remaining
    /// pilot dimensions carry i.i.d. noise of variance `trace(R) / M`.
    pub fn emit_measurement<R: Rng + ?Sized>(
        &self,
        h: &DVector<f64>,
        q: &AccessPattern,
        rng: &mut R,
    ) -> SlotMeasurement {
        let m = self.config.antennas;
        let tau = self.config.tau;
        let phi1 = self.pilots.first();
        let mut signal = DVector::zeros(m);
        for (k, &active) in q.bits.iter().enumerate() {
            if active {
                signal += h.rows(k * m, m);
            }
        }
        let mut white = DMatrix::zeros(m, tau);
        white.set_column(0, &self.r_factor.sample(m, rng));
        for c in 1..tau {
            white.set_column(c, &(normals(m, rng) * self.sigma_w));
        }
        // pilots are the identity columns, so the orthonormal change of basis is `W_white * Phi^T`
        let noise = &white * self.pilots.columns.transpose();
        let raw = &signal * phi1.transpose() + noise;
        let y = &raw * &phi1;
        SlotMeasurement { raw, y }
    }
}

/// Per-device `h'_k = A_k h_k + L_k z`.
pub fn step_state<R: Rng + ?Sized>(
    h: &DVector<f64>,
    a_blocks: &[DMatrix<f64>],
    q_factors: &[CovFactor],
    rng: &mut R,
) -> DVector<f64> {
    let k = a_blocks.len();
    let m = h.len() / k.max(1);
    let mut next = DVector::zeros(h.len());
    for j in 0..k {
        let hk = h.rows(j * m, m);
        let drift = match scalar_identity(&a_blocks[j]) {
            Some(a) => hk * a,
            None => &a_blocks[j] * hk,
        };
        next.rows_mut(j * m, m)
            .copy_from(&(drift + q_factors[j].sample(m, rng)));
    }
    next
}
