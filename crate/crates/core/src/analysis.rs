//! Performance analysis: exact coordinated MMSE, the price of anarchy
//! (the extra MSE of the optimal uncoordinated tracker), its single-step
//! bound, stability checks and MRT rates.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::coordinated::jc_kf_step;
use crate::error::{Error, Result};
use crate::filter_core::{lyapunov_residual, lyapunov_solve, spectral_radius};
use crate::joint::{Dynamics, JointBelief, MixtureCovariance};
use crate::model::{sample_access, step_state, substream, AccessPattern, CovFactor, Stream};
use crate::uncoordinated::{
    enumerate_patterns, optimal_step, pattern_log_prior, HypothesisSet, PatternSet, HYPOTHESIS_BUDGET,
};

/// Expected MMSE of the joint Kalman filter at one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatedMmse {
    pub total: f64,
    pub per_device: Vec<f64>,
}

/// Monte Carlo price-of-anarchy estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct PoaReport {
    pub coordinated_mmse: f64,
    pub uncoordinated_mse: f64,
    pub poa: f64,
    /// Single-step bound, only when `t = 1`.
    pub thm1_bound: Option<f64>,
    pub trials: usize,
    pub std_error: f64,
}

/// Downlink rate of one device under MRT beamforming.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSample {
    pub device: usize,
    pub slot: usize,
    pub sinr: f64,
    pub capacity_bits: f64,
}

/// Result of the empirical stability check.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    /// Largest spectral radius over the per-device transition blocks.
    pub spectral_radius: f64,
    /// Trace of the stationary prior covariance, when the system is stable.
    pub stationary_trace: Option<f64>,
    /// Largest per-device Lyapunov residual, when the system is stable.
    pub lyapunov_residual: Option<f64>,
    /// Max JC covariance trace over the horizon, one entry per checked history.
    pub max_traces: Vec<f64>,
    /// Trace the growth threshold is measured against.
    pub reference_trace: f64,
    /// Some history exceeded `1e3 * reference_trace`.
    pub unbounded: bool,
}

/// Growth factor above the reference trace that counts as unbounded.
pub const UNBOUNDED_FACTOR: f64 = 1e3;

fn check_histories(devices: usize, t: usize) -> Result<()> {
    let requested = (devices as u32)
        .checked_mul(t as u32)
        .and_then(|bits| 1usize.checked_shl(bits))
        .filter(|&n| n <= HYPOTHESIS_BUDGET);
    match requested {
        Some(_) => Ok(()),
        None => Err(Error::HypothesisBudgetExceeded {
            requested: 1usize
                .checked_shl((devices * t).min(63) as u32)
                .unwrap_or(usize::MAX),
            budget: HYPOTHESIS_BUDGET,
        }),
    }
}

fn check_lambdas(dynamics: &Dynamics, lambdas: &[f64]) -> Result<()> {
    if lambdas.len() != dynamics.devices() {
        return Err(Error::DimensionMismatch(format!(
            "{} access probabilities for {} devices",
            lambdas.len(),
            dynamics.devices()
        )));
    }
    Ok(())
}

/// Covariance-only JC step; the mean stays at zero.
fn covariance_step(b: &JointBelief, q: &AccessPattern, dynamics: &Dynamics) -> Result<JointBelief> {
    jc_kf_step(b, &DVector::zeros(dynamics.antennas()), q, dynamics)
}

fn zero_mean(initial: &JointBelief) -> JointBelief {
    let mut b = initial.clone();
    b.mean.fill(0.0);
    b
}

/// `sum_{q_{1:t}} p(q_{1:t}) trace(P_{t|t}(q_{1:t}))` by enumerating every history.
pub fn coordinated_mmse_exact(
    dynamics: &Dynamics,
    lambdas: &[f64],
    initial: &JointBelief,
    t: usize,
) -> Result<CoordinatedMmse> {
    check_lambdas(dynamics, lambdas)?;
    check_histories(dynamics.devices(), t)?;
    let patterns = PatternSet::all(lambdas)?;
    let k = dynamics.devices();
    let mut out = CoordinatedMmse {
        total: 0.0,
        per_device: vec![0.0; k],
    };
    let mut frontier = vec![(0.0_f64, zero_mean(initial))];
    for _ in 0..t {
        let mut next = Vec::with_capacity(frontier.len() * patterns.len());
        for (lp, b) in &frontier {
            for (j, q) in patterns.patterns.iter().enumerate() {
                let prior = patterns.log_priors[j];
                if prior == f64::NEG_INFINITY {
                    continue;
                }
                next.push((lp + prior, covariance_step(b, q, dynamics)?));
            }
        }
        frontier = next;
    }
    for (lp, b) in &frontier {
        let p = lp.exp();
        out.total += p * b.trace();
        for (d, acc) in out.per_device.iter_mut().enumerate() {
            *acc += p * b.device_trace(d);
        }
    }
    Ok(out)
}

/// One Monte Carlo draw of `sum_q p(q | y) |m_q - h_u|^2` at slot `t`.
fn poa_sample<R: Rng + ?Sized>(
    dynamics: &Dynamics,
    lambdas: &[f64],
    initial: &JointBelief,
    patterns: &PatternSet,
    t: usize,
    rng: &mut R,
) -> Result<f64> {
    let m = dynamics.antennas();
    let a_blocks: Vec<_> = (0..dynamics.devices()).map(|k| dynamics.a_block(k).clone()).collect();
    let q_factors: Vec<_> = (0..dynamics.devices()).map(|k| CovFactor::new(dynamics.q_block(k))).collect();
    let r_factor = CovFactor::new(&dynamics.noise().to_dense(m));
    let mut h = &initial.mean + CovFactor::new(&initial.dense_cov()).sample(initial.dim(), rng);
    let mut hyps = HypothesisSet::new(initial.clone(), HYPOTHESIS_BUDGET);
    let mut summary = initial.clone();
    for _ in 0..t {
        h = step_state(&h, &a_blocks, &q_factors, rng);
        let q = sample_access(lambdas, rng);
        let mut y = r_factor.sample(m, rng);
        for (k, &active) in q.bits.iter().enumerate() {
            if active {
                y += h.rows(k * m, m);
            }
        }
        let (next, s) = optimal_step(&hyps, &y, dynamics, patterns, MixtureCovariance::Exact)?;
        hyps = next;
        summary = s;
    }
    Ok(hyps
        .hypotheses
        .iter()
        .map(|hy| hy.log_weight.exp() * (&hy.belief.mean - &summary.mean).norm_squared())
        .sum())
}

/// Price of anarchy at slot `t`, estimated over `trials` simulated trajectories
/// that all start from the shared belief `initial`.
pub fn poa_estimate(
    dynamics: &Dynamics,
    lambdas: &[f64],
    initial: &JointBelief,
    t: usize,
    trials: usize,
    seed: u64,
) -> Result<PoaReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let coordinated = coordinated_mmse_exact(dynamics, lambdas, initial, t)?;
    let patterns = PatternSet::all(lambdas)?;
    let samples: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64, Stream::Analysis);
            poa_sample(dynamics, lambdas, initial, &patterns, t, &mut rng)
        })
        .collect::<Result<_>>()?;
    let n = trials as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std_error = if trials > 1 {
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let thm1 = if t == 1 {
        Some(thm1_bound(dynamics, lambdas, initial)?)
    } else {
        None
    };
    Ok(PoaReport {
        coordinated_mmse: coordinated.total,
        uncoordinated_mse: coordinated.total + mean,
        poa: mean,
        thm1_bound: thm1,
        trials,
        std_error,
    })
}

/// Single-step bound on the price of anarchy for a shared initial belief:
///
/// `sum_q p(q) [ h^T B^T K^T K B h + trace(R + B P B^T) - sum_q' p(q') h^T B^T K^T K' B' h ]`
///
/// with `h`, `P` the one-step prediction and `K(q)` the gain of pattern `q`
/// (zero for the silent pattern).
pub fn thm1_bound(dynamics: &Dynamics, lambdas: &[f64], initial: &JointBelief) -> Result<f64> {
    check_lambdas(dynamics, lambdas)?;
    let m = dynamics.antennas();
    let predicted = initial.predict(dynamics);
    let zero = DVector::zeros(m);
    let noise_trace = dynamics.noise().trace(m);
    let patterns = enumerate_patterns(dynamics.devices())?;
    let mut first = 0.0;
    let mut mean_gain = DVector::zeros(predicted.dim());
    for q in &patterns {
        let p = pattern_log_prior(q, lambdas).exp();
        if p == 0.0 {
            continue;
        }
        // K B h = h - (h + K (0 - B h))
        let v = &predicted.mean - predicted.correct(&zero, &q.as_f64(), dynamics.noise())?.mean;
        let active: Vec<usize> = (0..q.len()).filter(|&k| q.bits[k]).collect();
        let mut bpb = 0.0;
        for &k in &active {
            for &l in &active {
                bpb += predicted.cov_block(k, l).trace();
            }
        }
        first += p * (v.norm_squared() + noise_trace + bpb);
        mean_gain += v * p;
    }
    Ok(first - mean_gain.norm_squared())
}

/// Empirical stability check of the joint Kalman filter over `horizon` slots.
///
/// Each constant pattern with positive probability is checked (when `K <= 6`)
/// together with `samples` histories drawn from the access prior.
pub fn stability_check(
    dynamics: &Dynamics,
    lambdas: &[f64],
    initial: &JointBelief,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<StabilityReport> {
    check_lambdas(dynamics, lambdas)?;
    let k = dynamics.devices();
    let radius = (0..k)
        .map(|j| spectral_radius(dynamics.a_block(j)))
        .fold(0.0_f64, f64::max);
    let mut stationary_trace = None;
    let mut residual = None;
    if radius < 1.0 - 1e-8 {
        let mut tr = 0.0;
        let mut res = 0.0_f64;
        for j in 0..k {
            let p = lyapunov_solve(dynamics.a_block(j), dynamics.q_block(j))?;
            res = res.max(lyapunov_residual(dynamics.a_block(j), dynamics.q_block(j), &p));
            tr += p.trace();
        }
        stationary_trace = Some(tr);
        residual = Some(res);
    }
    let reference = stationary_trace
        .unwrap_or(0.0)
        .max(initial.trace())
        .max(f64::MIN_POSITIVE);

    let mut histories: Vec<Vec<AccessPattern>> = Vec::new();
    if k <= 6 {
        for q in enumerate_patterns(k)? {
            if pattern_log_prior(&q, lambdas) > f64::NEG_INFINITY {
                histories.push(vec![q; horizon]);
            }
        }
    }
    let mut rng = substream(seed, 0, Stream::Analysis);
    for _ in 0..samples {
        histories.push((0..horizon).map(|_| sample_access(lambdas, &mut rng)).collect());
    }

    let start = zero_mean(initial);
    let max_traces: Vec<f64> = histories
        .par_iter()
        .map(|hist| {
            let mut b = start.clone();
            let mut worst = b.trace();
            for q in hist {
                b = covariance_step(&b, q, dynamics)?;
                let tr = b.trace();
                worst = if tr.is_finite() { worst.max(tr) } else { f64::INFINITY };
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let unbounded = max_traces.iter().any(|&t| !(t <= UNBOUNDED_FACTOR * reference));
    Ok(StabilityReport {
        spectral_radius: radius,
        stationary_trace,
        lyapunov_residual: residual,
        max_traces,
        reference_trace: reference,
        unbounded,
    })
}

/// MRT rates: beam `z_k = h_hat_k / |h_hat_k|` (zero for a zero estimate) and
/// `SINR_k = |h_k^T z_k|^2 / (sum_{l != k} |h_k^T z_l|^2 + sigma_v2)`.
pub fn mrt_capacity(
    h_true: &DVector<f64>,
    estimates: &DVector<f64>,
    devices: usize,
    sigma_v2: f64,
    slot: usize,
) -> Result<Vec<RateSample>> {
    if devices == 0 || h_true.len() != estimates.len() || !h_true.len().is_multiple_of(devices) {
        return Err(Error::DimensionMismatch(format!(
            "channels of length {} and estimates of length {} for {devices} devices",
            h_true.len(),
            estimates.len()
        )));
    }
    if !(sigma_v2 > 0.0) {
        return Err(Error::InvalidParameter("sigma_v2 must be positive".into()));
    }
    let m = h_true.len() / devices;
    let beams: Vec<DVector<f64>> = (0..devices)
        .map(|k| {
            let e = estimates.rows(k * m, m).into_owned();
            let n = e.norm();
            if n > 0.0 {
                e / n
            } else {
                e
            }
        })
        .collect();
    Ok((0..devices)
        .map(|k| {
            let hk = h_true.rows(k * m, m);
            let signal = hk.dot(&beams[k]).powi(2);
            let interference: f64 = (0..devices)
                .filter(|&l| l != k)
                .map(|l| hk.dot(&beams[l]).powi(2))
                .sum();
            let sinr = signal / (interference + sigma_v2);
            RateSample {
                device: k,
                slot,
                sinr,
                capacity_bits: (1.0 + sinr).log2(),
            }
        })
        .collect())
}
