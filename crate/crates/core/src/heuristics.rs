//! Low-complexity pattern handling: active-count estimation with collision
//! discarding, least-squares pattern estimates and coordinate-ascent
//! likelihood maximization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter_core::{cholesky_jittered, logpdf_with_cholesky};
use crate::joint::{Dynamics, JointBelief, MeasNoise};
use crate::model::{AccessPattern, PilotBook};
use crate::uncoordinated::{pattern_log_prior, PatternSet};

/// How a pattern estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateMode {
    Soft,
    Hard,
    Mle,
}

/// Estimated activity vector; soft estimates may be fractional.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternEstimate {
    pub q_hat: Vec<f64>,
    pub mode: EstimateMode,
}

/// `(|Y phi_1|^2 - |Y phi_e|^2) / M` with `phi_e` the unused pilot.
pub fn estimate_active_count(raw: &DMatrix<f64>, pilots: &PilotBook) -> Result<f64> {
    if pilots.tau() < 2 {
        return Err(Error::InvalidParameter(
            "active-count estimation needs an unused pilot (tau >= 2)".into(),
        ));
    }
    if raw.ncols() != pilots.tau() {
        return Err(Error::DimensionMismatch(format!(
            "received block has {} columns for pilot length {}",
            raw.ncols(),
            pilots.tau()
        )));
    }
    let m = raw.nrows() as f64;
    let used = (raw * pilots.first()).norm_squared();
    let unused = (raw * pilots.unused()).norm_squared();
    Ok((used - unused) / m)
}

/// Rounds half up and clamps at zero.
pub fn round_active_count(estimate: f64) -> usize {
    (estimate + 0.5).floor().max(0.0) as usize
}

/// What a collision-discarding tracker does in one slot.
#[derive(Debug, Clone, PartialEq)]
pub enum DiscardDecision {
    /// At most one device is believed active: restrict to silent and single-device patterns.
    Restrict(PatternSet),
    /// A collision is believed to have happened: prediction only.
    Discard,
}

/// Decision rule of the collision-discarding wrappers.
pub fn discard_decision(raw: &DMatrix<f64>, pilots: &PilotBook, lambdas: &[f64]) -> Result<DiscardDecision> {
    if round_active_count(estimate_active_count(raw, pilots)?) >= 2 {
        Ok(DiscardDecision::Discard)
    } else {
        Ok(DiscardDecision::Restrict(PatternSet::at_most_one(lambdas)))
    }
}

/// Symmetric pseudo-inverse that drops eigenvalues below `1e-10 * max`.
fn pinv_symmetric(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
    let cut = 1e-10 * max;
    let inv = eig
        .eigenvalues
        .map(|l| if l.abs() > cut && l != 0.0 { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Unconstrained least squares `(H^T H)^{-1} H^T y`, pseudo-inverse when singular.
pub fn ls_unconstrained(h_hat: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if h_hat.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "H is {}x{} but y has length {}",
            h_hat.nrows(),
            h_hat.ncols(),
            y.len()
        )));
    }
    let gram = h_hat.tr_mul(h_hat);
    let rhs = h_hat.tr_mul(y);
    if let Some(ch) = gram.clone().cholesky() {
        let x = ch.solve(&rhs);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    Ok(pinv_symmetric(&gram) * rhs)
}

/// Least-squares pattern: soft clamps each entry to `[0, 1]`, hard rounds it (0.5 goes to 1).
pub fn ls_pattern(h_hat: &DMatrix<f64>, y: &DVector<f64>, mode: EstimateMode) -> Result<PatternEstimate> {
    let x = ls_unconstrained(h_hat, y)?;
    let q_hat = match mode {
        EstimateMode::Soft => x.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        EstimateMode::Hard => x.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
        EstimateMode::Mle => {
            return Err(Error::InvalidParameter(
                "least squares produces soft or hard estimates".into(),
            ))
        }
    };
    Ok(PatternEstimate { q_hat, mode })
}

/// Objective of the coordinate-ascent pattern search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaObjective {
    /// Likelihood only.
    Ml,
    /// Likelihood plus the Bernoulli prior.
    Map,
}

/// Result of a coordinate-ascent search.
#[derive(Debug, Clone, PartialEq)]
pub struct CaOutcome {
    pub pattern: AccessPattern,
    pub objective: f64,
    pub toggles: usize,
}

/// Coordinate ascent over binary vectors, starting from all zeros.
///
/// Coordinates are visited in ascending order; a flip is kept only when it
/// strictly improves `objective`. Sweeps repeat until one makes no change,
/// with at most `2^K` accepted flips.
pub fn coordinate_ascent<F>(devices: usize, mut objective: F) -> Result<CaOutcome>
where
    F: FnMut(&AccessPattern) -> Result<f64>,
{
    let mut q = AccessPattern::silent(devices);
    let mut best = objective(&q)?;
    let cap = 1usize.checked_shl(devices as u32).unwrap_or(usize::MAX);
    let mut toggles = 0;
    'sweeps: loop {
        let mut changed = false;
        for k in 0..devices {
            q.bits[k] = !q.bits[k];
            let value = objective(&q)?;
            if value > best {
                best = value;
                toggles += 1;
                changed = true;
                if toggles >= cap {
                    break 'sweeps;
                }
            } else {
                q.bits[k] = !q.bits[k];
            }
        }
        if !changed {
            break;
        }
    }
    Ok(CaOutcome {
        pattern: q,
        objective: best,
        toggles,
    })
}

/// `-1/2 log|C| - 1/2 e^T C^{-1} e` with `e = y - H q` and `C = sum_{k,l} q_k q_l P_{kl} + R`.
pub fn ca_objective(
    h_hat: &DMatrix<f64>,
    y: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q: &AccessPattern,
) -> Result<f64> {
    let m = h_hat.nrows();
    let qv = q.as_f64();
    let mut c = r.clone();
    for (k, &qk) in qv.iter().enumerate() {
        for (l, &ql) in qv.iter().enumerate() {
            if qk != 0.0 && ql != 0.0 {
                c += p_pred.view((k * m, l * m), (m, m)) * (qk * ql);
            }
        }
    }
    let e = y - h_hat * DVector::from_vec(qv);
    let chol = cholesky_jittered(&c, "residual covariance")?;
    // logpdf minus the constant -M/2 log(2 pi)
    Ok(logpdf_with_cholesky(&e, &chol) + 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Coordinate-ascent pattern estimate from explicit predicted means and joint covariance.
pub fn ca_mle_pattern(
    h_hat: &DMatrix<f64>,
    y: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    r: &DMatrix<f64>,
    lambdas: &[f64],
    mode: CaObjective,
) -> Result<PatternEstimate> {
    let k = h_hat.ncols();
    let m = h_hat.nrows();
    if p_pred.nrows() != k * m || r.nrows() != m || lambdas.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "CA search with H {m}x{k}, P {}x{}, R {}x{}, {} priors",
            p_pred.nrows(),
            p_pred.ncols(),
            r.nrows(),
            r.ncols(),
            lambdas.len()
        )));
    }
    let out = coordinate_ascent(k, |q| {
        let mut v = ca_objective(h_hat, y, p_pred, r, q)?;
        if mode == CaObjective::Map {
            v += pattern_log_prior(q, lambdas);
        }
        Ok(v)
    })?;
    Ok(PatternEstimate {
        q_hat: out.pattern.as_f64(),
        mode: EstimateMode::Mle,
    })
}

/// The same search driven by a predicted joint belief.
pub fn ca_pattern_from_belief(
    predicted: &JointBelief,
    y: &DVector<f64>,
    noise: &MeasNoise,
    lambdas: &[f64],
    mode: CaObjective,
) -> Result<CaOutcome> {
    coordinate_ascent(predicted.devices(), |q| {
        let mut v = predicted.loglik(y, &q.as_f64(), noise)?;
        if mode == CaObjective::Map {
            v += pattern_log_prior(q, lambdas);
        }
        Ok(v)
    })
}

/// Kalman correction with `B(q_hat)`; an all-zero estimate leaves the belief unchanged.
pub fn heuristic_correct(
    predicted: &JointBelief,
    y: &DVector<f64>,
    q_hat: &PatternEstimate,
    dynamics: &Dynamics,
) -> Result<JointBelief> {
    predicted.correct(y, &q_hat.q_hat, dynamics.noise())
}

/// One slot of an LS tracker: predict, estimate the pattern from the predicted means, correct.
pub fn ls_step(
    belief: &JointBelief,
    y: &DVector<f64>,
    dynamics: &Dynamics,
    mode: EstimateMode,
) -> Result<(JointBelief, PatternEstimate)> {
    let predicted = belief.predict(dynamics);
    let est = ls_pattern(&predicted.mean_matrix(), y, mode)?;
    let post = heuristic_correct(&predicted, y, &est, dynamics)?;
    Ok((post, est))
}

/// One slot of a coordinate-ascent tracker.
pub fn ca_step(
    belief: &JointBelief,
    y: &DVector<f64>,
    dynamics: &Dynamics,
    lambdas: &[f64],
    mode: CaObjective,
) -> Result<(JointBelief, PatternEstimate)> {
    let predicted = belief.predict(dynamics);
    let out = ca_pattern_from_belief(&predicted, y, dynamics.noise(), lambdas, mode)?;
    let est = PatternEstimate {
        q_hat: out.pattern.as_f64(),
        mode: EstimateMode::Mle,
    };
    let post = heuristic_correct(&predicted, y, &est, dynamics)?;
    Ok((post, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinated::jc_kf_step;
    use crate::filter_core::kf_correct;
    use crate::joint::{build_b, JointCov};
    use crate::model::{make_pilots, sample_initial_state, substream, ScenarioConfig, Simulator, Stream};
    use crate::uncoordinated::enumerate_patterns;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn active_count_noiseless() {
        let pilots = make_pilots(4);
        let m = 3;
        let h = DVector::from_vec(vec![1.0, -1.0, 1.0]);
        let raw = &h * pilots.first().transpose();
        assert_eq!(estimate_active_count(&raw, &pilots).unwrap(), 1.0);
        assert_eq!(estimate_active_count(&DMatrix::zeros(m, 4), &pilots).unwrap(), 0.0);
        assert!(estimate_active_count(&DMatrix::zeros(m, 1), &make_pilots(1)).is_err());
    }

    #[test]
    fn active_count_two_devices_large_array() {
        let mut cfg = ScenarioConfig::with_defaults(2, 256);
        cfg.lambdas = vec![1.0, 1.0];
        let sim = Simulator::new(&cfg).unwrap();
        let mut rng = substream(12, 0, Stream::Noise);
        let n = 1000;
        let mut total = 0.0;
        for _ in 0..n {
            let h = sample_initial_state(2, 256, &mut rng);
            let meas = sim.emit_measurement(&h, &AccessPattern::new(vec![true, true]), &mut rng);
            total += estimate_active_count(&meas.raw, &sim.pilots).unwrap();
        }
        assert!((total / n as f64 - 2.0).abs() < 0.2);
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_active_count(-0.7), 0);
        assert_eq!(round_active_count(0.49), 0);
        assert_eq!(round_active_count(0.5), 1);
        assert_eq!(round_active_count(2.5), 3);
    }

    #[test]
    fn discard_rule() {
        let pilots = make_pilots(4);
        let lambdas = [0.1, 0.1, 0.1];
        let silent = DMatrix::zeros(2, 4);
        match discard_decision(&silent, &pilots, &lambdas).unwrap() {
            DiscardDecision::Restrict(set) => {
                assert_eq!(set.len(), 4);
                assert_eq!(set.patterns[0], AccessPattern::silent(3));
            }
            DiscardDecision::Discard => panic!("silent slot must not be discarded"),
        }
        let loud = DMatrix::from_fn(2, 4, |_, c| if c == 0 { 3.0f64.sqrt() * 1.0 } else { 0.0 }) * 1.0;
        assert_eq!(
            discard_decision(&(loud * 1.0), &pilots, &lambdas).unwrap(),
            DiscardDecision::Discard
        );
    }

    #[test]
    fn ls_cases() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let y = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(ls_pattern(&eye, &y, EstimateMode::Soft).unwrap().q_hat, vec![1.0, 0.0]);
        assert_eq!(ls_pattern(&eye, &y, EstimateMode::Hard).unwrap().q_hat, vec![1.0, 0.0]);
        let y = DVector::from_vec(vec![-0.3, 1.2]);
        assert_eq!(ls_pattern(&eye, &y, EstimateMode::Soft).unwrap().q_hat, vec![0.0, 1.0]);
        assert_eq!(ls_pattern(&eye, &y, EstimateMode::Hard).unwrap().q_hat, vec![0.0, 1.0]);
        let y = DVector::from_vec(vec![0.4, 0.6]);
        assert_eq!(ls_pattern(&eye, &y, EstimateMode::Soft).unwrap().q_hat, vec![0.4, 0.6]);
        assert_eq!(ls_pattern(&eye, &y, EstimateMode::Hard).unwrap().q_hat, vec![0.0, 1.0]);
        let y = DVector::from_vec(vec![0.5, 0.49]);
        assert_eq!(ls_pattern(&eye, &y, EstimateMode::Hard).unwrap().q_hat, vec![1.0, 0.0]);
    }

    #[test]
    fn ls_singular_uses_pseudo_inverse() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let x = ls_unconstrained(&h, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && (x[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn soft_ls_is_box_constrained_minimizer_for_orthogonal_columns() {
        let mut s = 41;
        for _ in 0..20 {
            let scale = [0.5 + lcg(&mut s).abs(), 0.5 + lcg(&mut s).abs()];
            let h = DMatrix::from_fn(3, 2, |r, c| if r == c { scale[c] } else { 0.0 });
            let y = DVector::from_fn(3, |_, _| 2.0 * lcg(&mut s));
            let soft = ls_pattern(&h, &y, EstimateMode::Soft).unwrap().q_hat;
            let cost = |q: &[f64]| (&y - &h * DVector::from_column_slice(q)).norm_squared();
            let mut best = f64::INFINITY;
            for i in 0..=200 {
                for j in 0..=200 {
                    best = best.min(cost(&[i as f64 / 200.0, j as f64 / 200.0]));
                }
            }
            assert!(cost(&soft) <= best + 1e-12);
        }
    }

    // Clamping is not the box-constrained minimizer once columns correlate;
    // the excess cost is reported, not asserted.
    #[test]
    fn soft_ls_gap_for_correlated_columns() {
        let mut s = 43;
        let mut worst: f64 = 0.0;
        let mut nonzero = 0;
        for _ in 0..50 {
            let h = DMatrix::from_fn(3, 2, |_, _| lcg(&mut s));
            let y = DVector::from_fn(3, |_, _| 2.0 * lcg(&mut s));
            let soft = ls_pattern(&h, &y, EstimateMode::Soft).unwrap().q_hat;
            let cost = |q: &[f64]| (&y - &h * DVector::from_column_slice(q)).norm_squared();
            // exact box minimum: interior stationary point, then each edge
            let mut best = f64::INFINITY;
            let free = ls_unconstrained(&h, &y).unwrap();
            if free.iter().all(|v| (0.0..=1.0).contains(v)) {
                best = cost(free.as_slice());
            }
            for fixed in 0..2 {
                let other = 1 - fixed;
                for edge in [0.0, 1.0] {
                    let resid = &y - h.column(fixed) * edge;
                    let col = h.column(other);
                    let t = (col.dot(&resid) / col.norm_squared()).clamp(0.0, 1.0);
                    let mut q = [0.0; 2];
                    q[fixed] = edge;
                    q[other] = t;
                    best = best.min(cost(&q));
                }
            }
            let gap = cost(&soft) - best;
            assert!(gap > -1e-9 * best.max(1.0));
            if gap > 1e-6 {
                nonzero += 1;
            }
            worst = worst.max(gap);
        }
        eprintln!("clamped LS excess cost: {nonzero}/50 instances above 1e-6, max {worst:.3e}");
    }

    #[test]
    fn ca_silent_measurement_selects_nothing() {
        let mut s = 5;
        let h = DMatrix::from_fn(3, 3, |_, _| lcg(&mut s));
        let est = ca_mle_pattern(
            &h,
            &DVector::zeros(3),
            &DMatrix::zeros(9, 9),
            &DMatrix::identity(3, 3),
            &[0.5; 3],
            CaObjective::Ml,
        )
        .unwrap();
        assert_eq!(est.q_hat, vec![0.0; 3]);
    }

    #[test]
    fn ca_noiseless_superposition() {
        let h = DMatrix::from_row_slice(4, 2, &[3.0, 0.0, 0.0, 3.0, 3.0, 0.0, 0.0, -3.0]);
        let y = h.column(0) + h.column(1);
        let p = DMatrix::identity(8, 8) * 0.01;
        let est = ca_mle_pattern(&h, &y, &p, &(DMatrix::identity(4, 4) * 0.01), &[0.5; 2], CaObjective::Ml).unwrap();
        assert_eq!(est.q_hat, vec![1.0, 1.0]);
    }

    #[test]
    fn ca_beats_random_and_is_locally_optimal() {
        let mut s = 77;
        for _ in 0..50 {
            let h = DMatrix::from_fn(1, 2, |_, _| 2.0 * lcg(&mut s));
            let y = DVector::from_element(1, 2.0 * lcg(&mut s));
            let g = DMatrix::from_fn(2, 2, |_, _| lcg(&mut s));
            let p = &g * g.transpose();
            let r = DMatrix::from_element(1, 1, 0.5);
            let est = ca_mle_pattern(&h, &y, &p, &r, &[0.5; 2], CaObjective::Ml).unwrap();
            let found = AccessPattern::new(est.q_hat.iter().map(|&v| v == 1.0).collect());
            let f = ca_objective(&h, &y, &p, &r, &found).unwrap();
            for q in enumerate_patterns(2).unwrap() {
                if (0..2).filter(|&k| q.bits[k] != found.bits[k]).count() == 1 {
                    assert!(ca_objective(&h, &y, &p, &r, &q).unwrap() <= f);
                }
            }
            for _ in 0..3 {
                let idx = ((lcg(&mut s) + 1.0) * 2.0) as usize % 4;
                let q = AccessPattern::from_index(idx, 2);
                let v = ca_objective(&h, &y, &p, &r, &q).unwrap();
                let is_neighbour = (0..2).filter(|&k| q.bits[k] != found.bits[k]).count() <= 1;
                if is_neighbour {
                    assert!(v <= f);
                }
            }
        }
    }

    #[test]
    fn belief_driven_search_matches_explicit_search() {
        let mut s = 3;
        for _ in 0..30 {
            let k = 3;
            let m = 2;
            let g = DMatrix::from_fn(k, k, |_, _| lcg(&mut s));
            let sigma = &g * g.transpose() + DMatrix::identity(k, k) * 0.05;
            let b = JointBelief::new(DVector::from_fn(k * m, |_, _| 2.0 * lcg(&mut s)), JointCov::Iso(sigma), k, m).unwrap();
            let y = DVector::from_fn(m, |_, _| 3.0 * lcg(&mut s));
            let noise = MeasNoise::Iso(0.5);
            let lambdas = [0.3, 0.5, 0.8];
            for mode in [CaObjective::Ml, CaObjective::Map] {
                let a = ca_pattern_from_belief(&b, &y, &noise, &lambdas, mode).unwrap();
                let e = ca_mle_pattern(&b.mean_matrix(), &y, &b.dense_cov(), &noise.to_dense(m), &lambdas, mode).unwrap();
                assert_eq!(a.pattern.as_f64(), e.q_hat);
            }
        }
    }

    #[test]
    fn heuristic_correction_cases() {
        let d = Dynamics::isotropic(1, vec![0.95; 2], vec![0.0975; 2], 1.0).unwrap();
        let b = JointBelief::isotropic(DVector::from_vec(vec![0.2, -0.4]), 2, 1, 0.5).unwrap();
        let y = DVector::from_element(1, 0.7);
        let q = AccessPattern::new(vec![true, false]);
        let pred = b.predict(&d);
        let est = PatternEstimate { q_hat: q.as_f64(), mode: EstimateMode::Hard };
        assert_eq!(heuristic_correct(&pred, &y, &est, &d).unwrap(), jc_kf_step(&b, &y, &q, &d).unwrap());
        let zero = PatternEstimate { q_hat: vec![0.0, 0.0], mode: EstimateMode::Hard };
        assert_eq!(heuristic_correct(&pred, &y, &zero, &d).unwrap(), pred);
        let soft = PatternEstimate { q_hat: vec![0.5, 0.5], mode: EstimateMode::Soft };
        let out = heuristic_correct(&pred, &y, &soft, &d).unwrap();
        let reference = kf_correct(&pred.to_belief(), &y, &build_b(&[0.5, 0.5], 1), &DMatrix::identity(1, 1)).unwrap();
        assert!((&out.mean - &reference.mean).amax() < 1e-14);
        assert!((out.dense_cov() - &reference.cov).amax() < 1e-14);
    }
}
