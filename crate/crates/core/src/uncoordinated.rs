//! Trackers that must infer the access pattern from the measurement.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter_core::{cholesky_jittered, logpdf_with_cholesky, logsumexp, symmetrize};
use crate::joint::{mixture, Dynamics, JointBelief, JointCov, MeasNoise, MixtureCovariance, AUTO_EXACT_MAX_DIM};
use crate::model::AccessPattern;

/// Largest `|hypotheses| * |patterns|` the optimal tracker will expand to.
pub const HYPOTHESIS_BUDGET: usize = 4096;

/// Largest device count for which `2^K` patterns are enumerated.
pub const MAX_ENUMERATED_DEVICES: usize = 20;

/// All `2^K` patterns, device `k` being bit `k` of the enumeration index.
pub fn enumerate_patterns(devices: usize) -> Result<Vec<AccessPattern>> {
    if devices > MAX_ENUMERATED_DEVICES {
        return Err(Error::TooManyDevices(devices, MAX_ENUMERATED_DEVICES));
    }
    Ok((0..1usize << devices)
        .map(|i| AccessPattern::from_index(i, devices))
        .collect())
}

/// `log P(q) = sum_k q_k ln(lambda_k) + (1 - q_k) ln(1 - lambda_k)`.
pub fn pattern_log_prior(q: &AccessPattern, lambdas: &[f64]) -> f64 {
    q.bits
        .iter()
        .zip(lambdas)
        .map(|(&b, &l)| if b { l.ln() } else { (1.0 - l).ln() })
        .sum()
}

/// Candidate patterns of one slot with their prior log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    pub patterns: Vec<AccessPattern>,
    pub values: Vec<Vec<f64>>,
    pub log_priors: Vec<f64>,
}

impl PatternSet {
    pub fn new(patterns: Vec<AccessPattern>, lambdas: &[f64]) -> Self {
        let values = patterns.iter().map(|p| p.as_f64()).collect();
        let log_priors = patterns.iter().map(|p| pattern_log_prior(p, lambdas)).collect();
        Self {
            patterns,
            values,
            log_priors,
        }
    }

    /// Every pattern.
    pub fn all(lambdas: &[f64]) -> Result<Self> {
        Ok(Self::new(enumerate_patterns(lambdas.len())?, lambdas))
    }

    /// The silent pattern and the `K` single-device patterns.
    pub fn at_most_one(lambdas: &[f64]) -> Self {
        let k = lambdas.len();
        let mut patterns = vec![AccessPattern::silent(k)];
        patterns.extend((0..k).map(|j| AccessPattern::single(j, k)));
        Self::new(patterns, lambdas)
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}

/// One access-pattern history with its posterior log-weight and conditional belief.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub history: Vec<AccessPattern>,
    pub log_weight: f64,
    pub belief: JointBelief,
}

/// Weighted hypotheses; `capacity` bounds the set size for pruned trackers.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    pub hypotheses: Vec<Hypothesis>,
    pub capacity: usize,
}

impl HypothesisSet {
    /// Starts from the acquisition belief. Identical initial copies are kept as a single hypothesis.
    pub fn new(initial: JointBelief, capacity: usize) -> Self {
        Self {
            hypotheses: vec![Hypothesis {
                history: Vec::new(),
                log_weight: 0.0,
                belief: initial,
            }],
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.hypotheses.iter().map(|h| h.log_weight).collect()
    }

    /// The highest-weight hypothesis, earliest on ties.
    pub fn best(&self) -> Option<&Hypothesis> {
        let mut best: Option<&Hypothesis> = None;
        for h in &self.hypotheses {
            if best.is_none_or(|b| h.log_weight > b.log_weight) {
                best = Some(h);
            }
        }
        best
    }

    /// Moment-matched summary of the whole set.
    pub fn collapse(&self, policy: MixtureCovariance) -> Result<JointBelief> {
        let parts: Vec<(f64, &JointBelief)> = self
            .hypotheses
            .iter()
            .map(|h| (h.log_weight, &h.belief))
            .collect();
        mixture(&parts, policy)
    }

    /// Time update of every hypothesis; weights are unchanged.
    pub fn predict(&self, dynamics: &Dynamics) -> HypothesisSet {
        HypothesisSet {
            hypotheses: self
                .hypotheses
                .iter()
                .map(|h| Hypothesis {
                    history: h.history.clone(),
                    log_weight: h.log_weight,
                    belief: h.belief.predict(dynamics),
                })
                .collect(),
            capacity: self.capacity,
        }
    }
}

/// Exact mixture tracker: every history is extended by every candidate pattern.
///
/// Returns the expanded set and its moment-matched summary.
pub fn optimal_step(
    hyps: &HypothesisSet,
    y: &DVector<f64>,
    dynamics: &Dynamics,
    patterns: &PatternSet,
    policy: MixtureCovariance,
) -> Result<(HypothesisSet, JointBelief)> {
    let requested = hyps.len() * patterns.len();
    if requested > HYPOTHESIS_BUDGET {
        return Err(Error::HypothesisBudgetExceeded {
            requested,
            budget: HYPOTHESIS_BUDGET,
        });
    }
    let mut expanded = Vec::with_capacity(requested);
    for h in &hyps.hypotheses {
        let predicted = h.belief.predict(dynamics);
        for (j, q) in patterns.values.iter().enumerate() {
            let prior = patterns.log_priors[j];
            if prior == f64::NEG_INFINITY || h.log_weight == f64::NEG_INFINITY {
                continue;
            }
            let (belief, ll) = predicted.correct_with_loglik(y, q, dynamics.noise())?;
            let mut history = h.history.clone();
            history.push(patterns.patterns[j].clone());
            expanded.push(Hypothesis {
                history,
                log_weight: h.log_weight + ll + prior,
                belief,
            });
        }
    }
    normalize(&mut expanded)?;
    let set = HypothesisSet {
        hypotheses: expanded,
        capacity: hyps.capacity,
    };
    let summary = set.collapse(policy)?;
    Ok((set, summary))
}

fn normalize(hyps: &mut Vec<Hypothesis>) -> Result<()> {
    hyps.retain(|h| h.log_weight > f64::NEG_INFINITY);
    let lw: Vec<f64> = hyps.iter().map(|h| h.log_weight).collect();
    let lse = logsumexp(&lw);
    if !lse.is_finite() {
        return Err(Error::AllWeightsDegenerate);
    }
    for h in hyps.iter_mut() {
        h.log_weight -= lse;
    }
    Ok(())
}

/// Greedy tracker: corrects with the single most probable pattern.
///
/// Ties go to the earliest candidate.
pub fn gnn_step(
    belief: &JointBelief,
    y: &DVector<f64>,
    dynamics: &Dynamics,
    patterns: &PatternSet,
) -> Result<(JointBelief, AccessPattern)> {
    let predicted = belief.predict(dynamics);
    let mut best: Option<(usize, f64)> = None;
    for (j, q) in patterns.values.iter().enumerate() {
        let prior = patterns.log_priors[j];
        if prior == f64::NEG_INFINITY {
            continue;
        }
        let score = predicted.loglik(y, q, dynamics.noise())? + prior;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((j, score));
        }
    }
    let (j, _) = best.ok_or(Error::AllWeightsDegenerate)?;
    let post = predicted.correct(y, &patterns.values[j], dynamics.noise())?;
    Ok((post, patterns.patterns[j].clone()))
}

/// Pruned multi-hypothesis tracker.
///
/// Every kept hypothesis is extended by every candidate, the `capacity` best
/// extensions survive (stable order on ties), their weights are renormalized
/// and the best survivor's belief is returned.
pub fn mht_step(
    hyps: &HypothesisSet,
    y: &DVector<f64>,
    dynamics: &Dynamics,
    patterns: &PatternSet,
) -> Result<(HypothesisSet, JointBelief)> {
    if hyps.capacity == 0 {
        return Err(Error::InvalidParameter("MHT needs N_h >= 1".into()));
    }
    let predicted: Vec<JointBelief> = hyps.hypotheses.iter().map(|h| h.belief.predict(dynamics)).collect();
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(hyps.len() * patterns.len());
    for (i, h) in hyps.hypotheses.iter().enumerate() {
        for (j, q) in patterns.values.iter().enumerate() {
            let prior = patterns.log_priors[j];
            if prior == f64::NEG_INFINITY || h.log_weight == f64::NEG_INFINITY {
                continue;
            }
            let score = h.log_weight + predicted[i].loglik(y, q, dynamics.noise())? + prior;
            scored.push((score, i, j));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(hyps.capacity);
    let mut survivors = Vec::with_capacity(scored.len());
    for &(score, i, j) in &scored {
        let mut history = hyps.hypotheses[i].history.clone();
        history.push(patterns.patterns[j].clone());
        survivors.push(Hypothesis {
            history,
            log_weight: score,
            belief: predicted[i].correct(y, &patterns.values[j], dynamics.noise())?,
        });
    }
    normalize(&mut survivors)?;
    let set = HypothesisSet {
        hypotheses: survivors,
        capacity: hyps.capacity,
    };
    let out = set.best().ok_or(Error::AllWeightsDegenerate)?.belief.clone();
    Ok((set, out))
}

/// Per-slot soft assignment: the pattern-conditioned posteriors are weighted
/// by their predictive likelihood and prior and collapsed to one Gaussian.
pub fn pdaf_step(
    belief: &JointBelief,
    y: &DVector<f64>,
    dynamics: &Dynamics,
    patterns: &PatternSet,
    policy: MixtureCovariance,
) -> Result<JointBelief> {
    let isotropic = match policy {
        MixtureCovariance::Isotropic => true,
        MixtureCovariance::Exact => false,
        MixtureCovariance::Auto => {
            belief.is_iso() && matches!(dynamics.noise(), MeasNoise::Iso(_)) && belief.dim() > AUTO_EXACT_MAX_DIM
        }
    };
    if !isotropic {
        return pdaf_exact(&belief.predict(dynamics), y, dynamics, patterns);
    }
    pdaf_components(belief, y, dynamics, patterns).and_then(|(parts, _)| {
        let refs: Vec<(f64, &JointBelief)> = parts.iter().map(|(w, b)| (*w, b)).collect();
        mixture(&refs, policy)
    })
}

/// Exact collapse without forming each posterior covariance:
/// `sum_q w_q P_q = P - sum_q w_q (B_q P)^T S_q^{-1} (B_q P)`, plus the spread of the means.
fn pdaf_exact(
    predicted: &JointBelief,
    y: &DVector<f64>,
    dynamics: &Dynamics,
    patterns: &PatternSet,
) -> Result<JointBelief> {
    let m = predicted.antennas();
    let k = predicted.devices();
    let d = predicted.dim();
    let noise = dynamics.noise();
    let p = predicted.dense_cov();
    let r = noise.to_dense(m);
    // (log-weight, posterior mean, L^{-1} B P) per candidate; the last is empty for the silent pattern
    let mut parts: Vec<(f64, DVector<f64>, Option<DMatrix<f64>>)> = Vec::with_capacity(patterns.len());
    let mut used = Vec::with_capacity(patterns.len());
    for (j, q) in patterns.values.iter().enumerate() {
        let prior = patterns.log_priors[j];
        if prior == f64::NEG_INFINITY {
            continue;
        }
        used.push(j);
        let e = y - predicted.predicted_measurement(q);
        if q.iter().all(|&x| x == 0.0) {
            let ll = predicted.loglik(y, q, noise)?;
            parts.push((ll + prior, predicted.mean.clone(), None));
            continue;
        }
        let mut bp = DMatrix::zeros(m, d);
        for (i, &qi) in q.iter().enumerate() {
            if qi != 0.0 {
                bp.zip_apply(&p.rows(i * m, m), |a, b| *a += qi * b);
            }
        }
        let mut s = r.clone();
        for (i, &qi) in q.iter().enumerate() {
            if qi != 0.0 {
                s.zip_apply(&bp.columns(i * m, m), |a, b| *a += qi * b);
            }
        }
        symmetrize(&mut s);
        let chol = cholesky_jittered(&s, "innovation covariance")?;
        let ll = logpdf_with_cholesky(&e, &chol);
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(m, m))
            .ok_or_else(|| Error::NonPositiveDefinite("innovation covariance".into()))?;
        let z = &l_inv * &bp;
        let white = &l_inv * &e;
        let mean = &predicted.mean + z.tr_mul(&white);
        parts.push((ll + prior, mean, Some(z)));
    }
    if parts.len() == 1 {
        return predicted.correct(y, &patterns.values[used[0]], noise);
    }
    let lw: Vec<f64> = parts.iter().map(|(w, _, _)| *w).collect();
    let lse = logsumexp(&lw);
    if !lse.is_finite() {
        return Err(Error::AllWeightsDegenerate);
    }
    let weights: Vec<f64> = lw.iter().map(|w| (w - lse).exp()).collect();
    let mut mean = DVector::zeros(d);
    for (w, (_, mu, _)) in weights.iter().zip(&parts) {
        mean.axpy(*w, mu, 1.0);
    }
    let reduced_rows: usize = parts.iter().filter(|p| p.2.is_some()).count() * m;
    // columns hold sqrt(w) (L^{-1} B P)^T, then sqrt(w) (mean_q - mean)
    let mut reduce = DMatrix::zeros(d, reduced_rows);
    let mut spread = DMatrix::zeros(d, parts.len());
    let mut col = 0;
    for (c, (w, (_, mu, z))) in weights.iter().zip(&parts).enumerate() {
        let sw = w.sqrt();
        if let Some(z) = z {
            reduce.columns_mut(col, m).copy_from(&(z.transpose() * sw));
            col += m;
        }
        spread.set_column(c, &((mu - &mean) * sw));
    }
    let mut cov = p;
    cov.gemm(-1.0, &reduce, &reduce.transpose(), 1.0);
    cov.gemm(1.0, &spread, &spread.transpose(), 1.0);
    symmetrize(&mut cov);
    JointBelief::new(mean, JointCov::Dense(cov), k, m)
}

/// Normalized log-weights and conditional posteriors of one soft-assignment step,
/// plus the indices of the candidates they came from.
pub fn pdaf_components(
    belief: &JointBelief,
    y: &DVector<f64>,
    dynamics: &Dynamics,
    patterns: &PatternSet,
) -> Result<(Vec<(f64, JointBelief)>, Vec<usize>)> {
    let predicted = belief.predict(dynamics);
    let mut parts = Vec::with_capacity(patterns.len());
    let mut used = Vec::with_capacity(patterns.len());
    for (j, q) in patterns.values.iter().enumerate() {
        let prior = patterns.log_priors[j];
        if prior == f64::NEG_INFINITY {
            continue;
        }
        let (post, ll) = predicted.correct_with_loglik(y, q, dynamics.noise())?;
        parts.push((ll + prior, post));
        used.push(j);
    }
    let lw: Vec<f64> = parts.iter().map(|(w, _)| *w).collect();
    let lse = logsumexp(&lw);
    if !lse.is_finite() {
        return Err(Error::AllWeightsDegenerate);
    }
    for p in parts.iter_mut() {
        p.0 -= lse;
    }
    Ok((parts, used))
}
