//! Gaussian belief algebra shared by every tracker.
//!
//! Everything here is a pure function of its inputs: log-densities through a
//! Cholesky factorization, Kalman prediction and (Joseph-form) correction,
//! log-domain weight normalization, Gaussian-mixture moment matching and the
//! discrete Lyapunov solve used by the stability checks.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Symmetry tolerance every returned covariance honours (max-abs entry of `P - P^T`).
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Gaussian state estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Belief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Zero-mean belief with covariance `scale * I`.
    pub fn isotropic(dim: usize, scale: f64) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim) * scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn trace(&self) -> f64 {
        self.cov.trace()
    }

    /// Checks the covariance invariants: symmetric within [`SYMMETRY_TOL`] and
    /// positive semi-definite up to an eigenvalue floor of `-1e-9 * trace / d`.
    pub fn is_valid(&self) -> bool {
        covariance_is_valid(&self.cov)
    }
}

/// Symmetry and PSD check used by [`Belief::is_valid`].
pub fn covariance_is_valid(cov: &DMatrix<f64>) -> bool {
    let d = cov.nrows();
    if d == 0 {
        return true;
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return false;
    }
    if asymmetry(cov) > SYMMETRY_TOL {
        return false;
    }
    let floor = -1e-9 * cov.trace().abs().max(f64::MIN_POSITIVE) / d as f64;
    let sym = 0.5 * (cov + cov.transpose());
    sym.symmetric_eigenvalues().iter().all(|&l| l >= floor)
}

/// Largest absolute entry of `m - m^T`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// In-place `(P + P^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// A set of unnormalized or normalized log-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LogWeightSet {
    pub log_weights: Vec<f64>,
}

impl LogWeightSet {
    pub fn new(log_weights: Vec<f64>) -> Self {
        Self { log_weights }
    }

    /// Linear-domain weights `exp(log_w)`.
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }
}

/// `log(sum(exp(xs)))`, returning `-inf` for an empty or all `-inf` input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Subtracts the log-sum-exp so the linear weights sum to one.
pub fn log_normalize(w: &LogWeightSet) -> Result<LogWeightSet> {
    if w.log_weights.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::InvalidParameter(
            "log-weights must be finite or -inf".into(),
        ));
    }
    let lse = logsumexp(&w.log_weights);
    if lse == f64::NEG_INFINITY {
        return Err(Error::AllWeightsDegenerate);
    }
    Ok(LogWeightSet {
        log_weights: w.log_weights.iter().map(|x| x - lse).collect(),
    })
}

/// Cholesky factorization with a single diagonal-jitter retry of `1e-9 * mean(diag)`.
pub fn cholesky_jittered(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let n = m.nrows();
    let jitter = if n == 0 { 0.0 } else { 1e-9 * m.trace() / n as f64 };
    if jitter > 0.0 && jitter.is_finite() {
        let mut retry = m.clone();
        for i in 0..n {
            retry[(i, i)] += jitter;
        }
        if let Some(c) = retry.cholesky() {
            return Ok(c);
        }
    }
    Err(Error::NonPositiveDefinite(what.to_string()))
}

fn log_det_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `log N(x; mean, cov)` evaluated through a triangular factorization of `cov`.
pub fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let d = x.len();
    if mean.len() != d || cov.nrows() != d || cov.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "logpdf: x has length {d}, mean {}, cov {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = cholesky_jittered(cov, "logpdf covariance")?;
    Ok(logpdf_with_cholesky(&(x - mean), &chol))
}

/// Log-density of a zero-mean Gaussian residual given the factor of its covariance.
pub(crate) fn logpdf_with_cholesky(residual: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let d = residual.len() as f64;
    let mut z = residual.clone();
    chol.l_dirty()
        .solve_lower_triangular_mut(&mut z);
    -0.5 * (d * LN_2PI + log_det_from_cholesky(chol) + z.norm_squared())
}

/// Prediction: `mean' = A mean`, `cov' = A cov A^T + Q`, symmetrized.
pub fn kf_predict(b: &Belief, a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Belief> {
    let d = b.dim();
    if a.nrows() != d || a.ncols() != d || q.nrows() != d || q.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "predict: state dimension {d}, A is {}x{}, Q is {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let mean = a * &b.mean;
    let mut cov = a * &b.cov * a.transpose() + q;
    symmetrize(&mut cov);
    Ok(Belief { mean, cov })
}

/// Correction against `y = B x + w`, `w ~ N(0, R)`.
///
/// The gain is `K = P B^T (B P B^T + R)^{-1}` and the covariance is updated in
/// Joseph form `(I - K B) P (I - K B)^T + K R K^T`.
pub fn kf_correct(
    b: &Belief,
    y: &DVector<f64>,
    bm: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<Belief> {
    correct_with_innovation(b, y, bm, r).map(|(post, _)| post)
}

/// Kalman correction that also returns the log predictive density `log N(y; B mean, B P B^T + R)`.
pub fn correct_with_innovation(
    b: &Belief,
    y: &DVector<f64>,
    bm: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(Belief, f64)> {
    let d = b.dim();
    let m = y.len();
    if bm.nrows() != m || bm.ncols() != d || r.nrows() != m || r.ncols() != m {
        return Err(Error::DimensionMismatch(format!(
            "correct: state {d}, measurement {m}, B is {}x{}, R is {}x{}",
            bm.nrows(),
            bm.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    let bp = bm * &b.cov; // m x d
    let mut s = &bp * bm.transpose() + r;
    symmetrize(&mut s);
    let chol = cholesky_jittered(&s, "innovation covariance")?;
    let innovation = y - bm * &b.mean;
    let loglik = logpdf_with_cholesky(&innovation, &chol);

    // K^T = S^{-1} B P
    let gain = chol.solve(&bp).transpose(); // d x m
    let mean = &b.mean + &gain * &innovation;

    // With X = (I - K B) P the Joseph form reads X - (X B^T - K R) K^T.
    let left = &b.cov - &gain * &bp;
    let inner = &left * bm.transpose() - &gain * r;
    let mut cov = left - inner * gain.transpose();
    symmetrize(&mut cov);
    Ok((Belief { mean, cov }, loglik))
}

/// Collapses a Gaussian mixture (log-weights assumed normalized) into its first two moments.
pub fn gmm_moment_match(components: &[(f64, Belief)]) -> Result<Belief> {
    let first = components.first().ok_or(Error::EmptyMixture)?;
    if components.len() == 1 {
        return Ok(first.1.clone());
    }
    let d = first.1.dim();
    if components.iter().any(|(_, c)| c.dim() != d) {
        return Err(Error::DimensionMismatch(
            "mixture components differ in dimension".into(),
        ));
    }
    let mut mean = DVector::zeros(d);
    for (lw, c) in components {
        let w = lw.exp();
        if w > 0.0 {
            mean.axpy(w, &c.mean, 1.0);
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for (lw, c) in components {
        let w = lw.exp();
        if w > 0.0 {
            cov += &c.cov * w;
            let diff = &c.mean - &mean;
            cov.ger(w, &diff, &diff, 1.0);
        }
    }
    symmetrize(&mut cov);
    Ok(Belief { mean, cov })
}

/// Spectral radius from the (complex) eigenvalues of `a`.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Max-abs entry of `P - A P A^T - Q`.
pub fn lyapunov_residual(a: &DMatrix<f64>, q: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    (p - a * p * a.transpose() - q).amax()
}

/// Solves `P = A P A^T + Q` for stable `A`.
///
/// Runs the fixed-point recursion `P <- A P A^T + Q` from `P0 = Q` in doubled
/// steps (`P_{2n} = P_n + A^n P_n A^{nT}`) and finishes with plain sweeps until
/// the residual reaches `1e-10` (scaled by `max(1, |P|)`).
pub fn lyapunov_solve(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if a.ncols() != d || q.nrows() != d || q.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "lyapunov: A is {}x{}, Q is {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    let rho = spectral_radius(a);
    if rho >= 1.0 - 1e-8 {
        return Err(Error::UnstableSystem(rho));
    }
    let mut p = q.clone();
    let mut power = a.clone();
    for _ in 0..128 {
        let step = &power * &p * power.transpose();
        let done = step.amax() <= 1e-17 * p.amax().max(1e-300);
        p += step;
        symmetrize(&mut p);
        if done {
            break;
        }
        power = &power * &power;
    }
    for _ in 0..1000 {
        if lyapunov_residual(a, q, &p) <= 1e-10 * p.amax().max(1.0) * 1e-2 {
            break;
        }
        p = a * &p * a.transpose() + q;
        symmetrize(&mut p);
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random_spd(d: usize, seed: &mut u64) -> DMatrix<f64> {
        let g = DMatrix::from_fn(d, d, |_, _| lcg(seed));
        &g * g.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn logpdf_standard_normal() {
        let x = DVector::from_vec(vec![0.0]);
        let m = DVector::from_vec(vec![0.0]);
        let c = DMatrix::from_vec(1, 1, vec![1.0]);
        assert_abs_diff_eq!(gaussian_logpdf(&x, &m, &c).unwrap(), -0.918_938_533_204_672_7, epsilon = 1e-14);
        let x = DVector::from_vec(vec![1.0]);
        assert_abs_diff_eq!(gaussian_logpdf(&x, &m, &c).unwrap(), -1.418_938_533_204_672_7, epsilon = 1e-14);
    }

    #[test]
    fn logpdf_two_dimensional_matches_hand_formula() {
        // cov = [[2, .5], [.5, 1]]: det = 1.75, inverse = [[1, -.5], [-.5, 2]] / 1.75
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let m = DVector::zeros(2);
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let quad = (1.0 * 1.0 - 2.0 * 0.5 * 1.0 * 2.0 + 2.0 * 2.0 * 2.0) / 1.75;
        let expected = -0.5 * (2.0 * (2.0 * std::f64::consts::PI).ln() + 1.75_f64.ln() + quad);
        assert_abs_diff_eq!(gaussian_logpdf(&x, &m, &c).unwrap(), expected, epsilon = 1e-13);
    }

    #[test]
    fn logpdf_rejects_indefinite() {
        let x = DVector::zeros(2);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            gaussian_logpdf(&x, &x, &c),
            Err(Error::NonPositiveDefinite(_))
        ));
    }

    #[test]
    fn logpdf_jitter_rescues_singular_psd() {
        let x = DVector::from_vec(vec![0.0, 0.0]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(gaussian_logpdf(&x, &x, &c).unwrap().is_finite());
    }

    #[test]
    fn predict_keeps_stationary_point() {
        let rho: f64 = 0.95;
        let b = Belief::isotropic(3, 1.0);
        let a = DMatrix::identity(3, 3) * rho;
        let q = DMatrix::identity(3, 3) * (1.0 - rho * rho);
        let p = kf_predict(&b, &a, &q).unwrap();
        assert_abs_diff_eq!(p.cov, DMatrix::identity(3, 3), epsilon = 1e-15);
        assert_eq!(p.mean, DVector::zeros(3));
    }

    #[test]
    fn predict_scalar() {
        let b = Belief::new(DVector::from_vec(vec![1.0]), DMatrix::zeros(1, 1)).unwrap();
        let p = kf_predict(
            &b,
            &DMatrix::from_vec(1, 1, vec![0.5]),
            &DMatrix::from_vec(1, 1, vec![0.75]),
        )
        .unwrap();
        assert_eq!(p.mean[0], 0.5);
        assert_eq!(p.cov[(0, 0)], 0.75);
    }

    #[test]
    fn predict_matches_triple_product() {
        let mut s = 11;
        let a = DMatrix::from_fn(4, 4, |_, _| lcg(&mut s));
        let q = random_spd(4, &mut s);
        let b = Belief::new(DVector::from_fn(4, |_, _| lcg(&mut s)), random_spd(4, &mut s)).unwrap();
        let p = kf_predict(&b, &a, &q).unwrap();
        for i in 0..4 {
            let mut mi = 0.0;
            for j in 0..4 {
                mi += a[(i, j)] * b.mean[j];
                let mut pij = q[(i, j)];
                for k in 0..4 {
                    for l in 0..4 {
                        pij += a[(i, k)] * b.cov[(k, l)] * a[(j, l)];
                    }
                }
                assert_abs_diff_eq!(p.cov[(i, j)], pij, epsilon = 1e-12);
            }
            assert_abs_diff_eq!(p.mean[i], mi, epsilon = 1e-12);
        }
        assert!(p.is_valid());
    }

    #[test]
    fn correct_equal_variance_fusion() {
        let b = Belief::isotropic(1, 1.0);
        let one = DMatrix::from_vec(1, 1, vec![1.0]);
        let p = kf_correct(&b, &DVector::from_vec(vec![1.0]), &one, &one).unwrap();
        assert_abs_diff_eq!(p.mean[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.cov[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn correct_with_perfect_prior_is_identity() {
        let b = Belief::new(DVector::from_vec(vec![2.0, -1.0]), DMatrix::zeros(2, 2)).unwrap();
        let bm = DMatrix::identity(2, 2);
        let r = DMatrix::identity(2, 2);
        let p = kf_correct(&b, &DVector::from_vec(vec![7.0, 7.0]), &bm, &r).unwrap();
        assert_eq!(p.mean, b.mean);
        assert_eq!(p.cov, DMatrix::zeros(2, 2));
    }

    #[test]
    fn correct_two_device_blocks() {
        // K = 2, M = 1, B = [1 | 0], block-diagonal prior diag(2, 3), R = 1:
        // gain = [2/3, 0], posterior diag(2/3, 3).
        let b = Belief::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]),
        )
        .unwrap();
        let bm = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let r = DMatrix::from_vec(1, 1, vec![1.0]);
        let p = kf_correct(&b, &DVector::from_vec(vec![3.0]), &bm, &r).unwrap();
        assert_abs_diff_eq!(p.mean[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.mean[1], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.cov[(0, 0)], 2.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.cov[(1, 1)], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.cov[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn joseph_matches_short_form() {
        let mut s = 5;
        for _ in 0..20 {
            let b = Belief::new(DVector::from_fn(5, |_, _| lcg(&mut s)), random_spd(5, &mut s)).unwrap();
            let bm = DMatrix::from_fn(3, 5, |_, _| lcg(&mut s));
            let r = random_spd(3, &mut s);
            let y = DVector::from_fn(3, |_, _| lcg(&mut s));
            let post = kf_correct(&b, &y, &bm, &r).unwrap();
            let sm = &bm * &b.cov * bm.transpose() + &r;
            let k = &b.cov * bm.transpose() * sm.try_inverse().unwrap();
            let short = (DMatrix::identity(5, 5) - &k * &bm) * &b.cov;
            assert!((&post.cov - &short).amax() < 1e-8);
            assert!(post.trace() <= b.trace() + 1e-12);
            assert!(post.is_valid());
        }
    }

    #[test]
    fn correct_dimension_mismatch() {
        let b = Belief::isotropic(2, 1.0);
        let bm = DMatrix::identity(3, 3);
        let r = DMatrix::identity(3, 3);
        assert!(matches!(
            kf_correct(&b, &DVector::zeros(3), &bm, &r),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn log_normalize_cases() {
        let w = log_normalize(&LogWeightSet::new(vec![0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(w.log_weights[0], -std::f64::consts::LN_2, epsilon = 1e-15);
        let w = log_normalize(&LogWeightSet::new(vec![-1000.0, 0.0])).unwrap();
        assert_abs_diff_eq!(w.log_weights[0], -1000.0, epsilon = 1e-12);
        assert!(w.log_weights[1].abs() < 1e-300_f64.max(1e-16));
        let mut s = 3;
        let raw: Vec<f64> = (0..5).map(|_| 50.0 * lcg(&mut s)).collect();
        let w = log_normalize(&LogWeightSet::new(raw)).unwrap();
        assert_abs_diff_eq!(w.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(matches!(
            log_normalize(&LogWeightSet::new(vec![f64::NEG_INFINITY; 3])),
            Err(Error::AllWeightsDegenerate)
        ));
    }

    #[test]
    fn moment_match_cases() {
        let c = Belief::new(DVector::from_vec(vec![0.3]), DMatrix::from_vec(1, 1, vec![2.0])).unwrap();
        assert_eq!(gmm_moment_match(&[(0.0, c.clone())]).unwrap(), c);
        let half = 0.5_f64.ln();
        let plus = Belief::new(DVector::from_vec(vec![1.0]), DMatrix::zeros(1, 1)).unwrap();
        let minus = Belief::new(DVector::from_vec(vec![-1.0]), DMatrix::zeros(1, 1)).unwrap();
        let mm = gmm_moment_match(&[(half, plus), (half, minus)]).unwrap();
        assert_abs_diff_eq!(mm.mean[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(mm.cov[(0, 0)], 1.0, epsilon = 1e-15);
        let third = (1.0_f64 / 3.0).ln();
        let same = gmm_moment_match(&[(third, c.clone()), (third, c.clone()), (third, c.clone())]).unwrap();
        assert_abs_diff_eq!(same.mean[0], c.mean[0], epsilon = 1e-15);
        assert_abs_diff_eq!(same.cov[(0, 0)], c.cov[(0, 0)], epsilon = 1e-15);
        assert!(matches!(gmm_moment_match(&[]), Err(Error::EmptyMixture)));
    }

    #[test]
    fn lyapunov_cases() {
        let rho: f64 = 0.95;
        let a = DMatrix::identity(3, 3) * rho;
        let q = DMatrix::identity(3, 3) * (1.0 - rho * rho);
        let p = lyapunov_solve(&a, &q).unwrap();
        assert_abs_diff_eq!(p, DMatrix::identity(3, 3), epsilon = 1e-12);
        let z = DMatrix::zeros(2, 2);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(lyapunov_solve(&z, &q).unwrap(), q);
        let unstable = DMatrix::identity(2, 2) * 1.05;
        assert!(matches!(lyapunov_solve(&unstable, &q), Err(Error::UnstableSystem(_))));
    }

    #[test]
    fn lyapunov_fixed_point_survives_predict() {
        let mut s = 17;
        let g = DMatrix::from_fn(3, 3, |_, _| lcg(&mut s));
        let a = &g * (0.8 / spectral_radius(&g));
        let q = random_spd(3, &mut s);
        let p = lyapunov_solve(&a, &q).unwrap();
        assert!(lyapunov_residual(&a, &q, &p) <= 1e-10);
        let b = Belief::new(DVector::zeros(3), p.clone()).unwrap();
        let next = kf_predict(&b, &a, &q).unwrap();
        assert!((&next.cov - &p).amax() <= 1e-10);
    }
}
