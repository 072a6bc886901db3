//! Joint beliefs over the stacked `K*M` state of all devices.
//!
//! The state is stored device-major: entry `k*M + m` is antenna `m` of device
//! `k`. When every dynamics block and the measurement noise are scalar
//! multiples of the identity, a covariance of the form `Sigma (x) I_M` stays in
//! that form under prediction and under corrections with `B = q^T (x) I_M`, so
//! it is kept as the `K x K` matrix `Sigma`. Everything else falls back to a
//! dense `KM x KM` matrix.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::filter_core::{self, cholesky_jittered, logpdf_with_cholesky, symmetrize, Belief};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Above this joint dimension `MixtureCovariance::Auto` projects mixtures back onto `Sigma (x) I_M`.
pub const AUTO_EXACT_MAX_DIM: usize = 256;

/// Covariance of a [`JointBelief`].
#[derive(Debug, Clone, PartialEq)]
pub enum JointCov {
    /// `Sigma (x) I_M` with `Sigma` of size `K x K`.
    Iso(DMatrix<f64>),
    /// Full `KM x KM` matrix.
    Dense(DMatrix<f64>),
}

/// Measurement-noise covariance `R`, either `r * I_M` or a full `M x M` matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasNoise {
    Iso(f64),
    Dense(DMatrix<f64>),
}

impl MeasNoise {
    pub fn from_matrix(r: DMatrix<f64>) -> Self {
        match scalar_identity(&r) {
            Some(c) => MeasNoise::Iso(c),
            None => MeasNoise::Dense(r),
        }
    }

    pub fn to_dense(&self, m: usize) -> DMatrix<f64> {
        match self {
            MeasNoise::Iso(r) => DMatrix::identity(m, m) * *r,
            MeasNoise::Dense(r) => r.clone(),
        }
    }

    pub fn trace(&self, m: usize) -> f64 {
        match self {
            MeasNoise::Iso(r) => *r * m as f64,
            MeasNoise::Dense(r) => r.trace(),
        }
    }

    /// `self + extra`, where `extra` is an `M x M` covariance given as a single-device belief covariance.
    pub fn plus(&self, extra: &JointCov, m: usize) -> MeasNoise {
        match (self, extra) {
            (MeasNoise::Iso(r), JointCov::Iso(s)) => MeasNoise::Iso(r + s[(0, 0)]),
            (_, JointCov::Iso(s)) => MeasNoise::Dense(self.to_dense(m) + DMatrix::identity(m, m) * s[(0, 0)]),
            (_, JointCov::Dense(p)) => MeasNoise::Dense(self.to_dense(m) + p),
        }
    }
}

/// How a Gaussian mixture of joint beliefs is collapsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixtureCovariance {
    /// Full second moment (dense `KM x KM`).
    Exact,
    /// Second moment averaged over antennas: the closest `Sigma (x) I_M`
    /// matrix with the same per-device traces.
    Isotropic,
    /// `Exact` up to [`AUTO_EXACT_MAX_DIM`] or for non-isotropic models, `Isotropic` beyond.
    #[default]
    Auto,
}

/// Returns `c` when `m == c * I`.
pub fn scalar_identity(m: &DMatrix<f64>) -> Option<f64> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return None;
    }
    let c = m[(0, 0)];
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let expected = if i == j { c } else { 0.0 };
            if m[(i, j)] != expected {
                return None;
            }
        }
    }
    Some(c)
}

/// Block-diagonal linear dynamics `h' = A h + u`, `u ~ N(0, Q)`, and measurement noise `R`.
#[derive(Debug, Clone)]
pub struct Dynamics {
    devices: usize,
    antennas: usize,
    a_blocks: Vec<DMatrix<f64>>,
    q_blocks: Vec<DMatrix<f64>>,
    noise: MeasNoise,
    iso_state: Option<(Vec<f64>, Vec<f64>)>,
}

impl Dynamics {
    pub fn new(a_blocks: Vec<DMatrix<f64>>, q_blocks: Vec<DMatrix<f64>>, r: DMatrix<f64>) -> Result<Self> {
        let devices = a_blocks.len();
        if devices == 0 || q_blocks.len() != devices {
            return Err(Error::DimensionMismatch(format!(
                "{} A blocks and {} Q blocks",
                devices,
                q_blocks.len()
            )));
        }
        let antennas = r.nrows();
        if r.ncols() != antennas
            || a_blocks
                .iter()
                .chain(q_blocks.iter())
                .any(|b| b.nrows() != antennas || b.ncols() != antennas)
        {
            return Err(Error::DimensionMismatch(format!(
                "every A, Q block and R must be {antennas}x{antennas}"
            )));
        }
        let a_iso: Option<Vec<f64>> = a_blocks.iter().map(scalar_identity).collect();
        let q_iso: Option<Vec<f64>> = q_blocks.iter().map(scalar_identity).collect();
        let iso_state = a_iso.zip(q_iso);
        Ok(Self {
            devices,
            antennas,
            a_blocks,
            q_blocks,
            noise: MeasNoise::from_matrix(r),
            iso_state,
        })
    }

    /// `A_k = a_k I`, `Q_k = q_k I`, `R = r I`.
    pub fn isotropic(antennas: usize, a: Vec<f64>, q: Vec<f64>, r: f64) -> Result<Self> {
        if a.len() != q.len() || a.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} transition scalars and {} noise scalars",
                a.len(),
                q.len()
            )));
        }
        let eye = DMatrix::<f64>::identity(antennas, antennas);
        Ok(Self {
            devices: a.len(),
            antennas,
            a_blocks: a.iter().map(|&c| &eye * c).collect(),
            q_blocks: q.iter().map(|&c| &eye * c).collect(),
            noise: MeasNoise::Iso(r),
            iso_state: Some((a, q)),
        })
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn dim(&self) -> usize {
        self.devices * self.antennas
    }

    pub fn noise(&self) -> &MeasNoise {
        &self.noise
    }

    pub fn a_block(&self, k: usize) -> &DMatrix<f64> {
        &self.a_blocks[k]
    }

    pub fn q_block(&self, k: usize) -> &DMatrix<f64> {
        &self.q_blocks[k]
    }

    /// True when the state blocks and `R` are all scalar multiples of the identity.
    pub fn is_isotropic(&self) -> bool {
        self.iso_state.is_some() && matches!(self.noise, MeasNoise::Iso(_))
    }

    pub fn joint_a(&self) -> DMatrix<f64> {
        block_diag(&self.a_blocks)
    }

    pub fn joint_q(&self) -> DMatrix<f64> {
        block_diag(&self.q_blocks)
    }

    /// Dynamics of device `k` alone.
    pub fn device(&self, k: usize) -> Dynamics {
        Dynamics {
            devices: 1,
            antennas: self.antennas,
            a_blocks: vec![self.a_blocks[k].clone()],
            q_blocks: vec![self.q_blocks[k].clone()],
            noise: self.noise.clone(),
            iso_state: self
                .iso_state
                .as_ref()
                .map(|(a, q)| (vec![a[k]], vec![q[k]])),
        }
    }

    /// Resolves `Auto` for this model.
    pub fn resolve_mixture(&self, policy: MixtureCovariance) -> MixtureCovariance {
        match policy {
            MixtureCovariance::Auto if self.is_isotropic() && self.dim() > AUTO_EXACT_MAX_DIM => {
                MixtureCovariance::Isotropic
            }
            MixtureCovariance::Auto => MixtureCovariance::Exact,
            p => p,
        }
    }
}

fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let m = blocks.first().map_or(0, |b| b.nrows());
    let d = m * blocks.len();
    let mut out = DMatrix::zeros(d, d);
    for (k, b) in blocks.iter().enumerate() {
        out.view_mut((k * m, k * m), (m, m)).copy_from(b);
    }
    out
}

/// `Sigma (x) I_m`.
pub fn kron_identity(sigma: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let k = sigma.nrows();
    let mut out = DMatrix::zeros(k * m, k * m);
    for a in 0..k {
        for b in 0..k {
            let v = sigma[(a, b)];
            if v != 0.0 {
                for i in 0..m {
                    out[(a * m + i, b * m + i)] = v;
                }
            }
        }
    }
    out
}

/// `B(q) = q^T (x) I_m` as an explicit `m x Km` matrix.
pub fn build_b(q: &[f64], m: usize) -> DMatrix<f64> {
    let k = q.len();
    let mut b = DMatrix::zeros(m, k * m);
    for (j, &qj) in q.iter().enumerate() {
        if qj != 0.0 {
            for i in 0..m {
                b[(i, j * m + i)] = qj;
            }
        }
    }
    b
}

/// Gaussian belief over the stacked channels of `devices` devices with `antennas` antennas each.
#[derive(Debug, Clone, PartialEq)]
pub struct JointBelief {
    pub mean: DVector<f64>,
    pub cov: JointCov,
    devices: usize,
    antennas: usize,
}

impl JointBelief {
    pub fn new(mean: DVector<f64>, cov: JointCov, devices: usize, antennas: usize) -> Result<Self> {
        let d = devices * antennas;
        let ok = mean.len() == d
            && match &cov {
                JointCov::Iso(s) => s.nrows() == devices && s.ncols() == devices,
                JointCov::Dense(p) => p.nrows() == d && p.ncols() == d,
            };
        if !ok {
            return Err(Error::DimensionMismatch(format!(
                "joint belief for {devices} devices x {antennas} antennas"
            )));
        }
        Ok(Self {
            mean,
            cov,
            devices,
            antennas,
        })
    }

    /// Mean `mean`, covariance `scale * I`.
    pub fn isotropic(mean: DVector<f64>, devices: usize, antennas: usize, scale: f64) -> Result<Self> {
        Self::new(
            mean,
            JointCov::Iso(DMatrix::identity(devices, devices) * scale),
            devices,
            antennas,
        )
    }

    pub fn from_belief(b: Belief, devices: usize, antennas: usize) -> Result<Self> {
        Self::new(b.mean, JointCov::Dense(b.cov), devices, antennas)
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn dim(&self) -> usize {
        self.devices * self.antennas
    }

    pub fn is_iso(&self) -> bool {
        matches!(self.cov, JointCov::Iso(_))
    }

    pub fn dense_cov(&self) -> DMatrix<f64> {
        match &self.cov {
            JointCov::Iso(s) => kron_identity(s, self.antennas),
            JointCov::Dense(p) => p.clone(),
        }
    }

    pub fn to_belief(&self) -> Belief {
        Belief {
            mean: self.mean.clone(),
            cov: self.dense_cov(),
        }
    }

    pub fn to_dense(&self) -> JointBelief {
        JointBelief {
            mean: self.mean.clone(),
            cov: JointCov::Dense(self.dense_cov()),
            devices: self.devices,
            antennas: self.antennas,
        }
    }

    pub fn device_mean(&self, k: usize) -> DVectorView<'_, f64> {
        self.mean.rows(k * self.antennas, self.antennas)
    }

    /// Trace of the `(k, k)` covariance block.
    pub fn device_trace(&self, k: usize) -> f64 {
        let m = self.antennas;
        match &self.cov {
            JointCov::Iso(s) => m as f64 * s[(k, k)],
            JointCov::Dense(p) => (0..m).map(|i| p[(k * m + i, k * m + i)]).sum(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.devices).map(|k| self.device_trace(k)).sum()
    }

    /// Covariance block `(k, j)` as an `M x M` matrix.
    pub fn cov_block(&self, k: usize, j: usize) -> DMatrix<f64> {
        let m = self.antennas;
        match &self.cov {
            JointCov::Iso(s) => DMatrix::identity(m, m) * s[(k, j)],
            JointCov::Dense(p) => p.view((k * m, j * m), (m, m)).into_owned(),
        }
    }

    /// Marginal belief of device `k`.
    pub fn device(&self, k: usize) -> JointBelief {
        let m = self.antennas;
        let cov = match &self.cov {
            JointCov::Iso(s) => JointCov::Iso(DMatrix::from_element(1, 1, s[(k, k)])),
            JointCov::Dense(p) => JointCov::Dense(p.view((k * m, k * m), (m, m)).into_owned()),
        };
        JointBelief {
            mean: self.device_mean(k).into_owned(),
            cov,
            devices: 1,
            antennas: m,
        }
    }

    /// Block-diagonal joint belief from independent single-device beliefs.
    pub fn block_diagonal(parts: &[JointBelief]) -> Result<JointBelief> {
        let first = parts.first().ok_or(Error::EmptyMixture)?;
        let m = first.antennas;
        if parts.iter().any(|p| p.devices != 1 || p.antennas != m) {
            return Err(Error::DimensionMismatch(
                "block_diagonal expects single-device beliefs of equal size".into(),
            ));
        }
        let k = parts.len();
        let mut mean = DVector::zeros(k * m);
        for (j, p) in parts.iter().enumerate() {
            mean.rows_mut(j * m, m).copy_from(&p.mean);
        }
        let cov = if parts.iter().all(|p| p.is_iso()) {
            let diag: Vec<f64> = parts
                .iter()
                .map(|p| match &p.cov {
                    JointCov::Iso(s) => s[(0, 0)],
                    JointCov::Dense(_) => unreachable!(),
                })
                .collect();
            JointCov::Iso(DMatrix::from_diagonal(&DVector::from_vec(diag)))
        } else {
            let blocks: Vec<DMatrix<f64>> = parts.iter().map(|p| p.dense_cov()).collect();
            JointCov::Dense(block_diag(&blocks))
        };
        JointBelief::new(mean, cov, k, m)
    }

    /// Predicted measurement `B(q) mean = sum_k q_k mean_k`.
    pub fn predicted_measurement(&self, q: &[f64]) -> DVector<f64> {
        let m = self.antennas;
        let mut out = DVector::zeros(m);
        for (k, &qk) in q.iter().enumerate() {
            if qk != 0.0 {
                out.axpy(qk, &self.device_mean(k), 1.0);
            }
        }
        out
    }

    /// Stacked predicted means as an `M x K` matrix (column `k` is device `k`).
    pub fn mean_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.antennas, self.devices, self.mean.as_slice())
    }

    /// Time update `mean' = A mean`, `cov' = A cov A^T + Q`.
    pub fn predict(&self, dynamics: &Dynamics) -> JointBelief {
        debug_assert_eq!(dynamics.devices, self.devices);
        self.predict_with(dynamics, 0)
    }

    /// Time update of a single-device belief with block `k` of `dynamics`.
    pub fn predict_device(&self, dynamics: &Dynamics, k: usize) -> JointBelief {
        debug_assert_eq!(self.devices, 1);
        self.predict_with(dynamics, k)
    }

    fn predict_with(&self, dynamics: &Dynamics, offset: usize) -> JointBelief {
        debug_assert_eq!(dynamics.antennas, self.antennas);
        let m = self.antennas;
        let k = self.devices;
        let range = offset..offset + k;
        if let Some((a, q)) = &dynamics.iso_state {
            let a = &a[range.clone()];
            let q = &q[range];
            let mut mean = self.mean.clone();
            for j in 0..k {
                mean.rows_mut(j * m, m).scale_mut(a[j]);
            }
            let cov = match &self.cov {
                JointCov::Iso(s) => {
                    let mut next = DMatrix::from_fn(k, k, |r, c| a[r] * a[c] * s[(r, c)]);
                    for j in 0..k {
                        next[(j, j)] += q[j];
                    }
                    symmetrize(&mut next);
                    JointCov::Iso(next)
                }
                JointCov::Dense(p) => {
                    let mut next = DMatrix::from_fn(k * m, k * m, |r, c| a[r / m] * a[c / m] * p[(r, c)]);
                    for j in 0..k * m {
                        next[(j, j)] += q[j / m];
                    }
                    symmetrize(&mut next);
                    JointCov::Dense(next)
                }
            };
            return JointBelief {
                mean,
                cov,
                devices: k,
                antennas: m,
            };
        }
        let a_blocks = &dynamics.a_blocks[range.clone()];
        let q_blocks = &dynamics.q_blocks[range];
        let p = self.dense_cov();
        let mut mean = DVector::zeros(k * m);
        for j in 0..k {
            mean.rows_mut(j * m, m)
                .copy_from(&(&a_blocks[j] * self.device_mean(j)));
        }
        let mut next = DMatrix::zeros(k * m, k * m);
        for r in 0..k {
            for c in 0..k {
                let mut block = &a_blocks[r] * p.view((r * m, c * m), (m, m)) * a_blocks[c].transpose();
                if r == c {
                    block += &q_blocks[r];
                }
                next.view_mut((r * m, c * m), (m, m)).copy_from(&block);
            }
        }
        symmetrize(&mut next);
        JointBelief {
            mean,
            cov: JointCov::Dense(next),
            devices: k,
            antennas: m,
        }
    }

    /// `log N(y; B(q) mean, B(q) P B(q)^T + R)`.
    pub fn loglik(&self, y: &DVector<f64>, q: &[f64], noise: &MeasNoise) -> Result<f64> {
        self.check_measurement(y, q)?;
        let m = self.antennas;
        if let (JointCov::Iso(s), MeasNoise::Iso(r)) = (&self.cov, noise) {
            let qv = DVector::from_column_slice(q);
            let sv = qv.dot(&(s * &qv)) + r;
            let e = y - self.predicted_measurement(q);
            return iso_logpdf(&e, sv, m);
        }
        let (_, s) = self.dense_bp_and_s(q, noise);
        let chol = cholesky_jittered(&s, "innovation covariance")?;
        let e = y - self.predicted_measurement(q);
        Ok(logpdf_with_cholesky(&e, &chol))
    }

    /// Measurement update with `B(q)`. A pattern with no nonzero entry returns the belief unchanged.
    pub fn correct(&self, y: &DVector<f64>, q: &[f64], noise: &MeasNoise) -> Result<JointBelief> {
        if q.iter().all(|&x| x == 0.0) {
            self.check_measurement(y, q)?;
            return Ok(self.clone());
        }
        self.correct_with_loglik(y, q, noise).map(|(b, _)| b)
    }

    /// Measurement update together with the predictive log-likelihood of `y`.
    pub fn correct_with_loglik(
        &self,
        y: &DVector<f64>,
        q: &[f64],
        noise: &MeasNoise,
    ) -> Result<(JointBelief, f64)> {
        self.check_measurement(y, q)?;
        let m = self.antennas;
        let k = self.devices;
        if q.iter().all(|&x| x == 0.0) {
            let ll = match noise {
                MeasNoise::Iso(r) => iso_logpdf(y, *r, m)?,
                MeasNoise::Dense(r) => {
                    let chol = cholesky_jittered(r, "measurement noise")?;
                    logpdf_with_cholesky(y, &chol)
                }
            };
            return Ok((self.clone(), ll));
        }
        let e = y - self.predicted_measurement(q);
        if let (JointCov::Iso(s), MeasNoise::Iso(r)) = (&self.cov, noise) {
            let qv = DVector::from_column_slice(q);
            let sq = s * &qv;
            let sv = qv.dot(&sq) + r;
            let ll = iso_logpdf(&e, sv, m)?;
            let g = sq / sv;
            let mut mean = self.mean.clone();
            for j in 0..k {
                if g[j] != 0.0 {
                    mean.rows_mut(j * m, m).axpy(g[j], &e, 1.0);
                }
            }
            let l = DMatrix::identity(k, k) - &g * qv.transpose();
            let mut cov = &l * s * l.transpose();
            cov.ger(*r, &g, &g, 1.0);
            symmetrize(&mut cov);
            return Ok((
                JointBelief {
                    mean,
                    cov: JointCov::Iso(cov),
                    devices: k,
                    antennas: m,
                },
                ll,
            ));
        }

        let p = self.dense_cov();
        let (bp, s) = self.dense_bp_and_s(q, noise);
        let chol = cholesky_jittered(&s, "innovation covariance")?;
        let ll = logpdf_with_cholesky(&e, &chol);
        // gain^T = S^{-1} B P
        let gain_t = chol.solve(&bp);
        let mean = &self.mean + gain_t.tr_mul(&e);
        // Joseph form with X = (I - K B) P: X - (X B^T - K R) K^T
        let x = &p - gain_t.tr_mul(&bp);
        let mut inner = DMatrix::zeros(k * m, m);
        for (j, &qj) in q.iter().enumerate() {
            if qj != 0.0 {
                inner += x.columns(j * m, m) * qj;
            }
        }
        match noise {
            MeasNoise::Iso(r) => inner -= gain_t.transpose() * *r,
            MeasNoise::Dense(r) => inner -= gain_t.tr_mul(r),
        }
        let mut cov = x - inner * gain_t;
        symmetrize(&mut cov);
        Ok((
            JointBelief {
                mean,
                cov: JointCov::Dense(cov),
                devices: k,
                antennas: m,
            },
            ll,
        ))
    }

    fn check_measurement(&self, y: &DVector<f64>, q: &[f64]) -> Result<()> {
        if y.len() != self.antennas || q.len() != self.devices {
            return Err(Error::DimensionMismatch(format!(
                "measurement of length {} and pattern of length {} for {} devices x {} antennas",
                y.len(),
                q.len(),
                self.devices,
                self.antennas
            )));
        }
        Ok(())
    }

    /// `(B P, B P B^T + R)` for the dense path.
    fn dense_bp_and_s(&self, q: &[f64], noise: &MeasNoise) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = self.antennas;
        let p = self.dense_cov();
        let mut bp = DMatrix::zeros(m, p.ncols());
        for (j, &qj) in q.iter().enumerate() {
            if qj != 0.0 {
                bp += p.rows(j * m, m) * qj;
            }
        }
        let mut s = noise.to_dense(m);
        for (j, &qj) in q.iter().enumerate() {
            if qj != 0.0 {
                s += bp.columns(j * m, m) * qj;
            }
        }
        symmetrize(&mut s);
        (bp, s)
    }

    pub fn is_valid(&self) -> bool {
        match &self.cov {
            JointCov::Iso(s) => filter_core::covariance_is_valid(s),
            JointCov::Dense(p) => filter_core::covariance_is_valid(p),
        }
    }
}

fn iso_logpdf(e: &DVector<f64>, s: f64, m: usize) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::NonPositiveDefinite(format!(
            "innovation variance {s}"
        )));
    }
    Ok(-0.5 * (m as f64 * (LN_2PI + s.ln()) + e.norm_squared() / s))
}

/// Collapses a mixture of joint beliefs (normalized log-weights) to one Gaussian.
pub fn mixture(components: &[(f64, &JointBelief)], policy: MixtureCovariance) -> Result<JointBelief> {
    let (_, first) = components.first().ok_or(Error::EmptyMixture)?;
    if components.len() == 1 {
        return Ok((*first).clone());
    }
    let k = first.devices;
    let m = first.antennas;
    if components.iter().any(|(_, c)| c.devices != k || c.antennas != m) {
        return Err(Error::DimensionMismatch(
            "mixture components differ in shape".into(),
        ));
    }
    let weights: Vec<f64> = components.iter().map(|(lw, _)| lw.exp()).collect();
    let mut mean = DVector::zeros(k * m);
    for (w, (_, c)) in weights.iter().zip(components) {
        if *w > 0.0 {
            mean.axpy(*w, &c.mean, 1.0);
        }
    }
    let policy = match policy {
        MixtureCovariance::Auto => {
            if components.iter().all(|(_, c)| c.is_iso()) && k * m > AUTO_EXACT_MAX_DIM {
                MixtureCovariance::Isotropic
            } else {
                MixtureCovariance::Exact
            }
        }
        p => p,
    };
    let cov = match policy {
        MixtureCovariance::Isotropic => {
            let mut sigma = DMatrix::zeros(k, k);
            for (w, (_, c)) in weights.iter().zip(components) {
                if *w <= 0.0 {
                    continue;
                }
                match &c.cov {
                    JointCov::Iso(s) => sigma += s * *w,
                    JointCov::Dense(p) => {
                        let partial = DMatrix::from_fn(k, k, |a, b| {
                            (0..m).map(|i| p[(a * m + i, b * m + i)]).sum::<f64>() / m as f64
                        });
                        sigma += &partial * *w;
                    }
                }
                let diff = DMatrix::from_column_slice(m, k, (&c.mean - &mean).as_slice());
                sigma.gemm_tr(*w / m as f64, &diff, &diff, 1.0);
            }
            symmetrize(&mut sigma);
            JointCov::Iso(sigma)
        }
        _ => {
            let d = k * m;
            let mut p = DMatrix::zeros(d, d);
            let mut sigma = DMatrix::zeros(k, k);
            for (w, (_, c)) in weights.iter().zip(components) {
                if *w <= 0.0 {
                    continue;
                }
                match &c.cov {
                    JointCov::Iso(s) => sigma += s * *w,
                    JointCov::Dense(pc) => p += pc * *w,
                }
                let diff = &c.mean - &mean;
                p.ger(*w, &diff, &diff, 1.0);
            }
            for a in 0..k {
                for b in 0..k {
                    let v = sigma[(a, b)];
                    if v != 0.0 {
                        for i in 0..m {
                            p[(a * m + i, b * m + i)] += v;
                        }
                    }
                }
            }
            symmetrize(&mut p);
            JointCov::Dense(p)
        }
    };
    Ok(JointBelief {
        mean,
        cov,
        devices: k,
        antennas: m,
    })
}
