//! Covariance representations (background, observation, analysis, mass),
//! ensembles and their moments, Gaspari-Cohn localisation and hybrid blends.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StateVector;
use crate::rng;

/// Relative size of the first diagonal jitter, as a fraction of `trace/n`.
pub const JITTER_FLOOR: f64 = 1e-10;
/// Number of ×10 escalations after the first jitter attempt.
pub const JITTER_ESCALATIONS: usize = 3;

/// Distance between state indices used by the taper.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// `min(|i-j|, n-|i-j|)` on a ring of `n` points.
    #[default]
    CyclicIndex,
    /// Euclidean distance between explicit grid coordinates, one per state entry.
    Euclidean(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaperSpec {
    pub decorrelation_length: f64,
    #[serde(default)]
    pub metric: DistanceMetric,
}

impl TaperSpec {
    pub fn cyclic(decorrelation_length: f64) -> Result<Self> {
        let spec = Self { decorrelation_length, metric: DistanceMetric::CyclicIndex };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decorrelation_length > 0.0) || !self.decorrelation_length.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "decorrelation length {} must be > 0",
                self.decorrelation_length
            )));
        }
        Ok(())
    }

    pub fn distance(&self, i: usize, j: usize, n: usize) -> f64 {
        match &self.metric {
            DistanceMetric::CyclicIndex => {
                let d = i.abs_diff(j);
                d.min(n - d) as f64
            }
            DistanceMetric::Euclidean(coords) => coords[i]
                .iter()
                .zip(&coords[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        }
    }

    /// Taper matrix `rho_ij = gaspari_cohn(d_ij / L)`.
    pub fn matrix(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            gaspari_cohn(self.distance(i, j, n) / self.decorrelation_length)
        })
    }
}

/// Gaspari-Cohn fifth-order piecewise rational correlation function of
/// `z = d / L`; equals 1 at 0 and vanishes for `z >= 2`.
pub fn gaspari_cohn(z: f64) -> f64 {
    let z = z.abs();
    if z <= 1.0 {
        let z2 = z * z;
        let z3 = z2 * z;
        -0.25 * z3 * z2 + 0.5 * z2 * z2 + 0.625 * z3 - 5.0 / 3.0 * z2 + 1.0
    } else if z < 2.0 {
        let z2 = z * z;
        let z3 = z2 * z;
        z3 * z2 / 12.0 - 0.5 * z2 * z2 + 0.625 * z3 + 5.0 / 3.0 * z2 - 5.0 * z + 4.0
            - 2.0 / (3.0 * z)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceKind {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
    /// A dense covariance already multiplied element-wise by a taper.
    Localized { matrix: DMatrix<f64>, taper: TaperSpec },
}

impl CovarianceKind {
    fn name(&self) -> &'static str {
        match self {
            Self::Diagonal(_) => "diagonal",
            Self::Dense(_) => "dense",
            Self::Localized { .. } => "localized",
        }
    }
}

#[derive(Debug, Clone)]
struct Factor {
    lower: DMatrix<f64>,
    jitter: f64,
}

/// Symmetric positive (semi-)definite matrix. Immutable; the Cholesky factor
/// is computed lazily once and shared by all readers.
#[derive(Debug)]
pub struct CovarianceModel {
    kind: CovarianceKind,
    factor: OnceLock<Option<Factor>>,
}

impl Clone for CovarianceModel {
    fn clone(&self) -> Self {
        let factor = OnceLock::new();
        if let Some(f) = self.factor.get() {
            let _ = factor.set(f.clone());
        }
        Self { kind: self.kind.clone(), factor }
    }
}

impl PartialEq for CovarianceModel {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl CovarianceModel {
    fn from_kind(kind: CovarianceKind) -> Self {
        Self { kind, factor: OnceLock::new() }
    }

    pub fn diagonal(variances: Vec<f64>) -> Result<Self> {
        if variances.is_empty() {
            return Err(Error::InvalidArgument("covariance dimension must be positive".into()));
        }
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("diagonal variance {v} must be finite and > 0")));
        }
        Ok(Self::from_kind(CovarianceKind::Diagonal(variances)))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_kind(CovarianceKind::Diagonal(vec![1.0; n]))
    }

    /// Dense covariance. Entries must be finite and symmetric up to round-off;
    /// the stored matrix is made exactly symmetric.
    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        Ok(Self::from_kind(CovarianceKind::Dense(symmetrized(matrix)?)))
    }

    pub fn kind(&self) -> &CovarianceKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            CovarianceKind::Diagonal(v) => v.len(),
            CovarianceKind::Dense(m) | CovarianceKind::Localized { matrix: m, .. } => m.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.kind {
            CovarianceKind::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
            CovarianceKind::Dense(m) | CovarianceKind::Localized { matrix: m, .. } => m.clone(),
        }
    }

    fn dense_ref(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            CovarianceKind::Diagonal(_) => None,
            CovarianceKind::Dense(m) | CovarianceKind::Localized { matrix: m, .. } => Some(m),
        }
    }

    pub fn diagonal_entries(&self) -> Vec<f64> {
        match &self.kind {
            CovarianceKind::Diagonal(v) => v.clone(),
            CovarianceKind::Dense(m) | CovarianceKind::Localized { matrix: m, .. } => {
                m.diagonal().iter().copied().collect()
            }
        }
    }

    pub fn multiply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        Ok(match &self.kind {
            CovarianceKind::Diagonal(d) => d.iter().zip(v).map(|(a, b)| a * b).collect(),
            CovarianceKind::Dense(m) | CovarianceKind::Localized { matrix: m, .. } => {
                (m * DVector::from_column_slice(v)).iter().copied().collect()
            }
        })
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: n });
        }
        Ok(())
    }

    fn factor(&self) -> Result<&Factor> {
        let m = self.dense_ref().ok_or(Error::UnsupportedKind("diagonal"))?;
        self.factor
            .get_or_init(|| jittered_cholesky(m))
            .as_ref()
            .ok_or(Error::NotPositiveDefinite)
    }

    /// Diagonal jitter that was needed for the factorisation (0 when none).
    pub fn jitter(&self) -> Result<f64> {
        match &self.kind {
            CovarianceKind::Diagonal(_) => Ok(0.0),
            _ => self.factor().map(|f| f.jitter),
        }
    }

    /// Lower Cholesky factor `L` with `C (+ jitter I) = L L^T`.
    pub fn lower_factor(&self) -> Result<DMatrix<f64>> {
        match &self.kind {
            CovarianceKind::Diagonal(v) => {
                Ok(DMatrix::from_diagonal(&DVector::from_iterator(v.len(), v.iter().map(|x| x.sqrt()))))
            }
            _ => Ok(self.factor()?.lower.clone()),
        }
    }

    /// `C^{-1} v` via the cached Cholesky factorisation.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len())?;
        match &self.kind {
            CovarianceKind::Diagonal(d) => Ok(v.iter().zip(d).map(|(a, b)| a / b).collect()),
            _ => {
                let f = self.factor()?;
                let mut x = DVector::from_column_slice(v);
                f.lower.solve_lower_triangular_mut(&mut x);
                f.lower.tr_solve_lower_triangular_mut(&mut x);
                Ok(x.iter().copied().collect())
            }
        }
    }

    /// `C^{-1} B` for a matrix right-hand side.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_len(b.nrows())?;
        match &self.kind {
            CovarianceKind::Diagonal(d) => Ok(DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] / d[i])),
            _ => {
                let f = self.factor()?;
                let mut x = b.clone();
                f.lower.solve_lower_triangular_mut(&mut x);
                f.lower.tr_solve_lower_triangular_mut(&mut x);
                Ok(x)
            }
        }
    }

    /// `v^T C^{-1} v`.
    pub fn inverse_quadratic_form(&self, v: &[f64]) -> Result<f64> {
        let w = self.solve(v)?;
        Ok(v.iter().zip(&w).map(|(a, b)| a * b).sum())
    }

    /// Diagonal of `C^{-1}`: squared column norms of `L^{-1}`.
    pub fn inverse_diagonal(&self) -> Result<Vec<f64>> {
        match &self.kind {
            CovarianceKind::Diagonal(d) => Ok(d.iter().map(|v| 1.0 / v).collect()),
            _ => {
                let f = self.factor()?;
                let n = f.lower.nrows();
                let mut inv = DMatrix::identity(n, n);
                f.lower.solve_lower_triangular_mut(&mut inv);
                Ok(inv.column_iter().map(|c| c.norm_squared()).collect())
            }
        }
    }
}

fn symmetrized(matrix: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = matrix.nrows();
    if n == 0 || matrix.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "covariance must be square and non-empty, got {}x{}",
            n,
            matrix.ncols()
        )));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance matrix"));
    }
    let scale = matrix.amax().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::InvalidArgument(format!("covariance not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        matrix[(a, b)]
    }))
}

/// Cholesky with escalating diagonal jitter: none, then `1e-10 trace/n`,
/// then ×10 up to three more times.
fn jittered_cholesky(m: &DMatrix<f64>) -> Option<Factor> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let n = m.nrows();
    let max_diag = m.diagonal().max();
    // smallest acceptable squared pivot
    let pivot_floor = n as f64 * f64::EPSILON * max_diag;
    let accept = |c: nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        let l = c.l();
        l.diagonal().iter().all(|d| d.is_finite() && d * d > pivot_floor).then_some(l)
    };
    if let Some(lower) = m.clone().cholesky().and_then(accept) {
        return Some(Factor { lower, jitter: 0.0 });
    }
    let base = JITTER_FLOOR * m.trace() / n as f64;
    if !(base > 0.0) {
        return None;
    }
    let mut jitter = base;
    for _ in 0..=JITTER_ESCALATIONS {
        let mut shifted = m.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(lower) = shifted.cholesky().and_then(accept) {
            log::debug!("cholesky needed jitter {jitter:e}");
            return Some(Factor { lower, jitter });
        }
        jitter *= 10.0;
    }
    None
}

/// `C^{-1} v`.
pub fn solve_with(cov: &CovarianceModel, v: &[f64]) -> Result<Vec<f64>> {
    cov.solve(v)
}

/// A set of model states valid at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<StateVector>,
    time: f64,
}

impl Ensemble {
    pub fn new(members: Vec<StateVector>, time: f64) -> Result<Self> {
        if let Some(first) = members.first() {
            let n = first.len();
            if let Some(bad) = members.iter().find(|m| m.len() != n) {
                return Err(Error::DimensionMismatch { expected: n, found: bad.len() });
            }
        }
        Ok(Self { members, time })
    }

    pub fn members(&self) -> &[StateVector] {
        &self.members
    }

    pub fn into_members(self) -> Vec<StateVector> {
        self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn nvar(&self) -> usize {
        self.members.first().map_or(0, |m| m.len())
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    /// Members as the columns of an `nvar x nens` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.nvar(), self.len(), |i, e| self.members[e][i])
    }

    pub fn from_matrix(m: &DMatrix<f64>, time: f64) -> Result<Self> {
        let members = m
            .column_iter()
            .map(|c| StateVector::new(c.iter().copied().collect()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members, time)
    }
}

/// Arithmetic mean of the members.
pub fn ensemble_mean(ens: &Ensemble) -> Result<StateVector> {
    if ens.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    // accumulate departures from the first member so identical members give
    // that member back exactly
    let first = &ens.members()[0];
    let mut acc = vec![0.0; ens.nvar()];
    for m in &ens.members()[1..] {
        for ((a, b), f) in acc.iter_mut().zip(m.iter()).zip(first.iter()) {
            *a += b - f;
        }
    }
    let n = ens.len() as f64;
    StateVector::new(first.iter().zip(&acc).map(|(f, a)| f + a / n).collect())
}

/// Unbiased sample covariance `(N-1)^{-1} dX dX^T`.
pub fn ensemble_covariance(ens: &Ensemble) -> Result<CovarianceModel> {
    if ens.len() < 2 {
        return Err(Error::InsufficientMembers(ens.len()));
    }
    let mean = ensemble_mean(ens)?;
    let n = ens.nvar();
    let mut dev = ens.to_matrix();
    for mut col in dev.column_iter_mut() {
        for (v, m) in col.iter_mut().zip(mean.iter()) {
            *v -= m;
        }
    }
    let scale = 1.0 / (ens.len() - 1) as f64;
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s: f64 = dev.row(i).iter().zip(dev.row(j).iter()).map(|(a, b)| a * b).sum();
            cov[(i, j)] = s * scale;
            cov[(j, i)] = s * scale;
        }
    }
    Ok(CovarianceModel::from_kind(CovarianceKind::Dense(cov)))
}

/// Element-wise product with the Gaspari-Cohn taper matrix.
pub fn apply_taper(cov: &CovarianceModel, taper: &TaperSpec) -> Result<CovarianceModel> {
    taper.validate()?;
    let m = match cov.kind() {
        CovarianceKind::Diagonal(_) => return Err(Error::UnsupportedKind(cov.kind().name())),
        CovarianceKind::Dense(m) | CovarianceKind::Localized { matrix: m, .. } => m,
    };
    let n = m.nrows();
    if let DistanceMetric::Euclidean(coords) = &taper.metric {
        if coords.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: coords.len() });
        }
    }
    let rho = taper.matrix(n);
    Ok(CovarianceModel::from_kind(CovarianceKind::Localized {
        matrix: m.component_mul(&rho),
        taper: taper.clone(),
    }))
}

/// `gamma * modeled + (1 - gamma) * ensemble_cov`. The endpoints return the
/// corresponding input unchanged.
pub fn hybrid_update(
    modeled: &CovarianceModel,
    ensemble_cov: &CovarianceModel,
    gamma: f64,
) -> Result<CovarianceModel> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidWeight(gamma));
    }
    if modeled.dim() != ensemble_cov.dim() {
        return Err(Error::DimensionMismatch { expected: modeled.dim(), found: ensemble_cov.dim() });
    }
    if gamma == 1.0 {
        return Ok(modeled.clone());
    }
    if gamma == 0.0 {
        return Ok(ensemble_cov.clone());
    }
    let blend = modeled.to_dense() * gamma + ensemble_cov.to_dense() * (1.0 - gamma);
    Ok(CovarianceModel::from_kind(CovarianceKind::Dense(blend)))
}

/// Draws `n` members from `N(mean, cov)`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &StateVector,
    cov: &CovarianceModel,
    n: usize,
    time: f64,
    rng: &mut R,
) -> Result<Ensemble> {
    if mean.len() != cov.dim() {
        return Err(Error::DimensionMismatch { expected: cov.dim(), found: mean.len() });
    }
    let l = cov.lower_factor()?;
    let members = (0..n)
        .map(|_| {
            let z = DVector::from_vec(rng::standard_normal_vec(rng, mean.len()));
            let d = &l * z;
            StateVector::new(mean.iter().zip(d.iter()).map(|(m, v)| m + v).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members, time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sv(v: &[f64]) -> StateVector {
        StateVector::new(v.to_vec()).unwrap()
    }

    fn ens(members: &[&[f64]]) -> Ensemble {
        Ensemble::new(members.iter().map(|m| sv(m)).collect(), 0.0).unwrap()
    }

    /// Independent Gauss-Jordan inverse with partial pivoting.
    fn gauss_jordan_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
            m.swap(col, piv);
            let p = m[col][col];
            m[col].iter_mut().for_each(|v| *v /= p);
            for r in 0..n {
                if r != col {
                    let f = m[r][col];
                    let pivot_row = m[col].clone();
                    m[r].iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= f * pv);
                }
            }
        }
        m.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    fn spd3() -> Vec<Vec<f64>> {
        vec![vec![4.0, 1.2, -0.5], vec![1.2, 3.0, 0.7], vec![-0.5, 0.7, 2.5]]
    }

    fn to_dmatrix(a: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), a.len(), |i, j| a[i][j])
    }

    #[test]
    fn mean_examples() {
        assert_eq!(ensemble_mean(&ens(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap().as_slice(), &[2.0, 3.0]);
        let c = 0.37;
        assert_eq!(ensemble_mean(&ens(&[&[c, c, c][..]; 3])).unwrap().as_slice(), &[c, c, c]);
        assert!(matches!(ensemble_mean(&ens(&[])), Err(Error::EmptyEnsemble)));
    }

    #[test]
    fn mean_of_seeded_gaussian_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let e = sample_gaussian(&StateVector::zeros(3), &CovarianceModel::identity(3), 100, 0.0, &mut rng)
            .unwrap();
        let m = ensemble_mean(&e).unwrap();
        for v in m.iter() {
            assert!(v.abs() <= 3.0 / 10.0, "{v}");
        }
    }

    #[test]
    fn covariance_examples() {
        let c = ensemble_covariance(&ens(&[&[0.0, 0.0], &[2.0, 0.0]])).unwrap().to_dense();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let z = ensemble_covariance(&ens(&[&[1.0, 5.0][..]; 4])).unwrap().to_dense();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(matches!(ensemble_covariance(&ens(&[&[1.0]])), Err(Error::InsufficientMembers(1))));
    }

    #[test]
    fn covariance_matches_brute_force_loop() {
        let members: [&[f64]; 4] = [&[1.0, -0.5], &[0.3, 2.0], &[-1.1, 0.4], &[2.2, 1.7]];
        let mut mean = [0.0; 2];
        for m in &members {
            mean[0] += m[0] / 4.0;
            mean[1] += m[1] / 4.0;
        }
        let mut oracle = [[0.0; 2]; 2];
        for m in &members {
            for i in 0..2 {
                for j in 0..2 {
                    oracle[i][j] += (m[i] - mean[i]) * (m[j] - mean[j]) / 3.0;
                }
            }
        }
        let c = ensemble_covariance(&ens(&members)).unwrap().to_dense();
        for i in 0..2 {
            for j in 0..2 {
                assert!((c[(i, j)] - oracle[i][j]).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn two_member_covariance_is_twice_outer_product() {
        let mean = [0.5, -1.0, 2.0];
        let d = [0.25, 0.5, -1.0];
        let plus: Vec<f64> = mean.iter().zip(&d).map(|(m, v)| m + v).collect();
        let minus: Vec<f64> = mean.iter().zip(&d).map(|(m, v)| m - v).collect();
        let c = ensemble_covariance(&ens(&[&plus, &minus])).unwrap().to_dense();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(c[(i, j)], 2.0 * d[i] * d[j]);
            }
        }
    }

    #[test]
    fn gaspari_cohn_shape() {
        assert_eq!(gaspari_cohn(0.0), 1.0);
        assert!((gaspari_cohn(1.0) - 5.0 / 24.0).abs() < 1e-12);
        assert!(gaspari_cohn(2.0).abs() < 1e-12);
        assert_eq!(gaspari_cohn(2.5), 0.0);
        // continuity at the knot
        assert!((gaspari_cohn(1.0 - 1e-9) - gaspari_cohn(1.0 + 1e-9)).abs() < 1e-8);
    }

    #[test]
    fn taper_table_for_lorenz_block() {
        // Values of the Gaspari-Cohn polynomial at z = d/2 for cyclic
        // distances on a 40-ring, evaluated separately in exact rational arithmetic.
        let table = [1.0, 0.684_895_833_333_333_4, 0.208_333_333_333_333_34, 0.016_493_055_555_555_556, 0.0];
        let taper = TaperSpec::cyclic(2.0).unwrap();
        let rho = taper.matrix(40);
        for i in 0..5usize {
            for j in 0..5usize {
                let d = i.abs_diff(j);
                assert!((rho[(i, j)] - table[d]).abs() < 1e-14, "({i},{j})");
            }
        }
        // wrap-around distance
        assert!((rho[(0, 39)] - table[1]).abs() < 1e-14);
        let ones = CovarianceModel::dense(DMatrix::from_element(40, 40, 3.0)).unwrap();
        let t = apply_taper(&ones, &taper).unwrap().to_dense();
        assert_eq!(t[(7, 7)], 3.0);
        assert_eq!(t[(0, 20)], 0.0);
        assert!(matches!(apply_taper(&CovarianceModel::identity(3), &taper), Err(Error::UnsupportedKind(_))));
    }

    #[test]
    fn hybrid_examples() {
        let i2 = CovarianceModel::identity(2);
        let two = CovarianceModel::diagonal(vec![2.0, 2.0]).unwrap();
        assert_eq!(hybrid_update(&i2, &two, 1.0).unwrap(), i2);
        assert_eq!(hybrid_update(&i2, &two, 0.0).unwrap(), two);
        let h = hybrid_update(&i2, &two, 0.75).unwrap().to_dense();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[1.25, 0.0, 0.0, 1.25]));
        assert!(matches!(hybrid_update(&i2, &two, 1.5), Err(Error::InvalidWeight(_))));
        assert!(matches!(hybrid_update(&i2, &two, -0.1), Err(Error::InvalidWeight(_))));
    }

    #[test]
    fn solve_examples() {
        let d = CovarianceModel::diagonal(vec![4.0, 9.0]).unwrap();
        assert_eq!(solve_with(&d, &[4.0, 9.0]).unwrap(), vec![1.0, 1.0]);
        let v = [0.3, -7.0, 2.0];
        assert_eq!(solve_with(&CovarianceModel::identity(3), &v).unwrap(), v.to_vec());
        let dense_i = CovarianceModel::dense(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(solve_with(&dense_i, &v).unwrap(), v.to_vec());
    }

    #[test]
    fn solve_matches_gauss_jordan() {
        use rand::Rng;
        let a = spd3();
        let inv = gauss_jordan_inverse(&a);
        let c = CovarianceModel::dense(to_dmatrix(&a)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let x = c.solve(&v).unwrap();
            let oracle: Vec<f64> = inv.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
            let err: f64 = x.iter().zip(&oracle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err <= 1e-12 * scale);
        }
        let diag = c.inverse_diagonal().unwrap();
        for i in 0..3 {
            assert!((diag[i] - inv[i][i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        // rank-one covariance from two members
        let c = ensemble_covariance(&ens(&[&[1.0, 1.0], &[-1.0, -1.0]])).unwrap();
        assert!(c.solve(&[1.0, 1.0]).is_ok());
        assert!(c.jitter().unwrap() > 0.0);
        let zero = CovarianceModel::dense(DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(zero.solve(&[1.0, 0.0]), Err(Error::NotPositiveDefinite)));
        let indefinite = CovarianceModel::dense(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).unwrap();
        assert!(matches!(indefinite.solve(&[1.0, 0.0]), Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(CovarianceModel::diagonal(vec![1.0, 0.0]).is_err());
        assert!(CovarianceModel::diagonal(vec![]).is_err());
        assert!(CovarianceModel::dense(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err());
        assert!(CovarianceModel::dense(DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, f64::NAN, 1.0])).is_err());
    }

    fn spd_strategy(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
            let a = DMatrix::from_vec(n, n, v);
            &a * a.transpose() + DMatrix::identity(n, n) * (n as f64)
        })
    }

    proptest! {
        #[test]
        fn solve_then_multiply_roundtrips(m in spd_strategy(5), v in prop::collection::vec(-10.0f64..10.0, 5)) {
            let c = CovarianceModel::dense(m).unwrap();
            let x = c.solve(&v).unwrap();
            let back = c.multiply(&x).unwrap();
            let err: f64 = back.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-10 * norm.max(1e-300));
        }

        #[test]
        fn hybrid_is_linear_in_gamma(a in spd_strategy(3), b in spd_strategy(3), g1 in 0.0f64..0.5, g2 in 0.0f64..0.5) {
            let a = CovarianceModel::dense(a).unwrap();
            let b = CovarianceModel::dense(b).unwrap();
            let r1 = hybrid_update(&a, &b, g1).unwrap().to_dense();
            let r2 = hybrid_update(&a, &b, g2).unwrap().to_dense();
            let r12 = hybrid_update(&a, &b, g1 + g2).unwrap().to_dense();
            let r0 = hybrid_update(&a, &b, 0.0).unwrap().to_dense();
            let lhs = r1 + r2;
            let rhs = r12 + r0;
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0) * 10.0);
            }
        }

        #[test]
        fn taper_never_grows_entries(m in spd_strategy(8), len in 0.5f64..6.0) {
            let c = CovarianceModel::dense(m).unwrap();
            let t = apply_taper(&c, &TaperSpec::cyclic(len).unwrap()).unwrap();
            let (a, b) = (c.to_dense(), t.to_dense());
            for i in 0..8 {
                prop_assert_eq!(a[(i, i)], b[(i, i)]);
                for j in 0..8 {
                    prop_assert!(b[(i, j)].abs() <= a[(i, j)].abs());
                }
            }
        }
    }
}
