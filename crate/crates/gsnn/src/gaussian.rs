//! Gaussian distributions and PSD matrix algebra.
//!
//! The covariance side of everything in this crate lives on the cone of
//! positive semidefinite matrices; [`PsdMatrix`] enforces membership at
//! construction (symmetry check, eigenvalue clamp) so downstream square roots
//! and factorizations stay well-posed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Relative tolerance for the symmetry check at construction.
pub const SYM_TOL: f64 = 1e-10;
/// Relative tolerance below which a negative eigenvalue is repaired rather
/// than rejected.
pub const PSD_CLAMP_TOL: f64 = 1e-9;
/// Negative spectrum smaller than this (relative) is plain float noise; the
/// matrix is accepted unchanged so that projection is idempotent.
const PSD_NOISE_TOL: f64 = 1e-14;

/// Symmetric positive semidefinite matrix.
///
/// Construction symmetrizes the input and clamps negative eigenvalues within
/// `PSD_CLAMP_TOL` (relative to `max(λ_max, 1)`) to zero; more negative
/// spectra are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdMatrix {
    mat: DMatrix<f64>,
}

impl PsdMatrix {
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::Shape(format!(
                "PSD matrix must be square, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let scale = mat.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
        let mut asym = 0.0f64;
        for i in 0..mat.nrows() {
            for j in (i + 1)..mat.ncols() {
                asym = asym.max((mat[(i, j)] - mat[(j, i)]).abs());
            }
        }
        if asym > SYM_TOL * scale {
            return Err(Error::Shape(format!(
                "matrix is not symmetric: max asymmetry {asym:.3e} exceeds tolerance"
            )));
        }
        let mut sym = mat;
        if asym > 0.0 {
            let t = sym.transpose();
            sym = (sym + t) * 0.5;
        }
        let eig = sym.clone().symmetric_eigen();
        let lam_max = eig.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l));
        let lam_min = eig.eigenvalues.min();
        let floor = lam_max.max(1.0);
        if lam_min < -PSD_CLAMP_TOL * floor {
            return Err(Error::Parameter(format!(
                "matrix is not PSD: min eigenvalue {lam_min:.3e}"
            )));
        }
        if lam_min < -PSD_NOISE_TOL * floor {
            let clamped = eig.eigenvalues.map(|l| l.max(0.0));
            let rebuilt =
                &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
            let t = rebuilt.transpose();
            sym = (rebuilt + t) * 0.5;
        }
        Ok(Self { mat: sym })
    }

    /// Zero matrix (the apex of the cone).
    pub fn zeros(dim: usize) -> Self {
        Self {
            mat: DMatrix::zeros(dim, dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mat: DMatrix::identity(dim, dim),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        if diag.iter().any(|&d| d < 0.0) {
            return Err(Error::Parameter(
                "diagonal PSD matrix needs nonnegative entries".into(),
            ));
        }
        Ok(Self {
            mat: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.mat.clone().symmetric_eigen().eigenvalues.min()
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace()
    }

    /// Congruence `F Σ Fᵀ` — the covariance-side action of a linear map.
    pub fn congruence(&self, f: &DMatrix<f64>) -> Result<PsdMatrix> {
        if f.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "congruence: map has {} columns, matrix dim is {}",
                f.ncols(),
                self.dim()
            )));
        }
        PsdMatrix::new(f * &self.mat * f.transpose())
    }

    pub fn add(&self, other: &PsdMatrix) -> Result<PsdMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::Shape("PSD addition: dimension mismatch".into()));
        }
        PsdMatrix::new(&self.mat + &other.mat)
    }
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues are
/// clamped to zero.
pub fn psd_sqrt(s: &PsdMatrix) -> PsdMatrix {
    let eig = s.mat.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    let rt = r.transpose();
    PsdMatrix {
        mat: (r + rt) * 0.5,
    }
}

/// Gaussian distribution `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: PsdMatrix,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: PsdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::Shape(format!(
                "mean length {} does not match covariance dim {}",
                mean.len(),
                cov.dim()
            )));
        }
        Ok(Self { mean, cov })
    }

    /// One-dimensional convenience constructor.
    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mean),
            PsdMatrix::from_diagonal(&[var])?,
        )
    }

    /// Point mass: zero covariance.
    pub fn dirac(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            cov: PsdMatrix::zeros(d),
        }
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: PsdMatrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &PsdMatrix {
        &self.cov
    }
}

/// Image of a Gaussian under a linear map: `N(Aμ, AΣAᵀ)`.
pub fn pushforward(a: &DMatrix<f64>, g: &Gaussian) -> Result<Gaussian> {
    if a.nrows() != a.ncols() || a.ncols() != g.dim() {
        return Err(Error::Shape(format!(
            "pushforward: map is {}x{}, Gaussian dim is {}",
            a.nrows(),
            a.ncols(),
            g.dim()
        )));
    }
    Gaussian::new(a * &g.mean, g.cov.congruence(a)?)
}

/// Convolution of independent Gaussians: means and covariances add.
pub fn convolve(gs: &[Gaussian]) -> Result<Gaussian> {
    let first = gs
        .first()
        .ok_or_else(|| Error::Parameter("convolve needs a nonempty list".into()))?;
    let d = first.dim();
    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::zeros(d, d);
    for g in gs {
        if g.dim() != d {
            return Err(Error::Shape("convolve: dimension mismatch".into()));
        }
        mean += &g.mean;
        cov += g.cov.matrix();
    }
    Gaussian::new(mean, PsdMatrix::new(cov)?)
}

/// Minimum eigenvalue the second argument's covariance must exceed for the
/// KL divergence to be evaluated.
pub const KL_MIN_EIG: f64 = 1e-12;

/// Kullback–Leibler divergence `D(p ‖ q)` in nats, closed form for Gaussians.
///
/// Returns `+inf` when `p` is degenerate (zero eigenvalue in its covariance);
/// a near-singular `q` is an error because the quadratic form blows up.
pub fn kl_divergence(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Shape("kl_divergence: dimension mismatch".into()));
    }
    let d = p.dim() as f64;
    let eig_q = q.cov.matrix().clone().symmetric_eigen();
    if eig_q.eigenvalues.min() <= KL_MIN_EIG {
        return Err(Error::Singularity(format!(
            "kl_divergence: q covariance min eigenvalue {:.3e} <= {KL_MIN_EIG:.0e}",
            eig_q.eigenvalues.min()
        )));
    }
    let q_inv = &eig_q.eigenvectors
        * DMatrix::from_diagonal(&eig_q.eigenvalues.map(|l| 1.0 / l))
        * eig_q.eigenvectors.transpose();
    let log_det_q: f64 = eig_q.eigenvalues.iter().map(|l| l.ln()).sum();
    let eig_p = p.cov.matrix().clone().symmetric_eigen();
    let log_det_p: f64 = eig_p
        .eigenvalues
        .iter()
        .map(|&l| if l <= 0.0 { f64::NEG_INFINITY } else { l.ln() })
        .sum();
    if log_det_p == f64::NEG_INFINITY {
        return Ok(f64::INFINITY);
    }
    let diff = q.mean() - p.mean();
    let trace = (&q_inv * p.cov.matrix()).trace();
    let quad = (diff.transpose() * &q_inv * &diff)[(0, 0)];
    Ok(0.5 * (trace + quad - d + log_det_q - log_det_p))
}

/// 2-Wasserstein distance between Gaussians: Euclidean mean gap plus the
/// Bures term between covariances.
pub fn bures_w2(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Shape("bures_w2: dimension mismatch".into()));
    }
    let root_p = psd_sqrt(&p.cov);
    let middle = PsdMatrix::new(root_p.matrix() * q.cov.matrix() * root_p.matrix())?;
    let cross = psd_sqrt(&middle).trace();
    let mean_gap = (p.mean() - q.mean()).norm_squared();
    let w2_sq = mean_gap + p.cov.trace() + q.cov.trace() - 2.0 * cross;
    Ok(w2_sq.max(0.0).sqrt())
}

/// Rows of i.i.d. draws attributed to one node.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// T x d, row per draw.
    data: DMatrix<f64>,
}

impl SampleSet {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Parameter("sample set needs at least one row".into()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("sample set contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        if t == 0 {
            return Err(Error::Parameter("sample set needs at least one row".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("sample rows have inconsistent length".into()));
        }
        let mut m = DMatrix::zeros(t, d);
        for (i, r) in rows.iter().enumerate() {
            for (j, &x) in r.iter().enumerate() {
                m[(i, j)] = x;
            }
        }
        Self::new(m)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one row
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Row-major flat copy, `len * dim` values.
    pub fn flat(&self) -> Vec<f64> {
        let (t, d) = (self.len(), self.dim());
        let mut out = Vec::with_capacity(t * d);
        for i in 0..t {
            for j in 0..d {
                out.push(self.data[(i, j)]);
            }
        }
        out
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }
}

/// Draws `t` reparameterized samples `μ + R z` with `R = psd_sqrt(Σ)`.
pub fn sample<R: Rng>(g: &Gaussian, t: usize, rng: &mut R) -> Result<SampleSet> {
    if t == 0 {
        return Err(Error::Parameter("sample count must be at least 1".into()));
    }
    let d = g.dim();
    let root = psd_sqrt(g.cov());
    let mut data = DMatrix::zeros(t, d);
    for i in 0..t {
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = g.mean() + root.matrix() * z;
        for j in 0..d {
            data[(i, j)] = x[j];
        }
    }
    SampleSet::new(data)
}

/// Maximum-likelihood Gaussian fit: sample mean and 1/T covariance.
pub fn mle_fit(samples: &SampleSet) -> Result<Gaussian> {
    let t = samples.len();
    if t < 2 {
        return Err(Error::Parameter(format!(
            "mle_fit needs at least 2 samples, got {t}"
        )));
    }
    let d = samples.dim();
    let data = samples.matrix();
    let mut mean = DVector::zeros(d);
    for i in 0..t {
        mean += data.row(i).transpose();
    }
    mean /= t as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..t {
        let c = data.row(i).transpose() - &mean;
        cov += &c * c.transpose();
    }
    cov /= t as f64;
    Gaussian::new(mean, PsdMatrix::new(cov)?)
}

/// A 0-cochain of Gaussians: one per node, common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    nodes: Vec<Gaussian>,
}

impl GaussianField {
    pub fn new(nodes: Vec<Gaussian>) -> Result<Self> {
        let first = nodes
            .first()
            .ok_or_else(|| Error::Parameter("field needs at least one node".into()))?;
        let d = first.dim();
        if nodes.iter().any(|g| g.dim() != d) {
            return Err(Error::Shape("field has mixed dimensions".into()));
        }
        Ok(Self { nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].dim()
    }

    pub fn node(&self, v: usize) -> &Gaussian {
        &self.nodes[v]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Gaussian> {
        self.nodes.iter()
    }

    /// Means stacked into one length `n * d` vector.
    pub fn stacked_means(&self) -> DVector<f64> {
        let d = self.dim();
        let mut out = DVector::zeros(self.len() * d);
        for (v, g) in self.nodes.iter().enumerate() {
            out.rows_mut(v * d, d).copy_from(g.mean());
        }
        out
    }
}

/// Random Gaussian with positive-definite covariance, for tests and self checks.
pub fn random_gaussian<R: Rng>(dim: usize, rng: &mut R) -> Gaussian {
    let mean = DVector::from_iterator(dim, (0..dim).map(|_| rng.gen_range(-2.0..2.0)));
    let b = DMatrix::from_iterator(
        dim,
        dim,
        (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0f64)),
    );
    let cov = PsdMatrix::new(b.transpose() * &b + DMatrix::identity(dim, dim) * 0.05)
        .expect("B^T B + eI is PSD");
    Gaussian::new(mean, cov).expect("dims match")
}

// --- JSON encoding: {"mean": [..], "cov": [[..], ..]} row-major -------------

#[derive(Serialize, Deserialize)]
struct GaussianJson {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl Serialize for Gaussian {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let d = self.dim();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| self.cov.matrix()[(i, j)]).collect())
            .collect();
        GaussianJson {
            mean: self.mean.iter().copied().collect(),
            cov,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Gaussian {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        let raw = GaussianJson::deserialize(de)?;
        let d = raw.mean.len();
        if raw.cov.len() != d || raw.cov.iter().any(|r| r.len() != d) {
            return Err(D::Error::custom("covariance shape does not match mean"));
        }
        let mut cov = DMatrix::zeros(d, d);
        for (i, row) in raw.cov.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                cov[(i, j)] = x;
            }
        }
        let cov = PsdMatrix::new(cov).map_err(D::Error::custom)?;
        Gaussian::new(DVector::from_vec(raw.mean), cov).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn mat(rows: usize, cols: usize, vals: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, vals)
    }

    #[test]
    fn identity_pushforward_fixes_gaussian() {
        let g = random_gaussian(3, &mut seeded_rng(1));
        let out = pushforward(&DMatrix::identity(3, 3), &g).unwrap();
        assert!((out.mean() - g.mean()).norm() < 1e-14);
        assert!((out.cov().matrix() - g.cov().matrix()).norm() < 1e-14);
    }

    #[test]
    fn diagonal_pushforward_scales_parameters() {
        let g = Gaussian::new(
            DVector::from_vec(vec![1.0, 1.0]),
            PsdMatrix::identity(2),
        )
        .unwrap();
        let a = mat(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let out = pushforward(&a, &g).unwrap();
        assert_eq!(out.mean().as_slice(), &[2.0, 1.0]);
        assert_eq!(out.cov().matrix(), &mat(2, 2, &[4.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn zero_pushforward_collapses_to_point_mass() {
        let g = random_gaussian(2, &mut seeded_rng(2));
        let out = pushforward(&DMatrix::zeros(2, 2), &g).unwrap();
        assert_eq!(out.mean().as_slice(), &[0.0, 0.0]);
        assert_eq!(out.cov().matrix(), &DMatrix::zeros(2, 2));
    }

    #[test]
    fn pushforward_rejects_dimension_mismatch() {
        let g = random_gaussian(2, &mut seeded_rng(3));
        assert!(matches!(
            pushforward(&DMatrix::identity(3, 3), &g),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn convolve_adds_means_and_variances() {
        let out = convolve(&[
            Gaussian::scalar(0.0, 1.0).unwrap(),
            Gaussian::scalar(0.0, 1.0).unwrap(),
        ])
        .unwrap();
        assert_eq!(out.mean()[0], 0.0);
        assert_eq!(out.cov().matrix()[(0, 0)], 2.0);

        let single = Gaussian::scalar(1.5, 0.5).unwrap();
        let out = convolve(std::slice::from_ref(&single)).unwrap();
        assert_eq!(out, single);

        let out = convolve(&[
            Gaussian::scalar(1.0, 2.0).unwrap(),
            Gaussian::scalar(2.0, 3.0).unwrap(),
            Gaussian::scalar(-3.0, 5.0).unwrap(),
        ])
        .unwrap();
        assert!((out.mean()[0] - 0.0).abs() < 1e-15);
        assert!((out.cov().matrix()[(0, 0)] - 10.0).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let p = random_gaussian(3, &mut seeded_rng(4));
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-10);

        let p = Gaussian::scalar(1.0, 1.0).unwrap();
        let q = Gaussian::scalar(0.0, 1.0).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - 0.5).abs() < 1e-12);

        let q = Gaussian::scalar(0.0, 1e-20).unwrap();
        let p = Gaussian::scalar(0.0, 1.0).unwrap();
        assert!(matches!(
            kl_divergence(&p, &q),
            Err(Error::Singularity(_))
        ));
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut rng = seeded_rng(5);
        for _ in 0..50 {
            let p = random_gaussian(3, &mut rng);
            let q = random_gaussian(3, &mut rng);
            assert!(kl_divergence(&p, &q).unwrap() >= -1e-10);
        }
    }

    #[test]
    fn bures_examples() {
        let p = Gaussian::scalar(0.0, 1.0).unwrap();
        let q = Gaussian::scalar(3.0, 1.0).unwrap();
        assert!((bures_w2(&p, &q).unwrap() - 3.0).abs() < 1e-12);

        let p = Gaussian::scalar(0.0, 1.0).unwrap();
        let q = Gaussian::scalar(0.0, 4.0).unwrap();
        assert!((bures_w2(&p, &q).unwrap() - 1.0).abs() < 1e-12);

        let g = random_gaussian(3, &mut seeded_rng(6));
        assert!(bures_w2(&g, &g).unwrap() < 1e-8);
    }

    #[test]
    fn bures_is_a_metric_on_random_triples() {
        let mut rng = seeded_rng(7);
        for _ in 0..30 {
            let a = random_gaussian(2, &mut rng);
            let b = random_gaussian(2, &mut rng);
            let c = random_gaussian(2, &mut rng);
            let ab = bures_w2(&a, &b).unwrap();
            let ba = bures_w2(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-8, "symmetry violated: {ab} vs {ba}");
            let ac = bures_w2(&a, &c).unwrap();
            let cb = bures_w2(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-6, "triangle violated");
        }
    }

    #[test]
    fn psd_sqrt_examples() {
        let r = psd_sqrt(&PsdMatrix::identity(3));
        assert!((r.matrix() - DMatrix::identity(3, 3)).norm() < 1e-12);

        let r = psd_sqrt(&PsdMatrix::from_diagonal(&[4.0, 9.0]).unwrap());
        assert!((r.matrix() - mat(2, 2, &[2.0, 0.0, 0.0, 3.0])).norm() < 1e-12);

        let mut rng = seeded_rng(8);
        let b = DMatrix::from_iterator(4, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0f64)));
        let s = PsdMatrix::new(b.transpose() * &b).unwrap();
        let r = psd_sqrt(&s);
        let err = (r.matrix() * r.matrix() - s.matrix()).norm() / s.matrix().norm();
        assert!(err < 1e-8, "reconstruction error {err}");
    }

    #[test]
    fn sampling_degenerate_and_moments() {
        let g = Gaussian::dirac(DVector::from_vec(vec![2.0, -1.0]));
        let s = sample(&g, 5, &mut seeded_rng(9)).unwrap();
        for i in 0..5 {
            assert_eq!(s.row(i), vec![2.0, -1.0]);
        }

        let g = Gaussian::standard(2);
        let t = 50_000;
        let s = sample(&g, t, &mut seeded_rng(10)).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..t).map(|i| s.matrix()[(i, j)]).sum::<f64>() / t as f64;
            assert!(mean.abs() < 0.03, "coordinate {j} sample mean {mean}");
        }

        let a = sample(&g, 16, &mut seeded_rng(11)).unwrap();
        let b = sample(&g, 16, &mut seeded_rng(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mle_fit_examples() {
        let s = SampleSet::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let g = mle_fit(&s).unwrap();
        assert_eq!(g.mean().as_slice(), &[1.0, 0.0]);
        assert_eq!(g.cov().matrix(), &mat(2, 2, &[1.0, 0.0, 0.0, 0.0]));

        let s = SampleSet::from_rows(&vec![vec![3.0, 1.0]; 4]).unwrap();
        let g = mle_fit(&s).unwrap();
        assert_eq!(g.cov().matrix(), &DMatrix::zeros(2, 2));

        let s = SampleSet::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(mle_fit(&s), Err(Error::Parameter(_))));
    }

    #[test]
    fn mle_round_trip_recovers_the_sampler() {
        let g = random_gaussian(2, &mut seeded_rng(12));
        let s = sample(&g, 100_000, &mut seeded_rng(13)).unwrap();
        let fit = mle_fit(&s).unwrap();
        let w2 = bures_w2(&fit, &g).unwrap();
        assert!(w2 < 0.05, "round-trip W2 = {w2}");
    }

    #[test]
    fn pushforward_composes() {
        let mut rng = seeded_rng(14);
        for _ in 0..20 {
            let g = random_gaussian(3, &mut rng);
            let a = DMatrix::from_iterator(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0f64)));
            let b = DMatrix::from_iterator(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0f64)));
            let two_step = pushforward(&b, &pushforward(&a, &g).unwrap()).unwrap();
            let one_step = pushforward(&(&b * &a), &g).unwrap();
            assert!((two_step.mean() - one_step.mean()).norm() < 1e-10);
            assert!((two_step.cov().matrix() - one_step.cov().matrix()).norm() < 1e-10);
        }
    }

    #[test]
    fn psd_projection_is_idempotent() {
        let mut rng = seeded_rng(15);
        for _ in 0..20 {
            let b = DMatrix::from_iterator(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0f64)));
            // near-PSD with a tiny negative perturbation, inside the clamp band
            let raw = b.transpose() * &b - DMatrix::identity(3, 3) * 1e-12;
            let once = PsdMatrix::new(raw).unwrap();
            let twice = PsdMatrix::new(once.matrix().clone()).unwrap();
            assert_eq!(once.matrix(), twice.matrix());
        }
    }

    #[test]
    fn psd_rejects_clearly_indefinite_input() {
        let m = mat(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(PsdMatrix::new(m).is_err());
        let asym = mat(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(PsdMatrix::new(asym).is_err());
    }

    #[test]
    fn gaussian_json_round_trip() {
        let g = random_gaussian(3, &mut seeded_rng(16));
        let text = serde_json::to_string(&g).unwrap();
        let back: Gaussian = serde_json::from_str(&text).unwrap();
        assert_eq!(g, back);
    }
}
