//! Smoothness diagnostics: Dirichlet and transport energies, orbit checks.

use nalgebra::{DMatrix, DVector};

use super::SheafOperators;
use crate::gaussian::{pushforward, Gaussian, GaussianField};
use crate::{Error, Result};

pub(super) fn dirichlet_energy(ops: &SheafOperators, mu: &DVector<f64>) -> Result<f64> {
    let nd = ops.graph().node_count() * ops.dim();
    if mu.len() != nd {
        return Err(Error::Shape(format!(
            "expected a length {nd} vector, got {}",
            mu.len()
        )));
    }
    let x = DMatrix::from_column_slice(nd, 1, mu.as_slice());
    let y = ops.apply_mean_laplacian(&x, true)?;
    Ok((x.transpose() * y)[(0, 0)])
}

/// Squared 2-Wasserstein distance between Gaussians (no square root), used
/// where energies sum squared distances.
fn w2_squared(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    let w = crate::gaussian::bures_w2(p, q)?;
    Ok(w * w)
}

pub(super) fn lyapunov_energy(ops: &SheafOperators, field: &GaussianField) -> Result<f64> {
    let n = ops.graph().node_count();
    if field.len() != n || field.dim() != ops.dim() {
        return Err(Error::Shape("field does not match sheaf dims".into()));
    }
    let mut total = 0.0;
    for (e, &(u, v)) in ops.graph().edges().iter().enumerate() {
        let pu = pushforward(&ops.scaled_map(e, u), field.node(u))?;
        let pv = pushforward(&ops.scaled_map(e, v), field.node(v))?;
        total += w2_squared(&pu, &pv)?;
    }
    Ok(total)
}

/// What a single linear map does to one Gaussian, with the invariants the
/// orthogonal and diagonal classes are supposed to respect.
#[derive(Debug, Clone, serde::Serialize)]
pub struct OrbitReport {
    pub map_is_orthogonal: bool,
    pub map_is_diagonal: bool,
    /// `| ‖Qμ‖ − ‖μ‖ |`.
    pub mean_norm_residual: f64,
    /// Max gap between sorted covariance spectra before and after.
    pub spectrum_residual: f64,
    /// For orthogonal maps: both residuals within 1e-9.
    pub orth_invariants_hold: Option<bool>,
    /// For diagonal maps with all entries != 1 and a nowhere-zero mean:
    /// whether the pushforward moved the Gaussian (trivial stabilizer).
    pub stabilizer_moved: Option<bool>,
    /// Whether the pushforward fixes the Gaussian within 1e-9.
    pub fixes_gaussian: bool,
}

/// Tolerance for the orbit-invariant residuals.
pub const ORBIT_TOL: f64 = 1e-9;

/// Examines the action of `q` on `g`: norm/spectrum preservation for
/// orthogonal maps, stabilizer triviality for diagonal ones.
pub fn orbit_invariants(q: &DMatrix<f64>, g: &Gaussian) -> Result<OrbitReport> {
    let d = g.dim();
    if q.nrows() != d || q.ncols() != d {
        return Err(Error::Shape("map does not match Gaussian dim".into()));
    }
    let pushed = pushforward(q, g)?;
    let gram = q.transpose() * q - DMatrix::identity(d, d);
    let map_is_orthogonal = gram.norm() < 1e-8;
    let map_is_diagonal = (0..d).all(|i| (0..d).all(|j| i == j || q[(i, j)] == 0.0));

    let mean_norm_residual = (pushed.mean().norm() - g.mean().norm()).abs();
    let mut before: Vec<f64> = g
        .cov()
        .matrix()
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    let mut after: Vec<f64> = pushed
        .cov()
        .matrix()
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    before.sort_by(f64::total_cmp);
    after.sort_by(f64::total_cmp);
    let spectrum_residual = before
        .iter()
        .zip(&after)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    let moved_mean = (pushed.mean() - g.mean()).norm();
    let moved_cov = (pushed.cov().matrix() - g.cov().matrix()).norm();
    let fixes_gaussian = moved_mean < ORBIT_TOL && moved_cov < ORBIT_TOL;

    let orth_invariants_hold = map_is_orthogonal
        .then(|| mean_norm_residual <= ORBIT_TOL && spectrum_residual <= ORBIT_TOL);
    let stabilizer_applicable = map_is_diagonal
        && (0..d).all(|i| (q[(i, i)] - 1.0).abs() > 1e-12)
        && g.mean().iter().all(|&m| m != 0.0);
    let stabilizer_moved = stabilizer_applicable.then_some(!fixes_gaussian);

    Ok(OrbitReport {
        map_is_orthogonal,
        map_is_diagonal,
        mean_norm_residual,
        spectrum_residual,
        orth_invariants_hold,
        stabilizer_moved,
        fixes_gaussian,
    })
}
