//! Cellular-sheaf operators over a graph.
//!
//! A sheaf here attaches the stalk `R^d` to every node and edge, with one
//! `d x d` restriction map per incidence. The mean Laplacian acts on stacked
//! stalk vectors; the covariance Laplacian acts on per-node PSD blocks through
//! congruences of the same maps and never leaves the cone. Both normalized
//! forms share the degree blocks `D_v = Σ FᵀF`.
//!
//! Two independent code paths compute the covariance Laplacian (the per-edge
//! aggregation and the block-diagonal/off-diagonal decomposition), and a dense
//! distribution-space route acts on stacked Gaussians by pushforward and
//! convolution; the three must agree, which the self-check suite exercises.

mod distribution;
mod energy;
mod transport;

pub use energy::{orbit_invariants, OrbitReport};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::gaussian::{Gaussian, GaussianField, PsdMatrix};
use crate::graph::{Graph, Orientation};
use crate::{Error, Result};

/// Structure imposed on the learned or hand-built restriction maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MapClass {
    Diagonal,
    Orthogonal,
    General,
}

/// Frobenius tolerance for the orthogonality check `‖FᵀF − I‖`.
pub const ORTHO_TOL: f64 = 1e-6;
/// Eigenvalues of a degree block below this are pseudo-inverted to zero.
pub const DEGREE_PINV_TOL: f64 = 1e-10;

/// One `d x d` matrix per incidence `v ⊴ e`, tagged with a map class.
///
/// Covariance restriction maps are not stored: the covariance side always acts
/// by the congruence `Σ ↦ FΣFᵀ` of the stored map.
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictionMapSet {
    dim: usize,
    class: MapClass,
    /// Per edge `(u, v)` with `u < v`: `[F_{u⊴e}, F_{v⊴e}]`.
    maps: Vec<[DMatrix<f64>; 2]>,
}

impl RestrictionMapSet {
    pub fn from_edge_maps(
        graph: &Graph,
        class: MapClass,
        maps: Vec<[DMatrix<f64>; 2]>,
    ) -> Result<Self> {
        if maps.len() != graph.edge_count() {
            return Err(Error::Shape(format!(
                "expected {} edge map pairs, got {}",
                graph.edge_count(),
                maps.len()
            )));
        }
        let dim = maps
            .first()
            .map(|m| m[0].nrows())
            .ok_or_else(|| Error::Parameter("graph has no edges".into()))?;
        for pair in &maps {
            for f in pair {
                if f.nrows() != dim || f.ncols() != dim {
                    return Err(Error::Shape("restriction maps must share one dim".into()));
                }
                match class {
                    MapClass::Diagonal => {
                        let off = f
                            .iter()
                            .enumerate()
                            .any(|(k, &x)| (k / dim != k % dim) && x != 0.0);
                        if off {
                            return Err(Error::Parameter(
                                "diagonal-class map has off-diagonal entries".into(),
                            ));
                        }
                    }
                    MapClass::Orthogonal => {
                        let gram = f.transpose() * f - DMatrix::identity(dim, dim);
                        if gram.norm() >= ORTHO_TOL {
                            return Err(Error::Parameter(format!(
                                "orthogonal-class map fails ‖FᵀF − I‖ < {ORTHO_TOL:.0e}"
                            )));
                        }
                    }
                    MapClass::General => {}
                }
            }
        }
        Ok(Self { dim, class, maps })
    }

    /// Identity maps on every incidence (the constant sheaf when `dim` is 1).
    pub fn identity(graph: &Graph, dim: usize) -> Self {
        let eye = DMatrix::identity(dim, dim);
        Self {
            dim,
            class: MapClass::Orthogonal,
            maps: vec![[eye.clone(), eye]; graph.edge_count()],
        }
    }

    /// Same map on every incidence.
    pub fn constant(graph: &Graph, class: MapClass, f: DMatrix<f64>) -> Result<Self> {
        let maps = vec![[f.clone(), f]; graph.edge_count()];
        Self::from_edge_maps(graph, class, maps)
    }

    /// Random maps of the requested class, invertible by construction.
    pub fn random<R: Rng>(graph: &Graph, dim: usize, class: MapClass, rng: &mut R) -> Self {
        let draw = |rng: &mut R| -> DMatrix<f64> {
            match class {
                MapClass::Diagonal => {
                    let d: Vec<f64> = (0..dim)
                        .map(|_| {
                            let mag = rng.gen_range(0.4..1.6);
                            if rng.gen_bool(0.5) {
                                mag
                            } else {
                                -mag
                            }
                        })
                        .collect();
                    DMatrix::from_diagonal(&DVector::from_vec(d))
                }
                MapClass::Orthogonal => random_orthogonal(dim, rng),
                MapClass::General => loop {
                    let m = DMatrix::from_iterator(
                        dim,
                        dim,
                        (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0f64)),
                    ) + DMatrix::identity(dim, dim) * 0.3;
                    if m.determinant().abs() > 0.05 {
                        break m;
                    }
                },
            }
        };
        let maps = (0..graph.edge_count())
            .map(|_| [draw(rng), draw(rng)])
            .collect();
        Self { dim, class, maps }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class(&self) -> MapClass {
        self.class
    }

    pub fn edge_count(&self) -> usize {
        self.maps.len()
    }

    /// The map of incidence `node ⊴ edge`. Panics if `node` is not an endpoint.
    pub fn map_for(&self, graph: &Graph, edge: usize, node: usize) -> &DMatrix<f64> {
        let (u, v) = graph.edge(edge);
        if node == u {
            &self.maps[edge][0]
        } else if node == v {
            &self.maps[edge][1]
        } else {
            panic!("node {node} is not an endpoint of edge {edge}");
        }
    }

    pub fn pair(&self, edge: usize) -> &[DMatrix<f64>; 2] {
        &self.maps[edge]
    }
}

/// Haar-ish random orthogonal matrix: QR of a Gaussian matrix with the sign
/// of R's diagonal folded into Q.
pub fn random_orthogonal<R: Rng>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    use rand_distr::StandardNormal;
    let a = DMatrix::from_iterator(
        dim,
        dim,
        (0..dim * dim).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    let qr = a.qr();
    let r_diag: Vec<f64> = (0..dim).map(|i| qr.r()[(i, i)]).collect();
    let mut q = qr.q();
    for (j, &rd) in r_diag.iter().enumerate() {
        if rd < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Per-node PSD blocks: a 0-cochain on the covariance side.
#[derive(Debug, Clone, PartialEq)]
pub struct CovField {
    blocks: Vec<PsdMatrix>,
}

impl CovField {
    pub fn new(blocks: Vec<PsdMatrix>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Parameter("covariance field needs at least one block".into()))?;
        let d = first.dim();
        if blocks.iter().any(|b| b.dim() != d) {
            return Err(Error::Shape("covariance field has mixed dims".into()));
        }
        Ok(Self { blocks })
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            blocks: vec![PsdMatrix::zeros(dim); n],
        }
    }

    pub fn from_field(field: &GaussianField) -> Self {
        Self {
            blocks: field.iter().map(|g| g.cov().clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.blocks[0].dim()
    }

    pub fn block(&self, v: usize) -> &PsdMatrix {
        &self.blocks[v]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PsdMatrix> {
        self.blocks.iter()
    }
}

/// Per-edge output of the covariance coboundary, split into its positive
/// (source-side) and negative (target-side) congruence parts.
#[derive(Debug, Clone)]
pub struct CovCoboundary {
    /// `F_src Σ_src F_srcᵀ` per edge.
    pub plus: Vec<PsdMatrix>,
    /// `F_tgt Σ_tgt F_tgtᵀ` per edge.
    pub minus: Vec<PsdMatrix>,
    /// Sum of the two parts per edge.
    pub edges: Vec<PsdMatrix>,
}

/// Verdict of the global-section test.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SectionReport {
    pub is_section: bool,
    /// Largest per-edge agreement residual (mean norm or covariance Frobenius).
    pub max_edge_residual: f64,
    /// `max_v ‖L_C⁺(Σ)_v − L_C⁻(Σ)_v‖_F`: zero exactly on the equalizer.
    pub equalizer_residual: f64,
}

/// Assembled sheaf operators: degree blocks, their pseudo-inverse square
/// roots, and the per-edge off-diagonal blocks of the mean Laplacian.
#[derive(Debug, Clone)]
pub struct SheafOperators {
    graph: Graph,
    maps: RestrictionMapSet,
    /// `D_v = Σ_{v⊴e} FᵀF`, also the diagonal Laplacian blocks.
    deg: Vec<DMatrix<f64>>,
    /// `D_v^{-1/2}` by eigendecomposition, pseudo-inverted below `DEGREE_PINV_TOL`.
    deg_inv_sqrt: Vec<DMatrix<f64>>,
    /// `L_{uv} = -F_{u⊴e}ᵀ F_{v⊴e}` for edge `(u, v)`, `u < v`.
    off: Vec<DMatrix<f64>>,
}

impl SheafOperators {
    pub fn assemble(graph: &Graph, maps: RestrictionMapSet) -> Result<Self> {
        if maps.edge_count() != graph.edge_count() {
            return Err(Error::Shape("map set does not match graph edges".into()));
        }
        let d = maps.dim();
        let n = graph.node_count();
        if let Some(v) = (0..n).find(|&v| graph.degree(v) == 0) {
            return Err(Error::Degeneracy(format!(
                "node {v} is isolated; degree blocks must be invertible"
            )));
        }
        let mut deg = vec![DMatrix::zeros(d, d); n];
        for (e, &(u, v)) in graph.edges().iter().enumerate() {
            let [fu, fv] = maps.pair(e);
            deg[u] += fu.transpose() * fu;
            deg[v] += fv.transpose() * fv;
        }
        let deg_inv_sqrt = deg.iter().map(inv_sqrt_psd).collect();
        let off = graph
            .edges()
            .iter()
            .enumerate()
            .map(|(e, _)| {
                let [fu, fv] = maps.pair(e);
                -(fu.transpose() * fv)
            })
            .collect();
        Ok(Self {
            graph: graph.clone(),
            maps,
            deg,
            deg_inv_sqrt,
            off,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn maps(&self) -> &RestrictionMapSet {
        &self.maps
    }

    pub fn dim(&self) -> usize {
        self.maps.dim()
    }

    pub fn degree_block(&self, v: usize) -> &DMatrix<f64> {
        &self.deg[v]
    }

    pub fn degree_inv_sqrt(&self, v: usize) -> &DMatrix<f64> {
        &self.deg_inv_sqrt[v]
    }

    /// Off-diagonal block `L_{uv}` for edge `(u, v)` in canonical orientation.
    pub fn off_block(&self, e: usize) -> &DMatrix<f64> {
        &self.off[e]
    }

    /// The restriction map used by the normalized operators:
    /// `F_{v⊴e} D_v^{-1/2}`.
    pub(crate) fn scaled_map(&self, e: usize, node: usize) -> DMatrix<f64> {
        self.maps.map_for(&self.graph, e, node) * &self.deg_inv_sqrt[node]
    }

    /// Applies the mean Laplacian blockwise to an `n*d x h` matrix.
    pub fn apply_mean_laplacian(
        &self,
        x: &DMatrix<f64>,
        normalized: bool,
    ) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let n = self.graph.node_count();
        if x.nrows() != n * d {
            return Err(Error::Shape(format!(
                "expected {} rows, got {}",
                n * d,
                x.nrows()
            )));
        }
        let h = x.ncols();
        let mut y = DMatrix::zeros(n * d, h);
        for v in 0..n {
            let xv = x.rows(v * d, d);
            let block = if normalized {
                &self.deg_inv_sqrt[v] * &self.deg[v] * &self.deg_inv_sqrt[v]
            } else {
                self.deg[v].clone()
            };
            y.rows_mut(v * d, d).copy_from(&(&block * xv));
        }
        for (e, &(u, v)) in self.graph.edges().iter().enumerate() {
            let luv = if normalized {
                &self.deg_inv_sqrt[u] * &self.off[e] * &self.deg_inv_sqrt[v]
            } else {
                self.off[e].clone()
            };
            let add_u = &luv * x.rows(v * d, d);
            let add_v = luv.transpose() * x.rows(u * d, d);
            let mut yu = y.rows_mut(u * d, d);
            yu += add_u;
            let mut yv = y.rows_mut(v * d, d);
            yv += add_v;
        }
        Ok(y)
    }

    /// Dense mean Laplacian, mostly for small-scale checks.
    pub fn dense_mean_laplacian(&self, normalized: bool) -> DMatrix<f64> {
        let d = self.dim();
        let n = self.graph.node_count();
        let mut l = DMatrix::zeros(n * d, n * d);
        for v in 0..n {
            let block = if normalized {
                &self.deg_inv_sqrt[v] * &self.deg[v] * &self.deg_inv_sqrt[v]
            } else {
                self.deg[v].clone()
            };
            l.view_mut((v * d, v * d), (d, d)).copy_from(&block);
        }
        for (e, &(u, v)) in self.graph.edges().iter().enumerate() {
            let luv = if normalized {
                &self.deg_inv_sqrt[u] * &self.off[e] * &self.deg_inv_sqrt[v]
            } else {
                self.off[e].clone()
            };
            l.view_mut((u * d, v * d), (d, d)).copy_from(&luv);
            l.view_mut((v * d, u * d), (d, d))
                .copy_from(&luv.transpose());
        }
        l
    }

    /// Covariance coboundary per edge, with the oriented positive/negative
    /// split. Every output block is PSD.
    pub fn coboundary_cov(
        &self,
        orientation: &Orientation,
        sigma: &CovField,
    ) -> Result<CovCoboundary> {
        self.check_cov_field(sigma)?;
        let mut plus = Vec::with_capacity(self.graph.edge_count());
        let mut minus = Vec::with_capacity(self.graph.edge_count());
        let mut edges = Vec::with_capacity(self.graph.edge_count());
        for e in 0..self.graph.edge_count() {
            let (src, tgt) = orientation.oriented(e);
            let p = sigma
                .block(src)
                .congruence(self.maps.map_for(&self.graph, e, src))?;
            let m = sigma
                .block(tgt)
                .congruence(self.maps.map_for(&self.graph, e, tgt))?;
            edges.push(p.add(&m)?);
            plus.push(p);
            minus.push(m);
        }
        Ok(CovCoboundary { plus, minus, edges })
    }

    /// Covariance Laplacian by per-edge aggregation:
    /// each edge contributes `Fᵀ(F_u Σ_u F_uᵀ + F_v Σ_v F_vᵀ) F` to both ends.
    pub fn apply_cov_laplacian(&self, sigma: &CovField, normalized: bool) -> Result<CovField> {
        self.check_cov_field(sigma)?;
        let d = self.dim();
        let n = self.graph.node_count();
        let mut acc = vec![DMatrix::zeros(d, d); n];
        for (e, &(u, v)) in self.graph.edges().iter().enumerate() {
            let (fu, fv) = if normalized {
                (self.scaled_map(e, u), self.scaled_map(e, v))
            } else {
                let [a, b] = self.maps.pair(e);
                (a.clone(), b.clone())
            };
            let edge_block = &fu * sigma.block(u).matrix() * fu.transpose()
                + &fv * sigma.block(v).matrix() * fv.transpose();
            acc[u] += fu.transpose() * &edge_block * &fu;
            acc[v] += fv.transpose() * &edge_block * &fv;
        }
        CovField::new(acc.into_iter().map(PsdMatrix::new).collect::<Result<_>>()?)
    }

    /// Covariance Laplacian through the block-diagonal/off-diagonal
    /// decomposition of the mean Laplacian: an independent code path that the
    /// per-edge route must match.
    pub fn apply_cov_laplacian_decomposed(
        &self,
        sigma: &CovField,
        normalized: bool,
    ) -> Result<CovField> {
        self.check_cov_field(sigma)?;
        let d = self.dim();
        let n = self.graph.node_count();
        let mut acc = vec![DMatrix::zeros(d, d); n];
        // Block-diagonal parts: the i-th incident edge of every node forms one
        // diagonal term; applying each separately is what keeps outputs PSD.
        for v in 0..n {
            for &(e, _) in self.graph.incident(v) {
                let f = if normalized {
                    self.scaled_map(e, v)
                } else {
                    self.maps.map_for(&self.graph, e, v).clone()
                };
                let a = f.transpose() * &f;
                acc[v] += &a * sigma.block(v).matrix() * a.transpose();
            }
        }
        // Off-diagonal part, one congruence per directed incidence.
        for (e, &(u, v)) in self.graph.edges().iter().enumerate() {
            let (fu, fv) = if normalized {
                (self.scaled_map(e, u), self.scaled_map(e, v))
            } else {
                let [a, b] = self.maps.pair(e);
                (a.clone(), b.clone())
            };
            let luv = -(fu.transpose() * &fv);
            let lvu = -(fv.transpose() * &fu);
            acc[u] += &luv * sigma.block(v).matrix() * luv.transpose();
            acc[v] += &lvu * sigma.block(u).matrix() * lvu.transpose();
        }
        CovField::new(acc.into_iter().map(PsdMatrix::new).collect::<Result<_>>()?)
    }

    /// Positive and negative halves of the covariance Laplacian. Their
    /// equalizer is exactly the space of global sections.
    pub fn cov_laplacian_pm(&self, sigma: &CovField) -> Result<(CovField, CovField)> {
        self.check_cov_field(sigma)?;
        let d = self.dim();
        let n = self.graph.node_count();
        let mut plus = vec![DMatrix::zeros(d, d); n];
        let mut minus = vec![DMatrix::zeros(d, d); n];
        for (e, &(u, v)) in self.graph.edges().iter().enumerate() {
            let [fu, fv] = self.maps.pair(e);
            let au = fu.transpose() * fu;
            let av = fv.transpose() * fv;
            plus[u] += &au * sigma.block(u).matrix() * au.transpose();
            plus[v] += &av * sigma.block(v).matrix() * av.transpose();
            let cuv = fu.transpose() * fv;
            let cvu = fv.transpose() * fu;
            minus[u] += &cuv * sigma.block(v).matrix() * cuv.transpose();
            minus[v] += &cvu * sigma.block(u).matrix() * cvu.transpose();
        }
        Ok((
            CovField::new(plus.into_iter().map(PsdMatrix::new).collect::<Result<_>>()?)?,
            CovField::new(
                minus
                    .into_iter()
                    .map(PsdMatrix::new)
                    .collect::<Result<_>>()?,
            )?,
        ))
    }

    /// Gaussian Laplacian: mean Laplacian on means, covariance Laplacian on
    /// covariances, componentwise.
    pub fn apply_gaussian_laplacian(
        &self,
        field: &GaussianField,
        normalized: bool,
    ) -> Result<GaussianField> {
        let d = self.dim();
        let n = self.graph.node_count();
        if field.len() != n || field.dim() != d {
            return Err(Error::Shape("field does not match sheaf dims".into()));
        }
        let means = DMatrix::from_column_slice(n * d, 1, field.stacked_means().as_slice());
        let lm = self.apply_mean_laplacian(&means, normalized)?;
        let lc = self.apply_cov_laplacian(&CovField::from_field(field), normalized)?;
        let nodes = (0..n)
            .map(|v| {
                let mean = DVector::from_iterator(d, (0..d).map(|i| lm[(v * d + i, 0)]));
                Gaussian::new(mean, lc.block(v).clone())
            })
            .collect::<Result<_>>()?;
        GaussianField::new(nodes)
    }

    /// Section test: every edge must agree in both the pushed means and the
    /// pushed covariances; also reports the equalizer residual of the
    /// positive/negative covariance Laplacian halves.
    pub fn is_global_section(&self, field: &GaussianField, tol: f64) -> Result<SectionReport> {
        let d = self.dim();
        let n = self.graph.node_count();
        if field.len() != n || field.dim() != d {
            return Err(Error::Shape("field does not match sheaf dims".into()));
        }
        let mut max_res = 0.0f64;
        for (e, &(u, v)) in self.graph.edges().iter().enumerate() {
            let [fu, fv] = self.maps.pair(e);
            let mean_res = (fu * field.node(u).mean() - fv * field.node(v).mean()).norm();
            let cov_res = (fu * field.node(u).cov().matrix() * fu.transpose()
                - fv * field.node(v).cov().matrix() * fv.transpose())
            .norm();
            max_res = max_res.max(mean_res).max(cov_res);
        }
        let (plus, minus) = self.cov_laplacian_pm(&CovField::from_field(field))?;
        let eq_res = (0..n)
            .map(|v| (plus.block(v).matrix() - minus.block(v).matrix()).norm())
            .fold(0.0f64, f64::max);
        Ok(SectionReport {
            is_section: max_res <= tol,
            max_edge_residual: max_res,
            equalizer_residual: eq_res,
        })
    }

    /// Transport of a Gaussian along a walk: per edge, push into the edge
    /// stalk with the tail map and back out with the transpose of the head
    /// map. An empty or single-node path is the identity.
    pub fn transport(&self, path: &[usize], g: &Gaussian) -> Result<Gaussian> {
        transport::transport(&self.graph, &self.maps, path, g)
    }

    /// Composed transport matrix around a closed walk.
    pub fn holonomy(&self, cycle: &[usize]) -> Result<DMatrix<f64>> {
        transport::holonomy(&self.graph, &self.maps, cycle)
    }

    /// Quadratic form of the normalized mean Laplacian.
    pub fn dirichlet_energy(&self, mu: &DVector<f64>) -> Result<f64> {
        energy::dirichlet_energy(self, mu)
    }

    /// Sum over edges of squared 2-Wasserstein distances between the
    /// degree-normalized pushforwards of the endpoint Gaussians.
    pub fn lyapunov_energy(&self, field: &GaussianField) -> Result<f64> {
        energy::lyapunov_energy(self, field)
    }

    /// Distribution-space route for the Gaussian Laplacian, built from dense
    /// coboundary matrices, selector congruences, pushforwards, and
    /// convolutions. Serves as the oracle for [`Self::apply_gaussian_laplacian`].
    pub fn distribution_laplacian(&self, field: &GaussianField) -> Result<GaussianField> {
        distribution::distribution_laplacian(self, field)
    }

    fn check_cov_field(&self, sigma: &CovField) -> Result<()> {
        if sigma.len() != self.graph.node_count() || sigma.dim() != self.dim() {
            return Err(Error::Shape("covariance field does not match sheaf".into()));
        }
        Ok(())
    }
}

/// Symmetric pseudo-inverse square root of a PSD block.
fn inv_sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let vals = eig.eigenvalues.map(|l| {
        if l < DEGREE_PINV_TOL {
            0.0
        } else {
            1.0 / l.sqrt()
        }
    });
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let rt = r.transpose();
    (r + rt) * 0.5
}

#[cfg(test)]
mod tests;
