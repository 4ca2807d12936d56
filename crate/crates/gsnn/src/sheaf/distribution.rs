//! Distribution-space route for the Gaussian Laplacian.
//!
//! Instead of acting on parameters per node, this route stacks the whole
//! field into one big Gaussian, materializes the coboundary halves and the
//! block selectors as dense matrices, and computes the Laplacian as a
//! convolution of pushforwards. It is deliberately structured differently
//! from the block-sparse route so the two can check each other.

use nalgebra::{DMatrix, DVector};

use super::SheafOperators;
use crate::gaussian::{Gaussian, GaussianField, PsdMatrix};
use crate::graph::Orientation;
use crate::Result;

/// Gaussian on a stacked space, with a full (not block) covariance.
#[derive(Clone)]
struct BigGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl BigGaussian {
    fn push(&self, m: &DMatrix<f64>) -> BigGaussian {
        BigGaussian {
            mean: m * &self.mean,
            cov: m * &self.cov * m.transpose(),
        }
    }

    fn convolve(&self, other: &BigGaussian) -> BigGaussian {
        BigGaussian {
            mean: &self.mean + &other.mean,
            cov: &self.cov + &other.cov,
        }
    }
}

/// Identity on the k-th `d x d` diagonal block of a `blocks*d` square space,
/// zero elsewhere.
fn selector(blocks: usize, d: usize, k: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(blocks * d, blocks * d);
    for i in 0..d {
        s[(k * d + i, k * d + i)] = 1.0;
    }
    s
}

pub(super) fn distribution_laplacian(
    ops: &SheafOperators,
    field: &GaussianField,
) -> Result<GaussianField> {
    let graph = ops.graph();
    let d = ops.dim();
    let n = graph.node_count();
    let m = graph.edge_count();
    if field.len() != n || field.dim() != d {
        return Err(crate::Error::Shape("field does not match sheaf dims".into()));
    }

    // Dense coboundary halves for the canonical orientation.
    let orientation = Orientation::default_for(graph);
    let mut delta_plus = DMatrix::zeros(m * d, n * d);
    let mut delta_minus = DMatrix::zeros(m * d, n * d);
    for e in 0..m {
        let (src, tgt) = orientation.oriented(e);
        delta_plus
            .view_mut((e * d, src * d), (d, d))
            .copy_from(ops.maps().map_for(graph, e, src));
        delta_minus
            .view_mut((e * d, tgt * d), (d, d))
            .copy_from(ops.maps().map_for(graph, e, tgt));
    }

    // The field as one product Gaussian with block-diagonal covariance.
    let mut cov = DMatrix::zeros(n * d, n * d);
    for (v, g) in field.iter().enumerate() {
        cov.view_mut((v * d, v * d), (d, d))
            .copy_from(g.cov().matrix());
    }
    let nu = BigGaussian {
        mean: field.stacked_means(),
        cov,
    };

    // First stage: per-edge selector pushforwards of the two coboundary
    // halves, convolved across edges.
    let plus_push = nu.push(&delta_plus);
    let minus_push = nu.push(&(-&delta_minus));
    let mut coboundary: Option<BigGaussian> = None;
    for e in 0..m {
        let sel = selector(m, d, e);
        let piece = plus_push.push(&sel).convolve(&minus_push.push(&sel));
        coboundary = Some(match coboundary {
            None => piece,
            Some(acc) => acc.convolve(&piece),
        });
    }
    let coboundary = coboundary.expect("graphs without edges cannot be assembled");

    // Second stage: transpose halves against the coboundary output, again
    // convolved through per-node selectors.
    let up = coboundary.push(&delta_plus.transpose());
    let down = coboundary.push(&(-delta_minus.transpose()));
    let mut lap: Option<BigGaussian> = None;
    for v in 0..n {
        let sel = selector(n, d, v);
        let piece = up.push(&sel).convolve(&down.push(&sel));
        lap = Some(match lap {
            None => piece,
            Some(acc) => acc.convolve(&piece),
        });
    }
    let lap = lap.expect("nonempty node set");

    let nodes = (0..n)
        .map(|v| {
            let mean = DVector::from_iterator(d, (0..d).map(|i| lap.mean[v * d + i]));
            let block = lap.cov.view((v * d, v * d), (d, d)).into_owned();
            Gaussian::new(mean, PsdMatrix::new(block)?)
        })
        .collect::<Result<_>>()?;
    GaussianField::new(nodes)
}
