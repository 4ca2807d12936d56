//! Transport of Gaussians along walks and the holonomy of closed walks.

use nalgebra::DMatrix;

use super::RestrictionMapSet;
use crate::gaussian::{pushforward, Gaussian};
use crate::graph::Graph;
use crate::{Error, Result};

/// Matrix of one hop `a -> b` across their shared edge: push into the edge
/// stalk with `F_{a⊴e}`, pull back with `F_{b⊴e}ᵀ`.
fn hop_matrix(
    graph: &Graph,
    maps: &RestrictionMapSet,
    a: usize,
    b: usize,
) -> Result<DMatrix<f64>> {
    let e = graph
        .edge_id(a, b)
        .ok_or_else(|| Error::Path(format!("nodes {a} and {b} are not adjacent")))?;
    Ok(maps.map_for(graph, e, b).transpose() * maps.map_for(graph, e, a))
}

pub(super) fn transport(
    graph: &Graph,
    maps: &RestrictionMapSet,
    path: &[usize],
    g: &Gaussian,
) -> Result<Gaussian> {
    if g.dim() != maps.dim() {
        return Err(Error::Shape("Gaussian dim does not match stalks".into()));
    }
    let mut out = g.clone();
    for pair in path.windows(2) {
        let hop = hop_matrix(graph, maps, pair[0], pair[1])?;
        out = pushforward(&hop, &out)?;
    }
    Ok(out)
}

pub(super) fn holonomy(
    graph: &Graph,
    maps: &RestrictionMapSet,
    cycle: &[usize],
) -> Result<DMatrix<f64>> {
    if cycle.len() < 2 || cycle.first() != cycle.last() {
        return Err(Error::Path(
            "holonomy needs a closed walk (first node = last node)".into(),
        ));
    }
    let d = maps.dim();
    let mut h = DMatrix::identity(d, d);
    for pair in cycle.windows(2) {
        h = hop_matrix(graph, maps, pair[0], pair[1])? * h;
    }
    Ok(h)
}
