//! Dataset synthesis, target construction, node splits, and weather ingestion.

mod weather;

pub use weather::{load_weather, WeatherSpec};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::gaussian::{
    convolve, kl_divergence, pushforward, sample, Gaussian, GaussianField, SampleSet,
};
use crate::graph::{barabasi_albert, watts_strogatz, Graph};
use crate::{Error, Result};

/// Floor applied to pairwise KL divergences before inversion when weighting
/// neighbors; identical nodes would otherwise divide by zero.
pub const KL_FLOOR: f64 = 1e-8;

/// Which random-graph generator backs a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    Ba { n: usize, m: usize },
    Ws { n: usize, k: usize, p: f64 },
}

impl Generator {
    fn build(&self, seed: u64) -> Result<Graph> {
        match *self {
            Generator::Ba { n, m } => barabasi_albert(n, m, seed),
            Generator::Ws { n, k, p } => watts_strogatz(n, k, p, seed),
        }
    }
}

/// Train/validation/test masks; exactly one is set per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        mask_indices(&self.train)
    }

    pub fn val_nodes(&self) -> Vec<usize> {
        mask_indices(&self.val)
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        mask_indices(&self.test)
    }
}

fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

/// The three split subsets named by index lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: u64,
}

/// One experiment's worth of data: graph, per-node input Gaussians, per-node
/// target sample sets, and the node split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: Graph,
    pub inputs: GaussianField,
    pub targets: Vec<SampleSet>,
    pub split: Split,
    pub meta: Meta,
}

impl Dataset {
    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.dim()
    }

    pub fn target_dim(&self) -> usize {
        self.targets[0].dim()
    }

    pub fn target_samples(&self) -> usize {
        self.targets[0].len()
    }

    pub fn nodes_of(&self, kind: SplitKind) -> Vec<usize> {
        match kind {
            SplitKind::Train => self.split.train_nodes(),
            SplitKind::Val => self.split.val_nodes(),
            SplitKind::Test => self.split.test_nodes(),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.graph.node_count();
        if self.inputs.len() != n || self.targets.len() != n || self.split.len() != n {
            return Err(Error::Shape("dataset arrays must cover every node".into()));
        }
        let t_dim = self.targets[0].dim();
        if self.targets.iter().any(|t| t.dim() != t_dim) {
            return Err(Error::Shape("targets have mixed dimensions".into()));
        }
        for v in 0..n {
            let flags =
                u8::from(self.split.train[v]) + u8::from(self.split.val[v]) + u8::from(self.split.test[v]);
            if flags != 1 {
                return Err(Error::Parameter(format!(
                    "node {v} must belong to exactly one split"
                )));
            }
        }
        Ok(())
    }
}

/// Uniform random node split with the requested ratios; deterministic per
/// seed. Sizes are the rounded shares, so a 60/20/20 split of 200 nodes is
/// exactly 120/40/40.
pub fn split(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if (total - 1.0).abs() > 1e-9 || ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::Parameter(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let n_train = ((ratios.0 * n as f64).round() as usize).min(n);
    let n_val = ((ratios.1 * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = crate::seeded_rng(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut s = Split {
        train: vec![false; n],
        val: vec![false; n],
        test: vec![false; n],
    };
    for (pos, &v) in order.iter().enumerate() {
        if pos < n_train {
            s.train[v] = true;
        } else if pos < n_train + n_val {
            s.val[v] = true;
        } else {
            s.test[v] = true;
        }
    }
    Ok(s)
}

/// Neighbor-weighted target construction: each node's target is its own
/// Gaussian convolved with every neighbor's, the neighbor first scaled by
/// `α_u = KL(v‖u)⁻¹ / max_u KL(v‖u)⁻¹` through the pushforward by `α_u I`.
pub fn make_targets(graph: &Graph, field: &GaussianField) -> Result<GaussianField> {
    if field.len() != graph.node_count() {
        return Err(Error::Shape("field does not cover the graph".into()));
    }
    let mut out = Vec::with_capacity(field.len());
    for v in 0..graph.node_count() {
        if graph.degree(v) == 0 {
            return Err(Error::Degeneracy(format!(
                "node {v} has no neighbors to aggregate"
            )));
        }
        let inv_kl: Vec<f64> = graph
            .neighbors(v)
            .iter()
            .map(|&u| kl_divergence(field.node(v), field.node(u)).map(|k| 1.0 / k.max(KL_FLOOR)))
            .collect::<Result<_>>()?;
        let max_inv = inv_kl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut parts = vec![field.node(v).clone()];
        for (&u, &inv) in graph.neighbors(v).iter().zip(&inv_kl) {
            let alpha = inv / max_inv;
            let d = field.dim();
            let scale = DMatrix::identity(d, d) * alpha;
            parts.push(pushforward(&scale, field.node(u))?);
        }
        out.push(convolve(&parts)?);
    }
    GaussianField::new(out)
}

/// Draws one positive-definite matrix from the inverse-Wishart distribution
/// with the given scale matrix and degrees of freedom.
pub fn inverse_wishart<R: Rng>(scale: &DMatrix<f64>, df: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if df <= (d + 1) as f64 {
        return Err(Error::Parameter(format!(
            "inverse-Wishart needs df > dim + 1, got df = {df}, dim = {d}"
        )));
    }
    let scale_inv = scale.clone().try_inverse().ok_or_else(|| {
        Error::Singularity("inverse-Wishart scale matrix is singular".into())
    })?;
    let chol = nalgebra::Cholesky::new(scale_inv)
        .ok_or_else(|| Error::Singularity("inverse-Wishart scale is not PD".into()))?;
    let l = chol.l();
    // Bartlett factor: chi-squared diagonal, standard normal strict lower.
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::Parameter(format!("chi-squared dof: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = l * a;
    let w = &la * la.transpose();
    w.try_inverse()
        .ok_or_else(|| Error::Singularity("Wishart draw not invertible".into()))
}

/// Default inverse-Wishart degrees of freedom for input dimension `s`.
pub fn default_wishart_df(s: usize) -> f64 {
    (s + 3) as f64
}

/// Builds one synthetic dataset: a generated graph, per-node input Gaussians
/// drawn from shared hyper-parameters, targets from [`make_targets`] sampled
/// `t_target` times, and a 60/20/20 split. Deterministic per seed.
pub fn synthesize(
    generator: Generator,
    s: usize,
    t_target: usize,
    df: f64,
    seed: u64,
) -> Result<Dataset> {
    if s == 0 || t_target == 0 {
        return Err(Error::Parameter("dims and sample counts must be positive".into()));
    }
    let graph = generator.build(seed)?;
    let n = graph.node_count();
    let mut rng = crate::seeded_rng(seed.wrapping_add(0x5EED_DA7A));
    let u1 = DVector::from_iterator(s, (0..s).map(|_| rng.gen_range(-1.0..1.0)));
    let u2 = DMatrix::from_iterator(s, s, (0..s * s).map(|_| rng.gen_range(-1.0..1.0f64)));
    // Regularized so both the Gaussian and the inverse-Wishart stay well posed.
    let hyper_cov = &u2 * u2.transpose() + DMatrix::identity(s, s) * 1e-6;
    let hyper_chol = nalgebra::Cholesky::new(hyper_cov.clone())
        .expect("regularized U2 U2^T is PD")
        .l();

    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let z = DVector::from_iterator(s, (0..s).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let mean = &u1 + &hyper_chol * z;
        let cov = inverse_wishart(&hyper_cov, df, &mut rng)?;
        nodes.push(Gaussian::new(
            mean,
            crate::gaussian::PsdMatrix::new(cov)?,
        )?);
    }
    let inputs = GaussianField::new(nodes)?;
    let target_field = make_targets(&graph, &inputs)?;
    let targets = target_field
        .iter()
        .map(|g| sample(g, t_target, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let split = split(n, (0.6, 0.2, 0.2), seed.wrapping_add(0x0591_17))?;
    let (gen_name, params) = match generator {
        Generator::Ba { n, m } => ("barabasi_albert", serde_json::json!({"n": n, "m": m})),
        Generator::Ws { n, k, p } => ("watts_strogatz", serde_json::json!({"n": n, "k": k, "p": p})),
    };
    let ds = Dataset {
        graph,
        inputs,
        targets,
        split,
        meta: Meta {
            generator: gen_name.to_string(),
            params,
            seed,
        },
    };
    ds.validate()?;
    Ok(ds)
}

// -- JSON round trip ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GraphJson {
    n: usize,
    edges: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct SplitJson {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    graph: GraphJson,
    inputs: Vec<Gaussian>,
    targets: Vec<Vec<Vec<f64>>>,
    splits: SplitJson,
    meta: Meta,
}

impl Dataset {
    pub fn to_json(&self) -> Result<String> {
        let doc = DatasetJson {
            graph: GraphJson {
                n: self.graph.node_count(),
                edges: self.graph.edges().iter().map(|&(u, v)| [u, v]).collect(),
            },
            inputs: self.inputs.iter().cloned().collect(),
            targets: self
                .targets
                .iter()
                .map(|t| (0..t.len()).map(|i| t.row(i)).collect())
                .collect(),
            splits: SplitJson {
                train: self.split.train_nodes(),
                val: self.split.val_nodes(),
                test: self.split.test_nodes(),
            },
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Dataset> {
        let doc: DatasetJson = serde_json::from_str(text)?;
        let n = doc.graph.n;
        let edges: Vec<(usize, usize)> = doc.graph.edges.iter().map(|e| (e[0], e[1])).collect();
        let graph = Graph::new(n, &edges)?;
        if doc.inputs.len() != n {
            return Err(Error::Schema(format!(
                "expected {n} input Gaussians, found {}",
                doc.inputs.len()
            )));
        }
        let inputs = GaussianField::new(doc.inputs)?;
        if doc.targets.len() != n {
            return Err(Error::Schema(format!(
                "expected {n} target sample sets, found {}",
                doc.targets.len()
            )));
        }
        let targets = doc
            .targets
            .iter()
            .map(|rows| SampleSet::from_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        let mut split = Split {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        };
        for (mask, idx) in [
            (&mut split.train, &doc.splits.train),
            (&mut split.val, &doc.splits.val),
            (&mut split.test, &doc.splits.test),
        ] {
            for &v in idx {
                if v >= n {
                    return Err(Error::Schema(format!("split index {v} out of range")));
                }
                mask[v] = true;
            }
        }
        let ds = Dataset {
            graph,
            inputs,
            targets,
            split,
            meta: doc.meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Dataset> {
        Dataset::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{bures_w2, random_gaussian, PsdMatrix};
    use crate::seeded_rng;

    #[test]
    fn synthesize_matches_requested_shape_and_split() {
        let ds = synthesize(Generator::Ba { n: 200, m: 25 }, 2, 10, 5.0, 7).unwrap();
        assert_eq!(ds.node_count(), 200);
        assert_eq!(ds.input_dim(), 2);
        assert_eq!(ds.split.train_nodes().len(), 120);
        assert_eq!(ds.split.val_nodes().len(), 40);
        assert_eq!(ds.split.test_nodes().len(), 40);
        for g in ds.inputs.iter() {
            assert!(g.cov().min_eigenvalue() > 0.0, "inputs must be PD");
        }
    }

    #[test]
    fn synthesize_is_bitwise_deterministic() {
        let a = synthesize(Generator::Ws { n: 40, k: 4, p: 0.2 }, 2, 5, 5.0, 3).unwrap();
        let b = synthesize(Generator::Ws { n: 40, k: 4, p: 0.2 }, 2, 5, 5.0, 3).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn synthesize_rejects_small_df() {
        assert!(matches!(
            synthesize(Generator::Ba { n: 10, m: 2 }, 2, 5, 2.5, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn inverse_wishart_draws_are_pd_with_plausible_scale() {
        let mut rng = seeded_rng(100);
        let scale = DMatrix::identity(2, 2);
        // mean of IW(I, df) is I/(df - d - 1); with df = 7, mean = I/4
        let mut acc = DMatrix::zeros(2, 2);
        let reps = 4000;
        for _ in 0..reps {
            let s = inverse_wishart(&scale, 7.0, &mut rng).unwrap();
            assert!(s.clone().symmetric_eigen().eigenvalues.min() > 0.0);
            acc += s;
        }
        acc /= reps as f64;
        assert!((acc[(0, 0)] - 0.25).abs() < 0.02, "IW mean {:?}", acc[(0, 0)]);
        assert!((acc[(1, 1)] - 0.25).abs() < 0.02);
        assert!(acc[(0, 1)].abs() < 0.02);
    }

    #[test]
    fn target_weights_examples() {
        // single neighbor: alpha = 1, plain convolution
        let graph = Graph::new(2, &[(0, 1)]).unwrap();
        let field = GaussianField::new(vec![
            Gaussian::scalar(0.0, 1.0).unwrap(),
            Gaussian::scalar(1.0, 1.0).unwrap(),
        ])
        .unwrap();
        let targets = make_targets(&graph, &field).unwrap();
        assert!((targets.node(0).mean()[0] - 1.0).abs() < 1e-12);
        assert!((targets.node(0).cov().matrix()[(0, 0)] - 2.0).abs() < 1e-12);

        // identical neighbors: all alphas equal one
        let graph = Graph::new(3, &[(0, 1), (0, 2)]).unwrap();
        let g = random_gaussian(2, &mut seeded_rng(101));
        let field = GaussianField::new(vec![g.clone(), g.clone(), g.clone()]).unwrap();
        let targets = make_targets(&graph, &field).unwrap();
        let expected_mean = g.mean() * 3.0;
        assert!((targets.node(0).mean() - expected_mean).norm() < 1e-9);
    }

    #[test]
    fn target_covariance_dominates_input() {
        let ds = synthesize(Generator::Ba { n: 30, m: 3 }, 2, 5, 5.0, 11).unwrap();
        let target_field = make_targets(&ds.graph, &ds.inputs).unwrap();
        for v in 0..30 {
            let gap = target_field.node(v).cov().matrix() - ds.inputs.node(v).cov().matrix();
            let min_eig = PsdMatrix::new(gap).map(|m| m.min_eigenvalue());
            assert!(
                min_eig.map_or(false, |e| e >= -1e-9),
                "target covariance must dominate at node {v}"
            );
        }
    }

    #[test]
    fn alpha_weights_lie_in_unit_interval_with_a_max_of_one() {
        let ds = synthesize(Generator::Ws { n: 20, k: 4, p: 0.3 }, 2, 5, 5.0, 13).unwrap();
        for v in 0..20 {
            let inv: Vec<f64> = ds
                .graph
                .neighbors(v)
                .iter()
                .map(|&u| {
                    1.0 / kl_divergence(ds.inputs.node(v), ds.inputs.node(u))
                        .unwrap()
                        .max(KL_FLOOR)
                })
                .collect();
            let max = inv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let alphas: Vec<f64> = inv.iter().map(|i| i / max).collect();
            assert!(alphas.iter().all(|&a| a > 0.0 && a <= 1.0 + 1e-12));
            assert!(alphas.iter().any(|&a| (a - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn split_examples() {
        let s = split(10, (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!(s.train_nodes().len(), 6);
        assert_eq!(s.val_nodes().len(), 2);
        assert_eq!(s.test_nodes().len(), 2);
        for v in 0..10 {
            let count =
                u8::from(s.train[v]) + u8::from(s.val[v]) + u8::from(s.test[v]);
            assert_eq!(count, 1, "masks must partition nodes");
        }
        assert!(matches!(
            split(10, (0.5, 0.2, 0.2), 0),
            Err(Error::Parameter(_))
        ));
        // determinism
        assert_eq!(split(50, (0.6, 0.2, 0.2), 9).unwrap(), split(50, (0.6, 0.2, 0.2), 9).unwrap());
    }

    #[test]
    fn dataset_json_round_trip_is_bitwise() {
        let ds = synthesize(Generator::Ba { n: 12, m: 2 }, 2, 4, 5.0, 21).unwrap();
        let text = ds.to_json().unwrap();
        let back = Dataset::from_json(&text).unwrap();
        let again = back.to_json().unwrap();
        assert_eq!(text, again, "JSON round trip must be bitwise identical");
        // numbers survive exactly
        for v in 0..12 {
            assert_eq!(ds.inputs.node(v), back.inputs.node(v));
            assert_eq!(ds.targets[v], back.targets[v]);
        }
    }

    #[test]
    fn from_json_rejects_malformed_documents() {
        assert!(Dataset::from_json("{}").is_err());
        let ds = synthesize(Generator::Ba { n: 6, m: 2 }, 2, 3, 5.0, 2).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&ds.to_json().unwrap()).unwrap();
        doc["splits"]["train"] = serde_json::json!([999]);
        assert!(matches!(
            Dataset::from_json(&doc.to_string()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn round_trip_fit_of_targets_is_consistent() {
        // targets sampled from the constructed field should fit back close
        let ds = synthesize(Generator::Ba { n: 10, m: 2 }, 2, 4000, 6.0, 5).unwrap();
        let field = make_targets(&ds.graph, &ds.inputs).unwrap();
        for v in 0..3 {
            let fit = crate::gaussian::mle_fit(&ds.targets[v]).unwrap();
            let w2 = bures_w2(&fit, field.node(v)).unwrap();
            assert!(w2 < 0.4, "node {v} refit W2 = {w2}");
        }
    }
}
