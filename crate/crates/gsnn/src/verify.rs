//! Self-check suite behind the CLI `verify` subcommand.
//!
//! Each check pins one contract of the library at an explicit tolerance and
//! reports pass/fail with a one-line detail. All randomness is internally
//! seeded, so the suite is deterministic. The two long studies at the bottom
//! (depth sweep, desk-scale model ordering) are shared by the CLI `energy`
//! and `sweep` subcommands and by the slow acceptance tests; they are not
//! part of [`verify_all`].

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{grad_check, sinkhorn, SheafCtx, Tape};
use crate::data::{synthesize, Dataset, Generator, SplitKind};
use crate::gaussian::{
    bures_w2, random_gaussian, sample, Gaussian, GaussianField, PsdMatrix,
};
use crate::graph::{barabasi_albert, Graph};
use crate::model::{evaluate, train, GsnnConfig, Model, ModelKind};
use crate::seeded_rng;
use crate::sheaf::{CovField, MapClass, RestrictionMapSet, SheafOperators};
use crate::Result;

/// One named check with its verdict and wall time.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    fn finish(name: &'static str, started: Instant, passed: bool, detail: String) -> Check {
        Check {
            name,
            passed,
            detail,
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

/// Runs the fast checks in order.
pub fn verify_all() -> Vec<Check> {
    vec![
        constant_sheaf_reduction(),
        laplacian_oracle_equivalence(),
        equalizer_characterizes_sections(),
        psd_cone_closure(),
        orbit_invariants_preserved(),
        lyapunov_quadratic_scaling(),
        gradient_fidelity(),
        sinkhorn_matches_bures(),
    ]
}

fn random_connected_graph(rng: &mut impl Rng, n_max: usize) -> Graph {
    let n = rng.gen_range(3..=n_max.max(3));
    let m = rng.gen_range(1..n.min(4));
    barabasi_albert(n, m, rng.gen()).unwrap()
}

fn random_instance(
    rng: &mut impl Rng,
    n_max: usize,
    d_max: usize,
    class: MapClass,
) -> (SheafOperators, GaussianField) {
    let graph = random_connected_graph(rng, n_max);
    let d = rng.gen_range(1..=d_max.max(1));
    let maps = RestrictionMapSet::random(&graph, d, class, rng);
    let ops = SheafOperators::assemble(&graph, maps).unwrap();
    let field = GaussianField::new(
        (0..graph.node_count())
            .map(|_| random_gaussian(d, rng))
            .collect(),
    )
    .unwrap();
    (ops, field)
}

/// Constant sheaf (d = 1, unit maps): the mean Laplacian is exactly the
/// combinatorial graph Laplacian and the covariance Laplacian matches
/// `deg(v) Σ_v + Σ_u Σ_u` to 1e-12, over 20 random connected graphs.
pub fn constant_sheaf_reduction() -> Check {
    let started = Instant::now();
    let mut rng = seeded_rng(0xC0_01);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let graph = random_connected_graph(&mut rng, 50);
        let n = graph.node_count();
        let ops = SheafOperators::assemble(&graph, RestrictionMapSet::identity(&graph, 1)).unwrap();
        let dense = ops.dense_mean_laplacian(false);
        for i in 0..n {
            for j in 0..n {
                let expected = if i == j {
                    graph.degree(i) as f64
                } else if graph.edge_id(i, j).is_some() {
                    -1.0
                } else {
                    0.0
                };
                if dense[(i, j)] != expected {
                    return Check::finish(
                        "constant-sheaf-reduction",
                        started,
                        false,
                        format!("trial {trial}: L[{i},{j}] = {} != {expected}", dense[(i, j)]),
                    );
                }
            }
        }
        let sigma = CovField::new(
            (0..n)
                .map(|_| PsdMatrix::from_diagonal(&[rng.gen_range(0.05..4.0)]).unwrap())
                .collect(),
        )
        .unwrap();
        let lc = ops.apply_cov_laplacian(&sigma, false).unwrap();
        for v in 0..n {
            let expected: f64 = graph.degree(v) as f64 * sigma.block(v).matrix()[(0, 0)]
                + graph
                    .neighbors(v)
                    .iter()
                    .map(|&u| sigma.block(u).matrix()[(0, 0)])
                    .sum::<f64>();
            worst = worst.max((lc.block(v).matrix()[(0, 0)] - expected).abs());
        }
    }
    Check::finish(
        "constant-sheaf-reduction",
        started,
        worst < 1e-12,
        format!("20 graphs; exact mean Laplacian; max covariance gap {worst:.2e} (tol 1e-12)"),
    )
}

/// The parameter-route Gaussian Laplacian, the distribution route
/// (convolution of pushforwards), and the decomposition route all agree to
/// 1e-10 on 100 random instances across the three map classes.
pub fn laplacian_oracle_equivalence() -> Check {
    let started = Instant::now();
    let mut rng = seeded_rng(0xC0_02);
    let classes = [MapClass::Diagonal, MapClass::Orthogonal, MapClass::General];
    let mut worst_routes = 0.0f64;
    let mut worst_decomp = 0.0f64;
    for trial in 0..100 {
        let class = classes[trial % 3];
        let (ops, field) = random_instance(&mut rng, 8, 3, class);
        let param_route = ops.apply_gaussian_laplacian(&field, false).unwrap();
        let dist_route = ops.distribution_laplacian(&field).unwrap();
        worst_routes = worst_routes
            .max((param_route.stacked_means() - dist_route.stacked_means()).amax());
        for v in 0..field.len() {
            worst_routes = worst_routes.max(
                (param_route.node(v).cov().matrix() - dist_route.node(v).cov().matrix()).amax(),
            );
        }
        let sigma = CovField::from_field(&field);
        for normalized in [false, true] {
            let a = ops.apply_cov_laplacian(&sigma, normalized).unwrap();
            let b = ops.apply_cov_laplacian_decomposed(&sigma, normalized).unwrap();
            for v in 0..field.len() {
                worst_decomp =
                    worst_decomp.max((a.block(v).matrix() - b.block(v).matrix()).amax());
            }
        }
    }
    let passed = worst_routes < 1e-10 && worst_decomp < 1e-10;
    Check::finish(
        "laplacian-oracle-equivalence",
        started,
        passed,
        format!(
            "100 instances; route gap {worst_routes:.2e}, decomposition gap {worst_decomp:.2e} (tol 1e-10)"
        ),
    )
}

/// Tree-transported fields are sections with equalizer residual at most 1e-8;
/// 100 perturbed non-sections all show residual above 1e-6.
pub fn equalizer_characterizes_sections() -> Check {
    let started = Instant::now();
    let mut rng = seeded_rng(0xC0_03);
    let mut max_section_residual = 0.0f64;
    let mut min_nonsection_residual = f64::INFINITY;
    let mut rejected = 0usize;
    for _ in 0..100 {
        // random tree with orthogonal maps
        let n = rng.gen_range(4..10);
        let mut edges = Vec::new();
        for v in 1..n {
            edges.push((rng.gen_range(0..v), v));
        }
        let graph = Graph::new(n, &edges).unwrap();
        let d = rng.gen_range(2..=3);
        let maps = RestrictionMapSet::random(&graph, d, MapClass::Orthogonal, &mut rng);
        let ops = SheafOperators::assemble(&graph, maps).unwrap();

        let seed_gaussian = random_gaussian(d, &mut rng);
        let mut nodes: Vec<Option<Gaussian>> = vec![None; n];
        nodes[0] = Some(seed_gaussian);
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(v) = queue.pop_front() {
            let current = nodes[v].clone().unwrap();
            for &u in graph.neighbors(v) {
                if nodes[u].is_none() {
                    nodes[u] = Some(ops.transport(&[v, u], &current).unwrap());
                    queue.push_back(u);
                }
            }
        }
        let mut gaussians: Vec<Gaussian> = nodes.into_iter().map(Option::unwrap).collect();
        let field = GaussianField::new(gaussians.clone()).unwrap();
        let report = ops.is_global_section(&field, 1e-8).unwrap();
        if !report.is_section {
            return Check::finish(
                "equalizer-sections",
                started,
                false,
                format!(
                    "tree transport failed the section test (residual {:.2e})",
                    report.max_edge_residual
                ),
            );
        }
        max_section_residual = max_section_residual.max(report.equalizer_residual);

        // perturb one node into a non-section
        let victim = rng.gen_range(0..n);
        gaussians[victim] = random_gaussian(d, &mut rng);
        let off = GaussianField::new(gaussians).unwrap();
        let report = ops.is_global_section(&off, 1e-8).unwrap();
        if report.max_edge_residual <= 1e-3 {
            // the random perturbation landed too close; extremely unlikely,
            // count and continue
            rejected += 1;
            continue;
        }
        min_nonsection_residual = min_nonsection_residual.min(report.equalizer_residual);
    }
    let passed =
        max_section_residual <= 1e-8 && min_nonsection_residual > 1e-6 && rejected < 5;
    Check::finish(
        "equalizer-sections",
        started,
        passed,
        format!(
            "sections residual <= {max_section_residual:.2e} (tol 1e-8); non-sections residual >= {min_nonsection_residual:.2e} (floor 1e-6)"
        ),
    )
}

/// 1000 cone operations: random normalized/unnormalized covariance Laplacian
/// applications plus full sheaf-network forwards, every output block PSD at
/// −1e-8.
pub fn psd_cone_closure() -> Check {
    let started = Instant::now();
    let mut rng = seeded_rng(0xC0_04);
    let classes = [MapClass::Diagonal, MapClass::Orthogonal, MapClass::General];
    let mut worst = 0.0f64;
    let mut applications = 0usize;
    for trial in 0..500 {
        let class = classes[trial % 3];
        let (ops, field) = random_instance(&mut rng, 8, 3, class);
        let sigma = CovField::from_field(&field);
        let out = ops.apply_cov_laplacian(&sigma, trial % 2 == 0).unwrap();
        for v in 0..out.len() {
            worst = worst.min(out.block(v).min_eigenvalue());
        }
        applications += 1;
    }
    // full forward passes with random parameters and inputs
    let kinds = [
        ModelKind::GsnnDiag,
        ModelKind::GsnnOrth,
        ModelKind::GsnnGen,
        ModelKind::GsnnGraphLap,
    ];
    for trial in 0..500 {
        let ds = synthesize(
            Generator::Ba {
                n: 6 + trial % 4,
                m: 2,
            },
            2,
            3,
            5.0,
            trial as u64,
        )
        .unwrap();
        let config = GsnnConfig {
            hidden: 3,
            layers: 1 + trial % 3,
            samples: 3,
            psi_hidden: 6,
            readout_hidden: 6,
            seed: trial as u64,
            ..GsnnConfig::default()
        };
        let model = Model::build(kinds[trial % 4], &config, &ds).unwrap();
        let tape = Tape::new();
        let mut noise = seeded_rng(trial as u64);
        let fwd = model.forward(&tape, &ds, &mut noise, false).unwrap();
        let cov = fwd.trace.cov_blocks.unwrap();
        let d = config.stalk_dim;
        for blk in cov.chunks(d * d) {
            let m = DMatrix::from_row_slice(d, d, blk);
            let sym = (&m + m.transpose()) * 0.5;
            worst = worst.min(sym.symmetric_eigen().eigenvalues.min());
        }
        applications += 1;
    }
    Check::finish(
        "psd-cone-closure",
        started,
        worst >= -1e-8,
        format!("{applications} applications; min eigenvalue {worst:.2e} (floor -1e-8)"),
    )
}

/// 200 random transports through orthogonal sheaves preserve the mean norm
/// and the covariance spectrum to 1e-9.
pub fn orbit_invariants_preserved() -> Check {
    let started = Instant::now();
    let mut rng = seeded_rng(0xC0_05);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let graph = random_connected_graph(&mut rng, 10);
        let d = rng.gen_range(2..=3);
        let maps = RestrictionMapSet::random(&graph, d, MapClass::Orthogonal, &mut rng);
        let ops = SheafOperators::assemble(&graph, maps).unwrap();
        let g = random_gaussian(d, &mut rng);
        // random walk of a few hops
        let mut path = vec![rng.gen_range(0..graph.node_count())];
        for _ in 0..rng.gen_range(1..5) {
            let cur = *path.last().unwrap();
            let nbrs = graph.neighbors(cur);
            path.push(nbrs[rng.gen_range(0..nbrs.len())]);
        }
        let moved = ops.transport(&path, &g).unwrap();
        worst = worst.max((moved.mean().norm() - g.mean().norm()).abs());
        let mut before: Vec<f64> = g
            .cov()
            .matrix()
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        let mut after: Vec<f64> = moved
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
        for (a, b) in before.iter().zip(&after) {
            worst = worst.max((a - b).abs());
        }
    }
    Check::finish(
        "orbit-invariants",
        started,
        worst < 1e-9,
        format!("200 transports; max norm/spectrum drift {worst:.2e} (tol 1e-9)"),
    )
}

/// With orthogonal maps and isotropic covariances, pushing every node
/// Gaussian through `W = cI` scales the transport energy by exactly `c²`.
pub fn lyapunov_quadratic_scaling() -> Check {
    let started = Instant::now();
    let mut rng = seeded_rng(0xC0_06);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let graph = random_connected_graph(&mut rng, 10);
        let d = rng.gen_range(2..=3);
        let maps = RestrictionMapSet::random(&graph, d, MapClass::Orthogonal, &mut rng);
        let ops = SheafOperators::assemble(&graph, maps).unwrap();
        let field = GaussianField::new(
            (0..graph.node_count())
                .map(|_| {
                    let mean =
                        DVector::from_iterator(d, (0..d).map(|_| rng.gen_range(-1.0..1.0)));
                    let sigma = rng.gen_range(0.2..2.0);
                    Gaussian::new(
                        mean,
                        PsdMatrix::new(DMatrix::identity(d, d) * sigma).unwrap(),
                    )
                    .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let base = ops.lyapunov_energy(&field).unwrap();
        for c in [0.5f64, 2.0, 3.0] {
            let w = DMatrix::identity(d, d) * c;
            let scaled = GaussianField::new(
                field
                    .iter()
                    .map(|g| crate::gaussian::pushforward(&w, g).unwrap())
                    .collect(),
            )
            .unwrap();
            let e = ops.lyapunov_energy(&scaled).unwrap();
            worst = worst.max(((e - c * c * base) / (c * c * base)).abs());
        }
    }
    Check::finish(
        "lyapunov-scaling",
        started,
        worst < 1e-8,
        format!("c in {{0.5, 2, 3}}; max relative drift from c^2 is {worst:.2e} (tol 1e-8)"),
    )
}

/// Finite-difference checks: every differentiable op at 1e-4, the composites
/// (factorizations, transport loss, end-to-end 4-node network) at 1e-3.
pub fn gradient_fidelity() -> Check {
    let started = Instant::now();
    match gradient_fidelity_inner() {
        Ok((worst_op, worst_composite)) => {
            let passed = worst_op < 1e-4 && worst_composite < 1e-3;
            Check::finish(
                "gradient-fidelity",
                started,
                passed,
                format!(
                    "op error {worst_op:.2e} (tol 1e-4); composite error {worst_composite:.2e} (tol 1e-3)"
                ),
            )
        }
        Err(e) => Check::finish(
            "gradient-fidelity",
            started,
            false,
            format!("failed to run: {e}"),
        ),
    }
}

fn gradient_fidelity_inner() -> Result<(f64, f64)> {
    const STEP: f64 = 1e-5;
    let mut rng = seeded_rng(0xC0_07);
    let mut worst_op = 0.0f64;
    let mut worst_composite = 0.0f64;

    let rand_vec =
        |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
    let rand_psd = |rng: &mut rand_chacha::ChaCha8Rng, d: usize| -> Vec<f64> {
        let b = DMatrix::from_iterator(d, d, (0..d * d).map(|_| rng.gen_range(-1.0..1.0f64)));
        let s = b.transpose() * &b + DMatrix::identity(d, d) * 0.3;
        (0..d * d).map(|i| s[(i / d, i % d)]).collect()
    };

    // elementwise and dense ops
    for op in ["elu", "tanh", "softplus", "exp", "mul", "scale"] {
        let vals = rand_vec(&mut rng, 8);
        let err = grad_check(
            |tape, p| {
                let y = match op {
                    "elu" => tape.elu(p[0]),
                    "tanh" => tape.tanh(p[0]),
                    "softplus" => tape.softplus(p[0]),
                    "exp" => tape.exp(p[0]),
                    "mul" => tape.mul(p[0], p[0]),
                    _ => tape.scale(p[0], 1.7),
                };
                Ok(tape.sum(tape.mul(y, y)))
            },
            &[(vec![8], vals)],
            STEP,
        )?;
        worst_op = worst_op.max(err);
    }
    let err = grad_check(
        |tape, p| {
            let y = tape.matmul(p[0], tape.transpose(p[1]));
            Ok(tape.sum(tape.mul(y, y)))
        },
        &[
            (vec![3, 4], rand_vec(&mut rng, 12)),
            (vec![5, 4], rand_vec(&mut rng, 20)),
        ],
        STEP,
    )?;
    worst_op = worst_op.max(err);
    let err = grad_check(
        |tape, p| {
            let y = tape.elu(tape.affine(p[0], p[1], p[2]));
            Ok(tape.sum(tape.mul(y, y)))
        },
        &[
            (vec![4, 3], rand_vec(&mut rng, 12)),
            (vec![2, 3], rand_vec(&mut rng, 6)),
            (vec![2], rand_vec(&mut rng, 2)),
        ],
        STEP,
    )?;
    worst_op = worst_op.max(err);
    let err = grad_check(
        |tape, p| {
            let y = tape.congruence(p[0], p[1]);
            Ok(tape.sum(tape.mul(y, y)))
        },
        &[
            (vec![3, 3], rand_vec(&mut rng, 9)),
            (vec![1, 3, 3], rand_psd(&mut rng, 3)),
        ],
        STEP,
    )?;
    worst_op = worst_op.max(err);

    // fused sheaf ops
    let graph = barabasi_albert(5, 2, 77).unwrap();
    let (d, h) = (2usize, 3usize);
    let e = graph.edge_count();
    let n = graph.node_count();
    let maps_flat = rand_vec(&mut rng, e * 2 * d * d);
    let x_flat = rand_vec(&mut rng, n * d * h);
    let s_flat: Vec<f64> = (0..n * h).flat_map(|_| rand_psd(&mut rng, d)).collect();
    let g1 = graph.clone();
    let err = grad_check(
        |tape, p| {
            let ctx = SheafCtx::from_graph(&g1, d);
            let y = tape.sheaf_mean_apply(p[0], p[1], &ctx);
            Ok(tape.sum(tape.mul(y, y)))
        },
        &[
            (vec![e, 2, d, d], maps_flat.clone()),
            (vec![n * d, h], x_flat.clone()),
        ],
        STEP,
    )?;
    worst_op = worst_op.max(err);
    let g2 = graph.clone();
    let err = grad_check(
        |tape, p| {
            let ctx = SheafCtx::from_graph(&g2, d);
            let y = tape.sheaf_cov_apply(p[0], p[1], &ctx);
            Ok(tape.sum(tape.mul(y, y)))
        },
        &[
            (vec![e, 2, d, d], maps_flat.clone()),
            (vec![n, h, d, d], s_flat),
        ],
        STEP,
    )?;
    worst_op = worst_op.max(err);
    let g3 = graph.clone();
    let err = grad_check(
        |tape, p| {
            let ctx = SheafCtx::from_graph(&g3, d);
            let rows = tape.node_pair_gather(p[0], &ctx);
            Ok(tape.sum(tape.mul(rows, rows)))
        },
        &[(vec![n * d, h], x_flat)],
        STEP,
    )?;
    worst_op = worst_op.max(err);

    // embeddings, mixing, map classes, sampling
    let (s_dim, nn) = (2usize, 3usize);
    let means = rand_vec(&mut rng, nn * s_dim);
    let covs: Vec<f64> = (0..nn).flat_map(|_| rand_psd(&mut rng, s_dim)).collect();
    let err = grad_check(
        |tape, p| {
            let mu = tape.embed_mean(p[0], &means, nn, s_dim);
            let sig = tape.embed_cov(p[0], &covs, nn, s_dim);
            let mu2 = tape.kron_apply(p[1], mu);
            let sig2 = tape.congruence(p[1], sig);
            let sig3 = tape.channel_mix_cov(sig2, tape.softplus(p[2]));
            let a = tape.sum(tape.mul(mu2, mu2));
            let b = tape.sum(tape.mul(sig3, sig3));
            Ok(tape.add(a, b))
        },
        &[
            (vec![h, d, s_dim], rand_vec(&mut rng, h * d * s_dim)),
            (vec![d, d], rand_vec(&mut rng, d * d)),
            (vec![h, h], rand_vec(&mut rng, h * h)),
        ],
        STEP,
    )?;
    worst_op = worst_op.max(err);
    let err = grad_check(
        |tape, p| {
            let q = tape.cayley(p[0], 3);
            let c = tape.constant(vec![2, 3, 3], rand_vec(&mut seeded_rng(0xC0_08), 18));
            Ok(tape.sum(tape.mul(q, c)))
        },
        &[(vec![2, 3], rand_vec(&mut rng, 6))],
        STEP,
    )?;
    worst_op = worst_op.max(err);
    let err = grad_check(
        |tape, p| {
            let m = tape.diag_embed(p[0]);
            Ok(tape.sum(tape.mul(m, m)))
        },
        &[(vec![2, 3], rand_vec(&mut rng, 6))],
        STEP,
    )?;
    worst_op = worst_op.max(err);
    let err = grad_check(
        |tape, p| {
            let m = tape.general_maps(p[0], 2, 1e-3);
            Ok(tape.sum(tape.mul(m, m)))
        },
        &[(vec![2, 4], rand_vec(&mut rng, 8))],
        STEP,
    )?;
    worst_op = worst_op.max(err);
    let z = rand_vec(&mut rng, 2 * 3 * 2);
    let err = grad_check(
        |tape, p| {
            let std = tape.exp(p[1]);
            let x = tape.reparam_diag(p[0], std, &z, 3);
            Ok(tape.sum(tape.mul(x, x)))
        },
        &[
            (vec![2, 2], rand_vec(&mut rng, 4)),
            (vec![2, 2], rand_vec(&mut rng, 4)),
        ],
        STEP,
    )?;
    worst_op = worst_op.max(err);
    let err = grad_check(
        |tape, p| {
            let scaled = tape.row_scale(p[0], tape.add_scalar(p[1], 1.0));
            Ok(tape.sum(tape.mul(scaled, scaled)))
        },
        &[
            (vec![3, 2], rand_vec(&mut rng, 6)),
            (vec![3], rand_vec(&mut rng, 3)),
        ],
        STEP,
    )?;
    worst_op = worst_op.max(err);

    // composites at the looser tolerance: eigen/Cholesky factorizations, the
    // degree-normalization chain, the transport loss, and the full network
    let err = grad_check(
        |tape, p| {
            let r = tape.eigen_sqrt(p[0]);
            Ok(tape.sum(tape.mul(r, r)))
        },
        &[(vec![1, 3, 3], rand_psd(&mut rng, 3))],
        STEP,
    )?;
    worst_composite = worst_composite.max(err);
    let err = grad_check(
        |tape, p| {
            let sig = tape.congruence(p[0], p[1]);
            let l = tape.cholesky_jitter(sig)?;
            Ok(tape.sum(tape.mul(l, l)))
        },
        &[
            (vec![3, 3], rand_vec(&mut rng, 9)),
            (vec![1, 3, 3], rand_psd(&mut rng, 3)),
        ],
        STEP,
    )?;
    worst_composite = worst_composite.max(err);
    let z2 = rand_vec(&mut rng, 2 * 3 * 2);
    let err = grad_check(
        |tape, p| {
            let root = tape.eigen_sqrt(p[1]);
            let x = tape.reparam(p[0], root, &z2, 3);
            Ok(tape.sum(tape.mul(x, x)))
        },
        &[
            (vec![2, 2], rand_vec(&mut rng, 4)),
            (
                vec![2, 2, 2],
                (0..2).flat_map(|_| rand_psd(&mut rng, 2)).collect(),
            ),
        ],
        STEP,
    )?;
    worst_composite = worst_composite.max(err);
    let g4 = graph.clone();
    let mut near_orth = vec![0.0; e * 2 * d * d];
    for b in 0..e * 2 {
        let q = crate::sheaf::random_orthogonal(d, &mut rng);
        for i in 0..d {
            for j in 0..d {
                near_orth[b * d * d + i * d + j] = q[(i, j)] + rng.gen_range(-0.05..0.05);
            }
        }
    }
    let err = grad_check(
        |tape, p| {
            let ctx = SheafCtx::from_graph(&g4, d);
            let dis = tape.deg_inv_sqrt(p[0], &ctx);
            let nmaps = tape.normalize_maps(p[0], dis, &ctx);
            let y = tape.sheaf_mean_apply(nmaps, p[1], &ctx);
            Ok(tape.sum(tape.mul(y, y)))
        },
        &[
            (vec![e, 2, d, d], near_orth),
            (vec![n * d, h], rand_vec(&mut rng, n * d * h)),
        ],
        STEP,
    )?;
    worst_composite = worst_composite.max(err);
    let xs = rand_vec(&mut rng, 10);
    let ys = rand_vec(&mut rng, 8);
    let err = grad_check(
        |tape, p| {
            let yt = tape.constant(vec![4, 2], ys.clone());
            tape.sinkhorn_w2(p[0], yt, Some(0.3), 50)
        },
        &[(vec![5, 2], xs)],
        STEP,
    )?;
    worst_composite = worst_composite.max(err);

    // end-to-end 4-node network loss
    let ds = synthesize(Generator::Ba { n: 4, m: 2 }, 2, 6, 5.0, 15).unwrap();
    let config = GsnnConfig {
        hidden: 2,
        layers: 2,
        samples: 4,
        psi_hidden: 4,
        readout_hidden: 4,
        sinkhorn_eps: Some(0.5),
        sinkhorn_iters: 25,
        seed: 13,
        ..GsnnConfig::default()
    };
    let model = Model::build(ModelKind::GsnnGen, &config, &ds).unwrap();
    let Model::Gsnn(gsnn) = &model else { unreachable!() };
    let z3 = crate::model::draw_noise(4, config.samples, config.stalk_dim, &mut seeded_rng(7));
    let targets: Vec<(Vec<f64>, usize)> = ds.targets.iter().map(|t| (t.flat(), t.len())).collect();
    let shapes: Vec<(Vec<usize>, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.shape.clone(), p.values.clone()))
        .collect();
    let err = grad_check(
        |tape, handles| {
            let (samples, _) = gsnn.forward_with_handles(tape, handles, &z3)?;
            let mut losses = Vec::new();
            for v in 0..4usize {
                let node = tape.slice_batch(samples, v);
                let (target, t_len) = &targets[v];
                let target_t = tape.constant(vec![*t_len, 2], target.clone());
                losses.push(tape.sinkhorn_w2(node, target_t, Some(0.5), 25)?);
            }
            Ok(tape.mean_of(&losses))
        },
        &shapes,
        STEP,
    )?;
    worst_composite = worst_composite.max(err);

    Ok((worst_op, worst_composite))
}

/// Entropic transport on 2000-point samples against the closed form, over 10
/// Gaussian pairs with known distance in [1, 5]: all within 10%.
pub fn sinkhorn_matches_bures() -> Check {
    let started = Instant::now();
    let mut rng = seeded_rng(0xC0_09);
    let mut worst_rel = 0.0f64;
    for pair in 0..10 {
        // small covariances keep the Bures part below 1, then the mean gap
        // places the full distance inside [1, 5]
        let draw_cov = |rng: &mut rand_chacha::ChaCha8Rng| {
            let b = DMatrix::from_iterator(
                2,
                2,
                (0..4).map(|_| rng.gen_range(-0.4..0.4f64)),
            );
            PsdMatrix::new(b.transpose() * &b + DMatrix::identity(2, 2) * 0.05).unwrap()
        };
        let c1 = draw_cov(&mut rng);
        let c2 = draw_cov(&mut rng);
        let base_p = Gaussian::new(DVector::zeros(2), c1).unwrap();
        let base_q = Gaussian::new(DVector::zeros(2), c2).unwrap();
        let bures_only = bures_w2(&base_p, &base_q).unwrap();
        let target = 1.0 + 4.0 * (pair as f64) / 9.0;
        let gap = (target * target - bures_only * bures_only).max(0.0).sqrt();
        let dir = rng.gen_range(0.0..std::f64::consts::TAU);
        let mean_q = DVector::from_vec(vec![gap * dir.cos(), gap * dir.sin()]);
        let p = base_p;
        let q = Gaussian::new(mean_q, base_q.cov().clone()).unwrap();
        let w2 = bures_w2(&p, &q).unwrap();
        assert!((1.0..=5.0 + 1e-9).contains(&w2), "pair {pair}: W2 = {w2}");

        let xs = sample(&p, 2000, &mut rng).unwrap();
        let ys = sample(&q, 2000, &mut rng).unwrap();
        let est = sinkhorn::sinkhorn_cost(
            &xs.flat(),
            &ys.flat(),
            2000,
            2000,
            2,
            Some(0.05),
            200,
        )
        .unwrap();
        let rel = (est - w2 * w2).abs() / (w2 * w2);
        worst_rel = worst_rel.max(rel);
    }
    Check::finish(
        "sinkhorn-vs-bures",
        started,
        worst_rel < 0.10,
        format!("10 pairs at 2000 samples; worst relative gap {worst_rel:.3} (tol 0.10)"),
    )
}

// -- long experiment flows (shared by CLI subcommands and slow acceptance) ----

/// One trained run's summary.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub model: ModelKind,
    pub seed: u64,
    pub mean_w2: f64,
    pub sd_w2: f64,
    pub epochs_run: usize,
    pub wall_seconds: f64,
}

/// Trains `kinds x seeds` on one dataset and evaluates the test split.
/// Runs execute in the rayon pool; records come back in deterministic
/// `(model, seed)` order regardless of scheduling.
pub fn model_sweep(
    ds: &Dataset,
    base: &GsnnConfig,
    kinds: &[ModelKind],
    n_seeds: usize,
    base_seed: u64,
) -> Result<Vec<RunRecord>> {
    let mut jobs = Vec::new();
    for &kind in kinds {
        for run in 0..n_seeds {
            jobs.push((kind, base_seed + run as u64));
        }
    }
    jobs.par_iter()
        .map(|&(kind, seed)| {
            let started = Instant::now();
            let mut config = base.clone();
            config.seed = seed;
            let mut model = Model::build(kind, &config, ds)?;
            let report = train(&mut model, ds, &config)?;
            let eval = evaluate(&model, ds, SplitKind::Test, &config, seed)?;
            Ok(RunRecord {
                model: kind,
                seed,
                mean_w2: eval.mean,
                sd_w2: eval.sd,
                epochs_run: report.epochs_run,
                wall_seconds: started.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Per-model aggregate of a sweep: mean and standard deviation over seeds.
#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub model: ModelKind,
    pub mean: f64,
    pub sd: f64,
}

pub fn summarize(records: &[RunRecord]) -> Vec<SweepSummary> {
    let mut kinds: Vec<ModelKind> = Vec::new();
    for r in records {
        if !kinds.contains(&r.model) {
            kinds.push(r.model);
        }
    }
    kinds
        .into_iter()
        .map(|kind| {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.model == kind)
                .map(|r| r.mean_w2)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (vals.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            SweepSummary { model: kind, mean, sd }
        })
        .collect()
}

/// One depth's outcome in the oversmoothing study.
#[derive(Debug, Clone)]
pub struct DepthRecord {
    pub model: ModelKind,
    pub depth: usize,
    pub mean_w2: f64,
    /// Dirichlet energy diagnostic (graph Laplacian for the GCN, learned
    /// mean-sheaf Laplacian for the sheaf kinds), averaged over seeds.
    pub energy: Option<f64>,
}

/// Trains each model at each depth (averaged over `n_seeds`) and reports the
/// test distance plus the post-training smoothness energy.
pub fn energy_sweep(
    ds: &Dataset,
    base: &GsnnConfig,
    kinds: &[ModelKind],
    depths: &[usize],
    n_seeds: usize,
    base_seed: u64,
) -> Result<Vec<DepthRecord>> {
    let mut jobs = Vec::new();
    for &kind in kinds {
        for &depth in depths {
            for run in 0..n_seeds {
                jobs.push((kind, depth, base_seed + run as u64));
            }
        }
    }
    let raw: Vec<(ModelKind, usize, f64, Option<f64>)> = jobs
        .par_iter()
        .map(|&(kind, depth, seed)| {
            let mut config = base.clone();
            config.layers = depth;
            config.seed = seed;
            let mut model = Model::build(kind, &config, ds)?;
            train(&mut model, ds, &config)?;
            let eval = evaluate(&model, ds, SplitKind::Test, &config, seed)?;
            let energy = model.smoothness_energy(ds, seed)?;
            Ok((kind, depth, eval.mean, energy))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for &kind in kinds {
        for &depth in depths {
            let rows: Vec<&(ModelKind, usize, f64, Option<f64>)> = raw
                .iter()
                .filter(|(k, l, _, _)| *k == kind && *l == depth)
                .collect();
            let mean_w2 = rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64;
            let energies: Vec<f64> = rows.iter().filter_map(|r| r.3).collect();
            let energy = if energies.is_empty() {
                None
            } else {
                Some(energies.iter().sum::<f64>() / energies.len() as f64)
            };
            out.push(DepthRecord {
                model: kind,
                depth,
                mean_w2,
                energy,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_pass() {
        for check in [
            constant_sheaf_reduction(),
            orbit_invariants_preserved(),
            lyapunov_quadratic_scaling(),
        ] {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }
}
