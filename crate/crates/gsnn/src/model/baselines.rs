//! Sample-based baselines: all consume draws from the node distributions (or
//! their stacked parameters) and emit per-node sample sets trained with the
//! same transport loss as the sheaf network.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{DecayGroup, Param, ParamSet, SheafCtx, Tape, Tensor};
use crate::data::Dataset;
use crate::sheaf::MapClass;
use crate::Result;

use super::{draw_input_samples, draw_noise, xavier, Forwarded, GsnnConfig, ModelKind, Trace};

fn find_handle(params: &ParamSet, handles: &[Tensor], name: &str) -> Tensor {
    let idx = params
        .iter()
        .position(|p| p.name == name)
        .unwrap_or_else(|| panic!("missing parameter {name}"));
    handles[idx]
}

/// Normalized adjacency with self-loops, dense row-major `(n, n)`.
fn gcn_adjacency(ds: &Dataset) -> Rc<Vec<f64>> {
    let n = ds.node_count();
    let mut a = vec![0.0; n * n];
    for v in 0..n {
        a[v * n + v] = 1.0;
    }
    for &(u, v) in ds.graph.edges() {
        a[u * n + v] = 1.0;
        a[v * n + u] = 1.0;
    }
    let deg: Vec<f64> = (0..n)
        .map(|v| (ds.graph.degree(v) as f64 + 1.0).sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] /= deg[i] * deg[j];
        }
    }
    Rc::new(a)
}

/// Per-sample multilayer perceptron on input draws.
pub struct MlpModel {
    pub(crate) config: GsnnConfig,
    pub(crate) params: ParamSet,
    /// `(n * T, s)` input draws, fixed per run.
    inputs: Vec<f64>,
    n: usize,
    s_dim: usize,
}

impl MlpModel {
    pub fn build(config: &GsnnConfig, ds: &Dataset) -> Result<MlpModel> {
        let mut rng = crate::seeded_rng(config.seed ^ 0x6A5A_11C3_9D2E_0002);
        let s = ds.input_dim();
        let h = config.hidden;
        let layers = config.layers.max(1);
        let mut params = ParamSet::new();
        for l in 0..layers {
            let fan_in = if l == 0 { s } else { h };
            params.push(Param::new(
                &format!("w{l}"),
                vec![h, fan_in],
                xavier(&mut rng, fan_in, h, h * fan_in),
                DecayGroup::Weight,
            ));
            params.push(Param::new(&format!("b{l}"), vec![h], vec![0.0; h], DecayGroup::None));
        }
        params.push(Param::new(
            "w_out",
            vec![config.out_dim, h],
            xavier(&mut rng, h, config.out_dim, config.out_dim * h),
            DecayGroup::Weight,
        ));
        params.push(Param::new(
            "b_out",
            vec![config.out_dim],
            vec![0.0; config.out_dim],
            DecayGroup::None,
        ));
        Ok(MlpModel {
            config: config.clone(),
            params,
            inputs: draw_input_samples(ds, config.samples, config.seed)?,
            n: ds.node_count(),
            s_dim: s,
        })
    }

    pub fn forward(&self, tape: &Tape, _rng: &mut ChaCha8Rng, with_grad: bool) -> Result<Forwarded> {
        let cfg = &self.config;
        let t = cfg.samples;
        let handles: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.shape.clone(), p.values.clone(), with_grad))
            .collect();
        let mut x = tape.constant(vec![self.n * t, self.s_dim], self.inputs.clone());
        for l in 0..cfg.layers.max(1) {
            x = tape.elu(tape.affine(
                x,
                find_handle(&self.params, &handles, &format!("w{l}")),
                find_handle(&self.params, &handles, &format!("b{l}")),
            ));
        }
        let out = tape.affine(
            x,
            find_handle(&self.params, &handles, "w_out"),
            find_handle(&self.params, &handles, "b_out"),
        );
        let samples = tape.reshape(out, vec![self.n, t, cfg.out_dim]);
        Ok(Forwarded {
            samples,
            handles,
            trace: Trace::default(),
        })
    }
}

/// Graph convolution on input draws: each sample flows through shared
/// `ReLU(Â X W)` layers, the standard convolution recipe.
pub struct GcnModel {
    pub(crate) config: GsnnConfig,
    pub(crate) params: ParamSet,
    inputs: Vec<f64>,
    adjacency: Rc<Vec<f64>>,
    n: usize,
    s_dim: usize,
}

impl GcnModel {
    pub fn build(config: &GsnnConfig, ds: &Dataset) -> Result<GcnModel> {
        let mut rng = crate::seeded_rng(config.seed ^ 0x6A5A_11C3_9D2E_0003);
        let s = ds.input_dim();
        let h = config.hidden;
        let layers = config.layers.max(1);
        let mut params = ParamSet::new();
        for l in 0..layers {
            let fan_in = if l == 0 { s } else { h };
            params.push(Param::new(
                &format!("w{l}"),
                vec![h, fan_in],
                xavier(&mut rng, fan_in, h, h * fan_in),
                DecayGroup::Weight,
            ));
            params.push(Param::new(&format!("b{l}"), vec![h], vec![0.0; h], DecayGroup::None));
        }
        params.push(Param::new(
            "w_out",
            vec![config.out_dim, h],
            xavier(&mut rng, h, config.out_dim, config.out_dim * h),
            DecayGroup::Weight,
        ));
        params.push(Param::new(
            "b_out",
            vec![config.out_dim],
            vec![0.0; config.out_dim],
            DecayGroup::None,
        ));
        Ok(GcnModel {
            config: config.clone(),
            params,
            inputs: draw_input_samples(ds, config.samples, config.seed)?,
            adjacency: gcn_adjacency(ds),
            n: ds.node_count(),
            s_dim: s,
        })
    }

    pub fn forward(&self, tape: &Tape, _rng: &mut ChaCha8Rng, with_grad: bool) -> Result<Forwarded> {
        let (samples, handles, _) = self.forward_inner(tape, with_grad)?;
        Ok(Forwarded {
            samples,
            handles,
            trace: Trace::default(),
        })
    }

    fn forward_inner(&self, tape: &Tape, with_grad: bool) -> Result<(Tensor, Vec<Tensor>, Tensor)> {
        let cfg = &self.config;
        let t = cfg.samples;
        let n = self.n;
        let handles: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.shape.clone(), p.values.clone(), with_grad))
            .collect();
        let adj = tape.constant(vec![n, n], self.adjacency.as_ref().clone());
        // the flat layouts (n, T*f) and (n*T, f) coincide row-major, so the
        // node-mixing matmul and the per-sample affine alternate for free
        let mut x = tape.constant(vec![n, t * self.s_dim], self.inputs.clone());
        let mut feat_width = self.s_dim;
        for l in 0..cfg.layers.max(1) {
            let mixed = tape.matmul(adj, x);
            let per_sample = tape.reshape(mixed, vec![n * t, feat_width]);
            let out = tape.relu(tape.affine(
                per_sample,
                find_handle(&self.params, &handles, &format!("w{l}")),
                find_handle(&self.params, &handles, &format!("b{l}")),
            ));
            feat_width = cfg.hidden;
            x = tape.reshape(out, vec![n, t * feat_width]);
        }
        let conv_features = x;
        let per_sample = tape.reshape(x, vec![n * t, feat_width]);
        let out = tape.affine(
            per_sample,
            find_handle(&self.params, &handles, "w_out"),
            find_handle(&self.params, &handles, "b_out"),
        );
        let samples = tape.reshape(out, vec![n, t, cfg.out_dim]);
        Ok((samples, handles, conv_features))
    }

    /// Smoothness of the final convolution features (sample-averaged):
    /// Dirichlet energy under the model's own propagation Laplacian `I − Â`,
    /// normalized by the feature norm so that scale cannot mask collapse.
    pub fn feature_dirichlet_energy(&self, _ds: &Dataset, _seed: u64) -> Result<f64> {
        let tape = Tape::new();
        let (_, _, feats) = self.forward_inner(&tape, false)?;
        let flat = tape.value(feats);
        let t = self.config.samples;
        let f = self.config.hidden;
        let n = self.n;
        // average over the sample axis
        let mut mean_feats = vec![0.0; n * f];
        for v in 0..n {
            for smp in 0..t {
                for k in 0..f {
                    mean_feats[v * f + k] += flat[v * t * f + smp * f + k] / t as f64;
                }
            }
        }
        let a = self.adjacency.as_ref();
        let mut quad = 0.0;
        let mut norm = 0.0;
        for k in 0..f {
            let col: Vec<f64> = (0..n).map(|v| mean_feats[v * f + k]).collect();
            // x^T (I - Â) x
            let mut ax = vec![0.0; n];
            for i in 0..n {
                let row = &a[i * n..(i + 1) * n];
                ax[i] = row.iter().zip(&col).map(|(w, x)| w * x).sum();
            }
            quad += col
                .iter()
                .zip(&ax)
                .map(|(x, ax)| x * (x - ax))
                .sum::<f64>();
            norm += col.iter().map(|x| x * x).sum::<f64>();
        }
        Ok(quad / norm.max(1e-300))
    }
}

/// Graph convolution over stacked Gaussian parameters `μ ‖ vech(Σ)` with a
/// Gaussian output head: predicted mean plus exponentiated diagonal variances.
pub struct GaussianGcnModel {
    pub(crate) config: GsnnConfig,
    pub(crate) params: ParamSet,
    inputs: Vec<f64>,
    adjacency: Rc<Vec<f64>>,
    n: usize,
    in_width: usize,
}

/// Width of `μ ‖ vech(Σ)` for input dimension `s`.
pub fn gaussian_input_width(s: usize) -> usize {
    s + s * (s + 1) / 2
}

impl GaussianGcnModel {
    pub fn build(config: &GsnnConfig, ds: &Dataset) -> Result<GaussianGcnModel> {
        let mut rng = crate::seeded_rng(config.seed ^ 0x6A5A_11C3_9D2E_0004);
        let s = ds.input_dim();
        let n = ds.node_count();
        let h = config.hidden;
        let in_width = gaussian_input_width(s);
        let out = config.out_dim;
        let cov_raw = out * (out + 1) / 2;

        let mut inputs = Vec::with_capacity(n * in_width);
        for g in ds.inputs.iter() {
            inputs.extend(g.mean().iter());
            // vech: lower triangle stacked by columns
            for j in 0..s {
                for i in j..s {
                    inputs.push(g.cov().matrix()[(i, j)]);
                }
            }
        }

        let mut params = ParamSet::new();
        let layers = config.layers.max(1);
        for l in 0..layers {
            let fan_in = if l == 0 { in_width } else { h };
            params.push(Param::new(
                &format!("w{l}"),
                vec![h, fan_in],
                xavier(&mut rng, fan_in, h, h * fan_in),
                DecayGroup::Weight,
            ));
            params.push(Param::new(&format!("b{l}"), vec![h], vec![0.0; h], DecayGroup::None));
        }
        params.push(Param::new(
            "w_head",
            vec![out + cov_raw, h],
            xavier(&mut rng, h, out + cov_raw, (out + cov_raw) * h),
            DecayGroup::Weight,
        ));
        params.push(Param::new(
            "b_head",
            vec![out + cov_raw],
            vec![0.0; out + cov_raw],
            DecayGroup::None,
        ));
        params.push(Param::new(
            "w_var",
            vec![out, cov_raw],
            xavier(&mut rng, cov_raw, out, out * cov_raw),
            DecayGroup::Weight,
        ));
        params.push(Param::new(
            "b_var",
            vec![out],
            vec![0.0; out],
            DecayGroup::None,
        ));
        Ok(GaussianGcnModel {
            config: config.clone(),
            params,
            inputs,
            adjacency: gcn_adjacency(ds),
            n,
            in_width,
        })
    }

    pub fn forward(&self, tape: &Tape, rng: &mut ChaCha8Rng, with_grad: bool) -> Result<Forwarded> {
        let cfg = &self.config;
        let n = self.n;
        let out = cfg.out_dim;
        let cov_raw = out * (out + 1) / 2;
        let handles: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.shape.clone(), p.values.clone(), with_grad))
            .collect();
        let adj = tape.constant(vec![n, n], self.adjacency.as_ref().clone());
        let mut x = tape.constant(vec![n, self.in_width], self.inputs.clone());
        for l in 0..cfg.layers.max(1) {
            let mixed = tape.matmul(adj, x);
            x = tape.elu(tape.affine(
                mixed,
                find_handle(&self.params, &handles, &format!("w{l}")),
                find_handle(&self.params, &handles, &format!("b{l}")),
            ));
        }
        let head = tape.affine(
            x,
            find_handle(&self.params, &handles, "w_head"),
            find_handle(&self.params, &handles, "b_head"),
        );
        let mean = tape.slice_cols(head, 0, out);
        let raw = tape.slice_cols(head, out, out + cov_raw);
        // raw covariance numbers -> linear map -> exponentiated diagonal
        let logvar = tape.affine(
            raw,
            find_handle(&self.params, &handles, "w_var"),
            find_handle(&self.params, &handles, "b_var"),
        );
        let std = tape.exp(tape.scale(logvar, 0.5));
        let z = draw_noise(n, cfg.samples, out, rng);
        let draws = tape.reparam_diag(mean, std, &z, cfg.samples);
        Ok(Forwarded {
            samples: draws,
            handles,
            trace: Trace {
                gaussian_std: Some(tape.value(std)),
                ..Trace::default()
            },
        })
    }
}

/// Thin wrapper marking the residual-update baseline's configuration; the
/// learnable residual vector itself lives in the parameter set, clamped to
/// `[-1, 1]` after every step.
#[derive(Debug, Clone)]
pub struct NsdConfig {
    pub base: GsnnConfig,
}

/// Iterative sheaf-diffusion baseline on flattened sample features:
/// `X ← (1 + ε) ∘ X − σ(Δ (I ⊗ W₁) X W₂)` with per-layer learned maps.
pub struct NsdModel {
    pub(crate) config: GsnnConfig,
    pub(crate) params: ParamSet,
    ctx: Rc<SheafCtx>,
    inputs: Vec<f64>,
    n: usize,
    in_width: usize,
}

impl NsdModel {
    pub fn build(config: &NsdConfig, ds: &Dataset) -> Result<NsdModel> {
        let cfg = &config.base;
        let mut rng = crate::seeded_rng(cfg.seed ^ 0x6A5A_11C3_9D2E_0005);
        let n = ds.node_count();
        let d = cfg.stalk_dim;
        let h = cfg.hidden;
        let t = cfg.samples;
        let s = ds.input_dim();
        let in_width = t * s;
        let layers = cfg.layers.max(1);
        let k = match cfg.map_class {
            MapClass::Diagonal => d,
            MapClass::Orthogonal => d * (d - 1) / 2,
            MapClass::General => d * d,
        };

        let mut params = ParamSet::new();
        params.push(Param::new(
            "w_in",
            vec![d * h, in_width],
            xavier(&mut rng, in_width, d * h, d * h * in_width),
            DecayGroup::Weight,
        ));
        params.push(Param::new(
            "b_in",
            vec![d * h],
            vec![0.0; d * h],
            DecayGroup::None,
        ));
        params.push(Param::new(
            "eps",
            vec![n * d],
            vec![0.0; n * d],
            DecayGroup::None,
        ));
        for l in 0..layers {
            if k > 0 {
                params.push(Param::new(
                    &format!("phi_w1_{l}"),
                    vec![cfg.psi_hidden, 2 * d],
                    xavier(&mut rng, 2 * d, cfg.psi_hidden, cfg.psi_hidden * 2 * d),
                    DecayGroup::Sheaf,
                ));
                params.push(Param::new(
                    &format!("phi_b1_{l}"),
                    vec![cfg.psi_hidden],
                    vec![0.0; cfg.psi_hidden],
                    DecayGroup::None,
                ));
                params.push(Param::new(
                    &format!("phi_w2_{l}"),
                    vec![k, cfg.psi_hidden],
                    xavier(&mut rng, cfg.psi_hidden, k, k * cfg.psi_hidden),
                    DecayGroup::Sheaf,
                ));
                params.push(Param::new(
                    &format!("phi_b2_{l}"),
                    vec![k],
                    vec![0.0; k],
                    DecayGroup::None,
                ));
            }
            params.push(Param::new(
                &format!("w1_{l}"),
                vec![d, d],
                xavier(&mut rng, d, d, d * d),
                DecayGroup::Weight,
            ));
            params.push(Param::new(
                &format!("w2_{l}"),
                vec![h, h],
                xavier(&mut rng, h, h, h * h),
                DecayGroup::Weight,
            ));
        }
        params.push(Param::new(
            "ro_w1",
            vec![cfg.readout_hidden, d * h],
            xavier(&mut rng, d * h, cfg.readout_hidden, cfg.readout_hidden * d * h),
            DecayGroup::Weight,
        ));
        params.push(Param::new(
            "ro_b1",
            vec![cfg.readout_hidden],
            vec![0.0; cfg.readout_hidden],
            DecayGroup::None,
        ));
        params.push(Param::new(
            "ro_w2",
            vec![t * cfg.out_dim, cfg.readout_hidden],
            xavier(
                &mut rng,
                cfg.readout_hidden,
                t * cfg.out_dim,
                t * cfg.out_dim * cfg.readout_hidden,
            ),
            DecayGroup::Weight,
        ));
        params.push(Param::new(
            "ro_b2",
            vec![t * cfg.out_dim],
            vec![0.0; t * cfg.out_dim],
            DecayGroup::None,
        ));

        Ok(NsdModel {
            config: cfg.clone(),
            params,
            ctx: SheafCtx::from_graph(&ds.graph, d),
            inputs: draw_input_samples(ds, t, cfg.seed)?,
            n,
            in_width,
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self.config.map_class {
            MapClass::Diagonal => ModelKind::NsdDiag,
            MapClass::Orthogonal => ModelKind::NsdOrth,
            MapClass::General => ModelKind::NsdGen,
        }
    }

    /// Keeps the residual vector inside `[-1, 1]`.
    pub fn clamp_residual(&mut self) {
        for i in 0..self.params.len() {
            let p = self.params.get_mut(i);
            if p.name == "eps" {
                for v in &mut p.values {
                    *v = v.clamp(-1.0, 1.0);
                }
            }
        }
    }

    pub fn forward(&self, tape: &Tape, _rng: &mut ChaCha8Rng, with_grad: bool) -> Result<Forwarded> {
        let cfg = &self.config;
        let (n, d, h, t) = (self.n, cfg.stalk_dim, cfg.hidden, cfg.samples);
        let handles: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.shape.clone(), p.values.clone(), with_grad))
            .collect();
        let get = |name: &str| find_handle(&self.params, &handles, name);

        let raw_in = tape.constant(vec![n, self.in_width], self.inputs.clone());
        let embedded = tape.affine(raw_in, get("w_in"), get("b_in"));
        let mut x = tape.reshape(embedded, vec![n * d, h]);
        let one_plus_eps = tape.add_scalar(get("eps"), 1.0);
        for l in 0..cfg.layers.max(1) {
            let maps = self.layer_maps(tape, &handles, l, x);
            let dis = tape.deg_inv_sqrt(maps, &self.ctx);
            let nmaps = tape.normalize_maps(maps, dis, &self.ctx);
            let inner = tape.matmul(
                tape.kron_apply(get(&format!("w1_{l}")), x),
                get(&format!("w2_{l}")),
            );
            let lap = tape.sheaf_mean_apply(nmaps, inner, &self.ctx);
            let act = tape.elu(lap);
            x = tape.sub(tape.row_scale(x, one_plus_eps), act);
        }
        let per_node = tape.reshape(x, vec![n, d * h]);
        let hidden = tape.elu(tape.affine(per_node, get("ro_w1"), get("ro_b1")));
        let out = tape.affine(hidden, get("ro_w2"), get("ro_b2"));
        let samples = tape.reshape(out, vec![n, t, cfg.out_dim]);
        Ok(Forwarded {
            samples,
            handles,
            trace: Trace::default(),
        })
    }

    fn layer_maps(&self, tape: &Tape, handles: &[Tensor], layer: usize, x: Tensor) -> Tensor {
        let d = self.config.stalk_dim;
        let e = self.ctx.edges.len();
        if self.config.map_class == MapClass::Orthogonal && d == 1 {
            let mut flat = vec![0.0; e * 2];
            for slot in flat.iter_mut() {
                *slot = 1.0;
            }
            return tape.constant(vec![e, 2, 1, 1], flat);
        }
        let pair = tape.node_pair_gather(x, &self.ctx);
        let hidden = tape.elu(tape.affine(
            pair,
            find_handle(&self.params, handles, &format!("phi_w1_{layer}")),
            find_handle(&self.params, handles, &format!("phi_b1_{layer}")),
        ));
        let raw = tape.tanh(tape.affine(
            hidden,
            find_handle(&self.params, handles, &format!("phi_w2_{layer}")),
            find_handle(&self.params, handles, &format!("phi_b2_{layer}")),
        ));
        let blocks = match self.config.map_class {
            MapClass::Diagonal => tape.diag_embed(raw),
            MapClass::Orthogonal => tape.cayley(raw, d),
            MapClass::General => tape.general_maps(raw, d, super::gsnn::GENERAL_MAP_RIDGE),
        };
        tape.reshape(blocks, vec![e, 2, d, d])
    }
}

impl std::ops::Deref for NsdConfig {
    type Target = GsnnConfig;
    fn deref(&self) -> &GsnnConfig {
        &self.base
    }
}
