//! The sheaf-diffusion regressor.
//!
//! Forward pass: embed each input Gaussian into `h` copies of a `d`-dim
//! stalk Gaussian, mix stalks and channels (nonnegative mixing on the
//! covariance side so blocks stay PSD), diffuse with the `ℓ`-th power of the
//! normalized Laplacians — `(I − Δ)` on means, `(I + Δ)` on covariances —
//! average channels, draw reparameterized samples, and push each sample
//! through the readout network. Restriction maps are produced once per pass
//! from the raw input field and frozen across the power iteration.

use std::rc::Rc;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{DecayGroup, Param, ParamSet, SheafCtx, Tape, Tensor};
use crate::data::Dataset;
use crate::sheaf::{MapClass, RestrictionMapSet, SheafOperators};
use crate::{Error, Result};

use super::{draw_noise, xavier, Forwarded, GsnnConfig, ModelKind, Trace};

/// Additive ridge nudging general-class maps toward invertibility.
pub const GENERAL_MAP_RIDGE: f64 = 1e-3;

pub struct GsnnModel {
    pub(crate) config: GsnnConfig,
    pub(crate) params: ParamSet,
    /// Uses identity maps (plain normalized graph Laplacian blocks).
    graph_laplacian: bool,
    ctx: Rc<SheafCtx>,
    /// Raw input means, flat `(n, s)`.
    means: Vec<f64>,
    /// Raw input covariances, flat `(n, s, s)`.
    covs: Vec<f64>,
    /// Map-learner inputs per incidence, `(2E, 2s + 2)`:
    /// `[μ_v ‖ μ_u ‖ det Σ_v ‖ det Σ_u]` for each directed incidence.
    psi_inputs: Vec<f64>,
    n: usize,
    s_dim: usize,
}

impl GsnnModel {
    pub fn build(config: &GsnnConfig, ds: &Dataset, graph_laplacian: bool) -> Result<GsnnModel> {
        let n = ds.node_count();
        let s = ds.input_dim();
        let d = config.stalk_dim;
        let h = config.hidden;
        let mut rng = crate::seeded_rng(config.seed ^ 0x6A5A_11C3_9D2E_0001);

        let mut params = ParamSet::new();
        params.push(Param::new(
            "w_o",
            vec![h, d, s],
            xavier(&mut rng, s, d, h * d * s),
            DecayGroup::Weight,
        ));
        params.push(Param::new(
            "w_1",
            vec![d, d],
            xavier(&mut rng, d, d, d * d),
            DecayGroup::Weight,
        ));
        params.push(Param::new(
            "w_2_mean",
            vec![h, h],
            xavier(&mut rng, h, h, h * h),
            DecayGroup::Weight,
        ));
        // Raw values for the nonnegative covariance mixer; softplus at use.
        // Started near 1/h so the initial mixing is close to an average.
        let base = super::softplus_inverse(1.0 / h as f64);
        let w2_cov: Vec<f64> = (0..h * h)
            .map(|_| base + 0.01 * xavier(&mut rng, h, h, 1)[0])
            .collect();
        params.push(Param::new(
            "w_2_cov",
            vec![h, h],
            w2_cov,
            DecayGroup::Weight,
        ));
        if !graph_laplacian {
            let k = map_param_count(config.map_class, d);
            if k > 0 {
                let inp = 2 * s + 2;
                params.push(Param::new(
                    "psi_w1",
                    vec![config.psi_hidden, inp],
                    xavier(&mut rng, inp, config.psi_hidden, config.psi_hidden * inp),
                    DecayGroup::Sheaf,
                ));
                params.push(Param::new(
                    "psi_b1",
                    vec![config.psi_hidden],
                    vec![0.0; config.psi_hidden],
                    DecayGroup::None,
                ));
                params.push(Param::new(
                    "psi_w2",
                    vec![k, config.psi_hidden],
                    xavier(&mut rng, config.psi_hidden, k, k * config.psi_hidden),
                    DecayGroup::Sheaf,
                ));
                params.push(Param::new(
                    "psi_b2",
                    vec![k],
                    vec![0.0; k],
                    DecayGroup::None,
                ));
            }
        }
        params.push(Param::new(
            "ro_w1",
            vec![config.readout_hidden, d],
            xavier(&mut rng, d, config.readout_hidden, config.readout_hidden * d),
            DecayGroup::Weight,
        ));
        params.push(Param::new(
            "ro_b1",
            vec![config.readout_hidden],
            vec![0.0; config.readout_hidden],
            DecayGroup::None,
        ));
        params.push(Param::new(
            "ro_w2",
            vec![config.out_dim, config.readout_hidden],
            xavier(
                &mut rng,
                config.readout_hidden,
                config.out_dim,
                config.out_dim * config.readout_hidden,
            ),
            DecayGroup::Weight,
        ));
        params.push(Param::new(
            "ro_b2",
            vec![config.out_dim],
            vec![0.0; config.out_dim],
            DecayGroup::None,
        ));

        let mut means = Vec::with_capacity(n * s);
        let mut covs = Vec::with_capacity(n * s * s);
        for g in ds.inputs.iter() {
            means.extend(g.mean().iter());
            for i in 0..s {
                for j in 0..s {
                    covs.push(g.cov().matrix()[(i, j)]);
                }
            }
        }
        let dets: Vec<f64> = ds.inputs.iter().map(|g| g.cov().matrix().determinant()).collect();
        let mut psi_inputs = Vec::with_capacity(ds.graph.edge_count() * 2 * (2 * s + 2));
        for &(u, v) in ds.graph.edges() {
            for (a, b) in [(u, v), (v, u)] {
                psi_inputs.extend_from_slice(&means[a * s..(a + 1) * s]);
                psi_inputs.extend_from_slice(&means[b * s..(b + 1) * s]);
                psi_inputs.push(dets[a]);
                psi_inputs.push(dets[b]);
            }
        }

        Ok(GsnnModel {
            config: config.clone(),
            params,
            graph_laplacian,
            ctx: SheafCtx::from_graph(&ds.graph, d),
            means,
            covs,
            psi_inputs,
            n,
            s_dim: s,
        })
    }

    pub fn kind(&self) -> ModelKind {
        if self.graph_laplacian {
            ModelKind::GsnnGraphLap
        } else {
            match self.config.map_class {
                MapClass::Diagonal => ModelKind::GsnnDiag,
                MapClass::Orthogonal => ModelKind::GsnnOrth,
                MapClass::General => ModelKind::GsnnGen,
            }
        }
    }

    fn handle(&self, handles: &[Tensor], name: &str) -> Tensor {
        let idx = self
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        handles[idx]
    }

    /// Learned (or identity) restriction maps as a tape tensor `(E, 2, d, d)`.
    fn maps_tensor(&self, tape: &Tape, handles: &[Tensor]) -> Tensor {
        let d = self.config.stalk_dim;
        let e = self.ctx.edges.len();
        if self.graph_laplacian || (self.config.map_class == MapClass::Orthogonal && d == 1) {
            // identity on every incidence
            let mut flat = vec![0.0; e * 2 * d * d];
            for b in 0..e * 2 {
                for i in 0..d {
                    flat[b * d * d + i * d + i] = 1.0;
                }
            }
            return tape.constant(vec![e, 2, d, d], flat);
        }
        let inputs = tape.constant(vec![e * 2, 2 * self.s_dim + 2], self.psi_inputs.clone());
        let hidden = tape.elu(tape.affine(
            inputs,
            self.handle(handles, "psi_w1"),
            self.handle(handles, "psi_b1"),
        ));
        let raw = tape.tanh(tape.affine(
            hidden,
            self.handle(handles, "psi_w2"),
            self.handle(handles, "psi_b2"),
        ));
        let blocks = match self.config.map_class {
            MapClass::Diagonal => tape.diag_embed(raw),
            MapClass::Orthogonal => tape.cayley(raw, d),
            MapClass::General => tape.general_maps(raw, d, GENERAL_MAP_RIDGE),
        };
        tape.reshape(blocks, vec![e, 2, d, d])
    }

    pub fn forward(
        &self,
        tape: &Tape,
        _ds: &Dataset,
        rng: &mut ChaCha8Rng,
        with_grad: bool,
    ) -> Result<Forwarded> {
        let handles: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.shape.clone(), p.values.clone(), with_grad))
            .collect();
        let z = draw_noise(self.n, self.config.samples, self.config.stalk_dim, rng);
        let (samples, trace) = self.forward_with_handles(tape, &handles, &z)?;
        Ok(Forwarded {
            samples,
            handles,
            trace,
        })
    }

    /// The full differentiable pipeline against caller-provided parameter
    /// handles and fixed sampling noise `z: (n, T, d)`.
    pub fn forward_with_handles(
        &self,
        tape: &Tape,
        handles: &[Tensor],
        z: &[f64],
    ) -> Result<(Tensor, Trace)> {
        let cfg = &self.config;
        let (n, d, h, t) = (self.n, cfg.stalk_dim, cfg.hidden, cfg.samples);

        // restriction maps, learned once per pass and frozen
        let maps = self.maps_tensor(tape, handles);
        let dis = tape.deg_inv_sqrt(maps, &self.ctx);
        let nmaps = tape.normalize_maps(maps, dis, &self.ctx);

        // step 1: embed into the stalks
        let mut mu = tape.embed_mean(self.handle(handles, "w_o"), &self.means, n, self.s_dim);
        let mut sig = tape.embed_cov(self.handle(handles, "w_o"), &self.covs, n, self.s_dim);

        // step 2: stalk and channel mixing; on the covariance side the mixer
        // is made entrywise nonnegative so mixed blocks stay PSD
        let w1 = self.handle(handles, "w_1");
        mu = tape.matmul(tape.kron_apply(w1, mu), self.handle(handles, "w_2_mean"));
        sig = tape.congruence(w1, sig);
        let mixer = tape.softplus(self.handle(handles, "w_2_cov"));
        sig = tape.channel_mix_cov(sig, mixer);

        // step 3: ℓ-th Laplacian power, (I − Δ) on means and (I + Δ) on
        // covariances
        for _ in 0..cfg.layers {
            let lap_mu = tape.sheaf_mean_apply(nmaps, mu, &self.ctx);
            mu = tape.sub(mu, lap_mu);
            let lap_sig = tape.sheaf_cov_apply(nmaps, sig, &self.ctx);
            sig = tape.add(sig, lap_sig);
        }

        let trace = Trace {
            mean_features: Some(tape.value(mu)),
            cov_blocks: Some(tape.value(sig)),
            maps: Some(tape.value(maps)),
            ..Trace::default()
        };

        // step 4: average channels, sample, read out per sample
        let avg = tape.constant(vec![h, 1], vec![1.0 / h as f64; h]);
        let mu_avg = tape.reshape(tape.matmul(mu, avg), vec![n, d]);
        let sig_avg = tape.reshape(tape.channel_mix_cov(sig, avg), vec![n, d, d]);
        let root = tape.eigen_sqrt(sig_avg);
        let draws = tape.reparam(mu_avg, root, z, t);
        let flat = tape.reshape(draws, vec![n * t, d]);
        let hidden = tape.elu(tape.affine(
            flat,
            self.handle(handles, "ro_w1"),
            self.handle(handles, "ro_b1"),
        ));
        let out = tape.affine(
            hidden,
            self.handle(handles, "ro_w2"),
            self.handle(handles, "ro_b2"),
        );
        let samples = tape.reshape(out, vec![n, t, cfg.out_dim]);
        Ok((samples, trace))
    }

    /// The learned restriction maps as a plain map set (identity maps for the
    /// graph-Laplacian variant).
    pub fn restriction_maps(&self, ds: &Dataset) -> Result<RestrictionMapSet> {
        let tape = Tape::new();
        let handles: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.shape.clone(), p.values.clone(), false))
            .collect();
        let maps = self.maps_tensor(&tape, &handles);
        let flat = tape.value(maps);
        maps_from_flat(&flat, ds, self.config.stalk_dim, self.effective_class())
    }

    fn effective_class(&self) -> MapClass {
        if self.graph_laplacian {
            MapClass::Orthogonal
        } else {
            self.config.map_class
        }
    }

    /// Smoothness of the post-diffusion mean features: Dirichlet energy under
    /// the learned sheaf's normalized Laplacian, summed over channels and
    /// normalized by the feature norm so that scale cannot mask collapse.
    pub fn mean_dirichlet_energy(&self, ds: &Dataset, seed: u64) -> Result<f64> {
        let tape = Tape::new();
        let mut rng = crate::seeded_rng(seed);
        let fwd = self.forward(&tape, ds, &mut rng, false)?;
        let mu = fwd.trace.mean_features.expect("sheaf forward traces means");
        let flat = fwd.trace.maps.expect("sheaf forward traces maps");
        let maps = maps_from_flat(&flat, ds, self.config.stalk_dim, self.effective_class())?;
        let ops = SheafOperators::assemble(&ds.graph, maps)?;
        let nd = self.n * self.config.stalk_dim;
        let h = self.config.hidden;
        let mut quad = 0.0;
        let mut norm = 0.0;
        for c in 0..h {
            let col = nalgebra::DVector::from_iterator(nd, (0..nd).map(|r| mu[r * h + c]));
            quad += ops.dirichlet_energy(&col)?;
            norm += col.norm_squared();
        }
        Ok(quad / norm.max(1e-300))
    }
}

fn map_param_count(class: MapClass, d: usize) -> usize {
    match class {
        MapClass::Diagonal => d,
        MapClass::Orthogonal => d * (d - 1) / 2,
        MapClass::General => d * d,
    }
}

fn maps_from_flat(
    flat: &[f64],
    ds: &Dataset,
    d: usize,
    class: MapClass,
) -> Result<RestrictionMapSet> {
    let e = ds.graph.edge_count();
    if flat.len() != e * 2 * d * d {
        return Err(Error::Shape("map tensor does not match the graph".into()));
    }
    let block = |b: usize| DMatrix::from_row_slice(d, d, &flat[b * d * d..(b + 1) * d * d]);
    let pairs: Vec<[DMatrix<f64>; 2]> = (0..e).map(|i| [block(2 * i), block(2 * i + 1)]).collect();
    RestrictionMapSet::from_edge_maps(&ds.graph, class, pairs)
}
