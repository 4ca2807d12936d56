//! Distribution-on-distribution regressors: the sheaf network and the
//! sample-based baselines, all trained with the entropic transport loss.

mod baselines;
mod gsnn;
mod train;

pub use baselines::{gaussian_input_width, GaussianGcnModel, GcnModel, MlpModel, NsdConfig, NsdModel};
pub use gsnn::GsnnModel;
pub use train::{evaluate, train, write_history, EpochRecord, EvalReport, TrainReport};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor};
use crate::data::Dataset;
use crate::sheaf::MapClass;
use crate::{Error, Result};

/// Hyperparameters shared by every model in the experiment harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GsnnConfig {
    /// Stalk dimension d.
    pub stalk_dim: usize,
    /// Hidden channels h.
    pub hidden: usize,
    /// Diffusion depth (or layer count for the iterative baselines).
    pub layers: usize,
    pub map_class: MapClass,
    /// Samples drawn per node, both as model output and as baseline input.
    pub samples: usize,
    /// Output sample dimension; must match the dataset targets.
    pub out_dim: usize,
    /// Width of the restriction-map learner's hidden layer.
    pub psi_hidden: usize,
    /// Width of the readout hidden layer.
    pub readout_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub weight_decay: f64,
    pub sheaf_decay: f64,
    /// `None` resolves per call to 0.1 times the median squared distance.
    pub sinkhorn_eps: Option<f64>,
    pub sinkhorn_iters: usize,
    pub seed: u64,
}

impl Default for GsnnConfig {
    fn default() -> Self {
        Self {
            stalk_dim: 2,
            hidden: 32,
            layers: 2,
            map_class: MapClass::General,
            samples: 30,
            out_dim: 2,
            psi_hidden: 32,
            readout_hidden: 32,
            lr: 0.01,
            epochs: 1500,
            early_stop_patience: 100,
            lr_patience: 20,
            lr_factor: 0.5,
            weight_decay: 5e-3,
            sheaf_decay: 5e-3,
            sinkhorn_eps: None,
            sinkhorn_iters: 100,
            seed: 0,
        }
    }
}

impl GsnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stalk_dim == 0
            || self.hidden == 0
            || self.samples == 0
            || self.out_dim == 0
            || self.psi_hidden == 0
            || self.readout_hidden == 0
            || self.sinkhorn_iters == 0
        {
            return Err(Error::Parameter("all counts must be at least 1".into()));
        }
        if self.epochs > 0
            && (self.early_stop_patience >= self.epochs || self.lr_patience >= self.epochs)
        {
            return Err(Error::Parameter(
                "patience must stay below the epoch budget".into(),
            ));
        }
        if self.lr <= 0.0 || !(0.0..1.0).contains(&self.lr_factor) {
            return Err(Error::Parameter("bad learning-rate settings".into()));
        }
        Ok(())
    }
}

/// Every trainable model the harness knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Mlp,
    Gcn,
    GaussianGcn,
    NsdDiag,
    NsdOrth,
    NsdGen,
    GsnnDiag,
    GsnnOrth,
    GsnnGen,
    GsnnGraphLap,
}

impl ModelKind {
    pub const ALL: [ModelKind; 10] = [
        ModelKind::Mlp,
        ModelKind::Gcn,
        ModelKind::GaussianGcn,
        ModelKind::NsdDiag,
        ModelKind::NsdOrth,
        ModelKind::NsdGen,
        ModelKind::GsnnDiag,
        ModelKind::GsnnOrth,
        ModelKind::GsnnGen,
        ModelKind::GsnnGraphLap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Gcn => "gcn",
            ModelKind::GaussianGcn => "gaussian_gcn",
            ModelKind::NsdDiag => "nsd_diag",
            ModelKind::NsdOrth => "nsd_orth",
            ModelKind::NsdGen => "nsd_gen",
            ModelKind::GsnnDiag => "gsnn_diag",
            ModelKind::GsnnOrth => "gsnn_orth",
            ModelKind::GsnnGen => "gsnn_gen",
            ModelKind::GsnnGraphLap => "gsnn_graphlap",
        }
    }

    pub fn parse(text: &str) -> Result<ModelKind> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == text)
            .ok_or_else(|| Error::Parameter(format!("unknown model '{text}'")))
    }

    /// Map class used by the sheaf-valued kinds.
    pub fn map_class(self) -> Option<MapClass> {
        match self {
            ModelKind::NsdDiag | ModelKind::GsnnDiag => Some(MapClass::Diagonal),
            ModelKind::NsdOrth | ModelKind::GsnnOrth => Some(MapClass::Orthogonal),
            ModelKind::NsdGen | ModelKind::GsnnGen => Some(MapClass::General),
            _ => None,
        }
    }
}

/// Values a forward pass exposes for diagnostics beyond its output samples.
#[derive(Debug, Default)]
pub struct Trace {
    /// Post-diffusion stacked mean features `(n*d, h)` of the sheaf network.
    pub mean_features: Option<Vec<f64>>,
    /// Post-diffusion covariance blocks, flat `(n, h, d, d)`.
    pub cov_blocks: Option<Vec<f64>>,
    /// Learned restriction maps, flat `(E, 2, d, d)`.
    pub maps: Option<Vec<f64>>,
    /// Per-node diagonal standard deviations of the Gaussian-output baseline.
    pub gaussian_std: Option<Vec<f64>>,
}

/// A forward pass: output sample tensor `(n, T, out)` plus the parameter
/// handles in [`ParamSet`] order.
pub struct Forwarded {
    pub samples: Tensor,
    pub handles: Vec<Tensor>,
    pub trace: Trace,
}

/// One of the supported regressors, built against a fixed dataset.
pub enum Model {
    Gsnn(GsnnModel),
    Mlp(MlpModel),
    Gcn(GcnModel),
    GaussianGcn(GaussianGcnModel),
    Nsd(NsdModel),
}

impl Model {
    /// Builds a freshly initialized model of the requested kind. The config's
    /// map class is overridden by kinds that imply one.
    pub fn build(kind: ModelKind, config: &GsnnConfig, ds: &Dataset) -> Result<Model> {
        config.validate()?;
        if config.out_dim != ds.target_dim() {
            return Err(Error::Shape(format!(
                "config out_dim {} != dataset target dim {}",
                config.out_dim,
                ds.target_dim()
            )));
        }
        let mut config = config.clone();
        if let Some(class) = kind.map_class() {
            config.map_class = class;
        }
        Ok(match kind {
            ModelKind::GsnnDiag | ModelKind::GsnnOrth | ModelKind::GsnnGen => {
                Model::Gsnn(GsnnModel::build(&config, ds, false)?)
            }
            ModelKind::GsnnGraphLap => Model::Gsnn(GsnnModel::build(&config, ds, true)?),
            ModelKind::Mlp => Model::Mlp(MlpModel::build(&config, ds)?),
            ModelKind::Gcn => Model::Gcn(GcnModel::build(&config, ds)?),
            ModelKind::GaussianGcn => Model::GaussianGcn(GaussianGcnModel::build(&config, ds)?),
            ModelKind::NsdDiag | ModelKind::NsdOrth | ModelKind::NsdGen => {
                Model::Nsd(NsdModel::build(&NsdConfig { base: config }, ds)?)
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Gsnn(m) => m.kind(),
            Model::Mlp(_) => ModelKind::Mlp,
            Model::Gcn(_) => ModelKind::Gcn,
            Model::GaussianGcn(_) => ModelKind::GaussianGcn,
            Model::Nsd(m) => m.kind(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Gsnn(m) => &m.params,
            Model::Mlp(m) => &m.params,
            Model::Gcn(m) => &m.params,
            Model::GaussianGcn(m) => &m.params,
            Model::Nsd(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::Gsnn(m) => &mut m.params,
            Model::Mlp(m) => &mut m.params,
            Model::Gcn(m) => &mut m.params,
            Model::GaussianGcn(m) => &mut m.params,
            Model::Nsd(m) => &mut m.params,
        }
    }

    /// Runs the model on the whole graph. `rng` drives the per-call sample
    /// noise; identical state gives identical outputs.
    pub fn forward(
        &self,
        tape: &Tape,
        ds: &Dataset,
        rng: &mut ChaCha8Rng,
        with_grad: bool,
    ) -> Result<Forwarded> {
        match self {
            Model::Gsnn(m) => m.forward(tape, ds, rng, with_grad),
            Model::Mlp(m) => m.forward(tape, rng, with_grad),
            Model::Gcn(m) => m.forward(tape, rng, with_grad),
            Model::GaussianGcn(m) => m.forward(tape, rng, with_grad),
            Model::Nsd(m) => m.forward(tape, rng, with_grad),
        }
    }

    /// Projects parameters back into their constraint sets after an optimizer
    /// step (the iterative baseline clamps its residual vector).
    pub fn clamp_params(&mut self) {
        if let Model::Nsd(m) = self {
            m.clamp_residual();
        }
    }

    /// Smoothness diagnostic after training: Dirichlet energy of the learned
    /// sheaf's mean features (sheaf kinds), or of the averaged convolution
    /// features against the plain graph Laplacian (GCN). `None` elsewhere.
    pub fn smoothness_energy(&self, ds: &Dataset, seed: u64) -> Result<Option<f64>> {
        match self {
            Model::Gsnn(m) => m.mean_dirichlet_energy(ds, seed).map(Some),
            Model::Gcn(m) => m.feature_dirichlet_energy(ds, seed).map(Some),
            _ => Ok(None),
        }
    }
}

/// Serialized model: shapes, flat values, and the config that produced them.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub config: GsnnConfig,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn capture(model: &Model, config: &GsnnConfig) -> Checkpoint {
        Checkpoint {
            kind: model.kind().name().to_string(),
            config: config.clone(),
            params: model.params().clone(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Rebuilds the model against a dataset and restores the stored values.
    pub fn restore(&self, ds: &Dataset) -> Result<Model> {
        let kind = ModelKind::parse(&self.kind)?;
        let mut model = Model::build(kind, &self.config, ds)?;
        let params = model.params_mut();
        if params.len() != self.params.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                params.len()
            )));
        }
        for i in 0..params.len() {
            let stored = self.params.get(i);
            let target = params.get_mut(i);
            if stored.name != target.name || stored.shape != target.shape {
                return Err(Error::Schema(format!(
                    "checkpoint parameter '{}' does not match '{}'",
                    stored.name, target.name
                )));
            }
            target.values = stored.values.clone();
        }
        Ok(model)
    }
}

// -- shared init helpers -------------------------------------------------------

pub(crate) fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize, count: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..count).map(|_| rng.gen_range(-a..a)).collect()
}

/// Inverse of softplus, used to initialize nonnegative mixers near a target.
pub(crate) fn softplus_inverse(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Input samples shared by the vector baselines: `T` draws per node from the
/// input field, flat `(n, T, s)`. Deterministic per seed.
pub(crate) fn draw_input_samples(ds: &Dataset, t: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = crate::seeded_rng(seed ^ 0x1297_31AB_44D0_55EE);
    let n = ds.node_count();
    let s = ds.input_dim();
    let mut out = Vec::with_capacity(n * t * s);
    for v in 0..n {
        let draws = crate::gaussian::sample(ds.inputs.node(v), t, &mut rng)?;
        out.extend_from_slice(&draws.flat());
    }
    Ok(out)
}

/// Standard normal noise `(n, t, d)` for reparameterized output sampling.
pub(crate) fn draw_noise(n: usize, t: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand_distr::StandardNormal;
    (0..n * t * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[cfg(test)]
mod tests;
