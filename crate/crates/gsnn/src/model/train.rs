//! Full-graph training against the entropic transport loss, with plateau
//! learning-rate reduction, early stopping, and best-validation restoration.

use crate::autodiff::{sinkhorn, Adam, ParamSet, Tape};
use crate::data::{Dataset, SplitKind};
use crate::Result;

use super::{GsnnConfig, Model};

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_val: f64,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    /// The loss went non-finite and training stopped at the last good state.
    pub aborted: bool,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean: f64,
    pub sd: f64,
    pub per_node: Vec<f64>,
}

fn per_node_targets(ds: &Dataset) -> Vec<(Vec<f64>, usize)> {
    ds.targets.iter().map(|t| (t.flat(), t.len())).collect()
}

/// Mean transport cost over `nodes`, computed outside the tape.
fn plain_split_loss(
    out_values: &[f64],
    t: usize,
    out_dim: usize,
    targets: &[(Vec<f64>, usize)],
    nodes: &[usize],
    config: &GsnnConfig,
) -> Result<f64> {
    let mut acc = 0.0;
    for &v in nodes {
        let slice = &out_values[v * t * out_dim..(v + 1) * t * out_dim];
        let (target, t_len) = &targets[v];
        acc += sinkhorn::sinkhorn_cost(
            slice,
            target,
            t,
            *t_len,
            out_dim,
            config.sinkhorn_eps,
            config.sinkhorn_iters,
        )?;
    }
    Ok(acc / nodes.len().max(1) as f64)
}

/// Trains in place. Each epoch runs one full-graph forward, a mean Sinkhorn
/// loss over the training nodes, one Adam step with decoupled decay, and a
/// validation pass; the best-validation parameters are restored at the end.
/// Deterministic for a fixed config seed.
pub fn train(model: &mut Model, ds: &Dataset, config: &GsnnConfig) -> Result<TrainReport> {
    config.validate()?;
    let mut report = TrainReport {
        best_val: f64::INFINITY,
        ..TrainReport::default()
    };
    if config.epochs == 0 {
        return Ok(report);
    }
    let train_nodes = ds.nodes_of(SplitKind::Train);
    let val_nodes = ds.nodes_of(SplitKind::Val);
    let targets = per_node_targets(ds);
    let t = config.samples;
    let out_dim = config.out_dim;

    let mut adam = Adam::new(
        config.lr,
        config.weight_decay,
        config.sheaf_decay,
        model.params(),
    );
    let mut best_params: Option<ParamSet> = None;
    let mut stale = 0usize;
    let mut lr_stale = 0usize;

    for epoch in 0..config.epochs {
        let mut rng = crate::seeded_rng(
            config
                .seed
                .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)),
        );
        let tape = Tape::new();
        let fwd = model.forward(&tape, ds, &mut rng, true)?;

        let mut losses = Vec::with_capacity(train_nodes.len());
        for &v in &train_nodes {
            let node_samples = tape.slice_batch(fwd.samples, v);
            let (target, t_len) = &targets[v];
            let target_t = tape.constant(vec![*t_len, out_dim], target.clone());
            losses.push(tape.sinkhorn_w2(
                node_samples,
                target_t,
                config.sinkhorn_eps,
                config.sinkhorn_iters,
            )?);
        }
        let loss = tape.mean_of(&losses);
        let train_loss = tape.scalar(loss);

        let out_values = tape.value(fwd.samples);
        let val_loss = plain_split_loss(&out_values, t, out_dim, &targets, &val_nodes, config)?;

        if !train_loss.is_finite() || !val_loss.is_finite() {
            report.aborted = true;
            break;
        }

        let grads = tape.backward(loss);
        let grad_vec: Vec<Option<Vec<f64>>> = fwd
            .handles
            .iter()
            .map(|h| grads.get(*h).map(<[f64]>::to_vec))
            .collect();
        adam.step(model.params_mut(), &grad_vec);
        model.clamp_params();

        report.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: adam.lr,
        });
        report.epochs_run = epoch + 1;

        if val_loss < report.best_val {
            report.best_val = val_loss;
            report.best_epoch = Some(epoch);
            best_params = Some(model.params().clone());
            stale = 0;
            lr_stale = 0;
        } else {
            stale += 1;
            lr_stale += 1;
        }
        if lr_stale >= config.lr_patience {
            adam.lr *= config.lr_factor;
            lr_stale = 0;
        }
        if stale >= config.early_stop_patience {
            break;
        }
    }

    if let Some(best) = best_params {
        *model.params_mut() = best;
    }
    Ok(report)
}

/// Per-node 2-Wasserstein estimates (square roots of the entropic costs,
/// floored at zero) between model samples and targets on one split.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    split: SplitKind,
    config: &GsnnConfig,
    eval_seed: u64,
) -> Result<EvalReport> {
    let nodes = ds.nodes_of(split);
    if nodes.is_empty() {
        return Err(crate::Error::Parameter("evaluation split is empty".into()));
    }
    let mut rng = crate::seeded_rng(eval_seed ^ 0x0E7A_15EE_D000_0001);
    let tape = Tape::new();
    let fwd = model.forward(&tape, ds, &mut rng, false)?;
    let out_values = tape.value(fwd.samples);
    let targets = per_node_targets(ds);
    let t = config.samples;
    let out_dim = config.out_dim;
    let mut per_node = Vec::with_capacity(nodes.len());
    for &v in &nodes {
        let slice = &out_values[v * t * out_dim..(v + 1) * t * out_dim];
        let (target, t_len) = &targets[v];
        let cost = sinkhorn::sinkhorn_cost(
            slice,
            target,
            t,
            *t_len,
            out_dim,
            config.sinkhorn_eps,
            config.sinkhorn_iters,
        )?;
        per_node.push(cost.max(0.0).sqrt());
    }
    let mean = per_node.iter().sum::<f64>() / per_node.len() as f64;
    let sd = if per_node.len() > 1 {
        (per_node.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / (per_node.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok(EvalReport { mean, sd, per_node })
}

/// Writes a `epoch,train_loss,val_loss,lr` CSV.
pub fn write_history(path: &std::path::Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for rec in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            rec.epoch, rec.train_loss, rec.val_loss, rec.lr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
