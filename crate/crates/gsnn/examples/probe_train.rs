use gsnn::data::{synthesize, Generator};
use gsnn::model::{GsnnConfig, ModelKind};
use gsnn::verify::energy_sweep;

fn main() {
    let started = std::time::Instant::now();
    let ds = synthesize(Generator::Ba { n: 100, m: 25 }, 2, 30, 5.0, 90).unwrap();
    let config = GsnnConfig {
        stalk_dim: 2, hidden: 32, samples: 30,
        psi_hidden: 32, readout_hidden: 32, lr: 0.01,
        epochs: 400, early_stop_patience: 100, lr_patience: 20,
        sinkhorn_eps: None, sinkhorn_iters: 40,
        ..GsnnConfig::default()
    };
    let kinds = [ModelKind::Gcn, ModelKind::GsnnDiag, ModelKind::GsnnOrth, ModelKind::GsnnGen];
    let records = energy_sweep(&ds, &config, &kinds, &[1, 2, 4, 8], 1, 900).unwrap();
    for r in &records {
        println!(
            "{:>10} depth {}: W2 {:.3}, energy {:?}",
            r.model.name(), r.depth, r.mean_w2, r.energy
        );
    }
    println!("total: {:.0}s", started.elapsed().as_secs_f64());
}
