//! Gradient-matching optimization attack: Adam on a dummy input driven
//! by the exact gradient of the masked matching loss. Undefended
//! observations give pixel-perfect recovery; pruning degrades it.

use dgp::attack::{opt_attack, GradObservation, OptAttackConfig};
use dgp::defense::{dgp_prune, DgpConfig};
use dgp::model::{Batch, MlpModel};
use dgp::numerics::Rng;
use dgp::sim::{make_dataset, DatasetKind};

fn main() {
    let mut data_rng = Rng::new(3, 1);
    let ds = make_dataset(DatasetKind::Glyphs, &mut data_rng).expect("dataset");
    let mut init_rng = Rng::new(3, 2);
    let model = MlpModel::random(&[64, 32, 4], &mut init_rng).expect("model");
    let batch = Batch::single(&ds.train.inputs.data()[..64], ds.train.labels[0]);
    let (_, grads) = model.loss_and_grad(&batch).expect("gradients");

    let attack_cfg = OptAttackConfig { seed: 3, ..OptAttackConfig::default() };

    let dense = GradObservation::dense(&grads, 1, 4);
    let clean = opt_attack(&model, &dense, &attack_cfg, &batch).expect("attack");
    println!(
        "undefended: mse {:.3e}  ssim {:.4}  label {:?}  ({} iterations, {:.2}s)",
        clean.quality[0].mse,
        clean.quality[0].ssim,
        clean.labels[0],
        clean.iterations,
        clean.wall_time_secs
    );

    let cfg = DgpConfig::new(0.05, 0.75).expect("config");
    let obs = GradObservation {
        wire: dgp_prune(&grads, &cfg),
        batch_size: 1,
        num_classes: 4,
        snapshot_id: String::new(),
    };
    let defended = opt_attack(&model, &obs, &attack_cfg, &batch).expect("attack");
    println!(
        "under dgp(5%,75%): mse {:.3e}  ssim {:.4}",
        defended.quality[0].mse, defended.quality[0].ssim
    );
}
