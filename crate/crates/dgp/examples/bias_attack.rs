//! Analytic bias attack: for a fully connected first layer and a
//! single-sample batch, dividing a weight-gradient row by its bias
//! gradient reproduces the input exactly. Pruning the shared gradient
//! breaks the division.

use dgp::attack::{bias_attack, GradObservation};
use dgp::defense::{dgp_prune, DgpConfig};
use dgp::model::{Batch, MlpModel};
use dgp::numerics::Rng;
use dgp::sim::{make_dataset, DatasetKind};

fn main() {
    let mut data_rng = Rng::new(7, 1);
    let ds = make_dataset(DatasetKind::Glyphs, &mut data_rng).expect("dataset");
    let mut init_rng = Rng::new(7, 2);
    let model = MlpModel::random(&[64, 32, 4], &mut init_rng).expect("model");

    let batch = Batch::single(&ds.train.inputs.data()[..64], ds.train.labels[0]);
    let (_, grads) = model.loss_and_grad(&batch).expect("gradients");

    let dense = GradObservation::dense(&grads, 1, 4);
    let clean = bias_attack(&model, &dense, &batch).expect("attack");
    println!("undefended: mse {:.3e}  ssim {:.4}", clean.quality[0].mse, clean.quality[0].ssim);

    let cfg = DgpConfig::new(0.05, 0.75).expect("config");
    let pruned = GradObservation {
        wire: dgp_prune(&grads, &cfg),
        batch_size: 1,
        num_classes: 4,
        snapshot_id: String::new(),
    };
    let defended = bias_attack(&model, &pruned, &batch).expect("attack");
    match defended.success {
        true => println!(
            "under dgp(5%,75%): mse {:.3e}  ssim {:.4}",
            defended.quality[0].mse, defended.quality[0].ssim
        ),
        false => println!(
            "under dgp(5%,75%): attack failed ({})",
            defended.failure_reason.unwrap()
        ),
    }
}
