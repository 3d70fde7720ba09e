//! Active imprint attack: a malicious server prepends a linear layer
//! whose adjacent-row gradient differences reveal inputs binned by mean
//! brightness. With one sample per bin recovery is exact; dual pruning
//! removes the telltale rows.

use dgp::attack::{imprint_attack, GradObservation};
use dgp::defense::{dgp_prune, DgpConfig};
use dgp::model::{Batch, ImprintSpec, MlpModel};
use dgp::numerics::{gaussian, Rng, Tensor};

fn main() {
    let spec = ImprintSpec {
        measurement: Tensor::from_vec(vec![1.0 / 64.0; 64]),
        thresholds: (0..8).map(|i| 0.15 + 0.075 * i as f64).collect(),
        pass_through: true,
    };
    let mut init_rng = Rng::new(9, 2);
    let base = MlpModel::random(&[64, 32, 4], &mut init_rng).expect("model");
    let model = base.insert_imprint(&spec).expect("imprint");

    // one random texture per brightness bin
    let mut rng = Rng::new(9, 3);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for bin in 0..8usize {
        let target = 0.15 + 0.075 * bin as f64 + 0.0375;
        let raw = gaussian(&mut rng, &[64], 0.0, 1.0).expect("noise");
        let mean = raw.data().iter().sum::<f64>() / 64.0;
        inputs.extend(raw.data().iter().map(|v| (target + 0.08 * (v - mean)).clamp(0.01, 0.99)));
        labels.push(bin % 4);
    }
    let batch = Batch::new(Tensor::new(vec![8, 64], inputs).unwrap(), labels).unwrap();
    let (_, grads) = model.loss_and_grad(&batch).expect("gradients");

    let dense = GradObservation::dense(&grads, 8, 4);
    let clean = imprint_attack(&model, &dense, &spec, &batch).expect("attack");
    println!("undefended mean ssim: {:.4}", clean.mean_ssim());

    for sum_k in [0.48, 0.8, 0.96] {
        let cfg = DgpConfig::new(sum_k / 16.0, sum_k * 15.0 / 16.0).expect("config");
        let obs = GradObservation {
            wire: dgp_prune(&grads, &cfg),
            batch_size: 8,
            num_classes: 4,
            snapshot_id: String::new(),
        };
        let report = imprint_attack(&model, &obs, &spec, &batch).expect("attack");
        println!(
            "dgp total removal {:>4}%: mean ssim {:.4}",
            (sum_k * 100.0) as u32,
            report.mean_ssim()
        );
    }
}
