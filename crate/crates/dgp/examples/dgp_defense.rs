//! Dual gradient pruning with error feedback barely costs accuracy:
//! removing the top 5% and bottom 75% of every gradient tensor leaves
//! the glyphs classifier within a couple of points of the baseline.

use dgp::sim::{train, Defense, RunConfig};

fn main() {
    let base = RunConfig {
        rounds: 300,
        eval_every: 0,
        ..RunConfig::glyphs_default()
    };
    let sgd = train(&base).expect("baseline failed");

    let dgp_ef = train(&RunConfig {
        defense: Defense::Dgp { k1: 0.05, k2: 0.75 },
        error_feedback: true,
        ..base.clone()
    })
    .expect("pruned run failed");

    let dgp_no_ef = train(&RunConfig {
        defense: Defense::Dgp { k1: 0.05, k2: 0.75 },
        error_feedback: false,
        ..base
    })
    .expect("pruned run failed");

    println!("baseline accuracy:        {:.4}", sgd.final_accuracy().unwrap());
    println!("pruned + error feedback:  {:.4}", dgp_ef.final_accuracy().unwrap());
    println!("pruned, no error feedback: {:.4}", dgp_no_ef.final_accuracy().unwrap());
}
