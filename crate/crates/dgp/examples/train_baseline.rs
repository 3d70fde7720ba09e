//! Plain collaborative SGD on the blobs dataset: ten users share
//! unpruned gradients, the server averages them.

use dgp::sim::{train, RunConfig};

fn main() {
    let cfg = RunConfig {
        rounds: 200,
        eval_every: 25,
        ..RunConfig::blobs_default()
    };
    let out = train(&cfg).expect("training failed");
    for r in &out.records {
        if let Some(acc) = r.test_accuracy {
            println!(
                "round {:>4}  loss {:.4}  accuracy {:.4}",
                r.round, r.train_loss, acc
            );
        }
    }
    println!(
        "final accuracy: {:.4}",
        out.final_accuracy().unwrap()
    );
}
