//! Communication accounting: the aligned variant broadcasts a shared
//! location set so every user uploads the same sparse support, trading
//! a small download for much cheaper uploads than dense sharing.

use dgp::sim::{train, Defense, RunConfig};

fn run(name: &str, defense: Defense) {
    let cfg = RunConfig {
        rounds: 100,
        eval_every: 0,
        defense,
        error_feedback: true,
        ..RunConfig::glyphs_default()
    };
    let out = train(&cfg).expect("run failed");
    let up = out.ledger.total_upload();
    let down = out.ledger.total_download();
    println!(
        "{:<18} upload {:>10} B  download {:>10} B  accuracy {:.4}",
        name,
        up,
        down,
        out.final_accuracy().unwrap()
    );
}

fn main() {
    run("none", Defense::None);
    run("dgp(5%,75%)", Defense::Dgp { k1: 0.05, k2: 0.75 });
    run(
        "adgp(5%,75%,20%)",
        Defense::Adgp { k1: 0.05, k2: 0.75, k: 0.20 },
    );
}
