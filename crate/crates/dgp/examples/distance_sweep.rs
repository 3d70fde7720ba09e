//! Sweeps defenses to hit target gradient distances and reports how
//! reconstruction quality degrades as the shared gradient moves further
//! from the raw one.

use dgp::attack::OptAttackConfig;
use dgp::sim::{distance_sweep, RunConfig};

fn main() {
    let cfg = RunConfig {
        rounds: 10,
        ..RunConfig::glyphs_default()
    };
    let attack_cfg = OptAttackConfig {
        iterations: 800,
        restarts: 2,
        seed: cfg.seed,
        ..OptAttackConfig::default()
    };
    let targets = [0.0, 0.1, 0.2, 0.4, 0.6, 0.8];
    let rows = distance_sweep(&cfg, &targets, &attack_cfg).expect("sweep failed");
    println!("{:<8} {:<22} {:>9} {:>10} {:>8}", "target", "rule", "achieved", "mse", "ssim");
    for row in &rows {
        match (row.achieved, &row.quality) {
            (Some(achieved), Some(q)) => println!(
                "{:<8.2} {:<22} {:>9.4} {:>10.4e} {:>8.4}",
                row.target, row.rule, achieved, q.mse, q.ssim
            ),
            _ => println!("{:<8.2} no candidate within tolerance", row.target),
        }
    }
}
