//! Trains the toy model on a small synthetic split and prints the metrics.
//!
//! `cargo run --release --example overfit -- [epochs] [lr] [n_train]`

use std::time::Duration;

use interact3d::trainer::{overfit_check, OverfitThresholds, RunConfig};
use interact3d_core::synthgen::generate_split;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let mut run = RunConfig::default();
    run.train.epochs = args.get(1).map_or(Ok(150), |s| s.parse())?;
    run.train.lr = args.get(2).map_or(Ok(1e-3), |s| s.parse())?;
    let n: usize = args.get(3).map_or(Ok(20), |s| s.parse())?;
    let train = generate_split(n, 7)?.into_iter().map(|g| g.sample).collect();
    let heldout = generate_split(10, 8)?.into_iter().map(|g| g.sample).collect();
    let (_, report) = overfit_check(&run, train, heldout, Duration::from_secs(1800), &OverfitThresholds::default())?;
    println!("{}", report.train.table());
    for (name, value, threshold, ok) in &report.checks {
        println!("{} {name} {value:.3} (>= {threshold:.3})", if *ok { "PASS" } else { "FAIL" });
    }
    println!("epochs {} in {:.0}s", report.epochs, report.seconds);
    Ok(())
}
