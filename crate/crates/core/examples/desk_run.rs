//! Runs the desk preset end to end and prints the metrics CSV.

use std::time::Instant;

use leakgen::config::ExperimentConfig;
use leakgen::experiment::run_synthetic;
use leakgen::metrics::{MetricsRow, METRICS_HEADER};

fn main() -> leakgen::Result<()> {
    env_logger::init();
    let mut cfg = ExperimentConfig::preset("desk")?;
    for arg in std::env::args().skip(1) {
        if let Some((k, v)) = arg.split_once('=') {
            cfg.set(k, v)?;
        }
    }
    let data = leakgen::experiment::synthetic_data(&cfg)?;
    eprintln!(
        "oracle self-NLL on held-out: {:?}",
        data.oracle.nll(&data.test)
    );
    let start = Instant::now();
    let mut rows: Vec<MetricsRow> = Vec::new();
    let (_, summary) = run_synthetic(&cfg, &mut rows)?;
    println!("{METRICS_HEADER}");
    for r in &rows {
        println!("{}", r.to_csv());
    }
    println!("{summary:?}");
    eprintln!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
