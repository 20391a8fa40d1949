//! Generates the synthetic benchmark corpus and runs the full pipeline on it.
//!
//! Usage: `cargo run --release --example synthetic_benchmark -- [seed] [run_root]`

use std::path::PathBuf;
use std::time::Instant;

use fusc_core::pipeline::{run, RunConfig, Stage};
use fusc_core::synth::{generate, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let root = args.get(2).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fusc-benchmark"));
    let start = Instant::now();
    let corpus_dir = root.join(format!("corpus-{seed}"));
    let corpus = generate(&SynthConfig { seed, ..Default::default() }, &corpus_dir)?;
    let mut cfg = RunConfig::synthetic_benchmark(&corpus.manifest_path, &corpus.sidecar_path, seed);
    cfg.run_root = root.join("runs");
    let outcome = run(&cfg, &Stage::ALL)?;
    let report = outcome.report.expect("evaluate was requested");
    println!("{}", report.to_table());
    let kmeans = std::fs::read_to_string(outcome.run_dir.join("kmeans").join("report.txt"))?;
    println!("raw-pixel k-means baseline\n{kmeans}");
    println!("finished in {:.1}s ({} stages run)", start.elapsed().as_secs_f64(), outcome.executed.len());
    Ok(())
}
