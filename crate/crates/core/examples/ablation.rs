//! A small ablation grid: every training mode plus the loss-weight sweep,
//! over a few seeds, summarized by mean/min/max mIoU on the held-out domain.
//!
//!     cargo run --release --example ablation -- [iterations] [seeds]

use pinmem::config::RunConfig;
use pinmem::evalkit::{summarize, RunResult};
use pinmem::experiment::{lambda_sweep_variants, mode_variants, Experiment};

fn main() -> pinmem::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|t| t.parse().ok()).unwrap_or(100);
    let seeds: u64 = args.get(2).and_then(|t| t.parse().ok()).unwrap_or(2);

    let mut cfg = RunConfig::default();
    cfg.train.iterations = iterations;
    cfg.train.rates.beta = 0.05;
    cfg.data.train_per_domain = 64;
    cfg.data.test_per_domain = 32;
    let exp = Experiment::new(cfg)?;

    let mut variants = mode_variants(exp.config());
    variants.extend(lambda_sweep_variants(exp.config()));
    let seeds: Vec<u64> = (0..seeds).collect();
    let runs = exp.run_grid(&variants, &seeds, 1, |r| eprintln!("  {} seed {} done in {:.1}s", r.variant, r.seed, r.wall_s))?;
    let results: Vec<RunResult> = runs.into_iter().flat_map(|r| r.results).collect();
    print!("{}", summarize(&results)?.table());
    Ok(())
}
