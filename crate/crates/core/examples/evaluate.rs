//! Trains a model briefly, then scores it on every domain with a confusion
//! matrix and per-class IoU. Classes absent from both prediction and truth
//! are left out of the mean rather than counted as 0 or 1.
//!
//!     cargo run --release --example evaluate -- [iterations]

use pinmem::domains::{build_pools, default_domains, DatasetConfig};
use pinmem::episodic::{TrainConfig, TrainMode, Trainer};
use pinmem::evalkit::{evaluate, miou, ConfusionMatrix};
use pinmem::nets::SegNetConfig;

fn main() -> pinmem::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|t| t.parse().ok()).unwrap_or(200);
    let pools = build_pools(&default_domains(), &DatasetConfig { train_per_domain: 64, test_per_domain: 32, ..Default::default() })?;
    let sources = vec!["vivid".to_string(), "dusk".to_string()];
    let mut cfg = TrainConfig { mode: TrainMode::Full, iterations, ..TrainConfig::default() };
    cfg.rates.beta = 0.05;
    let trainer = Trainer::new(&SegNetConfig::default(), cfg, &pools, &sources)?;
    let (state, _) = trainer.train()?;

    for pool in &pools {
        let cm = evaluate(trainer.net(), &state.params, state.memory.as_ref(), &pool.test, 16)?;
        let r = miou(&cm)?;
        let tag = if sources.contains(&pool.id) { "seen" } else { "unseen" };
        let per: Vec<String> = r.per_class.iter().map(|v| v.map_or("  n/a".into(), |x| format!("{x:.3}"))).collect();
        println!("{:<7} ({tag:<6}) mIoU {:.4}  per class [{}]", pool.id, r.mean, per.join(" "));
    }

    // the convention on a hand-made matrix: class 2 never occurs and is skipped
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&[0, 0, 1, 1], &[0, 1, 1, 1])?;
    let r = miou(&cm)?;
    println!("toy matrix: per class {:?}, mean {:.4}", r.per_class, r.mean);
    Ok(())
}
