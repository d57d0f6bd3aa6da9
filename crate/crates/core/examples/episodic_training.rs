//! Episodic meta-training on two source domains, with a checkpoint
//! round trip at the end.
//!
//!     cargo run --release --example episodic_training -- [mode] [iterations]
//!
//! `mode` is one of full, no-memory, no-second-order, aggregate. Pass
//! `single` as a third argument to train on vivid alone, with heavily
//! augmented meta-test batches standing in for the second domain.

use pinmem::checkpoint::Checkpoint;
use pinmem::domains::{build_pools, default_domains, DatasetConfig};
use pinmem::episodic::{TrainConfig, TrainMode, Trainer};
use pinmem::nets::SegNetConfig;

fn main() -> pinmem::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).and_then(|m| TrainMode::parse(m)).unwrap_or(TrainMode::Full);
    let iterations = args.get(2).and_then(|t| t.parse().ok()).unwrap_or(300);
    let single = args.get(3).is_some_and(|s| s == "single");

    let pools = build_pools(&default_domains(), &DatasetConfig { train_per_domain: 64, test_per_domain: 16, ..Default::default() })?;
    let sources: Vec<String> = if single { vec!["vivid".into()] } else { vec!["vivid".into(), "dusk".into()] };
    let mut cfg = TrainConfig { mode, iterations, single_source: single, ..TrainConfig::default() };
    cfg.rates.beta = 0.05;
    let trainer = Trainer::new(&SegNetConfig::default(), cfg, &pools, &sources)?;

    let mut state = trainer.initial_state()?;
    let log = trainer.run(&mut state, |_, m| {
        if m.t % 50 == 0 {
            let (seg, coh, div, mte) = m.losses();
            let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!("t={:<5} L_seg {seg:.4}  L_coh {}  L_div {}  L_read(meta-test) {}", m.t, show(coh), show(div), show(mte));
        }
        Ok(())
    })?;
    let ms: f64 = log.iter().map(|m| m.wall_ms).sum::<f64>() / log.len().max(1) as f64;
    println!("{} iterations of {} at {ms:.1} ms each", log.len(), mode.as_str());

    let ck = Checkpoint { net: trainer.net().config().clone(), mode, state };
    let path = std::env::temp_dir().join("pinmem_example.pmck");
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    assert_eq!(back.state, ck.state);
    println!("checkpoint round trip ok: {}", path.display());
    Ok(())
}
