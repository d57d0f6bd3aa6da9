//! Memory read weights as images: for each class, how strongly every pixel
//! attends to that class's memory row. Writes one PGM per class.
//!
//!     cargo run --release --example activation_maps -- [out_dir] [iterations]

use std::path::PathBuf;

use pinmem::domains::{build_pools, default_domains, DatasetConfig, SceneSample};
use pinmem::episodic::{TrainConfig, Trainer};
use pinmem::evalkit::activation_maps;
use pinmem::nets::SegNetConfig;
use pinmem::raster::{encode_ppm, write_file};

fn main() -> pinmem::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "target/examples/activations".into()));
    let iterations = args.get(2).and_then(|t| t.parse().ok()).unwrap_or(300);

    let pools = build_pools(&default_domains(), &DatasetConfig { train_per_domain: 64, test_per_domain: 8, ..Default::default() })?;
    let mut cfg = TrainConfig { iterations, ..TrainConfig::default() };
    cfg.rates.beta = 0.05;
    let trainer = Trainer::new(&SegNetConfig::default(), cfg, &pools, &["vivid".into(), "dusk".into()])?;
    let (state, _) = trainer.train()?;
    let memory = state.memory.as_ref().expect("full mode keeps a memory");

    for pool in &pools {
        let sample = &pool.test[0];
        let id = format!("{}_test_0", pool.id);
        let maps = activation_maps(trainer.net(), &state.params, memory, &SceneSample::to_batch(std::slice::from_ref(sample))?)?;
        maps.write_pgms(&out, &id)?;
        write_file(&out.join(format!("{id}.ppm")), &encode_ppm(&sample.image, sample.height, sample.width))?;
        println!(
            "{id}: {} maps of {}x{}, channel sums within {:.1e} of 1, argmax agrees with the prediction on {:.1}% of pixels",
            maps.maps.len(),
            maps.height,
            maps.width,
            maps.max_channel_sum_error(),
            100.0 * maps.agreement
        );
    }
    println!("wrote maps to {}", out.display());
    Ok(())
}
