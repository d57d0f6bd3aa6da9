//! The class memory on its own: masked pooling of features into per-class
//! means, the momentum write, and the soft read back onto pixels.
//!
//!     cargo run --example memory_ops

use pinmem::batch::{one_hot, IGNORE_LABEL};
use pinmem::graph::Tensor;
use pinmem::memory::{masked_pool, momentum_update, read_weights, weighted_memory, MemoryMatrix};

fn main() -> pinmem::Result<()> {
    // one 1x4 image with 3-channel features and three classes
    let z = Tensor::new(
        vec![
            1.0, 0.9, 0.0, 0.1, //
            0.0, 0.1, 1.0, 0.8, //
            0.0, 0.0, 0.0, 0.6,
        ],
        &[1, 3, 1, 4],
    )?
    .l2_normalize(1, 1e-8)?;
    let labels = [0u8, 0, 1, IGNORE_LABEL];
    let y = one_hot(&labels, 1, 3, 1, 4)?;

    let pool = masked_pool(&z, &y)?;
    println!("pixels per class {:?}", pool.counts);
    // a second image whose class-0 pixels point elsewhere
    let z2 = Tensor::new(vec![0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0], &[1, 3, 1, 4])?.l2_normalize(1, 1e-8)?;
    let pool2 = masked_pool(&z2, &one_hot(&[0, 0, 1, 1], 1, 3, 1, 4)?)?;

    let mut mem = MemoryMatrix::zeros(3, 3);
    for (step, (m, p)) in [(0.8, &pool), (0.8, &pool2), (0.5, &pool2)].into_iter().enumerate() {
        mem = momentum_update(&mem, p, m)?;
        println!("after write {} (m = {m}): seen {:?}", step + 1, mem.class_seen());
        for n in 0..3 {
            println!("  row {n}: {:?}", mem.row(n).iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
        }
    }
    // class 2 never appears, so its row stays at zero and is never marked seen

    let w = read_weights(&mem.to_tensor(), &z)?;
    println!("read weights (class x pixel): {:?}", w.to_vec().iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    let read = weighted_memory(&mem.to_tensor(), &w)?;
    println!("memory read shape {:?}", read.shape());
    print!("{}", mem.to_csv());
    Ok(())
}
