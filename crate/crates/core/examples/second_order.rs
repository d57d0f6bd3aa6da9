//! One episode by hand: the inner step on a meta-train batch, the memory
//! rebuild with a frozen encoder, and the outer gradient on a meta-test batch,
//! with and without the second-order terms.
//!
//!     cargo run --example second_order

use pinmem::domains::{default_domains, generate, SceneConfig, SceneSample};
use pinmem::episodic::{meta_test_step, meta_train_step, rebuild_memory, StepSettings};
use pinmem::graph::{Group, Tensor};
use pinmem::losses::LossWeights;
use pinmem::memory::init_memory;
use pinmem::nets::{SegNet, SegNetConfig};

fn batch(domain: usize, seeds: &[u64]) -> pinmem::Result<pinmem::batch::SegBatch> {
    let scene = SceneConfig { height: 16, width: 16, ..Default::default() };
    let spec = &default_domains()[domain];
    let s = seeds.iter().map(|&i| generate(spec, &scene, i, i + 1)).collect::<pinmem::Result<Vec<_>>>()?;
    SceneSample::to_batch(&s)
}

fn norm(ts: &[Tensor]) -> f64 {
    ts.iter().flat_map(|t| t.to_vec()).map(|v| v * v).sum::<f64>().sqrt()
}

fn main() -> pinmem::Result<()> {
    let net = SegNet::new(SegNetConfig { feature_channels: 8, hidden_channels: 6, encoder_depth: 1, output_stride: 2, ..Default::default() })?;
    let vals = net.init_params(7);
    let x_mtr = batch(0, &[1, 2])?;
    let x_mte = batch(1, &[3, 4])?;
    let mem = init_memory(&net, &vals.to_constants(), vec![x_mtr.clone(), x_mte.clone()])?;
    println!("{} parameters, memory {}x{}", vals.total(), mem.num_classes(), mem.channels());

    let mut grads = Vec::new();
    for second_order in [true, false] {
        let s = StepSettings { alpha: 0.01, memory_momentum: 0.8, loss: LossWeights::default(), second_order };
        let theta = vals.to_leaves();
        let inner = meta_train_step(&net, &theta, Some(&mem), &x_mtr, &s)?;
        let rebuilt = rebuild_memory(&net, &inner.lookahead, &mem, &x_mtr, s.memory_momentum)?;
        let outer = meta_test_step(&net, &theta, &inner, Some(&rebuilt.rows), &x_mte, &s)?;
        println!(
            "{:>12}: meta-test loss {:.5}, |grad E,U,D| {:.5}",
            if second_order { "second-order" } else { "first-order" },
            outer.loss,
            norm(&outer.grads)
        );
        grads.push(outer.grads);
    }
    let names = vals.to_leaves().names(&[Group::E, Group::U, Group::D]);
    println!("per-tensor difference between the two outer gradients:");
    for ((name, a), b) in names.iter().zip(&grads[0]).zip(&grads[1]) {
        let d: f64 = a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        println!("  {name:<18} {d:.3e}");
    }
    Ok(())
}
