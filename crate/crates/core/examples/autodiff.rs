//! Reverse-mode autodiff: gradients, gradients of gradients, and a
//! finite-difference check of a small expression.
//!
//!     cargo run --example autodiff

use pinmem::gradcheck;
use pinmem::graph::{grad, Tensor};
use rand::SeedableRng;

fn main() -> pinmem::Result<()> {
    // f(x) = sum(softmax(x) * x^2)
    let x = Tensor::param(vec![0.3, -1.2, 2.0, 0.5], &[4])?;
    let f = |x: &Tensor| -> pinmem::Result<Tensor> { Ok(x.softmax(0)?.mul(&x.mul(x)?)?.sum_all()) };
    let y = f(&x)?;
    let g = grad(&y, &[x.clone()], true)?.remove(0);
    println!("f(x)   = {:.6}", y.item());
    println!("df/dx  = {:?}", g.to_vec());

    // the gradient is itself differentiable: d/dx of sum(df/dx) is a Hessian row sum
    let hrow = grad(&g.sum_all(), &[x.clone()], false)?.remove(0);
    println!("H * 1  = {:?}", hrow.to_vec());

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let check = gradcheck::check(&[Tensor::new(x.to_vec(), &[4])?], 4, 1e-5, 1e-6, &mut rng, |t| f(&t[0]))?;
    println!("finite-difference check: max relative error {:.2e}", check.max_rel_err());
    Ok(())
}
