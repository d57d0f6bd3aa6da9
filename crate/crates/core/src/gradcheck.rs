//! Central finite-difference checks against reverse-mode gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::{grad, Tensor};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// One checked coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub probes: Vec<Probe>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares `grad(f(inputs))` with central differences of `f` at up to
/// `coords` random coordinates of every input. `f` is rebuilt from fresh
/// leaves for every evaluation, so it may be any pure function of its inputs.
pub fn check<F, R>(inputs: &[Tensor], coords: usize, step: f64, floor: f64, rng: &mut R, f: F) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    R: Rng,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| Tensor::param(t.to_vec(), t.shape())).collect::<std::result::Result<_, _>>()?;
    let analytic = grad(&f(&leaves)?, &leaves, false)?;
    let mut probes = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        let n = t.numel();
        for index in sample(rng, n, coords.min(n)) {
            let eval = |delta: f64| -> Result<f64> {
                let shifted: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let mut d = x.to_vec();
                        if j == k {
                            d[index] += delta;
                        }
                        Tensor::new(d, x.shape())
                    })
                    .collect::<std::result::Result<_, _>>()?;
                Ok(f(&shifted)?.item())
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let a = analytic[k].data()[index];
            probes.push(Probe { input: k, index, analytic: a, numeric, rel_err: rel_err(a, numeric, floor) });
        }
    }
    Ok(GradCheck { probes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checks_a_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::new(vec![0.3, -1.2, 2.0], &[3]).unwrap();
        let b = Tensor::new(vec![1.5, 0.7, -0.4], &[3]).unwrap();
        let r = check(&[a, b], 3, STEP, 1e-6, &mut rng, |x| Ok(x[0].mul(&x[1])?.exp().sum_all()))
            .unwrap();
        assert_eq!(r.probes.len(), 6);
        assert!(r.max_rel_err() < 1e-8, "{:?}", r.worst());
    }
}
