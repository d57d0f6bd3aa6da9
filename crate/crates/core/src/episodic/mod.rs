//! Episodic meta-training: per-iteration domain split, a differentiable inner
//! step, a frozen-encoder memory rebuild, the second-order outer step and the
//! final memory commit.

mod steps;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use steps::{
    finalize_memory, meta_test_step, meta_train_step, momentum_step, rebuild_memory, MetaTest, MetaTrain, StepSettings,
};

use crate::batch::SegBatch;
use crate::domains::{heavy_augment, mix_seed, standard_augment, Augmentation, DomainPool, SceneSample};
use crate::error::{Error, Result};
use crate::graph::{no_grad, Group, ParamSet, ParamValues, Tensor};
use crate::losses::{self, argmax_labels, LossWeights};
use crate::memory::{self, MemoryMatrix};
use crate::nets::{SegNet, SegNetConfig};

/// Training variants; each maps onto one cell of the
/// aggregate/episodic x memory x meta-learning factorization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Episodic split, memory, second-order meta-learning.
    Full,
    /// Episodic split and meta-learning on the plain encoder-decoder.
    NoMemory,
    /// Episodic split and memory; the lookahead is detached (first order).
    NoSecondOrder,
    /// One combined batch, plain cross-entropy, no memory.
    Aggregate,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::Full, TrainMode::NoMemory, TrainMode::NoSecondOrder, TrainMode::Aggregate];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::NoMemory => "no-memory",
            TrainMode::NoSecondOrder => "no-second-order",
            TrainMode::Aggregate => "aggregate",
        }
    }

    pub fn parse(s: &str) -> Option<TrainMode> {
        TrainMode::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, TrainMode::Full | TrainMode::NoSecondOrder)
    }

    pub fn is_episodic(self) -> bool {
        self != TrainMode::Aggregate
    }

    /// Network configuration for this mode (memory read path on or off).
    pub fn net_config(self, base: &SegNetConfig) -> SegNetConfig {
        SegNetConfig { read_memory: self.uses_memory(), ..base.clone() }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaRates {
    /// Inner step size; `None` means `beta / 4`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub sgd_momentum: f64,
    /// Route the inner-step update of the memory classifier through its
    /// momentum buffer as well.
    pub momentum_on_g: bool,
    /// Polynomial decay of both rates, `(1 - t/T)^poly_power`; 0 keeps them constant.
    pub poly_power: f64,
}

impl Default for MetaRates {
    fn default() -> Self {
        MetaRates { alpha: None, beta: 1e-2, sgd_momentum: 0.9, momentum_on_g: true, poly_power: 0.0 }
    }
}

impl MetaRates {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.beta / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) || !(self.alpha() >= 0.0 && self.alpha().is_finite()) {
            return Err(Error::config("learning rates must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::config("sgd_momentum must lie in [0,1)"));
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return Err(Error::config("poly_power must be finite and non-negative"));
        }
        Ok(())
    }

    /// Multiplier applied to both rates at iteration `t` of `total`.
    pub fn scale(&self, t: usize, total: usize) -> f64 {
        if self.poly_power == 0.0 || total == 0 {
            return 1.0;
        }
        (1.0 - t.min(total) as f64 / total as f64).powf(self.poly_power)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// One source domain whose meta-test batches are heavily augmented.
    pub single_source: bool,
    pub iterations: usize,
    pub seed: u64,
    /// Samples drawn from each domain on each side of the split.
    pub batch_per_domain: usize,
    /// Memory momentum `m`.
    pub memory_momentum: f64,
    pub loss: LossWeights,
    pub rates: MetaRates,
    /// Standard augmentation; `Augmentation::none()` feeds raw pool samples.
    pub augment: Augmentation,
    /// Extra photometric augmentation of the single-source meta-test batch.
    pub meta_test_augment: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Full,
            single_source: false,
            iterations: 2000,
            seed: 0,
            batch_per_domain: 4,
            memory_momentum: 0.8,
            loss: LossWeights::default(),
            rates: MetaRates::default(),
            augment: Augmentation::default(),
            meta_test_augment: Augmentation::heavy(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.rates.validate()?;
        if !(0.0..=1.0).contains(&self.memory_momentum) {
            return Err(Error::config(format!("memory momentum {} outside [0,1]", self.memory_momentum)));
        }
        if self.batch_per_domain == 0 {
            return Err(Error::config("batch_per_domain must be positive"));
        }
        if self.single_source && !self.mode.is_episodic() {
            return Err(Error::config("single-source training needs an episodic mode"));
        }
        self.augment.validate()?;
        self.meta_test_augment.validate()
    }

    pub fn step_settings(&self) -> StepSettings {
        StepSettings {
            alpha: self.rates.alpha(),
            memory_momentum: self.memory_momentum,
            loss: self.loss,
            second_order: self.mode != TrainMode::NoSecondOrder,
        }
    }
}

/// Committed training state. Lookahead parameters never live here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub params: ParamValues,
    pub memory: Option<MemoryMatrix>,
    /// SGD momentum buffers, same layout as `params`.
    pub velocity: ParamValues,
    /// Number of completed iterations.
    pub iteration: usize,
    /// Base seed of the per-iteration random streams.
    pub seed: u64,
}

/// Which source domains feed each side of one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainSplit {
    pub meta_train: Vec<String>,
    pub meta_test: Vec<String>,
    /// Meta-test batch is drawn from the meta-train domain and heavily augmented.
    pub heavy_meta_test: bool,
}

/// Random disjoint, non-empty partition of `domains`; with
/// `single_source` the lone domain plays both roles.
pub fn split_domains<R: Rng>(domains: &[String], single_source: bool, rng: &mut R) -> Result<DomainSplit> {
    if domains.is_empty() {
        return Err(Error::input("cannot split an empty domain list"));
    }
    if single_source {
        if domains.len() != 1 {
            return Err(Error::config(format!("single-source mode needs exactly 1 domain, got {}", domains.len())));
        }
        return Ok(DomainSplit { meta_train: domains.to_vec(), meta_test: domains.to_vec(), heavy_meta_test: true });
    }
    if domains.len() < 2 {
        return Err(Error::config("multi-source episodes need at least 2 domains"));
    }
    let mut order = domains.to_vec();
    order.shuffle(rng);
    let cut = rng.gen_range(1..order.len());
    let meta_test = order.split_off(cut);
    Ok(DomainSplit { meta_train: order, meta_test, heavy_meta_test: false })
}

/// Draws `per_domain` random training samples from each listed pool,
/// standard-augments them, then applies the photometric part of `heavy`
/// when given.
pub fn sample_batch<R: Rng>(
    pools: &[DomainPool],
    domains: &[String],
    per_domain: usize,
    augment: &Augmentation,
    heavy: Option<&Augmentation>,
    rng: &mut R,
) -> Result<SegBatch> {
    let mut samples: Vec<SceneSample> = Vec::with_capacity(domains.len() * per_domain);
    for id in domains {
        let pool = pools
            .iter()
            .find(|p| &p.id == id)
            .ok_or_else(|| Error::config(format!("unknown domain `{id}`")))?;
        if pool.train.is_empty() {
            return Err(Error::input(format!("domain `{id}` has no training samples")));
        }
        for _ in 0..per_domain {
            let base = &pool.train[rng.gen_range(0..pool.train.len())];
            let mut s = standard_augment(base, augment, rng)?;
            if let Some(h) = heavy {
                s = heavy_augment(&s, &h.jitter, &h.blur, rng);
            }
            samples.push(s);
        }
    }
    SceneSample::to_batch(&samples)
}

/// One row of the metrics log. Columns that a mode does not compute are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub t: usize,
    pub l_seg: f64,
    pub l_coh: Option<f64>,
    pub l_div: Option<f64>,
    pub l_read_mte: Option<f64>,
    pub wall_ms: f64,
}

impl IterationMetrics {
    pub const CSV_HEADER: &'static str = "t,L_seg,L_coh,L_div,L_read_mte,wall_ms";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        format!(
            "{},{:.17e},{},{},{},{:.3}",
            self.t,
            self.l_seg,
            opt(self.l_coh),
            opt(self.l_div),
            opt(self.l_read_mte),
            self.wall_ms
        )
    }

    /// Loss columns only, for determinism comparisons.
    pub fn losses(&self) -> (f64, Option<f64>, Option<f64>, Option<f64>) {
        (self.l_seg, self.l_coh, self.l_div, self.l_read_mte)
    }
}

const INIT_STREAM: u64 = 0x494E_4954;
const ITER_STREAM: u64 = 0x4954_4552;

/// Owns the network, configuration and source pools for one training run.
pub struct Trainer<'a> {
    net: SegNet,
    cfg: TrainConfig,
    pools: &'a [DomainPool],
    sources: Vec<String>,
}

impl<'a> Trainer<'a> {
    /// Validates everything up front. `base` is adjusted to the mode (memory
    /// read path on or off).
    pub fn new(base: &SegNetConfig, cfg: TrainConfig, pools: &'a [DomainPool], sources: &[String]) -> Result<Self> {
        cfg.validate()?;
        let net = SegNet::new(cfg.mode.net_config(base))?;
        if sources.is_empty() {
            return Err(Error::config("no source domains"));
        }
        for s in sources {
            if !pools.iter().any(|p| &p.id == s) {
                return Err(Error::config(format!("source domain `{s}` has no pool")));
            }
        }
        if cfg.mode.is_episodic() {
            if cfg.single_source && sources.len() != 1 {
                return Err(Error::config("single-source mode needs exactly one source domain"));
            }
            if !cfg.single_source && sources.len() < 2 {
                return Err(Error::config("episodic multi-source training needs at least two source domains"));
            }
        }
        Ok(Trainer { net, cfg, pools, sources: sources.to_vec() })
    }

    pub fn net(&self) -> &SegNet {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn sources(&self) -> &[String] {
        &self.sources
    }

    fn source_pools(&self) -> impl Iterator<Item = &DomainPool> {
        self.pools.iter().filter(|p| self.sources.contains(&p.id))
    }

    /// Seeded parameters, zero momentum and (for memory modes) a memory
    /// initialized from every source training image.
    pub fn initial_state(&self) -> Result<EpisodeState> {
        let params = self.net.init_params(mix_seed(&[self.cfg.seed, INIT_STREAM]));
        let memory = if self.cfg.mode.uses_memory() {
            let mut samples: Vec<&SceneSample> = self.source_pools().flat_map(|p| p.train.iter()).collect();
            samples.sort_by(|a, b| a.domain_id.cmp(&b.domain_id));
            let batches = samples
                .chunks(16)
                .map(|c| SceneSample::to_batch(&c.iter().map(|s| (*s).clone()).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            Some(memory::init_memory(&self.net, &params.to_constants(), batches)?)
        } else {
            None
        };
        Ok(EpisodeState { velocity: params.zeros_like(), params, memory, iteration: 0, seed: self.cfg.seed })
    }

    /// Random stream of iteration `t`; independent of how many iterations
    /// ran before, which makes resumed runs reproduce uninterrupted ones.
    pub fn iteration_rng(&self, t: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, ITER_STREAM]));
        rng.set_stream(t as u64);
        rng
    }

    /// Runs one iteration and commits it into `state`.
    pub fn step(&self, state: &mut EpisodeState) -> Result<IterationMetrics> {
        let start = Instant::now();
        let t = state.iteration;
        let mut rng = self.iteration_rng(t);
        let metrics = match self.cfg.mode {
            TrainMode::Aggregate => self.aggregate_step(state, &mut rng)?,
            _ => self.episodic_step(state, &mut rng)?,
        };
        if !state.params.is_finite() {
            return Err(Error::Numeric { iteration: t, detail: "committed parameters are not finite".into() });
        }
        state.iteration += 1;
        Ok(IterationMetrics { wall_ms: start.elapsed().as_secs_f64() * 1e3, ..metrics })
    }

    fn aggregate_step(&self, state: &mut EpisodeState, rng: &mut ChaCha8Rng) -> Result<IterationMetrics> {
        let t = state.iteration;
        let batch = sample_batch(self.pools, &self.sources, self.cfg.batch_per_domain, &self.cfg.augment, None, rng)?;
        let theta = state.params.to_leaves();
        let logits = self.net.segment_plain(&theta, &batch.image_tensor())?;
        let loss = losses::seg_loss(&logits, &batch.labels)?;
        check_finite(t, "aggregate L_seg", loss.item())?;
        let leaves = theta.tensors(&Group::ALL);
        let grads = crate::graph::grad(&loss, &leaves, false)?;
        let names = theta.names(&Group::ALL);
        let r = &self.cfg.rates;
        let beta = r.beta * r.scale(t, self.cfg.iterations);
        momentum_step(&mut state.params, &mut state.velocity, &names, &grads, beta, r.sgd_momentum);
        Ok(IterationMetrics { t, l_seg: loss.item(), l_coh: None, l_div: None, l_read_mte: None, wall_ms: 0.0 })
    }

    fn episodic_step(&self, state: &mut EpisodeState, rng: &mut ChaCha8Rng) -> Result<IterationMetrics> {
        let t = state.iteration;
        let cfg = &self.cfg;
        let scale = cfg.rates.scale(t, cfg.iterations);
        let mut settings = cfg.step_settings();
        settings.alpha *= scale;
        let split = split_domains(&self.sources, cfg.single_source, rng)?;
        let x_mtr = sample_batch(self.pools, &split.meta_train, cfg.batch_per_domain, &cfg.augment, None, rng)?;

        let theta = state.params.to_leaves();
        let inner = meta_train_step(&self.net, &theta, state.memory.as_ref(), &x_mtr, &settings)?;
        check_finite(t, "meta-train L_seg", inner.l_seg)?;
        if let Some(v) = inner.l_div {
            check_finite(t, "meta-train L_div", v)?;
        }

        let m_prime = match &state.memory {
            Some(mem) => Some(rebuild_memory(&self.net, &inner.lookahead, mem, &x_mtr, cfg.memory_momentum)?),
            None => None,
        };

        let heavy = split.heavy_meta_test.then_some(&cfg.meta_test_augment);
        let x_mte = sample_batch(self.pools, &split.meta_test, cfg.batch_per_domain, &cfg.augment, heavy, rng)?;
        let outer = meta_test_step(&self.net, &theta, &inner, m_prime.as_ref().map(|u| &u.rows), &x_mte, &settings)?;
        check_finite(t, "meta-test L_read", outer.loss)?;

        // G is committed from the inner step, E, U, D from the outer one.
        let r = &cfg.rates;
        if !inner.grads_g.is_empty() {
            let names = theta.names(&[Group::G]);
            if r.momentum_on_g {
                momentum_step(&mut state.params, &mut state.velocity, &names, &inner.grads_g, settings.alpha, r.sgd_momentum);
            } else {
                momentum_step(&mut state.params, &mut state.velocity, &names, &inner.grads_g, settings.alpha, 0.0);
            }
        }
        let names = theta.names(&[Group::E, Group::U, Group::D]);
        momentum_step(&mut state.params, &mut state.velocity, &names, &outer.grads, r.beta * scale, r.sgd_momentum);

        if let Some(mem) = &state.memory {
            state.memory = Some(finalize_memory(&self.net, &state.params, mem, &x_mtr, cfg.memory_momentum)?);
        }
        Ok(IterationMetrics {
            t,
            l_seg: inner.l_seg,
            l_coh: inner.l_coh,
            l_div: inner.l_div,
            l_read_mte: Some(outer.loss),
            wall_ms: 0.0,
        })
    }

    /// Runs until `state.iteration == iterations`, calling `observe` after
    /// every committed iteration.
    pub fn run<F>(&self, state: &mut EpisodeState, mut observe: F) -> Result<Vec<IterationMetrics>>
    where
        F: FnMut(&EpisodeState, &IterationMetrics) -> Result<()>,
    {
        let mut log = Vec::new();
        while state.iteration < self.cfg.iterations {
            let m = self.step(state)?;
            observe(state, &m)?;
            log.push(m);
        }
        Ok(log)
    }

    /// Fresh state trained for the configured number of iterations.
    pub fn train(&self) -> Result<(EpisodeState, Vec<IterationMetrics>)> {
        let mut state = self.initial_state()?;
        let log = self.run(&mut state, |_, _| Ok(()))?;
        Ok((state, log))
    }
}

fn check_finite(iteration: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { iteration, detail: format!("{what} = {v}") })
    }
}

/// Logits `B x N x H x W` of the committed model; the memory is read, never written.
pub fn predict_logits(net: &SegNet, params: &ParamValues, memory: Option<&MemoryMatrix>, images: &Tensor) -> Result<Tensor> {
    let p = params.to_constants();
    no_grad(|| -> Result<Tensor> {
        if !net.config().read_memory {
            return net.segment_plain(&p, images);
        }
        let mem = memory.ok_or_else(|| Error::input("this network reads memory but no memory was given"))?;
        let m = mem.to_tensor();
        let f = net.encode(&p, images)?;
        let w = memory::read_weights(&m, &f)?;
        let fused = memory::read_fuse(net, &p, &f, &m, &w)?;
        net.decode(&p, &fused)
    })
}

/// Per-pixel class prediction of the committed model.
pub fn infer(net: &SegNet, params: &ParamValues, memory: Option<&MemoryMatrix>, batch: &SegBatch) -> Result<Vec<u8>> {
    Ok(argmax_labels(&predict_logits(net, params, memory, &batch.image_tensor())?))
}

/// Plain L_read at a constant memory, used by callers that want the
/// single-step reference objective.
pub fn read_objective(net: &SegNet, params: &ParamSet, memory: &MemoryMatrix, batch: &SegBatch, loss: &LossWeights) -> Result<Tensor> {
    Ok(losses::read_loss(net, params, &memory.to_tensor(), batch, loss)?.total)
}
