//! Train/evaluate drivers shared by the command line and the benchmark suite.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::domains::{build_pools, DomainPool, Manifest};
use crate::episodic::{EpisodeState, IterationMetrics, TrainConfig, TrainMode, Trainer};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, miou, RunResult};
use crate::losses::LossWeights;
use crate::nets::SegNet;

/// A named training configuration inside an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub id: String,
    pub mode: TrainMode,
    pub loss: LossWeights,
}

/// One variant per configured mode, with the configured loss weights.
pub fn mode_variants(cfg: &RunConfig) -> Vec<Variant> {
    cfg.ablate
        .modes
        .iter()
        .map(|&mode| Variant { id: mode.as_str().to_string(), mode, loss: cfg.train.loss })
        .collect()
}

/// Full mode with only the cohesion term, only the divergence term, and both.
pub fn lambda_sweep_variants(cfg: &RunConfig) -> Vec<Variant> {
    let w = cfg.train.loss;
    [
        ("lambda1-only", LossWeights { lambda2: 0.0, ..w }),
        ("lambda2-only", LossWeights { lambda1: 0.0, ..w }),
        ("lambda1+lambda2", w),
    ]
    .into_iter()
    .map(|(id, loss)| Variant { id: id.to_string(), mode: TrainMode::Full, loss })
    .collect()
}

/// A trained model with its metrics log.
pub struct TrainedModel {
    pub net: SegNet,
    pub mode: TrainMode,
    pub state: EpisodeState,
    pub log: Vec<IterationMetrics>,
}

impl TrainedModel {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { net: self.net.config().clone(), mode: self.mode, state: self.state.clone() }
    }
}

/// Outcome of one (variant, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub variant: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub final_loss: f64,
    pub wall_s: f64,
    pub results: Vec<RunResult>,
}

/// Dataset pools built once from a validated [`RunConfig`].
pub struct Experiment {
    cfg: RunConfig,
    pools: Vec<DomainPool>,
    manifest: Manifest,
}

impl Experiment {
    pub fn new(cfg: RunConfig) -> Result<Experiment> {
        cfg.validate()?;
        let pools = build_pools(&cfg.domains, &cfg.data)?;
        let manifest = Manifest::describe(&pools, &cfg.data);
        Ok(Experiment { cfg, pools, manifest })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn pools(&self) -> &[DomainPool] {
        &self.pools
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn pool(&self, id: &str) -> Result<&DomainPool> {
        self.pools.iter().find(|p| p.id == id).ok_or_else(|| Error::config(format!("unknown domain `{id}`")))
    }

    /// Training configuration of `variant` at `seed`.
    pub fn train_config(&self, variant: &Variant, seed: u64) -> TrainConfig {
        TrainConfig { mode: variant.mode, loss: variant.loss, seed, ..self.cfg.train.clone() }
    }

    pub fn trainer(&self, train: TrainConfig) -> Result<Trainer<'_>> {
        Trainer::new(&self.cfg.net, train, &self.pools, &self.cfg.sources)
    }

    pub fn train(&self, variant: &Variant, seed: u64) -> Result<TrainedModel> {
        let trainer = self.trainer(self.train_config(variant, seed))?;
        let (state, log) = trainer.train()?;
        Ok(TrainedModel { net: trainer.net().clone(), mode: variant.mode, state, log })
    }

    /// mIoU of `model` on the test split of every listed domain.
    pub fn evaluate(&self, config_id: &str, model: &TrainedModel, domains: &[String]) -> Result<Vec<RunResult>> {
        self.evaluate_state(config_id, &model.net, &model.state, domains)
    }

    pub fn evaluate_state(&self, config_id: &str, net: &SegNet, state: &EpisodeState, domains: &[String]) -> Result<Vec<RunResult>> {
        domains
            .iter()
            .map(|d| {
                let cm = evaluate(net, &state.params, state.memory.as_ref(), &self.pool(d)?.test, self.cfg.eval_batch)?;
                let r = miou(&cm)?;
                Ok(RunResult {
                    config_id: config_id.to_string(),
                    seed: state.seed,
                    domain: d.clone(),
                    miou: r.mean,
                    per_class: r.per_class,
                })
            })
            .collect()
    }

    /// Trains and evaluates every `(variant, seed)` pair, running up to
    /// `jobs` cells at once. Results come back in grid order regardless of
    /// completion order; `progress` sees each cell as it finishes.
    pub fn run_grid<P>(&self, variants: &[Variant], seeds: &[u64], jobs: usize, progress: P) -> Result<Vec<GridRun>>
    where
        P: Fn(&GridRun) + Sync,
    {
        let cells: Vec<(&Variant, u64)> = variants.iter().flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<GridRun>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
        let worker = || loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(&(variant, seed)) = cells.get(i) else { break };
            let out = self.run_cell(variant, seed);
            if let Ok(run) = &out {
                progress(run);
            }
            slots.lock().expect("no poisoned workers")[i] = Some(out);
        };
        std::thread::scope(|scope| {
            for _ in 0..jobs.max(1).min(cells.len().max(1)) {
                scope.spawn(worker);
            }
        });
        slots.into_inner().expect("no poisoned workers").into_iter().map(|r| r.expect("every cell ran")).collect()
    }

    fn run_cell(&self, variant: &Variant, seed: u64) -> Result<GridRun> {
        let start = Instant::now();
        let model = self.train(variant, seed)?;
        let results = self.evaluate(&variant.id, &model, &self.cfg.targets)?;
        Ok(GridRun {
            variant: variant.id.clone(),
            seed,
            dataset_hash: self.manifest.content_hash.clone(),
            final_loss: model.log.last().map(|m| m.l_seg).unwrap_or(f64::NAN),
            wall_s: start.elapsed().as_secs_f64(),
            results,
        })
    }
}
