//! `pinmem gen|train|eval|ablate|activations`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::domains::{dump_dataset, SceneSample};
use crate::episodic::{IterationMetrics, TrainMode};
use crate::error::{Error, Result};
use crate::evalkit::{activation_maps, summarize, RunResult};
use crate::experiment::{lambda_sweep_variants, mode_variants, Experiment};
use crate::nets::SegNet;
use crate::raster;

#[derive(Debug, Parser)]
#[command(name = "pinmem", version, about = "Memory-guided meta-learning for domain-generalized segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed (the dataset seed for `gen`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the training mode.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TrainMode>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset as PPM/PGM files plus a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model; `--checkpoint` resumes from a saved state.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Per-domain mIoU of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated domain ids; defaults to the configured targets.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<String>>,
    },
    /// Train and evaluate every mode (and optionally the loss sweep) over shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lambda_sweep: bool,
        /// Number of seeds, starting at `--seed` (default: configured list).
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Export memory read-weight heatmaps as PGM files.
    Activations {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated `<domain>_<train|test>_<index>` ids.
        #[arg(long, value_delimiter = ',', required = true)]
        images: Vec<String>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    TrainMode::parse(s).ok_or_else(|| {
        let all: Vec<_> = TrainMode::ALL.iter().map(|m| m.as_str()).collect();
        format!("unknown mode `{s}` (expected one of {})", all.join(", "))
    })
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(mode) = self.mode {
            cfg.train.mode = mode;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }
}

/// Runs the parsed command line, returning the process exit status.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { common } => {
            let mut cfg = common.load()?;
            if let Some(seed) = common.seed {
                cfg.data.seed = seed;
            }
            cfg.validate()?;
            cmd_gen(&cfg)
        }
        Command::Train { common, checkpoint, iterations } => {
            let mut cfg = common.load()?;
            if let Some(t) = iterations {
                cfg.train.iterations = t;
            }
            cfg.validate()?;
            cmd_train(&cfg, checkpoint.as_deref())
        }
        Command::Eval { common, checkpoint, targets } => {
            let mut cfg = common.load()?;
            if let Some(t) = targets {
                cfg.targets = t;
            }
            cfg.validate()?;
            cmd_eval(&cfg, &checkpoint).map(|_| ())
        }
        Command::Ablate { common, lambda_sweep, seeds, jobs, iterations } => {
            let mut cfg = common.load()?;
            if let Some(n) = seeds {
                let first = common.seed.unwrap_or(0);
                let end = first.checked_add(n).ok_or_else(|| Error::config("seed range overflows"))?;
                cfg.ablate.seeds = (first..end).collect();
            } else if let Some(s) = common.seed {
                cfg.ablate.seeds = vec![s];
            }
            if let Some(j) = jobs {
                cfg.ablate.jobs = j;
            }
            if let Some(t) = iterations {
                cfg.train.iterations = t;
            }
            cfg.ablate.lambda_sweep |= lambda_sweep;
            cfg.validate()?;
            cmd_ablate(&cfg)
        }
        Command::Activations { common, checkpoint, images } => {
            let cfg = common.load()?;
            cfg.validate()?;
            cmd_activations(&cfg, &checkpoint, &images)
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    raster::write_file(path, text.as_bytes())
}

/// Records the validated configuration next to the outputs.
fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let exp = Experiment::new(cfg.clone())?;
    write_config(cfg, &cfg.output_dir)?;
    let manifest = dump_dataset(exp.pools(), &cfg.data, &cfg.output_dir)?;
    for (id, train, test) in &manifest.counts {
        println!("{id}: {train} train, {test} test");
    }
    println!("content hash {}", manifest.content_hash);
    Ok(())
}

fn checkpoint_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("iter_{t:06}.pmck"))
}

/// Metrics rows already on disk with `t < keep`.
fn existing_rows(path: &Path, keep: usize) -> Result<Vec<String>> {
    let Ok(file) = File::open(path) else { return Ok(Vec::new()) };
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t: usize = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(usize::MAX);
        if t < keep {
            rows.push(line);
        }
    }
    Ok(rows)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let mut cfg = cfg.clone();
    let resumed = resume.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resumed {
        if ck.mode != cfg.train.mode || ck.net != cfg.train.mode.net_config(&cfg.net) {
            return Err(Error::config(format!(
                "checkpoint was trained in mode {} with a different network than the configuration",
                ck.mode
            )));
        }
        cfg.train.seed = ck.state.seed;
    }
    let exp = Experiment::new(cfg.clone())?;
    let dir = cfg.output_dir.clone();
    write_config(&cfg, &dir)?;
    let trainer = exp.trainer(cfg.train.clone())?;
    let mut state = match resumed {
        Some(ck) => ck.state,
        None => trainer.initial_state()?,
    };

    let metrics_path = dir.join("metrics.csv");
    let kept = existing_rows(&metrics_path, if resume.is_some() { state.iteration } else { 0 })?;
    let mut csv = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut header = String::from(IterationMetrics::CSV_HEADER);
    header.push('\n');
    for r in &kept {
        header.push_str(r);
        header.push('\n');
    }
    csv.write_all(header.as_bytes()).map_err(|e| Error::io(&metrics_path, e))?;

    let every = cfg.checkpoint_every;
    let mode = cfg.train.mode;
    let net_cfg = trainer.net().config().clone();
    let log = trainer.run(&mut state, |st, m| {
        writeln!(csv, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        if every > 0 && st.iteration % every == 0 {
            let ck = Checkpoint { net: net_cfg.clone(), mode, state: st.clone() };
            ck.save(&checkpoint_path(&dir, st.iteration))?;
        }
        if st.iteration % 100 == 0 {
            eprintln!("[{mode}] iteration {} L_seg {:.4}", st.iteration, m.l_seg);
        }
        Ok(())
    })?;
    let final_ck = Checkpoint { net: net_cfg, mode, state: state.clone() };
    final_ck.save(&dir.join("final.pmck"))?;

    let all = existing_rows(&metrics_path, usize::MAX)?;
    let column = |k: usize| -> Vec<f64> {
        all.iter().map(|r| r.split(',').nth(k).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)).collect()
    };
    let chart = raster::line_chart(&[column(1), column(4)], 480, 240);
    raster::write_file(&dir.join("loss_curve.ppm"), &chart.to_ppm())?;
    println!(
        "trained {} iterations ({} this run) in mode {mode}; final checkpoint {}",
        state.iteration,
        log.len(),
        dir.join("final.pmck").display()
    );
    Ok(())
}

/// Loads a checkpoint and checks it against the configuration.
fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Checkpoint, SegNet)> {
    let ck = Checkpoint::load(path)?;
    if ck.net.num_classes != cfg.net.num_classes {
        return Err(Error::config(format!(
            "checkpoint has {} classes but the configuration has {}",
            ck.net.num_classes, cfg.net.num_classes
        )));
    }
    let net = SegNet::new(ck.net.clone())?;
    Ok((ck, net))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let (ck, net) = load_model(cfg, checkpoint)?;
    if cfg.targets.is_empty() {
        return Err(Error::config("no target domains to evaluate"));
    }
    let exp = Experiment::new(cfg.clone())?;
    let results = exp.evaluate_state(ck.mode.as_str(), &net, &ck.state, &cfg.targets)?;
    let summary = summarize(&results)?;
    ensure_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("eval.csv"), &summary.runs_csv())?;
    print!("{}", summary.table());
    Ok(results)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let exp = Experiment::new(cfg.clone())?;
    let dir = &cfg.output_dir;
    write_config(cfg, dir)?;
    let mut variants = mode_variants(cfg);
    if cfg.ablate.lambda_sweep {
        variants.extend(lambda_sweep_variants(cfg));
    }
    let runs = exp.run_grid(&variants, &cfg.ablate.seeds, cfg.ablate.jobs, |r| {
        let m: Vec<String> = r.results.iter().map(|x| format!("{}={:.4}", x.domain, x.miou)).collect();
        eprintln!("{} seed {}: {} ({:.1}s)", r.variant, r.seed, m.join(" "), r.wall_s);
    })?;
    let results: Vec<RunResult> = runs.iter().flat_map(|r| r.results.clone()).collect();
    let summary = summarize(&results)?;
    write_text(&dir.join("runs.csv"), &summary.runs_csv())?;
    write_text(&dir.join("summary.txt"), &summary.table())?;
    let json = serde_json::to_string_pretty(&runs).expect("runs serialize");
    write_text(&dir.join("runs.json"), &json)?;
    let bars: Vec<(f64, f64, f64)> = summary.rows.iter().map(|r| (r.mean, r.min, r.max)).collect();
    raster::write_file(&dir.join("miou_bars.ppm"), &raster::bar_chart(&bars, 64 * bars.len().max(1), 240).to_ppm())?;
    print!("{}", summary.table());
    Ok(())
}

/// Looks up `<domain>_<split>_<index>`.
fn find_image<'a>(exp: &'a Experiment, id: &str) -> Result<&'a SceneSample> {
    let unknown = || Error::input(format!("unknown image id `{id}` (expected <domain>_<train|test>_<index>)"));
    let mut parts = id.rsplitn(3, '_');
    let (index, split, domain) = (parts.next(), parts.next(), parts.next());
    let (Some(index), Some(split), Some(domain)) = (index, split, domain) else { return Err(unknown()) };
    let index: usize = index.parse().map_err(|_| unknown())?;
    let pool = exp.pool(domain).map_err(|_| unknown())?;
    let samples = match split {
        "train" => &pool.train,
        "test" => &pool.test,
        _ => return Err(unknown()),
    };
    samples.get(index).ok_or_else(unknown)
}

pub fn cmd_activations(cfg: &RunConfig, checkpoint: &Path, images: &[String]) -> Result<()> {
    cfg.validate()?;
    let (ck, net) = load_model(cfg, checkpoint)?;
    let memory = ck.state.memory.as_ref().ok_or_else(|| Error::input("checkpoint has no memory (trained without it)"))?;
    let exp = Experiment::new(cfg.clone())?;
    let samples = images.iter().map(|id| find_image(&exp, id)).collect::<Result<Vec<_>>>()?;
    let dir = cfg.output_dir.join("activations");
    for (id, sample) in images.iter().zip(samples) {
        let batch = SceneSample::to_batch(std::slice::from_ref(sample))?;
        let maps = activation_maps(&net, &ck.state.params, memory, &batch)?;
        let files = maps.write_pgms(&dir, id)?;
        println!(
            "{id}: {} maps {}x{}, channel-sum error {:.2e}, argmax agreement {:.4}",
            files.len(),
            maps.height,
            maps.width,
            maps.max_channel_sum_error(),
            maps.agreement
        );
    }
    Ok(())
}
