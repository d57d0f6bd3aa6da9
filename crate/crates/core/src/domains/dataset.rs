//! Seeded per-domain sample pools and the on-disk dump format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate, DomainSpec, SceneConfig, SceneSample};
use crate::error::{Error, Result};
use crate::raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { seed: 0, train_per_domain: 256, test_per_domain: 64, scene: SceneConfig::default() }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.train_per_domain == 0 {
            return Err(Error::config("train_per_domain must be positive"));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer over a running state; used to derive independent
/// seeds from `(dataset seed, split, domain, index)`.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const TRAIN: u64 = 1;
const TEST: u64 = 2;
const STYLE: u64 = 0x5751_4C45;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainPool {
    pub id: String,
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

fn make_split(spec: &DomainSpec, d: usize, cfg: &DatasetConfig, split: u64, count: usize) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|i| {
            let geometry = mix_seed(&[cfg.seed, split, d as u64, i as u64]);
            generate(spec, &cfg.scene, geometry, mix_seed(&[geometry, STYLE]))
        })
        .collect()
}

/// Train and test pools for every domain, reproducible from `(domains, cfg)`.
pub fn build_pools(domains: &[DomainSpec], cfg: &DatasetConfig) -> Result<Vec<DomainPool>> {
    cfg.validate()?;
    if domains.is_empty() {
        return Err(Error::config("at least one domain is required"));
    }
    for (i, d) in domains.iter().enumerate() {
        if domains[..i].iter().any(|o| o.id == d.id) {
            return Err(Error::config(format!("duplicate domain id `{}`", d.id)));
        }
    }
    domains
        .iter()
        .enumerate()
        .map(|(d, spec)| {
            Ok(DomainPool {
                id: spec.id.clone(),
                train: make_split(spec, d, cfg, TRAIN, cfg.train_per_domain)?,
                test: make_split(spec, d, cfg, TEST, cfg.test_per_domain)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub domain: String,
    pub split: String,
    pub index: usize,
    pub geometry_seed: u64,
    pub style_seed: u64,
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub domains: Vec<String>,
    /// `(domain, train count, test count)`.
    pub counts: Vec<(String, usize, usize)>,
    /// SHA-256 over every quantized image and label map, in manifest order.
    pub content_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn describe(pools: &[DomainPool], cfg: &DatasetConfig) -> Manifest {
        let mut entries = Vec::new();
        let mut hasher = Sha256::new();
        for pool in pools {
            for (split, samples) in [("train", &pool.train), ("test", &pool.test)] {
                for (index, s) in samples.iter().enumerate() {
                    let stem = PathBuf::from(&pool.id).join(split).join(format!("{index:05}"));
                    hasher.update(raster::encode_ppm(&s.image, s.height, s.width));
                    hasher.update(&s.labels);
                    entries.push(ManifestEntry {
                        domain: pool.id.clone(),
                        split: split.to_string(),
                        index,
                        geometry_seed: s.seed,
                        style_seed: s.style_seed,
                        image: stem.with_extension("ppm"),
                        labels: stem.with_extension("pgm"),
                    });
                }
            }
        }
        let digest: [u8; 32] = hasher.finalize().into();
        Manifest {
            seed: cfg.seed,
            height: cfg.scene.height,
            width: cfg.scene.width,
            domains: pools.iter().map(|p| p.id.clone()).collect(),
            counts: pools.iter().map(|p| (p.id.clone(), p.train.len(), p.test.len())).collect(),
            content_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
            entries,
        }
    }
}

/// Writes `<domain>/<split>/<index>.ppm|.pgm` plus `manifest.json` under `dir`.
pub fn dump_dataset(pools: &[DomainPool], cfg: &DatasetConfig, dir: &Path) -> Result<Manifest> {
    let manifest = Manifest::describe(pools, cfg);
    let samples = pools.iter().flat_map(|p| p.train.iter().chain(&p.test));
    for (entry, s) in manifest.entries.iter().zip(samples) {
        raster::write_file(&dir.join(&entry.image), &raster::encode_ppm(&s.image, s.height, s.width))?;
        raster::write_file(&dir.join(&entry.labels), &raster::encode_pgm(&s.labels, s.height, s.width))?;
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    raster::write_file(&dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}
