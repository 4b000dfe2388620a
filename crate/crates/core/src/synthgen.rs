//! Seeded synthetic MIL corpora with planted phenotypes and witnesses.
//!
//! Background instances are drawn around `num_phenotypes` unit centres.
//! Positive bags additionally have `⌈witness_fraction·K⌉` instances
//! replaced by draws around a separate witness centre, so a bag is
//! positive iff it contains witness instances.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bagdata::{write_bag, write_manifest, BagFormat, FeatureBag, Label, ManifestEntry, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::micrograd::{dot, Matrix};
use crate::rng;

const MAX_REJECTIONS: usize = 10_000;
const MAX_CENTRE_COSINE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_bags: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub dim: usize,
    pub num_phenotypes: usize,
    pub witness_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_bags: 60,
            k_min: 100,
            k_max: 400,
            dim: 32,
            num_phenotypes: 4,
            witness_fraction: 0.1,
            noise_sigma: 0.3,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.num_bags == 0 {
            return fail("num_bags must be at least 1");
        }
        if self.k_min < 1 || self.k_max < self.k_min {
            return fail("instance range must satisfy 1 <= k_min <= k_max");
        }
        if self.dim < 2 {
            return fail("dim must be at least 2");
        }
        if self.num_phenotypes < 1 {
            return fail("num_phenotypes must be at least 1");
        }
        if !(self.witness_fraction > 0.0 && self.witness_fraction <= 1.0) {
            return fail("witness_fraction must lie in (0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and >= 0");
        }
        Ok(())
    }
}

/// Phenotype centres followed by the witness centre, all unit vectors with
/// pairwise cosine below 0.5.
pub fn sample_centres(count: usize, dim: usize, r: &mut rng::Rng) -> Result<Vec<Vec<f64>>> {
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut rejections = 0;
    while centres.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        if centres.iter().all(|c| dot(c, &v) < MAX_CENTRE_COSINE) {
            centres.push(v);
        } else {
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(Error::Config(format!(
                    "could not place {count} centres with pairwise cosine < {MAX_CENTRE_COSINE} in d={dim}"
                )));
            }
        }
    }
    Ok(centres)
}

/// Builds the corpus in memory, bags in id order.
pub fn generate_bags(cfg: &SynthConfig) -> Result<Vec<FeatureBag>> {
    cfg.validate()?;
    let mut master = rng::seeded(cfg.seed);
    let centres = sample_centres(cfg.num_phenotypes + 1, cfg.dim, &mut master)?;
    let (phenotypes, witness) = centres.split_at(cfg.num_phenotypes);
    let witness = &witness[0];

    let num_pos = cfg.num_bags / 2;
    let mut labels: Vec<Label> = (0..cfg.num_bags).map(|i| Label::from(i < num_pos)).collect();
    labels.shuffle(&mut master);

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let width = (cfg.num_bags.max(1) as f64).log10().floor() as usize + 1;
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let bag_id = format!("bag_{i:0width$}", width = width.max(4));
            let mut r = rng::seeded(rng::tagged_seed(cfg.seed, &bag_id, 0));
            let k = r.random_range(cfg.k_min..=cfg.k_max);
            let mut centre_of: Vec<&[f64]> = (0..k)
                .map(|_| phenotypes[r.random_range(0..phenotypes.len())].as_slice())
                .collect();
            if label.is_positive() {
                let n_witness = ((cfg.witness_fraction * k as f64).ceil() as usize).clamp(1, k);
                let mut slots: Vec<usize> = (0..k).collect();
                slots.shuffle(&mut r);
                for &s in &slots[..n_witness] {
                    centre_of[s] = witness;
                }
            }
            let mut data = Vec::with_capacity(k * cfg.dim);
            for c in &centre_of {
                for &x in c.iter() {
                    let v = x + noise.sample(&mut r);
                    // stored as f32 on disk; keep the in-memory copy identical
                    data.push(f64::from(v as f32));
                }
            }
            let side = (k as f64).sqrt().ceil() as i64;
            let coords = (0..k as i64).map(|j| ((j % side) * 256, (j / side) * 256)).collect();
            FeatureBag::new(bag_id, label, Matrix::new(k, cfg.dim, data)?, Some(coords))
        })
        .collect()
}

/// Writes `manifest.csv`, one binary bag per entry under `bags/`, and
/// `synth_config.json`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let bags = generate_bags(cfg)?;
    fs::create_dir_all(out_dir.join("bags"))?;
    let mut entries = Vec::with_capacity(bags.len());
    for bag in &bags {
        let rel = Path::new("bags").join(format!("{}.{}", bag.bag_id, BagFormat::Binary.extension()));
        write_bag(bag, &out_dir.join(&rel), BagFormat::Binary)?;
        entries.push(ManifestEntry {
            bag_id: bag.bag_id.clone(),
            label: bag.label,
            path: rel,
            num_instances: bag.len(),
            dim: bag.dim(),
        });
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &entries)?;
    fs::write(out_dir.join("synth_config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(entries)
}
