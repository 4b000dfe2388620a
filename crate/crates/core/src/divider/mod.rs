//! Division of one parent bag into `n` disjoint pseudo-bags.
//!
//! Every scheme reduces to the same two steps: give each instance a section
//! id in `[0, l)`, then deal each section's shuffled instances round-robin
//! over the pseudo-bags. The schemes differ only in the section ids:
//!
//! * `random`: all instances share section 0;
//! * `proto_mean` / `proto_attn`: cosine similarity to the bag prototype,
//!   binned into `l` equal-width intervals over `[-1, 1]`;
//! * `kmeans`: the instance's cluster among `l` k-means clusters.

pub mod kmeans;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bagdata::FeatureBag;
use crate::error::{Error, Result};
use crate::micrograd::{dot, Matrix};
use crate::prototype::{Prototype, PrototypeKind};
use crate::rng;

pub use kmeans::{kmeans, kmeans_cluster, KMeans};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Random,
    Kmeans,
    ProtoMean,
    ProtoAttn,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Random, Scheme::Kmeans, Scheme::ProtoMean, Scheme::ProtoAttn];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Random => "random",
            Scheme::Kmeans => "kmeans",
            Scheme::ProtoMean => "proto_mean",
            Scheme::ProtoAttn => "proto_attn",
        }
    }

    pub fn prototype_kind(self) -> Option<PrototypeKind> {
        match self {
            Scheme::ProtoMean => Some(PrototypeKind::Mean),
            Scheme::ProtoAttn => Some(PrototypeKind::Attention),
            Scheme::Random | Scheme::Kmeans => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "random" => Ok(Scheme::Random),
            "kmeans" => Ok(Scheme::Kmeans),
            "proto_mean" => Ok(Scheme::ProtoMean),
            "proto_attn" => Ok(Scheme::ProtoAttn),
            _ => Err(format!(
                "unknown scheme {s:?} (expected random, kmeans, proto_mean or proto_attn)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DividerConfig {
    pub scheme: Scheme,
    /// Pseudo-bags per parent bag.
    pub n: usize,
    /// Sections (phenotypes); ignored by `random`.
    pub l: usize,
    pub seed: u64,
}

impl DividerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.l == 0 {
            return Err(Error::Config("l must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DivisionAssignment {
    pub bag_id: String,
    /// Section of each instance, in `[0, l)`.
    pub sections: Vec<usize>,
    /// Pseudo-bag of each instance, in `[0, n)`.
    pub pseudo_bags: Vec<usize>,
    pub config: DividerConfig,
}

impl DivisionAssignment {
    pub fn n(&self) -> usize {
        self.config.n
    }

    /// Instance indices of each pseudo-bag, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.config.n];
        for (k, &p) in self.pseudo_bags.iter().enumerate() {
            out[p].push(k);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        pseudo_bag_sizes(&self.pseudo_bags, self.config.n)
    }

    /// Feature matrix of each pseudo-bag, rows in ascending instance order.
    pub fn gather(&self, bag: &FeatureBag) -> Result<Vec<Matrix>> {
        if self.pseudo_bags.len() != bag.len() {
            return Err(Error::Contract(format!(
                "assignment for {} covers {} instances, bag {} has {}",
                self.bag_id,
                self.pseudo_bags.len(),
                bag.bag_id,
                bag.len()
            )));
        }
        Ok(self
            .members()
            .iter()
            .map(|idx| bag.features.gather_rows(idx))
            .collect())
    }
}

pub fn pseudo_bag_sizes(pseudo_bags: &[usize], n: usize) -> Vec<usize> {
    let mut sizes = vec![0; n];
    for &p in pseudo_bags {
        sizes[p] += 1;
    }
    sizes
}

/// Checks that `pseudo_bags` is a partition of `0..K` into `n` non-empty
/// parts with sizes differing by at most one.
pub fn check_partition(pseudo_bags: &[usize], n: usize) -> Result<()> {
    if let Some(&bad) = pseudo_bags.iter().find(|&&p| p >= n) {
        return Err(Error::Contract(format!("pseudo-bag index {bad} outside [0, {n})")));
    }
    let sizes = pseudo_bag_sizes(pseudo_bags, n);
    let (lo, hi) = (sizes.iter().min().copied().unwrap_or(0), sizes.iter().max().copied().unwrap_or(0));
    if lo == 0 || hi - lo > 1 {
        return Err(Error::Contract(format!("unbalanced pseudo-bag sizes {sizes:?}")));
    }
    Ok(())
}

/// `f_B·f_i / (‖f_B‖‖f_i‖)`, clamped to `[-1, 1]`. A zero-norm instance
/// scores 0.
pub fn cosine_similarity(prototype: &[f64], instance: &[f64]) -> Result<f64> {
    if prototype.len() != instance.len() {
        return Err(Error::Dimension {
            context: "cosine similarity",
            expected: prototype.len(),
            found: instance.len(),
        });
    }
    let pn = dot(prototype, prototype).sqrt();
    if pn == 0.0 {
        return Err(Error::DegeneratePrototype);
    }
    Ok(cosine_with_norm(prototype, pn, instance))
}

#[inline]
fn cosine_with_norm(prototype: &[f64], prototype_norm: f64, instance: &[f64]) -> f64 {
    let inorm = dot(instance, instance).sqrt();
    if inorm == 0.0 {
        return 0.0;
    }
    (dot(prototype, instance) / (prototype_norm * inorm)).clamp(-1.0, 1.0)
}

/// Similarity of every instance to the prototype.
pub fn similarities(prototype: &[f64], features: &Matrix) -> Result<Vec<f64>> {
    if prototype.len() != features.cols() {
        return Err(Error::Dimension {
            context: "prototype length",
            expected: features.cols(),
            found: prototype.len(),
        });
    }
    let pn = dot(prototype, prototype).sqrt();
    if pn == 0.0 || !pn.is_finite() {
        return Err(Error::DegeneratePrototype);
    }
    Ok(features
        .iter_rows()
        .map(|f| cosine_with_norm(prototype, pn, f))
        .collect())
}

/// Section `j` covers `[-1 + 2j/l, -1 + 2(j+1)/l)`; the last one is closed at +1.
#[inline]
pub fn section_of(similarity: f64, l: usize) -> usize {
    let s = similarity.clamp(-1.0, 1.0);
    let j = ((s + 1.0) * l as f64 / 2.0).floor() as usize;
    j.min(l - 1)
}

pub fn assign_sections(similarities: &[f64], l: usize) -> Result<Vec<usize>> {
    if l == 0 {
        return Err(Error::Config("l must be at least 1".into()));
    }
    Ok(similarities.iter().map(|&s| section_of(s, l)).collect())
}

/// Shuffles each section's instances and deals them round-robin over `n`
/// pseudo-bags, with one cursor that carries over from section to section.
///
/// Sections are visited in ascending id order; empty sections are skipped.
pub fn stratified_divide(sections: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let k = sections.len();
    if k < n {
        return Err(Error::InsufficientInstances {
            needed: n,
            available: k,
        });
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in sections.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut r = rng::seeded(seed);
    let mut out = vec![0; k];
    let mut cursor = 0;
    for members in groups.values_mut() {
        members.shuffle(&mut r);
        for &i in members.iter() {
            out[i] = cursor;
            cursor = (cursor + 1) % n;
        }
    }
    Ok(out)
}

/// Divides `bag` under `cfg`. `proto_*` schemes need a prototype of the
/// matching kind; `random` and `kmeans` ignore it.
pub fn divide(bag: &FeatureBag, prototype: Option<&Prototype>, cfg: &DividerConfig) -> Result<DivisionAssignment> {
    cfg.validate()?;
    if bag.len() < cfg.n {
        return Err(Error::InsufficientInstances {
            needed: cfg.n,
            available: bag.len(),
        });
    }
    let sections = match cfg.scheme {
        Scheme::Random => vec![0; bag.len()],
        Scheme::Kmeans => kmeans_cluster(&bag.features, cfg.l, cfg.seed)?,
        Scheme::ProtoMean | Scheme::ProtoAttn => {
            let p = prototype.ok_or_else(|| {
                Error::Contract(format!("scheme {} requires a prototype", cfg.scheme))
            })?;
            if Some(p.kind) != cfg.scheme.prototype_kind() {
                return Err(Error::Contract(format!(
                    "scheme {} given a {:?} prototype",
                    cfg.scheme, p.kind
                )));
            }
            let sims = similarities(&p.vector, &bag.features)?;
            assign_sections(&sims, cfg.l)?
        }
    };
    let pseudo_bags = stratified_divide(&sections, cfg.n, cfg.seed)?;
    Ok(DivisionAssignment {
        bag_id: bag.bag_id.clone(),
        sections,
        pseudo_bags,
        config: *cfg,
    })
}

/// One line of an assignment CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub bag_id: String,
    pub instance_index: usize,
    pub section: usize,
    pub pseudo_bag: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<i64>,
}

/// Writes `bag_id,instance_index,section,pseudo_bag`, plus `x,y` when any
/// bag carries coordinates. `bags[i]` must be the bag of `assignments[i]`.
pub fn write_assignments_csv<W: Write>(out: W, assignments: &[DivisionAssignment], bags: &[&FeatureBag]) -> Result<()> {
    if assignments.len() != bags.len() {
        return Err(Error::Contract("one bag per assignment expected".into()));
    }
    let with_coords = bags.iter().any(|b| b.coords.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["bag_id", "instance_index", "section", "pseudo_bag"];
    if with_coords {
        header.extend(["x", "y"]);
    }
    w.write_record(&header)?;
    for (a, b) in assignments.iter().zip(bags) {
        for k in 0..a.pseudo_bags.len() {
            let mut rec = vec![
                a.bag_id.clone(),
                k.to_string(),
                a.sections[k].to_string(),
                a.pseudo_bags[k].to_string(),
            ];
            if with_coords {
                match b.coords.as_ref().map(|c| c[k]) {
                    Some((x, y)) => rec.extend([x.to_string(), y.to_string()]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignments_csv<R: Read>(input: R) -> Result<Vec<AssignmentRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
