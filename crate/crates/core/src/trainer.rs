//! Cross-validated training: per-epoch prototype update, re-division,
//! MIL training and validation-based model selection; plus the (n, l)
//! sweep and the division timing benchmark.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bagdata::{FeatureBag, Label};
use crate::divider::{divide, DivisionAssignment, DividerConfig, Scheme};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_sensitivity, auc, FoldMetrics, FoldSplit, MetricsReport};
use crate::micrograd::bce_loss;
use crate::mil::{infer_bag, train_bag_step, MilModel, DEFAULT_EPOCHS, DEFAULT_MIL_LR};
use crate::prototype::{
    attention_prototype, mean_prototype, train_prototype_step, PrototypeModule, DEFAULT_HIDDEN_DIM,
    DEFAULT_PROTOTYPE_LR,
};
use crate::rng;

/// Counter reserved for the fixed division used at validation/test time.
pub const EVAL_EPOCH: u64 = u64::MAX;
pub const DECISION_THRESHOLD: f64 = 0.5;
pub const BENCH_BAGS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub proto_lr: f64,
    pub hidden_dim: usize,
    /// Run folds on the rayon pool. Results do not depend on it.
    #[serde(skip)]
    pub parallel_folds: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            lr: DEFAULT_MIL_LR,
            proto_lr: DEFAULT_PROTOTYPE_LR,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            parallel_folds: true,
        }
    }
}

/// Divides `bag` under `cfg`, computing whatever prototype the scheme needs.
/// `n` is clamped to `K`; the caller decides whether to warn.
pub fn divide_bag(bag: &FeatureBag, cfg: &DividerConfig, module: Option<&PrototypeModule>) -> Result<DivisionAssignment> {
    let cfg = DividerConfig {
        n: cfg.n.min(bag.len()),
        ..*cfg
    };
    let prototype = match cfg.scheme {
        Scheme::ProtoMean => Some(mean_prototype(bag)),
        Scheme::ProtoAttn => {
            let m = module.ok_or_else(|| Error::Contract("proto_attn needs a prototype module".into()))?;
            Some(attention_prototype(m, bag)?)
        }
        Scheme::Random | Scheme::Kmeans => None,
    };
    divide(bag, prototype.as_ref(), &cfg)
}

/// What one fold produced, beyond its metrics.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub metrics: FoldMetrics,
    /// Every bag id that fed a gradient step (prototype module or MIL model).
    pub trained_on: BTreeSet<String>,
    pub best_model: MilModel,
    pub best_prototype_module: Option<PrototypeModule>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub folds: Vec<FoldOutcome>,
    pub seconds: f64,
}

struct FoldRun<'a> {
    fold_id: usize,
    train: Vec<&'a FeatureBag>,
    val: Vec<&'a FeatureBag>,
    test: Vec<&'a FeatureBag>,
    divider: DividerConfig,
    cfg: &'a TrainConfig,
    seed: u64,
    warned: HashSet<String>,
}

impl FoldRun<'_> {
    fn warn_clamp(&mut self, bag: &FeatureBag) {
        if bag.len() < self.divider.n && self.warned.insert(bag.bag_id.clone()) {
            log::warn!(
                "bag {} has {} instances < n={}; using n={}",
                bag.bag_id,
                bag.len(),
                self.divider.n,
                bag.len()
            );
        }
    }

    fn division(&mut self, bag: &FeatureBag, epoch: u64, module: Option<&PrototypeModule>) -> Result<DivisionAssignment> {
        self.warn_clamp(bag);
        let seed = rng::bag_epoch_seed(self.divider.seed, &bag.bag_id, epoch);
        divide_bag(bag, &self.divider.with_seed(seed), module)
    }

    fn score(&mut self, bags: &[&FeatureBag], model: &MilModel, module: Option<&PrototypeModule>) -> Result<(Vec<f64>, Vec<Label>)> {
        let mut scores = Vec::with_capacity(bags.len());
        for &b in bags {
            let a = self.division(b, EVAL_EPOCH, module)?;
            scores.push(infer_bag(model, &a, b)?);
        }
        Ok((scores, bags.iter().map(|b| b.label).collect()))
    }

    fn run(mut self) -> Result<FoldOutcome> {
        let start = Instant::now();
        let dim = self.train[0].dim();
        let h = self.cfg.hidden_dim;
        let mut model = MilModel::new(dim, h, rng::tagged_seed(self.seed, "mil-init", self.fold_id as u64));
        let mut module = (self.divider.scheme == Scheme::ProtoAttn)
            .then(|| PrototypeModule::new(dim, h, rng::tagged_seed(self.seed, "proto-init", self.fold_id as u64)));
        let mut trained_on = BTreeSet::new();
        let mut best: Option<(f64, f64, usize, MilModel, Option<PrototypeModule>)> = None;
        let order_tag = format!("order-{}", self.fold_id);

        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut rng::seeded(rng::tagged_seed(self.seed, &order_tag, epoch as u64)));

            if let Some(m) = module.as_mut() {
                for &i in &order {
                    let bag = self.train[i];
                    train_prototype_step(m, bag, self.cfg.proto_lr)?;
                    trained_on.insert(bag.bag_id.clone());
                }
            }
            let mut assignments = Vec::with_capacity(self.train.len());
            for i in 0..self.train.len() {
                let bag = self.train[i];
                assignments.push(self.division(bag, epoch as u64, module.as_ref())?);
            }
            for &i in &order {
                let bag = self.train[i];
                train_bag_step(&mut model, &assignments[i], bag, self.cfg.lr)?;
                trained_on.insert(bag.bag_id.clone());
            }

            let val = self.val.clone();
            let (scores, labels) = self.score(&val, &model, module.as_ref())?;
            let val_auc = auc(&scores, &labels)?;
            let val_loss = scores.iter().zip(&labels).map(|(&p, &y)| bce_loss(p, y)).sum::<f64>() / scores.len() as f64;
            log::debug!("fold {} epoch {epoch}: val AUC {val_auc:.4} loss {val_loss:.4}", self.fold_id);
            // AUC ties, common on small validation splits, go to the lower loss
            if best.as_ref().is_none_or(|b| val_auc > b.0 || (val_auc == b.0 && val_loss < b.1)) {
                best = Some((val_auc, val_loss, epoch, model.clone(), module.clone()));
            }
        }

        let (val_auc, val_loss, best_epoch, best_model, best_module) = best.ok_or_else(|| Error::Config("epochs must be at least 1".into()))?;
        let test = self.test.clone();
        let (scores, labels) = self.score(&test, &best_model, best_module.as_ref())?;
        let test_auc = auc(&scores, &labels)?;
        let (acc, sen) = accuracy_sensitivity(&scores, &labels, DECISION_THRESHOLD)?;
        Ok(FoldOutcome {
            metrics: FoldMetrics {
                fold_id: self.fold_id,
                best_epoch,
                val_auc,
                val_loss,
                auc: test_auc,
                acc,
                sen,
            },
            trained_on,
            best_model,
            best_prototype_module: best_module,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

fn lookup<'a>(index: &HashMap<&str, &'a FeatureBag>, ids: &[String]) -> Result<Vec<&'a FeatureBag>> {
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Contract(format!("split names unknown bag {id}")))
        })
        .collect()
}

/// Trains and evaluates one model per fold split.
pub fn run_experiment(
    corpus: &[FeatureBag],
    divider: &DividerConfig,
    cfg: &TrainConfig,
    folds: &[FoldSplit],
    seed: u64,
) -> Result<ExperimentOutput> {
    divider.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let start = Instant::now();
    let index: HashMap<&str, &FeatureBag> = corpus.iter().map(|b| (b.bag_id.as_str(), b)).collect();
    let runs = folds
        .iter()
        .map(|f| {
            let run = FoldRun {
                fold_id: f.fold_id,
                train: lookup(&index, &f.train)?,
                val: lookup(&index, &f.val)?,
                test: lookup(&index, &f.test)?,
                divider: *divider,
                cfg,
                seed,
                warned: HashSet::new(),
            };
            if run.train.is_empty() {
                return Err(Error::TooFewBags(format!("fold {} has no training bags", f.fold_id)));
            }
            Ok(run)
        })
        .collect::<Result<Vec<_>>>()?;

    let exec = |run: FoldRun<'_>| {
        let id = run.fold_id;
        run.run().map_err(|e| e.in_fold(id))
    };
    let outcomes: Vec<FoldOutcome> = if cfg.parallel_folds {
        runs.into_par_iter().map(exec).collect::<Result<_>>()?
    } else {
        runs.into_iter().map(exec).collect::<Result<_>>()?
    };

    for (o, f) in outcomes.iter().zip(folds) {
        if let Some(leak) = f.test.iter().find(|id| o.trained_on.contains(*id)) {
            return Err(Error::Contract(format!("test bag {leak} was used for training in fold {}", f.fold_id)));
        }
    }
    let report = MetricsReport::from_folds(outcomes.iter().map(|o| o.metrics.clone()).collect());
    Ok(ExperimentOutput {
        report,
        folds: outcomes,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean test AUC per (l, n) cell; rows follow `l_values`, columns `n_values`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub n_values: Vec<usize>,
    pub l_values: Vec<usize>,
    pub cells: Vec<Vec<f64>>,
}

impl SweepGrid {
    pub fn get(&self, l: usize, n: usize) -> Option<f64> {
        let i = self.l_values.iter().position(|&x| x == l)?;
        let j = self.n_values.iter().position(|&x| x == n)?;
        Some(self.cells[i][j])
    }

    /// Header `l,n_<n>...`, one row per `l`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["l".to_string()];
        header.extend(self.n_values.iter().map(|n| format!("n_{n}")));
        w.write_record(&header)?;
        for (l, row) in self.l_values.iter().zip(&self.cells) {
            let mut rec = vec![l.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One experiment per grid cell. With `include_baseline`, an `n = 1`
/// column is added if absent. At `n = 1` the division is the whole bag
/// whatever `l` is, so that column is trained once and shared.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    corpus: &[FeatureBag],
    n_values: &[usize],
    l_values: &[usize],
    base: &DividerConfig,
    cfg: &TrainConfig,
    folds: &[FoldSplit],
    seed: u64,
    include_baseline: bool,
) -> Result<SweepGrid> {
    if n_values.is_empty() || l_values.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    let mut ns: Vec<usize> = n_values.to_vec();
    if include_baseline && !ns.contains(&1) {
        ns.insert(0, 1);
    }
    let mut baseline = None;
    let mut cells = Vec::with_capacity(l_values.len());
    for &l in l_values {
        let mut row = Vec::with_capacity(ns.len());
        for &n in &ns {
            let run = |l| -> Result<f64> {
                let d = DividerConfig { n, l, ..*base };
                let out = run_experiment(corpus, &d, cfg, folds, seed)?;
                log::info!("sweep l={l} n={n}: mean AUC {:.4}", out.report.auc.mean);
                Ok(out.report.auc.mean)
            };
            let v = if n == 1 {
                match baseline {
                    Some(v) => v,
                    None => {
                        let v = run(l)?;
                        baseline = Some(v);
                        v
                    }
                }
            } else {
                run(l)?
            };
            row.push(v);
        }
        cells.push(row);
    }
    Ok(SweepGrid {
        n_values: ns,
        l_values: l_values.to_vec(),
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scheme: Scheme,
    pub bags: usize,
    pub instances: usize,
    pub total_seconds: f64,
}

/// Up to `BENCH_BAGS` bags, sampled with `seed` when there are more.
pub fn bench_sample(bags: &[FeatureBag], seed: u64) -> Vec<&FeatureBag> {
    let mut picked: Vec<&FeatureBag> = bags.iter().collect();
    if picked.len() > BENCH_BAGS {
        picked.shuffle(&mut rng::seeded(rng::tagged_seed(seed, "bench", 0)));
        picked.truncate(BENCH_BAGS);
    }
    picked
}

/// Wall-clock time to divide every bag, per scheme, on the calling thread.
/// Features are already in memory; prototype and clustering time is
/// included.
pub fn bench_division(
    bags: &[&FeatureBag],
    schemes: &[Scheme],
    divider: &DividerConfig,
    module: Option<&PrototypeModule>,
) -> Result<Vec<BenchRow>> {
    let instances = bags.iter().map(|b| b.len()).sum();
    schemes
        .iter()
        .map(|&scheme| {
            let cfg = DividerConfig { scheme, ..*divider };
            let start = Instant::now();
            for b in bags {
                let seed = rng::bag_epoch_seed(divider.seed, &b.bag_id, 0);
                let a = divide_bag(b, &cfg.with_seed(seed), module)?;
                std::hint::black_box(&a);
            }
            Ok(BenchRow {
                scheme,
                bags: bags.len(),
                instances,
                total_seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

pub fn write_bench_csv<W: Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scheme", "bags", "instances", "total_seconds"])?;
    for r in rows {
        w.write_record([
            r.scheme.to_string(),
            r.bags.to_string(),
            r.instances.to_string(),
            format!("{:.6}", r.total_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}
