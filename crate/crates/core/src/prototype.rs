//! Bag prototypes: the instance mean, and an attention-weighted sum whose
//! gated-attention scorer is trained by its own bag-level classifier.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bagdata::FeatureBag;
use crate::error::{Error, Result};
use crate::micrograd::{gated_attention_forward, AdamConfig, AdamState, AttentionClassifier, ClassifierGrads};
use crate::rng;

pub const DEFAULT_PROTOTYPE_LR: f64 = 1e-4;
pub const DEFAULT_HIDDEN_DIM: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeKind {
    Mean,
    Attention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub kind: PrototypeKind,
    /// Present iff `kind == Attention`.
    pub attention_scores: Option<Vec<f64>>,
}

/// Columnwise mean of the bag's instances.
///
/// Accumulated as `Σ_k (1/K)·f_k` so that it coincides bit-for-bit with an
/// attention prototype whose scores are all uniform.
pub fn mean_prototype(bag: &FeatureBag) -> Prototype {
    let k = bag.len();
    let weights = vec![1.0 / k as f64; k];
    Prototype {
        vector: bag.features.weighted_row_sum(&weights),
        kind: PrototypeKind::Mean,
        attention_scores: None,
    }
}

/// Gated-attention scorer plus an independent linear head, trained on whole
/// bags with bag-level BCE.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeModule {
    pub net: AttentionClassifier,
    pub optimizer: AdamState,
}

impl PrototypeModule {
    pub fn new(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        Self::from_net(AttentionClassifier::init(input_dim, hidden_dim, &mut r))
    }

    pub fn from_net(net: AttentionClassifier) -> Self {
        let optimizer = AdamState::new(&net.tensor_lengths());
        Self { net, optimizer }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn loss_and_grads(&self, bag: &FeatureBag) -> Result<(f64, ClassifierGrads)> {
        self.net.loss_and_grads(&[&bag.features], bag.label)
    }
}

/// `Σ_k a_k f_k` with gated-attention scores `a`.
pub fn attention_prototype(module: &PrototypeModule, bag: &FeatureBag) -> Result<Prototype> {
    let (scores, cache) = gated_attention_forward(&module.net.attention, &bag.features)?;
    Ok(Prototype {
        vector: cache.pooled().to_vec(),
        kind: PrototypeKind::Attention,
        attention_scores: Some(scores),
    })
}

/// One Adam step of the prototype module's own classification loss on one
/// bag. Returns the loss before the update.
pub fn train_prototype_step(module: &mut PrototypeModule, bag: &FeatureBag, lr: f64) -> Result<f64> {
    let (loss, grads) = module.loss_and_grads(bag)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            bag_id: bag.bag_id.clone(),
        });
    }
    module
        .net
        .apply_adam(&grads, &mut module.optimizer, &AdamConfig::with_lr(lr))?;
    Ok(loss)
}

/// One export row: `bag_id,label,v_0..v_{d-1}`.
pub struct PrototypeRow<'a> {
    pub bag: &'a FeatureBag,
    pub prototype: &'a Prototype,
}

pub fn write_prototypes_csv<W: Write>(out: W, rows: &[PrototypeRow<'_>]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.prototype.vector.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["bag_id".to_string(), "label".to_string()];
    header.extend((0..d).map(|j| format!("v_{j}")));
    w.write_record(&header)?;
    for r in rows {
        if r.prototype.vector.len() != d {
            return Err(Error::Dimension {
                context: "prototype export",
                expected: d,
                found: r.prototype.vector.len(),
            });
        }
        let mut rec = vec![r.bag.bag_id.clone(), r.bag.label.to_string()];
        rec.extend(r.prototype.vector.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::bagdata::Label;
    use crate::micrograd::Matrix;
    use rand::Rng as _;

    fn bag_from(rows: &[Vec<f64>], label: Label) -> FeatureBag {
        FeatureBag::new("t", label, Matrix::from_rows(rows).unwrap(), None).unwrap()
    }

    fn random_bag(k: usize, d: usize, seed: u64) -> FeatureBag {
        let mut r = rng::seeded(seed);
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        bag_from(&rows, Label::Positive)
    }

    #[test]
    fn mean_of_two_rows() {
        let p = mean_prototype(&bag_from(&[vec![1.0, 2.0], vec![3.0, 4.0]], Label::Negative));
        assert_eq!(p.vector, vec![2.0, 3.0]);
        assert_eq!(p.kind, PrototypeKind::Mean);
        assert!(p.attention_scores.is_none());
    }

    #[test]
    fn mean_of_singleton_is_the_instance() {
        let p = mean_prototype(&bag_from(&[vec![0.3, -7.25, 1e-3]], Label::Negative));
        assert_eq!(p.vector, vec![0.3, -7.25, 1e-3]);
    }

    #[test]
    fn mean_matches_streaming_mean() {
        let b = random_bag(1000, 6, 11);
        let p = mean_prototype(&b);
        // Welford-style running mean, a different accumulation order
        let mut m = [0.0; 6];
        for (i, row) in b.features.iter_rows().enumerate() {
            for j in 0..6 {
                m[j] += (row[j] - m[j]) / (i + 1) as f64;
            }
        }
        for j in 0..6 {
            assert!((p.vector[j] - m[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_singleton_and_duplicates() {
        let module = PrototypeModule::new(3, 8, 5);
        let one = bag_from(&[vec![0.5, -1.0, 2.0]], Label::Positive);
        let p = attention_prototype(&module, &one).unwrap();
        assert_eq!(p.vector, vec![0.5, -1.0, 2.0]);
        assert_eq!(p.attention_scores.as_deref(), Some(&[1.0][..]));

        let two = bag_from(&[vec![0.5, -1.0, 2.0], vec![0.5, -1.0, 2.0]], Label::Positive);
        let p = attention_prototype(&module, &two).unwrap();
        assert_eq!(p.vector, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn attention_prototype_in_column_hull() {
        let module = PrototypeModule::new(5, 16, 3);
        let b = random_bag(40, 5, 8);
        let p = attention_prototype(&module, &b).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = b.features.iter_rows().map(|r| r[j]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= p.vector[j] && p.vector[j] <= hi);
        }
    }

    #[test]
    fn uniform_scores_reproduce_mean_exactly() {
        let mut module = PrototypeModule::new(4, 6, 1);
        module.net.attention.w.iter_mut().for_each(|w| *w = 0.0);
        let b = random_bag(37, 4, 2);
        let a = attention_prototype(&module, &b).unwrap();
        assert_eq!(a.vector, mean_prototype(&b).vector);
    }

    #[test]
    fn prototype_does_not_mutate_bag() {
        let module = PrototypeModule::new(4, 6, 1);
        let b = random_bag(10, 4, 3);
        let before = b.clone();
        let _ = attention_prototype(&module, &b).unwrap();
        let _ = mean_prototype(&b);
        assert_eq!(b, before);
    }

    #[test]
    fn dimension_mismatch() {
        let module = PrototypeModule::new(4, 6, 1);
        let b = random_bag(3, 5, 3);
        assert!(matches!(attention_prototype(&module, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_lr_step_keeps_parameters() {
        let mut module = PrototypeModule::new(4, 6, 1);
        let before = module.net.clone();
        let b = random_bag(10, 4, 3);
        let loss = train_prototype_step(&mut module, &b, 0.0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(module.net, before);
    }

    #[test]
    fn export_has_one_row_per_bag() {
        let b1 = random_bag(3, 2, 1);
        let b2 = random_bag(4, 2, 2);
        let p1 = mean_prototype(&b1);
        let p2 = mean_prototype(&b2);
        let mut out = Vec::new();
        write_prototypes_csv(
            &mut out,
            &[
                PrototypeRow { bag: &b1, prototype: &p1 },
                PrototypeRow { bag: &b2, prototype: &p2 },
            ],
        )
        .unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "bag_id,label,v_0,v_1");
        assert_eq!(lines.len(), 3);
    }
}
