//! Pseudo-bag-level MIL classifier: gated-attention pooling and a sigmoid
//! head, trained on a parent bag's pseudo-bags (each inheriting the parent
//! label) and evaluated by mean-pooling pseudo-bag probabilities.

use crate::bagdata::{FeatureBag, Label};
use crate::divider::DivisionAssignment;
use crate::error::{Error, Result};
use crate::micrograd::{AdamConfig, AdamState, AttentionClassifier, ClassifierGrads, Matrix};
use crate::rng;

pub const DEFAULT_MIL_LR: f64 = 2e-4;
pub const DEFAULT_EPOCHS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct MilModel {
    pub net: AttentionClassifier,
    pub optimizer: AdamState,
}

impl MilModel {
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

    pub fn loss_and_grads(&self, pseudo_bags: &[Matrix], label: Label) -> Result<(f64, ClassifierGrads)> {
        let refs: Vec<&Matrix> = pseudo_bags.iter().collect();
        self.net.loss_and_grads(&refs, label)
    }
}

/// `Ŷ_i = sigm(cᵀ Σ_k a_k f_k + b)` over one pseudo-bag's instances.
pub fn predict_pseudo_bag(model: &MilModel, instances: &Matrix) -> Result<f64> {
    model.net.predict(instances)
}

/// Mean BCE of the pseudo-bags against the parent label.
pub fn bag_loss(model: &MilModel, pseudo_bags: &[Matrix], label: Label) -> Result<f64> {
    let refs: Vec<&Matrix> = pseudo_bags.iter().collect();
    model.net.loss(&refs, label)
}

/// One optimizer step on the parent bag's pseudo-bag loss. Returns the
/// loss before the update.
pub fn train_bag_step(model: &mut MilModel, assignment: &DivisionAssignment, bag: &FeatureBag, lr: f64) -> Result<f64> {
    let pseudo_bags = assignment.gather(bag)?;
    let (loss, grads) = model.loss_and_grads(&pseudo_bags, bag.label)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            bag_id: bag.bag_id.clone(),
        });
    }
    model
        .net
        .apply_adam(&grads, &mut model.optimizer, &AdamConfig::with_lr(lr))?;
    Ok(loss)
}

/// Pseudo-bag probabilities of one division.
pub fn pseudo_bag_predictions(model: &MilModel, assignment: &DivisionAssignment, bag: &FeatureBag) -> Result<Vec<f64>> {
    assignment
        .gather(bag)?
        .iter()
        .map(|pb| predict_pseudo_bag(model, pb))
        .collect()
}

/// Bag probability: mean of its pseudo-bag probabilities.
pub fn infer_bag(model: &MilModel, assignment: &DivisionAssignment, bag: &FeatureBag) -> Result<f64> {
    let preds = pseudo_bag_predictions(model, assignment, bag)?;
    Ok(mean_pool(&preds))
}

pub fn mean_pool(predictions: &[f64]) -> f64 {
    predictions.iter().sum::<f64>() / predictions.len() as f64
}

pub mod checkpoint {
    //! Parameter checkpoints shared by the MIL model and the prototype module.
    //!
    //! ```text
    //! "PDCK" | u16 version = 1 | u32 config_len | config JSON (UTF-8)
    //! | u32 h | u32 d | f64 w[h] | f64 V[h·d] | f64 U[h·d] | f64 c[d] | f64 b
    //! ```
    //! All integers and floats little-endian.

    use std::fs;
    use std::path::Path;

    use crate::error::{Error, Result};
    use crate::micrograd::{AttentionClassifier, GatedAttentionParams, LinearHeadParams, Matrix};

    pub const MAGIC: &[u8; 4] = b"PDCK";
    pub const VERSION: u16 = 1;

    pub fn encode(net: &AttentionClassifier, config: &serde_json::Value) -> Result<Vec<u8>> {
        let cfg = serde_json::to_vec(config)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(net.hidden_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(net.input_dim() as u32).to_le_bytes());
        for x in net.flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<(AttentionClassifier, serde_json::Value)> {
        let bad = |message: String| Error::Format {
            path: path.to_owned(),
            message,
        };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| bad("checkpoint truncated".into()))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let config: serde_json::Value = serde_json::from_slice(take(cfg_len)?)?;
        let h = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut floats = |n: usize| -> Result<Vec<f64>> {
            Ok(take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let w = floats(h)?;
        let v = Matrix::new(h, d, floats(h * d)?)?;
        let u = Matrix::new(h, d, floats(h * d)?)?;
        let c = floats(d)?;
        let b = floats(1)?[0];
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let net = AttentionClassifier {
            attention: GatedAttentionParams::new(w, v, u)?,
            head: LinearHeadParams { c, b },
        };
        Ok((net, config))
    }

    pub fn save(path: &Path, net: &AttentionClassifier, config: &serde_json::Value) -> Result<()> {
        fs::write(path, encode(net, config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(AttentionClassifier, serde_json::Value)> {
        decode(&fs::read(path)?, path)
    }
}
