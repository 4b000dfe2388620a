//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use protodiv::micrograd::{AttentionClassifier, Matrix};
use protodiv::rng::{self, Rng};
use protodiv::{FeatureBag, Label};

pub fn gaussian_matrix(rows: usize, cols: usize, r: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(r)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn random_bag(id: &str, k: usize, d: usize, r: &mut Rng) -> FeatureBag {
    let label = Label::from(r.random_bool(0.5));
    FeatureBag::new(id.to_string(), label, gaussian_matrix(k, d, r), None).unwrap()
}

/// Bag whose instances sit around `clusters` random directions, so the
/// sections are populated unevenly.
pub fn clustered_bag(id: &str, k: usize, d: usize, clusters: usize, r: &mut Rng) -> FeatureBag {
    let centres: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..d).map(|_| { let z: f64 = StandardNormal.sample(r); 2.0 * z }).collect())
        .collect();
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        let c = &centres[r.random_range(0..clusters)];
        for &x in c {
            let e: f64 = StandardNormal.sample(r);
            data.push(x + 0.3 * e);
        }
    }
    let label = Label::from(r.random_bool(0.5));
    FeatureBag::new(id.to_string(), label, Matrix::new(k, d, data).unwrap(), None).unwrap()
}

/// AUC by direct enumeration of positive/negative pairs, ties credited ½.
pub fn pairwise_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i].is_positive() {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j].is_positive() {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Straight-line gated-attention classifier probability, no shared code
/// with the library forward pass.
pub fn straight_line_predict(net: &AttentionClassifier, x: &Matrix) -> f64 {
    let h = net.attention.w.len();
    let d = x.cols();
    let mut logits = Vec::new();
    for k in 0..x.rows() {
        let mut e = 0.0;
        for j in 0..h {
            let mut pv = 0.0;
            let mut pu = 0.0;
            for i in 0..d {
                pv += net.attention.v.get(j, i) * x.get(k, i);
                pu += net.attention.u.get(j, i) * x.get(k, i);
            }
            e += net.attention.w[j] * pv.tanh() * (1.0 / (1.0 + (-pu).exp()));
        }
        logits.push(e);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut logit = net.head.b;
    for i in 0..d {
        let mut z = 0.0;
        for k in 0..x.rows() {
            z += exps[k] / total * x.get(k, i);
        }
        logit += net.head.c[i] * z;
    }
    1.0 / (1.0 + (-logit).exp())
}

/// Straight-line mean BCE over groups, clamped like the library.
pub fn straight_line_loss(net: &AttentionClassifier, groups: &[&Matrix], label: Label) -> f64 {
    let y = label.as_f64();
    let total: f64 = groups
        .iter()
        .map(|g| {
            let p = straight_line_predict(net, g).clamp(1e-12, 1.0 - 1e-12);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / groups.len() as f64
}

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of the straight-line loss in every
/// parameter, in the library's flat order.
pub fn finite_difference(net: &AttentionClassifier, groups: &[&Matrix], label: Label) -> Vec<f64> {
    let base = net.flatten();
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + FD_STEP;
        probe.set_flat(&p).unwrap();
        let up = straight_line_loss(&probe, groups, label);
        p[i] = base[i] - FD_STEP;
        probe.set_flat(&p).unwrap();
        let down = straight_line_loss(&probe, groups, label);
        out.push((up - down) / (2.0 * FD_STEP));
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Small random classifier with parameters scaled up so the attention is
/// far from uniform.
pub fn random_classifier(d: usize, h: usize, r: &mut Rng) -> AttentionClassifier {
    let mut net = AttentionClassifier::init(d, h, r);
    let flat: Vec<f64> = net.flatten().iter().map(|x| 2.0 * x).collect();
    net.set_flat(&flat).unwrap();
    net
}

/// Disjointness, exhaustiveness and balance of one division, checked
/// from the raw assignment vectors.
pub fn partition_violations(pseudo_bags: &[usize], sections: &[usize], n: usize, l: usize) -> Vec<String> {
    let mut errs = Vec::new();
    if pseudo_bags.len() != sections.len() {
        errs.push("assignment and section lengths differ".into());
        return errs;
    }
    let mut seen = vec![0usize; pseudo_bags.len()];
    let mut table = vec![vec![0usize; n]; l];
    for (k, (&p, &s)) in pseudo_bags.iter().zip(sections).enumerate() {
        if p >= n {
            errs.push(format!("instance {k} in pseudo-bag {p} >= n"));
            continue;
        }
        if s >= l {
            errs.push(format!("instance {k} in section {s} >= l"));
            continue;
        }
        seen[k] += 1;
        table[s][p] += 1;
    }
    if let Some(k) = seen.iter().position(|&c| c != 1) {
        errs.push(format!("instance {k} assigned {} times", seen[k]));
    }
    for (s, row) in table.iter().enumerate() {
        let (lo, hi) = (row.iter().min().unwrap(), row.iter().max().unwrap());
        if hi - lo > 1 {
            errs.push(format!("section {s} spread {lo}..{hi}"));
        }
    }
    let totals: Vec<usize> = (0..n).map(|p| table.iter().map(|r| r[p]).sum()).collect();
    let (lo, hi) = (totals.iter().min().unwrap(), totals.iter().max().unwrap());
    if hi - lo > 1 {
        errs.push(format!("pseudo-bag sizes spread {lo}..{hi}"));
    }
    errs
}

pub fn rng_for(test: &str) -> Rng {
    rng::seeded(rng::tagged_seed(7, test, 0))
}
