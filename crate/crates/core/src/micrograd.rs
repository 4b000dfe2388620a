//! Dense row-major matrices and hand-derived reverse-mode gradients for the
//! two small networks used here: gated attention pooling and a linear
//! sigmoid head.
//!
//! There is no tape. Each forward returns a cache holding the intermediates
//! its backward needs, and backward returns exact analytic gradients.

use rand::Rng as _;

use crate::bagdata::Label;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                context: "matrix data length",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("matrix entry ({}, {})", i / cols.max(1), i % cols.max(1)),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    context: "matrix row length",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub(crate) fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a 0-column matrix has no meaningful rows here
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// New matrix made of the given rows, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `Σ_k weights[k] · row_k`, accumulated in row order.
    pub fn weighted_row_sum(&self, weights: &[f64]) -> Vec<f64> {
        debug_assert_eq!(weights.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &a) in self.iter_rows().zip(weights) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += a * x;
            }
        }
        out
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Binary cross-entropy of a probability against a label, with the
/// probability clamped into `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_loss(prediction: f64, label: Label) -> f64 {
    let p = prediction.clamp(PROB_EPS, 1.0 - PROB_EPS);
    match label {
        Label::Positive => -p.ln(),
        Label::Negative => -(1.0 - p).ln(),
    }
}

/// d(bce)/d(prediction); zero where the clamp is active.
pub fn bce_grad(prediction: f64, label: Label) -> f64 {
    if prediction <= PROB_EPS || prediction >= 1.0 - PROB_EPS {
        return 0.0;
    }
    match label {
        Label::Positive => -1.0 / prediction,
        Label::Negative => 1.0 / (1.0 - prediction),
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            location: format!("{what}[{i}]"),
        }),
        None => Ok(()),
    }
}

/// `w ∈ R^h`, `V, U ∈ R^{h×d}`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedAttentionParams {
    pub w: Vec<f64>,
    pub v: Matrix,
    pub u: Matrix,
}

impl GatedAttentionParams {
    pub fn new(w: Vec<f64>, v: Matrix, u: Matrix) -> Result<Self> {
        let h = w.len();
        for (m, ctx) in [(&v, "attention V"), (&u, "attention U")] {
            if m.rows() != h {
                return Err(Error::Dimension {
                    context: ctx,
                    expected: h,
                    found: m.rows(),
                });
            }
        }
        if v.cols() != u.cols() {
            return Err(Error::Dimension {
                context: "attention U columns",
                expected: v.cols(),
                found: u.cols(),
            });
        }
        check_finite(&w, "w")?;
        Ok(Self { w, v, u })
    }

    /// Uniform init in `±1/√fan_in` (fan_in = d for V and U, h for w).
    pub fn init(hidden_dim: usize, input_dim: usize, rng: &mut Rng) -> Self {
        let bd = 1.0 / (input_dim.max(1) as f64).sqrt();
        let bh = 1.0 / (hidden_dim.max(1) as f64).sqrt();
        let v = Matrix::uniform(hidden_dim, input_dim, bd, rng);
        let u = Matrix::uniform(hidden_dim, input_dim, bd, rng);
        let w = (0..hidden_dim).map(|_| rng.random_range(-bh..=bh)).collect();
        Self { w, v, u }
    }

    pub fn zeros(hidden_dim: usize, input_dim: usize) -> Self {
        Self {
            w: vec![0.0; hidden_dim],
            v: Matrix::zeros(hidden_dim, input_dim),
            u: Matrix::zeros(hidden_dim, input_dim),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.len()
    }

    pub fn input_dim(&self) -> usize {
        self.v.cols()
    }

    fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let all = self
            .w
            .iter()
            .chain(self.v.as_slice())
            .chain(self.u.as_slice());
        for x in all {
            h ^= x.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }
}

/// Intermediates of one gated-attention forward pass.
#[derive(Debug)]
pub struct AttentionCache<'a> {
    features: &'a Matrix,
    tanh: Matrix,
    gate: Matrix,
    scores: Vec<f64>,
    pooled: Vec<f64>,
    digest: u64,
}

impl AttentionCache<'_> {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// `Σ_k a_k f_k`.
    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub w: Vec<f64>,
    pub v: Matrix,
    pub u: Matrix,
    pub features: Option<Matrix>,
}

/// Attention scores `softmax_k wᵀ(tanh(V f_k) ⊙ sigm(U f_k))` over the rows of
/// `features`, plus a cache for [`gated_attention_backward`].
pub fn gated_attention_forward<'a>(
    params: &GatedAttentionParams,
    features: &'a Matrix,
) -> Result<(Vec<f64>, AttentionCache<'a>)> {
    let d = params.input_dim();
    let h = params.hidden_dim();
    if features.cols() != d {
        return Err(Error::Dimension {
            context: "gated attention input",
            expected: d,
            found: features.cols(),
        });
    }
    if features.rows() == 0 {
        return Err(Error::InsufficientInstances {
            needed: 1,
            available: 0,
        });
    }
    let k = features.rows();
    let mut tanh = Matrix::zeros(k, h);
    let mut gate = Matrix::zeros(k, h);
    let mut logits = Vec::with_capacity(k);
    for (i, f) in features.iter_rows().enumerate() {
        let t_row = tanh.row_mut(i);
        for (j, t) in t_row.iter_mut().enumerate() {
            *t = dot(params.v.row(j), f).tanh();
        }
        let s_row = gate.row_mut(i);
        for (j, s) in s_row.iter_mut().enumerate() {
            *s = sigmoid(dot(params.u.row(j), f));
        }
        let t_row = tanh.row(i);
        let s_row = gate.row(i);
        let mut e = 0.0;
        for j in 0..h {
            e += params.w[j] * t_row[j] * s_row[j];
        }
        logits.push(e);
    }
    let scores = softmax(&logits);
    let pooled = features.weighted_row_sum(&scores);
    let cache = AttentionCache {
        features,
        tanh,
        gate,
        scores: scores.clone(),
        pooled,
        digest: params.digest(),
    };
    Ok((scores, cache))
}

/// Gradients of a scalar loss given its gradient with respect to the scores
/// and with respect to the pooled vector `Σ a_k f_k`.
pub fn gated_attention_backward(
    params: &GatedAttentionParams,
    cache: &AttentionCache<'_>,
    grad_scores: &[f64],
    grad_pooled: &[f64],
) -> Result<AttentionGrads> {
    attention_backward(params, cache, grad_scores, grad_pooled, true)
}

fn attention_backward(
    params: &GatedAttentionParams,
    cache: &AttentionCache<'_>,
    grad_scores: &[f64],
    grad_pooled: &[f64],
    want_features: bool,
) -> Result<AttentionGrads> {
    let features = cache.features;
    let k = features.rows();
    let d = features.cols();
    let h = params.hidden_dim();
    if params.input_dim() != d || cache.tanh.cols() != h {
        return Err(Error::Contract(
            "attention cache shape does not match parameters".into(),
        ));
    }
    if cache.digest != params.digest() {
        return Err(Error::Contract(
            "stale attention cache: parameters changed since forward".into(),
        ));
    }
    if grad_scores.len() != k {
        return Err(Error::Dimension {
            context: "upstream score gradient",
            expected: k,
            found: grad_scores.len(),
        });
    }
    if grad_pooled.len() != d {
        return Err(Error::Dimension {
            context: "upstream pooled gradient",
            expected: d,
            found: grad_pooled.len(),
        });
    }

    let a = &cache.scores;
    // total gradient on each score, including the path through the pooled sum
    let ga: Vec<f64> = features
        .iter_rows()
        .zip(grad_scores)
        .map(|(f, &g)| g + dot(grad_pooled, f))
        .collect();
    let mean_ga = dot(a, &ga);

    let mut gw = vec![0.0; h];
    let mut gv = Matrix::zeros(h, d);
    let mut gu = Matrix::zeros(h, d);
    let mut gf = want_features.then(|| Matrix::zeros(k, d));
    let mut dhv = vec![0.0; h];
    let mut dhu = vec![0.0; h];

    for (i, f) in features.iter_rows().enumerate() {
        let de = a[i] * (ga[i] - mean_ga);
        let t_row = cache.tanh.row(i);
        let s_row = cache.gate.row(i);
        for j in 0..h {
            let (t, s) = (t_row[j], s_row[j]);
            gw[j] += de * t * s;
            let dg = de * params.w[j];
            dhv[j] = dg * s * (1.0 - t * t);
            dhu[j] = dg * t * s * (1.0 - s);
        }
        for j in 0..h {
            if dhv[j] != 0.0 {
                axpy(dhv[j], f, gv.row_mut(j));
            }
            if dhu[j] != 0.0 {
                axpy(dhu[j], f, gu.row_mut(j));
            }
        }
        if let Some(gf) = gf.as_mut() {
            let row = gf.row_mut(i);
            axpy(a[i], grad_pooled, row);
            for j in 0..h {
                axpy(dhv[j], params.v.row(j), row);
                axpy(dhu[j], params.u.row(j), row);
            }
        }
    }
    Ok(AttentionGrads {
        w: gw,
        v: gv,
        u: gu,
        features: gf,
    })
}

/// Linear layer to a single logit: `cᵀz + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHeadParams {
    pub c: Vec<f64>,
    pub b: f64,
}

impl LinearHeadParams {
    pub fn init(input_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input_dim.max(1) as f64).sqrt();
        let c = (0..input_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let b = rng.random_range(-bound..=bound);
        Self { c, b }
    }

    pub fn zeros(input_dim: usize) -> Self {
        Self {
            c: vec![0.0; input_dim],
            b: 0.0,
        }
    }

    pub fn logit(&self, z: &[f64]) -> f64 {
        dot(&self.c, z) + self.b
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments per parameter tensor, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(lengths: &[usize]) -> Self {
        Self {
            m: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            v: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over a list of parameter tensors.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            context: "adam tensor count",
            expected: params.len(),
            found: grads.len().min(state.m.len()),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Dimension {
                context: "adam tensor length",
                expected: p.len(),
                found: if p.len() != g.len() { g.len() } else { m.len() },
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Gated attention pooling followed by a linear sigmoid head. The
/// prototype module and the MIL model each own one of these.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionClassifier {
    pub attention: GatedAttentionParams,
    pub head: LinearHeadParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierGrads {
    pub w: Vec<f64>,
    pub v: Matrix,
    pub u: Matrix,
    pub c: Vec<f64>,
    pub b: f64,
}

impl ClassifierGrads {
    fn zeros(h: usize, d: usize) -> Self {
        Self {
            w: vec![0.0; h],
            v: Matrix::zeros(h, d),
            u: Matrix::zeros(h, d),
            c: vec![0.0; d],
            b: 0.0,
        }
    }

    /// Tensors in parameter order: w, V, U, c, b.
    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            &self.w,
            self.v.as_slice(),
            self.u.as_slice(),
            &self.c,
            std::slice::from_ref(&self.b),
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

impl AttentionClassifier {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Self {
        let attention = GatedAttentionParams::init(hidden_dim, input_dim, rng);
        let head = LinearHeadParams::init(input_dim, rng);
        Self { attention, head }
    }

    pub fn input_dim(&self) -> usize {
        self.attention.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.attention.hidden_dim()
    }

    pub fn tensor_lengths(&self) -> Vec<usize> {
        let hd = self.hidden_dim() * self.input_dim();
        vec![self.hidden_dim(), hd, hd, self.input_dim(), 1]
    }

    /// Mutable tensors in parameter order: w, V, U, c, b.
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.attention.w,
            self.attention.v.as_mut_slice(),
            self.attention.u.as_mut_slice(),
            &mut self.head.c,
            std::slice::from_mut(&mut self.head.b),
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        [
            &self.attention.w[..],
            self.attention.v.as_slice(),
            self.attention.u.as_slice(),
            &self.head.c,
            std::slice::from_ref(&self.head.b),
        ]
        .concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.tensor_lengths().iter().sum();
        if flat.len() != total {
            return Err(Error::Dimension {
                context: "flat parameter vector",
                expected: total,
                found: flat.len(),
            });
        }
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// `sigm(cᵀ Σ_k a_k f_k + b)`.
    pub fn predict(&self, instances: &Matrix) -> Result<f64> {
        let (_, cache) = gated_attention_forward(&self.attention, instances)?;
        Ok(sigmoid(self.head.logit(cache.pooled())))
    }

    /// Mean BCE over `groups`, each group scored independently against the
    /// same label.
    pub fn loss(&self, groups: &[&Matrix], label: Label) -> Result<f64> {
        if groups.is_empty() {
            return Err(Error::InsufficientInstances {
                needed: 1,
                available: 0,
            });
        }
        let mut total = 0.0;
        for g in groups {
            total += bce_loss(self.predict(g)?, label);
        }
        Ok(total / groups.len() as f64)
    }

    /// Loss as in [`Self::loss`] and its exact gradient w.r.t. every parameter.
    pub fn loss_and_grads(&self, groups: &[&Matrix], label: Label) -> Result<(f64, ClassifierGrads)> {
        if groups.is_empty() {
            return Err(Error::InsufficientInstances {
                needed: 1,
                available: 0,
            });
        }
        let n = groups.len() as f64;
        let mut grads = ClassifierGrads::zeros(self.hidden_dim(), self.input_dim());
        let mut total = 0.0;
        for g in groups {
            let (_, cache) = gated_attention_forward(&self.attention, g)?;
            let z = cache.pooled();
            let p = sigmoid(self.head.logit(z));
            total += bce_loss(p, label);
            let dlogit = bce_grad(p, label) * p * (1.0 - p) / n;
            if dlogit == 0.0 {
                continue;
            }
            axpy(dlogit, z, &mut grads.c);
            grads.b += dlogit;
            let dz: Vec<f64> = self.head.c.iter().map(|c| c * dlogit).collect();
            let zero_scores = vec![0.0; g.rows()];
            let ag = attention_backward(&self.attention, &cache, &zero_scores, &dz, false)?;
            axpy(1.0, &ag.w, &mut grads.w);
            axpy(1.0, ag.v.as_slice(), grads.v.as_mut_slice());
            axpy(1.0, ag.u.as_slice(), grads.u.as_mut_slice());
        }
        Ok((total / n, grads))
    }

    pub fn apply_adam(&mut self, grads: &ClassifierGrads, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
        let g = grads.tensors();
        let mut p = self.tensors_mut();
        adam_step(&mut p, &g, state, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::uniform(rows, cols, 1.0, rng)
    }

    #[test]
    fn singleton_attention_is_one() {
        let mut rng = seeded(1);
        let p = GatedAttentionParams::init(4, 3, &mut rng);
        let f = random_matrix(1, 3, &mut rng);
        let (a, _) = gated_attention_forward(&p, &f).unwrap();
        assert_eq!(a, vec![1.0]);
    }

    #[test]
    fn identical_rows_split_evenly() {
        let mut rng = seeded(2);
        let p = GatedAttentionParams::init(5, 3, &mut rng);
        let f = Matrix::from_rows(&[vec![0.3, -0.2, 0.9], vec![0.3, -0.2, 0.9]]).unwrap();
        let (a, _) = gated_attention_forward(&p, &f).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
    }

    #[test]
    fn scalar_gate_matches_hand_evaluation() {
        let p = GatedAttentionParams::new(
            vec![1.0],
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            Matrix::from_rows(&[vec![100.0]]).unwrap(),
        )
        .unwrap();
        let f = Matrix::from_rows(&[vec![0.5], vec![-0.5]]).unwrap();
        let (a, _) = gated_attention_forward(&p, &f).unwrap();
        // evaluated separately: e1 = tanh(0.5)*sigm(50), e2 = tanh(-0.5)*sigm(-50)
        let e1 = 0.5f64.tanh() / (1.0 + (-50.0f64).exp());
        let e2 = (-0.5f64).tanh() / (1.0 + 50.0f64.exp());
        let a1 = e1.exp() / (e1.exp() + e2.exp());
        assert!((a[0] - a1).abs() < 1e-15);
        assert!((a[1] - (1.0 - a1)).abs() < 1e-15);
        assert!((a[0] - 0.613_516_304_358_727).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut rng = seeded(3);
        let p = GatedAttentionParams::init(4, 3, &mut rng);
        let f = random_matrix(2, 5, &mut rng);
        assert!(matches!(
            gated_attention_forward(&p, &f),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = seeded(4);
        let p = GatedAttentionParams::init(4, 3, &mut rng);
        let f = random_matrix(6, 3, &mut rng);
        let (_, cache) = gated_attention_forward(&p, &f).unwrap();
        let g = gated_attention_backward(&p, &cache, &[0.0; 6], &[0.0; 3]).unwrap();
        assert!(g.w.iter().all(|&x| x == 0.0));
        assert!(g.v.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.u.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.features.unwrap().as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn singleton_bag_has_no_score_gradient_on_w() {
        let mut rng = seeded(5);
        let p = GatedAttentionParams::init(4, 3, &mut rng);
        let f = random_matrix(1, 3, &mut rng);
        let (_, cache) = gated_attention_forward(&p, &f).unwrap();
        let g = gated_attention_backward(&p, &cache, &[0.7], &[0.1, -0.4, 2.0]).unwrap();
        assert!(g.w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = seeded(6);
        let mut p = GatedAttentionParams::init(4, 3, &mut rng);
        let f = random_matrix(3, 3, &mut rng);
        let (_, cache) = gated_attention_forward(&p.clone(), &f).unwrap();
        p.w[0] += 0.1;
        assert!(matches!(
            gated_attention_backward(&p, &cache, &[0.0; 3], &[0.0; 3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bce_reference_values() {
        assert!(bce_loss(1.0, Label::Positive) < 1e-11);
        assert!((bce_loss(0.5, Label::Positive) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(0.5, Label::Negative) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(0.0, Label::Positive).is_finite());
    }

    #[test]
    fn adam_zero_gradient_from_fresh_state() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(&[2]);
        adam_step(&mut [&mut p[..]], &[&[0.0, 0.0]], &mut st, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_zero_gradient_decays_moments() {
        let mut p = [1.0];
        let mut st = AdamState::new(&[1]);
        let cfg = AdamConfig::with_lr(0.1);
        adam_step(&mut [&mut p[..]], &[&[2.0]], &mut st, &cfg).unwrap();
        let (m0, v0) = (st.m[0][0], st.v[0][0]);
        adam_step(&mut [&mut p[..]], &[&[0.0]], &mut st, &cfg).unwrap();
        assert_eq!(st.m[0][0], 0.9 * m0);
        assert_eq!(st.v[0][0], 0.999 * v0);
    }

    #[test]
    fn adam_two_steps_match_hand_recursion() {
        let mut p = [0.0];
        let mut st = AdamState::new(&[1]);
        let cfg = AdamConfig::with_lr(0.1);
        for _ in 0..2 {
            adam_step(&mut [&mut p[..]], &[&[1.0]], &mut st, &cfg).unwrap();
        }
        // m1 = 0.1, v1 = 0.001; m2 = 0.19, v2 = 0.001999
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((st.m[0][0] - 0.19).abs() < 1e-15);
        assert!((st.v[0][0] - 0.001999).abs() < 1e-15);
        assert!((p[0] - x).abs() < 1e-15);
        assert!((p[0] + 0.2).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_lr_keeps_params() {
        let mut p = vec![0.25, 0.5];
        let mut st = AdamState::new(&[2]);
        adam_step(&mut [&mut p[..]], &[&[3.0, -1.0]], &mut st, &AdamConfig::with_lr(0.0)).unwrap();
        assert_eq!(p, vec![0.25, 0.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = [0.0; 3];
        let mut st = AdamState::new(&[3]);
        let r = adam_step(&mut [&mut p[..]], &[&[1.0, 2.0]], &mut st, &AdamConfig::default());
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let a = softmax(&[1000.0, 1000.0, 999.0]);
        assert!(a.iter().all(|x| x.is_finite()));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = seeded(9);
        let net = AttentionClassifier::init(3, 2, &mut rng);
        let flat = net.flatten();
        let mut other = AttentionClassifier::init(3, 2, &mut seeded(10));
        other.set_flat(&flat).unwrap();
        assert_eq!(net, other);
    }
}
