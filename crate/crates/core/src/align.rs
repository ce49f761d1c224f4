//! Contrastive alignment of visual embeddings to a target space.
//!
//! A [`ProjectionLayer`] maps raw visual vectors into the text (or visual,
//! for audio) space. It is trained with InfoNCE over cosine similarities
//! using hand-derived gradients and Adam.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{AudioAlignExample, AudioEncoder};
use crate::error::{Result, TwmError};
use crate::io::{checked_size, read_bytes, write_bytes, ByteReader, ByteWriter};
use crate::scalar::Scalar;
use crate::tensor::{cosine_sim, dot, matvec, norm, softmax_unchecked, DenseMatrix, SeededRng};

pub const TWMP_MAGIC: &[u8; 4] = b"TWMP";
const TWMP_HEADER_LEN: usize = 16;

/// Affine map `x ↦ W·x + b`, `W` being `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ProjectionLayer<T> {
    weights: DenseMatrix<T>,
    bias: Vec<T>,
}

impl<T: Scalar> ProjectionLayer<T> {
    pub fn new(weights: DenseMatrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(TwmError::DimMismatch {
                context: "projection bias",
                left: weights.rows(),
                right: bias.len(),
            });
        }
        if weights.cols() == 0 || weights.rows() == 0 {
            return Err(TwmError::InvalidInput("projection with zero dimension".into()));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(TwmError::NonFinite("projection parameters"));
        }
        Ok(Self { weights, bias })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weights: DenseMatrix::identity(dim),
            bias: vec![T::zero(); dim],
        }
    }

    /// Weights uniform in ±1/√in_dim drawn row-major from `rng`; zero bias.
    pub fn init_uniform(in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| T::lit(rng.uniform(-bound, bound)))
            .collect();
        Self {
            weights: DenseMatrix::from_vec(out_dim, in_dim, data).expect("finite init"),
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &DenseMatrix<T> {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn project(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.in_dim() {
            return Err(TwmError::DimMismatch {
                context: "projection input",
                left: self.in_dim(),
                right: x.len(),
            });
        }
        let mut out = matvec(&self.weights, x)?;
        for (o, &b) in out.iter_mut().zip(&self.bias) {
            *o = *o + b;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    /// Parameters as one vector: weights row-major, then bias.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = self.weights.data().to_vec();
        out.extend_from_slice(&self.bias);
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        let nw = self.weights.data().len();
        assert_eq!(flat.len(), nw + self.bias.len(), "flat parameter length");
        self.weights.data_mut().copy_from_slice(&flat[..nw]);
        self.bias.copy_from_slice(&flat[nw..]);
    }

    pub fn n_params(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    /// TWMP: magic, version `u16`, reserved `u16`, `out_dim: u32`,
    /// `in_dim: u32`, weights as `f64` row-major, bias as `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_header(TWMP_MAGIC);
        w.u16(0);
        w.u32(self.out_dim());
        w.u32(self.in_dim());
        for &v in self.weights.data().iter().chain(&self.bias) {
            w.f64(v.as_f64());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, TWMP_MAGIC, TWMP_HEADER_LEN)?;
        let _reserved = r.u16();
        let out_dim = r.u32();
        let in_dim = r.u32();
        if out_dim == 0 || in_dim == 0 {
            return Err(TwmError::InvalidHeader(format!("out_dim={out_dim}, in_dim={in_dim}")));
        }
        let n_params = checked_size(&[out_dim, in_dim])?
            .checked_add(out_dim)
            .ok_or_else(|| TwmError::InvalidHeader("declared sizes overflow".into()))?;
        r.expect_total(TWMP_HEADER_LEN + checked_size(&[n_params, 8])?)?;
        let vals: Vec<T> = (0..n_params).map(|_| T::lit(r.f64())).collect();
        let (w, b) = vals.split_at(out_dim * in_dim);
        Self::new(DenseMatrix::from_vec(out_dim, in_dim, w.to_vec())?, b.to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.to_bytes())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Loads the TWMP binary or the JSON form.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_bytes(path.as_ref())?;
        if bytes.starts_with(TWMP_MAGIC) {
            return Self::from_bytes(&bytes);
        }
        if bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{') {
            let layer: Self = serde_json::from_slice(&bytes)?;
            return Self::new(layer.weights, layer.bias);
        }
        Err(TwmError::UnrecognizedFormat)
    }
}

/// Gradient of a scalar loss with respect to a [`ProjectionLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrad<T> {
    pub weights: DenseMatrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ProjectionGrad<T> {
    pub fn zeros_like(layer: &ProjectionLayer<T>) -> Self {
        Self {
            weights: DenseMatrix::zeros(layer.out_dim(), layer.in_dim()),
            bias: vec![T::zero(); layer.out_dim()],
        }
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = self.weights.data().to_vec();
        out.extend_from_slice(&self.bias);
        out
    }

    fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, &b) in self.weights.data_mut().iter_mut().zip(other.weights.data()) {
            *a = *a + b * scale;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a = *a + b * scale;
        }
    }
}

/// One anchor, its positive and `N ≥ 1` negatives at temperature `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch<T> {
    pub anchor: Vec<T>,
    pub positive: Vec<T>,
    pub negatives: Vec<Vec<T>>,
    pub tau: T,
}

impl<T: Scalar> ContrastiveBatch<T> {
    pub fn new(anchor: Vec<T>, positive: Vec<T>, negatives: Vec<Vec<T>>, tau: T) -> Self {
        Self {
            anchor,
            positive,
            negatives,
            tau,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > T::zero()) {
            return Err(TwmError::InvalidInput(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.negatives.is_empty() {
            return Err(TwmError::InvalidInput("contrastive batch needs at least one negative".into()));
        }
        Ok(())
    }

    /// Positive first, then negatives in list order.
    fn candidates(&self) -> impl Iterator<Item = &[T]> {
        std::iter::once(self.positive.as_slice()).chain(self.negatives.iter().map(Vec::as_slice))
    }
}

/// Cross-entropy of the positive among `[positive, negatives…]` with logits
/// `cos(anchor, c)/τ`; the denominator includes the positive.
///
/// Evaluated as `ln(1 + Σ_j e^{l_j − l⁺})` when the positive logit is the
/// largest and as a max-shifted log-sum-exp otherwise, so it stays finite
/// for logit gaps far beyond the `exp` range. Negatives are summed in list
/// order; reordering them changes the result by at most rounding.
pub fn infonce_loss<T: Scalar>(batch: &ContrastiveBatch<T>) -> Result<T> {
    batch.validate()?;
    let logits = similarity_logits(&batch.anchor, batch)?;
    Ok(loss_from_logits(&logits))
}

/// Audio↔visual alignment loss: the anchor is a video-frame embedding and
/// the candidates are audio embeddings. Same kernel as [`infonce_loss`].
pub fn audio_visual_infonce<T: Scalar>(batch: &ContrastiveBatch<T>) -> Result<T> {
    infonce_loss(batch)
}

fn similarity_logits<T: Scalar>(anchor: &[T], batch: &ContrastiveBatch<T>) -> Result<Vec<T>> {
    batch
        .candidates()
        .map(|c| cosine_sim(anchor, c).map(|s| s / batch.tau))
        .collect()
}

pub(crate) fn loss_from_logits<T: Scalar>(logits: &[T]) -> T {
    let pos = logits[0];
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    if pos >= max {
        let mut tail = T::zero();
        for &l in &logits[1..] {
            tail = tail + (l - pos).exp();
        }
        tail.ln_1p()
    } else {
        let mut total = T::zero();
        for &l in logits {
            total = total + (l - max).exp();
        }
        max - pos + total.ln()
    }
}

/// `∂ cos(z, c) / ∂z`.
pub(crate) fn cosine_grad_wrt_first<T: Scalar>(z: &[T], c: &[T]) -> Result<Vec<T>> {
    let nz = norm(z);
    let nc = norm(c);
    if nz == T::zero() || nc == T::zero() {
        return Err(TwmError::ZeroNorm);
    }
    let cos = dot(z, c) / (nz * nc);
    let inv = T::one() / (nz * nc);
    let zz = cos / (nz * nz);
    Ok(z.iter().zip(c).map(|(&zi, &ci)| ci * inv - zi * zz).collect())
}

/// Loss and `∂L/∂(sim_i)` for each candidate, positive first.
pub(crate) fn infonce_sim_grads<T: Scalar>(sims: &[T], tau: T) -> (T, Vec<T>) {
    let logits: Vec<T> = sims.iter().map(|&s| s / tau).collect();
    let loss = loss_from_logits(&logits);
    let p = softmax_unchecked(&logits);
    let grads = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| (if i == 0 { pi - T::one() } else { pi }) / tau)
        .collect();
    (loss, grads)
}

/// Loss and exact gradient of `infonce_loss` after projecting the anchor.
///
/// With `z = W·a + b`, `s_i = cos(z, c_i)` and `p = softmax(s/τ)`:
/// `∂L/∂z = Σ_i (p_i − [i = 0])/τ · (c_i/(‖z‖‖c_i‖) − s_i·z/‖z‖²)`,
/// `∂L/∂W = (∂L/∂z)·aᵀ` and `∂L/∂b = ∂L/∂z`. Positives and negatives are
/// already in the target space and are not projected.
pub fn infonce_grad<T: Scalar>(
    batch: &ContrastiveBatch<T>,
    projection: &ProjectionLayer<T>,
) -> Result<(T, ProjectionGrad<T>)> {
    batch.validate()?;
    let z = projection.project(&batch.anchor)?;
    let sims: Vec<T> = batch
        .candidates()
        .map(|c| cosine_sim(&z, c))
        .collect::<Result<_>>()?;
    let (loss, sim_grads) = infonce_sim_grads(&sims, batch.tau);
    let mut grad_z = vec![T::zero(); z.len()];
    for (c, &g) in batch.candidates().zip(&sim_grads) {
        let dcos = cosine_grad_wrt_first(&z, c)?;
        for (acc, d) in grad_z.iter_mut().zip(dcos) {
            *acc = *acc + g * d;
        }
    }
    let mut grad = ProjectionGrad::zeros_like(projection);
    for (r, &gz) in grad_z.iter().enumerate() {
        for (w, &a) in grad.weights.row_mut(r).iter_mut().zip(&batch.anchor) {
            *w = gz * a;
        }
    }
    grad.bias = grad_z;
    Ok((loss, grad))
}

/// Adam with bias-corrected moments over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: i32,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize, lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            t: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len(), "Adam parameter count");
        assert_eq!(grads.len(), self.m.len(), "Adam gradient count");
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] = params[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    32
}
fn default_seed() -> u64 {
    42
}
fn default_tau() -> f64 {
    0.07
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: default_seed(),
            tau: default_tau(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TwmError::InvalidConfig(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(TwmError::InvalidConfig("batch_size must be >= 2".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(TwmError::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub layer: ProjectionLayer<T>,
    /// Mean per-pair loss of each epoch, measured before each Adam step.
    pub loss_history: Vec<T>,
}

/// A (visual, text) training pair.
pub type Pair<T> = (Vec<T>, Vec<T>);

fn check_pairs<T: Scalar>(pairs: &[Pair<T>]) -> Result<(usize, usize)> {
    if pairs.len() < 2 {
        return Err(TwmError::InsufficientNegatives(pairs.len()));
    }
    let (vd, td) = (pairs[0].0.len(), pairs[0].1.len());
    for (v, t) in pairs {
        if v.len() != vd {
            return Err(TwmError::DimMismatch {
                context: "visual pair vectors",
                left: vd,
                right: v.len(),
            });
        }
        if t.len() != td {
            return Err(TwmError::DimMismatch {
                context: "text pair vectors",
                left: td,
                right: t.len(),
            });
        }
    }
    Ok((vd, td))
}

/// Splits a shuffled order into batches of `batch_size`; a trailing
/// singleton joins the previous batch so every member has a negative.
/// Each batch is sorted so in-batch summation order does not depend on the
/// shuffle.
pub(crate) fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    for b in &mut batches {
        b.sort_unstable();
    }
    batches
}

/// Mean loss and gradient over one batch with in-batch negatives.
pub fn batch_loss_grad<T: Scalar>(
    pairs: &[Pair<T>],
    members: &[usize],
    layer: &ProjectionLayer<T>,
    tau: T,
) -> Result<(T, ProjectionGrad<T>)> {
    let mut total = T::zero();
    let mut grad = ProjectionGrad::zeros_like(layer);
    let scale = T::one() / T::from_usize_lossy(members.len());
    for &i in members {
        let negatives = members
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| pairs[j].1.clone())
            .collect();
        let batch = ContrastiveBatch::new(pairs[i].0.clone(), pairs[i].1.clone(), negatives, tau);
        let (loss, g) = infonce_grad(&batch, layer)?;
        total = total + loss;
        grad.add_scaled(&g, scale);
    }
    Ok((total * scale, grad))
}

/// Trains a freshly initialized projection (uniform ±1/√in_dim, seeded).
pub fn train_projection<T: Scalar>(pairs: &[Pair<T>], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let (vd, td) = check_pairs(pairs)?;
    let mut rng = SeededRng::derive(cfg.seed, 0);
    let init = ProjectionLayer::init_uniform(vd, td, &mut rng);
    train_projection_from(init, pairs, cfg)
}

/// Adam over `cfg.epochs` passes of seeded-shuffled batches.
pub fn train_projection_from<T: Scalar>(
    mut layer: ProjectionLayer<T>,
    pairs: &[Pair<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let (vd, td) = check_pairs(pairs)?;
    if layer.in_dim() != vd || layer.out_dim() != td {
        return Err(TwmError::InvalidInput(format!(
            "initial projection maps {}→{} but pairs are {vd}→{td}",
            layer.in_dim(),
            layer.out_dim()
        )));
    }
    let tau = T::lit(cfg.tau);
    let mut adam = Adam::new(layer.n_params(), T::lit(cfg.lr));
    let mut shuffle_rng = SeededRng::derive(cfg.seed, 1);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_total = T::zero();
        for members in make_batches(&order, cfg.batch_size) {
            let (loss, grad) = batch_loss_grad(pairs, &members, &layer, tau)?;
            epoch_total = epoch_total + loss * T::from_usize_lossy(members.len());
            let mut flat = layer.to_flat();
            adam.step(&mut flat, &grad.to_flat());
            layer.set_flat(&flat);
            if !layer.is_finite() {
                return Err(TwmError::NonFinite("projection after Adam step"));
            }
        }
        let mean = epoch_total / T::from_usize_lossy(pairs.len());
        log::debug!("epoch {epoch}: mean loss {mean}");
        history.push(mean);
    }
    Ok(TrainOutcome {
        layer,
        loss_history: history,
    })
}

#[derive(Debug, Clone)]
pub struct AudioTrainOutcome<T> {
    pub encoder: AudioEncoder<T>,
    /// Mean per-example loss of each epoch, measured before each Adam step.
    pub loss_history: Vec<T>,
}

/// Trains the audio encoder (query/key/value maps and output projection)
/// so each visual anchor picks out its own segment among the clip's other
/// segments. Batches average per-example gradients.
pub fn train_audio_encoder<T: Scalar>(
    mut encoder: AudioEncoder<T>,
    examples: &[AudioAlignExample<T>],
    kernels: &[usize],
    cfg: &TrainConfig,
) -> Result<AudioTrainOutcome<T>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TwmError::InvalidInput("no audio training examples".into()));
    }
    let tau = T::lit(cfg.tau);
    let mut adam = Adam::new(encoder.n_params(), T::lit(cfg.lr));
    let mut shuffle_rng = SeededRng::derive(cfg.seed, 2);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_total = T::zero();
        for members in make_batches(&order, cfg.batch_size) {
            let scale = T::one() / T::from_usize_lossy(members.len());
            let mut grad = vec![T::zero(); encoder.n_params()];
            for &i in &members {
                let (loss, g) = encoder.alignment_loss_grad(&examples[i], kernels, tau)?;
                epoch_total = epoch_total + loss;
                for (acc, x) in grad.iter_mut().zip(g) {
                    *acc = *acc + x * scale;
                }
            }
            let mut flat = encoder.to_flat();
            adam.step(&mut flat, &grad);
            encoder.set_flat(&flat);
            if !encoder.is_finite() {
                return Err(TwmError::NonFinite("audio encoder after Adam step"));
            }
        }
        let mean = epoch_total / T::from_usize_lossy(examples.len());
        log::debug!("audio epoch {epoch}: mean loss {mean}");
        history.push(mean);
    }
    Ok(AudioTrainOutcome {
        encoder,
        loss_history: history,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord<T> {
    visual: Vec<T>,
    text: Vec<T>,
}

/// JSON array of `{"visual": [...], "text": [...]}` records.
pub fn parse_pairs<T: Scalar>(text: &str) -> Result<Vec<Pair<T>>> {
    let records: Vec<PairRecord<T>> = serde_json::from_str(text)?;
    let pairs: Vec<Pair<T>> = records.into_iter().map(|r| (r.visual, r.text)).collect();
    if pairs.iter().any(|(v, t)| v.iter().chain(t).any(|x| !x.is_finite())) {
        return Err(TwmError::NonFinite("training pairs"));
    }
    Ok(pairs)
}

pub fn load_pairs<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Pair<T>>> {
    parse_pairs(&crate::io::read_text(path.as_ref())?)
}

pub fn save_pairs<T: Scalar>(pairs: &[Pair<T>], path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<PairRecord<T>> = pairs
        .iter()
        .map(|(v, t)| PairRecord { visual: v.clone(), text: t.clone() })
        .collect();
    write_bytes(path.as_ref(), serde_json::to_string(&records)?.as_bytes())
}

/// `epoch,mean_loss` rows, epochs counted from 1.
pub fn loss_history_csv<T: Scalar>(history: &[T]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l.as_f64()));
    }
    out
}

/// Mean cosine between each projected visual vector and its own text.
pub fn mean_positive_cosine<T: Scalar>(layer: &ProjectionLayer<T>, pairs: &[Pair<T>]) -> Result<T> {
    let mut total = T::zero();
    for (v, t) in pairs {
        total = total + cosine_sim(&layer.project(v)?, t)?;
    }
    Ok(total / T::from_usize_lossy(pairs.len().max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        rng.normal_vec(n)
    }

    /// Central-difference gradient of the projected loss; independent of
    /// the analytic path except for sharing `infonce_loss`.
    fn numeric_grad(batch: &ContrastiveBatch<f64>, layer: &ProjectionLayer<f64>, h: f64) -> Vec<f64> {
        let base = layer.to_flat();
        let eval = |flat: &[f64]| {
            let mut l = layer.clone();
            l.set_flat(flat);
            let z = l.project(&batch.anchor).unwrap();
            let b = ContrastiveBatch::new(z, batch.positive.clone(), batch.negatives.clone(), batch.tau);
            infonce_loss(&b).unwrap()
        };
        (0..base.len())
            .map(|i| {
                let mut up = base.clone();
                let mut dn = base.clone();
                up[i] += h;
                dn[i] -= h;
                (eval(&up) - eval(&dn)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn symmetric_two_way_is_ln2() {
        let b = ContrastiveBatch::new(vec![1.0, 0.0], vec![0.0, 1.0], vec![vec![0.0, -1.0]], 1.0);
        assert!((infonce_loss(&b).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((audio_visual_infonce(&b).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn closed_form_unit_positive_zero_negative() {
        let b = ContrastiveBatch::new(vec![1.0, 0.0], vec![2.0, 0.0], vec![vec![0.0, 3.0]], 1.0);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((infonce_loss(&b).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn uniform_case_is_ln_n_plus_one() {
        for n in 1..=6 {
            let negs = vec![vec![0.0, 1.0, 0.0]; n];
            let b = ContrastiveBatch::new(vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], negs, 0.3);
            let want = ((n + 1) as f64).ln();
            assert!((infonce_loss(&b).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn audio_kernel_matches_text_kernel() {
        let mut rng = SeededRng::new(5);
        let b = ContrastiveBatch::new(
            rand_vec(&mut rng, 4),
            rand_vec(&mut rng, 4),
            vec![rand_vec(&mut rng, 4), rand_vec(&mut rng, 4)],
            0.07,
        );
        assert_eq!(infonce_loss(&b).unwrap().to_bits(), audio_visual_infonce(&b).unwrap().to_bits());
    }

    #[test]
    fn smaller_tau_larger_loss_when_positive_does_not_dominate() {
        // sims: positive 0.2, negatives 0.5 and -0.1
        let anchor = vec![1.0, 0.0];
        let at = |s: f64| vec![s, (1.0 - s * s).sqrt()];
        let make = |tau| ContrastiveBatch::new(anchor.clone(), at(0.2), vec![at(0.5), at(-0.1)], tau);
        let sharp = infonce_loss(&make(0.07)).unwrap();
        let soft = infonce_loss(&make(1.0)).unwrap();
        // closed form at tau = 1
        let want = -(0.2f64.exp() / (0.2f64.exp() + 0.5f64.exp() + (-0.1f64).exp())).ln();
        assert!((soft - want).abs() < 1e-12);
        assert!(sharp > soft);
    }

    #[test]
    fn batch_errors() {
        let mut b = ContrastiveBatch::new(vec![1.0, 0.0], vec![1.0, 0.0], vec![vec![0.0, 1.0]], 0.0);
        assert!(infonce_loss(&b).is_err());
        b.tau = 1.0;
        b.anchor = vec![0.0, 0.0];
        assert!(matches!(infonce_loss(&b), Err(TwmError::ZeroNorm)));
        b.anchor = vec![1.0, 0.0];
        b.negatives.clear();
        assert!(infonce_loss(&b).is_err());
    }

    #[test]
    fn extreme_logit_gap_stays_finite() {
        let b = ContrastiveBatch::new(vec![1.0f64, 0.0], vec![1.0, 0.0], vec![vec![-1.0, 0.0]], 1e-4);
        let l = infonce_loss(&b).unwrap();
        assert!(l.is_finite() && l >= 0.0);
        let b = ContrastiveBatch::new(vec![1.0f64, 0.0], vec![-1.0, 0.0], vec![vec![1.0, 0.0]], 1e-4);
        let l = infonce_loss(&b).unwrap();
        assert!(l.is_finite());
        assert!((l - 2e4).abs() < 1e-6);
    }

    #[test]
    fn one_dimensional_minimum_has_zero_gradient() {
        // In 1-D cosine is ±1 wherever z ≠ 0; the aligned configuration is a
        // flat minimum.
        let layer = ProjectionLayer::new(DenseMatrix::from_vec(1, 1, vec![2.0f64]).unwrap(), vec![0.5]).unwrap();
        let b = ContrastiveBatch::new(vec![1.0], vec![3.0], vec![vec![-1.0]], 0.5);
        let (_, g) = infonce_grad(&b, &layer).unwrap();
        assert!(g.to_flat().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn gradient_matches_finite_differences_4_to_3() {
        let mut rng = SeededRng::new(17);
        let layer = ProjectionLayer::init_uniform(4, 3, &mut rng);
        let b = ContrastiveBatch::new(
            rand_vec(&mut rng, 4),
            rand_vec(&mut rng, 3),
            vec![rand_vec(&mut rng, 3), rand_vec(&mut rng, 3)],
            0.5,
        );
        let (_, g) = infonce_grad(&b, &layer).unwrap();
        let num = numeric_grad(&b, &layer, 1e-5);
        let scale = num.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, n) in g.to_flat().iter().zip(&num) {
            assert!((a - n).abs() / scale < 1e-5, "{a} vs {n}");
        }
    }

    #[test]
    fn gradient_tracks_temperature() {
        let mut rng = SeededRng::new(23);
        let layer = ProjectionLayer::init_uniform(3, 3, &mut rng);
        for tau in [0.07, 0.3, 2.0] {
            let b = ContrastiveBatch::new(
                rand_vec(&mut rng, 3),
                rand_vec(&mut rng, 3),
                vec![rand_vec(&mut rng, 3)],
                tau,
            );
            let (_, g) = infonce_grad(&b, &layer).unwrap();
            let num = numeric_grad(&b, &layer, 1e-6);
            let scale = num.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            for (a, n) in g.to_flat().iter().zip(&num) {
                assert!((a - n).abs() / scale < 1e-5, "tau {tau}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn twmp_round_trip() {
        let mut rng = SeededRng::new(1);
        let layer: ProjectionLayer<f64> = ProjectionLayer::init_uniform(5, 2, &mut rng);
        let bytes = layer.to_bytes();
        assert_eq!(bytes.len(), 16 + (10 + 2) * 8);
        assert_eq!(ProjectionLayer::from_bytes(&bytes).unwrap(), layer);
        assert!(ProjectionLayer::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let json = serde_json::to_string(&layer).unwrap();
        let back: ProjectionLayer<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, layer);
    }

    #[test]
    fn batches_absorb_trailing_singleton() {
        let b = make_batches(&[4, 0, 3, 1, 2], 2);
        assert_eq!(b, vec![vec![0, 4], vec![1, 2, 3]]);
        assert_eq!(make_batches(&[1, 0], 8), vec![vec![0, 1]]);
    }

    fn aligned_pairs(n: usize, dim: usize, seed: u64) -> Vec<Pair<f64>> {
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|_| {
                let t = rand_vec(&mut rng, dim);
                (t.clone(), t)
            })
            .collect()
    }

    #[test]
    fn too_few_pairs_rejected() {
        let pairs = aligned_pairs(1, 3, 0);
        let err = train_projection(&pairs, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().starts_with("insufficient negatives"));
    }

    #[test]
    fn zero_lr_leaves_parameters_and_loss_unchanged() {
        let pairs = aligned_pairs(6, 4, 3);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 5,
            ..TrainConfig::default()
        };
        let mut rng = SeededRng::derive(cfg.seed, 0);
        let init = ProjectionLayer::<f64>::init_uniform(4, 4, &mut rng);
        let out = train_projection(&pairs, &cfg).unwrap();
        assert_eq!(out.layer, init);
        assert!(out.loss_history.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn identity_start_on_aligned_pairs_stays_near_floor() {
        let pairs = aligned_pairs(8, 6, 4);
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 20,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train_projection_from(ProjectionLayer::identity(6), &pairs, &cfg).unwrap();
        let h = &out.loss_history;
        assert!(h.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{h:?}");
        assert!(mean_positive_cosine(&out.layer, &pairs).unwrap() > 0.99);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let pairs = aligned_pairs(10, 3, 8);
        let cfg = TrainConfig {
            lr: 1e-2,
            epochs: 4,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train_projection(&pairs, &cfg).unwrap();
        let b = train_projection(&pairs, &cfg).unwrap();
        assert_eq!(a.layer.to_bytes(), b.layer.to_bytes());
        let bits = |h: &[f64]| h.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.loss_history), bits(&b.loss_history));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut adam = Adam::new(2, 0.1f64);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[2.0, -3.0]);
        // first bias-corrected step is lr·sign(g)
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
        assert_eq!(adam.steps(), 1);
    }

    proptest! {
        #[test]
        fn loss_is_positive_and_finite(seed in any::<u64>(), n in 1usize..6, tau in 0.01f64..2.0) {
            let mut rng = SeededRng::new(seed);
            let b = ContrastiveBatch::new(
                rand_vec(&mut rng, 5),
                rand_vec(&mut rng, 5),
                (0..n).map(|_| rand_vec(&mut rng, 5)).collect(),
                tau,
            );
            let l = infonce_loss(&b).unwrap();
            prop_assert!(l.is_finite() && l > 0.0);
        }

        #[test]
        fn negative_order_changes_loss_only_by_rounding(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let negs: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 4)).collect();
            let mut b = ContrastiveBatch::new(rand_vec(&mut rng, 4), rand_vec(&mut rng, 4), negs, 0.2);
            let before = infonce_loss(&b).unwrap();
            b.negatives.reverse();
            prop_assert!((infonce_loss(&b).unwrap() - before).abs() < 1e-12);
        }
    }
}
