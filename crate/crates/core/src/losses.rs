//! Dual-level contrastive objective.
//!
//! * intra: symmetric NT-Xent over the pooled `2B` view embeddings, the
//!   positive of anchor `i` being its paired view and the denominator running
//!   over all `2B − 1` non-self candidates (positive included, so the loss is
//!   never negative);
//! * inter: margin hinge `max(0, m − s(i, j⁺) + s(i, k⁻))` on cosine
//!   similarities with batch-hard mining;
//! * total: `L_intra / 2σ²_intra + L_inter / 2σ²_inter + log(σ_intra σ_inter)`
//!   with σ stored as `log σ`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// View embeddings of one batch and the loss hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveBatch<'a> {
    /// `[B × p]`, unit rows.
    pub z1: Var,
    /// `[B × p]`, unit rows; row `i` pairs with `z1` row `i`.
    pub z2: Var,
    pub labels: &'a [usize],
    pub temperature: f64,
    pub margin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    /// Lowest-similarity positive, highest-similarity negative.
    BatchHard,
}

/// Learnable `log σ` pair weighting the two losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyParams {
    pub log_sigma_intra: f64,
    pub log_sigma_inter: f64,
}

impl Default for UncertaintyParams {
    fn default() -> Self {
        Self {
            log_sigma_intra: 0.0,
            log_sigma_inter: 0.0,
        }
    }
}

impl UncertaintyParams {
    pub fn sigma_intra(&self) -> f64 {
        self.log_sigma_intra.exp()
    }

    pub fn sigma_inter(&self) -> f64 {
        self.log_sigma_inter.exp()
    }
}

/// Stacks `z1` over `z2` and forms the cosine-similarity matrix `[2B × 2B]`.
pub fn pooled_similarity(tape: &mut Tape, z1: Var, z2: Var) -> Result<Var> {
    let (r1, c1) = tape.value(z1).dims2()?;
    if tape.shape(z2) != [r1, c1] {
        return Err(Error::shape("pooled_similarity", tape.shape(z1), tape.shape(z2)));
    }
    let a = tape.transpose(z1)?;
    let b = tape.transpose(z2)?;
    let cols = tape.concat_cols(a, b)?;
    let pooled = tape.transpose(cols)?;
    tape.matmul(pooled, cols)
}

/// NT-Xent on a precomputed `[P × P]` similarity matrix with `P = 2B`, where
/// anchor `i` is paired with `(i + B) mod P`.
pub struct NtXentOp {
    temperature: f64,
}

impl NtXentOp {
    pub fn new(temperature: f64) -> Self {
        Self { temperature }
    }

    fn rows(&self, sim: &Tensor) -> Result<Vec<(f64, Vec<f64>)>> {
        let (p, q) = sim.dims2()?;
        if p != q || p % 2 != 0 {
            return Err(Error::shape("nt_xent", sim.shape(), &[p, p]));
        }
        let half = p / 2;
        let tau = self.temperature;
        Ok((0..p)
            .map(|i| {
                let pos = (i + half) % p;
                let logits: Vec<f64> = sim.row(i).iter().map(|s| s / tau).collect();
                let max = logits
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != i)
                    .map(|(_, &l)| l)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut probs = vec![0.0; p];
                let mut denom = 0.0;
                for k in (0..p).filter(|&k| k != i) {
                    probs[k] = (logits[k] - max).exp();
                    denom += probs[k];
                }
                probs.iter_mut().for_each(|v| *v /= denom);
                let loss = -(logits[pos] - max) + denom.ln();
                (loss, probs)
            })
            .collect())
    }
}

impl CustomOp for NtXentOp {
    fn name(&self) -> &'static str {
        "nt_xent"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let rows = self.rows(inputs[0])?;
        let mean = rows.iter().map(|(l, _)| l).sum::<f64>() / rows.len() as f64;
        Ok(Tensor::scalar(mean.max(0.0)))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let sim = inputs[0];
        let rows = self.rows(sim)?;
        let p = rows.len();
        let half = p / 2;
        let scale = grad.item()? / (self.temperature * p as f64);
        let mut g = vec![0.0; p * p];
        for (i, (_, probs)) in rows.iter().enumerate() {
            for k in (0..p).filter(|&k| k != i) {
                let target = if k == (i + half) % p { 1.0 } else { 0.0 };
                g[i * p + k] = (probs[k] - target) * scale;
            }
        }
        Ok(vec![Some(Tensor::from_parts(vec![p, p], g))])
    }
}

/// Intra-view NT-Xent loss.
pub fn intra_loss(tape: &mut Tape, batch: &ContrastiveBatch) -> Result<Var> {
    let (b, _) = tape.value(batch.z1).dims2()?;
    if b < 2 {
        return Err(Error::InsufficientNegatives(b));
    }
    if !(batch.temperature > 0.0) {
        return Err(Error::Precondition(format!(
            "temperature must be positive, got {}",
            batch.temperature
        )));
    }
    let sim = pooled_similarity(tape, batch.z1, batch.z2)?;
    intra_loss_from_similarity(tape, sim, batch.temperature)
}

pub fn intra_loss_from_similarity(tape: &mut Tape, sim: Var, temperature: f64) -> Result<Var> {
    tape.custom(&[sim], Box::new(NtXentOp::new(temperature)))
}

/// Margin hinge with batch-hard mining on a `[P × P]` similarity matrix.
pub struct MarginHingeOp {
    labels: Vec<usize>,
    margin: f64,
    /// `(anchor, positive, negative, active)` per anchor that has both.
    triplets: Vec<(usize, usize, usize, bool)>,
}

impl MarginHingeOp {
    pub fn new(labels: Vec<usize>, margin: f64) -> Self {
        Self {
            labels,
            margin,
            triplets: Vec::new(),
        }
    }
}

/// Hardest positive and hardest negative of each anchor; ties go to the lowest index.
fn mine(sim: &Tensor, labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let p = labels.len();
    let mut out = Vec::new();
    for i in 0..p {
        let row = sim.row(i);
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for k in (0..p).filter(|&k| k != i) {
            if labels[k] == labels[i] {
                if pos.is_none_or(|j| row[k] < row[j]) {
                    pos = Some(k);
                }
            } else if neg.is_none_or(|j| row[k] > row[j]) {
                neg = Some(k);
            }
        }
        if let (Some(j), Some(k)) = (pos, neg) {
            out.push((i, j, k));
        }
    }
    out
}

impl CustomOp for MarginHingeOp {
    fn name(&self) -> &'static str {
        "margin_hinge"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let sim = inputs[0];
        let (p, q) = sim.dims2()?;
        if p != q || p != self.labels.len() {
            return Err(Error::shape("margin_hinge", sim.shape(), &[self.labels.len()]));
        }
        let mut total = 0.0;
        self.triplets = mine(sim, &self.labels)
            .into_iter()
            .map(|(i, j, k)| {
                // m − (s⁺ − s⁻): equal similarities give exactly m
                let term = self.margin - (sim.at2(i, j) - sim.at2(i, k));
                let active = term > 0.0;
                if active {
                    total += term;
                }
                (i, j, k, active)
            })
            .collect();
        if self.triplets.is_empty() {
            return Ok(Tensor::scalar(0.0));
        }
        Ok(Tensor::scalar(total / self.triplets.len() as f64))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let p = self.labels.len();
        let mut g = vec![0.0; p * p];
        if !self.triplets.is_empty() {
            let w = grad.item()? / self.triplets.len() as f64;
            for &(i, j, k, active) in &self.triplets {
                if active {
                    g[i * p + j] -= w;
                    g[i * p + k] += w;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), g))])
    }
}

/// Inter-class loss value plus a flag for batches with a single class.
#[derive(Clone, Copy, Debug)]
pub struct InterLoss {
    pub value: Var,
    pub degenerate: bool,
}

pub fn inter_loss(tape: &mut Tape, batch: &ContrastiveBatch) -> Result<InterLoss> {
    let (b, _) = tape.value(batch.z1).dims2()?;
    if batch.labels.len() != b {
        return Err(Error::shape("inter_loss", &[b], &[batch.labels.len()]));
    }
    if !(batch.margin > 0.0) {
        return Err(Error::Precondition(format!("margin must be positive, got {}", batch.margin)));
    }
    let sim = pooled_similarity(tape, batch.z1, batch.z2)?;
    let pooled: Vec<usize> = batch.labels.iter().chain(batch.labels).copied().collect();
    inter_loss_from_similarity(tape, sim, &pooled, batch.margin)
}

/// `labels` has one entry per similarity row.
pub fn inter_loss_from_similarity(tape: &mut Tape, sim: Var, labels: &[usize], margin: f64) -> Result<InterLoss> {
    let first = labels.first().copied();
    let degenerate = labels.iter().all(|&l| Some(l) == first);
    let value = tape.custom(&[sim], Box::new(MarginHingeOp::new(labels.to_vec(), margin)))?;
    Ok(InterLoss { value, degenerate })
}

/// `l_intra·e^{−2s₁}/2 + l_inter·e^{−2s₂}/2 + s₁ + s₂` with `s = log σ`.
pub fn total_loss(tape: &mut Tape, l_intra: Var, l_inter: Var, log_sigma_intra: Var, log_sigma_inter: Var) -> Result<Var> {
    let weighted = |tape: &mut Tape, l: Var, s: Var| -> Result<Var> {
        let m2 = tape.scale(s, -2.0);
        let inv_var = tape.exp(m2)?;
        let w = tape.mul(l, inv_var)?;
        Ok(tape.scale(w, 0.5))
    };
    let a = weighted(tape, l_intra, log_sigma_intra)?;
    let b = weighted(tape, l_inter, log_sigma_inter)?;
    let ab = tape.add(a, b)?;
    let reg = tape.add(log_sigma_intra, log_sigma_inter)?;
    tape.add(ab, reg)
}

/// Closed-form minimum of the total over σ for fixed positive losses.
pub fn optimal_total(l_intra: f64, l_inter: f64) -> f64 {
    1.0 + 0.5 * (l_intra * l_inter).ln()
}
