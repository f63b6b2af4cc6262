//! Contrastive pretraining: views → encoder → dual loss → update.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentationSpec};
use crate::autodiff::Tape;
use crate::data::{Checkpoint, Subset};
use crate::encoder::{encode_batch, init_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{
    inter_loss_from_similarity, intra_loss_from_similarity, pooled_similarity, total_loss, Mining,
    UncertaintyParams,
};
use crate::optim::{clip_global_norm, optimizer_step, update_uncertainty, Optimizer, OptimizerState};
use crate::params::Params;
use crate::seed;
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5408;

pub const CHECKPOINT_KIND: &str = "pretrain";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub temperature: f64,
    pub margin: f64,
    pub mining: Mining,
    pub initial_log_sigma: UncertaintyParams,
    pub global_seed: u64,
    /// Epochs between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    pub inter_loss_enabled: bool,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 3e-4,
            optimizer: Optimizer::default(),
            temperature: 0.5,
            margin: 0.5,
            mining: Mining::BatchHard,
            initial_log_sigma: UncertaintyParams::default(),
            global_seed: 0,
            checkpoint_interval: 0,
            inter_loss_enabled: true,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("train.epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("train.batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("train.learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("train.temperature must be > 0, got {}", self.temperature));
        }
        if !(self.margin > 0.0) {
            return bad(format!("train.margin must be > 0, got {}", self.margin));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("train.grad_clip must be > 0 when set".into());
        }
        self.optimizer.validate()
    }
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_intra: f64,
    pub l_inter: f64,
    pub sigma_intra: f64,
    pub sigma_inter: f64,
    pub l_total: f64,
}

impl LossRecord {
    const COLUMNS: usize = 7;

    fn to_row(self) -> [f64; Self::COLUMNS] {
        [
            self.step as f64,
            self.epoch as f64,
            self.l_intra,
            self.l_inter,
            self.sigma_intra,
            self.sigma_inter,
            self.l_total,
        ]
    }

    fn from_row(r: &[f64]) -> Self {
        Self {
            step: r[0] as u64,
            epoch: r[1] as usize,
            l_intra: r[2],
            l_inter: r[3],
            sigma_intra: r[4],
            sigma_inter: r[5],
            l_total: r[6],
        }
    }
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,epoch,l_intra,l_inter,sigma_intra,sigma_inter,l_total\n");
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.epoch, r.l_intra, r.l_inter, r.sigma_intra, r.sigma_inter, r.l_total
        )
        .expect("write to String");
    }
    out
}

pub fn write_history_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

/// Everything needed to continue training exactly where it stopped.
///
/// Randomness is a pure function of `(global_seed, epoch, sample id, view)`
/// and of `(global_seed, epoch)` for shuffling, so the position
/// `(epoch, batch_in_epoch)` together with the seed is the RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub global_seed: u64,
    pub params: Params,
    pub uncertainty: UncertaintyParams,
    pub optimizer: OptimizerState,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn init(enc: &EncoderConfig, cfg: &TrainConfig) -> Result<Self> {
        enc.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(&[cfg.global_seed, INIT_STREAM]));
        Ok(Self {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            global_seed: cfg.global_seed,
            params: init_params(enc, &mut rng)?,
            uncertainty: cfg.initial_log_sigma,
            optimizer: OptimizerState::default(),
            history: Vec::new(),
        })
    }

    /// Bitwise equality of every tensor and counter.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let bits = |u: &UncertaintyParams| (u.log_sigma_intra.to_bits(), u.log_sigma_inter.to_bits());
        self.step == other.step
            && self.epoch == other.epoch
            && self.batch_in_epoch == other.batch_in_epoch
            && self.global_seed == other.global_seed
            && self.params.bitwise_eq(&other.params)
            && bits(&self.uncertainty) == bits(&other.uncertainty)
            && self.optimizer.bitwise_eq(&other.optimizer)
            && history_csv(&self.history) == history_csv(&other.history)
    }

    pub fn to_checkpoint(&self, enc: &EncoderConfig, config_echo: serde_json::Value) -> Result<Checkpoint> {
        let mut tensors = indexmap::IndexMap::new();
        for (name, t) in self.params.iter() {
            tensors.insert(format!("param/{name}"), t.clone());
        }
        for (name, t) in self.optimizer.m.iter() {
            tensors.insert(format!("adam_m/{name}"), t.clone());
        }
        for (name, t) in self.optimizer.v.iter() {
            tensors.insert(format!("adam_v/{name}"), t.clone());
        }
        tensors.insert(
            "log_sigma".into(),
            Tensor::vector(vec![self.uncertainty.log_sigma_intra, self.uncertainty.log_sigma_inter]),
        );
        let rows: Vec<f64> = self.history.iter().flat_map(|r| r.to_row()).collect();
        tensors.insert(
            "history".into(),
            Tensor::matrix(self.history.len(), LossRecord::COLUMNS, rows)?,
        );
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: config_echo,
            meta: serde_json::json!({
                "encoder": enc,
                "step": self.step,
                "epoch": self.epoch,
                "batch_in_epoch": self.batch_in_epoch,
                "global_seed": self.global_seed,
                "adam_t": self.optimizer.t,
            }),
            tensors,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, EncoderConfig)> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::Incompatible(format!(
                "expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`",
                ckpt.kind
            )));
        }
        let meta = &ckpt.meta;
        let int = |k: &str| {
            meta.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Integrity(format!("checkpoint meta lacks `{k}`")))
        };
        let enc: EncoderConfig = serde_json::from_value(meta.get("encoder").cloned().unwrap_or_default())
            .map_err(|e| Error::Integrity(format!("checkpoint encoder config: {e}")))?;
        let mut params = Params::new();
        let mut m = Params::new();
        let mut v = Params::new();
        for (name, t) in &ckpt.tensors {
            if let Some(n) = name.strip_prefix("param/") {
                params.insert(n, t.clone());
            } else if let Some(n) = name.strip_prefix("adam_m/") {
                m.insert(n, t.clone());
            } else if let Some(n) = name.strip_prefix("adam_v/") {
                v.insert(n, t.clone());
            }
        }
        let expected = init_params(&enc, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in expected.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Integrity(format!("checkpoint lacks parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Integrity(format!(
                    "parameter `{name}` has shape {:?}, encoder config implies {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        let ls = ckpt.tensor("log_sigma")?.data();
        if ls.len() != 2 {
            return Err(Error::Integrity("log_sigma must hold two values".into()));
        }
        let hist = ckpt.tensor("history")?;
        let history = if hist.numel() == 0 {
            Vec::new()
        } else {
            let (_, cols) = hist.dims2()?;
            if cols != LossRecord::COLUMNS {
                return Err(Error::Integrity(format!("history has {cols} columns")));
            }
            hist.data().chunks_exact(cols).map(LossRecord::from_row).collect()
        };
        let state = Self {
            step: int("step")?,
            epoch: int("epoch")? as usize,
            batch_in_epoch: int("batch_in_epoch")? as usize,
            global_seed: int("global_seed")?,
            params,
            uncertainty: UncertaintyParams {
                log_sigma_intra: ls[0],
                log_sigma_inter: ls[1],
            },
            optimizer: OptimizerState { t: int("adam_t")?, m, v },
            history,
        };
        Ok((state, enc))
    }
}

/// Losses, parameter gradients and `∂L/∂log σ` for one pair of view batches.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_total: f64,
    pub inter_degenerate: bool,
    pub grads: Params,
    pub grad_log_sigma: (f64, f64),
}

/// Forward and backward pass of the full objective; no state is modified.
pub fn loss_and_gradients(
    params: &Params,
    uncertainty: &UncertaintyParams,
    enc: &EncoderConfig,
    cfg: &TrainConfig,
    views1: &[Tensor],
    views2: &[Tensor],
    labels: &[usize],
) -> Result<StepOutput> {
    let b = views1.len();
    if views2.len() != b || labels.len() != b {
        return Err(Error::Contract("views1, views2 and labels must have equal length".into()));
    }
    if b < 2 {
        return Err(Error::InsufficientNegatives(b));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let s_intra = tape.leaf(Tensor::scalar(uncertainty.log_sigma_intra));
    let s_inter = tape.leaf(Tensor::scalar(uncertainty.log_sigma_inter));
    let z1 = encode_batch(&mut tape, enc, &bound, views1)?.z;
    let z2 = encode_batch(&mut tape, enc, &bound, views2)?.z;
    let sim = pooled_similarity(&mut tape, z1, z2)?;
    let l_intra = intra_loss_from_similarity(&mut tape, sim, cfg.temperature)?;

    let pooled_labels: Vec<usize> = labels.iter().chain(labels).copied().collect();
    let inter = if cfg.inter_loss_enabled {
        Some(inter_loss_from_similarity(&mut tape, sim, &pooled_labels, cfg.margin)?)
    } else {
        None
    };
    let inter_active = inter.filter(|l| !l.degenerate);
    let total = match inter_active {
        Some(l) => total_loss(&mut tape, l_intra, l.value, s_intra, s_inter)?,
        None => {
            let m2 = tape.scale(s_intra, -2.0);
            let w = tape.exp(m2)?;
            let wl = tape.mul(l_intra, w)?;
            let half = tape.scale(wl, 0.5);
            tape.add(half, s_intra)?
        }
    };
    let l_total = tape.value(total).item()?;
    if !l_total.is_finite() {
        let culprit = tape
            .first_non_finite()
            .map_or_else(|| "unknown".to_string(), |(v, op)| format!("node {} ({op})", v.index()));
        return Err(Error::NonFinite(format!(
            "training loss is {l_total}; first non-finite tensor: {culprit}"
        )));
    }
    let grads = tape.backward(total)?;
    let param_grads = bound.gradients(&grads, params)?;
    if let Some((name, _)) = param_grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    let scalar_grad = |v| grads.get(v).map_or(0.0, |g| g.data()[0]);
    Ok(StepOutput {
        l_intra: tape.value(l_intra).item()?,
        l_inter: inter.map_or(Ok(0.0), |l| tape.value(l.value).item())?,
        l_total,
        inter_degenerate: inter.is_some_and(|l| l.degenerate),
        grads: param_grads,
        grad_log_sigma: (scalar_grad(s_intra), scalar_grad(s_inter)),
    })
}

/// Sample order of one epoch.
pub fn epoch_order(global_seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(&[
        global_seed,
        epoch as u64,
        SHUFFLE_STREAM,
    ])));
    order
}

/// The two view batches of one training batch, with labels and source ids.
pub struct ViewBatch {
    pub views1: Vec<Tensor>,
    pub views2: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub source_ids: Vec<usize>,
}

pub fn make_batch(data: &Subset, members: &[usize], aug: &AugmentationSpec, global_seed: u64, epoch: usize) -> Result<ViewBatch> {
    let pairs: Vec<(Tensor, Tensor)> = members
        .par_iter()
        .map(|&i| {
            let s = seed::sample_seed(global_seed, epoch as u64, data.id(i) as u64);
            make_views(data.image(i), aug, s)
        })
        .collect::<Result<_>>()?;
    let (views1, views2) = pairs.into_iter().unzip();
    Ok(ViewBatch {
        views1,
        views2,
        labels: members.iter().map(|&i| data.label(i)).collect(),
        source_ids: members.iter().map(|&i| data.id(i)).collect(),
    })
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n / batch_size
}

/// Runs the next batch and advances the state by one step.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    aug: &AugmentationSpec,
    data: &Subset,
) -> Result<LossRecord> {
    let per_epoch = batches_per_epoch(data.len(), cfg.batch_size);
    if per_epoch == 0 {
        return Err(Error::Precondition(format!(
            "batch size {} exceeds the {} training samples",
            cfg.batch_size,
            data.len()
        )));
    }
    let order = epoch_order(state.global_seed, state.epoch, data.len());
    let start = state.batch_in_epoch * cfg.batch_size;
    let batch = make_batch(data, &order[start..start + cfg.batch_size], aug, state.global_seed, state.epoch)?;
    let mut out = loss_and_gradients(
        &state.params,
        &state.uncertainty,
        enc,
        cfg,
        &batch.views1,
        &batch.views2,
        &batch.labels,
    )?;
    if let Some(c) = cfg.grad_clip {
        clip_global_norm(&mut out.grads, c);
    }
    optimizer_step(&mut state.params, &mut state.optimizer, &out.grads, &cfg.optimizer, cfg.learning_rate)?;
    update_uncertainty(&mut state.uncertainty, out.grad_log_sigma, cfg.learning_rate);

    let record = LossRecord {
        step: state.step,
        epoch: state.epoch,
        l_intra: out.l_intra,
        l_inter: out.l_inter,
        sigma_intra: state.uncertainty.sigma_intra(),
        sigma_inter: state.uncertainty.sigma_inter(),
        l_total: out.l_total,
    };
    state.history.push(record);
    state.step += 1;
    state.batch_in_epoch += 1;
    if state.batch_in_epoch == per_epoch {
        state.batch_in_epoch = 0;
        state.epoch += 1;
    }
    Ok(record)
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn pretrain(cfg: &TrainConfig, enc: &EncoderConfig, aug: &AugmentationSpec, data: &Subset) -> Result<TrainState> {
    let mut state = TrainState::init(enc, cfg)?;
    resume(&mut state, cfg, enc, aug, data, |_| Ok(()))?;
    Ok(state)
}

/// Continues training until `cfg.epochs` epochs are complete, calling
/// `on_epoch_end` after every finished epoch.
pub fn resume(
    state: &mut TrainState,
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    aug: &AugmentationSpec,
    data: &Subset,
    mut on_epoch_end: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    enc.validate()?;
    aug.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if cfg.batch_size > data.len() {
        return Err(Error::Precondition(format!(
            "batch size {} exceeds the {} training samples",
            cfg.batch_size,
            data.len()
        )));
    }
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let r = train_step(state, cfg, enc, aug, data)?;
        log::debug!(
            "step {} epoch {} l_intra {:.4} l_inter {:.4} l_total {:.4}",
            r.step,
            r.epoch,
            r.l_intra,
            r.l_inter,
            r.l_total
        );
        if state.epoch != epoch {
            log::info!(
                "epoch {}/{}: l_total {:.4} (sigma_intra {:.3}, sigma_inter {:.3})",
                epoch + 1,
                cfg.epochs,
                r.l_total,
                r.sigma_intra,
                r.sigma_inter
            );
            on_epoch_end(state)?;
        }
    }
    Ok(())
}
