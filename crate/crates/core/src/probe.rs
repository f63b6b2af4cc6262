//! Linear probe on frozen embeddings and classification metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape};
use crate::data::{Checkpoint, Subset};
use crate::encoder::{encode_images, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, Optimizer, OptimizerState};
use crate::params::Params;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "probe";

/// Affine classifier `logits = W·e + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    /// `[n_classes × d]`.
    pub weight: Tensor,
    /// `[n_classes]`.
    pub bias: Tensor,
}

impl ProbeHead {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![n_classes, dim]),
            bias: Tensor::zeros(vec![n_classes]),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn logits(&self, e: &[f64]) -> Vec<f64> {
        (0..self.n_classes())
            .map(|k| {
                self.weight
                    .row(k)
                    .iter()
                    .zip(e)
                    .fold(self.bias.data()[k], |acc, (w, x)| acc + w * x)
            })
            .collect()
    }

    /// Highest logit; ties go to the lowest class id.
    pub fn predict(&self, e: &[f64]) -> usize {
        let l = self.logits(e);
        (1..l.len()).fold(0, |best, k| if l[k] > l[best] { k } else { best })
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.weight.bitwise_eq(&other.weight) && self.bias.bitwise_eq(&other.bias)
    }

    pub fn to_checkpoint(&self, class_names: &[String], config_echo: serde_json::Value) -> Checkpoint {
        let mut tensors = indexmap::IndexMap::new();
        tensors.insert("weight".into(), self.weight.clone());
        tensors.insert("bias".into(), self.bias.clone());
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config: config_echo,
            meta: serde_json::json!({ "class_names": class_names }),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Vec<String>)> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::Incompatible(format!(
                "expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`",
                ckpt.kind
            )));
        }
        let weight = ckpt.tensor("weight")?.clone();
        let bias = ckpt.tensor("bias")?.clone();
        let (k, _) = weight.dims2()?;
        if bias.shape() != [k] {
            return Err(Error::Integrity(format!("probe bias has shape {:?}", bias.shape())));
        }
        let names: Vec<String> = serde_json::from_value(ckpt.meta.get("class_names").cloned().unwrap_or_default())
            .map_err(|e| Error::Integrity(format!("probe class names: {e}")))?;
        if names.len() != k {
            return Err(Error::Integrity(format!("{} class names for {k} classes", names.len())));
        }
        Ok((Self { weight, bias }, names))
    }
}

/// Mean softmax cross-entropy of `logits [N × K]` against fixed labels.
#[derive(Clone, Debug)]
pub struct SoftmaxCrossEntropyOp {
    labels: Vec<usize>,
    probs: Vec<f64>,
}

impl SoftmaxCrossEntropyOp {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels, probs: Vec::new() }
    }
}

impl CustomOp for SoftmaxCrossEntropyOp {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, k) = inputs[0].dims2()?;
        if self.labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", &[n], &[self.labels.len()]));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} outside {k} classes")));
        }
        self.probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = inputs[0].row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                self.probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += z.ln() + m - row[self.labels[i]];
        }
        Ok(Tensor::scalar(loss / n as f64))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (n, k) = inputs[0].dims2()?;
        let g = grad_output.item()? / n as f64;
        let mut d = self.probs.clone();
        for (i, &l) in self.labels.iter().enumerate() {
            d[i * k + l] -= 1.0;
        }
        d.iter_mut().for_each(|v| *v *= g);
        Ok(vec![Some(Tensor::matrix(n, k, d)?)])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.05,
        }
    }
}

/// Full-batch Adam on softmax cross-entropy.
///
/// Optimisation runs on standardised features; the scaling is folded back
/// into the returned head, which therefore applies to raw features.
pub fn train_probe_on_features(features: &[Tensor], labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<ProbeHead> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Contract("probe needs one label per feature vector".into()));
    }
    let first = labels[0];
    if n_classes < 2 || labels.iter().all(|&l| l == first) {
        return Err(Error::DegenerateTask("probe training set contains a single class".into()));
    }
    let d = features[0].numel();
    if cfg.steps == 0 {
        return Ok(ProbeHead::zeros(n_classes, d));
    }
    let n = features.len();
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f.data()).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut std = vec![0.0; d];
    for f in features {
        std.iter_mut()
            .zip(f.data().iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m).powi(2) / n as f64);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
    let mut x = Vec::with_capacity(n * d);
    for f in features {
        x.extend(f.data().iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s));
    }
    let x = Tensor::matrix(n, d, x)?;

    let mut params = Params::new();
    params.insert("weight_t", Tensor::zeros(vec![d, n_classes]));
    params.insert("bias", Tensor::zeros(vec![n_classes]));
    let mut opt = OptimizerState::default();
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let logits = tape.matmul(xv, bound.get("weight_t")?)?;
        let logits = tape.add_tiled(logits, bound.get("bias")?)?;
        let loss = tape.custom(&[logits], Box::new(SoftmaxCrossEntropyOp::new(labels.to_vec())))?;
        let grads = bound.gradients(&tape.backward(loss)?, &params)?;
        optimizer_step(&mut params, &mut opt, &grads, &Optimizer::default(), cfg.learning_rate)?;
    }

    let wt = params.get("weight_t")?;
    let b = params.get("bias")?;
    let mut weight = vec![0.0; n_classes * d];
    let mut bias = b.data().to_vec();
    for k in 0..n_classes {
        for j in 0..d {
            let w = wt.data()[j * n_classes + k] / std[j];
            weight[k * d + j] = w;
            bias[k] -= w * mean[j];
        }
    }
    Ok(ProbeHead {
        weight: Tensor::matrix(n_classes, d, weight)?,
        bias: Tensor::vector(bias),
    })
}

/// Pre-projection embeddings of a subset, in subset order.
pub fn embed_subset(params: &Params, enc: &EncoderConfig, data: &Subset) -> Result<Vec<Tensor>> {
    Ok(encode_images(&data.images(), enc, params)?
        .into_iter()
        .map(|e| e.pre_projection)
        .collect())
}

/// Trains a probe on frozen encoder features; the encoder is only evaluated.
pub fn train_probe(params: &Params, enc: &EncoderConfig, data: &Subset, cfg: &ProbeConfig) -> Result<ProbeHead> {
    let feats = embed_subset(params, enc, data)?;
    train_probe_on_features(&feats, &data.labels(), data.n_classes(), cfg)
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != pred.len() {
        return Err(Error::shape("confusion_matrix", &[truth.len()], &[pred.len()]));
    }
    let mut c = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Contract(format!("class id outside {n_classes} classes")));
        }
        c[t][p] += 1;
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Macro-averaged metrics; any 0/0 ratio counts as 0.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if confusion.iter().any(|r| r.len() != k) {
            return Err(Error::Contract("confusion matrix must be square".into()));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Contract("cannot evaluate an empty dataset".into()));
        }
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let predicted: u64 = (0..k).map(|r| confusion[r][c]).sum();
                let support: u64 = confusion[c].iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
        Ok(Self {
            accuracy: trace as f64 / total as f64,
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
            confusion,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table: per-class rows, a macro row, then the confusion matrix.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| format!("class_{i}"));
        let w = (0..self.per_class.len())
            .map(|i| name(i).len())
            .chain(["macro".len()])
            .max()
            .unwrap_or(5);
        let mut s = String::new();
        writeln!(s, "{:<w$}  {:>9}  {:>9}  {:>9}  {:>7}", "class", "precision", "recall", "f1", "support").unwrap();
        for (i, m) in self.per_class.iter().enumerate() {
            writeln!(
                s,
                "{:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                name(i),
                m.precision,
                m.recall,
                m.f1,
                m.support
            )
            .unwrap();
        }
        let total: u64 = self.per_class.iter().map(|m| m.support).sum();
        writeln!(
            s,
            "{:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1, total
        )
        .unwrap();
        writeln!(s, "accuracy {:.4}", self.accuracy).unwrap();
        writeln!(s, "\nconfusion (rows = true, columns = predicted)").unwrap();
        let cw = self
            .confusion
            .iter()
            .flatten()
            .map(|v| v.to_string().len())
            .max()
            .unwrap_or(1)
            .max(3);
        for (i, row) in self.confusion.iter().enumerate() {
            write!(s, "{:<w$}", name(i)).unwrap();
            for v in row {
                write!(s, "  {v:>cw$}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Confusion and metrics of `head` over a subset.
pub fn evaluate(head: &ProbeHead, params: &Params, enc: &EncoderConfig, data: &Subset) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let labels = data.labels();
    if let Some(&bad) = labels.iter().find(|&&l| l >= head.n_classes()) {
        return Err(Error::Contract(format!(
            "label {bad} outside the probe's {} classes",
            head.n_classes()
        )));
    }
    let feats = embed_subset(params, enc, data)?;
    let pred: Vec<usize> = feats.iter().map(|f| head.predict(f.data())).collect();
    MetricsReport::from_confusion(confusion_matrix(&labels, &pred, head.n_classes())?)
}

/// Mean silhouette coefficient under Euclidean distance.
///
/// Points in singleton clusters score 0. Needs at least two clusters.
pub fn silhouette_score(points: &[Tensor], labels: &[usize]) -> Result<f64> {
    let n = points.len();
    if n != labels.len() || n == 0 {
        return Err(Error::Contract("silhouette needs one label per point".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::DegenerateTask("silhouette needs at least two clusters".into()));
    }
    let dist = |a: &Tensor, b: &Tensor| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(&points[i], &points[j]);
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion() {
        let r = MetricsReport::from_confusion(vec![vec![5, 0], vec![2, 3]]).unwrap();
        assert!((r.accuracy - 0.8).abs() < 1e-15);
        assert!((r.per_class[0].precision - 5.0 / 7.0).abs() < 1e-15);
        assert_eq!(r.per_class[0].recall, 1.0);
        assert_eq!(r.per_class[1].precision, 1.0);
        assert!((r.per_class[1].recall - 0.6).abs() < 1e-15);
        assert!((r.macro_f1 - 0.5 * (10.0 / 12.0 + 0.75)).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_inverse() {
        let r = MetricsReport::from_confusion(vec![vec![4, 0], vec![0, 6]]).unwrap();
        assert_eq!((r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1), (1.0, 1.0, 1.0, 1.0));
        let r = MetricsReport::from_confusion(vec![vec![0, 4], vec![6, 0]]).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.macro_f1, 0.0);
        assert!(MetricsReport::from_confusion(vec![vec![0, 0], vec![0, 0]]).is_err());
    }

    #[test]
    fn table_lists_classes() {
        let r = MetricsReport::from_confusion(vec![vec![5, 0], vec![2, 3]]).unwrap();
        let t = r.to_table(&["healthy".into(), "rust".into()]);
        assert!(t.contains("healthy") && t.contains("macro") && t.contains("0.8000"));
    }

    #[test]
    fn separable_two_class_probe() {
        let feats: Vec<Tensor> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                Tensor::vector(vec![s * (0.1 + 0.01 * i as f64), 0.3 * ((i * 7) % 5) as f64])
            })
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let head = train_probe_on_features(&feats, &labels, 2, &ProbeConfig::default()).unwrap();
        assert!(feats.iter().zip(&labels).all(|(f, &l)| head.predict(f.data()) == l));
    }

    #[test]
    fn zero_steps_and_single_class() {
        let feats = vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![2.0])];
        let cfg = ProbeConfig { steps: 0, ..ProbeConfig::default() };
        let head = train_probe_on_features(&feats, &[0, 1], 2, &cfg).unwrap();
        assert!(head.bitwise_eq(&ProbeHead::zeros(2, 1)));
        assert!(matches!(
            train_probe_on_features(&feats, &[1, 1], 2, &cfg),
            Err(Error::DegenerateTask(_))
        ));
    }

    #[test]
    fn silhouette_of_separated_clusters() {
        let pts: Vec<Tensor> = [0.0, 0.1, 10.0, 10.1].iter().map(|&v| Tensor::vector(vec![v])).collect();
        let s = silhouette_score(&pts, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.98);
        let mixed = silhouette_score(&pts, &[0, 1, 0, 1]).unwrap();
        assert!(mixed < 0.0);
    }
}
