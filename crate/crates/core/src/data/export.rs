use std::fmt::Write as _;
use std::path::Path;

use super::Dataset;
use crate::encoder::{encode_images, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

/// Writes `sample_id,class_id,e_0..e_{d-1}`, one row per embedding.
pub fn write_embeddings_csv(path: &Path, ids: &[usize], labels: &[usize], embeddings: &[Tensor]) -> Result<()> {
    if ids.len() != labels.len() || ids.len() != embeddings.len() {
        return Err(Error::Contract("ids, labels and embeddings must have equal length".into()));
    }
    let d = embeddings.first().map_or(0, Tensor::numel);
    let mut out = String::from("sample_id,class_id");
    for j in 0..d {
        write!(out, ",e_{j}").expect("write to String");
    }
    out.push('\n');
    for ((id, label), e) in ids.iter().zip(labels).zip(embeddings) {
        if e.numel() != d {
            return Err(Error::shape("write_embeddings_csv", &[d], e.shape()));
        }
        write!(out, "{id},{label}").expect("write to String");
        for v in e.data() {
            write!(out, ",{v}").expect("write to String");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Pre-projection embeddings of every sample, in manifest order.
pub fn export_embeddings(params: &Params, cfg: &EncoderConfig, data: &Dataset, path: &Path) -> Result<()> {
    let emb: Vec<Tensor> = encode_images(&data.images, cfg, params)?
        .into_iter()
        .map(|e| e.pre_projection)
        .collect();
    if let Some(bad) = emb.iter().position(|e| !e.is_finite()) {
        return Err(Error::NonFinite(format!("embedding of sample {bad}")));
    }
    write_embeddings_csv(path, &data.ids(), &data.labels(), &emb)
}
