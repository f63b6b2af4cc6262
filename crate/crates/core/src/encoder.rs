//! Bidirectional selective-SSM image encoder.
//!
//! `image → patches → linear embed + position → n × block → mean-pool →
//! 2-layer head → L2 normalize`. Each block is
//!
//! ```text
//! n      = RMSNorm(x)
//! u, g   = n·W_x, n·W_g
//! y_f    = SSM_fwd(u),  y_b = reverse(SSM_bwd(reverse(u)))
//! fused  = [y_f | y_b]·W_fuse
//! x'     = x + (fused ⊙ SiLU(g))·W_out
//! ```

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BoundParams, Params};
use crate::ssm::{self, uniform, SelectiveSsmParams, SsmVars};
use crate::tensor::Tensor;

const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub d_inner: usize,
    pub n_state: usize,
    pub proj_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            d_model: 64,
            n_blocks: 2,
            d_inner: 128,
            n_state: 16,
            proj_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("d_inner", self.d_inner),
            ("n_state", self.n_state),
            ("proj_dim", self.proj_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be at least 1")));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::Config(format!(
                "encoder.channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    /// Tokens per image.
    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Token sequence for one image, row-major over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub tokens: Tensor,
    pub grid: (usize, usize),
    pub source_id: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    /// Unit-norm projection-head output.
    pub z: Tensor,
    /// Mean-pooled token features fed to the head.
    pub pre_projection: Tensor,
}

/// Randomly initialized encoder parameters.
pub fn init_params(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Params> {
    cfg.validate()?;
    let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let (dm, di) = (cfg.d_model, cfg.d_inner);
    let mut p = Params::new();
    p.insert("patch.weight", uniform(rng, vec![cfg.patch_dim(), dm], bound(cfg.patch_dim())));
    p.insert("patch.bias", Tensor::zeros(vec![dm]));
    p.insert("pos_embed", Tensor::zeros(vec![cfg.num_patches(), dm]));
    for b in 0..cfg.n_blocks {
        let pre = format!("blocks.{b}");
        p.insert(format!("{pre}.norm"), Tensor::ones(vec![dm]));
        p.insert(format!("{pre}.in_x"), uniform(rng, vec![dm, di], bound(dm)));
        p.insert(format!("{pre}.in_gate"), uniform(rng, vec![dm, di], bound(dm)));
        p.insert_ssm(&format!("{pre}.fwd"), &SelectiveSsmParams::init(di, cfg.n_state, rng));
        p.insert_ssm(&format!("{pre}.bwd"), &SelectiveSsmParams::init(di, cfg.n_state, rng));
        p.insert(format!("{pre}.fuse"), uniform(rng, vec![2 * di, di], bound(2 * di)));
        p.insert(format!("{pre}.out"), uniform(rng, vec![di, dm], bound(di)));
    }
    p.insert("head.w1", uniform(rng, vec![dm, dm], bound(dm)));
    p.insert("head.b1", Tensor::zeros(vec![dm]));
    p.insert("head.w2", uniform(rng, vec![dm, cfg.proj_dim], bound(dm)));
    p.insert("head.b2", Tensor::zeros(vec![cfg.proj_dim]));
    Ok(p)
}

/// Splits `[C × H × W]` into `[M × C·p²]`, patches row-major over the grid and
/// each patch flattened channel, row, column.
pub fn extract_patches(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Config(format!(
            "image must be [C×H×W], got {:?}",
            image.shape()
        )));
    };
    let p = cfg.patch_size;
    if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Config(format!(
            "image shape {:?} does not match encoder config ({} channels, {}×{})",
            image.shape(),
            cfg.channels,
            cfg.image_size,
            cfg.image_size
        )));
    }
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "image {h}×{w} is not divisible into {p}×{p} patches"
        )));
    }
    let (gr, gc) = (h / p, w / p);
    let d = image.data();
    let mut out = Vec::with_capacity(gr * gc * c * p * p);
    for pr in 0..gr {
        for pc in 0..gc {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * h + pr * p + dy) * w + pc * p;
                    out.extend_from_slice(&d[row..row + p]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![gr * gc, c * p * p], out))
}

/// Patch tokens for a batch: `[nb·M × d_model]`.
pub fn patch_embed_batch(tape: &mut Tape, cfg: &EncoderConfig, bound: &BoundParams, images: &[Tensor]) -> Result<Var> {
    let patches: Vec<Tensor> = images
        .iter()
        .map(|im| extract_patches(im, cfg))
        .collect::<Result<_>>()?;
    let x = tape.constant(Tensor::stack_rows(&patches)?);
    let tokens = tape.matmul(x, bound.get("patch.weight")?)?;
    let tokens = tape.add_tiled(tokens, bound.get("patch.bias")?)?;
    tape.add_tiled(tokens, bound.get("pos_embed")?)
}

/// Forward and backward SSM outputs over stacked sequences.
pub fn bidirectional_ssm(tape: &mut Tape, u: Var, fwd: &SsmVars, bwd: &SsmVars, seq_len: usize) -> Result<(Var, Var)> {
    let y_fwd = ssm::ssm_forward(tape, u, fwd, seq_len)?;
    let y_bwd = ssm::ssm_backward_direction(tape, u, bwd, seq_len)?;
    Ok((y_fwd, y_bwd))
}

/// One residual bidirectional block on stacked tokens `[nb·M × d_model]`.
pub fn block_forward(tape: &mut Tape, bound: &BoundParams, block: usize, x: Var, seq_len: usize) -> Result<Var> {
    let pre = format!("blocks.{block}");
    let n = tape.rms_norm(x, bound.get(&format!("{pre}.norm"))?, RMS_EPS)?;
    let u = tape.matmul(n, bound.get(&format!("{pre}.in_x"))?)?;
    let gate = tape.matmul(n, bound.get(&format!("{pre}.in_gate"))?)?;
    let fwd = bound.ssm(&format!("{pre}.fwd"))?;
    let bwd = bound.ssm(&format!("{pre}.bwd"))?;
    let (y_fwd, y_bwd) = bidirectional_ssm(tape, u, &fwd, &bwd, seq_len)?;
    let both = tape.concat_cols(y_fwd, y_bwd)?;
    let fused = tape.matmul(both, bound.get(&format!("{pre}.fuse"))?)?;
    let g = tape.silu(gate)?;
    let gated = tape.mul(fused, g)?;
    let update = tape.matmul(gated, bound.get(&format!("{pre}.out"))?)?;
    tape.add(x, update)
}

/// `(pre_projection [nb × d_model], z [nb × proj_dim])`.
pub struct EncodedBatch {
    pub pre_projection: Var,
    pub z: Var,
}

pub fn projection_head(tape: &mut Tape, bound: &BoundParams, pooled: Var) -> Result<Var> {
    let h = tape.matmul(pooled, bound.get("head.w1")?)?;
    let h = tape.add_tiled(h, bound.get("head.b1")?)?;
    let h = tape.silu(h)?;
    let z = tape.matmul(h, bound.get("head.w2")?)?;
    let z = tape.add_tiled(z, bound.get("head.b2")?)?;
    tape.l2_normalize(z)
}

/// Records the full encoder for a batch of images.
pub fn encode_batch(tape: &mut Tape, cfg: &EncoderConfig, bound: &BoundParams, images: &[Tensor]) -> Result<EncodedBatch> {
    if images.is_empty() {
        return Err(Error::Contract("encode_batch needs at least one image".into()));
    }
    let m = cfg.num_patches();
    let mut x = patch_embed_batch(tape, cfg, bound, images)?;
    for b in 0..cfg.n_blocks {
        x = block_forward(tape, bound, b, x, m)?;
    }
    let x3 = tape.reshape(x, vec![images.len(), m, cfg.d_model])?;
    let pooled = tape.mean(x3, Some(1))?;
    let z = projection_head(tape, bound, pooled)?;
    Ok(EncodedBatch {
        pre_projection: pooled,
        z,
    })
}

/// Patch embedding of a single image, evaluated without gradients.
pub fn patch_embed(image: &Tensor, cfg: &EncoderConfig, params: &Params) -> Result<PatchSequence> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let tokens = patch_embed_batch(&mut tape, cfg, &bound, std::slice::from_ref(image))?;
    Ok(PatchSequence {
        tokens: tape.value(tokens).clone(),
        grid: cfg.grid(),
        source_id: None,
    })
}

/// Applies block `block` to a token sequence, evaluated without gradients.
pub fn vim_block(seq: &PatchSequence, params: &Params, block: usize) -> Result<PatchSequence> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(seq.tokens.clone());
    let m = seq.tokens.shape()[0];
    let y = block_forward(&mut tape, &bound, block, x, m)?;
    Ok(PatchSequence {
        tokens: tape.value(y).clone(),
        ..seq.clone()
    })
}

/// Embeds one image, evaluated without gradients.
pub fn encode(image: &Tensor, cfg: &EncoderConfig, params: &Params) -> Result<ImageEmbedding> {
    Ok(encode_images(std::slice::from_ref(image), cfg, params)?.remove(0))
}

/// Embeds many images in fixed-size chunks (chunks run on the rayon pool).
pub fn encode_images(images: &[Tensor], cfg: &EncoderConfig, params: &Params) -> Result<Vec<ImageEmbedding>> {
    cfg.validate()?;
    const CHUNK: usize = 16;
    let chunks: Vec<Vec<ImageEmbedding>> = images
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let out = encode_batch(&mut tape, cfg, &bound, chunk)?;
            let (pre, z) = (tape.value(out.pre_projection), tape.value(out.z));
            Ok((0..chunk.len())
                .map(|i| ImageEmbedding {
                    z: Tensor::vector(z.row(i).to_vec()),
                    pre_projection: Tensor::vector(pre.row(i).to_vec()),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}
