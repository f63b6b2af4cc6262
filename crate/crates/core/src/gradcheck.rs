//! Finite-difference verification of every backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::encoder::{init_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{
    inter_loss_from_similarity, intra_loss_from_similarity, pooled_similarity, total_loss, UncertaintyParams,
};
use crate::probe::SoftmaxCrossEntropyOp;
use crate::ssm::selective_scan;
use crate::tensor::Tensor;
use crate::train::{loss_and_gradients, TrainConfig};

pub const OP_THRESHOLD: f64 = 1e-5;
pub const MODEL_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_EPS: f64 = 1e-5;
/// Step for the micro-model check, which extrapolates (see [`micro_model_check`]).
pub const MODEL_EPS: f64 = 1e-3;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Precondition(format!("finite-difference step must be in [1e-7, 1e-3], got {eps}")));
    }
    Ok(())
}

fn scalar_output(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract(format!("gradient check needs a scalar function, got shape {:?}", v.shape())));
    }
    v.item()
}

/// Max relative error between the tape gradient and central differences,
/// over every component of every input.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_output(&tape, out)?;
    let grads = tape.backward(out)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let v: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &v)?;
        scalar_output(&t, o)
    };
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            worst = worst.max(rel_err(analytic.data()[j], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_multi`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(|t, v| f(t, v[0]), std::slice::from_ref(x), eps)
}

/// A differentiable operation under test: random inputs and a scalar
/// function exercising the op.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub gen: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub f: fn(&mut Tape, &[Var]) -> Result<Var>,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn sym(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    rand_t(rng, shape, -1.0, 1.0)
}

/// `Σ w ⊙ y` with fixed pseudo-random weights depending only on `y`'s shape,
/// so every output component contributes with a distinct factor.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + ((i * 7919 + 13) % 101) as f64 / 101.0).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let prod = tape.mul(y, w)?;
    tape.sum(prod, None)
}

fn unit_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.l2_normalize(x)
}

macro_rules! case {
    ($name:expr, |$rng:ident| $gen:expr, |$tape:ident, $v:ident| $body:expr) => {
        GradCase {
            name: $name,
            gen: |$rng| $gen,
            f: |$tape, $v| {
                let y = $body;
                project($tape, y)
            },
        }
    };
}

/// Every differentiable operation, each listed once.
pub fn registered_ops() -> Vec<GradCase> {
    vec![
        case!("add", |r| vec![sym(r, &[3, 4]), sym(r, &[3, 4])], |t, v| t.add(v[0], v[1])?),
        case!("sub", |r| vec![sym(r, &[3, 4]), sym(r, &[3, 4])], |t, v| t.sub(v[0], v[1])?),
        case!("mul", |r| vec![sym(r, &[3, 4]), sym(r, &[3, 4])], |t, v| t.mul(v[0], v[1])?),
        case!("mul_scalar_broadcast", |r| vec![sym(r, &[3, 4]), sym(r, &[])], |t, v| t.mul(v[0], v[1])?),
        case!("add_scalar_broadcast", |r| vec![sym(r, &[]), sym(r, &[2, 3])], |t, v| t.add(v[0], v[1])?),
        case!("exp", |r| vec![sym(r, &[3, 4])], |t, v| t.exp(v[0])?),
        case!("log", |r| vec![rand_t(r, &[3, 4], 0.5, 2.0)], |t, v| t.log(v[0])?),
        case!("neg", |r| vec![sym(r, &[3, 4])], |t, v| t.neg(v[0])?),
        case!("softplus", |r| vec![rand_t(r, &[3, 4], -3.0, 3.0)], |t, v| t.softplus(v[0])?),
        case!("sigmoid", |r| vec![rand_t(r, &[3, 4], -3.0, 3.0)], |t, v| t.sigmoid(v[0])?),
        case!("tanh", |r| vec![sym(r, &[3, 4])], |t, v| t.tanh(v[0])?),
        case!("silu", |r| vec![rand_t(r, &[3, 4], -3.0, 3.0)], |t, v| t.silu(v[0])?),
        case!("scale", |r| vec![sym(r, &[3, 4])], |t, v| t.scale(v[0], -1.7)),
        case!("add_scalar", |r| vec![sym(r, &[3, 4])], |t, v| t.add_scalar(v[0], 0.3)),
        case!("sum", |r| vec![sym(r, &[3, 4])], |t, v| {
            let s = t.sum(v[0], None)?;
            t.mul(s, s)?
        }),
        case!("sum_axis", |r| vec![sym(r, &[2, 3, 4])], |t, v| t.sum(v[0], Some(1))?),
        case!("mean", |r| vec![sym(r, &[3, 4])], |t, v| {
            let s = t.mean(v[0], None)?;
            t.mul(s, s)?
        }),
        case!("mean_axis", |r| vec![sym(r, &[3, 4])], |t, v| t.mean(v[0], Some(0))?),
        case!("max", |r| vec![sym(r, &[12])], |t, v| {
            let m = t.max(v[0], None)?;
            t.mul(m, m)?
        }),
        case!("max_axis", |r| vec![sym(r, &[3, 4])], |t, v| t.max(v[0], Some(1))?),
        case!("matmul", |r| vec![sym(r, &[3, 4]), sym(r, &[4, 2])], |t, v| t.matmul(v[0], v[1])?),
        case!("transpose", |r| vec![sym(r, &[3, 4])], |t, v| t.transpose(v[0])?),
        case!("reshape", |r| vec![sym(r, &[3, 4])], |t, v| t.reshape(v[0], vec![2, 6])?),
        case!("add_tiled", |r| vec![sym(r, &[6, 2]), sym(r, &[3, 2])], |t, v| t.add_tiled(v[0], v[1])?),
        case!("rms_norm", |r| vec![sym(r, &[3, 4]), sym(r, &[4])], |t, v| t.rms_norm(v[0], v[1], 1e-6)?),
        case!("l2_normalize", |r| vec![rand_t(r, &[3, 4], 0.2, 1.0)], |t, v| t.l2_normalize(v[0])?),
        case!("concat_cols", |r| vec![sym(r, &[3, 2]), sym(r, &[3, 3])], |t, v| t.concat_cols(v[0], v[1])?),
        case!("reverse_segments", |r| vec![sym(r, &[6, 2])], |t, v| t.reverse_segments(v[0], 3)?),
        case!(
            "selective_scan",
            |r| vec![
                sym(r, &[8, 3]),
                rand_t(r, &[8, 3], 0.05, 1.0),
                rand_t(r, &[3, 2], -2.0, -0.2),
                sym(r, &[8, 2]),
                sym(r, &[8, 2]),
                sym(r, &[3]),
            ],
            |t, v| selective_scan(t, v[0], v[1], v[2], v[3], v[4], v[5], 4)?
        ),
        GradCase {
            name: "nt_xent",
            gen: |r| vec![sym(r, &[3, 4]), sym(r, &[3, 4])],
            f: |t, v| {
                let z1 = unit_rows(t, v[0])?;
                let z2 = unit_rows(t, v[1])?;
                let sim = pooled_similarity(t, z1, z2)?;
                intra_loss_from_similarity(t, sim, 0.5)
            },
        },
        GradCase {
            name: "margin_hinge",
            gen: |r| vec![sym(r, &[4, 3]), sym(r, &[4, 3])],
            f: |t, v| {
                let z1 = unit_rows(t, v[0])?;
                let z2 = unit_rows(t, v[1])?;
                let sim = pooled_similarity(t, z1, z2)?;
                // Margin 2.5 keeps every hinge active, away from its kink.
                Ok(inter_loss_from_similarity(t, sim, &[0, 1, 0, 1, 0, 1, 0, 1], 2.5)?.value)
            },
        },
        GradCase {
            name: "uncertainty_total",
            gen: |r| vec![rand_t(r, &[], 0.1, 3.0), rand_t(r, &[], 0.1, 3.0), sym(r, &[]), sym(r, &[])],
            f: |t, v| total_loss(t, v[0], v[1], v[2], v[3]),
        },
        GradCase {
            name: "softmax_cross_entropy",
            gen: |r| vec![rand_t(r, &[4, 3], -2.0, 2.0)],
            f: |t, v| t.custom(&[v[0]], Box::new(SoftmaxCrossEntropyOp::new(vec![0, 2, 1, 2]))),
        },
    ]
}

/// `tanh` with a deliberately wrong derivative; only used to prove the
/// harness notices a broken backward rule.
struct FaultyTanh;

impl CustomOp for FaultyTanh {
    fn name(&self) -> &'static str {
        "faulty_tanh"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(f64::tanh))
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let data = output.data().iter().zip(grad.data()).map(|(y, g)| g * (1.0 - y)).collect();
        Ok(vec![Some(Tensor::new(output.shape().to_vec(), data)?)])
    }
}

pub fn faulty_case() -> GradCase {
    case!("faulty_tanh", |r| vec![sym(r, &[3, 4])], |t, v| t.custom(&[v[0]], Box::new(FaultyTanh))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

/// Worst error of `case` over `trials` random input draws.
pub fn check_case(case: &GradCase, trials: usize, eps: f64, seed: u64) -> Result<ComponentResult> {
    let tag = case
        .name
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(&[seed, tag]));
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let inputs = (case.gen)(&mut rng);
        worst = worst.max(grad_check_multi(case.f, &inputs, eps)?);
    }
    Ok(ComponentResult {
        name: case.name.to_string(),
        max_rel_err: worst,
        threshold: OP_THRESHOLD,
    })
}

/// Encoder used for the end-to-end check: 16×16 input, 4×4 patches, one block.
pub fn micro_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        channels: 3,
        patch_size: 4,
        d_model: 8,
        n_blocks: 1,
        d_inner: 8,
        n_state: 4,
        proj_dim: 6,
    }
}

/// Finite differences on every parameter and both log σ values of the full
/// objective (encoder, scan, both losses, uncertainty weighting) on a
/// two-image micro-batch.
///
/// Many of the model's gradient entries are around 1e-8, where a plain
/// central difference is swamped by rounding at any step size. The numeric
/// side is therefore Richardson-extrapolated, `(4·D(eps/2) − D(eps)) / 3` with
/// `D` the central difference, which cancels the `eps²` term and lets `eps`
/// be large enough for rounding to stay small.
pub fn micro_model_check(seed: u64, eps: f64) -> Result<ComponentResult> {
    check_eps(eps)?;
    let enc = micro_encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(&enc, &mut rng)?;
    // Move well off the structured init (equal a_log rows, unit skip, zero
    // biases) to a generic point where every parameter matters.
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    let img = |rng: &mut ChaCha8Rng| rand_t(rng, &[3, 16, 16], 0.0, 1.0);
    let views1 = vec![img(&mut rng), img(&mut rng)];
    let views2 = vec![img(&mut rng), img(&mut rng)];
    let labels = [0, 1];
    let u = UncertaintyParams {
        log_sigma_intra: 0.3,
        log_sigma_inter: -0.2,
    };
    let cfg = TrainConfig {
        margin: 1.5,
        ..TrainConfig::default()
    };
    let analytic = loss_and_gradients(&params, &u, &enc, &cfg, &views1, &views2, &labels)?;
    if analytic.inter_degenerate {
        return Err(Error::Contract("micro-batch must contain two classes".into()));
    }
    let loss = |p: &crate::params::Params, u: &UncertaintyParams| -> Result<f64> {
        Ok(loss_and_gradients(p, u, &enc, &cfg, &views1, &views2, &labels)?.l_total)
    };

    let richardson = |g: &dyn Fn(f64) -> Result<f64>| -> Result<f64> {
        let central = |h: f64| -> Result<f64> { Ok((g(h)? - g(-h)?) / (2.0 * h)) };
        Ok((4.0 * central(eps / 2.0)? - central(eps)?) / 3.0)
    };

    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name)?.numel();
        for j in 0..n {
            let num = richardson(&|d| {
                let mut shifted = params.clone();
                shifted.get_mut(name)?.data_mut()[j] += d;
                loss(&shifted, &u)
            })?;
            let a = analytic.grads.get(name)?.data()[j];
            worst = worst.max(rel_err(a, num));
        }
    }
    for which in 0..2 {
        let num = richardson(&|d| {
            let mut v = u;
            if which == 0 {
                v.log_sigma_intra += d;
            } else {
                v.log_sigma_inter += d;
            }
            loss(&params, &v)
        })?;
        let a = if which == 0 {
            analytic.grad_log_sigma.0
        } else {
            analytic.grad_log_sigma.1
        };
        worst = worst.max(rel_err(a, num));
    }
    Ok(ComponentResult {
        name: "micro_model".into(),
        max_rel_err: worst,
        threshold: MODEL_THRESHOLD,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub trials: usize,
    pub eps: f64,
    pub model_eps: f64,
    pub seed: u64,
    pub include_model: bool,
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            eps: DEFAULT_EPS,
            model_eps: MODEL_EPS,
            seed: 0,
            include_model: true,
            inject_fault: false,
        }
    }
}

/// One result per registered op (plus the micro model and the injected fault when enabled).
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<ComponentResult>> {
    let mut cases = registered_ops();
    if opts.inject_fault {
        cases.push(faulty_case());
    }
    let mut out = cases
        .iter()
        .map(|c| check_case(c, opts.trials, opts.eps, opts.seed))
        .collect::<Result<Vec<_>>>()?;
    if opts.include_model {
        out.push(micro_model_check(opts.seed, opts.model_eps)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5]);
        let e = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq, None)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn exp_sum_is_accurate() {
        let x = Tensor::vector(vec![0.1, -0.7, 1.3]);
        let e = grad_check(
            |t, v| {
                let y = t.exp(v)?;
                t.sum(y, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn invalid_eps_and_vector_output() {
        let x = Tensor::vector(vec![1.0]);
        assert!(matches!(grad_check(|_, v| Ok(v), &x, 0.0), Err(Error::Precondition(_))));
        let x2 = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(grad_check(|_, v| Ok(v), &x2, 1e-5), Err(Error::Contract(_))));
    }

    #[test]
    fn op_names_are_unique() {
        let ops = registered_ops();
        let mut names: Vec<_> = ops.iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), ops.len());
    }

    #[test]
    fn faulty_rule_is_detected() {
        let r = check_case(&faulty_case(), 3, DEFAULT_EPS, 0).unwrap();
        assert!(!r.passed());
    }
}
