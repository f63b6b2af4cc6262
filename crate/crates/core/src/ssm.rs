//! Selective state-space kernels.
//!
//! The continuous system `h' = A h + B x, y = C h + D x` with diagonal `A` is
//! discretized per token with zero-order hold:
//!
//! ```text
//! Ā_t = exp(Δ_t A)
//! B̄_t = (exp(Δ_t A) − 1) / A · B_t        (→ Δ_t B_t as Δ_t A → 0)
//! h_t = Ā_t ⊙ h_{t−1} + B̄_t x_t,   y_t = C_t · h_t + D ⊙ x_t
//! ```
//!
//! `Δ_t`, `B_t` and `C_t` are linear projections of the token (the selective
//! part); `A` and `D` are input-independent. The recurrence is evaluated either
//! left to right ([`scan_sequential`]) or as a Blelloch prefix scan over the
//! associative composition of affine maps ([`scan_parallel`]).

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this `|ΔA|` the ZOH input gain switches to its Taylor series.
pub const TAYLOR_THRESHOLD: f64 = 1e-6;

/// `expm1(u) / u`, continuous through `u = 0`.
#[inline]
pub(crate) fn zoh_gain(u: f64, expm1_u: f64) -> f64 {
    if u.abs() < TAYLOR_THRESHOLD {
        1.0 + u * (0.5 + u / 6.0)
    } else {
        expm1_u / u
    }
}

/// Derivative of [`zoh_gain`] w.r.t. `u`.
#[inline]
fn zoh_gain_prime(u: f64, expm1_u: f64) -> f64 {
    if u.abs() < 1e-3 {
        0.5 + u * (1.0 / 3.0 + u * (0.125 + u * (1.0 / 30.0 + u / 144.0)))
    } else {
        (u * (expm1_u + 1.0) - expm1_u) / (u * u)
    }
}

/// Learnable parameters of one selective SSM direction.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveSsmParams {
    /// `[d_inner × n_state]`; `A = −exp(a_log)`.
    pub a_log: Tensor,
    /// `[d_inner]` skip gain.
    pub d_skip: Tensor,
    /// `[d_inner × d_inner]`.
    pub w_delta: Tensor,
    /// `[d_inner]`.
    pub delta_bias: Tensor,
    /// `[d_inner × n_state]`.
    pub w_b: Tensor,
    /// `[d_inner × n_state]`.
    pub w_c: Tensor,
}

/// Initial step size `softplus(delta_bias)`.
pub const INITIAL_DELTA: f64 = 0.05;

pub(crate) fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape, data)
}

impl SelectiveSsmParams {
    /// S4-style init: `A[d, n] = −(n + 1)`, `Δ ≈ 0.05`, unit skip, projections
    /// uniform in `±1/√d_inner`.
    pub fn init(d_inner: usize, n_state: usize, rng: &mut impl Rng) -> Self {
        let a_log = (0..d_inner)
            .flat_map(|_| (0..n_state).map(|n| ((n + 1) as f64).ln()))
            .collect();
        let bound = 1.0 / (d_inner as f64).sqrt();
        let bias = INITIAL_DELTA.exp_m1().ln();
        Self {
            a_log: Tensor::from_parts(vec![d_inner, n_state], a_log),
            d_skip: Tensor::ones(vec![d_inner]),
            w_delta: uniform(rng, vec![d_inner, d_inner], bound),
            delta_bias: Tensor::full(vec![d_inner], bias),
            w_b: uniform(rng, vec![d_inner, n_state], bound),
            w_c: uniform(rng, vec![d_inner, n_state], bound),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.d_skip.numel()
    }

    pub fn n_state(&self) -> usize {
        self.a_log.shape()[1]
    }

    /// The (strictly negative) state matrix diagonal.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("a_log", &self.a_log),
            ("d_skip", &self.d_skip),
            ("w_delta", &self.w_delta),
            ("delta_bias", &self.delta_bias),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
        ]
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> SsmVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        SsmVars {
            a_log: put(&self.a_log),
            d_skip: put(&self.d_skip),
            w_delta: put(&self.w_delta),
            delta_bias: put(&self.delta_bias),
            w_b: put(&self.w_b),
            w_c: put(&self.w_c),
        }
    }
}

/// Tape handles for a [`SelectiveSsmParams`].
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub a_log: Var,
    pub d_skip: Var,
    pub w_delta: Var,
    pub delta_bias: Var,
    pub w_b: Var,
    pub w_c: Var,
}

/// Discretized transition for one token: `Ā` and `B̄` per (channel, state).
#[derive(Clone, Debug, PartialEq)]
pub struct Discretized {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
}

/// One step of the recurrence `h ← a_bar ⊙ h + b_bar_x`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteStep {
    pub a_bar: Tensor,
    pub b_bar_x: Tensor,
}

/// Zero-order-hold discretization for diagonal `A`.
///
/// `a` is `[d_inner × n_state]`, `b_t` is `[n_state]`, `delta_t` is `[d_inner]`.
pub fn discretize_zoh(a: &Tensor, b_t: &Tensor, delta_t: &Tensor) -> Result<Discretized> {
    let (d_inner, n_state) = a.dims2()?;
    if b_t.numel() != n_state || delta_t.numel() != d_inner {
        return Err(Error::shape("discretize_zoh", a.shape(), &[delta_t.numel(), b_t.numel()]));
    }
    if let Some(bad) = delta_t.data().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::Precondition(format!("step size must be positive, got {bad}")));
    }
    let mut a_bar = vec![0.0; d_inner * n_state];
    let mut b_bar = vec![0.0; d_inner * n_state];
    for d in 0..d_inner {
        let dl = delta_t.data()[d];
        for n in 0..n_state {
            let u = dl * a.data()[d * n_state + n];
            let em1 = u.exp_m1();
            a_bar[d * n_state + n] = em1 + 1.0;
            b_bar[d * n_state + n] = dl * zoh_gain(u, em1) * b_t.data()[n];
        }
    }
    Ok(Discretized {
        a_bar: Tensor::from_parts(vec![d_inner, n_state], a_bar),
        b_bar: Tensor::from_parts(vec![d_inner, n_state], b_bar),
    })
}

impl DiscreteStep {
    /// Pre-multiplies `B̄` by the token `x_t` (`[d_inner]`).
    pub fn new(disc: Discretized, x_t: &[f64]) -> Result<Self> {
        let (d_inner, n_state) = disc.a_bar.dims2()?;
        if x_t.len() != d_inner {
            return Err(Error::shape("DiscreteStep::new", &[d_inner], &[x_t.len()]));
        }
        let mut b_bar_x = disc.b_bar;
        for d in 0..d_inner {
            for v in &mut b_bar_x.data_mut()[d * n_state..(d + 1) * n_state] {
                *v *= x_t[d];
            }
        }
        Ok(Self {
            a_bar: disc.a_bar,
            b_bar_x,
        })
    }
}

/// `(Ā, B̄·x)` for one state element: `u = Δ·a`, shared by every scan path
/// so they agree bit for bit.
#[inline]
fn zoh_coeffs(a: f64, dl: f64, b: f64, x: f64) -> (f64, f64) {
    let u = dl * a;
    let em1 = u.exp_m1();
    (em1 + 1.0, dl * zoh_gain(u, em1) * b * x)
}

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    /// Precomputed `Ā` and `B̄x`, `[L × d_inner × n_state]` each.
    Explicit { a_bar: Vec<f64>, b_bar_x: Vec<f64> },
    /// Per-token inputs, discretized on demand: `a: [D × N]`, `delta, x: [L × D]`, `b: [L × N]`.
    Selective {
        a: Vec<f64>,
        delta: Vec<f64>,
        b: Vec<f64>,
        x: Vec<f64>,
    },
}

/// A whole sequence of [`DiscreteStep`]s.
///
/// Sequences built by [`DiscreteSteps::discretize`] keep only the per-token
/// inputs (`O(L·(D+N))` memory); the sequential scan discretizes as it goes.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSteps {
    len: usize,
    d_inner: usize,
    n_state: usize,
    storage: Storage,
}

impl DiscreteSteps {
    pub fn from_steps(steps: &[DiscreteStep]) -> Result<Self> {
        let (d_inner, n_state) = match steps.first() {
            Some(s) => s.a_bar.dims2()?,
            None => (0, 0),
        };
        let mut a_bar = Vec::with_capacity(steps.len() * d_inner * n_state);
        let mut b_bar_x = Vec::with_capacity(a_bar.capacity());
        for s in steps {
            if s.a_bar.shape() != [d_inner, n_state] || s.b_bar_x.shape() != [d_inner, n_state] {
                return Err(Error::shape("DiscreteSteps", &[d_inner, n_state], s.b_bar_x.shape()));
            }
            a_bar.extend_from_slice(s.a_bar.data());
            b_bar_x.extend_from_slice(s.b_bar_x.data());
        }
        Ok(Self {
            len: steps.len(),
            d_inner,
            n_state,
            storage: Storage::Explicit { a_bar, b_bar_x },
        })
    }

    /// Discretizes a full selective sequence: `delta`, `x` are `[L × d_inner]`,
    /// `b` is `[L × n_state]`, `a` is `[d_inner × n_state]`.
    pub fn discretize(a: &Tensor, delta: &Tensor, b: &Tensor, x: &Tensor) -> Result<Self> {
        let (d_inner, n_state) = a.dims2()?;
        let (len, dd) = delta.dims2()?;
        if dd != d_inner || x.shape() != delta.shape() || b.shape() != [len, n_state] {
            return Err(Error::shape("DiscreteSteps::discretize", delta.shape(), b.shape()));
        }
        if let Some(bad) = delta.data().iter().find(|&&d| !(d > 0.0)) {
            return Err(Error::Precondition(format!("step size must be positive, got {bad}")));
        }
        Ok(Self {
            len,
            d_inner,
            n_state,
            storage: Storage::Selective {
                a: a.data().to_vec(),
                delta: delta.data().to_vec(),
                b: b.data().to_vec(),
                x: x.data().to_vec(),
            },
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn d_inner(&self) -> usize {
        self.d_inner
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    /// Writes step `t`'s `Ā` and `B̄x` (`d_inner·n_state` each).
    fn fill_step(&self, t: usize, ab: &mut [f64], bx: &mut [f64]) {
        let (d, n) = (self.d_inner, self.n_state);
        let k = d * n;
        match &self.storage {
            Storage::Explicit { a_bar, b_bar_x } => {
                ab.copy_from_slice(&a_bar[t * k..(t + 1) * k]);
                bx.copy_from_slice(&b_bar_x[t * k..(t + 1) * k]);
            }
            Storage::Selective { a, delta, b, x } => {
                for ch in 0..d {
                    let (dl, xv) = (delta[t * d + ch], x[t * d + ch]);
                    for j in 0..n {
                        let (av, bv) = zoh_coeffs(a[ch * n + j], dl, b[t * n + j], xv);
                        ab[ch * n + j] = av;
                        bx[ch * n + j] = bv;
                    }
                }
            }
        }
    }

    pub fn step(&self, t: usize) -> DiscreteStep {
        let shape = vec![self.d_inner, self.n_state];
        let mut ab = Tensor::zeros(shape.clone());
        let mut bx = Tensor::zeros(shape);
        self.fill_step(t, ab.data_mut(), bx.data_mut());
        DiscreteStep { a_bar: ab, b_bar_x: bx }
    }

    /// `Ā` and `B̄x` for the whole sequence, `[L × d_inner × n_state]` each.
    fn materialize(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.d_inner * self.n_state;
        let mut a_bar = vec![0.0; self.len * k];
        let mut b_bar_x = vec![0.0; self.len * k];
        for t in 0..self.len {
            self.fill_step(t, &mut a_bar[t * k..(t + 1) * k], &mut b_bar_x[t * k..(t + 1) * k]);
        }
        (a_bar, b_bar_x)
    }

    /// The same steps in reverse time order.
    pub fn reversed(&self) -> Self {
        let rev = |v: &[f64], w: usize| -> Vec<f64> {
            (0..self.len)
                .rev()
                .flat_map(|t| v[t * w..(t + 1) * w].iter().copied())
                .collect()
        };
        let k = self.d_inner * self.n_state;
        let storage = match &self.storage {
            Storage::Explicit { a_bar, b_bar_x } => Storage::Explicit {
                a_bar: rev(a_bar, k),
                b_bar_x: rev(b_bar_x, k),
            },
            Storage::Selective { a, delta, b, x } => Storage::Selective {
                a: a.clone(),
                delta: rev(delta, self.d_inner),
                b: rev(b, self.n_state),
                x: rev(x, self.d_inner),
            },
        };
        Self { storage, ..*self }
    }

    pub fn max_a_bar(&self) -> f64 {
        self.materialize().0.into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_b_bar_x(&self) -> f64 {
        self.materialize().1.into_iter().map(f64::abs).fold(0.0, f64::max)
    }
}

fn check_readout(steps: &DiscreteSteps, c: &Tensor, x: &Tensor, d_skip: &Tensor) -> Result<()> {
    let (l, d, n) = (steps.len, steps.d_inner, steps.n_state);
    if l == 0 {
        return Ok(());
    }
    if c.shape() != [l, n] || x.shape() != [l, d] || d_skip.numel() != d {
        return Err(Error::shape("scan", &[l, d, n], c.shape()));
    }
    Ok(())
}

/// Hidden states `h_1..h_L` (`[L × d_inner × n_state]`, flat) by direct recurrence from `h_0 = 0`.
pub fn hidden_states_sequential(steps: &DiscreteSteps) -> Vec<f64> {
    let k = steps.d_inner * steps.n_state;
    let (a_bar, b_bar_x) = steps.materialize();
    let mut h = vec![0.0; steps.len * k];
    for t in 0..steps.len {
        let (prev, cur) = h.split_at_mut(t * k);
        let cur = &mut cur[..k];
        let ab = &a_bar[t * k..(t + 1) * k];
        let bx = &b_bar_x[t * k..(t + 1) * k];
        if t == 0 {
            cur.copy_from_slice(bx);
        } else {
            let prev = &prev[(t - 1) * k..];
            for i in 0..k {
                cur[i] = ab[i] * prev[i] + bx[i];
            }
        }
    }
    h
}

/// Hidden states via a work-efficient (Blelloch) prefix scan over the affine
/// maps `h ↦ a ⊙ h + b`, composed as `(a₂,b₂)∘(a₁,b₁) = (a₂a₁, a₂b₁ + b₂)`.
pub fn hidden_states_parallel(steps: &DiscreteSteps) -> Vec<f64> {
    let k = steps.d_inner * steps.n_state;
    let len = steps.len;
    if len <= 1 {
        return hidden_states_sequential(steps);
    }
    let padded = len.next_power_of_two();
    let (a_bar, b_bar_x) = steps.materialize();
    let mut a = a_bar.clone();
    let mut b = b_bar_x.clone();
    a.resize(padded * k, 1.0);
    b.resize(padded * k, 0.0);

    // up-sweep: the last element of each block of `2·stride` absorbs its left half
    let mut stride = 1;
    while stride < padded {
        let block = 2 * stride * k;
        a.par_chunks_mut(block)
            .zip(b.par_chunks_mut(block))
            .for_each(|(ac, bc)| {
                let (lo, hi) = ((stride - 1) * k, (2 * stride - 1) * k);
                for i in 0..k {
                    let (a1, b1) = (ac[lo + i], bc[lo + i]);
                    let (a2, b2) = (ac[hi + i], bc[hi + i]);
                    ac[hi + i] = a2 * a1;
                    bc[hi + i] = a2 * b1 + b2;
                }
            });
        stride *= 2;
    }

    // down-sweep to exclusive prefixes
    a[(padded - 1) * k..].fill(1.0);
    b[(padded - 1) * k..].fill(0.0);
    let mut stride = padded / 2;
    while stride >= 1 {
        let block = 2 * stride * k;
        a.par_chunks_mut(block)
            .zip(b.par_chunks_mut(block))
            .for_each(|(ac, bc)| {
                let (lo, hi) = ((stride - 1) * k, (2 * stride - 1) * k);
                for i in 0..k {
                    // left subtree total (later) applied after the parent prefix (earlier)
                    let (at, bt) = (ac[lo + i], bc[lo + i]);
                    let (ap, bp) = (ac[hi + i], bc[hi + i]);
                    ac[lo + i] = ap;
                    bc[lo + i] = bp;
                    ac[hi + i] = at * ap;
                    bc[hi + i] = at * bp + bt;
                }
            });
        stride /= 2;
    }

    // inclusive: h_t = a_t · prefix_t(0) + b_t, and prefix_t(0) is its b component
    let mut h = vec![0.0; len * k];
    h.par_chunks_mut(k).enumerate().for_each(|(t, ht)| {
        let ab = &a_bar[t * k..(t + 1) * k];
        let bx = &b_bar_x[t * k..(t + 1) * k];
        let pre = &b[t * k..(t + 1) * k];
        for i in 0..k {
            ht[i] = ab[i] * pre[i] + bx[i];
        }
    });
    h
}

fn read_out(steps: &DiscreteSteps, h: &[f64], c: &Tensor, x: &Tensor, d_skip: &Tensor) -> Tensor {
    let (l, d, n) = (steps.len, steps.d_inner, steps.n_state);
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let ct = c.row(t);
        for ch in 0..d {
            let hs = &h[(t * d + ch) * n..(t * d + ch + 1) * n];
            let acc: f64 = hs.iter().zip(ct).map(|(hv, cv)| hv * cv).sum();
            y[t * d + ch] = acc + d_skip.data()[ch] * x.data()[t * d + ch];
        }
    }
    Tensor::from_parts(vec![l, d], y)
}

/// `y_t = C_t · h_t + D ⊙ x_t` with `h` from the left-to-right recurrence.
pub fn scan_sequential(steps: &DiscreteSteps, c: &Tensor, x: &Tensor, d_skip: &Tensor) -> Result<Tensor> {
    check_readout(steps, c, x, d_skip)?;
    // streaming: only the current state is kept, and selective steps are
    // discretized in the loop, so memory traffic is O(L·(D+N))
    let (l, d, n) = (steps.len, steps.d_inner, steps.n_state);
    let k = d * n;
    let mut h = vec![0.0; k];
    let mut y = vec![0.0; l * d];
    let (mut ab, mut bx) = (vec![0.0; k], vec![0.0; k]);
    for t in 0..l {
        let ct = c.row(t);
        match &steps.storage {
            Storage::Selective { a, delta, b, x: xs } => {
                for ch in 0..d {
                    let (dl, xv) = (delta[t * d + ch], xs[t * d + ch]);
                    for j in 0..n {
                        let (av, bv) = zoh_coeffs(a[ch * n + j], dl, b[t * n + j], xv);
                        h[ch * n + j] = av * h[ch * n + j] + bv;
                    }
                }
            }
            Storage::Explicit { .. } => {
                steps.fill_step(t, &mut ab, &mut bx);
                for i in 0..k {
                    h[i] = ab[i] * h[i] + bx[i];
                }
            }
        }
        for ch in 0..d {
            let acc: f64 = h[ch * n..(ch + 1) * n].iter().zip(ct).map(|(hv, cv)| hv * cv).sum();
            y[t * d + ch] = acc + d_skip.data()[ch] * x.data()[t * d + ch];
        }
    }
    Ok(Tensor::from_parts(vec![l, d], y))
}

/// Same contract as [`scan_sequential`], evaluated by prefix scan.
pub fn scan_parallel(steps: &DiscreteSteps, c: &Tensor, x: &Tensor, d_skip: &Tensor) -> Result<Tensor> {
    check_readout(steps, c, x, d_skip)?;
    let h = hidden_states_parallel(steps);
    Ok(read_out(steps, &h, c, x, d_skip))
}

fn reverse_rows(t: &Tensor) -> Result<Tensor> {
    let (rows, _) = t.dims2()?;
    let parts: Vec<Tensor> = (0..rows)
        .rev()
        .map(|r| t.slice_rows(r, r + 1))
        .collect::<Result<_>>()?;
    if parts.is_empty() {
        return Ok(t.clone());
    }
    Tensor::stack_rows(&parts)
}

/// Right-to-left evaluation: `reverse(scan(reverse(steps, c, x)))`.
pub fn scan_backward_direction(
    steps: &DiscreteSteps,
    c: &Tensor,
    x: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    check_readout(steps, c, x, d_skip)?;
    if steps.is_empty() {
        return Ok(Tensor::zeros(vec![0, steps.d_inner]));
    }
    let y = scan_sequential(&steps.reversed(), &reverse_rows(c)?, &reverse_rows(x)?, d_skip)?;
    reverse_rows(&y)
}

/// Per-token `Δ = softplus(x·W_Δ + b_Δ)`, `B = x·W_B`, `C = x·W_C`.
pub fn selective_params(tape: &mut Tape, x: Var, p: &SsmVars) -> Result<(Var, Var, Var)> {
    let pre = tape.matmul(x, p.w_delta)?;
    let pre = tape.add_tiled(pre, p.delta_bias)?;
    let delta = tape.softplus(pre)?;
    let b = tape.matmul(x, p.w_b)?;
    let c = tape.matmul(x, p.w_c)?;
    Ok((delta, b, c))
}

/// Differentiable selective scan over a batch of equal-length sequences
/// stacked along rows.
///
/// Inputs: `x, delta: [R × D]`, `a: [D × N]` (negative), `b, c: [R × N]`,
/// `d_skip: [D]`, with `R` a multiple of `seq_len`. Output `y: [R × D]`.
pub struct SelectiveScanOp {
    seq_len: usize,
    states: Vec<f64>,
}

impl SelectiveScanOp {
    pub fn new(seq_len: usize) -> Self {
        Self {
            seq_len,
            states: Vec::new(),
        }
    }
}

struct ScanDims {
    rows: usize,
    d: usize,
    n: usize,
}

fn scan_dims(inputs: &[&Tensor], seq_len: usize) -> Result<ScanDims> {
    let [x, delta, a, b, c, d_skip] = inputs else {
        return Err(Error::Contract("selective_scan takes 6 inputs".into()));
    };
    let (rows, d) = x.dims2()?;
    let (da, n) = a.dims2()?;
    let ok = delta.shape() == x.shape()
        && da == d
        && b.shape() == [rows, n]
        && c.shape() == [rows, n]
        && d_skip.numel() == d
        && seq_len > 0
        && rows % seq_len == 0;
    if !ok {
        return Err(Error::shape("selective_scan", x.shape(), a.shape()));
    }
    Ok(ScanDims { rows, d, n })
}

impl CustomOp for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let ScanDims { rows, d, n } = scan_dims(inputs, self.seq_len)?;
        let (x, delta, a, b, c, d_skip) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
            inputs[5].data(),
        );
        if let Some(bad) = delta.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Precondition(format!("step size must be positive, got {bad}")));
        }
        let k = d * n;
        let mut h = vec![0.0; rows * k];
        let mut y = vec![0.0; rows * d];
        for r in 0..rows {
            let first = r % self.seq_len == 0;
            let (prev, cur) = h.split_at_mut(r * k);
            let cur = &mut cur[..k];
            let prev = if first { None } else { Some(&prev[(r - 1) * k..]) };
            let br = &b[r * n..(r + 1) * n];
            let cr = &c[r * n..(r + 1) * n];
            for ch in 0..d {
                let dl = delta[r * d + ch];
                let xv = x[r * d + ch];
                let mut acc = 0.0;
                for s in 0..n {
                    let i = ch * n + s;
                    let u = dl * a[i];
                    let em1 = u.exp_m1();
                    let bbx = dl * zoh_gain(u, em1) * br[s] * xv;
                    let hv = match prev {
                        Some(p) => (em1 + 1.0) * p[i] + bbx,
                        None => bbx,
                    };
                    cur[i] = hv;
                    acc += cr[s] * hv;
                }
                y[r * d + ch] = acc + d_skip[ch] * xv;
            }
        }
        self.states = h;
        Ok(Tensor::from_parts(vec![rows, d], y))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let ScanDims { rows, d, n } = scan_dims(inputs, self.seq_len)?;
        let (x, delta, a, b, c, d_skip) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
            inputs[5].data(),
        );
        let gy = grad.data();
        let h = &self.states;
        let k = d * n;
        let mut gx = vec![0.0; rows * d];
        let mut gdelta = vec![0.0; rows * d];
        let mut ga = vec![0.0; k];
        let mut gb = vec![0.0; rows * n];
        let mut gc = vec![0.0; rows * n];
        let mut gd_skip = vec![0.0; d];
        // gradient w.r.t. h_t arriving from step t+1, already scaled by Ā_{t+1}
        let mut carry = vec![0.0; k];

        for r in (0..rows).rev() {
            if (r + 1) % self.seq_len == 0 {
                carry.fill(0.0);
            }
            let first = r % self.seq_len == 0;
            let br = &b[r * n..(r + 1) * n];
            let cr = &c[r * n..(r + 1) * n];
            for ch in 0..d {
                let g = gy[r * d + ch];
                let dl = delta[r * d + ch];
                let xv = x[r * d + ch];
                gx[r * d + ch] += g * d_skip[ch];
                gd_skip[ch] += g * xv;
                let mut g_dl = 0.0;
                let mut g_x = 0.0;
                for s in 0..n {
                    let i = ch * n + s;
                    let hv = h[r * k + i];
                    gc[r * n + s] += g * hv;
                    let gh = carry[i] + cr[s] * g;
                    let u = dl * a[i];
                    let em1 = u.exp_m1();
                    let a_bar = em1 + 1.0;
                    let gain = zoh_gain(u, em1);
                    let h_prev = if first { 0.0 } else { h[(r - 1) * k + i] };
                    // h = Ā h_prev + Δ·gain(ΔA)·B·x
                    let g_abar = gh * h_prev;
                    let g_bbar = gh * xv;
                    g_x += gh * dl * gain * br[s];
                    gb[r * n + s] += g_bbar * dl * gain;
                    // d(Δ·gain(ΔA))/dΔ = Ā ; d(Δ·gain(ΔA))/dA = Δ²·gain'(ΔA)
                    g_dl += g_abar * a_bar * a[i] + g_bbar * br[s] * a_bar;
                    ga[i] += g_abar * a_bar * dl + g_bbar * br[s] * dl * dl * zoh_gain_prime(u, em1);
                    carry[i] = gh * a_bar;
                }
                gx[r * d + ch] += g_x;
                gdelta[r * d + ch] += g_dl;
            }
        }
        Ok(vec![
            Some(Tensor::from_parts(vec![rows, d], gx)),
            Some(Tensor::from_parts(vec![rows, d], gdelta)),
            Some(Tensor::from_parts(vec![d, n], ga)),
            Some(Tensor::from_parts(vec![rows, n], gb)),
            Some(Tensor::from_parts(vec![rows, n], gc)),
            Some(Tensor::from_parts(inputs[5].shape().to_vec(), gd_skip)),
        ])
    }
}

/// Records the selective scan on the tape.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan(
    tape: &mut Tape,
    x: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d_skip: Var,
    seq_len: usize,
) -> Result<Var> {
    tape.custom(&[x, delta, a, b, c, d_skip], Box::new(SelectiveScanOp::new(seq_len)))
}

/// One SSM direction over stacked sequences `x: [R × d_inner]`.
pub fn ssm_forward(tape: &mut Tape, x: Var, p: &SsmVars, seq_len: usize) -> Result<Var> {
    let (delta, b, c) = selective_params(tape, x, p)?;
    let e = tape.exp(p.a_log)?;
    let a = tape.neg(e)?;
    selective_scan(tape, x, delta, a, b, c, p.d_skip, seq_len)
}

/// Right-to-left direction: `reverse(ssm_forward(reverse(x)))` per sequence.
pub fn ssm_backward_direction(tape: &mut Tape, x: Var, p: &SsmVars, seq_len: usize) -> Result<Var> {
    let rx = tape.reverse_segments(x, seq_len)?;
    let ry = ssm_forward(tape, rx, p, seq_len)?;
    tape.reverse_segments(ry, seq_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_steps(a: f64, delta: f64, b: f64, xs: &[f64]) -> DiscreteSteps {
        let a_t = Tensor::from_parts(vec![1, 1], vec![a]);
        let len = xs.len();
        DiscreteSteps::discretize(
            &a_t,
            &Tensor::from_parts(vec![len, 1], vec![delta; len]),
            &Tensor::from_parts(vec![len, 1], vec![b; len]),
            &Tensor::from_parts(vec![len, 1], xs.to_vec()),
        )
        .unwrap()
    }

    #[test]
    fn zoh_half_life_closed_form() {
        let d = discretize_zoh(
            &Tensor::from_parts(vec![1, 1], vec![-1.0]),
            &Tensor::vector(vec![1.0]),
            &Tensor::vector(vec![std::f64::consts::LN_2]),
        )
        .unwrap();
        assert!((d.a_bar.data()[0] - 0.5).abs() < 1e-12);
        assert!((d.b_bar.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zoh_limits() {
        let tiny = discretize_zoh(
            &Tensor::from_parts(vec![1, 1], vec![-1.0]),
            &Tensor::vector(vec![1.0]),
            &Tensor::vector(vec![1e-300]),
        )
        .unwrap();
        assert_eq!(tiny.a_bar.data()[0], 1.0);
        assert!(tiny.b_bar.data()[0].abs() < 1e-299);

        let near_zero_a = discretize_zoh(
            &Tensor::from_parts(vec![1, 1], vec![-1e-12]),
            &Tensor::vector(vec![2.0]),
            &Tensor::vector(vec![0.1]),
        )
        .unwrap();
        assert!((near_zero_a.b_bar.data()[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zoh_rejects_non_positive_step() {
        let err = discretize_zoh(
            &Tensor::from_parts(vec![1, 1], vec![-1.0]),
            &Tensor::vector(vec![1.0]),
            &Tensor::vector(vec![0.0]),
        );
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn taylor_branch_is_continuous() {
        for &side in &[1.0 - 1e-9, 1.0 + 1e-9] {
            let u = -TAYLOR_THRESHOLD * side;
            let other = -TAYLOR_THRESHOLD * (2.0 - side);
            let g1 = zoh_gain(u, u.exp_m1());
            let g2 = zoh_gain(other, other.exp_m1());
            assert!((g1 - g2).abs() < 1e-12);
        }
    }

    #[test]
    fn gain_prime_matches_difference_quotient() {
        for &u in &[-3.0_f64, -0.5, -2e-3, -5e-4, -1e-7] {
            let h = 1e-6 * u.abs().max(1e-3);
            let fd = (zoh_gain(u + h, (u + h).exp_m1()) - zoh_gain(u - h, (u - h).exp_m1())) / (2.0 * h);
            assert!((fd - zoh_gain_prime(u, u.exp_m1())).abs() < 1e-6, "u={u}");
        }
    }

    #[test]
    fn scalar_chain_hand_recurrence() {
        let steps = scalar_steps(-1.0, std::f64::consts::LN_2, 1.0, &[1.0, 1.0, 1.0]);
        let c = Tensor::from_parts(vec![3, 1], vec![1.0; 3]);
        let x = Tensor::from_parts(vec![3, 1], vec![1.0; 3]);
        let y = scan_sequential(&steps, &c, &x, &Tensor::vector(vec![0.0])).unwrap();
        for (got, want) in y.data().iter().zip([0.5, 0.75, 0.875]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn memoryless_when_transition_is_zero() {
        let steps = DiscreteSteps::from_steps(&[
            DiscreteStep {
                a_bar: Tensor::zeros(vec![1, 2]),
                b_bar_x: Tensor::from_parts(vec![1, 2], vec![1.0, 2.0]),
            },
            DiscreteStep {
                a_bar: Tensor::zeros(vec![1, 2]),
                b_bar_x: Tensor::from_parts(vec![1, 2], vec![3.0, 4.0]),
            },
        ])
        .unwrap();
        assert_eq!(hidden_states_sequential(&steps), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(hidden_states_parallel(&steps), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_step_parallel_is_bitwise_sequential() {
        let steps = scalar_steps(-0.7, 0.3, 1.3, &[0.9]);
        let c = Tensor::from_parts(vec![1, 1], vec![0.4]);
        let x = Tensor::from_parts(vec![1, 1], vec![0.9]);
        let d = Tensor::vector(vec![0.25]);
        let s = scan_sequential(&steps, &c, &x, &d).unwrap();
        let p = scan_parallel(&steps, &c, &x, &d).unwrap();
        assert!(s.bitwise_eq(&p));
        let expected = 0.4 * steps.step(0).b_bar_x.data()[0] + 0.25 * 0.9;
        assert_eq!(s.data()[0], expected);
    }

    #[test]
    fn two_steps_match_one_composition() {
        let steps = DiscreteSteps::from_steps(&[
            DiscreteStep {
                a_bar: Tensor::from_parts(vec![1, 1], vec![0.3]),
                b_bar_x: Tensor::from_parts(vec![1, 1], vec![0.7]),
            },
            DiscreteStep {
                a_bar: Tensor::from_parts(vec![1, 1], vec![0.6]),
                b_bar_x: Tensor::from_parts(vec![1, 1], vec![-0.2]),
            },
        ])
        .unwrap();
        let h = hidden_states_parallel(&steps);
        assert!((h[1] - (0.6 * 0.7 - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn empty_sequence_gives_empty_output() {
        let steps = DiscreteSteps::from_steps(&[]).unwrap();
        let y = scan_sequential(&steps, &Tensor::zeros(vec![0, 0]), &Tensor::zeros(vec![0, 0]), &Tensor::zeros(vec![0]))
            .unwrap();
        assert_eq!(y.numel(), 0);
    }

    #[test]
    fn selective_params_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = SelectiveSsmParams::init(3, 4, &mut rng);
        p.delta_bias = Tensor::zeros(vec![3]);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let (delta, _, _) = selective_params(&mut tape, x, &vars).unwrap();
        for v in tape.value(delta).data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }

        p.w_b = Tensor::zeros(vec![3, 4]);
        p.w_c = Tensor::zeros(vec![3, 4]);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let xs = Tensor::from_parts(vec![2, 3], vec![0.3, -0.2, 0.9, 0.1, 0.5, -0.7]);
        let x = tape.constant(xs.clone());
        let y = ssm_forward(&mut tape, x, &vars, 2).unwrap();
        assert_eq!(tape.value(y), &xs, "only the D·x skip path remains (D = 1)");
    }

    #[test]
    fn distinct_tokens_give_distinct_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = SelectiveSsmParams::init(4, 2, &mut rng);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_parts(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.9, 0.0, 0.2]));
        let (delta, _, _) = selective_params(&mut tape, x, &vars).unwrap();
        let dv = tape.value(delta);
        assert_ne!(dv.row(0), dv.row(1));
        assert!(dv.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn init_is_stable_and_near_target_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SelectiveSsmParams::init(2, 16, &mut rng);
        let a = p.a();
        assert_eq!(a.data()[0], -1.0);
        assert!((a.data()[15] + 16.0).abs() < 1e-12);
        let sp = p.delta_bias.data()[0].exp().ln_1p();
        assert!((sp - INITIAL_DELTA).abs() < 1e-12);
    }
}
