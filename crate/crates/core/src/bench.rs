//! Sequential vs prefix-scan timing.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssm::{scan_parallel, scan_sequential, DiscreteSteps};
use crate::tensor::Tensor;

pub const BENCH_D_INNER: usize = 8;
pub const BENCH_N_STATE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub sequential_ns: u128,
    pub parallel_ns: u128,
    pub max_abs_diff: f64,
}

/// Random stable scan inputs of length `len`.
pub fn random_scan_inputs(len: usize, d: usize, n: usize, rng: &mut impl Rng) -> Result<(DiscreteSteps, Tensor, Tensor, Tensor)> {
    let mut t = |shape: Vec<usize>, lo: f64, hi: f64| {
        let k = shape.iter().product();
        Tensor::new(shape, (0..k).map(|_| rng.random_range(lo..hi)).collect())
    };
    let a = t(vec![d, n], -2.0, -0.1)?;
    let delta = t(vec![len, d], 0.01, 0.5)?;
    let b = t(vec![len, n], -1.0, 1.0)?;
    let x = t(vec![len, d], -1.0, 1.0)?;
    let c = t(vec![len, n], -1.0, 1.0)?;
    let d_skip = t(vec![d], -1.0, 1.0)?;
    Ok((DiscreteSteps::discretize(&a, &delta, &b, &x)?, c, x, d_skip))
}

fn median(v: &mut [u128]) -> u128 {
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2
    }
}

fn timed(f: impl FnOnce() -> Result<Tensor>) -> Result<(u128, Tensor)> {
    let start = Instant::now();
    let y = black_box(f()?);
    Ok((start.elapsed().as_nanos(), y))
}

/// Median wall time over `repeats` runs of each scan at every length.
///
/// Repeats are interleaved across lengths so drifts in machine speed hit every
/// length alike, and the median keeps a few lucky or unlucky runs from
/// deciding the result.
pub fn bench_scan(lengths: &[usize], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::Precondition("repeats must be at least 1".into()));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0) {
        return Err(Error::Precondition(format!("sequence length must be at least 1, got {bad}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = lengths
        .iter()
        .map(|&len| random_scan_inputs(len, BENCH_D_INNER, BENCH_N_STATE, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut seq_ns = vec![Vec::with_capacity(repeats); lengths.len()];
    let mut par_ns = vec![Vec::with_capacity(repeats); lengths.len()];
    let mut diffs = vec![0.0f64; lengths.len()];
    // one untimed pass to settle caches, allocator and clock frequency
    for (steps, c, x, d_skip) in &inputs {
        black_box(scan_sequential(steps, c, x, d_skip)?);
        black_box(scan_parallel(steps, c, x, d_skip)?);
    }
    for _ in 0..repeats {
        for (i, (steps, c, x, d_skip)) in inputs.iter().enumerate() {
            let (ts, ys) = timed(|| scan_sequential(steps, c, x, d_skip))?;
            let (tp, yp) = timed(|| scan_parallel(steps, c, x, d_skip))?;
            seq_ns[i].push(ts);
            par_ns[i].push(tp);
            diffs[i] = diffs[i].max(ys.max_abs_diff(&yp)?);
        }
    }
    let rows = lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| BenchRow {
            len,
            sequential_ns: median(&mut seq_ns[i]),
            parallel_ns: median(&mut par_ns[i]),
            max_abs_diff: diffs[i],
        })
        .collect();
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("L,sequential_ns,parallel_ns,max_abs_diff\n");
    for r in rows {
        writeln!(out, "{},{},{},{:e}", r.len, r.sequential_ns, r.parallel_ns, r.max_abs_diff).expect("write to String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_repeats_rejected() {
        assert!(matches!(bench_scan(&[8], 0, 0), Err(Error::Precondition(_))));
        assert!(matches!(bench_scan(&[0], 1, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn rows_agree() {
        let rows = bench_scan(&[1, 7, 64], 2, 3).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.max_abs_diff < 1e-10));
        assert!(bench_csv(&rows).starts_with("L,sequential_ns,parallel_ns,max_abs_diff\n1,"));
    }
}
