//! Order-independent seed derivation.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of integers into one seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Per-sample seed for one epoch.
pub fn sample_seed(global_seed: u64, epoch: u64, sample_index: u64) -> u64 {
    derive(&[global_seed, epoch, sample_index])
}

/// Seed of one augmentation chain of a sample.
pub fn view_seed(sample_seed: u64, view_index: u64) -> u64 {
    derive(&[sample_seed, view_index])
}
