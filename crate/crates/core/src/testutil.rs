//! Statistical and setup helpers shared by unit and integration tests.

use crate::tensor::ParamStore;
use rand::Rng;

/// Overwrites every parameter with uniform values in `[-scale, scale]`.
///
/// Finite-difference and perturbation tests use this to move pre-activations
/// away from the default tiny init, where ReLU kinks sit within a probe step
/// of zero and saturate entire nodes.
pub fn randomize_store(store: &mut ParamStore, scale: f64, rng: &mut impl Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Pearson chi-square statistic for observed counts against expected counts.
pub fn chi_square_stat(observed: &[u64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len());
    observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| {
            assert!(e > 0.0, "expected count must be positive");
            let d = o as f64 - e;
            d * d / e
        })
        .sum()
}

/// Upper critical value of the chi-square distribution at p = 0.001.
pub fn chi_square_critical_p001(df: usize) -> f64 {
    match df {
        1 => 10.828,
        2 => 13.816,
        3 => 16.266,
        4 => 18.467,
        5 => 20.515,
        6 => 22.458,
        7 => 24.322,
        8 => 26.124,
        9 => 27.877,
        10 => 29.588,
        11 => 31.264,
        12 => 32.909,
        13 => 34.528,
        14 => 36.123,
        15 => 37.697,
        16 => 39.252,
        17 => 40.790,
        18 => 42.312,
        19 => 43.820,
        20 => 45.315,
        _ => panic!("no tabulated chi-square critical value for df = {df}"),
    }
}

/// Tests uniformity of `counts` over its bins: true when the chi-square
/// statistic stays below the p = 0.001 critical value (i.e. p > 0.001, no
/// evidence against uniformity).
pub fn uniform_counts_pass(counts: &[u64]) -> bool {
    let total: u64 = counts.iter().sum();
    let expected = vec![total as f64 / counts.len() as f64; counts.len()];
    chi_square_stat(counts, &expected) < chi_square_critical_p001(counts.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfectly_uniform_counts_have_zero_stat() {
        assert_eq!(chi_square_stat(&[25, 25, 25, 25], &[25.0; 4]), 0.0);
        assert!(uniform_counts_pass(&[250, 250, 250, 250]));
    }

    #[test]
    fn grossly_skewed_counts_fail() {
        assert!(!uniform_counts_pass(&[1000, 0, 0, 0]));
    }

    #[test]
    fn mild_noise_passes() {
        assert!(uniform_counts_pass(&[260, 240, 255, 245]));
    }
}
