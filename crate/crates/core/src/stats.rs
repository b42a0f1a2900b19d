//! Small numerical helpers shared across modules.

/// Linear-interpolation empirical quantile (the R type-7 definition): with
/// sorted values `w_(0) <= ... <= w_(n-1)` and `h = (n - 1) q`, returns
/// `w_(floor h) + (h - floor h) (w_(floor h + 1) - w_(floor h))`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN values"));
    quantile_sorted(&sorted, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance with denominator n - 1.
pub fn sample_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Log-density of N(mean, variance) at x, including constants.
pub fn log_normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - (x - mean).powi(2) / (2.0 * variance)
}

/// Deterministic seed derivation: folds each part into the base seed with a
/// splitmix64 step; used to give replications, methods and chains
/// independent, reproducible streams.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = base;
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p));
    }
    state
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quantile_matches_hand_computation() {
        let w: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_relative_eq!(quantile(&w, 0.05), 0.145, epsilon = 1e-12);
        assert_relative_eq!(quantile(&w, 0.5), 0.55, epsilon = 1e-12);
        assert_relative_eq!(quantile(&w, 1.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(quantile(&w, 0.0), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn quantile_of_constant_is_constant() {
        assert_eq!(quantile(&[0.3, 0.3, 0.3], 0.05), 0.3);
    }

    #[test]
    fn derive_seed_is_deterministic_and_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }
}
