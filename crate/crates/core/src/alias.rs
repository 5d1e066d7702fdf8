//! Walker/Vose alias tables for O(1) sampling from small discrete laws.

/// Alias table over outcomes `0..len`.
#[derive(Debug, Clone)]
pub struct AliasTable {
    threshold: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    /// Builds the table from nonnegative weights (need not be normalized).
    pub fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        assert!(n > 0, "alias table needs at least one outcome");
        let mut threshold = vec![0.0; n];
        let mut alias = vec![0u32; n];
        fill_alias(weights, &mut threshold, &mut alias);
        Self { threshold, alias }
    }

    pub fn len(&self) -> usize {
        self.threshold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.threshold.is_empty()
    }

    /// Maps a uniform draw in `[0, 1)` to an outcome index.
    #[inline]
    pub fn sample(&self, u: f64) -> usize {
        sample_slices(&self.threshold, &self.alias, u)
    }
}

/// Writes an alias table for `weights` into the provided slices.
pub fn fill_alias(weights: &[f64], threshold: &mut [f64], alias: &mut [u32]) {
    let n = weights.len();
    debug_assert_eq!(threshold.len(), n);
    debug_assert_eq!(alias.len(), n);
    let total: f64 = weights.iter().sum();
    let mut small = Vec::with_capacity(n);
    let mut large = Vec::with_capacity(n);
    for (i, &w) in weights.iter().enumerate() {
        threshold[i] = w * n as f64 / total;
        alias[i] = i as u32;
        if threshold[i] < 1.0 {
            small.push(i);
        } else {
            large.push(i);
        }
    }
    while let (Some(s), Some(&l)) = (small.pop(), large.last()) {
        alias[s] = l as u32;
        threshold[l] -= 1.0 - threshold[s];
        if threshold[l] < 1.0 {
            large.pop();
            small.push(l);
        }
    }
    // Leftovers are numerically 1.
    for i in large.into_iter().chain(small) {
        threshold[i] = 1.0;
    }
}

#[inline]
pub fn sample_slices(threshold: &[f64], alias: &[u32], u: f64) -> usize {
    let x = u * threshold.len() as f64;
    let i = (x as usize).min(threshold.len() - 1);
    if x - (i as f64) < threshold[i] {
        i
    } else {
        alias[i] as usize
    }
}

/// Probability mass the table assigns to each outcome (for tests).
pub fn implied_masses(threshold: &[f64], alias: &[u32]) -> Vec<f64> {
    let n = threshold.len() as f64;
    let mut mass = vec![0.0; threshold.len()];
    for i in 0..threshold.len() {
        mass[i] += threshold[i] / n;
        mass[alias[i] as usize] += (1.0 - threshold[i]) / n;
    }
    mass
}
