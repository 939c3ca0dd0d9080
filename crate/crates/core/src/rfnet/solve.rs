use super::arch::ArchConfig;
use crate::error::{Error, Result};

/// Every (max-pool, stride) variant of `template`, 16 in total.
pub fn candidate_configs(template: &ArchConfig) -> Vec<ArchConfig> {
    let mut out = Vec::with_capacity(16);
    for keep_maxpool in [true, false] {
        for code in 0..8usize {
            let strides = [1 + (code >> 2 & 1), 1 + (code >> 1 & 1), 1 + (code & 1)];
            out.push(ArchConfig { keep_maxpool, strides, ..template.clone() });
        }
    }
    out
}

/// Exhaustive search over max-pool and stack strides for a configuration whose
/// final receptive field is exactly `target`.
///
/// Among matches, prefers the largest total downsampling, then larger strides
/// earlier in the network (max-pool first, then s′, s″, s‴).
pub fn solve_rf_config(template: &ArchConfig, target: usize) -> Result<ArchConfig> {
    let candidates = candidate_configs(template);
    let key = |c: &ArchConfig| {
        (c.total_stride(), [if c.keep_maxpool { 2 } else { 1 }, c.strides[0], c.strides[1], c.strides[2]])
    };
    candidates
        .iter()
        .filter(|c| c.receptive_field() == target)
        .max_by_key(|c| key(c))
        .cloned()
        .ok_or_else(|| {
            let mut achievable: Vec<usize> = candidates.iter().map(ArchConfig::receptive_field).collect();
            achievable.sort_unstable();
            achievable.dedup();
            Error::UnreachableReceptiveField { target, achievable }
        })
}
