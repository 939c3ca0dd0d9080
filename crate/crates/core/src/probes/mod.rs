//! Analysis probes over trained backbones: masking robustness, PGD attacks,
//! effective receptive fields, similarity correlation and minimum crop share.

mod erf;
mod masking;
mod pgd;
mod portion;
mod similarity;

pub use erf::{erf_stats, sqrt_counts_from_gradient, strided_positions, ErfStats, DEFAULT_ERF_THRESHOLDS};
pub use masking::{
    dropped_cells, masked_features, masking_robustness, sample_mask, MaskFill, MaskingReport, DEFAULT_MASK_FRACTIONS,
};
pub use pgd::{
    linf_per_image, pgd_attack, pgd_perturb_with, probe_loss_grad, AttackSpec, PgdReport, ATTACK_EPSILONS,
    ATTACK_GAMMA_DIVISORS, ATTACK_ITERATIONS,
};
pub use portion::total_min_portion;
pub use similarity::{pearson, sample_pairs, similarity_correlation, SimilarityReport};
