use super::{Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Zero-norm guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running mean/variance of one batch-norm layer. Starts uninitialized;
/// the first training batch seeds it from the identity statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels], initialized: false }
    }

    /// Mean 0 and variance 1, marked initialized.
    pub fn identity(channels: usize) -> Self {
        RunningStats { initialized: true, ..Self::new(channels) }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let keep = T::of(BN_MOMENTUM);
        let take = T::one() - keep;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = keep * *r + take * b;
        }
        self.initialized = true;
    }
}

/// Batch normalization. Train mode normalizes with batch statistics and
/// folds them into `stats`; eval mode normalizes with `stats`.
pub fn batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &mut RunningStats<T>,
    mode: BnMode,
    eps: f64,
) -> Result<Var> {
    match mode {
        BnMode::Train => {
            let (y, batch) = tape.batch_norm_raw(x, gamma, beta, None, T::of(eps))?;
            let (mean, var) = batch.expect("train mode yields batch statistics");
            if mean.len() != stats.channels() {
                return Err(Error::shape("running statistics do not match channel count"));
            }
            stats.update(&mean, &var);
            Ok(y)
        }
        BnMode::Eval => {
            if !stats.initialized {
                return Err(Error::UninitializedStats);
            }
            let (y, _) = tape.batch_norm_raw(x, gamma, beta, Some((&stats.mean, &stats.var)), T::of(eps))?;
            Ok(y)
        }
    }
}
