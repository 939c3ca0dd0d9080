//! Parameter storage and the handful of layers the backbones and heads use.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{batch_norm, BnMode, RunningStats, Scalar, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;

/// Named parameters plus batch-norm running statistics of one network part.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), stat_names: Vec::new(), stats: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    fn add_stats(&mut self, name: impl Into<String>, stats: RunningStats<T>) -> usize {
        self.stat_names.push(name.into());
        self.stats.push(stats);
        self.stats.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn set(&mut self, index: usize, value: Tensor<T>) -> Result<()> {
        if self.values[index].shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[index],
                self.values[index].shape(),
                value.shape()
            )));
        }
        self.values[index] = value;
        Ok(())
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    /// Learnable scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Record every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect()
    }

    /// Same names and shapes, in the same order.
    pub fn check_congruent(&self, other: &Self) -> Result<()> {
        if self.names != other.names {
            let first = self
                .names
                .iter()
                .zip(&other.names)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("`{a}` vs `{b}`"))
                .unwrap_or_else(|| format!("{} vs {} parameters", self.names.len(), other.names.len()));
            return Err(Error::Structure(format!("parameter names differ: {first}")));
        }
        for ((name, a), b) in self.names.iter().zip(&self.values).zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::Structure(format!("`{name}`: {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        if self.stat_names != other.stat_names {
            return Err(Error::Structure("batch-norm layouts differ".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            stat_names: self.stat_names.clone(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|&v| U::of(v.to_f64().unwrap_or(0.0))).collect(),
                    var: s.var.iter().map(|&v| U::of(v.to_f64().unwrap_or(1.0))).collect(),
                    initialized: s.initialized,
                })
                .collect(),
        }
    }

    /// Replace every running statistic by mean 0 / variance 1.
    pub fn reset_stats_to_identity(&mut self) {
        for s in &mut self.stats {
            *s = RunningStats::identity(s.channels());
        }
    }
}

/// Per-forward state threaded through the layers.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a [Var],
    pub stats: &'a mut [RunningStats<T>],
    pub mode: BnMode,
    /// ReLU becomes identity and max pooling becomes average pooling with the
    /// same window; used to measure receptive-field support.
    pub linearize: bool,
}

impl<T: Scalar> Ctx<'_, T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        if self.linearize {
            Ok(x)
        } else {
            self.tape.relu(x)
        }
    }
}

fn fan_in_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// `padding = (kernel - 1) / 2`, no bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let w = fan_in_normal(&[out_channels, in_channels, kernel, kernel], in_channels * kernel * kernel, rng);
        let weight = store.add(format!("{name}.weight"), w);
        Conv { weight, bias: None, in_channels, out_channels, kernel, stride, padding: (kernel - 1) / 2 }
    }

    /// 1×1 stride-1 conv with an optional zero-initialized bias.
    pub fn pointwise<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::new(store, name, in_channels, out_channels, 1, 1, rng);
        if bias {
            conv.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        }
        conv
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let b = self.bias.map(|b| ctx.vars[b]);
        ctx.tape.conv2d(x, ctx.vars[self.weight], b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

impl BatchNorm {
    /// gamma = 1, beta = 0.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let stats = store.add_stats(name, RunningStats::new(channels));
        BatchNorm { gamma, beta, stats }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.vars[self.gamma], ctx.vars[self.beta]);
        batch_norm(ctx.tape, x, g, b, &mut ctx.stats[self.stats], ctx.mode, BN_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_normal(&[out_features, in_features], in_features, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Linear { weight, bias, in_features, out_features }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.tape.linear(x, ctx.vars[self.weight], Some(ctx.vars[self.bias]))
    }
}
