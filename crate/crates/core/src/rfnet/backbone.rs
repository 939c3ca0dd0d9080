use rand::Rng;

use super::arch::{ArchConfig, BlockKind, BlockPlan};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, ParamStore};
use crate::tensor::{BnMode, Scalar, Tape, Tensor, Var};

/// Outputs of one backbone pass, all recorded on the caller's tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneOutput {
    /// Pre-pool grid, N×C×n×n.
    pub local: Var,
    /// Spatial mean of `local`, N×C.
    pub global_pooled: Var,
    /// Output of the post-pool MLP, or `global_pooled` when there is none.
    pub global: Var,
}

/// Options for a single forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'m, T> {
    pub mode: BnMode,
    /// Identity activations and average pooling in place of max pooling.
    pub linearize: bool,
    /// Per-image cell weights (N × n²) for masked pooling; survivors are
    /// averaged.
    pub mask: Option<&'m [T]>,
    /// With a mask, average over all cells with masked ones read as zero
    /// instead of over the survivors only.
    pub zero_fill: bool,
}

impl<T> ForwardOptions<'_, T> {
    pub fn train() -> Self {
        ForwardOptions { mode: BnMode::Train, linearize: false, mask: None, zero_fill: false }
    }

    pub fn eval() -> Self {
        ForwardOptions { mode: BnMode::Eval, linearize: false, mask: None, zero_fill: false }
    }
}

/// Convolutions of a residual block followed by an optional projection
/// shortcut. Each conv is followed by batch norm; all but the last by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    convs: Vec<(Conv, BatchNorm)>,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl Block {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: BlockKind,
        plan: &BlockPlan,
        rng: &mut R,
    ) -> Self {
        let mut convs = Vec::new();
        let mut push = |store: &mut ParamStore<T>, cin, cout, k, s, rng: &mut R| {
            let i = convs.len();
            let conv = Conv::new(store, &format!("{name}.conv{i}"), cin, cout, k, s, rng);
            let bn = BatchNorm::new(store, &format!("{name}.bn{i}"), cout);
            convs.push((conv, bn));
        };
        match kind {
            BlockKind::Basic => {
                push(store, plan.in_channels, plan.planes, plan.spatial_kernel, plan.stride, rng);
                push(store, plan.planes, plan.out_channels, plan.second_kernel, 1, rng);
            }
            BlockKind::Bottleneck => {
                push(store, plan.in_channels, plan.planes, 1, 1, rng);
                push(store, plan.planes, plan.planes, plan.spatial_kernel, plan.stride, rng);
                push(store, plan.planes, plan.out_channels, 1, 1, rng);
            }
        }
        let shortcut = (plan.stride != 1 || plan.in_channels != plan.out_channels).then(|| {
            let conv = Conv::new(store, &format!("{name}.down"), plan.in_channels, plan.out_channels, 1, plan.stride, rng);
            let bn = BatchNorm::new(store, &format!("{name}.down_bn"), plan.out_channels);
            (conv, bn)
        });
        Block { convs, shortcut }
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, (conv, bn)) in self.convs.iter().enumerate() {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            if i < last {
                h = ctx.relu(h)?;
            }
        }
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.tape.add(h, skip)?;
        ctx.relu(sum)
    }
}

/// Layer structure of a backbone; parameters live in a separate store.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stem: (Conv, BatchNorm),
    blocks: Vec<Block>,
    mlp: Option<Block>,
}

/// An RF-ResNet (or reference ResNet) with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T: Scalar> {
    config: ArchConfig,
    layout: Layout,
    params: ParamStore<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn build<R: Rng + ?Sized>(config: &ArchConfig, in_channels: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (k, s) = config.stem_kernel();
        let stem = (
            Conv::new(&mut params, "stem.conv", in_channels, config.width, k, s, rng),
            BatchNorm::new(&mut params, "stem.bn", config.width),
        );
        let blocks = config
            .block_plans()
            .iter()
            .map(|p| Block::new(&mut params, &format!("stack{}.block{}", p.stack + 1, p.index), config.block_kind, p, rng))
            .collect();
        let mlp = config.post_pool_mlp.then(|| {
            let c = config.out_channels();
            let plan = BlockPlan {
                stack: 4,
                index: 0,
                in_channels: c,
                planes: c / config.block_kind.expansion(),
                out_channels: c,
                stride: 1,
                spatial_kernel: 1,
                second_kernel: 1,
            };
            Block::new(&mut params, "mlp", config.block_kind, &plan, rng)
        });
        Ok(Backbone { config: config.clone(), layout: Layout { stem, blocks, mlp }, params })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn in_channels(&self) -> usize {
        self.layout.stem.0.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    /// Learnable scalars: conv weights, biases and batch-norm affine terms.
    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    pub fn grid_side(&self, image_side: usize) -> usize {
        self.config.grid_side(image_side)
    }

    /// Forward pass. `vars` must come from `self.params().bind(..)` on `tape`.
    pub fn forward(&mut self, tape: &mut Tape<T>, vars: &[Var], x: Var, opts: ForwardOptions<'_, T>) -> Result<BackboneOutput> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!("expected {} bound parameters, got {}", self.params.len(), vars.len())));
        }
        let shape = tape.shape(x)?;
        if shape.len() != 4 || shape[1] != self.in_channels() {
            return Err(Error::shape(format!("backbone expects N×{}×H×W input, got {shape:?}", self.in_channels())));
        }
        let layout = &self.layout;
        let mut ctx = Ctx { tape, vars, stats: self.params.stats_mut(), mode: opts.mode, linearize: opts.linearize };

        let (conv, bn) = &layout.stem;
        let mut h = conv.forward(&mut ctx, x)?;
        h = bn.forward(&mut ctx, h)?;
        h = ctx.relu(h)?;
        if self.config.keep_maxpool {
            h = if opts.linearize { ctx.tape.avg_pool(h, 3, 2, 1)? } else { ctx.tape.max_pool(h, 3, 2, 1)? };
        }
        for block in &layout.blocks {
            h = block.forward(&mut ctx, h)?;
        }
        let local = h;
        let global_pooled = match opts.mask {
            Some(w) => {
                let pooled = ctx.tape.masked_mean(local, w)?;
                if opts.zero_fill {
                    let [n, c] = [ctx.tape.shape(pooled)?[0], ctx.tape.shape(pooled)?[1]];
                    let hw = w.len() / n;
                    let keep: Vec<T> = w.chunks(hw).map(|r| r.iter().copied().sum::<T>() / T::of(hw as f64)).collect();
                    let scale = ctx.tape.constant(Tensor::from_fn(&[n, c], |i| keep[i / c]));
                    ctx.tape.mul(pooled, scale)?
                } else {
                    pooled
                }
            }
            None => ctx.tape.global_avg_pool(local)?,
        };
        let global = match &layout.mlp {
            Some(mlp) => {
                let c = self.config.out_channels();
                let n = ctx.tape.shape(global_pooled)?[0];
                let g = ctx.tape.reshape(global_pooled, &[n, c, 1, 1])?;
                let g = mlp.forward(&mut ctx, g)?;
                ctx.tape.reshape(g, &[n, c])?
            }
            None => global_pooled,
        };
        Ok(BackboneOutput { local, global_pooled, global })
    }

    /// Same structure and values in another precision.
    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone { config: self.config.clone(), layout: self.layout.clone(), params: self.params.cast() }
    }
}
