use serde::{Deserialize, Serialize};

use super::profile::{LayerDescriptor, LayerKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Base {
    RfResnet18,
    RfResnet50,
    ResnetReference,
}

impl Base {
    pub fn name(self) -> &'static str {
        match self {
            Base::RfResnet18 => "rf-resnet18",
            Base::RfResnet50 => "rf-resnet50",
            Base::ResnetReference => "resnet-reference",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('_', "-").as_str() {
            "rf-resnet18" => Some(Base::RfResnet18),
            "rf-resnet50" => Some(Base::RfResnet50),
            "resnet-reference" | "resnet" => Some(Base::ResnetReference),
            _ => None,
        }
    }

    /// RF variants keep a spatial kernel only in the first conv of the first
    /// and middle block of every stack.
    pub fn bounded(self) -> bool {
        !matches!(self, Base::ResnetReference)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "basic" => Some(BlockKind::Basic),
            "bottleneck" => Some(BlockKind::Bottleneck),
            _ => None,
        }
    }

    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Hyperparameters of an RF-ResNet (or a reference ResNet).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchConfig {
    pub base: Base,
    /// Keep the max-pool after the stem.
    pub keep_maxpool: bool,
    /// Strides of the first block of stacks 2, 3 and 4.
    pub strides: [usize; 3],
    pub blocks: [usize; 4],
    pub block_kind: BlockKind,
    /// Channels of the first stack (64 at full scale).
    pub width: usize,
    pub small_image_stem: bool,
    pub post_pool_mlp: bool,
}

/// Kernel layout of one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPlan {
    pub stack: usize,
    pub index: usize,
    pub in_channels: usize,
    pub planes: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Kernel of the first spatial conv (3, or 1 once replaced).
    pub spatial_kernel: usize,
    /// Kernel of the second conv of a basic block.
    pub second_kernel: usize,
}

impl ArchConfig {
    /// Torchvision-style ResNet18 (basic) or ResNet50 (bottleneck).
    pub fn resnet_reference(kind: BlockKind) -> Self {
        ArchConfig {
            base: Base::ResnetReference,
            keep_maxpool: true,
            strides: [2, 2, 2],
            blocks: match kind {
                BlockKind::Basic => [2, 2, 2, 2],
                BlockKind::Bottleneck => [3, 4, 6, 3],
            },
            block_kind: kind,
            width: 64,
            small_image_stem: false,
            post_pool_mlp: false,
        }
    }

    /// ResNet18 layout with doubled block counts.
    pub fn rf_resnet18() -> Self {
        ArchConfig {
            base: Base::RfResnet18,
            keep_maxpool: true,
            strides: [2, 2, 2],
            blocks: [4, 4, 4, 4],
            block_kind: BlockKind::Basic,
            width: 64,
            small_image_stem: false,
            post_pool_mlp: true,
        }
    }

    /// ResNet50 layout with one extra block in the fourth stack.
    pub fn rf_resnet50() -> Self {
        ArchConfig {
            base: Base::RfResnet50,
            keep_maxpool: true,
            strides: [2, 2, 2],
            blocks: [3, 4, 6, 4],
            block_kind: BlockKind::Bottleneck,
            width: 64,
            small_image_stem: false,
            post_pool_mlp: true,
        }
    }

    pub fn for_base(base: Base) -> Self {
        match base {
            Base::RfResnet18 => Self::rf_resnet18(),
            Base::RfResnet50 => Self::rf_resnet50(),
            Base::ResnetReference => Self::resnet_reference(BlockKind::Bottleneck),
        }
    }

    pub fn with_small_image_stem(mut self) -> Self {
        self.small_image_stem = true;
        self.keep_maxpool = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::config("arch.strides", format!("each stride must be 1 or 2, got {:?}", self.strides)));
        }
        if self.blocks.contains(&0) {
            return Err(Error::config("arch.blocks", "every stack needs at least one block"));
        }
        if self.width == 0 {
            return Err(Error::config("arch.width", "width must be positive"));
        }
        if self.block_kind == BlockKind::Bottleneck && self.post_pool_mlp && self.width * 8 * 4 < 4 {
            return Err(Error::config("arch.width", "too narrow for a bottleneck MLP"));
        }
        Ok(())
    }

    pub fn stem_kernel(&self) -> (usize, usize) {
        if self.small_image_stem {
            (3, 1)
        } else {
            (7, 2)
        }
    }

    /// Channel count of the local representations.
    pub fn out_channels(&self) -> usize {
        self.width * 8 * self.block_kind.expansion()
    }

    pub fn block_plans(&self) -> Vec<BlockPlan> {
        let stack_strides = [1, self.strides[0], self.strides[1], self.strides[2]];
        let mut plans = Vec::new();
        let mut in_channels = self.width;
        for (stack, &n) in self.blocks.iter().enumerate() {
            let planes = self.width << stack;
            let out_channels = planes * self.block_kind.expansion();
            for index in 0..n {
                let keeps_spatial = !self.base.bounded() || index == 0 || index == n / 2;
                plans.push(BlockPlan {
                    stack,
                    index,
                    in_channels,
                    planes,
                    out_channels,
                    stride: if index == 0 { stack_strides[stack] } else { 1 },
                    spatial_kernel: if keeps_spatial { 3 } else { 1 },
                    second_kernel: if self.base.bounded() { 1 } else { 3 },
                });
                in_channels = out_channels;
            }
        }
        plans
    }

    /// Deepest input-to-grid path: stem, optional max-pool, then every block's
    /// main-branch convolutions. Shortcuts never widen the receptive field.
    pub fn descriptors(&self) -> Vec<LayerDescriptor> {
        let (k, s) = self.stem_kernel();
        let mut chain = vec![LayerDescriptor::conv(k, s)];
        if self.keep_maxpool {
            chain.push(LayerDescriptor::max_pool(3, 2));
        }
        for p in self.block_plans() {
            match self.block_kind {
                BlockKind::Basic => {
                    chain.push(LayerDescriptor::conv(p.spatial_kernel, p.stride));
                    chain.push(LayerDescriptor::conv(p.second_kernel, 1));
                }
                BlockKind::Bottleneck => {
                    chain.push(LayerDescriptor::conv(1, 1));
                    chain.push(LayerDescriptor::conv(p.spatial_kernel, p.stride));
                    chain.push(LayerDescriptor::conv(1, 1));
                }
            }
        }
        chain
    }

    pub fn receptive_field(&self) -> usize {
        super::receptive_field_profile(&self.descriptors()).last().copied().unwrap_or(1)
    }

    /// Product of all strides between input and grid.
    pub fn total_stride(&self) -> usize {
        self.descriptors().iter().map(|d| d.stride).product()
    }

    pub fn grid_side(&self, image_side: usize) -> usize {
        super::profile::output_extent(&self.descriptors(), image_side)
    }

    /// Short label such as `RF99-rf-resnet50[m=0,s=2/2/2]`.
    pub fn label(&self) -> String {
        format!(
            "RF{}-{}[m={},s={}/{}/{}]",
            self.receptive_field(),
            self.base.name(),
            u8::from(self.keep_maxpool),
            self.strides[0],
            self.strides[1],
            self.strides[2]
        )
    }

    pub fn has_descriptor_kind(&self, kind: LayerKind) -> bool {
        self.descriptors().iter().any(|d| d.kind == kind)
    }
}
