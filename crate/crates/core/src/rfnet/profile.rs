use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    MaxPool,
    Identity,
}

/// One spatial layer on the deepest path from the input to the local grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerDescriptor {
    /// Square layer with "same"-style padding `(kernel - 1) / 2`.
    pub fn new(kind: LayerKind, kernel: usize, stride: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1, "kernel and stride must be positive");
        LayerDescriptor { kind, kernel, stride, padding: (kernel - 1) / 2 }
    }

    pub fn conv(kernel: usize, stride: usize) -> Self {
        Self::new(LayerKind::Conv, kernel, stride)
    }

    pub fn max_pool(kernel: usize, stride: usize) -> Self {
        Self::new(LayerKind::MaxPool, kernel, stride)
    }

    pub fn identity() -> Self {
        Self::new(LayerKind::Identity, 1, 1)
    }

    pub fn output_extent(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Receptive-field size after each layer:
/// `RFS(L) = Σ_{l≤L} (k_l − 1) · Π_{i<l} s_i + 1`.
///
/// An empty chain yields an empty profile (a bare pixel has RF 1).
pub fn receptive_field_profile(layers: &[LayerDescriptor]) -> Vec<usize> {
    let mut jump = 1;
    let mut rf = 1;
    layers
        .iter()
        .map(|l| {
            rf += (l.kernel - 1) * jump;
            jump *= l.stride;
            rf
        })
        .collect()
}

/// Final receptive field, cumulative stride and the input coordinate on which
/// output unit 0 is centred.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfGeometry {
    pub size: usize,
    pub jump: usize,
    pub offset: isize,
}

impl RfGeometry {
    pub fn of(layers: &[LayerDescriptor]) -> Self {
        let mut g = RfGeometry { size: 1, jump: 1, offset: 0 };
        for l in layers {
            g.offset += ((l.kernel as isize - 1) / 2 - l.padding as isize) * g.jump as isize;
            g.size += (l.kernel - 1) * g.jump;
            g.jump *= l.stride;
        }
        g
    }

    /// Inclusive input interval covered by output unit `index` along one axis.
    pub fn window(&self, index: usize) -> (isize, isize) {
        let centre = self.offset + (index * self.jump) as isize;
        let half = (self.size / 2) as isize;
        (centre - half, centre + half)
    }

    /// True when the whole window of `index` lies inside `[0, extent)`.
    pub fn is_interior(&self, index: usize, extent: usize) -> bool {
        let (lo, hi) = self.window(index);
        lo >= 0 && hi < extent as isize
    }
}

/// Spatial side of the output grid for a square input.
pub fn output_extent(layers: &[LayerDescriptor], input: usize) -> usize {
    layers.iter().fold(input, |e, l| l.output_extent(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_is_its_kernel() {
        assert_eq!(receptive_field_profile(&[LayerDescriptor::conv(7, 2)]), vec![7]);
        assert!(receptive_field_profile(&[]).is_empty());
    }

    #[test]
    fn stem_and_pool() {
        let chain = [LayerDescriptor::conv(7, 2), LayerDescriptor::max_pool(3, 2), LayerDescriptor::conv(3, 1)];
        assert_eq!(receptive_field_profile(&chain), vec![7, 11, 19]);
        let g = RfGeometry::of(&chain);
        assert_eq!((g.size, g.jump, g.offset), (19, 4, 0));
        assert_eq!(g.window(2), (-1, 17));
        assert!(!g.is_interior(2, 32));
        assert!(g.is_interior(3, 32));
    }
}
