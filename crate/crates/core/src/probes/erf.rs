use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rfnet::{Backbone, ForwardOptions};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{eval_view, stack};

/// Default saliency thresholds as fractions of the map maximum.
pub const DEFAULT_ERF_THRESHOLDS: [f64; 2] = [0.05, 0.32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErfStats {
    pub thresholds: Vec<f64>,
    /// `sqrt_counts[t]` holds, per image and position (image-major), the
    /// square root of the number of pixels above `thresholds[t]`.
    pub sqrt_counts: Vec<Vec<f64>>,
}

impl ErfStats {
    pub fn mean(&self, threshold: usize) -> f64 {
        let v = &self.sqrt_counts[threshold];
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn max(&self, threshold: usize) -> f64 {
        self.sqrt_counts[threshold].iter().copied().fold(0.0, f64::max)
    }
}

/// Square roots of the pixel counts whose saliency, normalized by its
/// maximum, exceeds each threshold. `grad` is one C×H×W input gradient; the
/// saliency of a pixel is the largest |gradient| over channels.
pub fn sqrt_counts_from_gradient(grad: &Tensor<f32>, thresholds: &[f64]) -> Result<Vec<f64>> {
    if grad.ndim() != 3 {
        return Err(Error::shape(format!("expected a C×H×W gradient, got {:?}", grad.shape())));
    }
    let (c, hw) = (grad.shape()[0], grad.shape()[1] * grad.shape()[2]);
    let sal: Vec<f64> =
        (0..hw).map(|p| (0..c).map(|ch| grad.data()[ch * hw + p].abs() as f64).fold(0.0, f64::max)).collect();
    let peak = sal.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(vec![0.0; thresholds.len()]);
    }
    Ok(thresholds.iter().map(|&t| (sal.iter().filter(|&&s| s / peak > t).count() as f64).sqrt()).collect())
}

/// Grid cells `(row, col)` with both coordinates divisible by `stride`.
pub fn strided_positions(side: usize, stride: usize) -> Vec<(usize, usize)> {
    let stride = stride.max(1);
    (0..side).step_by(stride).flat_map(|r| (0..side).step_by(stride).map(move |c| (r, c))).collect()
}

/// Effective receptive-field sizes: for every image and grid position,
/// backpropagate the channel sum of that local representation to the input
/// and count salient pixels. Runs in eval mode; a backbone without running
/// statistics uses identity statistics.
pub fn erf_stats(
    backbone: &Backbone<f32>,
    images: &[Tensor<f32>],
    positions: &[(usize, usize)],
    thresholds: &[f64],
    size: usize,
) -> Result<ErfStats> {
    if positions.is_empty() {
        return Err(Error::invalid("no grid positions to probe"));
    }
    if images.is_empty() {
        return Err(Error::invalid("no images to probe"));
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..1.0).contains(*t)) {
        return Err(Error::invalid(format!("threshold {t} outside [0, 1)")));
    }
    let mut net = backbone.clone();
    if net.params().stats().iter().any(|s| !s.initialized) {
        net.params_mut().reset_stats_to_identity();
    }
    let side = net.grid_side(size);
    if let Some(p) = positions.iter().find(|p| p.0 >= side || p.1 >= side) {
        return Err(Error::invalid(format!("position {p:?} outside the {side}×{side} grid")));
    }
    let views: Vec<Tensor<f32>> = images.iter().map(|im| eval_view(im, size)).collect();
    let x0 = stack(&views)?;
    let n = images.len();
    let per_image = x0.numel() / n;
    let mut per_item = vec![Vec::new(); n * positions.len()];
    // Eval-mode images are independent, so one backward per position serves
    // the whole batch.
    for (k, &(row, col)) in positions.iter().enumerate() {
        let mut tape = Tape::new();
        let vars = net.params().bind(&mut tape, false);
        let x = tape.param(x0.clone());
        let out = net.forward(&mut tape, &vars, x, ForwardOptions::eval())?;
        let shape = tape.shape(out.local)?.to_vec();
        let cells = shape[2] * shape[3];
        let cell = row * shape[3] + col;
        let pick = tape.constant(Tensor::from_fn(&shape, |i| if i % cells == cell { 1.0 } else { 0.0 }));
        let picked = tape.mul(out.local, pick)?;
        let total = tape.sum(picked)?;
        let grads = tape.backward(total)?;
        let g = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
        for i in 0..n {
            let gi = Tensor::new(&x0.shape()[1..], g.data()[i * per_image..(i + 1) * per_image].to_vec())?;
            per_item[i * positions.len() + k] = sqrt_counts_from_gradient(&gi, thresholds)?;
        }
    }
    let sqrt_counts = (0..thresholds.len()).map(|t| per_item.iter().map(|v| v[t]).collect()).collect();
    Ok(ErfStats { thresholds: thresholds.to_vec(), sqrt_counts })
}
