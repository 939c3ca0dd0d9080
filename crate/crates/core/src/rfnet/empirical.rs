use rand::Rng;

use super::backbone::{Backbone, ForwardOptions};
use super::profile::{LayerDescriptor, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Bounding-box width of the strictly nonzero input-gradient pixels obtained
/// by backpropagating the channel sum of grid cell `position` (row, column).
///
/// Measured on a linearized f64 copy (identity activations, average pooling,
/// identity batch-norm statistics) so that no path is silenced by a dead ReLU
/// or an unselected max-pool input.
pub fn empirical_rf<T: Scalar>(backbone: &Backbone<T>, image_size: usize, position: (usize, usize)) -> Result<usize> {
    let mut net: Backbone<f64> = backbone.cast();
    net.params_mut().reset_stats_to_identity();
    let mut tape = Tape::new();
    let vars = net.params().bind(&mut tape, false);
    let x = tape.param(Tensor::zeros(&[1, net.in_channels(), image_size, image_size]));
    let opts = ForwardOptions { linearize: true, ..ForwardOptions::eval() };
    let out = net.forward(&mut tape, &vars, x, opts)?;
    saliency_width(&mut tape, x, out.local, position)
}

/// Same measurement on a bare single-channel chain of random convolutions and
/// average pools following `layers`.
pub fn empirical_rf_chain<R: Rng + ?Sized>(
    layers: &[LayerDescriptor],
    image_size: usize,
    position: (usize, usize),
    rng: &mut R,
) -> Result<usize> {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(&[1, 1, image_size, image_size]));
    let mut h = x;
    for l in layers {
        h = match l.kind {
            LayerKind::Conv => {
                // Positive weights rule out accidental cancellation.
                let w = tape.constant(Tensor::uniform(&[1, 1, l.kernel, l.kernel], 0.5, 1.5, rng));
                tape.conv2d(h, w, None, l.stride, l.padding)?
            }
            LayerKind::MaxPool => tape.avg_pool(h, l.kernel, l.stride, l.padding)?,
            LayerKind::Identity => h,
        };
    }
    saliency_width(&mut tape, x, h, position)
}

fn saliency_width(tape: &mut Tape<f64>, x: Var, grid: Var, (row, col): (usize, usize)) -> Result<usize> {
    let shape = tape.shape(grid)?.to_vec();
    let (c, gh, gw) = (shape[1], shape[2], shape[3]);
    if row >= gh || col >= gw {
        return Err(Error::invalid(format!("probe ({row}, {col}) outside the {gh}×{gw} grid")));
    }
    let pick = Tensor::from_fn(&shape, |i| if i % (gh * gw) == row * gw + col { 1.0 } else { 0.0 });
    debug_assert_eq!(pick.numel(), c * gh * gw);
    let pick = tape.constant(pick);
    let cell = tape.mul(grid, pick)?;
    let loss = tape.sum(cell)?;
    let grads = tape.backward(loss)?;
    let g = grads.get(x).ok_or_else(|| Error::invalid("input received no gradient"))?;
    let (ch, ih, iw) = (g.shape()[1], g.shape()[2], g.shape()[3]);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for k in 0..ch {
        for r in 0..ih {
            for q in 0..iw {
                if g.data()[(k * ih + r) * iw + q] != 0.0 {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(q);
                    c1 = c1.max(q);
                }
            }
        }
    }
    if r0 == usize::MAX {
        return Ok(0);
    }
    Ok((r1 - r0 + 1).max(c1 - c0 + 1))
}
