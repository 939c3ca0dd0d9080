use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rfnet::{Backbone, ForwardOptions};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{accuracy_of, eval_view, stack, Dataset, EvalLayer, ProbeHead};

/// Fractions of grid cells discarded in the default sweep.
pub const DEFAULT_MASK_FRACTIONS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// How the pooled representation treats discarded cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    /// Mean over surviving cells.
    Renormalize,
    /// Mean over all cells with discarded ones read as zero.
    ZeroFill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    pub clean: f64,
    pub fractions: Vec<f64>,
    pub accuracies: Vec<f64>,
    /// Mean of `accuracies`.
    pub average: f64,
}

impl MaskingReport {
    /// `(clean − average) / clean`; zero when the clean accuracy is zero.
    pub fn relative_drop(&self) -> f64 {
        if self.clean > 0.0 {
            (self.clean - self.average) / self.clean
        } else {
            0.0
        }
    }
}

/// Number of cells dropped out of `cells` at `fraction`; at least one cell
/// always survives.
pub fn dropped_cells(cells: usize, fraction: f64) -> usize {
    ((fraction * cells as f64).round() as usize).min(cells.saturating_sub(1))
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("mask fraction must lie in [0, 1), got {fraction}")));
    }
    Ok(())
}

/// 0/1 weights (`images × cells`) with a uniformly random subset of each
/// image's cells set to zero.
pub fn sample_mask<R: Rng + ?Sized>(images: usize, cells: usize, fraction: f64, rng: &mut R) -> Result<Vec<f32>> {
    check_fraction(fraction)?;
    let drop = dropped_cells(cells, fraction);
    let mut mask = vec![1.0f32; images * cells];
    for row in mask.chunks_mut(cells) {
        for i in index::sample(rng, cells, drop) {
            row[i] = 0.0;
        }
    }
    Ok(mask)
}

/// Eval-mode features at `layer` with pooling restricted by `mask`
/// (`images × cells`, as from `sample_mask`).
pub fn masked_features(
    backbone: &mut Backbone<f32>,
    images: &[Tensor<f32>],
    layer: EvalLayer,
    mask: &[f32],
    fill: MaskFill,
    size: usize,
) -> Result<Tensor<f32>> {
    let views: Vec<Tensor<f32>> = images.iter().map(|im| eval_view(im, size)).collect();
    let mut tape = Tape::new();
    let vars = backbone.params().bind(&mut tape, false);
    let x = tape.constant(stack(&views)?);
    let opts = ForwardOptions { mask: Some(mask), zero_fill: fill == MaskFill::ZeroFill, ..ForwardOptions::eval() };
    let out = backbone.forward(&mut tape, &vars, x, opts)?;
    let v = match layer {
        EvalLayer::Patch => out.global_pooled,
        EvalLayer::PostMlp => out.global,
    };
    Ok(tape.value(v)?.clone())
}

/// Probe accuracy when each image's global representation is pooled from a
/// random subset of its grid cells, for every fraction in `fractions`.
#[allow(clippy::too_many_arguments)]
pub fn masking_robustness<R: Rng + ?Sized>(
    backbone: &mut Backbone<f32>,
    probe: &ProbeHead,
    eval_set: &Dataset,
    layer: EvalLayer,
    fractions: &[f64],
    fill: MaskFill,
    size: usize,
    rng: &mut R,
) -> Result<MaskingReport> {
    if fractions.is_empty() {
        return Err(Error::invalid("no mask fractions given"));
    }
    for &f in fractions {
        check_fraction(f)?;
    }
    if probe.classes() != eval_set.classes {
        return Err(Error::invalid(format!(
            "probe has {} classes but the evaluation set has {}",
            probe.classes(),
            eval_set.classes
        )));
    }
    let side = backbone.grid_side(size);
    let cells = side * side;
    let batch = 64;
    let run = |backbone: &mut Backbone<f32>, fraction: Option<f64>, rng: &mut R| -> Result<f64> {
        let mut rows = Vec::new();
        for chunk in eval_set.images.chunks(batch) {
            let mask = match fraction {
                Some(f) => sample_mask(chunk.len(), cells, f, rng)?,
                None => vec![1.0; chunk.len() * cells],
            };
            rows.extend_from_slice(masked_features(backbone, chunk, layer, &mask, fill, size)?.data());
        }
        let feats = Tensor::new(&[eval_set.len(), probe.features()], rows)?;
        accuracy_of(probe, &feats, &eval_set.labels)
    };
    let clean = run(backbone, None, rng)?;
    let mut accuracies = Vec::with_capacity(fractions.len());
    for &f in fractions {
        accuracies.push(run(backbone, Some(f), rng)?);
    }
    let average = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    Ok(MaskingReport { clean, fractions: fractions.to_vec(), accuracies, average })
}
