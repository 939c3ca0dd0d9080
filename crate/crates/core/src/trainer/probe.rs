use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::cossl::{resize_crop, CropBox};
use crate::error::{Error, Result};
use crate::rfnet::{Backbone, ForwardOptions};
use crate::tensor::{Tape, Tensor};

/// Which representation a probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalLayer {
    /// Average-pooled grid, before the post-pool MLP.
    Patch,
    /// After the post-pool MLP (equal to `Patch` without one).
    PostMlp,
}

impl EvalLayer {
    pub const ALL: [EvalLayer; 2] = [EvalLayer::Patch, EvalLayer::PostMlp];

    pub fn name(self) -> &'static str {
        match self {
            EvalLayer::Patch => "patch",
            EvalLayer::PostMlp => "post_mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.replace('-', "_").as_str() {
            "patch" => Some(EvalLayer::Patch),
            "post_mlp" => Some(EvalLayer::PostMlp),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Affine classifier `features · Wᵀ + b`, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl ProbeHead {
    pub fn new(features: usize, classes: usize) -> Self {
        ProbeHead { weight: Tensor::zeros(&[classes, features]), bias: Tensor::zeros(&[classes]) }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn logits(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let y = tape.linear(x, w, Some(b))?;
        Ok(tape.value(y)?.clone())
    }

    /// One plain SGD step on the mean cross-entropy; returns the loss before
    /// the step. `features` carry no tape history.
    pub fn step(&mut self, features: &Tensor<f32>, labels: &[usize], lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let w = tape.param(self.weight.clone());
        let b = tape.param(self.bias.clone());
        let y = tape.linear(x, w, Some(b))?;
        let loss = tape.cross_entropy(y, labels)?;
        let value = tape.value(loss)?.item() as f64;
        let grads = tape.backward(loss)?;
        let lr = lr as f32;
        let gw = grads.get(w).expect("weight is trainable");
        let gb = grads.get(b).expect("bias is trainable");
        self.weight = self.weight.zip_map(gw, |p, g| p - lr * g)?;
        self.bias = self.bias.zip_map(gb, |p, g| p - lr * g)?;
        Ok(value)
    }

    /// Row-wise argmax of the logits.
    pub fn predict(&self, features: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        let k = self.classes();
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
            .collect())
    }
}

/// Whole image resized to `size`×`size`.
pub fn eval_view(image: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h == size && w == size {
        return image.clone();
    }
    resize_crop(image, CropBox { top: 0, left: 0, height: h, width: w }, size)
}

/// Stack images into one N×C×S×S tensor.
pub fn stack(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to stack"))?;
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::shape(format!("cannot stack {:?} with {:?}", img.shape(), first.shape())));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[&[images.len()][..], first.shape()].concat(), data)
}

/// Eval-mode features of `images` at `layer`, computed in batches of `batch`.
pub fn extract_features(
    backbone: &mut Backbone<f32>,
    images: &[Tensor<f32>],
    layer: EvalLayer,
    size: usize,
    batch: usize,
) -> Result<Tensor<f32>> {
    let mut rows = Vec::new();
    let c = backbone.out_channels();
    for chunk in images.chunks(batch.max(1)) {
        let views: Vec<Tensor<f32>> = chunk.iter().map(|im| eval_view(im, size)).collect();
        let mut tape = Tape::new();
        let vars = backbone.params().bind(&mut tape, false);
        let x = tape.constant(stack(&views)?);
        let out = backbone.forward(&mut tape, &vars, x, ForwardOptions::eval())?;
        let v = match layer {
            EvalLayer::Patch => out.global_pooled,
            EvalLayer::PostMlp => out.global,
        };
        rows.extend_from_slice(tape.value(v)?.data());
    }
    Tensor::new(&[images.len(), c], rows)
}

/// Fraction of `labels` matched by the argmax of `probe` on `features`.
pub fn accuracy_of(probe: &ProbeHead, features: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let pred = probe.predict(features)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

/// Top-1 accuracy of `probe` on `eval_set` at `layer`.
pub fn probe_accuracy(
    backbone: &mut Backbone<f32>,
    probe: &ProbeHead,
    eval_set: &Dataset,
    layer: EvalLayer,
    size: usize,
) -> Result<f64> {
    if probe.classes() != eval_set.classes {
        return Err(Error::invalid(format!(
            "probe has {} classes but the evaluation set has {}",
            probe.classes(),
            eval_set.classes
        )));
    }
    let feats = extract_features(backbone, &eval_set.images, layer, size, 64)?;
    accuracy_of(probe, &feats, &eval_set.labels)
}
