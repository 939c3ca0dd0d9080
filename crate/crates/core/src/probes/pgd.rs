use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rfnet::{Backbone, ForwardOptions};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{accuracy_of, eval_view, stack, Dataset, EvalLayer, ProbeHead};

/// ℓ∞ projected sign-gradient attack settings, in [0, 1] pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub gamma: f64,
    pub iterations: usize,
}

/// Budgets of the standard attack grid.
pub const ATTACK_EPSILONS: [f64; 4] = [0.003, 0.01, 0.03, 0.1];
/// Step-size divisors (`gamma = epsilon / d`) of the standard grid.
pub const ATTACK_GAMMA_DIVISORS: [f64; 2] = [40.0, 10.0];
pub const ATTACK_ITERATIONS: [usize; 2] = [1, 5];

impl AttackSpec {
    pub fn new(epsilon: f64, gamma: f64, iterations: usize) -> Result<Self> {
        let spec = AttackSpec { epsilon, gamma, iterations };
        spec.validate()?;
        Ok(spec)
    }

    /// `gamma = epsilon / divisor`.
    pub fn with_divisor(epsilon: f64, divisor: f64, iterations: usize) -> Result<Self> {
        if !(divisor > 0.0) {
            return Err(Error::invalid(format!("gamma divisor must be positive, got {divisor}")));
        }
        Self::new(epsilon, epsilon / divisor, iterations)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be a non-negative number, got {}", self.epsilon)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.gamma > self.epsilon {
            return Err(Error::invalid(format!("gamma {} exceeds epsilon {}", self.gamma, self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("an attack needs at least one iteration"));
        }
        Ok(())
    }

    /// Every budget × step divisor × iteration count of the standard grid.
    pub fn standard_grid() -> Vec<AttackSpec> {
        let mut out = Vec::new();
        for &eps in &ATTACK_EPSILONS {
            for &div in &ATTACK_GAMMA_DIVISORS {
                for &it in &ATTACK_ITERATIONS {
                    out.push(AttackSpec { epsilon: eps, gamma: eps / div, iterations: it });
                }
            }
        }
        out
    }
}

/// Move `x` one ulp at a time towards `x0` until `|x − x0| ≤ eps` holds in
/// exact arithmetic.
fn pull_inside(x: f32, x0: f32, eps: f64) -> f32 {
    let mut x = x;
    while (x as f64 - x0 as f64).abs() > eps {
        x = if x > x0 { x.next_down() } else { x.next_up() };
    }
    x
}

/// Run the attack from `x0`. `loss_grad` returns the gradient of the
/// classification loss with respect to its input. Every step adds
/// `gamma · sign(grad)`, projects onto the `epsilon` ball around `x0` and
/// clamps to [0, 1]. The result satisfies `|x − x0| ≤ epsilon` elementwise.
pub fn pgd_perturb_with<F>(x0: &Tensor<f32>, spec: &AttackSpec, mut loss_grad: F) -> Result<Tensor<f32>>
where
    F: FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
{
    spec.validate()?;
    let eps = spec.epsilon;
    let (eps32, gamma) = (eps as f32, spec.gamma as f32);
    let mut x = x0.clone();
    for _ in 0..spec.iterations {
        let g = loss_grad(&x)?;
        if g.shape() != x.shape() {
            return Err(Error::shape(format!("gradient {:?} vs input {:?}", g.shape(), x.shape())));
        }
        let data: Vec<f32> = x
            .data()
            .iter()
            .zip(g.data())
            .zip(x0.data())
            .map(|((&xi, &gi), &oi)| {
                let step = if gi > 0.0 {
                    gamma
                } else if gi < 0.0 {
                    -gamma
                } else {
                    0.0
                };
                let v = (xi + step).clamp(oi - eps32, oi + eps32).clamp(0.0, 1.0);
                pull_inside(v, oi, eps)
            })
            .collect();
        x = Tensor::new(x.shape(), data)?;
    }
    Ok(x)
}

/// Largest `|x − x0|` per image of an N×… batch, in f64.
pub fn linf_per_image(x: &Tensor<f32>, x0: &Tensor<f32>) -> Result<Vec<f64>> {
    if x.shape() != x0.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.shape(), x0.shape())));
    }
    let per = x.numel() / x.shape()[0].max(1);
    Ok(x.data()
        .chunks(per)
        .zip(x0.data().chunks(per))
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).abs()).fold(0.0, f64::max))
        .collect())
}

/// Loss gradient of `probe ∘ backbone` (eval mode) with respect to a batch.
pub fn probe_loss_grad(
    backbone: &mut Backbone<f32>,
    probe: &ProbeHead,
    layer: EvalLayer,
    x: &Tensor<f32>,
    labels: &[usize],
) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let vars = backbone.params().bind(&mut tape, false);
    let xv = tape.param(x.clone());
    let out = backbone.forward(&mut tape, &vars, xv, ForwardOptions::eval())?;
    let feats = match layer {
        EvalLayer::Patch => out.global_pooled,
        EvalLayer::PostMlp => out.global,
    };
    let w = tape.constant(probe.weight.clone());
    let b = tape.constant(probe.bias.clone());
    let logits = tape.linear(feats, w, Some(b))?;
    let loss = tape.cross_entropy(logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok(grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgdReport {
    pub spec: AttackSpec,
    pub clean: f64,
    pub adversarial: f64,
    /// Largest ℓ∞ perturbation over all images.
    pub max_linf: f64,
}

/// Clean and adversarial probe accuracy on `eval_set`.
pub fn pgd_attack(
    backbone: &mut Backbone<f32>,
    probe: &ProbeHead,
    eval_set: &Dataset,
    spec: &AttackSpec,
    layer: EvalLayer,
    size: usize,
) -> Result<PgdReport> {
    spec.validate()?;
    if probe.classes() != eval_set.classes {
        return Err(Error::invalid(format!(
            "probe has {} classes but the evaluation set has {}",
            probe.classes(),
            eval_set.classes
        )));
    }
    let batch = 64;
    let (mut clean_rows, mut adv_rows) = (Vec::new(), Vec::new());
    let mut max_linf = 0.0f64;
    for (chunk, labels) in eval_set.images.chunks(batch).zip(eval_set.labels.chunks(batch)) {
        let views: Vec<Tensor<f32>> = chunk.iter().map(|im| eval_view(im, size)).collect();
        let x0 = stack(&views)?;
        let x = pgd_perturb_with(&x0, spec, |x| probe_loss_grad(backbone, probe, layer, x, labels))?;
        let linf = linf_per_image(&x, &x0)?;
        if let Some(bad) = linf.iter().find(|&&d| d > spec.epsilon) {
            return Err(Error::Structure(format!("perturbation {bad} exceeds epsilon {}", spec.epsilon)));
        }
        max_linf = linf.into_iter().fold(max_linf, f64::max);
        clean_rows.extend_from_slice(features(backbone, &x0, layer)?.data());
        adv_rows.extend_from_slice(features(backbone, &x, layer)?.data());
    }
    let d = probe.features();
    let clean = accuracy_of(probe, &Tensor::new(&[eval_set.len(), d], clean_rows)?, &eval_set.labels)?;
    let adversarial = accuracy_of(probe, &Tensor::new(&[eval_set.len(), d], adv_rows)?, &eval_set.labels)?;
    Ok(PgdReport { spec: *spec, clean, adversarial, max_linf })
}

fn features(backbone: &mut Backbone<f32>, x: &Tensor<f32>, layer: EvalLayer) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let vars = backbone.params().bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = backbone.forward(&mut tape, &vars, xv, ForwardOptions::eval())?;
    let v = match layer {
        EvalLayer::Patch => out.global_pooled,
        EvalLayer::PostMlp => out.global,
    };
    Ok(tape.value(v)?.clone())
}
