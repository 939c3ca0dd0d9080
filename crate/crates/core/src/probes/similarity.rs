use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rfnet::{Backbone, ForwardOptions};
use crate::tensor::{Tape, Tensor, COSINE_EPS};
use crate::trainer::{eval_view, stack, EvalLayer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Pearson correlation between the global and the local similarity of
    /// each pair; `None` when either has zero variance.
    pub pearson: Option<f64>,
    /// Mean cosine over all cell pairs within one image, averaged over the
    /// images that appear in `pairs`.
    pub mean_intra_image_local: f64,
    pub pairs: Vec<(usize, usize)>,
    pub global_sims: Vec<f64>,
    pub local_sims: Vec<f64>,
}

/// Textbook sample correlation; `None` for fewer than two points or zero
/// variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

/// `count` pairs of distinct image indices drawn uniformly.
pub fn sample_pairs<R: Rng + ?Sized>(images: usize, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if images < 2 {
        return Err(Error::invalid("need at least two images to form pairs"));
    }
    Ok((0..count)
        .map(|_| {
            let a = rng.random_range(0..images);
            let b = (a + rng.random_range(1..images)) % images;
            (a, b)
        })
        .collect())
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / (norm + COSINE_EPS)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per image: unit global vector and the mean of its unit local vectors.
/// The mean over cell pairs of `cos(l_a^i, l_b^j)` equals the dot product of
/// the two local means.
fn summaries(
    backbone: &mut Backbone<f32>,
    images: &[Tensor<f32>],
    layer: EvalLayer,
    size: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let views: Vec<Tensor<f32>> = chunk.iter().map(|im| eval_view(im, size)).collect();
        let mut tape = Tape::new();
        let vars = backbone.params().bind(&mut tape, false);
        let x = tape.constant(stack(&views)?);
        let o = backbone.forward(&mut tape, &vars, x, ForwardOptions::eval())?;
        let g = tape.value(match layer {
            EvalLayer::Patch => o.global_pooled,
            EvalLayer::PostMlp => o.global,
        })?;
        let local = tape.value(o.local)?;
        let (c, hw) = (local.shape()[1], local.shape()[2] * local.shape()[3]);
        let d = g.shape()[1];
        for i in 0..chunk.len() {
            let gi: Vec<f64> = g.data()[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect();
            let mut mean = vec![0.0; c];
            for cell in 0..hw {
                let l: Vec<f64> = (0..c).map(|k| local.data()[(i * c + k) * hw + cell] as f64).collect();
                for (m, u) in mean.iter_mut().zip(unit(&l)) {
                    *m += u / hw as f64;
                }
            }
            out.push((unit(&gi), mean));
        }
    }
    Ok(out)
}

/// Global cosine and mean cross-image local cosine for each pair, their
/// Pearson correlation, and the mean intra-image local cosine.
pub fn similarity_correlation(
    backbone: &mut Backbone<f32>,
    images: &[Tensor<f32>],
    pairs: &[(usize, usize)],
    layer: EvalLayer,
    size: usize,
) -> Result<SimilarityReport> {
    if images.len() < 2 {
        return Err(Error::invalid("need at least two images"));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no image pairs given"));
    }
    if let Some(p) = pairs.iter().find(|p| p.0 >= images.len() || p.1 >= images.len()) {
        return Err(Error::invalid(format!("pair {p:?} indexes past {} images", images.len())));
    }
    let s = summaries(backbone, images, layer, size)?;
    let global_sims: Vec<f64> = pairs.iter().map(|&(a, b)| dot(&s[a].0, &s[b].0)).collect();
    let local_sims: Vec<f64> = pairs.iter().map(|&(a, b)| dot(&s[a].1, &s[b].1)).collect();
    let mut used: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    used.sort_unstable();
    used.dedup();
    let mean_intra_image_local = used.iter().map(|&i| dot(&s[i].1, &s[i].1)).sum::<f64>() / used.len() as f64;
    Ok(SimilarityReport {
        pearson: pearson(&global_sims, &local_sims),
        mean_intra_image_local,
        pairs: pairs.to_vec(),
        global_sims,
        local_sims,
    })
}
