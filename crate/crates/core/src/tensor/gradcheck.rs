use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(input, flat coordinate, analytic, central difference)` at the worst coordinate.
    pub witness: Option<(usize, usize, f64, f64)>,
}

/// Max over checked coordinates of
/// `|analytic − cd| / max(|analytic|, |cd|, 1e-8)`.
///
/// `max_coords` bounds how many evenly spaced coordinates of each input are
/// perturbed; `None` checks every coordinate.
pub fn gradient_check<F>(mut f: F, inputs: &[Tensor<f64>], h: f64, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |f: &mut F, xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out)?;
        if value.numel() != 1 {
            return Err(Error::shape(format!("gradient check needs a scalar function, got {:?}", value.shape())));
        }
        Ok(value.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out)?.numel() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar function, got {:?}",
            tape.value(out)?.shape()
        )));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, witness: None };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[which]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let n = input.numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for &c in &coords {
            let mut plus = input.to_vec();
            plus[c] += h;
            work[which] = Tensor::new(input.shape(), plus)?;
            let fp = eval(&mut f, &work)?;
            let mut minus = input.to_vec();
            minus[c] -= h;
            work[which] = Tensor::new(input.shape(), minus)?;
            let fm = eval(&mut f, &work)?;
            work[which] = input.clone();

            let cd = (fp - fm) / (2.0 * h);
            let a = analytic[c];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.witness.is_none() {
                report.max_rel_error = rel;
                report.witness = Some((which, c, a, cd));
            }
        }
    }
    Ok(report)
}
