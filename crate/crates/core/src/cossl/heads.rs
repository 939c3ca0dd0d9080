use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, ParamStore};
use crate::tensor::{BnMode, Scalar, Tape, Var};

/// Widths of the projection and prediction heads.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub out: usize,
    /// Hidden layers of the projectors.
    pub projector_depth: usize,
    /// Reuse the global heads on the local grid instead of separate ones.
    pub shared_local_heads: bool,
}

impl HeadConfig {
    /// Hidden 4096, output 256.
    pub fn full_scale() -> Self {
        HeadConfig { hidden: 4096, out: 256, projector_depth: 1, shared_local_heads: false }
    }

    /// Hidden 512, output 64.
    pub fn desk_scale() -> Self {
        HeadConfig { hidden: 512, out: 64, projector_depth: 1, shared_local_heads: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.out == 0 {
            return Err(Error::config("loss.head_hidden", "head widths must be positive"));
        }
        Ok(())
    }
}

/// Pointwise MLP: `depth` × (1×1 conv, batch norm, ReLU) then a 1×1 conv,
/// biased when `out_bias` is set. Accepts N×C rows or N×C×H×W grids; on grids it acts per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T: Scalar> {
    layers: Vec<(Conv, Option<BatchNorm>)>,
    params: ParamStore<T>,
}

impl<T: Scalar> Head<T> {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        hidden: usize,
        out: usize,
        depth: usize,
        out_bias: bool,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut width = in_features;
        for i in 0..depth {
            let conv = Conv::pointwise(&mut params, &format!("fc{i}"), width, hidden, false, rng);
            let bn = BatchNorm::new(&mut params, &format!("bn{i}"), hidden);
            layers.push((conv, Some(bn)));
            width = hidden;
        }
        layers.push((Conv::pointwise(&mut params, &format!("fc{depth}"), width, out, out_bias, rng), None));
        Head { layers, params }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().map(|(c, _)| c.out_channels).unwrap_or(0)
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, vars: &[Var], x: Var, mode: BnMode) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!("expected {} bound head parameters, got {}", self.params.len(), vars.len())));
        }
        let shape = tape.shape(x)?.to_vec();
        let rows = shape.len() == 2;
        let mut h = if rows { tape.reshape(x, &[shape[0], shape[1], 1, 1])? } else { x };
        let mut ctx = Ctx { tape, vars, stats: self.params.stats_mut(), mode, linearize: false };
        for (conv, bn) in &self.layers {
            h = conv.forward(&mut ctx, h)?;
            if let Some(bn) = bn {
                h = bn.forward(&mut ctx, h)?;
                h = ctx.relu(h)?;
            }
        }
        if rows {
            h = tape.reshape(h, &[shape[0], self.out_features()])?;
        }
        Ok(h)
    }
}
