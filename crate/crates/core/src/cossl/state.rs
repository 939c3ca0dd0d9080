use rand::Rng;

use super::heads::{Head, HeadConfig};
use super::loss::{downsample_local_grid, loss_global, loss_local};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rfnet::{ArchConfig, Backbone, BackboneOutput, ForwardOptions};
use crate::tensor::{BnMode, Scalar, Tape, Tensor, Var};

/// Backbone plus projectors: the part shared by the online and target sides.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar> {
    pub backbone: Backbone<T>,
    pub projector: Head<T>,
    pub local_projector: Option<Head<T>>,
}

impl<T: Scalar> Network<T> {
    fn parts(&self) -> Vec<&ParamStore<T>> {
        let mut v = vec![self.backbone.params(), self.projector.params()];
        v.extend(self.local_projector.as_ref().map(Head::params));
        v
    }

    fn parts_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        let mut v = vec![self.backbone.params_mut(), self.projector.params_mut()];
        v.extend(self.local_projector.as_mut().map(Head::params_mut));
        v
    }
}

/// Online network with predictors and its EMA target.
#[derive(Debug, Clone, PartialEq)]
pub struct DualNetworkState<T: Scalar> {
    pub online: Network<T>,
    pub predictor: Head<T>,
    pub local_predictor: Option<Head<T>>,
    pub target: Network<T>,
    pub tau: f64,
    pub w_s: f64,
    /// Cells per image fed to the local heads; `None` keeps the full grid.
    pub local_cells: Option<usize>,
}

/// Tape bindings of the online parameters, in `online_parts` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OnlineVars {
    pub parts: Vec<Vec<Var>>,
}

/// Tape bindings of the target parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetVars {
    pub parts: Vec<Vec<Var>>,
}

/// Everything one view produces on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewForward {
    pub online: BackboneOutput,
    pub target: BackboneOutput,
    /// Online global projection and prediction.
    pub z_g: Var,
    pub p_g: Var,
    pub z_g_target: Var,
    /// Per-cell online predictions and target projections (N×D×n×n).
    pub p_local: Option<Var>,
    pub z_local_target: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Losses {
    pub total: Var,
    /// Sum of the two global terms.
    pub global: Var,
    /// Sum of the two local terms, unweighted; absent when not computed.
    pub local: Option<Var>,
}

impl<T: Scalar> DualNetworkState<T> {
    /// Online side from `rng`; the target starts as an exact copy.
    pub fn new<R: Rng + ?Sized>(
        arch: &ArchConfig,
        heads: &HeadConfig,
        in_channels: usize,
        tau: f64,
        w_s: f64,
        local_cells: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        heads.validate()?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::config("loss.tau", format!("tau must lie in [0, 1], got {tau}")));
        }
        if !(w_s >= 0.0) {
            return Err(Error::config("loss.w_s", format!("w_s must be non-negative, got {w_s}")));
        }
        let backbone = Backbone::build(arch, in_channels, rng)?;
        let c = backbone.out_channels();
        // Projector outputs feed the predictor's batch norm, which cancels any
        // output bias, so only the predictors carry one.
        let projector = Head::new(c, heads.hidden, heads.out, heads.projector_depth, false, rng);
        let predictor = Head::new(heads.out, heads.hidden, heads.out, 1, true, rng);
        let (local_projector, local_predictor) = if heads.shared_local_heads {
            (None, None)
        } else {
            (
                Some(Head::new(c, heads.hidden, heads.out, heads.projector_depth, false, rng)),
                Some(Head::new(heads.out, heads.hidden, heads.out, 1, true, rng)),
            )
        };
        let online = Network { backbone, projector, local_projector };
        let target = online.clone();
        Ok(DualNetworkState { online, predictor, local_predictor, target, tau, w_s, local_cells })
    }

    /// Online stores: backbone, projector, predictor, then the local heads if separate.
    pub fn online_parts(&self) -> Vec<&ParamStore<T>> {
        let mut v = self.online.parts();
        v.insert(2, self.predictor.params());
        v.extend(self.local_predictor.as_ref().map(Head::params));
        v
    }

    pub fn online_parts_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        let mut v = self.online.parts_mut();
        v.insert(2, self.predictor.params_mut());
        v.extend(self.local_predictor.as_mut().map(Head::params_mut));
        v
    }

    pub fn target_parts(&self) -> Vec<&ParamStore<T>> {
        self.target.parts()
    }

    pub fn target_parts_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        self.target.parts_mut()
    }

    pub fn bind_online(&self, tape: &mut Tape<T>, trainable: bool) -> OnlineVars {
        OnlineVars { parts: self.online_parts().iter().map(|p| p.bind(tape, trainable)).collect() }
    }

    /// Target parameters enter the tape as constants.
    pub fn bind_target(&self, tape: &mut Tape<T>) -> TargetVars {
        TargetVars { parts: self.target_parts().iter().map(|p| p.bind(tape, false)).collect() }
    }

    /// Every online tensor in binding order.
    pub fn online_tensors(&self) -> Vec<Tensor<T>> {
        self.online_parts().iter().flat_map(|p| p.values().iter().cloned()).collect()
    }

    /// Regroup a flat slice of variables (as from `online_tensors`) by part.
    pub fn split_online(&self, flat: &[Var]) -> Result<OnlineVars> {
        let lens: Vec<usize> = self.online_parts().iter().map(|p| p.len()).collect();
        if flat.len() != lens.iter().sum::<usize>() {
            return Err(Error::invalid("flat variable list does not match the online parameters"));
        }
        let mut parts = Vec::new();
        let mut at = 0;
        for l in lens {
            parts.push(flat[at..at + l].to_vec());
            at += l;
        }
        Ok(OnlineVars { parts })
    }

    pub fn online_param_count(&self) -> usize {
        self.online_parts().iter().map(|p| p.count()).sum()
    }

    fn local_input(&self, tape: &mut Tape<T>, local: Var) -> Result<Var> {
        match self.local_cells {
            Some(cells) => downsample_local_grid(tape, local, cells),
            None => Ok(local),
        }
    }

    fn forward_view(
        &mut self,
        tape: &mut Tape<T>,
        online: &OnlineVars,
        target: &TargetVars,
        x: Var,
        compute_local: bool,
    ) -> Result<ViewForward> {
        let mode = BnMode::Train;
        let o = &online.parts;
        let t = &target.parts;
        let shared = self.local_predictor.is_none();

        let out = self.online.backbone.forward(tape, &o[0], x, ForwardOptions::train())?;
        let z_g = self.online.projector.forward(tape, &o[1], out.global, mode)?;
        let p_g = self.predictor.forward(tape, &o[2], z_g, mode)?;

        let tout = self.target.backbone.forward(tape, &t[0], x, ForwardOptions::train())?;
        let z_g_target = self.target.projector.forward(tape, &t[1], tout.global, mode)?;

        let (mut p_local, mut z_local_target) = (None, None);
        if compute_local {
            let l = self.local_input(tape, out.local)?;
            let tl = self.local_input(tape, tout.local)?;
            let (p, zt) = if shared {
                let z = self.online.projector.forward(tape, &o[1], l, mode)?;
                let p = self.predictor.forward(tape, &o[2], z, mode)?;
                let zt = self.target.projector.forward(tape, &t[1], tl, mode)?;
                (p, zt)
            } else {
                let lp = self.online.local_projector.as_mut().expect("separate local heads");
                let z = lp.forward(tape, &o[3], l, mode)?;
                let lq = self.local_predictor.as_mut().expect("separate local heads");
                let p = lq.forward(tape, &o[4], z, mode)?;
                let tp = self.target.local_projector.as_mut().expect("separate local heads");
                let zt = tp.forward(tape, &t[2], tl, mode)?;
                (p, zt)
            };
            p_local = Some(p);
            z_local_target = Some(zt);
        }
        Ok(ViewForward { online: out, target: tout, z_g, p_g, z_g_target, p_local, z_local_target })
    }

    /// Pass both views through both networks. The local heads run only when
    /// `compute_local` is set.
    pub fn forward_views(
        &mut self,
        tape: &mut Tape<T>,
        online: &OnlineVars,
        target: &TargetVars,
        v: Var,
        v_prime: Var,
        compute_local: bool,
    ) -> Result<[ViewForward; 2]> {
        let a = self.forward_view(tape, online, target, v, compute_local)?;
        let b = self.forward_view(tape, online, target, v_prime, compute_local)?;
        Ok([a, b])
    }

    /// Symmetric global loss plus `w_s` times the symmetric local loss. With
    /// `w_s = 0` and no local outputs, this is the plain BYOL objective.
    pub fn loss_total(&self, tape: &mut Tape<T>, views: &[ViewForward; 2]) -> Result<Losses> {
        let [a, b] = views;
        let g1 = loss_global(tape, a.p_g, b.z_g_target)?;
        let g2 = loss_global(tape, b.p_g, a.z_g_target)?;
        let global = tape.add(g1, g2)?;
        let local = match (a.p_local, a.z_local_target, b.p_local, b.z_local_target) {
            (Some(pa), Some(za), Some(pb), Some(zb)) => {
                let l1 = loss_local(tape, pa, a.p_g, zb, b.z_g_target)?;
                let l2 = loss_local(tape, pb, b.p_g, za, a.z_g_target)?;
                Some(tape.add(l1, l2)?)
            }
            _ => None,
        };
        let total = match local {
            Some(l) if self.w_s != 0.0 => {
                let weighted = tape.scale(l, T::of(self.w_s))?;
                tape.add(global, weighted)?
            }
            _ => global,
        };
        Ok(Losses { total, global, local })
    }

    /// `ξ ← tau·ξ + (1 − tau)·θ` over every target parameter.
    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        let online: Vec<ParamStore<T>> = self.online.parts().into_iter().cloned().collect();
        for (t, o) in self.target.parts_mut().into_iter().zip(&online) {
            ema_update(t, o, tau)?;
        }
        Ok(())
    }
}

/// `target ← tau·target + (1 − tau)·online` for congruent stores.
pub fn ema_update<T: Scalar>(target: &mut ParamStore<T>, online: &ParamStore<T>, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("tau must lie in [0, 1], got {tau}")));
    }
    target.check_congruent(online)?;
    let keep = T::of(tau);
    let take = T::of(1.0 - tau);
    for i in 0..target.len() {
        let updated = if tau == 1.0 {
            continue;
        } else if tau == 0.0 {
            online.values()[i].clone()
        } else {
            target.values()[i].zip_map(&online.values()[i], |t, o| keep * t + take * o)?
        };
        target.set(i, updated)?;
    }
    Ok(())
}
