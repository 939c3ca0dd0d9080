use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::data::{Dataset, DatasetSpec, Split};
use super::metrics::{finite, MetricsRecord, MetricsWriter, RunSummary};
use super::optim::{LrSchedule, Optimizer, OptimizerKind, TauSchedule};
use super::probe::{probe_accuracy, EvalLayer, ProbeHead};
use crate::cossl::{augment_batch, AugmentationPolicy, DualNetworkState, HeadConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rfnet::ArchConfig;
use crate::tensor::{Tape, Tensor};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub arch: ArchConfig,
    pub heads: HeadConfig,
    pub policy: AugmentationPolicy,
    pub w_s: f64,
    pub tau: f64,
    pub tau_schedule: TauSchedule,
    /// Cells the local grid is average-pooled to before the local heads.
    pub local_cells: Option<usize>,
    pub probe_lr: f64,
    pub eval_layer: EvalLayer,
    /// Save a checkpoint every this many epochs; 0 saves only the initial
    /// and final ones.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Tiny RF15 backbone on 32×32 synthetic data; trains in seconds.
    pub fn toy() -> Self {
        let arch = ArchConfig {
            blocks: [1, 1, 1, 1],
            strides: [2, 1, 2],
            width: 4,
            ..ArchConfig::rf_resnet18().with_small_image_stem()
        };
        TrainConfig {
            dataset: DatasetSpec::synthetic(320, 200, 7),
            epochs: 2,
            batch_size: 32,
            base_lr: 0.2,
            lr_schedule: LrSchedule::CosineWarmup,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            arch,
            heads: HeadConfig { hidden: 64, out: 32, projector_depth: 1, shared_local_heads: false },
            policy: AugmentationPolicy::desk_scale(),
            w_s: 0.2,
            tau: 0.99,
            tau_schedule: TauSchedule::CosineToOne,
            local_cells: Some(16),
            probe_lr: 0.1,
            eval_layer: EvalLayer::PostMlp,
            checkpoint_every: 0,
        }
    }

    /// Desk-scale CIFAR-style run with the same RF15 layout at full width.
    pub fn desk() -> Self {
        TrainConfig {
            dataset: DatasetSpec {
                format: super::data::DatasetFormat::Cifar,
                path: PathBuf::from("data/cifar-10-batches-bin"),
                synthetic_train: 0,
                synthetic_test: 0,
                synthetic_seed: 0,
            },
            epochs: 100,
            batch_size: 256,
            base_lr: 0.4,
            arch: ArchConfig { width: 64, ..Self::toy().arch },
            heads: HeadConfig::desk_scale(),
            local_cells: None,
            checkpoint_every: 10,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.heads.validate()?;
        self.policy.validate()?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "batch norm needs at least 2 images per batch"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", format!("must be a non-negative number, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(self.w_s >= 0.0) {
            return Err(Error::config("loss.w_s", format!("must be non-negative, got {}", self.w_s)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("loss.tau", format!("must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.probe_lr >= 0.0) {
            return Err(Error::config("probe.lr", "must be non-negative"));
        }
        if self.local_cells == Some(0) {
            return Err(Error::config("loss.local_cells", "must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    /// First eight digest bytes, as stored in checkpoint headers.
    pub fn hash(&self) -> u64 {
        u64::from_le_bytes(self.digest()[..8].try_into().unwrap())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }
}

/// Base names of the online stores in `DualNetworkState::online_parts` order.
fn online_names(net: &DualNetworkState<f32>) -> Vec<&'static str> {
    let mut v = vec!["online.backbone", "online.projector", "online.predictor"];
    if net.local_predictor.is_some() {
        v.extend(["online.local_projector", "online.local_predictor"]);
    }
    v
}

fn target_names(net: &DualNetworkState<f32>) -> Vec<&'static str> {
    let mut v = vec!["target.backbone", "target.projector"];
    if net.local_predictor.is_some() {
        v.push("target.local_projector");
    }
    v
}

/// Mutable training state: both networks, optimizer, probes and RNG.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub net: DualNetworkState<f32>,
    pub optimizer: Optimizer<f32>,
    /// Indexed by `EvalLayer::index`.
    pub probes: [ProbeHead; 2],
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig, classes: usize) -> Result<Self> {
        config.validate()?;
        if classes == 0 {
            return Err(Error::invalid("need at least one class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = DualNetworkState::new(
            &config.arch,
            &config.heads,
            3,
            config.tau,
            config.w_s,
            config.local_cells,
            &mut rng,
        )?;
        let optimizer = Optimizer::new(config.optimizer, config.momentum, config.weight_decay, &net.online_parts());
        let c = net.online.backbone.out_channels();
        Ok(TrainState {
            config: config.clone(),
            net,
            optimizer,
            probes: [ProbeHead::new(c, classes), ProbeHead::new(c, classes)],
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn classes(&self) -> usize {
        self.probes[0].classes()
    }

    /// One optimizer step on `images`, followed by the EMA update and one
    /// step of each probe on detached features of the first view.
    pub fn train_step(&mut self, images: &[Tensor<f32>], labels: &[usize], total_steps: usize) -> Result<MetricsRecord> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!("{} images but {} labels", images.len(), labels.len())));
        }
        let cfg = &self.config;
        let lr = cfg.lr_schedule.at(cfg.base_lr, self.step, total_steps);
        let tau = cfg.tau_schedule.at(cfg.tau, self.step, total_steps);
        let compute_local = cfg.w_s != 0.0;
        let (v, v_prime) = augment_batch(images, &cfg.policy, &mut self.rng)?;

        let mut tape = Tape::new();
        let online = self.net.bind_online(&mut tape, true);
        let target = self.net.bind_target(&mut tape);
        let x = tape.constant(v);
        let x_prime = tape.constant(v_prime);
        let views = self.net.forward_views(&mut tape, &online, &target, x, x_prime, compute_local)?;
        let losses = self.net.loss_total(&mut tape, &views)?;

        let mut record = MetricsRecord::empty(self.epoch, self.step + 1);
        record.loss_total = tape.value(losses.total)?.item() as f64;
        record.loss_g = tape.value(losses.global)?.item() as f64;
        if let Some(l) = losses.local {
            record.loss_l = tape.value(l)?.item() as f64;
        }
        record.lr = lr;
        record.tau = tau;
        if !record.loss_total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at epoch {} step {}: total {}, global {}, local {}, lr {lr}",
                record.epoch, record.step, record.loss_total, record.loss_g, record.loss_l
            )));
        }

        let grads = tape.backward(losses.total)?;
        let per_part: Vec<Vec<Option<Tensor<f32>>>> =
            online.parts.iter().map(|vars| vars.iter().map(|&v| grads.get(v).cloned()).collect()).collect();
        self.optimizer.step(&mut self.net.online_parts_mut(), &per_part, lr)?;
        self.net.ema_update(tau)?;

        let out = &views[0].online;
        for layer in EvalLayer::ALL {
            let var = match layer {
                EvalLayer::Patch => out.global_pooled,
                EvalLayer::PostMlp => out.global,
            };
            let feats = tape.value(var)?.clone();
            self.probes[layer.index()].step(&feats, labels, self.config.probe_lr)?;
        }
        self.step += 1;
        Ok(record)
    }

    /// Probe accuracy on `eval_set` for both layers, in `EvalLayer::ALL` order.
    pub fn evaluate(&mut self, eval_set: &Dataset) -> Result<[f64; 2]> {
        let size = self.config.policy.output_size;
        let mut acc = [0.0; 2];
        for layer in EvalLayer::ALL {
            acc[layer.index()] =
                probe_accuracy(&mut self.net.online.backbone, &self.probes[layer.index()], eval_set, layer, size)?;
        }
        Ok(acc)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.hash());
        let online = self.net.online_parts();
        for (store, name) in online.iter().zip(online_names(&self.net)) {
            push_store(&mut ck, name, store);
        }
        for (store, name) in self.net.target_parts().iter().zip(target_names(&self.net)) {
            push_store(&mut ck, name, store);
        }
        for ((store, vel), name) in online.iter().zip(self.optimizer.velocity()).zip(online_names(&self.net)) {
            for (pname, v) in store.names().iter().zip(vel) {
                ck.push_f32(format!("optim.{name}.{pname}"), v);
            }
        }
        for layer in EvalLayer::ALL {
            let p = &self.probes[layer.index()];
            ck.push_f32(format!("probe.{}.weight", layer.name()), &p.weight);
            ck.push_f32(format!("probe.{}.bias", layer.name()), &p.bias);
        }
        ck.push_u64s("progress", vec![self.epoch as u64, self.step as u64]);
        ck.push_u64s("rng", rng_words(&self.rng));
        ck
    }

    /// Rebuild a state for `config` and overwrite it from `ck`. Every entry
    /// must match the structure `config` implies.
    pub fn from_checkpoint(config: &TrainConfig, classes: usize, ck: &Checkpoint) -> Result<Self> {
        if ck.config_hash != config.hash() {
            warn!(
                "checkpoint config hash {:016x} differs from the current config {}",
                ck.config_hash,
                config.hash_hex()
            );
        }
        let mut state = TrainState::new(config, classes)?;
        let mut r = ck.reader();
        let online_names = online_names(&state.net);
        let target_names = target_names(&state.net);
        for (store, name) in state.net.online_parts_mut().into_iter().zip(&online_names) {
            read_store(&mut r, name, store)?;
        }
        for (store, name) in state.net.target_parts_mut().into_iter().zip(&target_names) {
            read_store(&mut r, name, store)?;
        }
        let shapes: Vec<Vec<(String, Vec<usize>)>> = state
            .net
            .online_parts()
            .iter()
            .map(|s| s.names().iter().cloned().zip(s.values().iter().map(|v| v.shape().to_vec())).collect())
            .collect();
        for (part, (entries, name)) in shapes.iter().zip(&online_names).enumerate() {
            for (i, (pname, shape)) in entries.iter().enumerate() {
                let v = r.f32(&format!("optim.{name}.{pname}"), shape)?;
                state.optimizer.set_velocity(part, i, v)?;
            }
        }
        for layer in EvalLayer::ALL {
            let p = &mut state.probes[layer.index()];
            p.weight = r.f32(&format!("probe.{}.weight", layer.name()), p.weight.shape())?;
            p.bias = r.f32(&format!("probe.{}.bias", layer.name()), p.bias.shape())?;
        }
        let progress = r.u64s("progress", 2)?;
        state.epoch = progress[0] as usize;
        state.step = progress[1] as usize;
        state.rng = rng_from_words(&r.u64s("rng", 7)?);
        r.finish()?;
        Ok(state)
    }
}

fn push_store(ck: &mut Checkpoint, prefix: &str, store: &ParamStore<f32>) {
    for (name, v) in store.names().iter().zip(store.values()) {
        ck.push_f32(format!("{prefix}.{name}"), v);
    }
    for (name, s) in store.stat_names().iter().zip(store.stats()) {
        let c = s.channels();
        ck.push_f32(format!("{prefix}.{name}.running_mean"), &Tensor::from_fn(&[c], |i| s.mean[i]));
        ck.push_f32(format!("{prefix}.{name}.running_var"), &Tensor::from_fn(&[c], |i| s.var[i]));
        ck.push_u64s(format!("{prefix}.{name}.initialized"), vec![s.initialized as u64]);
    }
}

fn read_store(r: &mut super::checkpoint::EntryReader<'_>, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
    for i in 0..store.len() {
        let name = format!("{prefix}.{}", store.names()[i]);
        let t = r.f32(&name, store.values()[i].shape())?;
        store.set(i, t)?;
    }
    let names: Vec<String> = store.stat_names().to_vec();
    for (name, s) in names.iter().zip(store.stats_mut()) {
        let c = s.channels();
        s.mean = r.f32(&format!("{prefix}.{name}.running_mean"), &[c])?.to_vec();
        s.var = r.f32(&format!("{prefix}.{name}.running_var"), &[c])?.to_vec();
        s.initialized = r.u64s(&format!("{prefix}.{name}.initialized"), 1)?[0] != 0;
    }
    Ok(())
}

/// Seed (four words), stream and 128-bit word position.
fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut words: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    words.push(rng.get_stream());
    let pos = rng.get_word_pos();
    words.push(pos as u64);
    words.push((pos >> 64) as u64);
    words
}

fn rng_from_words(words: &[u64]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(words[4]);
    rng.set_word_pos(words[5] as u128 | (words[6] as u128) << 64);
    rng
}

/// Result of `fit`.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: TrainState,
    /// Per-step rows followed, at each epoch end, by a row with the probe
    /// accuracy and the epoch-mean losses.
    pub history: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

/// Optional run directory for metrics, checkpoints and the summary.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out_dir: Option<PathBuf>,
    /// Stop after this many epochs in total, as if interrupted.
    pub stop_after: Option<usize>,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt-{epoch:04}.bin"))
}

/// Load both splits, then train from scratch.
pub fn fit(config: &TrainConfig, opts: &FitOptions) -> Result<FitOutcome> {
    config.validate()?;
    let (train, test) = load_splits(config)?;
    let state = TrainState::new(config, train.classes)?;
    fit_state(state, &train, &test, opts)
}

/// Resume from a checkpoint written by a run with `config`.
pub fn resume(config: &TrainConfig, checkpoint: &Path, opts: &FitOptions) -> Result<FitOutcome> {
    config.validate()?;
    let (train, test) = load_splits(config)?;
    let ck = Checkpoint::load(checkpoint)?;
    let state = TrainState::from_checkpoint(config, train.classes, &ck)?;
    fit_state(state, &train, &test, opts)
}

pub fn load_splits(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let train = config.dataset.load(Split::Train)?;
    let test = config.dataset.load(Split::Test)?;
    if train.len() < config.batch_size {
        return Err(Error::Data(format!(
            "training set has {} images, fewer than one batch of {}",
            train.len(),
            config.batch_size
        )));
    }
    if test.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    if test.classes != train.classes {
        return Err(Error::Data(format!("train has {} classes, test has {}", train.classes, test.classes)));
    }
    Ok((train, test))
}

/// Run the remaining epochs of `state` on `train`, evaluating on `test`
/// after each one.
pub fn fit_state(mut state: TrainState, train: &Dataset, test: &Dataset, opts: &FitOptions) -> Result<FitOutcome> {
    let cfg = state.config.clone();
    let steps_per_epoch = train.len() / cfg.batch_size;
    let total_steps = steps_per_epoch * cfg.epochs;
    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut writer = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(MetricsWriter::append(&dir.join("metrics.csv"))?)
        }
        None => None,
    };
    let save = |state: &TrainState| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            state.to_checkpoint().save(&checkpoint_path(dir, state.epoch))?;
        }
        Ok(())
    };
    if state.epoch == 0 {
        save(&state)?;
    }

    let mut history = Vec::new();
    let mut acc_history = Vec::new();
    let mut last_acc = [f64::NAN; 2];
    while state.epoch < end {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        let mut sums = [0.0f64; 3];
        for batch in order.chunks_exact(cfg.batch_size) {
            let images: Vec<Tensor<f32>> = batch.iter().map(|&i| train.images[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let rec = state.train_step(&images, &labels, total_steps)?;
            sums[0] += rec.loss_total;
            sums[1] += rec.loss_g;
            sums[2] += rec.loss_l;
            if let Some(w) = writer.as_mut() {
                w.write(&rec)?;
            }
            history.push(rec);
        }
        state.epoch += 1;
        last_acc = state.evaluate(test)?;
        let n = steps_per_epoch.max(1) as f64;
        let last = history.last().copied().unwrap_or_else(|| MetricsRecord::empty(state.epoch, state.step));
        let row = MetricsRecord {
            epoch: state.epoch,
            step: state.step,
            loss_total: sums[0] / n,
            loss_g: sums[1] / n,
            loss_l: sums[2] / n,
            probe_acc: last_acc[cfg.eval_layer.index()],
            lr: last.lr,
            tau: last.tau,
        };
        info!(
            "epoch {} step {} loss {:.4} probe patch {:.4} post_mlp {:.4}",
            state.epoch, state.step, row.loss_total, last_acc[0], last_acc[1]
        );
        acc_history.push(row.probe_acc);
        if let Some(w) = writer.as_mut() {
            w.write(&row)?;
        }
        history.push(row);
        let periodic = cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(cfg.checkpoint_every);
        if periodic || state.epoch == end {
            save(&state)?;
        }
    }

    let final_step = history.iter().rev().find(|r| r.probe_acc.is_nan()).copied();
    let summary = RunSummary {
        config_hash: cfg.hash_hex(),
        seed: cfg.seed,
        epochs: state.epoch,
        steps: state.step,
        final_loss_total: final_step.and_then(|r| finite(r.loss_total)),
        final_loss_g: final_step.and_then(|r| finite(r.loss_g)),
        final_loss_g_byol: final_step.and_then(|r| finite(r.loss_g_byol())),
        final_loss_l: final_step.and_then(|r| finite(r.loss_l)),
        probe_acc_patch: finite(last_acc[EvalLayer::Patch.index()]),
        probe_acc_post_mlp: finite(last_acc[EvalLayer::PostMlp.index()]),
        probe_acc_history: acc_history,
    };
    if let Some(dir) = &opts.out_dir {
        summary.write(&dir.join("summary.json"))?;
    }
    Ok(FitOutcome { state, history, summary })
}
