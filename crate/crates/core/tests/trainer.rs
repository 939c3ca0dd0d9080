use std::fs;
use std::path::Path;

use cooc_core::cossl::{augment_batch, loss_global, HeadConfig};
use cooc_core::rfnet::ForwardOptions;
use cooc_core::tensor::{BnMode, Tape, Tensor};
use cooc_core::trainer::*;
use cooc_core::Error;

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.arch.width = 2;
    cfg.heads = HeadConfig { hidden: 16, out: 8, projector_depth: 1, shared_local_heads: false };
    cfg.dataset = DatasetSpec::synthetic(64, 40, 11);
    cfg.batch_size = 16;
    cfg.epochs = 2;
    cfg
}

fn batch(n: usize, seed: u64) -> Dataset {
    synthetic_dataset(n, seed)
}

fn assert_bits_eq(a: &[Tensor<f32>], b: &[Tensor<f32>]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

fn tensors(store: &cooc_core::nn::ParamStore<f32>) -> Vec<Tensor<f32>> {
    store.values().to_vec()
}

/// Plain BYOL step built by hand: symmetric global loss, momentum SGD from
/// zero velocity and an EMA target update.
#[test]
fn zero_weight_step_is_a_byol_step() {
    let mut cfg = tiny();
    cfg.w_s = 0.0;
    cfg.weight_decay = 0.0;
    let data = batch(16, 1);
    let mut state = TrainState::new(&cfg, 10).unwrap();
    let mut manual = state.clone();
    let total = 10;
    state.train_step(&data.images, &data.labels, total).unwrap();

    let lr = cfg.lr_schedule.at(cfg.base_lr, 0, total);
    let tau = cfg.tau_schedule.at(cfg.tau, 0, total);
    let (v, v2) = augment_batch(&data.images, &cfg.policy, &mut manual.rng).unwrap();
    let mut tape = Tape::new();
    let net = &mut manual.net;
    let online = net.bind_online(&mut tape, true);
    let target = net.bind_target(&mut tape);
    let x = [tape.constant(v), tape.constant(v2)];
    let mut p = Vec::new();
    let mut zt = Vec::new();
    for &xi in &x {
        let o = net.online.backbone.forward(&mut tape, &online.parts[0], xi, ForwardOptions::train()).unwrap();
        let z = net.online.projector.forward(&mut tape, &online.parts[1], o.global, BnMode::Train).unwrap();
        p.push(net.predictor.forward(&mut tape, &online.parts[2], z, BnMode::Train).unwrap());
        let t = net.target.backbone.forward(&mut tape, &target.parts[0], xi, ForwardOptions::train()).unwrap();
        zt.push(net.target.projector.forward(&mut tape, &target.parts[1], t.global, BnMode::Train).unwrap());
    }
    let g1 = loss_global(&mut tape, p[0], zt[1]).unwrap();
    let g2 = loss_global(&mut tape, p[1], zt[0]).unwrap();
    let loss = tape.add(g1, g2).unwrap();
    let grads = tape.backward(loss).unwrap();
    let lr32 = lr as f32;
    for (store, vars) in net.online_parts_mut().into_iter().zip(&online.parts) {
        for (i, &var) in vars.iter().enumerate() {
            if let Some(g) = grads.get(var) {
                let w = store.values()[i].zip_map(g, |w, g| w - lr32 * g).unwrap();
                store.set(i, w).unwrap();
            }
        }
    }
    net.ema_update(tau).unwrap();

    let a: Vec<Tensor<f32>> = state.net.online_parts().into_iter().flat_map(tensors).collect();
    let b: Vec<Tensor<f32>> = manual.net.online_parts().into_iter().flat_map(tensors).collect();
    assert_bits_eq(&a, &b);
    let a: Vec<Tensor<f32>> = state.net.target_parts().into_iter().flat_map(tensors).collect();
    let b: Vec<Tensor<f32>> = manual.net.target_parts().into_iter().flat_map(tensors).collect();
    assert_bits_eq(&a, &b);
}

#[test]
fn zero_lr_freezes_backbone_but_not_probe() {
    let mut cfg = tiny();
    cfg.base_lr = 0.0;
    let data = batch(32, 2);
    let mut state = TrainState::new(&cfg, 10).unwrap();
    let before = tensors(state.net.online.backbone.params());
    let probe_before = state.probes.clone();
    for k in 0..3 {
        let chunk = k * 8..k * 8 + 16;
        state.train_step(&data.images[chunk.clone()], &data.labels[chunk], 10).unwrap();
    }
    assert_bits_eq(&before, &tensors(state.net.online.backbone.params()));
    assert_ne!(state.probes, probe_before);
}

#[test]
fn probe_steps_never_touch_the_backbone() {
    let mut cfg = tiny();
    cfg.base_lr = 0.0;
    cfg.epochs = 3;
    let init = TrainState::new(&cfg, 10).unwrap();
    let out = fit(&cfg, &FitOptions::default()).unwrap();
    assert_bits_eq(&tensors(init.net.online.backbone.params()), &tensors(out.state.net.online.backbone.params()));
    assert_ne!(out.state.probes, init.probes);
}

#[test]
fn same_seed_same_run() {
    let cfg = tiny();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<FitOutcome> = dirs
        .iter()
        .map(|d| fit(&cfg, &FitOptions { out_dir: Some(d.path().to_path_buf()), stop_after: None }).unwrap())
        .collect();
    assert_eq!(runs[0].history.len(), runs[1].history.len());
    assert!(runs[0].history.iter().zip(&runs[1].history).all(|(a, b)| a.same_bits(b)));
    assert_eq!(runs[0].state, runs[1].state);
    for file in ["metrics.csv", "summary.json", "ckpt-0000.bin", "ckpt-0002.bin"] {
        let a = fs::read(dirs[0].path().join(file)).unwrap();
        let b = fs::read(dirs[1].path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }

    let mut other = cfg.clone();
    other.seed = 1;
    let c = fit(&other, &FitOptions::default()).unwrap();
    assert!(!c.history[0].same_bits(&runs[0].history[0]));
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let mut cfg = tiny();
    cfg.epochs = 0;
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&cfg, &FitOptions { out_dir: Some(dir.path().to_path_buf()), stop_after: None }).unwrap();
    assert!(out.history.is_empty());
    let init = TrainState::new(&cfg, 10).unwrap();
    let ck = Checkpoint::load(&checkpoint_path(dir.path(), 0)).unwrap();
    assert_eq!(ck.encode(), init.to_checkpoint().encode());
    assert_eq!(TrainState::from_checkpoint(&cfg, 10, &ck).unwrap(), init);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut cfg = tiny();
    cfg.epochs = 3;
    let full = fit(&cfg, &FitOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = FitOptions { out_dir: Some(dir.path().join("a")), stop_after: Some(1) };
    let part = fit(&cfg, &first).unwrap();
    assert_eq!(part.state.epoch, 1);
    let ckpt = checkpoint_path(&dir.path().join("a"), 1);
    let rest = resume(&cfg, &ckpt, &FitOptions { out_dir: Some(dir.path().join("b")), stop_after: None }).unwrap();

    assert_eq!(rest.state, full.state);
    let joined: Vec<MetricsRecord> = part.history.iter().chain(&rest.history).copied().collect();
    assert_eq!(joined.len(), full.history.len());
    assert!(joined.iter().zip(&full.history).all(|(a, b)| a.same_bits(b)));
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let cfg = tiny();
    let data = batch(16, 3);
    let mut state = TrainState::new(&cfg, 10).unwrap();
    state.train_step(&data.images, &data.labels, 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.bin");
    state.to_checkpoint().save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let loaded = TrainState::from_checkpoint(&cfg, 10, &Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(loaded, state);
    assert_eq!(loaded.to_checkpoint().encode(), bytes);

    let mut wider = cfg.clone();
    wider.arch.width = 3;
    let err = TrainState::from_checkpoint(&wider, 10, &Checkpoint::load(&path).unwrap()).unwrap_err();
    assert!(err.to_string().contains("`online.backbone.stem.conv"), "{err}");

    let cut = dir.path().join("cut.bin");
    fs::write(&cut, &bytes[..bytes.len() * 2 / 3]).unwrap();
    assert!(matches!(Checkpoint::load(&cut), Err(Error::Checkpoint(_))));
}

#[test]
fn checkpoint_with_other_hash_still_loads() {
    let cfg = tiny();
    let state = TrainState::new(&cfg, 10).unwrap();
    let mut ck = state.to_checkpoint();
    ck.config_hash ^= 1;
    assert_eq!(TrainState::from_checkpoint(&cfg, 10, &ck).unwrap(), state);
}

#[test]
fn constant_probe_scores_chance_on_balanced_set() {
    let mut probe = ProbeHead::new(4, 10);
    probe.bias = Tensor::from_fn(&[10], |k| if k == 0 { 1.0 } else { 0.0 });
    let feats = Tensor::<f32>::randn(&[50, 4], 0.0, &mut rand::rng());
    let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
    assert_eq!(accuracy_of(&probe, &feats, &labels).unwrap(), 0.1);
}

#[test]
fn separable_features_reach_full_accuracy() {
    let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
    let feats = Tensor::from_fn(&[40, 10], |k| if k % 10 == labels[k / 10] { 1.0 } else { 0.0 });
    let mut probe = ProbeHead::new(10, 10);
    for _ in 0..200 {
        probe.step(&feats, &labels, 1.0).unwrap();
    }
    assert_eq!(accuracy_of(&probe, &feats, &labels).unwrap(), 1.0);
}

#[test]
fn probe_class_count_must_match() {
    let cfg = tiny();
    let mut state = TrainState::new(&cfg, 10).unwrap();
    let data = batch(16, 4);
    state.train_step(&data.images, &data.labels, 10).unwrap();
    let probe = ProbeHead::new(state.net.online.backbone.out_channels(), 7);
    let err = probe_accuracy(&mut state.net.online.backbone, &probe, &data, EvalLayer::Patch, 32).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn both_layers_are_reported_and_differ() {
    let out = fit(&tiny(), &FitOptions::default()).unwrap();
    assert!(out.summary.probe_acc_patch.is_some() && out.summary.probe_acc_post_mlp.is_some());
    let mut state = out.state;
    let data = batch(20, 5);
    let bb = &mut state.net.online.backbone;
    let a = extract_features(bb, &data.images, EvalLayer::Patch, 32, 8).unwrap();
    let b = extract_features(bb, &data.images, EvalLayer::PostMlp, 32, 8).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 1e-3);
}

fn write_cifar_dir(dir: &Path, train: &Dataset, test: &Dataset) {
    write_cifar_binary(&dir.join("data_batch_1.bin"), train).unwrap();
    write_cifar_binary(&dir.join("test_batch.bin"), test).unwrap();
}

#[test]
fn smoothed_loss_decreases_on_cifar_subset() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar_dir(dir.path(), &synthetic_dataset(800, 21), &synthetic_dataset(100, 22));
    let mut cfg = TrainConfig::toy();
    cfg.dataset = DatasetSpec { format: DatasetFormat::Cifar, path: dir.path().to_path_buf(), ..cfg.dataset };
    cfg.epochs = 5;
    cfg.batch_size = 16;
    let out = fit(&cfg, &FitOptions::default()).unwrap();
    let losses: Vec<f64> = out.history.iter().filter(|r| r.probe_acc.is_nan()).map(|r| r.loss_total).collect();
    assert_eq!(losses.len(), 250);
    let windows: Vec<f64> = losses.chunks(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
}

#[test]
fn bad_dataset_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar_dir(dir.path(), &synthetic_dataset(40, 1), &synthetic_dataset(10, 2));
    let p = dir.path().join("data_batch_2.bin");
    fs::write(&p, vec![0u8; 100]).unwrap();
    let mut cfg = tiny();
    cfg.dataset = DatasetSpec { format: DatasetFormat::Cifar, path: dir.path().to_path_buf(), ..cfg.dataset };
    let out = dir.path().join("run");
    let err = fit(&cfg, &FitOptions { out_dir: Some(out.clone()), stop_after: None }).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    assert!(!out.exists());
}

#[test]
fn diverging_run_reports_non_finite_loss() {
    let mut cfg = tiny();
    cfg.base_lr = 1e30;
    cfg.lr_schedule = LrSchedule::Constant;
    let err = fit(&cfg, &FitOptions::default()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn image_folder_ingestion_with_cached_index() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(20, 9);
    for split in ["train", "test"] {
        for (i, (img, &y)) in data.images.iter().zip(&data.labels).enumerate() {
            let class_dir = dir.path().join(split).join(format!("c{y}"));
            fs::create_dir_all(&class_dir).unwrap();
            write_ppm(&class_dir.join(format!("{i}.ppm")), img).unwrap();
        }
    }
    let spec = DatasetSpec { format: DatasetFormat::ImageFolder, path: dir.path().to_path_buf(), ..DatasetSpec::synthetic(0, 0, 0) };
    let train = spec.load(Split::Train).unwrap();
    assert_eq!(train.len(), 20);
    assert_eq!(train.classes, 10);
    assert!(dir.path().join("train").join(".cooc-index.json").exists());
    assert_eq!(spec.load(Split::Train).unwrap(), train);
}

#[test]
fn lars_and_sgd_both_train() {
    for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Lars] {
        let mut cfg = tiny();
        cfg.optimizer = kind;
        cfg.epochs = 1;
        let out = fit(&cfg, &FitOptions::default()).unwrap();
        assert!(out.history.iter().all(|r| r.loss_total.is_finite()));
    }
}
