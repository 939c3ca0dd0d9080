use cooc_core::cossl::*;
use cooc_core::rfnet::{ArchConfig, BackboneOutput};
use cooc_core::tensor::{gradient_check, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_arch() -> ArchConfig {
    ArchConfig { width: 2, blocks: [1, 1, 1, 1], strides: [2, 2, 1], ..ArchConfig::rf_resnet18().with_small_image_stem() }
}

fn toy_heads() -> HeadConfig {
    HeadConfig { hidden: 16, out: 4, projector_depth: 1, shared_local_heads: false }
}

fn toy_state(w_s: f64, seed: u64) -> DualNetworkState<f64> {
    DualNetworkState::new(&toy_arch(), &toy_heads(), 3, 0.99, w_s, None, &mut rng(seed)).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / ((na + 1e-8) * (nb + 1e-8))
}

/// Row `cell` of image `i` from an N×D×n×n grid.
fn cell(grid: &Tensor<f64>, i: usize, cell: usize) -> Vec<f64> {
    let (d, hw) = (grid.shape()[1], grid.shape()[2] * grid.shape()[3]);
    (0..d).map(|k| grid.data()[(i * d + k) * hw + cell]).collect()
}

fn row(t: &Tensor<f64>, i: usize) -> Vec<f64> {
    let d = t.shape()[1];
    t.data()[i * d..(i + 1) * d].to_vec()
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f64> {
    let t = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng(seed));
    let mut v = t.to_vec();
    for r in v.chunks_mut(d) {
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= norm);
    }
    Tensor::new(&[n, d], v).unwrap()
}

/// N×D×n×n grid whose every cell equals the matching row of `rows`.
fn broadcast_grid(rows: &Tensor<f64>, side: usize) -> Tensor<f64> {
    let (n, d) = (rows.shape()[0], rows.shape()[1]);
    Tensor::from_fn(&[n, d, side, side], |i| rows.data()[i / (side * side)])
}

fn value(tape: &mut Tape<f64>, t: Tensor<f64>) -> Var {
    tape.constant(t)
}

#[test]
fn global_loss_examples() {
    let mut tape = Tape::new();
    let p = unit_rows(5, 7, 1);
    let pv = value(&mut tape, p.clone());
    let zv = value(&mut tape, p);
    let l = loss_global(&mut tape, pv, zv).unwrap();
    assert!((tape.value(l).unwrap().item() + 2.0).abs() < 1e-6);

    let a = value(&mut tape, Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
    let b = value(&mut tape, Tensor::new(&[1, 2], vec![0.0, 3.0]).unwrap());
    let l = loss_global(&mut tape, a, b).unwrap();
    assert!(tape.value(l).unwrap().item().abs() < 1e-12);
}

#[test]
fn global_loss_matches_row_oracle() {
    let p = Tensor::<f64>::randn(&[6, 5], 1.0, &mut rng(2));
    let z = Tensor::<f64>::randn(&[6, 5], 1.0, &mut rng(3));
    let oracle = -2.0 * (0..6).map(|i| cos(&row(&p, i), &row(&z, i))).sum::<f64>() / 6.0;
    let mut tape = Tape::new();
    let (pv, zv) = (value(&mut tape, p), value(&mut tape, z));
    let l = loss_global(&mut tape, pv, zv).unwrap();
    assert!((tape.value(l).unwrap().item() - oracle).abs() < 1e-6);
}

#[test]
fn local_loss_perfect_alignment() {
    let zg = unit_rows(3, 4, 5);
    let pg = unit_rows(3, 4, 6);
    let mut tape = Tape::new();
    let p_local = value(&mut tape, broadcast_grid(&zg, 2));
    let z_local = value(&mut tape, broadcast_grid(&pg, 2));
    let (pgv, zgv) = (value(&mut tape, pg), value(&mut tape, zg));
    let l = loss_local(&mut tape, p_local, pgv, z_local, zgv).unwrap();
    assert!((tape.value(l).unwrap().item() + 4.0).abs() < 1e-6);
}

#[test]
fn local_loss_single_cell_reduces_to_global_terms() {
    let p1 = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng(7));
    let pg = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng(8));
    let z1 = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng(9));
    let zg = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng(10));
    let mut tape = Tape::new();
    let p_local = value(&mut tape, p1.reshape(&[4, 3, 1, 1]).unwrap());
    let z_local = value(&mut tape, z1.reshape(&[4, 3, 1, 1]).unwrap());
    let (pgv, zgv) = (value(&mut tape, pg.clone()), value(&mut tape, zg.clone()));
    let l = loss_local(&mut tape, p_local, pgv, z_local, zgv).unwrap();
    let (p1v, z1v) = (value(&mut tape, p1), value(&mut tape, z1));
    let a = loss_global(&mut tape, p1v, zgv).unwrap();
    let b = loss_global(&mut tape, pgv, z1v).unwrap();
    let expected = tape.value(a).unwrap().item() + tape.value(b).unwrap().item();
    assert!((tape.value(l).unwrap().item() - expected).abs() < 1e-6);
}

#[test]
fn local_loss_matches_cell_enumeration() {
    let (n, d) = (3, 5);
    let p_local = Tensor::<f64>::randn(&[n, d, 2, 2], 1.0, &mut rng(11));
    let z_local = Tensor::<f64>::randn(&[n, d, 2, 2], 1.0, &mut rng(12));
    let pg = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng(13));
    let zg = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng(14));
    let mut oracle = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for c in 0..4 {
            s += cos(&cell(&p_local, i, c), &row(&zg, i)) + cos(&row(&pg, i), &cell(&z_local, i, c));
        }
        oracle += -2.0 / 4.0 * s;
    }
    oracle /= n as f64;
    let mut tape = Tape::new();
    let vars = [p_local, pg, z_local, zg].map(|t| value(&mut tape, t));
    let l = loss_local(&mut tape, vars[0], vars[1], vars[2], vars[3]).unwrap();
    assert!((tape.value(l).unwrap().item() - oracle).abs() < 1e-6);
}

#[test]
fn local_loss_rejects_mismatched_grids() {
    let mut tape = Tape::new();
    let a = value(&mut tape, Tensor::ones(&[1, 2, 2, 2]));
    let b = value(&mut tape, Tensor::ones(&[1, 2, 4, 4]));
    let g = value(&mut tape, Tensor::ones(&[1, 2]));
    assert!(loss_local(&mut tape, a, g, b, g).is_err());
}

fn permute_cells(grid: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let hw = perm.len();
    Tensor::from_fn(grid.shape(), |i| grid.data()[i - i % hw + perm[i % hw]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn local_loss_is_permutation_invariant(seed in any::<u64>(), side in 1usize..4, n in 1usize..4) {
        let d = 3;
        let p_local = Tensor::<f64>::randn(&[n, d, side, side], 1.0, &mut rng(seed));
        let z_local = Tensor::<f64>::randn(&[n, d, side, side], 1.0, &mut rng(seed ^ 1));
        let pg = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng(seed ^ 2));
        let zg = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng(seed ^ 3));
        let mut perm: Vec<usize> = (0..side * side).collect();
        perm.shuffle(&mut rng(seed ^ 4));
        let eval = |pl: Tensor<f64>, zl: Tensor<f64>| {
            let mut tape = Tape::new();
            let v = [pl, pg.clone(), zl, zg.clone()].map(|t| tape.constant(t));
            let l = loss_local(&mut tape, v[0], v[1], v[2], v[3]).unwrap();
            let out = tape.value(l).unwrap().item();
            out
        };
        let base = eval(p_local.clone(), z_local.clone());
        let shuffled = eval(permute_cells(&p_local, &perm), permute_cells(&z_local, &perm));
        prop_assert!((base - shuffled).abs() < 1e-6);
        prop_assert!((-4.0 - 1e-9..=4.0 + 1e-9).contains(&base));
    }
}

/// ViewForward built from constant embeddings; only the loss fields matter.
fn fixed_view(tape: &mut Tape<f64>, p_g: Tensor<f64>, z_g_target: Tensor<f64>, p_local: Tensor<f64>, z_local: Tensor<f64>) -> ViewForward {
    let dummy = tape.constant(Tensor::zeros(&[1]));
    let out = BackboneOutput { local: dummy, global_pooled: dummy, global: dummy };
    let p_g = tape.constant(p_g);
    ViewForward {
        online: out,
        target: out,
        z_g: p_g,
        p_g,
        z_g_target: tape.constant(z_g_target),
        p_local: Some(tape.constant(p_local)),
        z_local_target: Some(tape.constant(z_local)),
    }
}

#[test]
fn total_loss_perfect_alignment_minimum() {
    let u = unit_rows(2, 4, 20);
    let mut tape = Tape::new();
    let grid = broadcast_grid(&u, 2);
    let a = fixed_view(&mut tape, u.clone(), u.clone(), grid.clone(), grid.clone());
    let b = fixed_view(&mut tape, u.clone(), u, grid.clone(), grid);
    let mut state = toy_state(0.5, 0);
    let l = state.loss_total(&mut tape, &[a, b]).unwrap();
    assert!((tape.value(l.total).unwrap().item() + 8.0).abs() < 1e-6);
    state.w_s = 0.0;
    let l = state.loss_total(&mut tape, &[a, b]).unwrap();
    assert!((tape.value(l.total).unwrap().item() + 4.0).abs() < 1e-6);
}

fn views(seed: u64, n: usize) -> (Tensor<f64>, Tensor<f64>) {
    (Tensor::uniform(&[n, 3, 8, 8], 0.0, 1.0, &mut rng(seed)), Tensor::uniform(&[n, 3, 8, 8], 0.0, 1.0, &mut rng(seed + 1)))
}

#[test]
fn total_loss_gradient_check() {
    let mut state = toy_state(0.5, 1);
    let (v, v2) = views(30, 8);
    let inputs = state.online_tensors();
    let target_values: Vec<Vec<Tensor<f64>>> = state.target_parts().iter().map(|p| p.values().to_vec()).collect();
    let report = gradient_check(
        |tape, vars| {
            let online = state.split_online(vars)?;
            let target = TargetVars {
                parts: target_values.iter().map(|p| p.iter().map(|t| tape.constant(t.clone())).collect()).collect(),
            };
            let x = tape.constant(v.clone());
            let x2 = tape.constant(v2.clone());
            let fw = state.forward_views(tape, &online, &target, x, x2, true)?;
            Ok(state.loss_total(tape, &fw)?.total)
        },
        &inputs,
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.coords_checked > 500);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn target_receives_no_gradient() {
    let mut state = toy_state(0.5, 2);
    let (v, v2) = views(31, 3);
    let mut tape = Tape::new();
    let online = state.bind_online(&mut tape, true);
    let target = TargetVars { parts: state.target_parts().iter().map(|p| p.bind(&mut tape, true)).collect() };
    let x = tape.constant(v);
    let x2 = tape.constant(v2);
    let fw = state.forward_views(&mut tape, &online, &target, x, x2, true).unwrap();
    let loss = state.loss_total(&mut tape, &fw).unwrap();
    let grads = tape.backward(loss.total).unwrap();
    for var in target.parts.iter().flatten() {
        if let Some(g) = grads.get(*var) {
            assert!(g.data().iter().all(|&x| x == 0.0));
        }
    }
    let moved = online.parts.iter().flatten().filter(|v| grads.get(**v).is_some_and(|g| g.max_abs() > 0.0)).count();
    assert!(moved > 0);
}

#[test]
fn zero_weight_matches_byol_path() {
    let run = |compute_local: bool| {
        let mut state = toy_state(0.0, 3);
        let (v, v2) = views(32, 3);
        let mut tape = Tape::new();
        let online = state.bind_online(&mut tape, true);
        let target = state.bind_target(&mut tape);
        let x = tape.constant(v);
        let x2 = tape.constant(v2);
        let fw = state.forward_views(&mut tape, &online, &target, x, x2, compute_local).unwrap();
        let loss = state.loss_total(&mut tape, &fw).unwrap();
        let grads = tape.backward(loss.total).unwrap();
        let value = tape.value(loss.total).unwrap().item();
        let g: Vec<Vec<f64>> = online.parts[..3].iter().flatten().map(|v| grads.get(*v).unwrap().to_vec()).collect();
        (value.to_bits(), g.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn identical_views_and_weights_give_identical_grids() {
    let mut state = toy_state(0.5, 4);
    let (v, _) = views(33, 2);
    let mut tape = Tape::new();
    let online = state.bind_online(&mut tape, true);
    let target = state.bind_target(&mut tape);
    let x = tape.constant(v);
    let fw = state.forward_views(&mut tape, &online, &target, x, x, false).unwrap();
    for view in &fw {
        assert_eq!(tape.value(view.online.local).unwrap(), tape.value(view.target.local).unwrap());
    }
}

#[test]
fn ema_fixed_points_and_decay() {
    let mut state = toy_state(0.5, 5);
    let online = state.online_parts()[0].clone();
    let mut target = online.clone();
    for i in 0..target.len() {
        let shifted = target.values()[i].map(|x| x + 1.0);
        target.set(i, shifted).unwrap();
    }
    let before = target.clone();
    ema_update(&mut target, &online, 1.0).unwrap();
    assert_eq!(target, before);

    let dist = |a: &cooc_core::nn::ParamStore<f64>, b: &cooc_core::nn::ParamStore<f64>| {
        a.values().iter().zip(b.values()).map(|(x, y)| x.zip_map(y, |p, q| (p - q) * (p - q)).unwrap().sum()).sum::<f64>().sqrt()
    };
    let mut prev = dist(&target, &online);
    for _ in 0..5 {
        ema_update(&mut target, &online, 0.99).unwrap();
        let now = dist(&target, &online);
        assert!((now / prev - 0.99).abs() < 1e-9);
        prev = now;
    }
    ema_update(&mut target, &online, 0.0).unwrap();
    assert_eq!(target.values(), online.values());

    let other = state.online_parts()[1].clone();
    assert!(ema_update(&mut target, &other, 0.5).is_err());
    assert!(ema_update(&mut target, &online, 1.5).is_err());

    let shape = state.online.backbone.params().values()[0].shape().to_vec();
    state.online.backbone.params_mut().set(0, Tensor::zeros(&shape)).unwrap();
    state.ema_update(0.0).unwrap();
    assert_eq!(state.target.backbone.params().values()[0].max_abs(), 0.0);
}

#[test]
fn downsample_examples() {
    let grid = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut rng(40));
    let mut tape = Tape::new();
    let g = tape.constant(grid.clone());
    assert_eq!(downsample_local_grid(&mut tape, g, 16).unwrap(), g);
    let d = downsample_local_grid(&mut tape, g, 4).unwrap();
    let out = tape.value(d).unwrap().clone();
    assert_eq!(out.shape(), &[2, 3, 2, 2]);
    for i in 0..2 {
        for c in 0..3 {
            for qy in 0..2 {
                for qx in 0..2 {
                    let mut s = 0.0;
                    for y in 0..2 {
                        for x in 0..2 {
                            s += grid.get(&[i, c, 2 * qy + y, 2 * qx + x]);
                        }
                    }
                    assert!((out.get(&[i, c, qy, qx]) - s / 4.0).abs() < 1e-7);
                }
            }
        }
    }
    let constant = tape.constant(Tensor::full(&[1, 2, 4, 4], 0.7));
    for cells in [1, 4, 16] {
        let d = downsample_local_grid(&mut tape, constant, cells).unwrap();
        assert!(tape.value(d).unwrap().data().iter().all(|&x| (x - 0.7).abs() < 1e-12));
    }
    assert!(downsample_local_grid(&mut tape, g, 9).is_err());
    assert!(downsample_local_grid(&mut tape, g, 3).is_err());
}

#[test]
fn identity_policy_keeps_image() {
    let img = Tensor::<f32>::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng(50));
    let (a, b) = augment_pair(&img, &AugmentationPolicy::identity(16), &mut rng(51)).unwrap();
    assert_eq!(a, img);
    assert_eq!(b, img);
}

#[test]
fn crop_area_respects_minimum() {
    let mut r = rng(52);
    let (mut lo, mut hi) = (f64::MAX, 0.0f64);
    for _ in 0..10_000 {
        let c = sample_crop(64, 64, 0.2, &mut r);
        let ratio = (c.height * c.width) as f64 / 4096.0;
        assert!(c.top + c.height <= 64 && c.left + c.width <= 64);
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    assert!(lo >= 0.2 && hi <= 1.0, "{lo} {hi}");
    assert!(lo < 0.25 && hi > 0.9);
}

#[test]
fn augmentation_is_deterministic() {
    let img = Tensor::<f32>::uniform(&[3, 40, 40], 0.0, 1.0, &mut rng(53));
    let policy = AugmentationPolicy { output_size: 32, ..AugmentationPolicy::full_scale() };
    let a = augment_pair(&img, &policy, &mut rng(54)).unwrap();
    let b = augment_pair(&img, &policy, &mut rng(54)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.0.shape(), &[3, 32, 32]);
    assert!(a.0.data().iter().chain(a.1.data()).all(|&x| (0.0..=1.0).contains(&x)));
    assert_ne!(a.0, a.1);
}

#[test]
fn degenerate_images_rejected() {
    assert!(Tensor::<f32>::new(&[3, 0, 4], vec![]).is_err());
    let flat = Tensor::<f32>::ones(&[4, 4]);
    assert!(augment_pair(&flat, &AugmentationPolicy::identity(4), &mut rng(0)).is_err());
    let bad = AugmentationPolicy { c_min: 0.0, ..AugmentationPolicy::identity(4) };
    assert!(augment_pair(&Tensor::ones(&[3, 4, 4]), &bad, &mut rng(0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn one_step_increases_local_alignment(seed in any::<u64>()) {
        let (n, c, side) = (3, 5, 2);
        let mut r = rng(seed);
        let mut projector = Head::<f64>::new(c, 8, 4, 1, false, &mut r);
        let mut predictor = Head::<f64>::new(4, 8, 4, 1, true, &mut r);
        let grid = Tensor::<f64>::randn(&[n, c, side, side], 1.0, &mut r);
        let zg = Tensor::<f64>::randn(&[n, 4], 1.0, &mut r);
        let pg = Tensor::<f64>::randn(&[n, 4], 1.0, &mut r);
        let zl = Tensor::<f64>::randn(&[n, 4, side, side], 1.0, &mut r);

        let alignment = |proj: &mut Head<f64>, pred: &mut Head<f64>, step: Option<f64>| -> f64 {
            let mut tape = Tape::new();
            let pv = proj.params().bind(&mut tape, true);
            let qv = pred.params().bind(&mut tape, true);
            let x = tape.constant(grid.clone());
            let z = proj.forward(&mut tape, &pv, x, cooc_core::tensor::BnMode::Train).unwrap();
            let p = pred.forward(&mut tape, &qv, z, cooc_core::tensor::BnMode::Train).unwrap();
            let p_rows = tape.grid_to_rows(p).unwrap();
            let p_out = tape.value(p_rows).unwrap().clone();
            let mean_cos = (0..n * side * side).map(|i| cos(&row(&p_out, i), &row(&zg, i / (side * side)))).sum::<f64>() / (n * side * side) as f64;
            if let Some(lr) = step {
                let v = [pg.clone(), zl.clone(), zg.clone()].map(|t| tape.constant(t));
                let loss = loss_local(&mut tape, p, v[0], v[1], v[2]).unwrap();
                let grads = tape.backward(loss).unwrap();
                for (store, vars) in [(proj.params_mut(), &pv), (pred.params_mut(), &qv)] {
                    for (i, var) in vars.iter().enumerate() {
                        let g = grads.get(*var).unwrap();
                        let updated = store.values()[i].zip_map(g, |w, d| w - lr * d).unwrap();
                        store.set(i, updated).unwrap();
                    }
                }
            }
            mean_cos
        };
        let before = alignment(&mut projector, &mut predictor, Some(1e-3));
        let after = alignment(&mut projector, &mut predictor, None);
        prop_assert!(after > before, "{before} -> {after}");
    }
}



