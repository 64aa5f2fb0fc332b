mod common;

use common::rng;
use rand::Rng;
use sggan_core::data_io::{generate_synthetic, ImageSet, SyntheticSpec};
use sggan_core::model::{Discriminator, Forward};
use sggan_core::netspec::{desk_spec, Role, Stage};
use sggan_core::autograd::Graph;
use sggan_core::trainer::{
    adam_step, all_routes, evaluate, infer_labels, parse_route, predict, route_name, AdamConfig, AdamState,
    MetricsRow, Pools, TrainConfig, TrainState, DEFAULT_THRESHOLD, METRICS_HEADER,
};
use sggan_core::{Error, ParamStore, Tensor};

fn tiny_data(seed: u64) -> ImageSet {
    let spec = SyntheticSpec { classes: 3, h: 8, w: 8, c: 1, per_class: 30, ..Default::default() };
    generate_synthetic(&spec, seed).unwrap().to_images()
}

fn tiny_pools(data: &ImageSet, seed: u64) -> Pools {
    Pools::split(&data.labels, data.classes, 4, 5, None, &mut rng(seed)).unwrap()
}

/// A warmed-up discriminator whose head is scaled so confidences spread
/// over the whole (1/k, 1) range.
fn sharp_discriminator(data: &ImageSet, gain: f64) -> Discriminator {
    let mut r = rng(99);
    let spec = desk_spec(Role::Discriminator, Stage::Baby, data.classes, data.extent()).unwrap();
    let mut d = Discriminator::build(&spec, &mut r).unwrap();
    let mut g = Graph::new();
    let x = g.constant(data.images.slice_rows(0, 32));
    d.forward(&mut g, x, &mut Forward::train(0.0, false, true, &mut r)).unwrap();
    let id = d.params.id_of("d/head/weight").unwrap();
    let w = &mut d.params.get_mut(id).value;
    *w = w.map(|v| v * gain);
    d
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig { batch_size: 4, epochs_per_stage: 1, iters_per_epoch: Some(2), ..Default::default() }
}

#[test]
fn adam_matches_hand_computed_steps() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(vec![1.0, -2.0]), true).unwrap();
    store.add("frozen", Tensor::from_vec(vec![5.0]), false).unwrap();
    let mut state = AdamState::new(&store);
    let cfg = AdamConfig { lr: 0.1, ..Default::default() };
    // First step moves every coordinate by lr·sign(g) up to eps.
    store.get_mut(id).grad = Some(Tensor::from_vec(vec![0.5, -3.0]));
    adam_step(&mut store, &mut state, &cfg).unwrap();
    let v = store.get(id).value.data().to_vec();
    assert!((v[0] - 0.9).abs() < 1e-7 && (v[1] + 1.9).abs() < 1e-7, "{v:?}");
    // Second step with the same gradient: m̂ = g, v̂ = g², so again lr·sign(g).
    store.get_mut(id).grad = Some(Tensor::from_vec(vec![0.5, -3.0]));
    adam_step(&mut store, &mut state, &cfg).unwrap();
    let v = store.get(id).value.data().to_vec();
    assert!((v[0] - 0.8).abs() < 1e-7 && (v[1] + 1.8).abs() < 1e-7, "{v:?}");
    assert_eq!(state.step, 2);
    assert_eq!(store.by_name("frozen").unwrap().value.item(), 5.0);

    store.get_mut(id).grad = None;
    assert!(matches!(adam_step(&mut store, &mut state, &cfg), Err(Error::MissingGradient(n)) if n == "w"));
}

#[test]
fn pools_partition_the_dataset() {
    let data = tiny_data(1);
    let pools = tiny_pools(&data, 2);
    assert_eq!(pools.labeled.len(), 12);
    assert_eq!(pools.test.len(), 15);
    assert_eq!(pools.train_size() + pools.test.len(), data.labels.len());
    let mut all: Vec<usize> = pools.labeled.iter().map(|p| p.0).chain(pools.unlabeled.iter().copied())
        .chain(pools.test.iter().map(|p| p.0)).collect();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), data.labels.len());
    for &(id, c) in pools.labeled.iter().chain(&pools.test) {
        assert_eq!(data.labels[id], c as i16);
    }
    assert!(Pools::split(&data.labels, 3, 20, 20, None, &mut rng(0)).is_err());
}

#[test]
fn label_inference_contracts() {
    let data = tiny_data(3);
    let pools = tiny_pools(&data, 4);
    let mut d = sharp_discriminator(&data, 40.0);
    let confs: Vec<f64> = predict(&mut d, &data, &pools.unlabeled, 0.0).unwrap().iter().map(|p| p.1).collect();
    assert!(confs.iter().any(|&c| c > 0.9) && confs.iter().any(|&c| c < 0.9), "confidences not spread");

    let mut prev: Option<Vec<usize>> = None;
    for alpha in [0.0, 0.4, 0.6, 0.8, 0.9, 0.95, DEFAULT_THRESHOLD, 0.999, 1.0] {
        let next = infer_labels(&mut d, &data, &pools, alpha, None, 0.0).unwrap();
        assert_eq!(next.train_size(), pools.train_size(), "conservation at {alpha}");
        assert_eq!(next.labeled, pools.labeled);
        assert!(next.latent.iter().all(|e| e.confidence > alpha), "stored confidence at or below {alpha}");
        let moved: Vec<usize> = next.latent.iter().map(|e| e.id).collect();
        if alpha == 0.0 {
            assert!(next.unlabeled.is_empty());
        }
        if let Some(p) = &prev {
            assert!(moved.iter().all(|id| p.contains(id)), "higher threshold moved a new sample at {alpha}");
        }
        prev = Some(moved);
    }
    assert_eq!(TrainConfig::default().threshold, DEFAULT_THRESHOLD);
    assert_eq!(DEFAULT_THRESHOLD, 0.98);

    let once = infer_labels(&mut d, &data, &pools, 0.5, None, 0.0).unwrap();
    assert!(!once.latent.is_empty());
    let frozen = infer_labels(&mut d, &data, &once, 1.5, None, 0.0).unwrap();
    assert_eq!(frozen, once);

    let capped = infer_labels(&mut d, &data, &pools, 0.0, Some(2), 0.0).unwrap();
    let mut per = [0; 3];
    capped.latent.iter().for_each(|e| per[e.label] += 1);
    assert!(per.iter().all(|&n| n <= 2));
    assert_eq!(capped.train_size(), pools.train_size());
}

#[test]
fn evaluate_agrees_with_predictions() {
    let data = tiny_data(5);
    let pools = tiny_pools(&data, 6);
    let mut d = sharp_discriminator(&data, 5.0);
    let ids: Vec<usize> = pools.test.iter().map(|p| p.0).collect();
    let preds = predict(&mut d, &data, &ids, 0.0).unwrap();
    let perfect: Vec<(usize, usize)> = ids.iter().zip(&preds).map(|(&i, p)| (i, p.0)).collect();
    let wrong: Vec<(usize, usize)> = ids.iter().zip(&preds).map(|(&i, p)| (i, (p.0 + 1) % 3)).collect();
    assert_eq!(evaluate(&mut d, &data, &perfect, 0.0).unwrap(), 1.0);
    assert_eq!(evaluate(&mut d, &data, &wrong, 0.0).unwrap(), 0.0);
    let mut half = perfect.clone();
    half[..4].copy_from_slice(&wrong[..4]);
    let acc = evaluate(&mut d, &data, &half, 0.0).unwrap();
    assert!((acc - (ids.len() - 4) as f64 / ids.len() as f64).abs() < 1e-15);
    assert!(evaluate(&mut d, &data, &[], 0.0).is_err());
}

#[test]
fn constant_prediction_scores_chance() {
    let spec = SyntheticSpec { classes: 4, h: 8, w: 8, c: 1, per_class: 10, ..Default::default() };
    let data = generate_synthetic(&spec, 1).unwrap().to_images();
    let test: Vec<(usize, usize)> = data.labels.iter().enumerate().map(|(i, &l)| (i, l as usize)).collect();
    let mut d = sharp_discriminator(&data, 1.0);
    let w = d.params.id_of("d/head/weight").unwrap();
    let b = d.params.id_of("d/head/bias").unwrap();
    d.params.get_mut(w).value = d.params.get(w).value.map(|_| 0.0);
    d.params.get_mut(b).value = Tensor::from_vec(vec![0.0, 0.0, 3.0, 0.0, 0.0]);
    assert_eq!(evaluate(&mut d, &data, &test, 0.0).unwrap(), 0.25);
}

#[test]
fn untrained_model_is_near_chance() {
    let spec = SyntheticSpec { per_class: 50, ..Default::default() };
    let data = generate_synthetic(&spec, 2).unwrap().to_images();
    let test: Vec<(usize, usize)> = data.labels.iter().enumerate().map(|(i, &l)| (i, l as usize)).collect();
    let mut accs = Vec::new();
    for seed in 0..20 {
        let mut r = rng(seed);
        let dspec = desk_spec(Role::Discriminator, Stage::Baby, 4, data.extent()).unwrap();
        let mut d = Discriminator::build(&dspec, &mut r).unwrap();
        let mut g = Graph::new();
        let x = g.constant(data.images.slice_rows(0, 64));
        d.forward(&mut g, x, &mut Forward::train(0.0, false, true, &mut r)).unwrap();
        let acc = evaluate(&mut d, &data, &test, 0.0).unwrap();
        accs.push(acc);
    }
    // Random features already separate the patterns, so an unlucky head can
    // map them to the wrong classes wholesale.
    let inside = accs.iter().filter(|a| (0.1..=0.45).contains(*a)).count();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!(inside >= 18, "{accs:?}");
    assert!((mean - 0.25).abs() < 0.05, "{accs:?}");
}

#[test]
fn validation_pool_selects_reported_epoch() {
    let data = tiny_data(16);
    let mut pools = tiny_pools(&data, 17);
    let before = pools.train_size();
    pools.carve_validation(&data.labels, 3, 2, &mut rng(1)).unwrap();
    assert_eq!(pools.validation.len(), 6);
    assert_eq!(pools.train_size() + 6, before);
    for &(id, c) in &pools.validation {
        assert_eq!(data.labels[id], c as i16);
        assert!(!pools.unlabeled.contains(&id));
    }
    let cfg = TrainConfig { epochs_per_stage: 3, ..tiny_cfg() };
    let mut st = TrainState::new(cfg, &data, pools).unwrap();
    let reports = st.run(&data, &mut |_| {}, &mut |_| Ok(())).unwrap();
    let sel = reports[0].selected_acc.expect("validation present");
    assert!((0.0..=1.0).contains(&sel));
    assert!(tiny_pools(&data, 17).carve_validation(&data.labels, 3, 1000, &mut rng(1)).is_err());
}

#[test]
fn each_step_freezes_the_other_network() {
    let data = tiny_data(7);
    let pools = tiny_pools(&data, 8);
    let mut st = TrainState::new(tiny_cfg(), &data, pools.clone()).unwrap();
    let batch: Vec<usize> = pools.unlabeled[..4].to_vec();
    let lab: Vec<(usize, usize)> = pools.labeled[..4].to_vec();

    let (d0, g0) = (st.cell.d.params.fingerprint(), st.cell.g.params.fingerprint());
    st.d_step(&data, &lab, &batch, 0.0).unwrap();
    assert_ne!(st.cell.d.params.fingerprint(), d0);
    assert_eq!(st.cell.g.params.fingerprint(), g0);

    let d1 = st.cell.d.params.fingerprint();
    let (_, _, spread) = st.g_step(&data, &batch, 0.0).unwrap();
    assert!(spread >= 0.0);
    assert_eq!(st.cell.d.params.fingerprint(), d1);
    assert_ne!(st.cell.g.params.fingerprint(), g0);
}

#[test]
fn routes_grow_the_expected_number_of_times() {
    let data = tiny_data(9);
    let pools = tiny_pools(&data, 10);
    let routes = all_routes();
    assert_eq!(routes.len(), 7);
    for route in routes {
        let cfg = TrainConfig { route: route.clone(), ..tiny_cfg() };
        let mut st = TrainState::new(cfg, &data, pools.clone()).unwrap();
        let mut stages = Vec::new();
        let reports = st.run(&data, &mut |_| {}, &mut |s| {
            stages.push(s.cell.stage);
            Ok(())
        }).unwrap();
        assert_eq!(stages, route, "{}", route_name(&route));
        assert_eq!(st.growths.len(), route.len() - 1);
        assert_eq!(reports.len(), route.len());
        assert!(reports.iter().all(|r| (0.0..=1.0).contains(&r.test_acc)));
        assert_eq!(parse_route(&route_name(&route)).unwrap(), route);
    }
    assert!(parse_route("junior,baby").is_ok_and(|r| TrainConfig { route: r, ..tiny_cfg() }.validate().is_err()));
}

#[test]
fn metrics_rows_follow_header() {
    assert_eq!(METRICS_HEADER, "stage,epoch,iter,loss_d,loss_g,mmd2,w_t,n_labeled,n_latent,n_unlabeled,test_acc");
    let data = tiny_data(11);
    let mut rows = Vec::new();
    let mut st = TrainState::new(TrainConfig { iters_per_epoch: Some(3), ..tiny_cfg() }, &data, tiny_pools(&data, 12))
        .unwrap();
    st.train_epoch(&data, &mut |r: &MetricsRow| rows.push(r.clone())).unwrap();
    assert_eq!(rows.len(), 3);
    let cols = METRICS_HEADER.split(',').count();
    for (i, r) in rows.iter().enumerate() {
        let line = r.to_string();
        assert_eq!(line.split(',').count(), cols);
        assert_eq!(line.ends_with(','), i + 1 < rows.len(), "{line}");
        assert!(r.loss_d.is_finite() && r.loss_g.is_finite() && r.mmd2 >= -1e-9);
    }
    assert_eq!(rows.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![1, 2, 3]);
}

#[test]
fn config_text_round_trips() {
    let mut r = rng(13);
    let mut cfg = TrainConfig::default();
    cfg.set("route", "baby,senior").unwrap();
    cfg.set("metric", "l1").unwrap();
    cfg.set("kernel", "linear").unwrap();
    cfg.set("class_cap", "7").unwrap();
    cfg.adam.lr = r.random_range(0.0..0.1);
    assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert!(cfg.clone().set("bogus", "1").is_err());
    assert!(TrainConfig::from_text("threshold=1.5").unwrap().validate().is_err());
}

#[test]
fn supervised_only_ignores_unlabeled_pool() {
    let data = tiny_data(14);
    let pools = tiny_pools(&data, 15);
    let cfg = TrainConfig { supervised_only: true, ..tiny_cfg() };
    let mut st = TrainState::new(cfg, &data, pools.clone()).unwrap();
    let g0 = st.cell.g.params.fingerprint();
    st.train_epoch(&data, &mut |_| {}).unwrap();
    assert_eq!(st.cell.g.params.fingerprint(), g0);
    assert_eq!(st.pools, pools);
}
