mod common;

use common::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sggan_core::autograd::Graph;
use sggan_core::cbt::{
    adaptive_scale, added_trainable_params, calibrate_discriminator, calibrate_generator, grow_network, scale_at,
    GrowthClock, GrowthPlan,
};
use sggan_core::model::{Discriminator, Forward, Generator};
use sggan_core::netspec::{desk_spec, parse_layer_spec, sample_latent, GrowthMode, LayerSpec, Role, Stage};
use sggan_core::{Error, Tensor};

const PRESERVE_TOL: f64 = 1e-6;

fn d_logits(d: &mut Discriminator, x: &Tensor, w: f64) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = d.forward(&mut g, xv, &mut Forward::eval(w)).unwrap();
    g.value(out.logits).clone()
}

fn g_images(gen: &mut Generator, z: &Tensor, w: f64) -> Tensor {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let out = gen.forward(&mut g, zv, &mut Forward::eval(w)).unwrap();
    g.value(out).clone()
}

/// One train-mode pass so every batch norm has running statistics.
fn warm_d(d: &mut Discriminator, x: &Tensor, w: f64, r: &mut ChaCha8Rng) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    d.forward(&mut g, xv, &mut Forward::train(w, false, true, r)).unwrap();
}

fn warm_g(gen: &mut Generator, z: &Tensor, w: f64, r: &mut ChaCha8Rng) {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    gen.forward(&mut g, zv, &mut Forward::train(w, false, true, r)).unwrap();
}

fn random_rows(role: Role, r: &mut impl Rng) -> Vec<LayerSpec> {
    let n = r.random_range(1..=3);
    let mut strided = false;
    (0..n)
        .map(|_| {
            let k = [1, 3, 5][r.random_range(0..3)];
            let c = [32, 64, 128, 192, 256][r.random_range(0..5)];
            let text = match role {
                Role::Discriminator => {
                    let s = if !strided && r.random_bool(0.3) {
                        strided = true;
                        2
                    } else {
                        1
                    };
                    let rep = r.random_range(1..=2);
                    format!("Conv{k}-{c}S{s}×{rep}")
                }
                Role::Generator => format!("Deconv{k}-{c}S1"),
            };
            parse_layer_spec(&text).unwrap()
        })
        .collect()
}

fn random_plan(role: Role, source: Stage, r: &mut impl Rng) -> GrowthPlan {
    let target = if source == Stage::Baby && r.random_bool(0.5) { Stage::Senior } else { source.next() };
    let mut plan = GrowthPlan::between(role, source, target).unwrap();
    plan.new_block = random_rows(role, r);
    plan.noise_std = r.random_range(0.01..0.5);
    plan
}

trait StageNext {
    fn next(self) -> Stage;
}

impl StageNext for Stage {
    fn next(self) -> Stage {
        match self {
            Stage::Baby => Stage::Junior,
            _ => Stage::Senior,
        }
    }
}

#[test]
fn discriminator_growth_preserves_function() {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let classes = r.random_range(2..=6);
        let side = [8, 16][r.random_range(0..2)];
        let ch = [1, 3][r.random_range(0..2)];
        let source = if trial % 3 == 2 { Stage::Junior } else { Stage::Baby };
        let spec = desk_spec(Role::Discriminator, source, classes, (side, side, ch)).unwrap();
        let mut shallow = Discriminator::build(&spec, &mut r).unwrap();
        let w_old = if source == Stage::Baby { 0.0 } else { r.random_range(0.05..1.0) };
        let warm = Tensor::randn(&[16, ch, side, side], 1.0, &mut r);
        warm_d(&mut shallow, &warm, w_old, &mut r);

        let plan = random_plan(Role::Discriminator, source, &mut r);
        let mut deep = grow_network(&shallow, &plan, w_old, &mut r).unwrap();
        calibrate_discriminator(&mut deep, &warm).unwrap();

        let x = Tensor::randn(&[100, ch, side, side], 1.0, &mut r);
        let before = d_logits(&mut shallow, &x, w_old);
        let after = d_logits(&mut deep, &x, 0.0);
        assert_eq!(before.shape(), after.shape());
        worst = worst.max(before.max_abs_diff(&after));
    }
    assert!(worst < PRESERVE_TOL, "max logit drift {worst:e}");
}

#[test]
fn generator_growth_preserves_function() {
    let mut r = rng(12);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let side = [8, 16][r.random_range(0..2)];
        let ch = [1, 3][r.random_range(0..2)];
        let source = if trial % 3 == 2 { Stage::Junior } else { Stage::Baby };
        let spec = desk_spec(Role::Generator, source, 4, (side, side, ch)).unwrap();
        let mut shallow = Generator::build(&spec, &mut r).unwrap();
        let prior = spec.latent().unwrap();
        let w_old = if source == Stage::Baby { 0.0 } else { r.random_range(0.05..1.0) };
        let warm = sample_latent(&prior, 16, &mut r).unwrap();
        warm_g(&mut shallow, &warm, w_old, &mut r);

        let plan = random_plan(Role::Generator, source, &mut r);
        let mut deep = grow_network(&shallow, &plan, w_old, &mut r).unwrap();
        calibrate_generator(&mut deep, &warm).unwrap();

        let z = sample_latent(&prior, 100, &mut r).unwrap();
        let before = g_images(&mut shallow, &z, w_old);
        let after = g_images(&mut deep, &z, 0.0);
        worst = worst.max(before.max_abs_diff(&after));
    }
    assert!(worst < PRESERVE_TOL, "max pixel drift {worst:e}");
}

#[test]
fn growth_leaves_source_untouched_and_copies_bitwise() {
    let mut r = rng(13);
    let spec = desk_spec(Role::Discriminator, Stage::Baby, 4, (16, 16, 3)).unwrap();
    let shallow = Discriminator::build(&spec, &mut r).unwrap();
    let print = shallow.params.fingerprint();
    let plan = GrowthPlan::between(Role::Discriminator, Stage::Baby, Stage::Junior).unwrap();
    let deep = grow_network(&shallow, &plan, 0.0, &mut r).unwrap();
    assert_eq!(shallow.params.fingerprint(), print);
    for p in shallow.params.iter() {
        let q = deep.params.by_name(&p.name).unwrap();
        let prefix = &q.value.data()[..p.value.len()];
        assert!(
            prefix.iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "{} not copied bitwise",
            p.name
        );
    }
}

#[test]
fn added_parameter_count_matches_grown_network() {
    let mut r = rng(14);
    for role in [Role::Discriminator, Role::Generator] {
        for (src, tgt) in [(Stage::Baby, Stage::Junior), (Stage::Junior, Stage::Senior), (Stage::Baby, Stage::Senior)] {
            for mode in [GrowthMode::Cbt, GrowthMode::Plain] {
                let spec = desk_spec(role, src, 4, (16, 16, 3)).unwrap();
                let plan = GrowthPlan::between(role, src, tgt).unwrap().with_mode(mode);
                let expected = added_trainable_params(&spec, &plan).unwrap();
                let (before, after) = match role {
                    Role::Discriminator => {
                        let d = Discriminator::build(&spec, &mut r).unwrap();
                        let g = grow_network(&d, &plan, 0.5, &mut r).unwrap();
                        (d.params.num_trainable_values(), g.params.num_trainable_values())
                    }
                    Role::Generator => {
                        let d = Generator::build(&spec, &mut r).unwrap();
                        let g = grow_network(&d, &plan, 0.5, &mut r).unwrap();
                        (d.params.num_trainable_values(), g.params.num_trainable_values())
                    }
                };
                assert_eq!(after as i64 - before as i64, expected, "{role:?} {src}->{tgt} {mode:?}");
            }
        }
    }
}

#[test]
fn calibration_initializes_only_new_blocks() {
    let mut r = rng(15);
    let spec = desk_spec(Role::Discriminator, Stage::Baby, 3, (8, 8, 1)).unwrap();
    let mut shallow = Discriminator::build(&spec, &mut r).unwrap();
    let x = Tensor::randn(&[8, 1, 8, 8], 1.0, &mut r);
    warm_d(&mut shallow, &x, 0.0, &mut r);
    let plan = GrowthPlan::between(Role::Discriminator, Stage::Baby, Stage::Junior).unwrap();
    let mut deep = grow_network(&shallow, &plan, 0.0, &mut r).unwrap();
    let trunk = |d: &Discriminator| {
        d.params.iter().filter(|p| p.name.contains("trunk") && p.name.ends_with("running_mean")).count()
    };
    let flags = |d: &Discriminator| {
        d.params.iter().filter(|p| p.name.starts_with("d/block0") && p.name.ends_with("initialized"))
            .map(|p| p.value.item()).collect::<Vec<_>>()
    };
    assert!(trunk(&deep) > 0);
    assert!(flags(&deep).iter().all(|&f| f == 0.0));
    let trunk_stats: Vec<Tensor> =
        deep.params.iter().filter(|p| p.name.contains("trunk/")).map(|p| p.value.clone()).collect();
    calibrate_discriminator(&mut deep, &x).unwrap();
    assert!(flags(&deep).iter().all(|&f| f == 1.0));
    let after: Vec<Tensor> =
        deep.params.iter().filter(|p| p.name.contains("trunk/")).map(|p| p.value.clone()).collect();
    assert_eq!(trunk_stats, after);
    assert!(matches!(calibrate_discriminator(&mut deep, &x), Err(Error::Growth(_))));
    assert!(calibrate_discriminator(&mut deep, &Tensor::zeros(&[0, 1, 8, 8])).is_err());
}

#[test]
fn stage_and_role_mismatch_rejected() {
    let mut r = rng(16);
    let spec = desk_spec(Role::Discriminator, Stage::Junior, 4, (16, 16, 3)).unwrap();
    let d = Discriminator::build(&spec, &mut r).unwrap();
    let plan = GrowthPlan::between(Role::Discriminator, Stage::Baby, Stage::Junior).unwrap();
    assert!(matches!(grow_network(&d, &plan, 0.0, &mut r), Err(Error::Growth(_))));
    let gplan = GrowthPlan::between(Role::Generator, Stage::Junior, Stage::Senior).unwrap();
    assert!(matches!(grow_network(&d, &gplan, 0.0, &mut r), Err(Error::Growth(_))));
    assert!(GrowthPlan::between(Role::Generator, Stage::Senior, Stage::Junior).is_err());
}

#[test]
fn plan_text_round_trips() {
    let mut r = rng(17);
    for role in [Role::Discriminator, Role::Generator] {
        let plan = random_plan(role, Stage::Baby, &mut r).with_mode(GrowthMode::Plain);
        assert_eq!(GrowthPlan::from_text(&plan.to_text()).unwrap(), plan);
    }
    assert!(GrowthPlan::from_text("role: discriminator\nsource: baby\ntarget: junior\n").is_err());
}

#[test]
fn plain_growth_changes_function() {
    let mut r = rng(18);
    let spec = desk_spec(Role::Discriminator, Stage::Baby, 4, (8, 8, 3)).unwrap();
    let mut shallow = Discriminator::build(&spec, &mut r).unwrap();
    let x = Tensor::randn(&[8, 3, 8, 8], 1.0, &mut r);
    warm_d(&mut shallow, &x, 0.0, &mut r);
    let plan = GrowthPlan::between(Role::Discriminator, Stage::Baby, Stage::Junior).unwrap().with_mode(GrowthMode::Plain);
    let mut deep = grow_network(&shallow, &plan, 0.0, &mut r).unwrap();
    calibrate_discriminator(&mut deep, &x).unwrap();
    assert!(d_logits(&mut shallow, &x, 0.0).max_abs_diff(&d_logits(&mut deep, &x, 0.0)) > 1e-6);
}

#[test]
fn adaptive_schedule() {
    assert_eq!(scale_at(0.0), 0.0);
    assert!((scale_at(1.0) - (1.0 - (-1f64).exp())).abs() < 1e-12);
    let mut r = rng(19);
    let mut ts: Vec<f64> = (0..10_000).map(|_| r.random_range(0.0..50.0)).collect();
    ts.sort_by(f64::total_cmp);
    assert!(ts.windows(2).all(|p| scale_at(p[0]) <= scale_at(p[1])));

    let mut clock = GrowthClock::new(4).unwrap();
    assert_eq!(adaptive_scale(&clock), 0.0);
    for _ in 0..4 {
        clock.tick();
    }
    assert!((clock.t() - 1.0).abs() < 1e-15);
    assert!((adaptive_scale(&clock) - scale_at(1.0)).abs() < 1e-15);
    clock.reset();
    assert_eq!(clock.t(), 0.0);
    assert!(GrowthClock::new(0).is_err());
}
