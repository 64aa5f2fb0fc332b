//! Trains one route on a synthetic dataset and prints per-epoch accuracy.
//!
//! `cargo run --release --example desk_run -- [route] [seed] [epochs] [noise] [key=value...]`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sggan_core::data_io::{generate_synthetic, SyntheticSpec};
use sggan_core::trainer::{parse_route, Pools, TrainConfig, TrainState};

fn main() -> sggan_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let route = parse_route(args.first().map_or("baby", String::as_str))?;
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let noise: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40.0);
    let corr: f64 = std::env::var("CORR").ok().and_then(|s| s.parse().ok()).unwrap_or(0.0);

    let spec = SyntheticSpec { per_class: 260, noise_std: noise, noise_corr: corr, ..Default::default() };
    let data = generate_synthetic(&spec, 1000 + seed)?.to_images();
    let mut split = ChaCha8Rng::seed_from_u64(seed);
    let pools = Pools::split(&data.labels, data.classes, 10, 100, Some(600), &mut split)?;
    let mut cfg = TrainConfig { route, seed, epochs_per_stage: epochs, iters_per_epoch: Some(18), ..Default::default() };
    for kv in args.iter().skip(4) {
        let (k, v) = kv.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    let mut state = TrainState::new(cfg, &data, pools)?;
    let start = Instant::now();
    let reports = state.run(
        &data,
        &mut |row| {
            if let Some(acc) = row.test_acc {
                println!(
                    "{} epoch {:>2} loss_d={:.4} loss_g={:.4} acc={acc:.3} latent={} t={:.1}s",
                    row.stage,
                    row.epoch,
                    row.loss_d,
                    row.loss_g,
                    row.n_latent,
                    start.elapsed().as_secs_f64()
                );
            }
        },
        &mut |_| Ok(()),
    )?;
    println!("{reports:?}");
    Ok(())
}
