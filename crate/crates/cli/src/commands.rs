use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sggan_core::autograd::Graph;
use sggan_core::data_io::{
    generate_synthetic, save_checkpoint_as, tile_images, write_dataset, write_image, ImageSet, SyntheticSpec,
};
use sggan_core::model::Forward;
use sggan_core::netspec::{sample_latent, Stage};
use sggan_core::trainer::{compare_routes, evaluate, route_name, MetricsRow, TrainState, METRICS_HEADER};
use sggan_core::DType;

use crate::setup::{load_dataset, load_state, make_dir, usage, write_manifest, RunSetup};
use crate::{EvalArgs, Failure, GenDataArgs, GrowArgs, InferArgs, Outcome, RoutesArgs, SampleArgs, TrainArgs};

pub fn gen_data(a: &GenDataArgs) -> Outcome {
    let spec = SyntheticSpec {
        classes: a.classes,
        h: a.size,
        w: a.size,
        c: a.channels,
        noise_std: a.noise,
        noise_corr: a.noise_corr,
        per_class: a.per_class,
    };
    let data = generate_synthetic(&spec, a.seed).map_err(usage)?;
    write_dataset(&data, &a.out)?;
    println!("wrote {} images ({}x{}x{}, {} classes) to {}", data.len(), a.size, a.size, a.channels, a.classes, a.out.display());
    Ok(())
}

fn images_for(state: &TrainState, path: &Path) -> Outcome<ImageSet> {
    let data = load_dataset(path)?.to_images();
    let want = state.cell.d.input_extent();
    if data.extent() != want || data.classes != state.cell.d.classes() {
        return Err(Failure::Usage(anyhow!(
            "dataset {} has {:?} images and {} classes; the checkpoint expects {want:?} and {}",
            path.display(),
            data.extent(),
            data.classes,
            state.cell.d.classes()
        )));
    }
    Ok(data)
}

/// Line-buffered metrics sink that remembers its first write error.
struct Metrics {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl Metrics {
    fn open(path: &Path, append: bool) -> Outcome<Self> {
        let fresh = !append || !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(path)
            .with_context(|| format!("cannot open {}", path.display()))?;
        let mut m = Self { out: BufWriter::new(file), error: None };
        if fresh {
            m.line(METRICS_HEADER);
        }
        Ok(m)
    }

    fn line(&mut self, s: &str) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{s}") {
                self.error = Some(e);
            }
        }
    }

    fn row(&mut self, r: &MetricsRow) {
        self.line(&r.to_string());
    }

    fn finish(mut self) -> Outcome {
        if let Some(e) = self.error.take() {
            return Err(anyhow!(e).context("writing metrics").into());
        }
        self.out.flush().context("writing metrics")?;
        Ok(())
    }
}

fn dtype(f32: bool) -> DType {
    if f32 {
        DType::F32
    } else {
        DType::F64
    }
}

/// `n` generator samples at the cell's current blend weight.
fn generate(state: &TrainState, n: usize, seed: u64) -> sggan_core::Result<sggan_core::Tensor> {
    let mut gen = state.cell.g.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let z = g.constant(sample_latent(&gen.prior, n, &mut rng)?);
    let x = gen.forward(&mut g, z, &mut Forward::eval(state.cell.scale()))?;
    Ok(g.value(x).clone())
}

fn grid_cols(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

pub fn train(a: &TrainArgs) -> Outcome {
    let (mut state, settings) = match &a.resume {
        Some(path) => {
            let state = load_state(path)?;
            let text = state.cfg.to_text();
            (state, text)
        }
        None => {
            let setup = RunSetup::resolve(&a.run, a.route.as_deref())?;
            let data = load_dataset(&a.run.data)?.to_images();
            let pools = setup.split.pools(&data, setup.cfg.seed)?;
            let text = setup.to_text();
            (TrainState::new(setup.cfg, &data, pools).map_err(usage)?, text)
        }
    };
    let data = images_for(&state, &a.run.data)?;
    make_dir(&a.out)?;
    let mut extra = vec![("data", a.run.data.display().to_string())];
    if let Some(r) = &a.resume {
        extra.push(("resumed_from", r.display().to_string()));
    }
    write_manifest(&a.out, &settings, &extra)?;

    let mut metrics = Metrics::open(&a.out.join("metrics.csv"), a.resume.is_some())?;
    let (out, dt) = (a.out.clone(), dtype(a.f32));
    let reports = state.run(&data, &mut |row| metrics.row(row), &mut |st| {
        let stage = st.cell.stage;
        save_checkpoint_as(st, out.join(format!("ckpt_{stage}.sgck")), dt)?;
        let images = generate(st, 16, st.cfg.seed)?;
        write_image(&tile_images(&images, 4)?, out.join(format!("samples_{stage}.ppm")))?;
        info!("stage {stage} finished");
        Ok(())
    });
    metrics.finish()?;
    let reports = reports?;
    save_checkpoint_as(&state, a.out.join("final.sgck"), dt)?;
    for r in &reports {
        match r.selected_acc {
            Some(s) => println!("stage={} test_acc={} selected_acc={s}", r.stage, r.test_acc),
            None => println!("stage={} test_acc={}", r.stage, r.test_acc),
        }
    }
    Ok(())
}

pub fn grow(a: &GrowArgs) -> Outcome {
    let mut state = load_state(&a.ckpt)?;
    let data = images_for(&state, &a.data)?;
    let to: Stage = a.to.parse().map_err(usage)?;
    if to <= state.cell.stage {
        return Err(Failure::Usage(anyhow!("checkpoint is already at stage {}", state.cell.stage)));
    }
    if let Some(s) = a.noise_std {
        state.cfg.noise_std = s;
        state.cfg.validate().map_err(usage)?;
    }
    let before = state.cell.d.params.num_trainable_values();
    state.grow_to(to, &data)?;
    save_checkpoint_as(&state, &a.out, DType::F64)?;
    println!(
        "grew to {to}: discriminator {} -> {} trainable values, route {}",
        before,
        state.cell.d.params.num_trainable_values(),
        route_name(&state.cfg.route)
    );
    Ok(())
}

pub fn infer_labels(a: &InferArgs) -> Outcome {
    let mut state = load_state(&a.ckpt)?;
    let data = images_for(&state, &a.data)?;
    let alpha = a.threshold.unwrap_or(state.cfg.threshold);
    if !(alpha >= 0.0) {
        return Err(Failure::Usage(anyhow!("threshold must be nonnegative")));
    }
    let cap = a.class_cap.or(state.cfg.class_cap);
    let w = state.cell.scale();
    let before = state.pools.latent.len();
    state.pools = sggan_core::trainer::infer_labels(&mut state.cell.d, &data, &state.pools, alpha, cap, w)?;
    save_checkpoint_as(&state, &a.out, DType::F64)?;
    println!(
        "moved={} latent={} unlabeled={}",
        state.pools.latent.len() - before,
        state.pools.latent.len(),
        state.pools.unlabeled.len()
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Outcome {
    let mut state = load_state(&a.ckpt)?;
    let data = images_for(&state, &a.data)?;
    let pool: Vec<(usize, usize)> = match a.pool.as_str() {
        "test" => state.pools.test.clone(),
        "all" => data.labels.iter().enumerate().filter(|(_, &l)| l >= 0).map(|(i, &l)| (i, l as usize)).collect(),
        other => return Err(Failure::Usage(anyhow!("unknown pool {other:?}; use test or all"))),
    };
    if pool.iter().any(|&(i, _)| i >= data.len()) {
        return Err(Failure::Usage(anyhow!("test pool refers to images beyond the dataset")));
    }
    if pool.is_empty() {
        return Err(Failure::Usage(anyhow!("the {} pool is empty", a.pool)));
    }
    let w = state.cell.scale();
    let acc = evaluate(&mut state.cell.d, &data, &pool, w)?;
    println!("accuracy={acc}");
    Ok(())
}

pub fn sample(a: &SampleArgs) -> Outcome {
    if a.n == 0 {
        return Err(Failure::Usage(anyhow!("--n must be positive")));
    }
    let state = load_state(&a.ckpt)?;
    let images = generate(&state, a.n, a.seed)?;
    make_dir(&a.out)?;
    let path = a.out.join("samples.ppm");
    write_image(&tile_images(&images, a.cols.unwrap_or_else(|| grid_cols(a.n)))?, &path)?;
    println!("wrote {} samples from stage {} to {}", a.n, state.cell.stage, path.display());
    Ok(())
}

pub fn routes(a: &RoutesArgs) -> Outcome {
    let setup = RunSetup::resolve(&a.run, None)?;
    let data = load_dataset(&a.run.data)?.to_images();
    let pools = setup.split.pools(&data, setup.cfg.seed)?;
    make_dir(&a.out)?;
    write_manifest(&a.out, &setup.to_text(), &[("data", a.run.data.display().to_string())])?;

    let mut sinks: Vec<(String, Metrics)> = Vec::new();
    let results = compare_routes(&setup.cfg, &data, &pools, &mut |route, row| {
        let name = route_name(route);
        if sinks.last().is_none_or(|(n, _)| *n != name) {
            let path = a.out.join(format!("metrics_{}.csv", name.replace(',', "-")));
            match Metrics::open(&path, false) {
                Ok(m) => sinks.push((name, m)),
                Err(_) => return,
            }
        }
        sinks.last_mut().expect("just pushed").1.row(row);
    });
    for (_, m) in sinks {
        m.finish()?;
    }
    let results = results?;
    let mut table = String::from("route,accuracy,stage_accuracy\n");
    for r in &results {
        let stages: Vec<String> = r.stage_accuracy.iter().map(|a| a.to_string()).collect();
        table.push_str(&format!("{},{},{}\n", route_name(&r.route), r.accuracy, stages.join(";")));
    }
    fs::write(a.out.join("routes.csv"), &table).context("writing routes.csv")?;
    print!("{table}");
    Ok(())
}
