//! Config resolution, input loading and the per-run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sggan_core::data_io::{
    read_dataset, Dataset, ImageSet, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, DATASET_MAGIC, DATASET_VERSION,
};
use sggan_core::trainer::{Pools, TrainConfig, TrainState, METRICS_HEADER};

use crate::{Failure, Outcome, RunOptions};

/// How the dataset is divided into pools.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub labeled_per_class: usize,
    pub test_per_class: usize,
    pub validation_per_class: usize,
    pub unlabeled_cap: Option<usize>,
}

impl Default for Split {
    fn default() -> Self {
        Self { labeled_per_class: 10, test_per_class: 20, validation_per_class: 0, unlabeled_cap: None }
    }
}

impl Split {
    fn set(&mut self, key: &str, value: &str) -> Option<anyhow::Result<()>> {
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| anyhow!("bad value {v:?} for {key}"));
        let r = match key {
            "labeled_per_class" => num(value).map(|n| self.labeled_per_class = n),
            "test_per_class" => num(value).map(|n| self.test_per_class = n),
            "validation_per_class" => num(value).map(|n| self.validation_per_class = n),
            "unlabeled_cap" if value == "none" => {
                let _: () = self.unlabeled_cap = None;
                Ok(())
            },
            "unlabeled_cap" => num(value).map(|n| self.unlabeled_cap = Some(n)),
            _ => return None,
        };
        Some(r)
    }

    fn to_text(&self) -> String {
        format!(
            "labeled_per_class={}\ntest_per_class={}\nvalidation_per_class={}\nunlabeled_cap={}\n",
            self.labeled_per_class,
            self.test_per_class,
            self.validation_per_class,
            self.unlabeled_cap.map_or("none".into(), |c| c.to_string())
        )
    }

    /// Pools for `data`, drawn from a stream derived from the run seed.
    pub fn pools(&self, data: &ImageSet, seed: u64) -> Outcome<Pools> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5917);
        let mut pools = Pools::split(
            &data.labels,
            data.classes,
            self.labeled_per_class,
            self.test_per_class,
            self.unlabeled_cap,
            &mut rng,
        )
        .map_err(usage)?;
        if self.validation_per_class > 0 {
            pools.carve_validation(&data.labels, data.classes, self.validation_per_class, &mut rng).map_err(usage)?;
        }
        Ok(pools)
    }
}

/// Fully resolved settings for a training run.
#[derive(Clone, Debug, Default)]
pub struct RunSetup {
    pub cfg: TrainConfig,
    pub split: Split,
}

impl RunSetup {
    fn apply(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        match self.split.set(key, value) {
            Some(r) => r,
            None => self.cfg.set(key, value).map_err(Into::into),
        }
    }

    /// `--config` entries first, then explicit flags.
    pub fn resolve(run: &RunOptions, route: Option<&str>) -> Outcome<Self> {
        let mut setup = Self::default();
        if let Some(path) = &run.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))
                .map_err(Failure::Usage)?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), n + 1))
                    .map_err(Failure::Usage)?;
                setup
                    .apply(k.trim(), v.trim())
                    .with_context(|| format!("{}:{}", path.display(), n + 1))
                    .map_err(Failure::Usage)?;
            }
        }
        for (k, v) in flag_pairs(run, route) {
            setup.apply(k, &v).map_err(Failure::Usage)?;
        }
        setup.cfg.validate().map_err(usage)?;
        Ok(setup)
    }

    pub fn to_text(&self) -> String {
        format!("{}{}", self.cfg.to_text(), self.split.to_text())
    }
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn flag_pairs(run: &RunOptions, route: Option<&str>) -> Vec<(&'static str, String)> {
    let pairs = [
        ("route", route.map(str::to_string)),
        ("metric", run.metric.clone()),
        ("kernel", run.kernel.clone()),
        ("threshold", text(&run.threshold)),
        ("lr", text(&run.lr)),
        ("epochs", text(&run.epochs)),
        ("seed", text(&run.seed)),
        ("batch_size", text(&run.batch_size)),
        ("iters_per_epoch", text(&run.iters_per_epoch)),
        ("class_cap", text(&run.class_cap)),
        ("noise_std", text(&run.noise_std)),
        ("labeled_per_class", text(&run.labeled_per_class)),
        ("test_per_class", text(&run.test_per_class)),
        ("validation_per_class", text(&run.validation_per_class)),
        ("unlabeled_cap", text(&run.unlabeled_cap)),
        ("supervised_only", run.supervised_only.then(|| "true".to_string())),
    ];
    pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect()
}

pub fn usage(e: sggan_core::Error) -> Failure {
    Failure::Usage(e.into())
}

pub fn load_dataset(path: &Path) -> Outcome<Dataset> {
    read_dataset(path)
        .with_context(|| format!("cannot load dataset {}", path.display()))
        .map_err(Failure::Usage)
}

pub fn load_state(path: &Path) -> Outcome<TrainState> {
    sggan_core::data_io::load_checkpoint(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))
        .map_err(Failure::Usage)
}

pub fn make_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(())
}

/// Writes `manifest.txt`: command line, resolved settings and format
/// versions.
pub fn write_manifest(dir: &Path, settings: &str, extra: &[(&str, String)]) -> Outcome {
    let mut s = String::new();
    let args: Vec<String> = std::env::args().collect();
    let _ = writeln!(s, "# sggan {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "command={}", args.join(" "));
    for (k, v) in extra {
        let _ = writeln!(s, "{k}={v}");
    }
    s.push_str(settings);
    let magic = |m: [u8; 4]| String::from_utf8_lossy(&m).into_owned();
    let _ = writeln!(s, "dataset_format={} v{DATASET_VERSION}", magic(DATASET_MAGIC));
    let _ = writeln!(s, "checkpoint_format={} v{CHECKPOINT_VERSION}", magic(CHECKPOINT_MAGIC));
    let _ = writeln!(s, "metrics_header={METRICS_HEADER}");
    let path = dir.join("manifest.txt");
    fs::write(&path, s).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
