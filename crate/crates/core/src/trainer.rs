//! Alternating discriminator/generator optimisation, label inference and the
//! staged growth schedule.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::cbt::{adaptive_scale, calibrate_discriminator, calibrate_generator, grow_network, GrowthClock, GrowthPlan};
use crate::data_io::ImageSet;
use crate::error::{Error, Result};
use crate::mmd::{mmd2_sample, FeatureBatch, Kernel};
use crate::model::{Discriminator, Forward, Generator};
use crate::netspec::{desk_spec, sample_latent, Role, Stage};
use crate::ssl_loss::{confidence, cross_entropy, discriminator_loss_graph, generator_loss, real_class_scores, MatchMetric};
use crate::tensor::{ParamStore, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.98;
pub const DEFAULT_LR: f64 = 0.01;
pub const METRICS_HEADER: &str = "stage,epoch,iter,loss_d,loss_g,mmd2,w_t,n_labeled,n_latent,n_unlabeled,test_acc";
const EVAL_CHUNK: usize = 128;

/// First/second moment estimates for every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    /// Indexed like the trainable parameters of the store, in order.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().filter(|p| p.trainable).map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: DEFAULT_LR, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update from the gradients stored on `params`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let trainable: Vec<_> = params.iter().filter(|p| p.trainable).collect();
    if trainable.len() != state.m.len() {
        return Err(Error::InvalidArgument("optimizer state does not match the parameters".into()));
    }
    if let Some(p) = trainable.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().filter(|p| p.trainable).enumerate() {
        let grad = p.grad.as_ref().expect("checked above").data();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = grad[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentEntry {
    pub id: usize,
    pub label: usize,
    pub confidence: f64,
}

/// Sample ids split into labeled, unlabeled, latent-labeled and test pools.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pools {
    pub labeled: Vec<(usize, usize)>,
    pub unlabeled: Vec<usize>,
    pub latent: Vec<LatentEntry>,
    pub test: Vec<(usize, usize)>,
    /// Optional held-out labeled samples used to pick the reported epoch.
    pub validation: Vec<(usize, usize)>,
}

impl Pools {
    /// Per class: `test_per_class` samples go to the test pool and
    /// `labeled_per_class` keep their label; every other sample (including
    /// those stored with label −1) becomes unlabeled. `unlabeled_cap` bounds
    /// the unlabeled pool.
    pub fn split(
        labels: &[i16],
        classes: usize,
        labeled_per_class: usize,
        test_per_class: usize,
        unlabeled_cap: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut by_class = vec![Vec::new(); classes];
        let mut pools = Pools::default();
        for (i, &l) in labels.iter().enumerate() {
            match l {
                -1 => pools.unlabeled.push(i),
                l if l >= 0 && (l as usize) < classes => by_class[l as usize].push(i),
                l => return Err(Error::InvalidArgument(format!("label {l} outside 0..{classes}"))),
            }
        }
        for (c, ids) in by_class.iter_mut().enumerate() {
            ids.shuffle(rng);
            if ids.len() < labeled_per_class + test_per_class {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has {} samples, need {}",
                    ids.len(),
                    labeled_per_class + test_per_class
                )));
            }
            pools.test.extend(ids[..test_per_class].iter().map(|&i| (i, c)));
            let lab = &ids[test_per_class..test_per_class + labeled_per_class];
            pools.labeled.extend(lab.iter().map(|&i| (i, c)));
            pools.unlabeled.extend(&ids[test_per_class + labeled_per_class..]);
        }
        pools.unlabeled.shuffle(rng);
        if let Some(cap) = unlabeled_cap {
            pools.unlabeled.truncate(cap);
        }
        pools.labeled.sort_unstable();
        pools.unlabeled.sort_unstable();
        pools.test.sort_unstable();
        if pools.labeled.is_empty() {
            return Err(Error::Empty("labeled pool"));
        }
        Ok(pools)
    }

    /// Moves `per_class` unlabeled samples of each class, by their stored
    /// label, into the validation pool.
    pub fn carve_validation(&mut self, labels: &[i16], classes: usize, per_class: usize, rng: &mut impl Rng) -> Result<()> {
        let mut taken = vec![0usize; classes];
        let mut order = self.unlabeled.clone();
        order.shuffle(rng);
        for id in order {
            let l = labels.get(id).copied().unwrap_or(-1);
            if l >= 0 && (l as usize) < classes && taken[l as usize] < per_class {
                taken[l as usize] += 1;
                self.validation.push((id, l as usize));
            }
        }
        if let Some(c) = taken.iter().position(|&n| n < per_class) {
            return Err(Error::InvalidArgument(format!("class {c} has too few unlabeled samples for validation")));
        }
        let held: std::collections::BTreeSet<usize> = self.validation.iter().map(|p| p.0).collect();
        self.unlabeled.retain(|id| !held.contains(id));
        self.validation.sort_unstable();
        Ok(())
    }

    /// Samples taking part in training (excludes the test and validation
    /// pools).
    /// Returns every latent sample to the unlabeled pool.
    pub fn release_latent(&mut self) {
        self.unlabeled.extend(self.latent.drain(..).map(|e| e.id));
        self.unlabeled.sort_unstable();
    }

    pub fn train_size(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.latent.len()
    }

    /// Real-image stream for the unsupervised terms.
    fn stream(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.unlabeled.iter().copied().chain(self.latent.iter().map(|e| e.id)).collect();
        ids.sort_unstable();
        ids
    }

    /// Labeled samples, true or inferred.
    fn supervised(&self) -> Vec<(usize, usize)> {
        self.labeled.iter().copied().chain(self.latent.iter().map(|e| (e.id, e.label))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MetricKind {
    Mmd,
    L1,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mmd => "mmd",
            MetricKind::L1 => "l1",
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mmd" => Ok(MetricKind::Mmd),
            "l1" => Ok(MetricKind::L1),
            _ => Err(Error::InvalidArgument(format!("unknown metric {s:?} (expected mmd or l1)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelChoice {
    /// Gaussian kernel, bandwidth from the median heuristic on each batch.
    GaussianMedian,
    InnerProduct,
}

impl KernelChoice {
    pub fn name(self) -> &'static str {
        match self {
            KernelChoice::GaussianMedian => "gaussian",
            KernelChoice::InnerProduct => "linear",
        }
    }

    fn resolve(self, real: &Tensor, fake: &Tensor) -> Result<Kernel> {
        match self {
            KernelChoice::InnerProduct => Ok(Kernel::InnerProduct),
            KernelChoice::GaussianMedian => {
                Kernel::gaussian_median(&FeatureBatch::new(real.clone())?, &FeatureBatch::new(fake.clone())?)
            }
        }
    }
}

impl FromStr for KernelChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gaussian" => Ok(KernelChoice::GaussianMedian),
            "linear" => Ok(KernelChoice::InnerProduct),
            _ => Err(Error::InvalidArgument(format!("unknown kernel {s:?} (expected gaussian or linear)"))),
        }
    }
}

/// Comma-separated stage list.
pub fn parse_route(s: &str) -> Result<Vec<Stage>> {
    s.split(',').map(|p| p.trim().parse()).collect()
}

pub fn route_name(route: &[Stage]) -> String {
    route.iter().map(|s| s.name()).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs_per_stage: usize,
    pub threshold: f64,
    pub metric: MetricKind,
    pub kernel: KernelChoice,
    pub route: Vec<Stage>,
    pub seed: u64,
    /// Most samples per class moved into the latent pool per inference.
    pub class_cap: Option<usize>,
    pub noise_std: f64,
    /// Train the discriminator on the labeled pool alone.
    pub supervised_only: bool,
    /// Fixed iterations per epoch; otherwise `⌊|stream| / m⌋`.
    pub iters_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs_per_stage: 20,
            threshold: DEFAULT_THRESHOLD,
            metric: MetricKind::Mmd,
            kernel: KernelChoice::GaussianMedian,
            route: vec![Stage::Baby],
            seed: 0,
            class_cap: None,
            noise_std: crate::cbt::DEFAULT_NOISE_STD,
            supervised_only: false,
            iters_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad(format!("threshold {} outside (0, 1]", self.threshold));
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2".into());
        }
        if self.route.is_empty() || self.route.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("route {:?} is not an increasing stage list", route_name(&self.route)));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return bad(format!("learning rate {} must be nonnegative", self.adam.lr));
        }
        if !(self.noise_std > 0.0) {
            return bad("noise_std must be positive".into());
        }
        if self.iters_per_epoch == Some(0) {
            return bad("iters_per_epoch must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines, stable order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs_per_stage.to_string()),
            ("threshold", self.threshold.to_string()),
            ("metric", self.metric.name().into()),
            ("kernel", self.kernel.name().into()),
            ("route", route_name(&self.route)),
            ("seed", self.seed.to_string()),
            ("class_cap", self.class_cap.map_or("none".into(), |c| c.to_string())),
            ("noise_std", self.noise_std.to_string()),
            ("supervised_only", self.supervised_only.to_string()),
            ("iters_per_epoch", self.iters_per_epoch.map_or("auto".into(), |c| c.to_string())),
        ]
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad value {v:?} for {key}")))
        }
        match key {
            "lr" => self.adam.lr = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "adam_eps" => self.adam.eps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs_per_stage = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "metric" => self.metric = value.parse()?,
            "kernel" => self.kernel = value.parse()?,
            "route" => self.route = parse_route(value)?,
            "seed" => self.seed = num(key, value)?,
            "class_cap" => self.class_cap = if value == "none" { None } else { Some(num(key, value)?) },
            "noise_std" => self.noise_std = num(key, value)?,
            "supervised_only" => self.supervised_only = num(key, value)?,
            "iters_per_epoch" => self.iters_per_epoch = if value == "auto" { None } else { Some(num(key, value)?) },
            _ => return Err(Error::InvalidArgument(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

/// Generator/discriminator pair at one growth stage.
#[derive(Clone, Debug)]
pub struct GanCell {
    pub d: Discriminator,
    pub g: Generator,
    pub stage: Stage,
    pub clock: GrowthClock,
}

impl GanCell {
    /// Fresh desk-scale cell trained from scratch at `stage`.
    pub fn new(stage: Stage, classes: usize, image: (usize, usize, usize), iters_per_epoch: u64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = Discriminator::build(&desk_spec(Role::Discriminator, stage, classes, image)?, rng)?;
        let g = Generator::build(&desk_spec(Role::Generator, stage, classes, image)?, rng)?;
        Self::from_parts(d, g, GrowthClock::new(iters_per_epoch)?)
    }

    pub fn from_parts(d: Discriminator, g: Generator, clock: GrowthClock) -> Result<Self> {
        if d.input_extent() != g.output_extent() {
            return Err(Error::InvalidArgument(format!(
                "generator emits {:?} but discriminator expects {:?}",
                g.output_extent(),
                d.input_extent()
            )));
        }
        if d.stage() != g.stage() {
            return Err(Error::InvalidArgument("generator and discriminator stages differ".into()));
        }
        Ok(Self { stage: d.stage(), d, g, clock })
    }

    pub fn scale(&self) -> f64 {
        adaptive_scale(&self.clock)
    }

    /// Grows both networks to `target`, calibrates the new normalization
    /// layers and restarts the stage clock.
    pub fn grow(&mut self, target: Stage, noise_std: f64, calib_images: &Tensor, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut pd = GrowthPlan::between(Role::Discriminator, self.stage, target)?;
        let mut pg = GrowthPlan::between(Role::Generator, self.stage, target)?;
        pd.noise_std = noise_std;
        pg.noise_std = noise_std;
        let w = self.scale();
        let mut d = grow_network(&self.d, &pd, w, rng)?;
        let mut g = grow_network(&self.g, &pg, w, rng)?;
        calibrate_discriminator(&mut d, calib_images)?;
        let z = sample_latent(&g.prior, calib_images.dim(0), rng)?;
        calibrate_generator(&mut g, &z)?;
        self.d = d;
        self.g = g;
        self.stage = target;
        self.clock.reset();
        info!("grew cell to {target}");
        Ok(())
    }
}

/// Metrics for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub stage: Stage,
    pub epoch: usize,
    pub iter: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub mmd2: f64,
    pub w_t: f64,
    pub n_labeled: usize,
    pub n_latent: usize,
    pub n_unlabeled: usize,
    /// Present on the last row of an epoch.
    pub test_acc: Option<f64>,
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{:e},{:e},{:e},{:e},{},{},{},",
            self.stage,
            self.epoch,
            self.iter,
            self.loss_d,
            self.loss_g,
            self.mmd2,
            self.w_t,
            self.n_labeled,
            self.n_latent,
            self.n_unlabeled
        )?;
        if let Some(a) = self.test_acc {
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

fn labels_of(pairs: &[(usize, usize)]) -> (Vec<usize>, Vec<usize>) {
    pairs.iter().copied().unzip()
}

fn is_bad(v: f64) -> bool {
    !v.is_finite()
}

/// Fraction of test samples whose arg-max real class equals the label.
pub fn evaluate(d: &mut Discriminator, data: &ImageSet, test: &[(usize, usize)], scale: f64) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test pool"));
    }
    let (ids, labels) = labels_of(test);
    let preds = predict(d, data, &ids, scale)?;
    let hits = preds.iter().zip(&labels).filter(|((p, _), l)| p == *l).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Arg-max class and its confidence for each id, in eval mode.
pub fn predict(d: &mut Discriminator, data: &ImageSet, ids: &[usize], scale: f64) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let x = g.constant(data.images.select_rows(chunk));
        let o = d.forward(&mut g, x, &mut Forward::eval(scale))?;
        let scores = real_class_scores(&mut g, o.logits)?;
        let s = g.value(scores);
        out.extend((0..chunk.len()).map(|r| confidence(s.row(r))));
    }
    Ok(out)
}

/// Moves every unlabeled sample predicted with confidence above `alpha`
/// into the latent pool. Latent samples are re-predicted and take the new
/// label when it is again confident; otherwise they keep their entry.
pub fn infer_labels(
    d: &mut Discriminator,
    data: &ImageSet,
    pools: &Pools,
    alpha: f64,
    class_cap: Option<usize>,
    scale: f64,
) -> Result<Pools> {
    let mut next = pools.clone();
    let latent_ids: Vec<usize> = pools.latent.iter().map(|e| e.id).collect();
    let relabel = predict(d, data, &latent_ids, scale)?;
    for (e, (label, conf)) in next.latent.iter_mut().zip(relabel) {
        if conf > alpha {
            e.label = label;
            e.confidence = conf;
        }
    }
    let preds = predict(d, data, &pools.unlabeled, scale)?;
    let mut picked: Vec<LatentEntry> = pools
        .unlabeled
        .iter()
        .zip(preds)
        .filter(|(_, (_, conf))| *conf > alpha)
        .map(|(&id, (label, confidence))| LatentEntry { id, label, confidence })
        .collect();
    if let Some(cap) = class_cap {
        picked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.id.cmp(&b.id)));
        let mut taken = vec![0usize; data.classes];
        picked.retain(|e| {
            taken[e.label] += 1;
            taken[e.label] <= cap
        });
    }
    let moved: std::collections::BTreeSet<usize> = picked.iter().map(|e| e.id).collect();
    next.unlabeled.retain(|id| !moved.contains(id));
    next.latent.extend(picked);
    next.latent.sort_by_key(|e| e.id);
    debug!("inferred {} latent labels ({} total)", moved.len(), next.latent.len());
    Ok(next)
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub cell: GanCell,
    pub adam_d: AdamState,
    pub adam_g: AdamState,
    pub pools: Pools,
    pub rng: ChaCha8Rng,
    /// Index into `cfg.route` of the stage being trained.
    pub route_pos: usize,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    pub iter: u64,
    pub growths: Vec<(Stage, Stage)>,
    /// Best `(validation, test)` accuracy so far in this stage.
    pub best: Option<(f64, f64)>,
}

/// Summary after each stage of a route.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    /// Final-epoch test accuracy.
    pub test_acc: f64,
    /// Test accuracy at the epoch with the best validation accuracy.
    pub selected_acc: Option<f64>,
}

impl TrainState {
    pub fn new(cfg: TrainConfig, data: &ImageSet, pools: Pools) -> Result<Self> {
        cfg.validate()?;
        if data.classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let ipe = iters_per_epoch(&cfg, &pools)?;
        let cell = GanCell::new(cfg.route[0], data.classes, data.extent(), ipe as u64, &mut rng)?;
        Ok(Self {
            adam_d: AdamState::new(&cell.d.params),
            adam_g: AdamState::new(&cell.g.params),
            cell,
            cfg,
            pools,
            rng,
            route_pos: 0,
            epoch: 0,
            iter: 0,
            growths: Vec::new(),
            best: None,
        })
    }

    pub fn finished(&self) -> bool {
        self.route_pos + 1 >= self.cfg.route.len() && self.epoch >= self.cfg.epochs_per_stage
    }

    pub fn stage_done(&self) -> bool {
        self.epoch >= self.cfg.epochs_per_stage
    }

    /// One epoch of alternating updates followed by label inference.
    pub fn train_epoch(&mut self, data: &ImageSet, sink: &mut dyn FnMut(&MetricsRow)) -> Result<f64> {
        let ipe = iters_per_epoch(&self.cfg, &self.pools)?;
        self.cell.clock.iters_per_epoch = ipe as u64;
        let m = self.cfg.batch_size;
        let supervised = self.pools.supervised();
        let mut stream = self.pools.stream();
        if !self.cfg.supervised_only && stream.is_empty() {
            return Err(Error::Empty("unlabeled pool"));
        }
        stream.shuffle(&mut self.rng);
        let epoch = self.epoch + 1;
        let mut fake_spread = 0.0;
        let mut acc = f64::NAN;
        for it in 0..ipe {
            let batch: Vec<usize> = if stream.is_empty() {
                Vec::new()
            } else {
                (0..m).map(|j| stream[(it * m + j) % stream.len()]).collect()
            };
            let lab: Vec<(usize, usize)> = (0..m).map(|_| supervised[self.rng.random_range(0..supervised.len())]).collect();
            let w = self.cell.scale();
            let (loss_d, loss_g, mmd2) = if self.cfg.supervised_only {
                (self.supervised_step(data, &lab, w)?, 0.0, 0.0)
            } else {
                let loss_d = self.d_step(data, &lab, &batch, w)?;
                let (loss_g, mmd2, spread) = self.g_step(data, &batch, w)?;
                fake_spread += spread / ipe as f64;
                (loss_d, loss_g, mmd2)
            };
            self.iter += 1;
            self.cell.clock.tick();
            if is_bad(loss_d) || is_bad(loss_g) {
                return Err(Error::NonFinite {
                    stage: self.cell.stage.to_string(),
                    epoch,
                    iter: it,
                    loss_d,
                    loss_g,
                });
            }
            let last = it + 1 == ipe;
            let test_acc = if last && !self.pools.test.is_empty() {
                acc = self.test_accuracy(data)?;
                Some(acc)
            } else {
                None
            };
            sink(&MetricsRow {
                stage: self.cell.stage,
                epoch,
                iter: self.iter,
                loss_d,
                loss_g,
                mmd2,
                w_t: w,
                n_labeled: self.pools.labeled.len(),
                n_latent: self.pools.latent.len(),
                n_unlabeled: self.pools.unlabeled.len(),
                test_acc,
            });
        }
        if !self.cfg.supervised_only {
            let w = self.cell.scale();
            self.pools = infer_labels(&mut self.cell.d, data, &self.pools, self.cfg.threshold, self.cfg.class_cap, w)?;
        }
        self.epoch = epoch;
        if !self.pools.validation.is_empty() {
            let w = self.cell.scale();
            let val = evaluate(&mut self.cell.d, data, &self.pools.validation, w)?;
            if self.best.is_none_or(|(b, _)| val > b) {
                self.best = Some((val, acc));
            }
        }
        info!(
            "{} epoch {epoch}: test_acc={acc:.4} latent={} generated_feature_var={fake_spread:.4e}",
            self.cell.stage,
            self.pools.latent.len()
        );
        Ok(acc)
    }

    pub fn test_accuracy(&mut self, data: &ImageSet) -> Result<f64> {
        let w = self.cell.scale();
        evaluate(&mut self.cell.d, data, &self.pools.test, w)
    }

    pub fn d_step(&mut self, data: &ImageSet, lab: &[(usize, usize)], batch: &[usize], w: f64) -> Result<f64> {
        let cell = &mut self.cell;
        let m = batch.len();
        let mut g = Graph::new();
        let z = g.constant(sample_latent(&cell.g.prior, m, &mut self.rng)?);
        let fake = cell.g.forward(&mut g, z, &mut Forward::train(w, false, false, &mut self.rng))?;
        let fake = g.constant(g.value(fake).clone());
        let (ids, labels) = labels_of(lab);
        let xl = g.constant(data.images.select_rows(&ids));
        let xu = g.constant(data.images.select_rows(batch));
        let ol = cell.d.forward(&mut g, xl, &mut Forward::train(w, true, false, &mut self.rng))?;
        let ou = cell.d.forward(&mut g, xu, &mut Forward::train(w, true, true, &mut self.rng))?;
        let of = cell.d.forward(&mut g, fake, &mut Forward::train(w, true, false, &mut self.rng))?;
        let sl = real_class_scores(&mut g, ol.logits)?;
        let su = real_class_scores(&mut g, ou.logits)?;
        let sf = real_class_scores(&mut g, of.logits)?;
        let loss = discriminator_loss_graph(&mut g, sl, &labels, su, sf)?;
        let value = g.value(loss.total).item();
        g.backward(loss.total)?;
        cell.d.params.zero_grad();
        cell.d.params.accumulate_grads(&g);
        adam_step(&mut cell.d.params, &mut self.adam_d, &self.cfg.adam)?;
        cell.d.params.zero_grad();
        Ok(value)
    }

    /// One generator update. Returns the matching loss, the batch MMD² and
    /// the mean per-feature variance of the generated batch.
    pub fn g_step(&mut self, data: &ImageSet, batch: &[usize], w: f64) -> Result<(f64, f64, f64)> {
        let cell = &mut self.cell;
        let m = batch.len();
        let mut g = Graph::new();
        let z = g.constant(sample_latent(&cell.g.prior, m, &mut self.rng)?);
        let fake = cell.g.forward(&mut g, z, &mut Forward::train(w, true, true, &mut self.rng))?;
        let xu = g.constant(data.images.select_rows(batch));
        let real = cell.d.forward(&mut g, xu, &mut Forward::train(w, false, false, &mut self.rng))?;
        let of = cell.d.forward(&mut g, fake, &mut Forward::train(w, false, false, &mut self.rng))?;
        let (rv, fv) = (g.value(real.features).clone(), g.value(of.features).clone());
        let spread = feature_variance(&fv);
        let kernel = self.cfg.kernel.resolve(&rv, &fv)?;
        let metric = match self.cfg.metric {
            MetricKind::Mmd => MatchMetric::Mmd(kernel),
            MetricKind::L1 => MatchMetric::L1,
        };
        let loss = generator_loss(&mut g, real.features, of.features, metric)?;
        let value = g.value(loss).item();
        let mmd2 = match self.cfg.metric {
            MetricKind::Mmd => value,
            MetricKind::L1 => mmd2_sample(&FeatureBatch::new(rv)?, &FeatureBatch::new(fv)?, &kernel)?,
        };
        g.backward(loss)?;
        cell.g.params.zero_grad();
        cell.g.params.accumulate_grads(&g);
        adam_step(&mut cell.g.params, &mut self.adam_g, &self.cfg.adam)?;
        cell.g.params.zero_grad();
        Ok((value, mmd2, spread))
    }

    pub fn supervised_step(&mut self, data: &ImageSet, lab: &[(usize, usize)], w: f64) -> Result<f64> {
        let cell = &mut self.cell;
        let mut g = Graph::new();
        let (ids, labels) = labels_of(lab);
        let x = g.constant(data.images.select_rows(&ids));
        let o = cell.d.forward(&mut g, x, &mut Forward::train(w, true, true, &mut self.rng))?;
        let s = real_class_scores(&mut g, o.logits)?;
        let loss = cross_entropy(&mut g, s, &labels)?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        cell.d.params.zero_grad();
        cell.d.params.accumulate_grads(&g);
        adam_step(&mut cell.d.params, &mut self.adam_d, &self.cfg.adam)?;
        cell.d.params.zero_grad();
        Ok(value)
    }

    /// Grows into the next stage of the route.
    pub fn advance_stage(&mut self, data: &ImageSet) -> Result<()> {
        let to = *self
            .cfg
            .route
            .get(self.route_pos + 1)
            .ok_or_else(|| Error::Growth("route has no further stage".into()))?;
        self.grow_to(to, data)
    }

    /// Grows into `to` with fresh optimizer state. Latent labels go back to
    /// the unlabeled pool for the grown discriminator to re-infer. When `to`
    /// is not the next stage of the route, the rest of the route becomes `to`.
    pub fn grow_to(&mut self, to: Stage, data: &ImageSet) -> Result<()> {
        let from = self.cell.stage;
        let mut ids = self.pools.stream();
        if ids.is_empty() {
            ids = self.pools.labeled.iter().map(|p| p.0).collect();
        }
        ids.shuffle(&mut self.rng);
        ids.truncate(self.cfg.batch_size.max(2));
        let calib = data.images.select_rows(&ids);
        self.cell.grow(to, self.cfg.noise_std, &calib, &mut self.rng)?;
        self.adam_d = AdamState::new(&self.cell.d.params);
        self.adam_g = AdamState::new(&self.cell.g.params);
        self.pools.release_latent();
        if self.cfg.route.get(self.route_pos + 1) != Some(&to) {
            self.cfg.route.truncate(self.route_pos + 1);
            self.cfg.route.push(to);
        }
        self.route_pos += 1;
        self.epoch = 0;
        self.best = None;
        self.growths.push((from, to));
        Ok(())
    }

    /// Runs the remaining route. `on_stage` fires after each stage finishes.
    pub fn run(
        &mut self,
        data: &ImageSet,
        sink: &mut dyn FnMut(&MetricsRow),
        on_stage: &mut dyn FnMut(&TrainState) -> Result<()>,
    ) -> Result<Vec<StageReport>> {
        let mut reports = Vec::new();
        loop {
            let mut acc = f64::NAN;
            while !self.stage_done() {
                acc = self.train_epoch(data, sink)?;
            }
            if acc.is_nan() && !self.pools.test.is_empty() {
                acc = self.test_accuracy(data)?;
            }
            reports.push(StageReport { stage: self.cell.stage, test_acc: acc, selected_acc: self.best.map(|b| b.1) });
            on_stage(self)?;
            if self.finished() {
                return Ok(reports);
            }
            self.advance_stage(data)?;
        }
    }
}

/// Mean over features of the batch variance; near zero signals collapse.
fn feature_variance(f: &Tensor) -> f64 {
    let (m, d) = (f.dim(0), f.dim(1));
    if m < 2 {
        return 0.0;
    }
    (0..d)
        .map(|j| {
            let mean = (0..m).map(|i| f.row(i)[j]).sum::<f64>() / m as f64;
            (0..m).map(|i| (f.row(i)[j] - mean).powi(2)).sum::<f64>() / m as f64
        })
        .sum::<f64>()
        / d as f64
}

fn iters_per_epoch(cfg: &TrainConfig, pools: &Pools) -> Result<usize> {
    if let Some(n) = cfg.iters_per_epoch {
        return Ok(n);
    }
    let n = if cfg.supervised_only { pools.labeled.len() } else { pools.stream().len() };
    Ok((n / cfg.batch_size).max(1))
}

/// Trains a full route from scratch; returns per-stage accuracy.
pub fn run_route(cfg: &TrainConfig, data: &ImageSet, pools: Pools, sink: &mut dyn FnMut(&MetricsRow)) -> Result<(TrainState, Vec<StageReport>)> {
    let mut state = TrainState::new(cfg.clone(), data, pools)?;
    let reports = state.run(data, sink, &mut |_| Ok(()))?;
    Ok((state, reports))
}

/// Every nonempty increasing route over the three stages, in table order.
pub fn all_routes() -> Vec<Vec<Stage>> {
    use Stage::*;
    vec![vec![Baby], vec![Junior], vec![Senior], vec![Baby, Junior], vec![Baby, Senior], vec![Junior, Senior], vec![Baby, Junior, Senior]]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteResult {
    pub route: Vec<Stage>,
    pub accuracy: f64,
    pub stage_accuracy: Vec<f64>,
}

/// Trains every route in [`all_routes`] with the same data split and seed.
pub fn compare_routes(cfg: &TrainConfig, data: &ImageSet, pools: &Pools, sink: &mut dyn FnMut(&[Stage], &MetricsRow)) -> Result<Vec<RouteResult>> {
    all_routes()
        .into_iter()
        .map(|route| {
            let cfg = TrainConfig { route: route.clone(), ..cfg.clone() };
            let (_, reports) = run_route(&cfg, data, pools.clone(), &mut |row| sink(&route, row))?;
            Ok(RouteResult {
                accuracy: reports.last().map_or(f64::NAN, |r| r.test_acc),
                stage_accuracy: reports.iter().map(|r| r.test_acc).collect(),
                route,
            })
        })
        .collect()
}
