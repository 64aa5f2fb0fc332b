//! Convolution block transformation: growing a trained shallow network into
//! a deeper one without changing what it computes.
//!
//! A grown network evaluates `shortcut(h) + w(t)·block(h)` in front of the
//! pooling head, where `h` is the shallow pre-pooling activation and
//! `w(t) = 1 − e^{−t}` ramps from zero as training in the new stage goes on.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{Discriminator, Forward, Generator, Mode, Network};
use crate::netspec::{
    desk_growth_rows, parse_layer_spec, GrowthMark, GrowthMode, LayerSpec, NetworkSpec, Role, Shortcut, Stage,
};
use crate::tensor::Tensor;

/// Default standard deviation of new-block weights.
pub const DEFAULT_NOISE_STD: f64 = 0.01;

/// Progress through the current growth stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GrowthClock {
    pub iters_done: u64,
    pub iters_per_epoch: u64,
}

impl GrowthClock {
    pub fn new(iters_per_epoch: u64) -> Result<Self> {
        if iters_per_epoch == 0 {
            return Err(Error::InvalidArgument("iters_per_epoch must be at least 1".into()));
        }
        Ok(Self { iters_done: 0, iters_per_epoch })
    }

    /// Epochs elapsed in this stage, fractional.
    pub fn t(&self) -> f64 {
        self.iters_done as f64 / self.iters_per_epoch as f64
    }

    pub fn tick(&mut self) {
        self.iters_done += 1;
    }

    pub fn reset(&mut self) {
        self.iters_done = 0;
    }
}

/// `w(t) = 1 − e^{−t}`.
pub fn adaptive_scale(clock: &GrowthClock) -> f64 {
    scale_at(clock.t())
}

pub fn scale_at(t: f64) -> f64 {
    -(-t).exp_m1()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowthPlan {
    pub role: Role,
    pub source_stage: Stage,
    pub target_stage: Stage,
    pub new_block: Vec<LayerSpec>,
    pub noise_std: f64,
    pub shortcut: Shortcut,
    pub mode: GrowthMode,
}

impl GrowthPlan {
    /// Desk-scale plan from `source` to `target`; skipped stages contribute
    /// their rows to the same block.
    pub fn between(role: Role, source: Stage, target: Stage) -> Result<Self> {
        if target <= source {
            return Err(Error::Growth(format!("cannot grow from {source} to {target}")));
        }
        let mut rows = Vec::new();
        for stage in Stage::ALL.into_iter().filter(|s| *s > source && *s <= target) {
            for r in desk_growth_rows(role, stage) {
                rows.push(parse_layer_spec(r)?);
            }
        }
        Ok(Self {
            role,
            source_stage: source,
            target_stage: target,
            new_block: rows,
            noise_std: DEFAULT_NOISE_STD,
            shortcut: Shortcut::PoolAndZeroPad,
            mode: GrowthMode::Cbt,
        })
    }

    pub fn with_mode(mut self, mode: GrowthMode) -> Self {
        self.mode = mode;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Growth(format!("noise_std {} must be positive", self.noise_std)));
        }
        if self.target_stage <= self.source_stage {
            return Err(Error::Growth(format!("cannot grow from {} to {}", self.source_stage, self.target_stage)));
        }
        if self.new_block.is_empty() {
            return Err(Error::Growth("empty new block".into()));
        }
        if let Some(l) = self.new_block.iter().find(|l| !l.is_conv_like()) {
            return Err(Error::Growth(format!("{l} is not a convolution row")));
        }
        Ok(())
    }

    /// Spec of the grown network: the block is inserted after the last
    /// convolution row and marked as a growth block.
    pub fn target_spec(&self, source: &NetworkSpec) -> Result<NetworkSpec> {
        self.validate()?;
        if source.role != self.role {
            return Err(Error::Growth(format!("plan is for a {}, got a {}", self.role.name(), source.role.name())));
        }
        if source.stage != self.source_stage {
            return Err(Error::Growth(format!(
                "network is at stage {}, plan expects {}",
                source.stage, self.source_stage
            )));
        }
        let at = source
            .layers
            .iter()
            .rposition(LayerSpec::is_conv_like)
            .map(|i| i + 1)
            .ok_or_else(|| Error::Growth("network has no convolution rows".into()))?;
        let mut spec = source.clone();
        spec.stage = self.target_stage;
        spec.layers.splice(at..at, self.new_block.iter().cloned());
        spec.growth.push(GrowthMark { at, mode: self.mode, shortcut: self.shortcut });
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            GrowthMode::Cbt => "cbt",
            GrowthMode::Plain => "plain",
        };
        let _ = write!(
            s,
            "role: {}\nsource: {}\ntarget: {}\nnoise_std: {}\nshortcut: {}\nmode: {mode}\n",
            self.role.name(),
            self.source_stage,
            self.target_stage,
            self.noise_std,
            self.shortcut.name()
        );
        for l in &self.new_block {
            let _ = writeln!(s, "{l}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (mut role, mut source, mut target) = (None, None, None);
        let mut noise_std = DEFAULT_NOISE_STD;
        let mut shortcut = Shortcut::PoolAndZeroPad;
        let mut mode = GrowthMode::Cbt;
        let mut new_block = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            match line.split_once(": ") {
                Some(("role", v)) => role = Some(v.parse()?),
                Some(("source", v)) => source = Some(v.parse()?),
                Some(("target", v)) => target = Some(v.parse()?),
                Some(("noise_std", v)) => {
                    noise_std = v.parse().map_err(|_| Error::InvalidArgument(format!("bad noise_std {v:?}")))?
                }
                Some(("shortcut", v)) => shortcut = v.parse()?,
                Some(("mode", "cbt")) => mode = GrowthMode::Cbt,
                Some(("mode", "plain")) => mode = GrowthMode::Plain,
                Some(("mode", v)) => return Err(Error::InvalidArgument(format!("bad growth mode {v:?}"))),
                _ => new_block.push(parse_layer_spec(line)?),
            }
        }
        let missing = |k: &str| Error::InvalidArgument(format!("growth plan lacks {k}"));
        let plan = Self {
            role: role.ok_or_else(|| missing("role"))?,
            source_stage: source.ok_or_else(|| missing("source"))?,
            target_stage: target.ok_or_else(|| missing("target"))?,
            new_block,
            noise_std,
            shortcut,
            mode,
        };
        plan.validate()?;
        Ok(plan)
    }
}

fn prefix(role: Role) -> &'static str {
    match role {
        Role::Discriminator => "d",
        Role::Generator => "g",
    }
}

/// Grows `shallow` according to `plan`. `current_scale` is the weight the
/// shallow network's own newest block (if any) runs at; it is frozen into
/// the grown network. The shallow network is never modified.
pub fn grow_network<N: Network>(shallow: &N, plan: &GrowthPlan, current_scale: f64, rng: &mut ChaCha8Rng) -> Result<N> {
    let spec = plan.target_spec(shallow.spec())?;
    let mut deep = N::build(&spec, rng)?;
    let pre = prefix(plan.role);
    let new_block = format!("{pre}/block{}/", shallow.num_growth_blocks());
    let frozen_block = shallow.num_growth_blocks().checked_sub(1).map(|b| format!("{pre}/block{b}/scale"));
    let src = shallow.params();
    let dst = deep.params_mut();
    for p in src.iter() {
        let id = dst
            .id_of(&p.name)
            .ok_or_else(|| Error::Growth(format!("grown network lacks parameter {}", p.name)))?;
        let target = &mut dst.get_mut(id).value;
        if target.shape() == p.value.shape() {
            *target = p.value.clone();
            continue;
        }
        let (old, new) = (p.value.shape(), target.shape().to_vec());
        if plan.mode == GrowthMode::Plain && new[0] < old[0] {
            // A narrower plain block feeds a fresh head.
            *target = Tensor::randn(&new, plan.noise_std, rng);
            continue;
        }
        if old.len() != new.len() || old[1..] != new[1..] || new[0] < old[0] {
            return Err(Error::Growth(format!("{}: cannot extend {old:?} to {new:?}", p.name)));
        }
        let mut data = p.value.data().to_vec();
        let extra: usize = (new[0] - old[0]) * new[1..].iter().product::<usize>();
        data.extend(Tensor::randn(&[extra], plan.noise_std, rng).into_data());
        *target = Tensor::new(new, data)?;
    }
    if let Some(name) = frozen_block {
        let id = dst.id_of(&name).expect("scale of existing block");
        dst.get_mut(id).value = Tensor::scalar(current_scale);
    }
    // Normalization scales count as weights here; drawn small, they keep the
    // new block near zero even though its convolutions are normalized.
    let fresh = |n: &str| n.starts_with(&new_block) && (n.ends_with("/weight") || n.ends_with("/bn/gamma"));
    for p in dst.iter_mut().filter(|p| fresh(&p.name)) {
        p.value = Tensor::randn(p.value.shape(), plan.noise_std, rng);
    }
    Ok(deep)
}

/// Trainable values a grown network has beyond its shallow source, derived
/// from the plan rows alone. Negative when a plain block narrows the head.
pub fn added_trainable_params(shallow: &NetworkSpec, plan: &GrowthPlan) -> Result<i64> {
    let (trunk, blocks) = shallow.conv_segments();
    let mut c = out_width(shallow, &trunk);
    for (mark, rows) in &blocks {
        c = merged(mark, c, out_width(shallow, rows));
    }
    let before = c;
    let mut added = 0;
    for row in plan.new_block.iter().flat_map(LayerSpec::expand) {
        let (kernel, channels) = match row {
            LayerSpec::Conv { kernel, channels, .. } | LayerSpec::Deconv { kernel, channels, .. } => (kernel, channels),
            _ => unreachable!("validated conv rows"),
        };
        let out = shallow.width(channels);
        added += c * out * kernel * kernel + 2 * out;
        c = out;
    }
    let mark = GrowthMark { at: 0, mode: plan.mode, shortcut: plan.shortcut };
    let delta = merged(&mark, before, c) as i64 - before as i64;
    let fan_out = match shallow.role {
        Role::Discriminator => shallow.classes + 1,
        Role::Generator => {
            let (_, _, oc) = shallow.output_extent().unwrap_or((0, 0, 3));
            oc * crate::model::OUTPUT_KERNEL * crate::model::OUTPUT_KERNEL
        }
    };
    Ok(added as i64 + delta * fan_out as i64)
}

fn out_width(spec: &NetworkSpec, rows: &[LayerSpec]) -> usize {
    match rows.last() {
        Some(LayerSpec::Conv { channels, .. } | LayerSpec::Deconv { channels, .. }) => spec.width(*channels),
        _ => 0,
    }
}

fn merged(mark: &GrowthMark, before: usize, block: usize) -> usize {
    match mark.mode {
        GrowthMode::Cbt => before.max(block),
        GrowthMode::Plain => block,
    }
}

/// Sets running statistics of never-calibrated growth blocks from one
/// batch of real images.
pub fn calibrate_discriminator(d: &mut Discriminator, images: &Tensor) -> Result<()> {
    if images.is_empty() || images.dim(0) == 0 {
        return Err(Error::Empty("calibration batch"));
    }
    ensure_uncalibrated(d.body.blocks.iter().any(|b| !b.calibrated(&d.params)))?;
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let mut ctx = Forward { mode: Mode::Calibrate, trainable: false, update_stats: false, scale: 0.0, rng: None };
    d.forward(&mut g, x, &mut ctx)?;
    Ok(())
}

/// Generator counterpart of [`calibrate_discriminator`], driven by latents.
pub fn calibrate_generator(gen: &mut Generator, latents: &Tensor) -> Result<()> {
    if latents.is_empty() || latents.dim(0) == 0 {
        return Err(Error::Empty("calibration batch"));
    }
    ensure_uncalibrated(gen.body.blocks.iter().any(|b| !b.calibrated(&gen.params)))?;
    let mut g = Graph::new();
    let z = g.constant(latents.clone());
    let mut ctx = Forward { mode: Mode::Calibrate, trainable: false, update_stats: false, scale: 0.0, rng: None };
    gen.forward(&mut g, z, &mut ctx)?;
    Ok(())
}

fn ensure_uncalibrated(any: bool) -> Result<()> {
    if any {
        Ok(())
    } else {
        Err(Error::Growth("no uncalibrated growth block".into()))
    }
}
