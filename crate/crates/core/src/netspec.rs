//! Layer notation, network blueprints and latent priors.
//!
//! Layer lines use the table notation `(type)(kernel)-(channels)S(stride)`,
//! e.g. `Conv3-64S2` or `Deconv5-128S1`, optionally followed by a repetition
//! marker `×n`. A [`NetworkSpec`] serializes as a handful of `key: value`
//! header lines followed by one layer per line; a `grow <mode> <shortcut>`
//! line opens a growth block appended by network surgery.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    Uniform,
    Gaussian,
}

impl PriorKind {
    fn word(self) -> &'static str {
        match self {
            PriorKind::Uniform => "Uniform",
            PriorKind::Gaussian => "Gaussian",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Input { h: usize, w: usize, c: usize },
    Latent { dim: usize, prior: PriorKind },
    Conv { kernel: usize, channels: usize, stride: usize, repeat: Option<usize> },
    Deconv { kernel: usize, channels: usize, stride: usize, repeat: Option<usize> },
    /// `FC` alone is the classifier head; `FC-512*4*4` a projection.
    Fc { dims: Vec<usize> },
    Reshape { dims: Vec<usize> },
    Dropout { rate: f64 },
    Gap,
    Softmax,
    Output { h: usize, w: usize, c: usize },
    Tanh,
}

impl LayerSpec {
    pub fn is_conv_like(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Deconv { .. })
    }

    pub fn repeat(&self) -> usize {
        match self {
            LayerSpec::Conv { repeat, .. } | LayerSpec::Deconv { repeat, .. } => repeat.unwrap_or(1),
            _ => 1,
        }
    }

    /// Expands a `×n` marker into `n` unmarked rows.
    pub fn expand(&self) -> Vec<LayerSpec> {
        match self {
            LayerSpec::Conv { kernel, channels, stride, .. } => {
                vec![LayerSpec::Conv { kernel: *kernel, channels: *channels, stride: *stride, repeat: None }; self.repeat()]
            }
            LayerSpec::Deconv { kernel, channels, stride, .. } => {
                vec![LayerSpec::Deconv { kernel: *kernel, channels: *channels, stride: *stride, repeat: None }; self.repeat()]
            }
            other => vec![other.clone()],
        }
    }
}

fn dims_str(dims: &[usize], sep: &str) -> String {
    dims.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Input { h, w, c } => write!(f, "Input ({h}×{w}×{c})"),
            LayerSpec::Latent { dim, prior } => write!(f, "Sample {dim} number from {} Distribution", prior.word()),
            LayerSpec::Conv { kernel, channels, stride, repeat } | LayerSpec::Deconv { kernel, channels, stride, repeat } => {
                let name = if matches!(self, LayerSpec::Conv { .. }) { "Conv" } else { "Deconv" };
                write!(f, "{name}{kernel}-{channels}S{stride}")?;
                if let Some(r) = repeat {
                    write!(f, "×{r}")?;
                }
                Ok(())
            }
            LayerSpec::Fc { dims } if dims.is_empty() => write!(f, "FC"),
            LayerSpec::Fc { dims } => write!(f, "FC-{}", dims_str(dims, "*")),
            LayerSpec::Reshape { dims } => write!(f, "Reshape-({})", dims_str(dims, ",")),
            LayerSpec::Dropout { rate } => write!(f, "Dropout({rate})"),
            LayerSpec::Gap => write!(f, "Global Average Pooling"),
            LayerSpec::Softmax => write!(f, "softmax"),
            LayerSpec::Output { h, w, c } => write!(f, "Output({h}×{w}×{c})"),
            LayerSpec::Tanh => write!(f, "Tanh Activation"),
        }
    }
}

struct Cursor<'a> {
    input: &'a str,
    chars: Vec<char>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(input: &'a str) -> Self {
        Self { input, chars: input.chars().collect(), pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { input: self.input.to_string(), pos: self.pos, msg: msg.into() }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn rest_starts_with(&self, lit: &str) -> bool {
        let lit: Vec<char> = lit.chars().collect();
        self.chars[self.pos..].starts_with(&lit)
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest_starts_with(lit) {
            self.pos += lit.chars().count();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.err(format!("expected {lit:?}")))
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        let v: usize = s.parse().map_err(|_| {
            self.pos = start;
            self.err(format!("{what} out of range"))
        })?;
        if v == 0 {
            self.pos = start;
            return Err(self.err(format!("{what} must be positive")));
        }
        Ok(v)
    }

    fn float(&mut self, what: &str) -> Result<f64> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == '.') {
            self.pos += 1;
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        s.parse().map_err(|_| {
            self.pos = start;
            self.err(format!("expected {what}"))
        })
    }

    fn times(&mut self) -> bool {
        self.eat("×") || self.eat("x")
    }

    fn extent3(&mut self) -> Result<(usize, usize, usize)> {
        let h = self.number("height")?;
        if !self.times() {
            return Err(self.err("expected '×'"));
        }
        let w = self.number("width")?;
        if !self.times() {
            return Err(self.err("expected '×'"));
        }
        let c = self.number("channels")?;
        Ok((h, w, c))
    }

    fn list(&mut self, sep: char, what: &str) -> Result<Vec<usize>> {
        let mut dims = vec![self.number(what)?];
        while self.peek() == Some(sep) {
            self.pos += 1;
            dims.push(self.number(what)?);
        }
        Ok(dims)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.chars.len() {
            return Err(self.err("unexpected trailing characters"));
        }
        Ok(())
    }
}

/// Parses one layer-notation string.
pub fn parse_layer_spec(text: &str) -> Result<LayerSpec> {
    let mut c = Cursor::new(text);
    let spec = if c.eat("Deconv") || c.rest_starts_with("Conv") {
        let deconv = c.pos > 0;
        if !deconv {
            c.expect("Conv")?;
        }
        let kernel = c.number("kernel size")?;
        c.expect("-")?;
        let channels = c.number("channel count")?;
        c.expect("S")?;
        let stride = c.number("stride")?;
        let repeat = if c.times() { Some(c.number("repetition count")?) } else { None };
        if deconv {
            LayerSpec::Deconv { kernel, channels, stride, repeat }
        } else {
            LayerSpec::Conv { kernel, channels, stride, repeat }
        }
    } else if c.eat("Dropout(") {
        let start = c.pos;
        let rate = c.float("dropout rate")?;
        if !(rate > 0.0 && rate < 1.0) {
            c.pos = start;
            return Err(c.err("dropout rate must lie in (0,1)"));
        }
        c.expect(")")?;
        LayerSpec::Dropout { rate }
    } else if c.eat("Global Average Pooling") || c.eat("GAP") {
        LayerSpec::Gap
    } else if c.eat("FC") {
        if c.eat("-") {
            LayerSpec::Fc { dims: c.list('*', "unit count")? }
        } else {
            LayerSpec::Fc { dims: vec![] }
        }
    } else if c.eat("softmax") {
        LayerSpec::Softmax
    } else if c.eat("Reshape-(") {
        let dims = c.list(',', "extent")?;
        c.expect(")")?;
        LayerSpec::Reshape { dims }
    } else if c.eat("Input") {
        c.eat(" ");
        c.expect("(")?;
        let (h, w, ch) = c.extent3()?;
        c.expect(")")?;
        LayerSpec::Input { h, w, c: ch }
    } else if c.eat("Output") {
        c.expect("(")?;
        let (h, w, ch) = c.extent3()?;
        c.expect(")")?;
        LayerSpec::Output { h, w, c: ch }
    } else if c.eat("Sample ") {
        let dim = c.number("latent dimension")?;
        c.expect(" number from ")?;
        let prior = if c.eat("Uniform") {
            PriorKind::Uniform
        } else if c.eat("Gaussian") {
            PriorKind::Gaussian
        } else {
            return Err(c.err("expected 'Uniform' or 'Gaussian'"));
        };
        c.expect(" Distribution")?;
        LayerSpec::Latent { dim, prior }
    } else if c.eat("Tanh Activation") {
        LayerSpec::Tanh
    } else {
        return Err(c.err("unknown layer type"));
    };
    c.finish()?;
    Ok(spec)
}

impl FromStr for LayerSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_layer_spec(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Baby,
    Junior,
    Senior,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Baby, Stage::Junior, Stage::Senior];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Baby => "baby",
            Stage::Junior => "junior",
            Stage::Senior => "senior",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baby" => Ok(Stage::Baby),
            "junior" => Ok(Stage::Junior),
            "senior" => Ok(Stage::Senior),
            other => Err(Error::InvalidArgument(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Generator,
    Discriminator,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Discriminator => "discriminator",
        }
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "generator" => Ok(Role::Generator),
            "discriminator" => Ok(Role::Discriminator),
            other => Err(Error::InvalidArgument(format!("unknown role {other:?}"))),
        }
    }
}

/// How a growth block joins the existing trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrowthMode {
    /// `shortcut(h) + w(t)·block(h)`.
    Cbt,
    /// Block inserted in sequence, no shortcut or scale.
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    /// 2×2 average pooling per stride-2 block layer, then channel zero padding.
    PoolAndZeroPad,
}

impl Shortcut {
    pub fn name(self) -> &'static str {
        match self {
            Shortcut::Identity => "identity",
            Shortcut::PoolAndZeroPad => "pool_and_zero_pad",
        }
    }
}

impl FromStr for Shortcut {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(Shortcut::Identity),
            "pool_and_zero_pad" => Ok(Shortcut::PoolAndZeroPad),
            other => Err(Error::InvalidArgument(format!("unknown shortcut {other:?}"))),
        }
    }
}

/// Start of a growth block inside a spec's layer list.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthMark {
    /// Index into `NetworkSpec::layers` of the block's first row.
    pub at: usize,
    pub mode: GrowthMode,
    pub shortcut: Shortcut,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub stage: Stage,
    pub role: Role,
    pub classes: usize,
    /// Channel-width multiplier applied to conv/deconv/projection widths.
    pub scale: f64,
    pub layers: Vec<LayerSpec>,
    pub growth: Vec<GrowthMark>,
}

impl NetworkSpec {
    /// Conv/deconv rows (expanded) split into the trunk and each growth block.
    pub fn conv_segments(&self) -> (Vec<LayerSpec>, Vec<(GrowthMark, Vec<LayerSpec>)>) {
        let mut trunk = Vec::new();
        let mut blocks: Vec<(GrowthMark, Vec<LayerSpec>)> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(mark) = self.growth.iter().find(|m| m.at == i) {
                blocks.push((mark.clone(), Vec::new()));
            }
            if !layer.is_conv_like() {
                continue;
            }
            match blocks.last_mut() {
                Some((_, rows)) => rows.extend(layer.expand()),
                None => trunk.extend(layer.expand()),
            }
        }
        (trunk, blocks)
    }

    /// Scaled channel width (at least 1).
    pub fn width(&self, channels: usize) -> usize {
        ((channels as f64 * self.scale).round() as usize).max(1)
    }

    pub fn input_extent(&self) -> Option<(usize, usize, usize)> {
        self.layers.iter().find_map(|l| match l {
            LayerSpec::Input { h, w, c } => Some((*h, *w, *c)),
            _ => None,
        })
    }

    pub fn output_extent(&self) -> Option<(usize, usize, usize)> {
        self.layers.iter().find_map(|l| match l {
            LayerSpec::Output { h, w, c } => Some((*h, *w, *c)),
            _ => None,
        })
    }

    pub fn latent(&self) -> Option<LatentPrior> {
        self.layers.iter().find_map(|l| match l {
            LayerSpec::Latent { dim, prior } => Some(LatentPrior { dim: *dim, kind: *prior }),
            _ => None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "role: {}\nstage: {}\nclasses: {}\nscale: {}\n",
            self.role.name(),
            self.stage,
            self.classes,
            self.scale
        );
        for (i, l) in self.layers.iter().enumerate() {
            for m in self.growth.iter().filter(|m| m.at == i) {
                let mode = match m.mode {
                    GrowthMode::Cbt => "cbt",
                    GrowthMode::Plain => "plain",
                };
                s.push_str(&format!("grow {mode} {}\n", m.shortcut.name()));
            }
            s.push_str(&l.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut stage = None;
        let mut role = None;
        let mut classes = None;
        let mut scale = 1.0;
        let mut layers = Vec::new();
        let mut growth = Vec::new();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("grow ") {
                let mut parts = rest.split_whitespace();
                let mode = match parts.next() {
                    Some("cbt") => GrowthMode::Cbt,
                    Some("plain") => GrowthMode::Plain,
                    other => return Err(Error::InvalidArgument(format!("bad growth mode {other:?}"))),
                };
                let shortcut = parts.next().unwrap_or("identity").parse()?;
                growth.push(GrowthMark { at: layers.len(), mode, shortcut });
                continue;
            }
            if let Some((key, value)) = line.split_once(": ") {
                match key {
                    "role" => role = Some(value.parse()?),
                    "stage" => stage = Some(value.parse()?),
                    "classes" => {
                        classes = Some(value.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad classes {value:?}")))?)
                    }
                    "scale" => scale = value.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad scale {value:?}")))?,
                    _ => return Err(Error::InvalidArgument(format!("unknown header {key:?}"))),
                }
                continue;
            }
            layers.push(parse_layer_spec(line)?);
        }
        let spec = NetworkSpec {
            stage: stage.ok_or_else(|| Error::InvalidArgument("missing stage".into()))?,
            role: role.ok_or_else(|| Error::InvalidArgument("missing role".into()))?,
            classes: classes.unwrap_or(10),
            scale,
            layers,
            growth,
        };
        if !(spec.scale > 0.0) {
            return Err(Error::InvalidArgument("scale must be positive".into()));
        }
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentPrior {
    pub dim: usize,
    pub kind: PriorKind,
}

impl Default for LatentPrior {
    fn default() -> Self {
        Self { dim: 100, kind: PriorKind::Uniform }
    }
}

/// `m × dim` i.i.d. latent samples.
pub fn sample_latent(prior: &LatentPrior, m: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if m == 0 || prior.dim == 0 {
        return Err(Error::InvalidArgument("latent batch and dimension must be positive".into()));
    }
    let n = m * prior.dim;
    let data: Vec<f64> = match prior.kind {
        PriorKind::Uniform => {
            let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
            (0..n).map(|_| u.sample(rng)).collect()
        }
        PriorKind::Gaussian => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    };
    Tensor::new(vec![m, prior.dim], data)
}

/// Table cells for the reference discriminators, one column per stage.
pub fn reference_discriminator_rows(stage: Stage) -> Vec<&'static str> {
    let input = match stage {
        Stage::Baby => "Input (32×32×3)",
        Stage::Junior => "Input (128×128×3)",
        Stage::Senior => "Input (512×512×3)",
    };
    let mut rows = vec![
        input,
        "Conv3-64S1",
        "Conv3-64S1",
        "Conv3-64S2",
        "Conv3-128S2×2",
        "Conv3-128S1×2",
        "Conv3-128S1×1",
    ];
    if stage >= Stage::Junior {
        rows.extend(["Conv3-192S1×2", "Conv3-192S1×2", "Conv3-192S2×1"]);
    }
    if stage >= Stage::Senior {
        rows.extend(["Conv3-256S1×2", "Conv3-256S1×2", "Conv3-256S2×2"]);
    }
    rows.extend(["Dropout(0.5)", "Global Average Pooling", "FC", "softmax"]);
    rows
}

/// Table cells for the reference generators, one column per stage.
pub fn reference_generator_rows(stage: Stage) -> Vec<&'static str> {
    let mut rows = vec![
        "Sample 100 number from Uniform Distribution",
        "FC-512*4*4",
        "Reshape-(4,4,512)",
        "Deconv5-256S2",
        "Deconv5-128S2",
        "Deconv5-128S2",
    ];
    match stage {
        Stage::Baby => rows.push("Output(32×32×3)"),
        Stage::Junior | Stage::Senior => {
            rows.extend([
                "Deconv5-128S1",
                "Deconv5-128S2",
                "Deconv5-128S2",
                "Deconv5-128S1",
                "Deconv5-64S2",
                "Deconv5-64S2",
                "Deconv5-32S1",
            ]);
            if stage == Stage::Senior {
                rows.extend(["Deconv5-32S2", "Deconv5-32S2", "Output(512×512×3)"]);
            } else {
                rows.push("Output(128×128×3)");
            }
        }
    }
    rows.push("Tanh Activation");
    rows
}

fn spec_from_rows(role: Role, stage: Stage, classes: usize, scale: f64, rows: &[&str]) -> Result<NetworkSpec> {
    Ok(NetworkSpec {
        stage,
        role,
        classes,
        scale,
        layers: rows.iter().map(|r| parse_layer_spec(r)).collect::<Result<_>>()?,
        growth: Vec::new(),
    })
}

/// Reference-resolution blueprint transcribed from the architecture tables.
pub fn reference_spec(role: Role, stage: Stage, classes: usize, scale: f64) -> Result<NetworkSpec> {
    let rows = match role {
        Role::Discriminator => reference_discriminator_rows(stage),
        Role::Generator => reference_generator_rows(stage),
    };
    spec_from_rows(role, stage, classes, scale, &rows)
}

/// Default desk-scale channel multiplier.
pub const DESK_SCALE: f64 = 0.125;

/// Desk-scale blueprint: one input resolution for every stage, growth
/// rows run at stride 1.
pub fn desk_spec(role: Role, stage: Stage, classes: usize, image: (usize, usize, usize)) -> Result<NetworkSpec> {
    let (h, w, c) = image;
    match role {
        Role::Discriminator => {
            let input = format!("Input ({h}×{w}×{c})");
            let mut rows: Vec<&str> = vec![
                &input,
                "Conv3-64S1",
                "Conv3-64S1",
                "Conv3-64S2",
                "Conv3-128S2×1",
                "Conv3-128S1×1",
                "Conv3-128S1×2",
                "Conv3-128S1×1",
            ];
            if stage >= Stage::Junior {
                rows.extend(desk_growth_rows(Role::Discriminator, Stage::Junior));
            }
            if stage >= Stage::Senior {
                rows.extend(desk_growth_rows(Role::Discriminator, Stage::Senior));
            }
            rows.extend(["Dropout(0.5)", "Global Average Pooling", "FC", "softmax"]);
            spec_from_rows(role, stage, classes, DESK_SCALE, &rows)
        }
        Role::Generator => {
            if h % 8 != 0 || w % 8 != 0 {
                return Err(Error::InvalidArgument(format!("desk generator needs extents divisible by 8, got {h}x{w}")));
            }
            let base = 512;
            let fc = format!("FC-{base}*{}*{}", h / 8, w / 8);
            let reshape = format!("Reshape-({},{},{base})", h / 8, w / 8);
            let output = format!("Output({h}×{w}×{c})");
            let mut rows: Vec<&str> = vec![
                "Sample 100 number from Uniform Distribution",
                &fc,
                &reshape,
                "Deconv5-256S2",
                "Deconv5-128S2",
                "Deconv5-128S2",
            ];
            if stage >= Stage::Junior {
                rows.extend(desk_growth_rows(Role::Generator, Stage::Junior));
            }
            if stage >= Stage::Senior {
                rows.extend(desk_growth_rows(Role::Generator, Stage::Senior));
            }
            rows.extend([output.as_str(), "Tanh Activation"]);
            spec_from_rows(role, stage, classes, DESK_SCALE, &rows)
        }
    }
}

/// Rows a desk-scale network gains when growing into `stage`.
pub fn desk_growth_rows(role: Role, stage: Stage) -> Vec<&'static str> {
    match (role, stage) {
        (_, Stage::Baby) => vec![],
        (Role::Discriminator, Stage::Junior) => vec!["Conv3-192S1×2", "Conv3-192S1×2", "Conv3-192S1×1"],
        (Role::Discriminator, Stage::Senior) => vec!["Conv3-256S1×2", "Conv3-256S1×2", "Conv3-256S1×2"],
        (Role::Generator, Stage::Junior) => vec!["Deconv5-64S1", "Deconv5-32S1"],
        (Role::Generator, Stage::Senior) => vec!["Deconv5-32S1"],
    }
}
