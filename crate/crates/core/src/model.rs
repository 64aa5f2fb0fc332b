//! Generator and discriminator models built from a [`NetworkSpec`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution};

use crate::autograd::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::netspec::{GrowthMode, LatentPrior, LayerSpec, NetworkSpec, Role, Shortcut, Stage};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Running-statistics momentum: `running ← 0.9·running + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.9;
/// Negative slope of the discriminator's leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Kernel of the generator's final projection onto image channels.
pub const OUTPUT_KERNEL: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active.
    Train,
    /// Running statistics, dropout off.
    Eval,
    /// Like `Eval`, except growth blocks that were never calibrated run on
    /// batch statistics and store them as their running statistics.
    Calibrate,
}

/// Per-call forward options.
pub struct Forward<'a> {
    pub mode: Mode,
    /// Bind parameters as differentiable leaves.
    pub trainable: bool,
    /// Fold train-mode batch statistics into the running statistics.
    pub update_stats: bool,
    /// Scale `w(t)` of the active (last) growth block.
    pub scale: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    pub fn eval(scale: f64) -> Self {
        Self { mode: Mode::Eval, trainable: false, update_stats: false, scale, rng: None }
    }

    pub fn train(scale: f64, trainable: bool, update_stats: bool, rng: &'a mut ChaCha8Rng) -> Self {
        Self { mode: Mode::Train, trainable, update_stats, scale, rng: Some(rng) }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BnUnit {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub initialized: ParamId,
    pub name: String,
}

impl BnUnit {
    fn new(params: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.add(format!("{prefix}/bn/gamma"), Tensor::full(&[channels], 1.0), true)?,
            beta: params.add(format!("{prefix}/bn/beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: params.add(format!("{prefix}/bn/running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: params.add(format!("{prefix}/bn/running_var"), Tensor::full(&[channels], 1.0), false)?,
            initialized: params.add(format!("{prefix}/bn/initialized"), Tensor::zeros(&[1]), false)?,
            name: prefix.to_string(),
        })
    }

    pub fn is_initialized(&self, params: &ParamStore) -> bool {
        params.get(self.initialized).value.item() != 0.0
    }

    /// `batch_stats` selects batch statistics; `store_direct` overwrites
    /// the running statistics instead of blending them in.
    fn forward(
        &self,
        g: &mut Graph,
        params: &mut ParamStore,
        x: Var,
        trainable: bool,
        batch_stats: bool,
        update: bool,
        store_direct: bool,
    ) -> Result<Var> {
        let gamma = g.param(params, self.gamma, trainable);
        let beta = g.param(params, self.beta, trainable);
        if !batch_stats {
            if !self.is_initialized(params) {
                return Err(Error::UninitializedStats { layer: self.name.clone() });
            }
            let mean = params.get(self.running_mean).value.data().to_vec();
            let var = params.get(self.running_var).value.data().to_vec();
            return Ok(g.batch_norm(x, gamma, beta, Some((&mean, &var)))?.0);
        }
        let (y, stats) = g.batch_norm(x, gamma, beta, None)?;
        let stats = stats.expect("batch statistics requested");
        if update {
            let fresh = store_direct || !self.is_initialized(params);
            for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
                let run = params.get_mut(id).value.data_mut();
                for (r, b) in run.iter_mut().zip(batch) {
                    *r = if fresh { *b } else { BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b };
                }
            }
            params.get_mut(self.initialized).value.data_mut()[0] = 1.0;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvUnit {
    pub transposed: bool,
    pub weight: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub out_c: usize,
    pub bn: Option<BnUnit>,
    pub act: Activation,
}

impl ConvUnit {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn forward(&self, g: &mut Graph, params: &mut ParamStore, x: Var, ctx: &Forward, batch_stats: bool, direct: bool) -> Result<Var> {
        let w = g.param(params, self.weight, ctx.trainable);
        let y = if self.transposed {
            g.conv_transpose2d(x, w, self.stride, self.pad())?
        } else {
            g.conv2d(x, w, self.stride, self.pad())?
        };
        let y = match &self.bn {
            Some(bn) => bn.forward(g, params, y, ctx.trainable, batch_stats, ctx.update_stats || direct, direct)?,
            None => y,
        };
        Ok(g.activation(y, self.act))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct GrowthBlock {
    pub units: Vec<ConvUnit>,
    pub mode: GrowthMode,
    pub shortcut: Shortcut,
    /// Fixed scale used once a later block has been grown on top.
    pub scale: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub pools: usize,
}

impl GrowthBlock {
    /// Channel width after the shortcut merge.
    pub fn merged_c(&self) -> usize {
        match self.mode {
            GrowthMode::Cbt => self.in_c.max(self.out_c),
            GrowthMode::Plain => self.out_c,
        }
    }

    pub fn calibrated(&self, params: &ParamStore) -> bool {
        self.units.iter().filter_map(|u| u.bn.as_ref()).all(|bn| bn.is_initialized(params))
    }
}

/// Sequential conv/deconv trunk followed by growth blocks.
#[derive(Clone, Debug, Default)]
pub(crate) struct Body {
    pub units: Vec<ConvUnit>,
    pub blocks: Vec<GrowthBlock>,
}

impl Body {
    fn forward(&self, g: &mut Graph, params: &mut ParamStore, mut h: Var, ctx: &Forward) -> Result<Var> {
        let train = ctx.mode == Mode::Train;
        for u in &self.units {
            h = u.forward(g, params, h, ctx, train, false)?;
        }
        let last = self.blocks.len().saturating_sub(1);
        for (bi, block) in self.blocks.iter().enumerate() {
            let calibrating = ctx.mode == Mode::Calibrate && !block.calibrated(params);
            let batch_stats = train || calibrating;
            if block.mode == GrowthMode::Plain {
                for u in &block.units {
                    h = u.forward(g, params, h, ctx, batch_stats, calibrating)?;
                }
                continue;
            }
            let w = if bi == last { ctx.scale } else { params.get(block.scale).value.item() };
            let merged = block.merged_c();
            let mut short = h;
            for _ in 0..block.pools {
                short = g.avg_pool2(short)?;
            }
            if block.in_c < merged {
                short = g.pad_channels(short, merged)?;
            }
            if w == 0.0 && !batch_stats {
                h = short;
                continue;
            }
            let mut b = h;
            for u in &block.units {
                b = u.forward(g, params, b, ctx, batch_stats, calibrating)?;
            }
            if block.out_c < merged {
                b = g.pad_channels(b, merged)?;
            }
            let scaled = g.scale(b, w);
            h = g.add(short, scaled)?;
        }
        Ok(h)
    }
}

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(shape, -a, a, rng)
}

fn build_err(index: usize, layer: &LayerSpec, msg: impl Into<String>) -> Error {
    Error::Build { index, layer: layer.to_string(), msg: msg.into() }
}

/// Walks the conv rows of a spec, tracking `(channels, h, w)`.
struct ChainBuilder<'a> {
    spec: &'a NetworkSpec,
    prefix: &'a str,
    c: usize,
    h: usize,
    w: usize,
}

impl ChainBuilder<'_> {
    fn unit(
        &mut self,
        params: &mut ParamStore,
        index: usize,
        layer: &LayerSpec,
        name: &str,
        rng: &mut impl Rng,
    ) -> Result<ConvUnit> {
        let (transposed, kernel, channels, stride) = match layer {
            LayerSpec::Conv { kernel, channels, stride, .. } => (false, *kernel, *channels, *stride),
            LayerSpec::Deconv { kernel, channels, stride, .. } => (true, *kernel, *channels, *stride),
            _ => return Err(build_err(index, layer, "expected a convolution row")),
        };
        let expect_role = if transposed { Role::Generator } else { Role::Discriminator };
        if self.spec.role != expect_role {
            return Err(build_err(index, layer, format!("not valid in a {}", self.spec.role.name())));
        }
        let out_c = self.spec.width(channels);
        let pad = kernel / 2;
        let (nh, nw) = if transposed {
            (self.h * stride, self.w * stride)
        } else {
            if kernel > self.h + 2 * pad || kernel > self.w + 2 * pad {
                return Err(build_err(index, layer, format!("kernel does not fit {}x{}", self.h, self.w)));
            }
            ((self.h + 2 * pad - kernel) / stride + 1, (self.w + 2 * pad - kernel) / stride + 1)
        };
        if kernel % 2 == 0 {
            return Err(build_err(index, layer, "kernel size must be odd"));
        }
        let k2 = kernel * kernel;
        let (shape, fan_in, fan_out) = if transposed {
            ([self.c, out_c, kernel, kernel], self.c * k2, out_c * k2)
        } else {
            ([out_c, self.c, kernel, kernel], self.c * k2, out_c * k2)
        };
        let kind = if transposed { "deconv" } else { "conv" };
        let prefix = format!("{}/{name}", self.prefix);
        let weight = params.add(format!("{prefix}/{kind}/weight"), xavier(&shape, fan_in, fan_out, rng), true)?;
        let bn = Some(BnUnit::new(params, &prefix, out_c)?);
        let act = match self.spec.role {
            Role::Discriminator => Activation::LeakyRelu(LEAKY_SLOPE),
            Role::Generator => Activation::Relu,
        };
        let unit = ConvUnit { transposed, weight, kernel, stride, out_c, bn, act };
        self.c = out_c;
        self.h = nh;
        self.w = nw;
        Ok(unit)
    }

    /// Builds trunk and growth blocks from the spec's conv rows.
    fn body(&mut self, params: &mut ParamStore, rng: &mut impl Rng) -> Result<Body> {
        let mut body = Body::default();
        let mut block: Option<GrowthBlock> = None;
        let mut trunk_i = 0;
        let mut block_i = 0;
        let mut unit_i = 0;
        for (index, layer) in self.spec.layers.iter().enumerate() {
            if let Some(mark) = self.spec.growth.iter().find(|m| m.at == index) {
                if let Some(b) = block.take() {
                    self.close_block(b, &mut body, index, layer)?;
                }
                let scale = params.add(format!("{}/block{block_i}/scale", self.prefix), Tensor::scalar(1.0), false)?;
                block = Some(GrowthBlock {
                    units: vec![],
                    mode: mark.mode,
                    shortcut: mark.shortcut,
                    scale,
                    in_c: self.c,
                    out_c: self.c,
                    pools: 0,
                });
                block_i += 1;
                unit_i = 0;
            }
            if !layer.is_conv_like() {
                if let Some(b) = block.take() {
                    self.close_block(b, &mut body, index, layer)?;
                }
                continue;
            }
            for row in layer.expand() {
                match block.as_mut() {
                    Some(b) => {
                        let (h0, w0) = (self.h, self.w);
                        let u = self.unit(params, index, &row, &format!("block{}/{unit_i}", block_i - 1), rng)?;
                        if self.h * 2 == h0 && self.w * 2 == w0 && h0 % 2 == 0 && w0 % 2 == 0 {
                            b.pools += 1;
                        } else if (self.h, self.w) != (h0, w0) {
                            return Err(build_err(index, &row, "growth block rows may only keep or halve the extent"));
                        }
                        b.out_c = u.out_c;
                        b.units.push(u);
                        unit_i += 1;
                    }
                    None => {
                        if !body.blocks.is_empty() {
                            return Err(build_err(index, &row, "trunk rows must precede growth blocks"));
                        }
                        body.units.push(self.unit(params, index, &row, &format!("trunk/{trunk_i}"), rng)?);
                        trunk_i += 1;
                    }
                }
            }
        }
        if let Some(b) = block.take() {
            let last = self.spec.layers.last().cloned().unwrap_or(LayerSpec::Gap);
            self.close_block(b, &mut body, self.spec.layers.len(), &last)?;
        }
        Ok(body)
    }

    fn close_block(&mut self, b: GrowthBlock, body: &mut Body, index: usize, layer: &LayerSpec) -> Result<()> {
        if b.units.is_empty() {
            return Err(build_err(index, layer, "empty growth block"));
        }
        if b.mode == GrowthMode::Cbt {
            if b.shortcut == Shortcut::Identity && (b.in_c != b.out_c || b.pools > 0) {
                return Err(build_err(index, layer, "identity shortcut needs a shape-preserving block"));
            }
            if self.spec.role == Role::Generator && b.pools > 0 {
                return Err(build_err(index, layer, "generator growth blocks must keep the extent"));
            }
        }
        self.c = b.merged_c();
        body.blocks.push(b);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// `[m, k+1]`; the last column scores "generated".
    pub logits: Var,
    /// GAP features `[m, C]`.
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub(crate) body: Body,
    pub(crate) dropout: Option<f64>,
    pub(crate) head_w: ParamId,
    pub(crate) head_b: ParamId,
    input: (usize, usize, usize),
}

impl Discriminator {
    pub fn build(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.role != Role::Discriminator {
            return Err(Error::InvalidArgument("spec is not a discriminator".into()));
        }
        if spec.classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let first = spec.layers.first().ok_or(Error::Empty("network spec"))?;
        let LayerSpec::Input { h, w, c } = *first else {
            return Err(build_err(0, first, "discriminator must start with an Input row"));
        };
        let mut params = ParamStore::new();
        let mut chain = ChainBuilder { spec, prefix: "d", c, h, w };
        let body = chain.body(&mut params, rng)?;
        if body.units.is_empty() {
            return Err(Error::InvalidArgument("discriminator has no convolution rows".into()));
        }
        let mut dropout = None;
        let mut head = None;
        let mut seen_gap = false;
        for (index, layer) in spec.layers.iter().enumerate().skip(1) {
            match layer {
                l if l.is_conv_like() => {}
                LayerSpec::Dropout { rate } => {
                    if seen_gap {
                        return Err(build_err(index, layer, "dropout must precede pooling"));
                    }
                    dropout = Some(*rate);
                }
                LayerSpec::Gap => seen_gap = true,
                LayerSpec::Fc { dims } if dims.is_empty() => {
                    if !seen_gap {
                        return Err(build_err(index, layer, "classifier head requires pooled features"));
                    }
                    head = Some(index);
                }
                LayerSpec::Softmax if head.is_some() => {}
                _ => return Err(build_err(index, layer, "unexpected row in a discriminator")),
            }
        }
        if head.is_none() {
            return Err(Error::InvalidArgument("discriminator lacks a Global Average Pooling + FC head".into()));
        }
        let feat = chain.c;
        let k1 = spec.classes + 1;
        let head_w = params.add("d/head/weight", xavier(&[feat, k1], feat, k1, rng), true)?;
        let head_b = params.add("d/head/bias", Tensor::zeros(&[k1]), true)?;
        Ok(Self { spec: spec.clone(), params, body, dropout, head_w, head_b, input: (h, w, c) })
    }

    pub fn stage(&self) -> Stage {
        self.spec.stage
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// `(h, w, c)` of accepted images.
    pub fn input_extent(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn feature_dim(&self) -> usize {
        self.params.get(self.head_w).value.dim(0)
    }

    pub fn num_conv_layers(&self) -> usize {
        self.body.units.len() + self.body.blocks.iter().map(|b| b.units.len()).sum::<usize>()
    }

    pub fn num_growth_blocks(&self) -> usize {
        self.body.blocks.len()
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, ctx: &mut Forward) -> Result<DiscOutput> {
        let (h, w, c) = self.input;
        match g.shape(x) {
            [_, cc, hh, ww] if (*hh, *ww, *cc) == (h, w, c) => {}
            s => return Err(Error::shape("discriminator", format!("expected [m, {c}, {h}, {w}] input, got {s:?}"))),
        }
        let mut hid = self.body.forward(g, &mut self.params, x, ctx)?;
        if let (Some(rate), Mode::Train) = (self.dropout, ctx.mode) {
            let rng = ctx.rng.as_deref_mut().ok_or_else(|| Error::InvalidArgument("train-mode dropout needs an rng".into()))?;
            let keep = Bernoulli::new(1.0 - rate).expect("rate in (0,1)");
            let shape = g.shape(hid).to_vec();
            let n: usize = shape.iter().product();
            let inv = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..n).map(|_| if keep.sample(rng) { inv } else { 0.0 }).collect();
            hid = g.mul_const(hid, Tensor::new(shape, mask)?)?;
        }
        let features = g.global_avg_pool(hid)?;
        let w = g.param(&self.params, self.head_w, ctx.trainable);
        let b = g.param(&self.params, self.head_b, ctx.trainable);
        let z = g.matmul(features, w)?;
        let logits = g.add_bias(z, b)?;
        Ok(DiscOutput { logits, features })
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub prior: LatentPrior,
    pub(crate) fc_w: ParamId,
    pub(crate) fc_b: ParamId,
    pub(crate) stem_bn: BnUnit,
    /// `(c, h, w)` after the reshape.
    pub(crate) stem: (usize, usize, usize),
    pub(crate) body: Body,
    pub(crate) out: ConvUnit,
    output: (usize, usize, usize),
}

impl Generator {
    pub fn build(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.role != Role::Generator {
            return Err(Error::InvalidArgument("spec is not a generator".into()));
        }
        let rows = &spec.layers;
        let prior = match rows.first() {
            Some(LayerSpec::Latent { dim, prior }) => LatentPrior { dim: *dim, kind: *prior },
            Some(l) => return Err(build_err(0, l, "generator must start with a latent sample row")),
            None => return Err(Error::Empty("network spec")),
        };
        let units = match rows.get(1) {
            Some(LayerSpec::Fc { dims }) if !dims.is_empty() => dims.iter().product::<usize>(),
            Some(l) => return Err(build_err(1, l, "expected FC projection")),
            None => return Err(Error::InvalidArgument("generator lacks FC projection".into())),
        };
        let (sh, sw, sc) = match rows.get(2) {
            Some(LayerSpec::Reshape { dims }) if dims.len() == 3 => {
                if dims.iter().product::<usize>() != units {
                    return Err(build_err(2, &rows[2], format!("reshape does not match {units} FC units")));
                }
                (dims[0], dims[1], dims[2])
            }
            Some(l) => return Err(build_err(2, l, "expected Reshape-(h,w,c)")),
            None => return Err(Error::InvalidArgument("generator lacks reshape".into())),
        };
        let stem_c = spec.width(sc);
        let mut params = ParamStore::new();
        let proj = stem_c * sh * sw;
        let fc_w = params.add("g/stem/fc/weight", xavier(&[prior.dim, proj], prior.dim, proj, rng), true)?;
        let fc_b = params.add("g/stem/fc/bias", Tensor::zeros(&[proj]), true)?;
        let stem_bn = BnUnit::new(&mut params, "g/stem", stem_c)?;
        let mut chain = ChainBuilder { spec, prefix: "g", c: stem_c, h: sh, w: sw };
        let body = chain.body(&mut params, rng)?;
        let out_index = rows
            .iter()
            .position(|l| matches!(l, LayerSpec::Output { .. }))
            .ok_or_else(|| Error::InvalidArgument("generator lacks an Output row".into()))?;
        let LayerSpec::Output { h, w, c } = rows[out_index] else { unreachable!() };
        if (chain.h, chain.w) != (h, w) {
            return Err(build_err(
                out_index,
                &rows[out_index],
                format!("chain produces {}x{} but the row declares {h}x{w}", chain.h, chain.w),
            ));
        }
        if let Some((i, l)) = rows.iter().enumerate().skip(3).find(|(i, l)| {
            !(l.is_conv_like() || *i == out_index || matches!(l, LayerSpec::Tanh))
        }) {
            return Err(build_err(i, l, "unexpected row in a generator"));
        }
        let in_c = chain.c;
        let k2 = OUTPUT_KERNEL * OUTPUT_KERNEL;
        let out_w = params.add(
            "g/out/deconv/weight",
            xavier(&[in_c, c, OUTPUT_KERNEL, OUTPUT_KERNEL], in_c * k2, c * k2, rng),
            true,
        )?;
        let out = ConvUnit {
            transposed: true,
            weight: out_w,
            kernel: OUTPUT_KERNEL,
            stride: 1,
            out_c: c,
            bn: None,
            act: Activation::Tanh,
        };
        Ok(Self {
            spec: spec.clone(),
            params,
            prior,
            fc_w,
            fc_b,
            stem_bn,
            stem: (stem_c, sh, sw),
            body,
            out,
            output: (h, w, c),
        })
    }

    pub fn stage(&self) -> Stage {
        self.spec.stage
    }

    /// `(h, w, c)` of produced images.
    pub fn output_extent(&self) -> (usize, usize, usize) {
        self.output
    }

    pub fn num_growth_blocks(&self) -> usize {
        self.body.blocks.len()
    }

    /// Maps `[m, dim]` latents to `[m, c, h, w]` images in (−1, 1).
    pub fn forward(&mut self, g: &mut Graph, z: Var, ctx: &mut Forward) -> Result<Var> {
        match g.shape(z) {
            [_, d] if *d == self.prior.dim => {}
            s => return Err(Error::shape("generator", format!("expected [m, {}] latents, got {s:?}", self.prior.dim))),
        }
        let m = g.shape(z)[0];
        let w = g.param(&self.params, self.fc_w, ctx.trainable);
        let b = g.param(&self.params, self.fc_b, ctx.trainable);
        let y = g.matmul(z, w)?;
        let y = g.add_bias(y, b)?;
        let (c, h, wd) = self.stem;
        let y = g.reshape(y, &[m, c, h, wd])?;
        let train = ctx.mode == Mode::Train;
        let y = self.stem_bn.forward(g, &mut self.params, y, ctx.trainable, train, ctx.update_stats, false)?;
        let y = g.activation(y, Activation::Relu);
        let y = self.body.forward(g, &mut self.params, y, ctx)?;
        self.out.forward(g, &mut self.params, y, ctx, false, false)
    }
}

/// Operations shared by both halves of a GAN cell.
pub trait Network: Sized + Clone {
    fn build(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Self>;
    fn spec(&self) -> &NetworkSpec;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn num_growth_blocks(&self) -> usize;
    fn stage(&self) -> Stage {
        self.spec().stage
    }
}

impl Network for Discriminator {
    fn build(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        Discriminator::build(spec, rng)
    }
    fn spec(&self) -> &NetworkSpec {
        &self.spec
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn num_growth_blocks(&self) -> usize {
        self.body.blocks.len()
    }
}

impl Network for Generator {
    fn build(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        Generator::build(spec, rng)
    }
    fn spec(&self) -> &NetworkSpec {
        &self.spec
    }
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn num_growth_blocks(&self) -> usize {
        self.body.blocks.len()
    }
}
