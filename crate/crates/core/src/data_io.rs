//! Synthetic datasets, the `SGDS` dataset and `SGCK` checkpoint formats,
//! pixel normalization and PPM/PGM dumps.
//!
//! All multi-byte integers are little-endian, fields are packed without
//! padding.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cbt::GrowthClock;
use crate::error::{Error, Result};
use crate::model::{Discriminator, Generator};
use crate::netspec::{NetworkSpec, Stage};
use crate::tensor::{DType, ParamStore, Tensor};
use crate::trainer::{AdamState, GanCell, LatentEntry, Pools, TrainConfig, TrainState};

pub const DATASET_MAGIC: [u8; 4] = *b"SGDS";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Raw images, HWC `u8`, with optional labels (−1 = unlabeled).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<i16>,
}

impl Dataset {
    pub fn new(h: usize, w: usize, c: usize, classes: usize, pixels: Vec<u8>, labels: Vec<i16>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidArgument("image extents must be positive".into()));
        }
        if pixels.len() != labels.len() * h * w * c {
            return Err(Error::InvalidArgument(format!(
                "{} pixels do not match {} images of {h}x{w}x{c}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l < -1 || l >= classes as i16) {
            return Err(Error::InvalidArgument(format!("label {l} outside -1..{classes}")));
        }
        Ok(Self { h, w, c, classes, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let s = self.h * self.w * self.c;
        &self.pixels[i * s..(i + 1) * s]
    }

    /// Normalized NCHW tensor view of the whole dataset.
    pub fn to_images(&self) -> ImageSet {
        let (h, w, c) = (self.h, self.w, self.c);
        let mut data = Vec::with_capacity(self.pixels.len());
        for i in 0..self.len() {
            let img = self.image(i);
            for ch in 0..c {
                data.extend((0..h * w).map(|p| normalize(img[p * c + ch])));
            }
        }
        ImageSet {
            images: Tensor::new(vec![self.len(), c, h, w], data).expect("sizes checked at construction"),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

/// Normalized images ready for the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    /// `[n, c, h, w]` in [−1, 1].
    pub images: Tensor,
    pub labels: Vec<i16>,
    pub classes: usize,
}

impl ImageSet {
    /// `(h, w, c)`.
    pub fn extent(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[2], s[3], s[1])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `x ↦ x/127.5 − 1`.
pub fn normalize(x: u8) -> f64 {
    x as f64 / 127.5 - 1.0
}

pub fn normalize_pixels(raw: &[u8]) -> Vec<f64> {
    raw.iter().map(|&x| normalize(x)).collect()
}

/// Inverse of [`normalize`], rounded and clamped.
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Gaussian pixel noise in 0..255 units.
    pub noise_std: f64,
    /// Spatial correlation length of the noise in pixels; 0 gives white
    /// noise. The field is rescaled so its per-pixel std stays `noise_std`.
    pub noise_corr: f64,
    pub per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 4, h: 16, w: 16, c: 3, noise_std: 40.0, noise_corr: 0.0, per_class: 100 }
    }
}

/// Maximum number of distinct synthetic patterns.
pub const MAX_SYNTHETIC_CLASSES: usize = 8;

/// Pattern intensity in [0, 1] of class `k` at pixel `(y, x)`.
pub fn pattern(k: usize, y: usize, x: usize, h: usize, w: usize) -> f64 {
    let band = |v: usize, n: usize| ((v * 4 / n.max(1)) % 2) as f64;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
    let radius = h.min(w) as f64 / 2.0;
    match k {
        0 => band(y, h),
        1 => band(x, w),
        2 => (band(y, h) + band(x, w)) % 2.0,
        3 => (r < radius * 0.6) as u8 as f64,
        4 => (((x + y) * 4 / (h + w).max(1)) % 2) as f64,
        5 => ((r > radius * 0.45) && (r < radius * 0.85)) as u8 as f64,
        6 => (((y as f64 - cy).abs() < radius * 0.25) || ((x as f64 - cx).abs() < radius * 0.25)) as u8 as f64,
        _ => (x * 2 >= w) as u8 as f64,
    }
}

/// Class templates plus Gaussian pixel noise, clamped to [0, 255].
/// Samples are grouped by class.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::InvalidArgument(format!("synthetic data supports 2..={MAX_SYNTHETIC_CLASSES} classes")));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::InvalidArgument("noise_std must be nonnegative".into()));
    }
    let (h, w, c) = (spec.h, spec.w, spec.c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = blur_kernel(spec.noise_corr);
    let mut pixels = Vec::with_capacity(spec.classes * spec.per_class * h * w * c);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for k in 0..spec.classes {
        for _ in 0..spec.per_class {
            let noise: Vec<Vec<f64>> = if spec.noise_std > 0.0 {
                (0..c).map(|_| noise_field(h, w, spec.noise_std, &kernel, &mut rng)).collect()
            } else {
                vec![vec![0.0; h * w]; c]
            };
            for y in 0..h {
                for x in 0..w {
                    let p = pattern(k, y, x, h, w);
                    for (ch, field) in noise.iter().enumerate() {
                        let tint = 0.75 + 0.25 * ((k + ch) % 3) as f64 / 2.0;
                        let v = 40.0 + 175.0 * p * tint + field[y * w + x];
                        pixels.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            labels.push(k as i16);
        }
    }
    Dataset::new(h, w, c, spec.classes, pixels, labels)
}

/// Normalized 1-D Gaussian taps with unit total energy.
fn blur_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let energy = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    taps.into_iter().map(|t| t / energy).collect()
}

/// White noise blurred separably with `taps` (zero padded), then rescaled
/// so every pixel has standard deviation `std`.
fn noise_field(h: usize, w: usize, std: f64, taps: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let r = taps.len() / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let white: Vec<f64> = (0..ph * pw).map(|_| StandardNormal.sample(rng)).collect();
    let mut rows = vec![0.0; ph * w];
    for y in 0..ph {
        for x in 0..w {
            rows[y * w + x] = taps.iter().enumerate().map(|(i, t)| t * white[y * pw + x + i]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = std * taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * w + x]).sum::<f64>();
        }
    }
    out
}

fn u16_of(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in 16 bits")))
}

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + d.pixels.len() + 2 * d.len());
    out.extend(DATASET_MAGIC);
    out.extend(DATASET_VERSION.to_le_bytes());
    out.extend(u32::try_from(d.len()).map_err(|_| Error::InvalidArgument("too many images".into()))?.to_le_bytes());
    for (v, what) in [(d.h, "height"), (d.w, "width"), (d.c, "channels"), (d.classes, "classes")] {
        out.extend(u16_of(v, what)?.to_le_bytes());
    }
    out.extend(&d.pixels);
    for l in &d.labels {
        out.extend(l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let n = r.u32("image count")? as usize;
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    let c = r.u16("channels")? as usize;
    let k = r.u16("class count")? as usize;
    let pixels = r.take(n * h * w * c, "pixel block")?.to_vec();
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(i16::from_le_bytes(r.array("label block")?));
    }
    r.finish()?;
    Dataset::new(h, w, c, k, pixels, labels).map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn write_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(d)?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    decode_dataset(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads an IDX image file (`0x0803`, unsigned bytes) and an optional IDX
/// label file (`0x0801`). Images load as a single channel.
pub fn read_idx(images: impl AsRef<Path>, labels: Option<&Path>, classes: usize) -> Result<Dataset> {
    let images = images.as_ref();
    let raw = fs::read(images).map_err(|e| Error::io(images, e))?;
    let be = |b: &[u8]| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize;
    if raw.len() < 16 || be(&raw[0..4]) != 0x0803 {
        return Err(Error::Corrupt("not an IDX image file".into()));
    }
    let (n, h, w) = (be(&raw[4..8]), be(&raw[8..12]), be(&raw[12..16]));
    let pixels = raw.get(16..16 + n * h * w).ok_or(Error::Truncated("IDX pixels"))?.to_vec();
    let labels = match labels {
        None => vec![-1; n],
        Some(p) => {
            let raw = fs::read(p).map_err(|e| Error::io(p, e))?;
            if raw.len() < 8 || be(&raw[0..4]) != 0x0801 || be(&raw[4..8]) != n {
                return Err(Error::Corrupt("IDX label file does not match the images".into()));
            }
            raw.get(8..8 + n).ok_or(Error::Truncated("IDX labels"))?.iter().map(|&l| l as i16).collect()
        }
    };
    Dataset::new(h, w, 1, classes, pixels, labels)
}

/// Byte cursor that reports truncation instead of panicking.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn u128(&mut self, what: &'static str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Corrupt(format!("{what} is not UTF-8")))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.array("magic")?;
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    fn version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32("version")?;
        if found != expected {
            return Err(Error::VersionMismatch { expected, found });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor, dtype: DType) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(dtype.tag());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            DType::F64 => out.extend(v.to_le_bytes()),
            DType::F32 => out.extend((v as f32).to_le_bytes()),
        }
    }
}

fn get_tensor(r: &mut Reader) -> Result<(String, Tensor)> {
    let n = r.u16("tensor name")? as usize;
    let name = String::from_utf8(r.take(n, "tensor name")?.to_vec()).map_err(|_| Error::Corrupt("tensor name".into()))?;
    let dtype = DType::from_tag(r.u8("tensor dtype")?).ok_or_else(|| Error::Corrupt(format!("{name}: unknown dtype")))?;
    let ndim = r.u8("tensor rank")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32("tensor shape")? as usize);
    }
    let len: usize = shape.iter().product();
    let data: Vec<f64> = match dtype {
        DType::F64 => r.take(len * 8, "tensor payload")?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        DType::F32 => r
            .take(len * 4, "tensor payload")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((name, Tensor::new(shape, data)?))
}

fn adam_tensors<'a>(tag: &'a str, params: &'a ParamStore, st: &'a AdamState) -> impl Iterator<Item = (String, &'a Tensor)> {
    params.iter().filter(|p| p.trainable).zip(st.m.iter().zip(&st.v)).flat_map(move |(p, (m, v))| {
        [(format!("adam/{tag}/m/{}", p.name), m), (format!("adam/{tag}/v/{}", p.name), v)]
    })
}

fn pools_text(p: &Pools) -> String {
    let pairs = |v: &[(usize, usize)]| v.iter().map(|(i, l)| format!("{i}:{l}")).collect::<Vec<_>>().join(",");
    let ids = p.unlabeled.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    let latent = p
        .latent
        .iter()
        .map(|e| format!("{}:{}:{:016x}", e.id, e.label, e.confidence.to_bits()))
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "labeled={}\nunlabeled={ids}\nlatent={latent}\ntest={}\nvalidation={}\n",
        pairs(&p.labeled),
        pairs(&p.test),
        pairs(&p.validation)
    )
}

fn parse_list<T>(v: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| Error::Corrupt(format!("bad pool entry {s:?}"))))
        .collect()
}

fn parse_pair(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once(':')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

/// Encodes a full training state. `dtype` selects tensor storage precision.
pub fn encode_checkpoint(state: &TrainState, dtype: DType) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    let cell = &state.cell;
    put_str(&mut out, &cell.d.spec.to_text());
    put_str(&mut out, &cell.g.spec.to_text());
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    tensors.extend(cell.d.params.iter().map(|p| (p.name.clone(), &p.value)));
    tensors.extend(cell.g.params.iter().map(|p| (p.name.clone(), &p.value)));
    tensors.extend(adam_tensors("d", &cell.d.params, &state.adam_d));
    tensors.extend(adam_tensors("g", &cell.g.params, &state.adam_g));
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_tensor(&mut out, name, t, dtype);
    }
    out.extend(state.adam_d.step.to_le_bytes());
    out.extend(state.adam_g.step.to_le_bytes());
    out.extend(cell.clock.iters_done.to_le_bytes());
    out.extend(cell.clock.iters_per_epoch.to_le_bytes());
    out.extend(state.rng.get_seed());
    out.extend(state.rng.get_stream().to_le_bytes());
    out.extend(state.rng.get_word_pos().to_le_bytes());
    let growths = state.growths.iter().map(|(a, b)| format!("{a}>{b}")).collect::<Vec<_>>().join(",");
    let best = state.best.map_or(String::new(), |(v, t)| format!("{:016x}:{:016x}", v.to_bits(), t.to_bits()));
    let trainer = format!(
        "{}route_pos={}\nepoch={}\niter={}\ngrowths={growths}\nbest={best}\n{}",
        state.cfg.to_text(),
        state.route_pos,
        state.epoch,
        state.iter,
        pools_text(&state.pools)
    );
    put_str(&mut out, &trainer);
    out
}

fn restore_params(params: &mut ParamStore, table: &mut std::collections::HashMap<String, Tensor>) -> Result<()> {
    for p in params.iter_mut() {
        let t = table.remove(&p.name).ok_or_else(|| Error::Corrupt(format!("missing tensor {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Corrupt(format!("{}: shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape())));
        }
        p.value = t;
    }
    Ok(())
}

fn restore_adam(tag: &str, params: &ParamStore, step: u64, table: &mut std::collections::HashMap<String, Tensor>) -> Result<AdamState> {
    let mut st = AdamState::new(params);
    st.step = step;
    for (i, p) in params.iter().filter(|p| p.trainable).enumerate() {
        for (kind, slot) in [("m", &mut st.m[i]), ("v", &mut st.v[i])] {
            let name = format!("adam/{tag}/{kind}/{}", p.name);
            let t = table.remove(&name).ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Corrupt(format!("{name}: bad shape")));
            }
            *slot = t;
        }
    }
    Ok(st)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let d_spec = NetworkSpec::from_text(&r.string("discriminator spec")?)?;
    let g_spec = NetworkSpec::from_text(&r.string("generator spec")?)?;
    let count = r.u32("tensor count")? as usize;
    let mut table = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = get_tensor(&mut r)?;
        if table.insert(name.clone(), t).is_some() {
            return Err(Error::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    let steps = (r.u64("optimizer steps")?, r.u64("optimizer steps")?);
    let clock = GrowthClock { iters_done: r.u64("clock")?, iters_per_epoch: r.u64("clock")? };
    let seed: [u8; 32] = r.array("rng seed")?;
    let stream = r.u64("rng stream")?;
    let word_pos = r.u128("rng position")?;
    let trainer = r.string("trainer state")?;
    r.finish()?;

    // structure comes from the specs; values from the table
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut d = Discriminator::build(&d_spec, &mut scratch)?;
    let mut g = Generator::build(&g_spec, &mut scratch)?;
    restore_params(&mut d.params, &mut table)?;
    restore_params(&mut g.params, &mut table)?;
    let adam_d = restore_adam("d", &d.params, steps.0, &mut table)?;
    let adam_g = restore_adam("g", &g.params, steps.1, &mut table)?;
    if let Some(name) = table.keys().min() {
        return Err(Error::Corrupt(format!("unexpected tensor {name}")));
    }
    if clock.iters_per_epoch == 0 {
        return Err(Error::Corrupt("clock with zero iterations per epoch".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut cfg_lines = String::new();
    let (mut route_pos, mut epoch, mut iter) = (0, 0, 0);
    let mut growths = Vec::new();
    let mut pools = Pools::default();
    let mut best = None;
    let corrupt = |k: &str| Error::Corrupt(format!("bad trainer field {k}"));
    for line in trainer.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| corrupt(line))?;
        match k {
            "route_pos" => route_pos = v.parse().map_err(|_| corrupt(k))?,
            "epoch" => epoch = v.parse().map_err(|_| corrupt(k))?,
            "iter" => iter = v.parse().map_err(|_| corrupt(k))?,
            "growths" => {
                growths = parse_list(v, |s| {
                    let (a, b) = s.split_once('>')?;
                    Some((a.parse::<Stage>().ok()?, b.parse::<Stage>().ok()?))
                })?
            }
            "labeled" => pools.labeled = parse_list(v, parse_pair)?,
            "test" => pools.test = parse_list(v, parse_pair)?,
            "validation" => pools.validation = parse_list(v, parse_pair)?,
            "best" if v.is_empty() => best = None,
            "best" => {
                let (a, b) = v.split_once(':').ok_or_else(|| corrupt(k))?;
                let bits = |s: &str| u64::from_str_radix(s, 16).map(f64::from_bits).map_err(|_| corrupt(k));
                best = Some((bits(a)?, bits(b)?));
            }
            "unlabeled" => pools.unlabeled = parse_list(v, |s| s.parse().ok())?,
            "latent" => {
                pools.latent = parse_list(v, |s| {
                    let mut it = s.split(':');
                    let id = it.next()?.parse().ok()?;
                    let label = it.next()?.parse().ok()?;
                    let bits = u64::from_str_radix(it.next()?, 16).ok()?;
                    Some(LatentEntry { id, label, confidence: f64::from_bits(bits) })
                })?
            }
            _ => {
                cfg_lines.push_str(line);
                cfg_lines.push('\n');
            }
        }
    }
    let cfg = TrainConfig::from_text(&cfg_lines)?;
    let cell = GanCell::from_parts(d, g, clock)?;
    Ok(TrainState { cfg, cell, adam_d, adam_g, pools, rng, route_pos, epoch, iter, growths, best })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_as(state, path, DType::F64)
}

pub fn save_checkpoint_as(state: &TrainState, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(state, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Binary PPM (3 channels) or PGM (1 channel) bytes of a `[c, h, w]` or
/// `[1, c, h, w]` image in [−1, 1].
pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] | [1, c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("write_image", format!("expected [c, h, w], got {s:?}"))),
    };
    let magic = match c {
        3 => "P6",
        1 => "P5",
        _ => return Err(Error::shape("write_image", format!("{c} channels; need 1 or 3"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(denormalize(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn write_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(image)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Tiles `[n, c, h, w]` images into one `[c, rows·h, cols·w]` image with
/// one-pixel black gutters.
pub fn tile_images(images: &Tensor, cols: usize) -> Result<Tensor> {
    let [n, c, h, w] = *images.shape() else {
        return Err(Error::shape("tile_images", format!("expected [n, c, h, w], got {:?}", images.shape())));
    };
    if n == 0 || cols == 0 {
        return Err(Error::Empty("image grid"));
    }
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut out = Tensor::full(&[c, gh, gw], -1.0);
    let src = images.data();
    let dst = out.data_mut();
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                let s = ((i * c + ch) * h + y) * w;
                let d = (ch * gh + oy + y) * gw + ox;
                dst[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    Ok(out)
}
