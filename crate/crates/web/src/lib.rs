//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The plain functions carry the logic and are tested natively; the
//! `#[wasm_bindgen]` wrappers only flatten results into typed arrays.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sggan_core::cbt::scale_at;
use sggan_core::data_io::{generate_synthetic, SyntheticSpec, MAX_SYNTHETIC_CLASSES};
use sggan_core::mmd::{mmd2_sample, FeatureBatch, Kernel};
use wasm_bindgen::prelude::*;

/// `(t, w(t))` at `n` evenly spaced clocks in `[0, t_max]`.
pub fn schedule(t_max: f64, n: usize) -> Vec<(f64, f64)> {
    let n = n.max(2);
    (0..n)
        .map(|i| {
            let t = t_max * i as f64 / (n - 1) as f64;
            (t, scale_at(t))
        })
        .collect()
}

/// Two 2-D point clouds and their discrepancy under both kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Exploration {
    pub mmd2_linear: f64,
    pub mmd2_gaussian: f64,
    /// Median-heuristic bandwidth used for the Gaussian kernel.
    pub sigma: f64,
    pub real: Vec<[f64; 2]>,
    pub fake: Vec<[f64; 2]>,
}

/// `m` points from N(0, I) against `n` points from N((shift, 0), spread²·I).
pub fn explore(m: usize, n: usize, shift: f64, spread: f64, seed: u64) -> sggan_core::Result<Exploration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut cloud = |count: usize, cx: f64, s: f64| -> Vec<[f64; 2]> {
        (0..count).map(|_| [cx + s * unit.sample(&mut rng), s * unit.sample(&mut rng)]).collect()
    };
    let real = cloud(m, 0.0, 1.0);
    let fake = cloud(n, shift, spread);
    let rows = |p: &[[f64; 2]]| p.iter().map(|q| q.to_vec()).collect::<Vec<_>>();
    let (bx, by) = (FeatureBatch::from_rows(&rows(&real))?, FeatureBatch::from_rows(&rows(&fake))?);
    let gauss = Kernel::gaussian_median(&bx, &by)?;
    let sigma = match gauss {
        Kernel::Gaussian { sigma } => sigma,
        Kernel::InnerProduct => f64::NAN,
    };
    Ok(Exploration {
        mmd2_linear: mmd2_sample(&bx, &by, &Kernel::InnerProduct)?,
        mmd2_gaussian: mmd2_sample(&bx, &by, &gauss)?,
        sigma,
        real,
        fake,
    })
}

/// RGBA pixels of one synthetic sample of class `class`.
pub fn render(class: usize, size: usize, noise: f64, noise_corr: f64, seed: u64) -> sggan_core::Result<Vec<u8>> {
    let spec = SyntheticSpec {
        classes: MAX_SYNTHETIC_CLASSES,
        h: size,
        w: size,
        c: 3,
        noise_std: noise,
        noise_corr,
        per_class: 1,
    };
    let data = generate_synthetic(&spec, seed)?;
    if class >= data.len() {
        return Err(sggan_core::Error::InvalidArgument(format!("class {class} out of range")));
    }
    Ok(data.image(class).chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
}

fn js_err(e: sggan_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Flattened `t0, w0, t1, w1, ...`.
#[wasm_bindgen(js_name = scheduleCurve)]
pub fn schedule_curve(t_max: f64, n: usize) -> Vec<f64> {
    schedule(t_max, n).into_iter().flat_map(|(t, w)| [t, w]).collect()
}

#[wasm_bindgen(js_name = scaleAfter)]
pub fn scale_after(iters: f64, iters_per_epoch: f64) -> f64 {
    scale_at(iters / iters_per_epoch)
}

/// `[mmd2_linear, mmd2_gaussian, sigma, m, n, real xy..., fake xy...]`.
#[wasm_bindgen(js_name = mmdExplore)]
pub fn mmd_explore(m: usize, n: usize, shift: f64, spread: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    let e = explore(m, n, shift, spread, u64::from(seed)).map_err(js_err)?;
    let mut out = vec![e.mmd2_linear, e.mmd2_gaussian, e.sigma, m as f64, n as f64];
    out.extend(e.real.iter().chain(&e.fake).flatten());
    Ok(out)
}

#[wasm_bindgen(js_name = renderClass)]
pub fn render_class(class: usize, size: usize, noise: f64, noise_corr: f64, seed: u32) -> Result<Vec<u8>, JsError> {
    render(class, size, noise, noise_corr, u64::from(seed)).map_err(js_err)
}

#[wasm_bindgen(js_name = classCount)]
pub fn class_count() -> usize {
    MAX_SYNTHETIC_CLASSES
}
