//! Shared oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sggan_core::autograd::{Graph, Var};
use sggan_core::Tensor;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Gradients below this magnitude on both sides count as agreeing.
pub const GRAD_ABS_FLOOR: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in ±[lo, hi], kept away from zero so kinks are not probed.
pub fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces any output to a scalar by a fixed random projection.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let r = Tensor::randn(&shape, 1.0, &mut rng(seed));
    let p = g.mul_const(y, r).unwrap();
    g.sum(p)
}

pub struct GradReport {
    pub worst_rel: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every element of every input.
pub fn check_gradients(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> GradReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut xs: Vec<Tensor> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let an = a.data()[j];
            let scale = an.abs().max(numeric.abs());
            let rel = if scale < GRAD_ABS_FLOOR { 0.0 } else { (an - numeric).abs() / scale };
            worst = worst.max(rel);
            checked += 1;
        }
    }
    GradReport { worst_rel: worst, checked }
}

/// Direct nested-loop convolution, `[n,c,h,w] * [o,c,k,k]`.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, k) = (w.dim(0), w.dim(2));
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x.data()[((b * c + ic) * h + y as usize) * wd + xx as usize]
                                        * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

/// Direct scatter form of the transposed convolution with `[in,out,k,k]`
/// weights; output extent `(h−1)s + k − 2p + (s−1)`.
pub fn conv_transpose2d_direct(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, k) = (w.dim(1), w.dim(2));
    let oh = (h - 1) * stride + k - 2 * pad + (stride - 1);
    let ow = (wd - 1) * stride + k - 2 * pad + (stride - 1);
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for ic in 0..ci {
            for i in 0..h {
                for j in 0..wd {
                    let v = x.data()[((b * ci + ic) * h + i) * wd + j];
                    for oc in 0..co {
                        for ki in 0..k {
                            for kj in 0..k {
                                let y = (i * stride + ki) as isize - pad as isize;
                                let xx = (j * stride + kj) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < oh && (xx as usize) < ow {
                                    out.data_mut()[((b * co + oc) * oh + y as usize) * ow + xx as usize] +=
                                        v * w.data()[((ic * co + oc) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Brute-force biased MMD² straight from the kernel definition.
pub fn mmd2_brute(x: &[Vec<f64>], y: &[Vec<f64>], k: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let (m, n) = (x.len() as f64, y.len() as f64);
    let mut xx = 0.0;
    let mut yy = 0.0;
    let mut xy = 0.0;
    for a in x {
        for b in x {
            xx += k(a, b);
        }
        for b in y {
            xy += k(a, b);
        }
    }
    for a in y {
        for b in y {
            yy += k(a, b);
        }
    }
    xx / (m * m) - 2.0 * xy / (m * n) + yy / (n * n)
}

/// `‖mean(x) − mean(y)‖²`.
pub fn mean_gap_sq(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let d = x[0].len();
    (0..d)
        .map(|j| {
            let mx = x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64;
            let my = y.iter().map(|r| r[j]).sum::<f64>() / y.len() as f64;
            (mx - my).powi(2)
        })
        .sum()
}

/// Malformed cells and the character offset the parser must blame.
pub const MALFORMED: [(&str, usize); 20] = [
    ("Conv-S", 4),
    ("Conv3-S1", 6),
    ("Conv3-64", 8),
    ("Conv3-64S", 9),
    ("Conv3-64S0", 9),
    ("Conv0-64S1", 4),
    ("Conv3-64S1×", 11),
    ("Conv3-64S1×2x", 12),
    ("Conv3 64S1", 5),
    ("Deconv5-128S2 ", 13),
    ("Dropout(1.5)", 8),
    ("Dropout(0.5", 11),
    ("Dropout()", 8),
    ("Input (32×32)", 12),
    ("Input (32×32×3", 14),
    ("Output(32×x×3)", 10),
    ("Reshape-(4,,512)", 11),
    ("FC-512*", 7),
    ("Sample 100 number from Cauchy Distribution", 23),
    ("Pooling", 0),
];
