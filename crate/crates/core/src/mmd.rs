//! Kernel maximum mean discrepancy between feature batches.
//!
//! The estimator is the biased V-statistic
//!
//! ```text
//! MMD²(X, Y) = 1/m² ΣΣ k(xᵢ,xⱼ) − 2/(mn) ΣΣ k(xᵢ,yⱼ) + 1/n² ΣΣ k(yᵢ,yⱼ)
//! ```
//!
//! with the diagonal terms included. For the inner-product kernel this is
//! exactly `‖mean(X) − mean(Y)‖²`.

use std::cmp::Ordering;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub enum Kernel {
    #[default]
    InnerProduct,
    /// `exp(−‖x − y‖² / (2σ²))`
    Gaussian { sigma: f64 },
}


impl Kernel {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(Kernel::Gaussian { sigma })
        } else {
            Err(Error::InvalidArgument(format!("gaussian bandwidth {sigma} must be positive")))
        }
    }

    /// Gaussian kernel whose bandwidth is set by the median heuristic:
    /// `σ² = median(‖zᵢ − zⱼ‖²) / 2` over distinct pairs of the pooled rows.
    pub fn gaussian_median(x: &FeatureBatch, y: &FeatureBatch) -> Result<Self> {
        let rows: Vec<&[f64]> = (0..x.len()).map(|i| x.row(i)).chain((0..y.len()).map(|j| y.row(j))).collect();
        let mut d2 = Vec::new();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                d2.push(sq_dist(rows[i], rows[j]));
            }
        }
        d2.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        let med = d2.get(d2.len() / 2).copied().unwrap_or(1.0);
        Kernel::gaussian(if med > 0.0 { (med / 2.0).sqrt() } else { 1.0 })
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::shape("kernel", format!("dimensions {} and {} differ", x.len(), y.len())));
        }
        Ok(self.eval_unchecked(x, y))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            Kernel::InnerProduct => x.iter().zip(y).map(|(a, b)| a * b).sum(),
            Kernel::Gaussian { sigma } => (-sq_dist(x, y) / (2.0 * sigma * sigma)).exp(),
        }
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `m × d` feature rows, typically GAP activations of the discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    rows: Tensor,
}

impl FeatureBatch {
    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.ndim() != 2 {
            return Err(Error::shape("feature batch", format!("expected m x d, got {:?}", rows.shape())));
        }
        if rows.dim(0) == 0 {
            return Err(Error::Empty("feature batch"));
        }
        if !rows.all_finite() {
            return Err(Error::InvalidArgument("feature batch has non-finite entries".into()));
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("feature batch", "ragged rows"));
        }
        Self::new(Tensor::new(vec![rows.len(), d], rows.concat())?)
    }

    pub fn len(&self) -> usize {
        self.rows.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.dim(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.rows
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim()];
        for i in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let m = self.len() as f64;
        mean.iter_mut().for_each(|v| *v /= m);
        mean
    }
}

pub fn kernel_eval(k: &Kernel, x: &[f64], y: &[f64]) -> Result<f64> {
    k.eval(x, y)
}

/// Canonical operand order so that MMD²(X,Y) and MMD²(Y,X) run the exact
/// same floating-point operations.
fn swap_operands(x: &Tensor, y: &Tensor) -> bool {
    let ord = x.shape().cmp(y.shape()).then_with(|| {
        x.data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    ord == Ordering::Greater
}

/// Differentiable MMD² between row batches `x` (m × d) and `y` (n × d).
pub fn mmd2(g: &mut Graph, x: Var, y: Var, kernel: Kernel) -> Result<Var> {
    let (m, n) = (g.shape(x)[0], g.shape(y)[0]);
    if m == 0 || n == 0 {
        return Err(Error::Empty("feature batch"));
    }
    let (x, y, m, n) = if swap_operands(g.value(x), g.value(y)) { (y, x, n, m) } else { (x, y, m, n) };
    let kxx = g.gram(x, x, kernel)?;
    let kxy = g.gram(x, y, kernel)?;
    let kyy = g.gram(y, y, kernel)?;
    let sxx = g.sum(kxx);
    let sxy = g.sum(kxy);
    let syy = g.sum(kyy);
    let a = g.scale(sxx, 1.0 / (m * m) as f64);
    let c = g.scale(syy, 1.0 / (n * n) as f64);
    let b = g.scale(sxy, 2.0 / (m * n) as f64);
    let ac = g.add(a, c)?;
    g.sub(ac, b)
}

/// Sample MMD² (biased estimator, diagonal included).
pub fn mmd2_sample(x: &FeatureBatch, y: &FeatureBatch, kernel: &Kernel) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::shape("mmd2_sample", format!("feature dims {} and {} differ", x.dim(), y.dim())));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.tensor().clone());
    let yv = g.constant(y.tensor().clone());
    let out = mmd2(&mut g, xv, yv, *kernel)?;
    Ok(g.value(out).item())
}

/// Empirical witness `mean_j k(x, X_j) − mean_j k(x, Y_j)`.
pub fn witness_eval(x: &[f64], xs: &FeatureBatch, ys: &FeatureBatch, kernel: &Kernel) -> Result<f64> {
    if x.len() != xs.dim() || x.len() != ys.dim() {
        return Err(Error::shape("witness_eval", "point and batch dimensions differ"));
    }
    let mean = |b: &FeatureBatch| (0..b.len()).map(|i| kernel.eval_unchecked(x, b.row(i))).sum::<f64>() / b.len() as f64;
    Ok(mean(xs) - mean(ys))
}
