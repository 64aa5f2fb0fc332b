//! (k+1)-class semi-supervised discriminator loss, feature-matching
//! generator losses and softmax confidence.
//!
//! The discriminator emits `k + 1` logits; the last one scores "generated".
//! Losses work on the `k` real-class scores `l_c − l_fake`, which is the
//! same model with the fake logit pinned at zero. With `Z = Σ_c exp(l_c)`:
//!
//! * generated term: `−log(1 / (Z + 1)) = softplus(LSE(l))`
//! * labeled term: cross-entropy of the k-class softmax against the label
//! * unlabeled term: `−log(Z / (Z + 1)) = softplus(−LSE(l))`
//!
//! Each term is averaged over its batch.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::mmd::{mmd2, Kernel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitSource {
    Labeled,
    Unlabeled,
    Generated,
}

/// `m × k` pre-softmax scores over the k real classes.
#[derive(Clone, Debug)]
pub struct LogitsBatch {
    pub rows: Tensor,
    pub source: LogitSource,
}

impl LogitsBatch {
    pub fn new(rows: Tensor, source: LogitSource) -> Result<Self> {
        if rows.ndim() != 2 || rows.dim(1) < 2 {
            return Err(Error::shape("logits", format!("expected m x k with k >= 2, got {:?}", rows.shape())));
        }
        if !rows.all_finite() {
            return Err(Error::InvalidArgument("non-finite logits".into()));
        }
        Ok(Self { rows, source })
    }

    pub fn classes(&self) -> usize {
        self.rows.dim(1)
    }
}

/// Logits with one class index per row (the position of the one-hot 1).
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub logits: LogitsBatch,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(logits: LogitsBatch, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != logits.rows.dim(0) {
            return Err(Error::shape("labeled batch", "label count differs from row count"));
        }
        let k = logits.classes();
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{k}")));
        }
        Ok(Self { logits, labels })
    }

    pub fn one_hot(&self) -> Tensor {
        one_hot(&self.labels, self.logits.classes())
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * k + l] = 1.0;
    }
    t
}

/// Maps `[m, k+1]` discriminator logits to `[m, k]` real-class scores
/// `l_c − l_fake`.
pub fn real_class_scores(g: &mut Graph, logits: Var) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 || s[1] < 3 {
        return Err(Error::shape("real_class_scores", format!("expected m x (k+1), got {s:?}")));
    }
    let k = s[1] - 1;
    let mut p = Tensor::zeros(&[k + 1, k]);
    for c in 0..k {
        p.data_mut()[c * k + c] = 1.0;
        p.data_mut()[k * k + c] = -1.0;
    }
    let p = g.constant(p);
    g.matmul(logits, p)
}

fn check_batch(g: &Graph, v: Var, what: &'static str) -> Result<(usize, usize)> {
    match *g.shape(v) {
        [0, _] => Err(Error::Empty(what)),
        [m, k] if k >= 2 => Ok((m, k)),
        ref s => Err(Error::shape("discriminator_loss", format!("{what} has shape {s:?}"))),
    }
}

/// Mean over rows of `softplus(±LSE(row))`.
fn softplus_lse(g: &mut Graph, scores: Var, negate: bool) -> Result<Var> {
    let lse = g.log_sum_exp(scores, 1)?;
    let arg = if negate { g.scale(lse, -1.0) } else { lse };
    let sp = g.softplus(arg);
    Ok(g.mean(sp))
}

/// Mean cross-entropy of the k-class softmax against integer labels.
pub fn cross_entropy(g: &mut Graph, scores: Var, labels: &[usize]) -> Result<Var> {
    let (m, k) = check_batch(g, scores, "labeled batch")?;
    if labels.len() != m {
        return Err(Error::shape("cross_entropy", "label count differs from row count"));
    }
    if labels.iter().any(|&l| l >= k) {
        return Err(Error::InvalidArgument("label outside class range".into()));
    }
    let lse = g.log_sum_exp(scores, 1)?;
    let picked = g.mul_const(scores, one_hot(labels, k))?;
    let picked = g.sum_axis(picked, 1)?;
    let per = g.sub(lse, picked)?;
    Ok(g.mean(per))
}

/// Individual terms of the discriminator objective.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorLoss {
    pub total: Var,
    pub generated: Var,
    pub labeled: Var,
    pub unlabeled: Var,
}

/// Differentiable discriminator loss on real-class score batches.
pub fn discriminator_loss_graph(
    g: &mut Graph,
    labeled: Var,
    labels: &[usize],
    unlabeled: Var,
    generated: Var,
) -> Result<DiscriminatorLoss> {
    let (_, kl) = check_batch(g, labeled, "labeled batch")?;
    let (_, ku) = check_batch(g, unlabeled, "unlabeled batch")?;
    let (_, kg) = check_batch(g, generated, "generated batch")?;
    if kl != ku || kl != kg {
        return Err(Error::shape("discriminator_loss", format!("class counts differ: {kl}, {ku}, {kg}")));
    }
    let gen = softplus_lse(g, generated, false)?;
    let lab = cross_entropy(g, labeled, labels)?;
    let unl = softplus_lse(g, unlabeled, true)?;
    let s = g.add(gen, lab)?;
    let total = g.add(s, unl)?;
    Ok(DiscriminatorLoss { total, generated: gen, labeled: lab, unlabeled: unl })
}

/// Value of the discriminator loss for plain logit batches.
pub fn discriminator_loss(labeled: &LabeledBatch, unlabeled: &LogitsBatch, generated: &LogitsBatch) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(labeled.logits.rows.clone());
    let u = g.constant(unlabeled.rows.clone());
    let z = g.constant(generated.rows.clone());
    let loss = discriminator_loss_graph(&mut g, l, &labeled.labels, u, z)?;
    Ok(g.value(loss.total).item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MatchMetric {
    Mmd(Kernel),
    L1,
}

impl MatchMetric {
    pub fn name(&self) -> &'static str {
        match self {
            MatchMetric::Mmd(_) => "mmd",
            MatchMetric::L1 => "l1",
        }
    }
}

/// Feature-matching generator loss between real and fake GAP features.
pub fn generator_loss(g: &mut Graph, real: Var, fake: Var, metric: MatchMetric) -> Result<Var> {
    let (rs, fs) = (g.shape(real).to_vec(), g.shape(fake).to_vec());
    if rs.len() != 2 || fs.len() != 2 || rs[1] != fs[1] {
        return Err(Error::shape("generator_loss", format!("{rs:?} vs {fs:?}")));
    }
    if rs[0] == 0 || fs[0] == 0 {
        return Err(Error::Empty("feature batch"));
    }
    match metric {
        MatchMetric::Mmd(k) => mmd2(g, real, fake, k),
        MatchMetric::L1 => {
            let sr = g.sum_axis(real, 0)?;
            let mr = g.scale(sr, 1.0 / rs[0] as f64);
            let sf = g.sum_axis(fake, 0)?;
            let mf = g.scale(sf, 1.0 / fs[0] as f64);
            let d = g.sub(mr, mf)?;
            let a = g.abs(d);
            Ok(g.sum(a))
        }
    }
}

/// Argmax class and its k-class softmax probability. Ties go to the lowest
/// index.
pub fn confidence(logits: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    let mx = logits[best];
    let z: f64 = logits.iter().map(|&v| (v - mx).exp()).sum();
    (best, 1.0 / z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: Vec<Vec<f64>>, src: LogitSource) -> LogitsBatch {
        let (m, k) = (rows.len(), rows[0].len());
        LogitsBatch::new(Tensor::new(vec![m, k], rows.concat()).unwrap(), src).unwrap()
    }

    #[test]
    fn zero_logits_closed_form() {
        let k = 10;
        let z = || batch(vec![vec![0.0; k]; 3], LogitSource::Unlabeled);
        let lab = LabeledBatch::new(batch(vec![vec![0.0; k]; 3], LogitSource::Labeled), vec![0, 4, 9]).unwrap();
        let v = discriminator_loss(&lab, &z(), &z()).unwrap();
        let expected = 11f64.ln() + 10f64.ln() + 1.1f64.ln();
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn saturated_cross_entropy() {
        let mut row = vec![-30.0; 5];
        row[2] = 30.0;
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![1, 5], row).unwrap());
        let ce = cross_entropy(&mut g, s, &[2]).unwrap();
        assert!(g.value(ce).item() < 1e-9);
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let lab = LabeledBatch::new(batch(vec![vec![0.0; 3]], LogitSource::Labeled), vec![1]).unwrap();
        let u = batch(vec![vec![0.0; 4]], LogitSource::Unlabeled);
        let z = batch(vec![vec![0.0; 3]], LogitSource::Generated);
        assert!(discriminator_loss(&lab, &u, &z).is_err());
    }

    #[test]
    fn confidence_examples() {
        let (c, p) = confidence(&[0.0; 4]);
        assert_eq!((c, p), (0, 0.25));
        let (c, p) = confidence(&[10.0, 0.0, 0.0]);
        assert_eq!(c, 0);
        assert!((p - 1.0 / (1.0 + 2.0 * (-10f64).exp())).abs() < 1e-15);
        let (c2, p2) = confidence(&[13.5, 3.5, 3.5]);
        assert_eq!(c2, 0);
        assert!((p2 - p).abs() < 1e-15);
        assert_eq!(confidence(&[1.0, 3.0, 3.0]).0, 1);
    }

    #[test]
    fn feature_matching_hand_values() {
        let mut g = Graph::new();
        let real = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let fake = g.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let l1 = generator_loss(&mut g, real, fake, MatchMetric::L1).unwrap();
        let mmd = generator_loss(&mut g, real, fake, MatchMetric::Mmd(Kernel::InnerProduct)).unwrap();
        assert!((g.value(l1).item() - 2.0).abs() < 1e-15);
        assert!((g.value(mmd).item() - 2.0).abs() < 1e-15);
    }
}
