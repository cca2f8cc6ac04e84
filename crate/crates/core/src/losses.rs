//! Training objectives.
//!
//! Supervised terms: focal loss over non-ignored anchors and smooth-L1 over
//! positive anchors, for the main detector and for every committee member.
//!
//! Committee disagreement on an instance is measured in its group form,
//! `(2/N) * sum_i ||y_i - mean(y)||^2`, which equals the mean squared L2
//! distance over all ordered member pairs (diagonal included). An image's
//! discrepancy is the anchor mean, optionally weighted per anchor by
//! `(1 - w_b)^gamma` where `w_b` is the main classifier's background
//! probability, used as a constant. The committee maximizes it on unlabeled
//! images, which the total objective expresses as `- lambda * d_com`.
//!
//! Every function with a `_grad` twin returns the gradient with respect to
//! the head logits (softmax outputs are recovered from the probabilities).

use serde::{Deserialize, Serialize};

use crate::detector::anchors::InstanceTargets;
use crate::detector::InstancePrediction;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` wherever a log is taken.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub lambda: f64,
    pub gamma_fpil: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            lambda: 1.0,
            gamma_fpil: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_main: f64,
    pub l_com: f64,
    pub d_com: f64,
    pub total: f64,
    pub lambda: f64,
    pub gamma_fpil: f64,
}

/// `total = l_main + l_com - lambda * d_com`.
pub fn assemble_total(l_main: f64, l_com: f64, d_com: f64, lambda: f64, gamma_fpil: f64) -> LossBreakdown {
    LossBreakdown {
        l_main,
        l_com,
        d_com,
        total: l_main + l_com - lambda * d_com,
        lambda,
        gamma_fpil,
    }
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_main, self.l_com, self.d_com, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64], grad_logits: &mut [f64]) {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    for ((out, p), g) in grad_logits.iter_mut().zip(probs).zip(grad_probs) {
        *out = p * (g - dot);
    }
}

fn focal_term(p_t: f64, alpha_t: f64, gamma: f64) -> f64 {
    let p = p_t.clamp(EPS, 1.0 - EPS);
    -alpha_t * (1.0 - p).powf(gamma) * p.ln()
}

/// d focal_term / d p_t; zero where the clamp is active.
fn focal_term_dp(p_t: f64, alpha_t: f64, gamma: f64) -> f64 {
    if !(EPS..=1.0 - EPS).contains(&p_t) {
        return 0.0;
    }
    let q = 1.0 - p_t;
    let dlog = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p_t.ln()
    };
    -alpha_t * (q.powf(gamma) / p_t - dlog)
}

fn alpha_for(target: usize, background: usize, alpha: f64) -> f64 {
    if target == background {
        1.0 - alpha
    } else {
        alpha
    }
}

/// Mean focal loss over the non-ignored anchors of a `T x (C+1)` probability
/// matrix.
pub fn focal_loss(probs: &[f64], targets: &InstanceTargets, alpha: f64, gamma: f64) -> f64 {
    let k = targets.num_classes + 1;
    let bg = targets.background();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (j, row) in probs.chunks_exact(k).enumerate() {
        if targets.ignore[j] {
            continue;
        }
        let t = targets.cls_target[j];
        sum += focal_term(row[t], alpha_for(t, bg, alpha), gamma);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// [`focal_loss`] and its gradient with respect to the logits, scaled by
/// `scale`.
pub fn focal_loss_grad(
    probs: &[f64],
    targets: &InstanceTargets,
    alpha: f64,
    gamma: f64,
    scale: f64,
) -> (f64, Vec<f64>) {
    let k = targets.num_classes + 1;
    let bg = targets.background();
    let count = targets.ignore.iter().filter(|i| !**i).count();
    let mut grad = vec![0.0; probs.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let norm = scale / count as f64;
    let mut sum = 0.0;
    for (j, row) in probs.chunks_exact(k).enumerate() {
        if targets.ignore[j] {
            continue;
        }
        let t = targets.cls_target[j];
        let a = alpha_for(t, bg, alpha);
        sum += focal_term(row[t], a, gamma);
        let g = focal_term_dp(row[t], a, gamma) * norm;
        if g != 0.0 {
            let p_t = row[t];
            for (c, out) in grad[j * k..(j + 1) * k].iter_mut().enumerate() {
                let delta = if c == t { 1.0 } else { 0.0 };
                *out = g * p_t * (delta - row[c]);
            }
        }
    }
    (sum / count as f64, grad)
}

fn smooth_l1_term(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_dx(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Mean smooth-L1 over all coordinates of the `P x 4` rows; 0 when `P = 0`.
pub fn smooth_l1(pred: &[[f64; 4]], target: &[[f64; 4]]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| smooth_l1_term(a - b)))
        .sum();
    sum / (4 * pred.len()) as f64
}

pub fn smooth_l1_grad(pred: &[[f64; 4]], target: &[[f64; 4]], scale: f64) -> (f64, Vec<[f64; 4]>) {
    if pred.is_empty() {
        return (0.0, Vec::new());
    }
    let norm = scale / (4 * pred.len()) as f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| std::array::from_fn(|c| smooth_l1_dx(p[c] - t[c]) * norm))
        .collect();
    (smooth_l1(pred, target), grad)
}

fn positive_offsets(pred: &InstancePrediction, targets: &InstanceTargets) -> (Vec<[f64; 4]>, Vec<[f64; 4]>) {
    targets
        .positive_indices()
        .into_iter()
        .map(|j| (pred.loc_row(j), targets.loc_target[j]))
        .unzip()
}

/// Focal loss of the main classifier plus smooth-L1 of the main regressor
/// for one image.
pub fn main_loss(pred: &InstancePrediction, targets: &InstanceTargets, cfg: &LossConfig) -> f64 {
    let (p, t) = positive_offsets(pred, targets);
    focal_loss(&pred.main_cls, targets, cfg.focal_alpha, cfg.focal_gamma) + smooth_l1(&p, &t)
}

/// Batch mean of [`main_loss`].
pub fn batch_main_loss(batch: &[(&InstancePrediction, &InstanceTargets)], cfg: &LossConfig) -> f64 {
    batch.iter().map(|(p, t)| main_loss(p, t, cfg)).sum::<f64>() / batch.len().max(1) as f64
}

/// Mean over committee members of their focal loss for one image.
pub fn committee_supervised_loss(pred: &InstancePrediction, targets: &InstanceTargets, cfg: &LossConfig) -> f64 {
    let n = pred.committee_cls.len();
    if n == 0 {
        return 0.0;
    }
    pred.committee_cls
        .iter()
        .map(|m| focal_loss(m, targets, cfg.focal_alpha, cfg.focal_gamma))
        .sum::<f64>()
        / n as f64
}

pub fn batch_committee_supervised_loss(batch: &[(&InstancePrediction, &InstanceTargets)], cfg: &LossConfig) -> f64 {
    batch
        .iter()
        .map(|(p, t)| committee_supervised_loss(p, t, cfg))
        .sum::<f64>()
        / batch.len().max(1) as f64
}

/// Group-form committee discrepancy of one instance; `members` holds one
/// probability vector per committee member.
pub fn instance_discrepancy<M: AsRef<[f64]>>(members: &[M]) -> Result<f64> {
    let n = members.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "committee discrepancy needs at least 2 members, got {n}"
        )));
    }
    Ok(group_discrepancy(members))
}

pub(crate) fn group_discrepancy<M: AsRef<[f64]>>(members: &[M]) -> f64 {
    // pairwise form: exactly zero for identical members
    let n = members.len();
    let mut sum = 0.0;
    for i in 0..n {
        for t in i + 1..n {
            sum += members[i]
                .as_ref()
                .iter()
                .zip(members[t].as_ref())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    2.0 * sum / (n * n) as f64
}

/// Gradient of the group discrepancy with respect to each member vector:
/// `(4/N) * (y_i - mean)`.
pub fn instance_discrepancy_grad<M: AsRef<[f64]>>(members: &[M]) -> Result<(f64, Vec<Vec<f64>>)> {
    let value = instance_discrepancy(members)?;
    let n = members.len();
    let k = members[0].as_ref().len();
    let mean: Vec<f64> = (0..k)
        .map(|c| members.iter().map(|m| m.as_ref()[c]).sum::<f64>() / n as f64)
        .collect();
    let grads = members
        .iter()
        .map(|m| {
            m.as_ref()
                .iter()
                .zip(&mean)
                .map(|(y, mu)| 4.0 / n as f64 * (y - mu))
                .collect()
        })
        .collect();
    Ok((value, grads))
}

/// Per-anchor discrepancy of the whole image.
pub fn instance_discrepancies(pred: &InstancePrediction) -> Result<Vec<f64>> {
    let n = pred.committee_cls.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "committee discrepancy needs at least 2 members, got {n}"
        )));
    }
    Ok((0..pred.num_anchors)
        .map(|j| {
            let rows: Vec<&[f64]> = (0..n).map(|i| pred.committee_row(i, j)).collect();
            group_discrepancy(&rows)
        })
        .collect())
}

/// Per-anchor FPIL weight `(1 - w_b)^gamma`.
pub fn fpil_weight(background_prob: f64, gamma_fpil: f64) -> f64 {
    (1.0 - background_prob).clamp(0.0, 1.0).powf(gamma_fpil)
}

/// Anchor-mean discrepancy of an image, FPIL-weighted when `weighted`.
pub fn image_discrepancy(pred: &InstancePrediction, weighted: bool, gamma_fpil: f64) -> Result<f64> {
    let d = instance_discrepancies(pred)?;
    Ok(weighted_mean(pred, &d, weighted, gamma_fpil))
}

fn weighted_mean(pred: &InstancePrediction, d: &[f64], weighted: bool, gamma_fpil: f64) -> f64 {
    if weighted {
        let background: Vec<f64> = (0..d.len()).map(|j| pred.background_score(j)).collect();
        fpil_image_discrepancy(d, &background, gamma_fpil)
    } else {
        d.iter().sum::<f64>() / d.len().max(1) as f64
    }
}

/// `(1/T) * sum_j (1 - w_b[j])^gamma * d[j]`.
pub fn fpil_image_discrepancy(d: &[f64], background: &[f64], gamma_fpil: f64) -> f64 {
    d.iter()
        .zip(background)
        .map(|(v, &b)| fpil_weight(b, gamma_fpil) * v)
        .sum::<f64>()
        / d.len().max(1) as f64
}

/// Image discrepancy and `scale * d(image discrepancy)/d(committee logits)`,
/// one `T x (C+1)` gradient per member. The FPIL weight is a constant.
pub fn image_discrepancy_grad(
    pred: &InstancePrediction,
    weighted: bool,
    gamma_fpil: f64,
    scale: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let weights = weighted.then(|| {
        (0..pred.num_anchors)
            .map(|j| fpil_weight(pred.background_score(j), gamma_fpil))
            .collect::<Vec<_>>()
    });
    committee_discrepancy_grad(&pred.committee_cls, pred.num_labels, weights.as_deref(), scale)
}

/// Same as [`image_discrepancy_grad`] on raw committee probability matrices
/// with optional per-anchor weights.
pub fn committee_discrepancy_grad(
    committee: &[Vec<f64>],
    num_labels: usize,
    weights: Option<&[f64]>,
    scale: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = committee.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "committee discrepancy needs at least 2 members, got {n}"
        )));
    }
    let k = num_labels;
    let t = committee[0].len() / k;
    let mut grads = vec![vec![0.0; t * k]; n];
    let mut total = 0.0;
    let mut rows: Vec<&[f64]> = Vec::with_capacity(n);
    let mut dy = vec![0.0; k];
    for j in 0..t {
        rows.clear();
        rows.extend(committee.iter().map(|m| &m[j * k..(j + 1) * k]));
        let w = weights.map_or(1.0, |w| w[j]);
        total += w * group_discrepancy(&rows);
        let coeff = scale * w / t as f64;
        if coeff == 0.0 {
            continue;
        }
        for c in 0..k {
            let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n as f64;
            for (i, r) in rows.iter().enumerate() {
                // d/dy_i of (2/N) sum ||y - mean||^2 is (4/N)(y_i - mean)
                grads[i][j * k + c] = 4.0 / n as f64 * (r[c] - mean) * coeff;
            }
        }
        for (i, r) in rows.iter().enumerate() {
            dy.copy_from_slice(&grads[i][j * k..(j + 1) * k]);
            softmax_backward(r, &dy, &mut grads[i][j * k..(j + 1) * k]);
        }
    }
    Ok((total / t.max(1) as f64, grads))
}
