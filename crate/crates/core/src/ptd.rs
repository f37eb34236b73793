//! Gradient-based perturbed-token detection: saliency scores, top-k token
//! selection, the projected-gradient embedding attack, perturbation
//! application and the focal detection loss.

use serde::{Deserialize, Serialize};

use crate::error::{CarlError, Result};
use crate::tensor::{Graph, NodeId};

/// Gradient norms below this take no attack step.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PtdConfig {
    pub ratio: f64,
    pub pgd_steps: usize,
    pub alpha: f64,
    pub epsilon: f64,
    /// Frobenius bound on the whole perturbation; `None` means
    /// `epsilon * sqrt(number of selected tokens)`.
    pub frobenius_cap: Option<f64>,
    pub gamma: f64,
}

impl Default for PtdConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl PtdConfig {
    pub fn paper() -> Self {
        PtdConfig {
            ratio: 0.10,
            pgd_steps: 3,
            alpha: 5.0,
            epsilon: 5e-9,
            frobenius_cap: None,
            gamma: 2.0,
        }
    }

    /// Large-radius attack for desk-scale runs, so that the detector has
    /// something it can actually learn to see.
    pub fn smoke() -> Self {
        PtdConfig {
            epsilon: 20.0,
            alpha: 10.0,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(CarlError::Parameter(format!("ptd.ratio {} not in (0,1]", self.ratio)));
        }
        if !(self.alpha > 0.0) || !(self.epsilon > 0.0) {
            return Err(CarlError::Parameter("ptd.alpha and ptd.epsilon must be positive".into()));
        }
        if let Some(cap) = self.frobenius_cap {
            if !(cap > 0.0) {
                return Err(CarlError::Parameter("ptd.frobenius_cap must be positive".into()));
            }
        }
        if !(self.gamma >= 0.0) {
            return Err(CarlError::Parameter("ptd.gamma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn cap_for(&self, selected: usize) -> f64 {
        self.frobenius_cap
            .unwrap_or(self.epsilon * (selected as f64).sqrt())
    }
}

/// Per-token gradient magnitudes, `[n × t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyScores {
    pub g: Vec<f64>,
    pub n: usize,
    pub t: usize,
}

/// L2 norm of each token's embedding gradient; padded and CLS positions are 0.
pub fn token_saliency(embedding_grads: &[f64], mask: &[u8], n: usize, t: usize, d: usize, step: usize) -> Result<SaliencyScores> {
    if embedding_grads.len() != n * t * d || mask.len() != n * t {
        return Err(CarlError::Dimension {
            op: "token_saliency",
            lhs: vec![n, t, d],
            rhs: vec![embedding_grads.len(), mask.len()],
        });
    }
    if embedding_grads.iter().any(|v| !v.is_finite()) {
        return Err(CarlError::numeric("embedding gradients", step));
    }
    let g = embedding_grads
        .chunks(d)
        .enumerate()
        .map(|(pos, row)| {
            if pos % t == 0 || mask[pos] == 0 {
                0.0
            } else {
                row.iter().map(|v| v * v).sum::<f64>().sqrt()
            }
        })
        .collect();
    Ok(SaliencyScores { g, n, t })
}

/// Selected tokens per sentence plus the matching 0/1 mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SalientSet {
    pub sets: Vec<Vec<usize>>,
    pub mask: Vec<u8>,
    pub n: usize,
    pub t: usize,
}

impl SalientSet {
    pub fn empty(n: usize, t: usize) -> Self {
        SalientSet {
            sets: vec![Vec::new(); n],
            mask: vec![0; n * t],
            n,
            t,
        }
    }

    pub fn total(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

/// Picks the `max(1, floor(ratio * real_len))` highest-scoring non-CLS real
/// tokens of each sentence; ties go to the earlier position.
pub fn select_salient(scores: &SaliencyScores, attention_mask: &[u8], ratio: f64) -> Result<SalientSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CarlError::Parameter(format!("saliency ratio {ratio} not in (0,1]")));
    }
    let (n, t) = (scores.n, scores.t);
    let mut out = SalientSet::empty(n, t);
    for i in 0..n {
        let row_mask = &attention_mask[i * t..(i + 1) * t];
        let real = row_mask.iter().filter(|&&m| m == 1).count();
        let k = ((ratio * real as f64).floor() as usize).max(1);
        let mut candidates: Vec<usize> = (1..t).filter(|&p| row_mask[p] == 1).collect();
        let row = &scores.g[i * t..(i + 1) * t];
        candidates.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        candidates.truncate(k);
        candidates.sort_unstable();
        for &p in &candidates {
            out.mask[i * t + p] = 1;
        }
        out.sets[i] = candidates;
    }
    Ok(out)
}

/// `e + delta` on masked tokens, `e` elsewhere.
pub fn apply_perturbation(e: &[f64], delta: &[f64], mask: &[u8]) -> Result<Vec<f64>> {
    if e.len() != delta.len() || mask.is_empty() || e.len() % mask.len() != 0 {
        return Err(CarlError::Dimension {
            op: "apply_perturbation",
            lhs: vec![e.len()],
            rhs: vec![delta.len(), mask.len()],
        });
    }
    let d = e.len() / mask.len();
    let mut out = e.to_vec();
    for (pos, &m) in mask.iter().enumerate() {
        if m == 1 {
            for c in pos * d..(pos + 1) * d {
                out[c] = e[c] + delta[c];
            }
        }
    }
    Ok(out)
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Iterated sign-of-normalized-gradient ascent on the salient token
/// embeddings, each token kept inside an L2 ball of radius `epsilon` around
/// its clean value and the whole perturbation inside the Frobenius cap.
///
/// `loss_fn` maps perturbed embeddings `[n×t×d]` to the loss and its gradient
/// with respect to those embeddings. Returns the perturbation; `e0` is not
/// modified.
pub fn pgd_attack<F>(e0: &[f64], d: usize, salient: &SalientSet, mut loss_fn: F, cfg: &PtdConfig, step: usize) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    cfg.validate()?;
    if e0.len() != salient.n * salient.t * d {
        return Err(CarlError::Dimension {
            op: "pgd_attack",
            lhs: vec![salient.n, salient.t, d],
            rhs: vec![e0.len()],
        });
    }
    let mut delta = vec![0.0; e0.len()];
    let positions: Vec<usize> = salient
        .mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 1)
        .map(|(p, _)| p)
        .collect();
    if positions.is_empty() {
        return Ok(delta);
    }
    for _ in 0..cfg.pgd_steps {
        let current = apply_perturbation(e0, &delta, &salient.mask)?;
        let (loss, grad) = loss_fn(&current)?;
        if !loss.is_finite() {
            return Err(CarlError::numeric("attack loss", step));
        }
        if grad.len() != e0.len() {
            return Err(CarlError::Dimension {
                op: "pgd_attack gradient",
                lhs: vec![e0.len()],
                rhs: vec![grad.len()],
            });
        }
        for &p in &positions {
            let range = p * d..(p + 1) * d;
            let gt = &grad[range.clone()];
            let norm = l2(gt).max(GRAD_NORM_FLOOR);
            let dt = &mut delta[range];
            for (x, gv) in dt.iter_mut().zip(gt) {
                let unit = gv / norm;
                let s = if unit > 0.0 {
                    1.0
                } else if unit < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *x += cfg.alpha * s;
            }
            let n = l2(dt);
            if n > cfg.epsilon {
                let scale = cfg.epsilon / n;
                dt.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    let cap = cfg.cap_for(positions.len());
    let frob = l2(&delta);
    if frob > cap {
        let scale = cap / frob;
        delta.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(delta)
}

/// One token's focal term `-(1 - p_t)^gamma * log(p_t)`.
pub fn focal_term(p_t: f64, gamma: f64) -> f64 {
    let w = if gamma == 0.0 { 1.0 } else { (1.0 - p_t).powf(gamma) };
    -w * p_t.max(LOG_FLOOR).ln()
}

fn check_focal_inputs(p: &[f64], labels: &[u8], valid: &[u8], gamma: f64) -> Result<()> {
    if p.len() != labels.len() || p.len() != valid.len() {
        return Err(CarlError::Dimension {
            op: "focal_loss",
            lhs: vec![p.len()],
            rhs: vec![labels.len(), valid.len()],
        });
    }
    if !(gamma >= 0.0) {
        return Err(CarlError::Parameter(format!("focal gamma must be non-negative, got {gamma}")));
    }
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CarlError::Contract(format!("detection probability {bad} outside [0,1]")));
    }
    Ok(())
}

/// Mean focal loss over valid positions, with `p_t = p` on perturbed tokens
/// and `1 - p` on clean ones.
pub fn focal_loss(p: &[f64], labels: &[u8], valid: &[u8], gamma: f64) -> Result<f64> {
    check_focal_inputs(p, labels, valid, gamma)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ((&pi, &m), &v) in p.iter().zip(labels).zip(valid) {
        if v == 1 {
            let p_t = if m == 1 { pi } else { 1.0 - pi };
            total += focal_term(p_t, gamma);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Graph form of [`focal_loss`]; gradients flow into `p`.
pub fn focal_loss_node(g: &mut Graph, p: NodeId, labels: &[u8], valid: &[u8], gamma: f64) -> Result<NodeId> {
    check_focal_inputs(g.value(p), labels, valid, gamma)?;
    // p_t = p * (2m - 1) + (1 - m)
    let sign: Vec<f64> = labels.iter().map(|&m| 2.0 * m as f64 - 1.0).collect();
    let offset: Vec<f64> = labels.iter().map(|&m| 1.0 - m as f64).collect();
    let signed = g.mul_const(p, sign)?;
    let p_t = g.add_const(signed, &offset)?;
    let log_pt = g.log(p_t, LOG_FLOOR);
    let terms = if gamma == 0.0 {
        log_pt
    } else {
        let neg = g.scale(p_t, -1.0);
        let one_minus = g.add_scalar(neg, 1.0);
        let w = g.powf(one_minus, gamma);
        g.mul(w, log_pt)?
    };
    let count = valid.iter().filter(|&&v| v == 1).count();
    let weights: Vec<f64> = valid.iter().map(|&v| v as f64).collect();
    let masked = g.mul_const(terms, weights)?;
    let total = g.sum(masked);
    Ok(g.scale(total, -1.0 / count.max(1) as f64))
}

/// Unpadded, non-CLS positions of a `[n × t]` attention mask.
pub fn detection_targets(attention_mask: &[u8], t: usize) -> Vec<u8> {
    attention_mask
        .iter()
        .enumerate()
        .map(|(pos, &m)| if pos % t == 0 { 0 } else { m })
        .collect()
}
