//! Momentum continuous-label contrastive learning: EMA target updates, the
//! cosine momentum schedule, embedding/label similarity matrices, their row
//! distributions and the symmetric cross-entropy objective.

use serde::{Deserialize, Serialize};

use crate::error::{CarlError, Result};
use crate::params::ParamSet;
use crate::tensor::{softmax_in_place, Graph, NodeId};

/// Norm floor for embedding cosine similarity.
pub const EMBED_NORM_EPS: f64 = 1e-12;
/// Norm floor for label cosine similarity.
pub const LABEL_NORM_EPS: f64 = 1e-8;
/// Floor on log arguments in the cross-entropy terms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MccLConfig {
    pub m_initial: f64,
    pub temperature_sim: f64,
    pub temperature_label: f64,
}

impl Default for MccLConfig {
    fn default() -> Self {
        MccLConfig {
            m_initial: 0.9996,
            temperature_sim: 0.05,
            temperature_label: 0.05,
        }
    }
}

impl MccLConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.m_initial) {
            return Err(CarlError::Parameter(format!("mccl.m_initial {} not in [0,1]", self.m_initial)));
        }
        if !(self.temperature_sim > 0.0) || !(self.temperature_label > 0.0) {
            return Err(CarlError::Parameter("mccl temperatures must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumState {
    pub m_initial: f64,
    pub k: usize,
    pub total: usize,
    pub m_current: f64,
}

impl MomentumState {
    pub fn new(m_initial: f64, total: usize) -> Self {
        MomentumState {
            m_initial,
            k: 0,
            total,
            m_current: m_initial,
        }
    }

    /// Moves the schedule to step `k` and returns the coefficient there.
    pub fn advance_to(&mut self, k: usize) -> Result<f64> {
        self.m_current = momentum_schedule(k, self.total, self.m_initial)?;
        self.k = k;
        Ok(self.m_current)
    }
}

/// Cosine-annealed momentum: `m_initial` at step 0 rising to 1 at step `total`.
pub fn momentum_schedule(k: usize, total: usize, m_initial: f64) -> Result<f64> {
    if total == 0 {
        return Err(CarlError::Contract("momentum schedule needs at least one step".into()));
    }
    if k > total {
        return Err(CarlError::Contract(format!("momentum step {k} beyond total {total}")));
    }
    if k == 0 {
        return Ok(m_initial);
    }
    if k == total {
        return Ok(1.0);
    }
    let phase = (std::f64::consts::PI * k as f64 / total as f64).cos();
    Ok(1.0 - (1.0 - m_initial) * (phase + 1.0) / 2.0)
}

/// In-place `target <- m * target + (1 - m) * online` for every target array.
pub fn ema_update(target: &mut ParamSet, online: &ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(CarlError::Contract(format!("momentum {m} not in [0,1]")));
    }
    for t in target.iter() {
        let o = online.require(&t.name)?;
        if o.shape != t.shape {
            return Err(CarlError::Contract(format!(
                "EMA shape mismatch for `{}`: target {:?}, online {:?}",
                t.name, t.shape, o.shape
            )));
        }
    }
    for t in target.iter_mut() {
        let o = online.get(&t.name).expect("checked above");
        for (a, b) in t.data.iter_mut().zip(&o.data) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityKind {
    Embedding,
    Label,
}

/// Dense `n × n` similarity matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Vec<f64>,
    pub n: usize,
    pub kind: SimilarityKind,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Row-normalized probability form of a similarity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RowDistribution {
    pub rows: Vec<f64>,
    pub n: usize,
    pub temperature: f64,
}

impl RowDistribution {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n..(i + 1) * self.n]
    }
}

fn normalized_rows(x: &[f64], d: usize, eps: f64) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            r.iter().map(move |v| v / n)
        })
        .collect()
}

/// Cosine similarity between every online row `q[i]` and target row `z[j]`.
pub fn embedding_similarity(q_online: &[f64], z_target: &[f64], n: usize, d: usize) -> Result<SimilarityMatrix> {
    if n < 2 {
        return Err(CarlError::Contract(format!("similarity needs N >= 2, got {n}")));
    }
    if q_online.len() != n * d || z_target.len() != n * d {
        return Err(CarlError::Dimension {
            op: "embedding_similarity",
            lhs: vec![q_online.len()],
            rhs: vec![z_target.len()],
        });
    }
    let q = normalized_rows(q_online, d, EMBED_NORM_EPS);
    let z = normalized_rows(z_target, d, EMBED_NORM_EPS);
    let mut values = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let s: f64 = q[i * d..(i + 1) * d].iter().zip(&z[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            values.push(s.clamp(-1.0, 1.0));
        }
    }
    Ok(SimilarityMatrix {
        values,
        n,
        kind: SimilarityKind::Embedding,
    })
}

/// Cosine similarity of valence-arousal label vectors.
pub fn label_similarity(labels: &[[f64; 2]]) -> Result<SimilarityMatrix> {
    let n = labels.len();
    if n < 2 {
        return Err(CarlError::Contract(format!("similarity needs N >= 2, got {n}")));
    }
    let norms: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, [v, a])| {
            let norm = (v * v + a * a).sqrt();
            if norm < 1e-6 {
                log::warn!("label {i} ({v}, {a}) is near the origin; its affect direction is ill-defined");
            }
            norm.max(LABEL_NORM_EPS)
        })
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let dot = labels[i][0] * labels[j][0] + labels[i][1] * labels[j][1];
            let s = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        values,
        n,
        kind: SimilarityKind::Label,
    })
}

/// Row-wise softmax of `s / temperature`.
pub fn to_distribution(s: &SimilarityMatrix, temperature: f64) -> Result<RowDistribution> {
    if !(temperature > 0.0) {
        return Err(CarlError::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    let mut rows = s.values.clone();
    for r in rows.chunks_mut(s.n) {
        softmax_in_place(r, temperature);
    }
    Ok(RowDistribution {
        rows,
        n: s.n,
        temperature,
    })
}

/// `-Σ p log q` with the log argument floored.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).map(|(a, b)| a * b.max(LOG_FLOOR).ln()).sum::<f64>()
}

/// Row-averaged symmetric cross-entropy between the two distributions.
pub fn mccl_loss(p_sim: &RowDistribution, p_va: &RowDistribution) -> Result<f64> {
    if p_sim.n != p_va.n || p_sim.rows.len() != p_va.rows.len() {
        return Err(CarlError::Contract(format!(
            "distribution shapes differ: {} vs {}",
            p_sim.n, p_va.n
        )));
    }
    let n = p_sim.n;
    let total: f64 = (0..n)
        .map(|i| cross_entropy(p_sim.row(i), p_va.row(i)) + cross_entropy(p_va.row(i), p_sim.row(i)))
        .sum();
    Ok(total / n as f64)
}

/// Graph form of [`embedding_similarity`]: gradients flow into `q`, the
/// target rows are constants.
pub fn embedding_similarity_node(g: &mut Graph, q: NodeId, z_target: &[f64]) -> Result<NodeId> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 2 || z_target.len() != shape[0] * shape[1] {
        return Err(CarlError::Dimension {
            op: "embedding_similarity",
            lhs: shape,
            rhs: vec![z_target.len()],
        });
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(CarlError::Contract(format!("similarity needs N >= 2, got {n}")));
    }
    let qn = g.l2_normalize(q, EMBED_NORM_EPS);
    // transposed, normalized target rows: [d × n]
    let z = normalized_rows(z_target, d, EMBED_NORM_EPS);
    let mut zt = vec![0.0; d * n];
    for j in 0..n {
        for c in 0..d {
            zt[c * n + j] = z[j * d + c];
        }
    }
    let zt = g.constant(zt, &[d, n])?;
    g.matmul(qn, zt)
}

/// Graph form of [`mccl_loss`] on top of an embedding similarity node.
/// `p_va` is label-derived and constant.
pub fn mccl_loss_node(g: &mut Graph, sim: NodeId, p_va: &RowDistribution, temperature: f64) -> Result<NodeId> {
    let n = p_va.n;
    if g.shape(sim) != [n, n] {
        return Err(CarlError::Contract(format!(
            "similarity shape {:?} does not match label distribution {n}x{n}",
            g.shape(sim)
        )));
    }
    let p_sim = g.softmax_rows(sim, temperature)?;
    let log_va: Vec<f64> = p_va.rows.iter().map(|v| v.max(LOG_FLOOR).ln()).collect();
    let ce_sim_va = g.mul_const(p_sim, log_va)?;
    let log_sim = g.log(p_sim, LOG_FLOOR);
    let ce_va_sim = g.mul_const(log_sim, p_va.rows.clone())?;
    let both = g.add(ce_sim_va, ce_va_sim)?;
    let total = g.sum(both);
    Ok(g.scale(total, -1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", &[1], vec![v]).unwrap();
        p
    }

    #[test]
    fn ema_examples() {
        let online = one_param(0.0);
        let mut t = one_param(1.0);
        ema_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.get("w").unwrap().data, vec![1.0]);
        ema_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.get("w").unwrap().data, vec![0.0]);
        let mut t = one_param(1.0);
        ema_update(&mut t, &online, 0.9).unwrap();
        assert_eq!(t.get("w").unwrap().data, vec![0.9]);
        assert_eq!(online.get("w").unwrap().data, vec![0.0]);
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let mut t = one_param(1.0);
        let mut o = ParamSet::new();
        o.insert("w", &[2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(ema_update(&mut t, &o, 0.5), Err(CarlError::Contract(_))));
    }

    #[test]
    fn momentum_examples() {
        assert_eq!(momentum_schedule(0, 100, 0.9996).unwrap(), 0.9996);
        assert_eq!(momentum_schedule(100, 100, 0.9996).unwrap(), 1.0);
        assert!((momentum_schedule(50, 100, 0.9996).unwrap() - 0.9998).abs() < 1e-12);
        assert!(momentum_schedule(101, 100, 0.9996).is_err());
    }

    #[test]
    fn momentum_state_tracks_schedule() {
        let mut s = MomentumState::new(0.99, 10);
        assert_eq!(s.m_current, 0.99);
        let m = s.advance_to(10).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(s.k, 10);
    }

    #[test]
    fn embedding_similarity_examples() {
        let s = embedding_similarity(&[1.0, 2.0, 0.0, 1.0], &[2.0, 4.0, 1.0, 0.0], 2, 2).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(s.get(1, 1), 0.0);
        let s = embedding_similarity(&[0.3, -0.2, 1.0, 1.0], &[0.3, -0.2, 5.0, 0.0], 2, 2).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn label_similarity_examples() {
        let s = label_similarity(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(0, 2), -1.0);
        assert!(label_similarity(&[[1.0, 0.0]]).is_err());
    }

    #[test]
    fn distribution_examples() {
        let s = SimilarityMatrix {
            values: vec![0.3; 9],
            n: 3,
            kind: SimilarityKind::Label,
        };
        let p = to_distribution(&s, 0.05).unwrap();
        assert!(p.rows.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let s = SimilarityMatrix {
            values: vec![1.0, -1.0, -1.0, 1.0],
            n: 2,
            kind: SimilarityKind::Label,
        };
        let p = to_distribution(&s, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.rows[0] - e / (e + 1.0 / e)).abs() < 1e-15);
        assert!((p.rows[1] - (1.0 / e) / (e + 1.0 / e)).abs() < 1e-15);
        assert!((p.rows[0] - 0.8808).abs() < 1e-4);

        let s = SimilarityMatrix {
            values: vec![1.0, 0.9, 0.9, 1.0],
            n: 2,
            kind: SimilarityKind::Embedding,
        };
        let p = to_distribution(&s, 0.05).unwrap();
        // e^2 / (e^2 + 1)
        let e2 = (2.0f64).exp();
        assert!((p.rows[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!(p.rows[0] > 0.85);
        assert!(to_distribution(&s, 0.0).is_err());
    }

    fn uniform_dist(n: usize) -> RowDistribution {
        RowDistribution {
            rows: vec![1.0 / n as f64; n * n],
            n,
            temperature: 1.0,
        }
    }

    #[test]
    fn loss_examples() {
        let l = mccl_loss(&uniform_dist(2), &uniform_dist(2)).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
        let l = mccl_loss(&uniform_dist(4), &uniform_dist(4)).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-15);
        assert!(mccl_loss(&uniform_dist(2), &uniform_dist(3)).is_err());
    }

    fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> RowDistribution {
        let s = SimilarityMatrix {
            values: (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            n,
            kind: SimilarityKind::Embedding,
        };
        to_distribution(&s, 0.3).unwrap()
    }

    #[test]
    fn loss_is_symmetric_and_bounded_by_entropies() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let p = random_dist(&mut rng, 4);
            let q = random_dist(&mut rng, 4);
            let pq = mccl_loss(&p, &q).unwrap();
            assert!((pq - mccl_loss(&q, &p).unwrap()).abs() < 1e-12);
            let h: f64 = (0..4)
                .map(|i| cross_entropy(p.row(i), p.row(i)) + cross_entropy(q.row(i), q.row(i)))
                .sum::<f64>()
                / 4.0;
            assert!(pq >= h - 1e-12);
            let pp = mccl_loss(&p, &p).unwrap();
            let hp: f64 = (0..4).map(|i| 2.0 * cross_entropy(p.row(i), p.row(i))).sum::<f64>() / 4.0;
            assert!((pp - hp).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_loss_matches_plain_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d) = (4, 4);
        let q: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let tau = 0.5;
        let p_va = to_distribution(&label_similarity(&labels).unwrap(), tau).unwrap();

        let plain = {
            let s = embedding_similarity(&q, &z, n, d).unwrap();
            mccl_loss(&to_distribution(&s, tau).unwrap(), &p_va).unwrap()
        };
        let f = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut g = Graph::new(0);
            let qn = g.param(t.to_vec(), &[n, d])?;
            let sim = embedding_similarity_node(&mut g, qn, &z)?;
            let loss = mccl_loss_node(&mut g, sim, &p_va, tau)?;
            g.backward(loss)?;
            Ok((g.scalar(loss), g.grad(qn).to_vec()))
        };
        let f = f;
        let (graph_value, _) = f(&q).unwrap();
        assert!((graph_value - plain).abs() < 1e-12);
        assert!(grad_check(f, &q, 1e-5).unwrap() < 1e-4);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn momentum_is_monotone(total in 1usize..500, m0 in 0.0f64..1.0) {
                let mut prev = momentum_schedule(0, total, m0).unwrap();
                prop_assert_eq!(prev, m0);
                for k in 1..=total {
                    let m = momentum_schedule(k, total, m0).unwrap();
                    prop_assert!(m >= prev - 1e-15);
                    prop_assert!(m >= m0 - 1e-15 && m <= 1.0);
                    prev = m;
                }
                prop_assert_eq!(prev, 1.0);
            }

            #[test]
            fn embedding_similarity_is_scale_invariant(
                q in proptest::collection::vec(-2.0f64..2.0, 6),
                z in proptest::collection::vec(-2.0f64..2.0, 6),
                c in 0.01f64..100.0,
            ) {
                prop_assume!(q[..3].iter().map(|v| v * v).sum::<f64>() > 1e-6);
                let base = embedding_similarity(&q, &z, 2, 3).unwrap();
                let mut scaled = q.clone();
                scaled[..3].iter_mut().for_each(|v| *v *= c);
                let other = embedding_similarity(&scaled, &z, 2, 3).unwrap();
                for j in 0..2 {
                    prop_assert!((base.get(0, j) - other.get(0, j)).abs() < 1e-12);
                }
            }

            #[test]
            fn label_similarity_is_symmetric_with_unit_diagonal(
                labels in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..10),
            ) {
                let labels: Vec<[f64; 2]> = labels.into_iter().map(|(v, a)| [v, a]).collect();
                prop_assume!(labels.iter().all(|[v, a]| (v * v + a * a).sqrt() > 1e-3));
                let s = label_similarity(&labels).unwrap();
                for i in 0..s.n {
                    prop_assert!((s.get(i, i) - 1.0).abs() < 1e-12);
                    for j in 0..s.n {
                        prop_assert_eq!(s.get(i, j), s.get(j, i));
                        prop_assert!(s.get(i, j).abs() <= 1.0);
                    }
                }
            }
        }
    }
}
