//! Frozen-embedding evaluation: regression and classification probes,
//! alignment/uniformity, PCA coordinates and ROC AUC.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CarlError, Result};

const NORM_EPS: f64 = 1e-12;
const PROBE_ITERS: usize = 500;
const PROBE_STEP: f64 = 0.1;
const MIN_CLASS_SIZE: usize = 5;
const PCA_TOL: f64 = 1e-9;
const PCA_MAX_ITERS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStats {
    pub mae: f64,
    pub pearson_r: f64,
    pub spearman_rho: f64,
}

/// Correlations are undefined for a constant input; the MAE is still known.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UndefinedCorrelation {
    pub mae: f64,
}

impl From<UndefinedCorrelation> for CarlError {
    fn from(e: UndefinedCorrelation) -> Self {
        CarlError::Data(format!("correlation undefined for a constant vector (mae {})", e.mae))
    }
}

pub fn mean_absolute_error(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// MAE, Pearson r and Spearman rho (Pearson on average ranks).
pub fn correlation_stats(pred: &[f64], truth: &[f64]) -> Result<std::result::Result<CorrelationStats, UndefinedCorrelation>> {
    if pred.len() != truth.len() {
        return Err(CarlError::Dimension {
            op: "correlation_stats",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    if pred.len() < 3 {
        return Err(CarlError::Contract(format!("correlation needs n >= 3, got {}", pred.len())));
    }
    let mae = mean_absolute_error(pred, truth);
    let Some(r) = pearson(pred, truth) else {
        return Ok(Err(UndefinedCorrelation { mae }));
    };
    let rho = pearson(&average_ranks(pred), &average_ranks(truth)).unwrap_or(0.0);
    Ok(Ok(CorrelationStats {
        mae,
        pearson_r: r,
        spearman_rho: rho,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub task: String,
    pub mae: f64,
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub n_train: usize,
    pub n_test: usize,
}

fn check_matrix(op: &'static str, x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map_or(0, Vec::len);
    if let Some(bad) = x.iter().find(|r| r.len() != d) {
        return Err(CarlError::Dimension {
            op,
            lhs: vec![d],
            rhs: vec![bad.len()],
        });
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CarlError::Data(format!("{op}: non-finite embedding value")));
    }
    Ok(d)
}

fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * 0.2).round() as usize).clamp(3, n - 1);
    let test = order[..n_test].to_vec();
    (order[n_test..].to_vec(), test)
}

/// Closed-form ridge fit with intercept; returns (weights, intercept).
fn ridge_fit(x: &[&[f64]], y: &[f64], d: usize) -> Result<(Vec<f64>, f64)> {
    let n = x.len();
    let mean_x: Vec<f64> = (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, c| x[i][c] - mean_x[c]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - mean_y));
    let mut a = xc.transpose() * &xc;
    let lambda = (1e-3 * a.trace() / d as f64).max(1e-12);
    for c in 0..d {
        a[(c, c)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let chol = a
        .cholesky()
        .ok_or_else(|| CarlError::Data("ridge system is not positive definite".into()))?;
    let w = chol.solve(&rhs);
    let intercept = mean_y - w.iter().zip(&mean_x).map(|(a, b)| a * b).sum::<f64>();
    Ok((w.iter().copied().collect(), intercept))
}

/// Ridge-regression probe on a seeded 80/20 split, scored on the test part.
pub fn regression_probe(task: &str, embeddings: &[Vec<f64>], targets: &[f64], split_seed: u64) -> Result<RegressionReport> {
    let n = embeddings.len();
    if targets.len() != n {
        return Err(CarlError::Dimension {
            op: "regression_probe",
            lhs: vec![n],
            rhs: vec![targets.len()],
        });
    }
    if n < 10 {
        return Err(CarlError::Contract(format!("regression probe needs n >= 10, got {n}")));
    }
    let d = check_matrix("regression_probe", embeddings)?;
    let mean = targets.iter().sum::<f64>() / n as f64;
    if targets.iter().all(|&t| t == mean) || targets.iter().all(|&t| t == targets[0]) {
        return Err(CarlError::Data(format!("degenerate target for {task}: zero variance")));
    }
    let (train, test) = split_indices(n, split_seed);
    let xs: Vec<&[f64]> = train.iter().map(|&i| embeddings[i].as_slice()).collect();
    let ys: Vec<f64> = train.iter().map(|&i| targets[i]).collect();
    let (w, b) = ridge_fit(&xs, &ys, d)?;
    let pred: Vec<f64> = test
        .iter()
        .map(|&i| b + embeddings[i].iter().zip(&w).map(|(x, w)| x * w).sum::<f64>())
        .collect();
    let truth: Vec<f64> = test.iter().map(|&i| targets[i]).collect();
    let stats = correlation_stats(&pred, &truth)??;
    Ok(RegressionReport {
        task: task.to_string(),
        mae: stats.mae,
        pearson_r: stats.pearson_r,
        spearman_rho: stats.spearman_rho,
        n_train: train.len(),
        n_test: test.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub task: String,
    pub classes: Vec<String>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]` on the test split.
    pub confusion: Vec<Vec<usize>>,
    pub n_train: usize,
    pub n_test: usize,
}

/// Accuracy and macro precision/recall/F1 from a confusion matrix; 0/0 counts as 0.
pub fn confusion_metrics(confusion: &[Vec<usize>]) -> (f64, f64, f64, f64) {
    let c = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let tp = confusion[k][k];
        let predicted: usize = (0..c).map(|t| confusion[t][k]).sum();
        let actual: usize = confusion[k].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let c = c as f64;
    (ratio(correct, total), p_sum / c, r_sum / c, f_sum / c)
}

/// Per-class seeded 80/20 split so every class appears in both parts.
fn stratified_split(labels: &[usize], n_classes: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for k in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * 0.2).round() as usize).max(1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Multinomial logistic-regression probe: standardized features, zero init,
/// fixed full-batch gradient descent, no regularization.
pub fn classification_probe(task: &str, embeddings: &[Vec<f64>], labels: &[String], split_seed: u64) -> Result<ClassificationReport> {
    let n = embeddings.len();
    if labels.len() != n {
        return Err(CarlError::Dimension {
            op: "classification_probe",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    let d = check_matrix("classification_probe", embeddings)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(CarlError::Data(format!("{task}: classification needs at least 2 classes")));
    }
    if let Some((name, c)) = counts.iter().find(|(_, &c)| c < MIN_CLASS_SIZE) {
        return Err(CarlError::Data(format!(
            "{task}: class `{name}` has {c} samples, at least {MIN_CLASS_SIZE} required"
        )));
    }
    let classes: Vec<String> = counts.keys().map(|s| s.to_string()).collect();
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("class collected above"))
        .collect();
    let nc = classes.len();
    let (train, test) = stratified_split(&y, nc, split_seed);

    let mean: Vec<f64> = (0..d)
        .map(|c| train.iter().map(|&i| embeddings[i][c]).sum::<f64>() / train.len() as f64)
        .collect();
    let std: Vec<f64> = (0..d)
        .map(|c| {
            let v = train.iter().map(|&i| (embeddings[i][c] - mean[c]).powi(2)).sum::<f64>() / train.len() as f64;
            if v.sqrt() > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let standardize = |i: usize| -> Vec<f64> { (0..d).map(|c| (embeddings[i][c] - mean[c]) / std[c]).collect() };
    let xtr: Vec<Vec<f64>> = train.iter().map(|&i| standardize(i)).collect();

    let mut w = vec![0.0; d * nc];
    let mut b = vec![0.0; nc];
    let mut logits = vec![0.0; nc];
    let m = xtr.len() as f64;
    for _ in 0..PROBE_ITERS {
        let mut gw = vec![0.0; d * nc];
        let mut gb = vec![0.0; nc];
        for (x, &i) in xtr.iter().zip(&train) {
            scores(x, &w, &b, &mut logits);
            crate::tensor::softmax_in_place(&mut logits, 1.0);
            logits[y[i]] -= 1.0;
            for (k, &e) in logits.iter().enumerate() {
                gb[k] += e;
                for c in 0..d {
                    gw[c * nc + k] += x[c] * e;
                }
            }
        }
        for (wv, gv) in w.iter_mut().zip(&gw) {
            *wv -= PROBE_STEP * gv / m;
        }
        for (bv, gv) in b.iter_mut().zip(&gb) {
            *bv -= PROBE_STEP * gv / m;
        }
    }

    let mut confusion = vec![vec![0usize; nc]; nc];
    for &i in &test {
        scores(&standardize(i), &w, &b, &mut logits);
        let pred = argmax(&logits);
        confusion[y[i]][pred] += 1;
    }
    let (accuracy, macro_precision, macro_recall, macro_f1) = confusion_metrics(&confusion);
    Ok(ClassificationReport {
        task: task.to_string(),
        classes,
        accuracy,
        macro_precision,
        macro_recall,
        macro_f1,
        confusion,
        n_train: train.len(),
        n_test: test.len(),
    })
}

fn scores(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let nc = b.len();
    out.copy_from_slice(b);
    for (c, xv) in x.iter().enumerate() {
        for k in 0..nc {
            out[k] += xv * w[c * nc + k];
        }
    }
}

/// Index of the largest value; the first one wins ties.
fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

fn normalized(embeddings: &[Vec<f64>]) -> Vec<Vec<f64>> {
    embeddings
        .iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean squared distance of positive pairs on the unit sphere.
pub fn alignment(embeddings: &[Vec<f64>], pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CarlError::Contract("alignment needs at least one positive pair".into()));
    }
    check_matrix("alignment", embeddings)?;
    if let Some(&(i, j)) = pairs.iter().find(|(i, j)| *i >= embeddings.len() || *j >= embeddings.len()) {
        return Err(CarlError::Contract(format!("pair ({i},{j}) out of range")));
    }
    let x = normalized(embeddings);
    let total: f64 = pairs.iter().map(|&(i, j)| sq_dist(&x[i], &x[j])).sum();
    Ok(total / pairs.len() as f64)
}

/// Log of the mean Gaussian potential `exp(-2 |xi - xj|^2)` over pairs i<j on
/// the unit sphere.
pub fn uniformity(embeddings: &[Vec<f64>]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return Err(CarlError::Contract(format!("uniformity needs n >= 2, got {n}")));
    }
    check_matrix("uniformity", embeddings)?;
    let x = normalized(embeddings);
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += (-2.0 * sq_dist(&x[i], &x[j])).exp();
        }
    }
    Ok((total / (n * (n - 1) / 2) as f64).ln())
}

/// Same-tag pairs (i<j), subsampled without replacement to at most
/// `max_pairs` and returned in sorted order.
pub fn positive_pairs(tags: &[Option<String>], max_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..tags.len() {
        let Some(a) = &tags[i] else { continue };
        for j in i + 1..tags.len() {
            if tags[j].as_ref() == Some(a) {
                pairs.push((i, j));
            }
        }
    }
    if pairs.len() > max_pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = rand::seq::index::sample(&mut rng, pairs.len(), max_pairs).into_vec();
        keep.sort_unstable();
        pairs = keep.into_iter().map(|k| pairs[k]).collect();
    }
    pairs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub alignment: f64,
    pub uniformity: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `[n × k]` projections of the centered data.
    pub coords: Vec<Vec<f64>>,
    /// Unit-norm principal directions.
    pub components: Vec<Vec<f64>>,
    /// Share of total variance per component.
    pub explained: Vec<f64>,
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = dotv(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Top principal components by power iteration with deflation. Iterates are
/// re-orthogonalized against earlier components. Fewer than `dims`
/// components come back (with a warning) when the data rank is lower.
pub fn pca_project(embeddings: &[Vec<f64>], dims: usize, seed: u64) -> Result<Pca> {
    let n = embeddings.len();
    if n <= dims {
        return Err(CarlError::Contract(format!("PCA needs n > dims, got n={n}, dims={dims}")));
    }
    let d = check_matrix("pca_project", embeddings)?;
    let mean: Vec<f64> = (0..d).map(|c| embeddings.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += r[a] * r[b];
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    let original = cov.clone();
    let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> { (0..d).map(|a| dotv(&m[a * d..(a + 1) * d], v)).collect() };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut explained = Vec::new();
    for _ in 0..dims.min(d) {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let orthogonalize = |v: &mut Vec<f64>, comps: &[Vec<f64>]| {
            for c in comps {
                let p = dotv(v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        };
        orthogonalize(&mut v, &components);
        if normalize_in_place(&mut v) == 0.0 {
            break;
        }
        for _ in 0..PCA_MAX_ITERS {
            let mut next = matvec(&cov, &v);
            orthogonalize(&mut next, &components);
            if normalize_in_place(&mut next) == 0.0 {
                break;
            }
            let diff = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            v = next;
            if diff < PCA_TOL {
                break;
            }
        }
        let lambda = dotv(&v, &matvec(&original, &v));
        if trace <= 0.0 || lambda <= 1e-12 * trace {
            break;
        }
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        explained.push(lambda / trace);
        components.push(v);
    }
    if components.len() < dims {
        log::warn!("PCA: data rank allows only {} of {dims} components", components.len());
    }
    let coords = centered
        .iter()
        .map(|r| components.iter().map(|c| dotv(r, c)).collect())
        .collect();
    Ok(Pca {
        coords,
        components,
        explained,
    })
}

/// Area under the ROC curve via the rank-sum statistic (ties averaged).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CarlError::Dimension {
            op: "roc_auc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CarlError::Data("AUC needs both positive and negative examples".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}
