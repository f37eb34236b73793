//! One CARL training step and full training runs: loss composition, AdamW,
//! learning-rate and momentum schedules, periodic evaluation and
//! checkpointing.

mod checkpoint;
mod optim;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{optimizer_step, AdamHyper, AdamState, ADAM_EPS, BETA1, BETA2};
pub use schedule::{lr_schedule, warmup_steps};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Corpus, TokenBatch};
use crate::encoder::{self, EncoderConfig};
use crate::error::{CarlError, Result};
use crate::eval::regression_probe;
use crate::mccl::{self, MccLConfig, MomentumState, RowDistribution};
use crate::params::ParamSet;
use crate::ptd::{self, PtdConfig, SalientSet};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr_peak: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_frac: f64,
    /// Steps per cosine cycle after warmup; `None` is a single cycle.
    pub restart_period: Option<usize>,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.8,
            lambda2: 0.2,
            lr_peak: 2e-5,
            epochs: 2,
            batch_size: 128,
            warmup_frac: 0.10,
            restart_period: None,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 10,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1 + self.lambda2 > 0.0) {
            return Err(CarlError::Parameter("loss weights must be non-negative with a positive sum".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(CarlError::Parameter(format!("warmup_frac {} not in [0,1)", self.warmup_frac)));
        }
        if !(self.lr_peak > 0.0) {
            return Err(CarlError::Parameter("lr_peak must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(CarlError::Parameter("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(CarlError::Parameter("epochs must be at least 1".into()));
        }
        if self.restart_period == Some(0) {
            return Err(CarlError::Parameter("restart_period must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CarlError::Parameter("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything that defines a model and its training objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarlConfig {
    pub encoder: EncoderConfig,
    pub mccl: MccLConfig,
    pub ptd: PtdConfig,
    pub train: TrainConfig,
}

impl CarlConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mccl.validate()?;
        self.ptd.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestTracker {
    pub metric: f64,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: CarlConfig,
    pub online: ParamSet,
    pub target: ParamSet,
    pub adam: AdamState,
    /// Steps taken so far.
    pub k: usize,
    /// Total steps of the run.
    pub total: usize,
    pub momentum: MomentumState,
    /// All per-step randomness is derived from this seed and the step index.
    pub seed: u64,
    pub best: Option<BestTracker>,
}

/// Randomness streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    CleanDropout = 2,
    DetectDropout = 3,
    Shuffle = 4,
    Probe = 5,
}

/// Seed for `stream` at `index` (a step or an epoch), mixed with splitmix64.
pub fn derive_seed(seed: u64, index: u64, stream: Stream) -> u64 {
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl TrainState {
    /// Fresh state for a run of `total` steps.
    pub fn new(config: CarlConfig, total: usize) -> Result<Self> {
        config.validate()?;
        if total == 0 {
            return Err(CarlError::Contract("a training run needs at least one step".into()));
        }
        let seed = config.train.seed;
        let online = encoder::init_params(&config.encoder, derive_seed(seed, 0, Stream::Init))?;
        let target = encoder::target_from_online(&online);
        let adam = AdamState::new(&online);
        let momentum = MomentumState::new(config.mccl.m_initial, total);
        Ok(TrainState {
            config,
            online,
            target,
            adam,
            k: 0,
            total,
            momentum,
            seed,
            best: None,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.k >= self.total
    }
}

/// `lambda1 * l_mccl + lambda2 * l_ptd`.
pub fn total_loss(l_mccl: f64, l_ptd: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    if !l_mccl.is_finite() || !l_ptd.is_finite() {
        return Err(CarlError::Numeric {
            what: format!("loss terms (mccl {l_mccl}, ptd {l_ptd})"),
            step: 0,
        });
    }
    Ok(lambda1 * l_mccl + lambda2 * l_ptd)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub l_mccl: f64,
    pub l_ptd: f64,
    pub l_total: f64,
    pub m_used: f64,
    pub lr_used: f64,
    pub n_perturbed: usize,
}

/// Label-side inputs of the contrastive loss for one batch.
pub struct BatchTargets {
    pub z_target: Vec<f64>,
    pub p_va: RowDistribution,
}

impl BatchTargets {
    pub fn new(target: &ParamSet, cfg: &CarlConfig, batch: &TokenBatch) -> Result<Self> {
        let labels = mccl::label_similarity(&batch.labels_va)?;
        Ok(BatchTargets {
            z_target: encoder::target_projection(target, &cfg.encoder, batch)?,
            p_va: mccl::to_distribution(&labels, cfg.mccl.temperature_label)?,
        })
    }
}

/// Result of the contrastive forward/backward on (possibly overridden)
/// embeddings.
pub struct MccLPass {
    pub loss: f64,
    pub param_grads: ParamSet,
    pub embeddings: Vec<f64>,
    pub embedding_grads: Vec<f64>,
}

/// Online forward with dropout drawn from `dropout_seed`, the contrastive
/// loss against the fixed target projections, and its backward pass.
/// With `embeddings` given, they replace the token+position embeddings and
/// the parameters are treated as constants.
pub fn mccl_pass(online: &ParamSet, cfg: &CarlConfig, batch: &TokenBatch, targets: &BatchTargets, dropout_seed: u64, embeddings: Option<&[f64]>) -> Result<MccLPass> {
    let mut g = Graph::new(dropout_seed);
    let p = online.bind(&mut g, embeddings.is_none())?;
    let e = match embeddings {
        Some(e) => Some(g.param(e.to_vec(), &[batch.n, batch.t, cfg.encoder.d_model])?),
        None => None,
    };
    let enc = encoder::encode(&mut g, &p, &cfg.encoder, batch, true, e)?;
    let z = encoder::project(&mut g, &p, enc.sentence)?;
    let q = encoder::predict(&mut g, &p, z)?;
    let sim = mccl::embedding_similarity_node(&mut g, q, &targets.z_target)?;
    let loss = mccl::mccl_loss_node(&mut g, sim, &targets.p_va, cfg.mccl.temperature_sim)?;
    g.backward(loss)?;
    Ok(MccLPass {
        loss: g.scalar(loss),
        param_grads: p.grads(&g),
        embeddings: g.value(enc.embeddings).to_vec(),
        embedding_grads: g.grad(enc.embeddings).to_vec(),
    })
}

/// Result of the detection forward/backward on perturbed embeddings.
pub struct PtdPass {
    pub loss: f64,
    pub param_grads: ParamSet,
    /// Per-token detection probabilities, `[n × t]`.
    pub probs: Vec<f64>,
}

/// Online forward on embeddings shifted by the (constant) perturbation on the
/// salient tokens, followed by the focal detection loss and its backward.
pub fn ptd_pass(online: &ParamSet, cfg: &CarlConfig, batch: &TokenBatch, delta: &[f64], salient: &SalientSet, dropout_seed: u64, use_dropout: bool) -> Result<PtdPass> {
    let d = cfg.encoder.d_model;
    let mut g = Graph::new(dropout_seed);
    let p = online.bind(&mut g, true)?;
    let e = encoder::embed(&mut g, &p, &cfg.encoder, batch)?;
    let mut shift = vec![0.0; batch.n * batch.t * d];
    for (pos, &m) in salient.mask.iter().enumerate() {
        if m == 1 {
            shift[pos * d..(pos + 1) * d].copy_from_slice(&delta[pos * d..(pos + 1) * d]);
        }
    }
    let perturbed = g.add_const(e, &shift)?;
    let enc = encoder::encode(&mut g, &p, &cfg.encoder, batch, use_dropout, Some(perturbed))?;
    let probs = encoder::detect_perturbed(&mut g, &p, enc.hidden)?;
    let valid = ptd::detection_targets(&batch.attention_mask, batch.t);
    let loss = ptd::focal_loss_node(&mut g, probs, &salient.mask, &valid, cfg.ptd.gamma)?;
    g.backward(loss)?;
    Ok(PtdPass {
        loss: g.scalar(loss),
        param_grads: p.grads(&g),
        probs: g.value(probs).to_vec(),
    })
}

/// Salient tokens and the embedding attack for one batch, computed from the
/// clean contrastive pass.
pub fn attack_batch(online: &ParamSet, cfg: &CarlConfig, batch: &TokenBatch, targets: &BatchTargets, clean: &MccLPass, dropout_seed: u64, step: usize) -> Result<(SalientSet, Vec<f64>)> {
    let d = cfg.encoder.d_model;
    let scores = ptd::token_saliency(&clean.embedding_grads, &batch.attention_mask, batch.n, batch.t, d, step)?;
    let salient = ptd::select_salient(&scores, &batch.attention_mask, cfg.ptd.ratio)?;
    let delta = ptd::pgd_attack(
        &clean.embeddings,
        d,
        &salient,
        |e| {
            let pass = mccl_pass(online, cfg, batch, targets, dropout_seed, Some(e))?;
            Ok((pass.loss, pass.embedding_grads))
        },
        &cfg.ptd,
        step,
    )?;
    Ok((salient, delta))
}

/// Loss value and gradient of the combined objective with the perturbation
/// held fixed.
pub struct Objective {
    pub l_mccl: f64,
    pub l_ptd: f64,
    pub l_total: f64,
    pub grads: ParamSet,
}

fn combine(clean: &MccLPass, detect: &PtdPass, cfg: &TrainConfig, step: usize) -> Result<Objective> {
    let l_total = total_loss(clean.loss, detect.loss, cfg.lambda1, cfg.lambda2).map_err(|_| CarlError::numeric("loss", step))?;
    let mut grads = clean.param_grads.zeros_like();
    grads.add_scaled(&clean.param_grads, cfg.lambda1)?;
    grads.add_scaled(&detect.param_grads, cfg.lambda2)?;
    Ok(Objective {
        l_mccl: clean.loss,
        l_ptd: detect.loss,
        l_total,
        grads,
    })
}

/// The full training objective for fixed dropout seeds and a fixed
/// perturbation, as differentiated by [`train_step`].
pub fn carl_objective(online: &ParamSet, cfg: &CarlConfig, batch: &TokenBatch, targets: &BatchTargets, salient: &SalientSet, delta: &[f64], seeds: (u64, u64)) -> Result<Objective> {
    let clean = mccl_pass(online, cfg, batch, targets, seeds.0, None)?;
    let detect = ptd_pass(online, cfg, batch, delta, salient, seeds.1, true)?;
    combine(&clean, &detect, &cfg.train, 0)
}

/// One optimization step: clean contrastive pass, saliency and attack,
/// detection pass on the perturbed embeddings, AdamW on the online
/// parameters, then the EMA update of the target branch.
pub fn train_step(state: &mut TrainState, batch: &TokenBatch) -> Result<StepReport> {
    let k = state.k;
    if batch.n < 2 {
        return Err(CarlError::Contract(format!("train_step needs at least 2 rows, got {}", batch.n)));
    }
    if state.is_finished() {
        return Err(CarlError::Contract(format!("run already finished at step {k}")));
    }
    let cfg = &state.config;
    let clean_seed = derive_seed(state.seed, k as u64, Stream::CleanDropout);
    let detect_seed = derive_seed(state.seed, k as u64, Stream::DetectDropout);

    let targets = BatchTargets::new(&state.target, cfg, batch)?;
    let clean = mccl_pass(&state.online, cfg, batch, &targets, clean_seed, None)?;
    if !clean.loss.is_finite() {
        return Err(CarlError::numeric("contrastive loss", k));
    }
    let (salient, delta) = attack_batch(&state.online, cfg, batch, &targets, &clean, clean_seed, k)?;
    let detect = ptd_pass(&state.online, cfg, batch, &delta, &salient, detect_seed, true)?;
    if !detect.loss.is_finite() {
        return Err(CarlError::numeric("detection loss", k));
    }
    let objective = combine(&clean, &detect, &cfg.train, k)?;

    let lr = lr_schedule(k + 1, state.total, &cfg.train);
    let hyper = AdamHyper {
        lr,
        weight_decay: cfg.train.weight_decay,
    };
    optimizer_step(&mut state.online, &mut state.adam, &objective.grads, hyper, k)?;
    let m = state.momentum.advance_to(k)?;
    mccl::ema_update(&mut state.target, &state.online, m)?;
    state.k += 1;
    Ok(StepReport {
        l_mccl: objective.l_mccl,
        l_ptd: objective.l_ptd,
        l_total: objective.l_total,
        m_used: m,
        lr_used: lr,
        n_perturbed: salient.total(),
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// Steps completed after this row's update.
    pub step: usize,
    pub l_mccl: f64,
    pub l_ptd: f64,
    pub l_total: f64,
    pub lr: f64,
    pub momentum: f64,
    pub eval_r_valence: Option<f64>,
    pub eval_r_arousal: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,l_mccl,l_ptd,l_total,lr,momentum,eval_r_valence,eval_r_arousal";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{},{}",
            self.step,
            self.l_mccl,
            self.l_ptd,
            self.l_total,
            self.lr,
            self.momentum,
            opt(self.eval_r_valence),
            opt(self.eval_r_arousal)
        )
    }

    pub fn parse_csv(line: &str) -> Result<MetricsRow> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return Err(CarlError::Data(format!("metrics row has {} fields, expected 8", f.len())));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| CarlError::Data(format!("bad metrics value `{s}`"))) };
        let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
        Ok(MetricsRow {
            step: f[0].parse().map_err(|_| CarlError::Data(format!("bad step `{}`", f[0])))?,
            l_mccl: num(f[1])?,
            l_ptd: num(f[2])?,
            l_total: num(f[3])?,
            lr: num(f[4])?,
            momentum: num(f[5])?,
            eval_r_valence: opt(f[6])?,
            eval_r_arousal: opt(f[7])?,
        })
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| CarlError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| CarlError::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| CarlError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(CarlError::Data(format!("{} is not a metrics log", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::parse_csv).collect()
}

/// Held-out probe correlations of the online encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalScores {
    pub r_valence: f64,
    pub r_arousal: f64,
}

impl EvalScores {
    pub fn mean(&self) -> f64 {
        (self.r_valence + self.r_arousal) / 2.0
    }
}

/// Valence and arousal regression probes on the online encoder's embeddings
/// of `corpus`.
pub fn evaluate_probes(online: &ParamSet, cfg: &CarlConfig, corpus: &Corpus, seed: u64) -> Result<EvalScores> {
    let emb = encoder::embed_corpus(online, &cfg.encoder, corpus, 64)?;
    let labels = corpus.labels();
    let valence: Vec<f64> = labels.iter().map(|l| l[0]).collect();
    let arousal: Vec<f64> = labels.iter().map(|l| l[1]).collect();
    let probe_seed = derive_seed(seed, 0, Stream::Probe);
    Ok(EvalScores {
        r_valence: regression_probe("valence", &emb, &valence, probe_seed)?.pearson_r,
        r_arousal: regression_probe("arousal", &emb, &arousal, probe_seed)?.pearson_r,
    })
}

/// Attacks each batch of `corpus` with the current model and returns the
/// detection head's probabilities at every real token, paired with whether
/// that token was actually perturbed. Feed the result to `roc_auc`.
pub fn detection_scores(state: &TrainState, corpus: &Corpus, batch_size: usize, seed: u64) -> Result<(Vec<f64>, Vec<bool>)> {
    let cfg = &state.config;
    let batches = make_batches(corpus, batch_size, cfg.encoder.max_len, derive_seed(seed, 0, Stream::Shuffle))?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (i, b) in batches.iter().enumerate() {
        let dropout_seed = derive_seed(seed, i as u64, Stream::CleanDropout);
        let targets = BatchTargets::new(&state.target, cfg, b)?;
        let clean = mccl_pass(&state.online, cfg, b, &targets, dropout_seed, None)?;
        let (salient, delta) = attack_batch(&state.online, cfg, b, &targets, &clean, dropout_seed, state.k)?;
        let det = ptd_pass(&state.online, cfg, b, &delta, &salient, 0, false)?;
        let valid = ptd::detection_targets(&b.attention_mask, b.t);
        for (p, _) in valid.iter().enumerate().filter(|(_, v)| **v == 1) {
            scores.push(det.probs[p]);
            labels.push(salient.mask[p] == 1);
        }
    }
    Ok((scores, labels))
}

/// Number of steps a run over `corpus` takes.
pub fn planned_steps(corpus: &Corpus, cfg: &CarlConfig) -> Result<usize> {
    let per_epoch = make_batches(corpus, cfg.train.batch_size, cfg.encoder.max_len, 0)?.len();
    Ok(per_epoch * cfg.train.epochs)
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Stop once this many total steps are done (the run can be resumed).
    pub max_steps: Option<usize>,
    /// Called with the state whenever the evaluation metric improves.
    pub on_best: Option<&'a mut dyn FnMut(&TrainState) -> Result<()>>,
}

/// Trains `state` on `train` until the run finishes (or `max_steps`),
/// evaluating on `eval` every `eval_every` steps. Returns the log rows for
/// the steps taken in this call.
pub fn run_training(state: &mut TrainState, train: &Corpus, eval: Option<&Corpus>, mut opts: RunOptions<'_>) -> Result<Vec<MetricsRow>> {
    let cfg = state.config.clone();
    let planned = planned_steps(train, &cfg)?;
    if planned != state.total {
        return Err(CarlError::Compatibility(format!(
            "state expects {} steps but this corpus and config give {planned}",
            state.total
        )));
    }
    let per_epoch = planned / cfg.train.epochs;
    let stop = opts.max_steps.unwrap_or(state.total).min(state.total);
    let mut rows = Vec::new();
    let mut epoch_batches: Option<(usize, Vec<TokenBatch>)> = None;
    while state.k < stop {
        let epoch = state.k / per_epoch;
        if epoch_batches.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let seed = derive_seed(state.seed, epoch as u64, Stream::Shuffle);
            epoch_batches = Some((epoch, make_batches(train, cfg.train.batch_size, cfg.encoder.max_len, seed)?));
        }
        let batch = &epoch_batches.as_ref().expect("set above").1[state.k % per_epoch];
        let report = train_step(state, batch)?;
        let mut row = MetricsRow {
            step: state.k,
            l_mccl: report.l_mccl,
            l_ptd: report.l_ptd,
            l_total: report.l_total,
            lr: report.lr_used,
            momentum: report.m_used,
            eval_r_valence: None,
            eval_r_arousal: None,
        };
        let due = cfg.train.eval_every > 0 && (state.k % cfg.train.eval_every == 0 || state.is_finished());
        if let (Some(eval), true) = (eval, due) {
            let scores = evaluate_probes(&state.online, &cfg, eval, state.seed)?;
            row.eval_r_valence = Some(scores.r_valence);
            row.eval_r_arousal = Some(scores.r_arousal);
            log::info!(
                "step {}/{}: l_total {:.4} r_valence {:.3} r_arousal {:.3}",
                state.k,
                state.total,
                report.l_total,
                scores.r_valence,
                scores.r_arousal
            );
            let metric = scores.mean();
            if state.best.is_none_or(|b| metric > b.metric) {
                state.best = Some(BestTracker { metric, step: state.k });
                if let Some(cb) = opts.on_best.as_mut() {
                    cb(state)?;
                }
            }
        } else {
            log::debug!("step {}/{}: l_total {:.4}", state.k, state.total, report.l_total);
        }
        rows.push(row);
    }
    Ok(rows)
}
