//! Command-line front end: `synth`, `train`, `eval` and `export-embeddings`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{self, RunConfig};
use crate::data::{self, Corpus, LabelScale, VOCAB_SIZE};
use crate::encoder;
use crate::error::{CarlError, Result};
use crate::eval::{self, ClassificationReport, GeometryReport, RegressionReport};
use crate::trainer::{self, derive_seed, MetricsRow, RunOptions, Stream, TrainState};

#[derive(Debug, Parser)]
#[command(name = "carl", version, about = "Continuous-label contrastive sentence encoders with perturbed-token detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a four-quadrant synthetic corpus as JSON lines.
    Synth(SynthArgs),
    /// Train from a preset and/or config file.
    Train(TrainArgs),
    /// Probe a checkpoint's embeddings of a corpus.
    Eval(EvalArgs),
    /// Write a checkpoint's sentence embeddings of a corpus.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n_per_quadrant: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML (or .json) run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// paper, desk or smoke; overrides the file's `preset` key.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training corpus; overrides `data.corpus`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    pub out_dir: PathBuf,
    /// Extra `section.key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps; the run can be resumed later.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Native label range of the corpus as `lo,hi`.
    #[arg(long, default_value = "-1,1")]
    pub scale: String,
    /// Comma-separated subset of: regression, classification, geometry, pca.
    #[arg(long, default_value = "regression,classification,geometry,pca")]
    pub tasks: String,
    /// Expected maximum sequence length; must match the checkpoint.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub pca_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Csv,
    Bin,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "-1,1")]
    pub scale: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
    pub format: ExportFormat,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::ExportEmbeddings(a) => cmd_export(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let corpus = data::generate_synthetic(a.n_per_quadrant, &data::default_themes(), a.noise, a.seed)?;
    corpus.write_jsonl(&a.out)?;
    log::info!("wrote {} records to {}", corpus.len(), a.out.display());
    Ok(())
}

fn parse_scale(s: &str) -> Result<LabelScale> {
    let parts: Vec<&str> = s.split(',').collect();
    let nums: Option<Vec<f64>> = parts.iter().map(|p| p.trim().parse().ok()).collect();
    match nums.as_deref() {
        Some([lo, hi]) => LabelScale::new(*lo, *hi).map_err(|e| CarlError::Config(e.to_string())),
        _ => Err(CarlError::Config(format!("--scale expects `lo,hi`, got `{s}`"))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CarlError::io(dir, e))
}

/// Output paths of a training run.
pub struct TrainOutputs {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
    pub state: TrainState,
}

pub fn cmd_train(a: &TrainArgs) -> Result<TrainOutputs> {
    let mut overrides = a.overrides.clone();
    if let Some(seed) = a.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let mut cfg = config::resolve(a.config.as_deref(), a.preset.as_deref(), &overrides)?;
    if let Some(c) = &a.corpus {
        cfg.data.corpus = Some(c.clone());
    }
    let corpus_path = cfg
        .data
        .corpus
        .clone()
        .ok_or_else(|| CarlError::Config("no training corpus: pass --corpus or set data.corpus".into()))?;
    let scale = LabelScale::new(cfg.data.label_lo, cfg.data.label_hi)?;
    let corpus = data::load_corpus(&corpus_path, scale)?;
    let (train, eval) = split_corpus(&cfg, corpus, scale)?;
    log::info!(
        "preset {}: {} training records, {} evaluation records",
        cfg.preset,
        train.len(),
        eval.as_ref().map_or(0, Corpus::len)
    );

    create_dir(&a.out_dir)?;
    let final_checkpoint = a.out_dir.join("final.ckpt");
    let best_checkpoint = a.out_dir.join("best.ckpt");
    let metrics = a.out_dir.join("metrics.csv");
    let config_path = a.out_dir.join("config.toml");
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut state = match &a.resume {
        Some(path) => {
            let state = trainer::load_checkpoint(path)?;
            if state.config != cfg.carl() {
                log::warn!("resuming with the configuration stored in {}", path.display());
            }
            if metrics.exists() {
                rows = trainer::read_metrics_csv(&metrics)?;
                rows.retain(|r| r.step <= state.k);
            }
            state
        }
        None => TrainState::new(cfg.carl(), trainer::planned_steps(&train, &cfg.carl())?)?,
    };
    std::fs::write(&config_path, cfg.to_toml()?).map_err(|e| CarlError::io(&config_path, e))?;

    let mut save_best = |s: &TrainState| trainer::save_checkpoint(s, &best_checkpoint);
    let new_rows = trainer::run_training(
        &mut state,
        &train,
        eval.as_ref(),
        RunOptions {
            max_steps: a.max_steps,
            on_best: Some(&mut save_best),
        },
    )?;
    rows.extend(new_rows);
    trainer::write_metrics_csv(&rows, &metrics)?;
    trainer::save_checkpoint(&state, &final_checkpoint)?;
    if state.best.is_none() {
        trainer::save_checkpoint(&state, &best_checkpoint)?;
    }
    log::info!("finished at step {}/{}", state.k, state.total);
    Ok(TrainOutputs {
        final_checkpoint,
        best_checkpoint,
        metrics,
        config: config_path,
        state,
    })
}

/// Training corpus and, if configured, the evaluation corpus.
fn split_corpus(cfg: &RunConfig, corpus: Corpus, scale: LabelScale) -> Result<(Corpus, Option<Corpus>)> {
    if let Some(path) = &cfg.data.eval_corpus {
        return Ok((corpus, Some(data::load_corpus(path, scale)?)));
    }
    if cfg.data.holdout_frac == 0.0 {
        return Ok((corpus, None));
    }
    let (train, held) = corpus.split(cfg.data.holdout_frac, derive_seed(cfg.train.seed, 0, Stream::Shuffle));
    if held.len() < 10 {
        log::warn!("held-out split has {} records; periodic evaluation disabled", held.len());
        return Ok((train, None));
    }
    Ok((train, Some(held)))
}

pub const EVAL_TASKS: [&str; 4] = ["regression", "classification", "geometry", "pca"];

#[derive(Clone, Debug, Serialize)]
pub struct RegressionPair {
    pub valence: RegressionReport,
    pub arousal: RegressionReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct PcaSummary {
    pub explained: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub n: usize,
    pub d: usize,
    pub step: usize,
    pub tasks: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regression: Option<RegressionPair>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometryReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pca: Option<PcaSummary>,
}

fn parse_tasks(s: &str) -> Result<Vec<String>> {
    let tasks: Vec<String> = s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
    if let Some(bad) = tasks.iter().find(|t| !EVAL_TASKS.contains(&t.as_str())) {
        return Err(CarlError::Config(format!(
            "unknown task `{bad}`; valid tasks: {}",
            EVAL_TASKS.join(", ")
        )));
    }
    if tasks.is_empty() {
        return Err(CarlError::Config(format!("no tasks given; valid tasks: {}", EVAL_TASKS.join(", "))));
    }
    Ok(tasks)
}

fn load_for_embedding(checkpoint: &Path, corpus: &Path, scale: &str, max_len: Option<usize>) -> Result<(TrainState, Corpus)> {
    let state = trainer::load_checkpoint(checkpoint)?;
    let enc = &state.config.encoder;
    if enc.vocab_size != VOCAB_SIZE {
        return Err(CarlError::Compatibility(format!(
            "checkpoint vocabulary has {} entries, the byte tokenizer has {VOCAB_SIZE}",
            enc.vocab_size
        )));
    }
    if let Some(m) = max_len {
        if m != enc.max_len {
            return Err(CarlError::Compatibility(format!(
                "requested max_len {m} but the checkpoint was trained with {}",
                enc.max_len
            )));
        }
    }
    let corpus = data::load_corpus(corpus, parse_scale(scale)?)?;
    if corpus.is_empty() {
        return Err(CarlError::Data("corpus is empty".into()));
    }
    Ok((state, corpus))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let tasks = parse_tasks(&a.tasks)?;
    let (state, corpus) = load_for_embedding(&a.checkpoint, &a.corpus, &a.scale, a.max_len)?;
    let emb = encoder::embed_corpus(&state.online, &state.config.encoder, &corpus, 64)?;
    let labels = corpus.labels();
    let tags: Vec<Option<String>> = corpus.records.iter().map(|r| r.emotion.clone()).collect();
    let has = |t: &str| tasks.iter().any(|x| x == t);

    let mut report = EvalReport {
        checkpoint: a.checkpoint.clone(),
        corpus: a.corpus.clone(),
        n: emb.len(),
        d: state.config.encoder.d_model,
        step: state.k,
        tasks: tasks.clone(),
        regression: None,
        classification: None,
        geometry: None,
        pca: None,
    };
    if has("regression") {
        let v: Vec<f64> = labels.iter().map(|l| l[0]).collect();
        let ar: Vec<f64> = labels.iter().map(|l| l[1]).collect();
        report.regression = Some(RegressionPair {
            valence: eval::regression_probe("valence", &emb, &v, a.seed)?,
            arousal: eval::regression_probe("arousal", &emb, &ar, a.seed)?,
        });
    }
    if has("classification") {
        let tagged: Vec<usize> = (0..emb.len()).filter(|&i| tags[i].is_some()).collect();
        let x: Vec<Vec<f64>> = tagged.iter().map(|&i| emb[i].clone()).collect();
        let y: Vec<String> = tagged.iter().map(|&i| tags[i].clone().expect("filtered")).collect();
        report.classification = Some(eval::classification_probe("emotion", &x, &y, a.seed)?);
    }
    if has("geometry") {
        let pairs = eval::positive_pairs(&tags, 10_000, a.seed);
        if pairs.is_empty() {
            return Err(CarlError::Data("geometry needs records sharing an emotion tag".into()));
        }
        report.geometry = Some(GeometryReport {
            alignment: eval::alignment(&emb, &pairs)?,
            uniformity: eval::uniformity(&emb)?,
            n_pairs: pairs.len(),
        });
    }
    if has("pca") {
        let pca = eval::pca_project(&emb, 2, a.seed)?;
        if let Some(path) = &a.pca_csv {
            write_pca_csv(path, &pca.coords, &tags)?;
        }
        report.pca = Some(PcaSummary { explained: pca.explained });
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| CarlError::Format(e.to_string()))?;
    std::fs::write(&a.out, json + "\n").map_err(|e| CarlError::io(&a.out, e))?;
    Ok(report)
}

fn write_pca_csv(path: &Path, coords: &[Vec<f64>], tags: &[Option<String>]) -> Result<()> {
    let mut out = String::from("id,pc1,pc2,emotion\n");
    for (i, (c, t)) in coords.iter().zip(tags).enumerate() {
        let pc = |k: usize| c.get(k).map(|v| format!("{v:?}")).unwrap_or_default();
        out.push_str(&format!("{i},{},{},{}\n", pc(0), pc(1), t.as_deref().unwrap_or("")));
    }
    std::fs::write(path, out).map_err(|e| CarlError::io(path, e))
}

pub fn cmd_export(a: &ExportArgs) -> Result<()> {
    let (state, corpus) = load_for_embedding(&a.checkpoint, &a.corpus, &a.scale, None)?;
    let emb = encoder::embed_corpus(&state.online, &state.config.encoder, &corpus, 64)?;
    let d = state.config.encoder.d_model;
    let io = |e| CarlError::io(&a.out, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&a.out).map_err(io)?);
    match a.format {
        ExportFormat::Csv => {
            let header: Vec<String> = (0..d).map(|c| format!("e{c}")).collect();
            writeln!(f, "id,{}", header.join(",")).map_err(io)?;
            for (i, row) in emb.iter().enumerate() {
                let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(f, "{i},{}", vals.join(",")).map_err(io)?;
            }
        }
        ExportFormat::Bin => {
            for v in emb.iter().flatten() {
                f.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            let sidecar = sidecar_path(&a.out);
            let meta = serde_json::json!({ "n": emb.len(), "d": d });
            std::fs::write(&sidecar, meta.to_string() + "\n").map_err(|e| CarlError::io(&sidecar, e))?;
        }
    }
    f.flush().map_err(io)
}

/// `<out>.json` next to a binary embedding export.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}
