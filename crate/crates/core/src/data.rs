//! Corpus ingestion, label normalization, byte-level tokenization, batching
//! and the synthetic valence-arousal corpus.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CarlError, Result};

pub const CLS_ID: u32 = 256;
pub const PAD_ID: u32 = 257;
/// 256 byte values plus CLS and PAD.
pub const VOCAB_SIZE: usize = 258;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub valence: f64,
    pub arousal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
}

/// Raw annotation range of one label source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScale {
    pub lo: f64,
    pub hi: f64,
}

impl LabelScale {
    pub const UNIT: LabelScale = LabelScale { lo: -1.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(CarlError::Parameter(format!("label scale needs lo < hi, got ({lo}, {hi})")));
        }
        Ok(LabelScale { lo, hi })
    }
}

/// Records normalized to the common [-1, 1] scale.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub source_scales: Vec<LabelScale>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends another (already normalized) corpus.
    pub fn extend(&mut self, other: Corpus) {
        self.records.extend(other.records);
        self.source_scales.extend(other.source_scales);
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            source_scales: self.source_scales.clone(),
        }
    }

    /// Seeded split into `(train, held_out)` with `held_out` holding
    /// `round(fraction * len)` records.
    pub fn split(&self, fraction: f64, seed: u64) -> (Corpus, Corpus) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_held = ((self.len() as f64) * fraction).round() as usize;
        let (held, train) = idx.split_at(n_held.min(self.len()));
        let mut train = train.to_vec();
        let mut held = held.to_vec();
        train.sort_unstable();
        held.sort_unstable();
        (self.subset(&train), self.subset(&held))
    }

    pub fn labels(&self) -> Vec<[f64; 2]> {
        self.records.iter().map(|r| [r.valence, r.arousal]).collect()
    }

    /// Writes one JSON object per line (labels as stored, i.e. normalized).
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CarlError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("records always serialize");
            writeln!(w, "{line}").map_err(|e| CarlError::io(path, e))?;
        }
        w.flush().map_err(|e| CarlError::io(path, e))
    }
}

/// Min-max rescaling of `x` from `[lo, hi]` onto `[-1, 1]`.
pub fn normalize_labels(x: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(hi > lo) {
        return Err(CarlError::Parameter(format!("label scale needs lo < hi, got ({lo}, {hi})")));
    }
    if !(lo..=hi).contains(&x) {
        return Err(CarlError::Range {
            index: 0,
            value: x,
            lo,
            hi,
        });
    }
    Ok(2.0 * (x - lo) / (hi - lo) - 1.0)
}

fn field<'a>(obj: &'a serde_json::Map<String, serde_json::Value>, key: &str, path: &Path, line: usize) -> Result<&'a serde_json::Value> {
    obj.get(key).ok_or_else(|| CarlError::Schema {
        path: path.to_path_buf(),
        line,
        key: key.to_string(),
    })
}

/// Loads a JSON-lines corpus, normalizing both labels from `scale`.
pub fn load_corpus(path: &Path, scale: LabelScale) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| CarlError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CarlError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| CarlError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| CarlError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: "expected a JSON object".into(),
        })?;
        let schema = |key: &str| CarlError::Schema {
            path: path.to_path_buf(),
            line: line_no,
            key: key.to_string(),
        };
        let text = field(obj, "text", path, line_no)?
            .as_str()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| schema("text"))?
            .to_string();
        let valence = field(obj, "valence", path, line_no)?.as_f64().ok_or_else(|| schema("valence"))?;
        let arousal = field(obj, "arousal", path, line_no)?.as_f64().ok_or_else(|| schema("arousal"))?;
        let emotion = match obj.get("emotion") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => Some(v.as_str().ok_or_else(|| schema("emotion"))?.to_string()),
        };
        let index = records.len();
        let norm = |x: f64| {
            normalize_labels(x, scale.lo, scale.hi).map_err(|e| match e {
                CarlError::Range { value, lo, hi, .. } => CarlError::Range { index, value, lo, hi },
                other => other,
            })
        };
        records.push(Record {
            text,
            valence: norm(valence)?,
            arousal: norm(arousal)?,
            emotion,
        });
    }
    if records.is_empty() {
        log::warn!("corpus {} is empty", path.display());
    }
    Ok(Corpus {
        records,
        source_scales: vec![scale],
    })
}

/// Byte-level token ids `[CLS, bytes.., PAD..]` of length `max_len`, with the
/// matching 0/1 attention mask.
pub fn tokenize(text: &str, max_len: usize) -> Result<(Vec<u32>, Vec<u8>)> {
    if max_len < 2 {
        return Err(CarlError::Parameter(format!("max_len must be at least 2, got {max_len}")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(text.bytes().take(max_len - 1).map(u32::from));
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    let mask = (0..max_len).map(|i| u8::from(i < real)).collect();
    Ok((ids, mask))
}

/// Bytes of the real (non-special) tokens, decoded lossily.
pub fn detokenize(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    /// `[n × t]`, row-major.
    pub token_ids: Vec<u32>,
    /// `[n × t]`, 1 for real tokens.
    pub attention_mask: Vec<u8>,
    pub labels_va: Vec<[f64; 2]>,
    pub n: usize,
    pub t: usize,
    /// Position of each row in the source corpus.
    pub record_indices: Vec<usize>,
}

impl TokenBatch {
    /// Batch of the given corpus rows, padded to the longest row.
    pub fn from_records(corpus: &Corpus, indices: &[usize], max_len: usize) -> Result<TokenBatch> {
        let toks = indices
            .iter()
            .map(|&i| tokenize(&corpus.records[i].text, max_len))
            .collect::<Result<Vec<_>>>()?;
        let t = toks
            .iter()
            .map(|(_, m)| m.iter().map(|&v| v as usize).sum::<usize>())
            .max()
            .unwrap_or(1);
        let mut token_ids = Vec::with_capacity(indices.len() * t);
        let mut attention_mask = Vec::with_capacity(indices.len() * t);
        for (ids, mask) in &toks {
            token_ids.extend_from_slice(&ids[..t]);
            attention_mask.extend_from_slice(&mask[..t]);
        }
        Ok(TokenBatch {
            token_ids,
            attention_mask,
            labels_va: indices
                .iter()
                .map(|&i| [corpus.records[i].valence, corpus.records[i].arousal])
                .collect(),
            n: indices.len(),
            t,
            record_indices: indices.to_vec(),
        })
    }

    /// Number of real tokens in row `i`, CLS included.
    pub fn real_len(&self, i: usize) -> usize {
        self.attention_mask[i * self.t..(i + 1) * self.t]
            .iter()
            .map(|&m| m as usize)
            .sum()
    }
}

/// Seeded shuffle into batches of `batch_size`; a trailing batch with fewer
/// than two rows is dropped.
pub fn make_batches(corpus: &Corpus, batch_size: usize, max_len: usize, seed: u64) -> Result<Vec<TokenBatch>> {
    if batch_size < 2 {
        return Err(CarlError::Parameter(format!("batch_size must be at least 2, got {batch_size}")));
    }
    if corpus.len() < 2 {
        return Err(CarlError::Contract(format!(
            "contrastive batching needs at least 2 records, corpus has {}",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| TokenBatch::from_records(corpus, c, max_len))
        .collect()
}

/// The four valence-arousal quadrants of the synthetic corpus, in order:
/// name and center.
pub const QUADRANTS: [(&str, [f64; 2]); 4] = [
    ("excited", [0.7, 0.7]),
    ("content", [0.7, -0.7]),
    ("angry", [-0.7, 0.7]),
    ("sad", [-0.7, -0.7]),
];

/// Theme vocabularies matching [`QUADRANTS`].
pub fn default_themes() -> [Vec<String>; 4] {
    let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    [
        words("thrilled party dance cheer win bright rush jump wow fireworks celebrate ecstatic"),
        words("calm gentle cozy warm serene quiet tea garden rest peaceful soft relaxed"),
        words("furious rage shout fight hate smash storm yell slam outrage hostile bitter"),
        words("lonely grief tears gloomy empty loss mourn weary bleak tired numb sorrow"),
    ]
}

/// Sentences of 5 to 12 words drawn from each quadrant's theme, labelled with
/// the quadrant center plus uniform noise, clipped to [-1, 1].
pub fn generate_synthetic(n_per_quadrant: usize, themes: &[Vec<String>; 4], noise: f64, seed: u64) -> Result<Corpus> {
    if !(0.0..0.5).contains(&noise) {
        return Err(CarlError::Parameter(format!("noise must lie in [0, 0.5), got {noise}")));
    }
    if let Some(q) = themes.iter().position(|t| t.is_empty()) {
        return Err(CarlError::Parameter(format!("theme list for quadrant {} is empty", QUADRANTS[q].0)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(4 * n_per_quadrant);
    for ((name, center), theme) in QUADRANTS.iter().zip(themes) {
        for _ in 0..n_per_quadrant {
            let n_words = rng.random_range(5..=12);
            let words: Vec<&str> = (0..n_words)
                .map(|_| theme[rng.random_range(0..theme.len())].as_str())
                .collect();
            let mut jitter = || {
                if noise > 0.0 {
                    rng.random_range(-noise..noise)
                } else {
                    0.0
                }
            };
            let valence = (center[0] + jitter()).clamp(-1.0, 1.0);
            let arousal = (center[1] + jitter()).clamp(-1.0, 1.0);
            records.push(Record {
                text: words.join(" "),
                valence,
                arousal,
                emotion: Some(name.to_string()),
            });
        }
    }
    Ok(Corpus {
        records,
        source_scales: vec![LabelScale::UNIT],
    })
}
