//! Tiny transformer text encoder with CLS pooling, the projection and
//! prediction heads of the two-branch setup, and the perturbed-token
//! detection head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, TokenBatch, VOCAB_SIZE};
use crate::error::{CarlError, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, NodeId};

const LN_EPS: f64 = 1e-5;
/// Additive attention bias on padded keys; exp underflows to exactly 0.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub d_proj: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 32,
            dropout_p: 0.1,
            d_proj: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("d_proj", self.d_proj),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(CarlError::Parameter(format!("encoder.{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CarlError::Parameter(format!(
                "encoder.d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(CarlError::Parameter(format!("encoder.dropout_p {} not in [0,1)", self.dropout_p)));
        }
        if self.max_len < 2 {
            return Err(CarlError::Parameter("encoder.max_len must be at least 2".into()));
        }
        Ok(())
    }
}

/// Parameters owned by the online branch only.
pub fn is_online_only(name: &str) -> bool {
    name.starts_with("pred.") || name.starts_with("detect.")
}

/// Randomly initialized online-branch parameters.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let mut normal = |rows: usize, cols: usize, std: f64| -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..rows * cols).map(|_| dist.sample(&mut rng)).collect()
    };
    let (d, ff, dp) = (cfg.d_model, cfg.d_ff, cfg.d_proj);
    let fan = |n: usize| 1.0 / (n as f64).sqrt();

    p.insert("embed.token", &[cfg.vocab_size, d], normal(cfg.vocab_size, d, 0.5))?;
    p.insert("embed.position", &[cfg.max_len, d], normal(cfg.max_len, d, 0.5))?;
    for l in 0..cfg.n_layers {
        let pre = format!("layer{l}");
        p.insert(format!("{pre}.ln1.gain"), &[d], vec![1.0; d])?;
        p.insert(format!("{pre}.ln1.bias"), &[d], vec![0.0; d])?;
        for m in ["q", "k", "v", "o"] {
            p.insert(format!("{pre}.attn.{m}.weight"), &[d, d], normal(d, d, fan(d)))?;
            p.insert(format!("{pre}.attn.{m}.bias"), &[d], vec![0.0; d])?;
        }
        p.insert(format!("{pre}.ln2.gain"), &[d], vec![1.0; d])?;
        p.insert(format!("{pre}.ln2.bias"), &[d], vec![0.0; d])?;
        p.insert(format!("{pre}.ff.in.weight"), &[d, ff], normal(d, ff, fan(d)))?;
        p.insert(format!("{pre}.ff.in.bias"), &[ff], vec![0.0; ff])?;
        p.insert(format!("{pre}.ff.out.weight"), &[ff, d], normal(ff, d, fan(ff)))?;
        p.insert(format!("{pre}.ff.out.bias"), &[d], vec![0.0; d])?;
    }
    p.insert("final_ln.gain", &[d], vec![1.0; d])?;
    p.insert("final_ln.bias", &[d], vec![0.0; d])?;
    p.insert("pooler.weight", &[d, d], normal(d, d, fan(d)))?;
    p.insert("pooler.bias", &[d], vec![0.0; d])?;
    p.insert("proj.l1.weight", &[d, dp], normal(d, dp, fan(d)))?;
    p.insert("proj.l1.bias", &[dp], vec![0.0; dp])?;
    p.insert("proj.l2.weight", &[dp, dp], normal(dp, dp, fan(dp)))?;
    p.insert("proj.l2.bias", &[dp], vec![0.0; dp])?;
    p.insert("pred.l1.weight", &[dp, dp], normal(dp, dp, fan(dp)))?;
    p.insert("pred.l1.bias", &[dp], vec![0.0; dp])?;
    p.insert("pred.l2.weight", &[dp, dp], normal(dp, dp, fan(dp)))?;
    p.insert("pred.l2.bias", &[dp], vec![0.0; dp])?;
    p.insert("detect.weight", &[d, 1], normal(d, 1, fan(d)))?;
    p.insert("detect.bias", &[1], vec![0.0])?;
    Ok(p)
}

/// Target-branch copy: encoder and projection head, no prediction or
/// detection head.
pub fn target_from_online(online: &ParamSet) -> ParamSet {
    online.filtered(|n| !is_online_only(n))
}

fn linear(g: &mut Graph, p: &Bound, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = p.id(&format!("{prefix}.weight"))?;
    let b = p.id(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn check_batch(cfg: &EncoderConfig, batch: &TokenBatch) -> Result<()> {
    if batch.t > cfg.max_len {
        return Err(CarlError::Data(format!(
            "batch width {} exceeds encoder max_len {}",
            batch.t, cfg.max_len
        )));
    }
    if let Some(&bad) = batch.token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(CarlError::Data(format!(
            "token id {bad} outside vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Token plus position embeddings, `[N×T×d]`.
pub fn embed(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, batch: &TokenBatch) -> Result<NodeId> {
    check_batch(cfg, batch)?;
    let ids: Vec<usize> = batch.token_ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..batch.n).flat_map(|_| 0..batch.t).collect();
    let tok = g.gather_rows(p.id("embed.token")?, &ids)?;
    let pos = g.gather_rows(p.id("embed.position")?, &positions)?;
    let sum = g.add(tok, pos)?;
    g.reshape(sum, &[batch.n, batch.t, cfg.d_model])
}

/// Node handles produced by [`encode`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// The `[N×T×d]` input embeddings actually fed to the blocks.
    pub embeddings: NodeId,
    /// Final hidden states, `[N×T×d]`.
    pub hidden: NodeId,
    /// Pooled CLS representation, `[N×d]`.
    pub sentence: NodeId,
}

fn attention_bias(batch: &TokenBatch, heads: usize) -> Vec<f64> {
    let t = batch.t;
    let mut bias = Vec::with_capacity(batch.n * heads * t * t);
    for i in 0..batch.n {
        let mask = &batch.attention_mask[i * t..(i + 1) * t];
        for _ in 0..heads * t {
            bias.extend(mask.iter().map(|&m| if m == 1 { 0.0 } else { MASKED }));
        }
    }
    bias
}

fn split_heads(g: &mut Graph, x: NodeId, n: usize, t: usize, h: usize, dh: usize) -> Result<NodeId> {
    let x = g.reshape(x, &[n, t, h, dh])?;
    let x = g.permute_0213(x)?;
    g.reshape(x, &[n * h, t, dh])
}

fn self_attention(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, x: NodeId, batch: &TokenBatch, bias: &[f64], pre: &str) -> Result<NodeId> {
    let (n, t, h) = (batch.n, batch.t, cfg.n_heads);
    let dh = cfg.d_model / h;
    let q = linear(g, p, x, &format!("{pre}.attn.q"))?;
    let k = linear(g, p, x, &format!("{pre}.attn.k"))?;
    let v = linear(g, p, x, &format!("{pre}.attn.v"))?;
    let q = split_heads(g, q, n, t, h, dh)?;
    let k = split_heads(g, k, n, t, h, dh)?;
    let v = split_heads(g, v, n, t, h, dh)?;
    let kt = g.transpose(k)?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let scores = g.add_const(scores, bias)?;
    let weights = g.softmax_rows(scores, 1.0)?;
    let ctx = g.bmm(weights, v)?;
    let ctx = g.reshape(ctx, &[n, h, t, dh])?;
    let ctx = g.permute_0213(ctx)?;
    let ctx = g.reshape(ctx, &[n * t, cfg.d_model])?;
    linear(g, p, ctx, &format!("{pre}.attn.o"))
}

fn maybe_dropout(g: &mut Graph, x: NodeId, p: f64, on: bool) -> Result<NodeId> {
    if on {
        g.dropout(x, p)
    } else {
        Ok(x)
    }
}

/// Runs the transformer on `batch`. When `override_embeddings` is given it
/// replaces the token+position embeddings (the hook used by the embedding
/// attack); it must be `[N×T×d]`.
pub fn encode(
    g: &mut Graph,
    p: &Bound,
    cfg: &EncoderConfig,
    batch: &TokenBatch,
    use_dropout: bool,
    override_embeddings: Option<NodeId>,
) -> Result<Encoded> {
    let (n, t, d) = (batch.n, batch.t, cfg.d_model);
    let embeddings = match override_embeddings {
        Some(e) => {
            check_batch(cfg, batch)?;
            if g.shape(e) != [n, t, d] {
                return Err(CarlError::Dimension {
                    op: "encode override",
                    lhs: vec![n, t, d],
                    rhs: g.shape(e).to_vec(),
                });
            }
            e
        }
        None => embed(g, p, cfg, batch)?,
    };
    let bias = attention_bias(batch, cfg.n_heads);
    let x = g.reshape(embeddings, &[n * t, d])?;
    let mut x = maybe_dropout(g, x, cfg.dropout_p, use_dropout)?;
    for l in 0..cfg.n_layers {
        let pre = format!("layer{l}");
        let h = g.layer_norm(x, p.id(&format!("{pre}.ln1.gain"))?, p.id(&format!("{pre}.ln1.bias"))?, LN_EPS)?;
        let a = self_attention(g, p, cfg, h, batch, &bias, &pre)?;
        let a = maybe_dropout(g, a, cfg.dropout_p, use_dropout)?;
        x = g.add(x, a)?;
        let h = g.layer_norm(x, p.id(&format!("{pre}.ln2.gain"))?, p.id(&format!("{pre}.ln2.bias"))?, LN_EPS)?;
        let f = linear(g, p, h, &format!("{pre}.ff.in"))?;
        let f = g.gelu(f);
        let f = linear(g, p, f, &format!("{pre}.ff.out"))?;
        let f = maybe_dropout(g, f, cfg.dropout_p, use_dropout)?;
        x = g.add(x, f)?;
    }
    let x = g.layer_norm(x, p.id("final_ln.gain")?, p.id("final_ln.bias")?, LN_EPS)?;
    let hidden = g.reshape(x, &[n, t, d])?;
    let cls = g.select_axis1(hidden, 0)?;
    // pooler without activation
    let sentence = linear(g, p, cls, "pooler")?;
    Ok(Encoded {
        embeddings,
        hidden,
        sentence,
    })
}

fn mlp(g: &mut Graph, p: &Bound, x: NodeId, prefix: &str) -> Result<NodeId> {
    let h = linear(g, p, x, &format!("{prefix}.l1"))?;
    let h = g.gelu(h);
    linear(g, p, h, &format!("{prefix}.l2"))
}

/// Projection head, `[N×d_model] -> [N×d_proj]`.
pub fn project(g: &mut Graph, p: &Bound, sentence: NodeId) -> Result<NodeId> {
    mlp(g, p, sentence, "proj")
}

/// Prediction head on the online branch, `[N×d_proj] -> [N×d_proj]`.
pub fn predict(g: &mut Graph, p: &Bound, z: NodeId) -> Result<NodeId> {
    mlp(g, p, z, "pred")
}

/// Per-token perturbation probability, `[N×T×d] -> [N×T]` in (0, 1).
pub fn detect_perturbed(g: &mut Graph, p: &Bound, hidden: NodeId) -> Result<NodeId> {
    let s = g.shape(hidden).to_vec();
    if s.len() != 3 {
        return Err(CarlError::Dimension {
            op: "detect_perturbed",
            lhs: s,
            rhs: vec![],
        });
    }
    let flat = g.reshape(hidden, &[s[0] * s[1], s[2]])?;
    let logits = linear(g, p, flat, "detect")?;
    let probs = g.sigmoid(logits);
    g.reshape(probs, &[s[0], s[1]])
}

/// Dropout-free target-branch projection of `batch`, `[N×d_proj]`.
pub fn target_projection(target: &ParamSet, cfg: &EncoderConfig, batch: &TokenBatch) -> Result<Vec<f64>> {
    let mut g = Graph::new(0);
    let p = target.bind(&mut g, false)?;
    let enc = encode(&mut g, &p, cfg, batch, false, None)?;
    let z = project(&mut g, &p, enc.sentence)?;
    Ok(g.value(z).to_vec())
}

/// Dropout-free pooled sentence embeddings for every record, in corpus order.
pub fn embed_corpus(params: &ParamSet, cfg: &EncoderConfig, corpus: &Corpus, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(corpus.len());
    let all: Vec<usize> = (0..corpus.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let batch = TokenBatch::from_records(corpus, chunk, cfg.max_len)?;
        let mut g = Graph::new(0);
        let p = params.bind(&mut g, false)?;
        let enc = encode(&mut g, &p, cfg, &batch, false, None)?;
        out.extend(g.value(enc.sentence).chunks(cfg.d_model).map(|r| r.to_vec()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Record, PAD_ID};
    use crate::tensor::grad_check;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 24,
            max_len: 8,
            dropout_p: 0.1,
            d_proj: 8,
            ..EncoderConfig::default()
        }
    }

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus {
            records: texts
                .iter()
                .map(|t| Record {
                    text: t.to_string(),
                    valence: 0.5,
                    arousal: -0.5,
                    emotion: None,
                })
                .collect(),
            source_scales: vec![],
        }
    }

    fn sentence(params: &ParamSet, cfg: &EncoderConfig, batch: &TokenBatch, dropout: bool, seed: u64) -> Vec<f64> {
        let mut g = Graph::new(seed);
        let p = params.bind(&mut g, false).unwrap();
        let enc = encode(&mut g, &p, cfg, batch, dropout, None).unwrap();
        g.value(enc.sentence).to_vec()
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig { n_heads: 3, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { dropout_p: 1.0, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { n_layers: 0, ..EncoderConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encode_shapes() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let c = corpus(&["abcd", "xy"]);
        let batch = TokenBatch::from_records(&c, &[0, 1], cfg.max_len).unwrap();
        assert_eq!(batch.t, 5);
        let mut g = Graph::new(0);
        let p = params.bind(&mut g, false).unwrap();
        let enc = encode(&mut g, &p, &cfg, &batch, false, None).unwrap();
        assert_eq!(g.shape(enc.hidden), &[2, 5, 16]);
        assert_eq!(g.shape(enc.sentence), &[2, 16]);
        let z = project(&mut g, &p, enc.sentence).unwrap();
        assert_eq!(g.shape(z), &[2, 8]);
        let q = predict(&mut g, &p, z).unwrap();
        assert_eq!(g.shape(q), &[2, 8]);
        let probs = detect_perturbed(&mut g, &p, enc.hidden).unwrap();
        assert_eq!(g.shape(probs), &[2, 5]);
        assert!(g.value(probs).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn padded_tokens_do_not_change_sentence() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 2).unwrap();
        let c = corpus(&["abcdef", "xy"]);
        let batch = TokenBatch::from_records(&c, &[0, 1], cfg.max_len).unwrap();
        let before = sentence(&params, &cfg, &batch, false, 0);
        let mut altered = batch.clone();
        // row 1 has 3 real tokens; position 4 is padding
        assert_eq!(altered.token_ids[batch.t + 4], PAD_ID);
        altered.token_ids[batch.t + 4] = 'q' as u32;
        let after = sentence(&params, &cfg, &altered, false, 0);
        assert_eq!(before, after);
    }

    #[test]
    fn encode_is_deterministic_with_and_without_dropout() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 3).unwrap();
        let c = corpus(&["hello", "there"]);
        let batch = TokenBatch::from_records(&c, &[0, 1], cfg.max_len).unwrap();
        assert_eq!(sentence(&params, &cfg, &batch, false, 1), sentence(&params, &cfg, &batch, false, 2));
        assert_eq!(sentence(&params, &cfg, &batch, true, 9), sentence(&params, &cfg, &batch, true, 9));
        assert_ne!(sentence(&params, &cfg, &batch, true, 9), sentence(&params, &cfg, &batch, false, 9));
    }

    #[test]
    fn override_with_natural_embeddings_is_bit_identical() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 4).unwrap();
        let c = corpus(&["good day", "bad"]);
        let batch = TokenBatch::from_records(&c, &[0, 1], cfg.max_len).unwrap();
        let mut g = Graph::new(5);
        let p = params.bind(&mut g, false).unwrap();
        let e = embed(&mut g, &p, &cfg, &batch).unwrap();
        let data = g.value(e).to_vec();
        let shape = g.shape(e).to_vec();
        let over = g.constant(data, &shape).unwrap();
        let enc = encode(&mut g, &p, &cfg, &batch, true, Some(over)).unwrap();
        let with_override = g.value(enc.sentence).to_vec();
        assert_eq!(with_override, sentence(&params, &cfg, &batch, true, 5));
    }

    #[test]
    fn override_shape_is_checked() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 4).unwrap();
        let c = corpus(&["ab", "cd"]);
        let batch = TokenBatch::from_records(&c, &[0, 1], cfg.max_len).unwrap();
        let mut g = Graph::new(0);
        let p = params.bind(&mut g, false).unwrap();
        let wrong = g.constant(vec![0.0; 2 * 3 * 15], &[2, 3, 15]).unwrap();
        assert!(encode(&mut g, &p, &cfg, &batch, false, Some(wrong)).is_err());
    }

    #[test]
    fn out_of_vocab_id_is_an_input_error() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 4).unwrap();
        let c = corpus(&["ab", "cd"]);
        let mut batch = TokenBatch::from_records(&c, &[0, 1], cfg.max_len).unwrap();
        batch.token_ids[1] = 300;
        let mut g = Graph::new(0);
        let p = params.bind(&mut g, false).unwrap();
        assert!(matches!(encode(&mut g, &p, &cfg, &batch, false, None), Err(CarlError::Data(_))));
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 5).unwrap();
        let c = corpus(&["alpha", "be", "gamma!"]);
        let fwd = TokenBatch::from_records(&c, &[0, 1, 2], cfg.max_len).unwrap();
        let rev = TokenBatch::from_records(&c, &[2, 0, 1], cfg.max_len).unwrap();
        let a = sentence(&params, &cfg, &fwd, false, 0);
        let b = sentence(&params, &cfg, &rev, false, 0);
        let d = cfg.d_model;
        let row = |v: &[f64], i: usize| v[i * d..(i + 1) * d].to_vec();
        for (ri, fi) in [(0, 2), (1, 0), (2, 1)] {
            for (x, y) in row(&b, ri).iter().zip(row(&a, fi)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_reduce_to_bias_path_on_zero_input() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 6).unwrap();
        let mut g = Graph::new(0);
        let p = params.bind(&mut g, false).unwrap();
        let zero = g.constant(vec![0.0; 2 * 16], &[2, 16]).unwrap();
        let z = project(&mut g, &p, zero).unwrap();
        // bias path: l2(gelu(b1)) + b2
        let b1 = &params.get("proj.l1.bias").unwrap().data;
        let w2 = &params.get("proj.l2.weight").unwrap().data;
        let b2 = &params.get("proj.l2.bias").unwrap().data;
        let hidden: Vec<f64> = b1.iter().map(|&v| crate::tensor::kernels::gelu(v)).collect();
        for j in 0..8 {
            let expect: f64 = (0..8).map(|i| hidden[i] * w2[i * 8 + j]).sum::<f64>() + b2[j];
            assert!((g.value(z)[j] - expect).abs() < 1e-12);
            assert!((g.value(z)[8 + j] - expect).abs() < 1e-12);
        }
        let zp = g.constant(vec![0.0; 8], &[1, 8]).unwrap();
        let q = predict(&mut g, &p, zp).unwrap();
        let b1 = &params.get("pred.l1.bias").unwrap().data;
        let w2 = &params.get("pred.l2.weight").unwrap().data;
        let b2 = &params.get("pred.l2.bias").unwrap().data;
        let hidden: Vec<f64> = b1.iter().map(|&v| crate::tensor::kernels::gelu(v)).collect();
        for j in 0..8 {
            let expect: f64 = (0..8).map(|i| hidden[i] * w2[i * 8 + j]).sum::<f64>() + b2[j];
            assert!((g.value(q)[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_detection_weights_give_sigmoid_of_bias() {
        let cfg = small_cfg();
        let mut params = init_params(&cfg, 7).unwrap();
        params.get_mut("detect.weight").unwrap().data.iter_mut().for_each(|w| *w = 0.0);
        params.get_mut("detect.bias").unwrap().data[0] = 0.3;
        let c = corpus(&["abc", "de"]);
        let batch = TokenBatch::from_records(&c, &[0, 1], cfg.max_len).unwrap();
        let mut g = Graph::new(0);
        let p = params.bind(&mut g, false).unwrap();
        let enc = encode(&mut g, &p, &cfg, &batch, false, None).unwrap();
        let probs = detect_perturbed(&mut g, &p, enc.hidden).unwrap();
        let expect = 1.0 / (1.0 + (-0.3f64).exp());
        assert!(g.value(probs).iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    /// Gradient check of `sum(w ⊙ head(x))` over the head's own parameters.
    fn head_grad_error(prefix: &str, width: usize, head: fn(&mut Graph, &Bound, NodeId) -> Result<NodeId>) -> f64 {
        let cfg = small_cfg();
        let params = init_params(&cfg, 8).unwrap();
        let head_params = params.filtered(|n| n.starts_with(prefix));
        let input: Vec<f64> = (0..3 * width).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
        let weights: Vec<f64> = (0..3 * 8).map(|i| ((i * 5 % 7) as f64 - 3.0) / 3.0).collect();
        let theta = head_params.flatten();
        let f = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut ps = head_params.clone();
            ps.assign_flat(t)?;
            let mut g = Graph::new(0);
            let p = ps.bind(&mut g, true)?;
            let x = g.constant(input.clone(), &[3, width])?;
            let y = head(&mut g, &p, x)?;
            let y = g.mul_const(y, weights.clone())?;
            let loss = g.sum(y);
            g.backward(loss)?;
            Ok((g.scalar(loss), p.grads(&g).flatten()))
        };
        grad_check(f, &theta, 1e-5).unwrap()
    }

    #[test]
    fn projection_head_gradient_check() {
        assert!(head_grad_error("proj.", 16, project) < 1e-5);
    }

    #[test]
    fn prediction_head_gradient_check() {
        assert!(head_grad_error("pred.", 8, predict) < 1e-5);
    }

    #[test]
    fn target_copy_excludes_online_only_heads() {
        let params = init_params(&small_cfg(), 9).unwrap();
        let target = target_from_online(&params);
        assert!(target.get("pred.l1.weight").is_none());
        assert!(target.get("detect.weight").is_none());
        assert_eq!(target.get("proj.l1.weight"), params.get("proj.l1.weight"));
        assert_eq!(target.len() + 6, params.len());
    }

    #[test]
    fn embed_corpus_matches_batched_encode() {
        let cfg = small_cfg();
        let params = init_params(&cfg, 10).unwrap();
        let c = corpus(&["one", "three", "x"]);
        let rows = embed_corpus(&params, &cfg, &c, 2).unwrap();
        assert_eq!(rows.len(), 3);
        let single = TokenBatch::from_records(&c, &[2], cfg.max_len).unwrap();
        let s = sentence(&params, &cfg, &single, false, 0);
        for (a, b) in rows[2].iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
