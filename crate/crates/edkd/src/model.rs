//! Encoder-decoder transformer with pre-layer-norm residual blocks and
//! per-forward capture of the states used by relation losses and
//! gradient-norm probes.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tape, TensorId};
use crate::{Error, Result};

/// Attention/relation score scaling: `sqrt` divides by sqrt(head_dim)
/// (standard practice, the default), `linear` divides by head_dim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    #[default]
    Sqrt,
    Linear,
}

impl ScaleMode {
    pub fn divisor(self, dim: usize) -> f64 {
        match self {
            ScaleMode::Sqrt => (dim as f64).sqrt(),
            ScaleMode::Linear => dim as f64,
        }
    }
}

fn default_max_positions() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    #[serde(default)]
    pub tie_output_embedding: bool,
    #[serde(default)]
    pub scale_mode: ScaleMode,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be >= 1".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(
                "vocab_size must include PAD, BOS and EOS".into(),
            ));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct PTensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Ordered, name-addressable parameter store.
#[derive(Debug, Clone)]
pub struct Parameters<F> {
    entries: Vec<(String, PTensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Parameters<F> {
    fn empty() -> Self {
        Parameters {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<F>) {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, PTensor { shape, data }));
    }

    pub fn get(&self, name: &str) -> &PTensor<F> {
        &self.entries[self.index[name]].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut PTensor<F> {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PTensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut PTensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data.len()).sum()
    }
}

/// Parameter names in deterministic declaration order for a config.
fn named_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::*;
    let d = cfg.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, d], Weight),
        ("pos_emb".to_string(), vec![cfg.max_positions, d], Weight),
    ];
    for i in 0..cfg.enc_layers {
        let p = format!("enc.{i}");
        out.push((format!("{p}.ln_attn_g"), vec![d], Gain));
        out.push((format!("{p}.ln_attn_b"), vec![d], Bias));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.{w}"), vec![d, d], Weight));
        }
        out.push((format!("{p}.ln_ffn_g"), vec![d], Gain));
        out.push((format!("{p}.ln_ffn_b"), vec![d], Bias));
        out.push((format!("{p}.w_in"), vec![d, cfg.ffn_dim], Weight));
        out.push((format!("{p}.w_out"), vec![cfg.ffn_dim, d], Weight));
    }
    out.push(("enc_final_ln_g".into(), vec![d], Gain));
    out.push(("enc_final_ln_b".into(), vec![d], Bias));
    for i in 0..cfg.dec_layers {
        let p = format!("dec.{i}");
        out.push((format!("{p}.ln_self_g"), vec![d], Gain));
        out.push((format!("{p}.ln_self_b"), vec![d], Bias));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.{w}"), vec![d, d], Weight));
        }
        out.push((format!("{p}.ln_cross_g"), vec![d], Gain));
        out.push((format!("{p}.ln_cross_b"), vec![d], Bias));
        for w in ["wq_c", "wk_c", "wv_c", "wo_c"] {
            out.push((format!("{p}.{w}"), vec![d, d], Weight));
        }
        out.push((format!("{p}.ln_ffn_g"), vec![d], Gain));
        out.push((format!("{p}.ln_ffn_b"), vec![d], Bias));
        out.push((format!("{p}.w_in"), vec![d, cfg.ffn_dim], Weight));
        out.push((format!("{p}.w_out"), vec![cfg.ffn_dim, d], Weight));
    }
    out.push(("dec_final_ln_g".into(), vec![d], Gain));
    out.push(("dec_final_ln_b".into(), vec![d], Bias));
    if !cfg.tie_output_embedding {
        out.push(("out_emb".into(), vec![d, cfg.vocab_size], Weight));
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum ParamKind {
    Weight,
    Gain,
    Bias,
}

/// Weights ~ Normal(0, 0.02^2) truncated at +-2 sigma; layer-norm gains 1,
/// biases 0. Deterministic in `seed`.
pub fn init_random<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::empty();
    for (name, shape, kind) in named_shapes(cfg) {
        let n = shape.iter().product();
        let data = match kind {
            ParamKind::Weight => (0..n)
                .map(|_| F::from_f64(trunc_normal(&mut rng, 0.02, 2.0)))
                .collect(),
            ParamKind::Gain => vec![F::ONE; n],
            ParamKind::Bias => vec![F::ZERO; n],
        };
        params.push(name, shape, data);
    }
    Ok(params)
}

/// All-zero parameters with the config's shapes (checkpoint loading target).
pub fn zeros<F: Scalar>(cfg: &ModelConfig) -> Result<Parameters<F>> {
    cfg.validate()?;
    let mut params = Parameters::empty();
    for (name, shape, _) in named_shapes(cfg) {
        let n = shape.iter().product();
        params.push(name, shape, vec![F::ZERO; n]);
    }
    Ok(params)
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64, clip_sigmas: f64) -> f64 {
    loop {
        // Box-Muller on ChaCha uniforms keeps init independent of
        // distribution-crate internals.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= clip_sigmas {
            return std * z;
        }
    }
}

/// Parameter tensors registered on a tape for one step.
pub struct ParamIds {
    map: HashMap<String, TensorId>,
    ordered: Vec<(String, TensorId)>,
}

impl ParamIds {
    pub fn get(&self, name: &str) -> TensorId {
        self.map[name]
    }

    pub fn ordered(&self) -> &[(String, TensorId)] {
        &self.ordered
    }
}

/// Copies every parameter onto the tape as a leaf.
pub fn register_params<F: Scalar>(
    tape: &mut Tape<F>,
    params: &Parameters<F>,
    requires_grad: bool,
) -> ParamIds {
    let mut map = HashMap::new();
    let mut ordered = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let id = tape.leaf(t.data.clone(), t.shape.clone(), requires_grad);
        map.insert(name.to_string(), id);
        ordered.push((name.to_string(), id));
    }
    ParamIds { map, ordered }
}

/// Last-layer states and streams retained per forward pass.
pub struct Capture {
    /// Final encoder output E, [n x d].
    pub e: TensorId,
    /// Final decoder output Z, [m x d].
    pub z: TensorId,
    /// [m x V].
    pub logits: TensorId,
    /// Normalized stream fed into the last encoder layer's self-attention.
    pub enc_last_input: Option<TensorId>,
    /// Normalized stream fed into the last decoder layer's self-attention.
    pub dec_self_last_input: Option<TensorId>,
    /// Normalized stream fed into the last decoder layer's cross-attention.
    pub dec_cross_last_input: Option<TensorId>,
    /// True where the encoder position is a real (non-PAD) token.
    pub enc_valid: Vec<bool>,
    /// True where the decoder input position is real.
    pub dec_valid: Vec<bool>,
    /// True where the decoder position has a live target token.
    pub target_valid: Vec<bool>,
}

/// Key-side attention mask over [rows(q) x cols(k)]: an entry is usable
/// when the key is valid and, for causal streams, not in the future.
/// Query-side validity is handled by excluding rows from the losses.
pub fn attn_mask(q_len: usize, k_valid: &[bool], causal: bool) -> Mask {
    let k_len = k_valid.len();
    let mut m = vec![false; q_len * k_len];
    for i in 0..q_len {
        for (j, &kv) in k_valid.iter().enumerate() {
            m[i * k_len + j] = kv && (!causal || j <= i);
        }
    }
    Arc::new(m)
}

fn check_tokens(cfg: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.len() > cfg.max_positions {
        return Err(Error::Config(format!(
            "sequence length {} exceeds max_positions {}",
            ids.len(),
            cfg.max_positions
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Config(format!(
            "token id {bad} out of vocab range {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn embed_with_positions<F: Scalar>(
    tape: &mut Tape<F>,
    p: &ParamIds,
    ids: &[usize],
) -> Result<TensorId> {
    let tok = tape.embedding(p.get("tok_emb"), ids)?;
    let pos_ids: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.embedding(p.get("pos_emb"), &pos_ids)?;
    Ok(tape.add(tok, pos)?)
}

#[allow(clippy::too_many_arguments)]
fn attention<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    x_q: TensorId,
    x_kv: TensorId,
    p: &ParamIds,
    prefix: &str,
    names: [&str; 4],
    mask: &Mask,
) -> Result<TensorId> {
    let q = tape.matmul(x_q, p.get(&format!("{prefix}.{}", names[0])))?;
    let k = tape.matmul(x_kv, p.get(&format!("{prefix}.{}", names[1])))?;
    let v = tape.matmul(x_kv, p.get(&format!("{prefix}.{}", names[2])))?;
    let da = cfg.head_dim();
    let inv_scale = 1.0 / cfg.scale_mode.divisor(da);
    let mut ctx = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, h * da, da)?;
        let kh = tape.slice_cols(k, h * da, da)?;
        let vh = tape.slice_cols(v, h * da, da)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, inv_scale);
        let att = tape.softmax_rows(scaled, Some(mask.clone()))?;
        ctx.push(tape.matmul(att, vh)?);
    }
    let merged = tape.concat_cols(&ctx)?;
    Ok(tape.matmul(merged, p.get(&format!("{prefix}.{}", names[3])))?)
}

fn ffn_block<F: Scalar>(
    tape: &mut Tape<F>,
    p: &ParamIds,
    prefix: &str,
    h: TensorId,
) -> Result<TensorId> {
    let g = p.get(&format!("{prefix}.ln_ffn_g"));
    let b = p.get(&format!("{prefix}.ln_ffn_b"));
    let x = tape.layer_norm(h, g, b)?;
    let inner = tape.matmul(x, p.get(&format!("{prefix}.w_in")))?;
    let act = tape.gelu(inner);
    let out = tape.matmul(act, p.get(&format!("{prefix}.w_out")))?;
    Ok(tape.add(h, out)?)
}

pub struct EncodeOut {
    pub e: TensorId,
    pub last_attn_input: Option<TensorId>,
}

/// Pre-norm encoder stack. PAD positions are masked out of attention keys.
pub fn encode<F: Scalar>(
    tape: &mut Tape<F>,
    p: &ParamIds,
    cfg: &ModelConfig,
    tokens: &[usize],
    valid: &[bool],
) -> Result<EncodeOut> {
    check_tokens(cfg, tokens)?;
    let n = tokens.len();
    let mask = attn_mask(n, valid, false);
    let mut h = embed_with_positions(tape, p, tokens)?;
    let mut last_attn_input = None;
    for i in 0..cfg.enc_layers {
        let prefix = format!("enc.{i}");
        let g = p.get(&format!("{prefix}.ln_attn_g"));
        let b = p.get(&format!("{prefix}.ln_attn_b"));
        let x = tape.layer_norm(h, g, b)?;
        if i + 1 == cfg.enc_layers {
            last_attn_input = Some(x);
        }
        let att = attention(tape, cfg, x, x, p, &prefix, ["wq", "wk", "wv", "wo"], &mask)?;
        h = tape.add(h, att)?;
        h = ffn_block(tape, p, &prefix, h)?;
    }
    let e = tape.layer_norm(h, p.get("enc_final_ln_g"), p.get("enc_final_ln_b"))?;
    Ok(EncodeOut { e, last_attn_input })
}

pub struct DecodeOut {
    pub z: TensorId,
    pub logits: TensorId,
    pub self_last_input: Option<TensorId>,
    pub cross_last_input: Option<TensorId>,
}

/// Pre-norm decoder stack: self-attention (causal), cross-attention over
/// `e`, FFN. Logits are `Z . W^E`.
pub fn decode<F: Scalar>(
    tape: &mut Tape<F>,
    p: &ParamIds,
    cfg: &ModelConfig,
    dec_tokens: &[usize],
    dec_valid: &[bool],
    e: TensorId,
    enc_valid: &[bool],
) -> Result<DecodeOut> {
    check_tokens(cfg, dec_tokens)?;
    let m = dec_tokens.len();
    let self_mask = attn_mask(m, dec_valid, true);
    let cross_mask = attn_mask(m, enc_valid, false);
    let mut h = embed_with_positions(tape, p, dec_tokens)?;
    let mut self_last_input = None;
    let mut cross_last_input = None;
    for i in 0..cfg.dec_layers {
        let prefix = format!("dec.{i}");
        let last = i + 1 == cfg.dec_layers;
        let g = p.get(&format!("{prefix}.ln_self_g"));
        let b = p.get(&format!("{prefix}.ln_self_b"));
        let x = tape.layer_norm(h, g, b)?;
        if last {
            self_last_input = Some(x);
        }
        let att = attention(tape, cfg, x, x, p, &prefix, ["wq", "wk", "wv", "wo"], &self_mask)?;
        h = tape.add(h, att)?;
        let g = p.get(&format!("{prefix}.ln_cross_g"));
        let b = p.get(&format!("{prefix}.ln_cross_b"));
        let xc = tape.layer_norm(h, g, b)?;
        if last {
            cross_last_input = Some(xc);
        }
        let mca = attention(
            tape,
            cfg,
            xc,
            e,
            p,
            &prefix,
            ["wq_c", "wk_c", "wv_c", "wo_c"],
            &cross_mask,
        )?;
        h = tape.add(h, mca)?;
        h = ffn_block(tape, p, &prefix, h)?;
    }
    let z = tape.layer_norm(h, p.get("dec_final_ln_g"), p.get("dec_final_ln_b"))?;
    let logits = if cfg.tie_output_embedding {
        let we = tape.transpose(p.get("tok_emb"))?;
        tape.matmul(z, we)?
    } else {
        tape.matmul(z, p.get("out_emb"))?
    };
    Ok(DecodeOut {
        z,
        logits,
        self_last_input,
        cross_last_input,
    })
}

/// Forward one batch; returns per-example captures and, when requested,
/// the batch-level token cross entropy (PAD targets ignored, weighted by
/// per-example valid-token counts).
pub fn forward_batch<F: Scalar>(
    tape: &mut Tape<F>,
    p: &ParamIds,
    cfg: &ModelConfig,
    batch: &Batch,
    with_lm_loss: bool,
) -> Result<(Vec<Capture>, Option<TensorId>)> {
    let mut captures = Vec::with_capacity(batch.examples.len());
    let mut weighted = Vec::new();
    let mut total_valid = 0usize;
    for ex in &batch.examples {
        let enc = encode(tape, p, cfg, &ex.enc_ids, &ex.enc_valid)?;
        let dec_valid: Vec<bool> = ex.dec_input.iter().map(|&t| t != crate::data::PAD).collect();
        let dec = decode(tape, p, cfg, &ex.dec_input, &dec_valid, enc.e, &ex.enc_valid)?;
        let target_valid: Vec<bool> = ex.dec_target.iter().map(|&t| t >= 0).collect();
        if with_lm_loss {
            let count = target_valid.iter().filter(|&&v| v).count();
            if count > 0 {
                let ce = tape.token_cross_entropy(dec.logits, &ex.dec_target)?;
                weighted.push((ce, count));
                total_valid += count;
            }
        }
        captures.push(Capture {
            e: enc.e,
            z: dec.z,
            logits: dec.logits,
            enc_last_input: enc.last_attn_input,
            dec_self_last_input: dec.self_last_input,
            dec_cross_last_input: dec.cross_last_input,
            enc_valid: ex.enc_valid.clone(),
            dec_valid,
            target_valid,
        });
    }
    let lm_loss = if with_lm_loss {
        if total_valid == 0 {
            return Err(Error::Data("batch has no valid target tokens".into()));
        }
        let mut acc: Option<TensorId> = None;
        for (ce, count) in weighted {
            let scaled = tape.scale(ce, count as f64 / total_valid as f64);
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled)?,
                None => scaled,
            });
        }
        acc
    } else {
        None
    };
    Ok((captures, lm_loss))
}
