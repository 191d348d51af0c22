//! Relation-head redistribution and relation distributions: the original
//! A attention-head projections are merged and re-split into R relation
//! heads; each head's relation distribution is the row softmax of its
//! scaled self-similarity. Teacher and student produce identically shaped
//! relation sets whenever they share R, regardless of hidden width.

use std::sync::Arc;

use crate::model::{Capture, ModelConfig, ParamIds, ScaleMode};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tape, TensorId};
use crate::{Error, Result};

/// Which stream a relation set was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    DecoderSelf,
    EncoderSelf,
    Cross,
}

/// Row-stochastic relation distributions for the Q, K and V projections
/// of one stream, one `[L x L]` tensor per relation head. `?_mask` is the
/// entry mask to use when KL-averaging over rows (it additionally zeroes
/// PAD query rows, which the softmax key mask does not).
pub struct RelationSet {
    pub tag: StreamTag,
    pub q: Vec<TensorId>,
    pub k: Vec<TensorId>,
    pub v: Vec<TensorId>,
    pub q_mask: Mask,
    pub k_mask: Mask,
    pub v_mask: Mask,
}

/// Contiguous re-split of merged head projections: relation head `h` owns
/// columns `[h*d_r, (h+1)*d_r)`.
pub fn redistribute_heads<F: Scalar>(
    tape: &mut Tape<F>,
    states: TensorId,
    r: usize,
) -> Result<Vec<TensorId>> {
    let shape = tape.shape(states).to_vec();
    let width = *shape.last().ok_or_else(|| {
        Error::Config("redistribute_heads on a rank-0 tensor".into())
    })?;
    if r == 0 || width % r != 0 {
        return Err(Error::Config(format!(
            "projection width {width} not divisible into {r} relation heads"
        )));
    }
    let d_r = width / r;
    (0..r)
        .map(|h| Ok(tape.slice_cols(states, h * d_r, d_r)?))
        .collect()
}

/// Softmax key-side mask plus the KL row mask for one relation stream.
fn relation_masks(valid: &[bool], causal: bool) -> (Mask, Mask) {
    let l = valid.len();
    let mut soft = vec![false; l * l];
    let mut kl = vec![false; l * l];
    for i in 0..l {
        for j in 0..l {
            let entry = valid[j] && (!causal || j <= i);
            soft[i * l + j] = entry;
            kl[i * l + j] = entry && valid[i];
        }
    }
    (Arc::new(soft), Arc::new(kl))
}

/// Per relation head h: `softmax(S_h S_h^T / scale)` where `S_h` is the
/// h-th slice of the merged projections. `causal` only for decoder-side
/// streams.
pub fn relation_distribution<F: Scalar>(
    tape: &mut Tape<F>,
    states: TensorId,
    r: usize,
    valid: &[bool],
    causal: bool,
    scale_mode: ScaleMode,
) -> Result<(Vec<TensorId>, Mask)> {
    let heads = redistribute_heads(tape, states, r)?;
    let d_r = tape.shape(heads[0])[1];
    let inv_scale = 1.0 / scale_mode.divisor(d_r);
    let (soft_mask, kl_mask) = relation_masks(valid, causal);
    let mut out = Vec::with_capacity(r);
    for s_h in heads {
        let st = tape.transpose(s_h)?;
        let scores = tape.matmul(s_h, st)?;
        let scaled = tape.scale(scores, inv_scale);
        out.push(tape.softmax_rows(scaled, Some(soft_mask.clone()))?);
    }
    Ok((out, kl_mask))
}

fn missing(what: &str) -> Error {
    Error::Config(format!(
        "relation capture unavailable: {what} (model has no such layer)"
    ))
}

/// Q/K/V relations of the last decoder layer's self-attention stream
/// (causal, PAD rows excluded from the KL mask).
pub fn decoder_self_relations<F: Scalar>(
    tape: &mut Tape<F>,
    capture: &Capture,
    params: &ParamIds,
    cfg: &ModelConfig,
    r: usize,
) -> Result<RelationSet> {
    let z = capture
        .dec_self_last_input
        .ok_or_else(|| missing("decoder self-attention input"))?;
    let layer = cfg.dec_layers - 1;
    let mut comps = Vec::with_capacity(3);
    let mut mask = None;
    for w in ["wq", "wk", "wv"] {
        let proj = tape.matmul(z, params.get(&format!("dec.{layer}.{w}")))?;
        let (heads, kl_mask) =
            relation_distribution(tape, proj, r, &capture.dec_valid, true, cfg.scale_mode)?;
        comps.push(heads);
        mask = Some(kl_mask);
    }
    let mask = mask.unwrap();
    let mut it = comps.into_iter();
    Ok(RelationSet {
        tag: StreamTag::DecoderSelf,
        q: it.next().unwrap(),
        k: it.next().unwrap(),
        v: it.next().unwrap(),
        q_mask: mask.clone(),
        k_mask: mask.clone(),
        v_mask: mask,
    })
}

/// Cross-attention relations: queries over the decoder stream (causal),
/// keys and values over the encoder output E (non-causal, PAD-masked).
pub fn cross_relations<F: Scalar>(
    tape: &mut Tape<F>,
    capture: &Capture,
    params: &ParamIds,
    cfg: &ModelConfig,
    r: usize,
) -> Result<RelationSet> {
    let zc = capture
        .dec_cross_last_input
        .ok_or_else(|| missing("decoder cross-attention input"))?;
    let layer = cfg.dec_layers - 1;
    let q_proj = tape.matmul(zc, params.get(&format!("dec.{layer}.wq_c")))?;
    let (q, q_mask) =
        relation_distribution(tape, q_proj, r, &capture.dec_valid, true, cfg.scale_mode)?;
    let k_proj = tape.matmul(capture.e, params.get(&format!("dec.{layer}.wk_c")))?;
    let (k, k_mask) =
        relation_distribution(tape, k_proj, r, &capture.enc_valid, false, cfg.scale_mode)?;
    let v_proj = tape.matmul(capture.e, params.get(&format!("dec.{layer}.wv_c")))?;
    let (v, v_mask) =
        relation_distribution(tape, v_proj, r, &capture.enc_valid, false, cfg.scale_mode)?;
    Ok(RelationSet {
        tag: StreamTag::Cross,
        q,
        k,
        v,
        q_mask,
        k_mask,
        v_mask,
    })
}

/// Q/K/V relations of the last encoder layer's self-attention stream.
pub fn encoder_self_relations<F: Scalar>(
    tape: &mut Tape<F>,
    capture: &Capture,
    params: &ParamIds,
    cfg: &ModelConfig,
    r: usize,
) -> Result<RelationSet> {
    let x = capture
        .enc_last_input
        .ok_or_else(|| missing("encoder self-attention input"))?;
    let layer = cfg.enc_layers - 1;
    let mut comps = Vec::with_capacity(3);
    let mut mask = None;
    for w in ["wq", "wk", "wv"] {
        let proj = tape.matmul(x, params.get(&format!("enc.{layer}.{w}")))?;
        let (heads, kl_mask) =
            relation_distribution(tape, proj, r, &capture.enc_valid, false, cfg.scale_mode)?;
        comps.push(heads);
        mask = Some(kl_mask);
    }
    let mask = mask.unwrap();
    let mut it = comps.into_iter();
    Ok(RelationSet {
        tag: StreamTag::EncoderSelf,
        q: it.next().unwrap(),
        k: it.next().unwrap(),
        v: it.next().unwrap(),
        q_mask: mask.clone(),
        k_mask: mask.clone(),
        v_mask: mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, Example};
    use crate::model::{forward_batch, init_random, register_params, Parameters};

    fn cfg(d_model: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model,
            num_heads: heads,
            ffn_dim: 2 * d_model,
            vocab_size: 48,
            max_positions: 16,
            tie_output_embedding: false,
            scale_mode: ScaleMode::Sqrt,
        }
    }

    fn batch() -> Batch {
        Batch {
            examples: vec![Example {
                enc_ids: vec![3, 4, 5, 6, 0],
                enc_valid: vec![true, true, true, true, false],
                dec_input: vec![1, 7, 8],
                dec_target: vec![7, 8, 2],
            }],
        }
    }

    fn capture_on_tape(
        tape: &mut Tape<f64>,
        params: &Parameters<f64>,
        cfg: &ModelConfig,
    ) -> (crate::model::ParamIds, Capture) {
        let p = register_params(tape, params, false);
        let (mut caps, _) = forward_batch(tape, &p, cfg, &batch(), false).unwrap();
        (p, caps.remove(0))
    }

    #[test]
    fn redistribute_identity_when_a_equals_r() {
        let mut tape: Tape<f64> = Tape::new();
        let x: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let t = tape.leaf_f64(&x, vec![3, 8], false);
        // A = R = 2, d^A = d^R = 4
        let heads = redistribute_heads(&mut tape, t, 2).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(tape.data(heads[0])[i * 4 + j], x[i * 8 + j]);
                assert_eq!(tape.data(heads[1])[i * 4 + j], x[i * 8 + 4 + j]);
            }
        }
    }

    #[test]
    fn redistribute_index_arithmetic() {
        // A=2, d^A=4 (width 8), R=4 -> d^R=2; head 1 = columns 2..3
        let mut tape: Tape<f64> = Tape::new();
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let t = tape.leaf_f64(&x, vec![2, 8], false);
        let heads = redistribute_heads(&mut tape, t, 4).unwrap();
        assert_eq!(heads.len(), 4);
        assert_eq!(tape.data(heads[1]).to_vec(), vec![2.0, 3.0, 10.0, 11.0]);
    }

    #[test]
    fn redistribute_matches_gather_oracle_and_preserves_entries() {
        let mut tape: Tape<f64> = Tape::new();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let t = tape.leaf_f64(&x, vec![5, 8], false);
        let heads = redistribute_heads(&mut tape, t, 4).unwrap();
        // gather oracle: head h, row i, col j = x[i*8 + h*2 + j]
        let mut multiset = Vec::new();
        for (h, id) in heads.iter().enumerate() {
            for i in 0..5 {
                for j in 0..2 {
                    let got = tape.data(*id)[i * 2 + j];
                    assert_eq!(got, x[i * 8 + h * 2 + j]);
                    multiset.push(got.to_bits());
                }
            }
        }
        let mut want: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        multiset.sort_unstable();
        want.sort_unstable();
        assert_eq!(multiset, want);
    }

    #[test]
    fn redistribute_rejects_indivisible_width() {
        let mut tape: Tape<f64> = Tape::new();
        let t = tape.leaf_f64(&[0.0; 6], vec![2, 3], false);
        assert!(redistribute_heads(&mut tape, t, 2).is_err());
    }

    #[test]
    fn relation_single_position_is_one() {
        let mut tape: Tape<f64> = Tape::new();
        let t = tape.leaf_f64(&[0.3, -0.2, 0.9, 0.1], vec![1, 4], false);
        let (heads, _) =
            relation_distribution(&mut tape, t, 2, &[true], false, ScaleMode::Sqrt).unwrap();
        for h in heads {
            assert_eq!(tape.data(h).to_vec(), vec![1.0]);
        }
    }

    #[test]
    fn relation_identity_rows_analytic() {
        // S_h = I(2), sqrt scaling: each row [sigma, 1 - sigma] with
        // sigma = e^{1/sqrt(d_r)} / (e^{1/sqrt(d_r)} + 1), d_r = 2
        let mut tape: Tape<f64> = Tape::new();
        let t = tape.leaf_f64(&[1.0, 0.0, 0.0, 1.0], vec![2, 2], false);
        let (heads, _) =
            relation_distribution(&mut tape, t, 1, &[true, true], false, ScaleMode::Sqrt).unwrap();
        let sigma = (1.0 / 2f64.sqrt()).exp() / ((1.0 / 2f64.sqrt()).exp() + 1.0);
        let d = tape.data(heads[0]);
        assert!((d[0] - sigma).abs() < 1e-12);
        assert!((d[1] - (1.0 - sigma)).abs() < 1e-12);
        assert!((d[2] - (1.0 - sigma)).abs() < 1e-12);
        assert!((d[3] - sigma).abs() < 1e-12);
    }

    #[test]
    fn relation_orthogonal_equal_norm_rows_uniform_off_diagonal() {
        let mut tape: Tape<f64> = Tape::new();
        // 3 orthogonal rows of equal norm
        let t = tape.leaf_f64(
            &[2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0],
            vec![3, 3],
            false,
        );
        let (heads, _) =
            relation_distribution(&mut tape, t, 1, &[true; 3], false, ScaleMode::Sqrt).unwrap();
        let d = tape.data(heads[0]);
        // off-diagonal entries equal within each row
        for i in 0..3 {
            let off: Vec<f64> = (0..3).filter(|&j| j != i).map(|j| d[i * 3 + j]).collect();
            assert!((off[0] - off[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn stream_relations_shapes_and_stochasticity() {
        let cfg = cfg(16, 4);
        let params: Parameters<f64> = init_random(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let (p, cap) = capture_on_tape(&mut tape, &params, &cfg);
        let r = 8;
        let dec = decoder_self_relations(&mut tape, &cap, &p, &cfg, r).unwrap();
        let cross = cross_relations(&mut tape, &cap, &p, &cfg, r).unwrap();
        let enc = encoder_self_relations(&mut tape, &cap, &p, &cfg, r).unwrap();
        let m = cap.dec_valid.len();
        let n = cap.enc_valid.len();
        for set in [&dec, &enc, &cross] {
            assert_eq!(set.q.len(), r);
            assert_eq!(set.k.len(), r);
            assert_eq!(set.v.len(), r);
        }
        assert_eq!(tape.shape(dec.q[0]), &[m, m]);
        assert_eq!(tape.shape(cross.q[0]), &[m, m]);
        assert_eq!(tape.shape(cross.k[0]), &[n, n]);
        assert_eq!(tape.shape(enc.q[0]), &[n, n]);
        // row stochastic over unmasked entries; masked entries exactly 0
        for h in dec.q.iter().chain(&cross.k).chain(&enc.v) {
            let l = tape.shape(*h)[0];
            let d = tape.data(*h);
            for i in 0..l {
                let sum: f64 = d[i * l..(i + 1) * l].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
                assert!(d[i * l..(i + 1) * l].iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
        // causal support for decoder-side streams
        for h in dec.q.iter().chain(&cross.q) {
            let d = tape.data(*h);
            for i in 0..m {
                for j in i + 1..m {
                    assert_eq!(d[i * m + j], 0.0);
                }
            }
        }
        // PAD keys masked on the encoder stream (position 4 is PAD)
        for h in &enc.q {
            let d = tape.data(*h);
            for i in 0..n {
                assert_eq!(d[i * n + 4], 0.0);
            }
        }
    }

    #[test]
    fn teacher_student_shapes_match_for_equal_r_unequal_width() {
        let t_cfg = cfg(32, 4);
        let s_cfg = cfg(16, 4);
        let r = 8;
        let t_params: Parameters<f64> = init_random(&t_cfg, 1).unwrap();
        let s_params: Parameters<f64> = init_random(&s_cfg, 2).unwrap();
        let mut tape = Tape::new();
        let (tp, t_cap) = capture_on_tape(&mut tape, &t_params, &t_cfg);
        let (sp, s_cap) = capture_on_tape(&mut tape, &s_params, &s_cfg);
        let t_rel = decoder_self_relations(&mut tape, &t_cap, &tp, &t_cfg, r).unwrap();
        let s_rel = decoder_self_relations(&mut tape, &s_cap, &sp, &s_cfg, r).unwrap();
        for (a, b) in t_rel.q.iter().zip(&s_rel.q) {
            assert_eq!(tape.shape(*a), tape.shape(*b));
        }
    }

    #[test]
    fn matches_direct_recompute_oracle() {
        let cfg = cfg(16, 4);
        let params: Parameters<f64> = init_random(&cfg, 9).unwrap();
        let mut tape = Tape::new();
        let (p, cap) = capture_on_tape(&mut tape, &params, &cfg);
        let r = 4;
        let set = decoder_self_relations(&mut tape, &cap, &p, &cfg, r).unwrap();
        // recompute head 1 of the Q relations from raw states/weights
        let z = tape.data(cap.dec_self_last_input.unwrap()).to_vec();
        let wq = &params.get("dec.1.wq");
        let m = cap.dec_valid.len();
        let d = cfg.d_model;
        let mut proj = vec![0.0f64; m * d];
        for i in 0..m {
            for j in 0..d {
                for k in 0..d {
                    proj[i * d + j] += z[i * d + k] * wq.data[k * d + j];
                }
            }
        }
        let d_r = d / r;
        let head = 1;
        let slice: Vec<f64> = (0..m)
            .flat_map(|i| proj[i * d + head * d_r..i * d + (head + 1) * d_r].to_vec())
            .collect();
        let scale = (d_r as f64).sqrt();
        let mut want = vec![0.0f64; m * m];
        for i in 0..m {
            let mut row = vec![f64::NEG_INFINITY; m];
            for (j, r_j) in row.iter_mut().enumerate().take(i + 1) {
                let mut s = 0.0;
                for k in 0..d_r {
                    s += slice[i * d_r + k] * slice[j * d_r + k];
                }
                *r_j = s / scale;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| if v.is_finite() { (v - max).exp() } else { 0.0 }).sum();
            for j in 0..=i {
                want[i * m + j] = (row[j] - max).exp() / denom;
            }
        }
        for (got, want) in tape.data(set.q[head]).iter().zip(&want) {
            assert!((got - want).abs() < 1e-9);
        }
    }
}
