//! Distillation objectives: the logit-matching loss plus relation-KL
//! losses over the decoder self-attention, cross-attention and encoder
//! self-attention streams, composable via presets.

use serde::{Deserialize, Serialize};

use crate::model::{Capture, ModelConfig, ParamIds};
use crate::relations::{
    cross_relations, decoder_self_relations, encoder_self_relations, RelationSet,
};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};
use crate::{Error, Result};

/// How KL is averaged across relation heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HeadNorm {
    /// Mean over the R heads (default).
    #[default]
    Mean,
    /// Plain sum over heads.
    Sum,
}

/// Which loss terms are active and their weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub logit: bool,
    pub dec_self_attn: bool,
    pub cross_attn: bool,
    pub enc_self_attn: bool,
    pub w_logit: f64,
    pub w_dec_self: f64,
    pub w_cross: f64,
    pub w_enc_self: f64,
    /// Number of relation heads R shared by teacher and student.
    pub relation_heads: usize,
    pub head_norm: HeadNorm,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            logit: true,
            dec_self_attn: false,
            cross_attn: false,
            enc_self_attn: false,
            w_logit: 1.0,
            w_dec_self: 1.0,
            w_cross: 1.0,
            w_enc_self: 1.0,
            relation_heads: 8,
            head_norm: HeadNorm::Mean,
        }
    }
}

impl ObjectiveConfig {
    /// Named presets for the studied objective combinations.
    pub fn preset(name: &str, relation_heads: usize) -> Result<Self> {
        let base = ObjectiveConfig {
            relation_heads,
            ..ObjectiveConfig::default()
        };
        let cfg = match name {
            // logit + decoder self-attention relations (also aliased as the
            // combination of the two single-term baselines)
            "implicit" | "mlmkd+minilm" => ObjectiveConfig {
                dec_self_attn: true,
                ..base
            },
            // implicit + cross-attention relations
            "explicit" | "miniend-d" => ObjectiveConfig {
                dec_self_attn: true,
                cross_attn: true,
                ..base
            },
            // implicit + encoder self-attention relations
            "miniend-e" => ObjectiveConfig {
                dec_self_attn: true,
                enc_self_attn: true,
                ..base
            },
            "miniend-d-nologit" => ObjectiveConfig {
                logit: false,
                dec_self_attn: true,
                cross_attn: true,
                ..base
            },
            "miniend-e-nologit" => ObjectiveConfig {
                logit: false,
                dec_self_attn: true,
                enc_self_attn: true,
                ..base
            },
            // logit loss only
            "mlmkd" => base,
            // decoder self-attention relations only, no logits
            "minilm" => ObjectiveConfig {
                logit: false,
                dec_self_attn: true,
                ..base
            },
            other => {
                return Err(Error::Config(format!("unknown objective preset `{other}`")))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.relation_heads == 0 {
            return Err(Error::Config("relation_heads must be positive".into()));
        }
        if !(self.logit || self.dec_self_attn || self.cross_attn || self.enc_self_attn) {
            return Err(Error::Config("objective has no active loss terms".into()));
        }
        Ok(())
    }
}

/// Scalar values of the individual loss terms for one batch (absent terms
/// are `None`; relation terms carry their q/k/v sub-values).
#[derive(Debug, Clone, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub logit: Option<f64>,
    pub dec_self: Option<[f64; 3]>,
    pub cross: Option<[f64; 3]>,
    pub enc_self: Option<[f64; 3]>,
}

/// Soft cross-entropy between teacher and student next-token
/// distributions; the teacher is gradient-stopped, PAD target rows are
/// excluded.
pub fn loss_logit<F: Scalar>(
    tape: &mut Tape<F>,
    student: &Capture,
    teacher: &Capture,
) -> Result<TensorId> {
    let mask = std::sync::Arc::new(student.target_valid.clone());
    Ok(tape.soft_cross_entropy(student.logits, teacher.logits, Some(mask))?)
}

/// Mean over q/k/v components of head-normalized KL(teacher || student).
fn relation_kl<F: Scalar>(
    tape: &mut Tape<F>,
    teacher: &RelationSet,
    student: &RelationSet,
    head_norm: HeadNorm,
) -> Result<[TensorId; 3]> {
    let pairs = [
        (&teacher.q, &student.q, &student.q_mask),
        (&teacher.k, &student.k, &student.k_mask),
        (&teacher.v, &student.v, &student.v_mask),
    ];
    let mut out = Vec::with_capacity(3);
    for (t_heads, s_heads, mask) in pairs {
        if t_heads.len() != s_heads.len() {
            return Err(Error::Config(format!(
                "relation head count mismatch: teacher {} vs student {}",
                t_heads.len(),
                s_heads.len()
            )));
        }
        let per_head: Vec<TensorId> = t_heads
            .iter()
            .zip(s_heads)
            .map(|(&t, &s)| tape.kl_rows(t, s, Some(mask.clone())))
            .collect::<std::result::Result<_, _>>()?;
        let summed = tape.mean_of(&per_head)?;
        let term = match head_norm {
            HeadNorm::Mean => summed,
            HeadNorm::Sum => tape.scale(summed, t_heads.len() as f64),
        };
        out.push(term);
    }
    Ok([out[0], out[1], out[2]])
}

/// Single-example distillation loss components on an existing tape where
/// teacher and student forwards were captured. Returns the weighted total
/// as a tape node plus its scalar breakdown.
#[allow(clippy::too_many_arguments)]
pub fn compose<F: Scalar>(
    tape: &mut Tape<F>,
    obj: &ObjectiveConfig,
    t_cap: &Capture,
    t_params: &ParamIds,
    t_cfg: &ModelConfig,
    s_cap: &Capture,
    s_params: &ParamIds,
    s_cfg: &ModelConfig,
) -> Result<(TensorId, LossBreakdown)> {
    obj.validate()?;
    let r = obj.relation_heads;
    let mut terms: Vec<TensorId> = Vec::new();
    let mut breakdown = LossBreakdown::default();

    if obj.logit {
        let l = loss_logit(tape, s_cap, t_cap)?;
        breakdown.logit = Some(tape.scalar_value(l));
        terms.push(tape.scale(l, obj.w_logit));
    }
    let mut relation_term =
        |tape: &mut Tape<F>, mk: fn(&mut Tape<F>, &Capture, &ParamIds, &ModelConfig, usize) -> Result<RelationSet>, w: f64| -> Result<[f64; 3]> {
            let t_rel = mk(tape, t_cap, t_params, t_cfg, r)?;
            let s_rel = mk(tape, s_cap, s_params, s_cfg, r)?;
            let comps = relation_kl(tape, &t_rel, &s_rel, obj.head_norm)?;
            let vals = [
                tape.scalar_value(comps[0]),
                tape.scalar_value(comps[1]),
                tape.scalar_value(comps[2]),
            ];
            let sum = tape.mean_of(&comps)?;
            let sum = tape.scale(sum, 3.0); // mean_of -> sum over the 3 components
            terms.push(tape.scale(sum, w));
            Ok(vals)
        };
    if obj.dec_self_attn {
        breakdown.dec_self = Some(relation_term(tape, decoder_self_relations, obj.w_dec_self)?);
    }
    if obj.cross_attn {
        breakdown.cross = Some(relation_term(tape, cross_relations, obj.w_cross)?);
    }
    if obj.enc_self_attn {
        breakdown.enc_self = Some(relation_term(tape, encoder_self_relations, obj.w_enc_self)?);
    }
    let sum = tape.mean_of(&terms)?;
    let total = tape.scale(sum, terms.len() as f64);
    breakdown.total = tape.scalar_value(total);
    Ok((total, breakdown))
}
