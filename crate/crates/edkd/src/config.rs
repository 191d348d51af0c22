//! Experiment configuration: a TOML document with sections for the
//! corpus, model, optimizer, objective and (optionally) a distillation
//! chain. Unknown keys are rejected; command-line flags override file
//! values and the merged effective config is persisted next to run
//! outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    fraction_prefix, generate_corpus, make_batches, make_examples, Batch, CorpusConfig, Example,
};
use crate::model::ModelConfig;
use crate::objectives::{HeadNorm, ObjectiveConfig};
use crate::trainer::{ChainSpec, TrainConfig};
use crate::{Error, Result};

/// Numeric storage for training runs. f64 exists for verification work
/// (finite-difference checks); f32 is the training default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Objective selection: a named preset, field-level overrides, or both
/// (overrides win).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub preset: Option<String>,
    pub relation_heads: Option<usize>,
    pub head_norm: Option<HeadNorm>,
    pub logit: Option<bool>,
    pub dec_self_attn: Option<bool>,
    pub cross_attn: Option<bool>,
    pub enc_self_attn: Option<bool>,
    pub w_logit: Option<f64>,
    pub w_dec_self: Option<f64>,
    pub w_cross: Option<f64>,
    pub w_enc_self: Option<f64>,
}

impl ObjectiveSection {
    pub fn resolve(&self) -> Result<ObjectiveConfig> {
        let heads = self.relation_heads.unwrap_or(8);
        let mut cfg = match &self.preset {
            Some(name) => ObjectiveConfig::preset(name, heads)?,
            None => ObjectiveConfig {
                relation_heads: heads,
                ..ObjectiveConfig::default()
            },
        };
        if let Some(v) = self.head_norm {
            cfg.head_norm = v;
        }
        if let Some(v) = self.logit {
            cfg.logit = v;
        }
        if let Some(v) = self.dec_self_attn {
            cfg.dec_self_attn = v;
        }
        if let Some(v) = self.cross_attn {
            cfg.cross_attn = v;
        }
        if let Some(v) = self.enc_self_attn {
            cfg.enc_self_attn = v;
        }
        if let Some(v) = self.w_logit {
            cfg.w_logit = v;
        }
        if let Some(v) = self.w_dec_self {
            cfg.w_dec_self = v;
        }
        if let Some(v) = self.w_cross {
            cfg.w_cross = v;
        }
        if let Some(v) = self.w_enc_self {
            cfg.w_enc_self = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Top-level experiment document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub precision: Precision,
    /// Teacher checkpoint for `distill` (flag `--teacher` overrides).
    pub teacher: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Fraction of examples held out (from the tail) for evaluation.
    pub eval_fraction: f64,
    pub corpus: Option<CorpusConfig>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub objective: Option<ObjectiveSection>,
    pub chain: Option<ChainSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            precision: Precision::default(),
            teacher: None,
            output_dir: None,
            eval_fraction: 0.1,
            corpus: None,
            model: None,
            train: None,
            objective: None,
            chain: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config(format!(
                "eval_fraction {} outside [0, 1)",
                self.eval_fraction
            )));
        }
        if let Some(c) = &self.corpus {
            c.validate()?;
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(o) = &self.objective {
            o.resolve()?;
        }
        Ok(())
    }

    pub fn corpus(&self) -> Result<&CorpusConfig> {
        self.corpus
            .as_ref()
            .ok_or_else(|| Error::Config("missing [corpus] section".into()))
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Config("missing [model] section".into()))
    }

    pub fn train(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| Error::Config("missing [train] section".into()))
    }

    pub fn objective(&self) -> Result<ObjectiveConfig> {
        self.objective
            .as_ref()
            .ok_or_else(|| Error::Config("missing [objective] section".into()))?
            .resolve()
    }

    pub fn chain(&self) -> Result<&ChainSpec> {
        self.chain
            .as_ref()
            .ok_or_else(|| Error::Config("missing [chain] section".into()))
    }

    /// Write the merged (post-flag-override) config next to run outputs.
    pub fn persist_effective(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        std::fs::write(out_dir.join("effective_config.toml"), text)?;
        Ok(())
    }
}

/// Deterministic train/eval split from a corpus config: generate, corrupt,
/// hold out the tail `eval_fraction`, apply `data_fraction` to the train
/// prefix, and batch the eval half.
pub fn prepare_data(
    corpus_cfg: &CorpusConfig,
    eval_fraction: f64,
    eval_batch_size: usize,
) -> Result<(Vec<Example>, Vec<Batch>)> {
    let corpus = generate_corpus(corpus_cfg)?;
    let examples = make_examples(&corpus, corpus_cfg)?;
    let n_eval = ((examples.len() as f64) * eval_fraction).round() as usize;
    let n_eval = n_eval.min(examples.len().saturating_sub(1));
    let split = examples.len() - n_eval;
    let train = fraction_prefix(&examples[..split], corpus_cfg.data_fraction).to_vec();
    let eval = if n_eval == 0 {
        Vec::new()
    } else {
        make_batches(
            &examples[split..],
            eval_batch_size,
            corpus_cfg.max_enc_len,
            corpus_cfg.max_dec_len,
            0,
        )?
    };
    Ok((train, eval))
}
