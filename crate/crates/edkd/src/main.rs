//! Command-line surface: corpus generation, pretraining, distillation,
//! chains, evaluation and run comparison. Exit codes: 0 success, 2 config
//! error, 3 runtime divergence, 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use edkd::config::{prepare_data, ExperimentConfig, Precision};
use edkd::data::{self, CorpusConfig, Generator};
use edkd::diagnostics::{spike_score, TracePoint, SPIKE_FACTOR, SPIKE_WINDOW};
use edkd::model::init_random;
use edkd::scalar::Scalar;
use edkd::trainer::{self, EvalPoint};
use edkd::{checkpoint, Error};

#[derive(Parser)]
#[command(name = "edkd", about = "Encoder-decoder distillation laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a corpus cache file and print summary statistics.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a model from scratch on corrupted->target pairs.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override [train].steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override [train].seed (also seeds the init).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill a teacher checkpoint into a fresh student.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Teacher checkpoint (overrides `teacher` in the config).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Objective preset name (overrides [objective].preset).
        #[arg(long)]
        objective: Option<String>,
        /// Override [corpus].data_fraction.
        #[arg(long)]
        data_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a multi-stage distillation chain.
    Chain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print held-out perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus cache file to evaluate on.
        #[arg(long)]
        data: PathBuf,
        /// Optional experiment config supplying corruption parameters.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Tabulate runs (TSV: run, final_ppl, spike_score).
    Compare {
        /// Run output directories.
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Data(_) | Error::Tensor(_) => 2,
        Error::Divergence(_) => 3,
        Error::Checkpoint(_) | Error::Io(_) => 4,
    }
}

fn run(cmd: Cmd) -> edkd::Result<()> {
    match cmd {
        Cmd::GenData { config, out } => gen_data(&config, &out),
        Cmd::Pretrain {
            config,
            out,
            steps,
            seed,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            let train = cfg.train.get_or_insert_with(Default::default);
            if let Some(s) = steps {
                train.steps = s;
            }
            if let Some(s) = seed {
                train.seed = s;
            }
            copy_config(&config, &out)?;
            match cfg.precision {
                Precision::F32 => pretrain::<f32>(&cfg, &out),
                Precision::F64 => pretrain::<f64>(&cfg, &out),
            }
        }
        Cmd::Distill {
            config,
            teacher,
            objective,
            data_fraction,
            out,
            steps,
            seed,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(t) = teacher {
                cfg.teacher = Some(t);
            }
            if let Some(name) = objective {
                cfg.objective.get_or_insert_with(Default::default).preset = Some(name);
            }
            if let Some(f) = data_fraction {
                cfg.corpus
                    .as_mut()
                    .ok_or_else(|| Error::Config("missing [corpus] section".into()))?
                    .data_fraction = f;
            }
            let train = cfg.train.get_or_insert_with(Default::default);
            if let Some(s) = steps {
                train.steps = s;
            }
            if let Some(s) = seed {
                train.seed = s;
            }
            cfg.validate()?;
            copy_config(&config, &out)?;
            match cfg.precision {
                Precision::F32 => distill::<f32>(&cfg, &out),
                Precision::F64 => distill::<f64>(&cfg, &out),
            }
        }
        Cmd::Chain { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            copy_config(&config, &out)?;
            cfg.persist_effective(&out)?;
            let corpus = cfg.corpus()?;
            let (train_data, eval) = prepare_data(corpus, cfg.eval_fraction, 16)?;
            let outcome = match cfg.precision {
                Precision::F32 => trainer::run_chain::<f32>(cfg.chain()?, &train_data, &eval, &out)?,
                Precision::F64 => trainer::run_chain::<f64>(cfg.chain()?, &train_data, &eval, &out)?,
            };
            for s in &outcome.stages {
                println!(
                    "stage {}: teacher {} ({}) -> {} ({}) ppl {}",
                    s.name,
                    s.teacher_path.display(),
                    &s.teacher_hash[..12],
                    s.output_path.display(),
                    &s.output_hash[..12],
                    s.final_ppl.map_or("n/a".into(), |p| format!("{p:.3}")),
                );
            }
            Ok(())
        }
        Cmd::Eval { ckpt, data, config } => eval_cmd(&ckpt, &data, config.as_deref()),
        Cmd::Compare { runs } => compare(&runs),
    }
}

/// Copy the input config verbatim into the output directory (provenance).
fn copy_config(config: &Path, out: &Path) -> edkd::Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::copy(config, out.join("config.toml"))?;
    Ok(())
}

fn gen_data(config: &Path, out: &Path) -> edkd::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let corpus_cfg = cfg.corpus()?;
    let corpus = data::generate_corpus(corpus_cfg)?;
    data::write_corpus(out, corpus_cfg, &corpus)?;
    let examples = data::make_examples(&corpus, corpus_cfg)?;
    let total_tokens: usize = corpus.iter().map(Vec::len).sum();
    // realized corruption ratio, recounted from the emitted examples:
    // fraction of original tokens absent from the (content part of the)
    // corrupted encoder input
    let vocab = corpus_cfg.vocab()?;
    let content = vocab.content_range();
    let kept: usize = examples
        .iter()
        .map(|ex| ex.enc_ids.iter().filter(|t| content.contains(t)).count())
        .sum();
    let ratio = 1.0 - kept as f64 / total_tokens as f64;
    println!(
        "sequences: {}  tokens: {}  realized_mask_ratio: {:.4}",
        corpus.len(),
        total_tokens,
        ratio
    );
    Ok(())
}

fn pretrain<F: Scalar>(cfg: &ExperimentConfig, out: &Path) -> edkd::Result<()> {
    cfg.persist_effective(out)?;
    let (train_data, eval) = prepare_data(cfg.corpus()?, cfg.eval_fraction, 16)?;
    let (_, res) = trainer::pretrain::<F>(cfg.model()?, cfg.train()?, &train_data, &eval, Some(out))?;
    if let Some(ppl) = res.final_ppl {
        println!("final_ppl: {ppl:.4}");
    }
    Ok(())
}

fn distill<F: Scalar>(cfg: &ExperimentConfig, out: &Path) -> edkd::Result<()> {
    cfg.persist_effective(out)?;
    let teacher_path = cfg
        .teacher
        .as_ref()
        .ok_or_else(|| Error::Config("no teacher checkpoint given".into()))?;
    if !teacher_path.is_file() {
        return Err(Error::Checkpoint(format!(
            "teacher checkpoint {} not found",
            teacher_path.display()
        )));
    }
    let (t_cfg, t_params) = checkpoint::load::<F>(teacher_path)?;
    let s_cfg = cfg.model()?;
    let train = cfg.train()?;
    let objective = cfg.objective()?;
    let (train_data, eval) = prepare_data(cfg.corpus()?, cfg.eval_fraction, 16)?;
    let student = init_random::<F>(s_cfg, train.seed)?;
    let (_, res) = trainer::distill(
        &t_cfg, &t_params, s_cfg, student, &objective, train, &train_data, &eval, Some(out),
    )?;
    if let Some(ppl) = res.final_ppl {
        println!("final_ppl: {ppl:.4}");
    }
    Ok(())
}

fn eval_cmd(ckpt: &Path, data_path: &Path, config: Option<&Path>) -> edkd::Result<()> {
    let (header, corpus) = data::read_corpus(data_path)?;
    let corpus_cfg = match config {
        Some(p) => ExperimentConfig::load(p)?.corpus()?.clone(),
        None => corpus_config_from_header(&header, &corpus)?,
    };
    let examples = data::make_examples(&corpus, &corpus_cfg)?;
    let batches = data::make_batches(
        &examples,
        16,
        corpus_cfg.max_enc_len,
        corpus_cfg.max_dec_len,
        0,
    )?;
    let (model_cfg, params) = checkpoint::load::<f32>(ckpt)?;
    let ppl = trainer::evaluate_perplexity(&params, &model_cfg, &batches)?;
    println!("ppl: {ppl:.6}");
    Ok(())
}

/// Reconstruct corruption parameters from a corpus cache header
/// (`#vocab=V seed=S generator=G`), using the default mlm-style settings.
fn corpus_config_from_header(header: &str, corpus: &[Vec<usize>]) -> edkd::Result<CorpusConfig> {
    let mut vocab = None;
    let mut seed = None;
    let mut generator = Generator::Zipf;
    for field in header.trim_start_matches('#').split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("malformed corpus header field `{field}`")))?;
        match k {
            "vocab" => vocab = Some(v.parse::<usize>().map_err(|_| bad_header(field))?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad_header(field))?),
            "generator" => {
                generator = match v {
                    "zipf" => Generator::Zipf,
                    "markov-grammar" => Generator::MarkovGrammar,
                    _ => return Err(bad_header(field)),
                }
            }
            _ => return Err(bad_header(field)),
        }
    }
    let seq_len = corpus.iter().map(Vec::len).max().unwrap_or(1);
    Ok(CorpusConfig {
        num_sequences: corpus.len(),
        seq_len,
        vocab_size: vocab.ok_or_else(|| Error::Data("corpus header missing vocab".into()))?,
        generator,
        seed: seed.ok_or_else(|| Error::Data("corpus header missing seed".into()))?,
        ..CorpusConfig::mlm_defaults()
    })
}

fn bad_header(field: &str) -> Error {
    Error::Data(format!("unrecognized corpus header field `{field}`"))
}

fn compare(runs: &[PathBuf]) -> edkd::Result<()> {
    if runs.is_empty() {
        return Err(Error::Config("compare needs at least one --runs directory".into()));
    }
    println!("run\tfinal_ppl\tspike_score");
    for dir in runs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let ppl = last_eval_ppl(&dir.join("eval.jsonl"))?;
        let trace = read_trace(&dir.join("trace.csv"))?;
        let score = if trace.len() >= SPIKE_WINDOW {
            spike_score(&trace, SPIKE_WINDOW, SPIKE_FACTOR)?.to_string()
        } else {
            "n/a".into()
        };
        println!("{name}\t{ppl:.4}\t{score}");
    }
    Ok(())
}

fn last_eval_ppl(path: &Path) -> edkd::Result<f64> {
    let text = std::fs::read_to_string(path)?;
    let last = text
        .lines().rfind(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Data(format!("{}: no eval records", path.display())))?;
    let point: EvalPoint = serde_json::from_str(last)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(point.ppl)
}

fn read_trace(path: &Path) -> edkd::Result<Vec<TracePoint>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("step,enc_norm,dec_norm") => {}
        _ => return Err(Error::Data(format!("{}: bad trace header", path.display()))),
    }
    lines
        .map(|l| {
            let mut f = l.split(',');
            let parse_err = || Error::Data(format!("{}: bad trace row `{l}`", path.display()));
            Ok(TracePoint {
                step: f.next().and_then(|v| v.parse().ok()).ok_or_else(parse_err)?,
                enc_norm: f.next().and_then(|v| v.parse().ok()).ok_or_else(parse_err)?,
                dec_norm: f.next().and_then(|v| v.parse().ok()).ok_or_else(parse_err)?,
            })
        })
        .collect()
}
