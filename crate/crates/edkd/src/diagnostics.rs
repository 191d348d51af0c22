//! Gradient-norm probes on the last-layer hidden states of the encoder
//! and decoder, plus spike quantification and CSV export of the trace.

use std::io::Write;
use std::path::Path;

use crate::model::Capture;
use crate::scalar::Scalar;
use crate::tensor::Tape;
use crate::{Error, Result};

/// One probed training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub enc_norm: f64,
    pub dec_norm: f64,
}

/// Per-step gradient norms of E and Z over a run.
pub type GradNormTrace = Vec<TracePoint>;

pub const SPIKE_WINDOW: usize = 50;
pub const SPIKE_FACTOR: f64 = 3.0;

fn frobenius<F: Scalar>(g: &[F]) -> f64 {
    g.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt()
}

/// Frobenius norms of `d loss / d E` and `d loss / d Z`, each taken per
/// example and averaged over the batch. Requires a completed backward pass
/// that reached the captured streams.
pub fn probe_hidden_grads<F: Scalar>(tape: &Tape<F>, captures: &[Capture]) -> Result<(f64, f64)> {
    if captures.is_empty() {
        return Err(Error::Data("no captures to probe".into()));
    }
    let mut enc = 0.0;
    let mut dec = 0.0;
    for cap in captures {
        enc += tape.grad(cap.e).map(frobenius).unwrap_or(0.0);
        dec += tape.grad(cap.z).map(frobenius).unwrap_or(0.0);
    }
    let n = captures.len() as f64;
    Ok((enc / n, dec / n))
}

fn spikes_in(series: &[f64], window: usize, k: f64) -> usize {
    let mut count = 0;
    for i in window..series.len() {
        let mut trailing: Vec<f64> = series[i - window..i].to_vec();
        trailing.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = if window % 2 == 1 {
            trailing[window / 2]
        } else {
            0.5 * (trailing[window / 2 - 1] + trailing[window / 2])
        };
        if series[i] > k * median {
            count += 1;
        }
    }
    count
}

/// Number of steps whose norm exceeds `k` times the rolling median of the
/// trailing `window` points, counted separately on the encoder and decoder
/// series and summed. Scale-invariant by construction.
pub fn spike_score(trace: &[TracePoint], window: usize, k: f64) -> Result<usize> {
    if trace.len() < window {
        return Err(Error::Data(format!(
            "trace length {} shorter than spike window {window}",
            trace.len()
        )));
    }
    let enc: Vec<f64> = trace.iter().map(|p| p.enc_norm).collect();
    let dec: Vec<f64> = trace.iter().map(|p| p.dec_norm).collect();
    Ok(spikes_in(&enc, window, k) + spikes_in(&dec, window, k))
}

/// Plot-ready CSV with header `step,enc_norm,dec_norm`.
pub fn export_trace(trace: &[TracePoint], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,enc_norm,dec_norm")?;
    for p in trace {
        writeln!(f, "{},{},{}", p.step, p.enc_norm, p.dec_norm)?;
    }
    f.flush()?;
    Ok(())
}
