//! Probe latency measurement and decode-saving accounting.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guard::PipelineResult;
use crate::probes::ProbeModel;
use crate::tensor::{Fill, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub runs: usize,
    pub warmup: usize,
    pub mean_s: f64,
    /// Sample standard deviation; zero for a single run.
    pub std_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub input_shape: Vec<usize>,
    pub samples_s: Vec<f64>,
}

impl LatencyStats {
    pub fn from_samples(samples: Vec<f64>, warmup: usize, input_shape: Vec<usize>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("at least one timed run is required".into()));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = if samples.len() > 1 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            runs: samples.len(),
            warmup,
            mean_s: mean.clamp(min, max),
            std_s: std,
            min_s: min,
            max_s: max,
            input_shape,
            samples_s: samples,
        })
    }

    pub const CSV_HEADER: &'static str = "input_shape,runs,warmup,mean_s,std_s,min_s,max_s";

    pub fn csv_row(&self) -> String {
        let shape: Vec<String> = self.input_shape.iter().map(usize::to_string).collect();
        format!(
            "{},{},{},{:.9},{:.9},{:.9},{:.9}",
            shape.join("x"),
            self.runs,
            self.warmup,
            self.mean_s,
            self.std_s,
            self.min_s,
            self.max_s
        )
    }
}

/// Times eval-mode forward passes. Every run gets a fresh input drawn from
/// `seed`; input generation sits outside the timed region.
pub fn bench_probe(
    model: &ProbeModel<f32>,
    input_shape: &[usize],
    runs: usize,
    warmup: usize,
    seed: u64,
) -> Result<LatencyStats> {
    if runs == 0 {
        return Err(Error::Usage("runs must be at least 1".into()));
    }
    model.check_input(input_shape)?;
    let mut samples = Vec::with_capacity(runs);
    for i in 0..warmup + runs {
        let x = Tensor::create(
            input_shape.to_vec(),
            Fill::Normal {
                mean: 0.0,
                std: 1.0,
                seed: seed.wrapping_add(i as u64),
            },
        )?;
        let t = Instant::now();
        let y = model.logits(&x)?;
        let dt = t.elapsed().as_secs_f64();
        std::hint::black_box(y);
        if i >= warmup {
            samples.push(dt);
        }
    }
    LatencyStats::from_samples(samples, warmup, input_shape.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostInfo {
    pub cpu: String,
    pub threads: usize,
    pub os: String,
    pub arch: String,
    pub parallel: bool,
}

impl HostInfo {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu,
            threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            parallel: crate::par::parallel_enabled(),
        }
    }
}

/// Structured text report for a set of labeled measurements.
pub fn latency_report(host: &HostInfo, entries: &[(&str, &LatencyStats)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "host: {} ({} threads, {}/{}, parallel={})", host.cpu, host.threads, host.os, host.arch, host.parallel);
    for (label, st) in entries {
        let shape: Vec<String> = st.input_shape.iter().map(usize::to_string).collect();
        let _ = writeln!(
            s,
            "{label}: input={} runs={} warmup={} mean={:.6}s std={:.6}s min={:.6}s max={:.6}s",
            shape.join("×"),
            st.runs,
            st.warmup,
            st.mean_s,
            st.std_s,
            st.min_s,
            st.max_s
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSavingReport {
    pub runs: usize,
    pub aborted: usize,
    pub fraction_aborted: f64,
    pub decode_ms_saved: f64,
    pub decode_ms_spent: f64,
}

/// Decode time avoided by runs the guard stopped before decoding.
pub fn decode_saving_report(results: &[PipelineResult]) -> Result<DecodeSavingReport> {
    if results.is_empty() {
        return Err(Error::Input("no pipeline results to report on".into()));
    }
    let aborted: Vec<_> = results.iter().filter(|r| !r.decode_performed).collect();
    Ok(DecodeSavingReport {
        runs: results.len(),
        aborted: aborted.len(),
        fraction_aborted: aborted.len() as f64 / results.len() as f64,
        decode_ms_saved: aborted.iter().map(|r| r.decode_cost_ms).sum(),
        decode_ms_spent: results.iter().filter(|r| r.decode_performed).map(|r| r.timings.decode_ms).sum(),
    })
}
