use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use latentguard_core::bench::{bench_probe, decode_saving_report, latency_report, HostInfo, LatencyStats};
use latentguard_core::guard::{
    guard_decision, probe_hook, run_pipeline, DiffusionStub, GenerationRequest, Modality, PipelineResult, ReplayDiffusion,
    SeededDiffusion, SimulatedDecoder, StageStubs,
};
use latentguard_core::par;
use latentguard_core::probes::{ProbeConfig, ProbeKind, ProbeModel};
use latentguard_core::store::{generate_synthetic_dataset, Archive, Label, Split};
use latentguard_core::training::{evaluate, ArchiveDataset, EpochRecord, Metrics, Trainer, EPOCH_LOG};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

/// A loaded probe plus a stable identifier for responses and logs.
pub struct LoadedProbe {
    pub model: ProbeModel<f32>,
    pub id: String,
}

/// Loads the configured checkpoint, or builds a freshly initialized probe
/// of the configured kind when `allow_fresh` is set and no checkpoint is
/// given.
pub fn load_probe(cfg: &RunConfig, allow_fresh: bool) -> Result<LoadedProbe, CliError> {
    match &cfg.probe.checkpoint {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| CliError::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
            let ck = latentguard_core::probes::Checkpoint::from_bytes(&bytes)?;
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(LoadedProbe {
                model: ck.model,
                id: format!("{name}@{:08x}", crc32fast::hash(&bytes)),
            })
        }
        None if allow_fresh => {
            let config = ProbeConfig {
                height: cfg.data.height,
                width: cfg.data.width,
                ..ProbeConfig::new(cfg.probe.kind)
            };
            Ok(LoadedProbe {
                model: ProbeModel::build(config, cfg.train.seed)?,
                id: format!("{}-init-seed{}", cfg.probe.kind, cfg.train.seed),
            })
        }
        None => Err(CliError::usage("a checkpoint is required (--checkpoint or probe.checkpoint)")),
    }
}

pub fn open_archive(path: &Path) -> Result<Archive, CliError> {
    Archive::open(path).map_err(|e| CliError::data(format!("cannot open archive {}: {e}", path.display())))
}

pub fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.2}"))
}

fn metrics_line(m: &Metrics) -> String {
    format!(
        "P {} R {} F1 {} acc {} loss {} (tp {} fp {} tn {} fn {})",
        fmt_pct(m.precision),
        fmt_pct(m.recall),
        fmt_pct(m.f1),
        fmt_pct(m.accuracy),
        m.mean_loss.map_or_else(|| "-".into(), |l| format!("{l:.4}")),
        m.confusion.tp,
        m.confusion.fp,
        m.confusion.tn,
        m.confusion.fn_
    )
}

// ---- gen -----------------------------------------------------------------

pub fn gen(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = cfg.synthetic_spec();
    spec.validate()?;
    let root = &cfg.data.archive;
    if root.join("manifest.jsonl").exists() {
        return Err(CliError::usage(format!("archive {} already exists", root.display())));
    }
    let mut archive = Archive::create(root)?;
    let manifest = generate_synthetic_dataset(&spec, &mut archive)?;
    cfg.echo_to(root)?;
    for ((split, label), n) in manifest.counts() {
        wln(out, format_args!("{split}\t{}\t{n}", label.as_str()))?;
    }
    wln(out, format_args!("{} clips written to {}", manifest.len(), root.display()))
}

// ---- train ---------------------------------------------------------------

#[derive(Serialize)]
struct TrainSummary<'a> {
    probe: ProbeKind,
    parameters: usize,
    epochs: usize,
    best_validation_epoch: Option<usize>,
    best_validation: Option<&'a Metrics>,
    final_epoch: Option<usize>,
    final_test: Option<&'a Metrics>,
    final_checkpoint: Option<&'a PathBuf>,
}

pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let archive = open_archive(&cfg.data.archive)?;
    for split in Split::ALL {
        if archive.manifest().split(split).next().is_none() {
            return Err(CliError::data(format!(
                "archive {} has no {split} clips; training needs train, validation and test splits",
                cfg.data.archive.display()
            )));
        }
    }
    let dims = archive.manifest().records()[0].dims.clone();
    let probe_cfg = ProbeConfig {
        in_channels: dims[0],
        height: dims[2],
        width: dims[3],
        ..ProbeConfig::new(cfg.probe.kind)
    };
    let run_dir = &cfg.train.out_dir;
    if run_dir.join(EPOCH_LOG).exists() {
        return Err(CliError::usage(format!("run directory {} already holds a run", run_dir.display())));
    }
    cfg.echo_to(run_dir)?;
    let model = ProbeModel::build(probe_cfg, cfg.train.seed)?;
    let params = model.param_count();
    wln(out, format_args!("probe {} parameters {}", cfg.probe.kind, thousands(params)))?;

    let data = ArchiveDataset::new(archive);
    let mut trainer = Trainer::new(model, cfg.train_config(), &data, Some(run_dir))?;
    let mut records: Vec<EpochRecord> = Vec::new();
    for _ in 0..cfg.train.epochs {
        let r = trainer.run_epoch()?;
        wln(
            out,
            format_args!(
                "epoch {} loss {:.6} val {} ({:.1}s)",
                r.epoch,
                r.train_loss,
                metrics_line(&r.validation),
                r.seconds
            ),
        )?;
        records.push(r);
    }
    let best = records
        .iter()
        .filter(|r| r.validation.f1.is_some())
        .max_by(|a, b| a.validation.f1.partial_cmp(&b.validation.f1).unwrap_or(std::cmp::Ordering::Equal).then(b.epoch.cmp(&a.epoch)));
    let last = records.last();
    let summary = TrainSummary {
        probe: cfg.probe.kind,
        parameters: params,
        epochs: records.len(),
        best_validation_epoch: best.map(|r| r.epoch),
        best_validation: best.map(|r| &r.validation),
        final_epoch: last.map(|r| r.epoch),
        final_test: last.map(|r| &r.test),
        final_checkpoint: last.and_then(|r| r.checkpoint.as_ref()),
    };
    write_json(&run_dir.join("summary.json"), &summary)?;
    if let Some(b) = best {
        wln(out, format_args!("best validation: epoch {} {}", b.epoch, metrics_line(&b.validation)))?;
    }
    if let Some(l) = last {
        wln(out, format_args!("final epoch {} test: {}", l.epoch, metrics_line(&l.test)))?;
    }
    Ok(())
}

// ---- eval ----------------------------------------------------------------

pub fn eval(cfg: &RunConfig, split: Split, out: &mut dyn Write) -> Result<(), CliError> {
    let probe = load_probe(cfg, false)?;
    let data = ArchiveDataset::new(open_archive(&cfg.data.archive)?);
    let m = evaluate(&probe.model, &data, split, cfg.train.eval_batch_size)?;
    wln(out, format_args!("{split} {}", metrics_line(&m)))?;
    wln(out, format_args!("{}", serde_json::to_string(&m).map_err(|e| CliError::runtime(e.to_string()))?))
}

// ---- score ---------------------------------------------------------------

/// Scores clips by id (or a whole split) and prints one row per clip.
/// Returns a data error after printing if any row failed.
pub fn score(cfg: &RunConfig, clip_ids: &[String], split: Option<Split>, out: &mut dyn Write) -> Result<(), CliError> {
    let probe = load_probe(cfg, false)?;
    let archive = open_archive(&cfg.data.archive)?;
    let guard = cfg.guard_config();
    let ids: Vec<String> = match (clip_ids.is_empty(), split) {
        (false, _) => clip_ids.to_vec(),
        (true, Some(s)) => archive.manifest().split(s).map(|r| r.clip_id.clone()).collect(),
        (true, None) => archive.manifest().records().iter().map(|r| r.clip_id.clone()).collect(),
    };
    wln(out, format_args!("clip_id\tlabel\tscore\tdecision"))?;
    let mut failed = 0;
    for id in &ids {
        let row = archive
            .read_tensor(id)
            .and_then(|z| probe_hook(&z, &probe.model))
            .and_then(|s| Ok((s, guard_decision(s, &guard)?)));
        let label = archive.manifest().get(id).map_or("-", |r| r.label.as_str());
        match row {
            Ok((s, d)) => wln(out, format_args!("{id}\t{label}\t{s:.6}\t{}", decision_str(d)))?,
            Err(e) => {
                failed += 1;
                wln(out, format_args!("{id}\t{label}\terror\t{e}"))?;
            }
        }
    }
    if failed > 0 {
        return Err(CliError::data(format!("{failed} of {} clips could not be scored", ids.len())));
    }
    Ok(())
}

pub fn decision_str(d: latentguard_core::guard::Decision) -> &'static str {
    match d {
        latentguard_core::guard::Decision::Pass => "pass",
        latentguard_core::guard::Decision::Violating => "violating",
    }
}

// ---- pipeline ------------------------------------------------------------

pub fn pipeline(cfg: &RunConfig, modality: Option<Modality>, out: &mut dyn Write) -> Result<(), CliError> {
    let probe = load_probe(cfg, true)?;
    let guard = cfg.guard_config();
    let archive_path = &cfg.data.archive;
    let (diffusion, dims): (Arc<dyn DiffusionStub>, Vec<usize>) = if archive_path.join("manifest.jsonl").exists() {
        let archive = Arc::new(open_archive(archive_path)?);
        let mut ids: Vec<String> = archive.manifest().split(Split::Test).map(|r| r.clip_id.clone()).collect();
        if ids.is_empty() {
            ids = archive.manifest().records().iter().map(|r| r.clip_id.clone()).collect();
        }
        let dims = archive
            .manifest()
            .get(ids.first().ok_or_else(|| CliError::data("archive is empty"))?)
            .map(|r| r.dims.clone())
            .unwrap_or_default();
        (Arc::new(ReplayDiffusion::new(archive, ids)?), dims)
    } else {
        let spec = cfg.synthetic_spec();
        let dims = vec![spec.channels, spec.frames, spec.height, spec.width];
        (Arc::new(SeededDiffusion { spec, label: Label::Violating }), dims)
    };
    let decoder = Arc::new(SimulatedDecoder::new(cfg.pipeline.decode_ms, cfg.pipeline.decode_sleep));
    let stubs = StageStubs::new(dims, diffusion, decoder);

    let run_dir = &cfg.pipeline.out_dir;
    cfg.echo_to(run_dir)?;
    let log_path = run_dir.join("results.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::runtime(format!("{}: {e}", log_path.display())))?);
    let mut results: Vec<PipelineResult> = Vec::new();
    for k in 0..cfg.pipeline.requests {
        let m = modality.unwrap_or(Modality::ALL[k % 3]);
        let req = GenerationRequest {
            id: format!("req-{k:05}"),
            modality: m,
            prompt: format!("synthetic request {k}"),
            media: (m != Modality::T2V).then(|| format!("media-{k}")),
            fps: cfg.data.fps,
            seed: cfg.data.seed.wrapping_add(k as u64),
        };
        let r = run_pipeline(&req, &stubs, &probe.model, &guard)?;
        wln(
            out,
            format_args!(
                "{}\t{}\tscore {}\t{}\tdecoded {}\t{}",
                r.request_id,
                r.modality.as_str(),
                r.score.map_or_else(|| "-".into(), |s| format!("{s:.6}")),
                r.decision.map_or("error", decision_str),
                r.decode_performed,
                r.timing_report()
            ),
        )?;
        let line = serde_json::to_string(&r).map_err(|e| CliError::runtime(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| CliError::runtime(e.to_string()))?;
        results.push(r);
    }
    log.flush().map_err(|e| CliError::runtime(e.to_string()))?;
    let report = decode_saving_report(&results)?;
    write_json(&run_dir.join("decode_saving.json"), &report)?;
    wln(
        out,
        format_args!(
            "aborted {}/{} ({:.1}%), decode saved {:.0} ms, spent {:.0} ms, probe {}",
            report.aborted,
            report.runs,
            report.fraction_aborted * 100.0,
            report.decode_ms_saved,
            report.decode_ms_spent,
            probe.id
        ),
    )
}

// ---- bench ---------------------------------------------------------------

pub fn bench(cfg: &RunConfig, kinds: &[ProbeKind], csv: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let b = &cfg.bench;
    if b.sequential {
        par::set_parallel(false);
    }
    let mut stats: Vec<(String, LatencyStats)> = Vec::new();
    let probes: Vec<LoadedProbe> = if cfg.probe.checkpoint.is_some() {
        vec![load_probe(cfg, false)?]
    } else {
        kinds
            .iter()
            .map(|&k| {
                let mut c = cfg.clone();
                c.probe.kind = k;
                load_probe(&c, true)
            })
            .collect::<Result<_, _>>()?
    };
    for p in &probes {
        let c = p.model.config();
        let shape = [b.batch, c.in_channels, b.frames, c.height, c.width];
        let s = bench_probe(&p.model, &shape, b.runs, b.warmup, cfg.train.seed)?;
        stats.push((p.model.kind().to_string(), s));
    }
    let entries: Vec<(&str, &LatencyStats)> = stats.iter().map(|(l, s)| (l.as_str(), s)).collect();
    write!(out, "{}", latency_report(&HostInfo::detect(), &entries)).map_err(|e| CliError::runtime(e.to_string()))?;
    if let Some(path) = csv {
        let mut text = format!("probe,{}\n", LatencyStats::CSV_HEADER);
        for (l, s) in &stats {
            text.push_str(&format!("{l},{}\n", s.csv_row()));
        }
        fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

// ---- helpers ---------------------------------------------------------------

fn wln(out: &mut dyn Write, args: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    writeln!(out, "{args}").map_err(|e| CliError::runtime(format!("write failed: {e}")))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}
