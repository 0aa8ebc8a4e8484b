//! Mini-batch training with AdamW, per-epoch checkpoints and
//! validation/test evaluation.

mod metrics;
mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::element::Float;
use crate::error::{Error, Result};
use crate::layers::{Context, ContextOutput, Mode, RngStream};
use crate::ops::softmax::cross_entropy_rows;
use crate::probes::{save_checkpoint, Checkpoint, ProbeConfig, ProbeModel, VIOLATING};
use crate::store::{Archive, Label, Split};
use crate::tensor::Tensor;

pub use metrics::{compute_metrics, f1_score, Confusion, Metrics};
pub use optim::{adamw_step, AdamWConfig, OptimState};

pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 16,
            eval_batch_size: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", o.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("AdamW betas must be in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config("AdamW eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// Labeled latents grouped by split. Clips are `C×T×H×W`.
pub trait Dataset: Sync {
    fn len(&self, split: Split) -> usize;

    fn get(&self, split: Split, index: usize) -> Result<(Tensor<f32>, Label)>;

    fn clip_id(&self, split: Split, index: usize) -> String {
        format!("{split}/{index}")
    }
}

/// A dataset held in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemoryDataset {
    splits: [Vec<(String, Tensor<f32>, Label)>; 3],
}

impl InMemoryDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, split: Split, id: impl Into<String>, x: Tensor<f32>, label: Label) {
        self.splits[split.index()].push((id.into(), x, label));
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self, split: Split) -> usize {
        self.splits[split.index()].len()
    }

    fn get(&self, split: Split, index: usize) -> Result<(Tensor<f32>, Label)> {
        let (_, x, l) = self.splits[split.index()]
            .get(index)
            .ok_or_else(|| Error::NotFound(format!("{split} clip {index}")))?;
        Ok((x.clone(), *l))
    }

    fn clip_id(&self, split: Split, index: usize) -> String {
        self.splits[split.index()][index].0.clone()
    }
}

/// Reads clips from an archive on demand, in manifest order per split.
#[derive(Debug)]
pub struct ArchiveDataset {
    archive: Archive,
    ids: [Vec<(String, Label)>; 3],
}

impl ArchiveDataset {
    pub fn new(archive: Archive) -> Self {
        let mut ids: [Vec<(String, Label)>; 3] = Default::default();
        for r in archive.manifest().records() {
            ids[r.split.index()].push((r.clip_id.clone(), r.label));
        }
        Self { archive, ids }
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }
}

impl Dataset for ArchiveDataset {
    fn len(&self, split: Split) -> usize {
        self.ids[split.index()].len()
    }

    fn get(&self, split: Split, index: usize) -> Result<(Tensor<f32>, Label)> {
        let (id, label) = self.ids[split.index()]
            .get(index)
            .ok_or_else(|| Error::NotFound(format!("{split} clip {index}")))?;
        Ok((self.archive.read_tensor(id)?, *label))
    }

    fn clip_id(&self, split: Split, index: usize) -> String {
        self.ids[split.index()][index].0.clone()
    }
}

/// Stacks clips into a `B×C×T×H×W` batch and its `B×2` one-hot labels.
pub fn make_batch(data: &dyn Dataset, split: Split, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<Label>)> {
    let mut xs = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let (x, l) = data.get(split, i)?;
        xs.push(x);
        labels.push(l);
    }
    let y = labels.iter().flat_map(|l| l.one_hot()).collect();
    Ok((Tensor::stack(&xs)?, Tensor::from_vec([indices.len(), 2], y)?, labels))
}

/// Eval-mode pass over a split: argmax predictions, confusion counts and
/// the mean cross-entropy. The model is not modified.
pub fn evaluate<T: Float>(model: &ProbeModel<T>, data: &dyn Dataset, split: Split, batch_size: usize) -> Result<Metrics> {
    let n = data.len(split);
    if n == 0 {
        return Err(Error::Config(format!("{split} split is empty")));
    }
    let mut conf = Confusion::default();
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _, labels) = make_batch(data, split, chunk)?;
        let logits = model.logits(&x.cast())?;
        let classes: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        for l in cross_entropy_rows(&logits, &classes)? {
            loss_sum += l.f64();
        }
        for (row, label) in logits.data().chunks(2).zip(&labels) {
            let predicted = argmax(row) == VIOLATING;
            conf.record(predicted, *label == Label::Violating);
        }
    }
    Ok(compute_metrics(conf, Some(loss_sum / n as f64)))
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-clip training loss over the epoch.
    pub train_loss: f64,
    pub step_losses: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub validation: Metrics,
    pub test: Metrics,
    pub checkpoint: Option<PathBuf>,
    pub seconds: f64,
}

/// Drives training one epoch at a time.
pub struct Trainer<'d> {
    model: ProbeModel<f32>,
    config: TrainConfig,
    state: OptimState<f32>,
    data: &'d dyn Dataset,
    epoch: usize,
    rng: RngStream,
    out_dir: Option<PathBuf>,
}

impl<'d> Trainer<'d> {
    pub fn new(model: ProbeModel<f32>, config: TrainConfig, data: &'d dyn Dataset, out_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        for split in Split::ALL {
            if data.len(split) == 0 {
                return Err(Error::Config(format!("{split} split is empty")));
            }
        }
        if let Some(dir) = out_dir {
            let ck = dir.join(CHECKPOINT_DIR);
            fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        }
        Ok(Self {
            model,
            rng: RngStream::new(config.seed),
            config,
            state: OptimState::new(),
            data,
            epoch: 0,
            out_dir: out_dir.map(Path::to_path_buf),
        })
    }

    pub fn model(&self) -> &ProbeModel<f32> {
        &self.model
    }

    pub fn into_model(self) -> ProbeModel<f32> {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn optim_state(&self) -> &OptimState<f32> {
        &self.state
    }

    /// One optimizer step on a batch; returns the batch-mean loss.
    pub fn train_step(&mut self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
        let mut ctx = Context::new(self.model.store(), Mode::Train, true, self.rng);
        let logits = self.model.forward(&mut ctx, &Var::constant(x.clone()))?;
        let loss = ctx.tape.cross_entropy(&logits, y)?;
        let ContextOutput {
            tape,
            params,
            buffer_updates,
            rng,
        } = ctx.finish();
        self.rng = rng;
        let value = loss.value().item()?.f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss is {value} at epoch {} step {}",
                self.epoch + 1,
                self.state.step + 1
            )));
        }
        let mut grads = tape.backward(&loss)?;
        let mut named = Vec::with_capacity(params.len());
        for (name, _) in self.model.store().parameters() {
            let var = &params[name];
            let g = match grads.take(var) {
                Some(g) => g,
                None => Tensor::zeros(var.dims().to_vec())?,
            };
            named.push((name.to_string(), g));
        }
        adamw_step(self.model.store_mut(), &named, &mut self.state, &self.config.optimizer)?;
        self.model.apply_buffer_updates(buffer_updates)?;
        Ok(value)
    }

    /// Training order for an epoch (1-based), reshuffled from the run seed.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len(Split::Train)).collect();
        if self.config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
        }
        order
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let epoch = self.epoch + 1;
        let order = self.epoch_order(epoch);
        let mut step_losses = Vec::new();
        let mut batch_sizes = Vec::new();
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let (x, y, _) = make_batch(self.data, Split::Train, chunk)?;
            let l = self.train_step(&x, &y)?;
            total += l * chunk.len() as f64;
            step_losses.push(l);
            batch_sizes.push(chunk.len());
        }
        self.epoch = epoch;
        let eb = self.config.eval_batch_size;
        let validation = evaluate(&self.model, self.data, Split::Validation, eb)?;
        let test = evaluate(&self.model, self.data, Split::Test, eb)?;
        let mut record = EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            step_losses,
            batch_sizes,
            validation,
            test,
            checkpoint: None,
            seconds: 0.0,
        };
        if let Some(dir) = &self.out_dir {
            let path = dir.join(CHECKPOINT_DIR).join(format!("epoch-{epoch:03}.lspc"));
            save_checkpoint(&self.checkpoint(&record), &path)?;
            record.checkpoint = Some(path);
        }
        record.seconds = started.elapsed().as_secs_f64();
        if let Some(dir) = &self.out_dir {
            append_jsonl(&dir.join(EPOCH_LOG), &record)?;
        }
        Ok(record)
    }

    /// Checkpoint of the current model, optimizer state and epoch metrics.
    pub fn checkpoint(&self, record: &EpochRecord) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone());
        ck.meta.seed = self.model.seed();
        ck.meta.epoch = Some(record.epoch);
        ck.meta.step = self.state.step;
        let m = &mut ck.meta.metrics;
        m.insert("train_loss".into(), Some(record.train_loss));
        for (prefix, v) in [("val", &record.validation), ("test", &record.test)] {
            m.insert(format!("{prefix}_precision"), v.precision);
            m.insert(format!("{prefix}_recall"), v.recall);
            m.insert(format!("{prefix}_f1"), v.f1);
            m.insert(format!("{prefix}_loss"), v.mean_loss);
        }
        ck.optimizer = self.state.to_entries();
        ck
    }
}

fn append_jsonl<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub records: Vec<EpochRecord>,
    pub model: ProbeModel<f32>,
}

impl TrainRun {
    /// Epoch with the highest validation F1; the earliest on ties.
    pub fn best_validation(&self) -> Option<&EpochRecord> {
        let mut best: Option<&EpochRecord> = None;
        for r in &self.records {
            let f = r.validation.f1.unwrap_or(f64::NEG_INFINITY);
            if best.is_none_or(|b| f > b.validation.f1.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(r);
            }
        }
        best
    }

    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Builds a probe from `probe` with the run seed and trains it for the
/// configured number of epochs.
pub fn run_training(
    data: &dyn Dataset,
    probe: ProbeConfig,
    config: TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    let model = ProbeModel::build(probe, config.seed)?;
    let epochs = config.epochs;
    let mut t = Trainer::new(model, config, data, out_dir)?;
    let mut records = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let r = t.run_epoch()?;
        on_epoch(&r);
        records.push(r);
    }
    Ok(TrainRun {
        records,
        model: t.into_model(),
    })
}
