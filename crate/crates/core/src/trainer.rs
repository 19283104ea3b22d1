//! SGD training with the poly schedule, noise / shift augmentation and
//! checkpointing.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::dataset::{Balance, Dataset, Example, Split};
use crate::error::{Error, Result};
use crate::eval::{self, Predictions};
use crate::frontend::{augment_noise, time_shift, AudioClip, FeatureKind, Frontend, FrontendConfig, CLIP_SAMPLES};
use crate::kv::KvFile;
use crate::model::{CENet, Mode, ModelConfig, Param, Session, Variant};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub noise_prob: f64,
    pub snr_range_db: (f64, f64),
    pub shift_range_ms: (f64, f64),
    pub rng_seed: u64,
    pub features: FeatureKind,
    pub unknown_fraction: f64,
    pub silence_fraction: f64,
    /// Prepared batches waiting between the feature thread and the optimizer.
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            power: 0.9,
            epochs: 350,
            batch_size: 64,
            weight_decay: 1e-3,
            momentum: 0.9,
            noise_prob: 0.8,
            snr_range_db: (5.0, 15.0),
            shift_range_ms: (-100.0, 100.0),
            rng_seed: 0,
            features: FeatureKind::Mfcc,
            unknown_fraction: 0.1,
            silence_fraction: 0.1,
            queue_depth: 4,
        }
    }
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `lo, hi`, got `{s}`"))?;
    let lo = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

impl TrainConfig {
    /// Noise mixing and time shifting disabled.
    pub fn without_augmentation(mut self) -> Self {
        self.noise_prob = 0.0;
        self.shift_range_ms = (0.0, 0.0);
        self
    }

    pub fn balance(&self) -> Balance {
        Balance {
            unknown_fraction: self.unknown_fraction,
            silence_fraction: self.silence_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return err(format!("power must be positive, got {}", self.power));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.queue_depth == 0 {
            return err("epochs, batch_size and queue_depth must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return err(format!(
                "weight_decay {} / momentum {} out of range",
                self.weight_decay, self.momentum
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return err(format!("noise_prob {} outside [0, 1]", self.noise_prob));
        }
        let (lo, hi) = self.snr_range_db;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return err(format!("snr range [{lo}, {hi}] is not ordered"));
        }
        let (lo, hi) = self.shift_range_ms;
        if !(lo <= hi && lo >= -crate::frontend::MAX_SHIFT_MS && hi <= crate::frontend::MAX_SHIFT_MS) {
            return err(format!(
                "shift range [{lo}, {hi}] is not an ordered subset of [-100, 100]"
            ));
        }
        if !(self.unknown_fraction >= 0.0 && self.silence_fraction >= 0.0) {
            return err("unknown / silence fractions must be non-negative".into());
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvFile) {
        kv.set("base_lr", self.base_lr);
        kv.set("power", self.power);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("weight_decay", self.weight_decay);
        kv.set("momentum", self.momentum);
        kv.set("noise_prob", self.noise_prob);
        kv.set(
            "snr_range_db",
            format!("{}, {}", self.snr_range_db.0, self.snr_range_db.1),
        );
        kv.set(
            "shift_range_ms",
            format!("{}, {}", self.shift_range_ms.0, self.shift_range_ms.1),
        );
        kv.set("rng_seed", self.rng_seed);
        kv.set("features", self.features.as_str());
        kv.set("unknown_fraction", self.unknown_fraction);
        kv.set("silence_fraction", self.silence_fraction);
        kv.set("queue_depth", self.queue_depth);
    }

    /// Defaults overridden by whichever keys `kv` holds.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut c = TrainConfig::default();
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = kv.parse_opt(stringify!($field))? {
                    c.$field = v;
                }
            };
        }
        take!(base_lr);
        take!(power);
        take!(epochs);
        take!(batch_size);
        take!(weight_decay);
        take!(momentum);
        take!(noise_prob);
        take!(rng_seed);
        take!(features);
        take!(unknown_fraction);
        take!(silence_fraction);
        take!(queue_depth);
        for (key, slot) in [
            ("snr_range_db", &mut c.snr_range_db),
            ("shift_range_ms", &mut c.shift_range_ms),
        ] {
            if let Some(s) = kv.get(key) {
                *slot = parse_range(s).map_err(|e| Error::InvalidConfig(format!("`{key}`: {e}")))?;
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn frontend_config(&self) -> FrontendConfig {
        FrontendConfig::default().with_kind(self.features)
    }
}

/// `base_lr · (1 − iter/max_iter)^power`
pub fn poly_lr(iter: usize, max_iter: usize, base_lr: f64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be positive".into()));
    }
    if iter > max_iter {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} beyond max_iter {max_iter}"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// One momentum-SGD update: `v ← μ v + (g + λ w)`, `w ← w − lr v`.
pub fn sgd_update(w: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, momentum: f32, weight_decay: f32) -> Result<()> {
    if w.len() != g.len() || w.len() != v.len() {
        return Err(Error::Shape(format!(
            "sgd update over {} weights, {} grads, {} velocities",
            w.len(),
            g.len(),
            v.len()
        )));
    }
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = momentum * *vi + (gi + weight_decay * *wi);
        *wi -= lr * *vi;
    }
    Ok(())
}

/// Momentum SGD with per-parameter velocity buffers keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<(String, Vec<f32>)>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f32]> {
        self.velocity.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// Applies one update to `params` (the same list, in the same order,
    /// on every call). Decay only touches parameters flagged for it.
    pub fn step(&mut self, params: &mut [&mut Param<f32>], lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| (p.name.clone(), vec![0.0; p.numel()])).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let lr = lr as f32;
        for (p, (name, v)) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if *name != p.name {
                return Err(Error::Shape(format!("optimizer expected `{name}`, got `{}`", p.name)));
            }
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let g = p
                .tensor
                .grad()
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()]);
            sgd_update(p.tensor.data_mut(), &g, v, lr, self.momentum, wd)?;
        }
        Ok(())
    }

    fn state(&self) -> Vec<(String, Tensor<f32>)> {
        self.velocity
            .iter()
            .map(|(n, v)| {
                (
                    format!("optim.velocity.{n}"),
                    Tensor::new(vec![v.len()], v.clone()).expect("non-empty velocity"),
                )
            })
            .collect()
    }

    fn load_state(&mut self, names: &[(String, usize)], state: &HashMap<String, Tensor<f32>>) -> Result<()> {
        if !state.keys().any(|k| k.starts_with("optim.velocity.")) {
            self.velocity.clear();
            return Ok(());
        }
        let mut v = Vec::with_capacity(names.len());
        for (name, numel) in names {
            let key = format!("optim.velocity.{name}");
            let t = state
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.numel() != *numel {
                return Err(Error::Checkpoint(format!(
                    "`{key}` has {} values, expected {numel}",
                    t.numel()
                )));
            }
            v.push((name.clone(), t.data().to_vec()));
        }
        self.velocity = v;
        Ok(())
    }
}

/// Features of equally long clips stacked as `[B, 1, frames, dims]`.
pub fn features_tensor(frontend: &Frontend, clips: &[AudioClip]) -> Result<Tensor<f32>> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut data = Vec::new();
    let mut dims = (0, 0);
    for (i, c) in clips.iter().enumerate() {
        let f = frontend.compute(c)?;
        if i == 0 {
            dims = (f.frames(), f.dims());
        } else if dims != (f.frames(), f.dims()) {
            return Err(Error::Shape("clips of different lengths in one batch".into()));
        }
        data.extend(f.to_f32());
    }
    Tensor::new(vec![clips.len(), 1, dims.0, dims.1], data)
}

/// Random noise mix (with probability `noise_prob`) followed by a random shift.
pub fn augment_clip(clip: AudioClip, noise: &[AudioClip], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<AudioClip> {
    let mut clip = clip;
    let usable: Vec<&AudioClip> = noise.iter().filter(|n| n.len() >= clip.len()).collect();
    if !usable.is_empty() && cfg.noise_prob > 0.0 && rng.gen_bool(cfg.noise_prob) {
        let src = usable[rng.gen_range(0..usable.len())];
        let (lo, hi) = cfg.snr_range_db;
        let snr = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let seed: u64 = rng.gen();
        if clip.power() > 0.0 {
            // zero-power noise crops leave the clip untouched
            if let Ok(mixed) = augment_noise(&clip, src, snr, seed) {
                clip = mixed;
            }
        }
    }
    let (lo, hi) = cfg.shift_range_ms;
    if lo < hi || lo != 0.0 {
        let shift = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        clip = time_shift(&clip, shift)?;
    }
    Ok(clip)
}

/// Training examples for each epoch.
#[derive(Debug, Clone)]
pub enum TrainSet {
    /// A fixed list, reshuffled every epoch.
    Fixed(Vec<Example>),
    /// A scanned corpus; unknown and silence examples are redrawn each epoch.
    Corpus(Dataset),
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: TrainSet,
    pub val: Vec<Example>,
    /// Background recordings for noise mixing and silence crops.
    pub noise: Vec<AudioClip>,
}

impl TrainData {
    /// Train / validation examples of a scanned corpus.
    pub fn from_dataset(dataset: Dataset, cfg: &TrainConfig) -> Result<Self> {
        let noise = dataset.load_noise()?;
        let lengths: Vec<usize> = noise.iter().map(AudioClip::len).collect();
        let val = if dataset.split_records(Split::Val).next().is_some() {
            dataset.examples(Split::Val, &lengths, cfg.balance(), cfg.rng_seed)?
        } else {
            Vec::new()
        };
        Ok(TrainData {
            train: TrainSet::Corpus(dataset),
            val,
            noise,
        })
    }

    fn epoch_examples(&self, epoch: usize, cfg: &TrainConfig) -> Result<Vec<Example>> {
        let seed = cfg.rng_seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
        match &self.train {
            TrainSet::Fixed(v) => {
                if v.is_empty() {
                    return Err(Error::Dataset("empty training set".into()));
                }
                let mut v = v.clone();
                v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                Ok(v)
            }
            TrainSet::Corpus(d) => {
                let lengths: Vec<usize> = self.noise.iter().map(AudioClip::len).collect();
                d.examples(Split::Train, &lengths, cfg.balance(), seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub epoch: usize,
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub steps: Vec<StepMetrics>,
    /// `(epoch, validation accuracy)` after each completed epoch.
    pub val_acc: Vec<(usize, f64)>,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
}

/// Model, optimizer and schedule position.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: CENet<f32>,
    pub optimizer: Sgd,
    pub cfg: TrainConfig,
    pub frontend_cfg: FrontendConfig,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub best_val: Option<f64>,
}

impl Trainer {
    pub fn new(model: CENet<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model,
            optimizer: Sgd::new(cfg.momentum, cfg.weight_decay),
            frontend_cfg: cfg.frontend_config(),
            cfg,
            step: 0,
            best_val: None,
        })
    }

    /// Forward, cross-entropy, backward and one SGD update at rate `lr`.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<StepMetrics> {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, Mode::Train);
        let x = s
            .graph
            .constant(batch.features.shape().to_vec(), batch.features.data().to_vec())?;
        let logits = self.model.forward(&mut s, x)?;
        let loss = s.graph.cross_entropy(logits, &batch.labels)?;
        let record = s.finish();
        let loss_value = f64::from(g.value(loss)[0]);
        let train_acc = eval::accuracy(&g.tensor(logits), &batch.labels)?;
        g.backward(loss)?;
        self.model.zero_grad();
        self.model.accumulate_grads(&g, &record)?;
        self.model.apply_norm_updates(&record);
        let mut params = self.model.params_mut();
        self.optimizer.step(&mut params, lr)?;
        let m = StepMetrics {
            step: self.step,
            epoch: batch.epoch,
            lr,
            loss: loss_value,
            train_acc,
        };
        self.step += 1;
        Ok(m)
    }

    /// Runs the remaining schedule. With `out_dir`, appends per-step metrics
    /// to `metrics.csv` and writes `last.ckpt` / `best.ckpt` after each epoch.
    /// `on_step` may stop the run early.
    pub fn run(
        &mut self,
        data: &TrainData,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&StepMetrics) -> ControlFlow<()>,
    ) -> Result<TrainReport> {
        let frontend = Frontend::new(self.frontend_cfg.clone())?;
        let first = data.epoch_examples(0, &self.cfg)?;
        let per_epoch = first.len().div_ceil(self.cfg.batch_size);
        let max_iter = per_epoch * self.cfg.epochs;
        let mut metrics_file = match out_dir {
            Some(d) => Some(open_metrics(&d.join("metrics.csv"), self.step == 0)?),
            None => None,
        };
        let mut report = TrainReport {
            best_val: self.best_val,
            ..TrainReport::default()
        };
        if self.step >= max_iter {
            return Ok(report);
        }
        let start_epoch = self.step / per_epoch;
        let skip = self.step % per_epoch;
        let cfg = self.cfg.clone();
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(cfg.queue_depth);
        std::thread::scope(|scope| -> Result<()> {
            let producer_frontend = &frontend;
            let cfg_ref = &cfg;
            scope.spawn(move || {
                for epoch in start_epoch..cfg_ref.epochs {
                    let examples = match data.epoch_examples(epoch, cfg_ref) {
                        Ok(e) => e,
                        Err(e) => {
                            let _ = tx.send(Err(e));
                            return;
                        }
                    };
                    let from = if epoch == start_epoch { skip } else { 0 };
                    for (b, chunk) in examples.chunks(cfg_ref.batch_size).enumerate().skip(from) {
                        let batch = make_batch(
                            producer_frontend,
                            &data.noise,
                            cfg_ref,
                            epoch,
                            b * cfg_ref.batch_size,
                            chunk,
                        );
                        let failed = batch.is_err();
                        if tx.send(batch).is_err() || failed {
                            return;
                        }
                    }
                }
            });
            let rx = rx;
            let mut epoch_of_last = start_epoch;
            for batch in rx.iter() {
                let batch = batch?;
                if batch.epoch != epoch_of_last {
                    self.end_epoch(epoch_of_last, data, &frontend, out_dir, &mut report)?;
                    epoch_of_last = batch.epoch;
                }
                let lr = poly_lr(self.step, max_iter, cfg.base_lr, cfg.power)?;
                let m = self.train_step(&batch, lr)?;
                if let Some(f) = metrics_file.as_mut() {
                    writeln!(f, "{},{},{},{}", m.step, m.lr, m.loss, m.train_acc)
                        .map_err(|e| Error::io(out_dir.unwrap_or(Path::new(".")), e))?;
                }
                report.steps.push(m);
                if on_step(&m).is_break() {
                    report.stopped_early = true;
                    break;
                }
            }
            // unblocks the producer if it is waiting on a full queue
            drop(rx);
            if !report.stopped_early && self.step == max_iter {
                self.end_epoch(epoch_of_last, data, &frontend, out_dir, &mut report)?;
            } else if let Some(d) = out_dir {
                self.save(&d.join("last.ckpt"))?;
            }
            Ok(())
        })?;
        Ok(report)
    }

    fn end_epoch(
        &mut self,
        epoch: usize,
        data: &TrainData,
        frontend: &Frontend,
        out_dir: Option<&Path>,
        report: &mut TrainReport,
    ) -> Result<()> {
        let mut improved = false;
        if !data.val.is_empty() {
            let preds = eval::predict(&self.model, &data.val, &data.noise, frontend, self.cfg.batch_size)?;
            let acc = preds.accuracy();
            log::info!("epoch {epoch}: validation accuracy {acc:.4}");
            report.val_acc.push((epoch, acc));
            if self.best_val.map_or(true, |b| acc > b) {
                self.best_val = Some(acc);
                improved = true;
            }
        }
        report.best_val = self.best_val;
        if let Some(d) = out_dir {
            self.save(&d.join("last.ckpt"))?;
            if improved {
                self.save(&d.join("best.ckpt"))?;
            }
        }
        Ok(())
    }

    /// Validation-style posteriors for arbitrary examples.
    pub fn predict(&self, examples: &[Example], noise: &[AudioClip]) -> Result<Predictions> {
        let frontend = Frontend::new(self.frontend_cfg.clone())?;
        eval::predict(&self.model, examples, noise, &frontend, self.cfg.batch_size)
    }

    /// Writes `path` (tensors) and `path.cfg` (model and schedule settings).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.state();
        tensors.extend(self.optimizer.state());
        checkpoint::write(path, &tensors)?;
        let mut kv = KvFile::new();
        let mc = self.model.config();
        kv.set("variant", mc.variant);
        kv.set("gcn_stages", join(&mc.gcn_stages));
        kv.set("model_seed", self.model.seed());
        kv.set("step", self.step);
        if let Some(b) = self.best_val {
            kv.set("best_val", b);
        }
        self.cfg.to_kv(&mut kv);
        kv.write(sidecar(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KvFile::read(sidecar(path))?;
        let variant: Variant = kv.require("variant")?;
        let stages: Vec<usize> = kv.list("gcn_stages")?.unwrap_or_default();
        let seed: u64 = kv.require("model_seed")?;
        let cfg = TrainConfig::from_kv(&kv)?;
        let mut model = CENet::build(&ModelConfig::new(variant).with_gcn(&stages), seed)?;
        let state: HashMap<String, Tensor<f32>> = checkpoint::read(path)?.into_iter().collect();
        model.load_state(&state)?;
        let mut t = Trainer::new(model, cfg)?;
        let names: Vec<(String, usize)> = t.model.params().iter().map(|p| (p.name.clone(), p.numel())).collect();
        t.optimizer.load_state(&names, &state)?;
        t.step = kv.require("step")?;
        t.best_val = kv.parse_opt("best_val")?;
        Ok(t)
    }
}

/// `model.ckpt` → `model.cfg`
pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("cfg")
}

fn join(v: &[usize]) -> String {
    v.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

fn open_metrics(path: &Path, fresh: bool) -> Result<File> {
    let exists = path.exists();
    let mut f = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().append(true).create(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    if fresh || !exists {
        writeln!(f, "step,lr,loss,train_acc").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Augmentation stream of one example, independent of batching and threads.
fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn make_batch(
    frontend: &Frontend,
    noise: &[AudioClip],
    cfg: &TrainConfig,
    epoch: usize,
    first_index: usize,
    chunk: &[Example],
) -> Result<Batch> {
    let mut clips = Vec::with_capacity(chunk.len());
    for (i, ex) in chunk.iter().enumerate() {
        let clip = ex.load(noise)?.fit_to(CLIP_SAMPLES);
        let mut rng = example_rng(cfg.rng_seed, epoch, first_index + i);
        clips.push(augment_clip(clip, noise, cfg, &mut rng)?);
    }
    Ok(Batch {
        epoch,
        features: features_tensor(frontend, &clips)?,
        labels: chunk.iter().map(|e| e.label).collect(),
    })
}
