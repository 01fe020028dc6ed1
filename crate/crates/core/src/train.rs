//! Training loop, optimizer and checkpoints.
//!
//! Every source of randomness is derived from `(seed, epoch)` for shuffling
//! and `(seed, step)` for saliency pair sampling, so the step counter is the
//! whole RNG state and a resumed run replays exactly.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{Batch, Carrier, FeatureBundle};
use crate::error::{ImgError, Result};
use crate::heads::{sample_saliency_pairs, LossBreakdown};
use crate::importance::{curriculum_alpha, ImportanceStats};
use crate::model::{objective, FusionWeight, ImgModel, ObjectiveInputs};
use crate::nn::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "img-checkpoint-1";
const PARAM_PREFIX: &str = "param/";
const MOMENT1_PREFIX: &str = "adam_m/";
const MOMENT2_PREFIX: &str = "adam_v/";

/// AdamW with decoupled weight decay. Moments are kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let p = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let decay = 1.0 - lr * self.weight_decay;
            let updated: Vec<f64> = p
                .iter()
                .zip(&g)
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((&p, &g), (m, v))| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    p * decay - lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps)
                })
                .collect();
            let t = Tensor::from_vec(updated, var.as_tensor().shape(), &Device::Cpu)?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// `lr · (total − step) / total`: linear decay reaching zero after the last step.
pub fn learning_rate(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * total.saturating_sub(step) as f64 / total as f64
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size)
}

fn derive_seed(seed: u64, domain: u64, counter: u64) -> u64 {
    // SplitMix64 finalizer over the combined words.
    let mut z = seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ counter.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, epoch as u64)));
    idx
}

pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, step as u64))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `train_log.jsonl`, checkpoints and divergence dumps.
    pub out_dir: Option<PathBuf>,
    /// Stop once this many total steps have run (for smoke tests and resume checks).
    pub stop_at_step: Option<usize>,
    /// Write a checkpoint at every epoch boundary.
    pub checkpoint_each_epoch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub mean_p: f64,
    pub mean_p_eff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_ret_fusion: f64,
    pub importance: Option<ImportanceStats>,
    pub mean_p_by_carrier: BTreeMap<Carrier, f64>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step(&'a StepReport),
    Epoch(&'a EpochSummary),
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    total: f64,
    ret_fusion: f64,
    p: Vec<f64>,
    by_carrier: BTreeMap<Carrier, (f64, usize)>,
}

impl EpochAccumulator {
    fn finish(self, epoch: usize) -> EpochSummary {
        let n = self.steps.max(1) as f64;
        EpochSummary {
            epoch,
            steps: self.steps,
            mean_total: self.total / n,
            mean_ret_fusion: self.ret_fusion / n,
            importance: ImportanceStats::from_scores(&self.p),
            mean_p_by_carrier: self.by_carrier.into_iter().map(|(c, (s, k))| (c, s / k as f64)).collect(),
        }
    }
}

/// Model, optimizer and step counter: everything needed to continue training.
#[derive(Debug)]
pub struct Trainer {
    pub model: ImgModel,
    pub opt: AdamW,
    /// Next step to run.
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            model: ImgModel::new(cfg)?,
            opt: AdamW::new(cfg.weight_decay),
            step: 0,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.cfg().epochs * steps_per_epoch(n_train, self.cfg().batch_size)
    }

    fn batch_members<'a>(&self, train: &[&'a FeatureBundle], step: usize) -> Vec<&'a FeatureBundle> {
        let spe = steps_per_epoch(train.len(), self.cfg().batch_size);
        let epoch = step / spe;
        let order = epoch_order(self.cfg().seed, epoch, train.len());
        let bs = self.cfg().batch_size;
        let lo = (step % spe) * bs;
        order[lo..(lo + bs).min(train.len())].iter().map(|&i| train[i]).collect()
    }

    /// Run the step at `self.step` and advance. On divergence the optimizer
    /// is left untouched and `dump_dir` (if any) receives a diagnostic file.
    pub fn train_step(&mut self, train: &[&FeatureBundle], dump_dir: Option<&Path>) -> Result<(StepReport, Vec<f64>)> {
        if train.is_empty() {
            return Err(ImgError::InvalidInput("training split is empty".into()));
        }
        let cfg = self.cfg().clone();
        let spe = steps_per_epoch(train.len(), cfg.batch_size);
        let epoch = self.step / spe;
        let total = self.total_steps(train.len());
        let lr = learning_rate(cfg.lr, self.step, total);
        let members = self.batch_members(train, self.step);
        let batch = Batch::new(&members, cfg.dtype(), true)?;
        let alpha = curriculum_alpha(epoch, &cfg.importance);

        let result = (|| -> Result<_> {
            let out = self.model.forward(&batch, &FusionWeight::Curriculum { alpha })?;
            let frame_keep = &batch.frame_keep;
            let spans = batch.spans();
            let mut rng = step_rng(cfg.seed, self.step);
            let pairs = std::array::from_fn(|_| sample_saliency_pairs(&spans, frame_keep, cfg.loss.saliency_pairs, &mut rng));
            let inputs = ObjectiveInputs {
                pairs,
                ..ObjectiveInputs::default()
            };
            let obj = objective(&self.model, &batch, &out, epoch, &inputs)?;
            let grads = obj.total.backward()?;
            Ok((obj, grads))
        })();
        let (obj, grads) = match result {
            Ok(v) => v,
            Err(e @ ImgError::Divergence(_)) => {
                if let Some(dir) = dump_dir {
                    let ids: Vec<&str> = members.iter().map(|m| m.video_id.as_str()).collect();
                    let dump = serde_json::json!({
                        "step": self.step,
                        "epoch": epoch,
                        "lr": lr,
                        "error": e.to_string(),
                        "batch": ids,
                    });
                    let path = dir.join("divergence.json");
                    fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|err| ImgError::io(&path, err))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        self.opt.step(&self.model.store, &grads, lr)?;
        let p: Vec<f64> = obj.records.iter().map(|r| r.p).collect();
        let report = StepReport {
            step: self.step,
            epoch,
            lr,
            loss: obj.breakdown,
            mean_p: p.iter().sum::<f64>() / p.len() as f64,
            mean_p_eff: obj.records.iter().map(|r| r.p_eff).sum::<f64>() / p.len() as f64,
        };
        self.step += 1;
        Ok((report, p))
    }

    /// Train until all epochs are done or `stop_at_step` is reached.
    pub fn run(&mut self, train: &[&FeatureBundle], opts: &TrainOptions) -> Result<Vec<EpochSummary>> {
        if train.is_empty() {
            return Err(ImgError::InvalidInput("training split is empty".into()));
        }
        let spe = steps_per_epoch(train.len(), self.cfg().batch_size);
        let total = self.total_steps(train.len());
        let stop = opts.stop_at_step.unwrap_or(total).min(total);
        let mut log = match &opts.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| ImgError::io(dir, e))?;
                let path = dir.join("train_log.jsonl");
                let f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| ImgError::io(&path, e))?;
                Some((BufWriter::new(f), path))
            }
            None => None,
        };
        let mut write_line = |line: &LogLine| -> Result<()> {
            if let Some((w, path)) = log.as_mut() {
                serde_json::to_writer(&mut *w, line)?;
                w.write_all(b"\n").map_err(|e| ImgError::io(&*path, e))?;
            }
            Ok(())
        };

        let mut summaries = Vec::new();
        let mut acc = EpochAccumulator::default();
        while self.step < stop {
            let members = self.batch_members(train, self.step);
            let (report, p) = self.train_step(train, opts.out_dir.as_deref())?;
            write_line(&LogLine::Step(&report))?;
            acc.steps += 1;
            acc.total += report.loss.total;
            acc.ret_fusion += report.loss.ret_fusion;
            for (m, &pi) in members.iter().zip(&p) {
                if let Some(c) = m.carrier {
                    let e = acc.by_carrier.entry(c).or_insert((0.0, 0));
                    e.0 += pi;
                    e.1 += 1;
                }
            }
            acc.p.extend(p);
            if self.step % spe == 0 {
                let summary = std::mem::take(&mut acc).finish(report.epoch);
                log::info!(
                    "epoch {} loss {:.4} fusion-ret {:.4} mean p {:.3}",
                    summary.epoch,
                    summary.mean_total,
                    summary.mean_ret_fusion,
                    summary.importance.as_ref().map_or(f64::NAN, |s| s.mean)
                );
                write_line(&LogLine::Epoch(&summary))?;
                summaries.push(summary);
                if opts.checkpoint_each_epoch {
                    if let Some(dir) = &opts.out_dir {
                        self.save(&dir.join("checkpoint.safetensors"))?;
                    }
                }
            }
        }
        if let Some((w, path)) = log.as_mut() {
            w.flush().map_err(|e| ImgError::io(&*path, e))?;
        }
        Ok(summaries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, var) in self.model.store.iter() {
            tensors.push((format!("{PARAM_PREFIX}{name}"), var.as_tensor().clone()));
        }
        for (prefix, moments) in [(MOMENT1_PREFIX, &self.opt.m), (MOMENT2_PREFIX, &self.opt.v)] {
            for (name, values) in moments {
                let t = Tensor::new(values.as_slice(), &Device::Cpu)?;
                tensors.push((format!("{prefix}{name}"), t));
            }
        }
        let cfg = self.cfg();
        let metadata = HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("config".to_string(), serde_json::to_string(cfg)?),
            ("step".to_string(), self.step.to_string()),
            ("adam_t".to_string(), self.opt.t.to_string()),
            ("rng_seed".to_string(), cfg.seed.to_string()),
        ]);
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| ImgError::io(dir, e))?;
        }
        let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(metadata))
            .map_err(|e| ImgError::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| ImgError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| ImgError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| ImgError::io(&*path, e))?;
        let bad = |msg: String| ImgError::Checkpoint(format!("{}: {msg}", path.display()));
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| bad("missing metadata".into()))?;
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing metadata key {k}")));
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format {:?}", meta.get("format"))));
        }
        let cfg: ModelConfig = serde_json::from_str(&get("config")?)?;
        let step: usize = get("step")?.parse().map_err(|_| bad("bad step".into()))?;
        let adam_t: u64 = get("adam_t")?.parse().map_err(|_| bad("bad adam_t".into()))?;

        let mut trainer = Trainer::new(&cfg)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let names: Vec<String> = trainer.model.store.iter().map(|(n, _)| n.clone()).collect();
        for name in &names {
            let t = tensors
                .get(&format!("{PARAM_PREFIX}{name}"))
                .ok_or_else(|| bad(format!("missing parameter {name}")))?;
            trainer.model.store.set(name, t)?;
        }
        let expected = names.len();
        let found = tensors.keys().filter(|k| k.starts_with(PARAM_PREFIX)).count();
        if found != expected {
            return Err(bad(format!("{found} parameters stored, model has {expected}")));
        }
        for (key, t) in &tensors {
            let values = || -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
            if let Some(name) = key.strip_prefix(MOMENT1_PREFIX) {
                trainer.opt.m.insert(name.to_string(), values()?);
            } else if let Some(name) = key.strip_prefix(MOMENT2_PREFIX) {
                trainer.opt.v.insert(name.to_string(), values()?);
            }
        }
        trainer.opt.t = adam_t;
        trainer.step = step;
        Ok(trainer)
    }
}

/// Train a fresh model on the training split.
pub fn train(cfg: &ModelConfig, train: &[&FeatureBundle], opts: &TrainOptions) -> Result<(Trainer, Vec<EpochSummary>)> {
    let mut trainer = Trainer::new(cfg)?;
    let summaries = trainer.run(train, opts)?;
    if let Some(dir) = &opts.out_dir {
        trainer.save(&dir.join("checkpoint.safetensors"))?;
    }
    Ok((trainer, summaries))
}

/// Open a file for writing, creating parent directories.
pub fn create_file(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ImgError::io(dir, e))?;
    }
    File::create(path).map_err(|e| ImgError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_dataset, SyntheticSpec};
    use crate::Precision;

    fn setup() -> (ModelConfig, Vec<FeatureBundle>) {
        let cfg = ModelConfig {
            d: 8,
            d_v: 6,
            d_a: 6,
            d_q: 4,
            heads: 2,
            max_frames: 8,
            max_tokens: 4,
            kernel_bank: vec![1, 3],
            batch_size: 4,
            epochs: 2,
            precision: Precision::F32,
            ..ModelConfig::synthetic()
        };
        let spec = SyntheticSpec {
            n_samples: 10,
            test_fraction: 0.0,
            frames: 8,
            d_v: 6,
            d_a: 6,
            d_q: 4,
            ..SyntheticSpec::default()
        };
        (cfg, generate_synthetic_dataset(&spec).unwrap().dataset.samples)
    }

    #[test]
    fn lr_decays_linearly_to_zero() {
        assert_eq!(learning_rate(1.0, 0, 10), 1.0);
        assert!((learning_rate(1.0, 5, 10) - 0.5).abs() < 1e-15);
        let total = 100 * 125;
        assert!(learning_rate(5e-4, total - 1, total) < 5e-4 / 100.0);
    }

    #[test]
    fn adamw_matches_hand_computed_steps() {
        let mut store = ParamStore::new(0, DType::F64);
        let w = store.constant("w", &[2], 1.0).unwrap();
        let mut opt = AdamW::new(0.1);
        let (mut m, mut v, mut p) = ([0.0f64; 2], [0.0f64; 2], [1.0f64; 2]);
        for t in 1..=3 {
            let loss = (w.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads, 0.01).unwrap();
            for i in 0..2 {
                let g = p[i];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                p[i] = p[i] * (1.0 - 0.01 * 0.1) - 0.01 * mh / (vh.sqrt() + 1e-8);
            }
            let got: Vec<f64> = store.get("w").unwrap().as_tensor().to_vec1().unwrap();
            for i in 0..2 {
                assert!((got[i] - p[i]).abs() < 1e-15, "step {t}: {} vs {}", got[i], p[i]);
            }
        }
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(1, 0, 20);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 0, 20));
        assert_ne!(a, epoch_order(1, 1, 20));
    }

    #[test]
    fn smoke_epoch_writes_log_and_checkpoint() {
        let (mut cfg, samples) = setup();
        cfg.epochs = 1;
        let refs: Vec<&FeatureBundle> = samples.iter().collect();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let (trainer, summaries) = train(&cfg, &refs, &opts).unwrap();
        assert_eq!(trainer.step, 3);
        assert_eq!(summaries.len(), 1);
        let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 4);
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first["kind"], "step");
        assert!(first["loss"]["ret_fusion"].as_f64().unwrap() > 0.0);
        let loaded = Trainer::load(&dir.path().join("checkpoint.safetensors")).unwrap();
        assert_eq!(loaded.step, 3);
        assert_eq!(loaded.opt, trainer.opt);
    }

    #[test]
    fn resume_reproduces_next_step_exactly() {
        let (cfg, samples) = setup();
        let refs: Vec<&FeatureBundle> = samples.iter().collect();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ck.safetensors");

        let mut straight = Trainer::new(&cfg).unwrap();
        for _ in 0..4 {
            straight.train_step(&refs, None).unwrap();
        }
        let mut first = Trainer::new(&cfg).unwrap();
        for _ in 0..2 {
            first.train_step(&refs, None).unwrap();
        }
        first.save(&ckpt).unwrap();
        let mut resumed = Trainer::load(&ckpt).unwrap();
        let a = resumed.train_step(&refs, None).unwrap().0;
        let b = first.train_step(&refs, None).unwrap().0;
        assert_eq!(a, b);
        resumed.train_step(&refs, None).unwrap();
        for ((_, x), (_, y)) in resumed.model.store.iter().zip(straight.model.store.iter()) {
            let x: Vec<f32> = x.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = y.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn identical_runs_give_identical_logs() {
        let (cfg, samples) = setup();
        let refs: Vec<&FeatureBundle> = samples.iter().collect();
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let opts = TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                ..TrainOptions::default()
            };
            train(&cfg, &refs, &opts).unwrap();
            fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_dumps_batch() {
        let (mut cfg, samples) = setup();
        cfg.lr = 1e30;
        cfg.epochs = 5;
        let refs: Vec<&FeatureBundle> = samples.iter().collect();
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let err = train(&cfg, &refs, &opts).unwrap_err();
        assert!(matches!(err, ImgError::Divergence(_)), "{err}");
        let dump: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("divergence.json")).unwrap()).unwrap();
        assert_eq!(dump["batch"].as_array().unwrap().len(), 4);
    }
}
