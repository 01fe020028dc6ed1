//! Checkpoint evaluation and the audio-noise robustness sweep.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::Branch;
use crate::data::{Batch, Carrier, Dataset, FeatureBundle, LoadOptions, Split};
use crate::error::{ImgError, Result};
use crate::metrics::{decode_span, evaluate, span_to_seconds, EvalReport};
use crate::model::{to_f64_vec, FusionWeight, ImgModel};
use crate::train::Trainer;

pub const EVAL_BATCH: usize = 64;

/// Decoded prediction for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub span: (usize, usize),
    pub seconds: (f64, f64),
}

fn rows(t: &candle_core::Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?)
}

pub fn predict(model: &ImgModel, samples: &[&FeatureBundle], branch: Branch, weight: &FusionWeight) -> Result<Vec<Prediction>> {
    let with_audio = branch != Branch::Visual;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = Batch::new(chunk, model.cfg.dtype(), with_audio)?;
        let logits = model.branch_logits(&batch, branch, weight)?;
        let (starts, ends) = (rows(&logits.start)?, rows(&logits.end)?);
        for (k, s) in chunk.iter().enumerate() {
            let span = decode_span(&starts[k], &ends[k], &batch.frame_keep[k])?;
            out.push(Prediction {
                span,
                seconds: span_to_seconds(span, s.frames(), s.annotation.duration_sec),
            });
        }
    }
    Ok(out)
}

pub fn evaluate_samples(model: &ImgModel, samples: &[&FeatureBundle], branch: Branch, weight: &FusionWeight) -> Result<EvalReport> {
    let preds = predict(model, samples, branch, weight)?;
    let secs: Vec<(f64, f64)> = preds.iter().map(|p| p.seconds).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.annotation).collect();
    evaluate(&secs, &gts)
}

/// Predicted audio importance per sample.
pub fn importance_scores(model: &ImgModel, samples: &[&FeatureBundle]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = Batch::new(chunk, model.cfg.dtype(), true)?;
        out.extend(to_f64_vec(&model.importance_scores(&batch)?)?);
    }
    Ok(out)
}

/// Mean importance per carrier tag.
pub fn mean_importance_by_carrier(samples: &[&FeatureBundle], scores: &[f64]) -> BTreeMap<Carrier, f64> {
    let mut acc: BTreeMap<Carrier, (f64, usize)> = BTreeMap::new();
    for (s, &p) in samples.iter().zip(scores) {
        if let Some(c) = s.carrier {
            let e = acc.entry(c).or_insert((0.0, 0));
            e.0 += p;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
}

/// The held-out split if present, otherwise every sample.
pub fn eval_split(ds: &Dataset) -> Vec<&FeatureBundle> {
    let test = ds.split(Split::Test);
    if test.is_empty() {
        ds.samples.iter().collect()
    } else {
        test
    }
}

/// Load a checkpoint and a dataset directory, and evaluate one branch on the
/// held-out split. Audio files are only opened when the branch needs them.
pub fn evaluate_checkpoint(checkpoint: &Path, data_dir: &Path, branch: Branch) -> Result<EvalReport> {
    let trainer = Trainer::load(checkpoint)?;
    let cfg = &trainer.model.cfg;
    let ds = Dataset::load(
        data_dir,
        LoadOptions {
            max_frames: cfg.max_frames,
            max_tokens: cfg.max_tokens,
            read_audio: branch != Branch::Visual,
        },
    )?;
    let samples = eval_split(&ds);
    if samples.is_empty() {
        return Err(ImgError::InvalidInput(format!("{} holds no samples", data_dir.display())));
    }
    evaluate_samples(&trainer.model, &samples, branch, &FusionWeight::PREDICTED)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub noisy_samples: usize,
    pub mean_p: f64,
    pub miou_with_aip: f64,
    pub miou_fixed_half: f64,
}

/// A sweep table as written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSweep {
    pub seed: u64,
    pub samples: usize,
    pub rows: Vec<SweepRow>,
}

/// Load a checkpoint and a dataset directory and sweep the held-out split.
pub fn noise_sweep_checkpoint(checkpoint: &Path, data_dir: &Path, fractions: &[f64], seed: u64) -> Result<NoiseSweep> {
    let trainer = Trainer::load(checkpoint)?;
    let cfg = &trainer.model.cfg;
    let ds = Dataset::load(
        data_dir,
        LoadOptions {
            max_frames: cfg.max_frames,
            max_tokens: cfg.max_tokens,
            read_audio: true,
        },
    )?;
    let samples = eval_split(&ds);
    Ok(NoiseSweep {
        seed,
        samples: samples.len(),
        rows: noise_sweep(&trainer.model, &samples, fractions, seed)?,
    })
}

/// Replace the audio of a growing, nested share of samples with unit
/// Gaussian noise and record mean importance and fusion mIoU with the
/// predicted weight and with a fixed weight of 0.5.
pub fn noise_sweep(model: &ImgModel, samples: &[&FeatureBundle], fractions: &[f64], seed: u64) -> Result<Vec<SweepRow>> {
    if samples.is_empty() {
        return Err(ImgError::InvalidInput("noise sweep over zero samples".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(ImgError::InvalidInput(format!("noise fraction {f} outside [0, 1]")));
    }
    if fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(ImgError::InvalidInput("noise fractions must be sorted ascending".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // Noise per sample is fixed up front so that larger fractions extend smaller ones.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let noise: Vec<Array2<f32>> = samples
        .iter()
        .map(|s| {
            let shape = s.audio.as_ref().map_or((s.frames(), model.cfg.d_a), |a| a.dim());
            Array2::from_shape_simple_fn(shape, || {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
        })
        .collect();

    let mut table = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let k = (fraction * samples.len() as f64).round() as usize;
        let mut noisy: Vec<FeatureBundle> = samples.iter().map(|s| (*s).clone()).collect();
        for &i in &order[..k] {
            noisy[i].audio = Some(noise[i].clone());
        }
        let refs: Vec<&FeatureBundle> = noisy.iter().collect();
        let p = importance_scores(model, &refs)?;
        table.push(SweepRow {
            fraction,
            noisy_samples: k,
            mean_p: p.iter().sum::<f64>() / p.len() as f64,
            miou_with_aip: evaluate_samples(model, &refs, Branch::Fusion, &FusionWeight::PREDICTED)?.miou,
            miou_fixed_half: evaluate_samples(model, &refs, Branch::Fusion, &FusionWeight::Fixed(0.5))?.miou,
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synth::{generate_synthetic_dataset, SyntheticSpec};

    fn setup() -> (ImgModel, Vec<FeatureBundle>) {
        let cfg = ModelConfig {
            d: 8,
            d_v: 6,
            d_a: 6,
            d_q: 4,
            heads: 2,
            max_frames: 8,
            max_tokens: 4,
            kernel_bank: vec![1, 3],
            ..ModelConfig::synthetic()
        };
        let spec = SyntheticSpec {
            n_samples: 12,
            frames: 8,
            d_v: 6,
            d_a: 6,
            d_q: 4,
            ..SyntheticSpec::default()
        };
        (ImgModel::new(&cfg).unwrap(), generate_synthetic_dataset(&spec).unwrap().dataset.samples)
    }

    #[test]
    fn sweep_is_deterministic_and_zero_fraction_is_clean() {
        let (model, samples) = setup();
        let refs: Vec<&FeatureBundle> = samples.iter().collect();
        let fr = [0.0, 0.5, 1.0];
        let a = noise_sweep(&model, &refs, &fr, 7).unwrap();
        assert_eq!(a, noise_sweep(&model, &refs, &fr, 7).unwrap());
        let clean = importance_scores(&model, &refs).unwrap();
        assert_eq!(a[0].mean_p, clean.iter().sum::<f64>() / clean.len() as f64);
        assert_eq!(a[0].noisy_samples, 0);
        assert_eq!(a[2].noisy_samples, 12);
        assert!(noise_sweep(&model, &refs, &[0.5, 0.2], 7).is_err());
    }

    #[test]
    fn branch_predictions_are_valid_spans() {
        let (model, samples) = setup();
        let refs: Vec<&FeatureBundle> = samples.iter().collect();
        for branch in Branch::ALL {
            let preds = predict(&model, &refs, branch, &FusionWeight::PREDICTED).unwrap();
            assert!(preds.iter().all(|p| p.span.0 <= p.span.1 && p.span.1 < 8));
        }
    }
}
