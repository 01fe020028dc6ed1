//! Acceptance criteria 1–10, one pass/fail line each.
//!
//! Runs without the libtest harness so that every line is printed and the
//! training criteria share one model and never compete for the CPU.
//! Pass criterion numbers to run a subset: `cargo test --test acceptance -- 1 3`;
//! `RUST_LOG=info` shows per-epoch training progress.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use img_core::data::{Batch, FeatureBundle};
use img_core::eval::{evaluate_samples, importance_scores, mean_importance_by_carrier, noise_sweep};
use img_core::fusion::SlotAttention;
use img_core::heads::sample_saliency_pairs;
use img_core::importance::pseudo_importance_label;
use img_core::metrics::{decode_span, evaluate};
use img_core::model::{objective, ObjectiveInputs};
use img_core::nn::ParamStore;
use img_core::{
    generate_synthetic_dataset, Branch, Carrier, FusionWeight, ImgModel, ImportanceConfig, ModelConfig, MomentAnnotation,
    Precision, Split, SyntheticSpec, TrainOptions, Trainer,
};
use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

const LABEL_TOL: f64 = 1e-9;
const LABEL_BUDGET: Duration = Duration::from_secs(5);

/// `e^{Lv/γ} / (e^{La/γ} + e^{Lv/γ})` evaluated directly, both exponents shifted by their maximum.
fn label_oracle(lv: f64, la: f64, gamma: f64, eps_min: f64, eps_max: f64) -> f64 {
    let m = lv.max(la) / gamma;
    let ev = (lv / gamma - m).exp();
    let ea = (la / gamma - m).exp();
    let y = ev / (ea + ev);
    if y >= eps_max {
        1.0
    } else if y < eps_min {
        0.0
    } else {
        y
    }
}

fn pseudo_label_oracle() -> Outcome {
    let start = Instant::now();
    let grid: Vec<f64> = (0..100).map(|i| i as f64 * 0.2).collect();
    let thresholds = [(0.2, 0.8), (0.1, 0.9), (0.3, 0.7), (0.05, 0.95), (0.2, 0.6), (0.4, 0.55)];
    let (mut max_err, mut checked, mut asym) = (0.0f64, 0usize, 0usize);
    for gamma in [1.0, 2.0, 3.0, 5.0] {
        for &(eps_min, eps_max) in &thresholds {
            let cfg = ImportanceConfig {
                gamma,
                eps_min,
                eps_max,
                ..ImportanceConfig::default()
            };
            let symmetric = eps_max == 1.0 - eps_min;
            for &lv in &grid {
                for &la in &grid {
                    let got = pseudo_importance_label(lv, la, &cfg).map_err(err)?;
                    max_err = max_err.max((got - label_oracle(lv, la, gamma, eps_min, eps_max)).abs());
                    checked += 1;
                    if symmetric {
                        let swapped = pseudo_importance_label(la, lv, &cfg).map_err(err)?;
                        if got + swapped != 1.0 {
                            asym += 1;
                        }
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    Ok((
        max_err < LABEL_TOL && asym == 0 && elapsed < LABEL_BUDGET,
        format!(
            "{checked} labels, max abs error {max_err:.1e} (< {LABEL_TOL:.0e}), {asym} complementarity violations, {:.2} s (< 5 s)",
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- shared data helpers

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f32, _>(StandardNormal))
}

/// Cut a sample to `len` frames, keeping its moment inside.
fn truncate(s: &FeatureBundle, len: usize) -> FeatureBundle {
    let mut s = s.clone();
    let len = len.max(s.annotation.end_idx + 1).min(s.frames());
    s.visual = s.visual.slice(ndarray::s![..len, ..]).to_owned();
    s.audio = s.audio.map(|a| a.slice(ndarray::s![..len, ..]).to_owned());
    s
}

// ---------------------------------------------------------------- 2

const SUPPRESSION_TOL: f64 = 1e-6;

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64, String> {
    let d = (a - b).map_err(err)?.abs().map_err(err)?.flatten_all().map_err(err)?.max(0).map_err(err)?;
    d.to_dtype(DType::F64).map_err(err)?.to_scalar::<f64>().map_err(err)
}

fn decoded(batch: &Batch, start: &Tensor, end: &Tensor) -> Result<Vec<(usize, usize)>, String> {
    let s = start.to_dtype(DType::F64).map_err(err)?.to_vec2::<f64>().map_err(err)?;
    let e = end.to_dtype(DType::F64).map_err(err)?.to_vec2::<f64>().map_err(err)?;
    s.iter()
        .zip(&e)
        .zip(&batch.frame_keep)
        .map(|((s, e), k)| decode_span(s, e, k).map_err(err))
        .collect()
}

/// Largest change of any fused quantity when the suppressed modality is resampled.
fn suppression_trial(model: &ImgModel, samples: &[FeatureBundle], p: f64, rng: &mut ChaCha8Rng) -> Result<(f64, bool), String> {
    let resampled: Vec<FeatureBundle> = samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if p == 0.0 {
                let a = s.audio.as_ref().expect("synthetic audio");
                s.audio = Some(random_matrix(rng, a.nrows(), a.ncols()));
            } else {
                s.visual = random_matrix(rng, s.visual.nrows(), s.visual.ncols());
            }
            s
        })
        .collect();
    let dtype = model.cfg.dtype();
    let a = Batch::new(&samples.iter().collect::<Vec<_>>(), dtype, true).map_err(err)?;
    let b = Batch::new(&resampled.iter().collect::<Vec<_>>(), dtype, true).map_err(err)?;
    let w = FusionWeight::Fixed(p);
    let oa = model.forward(&a, &w).map_err(err)?;
    let ob = model.forward(&b, &w).map_err(err)?;
    let (ga, gb) = (&oa.granularity, &ob.granularity);
    let mut worst = 0.0f64;
    for (x, y) in [
        (&ga.local.fused, &gb.local.fused),
        (&ga.event.fused, &gb.event.fused),
        (&ga.global.fused, &gb.global.fused),
        (&ga.fused, &gb.fused),
        (&oa.fusion.start, &ob.fusion.start),
        (&oa.fusion.end, &ob.fusion.end),
    ] {
        worst = worst.max(max_abs_diff(x, y)?);
    }
    let same_span = decoded(&a, &oa.fusion.start, &oa.fusion.end)? == decoded(&b, &ob.fusion.start, &ob.fusion.end)?;
    Ok((worst, same_span))
}

fn audio_suppression() -> Outcome {
    let cfg = ModelConfig::synthetic();
    let model = ImgModel::new(&cfg).map_err(err)?;
    let spec = SyntheticSpec {
        n_samples: 64,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_dataset(&spec).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 2];
    let mut span_changes = 0;
    for _ in 0..100 {
        let chosen: Vec<&FeatureBundle> = corpus.dataset.samples.choose_multiple(&mut rng, 4).collect();
        let lengths: Vec<usize> = (0..4).map(|_| rng.random_range(4..=spec.frames)).collect();
        let picks: Vec<FeatureBundle> = chosen.iter().zip(lengths).map(|(s, len)| truncate(s, len)).collect();
        for (k, p) in [0.0, 1.0].into_iter().enumerate() {
            let (d, same) = suppression_trial(&model, &picks, p, &mut rng)?;
            worst[k] = worst[k].max(d);
            span_changes += usize::from(!same);
        }
    }
    // Without suppression, resampling a modality must move the fused output.
    let picks: Vec<FeatureBundle> = corpus.dataset.samples[..4].to_vec();
    let (live, _) = suppression_trial(&model, &picks, 0.5, &mut rng)?;
    Ok((
        worst[0] <= SUPPRESSION_TOL && worst[1] <= SUPPRESSION_TOL && span_changes == 0 && live > 1e-3,
        format!(
            "100 trials, max change {:.1e} at p=0 (audio resampled), {:.1e} at p=1 (visual resampled), {span_changes} decoded spans changed; change at p=0.5 {live:.2}",
            worst[0], worst[1]
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn softmax_kept(logits: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = logits.iter().zip(keep).filter(|p| *p.1).map(|p| *p.0).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().zip(keep).map(|(&v, &k)| if k { (v - max).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn brute_force_span(start: &[f64], end: &[f64], keep: &[bool]) -> (usize, usize) {
    let (ps, pe) = (softmax_kept(start, keep), softmax_kept(end, keep));
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for i in 0..keep.len() {
        for j in i..keep.len() {
            if keep[i] && keep[j] && ps[i] * pe[j] > best.0 {
                best = (ps[i] * pe[j], i, j);
            }
        }
    }
    (best.1, best.2)
}

fn decoding_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut lengths = BTreeSet::new();
    for trial in 0..1000 {
        let t = if trial < 64 { trial + 1 } else { rng.random_range(1..=64) };
        lengths.insert(t);
        let start: Vec<f64> = (0..t).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let end: Vec<f64> = (0..t).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut keep: Vec<bool> = (0..t).map(|_| rng.random_bool(0.75)).collect();
        let forced = rng.random_range(0..t);
        keep[forced] = true;
        if decode_span(&start, &end, &keep).map_err(err)? != brute_force_span(&start, &end, &keep) {
            mismatches += 1;
        }
    }
    Ok((
        mismatches == 0,
        format!("1000 random cases over {} lengths in 1..=64, {mismatches} mismatches", lengths.len()),
    ))
}

// ---------------------------------------------------------------- 4

const METRIC_TOL: f64 = 1e-9;

fn moment(end: f64) -> MomentAnnotation {
    MomentAnnotation {
        start_sec: 0.0,
        end_sec: end,
        duration_sec: 20.0,
        start_idx: 0,
        end_idx: end as usize,
    }
}

fn metric_oracle() -> Outcome {
    let gts = [moment(10.0), moment(10.0)];
    let r = evaluate(&[(0.0, 6.0), (0.0, 4.0)], &gts).map_err(err)?;
    let r1 = |mu: f64| r.r1(mu).unwrap_or(f64::NAN);
    let close = |a: f64, b: f64| (a - b).abs() < METRIC_TOL;
    let main = close(r1(0.3), 100.0) && close(r1(0.5), 50.0) && close(r1(0.7), 0.0) && close(r.miou, 50.0);
    let boundary = evaluate(&[(0.0, 5.0), (0.0, 6.0)], &gts).map_err(err)?;
    let strict = close(boundary.r1(0.5).unwrap_or(f64::NAN), 50.0);
    Ok((
        main && strict,
        format!(
            "IoU {{0.6, 0.4}}: R1@0.3 {}, R1@0.5 {}, R1@0.7 {}, mIoU {}; IoU {{0.5, 0.6}}: R1@0.5 {}",
            r1(0.3),
            r1(0.5),
            r1(0.7),
            r.miou,
            boundary.r1(0.5).unwrap_or(f64::NAN)
        ),
    ))
}

// ---------------------------------------------------------------- 5

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_PARAMS: usize = 50;
/// Analytic gradients smaller than this are below the resolution of a central
/// difference with step 1e-5 on losses of order 10.
const FD_MIN_GRAD: f64 = 1e-5;
const FD_BUDGET: Duration = Duration::from_secs(120);

#[derive(Clone, Copy)]
enum Term {
    Retrieval,
    Importance,
    Distillation,
    Saliency,
    Total,
}

impl Term {
    const ALL: [Term; 5] = [Term::Retrieval, Term::Importance, Term::Distillation, Term::Saliency, Term::Total];

    fn name(self) -> &'static str {
        match self {
            Term::Retrieval => "retrieval",
            Term::Importance => "importance",
            Term::Distillation => "distillation",
            Term::Saliency => "saliency",
            Term::Total => "total",
        }
    }
}

struct GradProblem {
    model: ImgModel,
    batch: Batch,
    weight: FusionWeight,
    inputs: ObjectiveInputs,
}

impl GradProblem {
    fn new() -> Result<Self, String> {
        let cfg = ModelConfig {
            d: 8,
            d_v: 6,
            d_a: 5,
            d_q: 4,
            heads: 2,
            max_frames: 8,
            max_tokens: 4,
            kernel_bank: vec![1, 3],
            slots: 2,
            slot_iters: 2,
            precision: Precision::F64,
            seed: 5,
            ..ModelConfig::synthetic()
        };
        let spec = SyntheticSpec {
            n_samples: 3,
            frames: 8,
            d_v: 6,
            d_a: 5,
            d_q: 4,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let samples = generate_synthetic_dataset(&spec).map_err(err)?.dataset.samples;
        let samples = [samples[0].clone(), truncate(&samples[1], 6), samples[2].clone()];
        let batch = Batch::new(&samples.iter().collect::<Vec<_>>(), DType::F64, true).map_err(err)?;
        let model = ImgModel::new(&cfg).map_err(err)?;
        let weight = FusionWeight::PerSample(vec![0.3, 0.65, 0.8]);

        // Freeze everything the objective would otherwise derive from the forward pass.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = cfg.loss.saliency_pairs;
        let pairs = std::array::from_fn(|_| sample_saliency_pairs(&batch.spans(), &batch.frame_keep, k, &mut rng));
        let out = model.forward(&batch, &weight).map_err(err)?;
        let mut inputs = ObjectiveInputs {
            pairs,
            ..ObjectiveInputs::default()
        };
        let first = objective(&model, &batch, &out, cfg.importance.warmup_epochs, &inputs).map_err(err)?;
        inputs.labels = Some(first.records.iter().map(|r| r.y_label).collect());
        let mut teacher = out.fusion.clone();
        teacher.start = teacher.start.detach();
        teacher.end = teacher.end.detach();
        inputs.teacher = Some(teacher);
        Ok(Self {
            model,
            batch,
            weight,
            inputs,
        })
    }

    fn term(&self, which: Term) -> Result<Tensor, String> {
        let out = self.model.forward(&self.batch, &self.weight).map_err(err)?;
        let obj = objective(&self.model, &self.batch, &out, self.model.cfg.importance.warmup_epochs, &self.inputs).map_err(err)?;
        let t = &obj.terms;
        let sum = |a: &Tensor, b: &Tensor| (a + b).map_err(err);
        Ok(match which {
            Term::Retrieval => sum(&sum(&t.ret_visual, &t.ret_audio)?, &t.ret_fusion)?,
            Term::Importance => t.importance.clone(),
            Term::Distillation => sum(&t.kl_visual, &t.kl_audio)?,
            Term::Saliency => t.saliency.clone(),
            Term::Total => obj.total,
        })
    }

    fn value(&self, which: Term) -> Result<f64, String> {
        self.term(which)?.to_scalar::<f64>().map_err(err)
    }
}

fn nudge(var: &Var, index: usize, delta: f64) -> Result<(), String> {
    let shape = var.shape().clone();
    let mut v = var.as_tensor().flatten_all().map_err(err)?.to_vec1::<f64>().map_err(err)?;
    v[index] += delta;
    var.set(&Tensor::from_vec(v, shape, &Device::Cpu).map_err(err)?).map_err(err)
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let problem = GradProblem::new()?;
    let vars: Vec<(String, Var)> = problem.model.store.iter().map(|(n, v)| (n.clone(), v.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut pass = true;
    let mut lines = Vec::new();
    for which in Term::ALL {
        let grads = problem.term(which)?.backward().map_err(err)?;
        let mut candidates = Vec::new();
        let mut silent = Vec::new();
        for (k, (_, var)) in vars.iter().enumerate() {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all().map_err(err)?.to_vec1::<f64>().map_err(err)?,
                None => vec![0.0; var.elem_count()],
            };
            for (i, &gi) in g.iter().enumerate() {
                if gi.abs() >= FD_MIN_GRAD {
                    candidates.push((k, i, gi));
                } else if gi == 0.0 {
                    silent.push((k, i));
                }
            }
        }
        candidates.shuffle(&mut rng);
        silent.shuffle(&mut rng);
        let mut worst = 0.0f64;
        for &(k, i, analytic) in candidates.iter().take(FD_PARAMS) {
            let var = &vars[k].1;
            nudge(var, i, FD_STEP)?;
            let up = problem.value(which)?;
            nudge(var, i, -2.0 * FD_STEP)?;
            let down = problem.value(which)?;
            nudge(var, i, FD_STEP)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
        }
        // Parameters without an analytic gradient must not move the term either.
        let mut leak = 0.0f64;
        for &(k, i) in silent.iter().take(10) {
            let var = &vars[k].1;
            nudge(var, i, FD_STEP)?;
            let up = problem.value(which)?;
            nudge(var, i, -2.0 * FD_STEP)?;
            let down = problem.value(which)?;
            nudge(var, i, FD_STEP)?;
            leak = leak.max(((up - down) / (2.0 * FD_STEP)).abs());
        }
        let checked = candidates.len().min(FD_PARAMS);
        let ok = checked >= FD_PARAMS && worst < FD_TOL && leak < 1e-6;
        pass &= ok;
        lines.push(format!("{} {checked} params max rel {worst:.1e}", which.name()));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < FD_BUDGET;
    Ok((pass, format!("{}; {:.1} s (< 120 s)", lines.join(", "), elapsed.as_secs_f64())))
}

// ---------------------------------------------------------------- 6

const SLOT_TOL: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor, String> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).map_err(err)
}

fn slot_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let keep = [[true, true, false, true, true, true, false], [true, true, true, true, true, true, true]];
    let bits: Vec<f64> = keep.iter().flatten().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(bits, (2, 7), &Device::Cpu).map_err(err)?;
    let x = random_tensor(&mut rng, &[2, 7, 8])?;

    let mut store = ParamStore::new(6, DType::F64);
    let sa = SlotAttention::new(&mut store, "slots", 8, 4, 3, 2).map_err(err)?;
    let out = sa.forward(&x, &mask).map_err(err)?;
    let mut sum_err = 0.0f64;
    for attn in &out.attention {
        for sample in attn.to_vec3::<f64>().map_err(err)? {
            for row in sample {
                sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }

    let init = random_tensor(&mut rng, &[4, 8])?;
    let perm = [2u32, 0, 3, 1];
    let permuted = init.index_select(&Tensor::new(&perm, &Device::Cpu).map_err(err)?, 0).map_err(err)?;
    let a = sa.forward_with(&x, &mask, &init, 3).map_err(err)?.slots.to_vec3::<f64>().map_err(err)?;
    let b = sa.forward_with(&x, &mask, &permuted, 3).map_err(err)?.slots.to_vec3::<f64>().map_err(err)?;
    let mut perm_diff = 0.0f64;
    for (sa_, sb) in a.iter().zip(&b) {
        for (k, &src) in perm.iter().enumerate() {
            for (u, v) in sb[k].iter().zip(&sa_[src as usize]) {
                perm_diff = perm_diff.max((u - v).abs());
            }
        }
    }

    let mut store = ParamStore::new(7, DType::F64);
    let single = SlotAttention::new(&mut store, "one", 8, 1, 3, 2).map_err(err)?;
    let values = single
        .v
        .forward(&single.norm_inputs.forward(&x).map_err(err)?)
        .map_err(err)?
        .to_vec3::<f64>()
        .map_err(err)?;
    let out = single.forward(&x, &mask).map_err(err)?;
    let mut mean_err = 0.0f64;
    for update in &out.updates {
        for (b, rows) in update.to_vec3::<f64>().map_err(err)?.iter().enumerate() {
            let n = keep[b].iter().filter(|&&k| k).count() as f64;
            for c in 0..8 {
                let mean = (0..7).filter(|&t| keep[b][t]).map(|t| values[b][t][c]).sum::<f64>() / n;
                mean_err = mean_err.max((rows[0][c] - mean).abs());
            }
        }
    }
    Ok((
        sum_err <= SLOT_TOL && perm_diff == 0.0 && mean_err <= SLOT_TOL,
        format!("weight sums off by {sum_err:.1e}, permutation diff {perm_diff:.1e} (exact), single-slot vs masked mean {mean_err:.1e}"),
    ))
}

// ---------------------------------------------------------------- 7–10

const TRAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const MIN_FUSION_MIOU: f64 = 70.0;
const FUSION_SLACK: f64 = 2.0;
const MIN_P_GAP: f64 = 0.2;
const MAX_RHO: f64 = -0.8;
const SWEEP: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const MAX_VISUAL_GAP: f64 = 5.0;

struct Trained {
    model: ImgModel,
    test: Vec<FeatureBundle>,
    elapsed: Duration,
}

struct Mious {
    fusion: f64,
    visual: f64,
    audio: f64,
}

fn train(spec: &SyntheticSpec, cfg: &ModelConfig) -> Result<Trained, String> {
    let corpus = generate_synthetic_dataset(spec).map_err(err)?;
    let train = corpus.dataset.split(Split::Train);
    let mut trainer = Trainer::new(cfg).map_err(err)?;
    let start = Instant::now();
    trainer.run(&train, &TrainOptions::default()).map_err(err)?;
    let elapsed = start.elapsed();
    let test = corpus.dataset.split(Split::Test).into_iter().cloned().collect();
    Ok(Trained {
        model: trainer.model,
        test,
        elapsed,
    })
}

fn mious(t: &Trained) -> Result<Mious, String> {
    let test: Vec<&FeatureBundle> = t.test.iter().collect();
    let m = |b| evaluate_samples(&t.model, &test, b, &FusionWeight::PREDICTED).map(|r| r.miou).map_err(err);
    Ok(Mious {
        fusion: m(Branch::Fusion)?,
        visual: m(Branch::Visual)?,
        audio: m(Branch::Audio)?,
    })
}

fn end_to_end(t: &Trained) -> Outcome {
    let m = mious(t)?;
    let secs = t.elapsed.as_secs_f64();
    Ok((
        m.fusion >= MIN_FUSION_MIOU && m.fusion >= m.visual.max(m.audio) - FUSION_SLACK && t.elapsed < TRAIN_BUDGET,
        format!(
            "{} held-out samples: mIoU fusion {:.2}, visual {:.2}, audio {:.2}; training {:.0} s (< 900 s)",
            t.test.len(),
            m.fusion,
            m.visual,
            m.audio,
            secs
        ),
    ))
}

fn discrimination(t: &Trained) -> Outcome {
    let test: Vec<&FeatureBundle> = t.test.iter().collect();
    let p = importance_scores(&t.model, &test).map_err(err)?;
    let by = mean_importance_by_carrier(&test, &p);
    let (audio, visual) = (by[&Carrier::Audio], by[&Carrier::Visual]);
    Ok((
        audio - visual >= MIN_P_GAP,
        format!(
            "mean p audio-carrier {audio:.3}, visual-carrier {visual:.3}, gap {:.3} (>= 0.2)",
            audio - visual
        ),
    ))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn noise_trend(t: &Trained) -> Outcome {
    let test: Vec<&FeatureBundle> = t.test.iter().collect();
    let rows = noise_sweep(&t.model, &test, &SWEEP, t.model.cfg.seed).map_err(err)?;
    let p: Vec<f64> = rows.iter().map(|r| r.mean_p).collect();
    let rho = spearman(&SWEEP, &p);
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    let drop_aip = first.miou_with_aip - last.miou_with_aip;
    let drop_half = first.miou_fixed_half - last.miou_fixed_half;
    Ok((
        rho <= MAX_RHO && drop_aip < drop_half,
        format!(
            "mean p {}; Spearman {rho:.2} (<= -0.8); mIoU drop 0→1 with AIP {drop_aip:.2} vs fixed 0.5 {drop_half:.2}",
            p.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
        ),
    ))
}

/// Most samples carry the moment in the visual stream; none carry it only in audio.
fn visual_dominant_spec() -> SyntheticSpec {
    SyntheticSpec {
        carrier_mix: [0.0, 0.6, 0.3, 0.1],
        ..SyntheticSpec::default()
    }
}

fn distillation(default_run: &Trained) -> Outcome {
    let spec = visual_dominant_spec();
    let mut cfg = ModelConfig::synthetic();
    let with = mious(&train(&spec, &cfg)?)?;
    cfg.loss.distill = false;
    let without = mious(&train(&spec, &cfg)?)?;
    let (gap_with, gap_without) = (with.fusion - with.visual, without.fusion - without.visual);
    let default = mious(default_run)?;
    Ok((
        gap_with <= MAX_VISUAL_GAP && gap_with < gap_without,
        format!(
            "visual-dominant mix: fusion − visual {gap_with:.2} with distillation (<= 5), {gap_without:.2} without; default mix with distillation: {:.2}",
            default.fusion - default.visual
        ),
    ))
}

// ---------------------------------------------------------------- runner

const NAMES: [&str; 10] = [
    "pseudo-label oracle",
    "audio-suppression invariant",
    "decoding oracle",
    "metric oracle",
    "gradient checks",
    "slot attention properties",
    "synthetic end-to-end",
    "importance discrimination",
    "noise-sweep trend",
    "distillation effect",
];

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).filter(|n| (1..=10).contains(n)).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut failed = Vec::new();
    let mut report = |n: usize, outcome: Outcome| {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("criterion {n:>2} {:<28} {}  {detail}", NAMES[n - 1], if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(n);
        }
    };
    let fast: [(usize, fn() -> Outcome); 6] = [
        (1, pseudo_label_oracle),
        (2, audio_suppression),
        (3, decoding_oracle),
        (4, metric_oracle),
        (5, gradient_checks),
        (6, slot_properties),
    ];
    for (n, check) in fast {
        if wanted(n) {
            report(n, check());
        }
    }
    if (7..=10).any(wanted) {
        match train(&SyntheticSpec::default(), &ModelConfig::synthetic()) {
            Ok(t) => {
                let trained: [(usize, fn(&Trained) -> Outcome); 4] =
                    [(7, end_to_end), (8, discrimination), (9, noise_trend), (10, distillation)];
                for (n, check) in trained {
                    if wanted(n) {
                        report(n, check(&t));
                    }
                }
            }
            Err(e) => {
                for n in (7..=10).filter(|&n| wanted(n)) {
                    report(n, Err(format!("training failed: {e}")));
                }
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
