//! Span prediction heads and training objectives.

use candle_core::{DType, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossWeights, ModelConfig};
use crate::encoding::SequenceEncoder;
use crate::error::{ImgError, Result};
use crate::nn::{join, mask_logits, Linear, ParamStore};

/// Start/end logits `[B, T]`; masked positions hold a large negative constant.
#[derive(Debug, Clone)]
pub struct SpanLogits {
    pub start: Tensor,
    pub end: Tensor,
}

/// Start head: encoder + linear. End head: a second encoder stacked on the
/// start head's hidden sequence + linear.
#[derive(Debug, Clone)]
pub struct SpanPredictor {
    pub start_encoder: SequenceEncoder,
    pub start_out: Linear,
    pub end_encoder: SequenceEncoder,
    pub end_out: Linear,
}

impl SpanPredictor {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let encoder = |store: &mut ParamStore, name: &str| {
            SequenceEncoder::new(
                store,
                &join(prefix, name),
                cfg.d,
                cfg.max_frames,
                cfg.conv_kernel,
                cfg.heads,
                cfg.ffn_mult,
            )
        };
        Ok(Self {
            start_encoder: encoder(store, "start_encoder")?,
            start_out: Linear::new(store, &join(prefix, "start_out"), cfg.d, 1)?,
            end_encoder: encoder(store, "end_encoder")?,
            end_out: Linear::new(store, &join(prefix, "end_out"), cfg.d, 1)?,
        })
    }

    /// `features`: `[B, T, d]`, `mask`: `[B, T]`.
    pub fn forward(&self, features: &Tensor, mask: &Tensor) -> Result<SpanLogits> {
        let hidden_s = self.start_encoder.forward(features, mask)?;
        let hidden_e = self.end_encoder.forward(&hidden_s, mask)?;
        let start = mask_logits(&self.start_out.forward(&hidden_s)?.squeeze(2)?, mask)?;
        let end = mask_logits(&self.end_out.forward(&hidden_e)?.squeeze(2)?, mask)?;
        Ok(SpanLogits { start, end })
    }
}

fn one_hot(indices: &[usize], t: usize, like: &Tensor) -> Result<Tensor> {
    let mut data = vec![0f64; indices.len() * t];
    for (b, &i) in indices.iter().enumerate() {
        data[b * t + i] = 1.0;
    }
    Ok(Tensor::from_vec(data, (indices.len(), t), like.device())?.to_dtype(like.dtype())?)
}

/// Cross-entropy of `logits` (`[B, T]`) against integer targets, per sample (`[B]`).
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (b, t) = logits.dims2()?;
    if targets.len() != b {
        return Err(ImgError::InvalidInput(format!("{} targets for batch of {b}", targets.len())));
    }
    if let Some(&i) = targets.iter().find(|&&i| i >= t) {
        return Err(ImgError::InvalidInput(format!("target index {i} outside [0, {t})")));
    }
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok((logp * one_hot(targets, t, logits)?)?.sum(1)?.neg()?)
}

/// Start plus end cross-entropy. Returns `(batch mean, per-sample [B])`.
pub fn span_retrieval_loss(logits: &SpanLogits, start_idx: &[usize], end_idx: &[usize]) -> Result<(Tensor, Tensor)> {
    if start_idx.len() != end_idx.len() {
        return Err(ImgError::InvalidInput("start/end target counts differ".into()));
    }
    if let Some((s, e)) = start_idx.iter().zip(end_idx).find(|(s, e)| s > e) {
        return Err(ImgError::InvalidInput(format!("target start {s} after end {e}")));
    }
    let per_sample = (cross_entropy(&logits.start, start_idx)? + cross_entropy(&logits.end, end_idx)?)?;
    Ok((per_sample.mean(0)?, per_sample))
}

/// `Σ_i p_i (log p_i − log q_i)` per row for distributions given as logits.
fn kl_rows(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    let log_p = candle_nn::ops::log_softmax(student, D::Minus1)?;
    let log_q = candle_nn::ops::log_softmax(teacher, D::Minus1)?;
    Ok((log_p.exp()? * (log_p - log_q)?)?.sum(D::Minus1)?)
}

/// Temperature-scaled KL(student ‖ teacher) over start and end distributions,
/// summed over the batch. The teacher side carries no gradient.
pub fn kd_loss(student: &SpanLogits, teacher: &SpanLogits, tau: f64) -> Result<Tensor> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(ImgError::Config(format!("distillation temperature must be > 0, got {tau}")));
    }
    let inv = 1.0 / tau;
    let start = kl_rows(&(&student.start * inv)?, &(teacher.start.detach() * inv)?)?;
    let end = kl_rows(&(&student.end * inv)?, &(teacher.end.detach() * inv)?)?;
    Ok(((start + end)?.sum_all()? * (tau * tau))?)
}

/// Scalar frame score for the saliency objective.
#[derive(Debug, Clone)]
pub struct SaliencyHead {
    pub proj: Linear,
}

impl SaliencyHead {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, &join(prefix, "proj"), d, 1)?,
        })
    }

    /// `[B, T, d]` → `[B, T]`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.proj.forward(features)?.squeeze(2)?)
    }
}

/// One in-moment / out-of-moment frame pair of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaliencyPair {
    pub sample: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Draw `pairs` uniform (inside, outside) frame pairs per sample. Samples
/// without both a valid inside and a valid outside frame get none.
pub fn sample_saliency_pairs<R: Rng>(
    spans: &[(usize, usize)],
    frame_mask: &[Vec<bool>],
    pairs: usize,
    rng: &mut R,
) -> Vec<SaliencyPair> {
    let mut out = Vec::new();
    for (b, (&(s, e), keep)) in spans.iter().zip(frame_mask).enumerate() {
        let (inside, outside): (Vec<usize>, Vec<usize>) =
            (0..keep.len()).filter(|&t| keep[t]).partition(|&t| t >= s && t <= e);
        if inside.is_empty() || outside.is_empty() {
            continue;
        }
        for _ in 0..pairs {
            out.push(SaliencyPair {
                sample: b,
                positive: inside[rng.random_range(0..inside.len())],
                negative: outside[rng.random_range(0..outside.len())],
            });
        }
    }
    out
}

/// Mean over the batch of the per-sample average hinge `max(0, margin + s⁻ − s⁺)`.
/// Skipped samples contribute zero.
pub fn saliency_loss(scores: &Tensor, pairs: &[SaliencyPair], pairs_per_sample: usize, margin: f64) -> Result<Tensor> {
    let (b, t) = scores.dims2()?;
    if pairs.is_empty() {
        return Ok(Tensor::zeros((), scores.dtype(), scores.device())?);
    }
    if let Some(p) = pairs.iter().find(|p| p.sample >= b || p.positive >= t || p.negative >= t) {
        return Err(ImgError::InvalidInput(format!("saliency pair {p:?} outside [{b}, {t}]")));
    }
    let flat = scores.flatten_all()?;
    let index = |f: fn(&SaliencyPair) -> usize| -> Result<Tensor> {
        let idx: Vec<u32> = pairs.iter().map(|p| (p.sample * t + f(p)) as u32).collect();
        Ok(flat.index_select(&Tensor::new(idx, scores.device())?, 0)?)
    };
    let pos = index(|p| p.positive)?;
    let neg = index(|p| p.negative)?;
    let hinge = ((neg - pos)? + margin)?.relu()?;
    Ok((hinge.sum_all()? / (b * pairs_per_sample.max(1)) as f64)?)
}

/// Every component of the objective for one batch.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub ret_visual: Tensor,
    pub ret_audio: Tensor,
    pub ret_fusion: Tensor,
    pub importance: Tensor,
    pub kl_visual: Tensor,
    pub kl_audio: Tensor,
    pub saliency: Tensor,
}

/// Scalar values of [`LossTerms`] plus the weighted total, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ret_visual: f64,
    pub ret_audio: f64,
    pub ret_fusion: f64,
    pub importance: f64,
    pub kl_visual: f64,
    pub kl_audio: f64,
    pub saliency: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn ret(&self) -> f64 {
        self.ret_visual + self.ret_audio + self.ret_fusion
    }

    pub fn kl(&self) -> f64 {
        self.kl_visual + self.kl_audio
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl LossTerms {
    fn named(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("ret_visual", &self.ret_visual),
            ("ret_audio", &self.ret_audio),
            ("ret_fusion", &self.ret_fusion),
            ("importance", &self.importance),
            ("kl_visual", &self.kl_visual),
            ("kl_audio", &self.kl_audio),
            ("saliency", &self.saliency),
        ]
    }

    /// `ret + λ₁·importance + λ₂·kl + λ₃·saliency`, with the scalar breakdown.
    /// Any non-finite component is a divergence.
    pub fn total(&self, w: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
        let values = self
            .named()
            .iter()
            .map(|(_, t)| scalar(t))
            .collect::<Result<Vec<_>>>()?;
        let bad: Vec<String> = self
            .named()
            .iter()
            .zip(&values)
            .filter(|(_, v)| !v.is_finite())
            .map(|((name, _), v)| format!("{name}={v}"))
            .collect();
        if !bad.is_empty() {
            return Err(ImgError::Divergence(format!("non-finite loss terms: {}", bad.join(", "))));
        }
        let ret = ((&self.ret_visual + &self.ret_audio)? + &self.ret_fusion)?;
        let kl = (&self.kl_visual + &self.kl_audio)?;
        let total = (((ret + (&self.importance * w.lambda1)?)? + (kl * w.lambda2)?)? + (&self.saliency * w.lambda3)?)?;
        let t = scalar(&total)?;
        if !t.is_finite() {
            return Err(ImgError::Divergence(format!("non-finite total loss {t}")));
        }
        let breakdown = LossBreakdown {
            ret_visual: values[0],
            ret_audio: values[1],
            ret_fusion: values[2],
            importance: values[3],
            kl_visual: values[4],
            kl_audio: values[5],
            saliency: values[6],
            total: t,
        };
        Ok((total, breakdown))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing as r;
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap().unsqueeze(0).unwrap()
    }

    fn logits(s: &[f64], e: &[f64]) -> SpanLogits {
        SpanLogits { start: row(s), end: row(e) }
    }

    fn value(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    fn log_softmax(x: &[f64]) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        x.iter().map(|v| v - lse).collect()
    }

    fn scalar_t(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn uniform_logits_give_two_log_t() {
        let (mean, per) = span_retrieval_loss(&logits(&[0.0; 8], &[0.0; 8]), &[2], &[5]).unwrap();
        assert!((value(&mean) - 2.0 * 8f64.ln()).abs() < 1e-12);
        assert_eq!(per.dims(), &[1]);
    }

    #[test]
    fn saturated_logits_near_zero_loss() {
        let mut s = vec![0.0; 6];
        let mut e = vec![0.0; 6];
        s[1] = 50.0;
        e[4] = 50.0;
        let (mean, _) = span_retrieval_loss(&logits(&s, &e), &[1], &[4]).unwrap();
        assert!(value(&mean) < 1e-6);
    }

    #[test]
    fn retrieval_matches_log_softmax_oracle() {
        let s = [0.3, -1.2, 2.0, 0.7];
        let e = [-0.5, 0.1, 0.9, 1.4];
        let expected = -(log_softmax(&s)[1] + log_softmax(&e)[3]);
        let (mean, _) = span_retrieval_loss(&logits(&s, &e), &[1], &[3]).unwrap();
        assert!((value(&mean) - expected).abs() < 1e-12);
    }

    #[test]
    fn retrieval_rejects_bad_indices() {
        let l = logits(&[0.0; 4], &[0.0; 4]);
        assert!(matches!(span_retrieval_loss(&l, &[4], &[4]), Err(ImgError::InvalidInput(_))));
        assert!(matches!(span_retrieval_loss(&l, &[3], &[1]), Err(ImgError::InvalidInput(_))));
    }

    #[test]
    fn masked_positions_ignored_by_retrieval() {
        let mask = row(&[1.0, 1.0, 0.0, 1.0]);
        let a = mask_logits(&row(&[0.1, 0.2, 9.0, 0.4]), &mask).unwrap();
        let b = mask_logits(&row(&[0.1, 0.2, -3.0, 0.4]), &mask).unwrap();
        let la = span_retrieval_loss(&SpanLogits { start: a.clone(), end: a }, &[0], &[1]).unwrap().0;
        let lb = span_retrieval_loss(&SpanLogits { start: b.clone(), end: b }, &[0], &[1]).unwrap().0;
        assert_eq!(value(&la), value(&lb));
    }

    #[test]
    fn kd_closed_form() {
        let student = logits(&[0.0, 0.0], &[0.0, 0.0]);
        let teacher = logits(&[3f64.ln(), 0.0], &[3f64.ln(), 0.0]);
        let per_head = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        let got = value(&kd_loss(&student, &teacher, 1.0).unwrap());
        assert!((got - 2.0 * per_head).abs() < 1e-12);
        assert!((got - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn kd_zero_for_identical_and_rejects_bad_tau() {
        let l = logits(&[0.3, -1.0, 2.0], &[1.0, 0.0, -0.5]);
        assert!(value(&kd_loss(&l, &l, 2.0).unwrap()).abs() < 1e-15);
        assert!(matches!(kd_loss(&l, &l, 0.0), Err(ImgError::Config(_))));
        assert!(matches!(kd_loss(&l, &l, -1.0), Err(ImgError::Config(_))));
    }

    #[test]
    fn kd_teacher_receives_no_gradient() {
        let teacher_s = Var::from_tensor(&row(&[0.5, -0.2, 1.0])).unwrap();
        let teacher_e = Var::from_tensor(&row(&[0.1, 0.4, -1.0])).unwrap();
        let student_s = Var::from_tensor(&row(&[0.0, 0.3, 0.2])).unwrap();
        let teacher = SpanLogits {
            start: teacher_s.as_tensor().clone(),
            end: teacher_e.as_tensor().clone(),
        };
        let student = SpanLogits {
            start: student_s.as_tensor().clone(),
            end: row(&[0.0, 0.0, 0.0]),
        };
        let grads = kd_loss(&student, &teacher, 2.0).unwrap().backward().unwrap();
        assert!(grads.get(teacher_s.as_tensor()).is_none());
        assert!(grads.get(teacher_e.as_tensor()).is_none());
        assert!(grads.get(student_s.as_tensor()).is_some());
    }

    #[test]
    fn kd_batch_is_summed() {
        let s = SpanLogits {
            start: Tensor::new(&[[0.0, 0.0], [0.0, 0.0]], &Device::Cpu).unwrap(),
            end: Tensor::new(&[[0.0, 0.0], [0.0, 0.0]], &Device::Cpu).unwrap(),
        };
        let l3 = 3f64.ln();
        let t = SpanLogits {
            start: Tensor::new(&[[l3, 0.0], [l3, 0.0]], &Device::Cpu).unwrap(),
            end: Tensor::new(&[[l3, 0.0], [l3, 0.0]], &Device::Cpu).unwrap(),
        };
        let got = value(&kd_loss(&s, &t, 1.0).unwrap());
        assert!((got - 2.0 * 0.2876820724517809).abs() < 1e-12);
    }

    #[test]
    fn saliency_hinge_cases() {
        let pair = [SaliencyPair { sample: 0, positive: 1, negative: 3 }];
        let active = row(&[0.0, 0.5, 0.0, 0.5]);
        assert!((value(&saliency_loss(&active, &pair, 1, 0.2).unwrap()) - 0.2).abs() < 1e-15);
        let inactive = row(&[0.0, 0.9, 0.0, 0.5]);
        assert_eq!(value(&saliency_loss(&inactive, &pair, 1, 0.2).unwrap()), 0.0);
        assert_eq!(value(&saliency_loss(&active, &[], 1, 0.2).unwrap()), 0.0);
    }

    #[test]
    fn full_moment_yields_no_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = sample_saliency_pairs(&[(0, 4)], &[vec![true; 5]], 3, &mut rng);
        assert!(pairs.is_empty());
        // Frames outside the moment but masked do not count either.
        let pairs = sample_saliency_pairs(&[(0, 2)], &[vec![true, true, true, false]], 1, &mut rng);
        assert!(pairs.is_empty());
    }

    #[test]
    fn sampled_pairs_respect_moment_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let keep = vec![true, true, true, true, true, false, true, true];
        let pairs = sample_saliency_pairs(&[(2, 4), (0, 0)], &[keep.clone(), keep.clone()], 20, &mut rng);
        assert_eq!(pairs.len(), 40);
        for p in pairs {
            let (s, e) = if p.sample == 0 { (2, 4) } else { (0, 0) };
            assert!(p.positive >= s && p.positive <= e && keep[p.positive]);
            assert!((p.negative < s || p.negative > e) && keep[p.negative]);
        }
    }

    fn terms(v: [f64; 7]) -> LossTerms {
        LossTerms {
            ret_visual: scalar_t(v[0]),
            ret_audio: scalar_t(v[1]),
            ret_fusion: scalar_t(v[2]),
            importance: scalar_t(v[3]),
            kl_visual: scalar_t(v[4]),
            kl_audio: scalar_t(v[5]),
            saliency: scalar_t(v[6]),
        }
    }

    #[test]
    fn total_weighting() {
        let w = LossWeights::default();
        let (t, b) = terms([1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0]).total(&w).unwrap();
        assert_eq!(value(&t), 16.5);
        assert_eq!(b.total, 16.5);
        assert_eq!(terms([0.0; 7]).total(&w).unwrap().1.total, 0.0);
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..w
        };
        let b = terms([0.3, 0.4, 0.5, 7.0, 8.0, 9.0, 1.0]).total(&zero).unwrap().1;
        assert!((b.total - 1.2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_term_is_divergence() {
        let err = terms([1.0, f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).total(&LossWeights::default()).unwrap_err();
        assert!(matches!(&err, ImgError::Divergence(m) if m.contains("ret_audio")), "{err}");
    }

    #[test]
    fn span_predictor_matches_layerwise_oracle() {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            max_frames: 6,
            precision: crate::Precision::F64,
            ..ModelConfig::synthetic()
        };
        let mut s = ParamStore::new(17, DType::F64);
        let head = SpanPredictor::new(&mut s, "head", &cfg).unwrap();
        let mut ps = ParamStore::new(2, DType::F64);
        let x = ps.uniform("x", &[1, 5, 8], 1.0).unwrap();
        let keep = [true, true, true, true, false];
        let mask = row(&[1.0, 1.0, 1.0, 1.0, 0.0]);
        let out = head.forward(&x, &mask).unwrap();

        let hs = head.start_encoder.forward(&x, &mask).unwrap();
        let he = head.end_encoder.forward(&hs, &mask).unwrap();
        let hs: r::Mat = hs.squeeze(0).unwrap().to_vec2().unwrap();
        let he: r::Mat = he.squeeze(0).unwrap().to_vec2().unwrap();
        let start: Vec<f64> = r::linear(&s, "head.start_out", &hs).iter().map(|v| v[0]).collect();
        let end: Vec<f64> = r::linear(&s, "head.end_out", &he).iter().map(|v| v[0]).collect();
        let got_s: Vec<f64> = out.start.squeeze(0).unwrap().to_vec1().unwrap();
        let got_e: Vec<f64> = out.end.squeeze(0).unwrap().to_vec1().unwrap();
        for t in 0..5 {
            if keep[t] {
                assert!((got_s[t] - start[t]).abs() < 1e-12);
                assert!((got_e[t] - end[t]).abs() < 1e-12);
            } else {
                assert!(got_s[t] < -1e29 && got_e[t] < -1e29);
            }
        }
    }

    #[test]
    fn single_frame_softmax_is_one() {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            precision: crate::Precision::F64,
            ..ModelConfig::synthetic()
        };
        let mut s = ParamStore::new(1, DType::F64);
        let head = SpanPredictor::new(&mut s, "head", &cfg).unwrap();
        let x = s.uniform("x", &[1, 1, 8], 1.0).unwrap();
        let out = head.forward(&x, &row(&[1.0])).unwrap();
        for l in [out.start, out.end] {
            let p: Vec<f64> = candle_nn::ops::softmax(&l, 1).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
            assert_eq!(p, vec![1.0]);
        }
    }

    proptest! {
        #[test]
        fn kd_shift_invariant_and_nonnegative(
            s in proptest::collection::vec(-5.0f64..5.0, 6),
            t in proptest::collection::vec(-5.0f64..5.0, 6),
            c in -10.0f64..10.0,
            tau in 0.5f64..4.0,
        ) {
            let student = logits(&s, &s);
            let teacher = logits(&t, &t);
            let base = value(&kd_loss(&student, &teacher, tau).unwrap());
            prop_assert!(base >= -1e-12);
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let moved = value(&kd_loss(&logits(&shifted, &shifted), &teacher, tau).unwrap());
            prop_assert!((base - moved).abs() < 1e-9);
            let shifted_t: Vec<f64> = t.iter().map(|v| v - c).collect();
            let moved = value(&kd_loss(&student, &logits(&shifted_t, &shifted_t), tau).unwrap());
            prop_assert!((base - moved).abs() < 1e-9);
        }

        #[test]
        fn retrieval_decreases_with_target_logit(
            s in proptest::collection::vec(-5.0f64..5.0, 8),
            target in 0usize..8,
            bump in 0.01f64..3.0,
        ) {
            let before = value(&span_retrieval_loss(&logits(&s, &s), &[target], &[target]).unwrap().0);
            let mut up = s.clone();
            up[target] += bump;
            let after = value(&span_retrieval_loss(&logits(&up, &s), &[target], &[target]).unwrap().0);
            prop_assert!(after < before);
        }
    }
}
