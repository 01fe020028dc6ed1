//! The full three-branch model and its training objective.

use candle_core::{Tensor, Var};

use crate::config::{Branch, ModelConfig};
use crate::data::Batch;
use crate::encoding::{project, ContextQueryAttention, SequenceEncoder};
use crate::error::{ImgError, Result};
use crate::fusion::{GranularityFeatures, MultiGranularityFusion};
use crate::heads::{
    kd_loss, saliency_loss, span_retrieval_loss, LossBreakdown, LossTerms, SaliencyHead, SaliencyPair, SpanLogits,
    SpanPredictor,
};
use crate::importance::{importance_bce_loss, ImportancePredictor, ImportanceRecord};
use crate::nn::{mask_rows, Linear, ParamStore};

/// Encoder stack for one modality: projection, sequence encoder, and
/// context-query attention against its own text encoder.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub proj: Linear,
    pub encoder: SequenceEncoder,
    pub query_proj: Linear,
    pub query_encoder: SequenceEncoder,
    pub cqa: ContextQueryAttention,
}

impl ModalityEncoder {
    fn new(store: &mut ParamStore, prefix: &str, d_in: usize, cfg: &ModelConfig) -> Result<Self> {
        let p = |n: &str| format!("{prefix}.{n}");
        let enc = |store: &mut ParamStore, name: &str, max_len: usize| {
            SequenceEncoder::new(store, &p(name), cfg.d, max_len, cfg.conv_kernel, cfg.heads, cfg.ffn_mult)
        };
        Ok(Self {
            proj: Linear::new(store, &p("proj"), d_in, cfg.d)?,
            encoder: enc(store, "encoder", cfg.max_frames)?,
            query_proj: Linear::new(store, &p("query_proj"), cfg.d_q, cfg.d)?,
            query_encoder: enc(store, "query_encoder", cfg.max_tokens)?,
            cqa: ContextQueryAttention::new(store, &p("cqa"), cfg.d)?,
        })
    }

    /// Text-activated features `[B, T, d]` from frame features and query
    /// token embeddings `[B, N, d_q]`.
    pub fn forward(&self, features: &Tensor, query: &Tensor, batch: &Batch) -> Result<Tensor> {
        let x = self.encoder.forward(&project(features, &self.proj)?, &batch.frame_mask)?;
        let q = self
            .query_encoder
            .forward(&project(query, &self.query_proj)?, &batch.token_mask)?;
        self.cqa.forward(&x, &q, &batch.frame_mask, &batch.token_mask)
    }
}

/// How the audio weight inside fusion is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionWeight {
    /// `(1 − α)·0.5 + α·p` with the predictor's (detached) score `p`.
    Curriculum { alpha: f64 },
    /// The same constant for every sample.
    Fixed(f64),
    /// One value per sample.
    PerSample(Vec<f64>),
}

impl FusionWeight {
    pub const PREDICTED: FusionWeight = FusionWeight::Curriculum { alpha: 1.0 };
}

/// Everything one full forward pass produces.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub visual: SpanLogits,
    pub audio: SpanLogits,
    pub fusion: SpanLogits,
    /// Predicted audio importance `[B]`, differentiable.
    pub p: Tensor,
    /// Weight actually used inside fusion `[B]`, constant.
    pub p_eff: Tensor,
    pub v_hat: Tensor,
    pub a_hat: Tensor,
    pub granularity: GranularityFeatures,
}

#[derive(Debug)]
pub struct ImgModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    /// Zero-initialised `[vocab, d_q]` offsets added to the ingested token
    /// embeddings, present only when embeddings are tuned.
    pub query_delta: Option<Tensor>,
    pub visual: ModalityEncoder,
    pub audio: ModalityEncoder,
    pub importance: ImportancePredictor,
    pub fusion: MultiGranularityFusion,
    pub head_visual: SpanPredictor,
    pub head_audio: SpanPredictor,
    pub head_fusion: SpanPredictor,
    pub saliency_visual: SaliencyHead,
    pub saliency_audio: SaliencyHead,
    pub saliency_fusion: SaliencyHead,
}

impl ImgModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed, cfg.dtype());
        let s = &mut store;
        let query_delta = if cfg.tune_query_embeddings {
            Some(s.constant("query_delta", &[cfg.vocab_size, cfg.d_q], 0.0)?)
        } else {
            None
        };
        let visual = ModalityEncoder::new(s, "visual", cfg.d_v, cfg)?;
        let audio = ModalityEncoder::new(s, "audio", cfg.d_a, cfg)?;
        let importance = ImportancePredictor::new(s, "importance", cfg.d)?;
        let fusion = MultiGranularityFusion::new(s, "fusion", cfg)?;
        let head_visual = SpanPredictor::new(s, "head_visual", cfg)?;
        let head_audio = SpanPredictor::new(s, "head_audio", cfg)?;
        let head_fusion = SpanPredictor::new(s, "head_fusion", cfg)?;
        let saliency_visual = SaliencyHead::new(s, "saliency_visual", cfg.d)?;
        let saliency_audio = SaliencyHead::new(s, "saliency_audio", cfg.d)?;
        let saliency_fusion = SaliencyHead::new(s, "saliency_fusion", cfg.d)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            query_delta,
            visual,
            audio,
            importance,
            fusion,
            head_visual,
            head_audio,
            head_fusion,
            saliency_visual,
            saliency_audio,
            saliency_fusion,
        })
    }

    pub fn vars(&self) -> Vec<(&String, &Var)> {
        self.store.iter().collect()
    }

    fn audio_features(batch: &Batch) -> Result<&Tensor> {
        batch
            .audio
            .as_ref()
            .ok_or_else(|| ImgError::InvalidInput("this branch needs audio features, but the batch has none".into()))
    }

    fn check_lengths(&self, batch: &Batch) -> Result<()> {
        let t = batch.visual.dim(1)?;
        let n = batch.query.dim(1)?;
        if t > self.cfg.max_frames || n > self.cfg.max_tokens {
            return Err(ImgError::InvalidInput(format!(
                "batch of {t} frames / {n} tokens exceeds limits {} / {}",
                self.cfg.max_frames, self.cfg.max_tokens
            )));
        }
        Ok(())
    }

    /// Query token embeddings, with the learned offsets when tuning is on.
    fn query(&self, batch: &Batch) -> Result<Tensor> {
        let Some(delta) = &self.query_delta else {
            return Ok(batch.query.clone());
        };
        let (b, n) = batch.token_ids.dims2()?;
        let ids = batch.token_ids.flatten_all()?;
        let max = ids.max(0)?.to_scalar::<u32>()? as usize;
        if max >= self.cfg.vocab_size {
            return Err(ImgError::InvalidInput(format!(
                "token id {max} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let offsets = delta.index_select(&ids, 0)?.reshape((b, n, self.cfg.d_q))?;
        Ok((&batch.query + mask_rows(&offsets, &batch.token_mask)?)?)
    }

    fn fusion_weight(&self, p: &Tensor, weight: &FusionWeight) -> Result<Tensor> {
        let b = p.dim(0)?;
        Ok(match weight {
            FusionWeight::Curriculum { alpha } => p.detach().affine(*alpha, (1.0 - alpha) * 0.5)?,
            FusionWeight::Fixed(v) => Tensor::full(*v, b, p.device())?.to_dtype(p.dtype())?,
            FusionWeight::PerSample(v) => {
                if v.len() != b {
                    return Err(ImgError::InvalidInput(format!("{} fusion weights for batch of {b}", v.len())));
                }
                Tensor::new(v.as_slice(), p.device())?.to_dtype(p.dtype())?
            }
        })
    }

    /// All three branches, the importance score and the fused features.
    pub fn forward(&self, batch: &Batch, weight: &FusionWeight) -> Result<ModelOutput> {
        self.check_lengths(batch)?;
        let query = self.query(batch)?;
        let v_hat = self.visual.forward(&batch.visual, &query, batch)?;
        let a_hat = self.audio.forward(Self::audio_features(batch)?, &query, batch)?;
        let p = self.importance.forward(&v_hat, &a_hat, &batch.frame_mask)?;
        let p_eff = self.fusion_weight(&p, weight)?;
        let granularity = self.fusion.forward(&v_hat, &a_hat, &p_eff, &batch.frame_mask)?;
        Ok(ModelOutput {
            visual: self.head_visual.forward(&v_hat, &batch.frame_mask)?,
            audio: self.head_audio.forward(&a_hat, &batch.frame_mask)?,
            fusion: self.head_fusion.forward(&granularity.fused, &batch.frame_mask)?,
            p,
            p_eff,
            v_hat,
            a_hat,
            granularity,
        })
    }

    /// Logits of one branch. The visual branch never touches audio features.
    pub fn branch_logits(&self, batch: &Batch, branch: Branch, weight: &FusionWeight) -> Result<SpanLogits> {
        self.check_lengths(batch)?;
        match branch {
            Branch::Visual => {
                let v_hat = self.visual.forward(&batch.visual, &self.query(batch)?, batch)?;
                self.head_visual.forward(&v_hat, &batch.frame_mask)
            }
            Branch::Audio => {
                let a_hat = self.audio.forward(Self::audio_features(batch)?, &self.query(batch)?, batch)?;
                self.head_audio.forward(&a_hat, &batch.frame_mask)
            }
            Branch::Fusion => Ok(self.forward(batch, weight)?.fusion),
        }
    }

    /// Predicted importance `[B]` without running the heads.
    pub fn importance_scores(&self, batch: &Batch) -> Result<Tensor> {
        self.check_lengths(batch)?;
        let query = self.query(batch)?;
        let v_hat = self.visual.forward(&batch.visual, &query, batch)?;
        let a_hat = self.audio.forward(Self::audio_features(batch)?, &query, batch)?;
        self.importance.forward(&v_hat, &a_hat, &batch.frame_mask)
    }
}

/// Values the objective treats as constants. Anything left `None` is derived
/// from the forward pass (and detached).
#[derive(Debug, Clone, Default)]
pub struct ObjectiveInputs {
    /// Pseudo labels per sample.
    pub labels: Option<Vec<f64>>,
    /// Distillation teacher logits.
    pub teacher: Option<SpanLogits>,
    /// Saliency pairs for the visual, audio and fused streams.
    pub pairs: [Vec<SaliencyPair>; 3],
}

/// The objective of one batch, ready for backpropagation.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Tensor,
    pub terms: LossTerms,
    pub breakdown: LossBreakdown,
    pub records: Vec<ImportanceRecord>,
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}

/// Compute every loss term for `out` at curriculum `epoch`.
pub fn objective(model: &ImgModel, batch: &Batch, out: &ModelOutput, epoch: usize, inputs: &ObjectiveInputs) -> Result<Objective> {
    let cfg = &model.cfg;
    let (ret_visual, per_v) = span_retrieval_loss(&out.visual, &batch.start_idx, &batch.end_idx)?;
    let (ret_audio, per_a) = span_retrieval_loss(&out.audio, &batch.start_idx, &batch.end_idx)?;
    let (ret_fusion, _) = span_retrieval_loss(&out.fusion, &batch.start_idx, &batch.end_idx)?;

    let p = to_f64_vec(&out.p)?;
    let p_eff = to_f64_vec(&out.p_eff)?;
    let lv = to_f64_vec(&per_v)?;
    let la = to_f64_vec(&per_a)?;
    if let Some(i) = (0..lv.len()).find(|&i| !(lv[i].is_finite() && la[i].is_finite() && p[i].is_finite())) {
        return Err(ImgError::Divergence(format!(
            "sample {i} of the batch: visual loss {}, audio loss {}, importance {}",
            lv[i], la[i], p[i]
        )));
    }
    let mut records = p
        .iter()
        .zip(&lv)
        .zip(&la)
        .map(|((&p, &v), &a)| ImportanceRecord::new(p, v, a, epoch, &cfg.importance))
        .collect::<Result<Vec<_>>>()?;
    for (r, &pe) in records.iter_mut().zip(&p_eff) {
        r.p_eff = pe;
    }
    let labels = match &inputs.labels {
        Some(l) => l.clone(),
        None => records.iter().map(|r| r.y_label).collect(),
    };
    let importance = importance_bce_loss(&out.p, &labels)?;

    let zero = Tensor::zeros((), out.p.dtype(), out.p.device())?;
    let (kl_visual, kl_audio) = if cfg.loss.distill {
        let teacher = inputs.teacher.as_ref().unwrap_or(&out.fusion);
        (kd_loss(&out.visual, teacher, cfg.loss.tau)?, kd_loss(&out.audio, teacher, cfg.loss.tau)?)
    } else {
        (zero.clone(), zero.clone())
    };

    let k = cfg.loss.saliency_pairs;
    let m = cfg.loss.saliency_margin;
    let sal_v = saliency_loss(&model.saliency_visual.forward(&out.v_hat)?, &inputs.pairs[0], k, m)?;
    let sal_a = saliency_loss(&model.saliency_audio.forward(&out.a_hat)?, &inputs.pairs[1], k, m)?;
    let sal_f = saliency_loss(&model.saliency_fusion.forward(&out.granularity.fused)?, &inputs.pairs[2], k, m)?;
    let saliency = ((sal_v + sal_a)? + sal_f)?;

    let terms = LossTerms {
        ret_visual,
        ret_audio,
        ret_fusion,
        importance,
        kl_visual,
        kl_audio,
        saliency,
    };
    let (total, breakdown) = terms.total(&cfg.loss)?;
    Ok(Objective {
        total,
        terms,
        breakdown,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureBundle;
    use crate::synth::{generate_synthetic_dataset, SyntheticSpec};
    use crate::Precision;

    fn tiny() -> (ModelConfig, Vec<FeatureBundle>) {
        let cfg = ModelConfig {
            d: 8,
            d_v: 6,
            d_a: 5,
            d_q: 4,
            heads: 2,
            max_frames: 8,
            max_tokens: 4,
            kernel_bank: vec![1, 3],
            precision: Precision::F64,
            ..ModelConfig::synthetic()
        };
        let spec = SyntheticSpec {
            n_samples: 4,
            frames: 8,
            d_v: 6,
            d_a: 5,
            d_q: 4,
            ..SyntheticSpec::default()
        };
        (cfg, generate_synthetic_dataset(&spec).unwrap().dataset.samples)
    }

    #[test]
    fn shapes_and_masks() {
        let (cfg, samples) = tiny();
        let model = ImgModel::new(&cfg).unwrap();
        let mut short = samples[1].clone();
        short.visual = short.visual.slice(ndarray::s![..6, ..]).to_owned();
        short.audio = short.audio.map(|a| a.slice(ndarray::s![..6, ..]).to_owned());
        short.annotation = crate::data::MomentAnnotation::from_seconds(0.0, 2.0, 5.0, 6).unwrap();
        let batch = Batch::new(&[&samples[0], &short], cfg.dtype(), true).unwrap();
        let out = model.forward(&batch, &FusionWeight::PREDICTED).unwrap();
        assert_eq!(out.fusion.start.dims(), &[2, 8]);
        let fs: Vec<Vec<f64>> = out.fusion.end.to_vec2().unwrap();
        assert!(fs[1][6] < -1e29 && fs[1][7] < -1e29 && fs[1][5] > -1e29);
        let p = to_f64_vec(&out.p).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(to_f64_vec(&out.p_eff).unwrap(), p);
    }

    #[test]
    fn curriculum_weight_starts_neutral() {
        let (cfg, samples) = tiny();
        let model = ImgModel::new(&cfg).unwrap();
        let batch = Batch::new(&[&samples[0]], cfg.dtype(), true).unwrap();
        let out = model.forward(&batch, &FusionWeight::Curriculum { alpha: 0.0 }).unwrap();
        assert_eq!(to_f64_vec(&out.p_eff).unwrap(), vec![0.5]);
    }

    #[test]
    fn visual_branch_needs_no_audio() {
        let (cfg, samples) = tiny();
        let model = ImgModel::new(&cfg).unwrap();
        let with = Batch::new(&[&samples[0]], cfg.dtype(), true).unwrap();
        let without = Batch::new(&[&samples[0]], cfg.dtype(), false).unwrap();
        let a = model.branch_logits(&with, Branch::Visual, &FusionWeight::PREDICTED).unwrap();
        let b = model.branch_logits(&without, Branch::Visual, &FusionWeight::PREDICTED).unwrap();
        assert_eq!(to_f64_vec(&a.start.squeeze(0).unwrap()).unwrap(), to_f64_vec(&b.start.squeeze(0).unwrap()).unwrap());
        let full = model.forward(&with, &FusionWeight::PREDICTED).unwrap();
        assert_eq!(
            to_f64_vec(&full.visual.end.squeeze(0).unwrap()).unwrap(),
            to_f64_vec(&b.end.squeeze(0).unwrap()).unwrap()
        );
        for branch in [Branch::Audio, Branch::Fusion] {
            assert!(matches!(
                model.branch_logits(&without, branch, &FusionWeight::PREDICTED),
                Err(ImgError::InvalidInput(_))
            ));
        }
    }

    #[test]
    fn importance_predictor_gets_gradient_only_from_its_loss() {
        let (mut cfg, samples) = tiny();
        cfg.loss.lambda1 = 0.0;
        let model = ImgModel::new(&cfg).unwrap();
        let refs: Vec<&FeatureBundle> = samples.iter().collect();
        let batch = Batch::new(&refs, cfg.dtype(), true).unwrap();
        let out = model.forward(&batch, &FusionWeight::PREDICTED).unwrap();
        let obj = objective(&model, &batch, &out, 0, &ObjectiveInputs::default()).unwrap();
        let grads = obj.total.backward().unwrap();
        for (name, var) in model.store.iter() {
            if name.starts_with("importance.") {
                let g = grads.get(var.as_tensor()).map(|g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap());
                assert!(g.unwrap_or(0.0) == 0.0, "{name} got gradient {g:?}");
            }
        }
    }

    #[test]
    fn distillation_does_not_reach_fusion_parameters() {
        let (cfg, samples) = tiny();
        let model = ImgModel::new(&cfg).unwrap();
        let refs: Vec<&FeatureBundle> = samples.iter().collect();
        let batch = Batch::new(&refs, cfg.dtype(), true).unwrap();
        let out = model.forward(&batch, &FusionWeight::PREDICTED).unwrap();
        let obj = objective(&model, &batch, &out, 0, &ObjectiveInputs::default()).unwrap();
        let kl = (&obj.terms.kl_visual + &obj.terms.kl_audio).unwrap();
        let grads = kl.backward().unwrap();
        for (name, var) in model.store.iter() {
            if name.starts_with("fusion.") || name.starts_with("head_fusion.") {
                let g = grads.get(var.as_tensor()).map(|g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap());
                assert!(g.unwrap_or(0.0) == 0.0, "{name} got gradient {g:?}");
            }
        }
    }

    #[test]
    fn records_follow_branch_losses() {
        let (cfg, samples) = tiny();
        let model = ImgModel::new(&cfg).unwrap();
        let batch = Batch::new(&[&samples[0], &samples[1]], cfg.dtype(), true).unwrap();
        let out = model.forward(&batch, &FusionWeight::Fixed(0.3)).unwrap();
        let obj = objective(&model, &batch, &out, 3, &ObjectiveInputs::default()).unwrap();
        for r in &obj.records {
            assert_eq!(r.p_eff, 0.3);
            let y = crate::importance::pseudo_importance_label(r.loss_v, r.loss_a, &cfg.importance).unwrap();
            assert_eq!(r.y_label, y);
        }
        let b = obj.breakdown;
        let expected = b.ret() + 5.0 * b.importance + 10.0 * b.kl() + 0.5 * b.saliency;
        assert!((b.total - expected).abs() < 1e-9);
    }
}
