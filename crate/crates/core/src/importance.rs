//! Audio importance predictor (AIP), loss-aware pseudo labels and the
//! curriculum that blends the prediction in.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::ImportanceConfig;
use crate::encoding::AttentionPool;
use crate::error::{ImgError, Result};
use crate::nn::{join, Mlp, ParamStore};

/// Clamp applied to predicted scores inside the BCE.
pub const BCE_CLAMP: f64 = 1e-7;

/// Upper edges of the importance histogram buckets; the last bucket is open.
pub const HISTOGRAM_EDGES: [f64; 4] = [0.15, 0.25, 0.35, 0.45];

/// Per-sample importance bookkeeping for one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub p: f64,
    pub y_raw: f64,
    pub y_label: f64,
    pub p_eff: f64,
    pub loss_v: f64,
    pub loss_a: f64,
}

impl ImportanceRecord {
    pub fn new(p: f64, loss_v: f64, loss_a: f64, epoch: usize, cfg: &ImportanceConfig) -> Result<Self> {
        let y_raw = raw_importance(loss_v, loss_a, cfg.gamma)?;
        Ok(Self {
            p,
            y_raw,
            y_label: threshold_label(y_raw, cfg),
            p_eff: effective_weight(p, epoch, cfg),
            loss_v,
            loss_a,
        })
    }
}

/// `e^{Lv/γ} / (e^{La/γ} + e^{Lv/γ})`, evaluated as `σ((Lv − La)/γ)`.
///
/// Negative arguments go through `1 − σ(−x)`: that subtraction is exact for
/// `σ(−x) ∈ [½, 1]`, so swapping the two losses yields exactly `1 − y`.
pub fn raw_importance(loss_v: f64, loss_a: f64, gamma: f64) -> Result<f64> {
    if !loss_v.is_finite() || !loss_a.is_finite() {
        return Err(ImgError::InvalidInput(format!(
            "branch losses must be finite, got visual={loss_v} audio={loss_a}"
        )));
    }
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let x = (loss_v - loss_a) / gamma;
    Ok(if x >= 0.0 { sigmoid(x) } else { 1.0 - sigmoid(-x) })
}

/// Snap to 1 at or above `eps_max`, to 0 below `eps_min`.
pub fn threshold_label(y: f64, cfg: &ImportanceConfig) -> f64 {
    if y >= cfg.eps_max {
        1.0
    } else if y < cfg.eps_min {
        0.0
    } else {
        y
    }
}

/// Pseudo importance label from detached per-sample branch losses.
///
/// A lower audio-branch loss than visual-branch loss pushes the label towards 1.
pub fn pseudo_importance_label(loss_v: f64, loss_a: f64, cfg: &ImportanceConfig) -> Result<f64> {
    Ok(threshold_label(raw_importance(loss_v, loss_a, cfg.gamma)?, cfg))
}

/// Mean binary cross-entropy between predicted scores `p` (`[B]`) and labels.
pub fn importance_bce_loss(p: &Tensor, labels: &[f64]) -> Result<Tensor> {
    let b = p.dim(0)?;
    if b == 0 || labels.is_empty() {
        return Err(ImgError::InvalidInput("importance loss needs a non-empty batch".into()));
    }
    if labels.len() != b {
        return Err(ImgError::InvalidInput(format!(
            "{} labels for {b} predictions",
            labels.len()
        )));
    }
    if let Some(y) = labels.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(ImgError::InvalidInput(format!("label {y} outside [0, 1]")));
    }
    let y = Tensor::new(labels, p.device())?.to_dtype(p.dtype())?;
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = (&y * p.log()?)?;
    let neg = (y.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Curriculum ramp `α = min(1, epoch / warmup)`.
pub fn curriculum_alpha(epoch: usize, cfg: &ImportanceConfig) -> f64 {
    (epoch as f64 / cfg.warmup_epochs as f64).min(1.0)
}

/// `(1 − α)·0.5 + α·p`.
pub fn effective_weight(p: f64, epoch: usize, cfg: &ImportanceConfig) -> f64 {
    let alpha = curriculum_alpha(epoch, cfg);
    (1.0 - alpha) * 0.5 + alpha * p
}

/// `p = σ(MLP([pool(Â); pool(V̂)]))`.
#[derive(Debug, Clone)]
pub struct ImportancePredictor {
    pub pool_v: AttentionPool,
    pub pool_a: AttentionPool,
    pub mlp: Mlp,
}

impl ImportancePredictor {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            pool_v: AttentionPool::new(store, &join(prefix, "pool_v"), d)?,
            pool_a: AttentionPool::new(store, &join(prefix, "pool_a"), d)?,
            mlp: Mlp::new(store, &join(prefix, "mlp"), 2 * d, d, 1)?,
        })
    }

    /// Scores `[B]` from pooled global vectors `[B, d]`.
    pub fn predict(&self, v_global: &Tensor, a_global: &Tensor) -> Result<Tensor> {
        let x = Tensor::cat(&[a_global, v_global], D::Minus1)?;
        let logit = self.mlp.forward(&x)?.squeeze(D::Minus1)?;
        Ok(candle_nn::ops::sigmoid(&logit)?)
    }

    pub fn forward(&self, v_hat: &Tensor, a_hat: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let v = self.pool_v.forward(v_hat, mask)?;
        let a = self.pool_a.forward(a_hat, mask)?;
        self.predict(&v, &a)
    }
}

/// Summary of predicted scores over an epoch or an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Counts for `<0.15, 0.15–0.25, 0.25–0.35, 0.35–0.45, >0.45`.
    pub histogram: [usize; 5],
}

impl ImportanceStats {
    pub fn from_scores(scores: &[f64]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        let mut histogram = [0usize; 5];
        for &p in scores {
            let bucket = HISTOGRAM_EDGES.iter().position(|&e| p < e).unwrap_or(4);
            histogram[bucket] += 1;
        }
        Some(Self {
            count: scores.len(),
            mean: scores.iter().sum::<f64>() / scores.len() as f64,
            min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            histogram,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn cfg() -> ImportanceConfig {
        ImportanceConfig {
            gamma: 3.0,
            eps_min: 0.2,
            eps_max: 0.8,
            warmup_epochs: 30,
        }
    }

    fn p_tensor(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn equal_losses_give_half() {
        for l in [0.0, 1.5, 40.0] {
            assert_eq!(pseudo_importance_label(l, l, &cfg()).unwrap(), 0.5);
        }
    }

    #[test]
    fn label_between_thresholds() {
        let y = pseudo_importance_label(6.0, 3.0, &cfg()).unwrap();
        assert!((y - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn label_below_lower_threshold() {
        assert!((raw_importance(0.0, 6.0, 3.0).unwrap() - 0.119_202_922_022_117_57).abs() < 1e-15);
        assert_eq!(pseudo_importance_label(0.0, 6.0, &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn label_above_upper_threshold() {
        assert!((raw_importance(12.0, 0.0, 3.0).unwrap() - 0.982_013_790_037_908_5).abs() < 1e-15);
        assert_eq!(pseudo_importance_label(12.0, 0.0, &cfg()).unwrap(), 1.0);
    }

    #[test]
    fn non_finite_loss_rejected() {
        assert!(matches!(
            pseudo_importance_label(f64::NAN, 1.0, &cfg()),
            Err(ImgError::InvalidInput(_))
        ));
        assert!(pseudo_importance_label(1.0, f64::INFINITY, &cfg()).is_err());
    }

    #[test]
    fn bce_uninformative_point() {
        let l = importance_bce_loss(&p_tensor(&[0.5, 0.5, 0.5]), &[0.5, 0.5, 0.5]).unwrap();
        assert!((scalar(&l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_single_confident_sample() {
        let l = importance_bce_loss(&p_tensor(&[0.9]), &[1.0]).unwrap();
        assert!((scalar(&l) - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_near_zero() {
        let l = importance_bce_loss(&p_tensor(&[0.0, 1.0]), &[0.0, 1.0]).unwrap();
        assert!(scalar(&l) < 1e-6);
        assert!(scalar(&l) >= 0.0);
    }

    #[test]
    fn bce_empty_batch_rejected() {
        let p = Tensor::zeros(0, DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(importance_bce_loss(&p, &[]), Err(ImgError::InvalidInput(_))));
    }

    #[test]
    fn curriculum_endpoints() {
        let c = cfg();
        assert_eq!(effective_weight(0.93, 0, &c), 0.5);
        assert_eq!(effective_weight(0.93, 30, &c), 0.93);
        assert_eq!(effective_weight(0.93, 75, &c), 0.93);
        assert!((effective_weight(0.9, 15, &c) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn predictor_zero_head_gives_half() {
        let mut s = ParamStore::new(3, DType::F64);
        let aip = ImportancePredictor::new(&mut s, "aip", 4).unwrap();
        s.set("aip.mlp.fc2.weight", &Tensor::zeros((4, 1), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let v = Tensor::new(&[[1.0f64, -2.0, 0.3, 4.0]], &Device::Cpu).unwrap();
        let a = Tensor::new(&[[0.2f64, 0.1, -7.0, 1.0]], &Device::Cpu).unwrap();
        assert_eq!(aip.predict(&v, &a).unwrap().to_vec1::<f64>().unwrap(), vec![0.5]);
    }

    #[test]
    fn predictor_saturates() {
        let mut s = ParamStore::new(3, DType::F64);
        let aip = ImportancePredictor::new(&mut s, "aip", 4).unwrap();
        s.set("aip.mlp.fc2.weight", &Tensor::zeros((4, 1), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        s.set("aip.mlp.fc2.bias", &Tensor::new(&[50.0f64], &Device::Cpu).unwrap()).unwrap();
        let v = Tensor::new(&[[1.0f64, -2.0, 0.3, 4.0]], &Device::Cpu).unwrap();
        let p = aip.predict(&v, &v).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!(p > 1.0 - 1e-6 && p <= 1.0);
    }

    #[test]
    fn predictor_matches_oracle() {
        use crate::testing as r;
        let mut s = ParamStore::new(13, DType::F64);
        let aip = ImportancePredictor::new(&mut s, "aip", 4).unwrap();
        s.set("aip.mlp.fc1.bias", &Tensor::new(&[0.1f64, -0.3, 0.2, 0.05], &Device::Cpu).unwrap())
            .unwrap();
        s.set("aip.mlp.fc2.bias", &Tensor::new(&[-0.4f64], &Device::Cpu).unwrap()).unwrap();
        let v = vec![0.3, -1.2, 0.8, 0.05];
        let a = vec![-0.6, 0.4, 1.1, -0.9];
        let x: Vec<f64> = a.iter().chain(&v).copied().collect();
        let logit = r::mlp(&s, "aip.mlp", &vec![x])[0][0];
        let expected = 1.0 / (1.0 + (-logit).exp());
        let got = aip
            .predict(&Tensor::new(vec![v], &Device::Cpu).unwrap(), &Tensor::new(vec![a], &Device::Cpu).unwrap())
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()[0];
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn stats_buckets() {
        let s = ImportanceStats::from_scores(&[0.1, 0.2, 0.3, 0.3, 0.4, 0.9, 0.45]).unwrap();
        assert_eq!(s.histogram, [1, 1, 2, 1, 2]);
        assert_eq!(s.count, 7);
        assert_eq!(s.max, 0.9);
        assert!(ImportanceStats::from_scores(&[]).is_none());
    }

    proptest! {
        #[test]
        fn complementary_with_symmetric_thresholds(a in 0.0f64..50.0, b in 0.0f64..50.0, eps in 0.05f64..0.45) {
            let c = ImportanceConfig { gamma: 3.0, eps_min: eps, eps_max: 1.0 - eps, warmup_epochs: 1 };
            let s = pseudo_importance_label(a, b, &c).unwrap() + pseudo_importance_label(b, a, &c).unwrap();
            prop_assert_eq!(s, 1.0);
        }

        #[test]
        fn swapping_losses_complements_exactly(a in -60.0f64..60.0, b in -60.0f64..60.0, g in 0.5f64..6.0) {
            prop_assert_eq!(raw_importance(a, b, g).unwrap() + raw_importance(b, a, g).unwrap(), 1.0);
        }

        #[test]
        fn monotone_in_each_loss(a in 0.0f64..30.0, b in 0.0f64..30.0, da in 0.0f64..5.0) {
            let c = cfg();
            let base = pseudo_importance_label(a, b, &c).unwrap();
            prop_assert!(pseudo_importance_label(a + da, b, &c).unwrap() >= base);
            prop_assert!(pseudo_importance_label(a, b + da, &c).unwrap() <= base);
        }

        #[test]
        fn larger_gamma_flattens(a in 0.0f64..10.0, b in 0.0f64..10.0, g in 1.0f64..5.0, dg in 0.1f64..5.0) {
            prop_assume!((a - b).abs() > 1e-3);
            let near = (raw_importance(a, b, g).unwrap() - 0.5).abs();
            let far = (raw_importance(a, b, g + dg).unwrap() - 0.5).abs();
            prop_assert!(far < near);
        }

        #[test]
        fn bce_nonnegative(p in 0.0f64..1.0, y in 0.0f64..1.0) {
            let l = importance_bce_loss(&p_tensor(&[p]), &[y]).unwrap();
            prop_assert!(scalar(&l) >= 0.0);
        }
    }
}
