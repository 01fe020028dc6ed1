//! Multi-granularity audio-visual fusion.
//!
//! Each granularity produces a visual and an audio sequence, layer-normalizes
//! both and merges them as `(1 − p)·LN(visual) + p·LN(audio)`, so every
//! granularity output is affine in the fusion weight `p`. A set of
//! bidirectional GRUs over pairs of granularities then yields the final fused
//! sequence.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::encoding::AttentionPool;
use crate::error::{ImgError, Result};
use crate::nn::{
    join, mask_rows, softmax_symmetric, BiGru, Conv1d, GruCell, LayerNorm, Linear, Mlp, MultiHeadAttention,
    ParamStore,
};

/// Added to slot attention weights before normalizing over inputs.
const SLOT_EPS: f64 = 1e-8;

/// `(1 − p)·visual + p·audio` per sample; `p_eff` is `[B]`.
pub fn importance_merge(visual: &Tensor, audio: &Tensor, p_eff: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let b = visual.dim(0)?;
    let p = p_eff.reshape((b, 1, 1))?;
    let keep = p.affine(-1.0, 1.0)?;
    let merged = (visual.broadcast_mul(&keep)? + audio.broadcast_mul(&p)?)?;
    mask_rows(&merged, mask)
}

/// Output of one granularity: the normalized per-modality sequences and their merge.
#[derive(Debug, Clone)]
pub struct FusedLevel {
    pub visual: Tensor,
    pub audio: Tensor,
    pub fused: Tensor,
}

/// All granularity outputs plus the final fused sequence.
#[derive(Debug, Clone)]
pub struct GranularityFeatures {
    pub local: FusedLevel,
    pub event: FusedLevel,
    pub global: FusedLevel,
    pub fused: Tensor,
}

/// Multi-kernel convolution bank followed by an MLP back to width `d`.
#[derive(Debug, Clone)]
pub struct ConvBank {
    pub convs: Vec<Conv1d>,
    pub mlp: Mlp,
}

impl ConvBank {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, kernels: &[usize]) -> Result<Self> {
        let convs = kernels
            .iter()
            .map(|&k| Conv1d::new(store, &join(prefix, &format!("conv{k}")), k, d, d))
            .collect::<Result<Vec<_>>>()?;
        let mlp = Mlp::new(store, &join(prefix, "mlp"), kernels.len() * d, d, d)?;
        Ok(Self { convs, mlp })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = mask_rows(x, mask)?;
        let outs = self
            .convs
            .iter()
            .map(|c| c.forward(&x))
            .collect::<Result<Vec<_>>>()?;
        mask_rows(&self.mlp.forward(&Tensor::cat(&outs, D::Minus1)?)?, mask)
    }
}

#[derive(Debug, Clone)]
pub struct LocalFusion {
    pub visual: ConvBank,
    pub audio: ConvBank,
    pub norm_v: LayerNorm,
    pub norm_a: LayerNorm,
}

impl LocalFusion {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, kernels: &[usize]) -> Result<Self> {
        Ok(Self {
            visual: ConvBank::new(store, &join(prefix, "visual"), d, kernels)?,
            audio: ConvBank::new(store, &join(prefix, "audio"), d, kernels)?,
            norm_v: LayerNorm::new(store, &join(prefix, "norm_v"), d)?,
            norm_a: LayerNorm::new(store, &join(prefix, "norm_a"), d)?,
        })
    }

    pub fn forward(&self, v_hat: &Tensor, a_hat: &Tensor, p_eff: &Tensor, mask: &Tensor) -> Result<FusedLevel> {
        let visual = self.norm_v.forward(&self.visual.forward(v_hat, mask)?)?;
        let audio = self.norm_a.forward(&self.audio.forward(a_hat, mask)?)?;
        let fused = importance_merge(&visual, &audio, p_eff, mask)?;
        Ok(FusedLevel { visual, audio, fused })
    }
}

/// Refined slots and the per-iteration attention, kept for inspection.
#[derive(Debug, Clone)]
pub struct SlotOutput {
    /// `[B, e, d]`.
    pub slots: Tensor,
    /// Per iteration, softmax over slots for every input: `[B, T, e]`.
    pub attention: Vec<Tensor>,
    /// Per iteration, the weighted input means fed to the recurrent update: `[B, e, d]`.
    pub updates: Vec<Tensor>,
}

/// Iterative slot attention with learnable initial slots.
#[derive(Debug, Clone)]
pub struct SlotAttention {
    pub init: Tensor,
    pub norm_inputs: LayerNorm,
    pub norm_slots: LayerNorm,
    pub norm_mlp: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub gru: GruCell,
    pub mlp: Mlp,
    pub iters: usize,
}

impl SlotAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        slots: usize,
        iters: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        if iters == 0 {
            return Err(ImgError::Config("slot attention needs at least one iteration".into()));
        }
        if slots == 0 {
            return Err(ImgError::Config("slot attention needs at least one slot".into()));
        }
        Ok(Self {
            init: store.uniform(&join(prefix, "init"), &[slots, d], 1.0)?,
            norm_inputs: LayerNorm::new(store, &join(prefix, "norm_inputs"), d)?,
            norm_slots: LayerNorm::new(store, &join(prefix, "norm_slots"), d)?,
            norm_mlp: LayerNorm::new(store, &join(prefix, "norm_mlp"), d)?,
            q: Linear::no_bias(store, &join(prefix, "q"), d, d)?,
            k: Linear::no_bias(store, &join(prefix, "k"), d, d)?,
            v: Linear::no_bias(store, &join(prefix, "v"), d, d)?,
            gru: GruCell::new(store, &join(prefix, "gru"), d, d)?,
            mlp: Mlp::new(store, &join(prefix, "mlp"), d, ffn_mult * d, d)?,
            iters,
        })
    }

    pub fn forward(&self, seq: &Tensor, mask: &Tensor) -> Result<SlotOutput> {
        self.forward_with(seq, mask, &self.init, self.iters)
    }

    /// Run from explicit initial slots `[e, d]` for `iters` rounds.
    pub fn forward_with(&self, seq: &Tensor, mask: &Tensor, init: &Tensor, iters: usize) -> Result<SlotOutput> {
        if iters == 0 {
            return Err(ImgError::Config("slot attention needs at least one iteration".into()));
        }
        let (b, _, d) = seq.dims3()?;
        let (e, d_init) = init.dims2()?;
        if d_init != d {
            return Err(ImgError::Config(format!("slot width {d_init} != input width {d}")));
        }
        let x = self.norm_inputs.forward(seq)?;
        let keys = self.k.forward(&x)?;
        let values = self.v.forward(&x)?;
        let keys_t = keys.transpose(1, 2)?.contiguous()?;
        let scale = 1.0 / (d as f64).sqrt();

        let mut slots = init.unsqueeze(0)?.broadcast_as((b, e, d))?.contiguous()?;
        let mut attention = Vec::with_capacity(iters);
        let mut updates = Vec::with_capacity(iters);
        for _ in 0..iters {
            let q = self.q.forward(&self.norm_slots.forward(&slots)?)?;
            // [B, T, e]: every input distributes unit mass over the slots.
            let logits = (q.matmul(&keys_t)?.transpose(1, 2)? * scale)?;
            let attn = softmax_symmetric(&logits, 2)?;
            let weights = mask_rows(&(attn.clone() + SLOT_EPS)?, mask)?;
            let weights = weights.broadcast_div(&weights.sum_keepdim(1)?)?;
            let update = weights.transpose(1, 2)?.contiguous()?.matmul(&values)?;
            let next = self
                .gru
                .forward(&update.reshape((b * e, d))?, &slots.reshape((b * e, d))?)?
                .reshape((b, e, d))?;
            slots = (&next + self.mlp.forward(&self.norm_mlp.forward(&next)?)?)?;
            attention.push(attn);
            updates.push(update);
        }
        Ok(SlotOutput {
            slots,
            attention,
            updates,
        })
    }
}

/// Frames attend to event slots, followed by a feed-forward sub-block.
#[derive(Debug, Clone)]
pub struct CrossAttentionLayer {
    pub norm_q: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl CrossAttentionLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        Ok(Self {
            norm_q: LayerNorm::new(store, &join(prefix, "norm_q"), d)?,
            attn: MultiHeadAttention::new(store, &join(prefix, "attn"), d, heads)?,
            norm_ffn: LayerNorm::new(store, &join(prefix, "norm_ffn"), d)?,
            ffn: Mlp::new(store, &join(prefix, "ffn"), d, ffn_mult * d, d)?,
        })
    }

    /// Attention output `[B, T, d]` before the residual path.
    pub fn attend(&self, frames: &Tensor, events: &Tensor) -> Result<Tensor> {
        let (b, e, _) = events.dims3()?;
        let all = Tensor::ones((b, e), events.dtype(), events.device())?;
        self.attn.forward(&self.norm_q.forward(frames)?, events, &all)
    }

    pub fn forward(&self, frames: &Tensor, events: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let y = (frames + self.attend(frames, events)?)?;
        let y = (&y + self.ffn.forward(&self.norm_ffn.forward(&y)?)?)?;
        mask_rows(&y, mask)
    }
}

#[derive(Debug, Clone)]
pub struct EventFusion {
    pub slots_v: SlotAttention,
    pub slots_a: SlotAttention,
    pub cross_v: CrossAttentionLayer,
    pub cross_a: CrossAttentionLayer,
    pub norm_v: LayerNorm,
    pub norm_a: LayerNorm,
    pub cross_modal: bool,
}

impl EventFusion {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d;
        Ok(Self {
            slots_v: SlotAttention::new(store, &join(prefix, "slots_v"), d, cfg.slots, cfg.slot_iters, cfg.ffn_mult)?,
            slots_a: SlotAttention::new(store, &join(prefix, "slots_a"), d, cfg.slots, cfg.slot_iters, cfg.ffn_mult)?,
            cross_v: CrossAttentionLayer::new(store, &join(prefix, "cross_v"), d, cfg.heads, cfg.ffn_mult)?,
            cross_a: CrossAttentionLayer::new(store, &join(prefix, "cross_a"), d, cfg.heads, cfg.ffn_mult)?,
            norm_v: LayerNorm::new(store, &join(prefix, "norm_v"), d)?,
            norm_a: LayerNorm::new(store, &join(prefix, "norm_a"), d)?,
            cross_modal: cfg.event_cross_modal,
        })
    }

    pub fn forward(&self, v_hat: &Tensor, a_hat: &Tensor, p_eff: &Tensor, mask: &Tensor) -> Result<FusedLevel> {
        let events_v = self.slots_v.forward(v_hat, mask)?.slots;
        let events_a = self.slots_a.forward(a_hat, mask)?.slots;
        let (for_v, for_a) = if self.cross_modal {
            (&events_a, &events_v)
        } else {
            (&events_v, &events_a)
        };
        let visual = self.norm_v.forward(&self.cross_v.forward(v_hat, for_v, mask)?)?;
        let audio = self.norm_a.forward(&self.cross_a.forward(a_hat, for_a, mask)?)?;
        let fused = importance_merge(&visual, &audio, p_eff, mask)?;
        Ok(FusedLevel { visual, audio, fused })
    }
}

#[derive(Debug, Clone)]
pub struct GlobalFusion {
    pub pool_v: AttentionPool,
    pub pool_a: AttentionPool,
    pub mlp_v: Mlp,
    pub mlp_a: Mlp,
    pub norm_v: LayerNorm,
    pub norm_a: LayerNorm,
}

impl GlobalFusion {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            pool_v: AttentionPool::new(store, &join(prefix, "pool_v"), d)?,
            pool_a: AttentionPool::new(store, &join(prefix, "pool_a"), d)?,
            mlp_v: Mlp::new(store, &join(prefix, "mlp_v"), 2 * d, d, d)?,
            mlp_a: Mlp::new(store, &join(prefix, "mlp_a"), 2 * d, d, d)?,
            norm_v: LayerNorm::new(store, &join(prefix, "norm_v"), d)?,
            norm_a: LayerNorm::new(store, &join(prefix, "norm_a"), d)?,
        })
    }

    /// Every frame concatenated with the pooled sequence vector: `[B, T, 2d]`.
    pub fn with_context(pool: &AttentionPool, seq: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, t, d) = seq.dims3()?;
        let g = pool.forward(seq, mask)?.unsqueeze(1)?.broadcast_as((b, t, d))?;
        Ok(Tensor::cat(&[seq, &g.contiguous()?], 2)?)
    }

    pub fn forward(&self, v_hat: &Tensor, a_hat: &Tensor, p_eff: &Tensor, mask: &Tensor) -> Result<FusedLevel> {
        let v = mask_rows(&self.mlp_v.forward(&Self::with_context(&self.pool_v, v_hat, mask)?)?, mask)?;
        let a = mask_rows(&self.mlp_a.forward(&Self::with_context(&self.pool_a, a_hat, mask)?)?, mask)?;
        let visual = self.norm_v.forward(&v)?;
        let audio = self.norm_a.forward(&a)?;
        let fused = importance_merge(&visual, &audio, p_eff, mask)?;
        Ok(FusedLevel { visual, audio, fused })
    }
}

/// Pairwise Bi-GRUs over (local, event), (local, global), (event, global), then an MLP.
#[derive(Debug, Clone)]
pub struct MultiScaleMerge {
    pub local_event: BiGru,
    pub local_global: BiGru,
    pub event_global: BiGru,
    pub mlp: Mlp,
}

impl MultiScaleMerge {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        if d % 2 != 0 {
            return Err(ImgError::Config(format!(
                "fused width must be even to split across GRU directions, got {d}"
            )));
        }
        let h = d / 2;
        Ok(Self {
            local_event: BiGru::new(store, &join(prefix, "local_event"), 2 * d, h)?,
            local_global: BiGru::new(store, &join(prefix, "local_global"), 2 * d, h)?,
            event_global: BiGru::new(store, &join(prefix, "event_global"), 2 * d, h)?,
            mlp: Mlp::new(store, &join(prefix, "mlp"), 3 * d, 2 * d, d)?,
        })
    }

    pub fn forward(&self, local: &Tensor, event: &Tensor, global: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let le = self.local_event.forward(&Tensor::cat(&[local, event], 2)?, mask)?;
        let lg = self.local_global.forward(&Tensor::cat(&[local, global], 2)?, mask)?;
        let eg = self.event_global.forward(&Tensor::cat(&[event, global], 2)?, mask)?;
        mask_rows(&self.mlp.forward(&Tensor::cat(&[le, lg, eg], 2)?)?, mask)
    }
}

#[derive(Debug, Clone)]
pub struct MultiGranularityFusion {
    pub local: LocalFusion,
    pub event: EventFusion,
    pub global: GlobalFusion,
    pub merge: MultiScaleMerge,
}

impl MultiGranularityFusion {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            local: LocalFusion::new(store, &join(prefix, "local"), cfg.d, &cfg.kernel_bank)?,
            event: EventFusion::new(store, &join(prefix, "event"), cfg)?,
            global: GlobalFusion::new(store, &join(prefix, "global"), cfg.d)?,
            merge: MultiScaleMerge::new(store, &join(prefix, "merge"), cfg.d)?,
        })
    }

    pub fn forward(&self, v_hat: &Tensor, a_hat: &Tensor, p_eff: &Tensor, mask: &Tensor) -> Result<GranularityFeatures> {
        let local = self.local.forward(v_hat, a_hat, p_eff, mask)?;
        let event = self.event.forward(v_hat, a_hat, p_eff, mask)?;
        let global = self.global.forward(v_hat, a_hat, p_eff, mask)?;
        let fused = self.merge.forward(&local.fused, &event.fused, &global.fused, mask)?;
        Ok(GranularityFeatures {
            local,
            event,
            global,
            fused,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{self as r, Mat};
    use candle_core::{DType, Device};

    fn t3(rows: &Mat) -> Tensor {
        Tensor::new(rows.clone(), &Device::Cpu).unwrap().unsqueeze(0).unwrap()
    }

    fn mask(bits: &[bool]) -> Tensor {
        let v: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(v, &Device::Cpu).unwrap().unsqueeze(0).unwrap()
    }

    fn p(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    fn random_mat(seed: u64, rows: usize, cols: usize) -> Mat {
        let mut s = ParamStore::new(seed, DType::F64);
        s.uniform("m", &[rows, cols], 1.0).unwrap().to_vec2().unwrap()
    }

    fn out2(t: &Tensor) -> Mat {
        t.squeeze(0).unwrap().to_vec2().unwrap()
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            kernel_bank: vec![1, 3],
            slots: 3,
            slot_iters: 3,
            precision: crate::Precision::F64,
            ..ModelConfig::synthetic()
        }
    }

    #[test]
    fn local_extremes_ignore_other_modality() {
        let mut s = ParamStore::new(5, DType::F64);
        let local = LocalFusion::new(&mut s, "local", 8, &[1, 3, 5]).unwrap();
        let keep = [true, true, true, false];
        let v = t3(&random_mat(1, 4, 8));
        let a1 = t3(&random_mat(2, 4, 8));
        let a2 = t3(&random_mat(3, 4, 8));
        let x = local.forward(&v, &a1, &p(0.0), &mask(&keep)).unwrap();
        let y = local.forward(&v, &a2, &p(0.0), &mask(&keep)).unwrap();
        assert_eq!(out2(&x.fused), out2(&y.fused));
        let ln_v = out2(&mask_rows(&x.visual, &mask(&keep)).unwrap());
        assert_eq!(out2(&x.fused), ln_v);

        let v2 = t3(&random_mat(4, 4, 8));
        let x = local.forward(&v, &a1, &p(1.0), &mask(&keep)).unwrap();
        let y = local.forward(&v2, &a1, &p(1.0), &mask(&keep)).unwrap();
        assert_eq!(out2(&x.fused), out2(&y.fused));
    }

    #[test]
    fn local_equal_branches_at_half() {
        let mut s = ParamStore::new(5, DType::F64);
        let local = LocalFusion::new(&mut s, "local", 8, &[1, 3]).unwrap();
        // Share the audio bank's parameters with the visual bank.
        for name in ["conv1.weight", "conv1.bias", "conv3.weight", "conv3.bias", "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
            let v = s.get(&format!("local.visual.{name}")).unwrap().as_tensor().copy().unwrap();
            s.set(&format!("local.audio.{name}"), &v).unwrap();
        }
        let x = t3(&random_mat(1, 5, 8));
        let keep = [true; 5];
        let out = local.forward(&x, &x, &p(0.5), &mask(&keep)).unwrap();
        r::assert_close(&out2(&out.fused), &out2(&out.visual), 1e-12);
    }

    #[test]
    fn local_matches_manual_oracle() {
        let mut s = ParamStore::new(9, DType::F64);
        let local = LocalFusion::new(&mut s, "local", 8, &[1, 3]).unwrap();
        s.set("local.norm_a.gain", &Tensor::new(&[1.5f64, 0.5, 1.0, 2.0, 1.0, 1.0, 0.3, 1.0], &Device::Cpu).unwrap())
            .unwrap();
        let v = random_mat(1, 4, 8);
        let a = random_mat(2, 4, 8);
        let keep = [true, true, false, true];
        let bank = |m: &str, x: &Mat| -> Mat {
            let x = r::zero_masked(x, &keep);
            let c1 = r::conv_same(&s, &format!("local.{m}.conv1"), &x, 1);
            let c3 = r::conv_same(&s, &format!("local.{m}.conv3"), &x, 3);
            r::zero_masked(&r::mlp(&s, &format!("local.{m}.mlp"), &r::hcat(&[&c1, &c3])), &keep)
        };
        let lv = r::layer_norm(&s, "local.norm_v", &bank("visual", &v));
        let la = r::layer_norm(&s, "local.norm_a", &bank("audio", &a));
        let pv = 0.3;
        let expected = r::zero_masked(&r::add(&r::scale(&lv, 1.0 - pv), &r::scale(&la, pv)), &keep);
        let got = local.forward(&t3(&v), &t3(&a), &p(pv), &mask(&keep)).unwrap();
        r::assert_close(&out2(&got.fused), &expected, 1e-12);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut s = ParamStore::new(5, DType::F64);
        let local = LocalFusion::new(&mut s, "local", 8, &[1, 3, 5]).unwrap();
        let x = t3(&random_mat(1, 6, 8));
        let m = mask(&[true; 6]);
        let raw = out2(&local.visual.forward(&x, &m).unwrap());
        let out = local.forward(&x, &x, &p(0.2), &m).unwrap();
        let stats = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / 8.0;
            (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0)
        };
        for (row, pre) in out2(&out.visual).iter().zip(&raw) {
            let (mean, var) = stats(row);
            let (_, pre_var) = stats(pre);
            // Unit gain and zero bias: unit variance up to the normalizer's epsilon.
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - pre_var / (pre_var + 1e-5)).abs() < 1e-9, "var {var}");
        }
    }

    fn slot_module(slots: usize) -> (ParamStore, SlotAttention) {
        let mut s = ParamStore::new(21, DType::F64);
        let sa = SlotAttention::new(&mut s, "slots", 8, slots, 3, 2).unwrap();
        (s, sa)
    }

    #[test]
    fn slot_weights_sum_to_one_per_input() {
        let (_, sa) = slot_module(3);
        let x = t3(&random_mat(4, 7, 8));
        let out = sa.forward(&x, &mask(&[true, true, false, true, true, true, false])).unwrap();
        assert_eq!(out.attention.len(), 3);
        for attn in &out.attention {
            for row in out2(attn) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_slot_update_is_masked_mean() {
        let (s, sa) = slot_module(1);
        let x = random_mat(4, 5, 8);
        let keep = [true, false, true, true, false];
        let out = sa.forward(&t3(&x), &mask(&keep)).unwrap();
        let values = r::linear(&s, "slots.v", &r::layer_norm(&s, "slots.norm_inputs", &x));
        let n = keep.iter().filter(|&&k| k).count() as f64;
        let mean: Vec<f64> = (0..8)
            .map(|c| (0..5).filter(|&t| keep[t]).map(|t| values[t][c]).sum::<f64>() / n)
            .collect();
        for update in &out.updates {
            let got = out2(update);
            for (a, b) in got[0].iter().zip(&mean) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn slots_permutation_equivariant() {
        let (_, sa) = slot_module(3);
        let x = t3(&random_mat(4, 6, 8));
        let m = mask(&[true; 6]);
        let init = random_mat(8, 3, 8);
        let perm = [2, 0, 1];
        let permuted: Mat = perm.iter().map(|&i| init[i].clone()).collect();
        let a = out2(&sa.forward_with(&x, &m, &Tensor::new(init, &Device::Cpu).unwrap(), 3).unwrap().slots);
        let b = out2(&sa.forward_with(&x, &m, &Tensor::new(permuted, &Device::Cpu).unwrap(), 3).unwrap().slots);
        for (k, &src) in perm.iter().enumerate() {
            assert_eq!(b[k], a[src]);
        }
    }

    #[test]
    fn slot_iterations_validated() {
        let mut s = ParamStore::new(1, DType::F64);
        assert!(matches!(SlotAttention::new(&mut s, "x", 8, 3, 0, 2), Err(ImgError::Config(_))));
        let (_, sa) = slot_module(2);
        let x = t3(&random_mat(4, 3, 8));
        assert!(sa.forward_with(&x, &mask(&[true; 3]), &sa.init, 0).is_err());
    }

    #[test]
    fn single_event_attention_is_constant_over_frames() {
        let mut s = ParamStore::new(3, DType::F64);
        let layer = CrossAttentionLayer::new(&mut s, "cross", 8, 2, 2).unwrap();
        let frames = t3(&random_mat(1, 5, 8));
        let event = t3(&random_mat(2, 1, 8));
        let rows = out2(&layer.attend(&frames, &event).unwrap());
        for row in &rows[1..] {
            for (a, b) in row.iter().zip(&rows[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn event_fusion_matches_step_by_step_oracle() {
        let cfg = ModelConfig {
            heads: 1,
            slots: 2,
            slot_iters: 2,
            ..tiny_cfg()
        };
        let mut s = ParamStore::new(77, DType::F64);
        let ev = EventFusion::new(&mut s, "ev", &cfg).unwrap();
        let v = random_mat(1, 4, 8);
        let a = random_mat(2, 4, 8);
        let keep = [true; 4];

        let slots = |m: &str, x: &Mat| -> Mat {
            let pre = format!("ev.slots_{m}");
            let xn = r::layer_norm(&s, &format!("{pre}.norm_inputs"), x);
            let k = r::linear(&s, &format!("{pre}.k"), &xn);
            let vv = r::linear(&s, &format!("{pre}.v"), &xn);
            let mut sl = r::mat(&s, &format!("{pre}.init"));
            for _ in 0..2 {
                let q = r::linear(&s, &format!("{pre}.q"), &r::layer_norm(&s, &format!("{pre}.norm_slots"), &sl));
                let logits = r::scale(&r::matmul(&k, &r::transpose(&q)), 1.0 / 8f64.sqrt());
                let attn: Mat = logits.iter().map(|row| r::softmax_masked(row, &[true; 2])).collect();
                let w = r::map(&attn, |x| x + SLOT_EPS);
                let col: Vec<f64> = (0..2).map(|j| w.iter().map(|r| r[j]).sum()).collect();
                let wn: Mat = w.iter().map(|row| row.iter().zip(&col).map(|(a, c)| a / c).collect()).collect();
                let upd = r::matmul(&r::transpose(&wn), &vv);
                // GRU cell
                let xw = r::linear(&s, &format!("{pre}.gru.input"), &upd);
                let hu = r::matmul(&sl, &r::mat(&s, &format!("{pre}.gru.u")));
                let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
                let next: Mat = (0..2)
                    .map(|i| {
                        (0..8)
                            .map(|j| {
                                let rr = sig(xw[i][j] + hu[i][j]);
                                let z = sig(xw[i][8 + j] + hu[i][8 + j]);
                                let n = (xw[i][16 + j] + rr * hu[i][16 + j]).tanh();
                                (1.0 - z) * n + z * sl[i][j]
                            })
                            .collect()
                    })
                    .collect();
                sl = r::add(&next, &r::mlp(&s, &format!("{pre}.mlp"), &r::layer_norm(&s, &format!("{pre}.norm_mlp"), &next)));
            }
            sl
        };
        let cross = |m: &str, x: &Mat, ev: &Mat| -> Mat {
            let pre = format!("ev.cross_{m}");
            let q = r::layer_norm(&s, &format!("{pre}.norm_q"), x);
            let att = r::attention(&s, &format!("{pre}.attn"), &q, ev, &[true; 2], 1);
            let y = r::add(x, &att);
            r::add(&y, &r::mlp(&s, &format!("{pre}.ffn"), &r::layer_norm(&s, &format!("{pre}.norm_ffn"), &y)))
        };
        let lv = r::layer_norm(&s, "ev.norm_v", &cross("v", &v, &slots("v", &v)));
        let la = r::layer_norm(&s, "ev.norm_a", &cross("a", &a, &slots("a", &a)));
        let expected = r::add(&r::scale(&lv, 0.6), &r::scale(&la, 0.4));
        let got = ev.forward(&t3(&v), &t3(&a), &p(0.4), &mask(&keep)).unwrap();
        r::assert_close(&out2(&got.fused), &expected, 1e-10);
    }

    #[test]
    fn global_single_frame_duplicates() {
        let mut s = ParamStore::new(3, DType::F64);
        let pool = AttentionPool::new(&mut s, "pool", 4).unwrap();
        let x = random_mat(1, 1, 4);
        let cat = out2(&GlobalFusion::with_context(&pool, &t3(&x), &mask(&[true])).unwrap());
        assert_eq!(cat[0][..4], cat[0][4..]);
    }

    #[test]
    fn global_matches_oracle_and_ignores_visual_at_one() {
        let mut s = ParamStore::new(13, DType::F64);
        let g = GlobalFusion::new(&mut s, "g", 8).unwrap();
        let v = random_mat(1, 3, 8);
        let a = random_mat(2, 3, 8);
        let keep = [true; 3];
        let branch = |m: &str, x: &Mat| -> Mat {
            let h = r::map(&r::linear(&s, &format!("g.pool_{m}.proj"), x), f64::tanh);
            let sc: Vec<f64> = r::linear(&s, &format!("g.pool_{m}.score"), &h).iter().map(|r| r[0]).collect();
            let w = r::softmax_masked(&sc, &keep);
            let pooled: Vec<f64> = (0..8).map(|c| (0..3).map(|t| w[t] * x[t][c]).sum()).collect();
            let ctx: Mat = x.iter().map(|row| row.iter().chain(&pooled).copied().collect()).collect();
            r::layer_norm(&s, &format!("g.norm_{m}"), &r::mlp(&s, &format!("g.mlp_{m}"), &ctx))
        };
        let expected = r::add(&r::scale(&branch("v", &v), 0.75), &r::scale(&branch("a", &a), 0.25));
        let got = g.forward(&t3(&v), &t3(&a), &p(0.25), &mask(&keep)).unwrap();
        r::assert_close(&out2(&got.fused), &expected, 1e-12);

        let x = g.forward(&t3(&v), &t3(&a), &p(1.0), &mask(&keep)).unwrap();
        let y = g.forward(&t3(&random_mat(9, 3, 8)), &t3(&a), &p(1.0), &mask(&keep)).unwrap();
        assert_eq!(out2(&x.fused), out2(&y.fused));
    }

    #[test]
    fn merge_shape_mask_and_zero() {
        let mut s = ParamStore::new(13, DType::F64);
        let m = MultiScaleMerge::new(&mut s, "merge", 8).unwrap();
        let keep = [true, true, true, false, false];
        let l = t3(&random_mat(1, 5, 8));
        let e = t3(&random_mat(2, 5, 8));
        let g = t3(&random_mat(3, 5, 8));
        let out = out2(&m.forward(&l, &e, &g, &mask(&keep)).unwrap());
        assert_eq!((out.len(), out[0].len()), (5, 8));
        assert!(out[3].iter().chain(&out[4]).all(|&v| v == 0.0));

        let z = Tensor::zeros((1, 5, 8), DType::F64, &Device::Cpu).unwrap();
        let out = m.forward(&z, &z, &z, &mask(&[true; 5])).unwrap();
        assert!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merge_rejects_odd_width() {
        let mut s = ParamStore::new(1, DType::F64);
        assert!(matches!(MultiScaleMerge::new(&mut s, "m", 7), Err(ImgError::Config(_))));
    }

    #[test]
    fn granularities_affine_in_weight() {
        let cfg = tiny_cfg();
        let mut s = ParamStore::new(99, DType::F64);
        let f = MultiGranularityFusion::new(&mut s, "fusion", &cfg).unwrap();
        let v = t3(&random_mat(1, 6, 8));
        let a = t3(&random_mat(2, 6, 8));
        let m = mask(&[true, true, true, true, false, true]);
        let at = |w: f64| f.forward(&v, &a, &p(w), &m).unwrap();
        let (g0, g1) = (at(0.0), at(1.0));
        for w in [0.25, 0.6, 0.9] {
            let g = at(w);
            for (lvl, l0, l1) in [
                (&g.local, &g0.local, &g1.local),
                (&g.event, &g0.event, &g1.event),
                (&g.global, &g0.global, &g1.global),
            ] {
                let expected = r::add(&r::scale(&out2(&l0.fused), 1.0 - w), &r::scale(&out2(&l1.fused), w));
                r::assert_close(&out2(&lvl.fused), &expected, 1e-12);
            }
        }
        let near = at(0.5 + 1e-6);
        let mid = at(0.5);
        r::assert_close(&out2(&near.fused), &out2(&mid.fused), 1e-4);
    }

    #[test]
    fn cross_modal_switch_breaks_suppression() {
        let cfg = ModelConfig {
            event_cross_modal: true,
            ..tiny_cfg()
        };
        let mut s = ParamStore::new(99, DType::F64);
        let ev = EventFusion::new(&mut s, "ev", &cfg).unwrap();
        let v = t3(&random_mat(1, 4, 8));
        let m = mask(&[true; 4]);
        let x = ev.forward(&v, &t3(&random_mat(2, 4, 8)), &p(0.0), &m).unwrap();
        let y = ev.forward(&v, &t3(&random_mat(3, 4, 8)), &p(0.0), &m).unwrap();
        assert_ne!(out2(&x.fused), out2(&y.fused));
    }
}
