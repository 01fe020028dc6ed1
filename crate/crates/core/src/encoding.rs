//! Input representation: projection into the shared width, per-modality
//! sequence encoders, context-query attention and attention pooling.

use candle_core::{Tensor, D};

use crate::error::{ImgError, Result};
use crate::nn::{
    gelu, join, mask_rows, masked_softmax, Conv1d, LayerNorm, Linear, Mlp, MultiHeadAttention,
    ParamStore,
};

/// Map raw modality features `[B, T, d_x]` to the shared width `d`.
pub fn project(features: &Tensor, params: &Linear) -> Result<Tensor> {
    params.forward(features)
}

/// Every sample must keep at least one position.
pub(crate) fn check_mask(mask: &Tensor, what: &str) -> Result<()> {
    let counts = mask.sum(D::Minus1)?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    if let Some(i) = counts.iter().position(|&c| c < 0.5) {
        return Err(ImgError::InvalidInput(format!(
            "{what} mask of sample {i} has no valid position"
        )));
    }
    Ok(())
}

/// FFN → convolution → transformer encoder over one modality.
///
/// Each sub-block is pre-normalized and residual; masked rows are zeroed
/// after every sub-block and before the convolution reads its window.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    ffn_norm: LayerNorm,
    ffn: Mlp,
    conv_norm: LayerNorm,
    conv: Conv1d,
    positions: Tensor,
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    out_norm: LayerNorm,
    out_ffn: Mlp,
}

impl SequenceEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        max_len: usize,
        kernel: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        Ok(Self {
            ffn_norm: LayerNorm::new(store, &join(prefix, "ffn_norm"), d)?,
            ffn: Mlp::new(store, &join(prefix, "ffn"), d, ffn_mult * d, d)?,
            conv_norm: LayerNorm::new(store, &join(prefix, "conv_norm"), d)?,
            conv: Conv1d::new(store, &join(prefix, "conv"), kernel, d, d)?,
            positions: store.uniform(&join(prefix, "positions"), &[max_len, d], 0.1)?,
            attn_norm: LayerNorm::new(store, &join(prefix, "attn_norm"), d)?,
            attn: MultiHeadAttention::new(store, &join(prefix, "attn"), d, heads)?,
            out_norm: LayerNorm::new(store, &join(prefix, "out_norm"), d)?,
            out_ffn: Mlp::new(store, &join(prefix, "out_ffn"), d, ffn_mult * d, d)?,
        })
    }

    pub fn max_len(&self) -> usize {
        self.positions.dims()[0]
    }

    /// `features`: `[B, T, d]`, `mask`: `[B, T]`.
    pub fn forward(&self, features: &Tensor, mask: &Tensor) -> Result<Tensor> {
        check_mask(mask, "sequence")?;
        let t = features.dim(1)?;
        if t > self.max_len() {
            return Err(ImgError::InvalidInput(format!(
                "sequence length {t} exceeds encoder limit {}",
                self.max_len()
            )));
        }
        let x = mask_rows(features, mask)?;
        let x = mask_rows(&(&x + self.ffn.forward(&self.ffn_norm.forward(&x)?)?)?, mask)?;
        let conv_in = mask_rows(&self.conv_norm.forward(&x)?, mask)?;
        let x = mask_rows(&(&x + gelu(&self.conv.forward(&conv_in)?)?)?, mask)?;
        let x = x.broadcast_add(&self.positions.narrow(0, 0, t)?)?;
        let normed = self.attn_norm.forward(&x)?;
        let x = mask_rows(&(&x + self.attn.forward(&normed, &normed, mask)?)?, mask)?;
        let x = &x + self.out_ffn.forward(&self.out_norm.forward(&x)?)?;
        mask_rows(&x?, mask)
    }
}

/// Bidirectional context-query attention.
///
/// With trilinear similarity `S[t, n] = c_t·w_c + q_n·w_q + (c_t ⊙ w_m)·q_n`,
/// row softmax over tokens `S_r` and column softmax over frames `S_c`:
///
/// ```text
/// A = S_r · Q        B = S_r · S_cᵀ · C        out = W [C; A; C ⊙ A; C ⊙ B]
/// ```
#[derive(Debug, Clone)]
pub struct ContextQueryAttention {
    pub w_context: Tensor,
    pub w_query: Tensor,
    pub w_mul: Tensor,
    pub out: Linear,
}

impl ContextQueryAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            w_context: store.fan_in(&join(prefix, "w_context"), &[d, 1], d)?,
            w_query: store.fan_in(&join(prefix, "w_query"), &[d, 1], d)?,
            w_mul: store.fan_in(&join(prefix, "w_mul"), &[d], d)?,
            out: Linear::new(store, &join(prefix, "out"), 4 * d, d)?,
        })
    }

    /// Similarity matrix `[B, T, N]` (unmasked).
    pub fn similarity(&self, context: &Tensor, query: &Tensor) -> Result<Tensor> {
        let (b, t, d) = context.dims3()?;
        let n = query.dim(1)?;
        let sc = context.reshape((b * t, d))?.matmul(&self.w_context)?.reshape((b, t, 1))?;
        let sq = query.reshape((b * n, d))?.matmul(&self.w_query)?.reshape((b, 1, n))?;
        let sm = context
            .broadcast_mul(&self.w_mul)?
            .matmul(&query.transpose(1, 2)?.contiguous()?)?;
        Ok(sm.broadcast_add(&sc)?.broadcast_add(&sq)?)
    }

    pub fn forward(
        &self,
        context: &Tensor,
        query: &Tensor,
        frame_mask: &Tensor,
        token_mask: &Tensor,
    ) -> Result<Tensor> {
        let (b, t, _) = context.dims3()?;
        let n = query.dim(1)?;
        if query.dim(0)? != b {
            return Err(ImgError::InvalidInput("context/query batch mismatch".into()));
        }
        let s = self.similarity(context, query)?;
        let s_row = masked_softmax(&s, &token_mask.reshape((b, 1, n))?, 2)?;
        let s_col = masked_softmax(&s, &frame_mask.reshape((b, t, 1))?, 1)?;
        let c2q = s_row.matmul(query)?;
        let q2c = s_row
            .matmul(&s_col.transpose(1, 2)?.contiguous()?)?
            .matmul(context)?;
        let cat = Tensor::cat(&[context, &c2q, &(context * &c2q)?, &(context * &q2c)?], 2)?;
        mask_rows(&self.out.forward(&cat)?, frame_mask)
    }
}

/// Additive attention pooling: `w = softmax_t(v·tanh(W x_t + b))`, output `Σ_t w_t x_t`.
#[derive(Debug, Clone)]
pub struct AttentionPool {
    pub proj: Linear,
    pub score: Linear,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, &join(prefix, "proj"), d, d)?,
            score: Linear::no_bias(store, &join(prefix, "score"), d, 1)?,
        })
    }

    /// Pooling weights `[B, T]`; zero at masked positions.
    pub fn weights(&self, seq: &Tensor, mask: &Tensor) -> Result<Tensor> {
        check_mask(mask, "pooling")?;
        let scores = self.score.forward(&self.proj.forward(seq)?.tanh()?)?.squeeze(2)?;
        masked_softmax(&scores, mask, 1)
    }

    /// `[B, T, d]` → `[B, d]`.
    pub fn forward(&self, seq: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let w = self.weights(seq, mask)?;
        Ok(w.unsqueeze(1)?.matmul(seq)?.squeeze(1)?)
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

    fn random_mat(seed: u64, rows: usize, cols: usize) -> Mat {
        let mut s = ParamStore::new(seed, DType::F64);
        s.uniform("m", &[rows, cols], 1.0).unwrap().to_vec2().unwrap()
    }

    fn out2(t: &Tensor) -> Mat {
        t.squeeze(0).unwrap().to_vec2().unwrap()
    }

    #[test]
    fn project_zero_input_zero_bias() {
        let mut s = ParamStore::new(1, DType::F64);
        let lin = Linear::new(&mut s, "p", 6, 4).unwrap();
        let x = Tensor::zeros((2, 3, 6), DType::F64, &Device::Cpu).unwrap();
        let y = project(&x, &lin).unwrap();
        assert_eq!(y.dims(), &[2, 3, 4]);
        assert!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn project_identity() {
        let mut s = ParamStore::new(1, DType::F64);
        let lin = Linear::new(&mut s, "p", 5, 5).unwrap();
        s.set("p.weight", &Tensor::eye(5, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let x = random_mat(3, 4, 5);
        assert_eq!(out2(&project(&t3(&x), &lin).unwrap()), x);
    }

    #[test]
    fn project_matches_affine_oracle() {
        let mut s = ParamStore::new(17, DType::F64);
        let lin = Linear::new(&mut s, "p", 8, 6).unwrap();
        s.set("p.bias", &Tensor::new(&[0.1f64, -0.2, 0.3, 0.0, 0.5, -0.7], &Device::Cpu).unwrap())
            .unwrap();
        let x = random_mat(4, 4, 8);
        let expected = r::linear(&s, "p", &x);
        r::assert_close(&out2(&project(&t3(&x), &lin).unwrap()), &expected, 1e-12);
    }

    #[test]
    fn project_rejects_wrong_width() {
        let mut s = ParamStore::new(1, DType::F64);
        let lin = Linear::new(&mut s, "p", 5, 5).unwrap();
        let x = Tensor::zeros((1, 2, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(project(&x, &lin), Err(ImgError::Config(_))));
    }

    fn encoder(heads: usize) -> (ParamStore, SequenceEncoder) {
        let mut s = ParamStore::new(23, DType::F64);
        let enc = SequenceEncoder::new(&mut s, "enc", 8, 16, 3, heads, 2).unwrap();
        (s, enc)
    }

    /// Manual forward pass mirroring the encoder's block order.
    fn encoder_oracle(s: &ParamStore, x: &Mat, keep: &[bool], heads: usize) -> Mat {
        let x = r::zero_masked(x, keep);
        let h = r::add(&x, &r::mlp(s, "enc.ffn", &r::layer_norm(s, "enc.ffn_norm", &x)));
        let h = r::zero_masked(&h, keep);
        let conv_in = r::zero_masked(&r::layer_norm(s, "enc.conv_norm", &h), keep);
        let conv = r::map(&r::conv_same(s, "enc.conv", &conv_in, 3), r::gelu);
        let h = r::zero_masked(&r::add(&h, &conv), keep);
        let pos = r::mat(s, "enc.positions");
        let h = r::add(&h, &pos[..h.len()].to_vec());
        let normed = r::layer_norm(s, "enc.attn_norm", &h);
        let att = r::attention(s, "enc.attn", &normed, &normed, keep, heads);
        let h = r::zero_masked(&r::add(&h, &att), keep);
        let out = r::add(&h, &r::mlp(s, "enc.out_ffn", &r::layer_norm(s, "enc.out_norm", &h)));
        r::zero_masked(&out, keep)
    }

    #[test]
    fn encoder_matches_manual_forward() {
        let (s, enc) = encoder(1);
        let x = random_mat(5, 4, 8);
        let keep = [true; 4];
        let got = out2(&enc.forward(&t3(&x), &mask(&keep)).unwrap());
        r::assert_close(&got, &encoder_oracle(&s, &x, &keep, 1), 1e-10);
    }

    #[test]
    fn encoder_multihead_with_mask_matches_manual_forward() {
        let mut s = ParamStore::new(23, DType::F64);
        let enc = SequenceEncoder::new(&mut s, "enc", 8, 16, 3, 4, 2).unwrap();
        let x = random_mat(6, 5, 8);
        let keep = [true, true, false, true, false];
        let got = out2(&enc.forward(&t3(&x), &mask(&keep)).unwrap());
        r::assert_close(&got, &encoder_oracle(&s, &x, &keep, 4), 1e-10);
    }

    #[test]
    fn encoder_single_frame_finite() {
        let (_, enc) = encoder(4);
        let x = random_mat(8, 1, 8);
        let y = out2(&enc.forward(&t3(&x), &mask(&[true])).unwrap());
        assert_eq!((y.len(), y[0].len()), (1, 8));
        assert!(y[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_ignores_masked_rows() {
        let (_, enc) = encoder(4);
        let keep = [true, false, true, true, false, false];
        let a = random_mat(9, 6, 8);
        let mut b = a.clone();
        b[1] = vec![100.0; 8];
        b[4] = vec![-3.0; 8];
        let ya = out2(&enc.forward(&t3(&a), &mask(&keep)).unwrap());
        let yb = out2(&enc.forward(&t3(&b), &mask(&keep)).unwrap());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                assert_eq!(ya[i], yb[i], "row {i}");
            } else {
                assert!(ya[i].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn encoder_empty_mask_rejected() {
        let (_, enc) = encoder(4);
        let x = random_mat(9, 3, 8);
        let err = enc.forward(&t3(&x), &mask(&[false, false, false])).unwrap_err();
        assert!(matches!(err, ImgError::InvalidInput(_)));
    }

    fn cqa_oracle(s: &ParamStore, c: &Mat, q: &Mat, fkeep: &[bool], tkeep: &[bool]) -> Mat {
        let wc: Vec<f64> = r::mat(s, "cqa.w_context").iter().map(|r| r[0]).collect();
        let wq: Vec<f64> = r::mat(s, "cqa.w_query").iter().map(|r| r[0]).collect();
        let wm = r::vec1(s, "cqa.w_mul");
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let sim: Mat = c
            .iter()
            .map(|ci| {
                q.iter()
                    .map(|qj| {
                        let m: f64 = (0..ci.len()).map(|k| ci[k] * wm[k] * qj[k]).sum();
                        dot(ci, &wc) + dot(qj, &wq) + m
                    })
                    .collect()
            })
            .collect();
        let s_row: Mat = sim.iter().map(|row| r::softmax_masked(row, tkeep)).collect();
        let s_col_t: Mat = r::transpose(&sim).iter().map(|col| r::softmax_masked(col, fkeep)).collect();
        let a = r::matmul(&s_row, q);
        let b = r::matmul(&r::matmul(&s_row, &s_col_t), c);
        let cat = r::hcat(&[c, &a, &r::hadamard(c, &a), &r::hadamard(c, &b)]);
        r::zero_masked(&r::linear(s, "cqa.out", &cat), fkeep)
    }

    #[test]
    fn cqa_matches_hand_computation() {
        let mut s = ParamStore::new(31, DType::F64);
        let cqa = ContextQueryAttention::new(&mut s, "cqa", 4).unwrap();
        let c = random_mat(1, 3, 4);
        let q = random_mat(2, 2, 4);
        let got = out2(&cqa.forward(&t3(&c), &t3(&q), &mask(&[true; 3]), &mask(&[true; 2])).unwrap());
        r::assert_close(&got, &cqa_oracle(&s, &c, &q, &[true; 3], &[true; 2]), 1e-12);

        let fkeep = [true, false, true];
        let tkeep = [false, true];
        let got = out2(&cqa.forward(&t3(&c), &t3(&q), &mask(&fkeep), &mask(&tkeep)).unwrap());
        r::assert_close(&got, &cqa_oracle(&s, &c, &q, &fkeep, &tkeep), 1e-12);
    }

    #[test]
    fn cqa_single_token_broadcasts_query() {
        let mut s = ParamStore::new(31, DType::F64);
        let cqa = ContextQueryAttention::new(&mut s, "cqa", 4).unwrap();
        // Route the context-to-query block straight to the output.
        let mut w = vec![vec![0.0; 4]; 16];
        for i in 0..4 {
            w[4 + i][i] = 1.0;
        }
        s.set("cqa.out.weight", &Tensor::new(w, &Device::Cpu).unwrap()).unwrap();
        let c = random_mat(1, 5, 4);
        let q = random_mat(2, 1, 4);
        let got = out2(&cqa.forward(&t3(&c), &t3(&q), &mask(&[true; 5]), &mask(&[true])).unwrap());
        for row in got {
            for (a, b) in row.iter().zip(&q[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cqa_token_permutation_invariant() {
        let mut s = ParamStore::new(37, DType::F64);
        let cqa = ContextQueryAttention::new(&mut s, "cqa", 4).unwrap();
        let c = random_mat(3, 4, 4);
        let q = random_mat(4, 3, 4);
        let tkeep = [true, false, true];
        let perm = [2, 0, 1];
        let qp: Mat = perm.iter().map(|&i| q[i].clone()).collect();
        let tp: Vec<bool> = perm.iter().map(|&i| tkeep[i]).collect();
        let fm = mask(&[true; 4]);
        let a = out2(&cqa.forward(&t3(&c), &t3(&q), &fm, &mask(&tkeep)).unwrap());
        let b = out2(&cqa.forward(&t3(&c), &t3(&qp), &fm, &mask(&tp)).unwrap());
        r::assert_close(&a, &b, 1e-12);
    }

    #[test]
    fn pool_constant_sequence() {
        let mut s = ParamStore::new(41, DType::F64);
        let pool = AttentionPool::new(&mut s, "pool", 4).unwrap();
        let row = vec![0.5, -1.0, 2.0, 3.0];
        let x = vec![row.clone(); 6];
        let y = pool.forward(&t3(&x), &mask(&[true, true, false, true, true, false])).unwrap();
        for (a, b) in y.squeeze(0).unwrap().to_vec1::<f64>().unwrap().iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_single_row() {
        let mut s = ParamStore::new(41, DType::F64);
        let pool = AttentionPool::new(&mut s, "pool", 4).unwrap();
        let x = random_mat(2, 1, 4);
        let y = pool.forward(&t3(&x), &mask(&[true])).unwrap();
        assert_eq!(y.squeeze(0).unwrap().to_vec1::<f64>().unwrap(), x[0]);
    }

    #[test]
    fn pool_matches_weighted_sum_oracle() {
        let mut s = ParamStore::new(43, DType::F64);
        let pool = AttentionPool::new(&mut s, "pool", 4).unwrap();
        let x = random_mat(7, 3, 4);
        let keep = [true; 3];
        let h = r::map(&r::linear(&s, "pool.proj", &x), f64::tanh);
        let scores: Vec<f64> = r::linear(&s, "pool.score", &h).iter().map(|r| r[0]).collect();
        let w = r::softmax_masked(&scores, &keep);
        let expected: Vec<f64> = (0..4).map(|c| (0..3).map(|t| w[t] * x[t][c]).sum()).collect();
        let got = pool.forward(&t3(&x), &mask(&keep)).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_all_masked_rejected() {
        let mut s = ParamStore::new(41, DType::F64);
        let pool = AttentionPool::new(&mut s, "pool", 4).unwrap();
        let x = random_mat(2, 2, 4);
        assert!(matches!(pool.forward(&t3(&x), &mask(&[false, false])), Err(ImgError::InvalidInput(_))));
    }
}
