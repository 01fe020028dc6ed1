//! Parameter storage and the small set of layers shared by every model block.
//!
//! All sequence tensors are laid out `[batch, time, feature]`; masks are
//! `[batch, time]` tensors holding exactly `0.0` or `1.0` in the model dtype.

mod fused;
mod gru;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ImgError, Result};

pub use fused::{add_bias, conv_windows, gelu, layer_norm, mask_logits, mask_rows, normalize, softmax, softmax_symmetric};
pub use gru::{gru_sequence, BiGru, GruCell};

/// Additive logit for masked attention positions.
pub const MASK_NEG: f64 = -1e30;

const LN_EPS: f64 = 1e-5;

/// Named trainable tensors, ordered by name.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(ImgError::Config(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Uniform in `[-bound, bound]`. Each parameter draws from its own stream
    /// keyed by `(seed, name)`, so values do not depend on creation order.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        self.uniform(name, shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place; every layer holding it sees the new value.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| ImgError::Config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(ImgError::Config(format!(
                "shape mismatch for {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Names of all parameters whose name starts with `prefix`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.vars.keys().filter(move |k| k.starts_with(prefix))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x·W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.fan_in(&join(prefix, "weight"), &[d_in, d_out], d_in)?;
        let bias = store.constant(&join(prefix, "bias"), &[d_out], 0.0)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.fan_in(&join(prefix, "weight"), &[d_in, d_out], d_in)?;
        Ok(Self { weight, bias: None })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims
            .last()
            .ok_or_else(|| ImgError::InvalidInput("linear input must have rank >= 1".into()))?;
        if last != self.d_in() {
            return Err(ImgError::Config(format!(
                "linear expects width {}, got {last}",
                self.d_in()
            )));
        }
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => add_bias(&y, b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.d_out();
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last axis with learnable gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.constant(&join(prefix, "gain"), &[d], 1.0)?,
            bias: store.constant(&join(prefix, "bias"), &[d], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gain, &self.bias)
    }
}

/// Two-layer perceptron with a GELU hidden activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &join(prefix, "fc1"), d_in, d_hidden)?,
            fc2: Linear::new(store, &join(prefix, "fc2"), d_hidden, d_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// 1-D convolution with same padding, implemented as shifted-window gather + matmul.
/// Rows past either sequence end read as zero.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: usize,
    pub proj: Linear,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kernel: usize,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(ImgError::Config(format!("kernel size must be odd, got {kernel}")));
        }
        Ok(Self {
            kernel,
            proj: Linear::new(store, prefix, kernel * d_in, d_out)?,
        })
    }

    /// `x`: `[B, T, d_in]`; the caller zeroes masked rows first.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let windows = conv_windows(x, self.kernel)?;
        self.proj.forward(&windows)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(ImgError::Config(format!("d={d} not divisible by heads={heads}")));
        }
        Ok(Self {
            q: Linear::new(store, &join(prefix, "q"), d, d)?,
            k: Linear::new(store, &join(prefix, "k"), d, d)?,
            v: Linear::new(store, &join(prefix, "v"), d, d)?,
            o: Linear::new(store, &join(prefix, "o"), d, d)?,
            heads,
        })
    }

    /// `query`: `[B, Tq, d]`, `kv`: `[B, Tk, d]`, `key_mask`: `[B, Tk]`.
    pub fn forward(&self, query: &Tensor, kv: &Tensor, key_mask: &Tensor) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let tk = kv.dim(1)?;
        let dh = d / self.heads;
        let split = |x: Tensor, len: usize| -> Result<Tensor> {
            Ok(x.reshape((b, len, self.heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.q.forward(query)?, tq)?;
        let k = split(self.k.forward(kv)?, tk)?;
        let v = split(self.v.forward(kv)?, tk)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let scores = mask_logits(&scores, &key_mask.reshape((b, 1, 1, tk))?)?;
        let attn = softmax(&scores, 3)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, d))?;
        self.o.forward(&ctx)
    }
}

/// Softmax over `dim` with masked positions excluded.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor, dim: usize) -> Result<Tensor> {
    softmax(&mask_logits(logits, mask)?, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new(7, DType::F64)
    }

    #[test]
    fn init_is_order_independent() {
        let mut a = store();
        let x1 = a.uniform("x", &[3], 1.0).unwrap();
        a.uniform("y", &[3], 1.0).unwrap();
        let mut b = store();
        b.uniform("y", &[3], 1.0).unwrap();
        let x2 = b.uniform("x", &[3], 1.0).unwrap();
        assert_eq!(x1.to_vec1::<f64>().unwrap(), x2.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        s.constant("a", &[1], 0.0).unwrap();
        assert!(s.constant("a", &[1], 0.0).is_err());
    }

    #[test]
    fn set_updates_shared_tensor() {
        let mut s = store();
        let lin = Linear::new(&mut s, "l", 2, 2).unwrap();
        let eye = Tensor::eye(2, DType::F64, &Device::Cpu).unwrap();
        s.set("l.weight", &eye).unwrap();
        let x = Tensor::new(&[[1.5f64, -2.0]], &Device::Cpu).unwrap();
        assert_eq!(lin.forward(&x).unwrap().to_vec2::<f64>().unwrap(), vec![vec![1.5, -2.0]]);
    }

    #[test]
    fn conv_windows_pads_with_zeros() {
        let x = Tensor::new(&[[[1f64], [2.], [3.]]], &Device::Cpu).unwrap();
        let w = conv_windows(&x, 3).unwrap();
        assert_eq!(
            w.to_vec3::<f64>().unwrap(),
            vec![vec![vec![0., 1., 2.], vec![1., 2., 3.], vec![2., 3., 0.]]]
        );
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let logits = Tensor::new(&[[1f64, 50.0, 2.0]], &Device::Cpu).unwrap();
        let mask = Tensor::new(&[[1f64, 0.0, 1.0]], &Device::Cpu).unwrap();
        let p = masked_softmax(&logits, &mask, 1).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(p[0][1], 0.0);
        assert!((p[0][0] + p[0][2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_rows() {
        let x = Tensor::new(&[[1f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = normalize(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }
}
