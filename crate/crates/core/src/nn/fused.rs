//! Elementwise and row-wise kernels fused into single graph nodes.
//!
//! Composing these from generic tensor ops creates a handful of nodes per call
//! and as many gradient buffers; each op here is one node with a direct
//! backward pass computed on host slices.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};
use num_traits::Float;

use super::gru::contiguous_slice;
use super::LN_EPS;
use crate::error::Result;

trait Real: Float + std::ops::AddAssign + Send + Sync + candle_core::WithDType + 'static {}

impl Real for f32 {}
impl Real for f64 {}

/// Read access to a tensor's elements in row-major order, borrowing the
/// storage when it is already contiguous.
struct Host<'a, T> {
    guard: Option<std::sync::RwLockReadGuard<'a, candle_core::Storage>>,
    range: std::ops::Range<usize>,
    owned: Vec<T>,
}

impl<T: Real> std::ops::Deref for Host<'_, T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        match &self.guard {
            Some(g) => match &**g {
                candle_core::Storage::Cpu(c) => &c.as_slice::<T>().expect("dtype checked in host")[self.range.clone()],
                _ => unreachable!("host only borrows cpu storage"),
            },
            None => &self.owned,
        }
    }
}

fn host<T: Real>(t: &Tensor) -> candle_core::Result<Host<'_, T>> {
    if t.dtype() == T::DTYPE {
        let (guard, layout) = t.storage_and_layout();
        if let (candle_core::Storage::Cpu(_), Some((start, end))) = (&*guard, layout.contiguous_offsets()) {
            return Ok(Host {
                guard: Some(guard),
                range: start..end,
                owned: Vec::new(),
            });
        }
    }
    Ok(Host {
        guard: None,
        range: 0..0,
        owned: t.flatten_all()?.to_vec1::<T>()?,
    })
}

/// Run `f` over the contiguous input slice for f32 or f64 storage.
macro_rules! dispatch_fwd {
    ($name:expr, $s:expr, $l:expr, |$x:ident| $body:expr) => {
        match $s {
            CpuStorage::F32(v) => {
                let $x = contiguous_slice(v, $l)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $x = contiguous_slice(v, $l)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{} supports f32 or f64 only", $name),
        }
    };
}

/// Same as `dispatch_fwd` for backward passes that read tensors back to the host.
macro_rules! dispatch_bwd {
    ($name:expr, $dtype:expr, $shape:expr, $dev:expr, <$t:ident> $body:expr) => {
        match $dtype {
            DType::F32 => {
                type $t = f32;
                Tensor::from_vec($body, $shape, $dev)?
            }
            DType::F64 => {
                type $t = f64;
                Tensor::from_vec($body, $shape, $dev)?
            }
            dt => candle_core::bail!("{} backward: unsupported dtype {dt:?}", $name),
        }
    };
}

// ---------------------------------------------------------------- GELU

const GELU_C: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's `tanh` is several times slower and the
/// absolute error here stays within a few ulp of one.
fn tanh<T: Real>(x: T) -> T {
    let e = (T::from(-2.0).unwrap() * x.abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if x < T::zero() {
        -t
    } else {
        t
    }
}

fn gelu_fwd<T: Real>(x: &[T]) -> Vec<T> {
    let k = T::from((2.0 / std::f64::consts::PI).sqrt()).unwrap();
    let c = T::from(GELU_C).unwrap();
    let half = T::from(0.5).unwrap();
    x.iter()
        .map(|&v| half * v * (T::one() + tanh(k * (v + c * v * v * v))))
        .collect()
}

fn gelu_bwd<T: Real>(x: &[T], g: &[T]) -> Vec<T> {
    let k = T::from((2.0 / std::f64::consts::PI).sqrt()).unwrap();
    let c = T::from(GELU_C).unwrap();
    let c3 = T::from(3.0 * GELU_C).unwrap();
    let half = T::from(0.5).unwrap();
    x.iter()
        .zip(g)
        .map(|(&v, &gv)| {
            let th = tanh(k * (v + c * v * v * v));
            let d = half * (T::one() + th) + half * v * (T::one() - th * th) * k * (T::one() + c3 * v * v);
            gv * d
        })
        .collect()
}

struct GeluOp;

impl CustomOp1 for GeluOp {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = dispatch_fwd!("fused-gelu", s, l, |x| gelu_fwd(x));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = dispatch_bwd!("fused-gelu", arg.dtype(), arg.shape(), arg.device(), <T> gelu_bwd::<T>(&host(arg)?, &host(grad)?));
        Ok(Some(g))
    }
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GeluOp)?)
}

// ------------------------------------------------------ row normalization

fn row_stats<T: Real>(row: &[T]) -> (T, T) {
    let n = T::from(row.len()).unwrap();
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, (var + T::from(LN_EPS).unwrap()).sqrt())
}

fn normalize_fwd<T: Real>(x: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let (mean, std) = row_stats(row);
        out.extend(row.iter().map(|&v| (v - mean) / std));
    }
    out
}

fn normalize_bwd<T: Real>(x: &[T], g: &[T], d: usize) -> Vec<T> {
    let n = T::from(d).unwrap();
    let mut out = Vec::with_capacity(x.len());
    for (row, grow) in x.chunks(d).zip(g.chunks(d)) {
        let (mean, std) = row_stats(row);
        let mut g_mean = T::zero();
        let mut gy_mean = T::zero();
        for (&v, &gv) in row.iter().zip(grow) {
            g_mean += gv;
            gy_mean += gv * (v - mean) / std;
        }
        g_mean = g_mean / n;
        gy_mean = gy_mean / n;
        out.extend(
            row.iter()
                .zip(grow)
                .map(|(&v, &gv)| (gv - g_mean - (v - mean) / std * gy_mean) / std),
        );
    }
    out
}

struct NormalizeOp;

impl CustomOp1 for NormalizeOp {
    fn name(&self) -> &'static str {
        "fused-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = *l.dims().last().unwrap_or(&1);
        let out = dispatch_fwd!("fused-normalize", s, l, |x| normalize_fwd(x, d));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = *arg.dims().last().unwrap_or(&1);
        let g = dispatch_bwd!("fused-normalize", arg.dtype(), arg.shape(), arg.device(), <T> normalize_bwd::<T>(&host(arg)?, &host(grad)?, d));
        Ok(Some(g))
    }
}

/// Zero-mean, unit-variance rows over the last axis.
pub fn normalize(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(crate::error::ImgError::InvalidInput("normalize needs rank >= 1".into()));
    }
    Ok(x.contiguous()?.apply_op1(NormalizeOp)?)
}

fn column_sums<T: Real>(g: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d];
    for row in g.chunks(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

// ------------------------------------------------------------- bias add

fn add_bias_fwd<T: Real>(x: &[T], b: &[T]) -> Vec<T> {
    let d = b.len();
    let mut out = x.to_vec();
    for row in out.chunks_mut(d) {
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
    out
}

struct AddBiasOp;

impl CustomOp2 for AddBiasOp {
    fn name(&self) -> &'static str {
        "fused-add-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => {
                CpuStorage::F32(add_bias_fwd(contiguous_slice(x, l1)?, contiguous_slice(b, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(b)) => {
                CpuStorage::F64(add_bias_fwd(contiguous_slice(x, l1)?, contiguous_slice(b, l2)?))
            }
            _ => candle_core::bail!("fused-add-bias supports matching f32 or f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let d = b.elem_count();
        let db = dispatch_bwd!("fused-add-bias", b.dtype(), b.shape(), b.device(), <T> column_sums::<T>(&host(grad)?, d));
        Ok((Some(grad.clone()), Some(db)))
    }
}

/// `x + b` with `b` (`[d]`) broadcast over the leading axes of `x` (`[.., d]`).
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.rank() != 1 || x.dims().last() != Some(&b.elem_count()) {
        return Err(crate::error::ImgError::Config(format!(
            "bias {:?} does not match input {:?}",
            b.dims(),
            x.dims()
        )));
    }
    Ok(x.contiguous()?.apply_op2(&b.contiguous()?, AddBiasOp)?)
}

// ----------------------------------------------------------- layer norm

fn layer_norm_fwd<T: Real>(x: &[T], gain: &[T], bias: &[T]) -> Vec<T> {
    let d = gain.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let (mean, std) = row_stats(row);
        let inv_std = T::one() / std;
        out.extend(row.iter().zip(gain.iter().zip(bias)).map(|(&v, (&g, &b))| (v - mean) * inv_std * g + b));
    }
    out
}

/// Gradients for input, gain and bias.
fn layer_norm_bwd<T: Real>(x: &[T], gain: &[T], g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gain.len();
    let inv_n = T::one() / T::from(d).unwrap();
    let mut dx = Vec::with_capacity(x.len());
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    let mut gy = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    for (row, grow) in x.chunks(d).zip(g.chunks(d)) {
        let (mean, std) = row_stats(row);
        let inv_std = T::one() / std;
        let mut g_mean = T::zero();
        let mut gx_mean = T::zero();
        for i in 0..d {
            xhat[i] = (row[i] - mean) * inv_std;
            dgain[i] += grow[i] * xhat[i];
            dbias[i] += grow[i];
            gy[i] = grow[i] * gain[i];
            g_mean += gy[i];
            gx_mean += gy[i] * xhat[i];
        }
        g_mean = g_mean * inv_n;
        gx_mean = gx_mean * inv_n;
        dx.extend((0..d).map(|i| (gy[i] - g_mean - xhat[i] * gx_mean) * inv_std));
    }
    (dx, dgain, dbias)
}

struct LayerNormOp;

impl CustomOp3 for LayerNormOp {
    fn name(&self) -> &'static str {
        "fused-layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(layer_norm_fwd(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                contiguous_slice(b, l3)?,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(layer_norm_fwd(
                contiguous_slice(x, l1)?,
                contiguous_slice(g, l2)?,
                contiguous_slice(b, l3)?,
            )),
            _ => candle_core::bail!("fused-layer-norm supports matching f32 or f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gain: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dev = x.device();
        macro_rules! run {
            ($t:ty) => {{
                let (dx, dg, db) = layer_norm_bwd::<$t>(&host(x)?, &host(gain)?, &host(grad)?);
                (
                    Tensor::from_vec(dx, x.shape(), dev)?,
                    Tensor::from_vec(dg, gain.shape(), dev)?,
                    Tensor::from_vec(db, gain.shape(), dev)?,
                )
            }};
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => candle_core::bail!("fused-layer-norm backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Row normalization over the last axis followed by `· gain + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = gain.elem_count();
    if gain.rank() != 1 || bias.dims() != gain.dims() || x.dims().last() != Some(&d) {
        return Err(crate::error::ImgError::Config(format!(
            "layer norm of width {d} applied to {:?}",
            x.dims()
        )));
    }
    Ok(x.contiguous()?.apply_op3(&gain.contiguous()?, &bias.contiguous()?, LayerNormOp)?)
}

// ---------------------------------------------------------------- masks
//
// Generic multiplication also differentiates with respect to the mask, which
// is a constant; these ops pass gradient to the data operand only.

fn mask_rows_fwd<T: Real>(x: &[T], mask: &[T]) -> Vec<T> {
    let d = x.len() / mask.len().max(1);
    let mut out = x.to_vec();
    for (row, &m) in out.chunks_mut(d.max(1)).zip(mask) {
        row.iter_mut().for_each(|v| *v = *v * m);
    }
    out
}

struct MaskRowsOp;

impl CustomOp2 for MaskRowsOp {
    fn name(&self) -> &'static str {
        "fused-mask-rows"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(m)) => {
                CpuStorage::F32(mask_rows_fwd(contiguous_slice(x, l1)?, contiguous_slice(m, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(m)) => {
                CpuStorage::F64(mask_rows_fwd(contiguous_slice(x, l1)?, contiguous_slice(m, l2)?))
            }
            _ => candle_core::bail!("fused-mask-rows supports matching f32 or f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, mask: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = dispatch_bwd!("fused-mask-rows", x.dtype(), x.shape(), x.device(), <T> mask_rows_fwd::<T>(&host(grad)?, &host(mask)?));
        Ok((Some(g), None))
    }
}

/// Zero rows of `[B, T, d]` where `mask` (`[B, T]`) is zero. No gradient
/// reaches the mask.
pub fn mask_rows(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, t, _) = x.dims3()?;
    if mask.dims() != [b, t] {
        return Err(crate::error::ImgError::InvalidInput(format!(
            "row mask {:?} does not match input {:?}",
            mask.dims(),
            x.dims()
        )));
    }
    Ok(x.contiguous()?.apply_op2(&mask.contiguous()?, MaskRowsOp)?)
}

fn mask_logits_fwd<T: Real>(x: &[T], mask: &[T]) -> Vec<T> {
    let neg = T::from(-super::MASK_NEG).unwrap();
    x.iter().zip(mask).map(|(&v, &m)| v * m + (m - T::one()) * neg).collect()
}

fn mul_elementwise<T: Real>(x: &[T], y: &[T]) -> Vec<T> {
    x.iter().zip(y).map(|(&a, &b)| a * b).collect()
}

struct MaskLogitsOp;

impl CustomOp2 for MaskLogitsOp {
    fn name(&self) -> &'static str {
        "fused-mask-logits"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(m)) => {
                CpuStorage::F32(mask_logits_fwd(contiguous_slice(x, l1)?, contiguous_slice(m, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(m)) => {
                CpuStorage::F64(mask_logits_fwd(contiguous_slice(x, l1)?, contiguous_slice(m, l2)?))
            }
            _ => candle_core::bail!("fused-mask-logits supports matching f32 or f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, mask: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = dispatch_bwd!("fused-mask-logits", x.dtype(), x.shape(), x.device(), <T> mul_elementwise::<T>(&host(grad)?, &host(mask)?));
        Ok((Some(g), None))
    }
}

/// Replace logits at masked positions with [`super::MASK_NEG`]; `mask`
/// broadcasts to `logits` and receives no gradient.
pub fn mask_logits(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mask = mask.broadcast_as(logits.shape())?.contiguous()?;
    Ok(logits.contiguous()?.apply_op2(&mask, MaskLogitsOp)?)
}

// --------------------------------------------------------------- softmax

/// With `ordered`, each row's normalizer is summed in ascending order so that
/// permuting a row permutes the output exactly.
fn softmax_fwd<T: Real>(x: &[T], d: usize, ordered: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let mut sorted = Vec::with_capacity(if ordered { d } else { 0 });
    for row in x.chunks(d) {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| Float::max(a, v));
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        if ordered {
            sorted.clear();
            sorted.extend_from_slice(&out[start..]);
            sorted.sort_by(|a: &T, b: &T| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            sum = sorted.iter().fold(T::zero(), |a, &e| a + e);
        }
        out[start..].iter_mut().for_each(|e| *e = *e / sum);
    }
    out
}

fn softmax_bwd<T: Real>(y: &[T], g: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
        out.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
    }
    out
}

struct SoftmaxOp {
    ordered: bool,
}

impl CustomOp1 for SoftmaxOp {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = *l.dims().last().unwrap_or(&1);
        let out = dispatch_fwd!("fused-softmax", s, l, |x| softmax_fwd(x, d, self.ordered));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = *arg.dims().last().unwrap_or(&1);
        let g = dispatch_bwd!("fused-softmax", arg.dtype(), arg.shape(), arg.device(), <T> softmax_bwd::<T>(&host(res)?, &host(grad)?, d));
        Ok(Some(g))
    }
}

fn softmax_with(x: &Tensor, dim: usize, ordered: bool) -> Result<Tensor> {
    let last = x.rank().checked_sub(1).ok_or_else(|| crate::error::ImgError::InvalidInput("softmax needs rank >= 1".into()))?;
    if dim == last {
        return Ok(x.contiguous()?.apply_op1(SoftmaxOp { ordered })?);
    }
    let y = x.transpose(dim, last)?.contiguous()?.apply_op1(SoftmaxOp { ordered })?;
    Ok(y.transpose(dim, last)?.contiguous()?)
}

/// Softmax over `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    softmax_with(x, dim, false)
}

/// Softmax over `dim` whose result does not depend on the order of the
/// entries along `dim`: permuting them permutes the output bit for bit.
/// Sorts every row, so meant for short axes.
pub fn softmax_symmetric(x: &Tensor, dim: usize) -> Result<Tensor> {
    softmax_with(x, dim, true)
}

// --------------------------------------------------------- conv windows

fn windows_fwd<T: Real>(x: &[T], b: usize, t: usize, c: usize, k: usize) -> Vec<T> {
    let half = (k - 1) / 2;
    let mut out = vec![T::zero(); b * t * k * c];
    for bi in 0..b {
        for ti in 0..t {
            let dst = (bi * t + ti) * k * c;
            for j in 0..k {
                let src = ti + j;
                if src < half || src - half >= t {
                    continue;
                }
                let s = (bi * t + src - half) * c;
                out[dst + j * c..dst + (j + 1) * c].copy_from_slice(&x[s..s + c]);
            }
        }
    }
    out
}

fn windows_bwd<T: Real>(g: &[T], b: usize, t: usize, c: usize, k: usize) -> Vec<T> {
    let half = (k - 1) / 2;
    let mut out = vec![T::zero(); b * t * c];
    for bi in 0..b {
        for ti in 0..t {
            let src = (bi * t + ti) * k * c;
            for j in 0..k {
                let pos = ti + j;
                if pos < half || pos - half >= t {
                    continue;
                }
                let d = (bi * t + pos - half) * c;
                for (o, &gv) in out[d..d + c].iter_mut().zip(&g[src + j * c..src + (j + 1) * c]) {
                    *o += gv;
                }
            }
        }
    }
    out
}

struct WindowsOp {
    kernel: usize,
}

impl CustomOp1 for WindowsOp {
    fn name(&self) -> &'static str {
        "fused-conv-windows"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, t, c) = l.shape().dims3()?;
        let k = self.kernel;
        let out = dispatch_fwd!("fused-conv-windows", s, l, |x| windows_fwd(x, b, t, c, k));
        Ok((out, Shape::from((b, t, k * c))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, t, c) = arg.dims3()?;
        let k = self.kernel;
        let g = dispatch_bwd!("fused-conv-windows", arg.dtype(), arg.shape(), arg.device(), <T> windows_bwd::<T>(&host(grad)?, b, t, c, k));
        Ok(Some(g))
    }
}

/// `[B, T, c]` → `[B, T, k·c]`, row `t` holding input rows `t-(k-1)/2 ..= t+(k-1)/2`
/// with zeros past either end.
pub fn conv_windows(x: &Tensor, kernel: usize) -> Result<Tensor> {
    if kernel % 2 == 0 {
        return Err(crate::error::ImgError::Config(format!("kernel size must be odd, got {kernel}")));
    }
    if kernel == 1 {
        return Ok(x.clone());
    }
    x.dims3()?;
    Ok(x.contiguous()?.apply_op1(WindowsOp { kernel })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn input(shape: &[usize], seed: u64) -> Var {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Var::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Compare value and gradient of `fused` against a composite reference
    /// under a random linear read-out.
    fn matches_reference(
        shape: &[usize],
        fused: impl Fn(&Tensor) -> Tensor,
        reference: impl Fn(&Tensor) -> Tensor,
    ) {
        let x = input(shape, 3);
        let a = fused(x.as_tensor());
        let r = reference(x.as_tensor());
        let w = input(a.dims(), 9);
        let diff = (&a - &r).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "value diff {diff}");
        let ga = (&a * w.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = (&r * w.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let (ga, gr) = (ga.get(&x).unwrap(), gr.get(&x).unwrap());
        let diff = (ga - gr).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-10, "grad diff {diff}");
    }

    #[test]
    fn gelu_value_and_derivative() {
        let x = input(&[4, 9], 3);
        let y = gelu(x.as_tensor()).unwrap();
        let diff = (&y - x.as_tensor().gelu().unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12, "value diff {diff}");
        let g = y.sum_all().unwrap().backward().unwrap().get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xs = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for (&v, &gv) in xs.iter().zip(&g) {
            let fd = (gelu_fwd(&[v + h])[0] - gelu_fwd(&[v - h])[0]) / (2.0 * h);
            assert!((fd - gv).abs() < 1e-8, "x={v}: {gv} vs {fd}");
        }
    }

    #[test]
    fn normalize_matches_composite() {
        matches_reference(
            &[2, 4, 6],
            |x| normalize(x).unwrap(),
            |x| {
                let mean = x.mean_keepdim(D::Minus1).unwrap();
                let c = x.broadcast_sub(&mean).unwrap();
                let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
                c.broadcast_div(&(var + LN_EPS).unwrap().sqrt().unwrap()).unwrap()
            },
        );
    }

    #[test]
    fn add_bias_matches_broadcast_add() {
        let b = input(&[5], 4);
        matches_reference(&[2, 3, 5], |x| add_bias(x, b.as_tensor()).unwrap(), |x| x.broadcast_add(b.as_tensor()).unwrap());
        let (x, w) = (input(&[2, 3, 5], 1), input(&[2, 3, 5], 2));
        let ga = (add_bias(x.as_tensor(), b.as_tensor()).unwrap() * w.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = (x.as_tensor().broadcast_add(b.as_tensor()).unwrap() * w.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let diff = (ga.get(&b).unwrap() - gr.get(&b).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
        assert!(add_bias(x.as_tensor(), &input(&[4], 0).as_tensor().clone()).is_err());
    }

    #[test]
    fn layer_norm_matches_composite() {
        let (gain, bias) = (input(&[6], 5), input(&[6], 6));
        let composite = |x: &Tensor| {
            normalize(x).unwrap().broadcast_mul(gain.as_tensor()).unwrap().broadcast_add(bias.as_tensor()).unwrap()
        };
        matches_reference(&[2, 4, 6], |x| layer_norm(x, gain.as_tensor(), bias.as_tensor()).unwrap(), composite);
        let (x, w) = (input(&[2, 4, 6], 1), input(&[2, 4, 6], 2));
        let ga = (layer_norm(x.as_tensor(), gain.as_tensor(), bias.as_tensor()).unwrap() * w.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = (composite(x.as_tensor()) * w.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&gain, &bias] {
            let diff = (ga.get(v).unwrap() - gr.get(v).unwrap()).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn masks_match_composite_and_skip_mask_gradient() {
        let m = Tensor::new(&[[1.0f64, 0.0, 1.0], [0.0, 1.0, 1.0]], &Device::Cpu).unwrap();
        matches_reference(&[2, 3, 4], |x| mask_rows(x, &m).unwrap(), |x| x.broadcast_mul(&m.unsqueeze(2).unwrap()).unwrap());
        let m4 = m.reshape((2, 1, 3)).unwrap();
        matches_reference(
            &[2, 5, 3],
            |x| mask_logits(x, &m4).unwrap(),
            |x| {
                let neg = ((&m4 - 1.0).unwrap() * -super::super::MASK_NEG).unwrap();
                x.broadcast_mul(&m4).unwrap().broadcast_add(&neg).unwrap()
            },
        );
        let mv = Var::from_tensor(&m).unwrap();
        let x = input(&[2, 3, 4], 1);
        let g = mask_rows(x.as_tensor(), mv.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(g.get(&mv).is_none());
        assert!(mask_rows(x.as_tensor(), &m.t().unwrap()).is_err());
    }

    #[test]
    fn softmax_matches_composite_on_every_axis() {
        for dim in 0..3 {
            matches_reference(&[3, 4, 5], |x| softmax(x, dim).unwrap(), |x| candle_nn::ops::softmax(x, dim).unwrap());
            matches_reference(&[3, 4, 5], |x| softmax_symmetric(x, dim).unwrap(), |x| candle_nn::ops::softmax(x, dim).unwrap());
        }
    }

    #[test]
    fn conv_windows_matches_pad_and_shift() {
        for k in [3, 5] {
            matches_reference(
                &[2, 6, 3],
                |x| conv_windows(x, k).unwrap(),
                |x| {
                    let h = (k - 1) / 2;
                    let p = x.pad_with_zeros(1, h, h).unwrap();
                    let parts: Vec<_> = (0..k).map(|j| p.narrow(1, j, 6).unwrap()).collect();
                    Tensor::cat(&parts, 2).unwrap()
                },
            );
        }
    }
}
