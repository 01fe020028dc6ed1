//! Gated recurrent units.
//!
//! [`gru_sequence`] runs a whole sequence as a single graph node with a
//! hand-written backward pass; unrolling the recurrence through generic
//! tensor ops costs several thousand tiny nodes per batch. [`GruCell`] is the
//! op-by-op version, used for the few recurrent steps of slot attention and as
//! an independent reference in tests.
//!
//! Gate layout along the `3H` axis is `[reset, update, candidate]`:
//!
//! ```text
//! r = σ(xr + h·Ur)    z = σ(xz + h·Uz)    n = tanh(xn + r ⊙ (h·Un))
//! h' = (1 - z) ⊙ n + z ⊙ h
//! ```

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor};
use num_traits::Float;

use super::{join, Linear, ParamStore};
use crate::error::{ImgError, Result};

trait Real: Float + std::ops::AddAssign + Send + Sync + 'static {}

impl<T: Float + std::ops::AddAssign + Send + Sync + 'static> Real for T {}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct Dims {
    batch: usize,
    time: usize,
    hidden: usize,
}

/// Per-step quantities kept for the backward pass.
struct Trace<T> {
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hu_n: Vec<T>,
    h_prev: Vec<T>,
}

fn step_order(time: usize, reverse: bool) -> impl Iterator<Item = usize> {
    (0..time).map(move |s| if reverse { time - 1 - s } else { s })
}

fn forward_impl<T: Real>(
    xw: &[T],
    u: &[T],
    mask: &[T],
    dims: &Dims,
    reverse: bool,
    mut trace: Option<&mut Trace<T>>,
) -> Vec<T> {
    let Dims {
        batch,
        time,
        hidden: h,
    } = *dims;
    let g = 3 * h;
    let mut out = vec![T::zero(); batch * time * h];
    let mut hu = vec![T::zero(); g];
    for b in 0..batch {
        let mut state = vec![T::zero(); h];
        for t in step_order(time, reverse) {
            if mask[b * time + t] <= T::from(0.5).unwrap() {
                continue;
            }
            hu.iter_mut().for_each(|v| *v = T::zero());
            for (i, &hi) in state.iter().enumerate() {
                let row = &u[i * g..(i + 1) * g];
                for (acc, &w) in hu.iter_mut().zip(row) {
                    *acc += hi * w;
                }
            }
            let x = &xw[(b * time + t) * g..(b * time + t + 1) * g];
            let base = (b * time + t) * h;
            for j in 0..h {
                let r = sigmoid(x[j] + hu[j]);
                let z = sigmoid(x[h + j] + hu[h + j]);
                let n = (x[2 * h + j] + r * hu[2 * h + j]).tanh();
                if let Some(tr) = trace.as_deref_mut() {
                    tr.r[base + j] = r;
                    tr.z[base + j] = z;
                    tr.n[base + j] = n;
                    tr.hu_n[base + j] = hu[2 * h + j];
                    tr.h_prev[base + j] = state[j];
                }
                state[j] = (T::one() - z) * n + z * state[j];
            }
            out[base..base + h].copy_from_slice(&state);
        }
    }
    out
}

/// Returns `(d xw, d u)`.
fn backward_impl<T: Real>(
    xw: &[T],
    u: &[T],
    mask: &[T],
    grad_out: &[T],
    dims: &Dims,
    reverse: bool,
) -> (Vec<T>, Vec<T>) {
    let Dims {
        batch,
        time,
        hidden: h,
    } = *dims;
    let g = 3 * h;
    let n_state = batch * time * h;
    let mut tr = Trace {
        r: vec![T::zero(); n_state],
        z: vec![T::zero(); n_state],
        n: vec![T::zero(); n_state],
        hu_n: vec![T::zero(); n_state],
        h_prev: vec![T::zero(); n_state],
    };
    forward_impl(xw, u, mask, dims, reverse, Some(&mut tr));

    let mut dxw = vec![T::zero(); batch * time * g];
    let mut du = vec![T::zero(); h * g];
    let mut dhu = vec![T::zero(); g];
    let order: Vec<usize> = step_order(time, reverse).collect();
    for b in 0..batch {
        let mut dh = vec![T::zero(); h];
        for &t in order.iter().rev() {
            if mask[b * time + t] <= T::from(0.5).unwrap() {
                continue;
            }
            let base = (b * time + t) * h;
            let mut dh_prev = vec![T::zero(); h];
            for j in 0..h {
                let total = dh[j] + grad_out[base + j];
                let (r, z, n) = (tr.r[base + j], tr.z[base + j], tr.n[base + j]);
                let dn_pre = total * (T::one() - z) * (T::one() - n * n);
                let dz_pre = total * (tr.h_prev[base + j] - n) * z * (T::one() - z);
                let dr_pre = dn_pre * tr.hu_n[base + j] * r * (T::one() - r);
                dh_prev[j] = total * z;
                let gx = (b * time + t) * g;
                dxw[gx + j] = dr_pre;
                dxw[gx + h + j] = dz_pre;
                dxw[gx + 2 * h + j] = dn_pre;
                dhu[j] = dr_pre;
                dhu[h + j] = dz_pre;
                dhu[2 * h + j] = dn_pre * r;
            }
            for i in 0..h {
                let hp = tr.h_prev[base + i];
                let row_u = &u[i * g..(i + 1) * g];
                let row_du = &mut du[i * g..(i + 1) * g];
                let mut acc = T::zero();
                for k in 0..g {
                    row_du[k] += hp * dhu[k];
                    acc += dhu[k] * row_u[k];
                }
                dh_prev[i] += acc;
            }
            dh = dh_prev;
        }
    }
    (dxw, du)
}

struct GruSeqOp {
    reverse: bool,
}

pub(super) fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("gru-seq expects contiguous inputs"),
    }
}

fn op_dims(l1: &Layout, l2: &Layout, l3: &Layout) -> candle_core::Result<Dims> {
    let (batch, time, g) = l1.shape().dims3()?;
    let (h, g2) = l2.shape().dims2()?;
    let (b3, t3) = l3.shape().dims2()?;
    if g != 3 * h || g2 != g || b3 != batch || t3 != time {
        candle_core::bail!(
            "gru-seq shape mismatch: xw {:?}, u {:?}, mask {:?}",
            l1.shape(),
            l2.shape(),
            l3.shape()
        );
    }
    Ok(Dims {
        batch,
        time,
        hidden: h,
    })
}

impl CustomOp3 for GruSeqOp {
    fn name(&self) -> &'static str {
        "gru-seq"
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
        let dims = op_dims(l1, l2, l3)?;
        let shape = Shape::from((dims.batch, dims.time, dims.hidden));
        let storage = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(u), CpuStorage::F32(m)) => {
                CpuStorage::F32(forward_impl(
                    contiguous_slice(x, l1)?,
                    contiguous_slice(u, l2)?,
                    contiguous_slice(m, l3)?,
                    &dims,
                    self.reverse,
                    None,
                ))
            }
            (CpuStorage::F64(x), CpuStorage::F64(u), CpuStorage::F64(m)) => {
                CpuStorage::F64(forward_impl(
                    contiguous_slice(x, l1)?,
                    contiguous_slice(u, l2)?,
                    contiguous_slice(m, l3)?,
                    &dims,
                    self.reverse,
                    None,
                ))
            }
            _ => candle_core::bail!("gru-seq supports matching f32 or f64 inputs only"),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        xw: &Tensor,
        u: &Tensor,
        mask: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (batch, time, g) = xw.dims3()?;
        let dims = Dims {
            batch,
            time,
            hidden: g / 3,
        };
        let dev = xw.device();
        let (dxw, du) = match xw.dtype() {
            DType::F32 => {
                let (a, b) = backward_impl(
                    &xw.flatten_all()?.to_vec1::<f32>()?,
                    &u.flatten_all()?.to_vec1::<f32>()?,
                    &mask.flatten_all()?.to_vec1::<f32>()?,
                    &grad_res.flatten_all()?.to_vec1::<f32>()?,
                    &dims,
                    self.reverse,
                );
                (
                    Tensor::from_vec(a, xw.shape(), dev)?,
                    Tensor::from_vec(b, u.shape(), dev)?,
                )
            }
            DType::F64 => {
                let (a, b) = backward_impl(
                    &xw.flatten_all()?.to_vec1::<f64>()?,
                    &u.flatten_all()?.to_vec1::<f64>()?,
                    &mask.flatten_all()?.to_vec1::<f64>()?,
                    &grad_res.flatten_all()?.to_vec1::<f64>()?,
                    &dims,
                    self.reverse,
                );
                (
                    Tensor::from_vec(a, xw.shape(), dev)?,
                    Tensor::from_vec(b, u.shape(), dev)?,
                )
            }
            dt => candle_core::bail!("gru-seq backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(dxw), Some(du), None))
    }
}

/// Run a GRU over `[B, T, 3H]` pre-projected inputs with recurrent weight `u` (`[H, 3H]`).
///
/// Masked steps emit zero and leave the hidden state untouched, so padding
/// never leaks into valid positions in either direction.
pub fn gru_sequence(xw: &Tensor, u: &Tensor, mask: &Tensor, reverse: bool) -> Result<Tensor> {
    let mask = mask.detach();
    Ok(xw
        .contiguous()?
        .apply_op3(&u.contiguous()?, &mask.contiguous()?, GruSeqOp { reverse })?)
}

/// Bidirectional GRU; output is `[forward; backward]` along the feature axis.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub fwd_in: Linear,
    pub fwd_u: Tensor,
    pub bwd_in: Linear,
    pub bwd_u: Tensor,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fwd_in: Linear::new(store, &join(prefix, "fwd_in"), d_in, 3 * hidden)?,
            fwd_u: store.fan_in(&join(prefix, "fwd_u"), &[hidden, 3 * hidden], hidden)?,
            bwd_in: Linear::new(store, &join(prefix, "bwd_in"), d_in, 3 * hidden)?,
            bwd_u: store.fan_in(&join(prefix, "bwd_u"), &[hidden, 3 * hidden], hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let f = gru_sequence(&self.fwd_in.forward(x)?, &self.fwd_u, mask, false)?;
        let b = gru_sequence(&self.bwd_in.forward(x)?, &self.bwd_u, mask, true)?;
        Ok(Tensor::cat(&[f, b], 2)?)
    }
}

/// Single GRU step built from ordinary tensor ops.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input: Linear,
    pub u: Tensor,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, &join(prefix, "input"), d_in, 3 * hidden)?,
            u: store.fan_in(&join(prefix, "u"), &[hidden, 3 * hidden], hidden)?,
            hidden,
        })
    }

    /// `x`: `[R, d_in]`, `h`: `[R, H]`.
    pub fn forward(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        self.step(&self.input.forward(x)?, h)
    }

    /// One step from already-projected inputs `xw` (`[R, 3H]`).
    pub fn step(&self, xw: &Tensor, h: &Tensor) -> Result<Tensor> {
        let hd = self.hidden;
        if h.dim(1)? != hd {
            return Err(ImgError::Config(format!(
                "gru cell expects hidden width {hd}, got {}",
                h.dim(1)?
            )));
        }
        let hu = h.matmul(&self.u)?;
        let r = candle_nn::ops::sigmoid(&(xw.narrow(1, 0, hd)? + hu.narrow(1, 0, hd)?)?)?;
        let z = candle_nn::ops::sigmoid(&(xw.narrow(1, hd, hd)? + hu.narrow(1, hd, hd)?)?)?;
        let n = (xw.narrow(1, 2 * hd, hd)? + (&r * hu.narrow(1, 2 * hd, hd)?)?)?.tanh()?;
        let keep = (&z * h)?;
        Ok(((z.affine(-1.0, 1.0)? * n)? + keep)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        let mut s = ParamStore::new(seed, DType::F64);
        s.uniform("t", shape, 1.0).unwrap()
    }

    /// Unrolled op-by-op reference honouring the same masking rule.
    fn unrolled(cell: &GruCell, xw: &Tensor, mask: &[Vec<f64>], reverse: bool) -> Vec<Vec<Vec<f64>>> {
        let (b, t, _) = xw.dims3().unwrap();
        let h = cell.hidden;
        let mut out = vec![vec![vec![0.0; h]; t]; b];
        for bi in 0..b {
            let mut state = Tensor::zeros((1, h), DType::F64, &Device::Cpu).unwrap();
            for step in step_order(t, reverse) {
                if mask[bi][step] == 0.0 {
                    continue;
                }
                let x = xw.narrow(0, bi, 1).unwrap().narrow(1, step, 1).unwrap().squeeze(1).unwrap();
                state = cell.step(&x, &state).unwrap();
                out[bi][step] = state.squeeze(0).unwrap().to_vec1().unwrap();
            }
        }
        out
    }

    #[test]
    fn fused_matches_unrolled_cell() {
        let mut store = ParamStore::new(3, DType::F64);
        let cell = GruCell::new(&mut store, "c", 4, 3).unwrap();
        let xw = rand_tensor(11, &[2, 5, 9]);
        let mask_rows = vec![vec![1.0, 1.0, 0.0, 1.0, 0.0], vec![1.0; 5]];
        let mask = Tensor::new(mask_rows.clone(), &Device::Cpu).unwrap();
        for reverse in [false, true] {
            let fused = gru_sequence(&xw, &cell.u, &mask, reverse)
                .unwrap()
                .to_vec3::<f64>()
                .unwrap();
            let reference = unrolled(&cell, &xw, &mask_rows, reverse);
            for (a, b) in fused.iter().flatten().flatten().zip(reference.iter().flatten().flatten()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn fused_gradients_match_finite_differences() {
        let xw = Var::from_tensor(&rand_tensor(5, &[2, 4, 6])).unwrap();
        let u = Var::from_tensor(&rand_tensor(6, &[2, 6])).unwrap();
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0, 1.0], [1.0, 1.0, 1.0, 1.0]], &Device::Cpu).unwrap();
        let weights = rand_tensor(9, &[2, 4, 2]);
        for reverse in [false, true] {
            let loss = |xw: &Tensor, u: &Tensor| -> f64 {
                gru_sequence(xw, u, &mask, reverse)
                    .unwrap()
                    .mul(&weights)
                    .unwrap()
                    .sum_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap()
            };
            let out = gru_sequence(&xw, &u, &mask, reverse).unwrap();
            let grads = (out * &weights).unwrap().sum_all().unwrap().backward().unwrap();
            for var in [&xw, &u] {
                let analytic = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let base = var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
                for i in 0..base.len() {
                    let eps = 1e-6;
                    let mut plus = base.clone();
                    plus[i] += eps;
                    let mut minus = base.clone();
                    minus[i] -= eps;
                    let shape = var.shape().clone();
                    let eval = |vals: Vec<f64>| {
                        let t = Tensor::from_vec(vals, &shape, &Device::Cpu).unwrap();
                        if std::ptr::eq(var, &xw) {
                            loss(&t, &u)
                        } else {
                            loss(&xw, &t)
                        }
                    };
                    let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
                    assert!(
                        (numeric - analytic[i]).abs() < 1e-7,
                        "reverse={reverse} idx={i}: {numeric} vs {}",
                        analytic[i]
                    );
                }
            }
        }
    }

    #[test]
    fn zero_input_stays_zero() {
        let xw = Tensor::zeros((1, 4, 6), DType::F32, &Device::Cpu).unwrap();
        let u = Tensor::ones((2, 6), DType::F32, &Device::Cpu).unwrap();
        let mask = Tensor::ones((1, 4), DType::F32, &Device::Cpu).unwrap();
        let out = gru_sequence(&xw, &u, &mask, false).unwrap();
        assert!(out.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.0));
    }
}
