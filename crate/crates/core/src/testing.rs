//! Plain-`Vec` reference arithmetic used as independent oracles in unit tests.

use candle_core::Tensor;

use crate::nn::ParamStore;

pub type Mat = Vec<Vec<f64>>;

pub fn param(store: &ParamStore, name: &str) -> Tensor {
    store
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .as_tensor()
        .clone()
}

pub fn mat(store: &ParamStore, name: &str) -> Mat {
    param(store, name).to_dtype(candle_core::DType::F64).unwrap().to_vec2().unwrap()
}

pub fn vec1(store: &ParamStore, name: &str) -> Vec<f64> {
    param(store, name).to_dtype(candle_core::DType::F64).unwrap().to_vec1().unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    matmul(x, w)
        .into_iter()
        .map(|row| row.iter().zip(b).map(|(v, bb)| v + bb).collect())
        .collect()
}

/// `prefix.weight` / `prefix.bias` linear layer.
pub fn linear(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let w = mat(store, &format!("{prefix}.weight"));
    match store.get(&format!("{prefix}.bias")) {
        Some(_) => affine(x, &w, &vec1(store, &format!("{prefix}.bias"))),
        None => matmul(x, &w),
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn map(x: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn hadamard(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x * y).collect())
        .collect()
}

pub fn scale(a: &Mat, s: f64) -> Mat {
    map(a, |v| v * s)
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn hcat(parts: &[&Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

pub fn mlp(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let h = map(&linear(store, &format!("{prefix}.fc1"), x), gelu);
    linear(store, &format!("{prefix}.fc2"), &h)
}

pub fn layer_norm(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let g = vec1(store, &format!("{prefix}.gain"));
    let b = vec1(store, &format!("{prefix}.bias"));
    normalize(x)
        .into_iter()
        .map(|r| r.iter().zip(&g).zip(&b).map(|((v, g), b)| v * g + b).collect())
        .collect()
}

pub fn normalize(x: &Mat) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

/// Softmax of `xs` restricted to positions where `keep` is true.
pub fn softmax_masked(xs: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = xs
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs
        .iter()
        .zip(keep)
        .map(|(v, &k)| if k { (v - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Same-padded convolution whose weight is stored as `[k·c_in, c_out]`.
pub fn conv_same(store: &ParamStore, prefix: &str, x: &Mat, kernel: usize) -> Mat {
    let t = x.len();
    let c = x[0].len();
    let half = (kernel - 1) / 2;
    let windows: Mat = (0..t)
        .map(|i| {
            let mut row = Vec::with_capacity(kernel * c);
            for j in 0..kernel {
                let src = i as isize + j as isize - half as isize;
                if src < 0 || src >= t as isize {
                    row.extend(std::iter::repeat_n(0.0, c));
                } else {
                    row.extend_from_slice(&x[src as usize]);
                }
            }
            row
        })
        .collect();
    linear(store, prefix, &windows)
}

/// Multi-head attention with `heads` heads; keys masked by `key_keep`.
pub fn attention(
    store: &ParamStore,
    prefix: &str,
    query: &Mat,
    kv: &Mat,
    key_keep: &[bool],
    heads: usize,
) -> Mat {
    let q = linear(store, &format!("{prefix}.q"), query);
    let k = linear(store, &format!("{prefix}.k"), kv);
    let v = linear(store, &format!("{prefix}.v"), kv);
    let d = q[0].len();
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| (0..dh).map(|c| qi[h * dh + c] * kj[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax_masked(&scores, key_keep);
            for (j, vj) in v.iter().enumerate() {
                for c in 0..dh {
                    ctx[i][h * dh + c] += w[j] * vj[h * dh + c];
                }
            }
        }
    }
    linear(store, &format!("{prefix}.o"), &ctx)
}

pub fn zero_masked(x: &Mat, keep: &[bool]) -> Mat {
    x.iter()
        .zip(keep)
        .map(|(r, &k)| if k { r.clone() } else { vec![0.0; r.len()] })
        .collect()
}

pub fn assert_close(a: &Mat, b: &Mat, tol: f64) {
    assert_eq!(a.len(), b.len(), "row count");
    for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
        assert_eq!(ra.len(), rb.len(), "row {i} width");
        for (j, (x, y)) in ra.iter().zip(rb).enumerate() {
            assert!((x - y).abs() <= tol, "[{i}][{j}]: {x} vs {y}");
        }
    }
}
