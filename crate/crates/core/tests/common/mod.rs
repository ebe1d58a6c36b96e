//! Scalar-loop reference implementations shared by the integration tests.
//! None of them call into the library's numeric code.

#![allow(dead_code)]

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use oryx_core::compressor::CompressorWeights;
use oryx_core::nn::{Linear, Mlp};
use oryx_core::packing::AttentionWeights;
use oryx_core::Scalar;

/// Four-corner bilinear resampling with align-corners coordinates.
pub fn bilinear(table: ArrayView3<'_, f64>, rows: usize, cols: usize) -> Array3<f64> {
    let (g_r, g_c, c) = table.dim();
    let coord = |i: usize, t: usize, g: usize| -> f64 {
        if t == 1 {
            (g - 1) as f64 * 0.5
        } else {
            i as f64 * (g - 1) as f64 / (t - 1) as f64
        }
    };
    let mut out = Array3::zeros((rows, cols, c));
    for i in 0..rows {
        let u = coord(i, rows, g_r);
        let y0 = (u.floor() as usize).min(g_r - 1);
        let y1 = (y0 + 1).min(g_r - 1);
        let fy = u - y0 as f64;
        for j in 0..cols {
            let v = coord(j, cols, g_c);
            let x0 = (v.floor() as usize).min(g_c - 1);
            let x1 = (x0 + 1).min(g_c - 1);
            let fx = v - x0 as f64;
            for k in 0..c {
                out[[i, j, k]] = (1.0 - fy) * (1.0 - fx) * table[[y0, x0, k]]
                    + (1.0 - fy) * fx * table[[y0, x1, k]]
                    + fy * (1.0 - fx) * table[[y1, x0, k]]
                    + fy * fx * table[[y1, x1, k]];
            }
        }
    }
    out
}

fn affine<T: Scalar>(x: &[T], l: &Linear<T>) -> Vec<T> {
    let (d_in, d_out) = l.weight.dim();
    assert_eq!(x.len(), d_in);
    (0..d_out)
        .map(|o| {
            let mut acc = l.bias.as_ref().map_or(T::zero(), |b| b[o]);
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * l.weight[[i, o]];
            }
            acc
        })
        .collect()
}

fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Full multi-head self-attention over one sequence.
pub fn dense_attention<T: Scalar>(x: ArrayView2<'_, T>, w: &AttentionWeights<T>) -> Array2<T> {
    let (n, c) = x.dim();
    let rows: Vec<Vec<T>> = (0..n).map(|i| x.row(i).to_vec()).collect();
    let q: Vec<_> = rows.iter().map(|r| affine(r, &w.q)).collect();
    let k: Vec<_> = rows.iter().map(|r| affine(r, &w.k)).collect();
    let v: Vec<_> = rows.iter().map(|r| affine(r, &w.v)).collect();
    let hd = c / w.heads;
    let scale = T::one() / T::c(hd as f64).sqrt();
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        let mut ctx = vec![T::zero(); c];
        for h in 0..w.heads {
            let band = h * hd..(h + 1) * hd;
            let logits: Vec<T> = (0..n)
                .map(|j| band.clone().map(|d| q[i][d] * k[j][d]).fold(T::zero(), |a, b| a + b) * scale)
                .collect();
            let p = softmax(&logits);
            for d in band {
                ctx[d] = (0..n).map(|j| p[j] * v[j][d]).fold(T::zero(), |a, b| a + b);
            }
        }
        for (o, val) in affine(&ctx, &w.out).into_iter().enumerate() {
            out[[i, o]] = val;
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `fc2(gelu(fc1(x)))` applied row by row.
pub fn mlp(x: ArrayView2<'_, f64>, m: &Mlp<f64>) -> Array2<f64> {
    let d_out = m.fc2.weight.ncols();
    let mut out = Array2::zeros((x.nrows(), d_out));
    for (i, row) in x.rows().into_iter().enumerate() {
        let hidden: Vec<f64> = affine(&row.to_vec(), &m.fc1).into_iter().map(gelu).collect();
        for (o, v) in affine(&hidden, &m.fc2).into_iter().enumerate() {
            out[[i, o]] = v;
        }
    }
    out
}

/// Region cross-attention by brute force: every low-resolution patch
/// attends over the `r²` clamped-index high-resolution patches of its cell,
/// with raw high-resolution features as values.
pub fn region_attention(
    f_l: ArrayView3<'_, f64>,
    f_h: ArrayView3<'_, f64>,
    r: usize,
    w: &CompressorWeights<f64>,
) -> Array3<f64> {
    let (lr, lc, c) = f_l.dim();
    let (hr, hc, _) = f_h.dim();
    let dk = w.phi_q.weight.ncols();
    let mut out = f_l.to_owned();
    for i in 0..lr {
        for j in 0..lc {
            let q = affine(&f_l.slice(ndarray::s![i, j, ..]).to_vec(), &w.phi_q);
            let mut keys = Vec::with_capacity(r * r);
            for a in 0..r {
                for b in 0..r {
                    let y = (i * r + a).min(hr - 1);
                    let x = (j * r + b).min(hc - 1);
                    keys.push(f_h.slice(ndarray::s![y, x, ..]).to_vec());
                }
            }
            let logits: Vec<f64> = keys
                .iter()
                .map(|kv| {
                    let k = affine(kv, &w.phi_k);
                    (0..dk).map(|d| q[d] * k[d]).sum::<f64>() / (dk as f64).sqrt()
                })
                .collect();
            let p = softmax(&logits);
            for ch in 0..c {
                out[[i, j, ch]] += (0..keys.len()).map(|n| p[n] * keys[n][ch]).sum::<f64>();
            }
        }
    }
    out
}

/// Mean over each `r×r` cell with clamped indices.
pub fn cell_means(f_h: ArrayView3<'_, f64>, r: usize) -> Array3<f64> {
    let (hr, hc, c) = f_h.dim();
    let (lr, lc) = (hr.div_ceil(r), hc.div_ceil(r));
    Array3::from_shape_fn((lr, lc, c), |(i, j, ch)| {
        let mut acc = 0.0;
        for a in 0..r {
            for b in 0..r {
                acc += f_h[[(i * r + a).min(hr - 1), (j * r + b).min(hc - 1), ch]];
            }
        }
        acc / (r * r) as f64
    })
}

pub fn max_abs_diff<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
