//! On-demand token compression.
//!
//! A high-resolution feature map `f_H` is downsampled by `r ∈ {1, 2, 4}` to
//! `f_L`, each low-resolution patch then attends over the `r²` high-resolution
//! patches of its cell,
//!
//! ```text
//! f_L ← f_L + softmax(φ_q(f_L) · φ_k(K)ᵀ / √d_k) · V,   K = V = cell of f_H
//! ```
//!
//! and the result is flattened and projected by one MLP shared by all three
//! paths. There are no value or output projections: `V` is the raw `f_H`.
//! Grids that are not multiples of `r` are padded by edge replication first.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{OryxError, Result};
use crate::init;
use crate::nn::{join, Gradients, Linear, Mlp, MlpCache, Parameterized};
use crate::packing::softmax_rows;
use crate::scalar::Scalar;

/// Downsample ratio per side; token reduction is `ratio²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum Ratio {
    One,
    Two,
    Four,
}

impl Ratio {
    pub const ALL: [Ratio; 3] = [Ratio::One, Ratio::Two, Ratio::Four];

    pub fn get(self) -> usize {
        match self {
            Ratio::One => 1,
            Ratio::Two => 2,
            Ratio::Four => 4,
        }
    }
}

impl TryFrom<usize> for Ratio {
    type Error = OryxError;

    fn try_from(r: usize) -> Result<Self> {
        match r {
            1 => Ok(Ratio::One),
            2 => Ok(Ratio::Two),
            4 => Ok(Ratio::Four),
            other => Err(OryxError::UnsupportedRatio(other)),
        }
    }
}

impl From<Ratio> for usize {
    fn from(r: Ratio) -> usize {
        r.get()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownsampleVariant {
    /// Parameter-free mean over each `r×r` cell.
    AvgPool,
    /// Depthwise `r×r` convolution with stride `r`.
    DwConv,
    /// Depthwise convolution followed by a pointwise two-layer MLP.
    ConvMlp,
}

impl std::str::FromStr for DownsampleVariant {
    type Err = OryxError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avgpool" | "avg" => Ok(Self::AvgPool),
            "dwconv" => Ok(Self::DwConv),
            "convmlp" | "conv-mlp" => Ok(Self::ConvMlp),
            other => Err(OryxError::invalid(format!("unknown downsample variant `{other}`"))),
        }
    }
}

/// `⌈rows/r⌉ · ⌈cols/r⌉`.
pub fn compressed_token_count(rows: usize, cols: usize, r: Ratio) -> usize {
    rows.div_ceil(r.get()) * cols.div_ceil(r.get())
}

/// Edge-replicates `x` up to the next multiple of `r` on both grid axes.
pub fn pad_edge<T: Scalar>(x: ArrayView3<'_, T>, r: Ratio) -> Array3<T> {
    let (rows, cols, c) = x.dim();
    let r = r.get();
    let (pr, pc) = (rows.div_ceil(r) * r, cols.div_ceil(r) * r);
    if (pr, pc) == (rows, cols) {
        return x.to_owned();
    }
    let mut out = Array3::zeros((pr, pc, c));
    for i in 0..pr {
        for j in 0..pc {
            out.slice_mut(s![i, j, ..])
                .assign(&x.slice(s![i.min(rows - 1), j.min(cols - 1), ..]));
        }
    }
    out
}

/// Adjoint of [`pad_edge`]: folds padded-grid gradients back onto the source.
fn pad_edge_backward<T: Scalar>(d_padded: ArrayView3<'_, T>, rows: usize, cols: usize) -> Array3<T> {
    let (pr, pc, c) = d_padded.dim();
    if (pr, pc) == (rows, cols) {
        return d_padded.to_owned();
    }
    let mut out = Array3::zeros((rows, cols, c));
    for i in 0..pr {
        for j in 0..pc {
            let mut dst = out.slice_mut(s![i.min(rows - 1), j.min(cols - 1), ..]);
            dst += &d_padded.slice(s![i, j, ..]);
        }
    }
    out
}

/// Arithmetic mean over `r×r` cells of an already padded grid.
pub fn avg_pool<T: Scalar>(x: ArrayView3<'_, T>, r: Ratio) -> Array3<T> {
    let r = r.get();
    let (pr, pc, c) = x.dim();
    let inv = T::one() / T::from_usize_lossy(r * r);
    let mut out = Array3::zeros((pr / r, pc / r, c));
    for i in 0..pr / r {
        for j in 0..pc / r {
            let cell = x.slice(s![i * r..(i + 1) * r, j * r..(j + 1) * r, ..]);
            let mut acc = Array1::zeros(c);
            for a in 0..r {
                for b in 0..r {
                    acc += &cell.slice(s![a, b, ..]);
                }
            }
            out.slice_mut(s![i, j, ..]).assign(&(acc * inv));
        }
    }
    out
}

/// Depthwise `r×r`, stride-`r` convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConv<T> {
    /// `[r, r, C]`.
    pub kernel: Array3<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> DepthwiseConv<T> {
    /// Starts near an average pool (`1/r²` taps) with small noise.
    fn init(rng: &mut init::SeededRng, r: usize, c: usize) -> Self {
        let noise: Array3<T> = init::trunc_normal(rng, (r, r, c), crate::nn::INIT_STD);
        let avg = T::one() / T::from_usize_lossy(r * r);
        Self {
            kernel: noise.mapv(|v| v + avg),
            bias: Array1::zeros(c),
        }
    }

    fn forward(&self, x: ArrayView3<'_, T>) -> Array3<T> {
        let r = self.kernel.dim().0;
        let (pr, pc, c) = x.dim();
        let mut out = Array3::zeros((pr / r, pc / r, c));
        for i in 0..pr / r {
            for j in 0..pc / r {
                let mut acc = self.bias.clone();
                for a in 0..r {
                    for b in 0..r {
                        acc += &(&x.slice(s![i * r + a, j * r + b, ..]) * &self.kernel.slice(s![a, b, ..]));
                    }
                }
                out.slice_mut(s![i, j, ..]).assign(&acc);
            }
        }
        out
    }

    fn backward(&self, x: ArrayView3<'_, T>, dy: ArrayView3<'_, T>, grads: &mut Gradients<T>, prefix: &str) -> Array3<T> {
        let r = self.kernel.dim().0;
        let (lr, lc, _) = dy.dim();
        let mut dk = Array3::zeros(self.kernel.raw_dim());
        let mut dx = Array3::zeros(x.raw_dim());
        for i in 0..lr {
            for j in 0..lc {
                let g = dy.slice(s![i, j, ..]);
                for a in 0..r {
                    for b in 0..r {
                        let xv = x.slice(s![i * r + a, j * r + b, ..]);
                        let mut dkab = dk.slice_mut(s![a, b, ..]);
                        dkab += &(&g * &xv);
                        let mut dxab = dx.slice_mut(s![i * r + a, j * r + b, ..]);
                        dxab += &(&g * &self.kernel.slice(s![a, b, ..]));
                    }
                }
            }
        }
        grads.accumulate(&join(prefix, "kernel"), dk.view());
        grads.accumulate(&join(prefix, "bias"), dy.sum_axis(Axis(0)).sum_axis(Axis(0)).view());
        dx
    }
}

/// Learned parameters of one downsample path (`r = 2` or `r = 4`).
#[derive(Debug, Clone, PartialEq)]
pub struct PathKernel<T> {
    pub conv: DepthwiseConv<T>,
    /// Present only for [`DownsampleVariant::ConvMlp`].
    pub pointwise: Option<Mlp<T>>,
}

impl<T: Scalar> Parameterized<T> for PathKernel<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "conv.kernel"), self.conv.kernel.view().into_dyn()));
        out.push((join(prefix, "conv.bias"), self.conv.bias.view().into_dyn()));
        if let Some(m) = &self.pointwise {
            m.params(&join(prefix, "pointwise"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((join(prefix, "conv.kernel"), self.conv.kernel.view_mut().into_dyn()));
        out.push((join(prefix, "conv.bias"), self.conv.bias.view_mut().into_dyn()));
        if let Some(m) = &mut self.pointwise {
            m.params_mut(&join(prefix, "pointwise"), out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressorConfig {
    /// Feature channels `C` of the encoder output.
    pub channels: usize,
    /// Language-model embedding width `C_lm`.
    pub lm_channels: usize,
    /// Query/key width `d_k`; 0 selects `max(1, C/4)`.
    pub key_dim: usize,
    pub variant: DownsampleVariant,
    pub seed: u64,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            lm_channels: 64,
            key_dim: 0,
            variant: DownsampleVariant::AvgPool,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressorWeights<T> {
    pub variant: DownsampleVariant,
    /// `C → d_k`, bias-free.
    pub phi_q: Linear<T>,
    /// `C → d_k`, bias-free.
    pub phi_k: Linear<T>,
    /// `C → 2·C_lm → C_lm`, one object for every path.
    pub shared_mlp: Mlp<T>,
    /// Kernels for `r = 2` and `r = 4`, absent for average pooling.
    pub down2: Option<PathKernel<T>>,
    pub down4: Option<PathKernel<T>>,
}

impl<T: Scalar> CompressorWeights<T> {
    pub fn new(cfg: &CompressorConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.lm_channels == 0 {
            return Err(OryxError::invalid("compressor widths must be positive"));
        }
        let c = cfg.channels;
        let dk = if cfg.key_dim == 0 { (c / 4).max(1) } else { cfg.key_dim };
        let mut rng = init::substream(cfg.seed, "compressor.attn");
        let phi_q = Linear::init(&mut rng, c, dk, false);
        let phi_k = Linear::init(&mut rng, c, dk, false);
        let mut rng = init::substream(cfg.seed, "compressor.shared_mlp");
        let shared_mlp = Mlp::init(&mut rng, c, 2 * cfg.lm_channels, cfg.lm_channels);
        let kernel = |r: usize| -> Option<PathKernel<T>> {
            let mut rng = init::substream(cfg.seed, &format!("compressor.down{r}"));
            match cfg.variant {
                DownsampleVariant::AvgPool => None,
                DownsampleVariant::DwConv => Some(PathKernel {
                    conv: DepthwiseConv::init(&mut rng, r, c),
                    pointwise: None,
                }),
                DownsampleVariant::ConvMlp => Some(PathKernel {
                    conv: DepthwiseConv::init(&mut rng, r, c),
                    pointwise: Some(Mlp::init(&mut rng, c, c, c)),
                }),
            }
        };
        Ok(Self {
            variant: cfg.variant,
            phi_q,
            phi_k,
            shared_mlp,
            down2: kernel(2),
            down4: kernel(4),
        })
    }

    pub fn channels(&self) -> usize {
        self.phi_q.d_in()
    }

    pub fn key_dim(&self) -> usize {
        self.phi_q.d_out()
    }

    pub fn lm_channels(&self) -> usize {
        self.shared_mlp.fc2.d_out()
    }

    fn path(&self, r: Ratio) -> Option<&PathKernel<T>> {
        match r {
            Ratio::One => None,
            Ratio::Two => self.down2.as_ref(),
            Ratio::Four => self.down4.as_ref(),
        }
    }

    fn check_channels(&self, f: &FeatureMap<T>) -> Result<()> {
        if f.channels() != self.channels() {
            return Err(OryxError::shape(format!(
                "feature map has {} channels, compressor expects {}",
                f.channels(),
                self.channels()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Parameterized<T> for CompressorWeights<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.phi_q.params(&join(prefix, "phi_q"), out);
        self.phi_k.params(&join(prefix, "phi_k"), out);
        self.shared_mlp.params(&join(prefix, "shared_mlp"), out);
        if let Some(k) = &self.down2 {
            k.params(&join(prefix, "down2"), out);
        }
        if let Some(k) = &self.down4 {
            k.params(&join(prefix, "down4"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.phi_q.params_mut(&join(prefix, "phi_q"), out);
        self.phi_k.params_mut(&join(prefix, "phi_k"), out);
        self.shared_mlp.params_mut(&join(prefix, "shared_mlp"), out);
        if let Some(k) = &mut self.down2 {
            k.params_mut(&join(prefix, "down2"), out);
        }
        if let Some(k) = &mut self.down4 {
            k.params_mut(&join(prefix, "down4"), out);
        }
    }
}

#[derive(Debug, Clone)]
struct DownsampleCache<T> {
    conv_out: Option<Array3<T>>,
    pointwise: Option<MlpCache<T>>,
}

fn downsample_padded<T: Scalar>(
    padded: ArrayView3<'_, T>,
    r: Ratio,
    variant: DownsampleVariant,
    w: &CompressorWeights<T>,
) -> Result<(Array3<T>, DownsampleCache<T>)> {
    let none = DownsampleCache { conv_out: None, pointwise: None };
    if r == Ratio::One {
        return Ok((padded.to_owned(), none));
    }
    if variant == DownsampleVariant::AvgPool {
        return Ok((avg_pool(padded, r), none));
    }
    let kernel = w
        .path(r)
        .ok_or_else(|| OryxError::invalid(format!("weights carry no {variant:?} kernel for r={}", r.get())))?;
    let conv = kernel.conv.forward(padded);
    match (&kernel.pointwise, variant) {
        (Some(mlp), DownsampleVariant::ConvMlp) => {
            let (lr, lc, c) = conv.dim();
            let flat = conv.view().into_shape_with_order((lr * lc, c)).expect("standard layout");
            let (y, cache) = mlp.forward_train(flat);
            let y = y.into_shape_with_order((lr, lc, mlp.fc2.d_out())).expect("standard layout");
            Ok((y, DownsampleCache { conv_out: Some(conv), pointwise: Some(cache) }))
        }
        (None, DownsampleVariant::DwConv) => Ok((conv, none)),
        _ => Err(OryxError::invalid(format!("weights do not match variant {variant:?}"))),
    }
}

fn downsample_backward<T: Scalar>(
    padded: ArrayView3<'_, T>,
    d_out: ArrayView3<'_, T>,
    r: Ratio,
    variant: DownsampleVariant,
    w: &CompressorWeights<T>,
    cache: &DownsampleCache<T>,
    grads: &mut Gradients<T>,
    prefix: &str,
) -> Array3<T> {
    if r == Ratio::One {
        return d_out.to_owned();
    }
    let rr = r.get();
    if variant == DownsampleVariant::AvgPool {
        let inv = T::one() / T::from_usize_lossy(rr * rr);
        let mut dx = Array3::zeros(padded.raw_dim());
        for ((i, j, k), &g) in d_out.indexed_iter() {
            for a in 0..rr {
                for b in 0..rr {
                    dx[[i * rr + a, j * rr + b, k]] = g * inv;
                }
            }
        }
        return dx;
    }
    let kernel = w.path(r).expect("checked in forward");
    let path_prefix = join(prefix, &format!("down{rr}"));
    let d_conv = match (&kernel.pointwise, &cache.conv_out, &cache.pointwise) {
        (Some(mlp), Some(conv), Some(mc)) => {
            let (lr, lc, c) = conv.dim();
            let flat = conv.view().into_shape_with_order((lr * lc, c)).expect("standard layout");
            let dy = d_out.to_owned().into_shape_with_order((lr * lc, d_out.dim().2)).expect("standard layout");
            let dflat = mlp.backward(flat, dy.view(), mc, grads, &join(&path_prefix, "pointwise"));
            dflat.into_shape_with_order((lr, lc, c)).expect("standard layout")
        }
        _ => d_out.to_owned(),
    };
    kernel.conv.backward(padded, d_conv.view(), grads, &join(&path_prefix, "conv"))
}

/// `f_L = d_r(f_H)`: pads to a multiple of `r`, then pools or convolves.
pub fn downsample<T: Scalar>(
    f_h: &FeatureMap<T>,
    r: Ratio,
    variant: DownsampleVariant,
    w: &CompressorWeights<T>,
) -> Result<FeatureMap<T>> {
    let padded = pad_edge(f_h.values.view(), r);
    Ok(FeatureMap::new(downsample_padded(padded.view(), r, variant, w)?.0))
}

/// Parameter-free average-pool path; no weights required.
pub fn downsample_avg<T: Scalar>(f_h: &FeatureMap<T>, r: Ratio) -> FeatureMap<T> {
    let padded = pad_edge(f_h.values.view(), r);
    if r == Ratio::One {
        return FeatureMap::new(padded);
    }
    FeatureMap::new(avg_pool(padded.view(), r))
}

/// Gathers, for every low-resolution patch, its `r²` high-resolution patches
/// in row-major cell order: `[N·r², C]`.
fn gather_cells<T: Scalar>(padded: ArrayView3<'_, T>, r: usize) -> Array2<T> {
    let (pr, pc, c) = padded.dim();
    let (lr, lc) = (pr / r, pc / r);
    let mut keys = Array2::zeros((lr * lc * r * r, c));
    let mut row = 0;
    for i in 0..lr {
        for j in 0..lc {
            for a in 0..r {
                for b in 0..r {
                    keys.row_mut(row).assign(&padded.slice(s![i * r + a, j * r + b, ..]));
                    row += 1;
                }
            }
        }
    }
    keys
}

fn scatter_cells<T: Scalar>(d_keys: ArrayView2<'_, T>, padded_dim: (usize, usize, usize), r: usize) -> Array3<T> {
    let (pr, pc, _) = padded_dim;
    let (lr, lc) = (pr / r, pc / r);
    let mut out = Array3::zeros(padded_dim);
    let mut row = 0;
    for i in 0..lr {
        for j in 0..lc {
            for a in 0..r {
                for b in 0..r {
                    let mut dst = out.slice_mut(s![i * r + a, j * r + b, ..]);
                    dst += &d_keys.row(row);
                    row += 1;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct RegionCache<T> {
    queries: Array2<T>,
    keys: Array2<T>,
    qp: Array2<T>,
    kp: Array2<T>,
    /// `[N, r²]`.
    probs: Array2<T>,
}

fn region_forward<T: Scalar>(
    f_l: ArrayView3<'_, T>,
    padded: ArrayView3<'_, T>,
    r: usize,
    w: &CompressorWeights<T>,
) -> (Array3<T>, RegionCache<T>) {
    let (lr, lc, c) = f_l.dim();
    let n = lr * lc;
    let rr = r * r;
    let queries = f_l.to_owned().into_shape_with_order((n, c)).expect("standard layout");
    let keys = gather_cells(padded, r);
    let qp = w.phi_q.forward(queries.view());
    let kp = w.phi_k.forward(keys.view());
    let scale = T::one() / T::from_usize_lossy(w.key_dim()).sqrt();
    let mut probs = Array2::zeros((n, rr));
    for t in 0..n {
        let q = qp.row(t);
        for m in 0..rr {
            probs[[t, m]] = q.dot(&kp.row(t * rr + m)) * scale;
        }
    }
    softmax_rows(&mut probs);
    let mut out = queries.clone();
    for t in 0..n {
        let mut o = out.row_mut(t);
        for m in 0..rr {
            let p = probs[[t, m]];
            o.zip_mut_with(&keys.row(t * rr + m), |acc, &v| *acc += p * v);
        }
    }
    let out = out.into_shape_with_order((lr, lc, c)).expect("standard layout");
    (out, RegionCache { queries, keys, qp, kp, probs })
}

/// Returns `(d f_L, d padded f_H)`.
fn region_backward<T: Scalar>(
    d_out: ArrayView3<'_, T>,
    padded_dim: (usize, usize, usize),
    r: usize,
    w: &CompressorWeights<T>,
    cache: &RegionCache<T>,
    grads: &mut Gradients<T>,
    prefix: &str,
) -> (Array3<T>, Array3<T>) {
    let (lr, lc, c) = d_out.dim();
    let n = lr * lc;
    let rr = r * r;
    let dout = d_out.to_owned().into_shape_with_order((n, c)).expect("standard layout");
    let scale = T::one() / T::from_usize_lossy(w.key_dim()).sqrt();
    let mut d_keys = Array2::zeros(cache.keys.raw_dim());
    let mut d_logits = Array2::zeros((n, rr));
    for t in 0..n {
        let g = dout.row(t);
        let mut dp = vec![T::zero(); rr];
        for (m, slot) in dp.iter_mut().enumerate() {
            let p = cache.probs[[t, m]];
            d_keys.row_mut(t * rr + m).zip_mut_with(&g, |d, &gv| *d += p * gv);
            *slot = g.dot(&cache.keys.row(t * rr + m));
        }
        let weighted: T = (0..rr).map(|m| cache.probs[[t, m]] * dp[m]).sum();
        for m in 0..rr {
            d_logits[[t, m]] = cache.probs[[t, m]] * (dp[m] - weighted) * scale;
        }
    }
    let dk = w.phi_k.d_out();
    let mut d_qp = Array2::zeros((n, dk));
    let mut d_kp = Array2::zeros((n * rr, dk));
    for t in 0..n {
        for m in 0..rr {
            let dl = d_logits[[t, m]];
            d_qp.row_mut(t).zip_mut_with(&cache.kp.row(t * rr + m), |d, &k| *d += dl * k);
            d_kp.row_mut(t * rr + m).zip_mut_with(&cache.qp.row(t), |d, &q| *d += dl * q);
        }
    }
    let mut d_queries = dout;
    d_queries += &w.phi_q.backward(cache.queries.view(), d_qp.view(), grads, &join(prefix, "phi_q"));
    d_keys += &w.phi_k.backward(cache.keys.view(), d_kp.view(), grads, &join(prefix, "phi_k"));
    let d_fl = d_queries.into_shape_with_order((lr, lc, c)).expect("standard layout");
    (d_fl, scatter_cells(d_keys.view(), padded_dim, r))
}

/// Region cross-attention residual update of `f_L` against the `r²`
/// high-resolution patches of each cell of (edge-padded) `f_H`.
pub fn region_attention<T: Scalar>(
    f_l: &FeatureMap<T>,
    f_h: &FeatureMap<T>,
    r: Ratio,
    w: &CompressorWeights<T>,
) -> Result<FeatureMap<T>> {
    w.check_channels(f_h)?;
    w.check_channels(f_l)?;
    let rr = r.get();
    let expect = (f_h.rows().div_ceil(rr), f_h.cols().div_ceil(rr));
    if (f_l.rows(), f_l.cols()) != expect {
        return Err(OryxError::shape(format!(
            "f_L grid {}x{} does not match f_H grid {}x{} at r={rr}",
            f_l.rows(),
            f_l.cols(),
            f_h.rows(),
            f_h.cols()
        )));
    }
    let padded = pad_edge(f_h.values.view(), r);
    Ok(FeatureMap::new(region_forward(f_l.values.view(), padded.view(), rr, w).0))
}

/// Attention weights of the region cross-attention, `[N, r²]`; rows sum to one.
pub fn region_attention_weights<T: Scalar>(
    f_l: &FeatureMap<T>,
    f_h: &FeatureMap<T>,
    r: Ratio,
    w: &CompressorWeights<T>,
) -> Result<Array2<T>> {
    region_attention(f_l, f_h, r, w)?;
    let padded = pad_edge(f_h.values.view(), r);
    Ok(region_forward(f_l.values.view(), padded.view(), r.get(), w).1.probs)
}

/// Flattens `f_L` row-major and applies the shared MLP: `[N, C_lm]`.
pub fn project_shared<T: Scalar>(f_l: &FeatureMap<T>, w: &CompressorWeights<T>) -> Result<Array2<T>> {
    w.check_channels(f_l)?;
    Ok(w.shared_mlp.forward(f_l.to_tokens().view()))
}

/// Full path: downsample → region attention → shared projection.
pub fn compress<T: Scalar>(f_h: &FeatureMap<T>, r: Ratio, w: &CompressorWeights<T>) -> Result<Array2<T>> {
    Ok(compress_train(f_h, r, w)?.0)
}

/// Intermediates of one [`compress_train`] call.
#[derive(Debug, Clone)]
pub struct CompressCache<T> {
    ratio: Ratio,
    source: (usize, usize),
    padded: Array3<T>,
    down: DownsampleCache<T>,
    region: RegionCache<T>,
    flat: Array2<T>,
    mlp: MlpCache<T>,
}

pub fn compress_train<T: Scalar>(f_h: &FeatureMap<T>, r: Ratio, w: &CompressorWeights<T>) -> Result<(Array2<T>, CompressCache<T>)> {
    w.check_channels(f_h)?;
    let padded = pad_edge(f_h.values.view(), r);
    let (f_l0, down) = downsample_padded(padded.view(), r, w.variant, w)?;
    let (f_l, region) = region_forward(f_l0.view(), padded.view(), r.get(), w);
    let (lr, lc, c) = f_l.dim();
    let flat = f_l.into_shape_with_order((lr * lc, c)).expect("standard layout");
    let (tokens, mlp) = w.shared_mlp.forward_train(flat.view());
    Ok((
        tokens,
        CompressCache {
            ratio: r,
            source: (f_h.rows(), f_h.cols()),
            padded,
            down,
            region,
            flat,
            mlp,
        },
    ))
}

/// Backpropagates token gradients `[N, C_lm]`; parameter gradients land in
/// `grads` under `prefix`, the returned map is `d f_H`.
pub fn compress_backward<T: Scalar>(
    d_tokens: ArrayView2<'_, T>,
    w: &CompressorWeights<T>,
    cache: &CompressCache<T>,
    grads: &mut Gradients<T>,
    prefix: &str,
) -> FeatureMap<T> {
    let r = cache.ratio;
    let rr = r.get();
    let d_flat = w
        .shared_mlp
        .backward(cache.flat.view(), d_tokens, &cache.mlp, grads, &join(prefix, "shared_mlp"));
    let (pr, pc, c) = cache.padded.dim();
    let d_fl = d_flat.into_shape_with_order((pr / rr, pc / rr, c)).expect("standard layout");
    let (d_fl0, mut d_padded) = region_backward(d_fl.view(), cache.padded.dim(), rr, w, &cache.region, grads, prefix);
    d_padded += &downsample_backward(cache.padded.view(), d_fl0.view(), r, w.variant, w, &cache.down, grads, prefix);
    FeatureMap::new(pad_edge_backward(d_padded.view(), cache.source.0, cache.source.1))
}
