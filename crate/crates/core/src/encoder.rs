//! Toy native-resolution ViT.
//!
//! `pixels → patch embedding → + interpolated position table → L pre-norm
//! blocks over the packed sequence → one feature map per input`.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use crate::error::{OryxError, Result};
use crate::geometry::{patch_grid, PatchGrid, Resolution, DEFAULT_PATCH_SIZE};
use crate::init;
use crate::nn::{join, Gradients, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache, Parameterized};
use crate::packing::{pack, AttentionCache, AttentionWeights, PackedBatch};
use crate::posembed::{self, PositionTable, DEFAULT_TABLE_SIDE};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    ShortVideoFrame,
    LongVideoFrame,
}

/// Decoded pixels `[height, width, channels]`, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput<T> {
    pub pixels: Array3<T>,
    pub modality: Modality,
}

impl<T: Scalar> VisualInput<T> {
    pub fn new(pixels: Array3<T>, modality: Modality) -> Self {
        Self { pixels, modality }
    }

    pub fn resolution(&self) -> Resolution {
        let (h, w, _) = self.pixels.dim();
        Resolution::new(h, w)
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Side of the square position table, in patches.
    pub table_side: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            in_channels: 3,
            channels: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
            table_side: DEFAULT_TABLE_SIDE,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.in_channels == 0 || self.channels == 0 || self.table_side == 0 {
            return Err(OryxError::invalid("encoder dimensions must be positive"));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(OryxError::invalid(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(OryxError::invalid("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.channels as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// Grid-shaped channel vectors `[rows, cols, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Array3<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Array3<T>) -> Self {
        Self { values }
    }

    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self::new(Array3::zeros((rows, cols, channels)))
    }

    /// Reshapes row-major tokens `[rows·cols, C]` onto a grid.
    pub fn from_tokens(tokens: ArrayView2<'_, T>, rows: usize, cols: usize) -> Result<Self> {
        let (n, c) = tokens.dim();
        if n != rows * cols {
            return Err(OryxError::shape(format!("{n} tokens cannot fill a {rows}x{cols} grid")));
        }
        let values = tokens
            .to_owned()
            .into_shape_with_order((rows, cols, c))
            .map_err(|e| OryxError::shape(e.to_string()))?;
        Ok(Self { values })
    }

    pub fn rows(&self) -> usize {
        self.values.dim().0
    }

    pub fn cols(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn token_count(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Row-major flattening to `[rows·cols, C]`.
    pub fn to_tokens(&self) -> Array2<T> {
        let (r, c, ch) = self.values.dim();
        self.values
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((r * c, ch))
            .expect("standard layout")
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Cuts `[H, W, Cin]` pixels into row-major patches `[rows·cols, p·p·Cin]`,
/// each flattened in `(dy, dx, channel)` order. Pixels beyond the last full
/// patch are dropped.
pub fn patchify<T: Scalar>(pixels: ArrayView3<'_, T>, patch: usize) -> Result<(Array2<T>, PatchGrid)> {
    let (h, w, cin) = pixels.dim();
    let grid = patch_grid(Resolution::new(h, w), patch)?;
    let mut out = Array2::zeros((grid.token_count, patch * patch * cin));
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let mut row = out.row_mut(r * grid.cols + c);
            let block = pixels.slice(s![r * patch..(r + 1) * patch, c * patch..(c + 1) * patch, ..]);
            for (dst, &v) in row.iter_mut().zip(block.iter()) {
                *dst = v;
            }
        }
    }
    Ok((out, grid))
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: AttentionWeights<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    h1: Array2<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    h2: Array2<T>,
    mlp: MlpCache<T>,
}

impl<T: Scalar> Block<T> {
    fn forward(&self, x: ArrayView2<'_, T>, offsets: &[usize]) -> Array2<T> {
        let h1 = self.ln1.forward(x);
        let x1 = &x + &self.attn.forward_packed(h1.view(), offsets);
        let h2 = self.ln2.forward(x1.view());
        &x1 + &self.mlp.forward(h2.view())
    }

    fn forward_train(&self, x: ArrayView2<'_, T>, offsets: &[usize]) -> (Array2<T>, BlockCache<T>) {
        let (h1, ln1) = self.ln1.forward_train(x);
        let (a, attn) = self.attn.forward_packed_train(h1.view(), offsets);
        let x1 = &x + &a;
        let (h2, ln2) = self.ln2.forward_train(x1.view());
        let (m, mlp) = self.mlp.forward_train(h2.view());
        let y = &x1 + &m;
        (y, BlockCache { ln1, h1, attn, ln2, h2, mlp })
    }

    fn backward(
        &self,
        dy: Array2<T>,
        offsets: &[usize],
        cache: &BlockCache<T>,
        grads: &mut Gradients<T>,
        prefix: &str,
    ) -> Array2<T> {
        let dm = self.mlp.backward(cache.h2.view(), dy.view(), &cache.mlp, grads, &join(prefix, "mlp"));
        let dx1 = &dy + &self.ln2.backward(dm.view(), &cache.ln2, grads, &join(prefix, "ln2"));
        let da = self.attn.backward_packed(
            cache.h1.view(),
            offsets,
            dx1.view(),
            &cache.attn,
            grads,
            &join(prefix, "attn"),
        );
        &dx1 + &self.ln1.backward(da.view(), &cache.ln1, grads, &join(prefix, "ln1"))
    }
}

impl<T: Scalar> Parameterized<T> for Block<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.ln1.params(&join(prefix, "ln1"), out);
        self.attn.params(&join(prefix, "attn"), out);
        self.ln2.params(&join(prefix, "ln2"), out);
        self.mlp.params(&join(prefix, "mlp"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.ln1.params_mut(&join(prefix, "ln1"), out);
        self.attn.params_mut(&join(prefix, "attn"), out);
        self.ln2.params_mut(&join(prefix, "ln2"), out);
        self.mlp.params_mut(&join(prefix, "mlp"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub patch: Linear<T>,
    pub pos: PositionTable<T>,
    pub blocks: Vec<Block<T>>,
}

/// Everything the encoder backward pass needs from a training forward.
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    patches: Vec<Array2<T>>,
    grids: Vec<PatchGrid>,
    offsets: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let c = config.channels;
        let d_patch = config.patch_size * config.patch_size * config.in_channels;
        let mut rng = init::substream(seed, "encoder.patch");
        let patch = Linear::init(&mut rng, d_patch, c, true);
        let pos = PositionTable::build(config.table_side, config.table_side, c, seed)?;
        let blocks = (0..config.depth)
            .map(|i| {
                let mut rng = init::substream(seed, &format!("encoder.blocks.{i}"));
                Ok(Block {
                    ln1: LayerNorm::new(c),
                    attn: AttentionWeights::init(&mut rng, c, config.heads)?,
                    ln2: LayerNorm::new(c),
                    mlp: Mlp::init(&mut rng, c, config.mlp_hidden(), c),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, patch, pos, blocks })
    }

    fn check_input(&self, input: &VisualInput<T>) -> Result<()> {
        if input.channels() != self.config.in_channels {
            return Err(OryxError::shape(format!(
                "input has {} channels, encoder expects {}",
                input.channels(),
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Linear projection of every `p×p` patch to `C` channels.
    pub fn patch_embed(&self, input: &VisualInput<T>) -> Result<(Array2<T>, PatchGrid)> {
        self.check_input(input)?;
        let (patches, grid) = patchify(input.pixels.view(), self.config.patch_size)?;
        Ok((self.patch.forward(patches.view()), grid))
    }

    /// Position embeddings for `grid`, flattened to `[rows·cols, C]`.
    pub fn position_embeddings(&self, grid: &PatchGrid) -> Result<Array2<T>> {
        let p = self.pos.interpolate(grid)?;
        Ok(p.into_shape_with_order((grid.token_count, self.config.channels))
            .expect("standard layout"))
    }

    /// Patch embedding plus position embedding.
    pub fn embed(&self, input: &VisualInput<T>) -> Result<(Array2<T>, PatchGrid)> {
        let (tokens, grid) = self.patch_embed(input)?;
        let pos = self.position_embeddings(&grid)?;
        Ok((posembed::apply(tokens.view(), pos.view())?, grid))
    }

    /// Runs the blocks over a packed batch whose segments already carry
    /// position embeddings; `grids[i]` gives the shape of segment `i`.
    pub fn encode_packed(&self, batch: &PackedBatch<T>, grids: &[PatchGrid]) -> Result<Vec<FeatureMap<T>>> {
        batch.validate()?;
        check_grids(batch, grids)?;
        if batch.channels() != self.config.channels {
            return Err(OryxError::shape(format!(
                "batch has {} channels, encoder width is {}",
                batch.channels(),
                self.config.channels
            )));
        }
        let mut x = batch.tokens.clone();
        for block in &self.blocks {
            x = block.forward(x.view(), &batch.offsets);
        }
        split_maps(&x, &batch.offsets, grids)
    }

    /// Embeds, packs and encodes `inputs` in one variable-length batch.
    pub fn encode(&self, inputs: &[VisualInput<T>]) -> Result<Vec<FeatureMap<T>>> {
        let embedded = inputs.iter().map(|i| self.embed(i)).collect::<Result<Vec<_>>>()?;
        let grids: Vec<_> = embedded.iter().map(|(_, g)| *g).collect();
        let views: Vec<_> = embedded.iter().map(|(t, _)| t.view()).collect();
        self.encode_packed(&pack(&views)?, &grids)
    }

    pub fn forward_train(&self, inputs: &[VisualInput<T>]) -> Result<(Vec<FeatureMap<T>>, EncoderCache<T>)> {
        let mut patches = Vec::with_capacity(inputs.len());
        let mut grids = Vec::with_capacity(inputs.len());
        let mut embedded = Vec::with_capacity(inputs.len());
        for input in inputs {
            self.check_input(input)?;
            let (p, grid) = patchify(input.pixels.view(), self.config.patch_size)?;
            let tokens = self.patch.forward(p.view());
            let pos = self.position_embeddings(&grid)?;
            embedded.push(posembed::apply(tokens.view(), pos.view())?);
            patches.push(p);
            grids.push(grid);
        }
        let views: Vec<_> = embedded.iter().map(|t| t.view()).collect();
        let batch = pack(&views)?;
        let mut x = batch.tokens;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward_train(x.view(), &batch.offsets);
            caches.push(cache);
            x = y;
        }
        let maps = split_maps(&x, &batch.offsets, &grids)?;
        Ok((
            maps,
            EncoderCache {
                patches,
                grids,
                offsets: batch.offsets,
                blocks: caches,
            },
        ))
    }

    /// Backpropagates feature-map gradients (one per input) into `grads`.
    pub fn backward(&self, d_maps: &[FeatureMap<T>], cache: &EncoderCache<T>, grads: &mut Gradients<T>, prefix: &str) -> Result<()> {
        if d_maps.len() != cache.grids.len() {
            return Err(OryxError::shape("one gradient map per encoded input is required"));
        }
        let views: Vec<_> = d_maps.iter().map(|m| m.to_tokens()).collect();
        let views: Vec<_> = views.iter().map(|t| t.view()).collect();
        let mut dx = pack(&views)?.tokens;
        for (i, block) in self.blocks.iter().enumerate().rev() {
            dx = block.backward(dx, &cache.offsets, &cache.blocks[i], grads, &join(prefix, &format!("blocks.{i}")));
        }
        let c = self.config.channels;
        let mut dpos = Array3::zeros(self.pos.values.raw_dim());
        for (i, grid) in cache.grids.iter().enumerate() {
            let seg = dx.slice(s![cache.offsets[i]..cache.offsets[i + 1], ..]);
            self.patch.backward(cache.patches[i].view(), seg, grads, &join(prefix, "patch"));
            let seg3 = seg
                .to_owned()
                .into_shape_with_order((grid.rows, grid.cols, c))
                .expect("standard layout");
            dpos += &self.pos.interpolate_backward(seg3.view());
        }
        grads.accumulate(&join(prefix, "pos"), dpos.view());
        Ok(())
    }
}

fn check_grids<T: Scalar>(batch: &PackedBatch<T>, grids: &[PatchGrid]) -> Result<()> {
    if grids.len() != batch.num_segments() {
        return Err(OryxError::shape(format!(
            "{} grids for {} packed segments",
            grids.len(),
            batch.num_segments()
        )));
    }
    for (i, (g, n)) in grids.iter().zip(batch.lengths()).enumerate() {
        if g.token_count != n {
            return Err(OryxError::shape(format!(
                "segment {i} holds {n} tokens but its grid {}x{} needs {}",
                g.rows, g.cols, g.token_count
            )));
        }
    }
    Ok(())
}

fn split_maps<T: Scalar>(x: &Array2<T>, offsets: &[usize], grids: &[PatchGrid]) -> Result<Vec<FeatureMap<T>>> {
    grids
        .iter()
        .zip(offsets.windows(2))
        .map(|(g, w)| FeatureMap::from_tokens(x.slice(s![w[0]..w[1], ..]), g.rows, g.cols))
        .collect()
}

impl<T: Scalar> Parameterized<T> for Encoder<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.patch.params(&join(prefix, "patch"), out);
        out.push((join(prefix, "pos"), self.pos.values.view().into_dyn()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&join(prefix, &format!("blocks.{i}")), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.patch.params_mut(&join(prefix, "patch"), out);
        out.push((join(prefix, "pos"), self.pos.values.view_mut().into_dyn()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
    }
}
