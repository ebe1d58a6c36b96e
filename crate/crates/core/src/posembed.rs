//! One large positional-embedding table, resampled per input to its native
//! patch grid with align-corners bilinear interpolation.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};

use crate::error::{OryxError, Result};
use crate::geometry::PatchGrid;
use crate::init;
use crate::scalar::Scalar;

/// Grid side of the default table: 2048-pixel inputs at 16-pixel patches.
pub const DEFAULT_TABLE_SIDE: usize = 128;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable<T> {
    /// `[grid_rows, grid_cols, channels]`.
    pub values: Array3<T>,
}

impl<T: Scalar> PositionTable<T> {
    pub fn build(grid_rows: usize, grid_cols: usize, channels: usize, seed: u64) -> Result<Self> {
        if grid_rows == 0 || grid_cols == 0 || channels == 0 {
            return Err(OryxError::invalid("position table dimensions must be positive"));
        }
        let mut rng = init::substream(seed, "posembed");
        Ok(Self {
            values: init::trunc_normal(&mut rng, (grid_rows, grid_cols, channels), INIT_STD),
        })
    }

    pub fn from_values(values: Array3<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(OryxError::invalid("position table must be non-empty"));
        }
        Ok(Self { values })
    }

    pub fn grid_rows(&self) -> usize {
        self.values.dim().0
    }

    pub fn grid_cols(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    /// Resamples the table to `target.rows × target.cols`.
    pub fn interpolate(&self, target: &PatchGrid) -> Result<Array3<T>> {
        self.interpolate_to(target.rows, target.cols)
    }

    pub fn interpolate_to(&self, rows: usize, cols: usize) -> Result<Array3<T>> {
        if rows == 0 || cols == 0 {
            return Err(OryxError::invalid("interpolation target grid is empty"));
        }
        let ys = sample_axis(self.grid_rows(), rows);
        let xs = sample_axis(self.grid_cols(), cols);
        let c = self.channels();
        let v = &self.values;
        let mut out = Array3::zeros((rows, cols, c));
        for (i, sy) in ys.iter().enumerate() {
            let ty = T::c(sy.t);
            for (j, sx) in xs.iter().enumerate() {
                let tx = T::c(sx.t);
                for k in 0..c {
                    let top = lerp(v[[sy.lo, sx.lo, k]], v[[sy.lo, sx.hi, k]], tx);
                    let bottom = lerp(v[[sy.hi, sx.lo, k]], v[[sy.hi, sx.hi, k]], tx);
                    out[[i, j, k]] = lerp(top, bottom, ty);
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`interpolate_to`](Self::interpolate_to): scatters an
    /// output-shaped gradient back onto the table grid.
    pub fn interpolate_backward(&self, grad: ArrayView3<'_, T>) -> Array3<T> {
        let (rows, cols, c) = grad.dim();
        let ys = sample_axis(self.grid_rows(), rows);
        let xs = sample_axis(self.grid_cols(), cols);
        let mut out = Array3::zeros(self.values.raw_dim());
        for (i, sy) in ys.iter().enumerate() {
            let (wy0, wy1) = (T::c(1.0 - sy.t), T::c(sy.t));
            for (j, sx) in xs.iter().enumerate() {
                let (wx0, wx1) = (T::c(1.0 - sx.t), T::c(sx.t));
                for k in 0..c {
                    let g = grad[[i, j, k]];
                    out[[sy.lo, sx.lo, k]] += g * wy0 * wx0;
                    out[[sy.lo, sx.hi, k]] += g * wy0 * wx1;
                    out[[sy.hi, sx.lo, k]] += g * wy1 * wx0;
                    out[[sy.hi, sx.hi, k]] += g * wy1 * wx1;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    lo: usize,
    hi: usize,
    t: f64,
}

/// Align-corners source coordinates: `u = i·(G−1)/(T−1)`, or the centre
/// `(G−1)/2` for a single-sample target.
fn sample_axis(source: usize, target: usize) -> Vec<Sample> {
    let last = source - 1;
    (0..target)
        .map(|i| {
            let u = if target == 1 {
                last as f64 / 2.0
            } else {
                (i * last) as f64 / (target - 1) as f64
            };
            let lo = (u.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            Sample { lo, hi, t: u - lo as f64 }
        })
        .collect()
}

/// `a + t(b − a)`, clamped to the segment so rounding never leaves `[a, b]`.
#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    let v = a + t * (b - a);
    v.max(a.min(b)).min(a.max(b))
}

/// `x + P`.
pub fn apply<T: Scalar>(tokens: ArrayView2<'_, T>, pos: ArrayView2<'_, T>) -> Result<Array2<T>> {
    if tokens.dim() != pos.dim() {
        return Err(OryxError::shape(format!(
            "tokens {:?} vs position embeddings {:?}",
            tokens.dim(),
            pos.dim()
        )));
    }
    Ok(Zip::from(&tokens).and(&pos).map_collect(|&x, &p| x + p))
}
