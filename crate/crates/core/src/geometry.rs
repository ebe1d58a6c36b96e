//! Resolution planning and patch-grid arithmetic.
//!
//! Images keep their native aspect ratio and are only scaled down when their
//! pixel area exceeds a budget. Video frames are scaled uniformly so their
//! area lands inside `[min_side², max_side²]`. Sides are rounded to the
//! nearest integer, then nudged by single pixels when rounding alone would
//! leave the area outside its clamp.

use serde::{Deserialize, Serialize};

use crate::error::{OryxError, Result};

pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const IMAGE_MAX_SIDE_STAGE1: usize = 1280;
pub const IMAGE_MAX_SIDE: usize = 1536;
pub const VIDEO_MIN_SIDE: usize = 288;
pub const VIDEO_MAX_SIDE: usize = 480;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    fn check_positive(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(OryxError::invalid(format!(
                "resolution must be positive, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Rows × cols of `patch_size`-pixel patches covering a resolution (floor).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub token_count: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch_size: usize) -> Self {
        Self {
            rows,
            cols,
            patch_size,
            token_count: rows * cols,
        }
    }
}

pub fn patch_grid(res: Resolution, patch: usize) -> Result<PatchGrid> {
    if patch == 0 {
        return Err(OryxError::invalid("patch size must be positive"));
    }
    res.check_positive()?;
    if res.height < patch || res.width < patch {
        return Err(OryxError::TooSmall {
            height: res.height,
            width: res.width,
            patch,
        });
    }
    Ok(PatchGrid::new(res.height / patch, res.width / patch, patch))
}

#[derive(Clone, Copy, PartialEq)]
enum Clamp {
    AtMost(usize),
    AtLeast(usize),
}

/// Uniformly scales `res` by `s`, rounds to nearest, then nudges single
/// pixels until the area satisfies `clamp`. Sides never drop below `floor`.
fn scale_sides(res: Resolution, s: f64, floor: usize, clamp: Clamp) -> Resolution {
    let exact = [res.height as f64 * s, res.width as f64 * s];
    let mut sides = exact.map(|v| (v.round() as usize).max(floor));
    match clamp {
        Clamp::AtMost(limit) => {
            while sides[0] * sides[1] > limit {
                // Undo the largest upward rounding first.
                let pick = (0..2)
                    .filter(|&k| sides[k] > floor)
                    .max_by(|&a, &b| {
                        (sides[a] as f64 - exact[a]).total_cmp(&(sides[b] as f64 - exact[b]))
                    });
                match pick {
                    Some(k) => sides[k] -= 1,
                    None => break,
                }
            }
        }
        Clamp::AtLeast(limit) => {
            while sides[0] * sides[1] < limit {
                let k = if exact[0] - sides[0] as f64 >= exact[1] - sides[1] as f64 {
                    0
                } else {
                    1
                };
                sides[k] += 1;
            }
        }
    }
    Resolution::new(sides[0], sides[1])
}

/// Scales an image down (never up) so its area fits in `max_area_side²`.
pub fn plan_image_resolution(res: Resolution, max_area_side: usize, patch: usize) -> Result<Resolution> {
    res.check_positive()?;
    if max_area_side == 0 {
        return Err(OryxError::invalid("max_area_side must be positive"));
    }
    let budget = max_area_side * max_area_side;
    if res.area() <= budget {
        return Ok(res);
    }
    let s = (budget as f64 / res.area() as f64).sqrt();
    Ok(scale_sides(res, s, patch.max(1), Clamp::AtMost(budget)))
}

/// Clamps a frame's pixel area into `[min_side², max_side²]`.
pub fn plan_video_resolution(
    res: Resolution,
    min_side: usize,
    max_side: usize,
    patch: usize,
) -> Result<Resolution> {
    res.check_positive()?;
    if min_side == 0 || min_side > max_side {
        return Err(OryxError::invalid(format!(
            "video clamp requires 0 < min_side <= max_side, got {min_side}..{max_side}"
        )));
    }
    let (lo, hi) = (min_side * min_side, max_side * max_side);
    let area = res.area();
    if area > hi {
        let s = (hi as f64 / area as f64).sqrt();
        Ok(scale_sides(res, s, patch.max(1), Clamp::AtMost(hi)))
    } else if area < lo {
        let s = (lo as f64 / area as f64).sqrt();
        Ok(scale_sides(res, s, patch.max(1), Clamp::AtLeast(lo)))
    } else {
        Ok(res)
    }
}

/// Video planning that also keeps the patch-token count inside
/// `[⌊min_side/p⌋², ⌊max_side/p⌋²]`.
///
/// The area clamp alone bounds tokens from above, but flooring both sides
/// can push small frames below the lower bound (300×277 gives 18×17 = 306 at
/// p = 16). Such frames are scaled up in 0.1% steps until the floor holds or
/// the area budget would be exceeded.
pub fn plan_video_frame(res: Resolution, min_side: usize, max_side: usize, patch: usize) -> Result<Resolution> {
    let planned = plan_video_resolution(res, min_side, max_side, patch)?;
    let min_tokens = (min_side / patch).pow(2);
    let hi = max_side * max_side;
    let tokens = |r: Resolution| (r.height / patch) * (r.width / patch);
    if tokens(planned) >= min_tokens {
        return Ok(planned);
    }
    for step in 1..=2000 {
        let s = 1.0 + step as f64 * 1e-3;
        let candidate = Resolution::new(
            (planned.height as f64 * s).round() as usize,
            (planned.width as f64 * s).round() as usize,
        );
        if candidate.area() > hi {
            break;
        }
        if tokens(candidate) >= min_tokens {
            return Ok(candidate);
        }
    }
    Ok(planned)
}
