//! On-demand routing of visual inputs to a compression path.
//!
//! | category    | ratio | frame cap |
//! |-------------|-------|-----------|
//! | image       | 1     | 1         |
//! | short video | 2     | 64        |
//! | long video  | 4     | 256       |
//!
//! Videos are first sampled at one frame per second; when that exceeds the
//! cap, `cap` indices are spread uniformly with `⌊k·n/cap⌋`.

use serde::{Deserialize, Serialize};

use crate::compressor::{compressed_token_count, Ratio};
use crate::error::{OryxError, Result};
use crate::geometry::{self, patch_grid, Resolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Image,
    ShortVideo,
    LongVideo,
}

impl Category {
    pub fn ratio(self) -> Ratio {
        match self {
            Category::Image => Ratio::One,
            Category::ShortVideo => Ratio::Two,
            Category::LongVideo => Ratio::Four,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub patch_size: usize,
    /// Videos with more 1-fps frames than this are long.
    pub long_threshold: usize,
    pub short_frame_cap: usize,
    pub long_frame_cap: usize,
    pub image_max_side: usize,
    pub video_min_side: usize,
    pub video_max_side: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            patch_size: geometry::DEFAULT_PATCH_SIZE,
            long_threshold: 256,
            short_frame_cap: 64,
            long_frame_cap: 256,
            image_max_side: geometry::IMAGE_MAX_SIDE,
            video_min_side: geometry::VIDEO_MIN_SIDE,
            video_max_side: geometry::VIDEO_MAX_SIDE,
        }
    }
}

impl PlannerConfig {
    pub fn frame_cap(&self, category: Category) -> usize {
        match category {
            Category::Image => 1,
            Category::ShortVideo => self.short_frame_cap,
            Category::LongVideo => self.long_frame_cap,
        }
    }

    /// Plans one frame's resolution for the given category.
    pub fn plan_resolution(&self, res: Resolution, category: Category) -> Result<Resolution> {
        match category {
            Category::Image => geometry::plan_image_resolution(res, self.image_max_side, self.patch_size),
            _ => geometry::plan_video_frame(res, self.video_min_side, self.video_max_side, self.patch_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub category: Category,
    pub ratio: Ratio,
    pub frame_cap: usize,
    /// Selected frames, in units of the 1-fps sequence.
    pub indices: Vec<usize>,
    pub per_frame_tokens: Vec<usize>,
    pub total_tokens: usize,
}

pub fn classify_input(n_native_frames: usize, long_threshold: usize) -> Result<Category> {
    match n_native_frames {
        0 => Err(OryxError::invalid("an input needs at least one frame")),
        1 => Ok(Category::Image),
        n if n <= long_threshold => Ok(Category::ShortVideo),
        _ => Ok(Category::LongVideo),
    }
}

/// `cap` strictly increasing indices `⌊k·n/cap⌋` in `[0, n)`, or all of
/// `0..n` when `n ≤ cap`.
pub fn uniform_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|k| k * n / cap).collect()
}

/// One frame per second of `duration_s` (at least one), thinned to `cap`.
pub fn sample_frames(duration_s: f64, fps_native: f64, cap: usize) -> Result<Vec<usize>> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(OryxError::invalid(format!("duration must be positive, got {duration_s}")));
    }
    if !(fps_native > 0.0) || !fps_native.is_finite() {
        return Err(OryxError::invalid(format!("fps must be positive, got {fps_native}")));
    }
    if cap == 0 {
        return Err(OryxError::invalid("frame cap must be positive"));
    }
    let n = (duration_s.floor() as usize).max(1);
    Ok(uniform_indices(n, cap))
}

/// Native frame index of 1-fps sample `k`.
pub fn native_frame_index(k: usize, fps_native: f64) -> usize {
    (k as f64 * fps_native).floor() as usize
}

/// Token budget of `frames` (already planned) under `category`. Frame lists
/// longer than the category cap are thinned uniformly first.
pub fn make_plan(frames: &[Resolution], category: Category, cfg: &PlannerConfig) -> Result<CompressionPlan> {
    if frames.is_empty() {
        return Err(OryxError::invalid("cannot plan an empty frame list"));
    }
    let cap = cfg.frame_cap(category);
    let indices = uniform_indices(frames.len(), cap);
    let ratio = category.ratio();
    let per_frame_tokens = indices
        .iter()
        .map(|&i| {
            let g = patch_grid(frames[i], cfg.patch_size)?;
            Ok(compressed_token_count(g.rows, g.cols, ratio))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompressionPlan {
        category,
        ratio,
        frame_cap: cap,
        total_tokens: per_frame_tokens.iter().sum(),
        indices,
        per_frame_tokens,
    })
}

/// A planned clip: the per-frame resolution plus its compression plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub native: Resolution,
    pub planned: Resolution,
    pub native_frames: usize,
    pub sampled_frames: usize,
    #[serde(flatten)]
    pub plan: CompressionPlan,
}

/// Routes a clip of `n_native_frames` frames at `fps` (one frame = image).
pub fn plan_clip(res: Resolution, n_native_frames: usize, fps: f64, cfg: &PlannerConfig) -> Result<ClipPlan> {
    if n_native_frames == 0 {
        return Err(OryxError::invalid("an input needs at least one frame"));
    }
    let (category, one_fps) = if n_native_frames == 1 {
        (Category::Image, 1)
    } else {
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(OryxError::invalid(format!("fps must be positive, got {fps}")));
        }
        let n = ((n_native_frames as f64 / fps).floor() as usize).max(1);
        let category = if n > cfg.long_threshold {
            Category::LongVideo
        } else {
            Category::ShortVideo
        };
        (category, n)
    };
    let planned = cfg.plan_resolution(res, category)?;
    let plan = make_plan(&vec![planned; one_fps], category, cfg)?;
    Ok(ClipPlan {
        native: res,
        planned,
        native_frames: n_native_frames,
        sampled_frames: plan.indices.len(),
        plan,
    })
}
