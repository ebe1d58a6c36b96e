use serde::{Deserialize, Serialize};

use super::synth::{decode_payload, haystack, synth_frame, Frame, Payload, SynthConfig};
use crate::error::{OryxError, Result};

/// Ground truth carried by a needle frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedlePayload {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleSpec {
    pub haystack_frames: usize,
    /// Relative insertion depth in `[0, 1]`.
    pub depth: f64,
    pub needle: Frame,
    pub payload: NeedlePayload,
}

impl NeedleSpec {
    /// Synthesises a needle frame whose embedded payload is `payload.answer`.
    pub fn synthetic(haystack_frames: usize, depth: f64, payload: NeedlePayload, seed: u64, cfg: &SynthConfig) -> Result<Self> {
        let needle = synth_frame(&Payload::Needle(payload.answer.clone()), seed ^ 0x5EED, cfg)?;
        Ok(Self {
            haystack_frames,
            depth,
            needle,
            payload,
        })
    }
}

/// `⌊depth·n⌋` clamped to `[0, n−1]`.
pub fn needle_index(n: usize, depth: f64) -> Result<usize> {
    if n == 0 {
        return Err(OryxError::invalid("haystack needs at least one frame"));
    }
    if !(0.0..=1.0).contains(&depth) {
        return Err(OryxError::invalid(format!("depth {depth} outside [0, 1]")));
    }
    Ok(((depth * n as f64).floor() as usize).min(n - 1))
}

/// Builds a seeded haystack and inserts the needle; returns the `n + 1`
/// frames and the needle position.
pub fn insert_needle(spec: &NeedleSpec, seed: u64, cfg: &SynthConfig) -> Result<(Vec<Frame>, usize)> {
    let index = needle_index(spec.haystack_frames, spec.depth)?;
    let mut frames = haystack(spec.haystack_frames, seed, cfg)?;
    frames.insert(index, spec.needle.clone());
    Ok((frames, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Captioning { index: usize },
    Differing { first: usize, second: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub indices: Vec<usize>,
    pub prompt: String,
    pub answer: String,
}

pub fn build_tasks(frames: &[Frame], mode: TaskMode, cfg: &SynthConfig) -> Result<TaskRecord> {
    let check = |i: usize| -> Result<&Frame> {
        frames
            .get(i)
            .ok_or_else(|| OryxError::invalid(format!("frame index {i} out of range ({} frames)", frames.len())))
    };
    match mode {
        TaskMode::Captioning { index } => {
            let frame = check(index)?;
            let payload = decode_payload(&frame.pixels)
                .ok_or_else(|| OryxError::invalid(format!("frame {index} carries no payload")))?;
            Ok(TaskRecord {
                indices: vec![index],
                prompt: format!("Describe frame {index}."),
                answer: payload.text().to_string(),
            })
        }
        TaskMode::Differing { first, second } => {
            if first == second {
                return Err(OryxError::invalid(format!("differing needs two distinct indices, got {first} twice")));
            }
            let (a, b) = (check(first)?, check(second)?);
            if a.pixels.dim() != b.pixels.dim() {
                return Err(OryxError::shape("frames to compare differ in shape"));
            }
            let cells = differing_patches(a, b, cfg.patch);
            let answer = if cells.is_empty() {
                "no difference".to_string()
            } else {
                cells
                    .iter()
                    .map(|(r, c)| format!("patch ({r}, {c})"))
                    .collect::<Vec<_>>()
                    .join("; ")
            };
            Ok(TaskRecord {
                indices: vec![first, second],
                prompt: format!("What differs between frame {first} and frame {second}?"),
                answer,
            })
        }
    }
}

fn differing_patches(a: &Frame, b: &Frame, patch: usize) -> Vec<(usize, usize)> {
    let (h, w, _) = a.pixels.dim();
    let patch = patch.max(1);
    let mut cells = Vec::new();
    for r in 0..h.div_ceil(patch) {
        for c in 0..w.div_ceil(patch) {
            let differs = (r * patch..((r + 1) * patch).min(h)).any(|y| {
                (c * patch..((c + 1) * patch).min(w)).any(|x| {
                    a.pixels.slice(ndarray::s![y, x, ..]) != b.pixels.slice(ndarray::s![y, x, ..])
                })
            });
            if differs {
                cells.push((r, c));
            }
        }
    }
    cells
}
