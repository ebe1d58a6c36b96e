use serde::{Deserialize, Serialize};

use super::synth::Frame;
use crate::error::{OryxError, Result};

pub const GLYPH_WIDTH: usize = 3;
pub const GLYPH_HEIGHT: usize = 5;

// 3x5 digits, one row per entry, bit 2 is the leftmost column.
const DIGITS: [[u8; GLYPH_HEIGHT]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackAnnotation {
    pub frame_index: usize,
    pub object_id: u32,
    /// `[x, y, w, h]` in pixels.
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
}

pub fn parse_tracks_jsonl(text: &str) -> Result<Vec<TrackAnnotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| OryxError::invalid(format!("track line {}: {e}", i + 1)))
        })
        .collect()
}

fn paint(frame: &mut Frame, y: usize, x: usize, value: f32) {
    let (h, w, c) = frame.pixels.dim();
    if y < h && x < w {
        for ch in 0..c {
            frame.pixels[[y, x, ch]] = value;
        }
    }
}

fn draw_label(frame: &mut Frame, top: usize, left: usize, id: u32) {
    let text = id.to_string();
    let width = text.len() * (GLYPH_WIDTH + 1) + 1;
    for dy in 0..GLYPH_HEIGHT + 2 {
        for dx in 0..width {
            paint(frame, top + dy, left + dx, 0.0);
        }
    }
    for (k, ch) in text.bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        let x0 = left + 1 + k * (GLYPH_WIDTH + 1);
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..GLYPH_WIDTH {
                if bits >> (GLYPH_WIDTH - 1 - col) & 1 == 1 {
                    paint(frame, top + 1 + row, x0 + col, 1.0);
                }
            }
        }
    }
}

/// Draws each track's box outline and id label. The label sits just inside
/// the box's top-left corner and is clipped to the frame.
pub fn annotate_correspondences(frames: &[Frame], tracks: &[TrackAnnotation]) -> Result<Vec<Frame>> {
    for t in tracks {
        let frame = frames.get(t.frame_index).ok_or_else(|| {
            OryxError::invalid(format!("track frame {} out of range ({} frames)", t.frame_index, frames.len()))
        })?;
        let [x, y, w, h] = t.bbox;
        let (fh, fw, _) = frame.pixels.dim();
        if w == 0 || h == 0 || x + w > fw || y + h > fh {
            return Err(OryxError::invalid(format!(
                "box {:?} of object {} does not fit a {fh}x{fw} frame",
                t.bbox, t.object_id
            )));
        }
    }
    let mut out = frames.to_vec();
    for t in tracks {
        let frame = &mut out[t.frame_index];
        let [x, y, w, h] = t.bbox;
        for dx in 0..w {
            paint(frame, y, x + dx, 1.0);
            paint(frame, y + h - 1, x + dx, 1.0);
        }
        for dy in 0..h {
            paint(frame, y + dy, x, 1.0);
            paint(frame, y + dy, x + w - 1, 1.0);
        }
        draw_label(frame, y + 1, x + 1, t.object_id);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Modality;
    use ndarray::{s, Array3};

    fn blank(n: usize) -> Vec<Frame> {
        (0..n)
            .map(|_| Frame::new(Array3::from_elem((40, 40, 3), 0.5), Modality::ShortVideoFrame))
            .collect()
    }

    #[test]
    fn parses_jsonl() {
        let text = "{\"frame_index\":0,\"object_id\":3,\"box\":[1,2,10,12]}\n\n{\"frame_index\":1,\"object_id\":3,\"box\":[5,5,8,8]}\n";
        let tracks = parse_tracks_jsonl(text).unwrap();
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[0].bbox, [1, 2, 10, 12]);
        assert!(parse_tracks_jsonl("{not json}").is_err());
    }

    #[test]
    fn empty_tracks_leave_frames_untouched() {
        let frames = blank(3);
        assert_eq!(annotate_correspondences(&frames, &[]).unwrap(), frames);
    }

    #[test]
    fn same_id_renders_the_same_label() {
        let frames = blank(2);
        let tracks = [
            TrackAnnotation { frame_index: 0, object_id: 7, bbox: [2, 3, 12, 12] },
            TrackAnnotation { frame_index: 1, object_id: 7, bbox: [20, 15, 14, 10] },
        ];
        let out = annotate_correspondences(&frames, &tracks).unwrap();
        let a = out[0].pixels.slice(s![4..11, 3..8, ..]).to_owned();
        let b = out[1].pixels.slice(s![16..23, 21..26, ..]).to_owned();
        assert_eq!(a, b);
        // Box corners are drawn.
        assert_eq!(out[0].pixels[[3, 2, 0]], 1.0);
        assert_eq!(out[0].pixels[[14, 13, 1]], 1.0);
        // The label glyph contains lit pixels.
        assert!(a.iter().any(|&v| v == 1.0));
        assert!(a.iter().any(|&v| v == 0.0));
    }

    #[test]
    fn annotation_is_deterministic() {
        let frames = blank(1);
        let tracks = [TrackAnnotation { frame_index: 0, object_id: 1234, bbox: [0, 0, 40, 40] }];
        assert_eq!(
            annotate_correspondences(&frames, &tracks).unwrap(),
            annotate_correspondences(&frames, &tracks).unwrap()
        );
    }

    #[test]
    fn out_of_bounds_boxes_are_rejected() {
        let frames = blank(1);
        let bad = [TrackAnnotation { frame_index: 0, object_id: 1, bbox: [35, 0, 10, 10] }];
        assert!(annotate_correspondences(&frames, &bad).is_err());
        let bad = [TrackAnnotation { frame_index: 4, object_id: 1, bbox: [0, 0, 4, 4] }];
        assert!(annotate_correspondences(&frames, &bad).is_err());
        let bad = [TrackAnnotation { frame_index: 0, object_id: 1, bbox: [0, 0, 0, 4] }];
        assert!(annotate_correspondences(&frames, &bad).is_err());
    }
}
