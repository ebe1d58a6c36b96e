use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Modality, VisualInput};
use crate::error::{OryxError, Result};
use crate::init;

pub type Frame = VisualInput<f32>;

const MARKER: u8 = 0xA5;
const HEADER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Patch side used to localise differences between frames.
    pub patch: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            patch: 4,
        }
    }
}

impl SynthConfig {
    pub fn capacity(&self) -> usize {
        (self.height * self.width).saturating_sub(HEADER + 1)
    }
}

/// Decoded frame payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Needle(String),
    Hay(String),
}

impl Payload {
    fn to_wire(&self) -> String {
        match self {
            Payload::Needle(s) => format!("N|{s}"),
            Payload::Hay(s) => format!("H|{s}"),
        }
    }

    fn from_wire(s: &str) -> Option<Self> {
        if let Some(rest) = s.strip_prefix("N|") {
            Some(Payload::Needle(rest.to_string()))
        } else {
            s.strip_prefix("H|").map(|rest| Payload::Hay(rest.to_string()))
        }
    }

    pub fn text(&self) -> &str {
        match self {
            Payload::Needle(s) | Payload::Hay(s) => s,
        }
    }
}

#[inline]
fn byte_to_pixel(b: u8) -> f32 {
    b as f32 / 255.0
}

#[inline]
fn pixel_to_byte(v: f32) -> Option<u8> {
    let x = (v * 255.0).round();
    (0.0..=255.0).contains(&x).then_some(x as u8)
}

/// Writes `[marker, len_hi, len_lo, bytes.., xor-checksum]` into the first
/// pixels (row-major, channel 0).
pub fn encode_payload(pixels: &mut Array3<f32>, payload: &Payload) -> Result<()> {
    let wire = payload.to_wire();
    let bytes = wire.as_bytes();
    let (h, w, _) = pixels.dim();
    if bytes.len() > u16::MAX as usize || bytes.len() + HEADER + 1 > h * w {
        return Err(OryxError::invalid(format!(
            "payload of {} bytes does not fit a {h}x{w} frame",
            bytes.len()
        )));
    }
    let len = bytes.len() as u16;
    let checksum = bytes.iter().fold(0u8, |acc, &b| acc ^ b);
    let stream = [MARKER, (len >> 8) as u8, len as u8]
        .into_iter()
        .chain(bytes.iter().copied())
        .chain(std::iter::once(checksum));
    for (k, b) in stream.enumerate() {
        pixels[[k / w, k % w, 0]] = byte_to_pixel(b);
    }
    Ok(())
}

pub fn decode_payload(pixels: &Array3<f32>) -> Option<Payload> {
    let (h, w, _) = pixels.dim();
    let at = |k: usize| -> Option<u8> {
        if k >= h * w {
            return None;
        }
        pixel_to_byte(pixels[[k / w, k % w, 0]])
    };
    if at(0)? != MARKER {
        return None;
    }
    let len = ((at(1)? as usize) << 8) | at(2)? as usize;
    let bytes: Vec<u8> = (0..len).map(|i| at(HEADER + i)).collect::<Option<_>>()?;
    let checksum = bytes.iter().fold(0u8, |acc, &b| acc ^ b);
    if at(HEADER + len)? != checksum {
        return None;
    }
    Payload::from_wire(std::str::from_utf8(&bytes).ok()?)
}

/// Seeded noise frame with `payload` embedded.
pub fn synth_frame(payload: &Payload, seed: u64, cfg: &SynthConfig) -> Result<Frame> {
    let mut rng = init::rng(seed);
    // Noise stays away from the marker byte so stray frames never decode.
    let mut pixels = Array3::from_shape_simple_fn((cfg.height, cfg.width, 1), || {
        byte_to_pixel(rng.random_range(0u8..0xA0))
    });
    encode_payload(&mut pixels, payload)?;
    Ok(VisualInput::new(pixels, Modality::LongVideoFrame))
}

/// `n` distractor frames labelled `hay-<k>`.
pub fn haystack(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<Frame>> {
    (0..n)
        .map(|k| {
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64);
            synth_frame(&Payload::Hay(format!("hay-{k}")), s, cfg)
        })
        .collect()
}
