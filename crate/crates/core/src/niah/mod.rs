//! Needle-in-a-haystack data and evaluation.
//!
//! Haystacks are procedurally generated frames that each carry a
//! machine-readable payload in their first pixels, so ground truth is exact
//! and no captioning model is involved.

mod grid;
mod overlay;
mod synth;
mod tasks;

pub use grid::{
    eval_grid, ConstantRetriever, GridResult, OracleRetriever, Query, Retriever, SampledRetriever,
    DEFAULT_DEPTHS, DEFAULT_FRAME_COUNTS, DEFAULT_TRIALS,
};
pub use overlay::{annotate_correspondences, parse_tracks_jsonl, TrackAnnotation, GLYPH_HEIGHT, GLYPH_WIDTH};
pub use synth::{decode_payload, encode_payload, haystack, synth_frame, Frame, Payload, SynthConfig};
pub use tasks::{build_tasks, insert_needle, needle_index, NeedlePayload, NeedleSpec, TaskMode, TaskRecord};
