use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{decode_payload, Frame, Payload, SynthConfig};
use super::tasks::{insert_needle, NeedlePayload, NeedleSpec};
use crate::error::{OryxError, Result};
use crate::init;
use crate::planner::{uniform_indices, Category, PlannerConfig};

pub const DEFAULT_DEPTHS: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const DEFAULT_FRAME_COUNTS: [usize; 16] = [
    100, 200, 300, 400, 500, 600, 700, 800, 900, 1000, 1100, 1200, 1300, 1400, 1500, 1600,
];
pub const DEFAULT_TRIALS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub question: String,
}

/// Anything that answers a question about a frame sequence.
pub trait Retriever: Sync {
    fn answer(&self, frames: &[Frame], query: &Query) -> String;
}

impl<F> Retriever for F
where
    F: Fn(&[Frame], &Query) -> String + Sync,
{
    fn answer(&self, frames: &[Frame], query: &Query) -> String {
        self(frames, query)
    }
}

fn first_needle<'a>(mut frames: impl Iterator<Item = &'a Frame>) -> Option<String> {
    frames.find_map(|f| match decode_payload(&f.pixels) {
        Some(Payload::Needle(s)) => Some(s),
        _ => None,
    })
}

/// Reads every frame's payload.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleRetriever;

impl Retriever for OracleRetriever {
    fn answer(&self, frames: &[Frame], _query: &Query) -> String {
        first_needle(frames.iter()).unwrap_or_default()
    }
}

/// Always answers the same string.
#[derive(Debug, Clone, Default)]
pub struct ConstantRetriever(pub String);

impl Retriever for ConstantRetriever {
    fn answer(&self, _frames: &[Frame], _query: &Query) -> String {
        self.0.clone()
    }
}

/// Sees only the frames the long-video plan keeps, then reads payloads.
#[derive(Debug, Clone, Default)]
pub struct SampledRetriever {
    pub planner: PlannerConfig,
}

impl Retriever for SampledRetriever {
    fn answer(&self, frames: &[Frame], _query: &Query) -> String {
        let cap = self.planner.frame_cap(Category::LongVideo);
        first_needle(uniform_indices(frames.len(), cap).into_iter().map(|i| &frames[i])).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub depths: Vec<f64>,
    pub frame_counts: Vec<usize>,
    pub trials: usize,
    /// `accuracy[d][n]` for depth `d` and frame count `n`.
    pub accuracy: Vec<Vec<f64>>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("depth,frames,accuracy\n");
        for (d, row) in self.depths.iter().zip(&self.accuracy) {
            for (n, acc) in self.frame_counts.iter().zip(row) {
                let _ = writeln!(out, "{d:.2},{n},{acc:.4}");
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        let cells = self.accuracy.iter().flatten();
        let count = self.depths.len() * self.frame_counts.len();
        cells.sum::<f64>() / count.max(1) as f64
    }
}

fn cell_seed(seed: u64, d: usize, n: usize, trial: usize) -> u64 {
    init::substream(seed, &format!("niah.{d}.{n}.{trial}")).random()
}

/// Accuracy of `retriever` over the depth × length grid. Each cell is scored
/// over `trials` independently seeded haystacks.
pub fn eval_grid<R: Retriever + ?Sized>(
    retriever: &R,
    depths: &[f64],
    frame_counts: &[usize],
    trials: usize,
    seed: u64,
    synth: &SynthConfig,
) -> Result<GridResult> {
    if depths.is_empty() || frame_counts.is_empty() {
        return Err(OryxError::invalid("evaluation grid needs at least one depth and one frame count"));
    }
    if trials == 0 {
        return Err(OryxError::invalid("trials must be positive"));
    }
    if let Some(d) = depths.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(OryxError::invalid(format!("depth {d} outside [0, 1]")));
    }
    if frame_counts.contains(&0) {
        return Err(OryxError::invalid("frame counts must be positive"));
    }
    let cells: Vec<(usize, usize)> = (0..depths.len())
        .flat_map(|d| (0..frame_counts.len()).map(move |n| (d, n)))
        .collect();
    let scores = cells
        .par_iter()
        .map(|&(d, n)| {
            let mut hits = 0usize;
            for trial in 0..trials {
                let s = cell_seed(seed, d, n, trial);
                let answer = format!("needle-{:08x}", s as u32);
                let payload = NeedlePayload {
                    question: "What is written on the needle frame?".into(),
                    answer: answer.clone(),
                };
                let spec = NeedleSpec::synthetic(frame_counts[n], depths[d], payload, s, synth)?;
                let (frames, _) = insert_needle(&spec, s, synth)?;
                let query = Query {
                    question: spec.payload.question.clone(),
                };
                if retriever.answer(&frames, &query) == answer {
                    hits += 1;
                }
            }
            Ok(hits as f64 / trials as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let accuracy = scores.chunks(frame_counts.len()).map(<[f64]>::to_vec).collect();
    Ok(GridResult {
        depths: depths.to_vec(),
        frame_counts: frame_counts.to_vec(),
        trials,
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEPTHS: [f64; 3] = [0.0, 0.5, 1.0];
    const COUNTS: [usize; 3] = [10, 50, 300];

    #[test]
    fn oracle_is_perfect_and_constant_is_zero() {
        let cfg = SynthConfig::default();
        let oracle = eval_grid(&OracleRetriever, &DEPTHS, &COUNTS, 2, 7, &cfg).unwrap();
        assert!(oracle.accuracy.iter().flatten().all(|&a| a == 1.0));
        let wrong = eval_grid(&ConstantRetriever("nope".into()), &DEPTHS, &COUNTS, 2, 7, &cfg).unwrap();
        assert!(wrong.accuracy.iter().flatten().all(|&a| a == 0.0));
    }

    #[test]
    fn sampled_retriever_is_perfect_below_the_cap() {
        let cfg = SynthConfig::default();
        let r = SampledRetriever::default();
        let g = eval_grid(&r, &DEPTHS, &[10, 200], 2, 1, &cfg).unwrap();
        assert!(g.accuracy.iter().flatten().all(|&a| a == 1.0));
        let g = eval_grid(&r, &DEPTHS, &[2000], 3, 1, &cfg).unwrap();
        assert!(g.accuracy.iter().flatten().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn csv_is_reproducible() {
        let cfg = SynthConfig::default();
        let a = eval_grid(&OracleRetriever, &DEPTHS, &COUNTS, 1, 3, &cfg).unwrap().to_csv();
        let b = eval_grid(&OracleRetriever, &DEPTHS, &COUNTS, 1, 3, &cfg).unwrap().to_csv();
        assert_eq!(a, b);
        assert!(a.starts_with("depth,frames,accuracy\n"));
        assert_eq!(a.lines().count(), 1 + DEPTHS.len() * COUNTS.len());
        assert!(a.contains("0.50,50,1.0000"));
    }

    #[test]
    fn closures_are_retrievers() {
        let cfg = SynthConfig::default();
        let f = |frames: &[Frame], _q: &Query| OracleRetriever.answer(frames, _q);
        let g = eval_grid(&f, &[0.3], &[20], 1, 0, &cfg).unwrap();
        assert_eq!(g.accuracy, vec![vec![1.0]]);
    }

    #[test]
    fn bad_axes_are_rejected() {
        let cfg = SynthConfig::default();
        assert!(eval_grid(&OracleRetriever, &[], &COUNTS, 1, 0, &cfg).is_err());
        assert!(eval_grid(&OracleRetriever, &DEPTHS, &[], 1, 0, &cfg).is_err());
        assert!(eval_grid(&OracleRetriever, &[1.2], &COUNTS, 1, 0, &cfg).is_err());
        assert!(eval_grid(&OracleRetriever, &DEPTHS, &COUNTS, 0, 0, &cfg).is_err());
    }
}
