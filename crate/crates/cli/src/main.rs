//! `oryx` command-line front end.
//!
//! Every subcommand prints one JSON document on stdout. Tensors and CSV go
//! to the files named by `--output`. Exit status is 0 on success, 2 for
//! invalid arguments or data, 3 for numerical failures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use ndarray::{Array3, Array4, ArrayD, Axis, Ix3, Ix4};
use serde_json::{json, Value};

use oryx_core::compressor::{compress, compressed_token_count, CompressorConfig, CompressorWeights};
use oryx_core::harness::{self, HarnessConfig, Model, Stage, StageSchedule};
use oryx_core::niah::{self, ConstantRetriever, OracleRetriever, Retriever, SampledRetriever, SynthConfig};
use oryx_core::packing::{masked_attention, pack, segment_attention, AttentionWeights};
use oryx_core::planner::{plan_clip, PlannerConfig};
use oryx_core::tensor_file::{self, AnyTensor};
use oryx_core::{init, DownsampleVariant, Encoder, EncoderConfig, FeatureMap, Modality, OryxError, Ratio, Resolution, Scalar, VisualInput};

#[derive(Parser)]
#[command(name = "oryx", version, about = "Native-resolution visual front end with on-demand token compression")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, env = "ORYX_SEED", default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan resolution, compression ratio, frame sampling and token budget.
    Plan {
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long, default_value_t = 1.0)]
        fps: f64,
        /// Videos with more 1-fps frames than this are long.
        #[arg(long)]
        long_threshold: Option<usize>,
    },
    /// Encode an `[H, W, C]` pixel tensor into a feature map.
    Encode {
        #[arg(long)]
        input: PathBuf,
        /// Encoder configuration as JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compress an `[rows, cols, C]` feature map into language-model tokens.
    Compress {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_ratio)]
        ratio: Ratio,
        #[arg(long, default_value = "avgpool")]
        variant: DownsampleVariant,
        #[arg(long, default_value_t = 64)]
        lm_channels: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic haystack with one needle frame.
    NiahGen {
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        depth: f64,
        #[arg(long, default_value = "the needle")]
        answer: String,
        /// Stacked `[N+1, H, W, 1]` frames.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a retriever over the depth × length grid.
    NiahEval {
        #[arg(long, value_delimiter = ',', default_values_t = niah::DEFAULT_DEPTHS.to_vec())]
        depths: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = niah::DEFAULT_FRAME_COUNTS.to_vec())]
        frame_counts: Vec<usize>,
        #[arg(long, default_value_t = niah::DEFAULT_TRIALS)]
        trials: usize,
        /// oracle, constant or sampled.
        #[arg(long, default_value = "oracle")]
        retriever: String,
        /// CSV destination.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Overlay track boxes and id labels onto stacked `[N, H, W, C]` frames.
    Annotate {
        #[arg(long)]
        input: PathBuf,
        /// JSON lines of `{frame_index, object_id, box: [x, y, w, h]}`.
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the toy stack.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        probes: usize,
        /// Group name, `all`, or a dotted parameter prefix.
        #[arg(long, default_value = "all")]
        selector: String,
        /// Parameters are redrawn from N(0, std²) before checking.
        #[arg(long, default_value_t = 0.3)]
        std: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train the toy stack on a synthetic mixed batch.
    Train {
        #[arg(long, default_value = "Stage2Joint", value_parser = parse_stage)]
        stage: Stage,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        /// Loss curve destination (`step,loss` CSV).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Time segmented against masked packed attention.
    Bench {
        #[arg(long, value_delimiter = ',', required = true)]
        segments: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

fn parse_ratio(s: &str) -> Result<Ratio, String> {
    let r: usize = s.parse().map_err(|e| format!("{e}"))?;
    Ratio::try_from(r).map_err(|e| e.to_string())
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::ALL
        .into_iter()
        .find(|st| format!("{st:?}").eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown stage `{s}` (ViTAdapt, Stage1Pretrain, Stage1SFT, Stage2Joint)"))
}

fn error_kind(e: &OryxError) -> &'static str {
    match e {
        OryxError::InvalidInput(_) => "invalid_input",
        OryxError::Shape(_) => "shape",
        OryxError::TooSmall { .. } => "too_small",
        OryxError::Integrity(_) => "integrity",
        OryxError::UnsupportedRatio(_) => "unsupported_ratio",
        OryxError::UnknownGroup(_) => "unknown_group",
        OryxError::Numerical(_) => "numerical",
        OryxError::TensorFormat { .. } => "tensor_format",
        OryxError::Io(_) => "io",
        OryxError::Json(_) => "json",
    }
}

fn exit_code(e: &OryxError) -> u8 {
    match e {
        OryxError::Numerical(_) => 3,
        _ => 2,
    }
}

fn emit(v: &Value) {
    // A closed pipe downstream is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).expect("serialisable"));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            emit(&v);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut err = json!({ "kind": error_kind(&e), "message": e.to_string() });
            if let OryxError::TensorFormat { offset, .. } = &e {
                err["offset"] = json!(offset);
            }
            emit(&json!({ "error": err }));
            ExitCode::from(exit_code(&e))
        }
    }
}

type Res<T> = oryx_core::Result<T>;

fn run(cli: Cli) -> Res<Value> {
    let seed = cli.seed;
    match cli.command {
        Command::Plan { width, height, frames, fps, long_threshold } => {
            let mut cfg = PlannerConfig::default();
            if let Some(t) = long_threshold {
                cfg.long_threshold = t;
            }
            let clip = plan_clip(Resolution::new(height, width), frames, fps, &cfg)?;
            Ok(serde_json::to_value(clip)?)
        }
        Command::Encode { input, config, output } => {
            let mut cfg: EncoderConfig = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => EncoderConfig::default(),
            };
            cfg.seed = seed;
            match tensor_file::read_file(&input)? {
                AnyTensor::F32(t) => encode_cmd(t, cfg, output.as_deref()),
                AnyTensor::F64(t) => encode_cmd(t, cfg, output.as_deref()),
            }
        }
        Command::Compress { input, ratio, variant, lm_channels, output } => match tensor_file::read_file(&input)? {
            AnyTensor::F32(t) => compress_cmd(t, ratio, variant, lm_channels, seed, output.as_deref()),
            AnyTensor::F64(t) => compress_cmd(t, ratio, variant, lm_channels, seed, output.as_deref()),
        },
        Command::NiahGen { frames, depth, answer, output } => {
            let synth = SynthConfig::default();
            let payload = niah::NeedlePayload {
                question: "What is written on the needle frame?".into(),
                answer,
            };
            let spec = niah::NeedleSpec::synthetic(frames, depth, payload, seed, &synth)?;
            let (stack, index) = niah::insert_needle(&spec, seed, &synth)?;
            if let Some(path) = &output {
                let views: Vec<_> = stack.iter().map(|f| f.pixels.view()).collect();
                let stacked = ndarray::stack(Axis(0), &views).map_err(|e| OryxError::shape(e.to_string()))?;
                tensor_file::write_file(path, &stacked.into_dyn().view())?;
            }
            Ok(json!({
                "haystack_frames": frames,
                "total_frames": stack.len(),
                "depth": depth,
                "needle_index": index,
                "payload": spec.payload,
                "frame_shape": [synth.height, synth.width, 1],
                "output": output,
            }))
        }
        Command::NiahEval { depths, frame_counts, trials, retriever, output } => {
            let retriever: Box<dyn Retriever> = match retriever.as_str() {
                "oracle" => Box::new(OracleRetriever),
                "constant" => Box::new(ConstantRetriever("no needle".into())),
                "sampled" => Box::new(SampledRetriever::default()),
                other => {
                    return Err(OryxError::invalid(format!(
                        "unknown retriever `{other}` (oracle, constant, sampled)"
                    )))
                }
            };
            let grid = niah::eval_grid(retriever.as_ref(), &depths, &frame_counts, trials, seed, &SynthConfig::default())?;
            if let Some(path) = &output {
                std::fs::write(path, grid.to_csv())?;
            }
            Ok(json!({
                "depths": grid.depths,
                "frame_counts": grid.frame_counts,
                "trials": grid.trials,
                "mean_accuracy": grid.mean(),
                "accuracy": grid.accuracy,
                "output": output,
            }))
        }
        Command::Annotate { input, tracks, output } => {
            let frames = tensor_file::read_file(&input)?.into_scalar::<f32>();
            let frames = frames
                .into_dimensionality::<Ix4>()
                .map_err(|_| OryxError::shape("annotate expects stacked [N, H, W, C] frames"))?;
            let inputs: Vec<_> = frames
                .outer_iter()
                .map(|f| VisualInput::new(f.to_owned(), Modality::ShortVideoFrame))
                .collect();
            let tracks = niah::parse_tracks_jsonl(&std::fs::read_to_string(tracks)?)?;
            let annotated = niah::annotate_correspondences(&inputs, &tracks)?;
            let views: Vec<_> = annotated.iter().map(|f| f.pixels.view()).collect();
            let stacked: Array4<f32> = ndarray::stack(Axis(0), &views).map_err(|e| OryxError::shape(e.to_string()))?;
            tensor_file::write_file(&output, &stacked.into_dyn().view())?;
            Ok(json!({ "frames": inputs.len(), "tracks": tracks.len(), "output": output }))
        }
        Command::Gradcheck { probes, selector, std, tolerance } => {
            let cfg = HarnessConfig { seed, ..HarnessConfig::default() };
            let batch = harness::synthetic_batch::<f64>(&cfg, seed)?;
            let mut model = Model::<f64>::new(cfg)?;
            model.randomize(std, seed);
            let report = model.finite_diff_check(&batch, &selector, probes, seed)?;
            if !(report.max_rel_err <= tolerance) {
                return Err(OryxError::Numerical(format!(
                    "max relative error {:e} exceeds {:e} ({} probes, selector `{}`)",
                    report.max_rel_err, tolerance, probes, selector
                )));
            }
            Ok(json!({
                "selector": report.selector,
                "probes": report.probes.len(),
                "max_rel_err": report.max_rel_err,
                "tolerance": tolerance,
                "passed": true,
            }))
        }
        Command::Train { stage, steps, lr, loss_csv } => {
            let cfg = HarnessConfig { seed, ..HarnessConfig::default() };
            let batch = harness::synthetic_batch::<f64>(&cfg, seed)?;
            let mut model = Model::<f64>::new(cfg)?;
            let losses = model.train(&batch, &StageSchedule::new(stage), steps, lr)?;
            let final_loss = model.loss(&batch)?;
            if let Some(path) = &loss_csv {
                std::fs::write(path, harness::loss_csv(&losses))?;
            }
            Ok(json!({
                "stage": format!("{stage:?}"),
                "steps": steps,
                "lr": lr,
                "initial_loss": losses.first(),
                "final_loss": final_loss,
                "loss_csv": loss_csv,
            }))
        }
        Command::Bench { segments, channels, heads, repeats } => bench_cmd(&segments, channels, heads, repeats.max(1), seed),
    }
}

fn encode_cmd<T: Scalar>(t: ArrayD<T>, cfg: EncoderConfig, output: Option<&Path>) -> Res<Value> {
    let pixels: Array3<T> = t
        .into_dimensionality::<Ix3>()
        .map_err(|_| OryxError::shape("encode expects an [H, W, C] pixel tensor"))?;
    let encoder = Encoder::<T>::new(cfg)?;
    let input = VisualInput::new(pixels, Modality::Image);
    let res = input.resolution();
    let map = encoder.encode(std::slice::from_ref(&input))?.remove(0);
    if !map.is_finite() {
        return Err(OryxError::Numerical("encoder produced non-finite features".into()));
    }
    if let Some(path) = output {
        tensor_file::write_file(path, &map.values.view().into_dyn())?;
    }
    Ok(json!({
        "dtype": T::DTYPE,
        "resolution": res,
        "grid": { "rows": map.rows(), "cols": map.cols() },
        "tokens": map.token_count(),
        "channels": map.channels(),
        "output": output,
    }))
}

fn compress_cmd<T: Scalar>(
    t: ArrayD<T>,
    ratio: Ratio,
    variant: DownsampleVariant,
    lm_channels: usize,
    seed: u64,
    output: Option<&Path>,
) -> Res<Value> {
    let values: Array3<T> = t
        .into_dimensionality::<Ix3>()
        .map_err(|_| OryxError::shape("compress expects an [rows, cols, C] feature map"))?;
    let f_h = FeatureMap::new(values);
    let weights = CompressorWeights::<T>::new(&CompressorConfig {
        channels: f_h.channels(),
        lm_channels,
        key_dim: 0,
        variant,
        seed,
    })?;
    let tokens = compress(&f_h, ratio, &weights)?;
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(OryxError::Numerical("compressor produced non-finite tokens".into()));
    }
    debug_assert_eq!(tokens.nrows(), compressed_token_count(f_h.rows(), f_h.cols(), ratio));
    if let Some(path) = output {
        tensor_file::write_file(path, &tokens.view().into_dyn())?;
    }
    Ok(json!({
        "dtype": T::DTYPE,
        "input_grid": { "rows": f_h.rows(), "cols": f_h.cols(), "tokens": f_h.token_count() },
        "ratio": ratio,
        "variant": variant,
        "tokens": tokens.nrows(),
        "lm_channels": tokens.ncols(),
        "output": output,
    }))
}

fn bench_cmd(segments: &[usize], channels: usize, heads: usize, repeats: usize, seed: u64) -> Res<Value> {
    let mut rng = init::substream(seed, "bench");
    let weights = AttentionWeights::<f32>::init(&mut rng, channels, heads)?;
    let seqs: Vec<ndarray::Array2<f32>> = segments
        .iter()
        .map(|&n| init::normal(&mut rng, (n, channels), 1.0))
        .collect();
    let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
    let batch = pack(&views)?;
    let time = |f: &dyn Fn() -> Res<oryx_core::PackedBatch<f32>>| -> Res<(f64, oryx_core::PackedBatch<f32>)> {
        let mut out = f()?;
        let start = Instant::now();
        for _ in 0..repeats {
            out = f()?;
        }
        Ok((start.elapsed().as_secs_f64() * 1e3 / repeats as f64, out))
    };
    let (seg_ms, seg) = time(&|| segment_attention(&batch, &weights))?;
    let (mask_ms, masked) = time(&|| masked_attention(&batch, &weights))?;
    let max_abs_diff = seg
        .tokens
        .iter()
        .zip(masked.tokens.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    if !max_abs_diff.is_finite() {
        return Err(OryxError::Numerical("attention produced non-finite values".into()));
    }
    Ok(json!({
        "segments": segments,
        "total_tokens": batch.total_tokens(),
        "channels": channels,
        "heads": heads,
        "repeats": repeats,
        "segmented_ms": seg_ms,
        "masked_ms": mask_ms,
        "max_abs_diff": max_abs_diff,
    }))
}
