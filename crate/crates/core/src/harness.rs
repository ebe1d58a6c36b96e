//! Toy end-to-end stack: encoder → compressor → one-layer head.
//!
//! The head mean-pools the compressed tokens of a sample and classifies them
//! with a single linear layer under softmax cross-entropy. Training is plain
//! SGD with stage-wise freezing of named parameter groups:
//!
//! | group        | parameters                         |
//! |--------------|------------------------------------|
//! | `encoder`    | `encoder.*`                        |
//! | `compressor` | `compressor.*` except the projector |
//! | `projector`  | `compressor.shared_mlp.*`          |
//! | `head`       | `head.*`                           |

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{compress_backward, compress_train, CompressorConfig, CompressorWeights};
use crate::encoder::{Encoder, EncoderConfig, FeatureMap, Modality, VisualInput};
use crate::error::{OryxError, Result};
use crate::geometry::Resolution;
use crate::init;
use crate::nn::{Gradients, Linear, Parameterized};
use crate::planner::{classify_input, uniform_indices, Category, PlannerConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Compressor,
    Projector,
    Head,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::Compressor, Group::Projector, Group::Head];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Compressor => "compressor",
            Group::Projector => "projector",
            Group::Head => "head",
        }
    }

    /// Group owning the parameter called `name`.
    pub fn of(name: &str) -> Option<Group> {
        if name.starts_with("encoder.") {
            Some(Group::Encoder)
        } else if name.starts_with("compressor.shared_mlp.") {
            Some(Group::Projector)
        } else if name.starts_with("compressor.") {
            Some(Group::Compressor)
        } else if name.starts_with("head.") {
            Some(Group::Head)
        } else {
            None
        }
    }
}

impl std::str::FromStr for Group {
    type Err = OryxError;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| OryxError::UnknownGroup(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    ViTAdapt,
    Stage1Pretrain,
    Stage1SFT,
    Stage2Joint,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::ViTAdapt, Stage::Stage1Pretrain, Stage::Stage1SFT, Stage::Stage2Joint];

    pub fn default_groups(self) -> &'static [Group] {
        match self {
            Stage::ViTAdapt => &[Group::Encoder],
            Stage::Stage1Pretrain => &[Group::Compressor, Group::Projector],
            Stage::Stage1SFT | Stage::Stage2Joint => &[Group::Compressor, Group::Projector, Group::Head],
        }
    }

    /// Learning rate of the full-scale recipe, kept for reference only.
    pub fn reference_lr(self) -> Option<f64> {
        match self {
            Stage::ViTAdapt => None,
            Stage::Stage1Pretrain => Some(1e-3),
            Stage::Stage1SFT | Stage::Stage2Joint => Some(2e-5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stage: Stage,
    pub trainable: BTreeSet<Group>,
}

impl StageSchedule {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            trainable: stage.default_groups().iter().copied().collect(),
        }
    }

    /// Schedule with an explicit trainable set given by group names.
    pub fn with_groups(stage: Stage, groups: &[&str]) -> Result<Self> {
        let trainable = groups.iter().map(|g| g.parse()).collect::<Result<_>>()?;
        Ok(Self { stage, trainable })
    }
}

/// Desk-scale configuration of the whole stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub encoder: EncoderConfig,
    pub compressor: CompressorConfig,
    pub planner: PlannerConfig,
    pub classes: usize,
    /// Matrix weights are redrawn from `N(0, gain²/fan_in)`; 0 keeps the
    /// small per-module init, under which the toy stack learns very slowly.
    pub init_gain: f64,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        let encoder = EncoderConfig {
            patch_size: 4,
            in_channels: 3,
            channels: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            table_side: 16,
            seed: 0,
        };
        let compressor = CompressorConfig {
            channels: 8,
            lm_channels: 8,
            ..CompressorConfig::default()
        };
        let planner = PlannerConfig {
            patch_size: 4,
            long_threshold: 4,
            short_frame_cap: 4,
            long_frame_cap: 4,
            image_max_side: 24,
            video_min_side: 16,
            video_max_side: 20,
        };
        Self {
            encoder,
            compressor,
            planner,
            classes: 3,
            init_gain: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// One frame for an image, several for a clip (sampled at 1 fps).
    pub frames: Vec<VisualInput<T>>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: HarnessConfig,
    pub encoder: Encoder<T>,
    pub compressor: CompressorWeights<T>,
    /// `C_lm → classes`.
    pub head: Linear<T>,
    trainable: BTreeSet<Group>,
}

/// One evaluated finite-difference probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub selector: String,
    pub max_rel_err: f64,
    pub probes: Vec<Probe>,
}

struct Routed {
    category: Category,
    frames: Vec<usize>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: HarnessConfig) -> Result<Self> {
        if config.classes < 2 {
            return Err(OryxError::invalid("the head needs at least two classes"));
        }
        if config.compressor.channels != config.encoder.channels {
            return Err(OryxError::shape(format!(
                "compressor expects {} channels, encoder produces {}",
                config.compressor.channels, config.encoder.channels
            )));
        }
        let encoder = Encoder::new(EncoderConfig {
            seed: config.seed,
            ..config.encoder.clone()
        })?;
        let compressor = CompressorWeights::new(&CompressorConfig {
            seed: config.seed,
            ..config.compressor.clone()
        })?;
        let mut rng = init::substream(config.seed, "head");
        let head = Linear::init(&mut rng, config.compressor.lm_channels, config.classes, true);
        let mut model = Self {
            config,
            encoder,
            compressor,
            head,
            trainable: Group::ALL.into_iter().collect(),
        };
        if model.config.init_gain > 0.0 {
            let (gain, seed) = (model.config.init_gain, model.config.seed);
            let mut rng = init::substream(seed, "harness.fan_in");
            for (name, mut p) in model.named_params_mut() {
                if name.ends_with(".weight") && p.ndim() == 2 {
                    let std = gain / (p.shape()[0] as f64).sqrt();
                    let fresh: ndarray::ArrayD<T> = init::normal(&mut rng, p.raw_dim(), std);
                    p.assign(&fresh);
                }
            }
        }
        Ok(model)
    }

    pub fn trainable(&self) -> &BTreeSet<Group> {
        &self.trainable
    }

    /// Every named parameter.
    pub fn named_params(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        self.encoder.params("encoder", &mut out);
        self.compressor.params("compressor", &mut out);
        self.head.params("head", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        self.encoder.params_mut("encoder", &mut out);
        self.compressor.params_mut("compressor", &mut out);
        self.head.params_mut("head", &mut out);
        out
    }

    fn route(&self, sample: &Sample<T>) -> Result<Routed> {
        let planner = &self.config.planner;
        let category = classify_input(sample.frames.len(), planner.long_threshold)?;
        let frames = uniform_indices(sample.frames.len(), planner.frame_cap(category));
        Ok(Routed { category, frames })
    }

    /// Mean loss over `batch` and, when `with_grads`, gradients for every
    /// parameter regardless of the freeze state.
    pub fn loss_and_grads(&self, batch: &[Sample<T>], with_grads: bool) -> Result<(T, Gradients<T>)> {
        if batch.is_empty() {
            return Err(OryxError::invalid("a batch needs at least one sample"));
        }
        let routes = batch.iter().map(|s| self.route(s)).collect::<Result<Vec<_>>>()?;
        for s in batch {
            if s.label >= self.config.classes {
                return Err(OryxError::invalid(format!(
                    "label {} outside the {} classes",
                    s.label, self.config.classes
                )));
            }
        }
        let inputs: Vec<VisualInput<T>> = batch
            .iter()
            .zip(&routes)
            .flat_map(|(s, r)| r.frames.iter().map(|&i| s.frames[i].clone()))
            .collect();
        let (maps, enc_cache) = self.encoder.forward_train(&inputs)?;

        let mut k = 0;
        let mut per_sample = Vec::with_capacity(batch.len());
        for r in &routes {
            let mut frames = Vec::with_capacity(r.frames.len());
            for _ in &r.frames {
                frames.push(compress_train(&maps[k], r.category.ratio(), &self.compressor)?);
                k += 1;
            }
            per_sample.push(frames);
        }

        let b = T::from_usize_lossy(batch.len());
        let mut loss = T::zero();
        let mut grads = Gradients::new();
        let mut d_maps: Vec<FeatureMap<T>> = Vec::with_capacity(maps.len());
        for (sample, frames) in batch.iter().zip(&per_sample) {
            let n_tokens: usize = frames.iter().map(|(t, _)| t.nrows()).sum();
            let mut pooled = Array2::zeros((1, self.compressor.lm_channels()));
            for (t, _) in frames {
                pooled.row_mut(0).scaled_add(T::one(), &t.sum_axis(Axis(0)));
            }
            pooled.mapv_inplace(|v| v / T::from_usize_lossy(n_tokens));
            let logits = self.head.forward(pooled.view());
            let (l, probs) = cross_entropy(logits.row(0).to_vec(), sample.label);
            if !l.is_finite() {
                return Err(OryxError::Numerical(format!(
                    "non-finite loss {l} for label {} (logits {:?})",
                    sample.label,
                    logits.row(0).to_vec()
                )));
            }
            loss += l / b;
            if !with_grads {
                continue;
            }
            let mut d_logits = Array2::from_shape_vec((1, probs.len()), probs).expect("row vector");
            d_logits[[0, sample.label]] -= T::one();
            d_logits.mapv_inplace(|v| v / b);
            let d_pooled = self.head.backward(pooled.view(), d_logits.view(), &mut grads, "head");
            let per_token = d_pooled.row(0).mapv(|v| v / T::from_usize_lossy(n_tokens));
            for (tokens, cache) in frames {
                let d_tokens = per_token.broadcast(tokens.raw_dim()).expect("row broadcast");
                d_maps.push(compress_backward(d_tokens, &self.compressor, cache, &mut grads, "compressor"));
            }
        }
        if with_grads {
            self.encoder.backward(&d_maps, &enc_cache, &mut grads, "encoder")?;
        }
        Ok((loss, grads))
    }

    pub fn loss(&self, batch: &[Sample<T>]) -> Result<T> {
        Ok(self.loss_and_grads(batch, false)?.0)
    }

    /// One SGD step on trainable groups; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[Sample<T>], lr: T) -> Result<T> {
        let (loss, grads) = self.loss_and_grads(batch, true)?;
        self.sgd_update(&grads, lr);
        Ok(loss)
    }

    /// Redraws every parameter from `N(0, std²)`. Gradient checks run at such
    /// generic points, where gradients sit well above finite-difference noise.
    pub fn randomize(&mut self, std: f64, seed: u64) {
        let mut rng = init::substream(seed, "harness.randomize");
        for (_, mut p) in self.named_params_mut() {
            let fresh: ndarray::ArrayD<T> = init::normal(&mut rng, p.raw_dim(), std);
            p.assign(&fresh);
        }
    }

    /// Applies `θ ← θ − lr·g` to trainable parameters only.
    pub fn sgd_update(&mut self, grads: &Gradients<T>, lr: T) {
        let trainable = self.trainable.clone();
        for (name, mut p) in self.named_params_mut() {
            if !Group::of(&name).is_some_and(|g| trainable.contains(&g)) {
                continue;
            }
            if let Some(g) = grads.get(&name) {
                p.scaled_add(-lr, g);
            }
        }
    }

    /// Runs `steps` SGD steps under `schedule`; returns the loss trajectory.
    pub fn train(&mut self, batch: &[Sample<T>], schedule: &StageSchedule, steps: usize, lr: T) -> Result<Vec<T>> {
        apply_stage(self, schedule)?;
        (0..steps).map(|_| self.train_step(batch, lr)).collect()
    }

    /// Compares analytic gradients with central differences at `probes`
    /// randomly chosen scalars of the parameters matched by `selector`
    /// (a group name, `all`, or a dotted parameter prefix).
    pub fn finite_diff_check(&self, batch: &[Sample<T>], selector: &str, probes: usize, seed: u64) -> Result<GradCheckReport> {
        let (_, grads) = self.loss_and_grads(batch, true)?;
        let candidates: Vec<(String, usize)> = self
            .named_params()
            .into_iter()
            .filter(|(name, _)| selects(selector, name))
            .map(|(name, p)| (name, p.len()))
            .collect();
        let total: usize = candidates.iter().map(|(_, n)| n).sum();
        if total == 0 {
            return Err(OryxError::UnknownGroup(selector.to_string()));
        }
        let mut rng = init::substream(seed, "gradcheck");
        let mut model = self.clone();
        let mut results = Vec::with_capacity(probes);
        for _ in 0..probes {
            let mut flat = rng.random_range(0..total);
            let (name, index) = candidates
                .iter()
                .find_map(|(name, n)| {
                    if flat < *n {
                        Some((name.clone(), flat))
                    } else {
                        flat -= n;
                        None
                    }
                })
                .expect("index within total");
            let analytic = grads
                .get(&name)
                .map_or(0.0, |g| g.iter().nth(index).expect("in range").as_f64());
            let theta = model.get_scalar(&name, index);
            let h = 1e-4 * theta.as_f64().abs().max(1.0);
            model.set_scalar(&name, index, theta + T::c(h));
            let plus = model.loss(batch)?.as_f64();
            model.set_scalar(&name, index, theta - T::c(h));
            let minus = model.loss(batch)?.as_f64();
            model.set_scalar(&name, index, theta);
            let numeric = (plus - minus) / (2.0 * h);
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            results.push(Probe {
                name,
                index,
                analytic,
                numeric,
                rel_err,
            });
        }
        Ok(GradCheckReport {
            selector: selector.to_string(),
            max_rel_err: results.iter().map(|p| p.rel_err).fold(0.0, f64::max),
            probes: results,
        })
    }

    fn get_scalar(&self, name: &str, index: usize) -> T {
        let params = self.named_params();
        let (_, p) = params.iter().find(|(n, _)| n == name).expect("known parameter");
        *p.iter().nth(index).expect("in range")
    }

    fn set_scalar(&mut self, name: &str, index: usize, value: T) {
        let mut params = self.named_params_mut();
        let (_, p) = params.iter_mut().find(|(n, _)| n == name).expect("known parameter");
        *p.iter_mut().nth(index).expect("in range") = value;
    }
}

fn selects(selector: &str, name: &str) -> bool {
    match selector.parse::<Group>() {
        Ok(g) => Group::of(name) == Some(g),
        Err(_) => selector == "all" || name == selector || name.starts_with(&format!("{selector}.")),
    }
}

/// Softmax cross-entropy; returns the loss and the class probabilities.
fn cross_entropy<T: Scalar>(logits: Vec<T>, label: usize) -> (T, Vec<T>) {
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let z: T = exps.iter().copied().sum();
    let loss = z.ln() - (logits[label] - m);
    (loss, exps.into_iter().map(|e| e / z).collect())
}

/// Restricts updates to the schedule's trainable groups.
pub fn apply_stage<T: Scalar>(model: &mut Model<T>, schedule: &StageSchedule) -> Result<()> {
    let present: BTreeSet<Group> = model
        .named_params()
        .iter()
        .filter_map(|(n, _)| Group::of(n))
        .collect();
    if let Some(g) = schedule.trainable.iter().find(|g| !present.contains(g)) {
        return Err(OryxError::UnknownGroup(g.name().to_string()));
    }
    model.trainable = schedule.trainable.clone();
    Ok(())
}

/// Loss curve as `step,loss` CSV.
pub fn loss_csv<T: Scalar>(losses: &[T]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{:.10}", l.as_f64());
    }
    out
}

fn synth_pixels<T: Scalar>(res: Resolution, label: usize, rng: &mut init::SeededRng) -> ndarray::Array3<T> {
    let noise: ndarray::Array3<f64> = init::uniform(rng, (res.height, res.width, 3), 0.0, 0.25);
    ndarray::Array3::from_shape_fn((res.height, res.width, 3), |(y, x, c)| {
        // Each class lights one channel with a class-specific stripe period.
        let stripe = if (x / (label + 1)) % 2 == 0 { 0.75 } else { 0.25 };
        let v = if c == label % 3 { stripe } else { 0.0 };
        T::c(v + noise[[y, x, c]] + 0.01 * (y as f64 / res.height as f64))
    })
}

/// A mixed batch: one image (r = 1), one short clip (r = 2) and one long clip
/// (r = 4), each planned at desk scale and labelled round-robin.
pub fn synthetic_batch<T: Scalar>(cfg: &HarnessConfig, seed: u64) -> Result<Vec<Sample<T>>> {
    let planner = &cfg.planner;
    let mut rng = init::substream(seed, "harness.data");
    let specs = [
        (Category::Image, Resolution::new(30, 40), 1, Modality::Image),
        (Category::ShortVideo, Resolution::new(36, 64), 3, Modality::ShortVideoFrame),
        (Category::LongVideo, Resolution::new(48, 48), planner.long_threshold + 3, Modality::LongVideoFrame),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, &(category, native, frames, modality))| {
            let res = planner.plan_resolution(native, category)?;
            let label = i % cfg.classes;
            let frames = (0..frames)
                .map(|_| VisualInput::new(synth_pixels(res, label, &mut rng), modality))
                .collect();
            Ok(Sample { frames, label })
        })
        .collect()
}
