//! Acceptance suite. Runs every criterion, prints one line each, and exits
//! non-zero if any fails or overruns its time budget.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::Array2;
use oryx_core::compressor::{
    compress, compressed_token_count, downsample_avg, region_attention, region_attention_weights, CompressorConfig,
    CompressorWeights, Ratio,
};
use oryx_core::geometry::{patch_grid, plan_video_frame, VIDEO_MAX_SIDE, VIDEO_MIN_SIDE};
use oryx_core::harness::{self, Group, HarnessConfig, Model, Stage, StageSchedule};
use oryx_core::niah::{self, ConstantRetriever, OracleRetriever, SynthConfig};
use oryx_core::nn::Linear;
use oryx_core::packing::{pack, segment_attention, AttentionWeights};
use oryx_core::{init, FeatureMap, PositionTable, Resolution};
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn token_bounds() -> Outcome {
    let mut lo = usize::MAX;
    let mut hi = 0;
    let mut sides: Vec<usize> = (16..=4096).step_by(7).collect();
    sides.extend([16, 17, 100, 287, 288, 289, 300, 479, 480, 481, 1080, 1920, 3840, 4096]);
    for &h in &sides {
        for &w in &sides {
            let res = plan_video_frame(Resolution::new(h, w), VIDEO_MIN_SIDE, VIDEO_MAX_SIDE, 16).map_err(|e| e.to_string())?;
            let t = patch_grid(res, 16).map_err(|e| e.to_string())?.token_count;
            lo = lo.min(t);
            hi = hi.max(t);
        }
    }
    ensure!(lo == 324 && hi == 900, "token range [{lo}, {hi}] over {} frames", sides.len().pow(2));
    Ok(format!("{} planned frames, tokens in [{lo}, {hi}]", sides.len().pow(2)))
}

fn ratio_law() -> Outcome {
    let w = CompressorWeights::<f32>::new(&CompressorConfig {
        channels: 2,
        lm_channels: 2,
        ..CompressorConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let mut grids = 0;
    for rows in (4..=64).step_by(4) {
        for cols in (4..=64).step_by(4) {
            let t: Vec<usize> = Ratio::ALL.iter().map(|&r| compressed_token_count(rows, cols, r)).collect();
            ensure!(t[0] == 4 * t[1] && t[0] == 16 * t[2], "{rows}x{cols}: {t:?}");
            let f = FeatureMap::<f32>::zeros(rows, cols, 2);
            for (&r, &n) in Ratio::ALL.iter().zip(&t) {
                let got = compress(&f, r, &w).map_err(|e| e.to_string())?.nrows();
                ensure!(got == n, "{rows}x{cols} r={}: {got} tokens, expected {n}", r.get());
            }
            grids += 1;
        }
    }
    Ok(format!("{grids} grids, tokens(1) = 4 tokens(2) = 16 tokens(4)"))
}

fn packed_attention() -> Outcome {
    let mut rng = init::rng(3);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let c = heads * rng.random_range(1..=32 / heads);
        let w = AttentionWeights::<f32>::init_with_std(&mut rng, c, heads, 0.2).map_err(|e| e.to_string())?;
        let b = rng.random_range(1..=8);
        let seqs: Vec<Array2<f32>> = (0..b)
            .map(|_| {
                let n = rng.random_range(1..=64);
                init::normal(&mut rng, (n, c), 1.0)
            })
            .collect();
        let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
        let batch = pack(&views).map_err(|e| e.to_string())?;
        let out = segment_attention(&batch, &w).map_err(|e| e.to_string())?;
        for (i, s) in seqs.iter().enumerate() {
            let want = common::dense_attention(s.view(), &w);
            let got = out.segment(i);
            let err = got.iter().zip(want.iter()).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
            worst = worst.max(err);
        }
        ensure!(worst <= 1e-6, "case {case}: max abs error {worst:e}");

        // Perturb one segment; every other segment must be bitwise unchanged.
        let j = rng.random_range(0..b);
        let mut perturbed = batch.clone();
        for v in perturbed.tokens.slice_mut(ndarray::s![batch.offsets[j]..batch.offsets[j + 1], ..]).iter_mut() {
            *v += rng.random_range(-1.0..1.0);
        }
        let out2 = segment_attention(&perturbed, &w).map_err(|e| e.to_string())?;
        for i in (0..b).filter(|&i| i != j) {
            ensure!(
                out.segment(i).iter().zip(out2.segment(i).iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "case {case}: segment {i} changed when segment {j} was perturbed"
            );
        }
    }
    Ok(format!("200 batches, max abs error {worst:.2e} (f32), perturbation independence bitwise"))
}

fn position_embeddings() -> Outcome {
    let table = PositionTable::<f64>::build(128, 128, 16, 0).map_err(|e| e.to_string())?;
    let same = table.interpolate_to(128, 128).map_err(|e| e.to_string())?;
    ensure!(
        same.iter().zip(table.values.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "native-grid interpolation is not the identity"
    );
    let mut rng = init::rng(4);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (gr, gc, c) = (rng.random_range(1..=40), rng.random_range(1..=40), rng.random_range(1..=6));
        let t = PositionTable::from_values(init::normal::<f64, _, _>(&mut rng, (gr, gc, c), 1.0)).map_err(|e| e.to_string())?;
        let self_map = t.interpolate_to(gr, gc).map_err(|e| e.to_string())?;
        ensure!(self_map == t.values, "case {case}: identity fails at {gr}x{gc}");
        let (tr, tc) = (rng.random_range(1..=96), rng.random_range(1..=96));
        let got = t.interpolate_to(tr, tc).map_err(|e| e.to_string())?;
        worst = worst.max(common::max_abs_diff(&got, &common::bilinear(t.values.view(), tr, tc)));
        ensure!(worst <= 1e-12, "case {case}: {gr}x{gc} -> {tr}x{tc}, error {worst:e}");
    }
    Ok(format!("identity bitwise at 128x128, 100 oracle cases, max error {worst:.2e}"))
}

fn region_attention_checks() -> Outcome {
    let mut rng = init::rng(5);
    let base = |c: usize, seed: u64| {
        CompressorWeights::<f64>::new(&CompressorConfig {
            channels: c,
            lm_channels: 4,
            seed,
            ..CompressorConfig::default()
        })
    };
    // r = 1: one key with weight exactly one.
    for _ in 0..20 {
        let c = rng.random_range(1..=8);
        let w = base(c, 1).map_err(|e| e.to_string())?;
        let rows = rng.random_range(1..=9);
        let f_h = FeatureMap::new(init::normal(&mut rng, (rows, 7, c), 1.0));
        let f_l = FeatureMap::new(init::normal(&mut rng, f_h.values.raw_dim(), 1.0));
        let out = region_attention(&f_l, &f_h, Ratio::One, &w).map_err(|e| e.to_string())?;
        ensure!(out.values == &f_l.values + &f_h.values, "r=1 output is not f_L + f_H");
    }
    // Zero projections: uniform weights, so the update is the cell mean.
    for r in [Ratio::Two, Ratio::Four] {
        let c = 5;
        let mut w = base(c, 2).map_err(|e| e.to_string())?;
        w.phi_q = Linear::zeros(c, w.key_dim(), false);
        w.phi_k = Linear::zeros(c, w.key_dim(), false);
        let f_h = FeatureMap::new(init::normal(&mut rng, (10, 9, c), 1.0));
        let f_l = downsample_avg(&f_h, r);
        let p = region_attention_weights(&f_l, &f_h, r, &w).map_err(|e| e.to_string())?;
        let uniform = 1.0 / (r.get() * r.get()) as f64;
        ensure!(p.iter().all(|&v| v == uniform), "r={}: weights are not exactly 1/r²", r.get());
        let out = region_attention(&f_l, &f_h, r, &w).map_err(|e| e.to_string())?;
        let means = common::cell_means(f_h.values.view(), r.get());
        let err = common::max_abs_diff(&out.values, &(&f_l.values + &means));
        ensure!(err <= 1e-12, "r={}: zero-projection output off by {err:e}", r.get());
    }
    // Random cases against the brute-force oracle.
    let mut worst = 0.0f64;
    for case in 0..100 {
        let r = Ratio::ALL[case % 3];
        let c = rng.random_range(1..=8);
        let mut w = base(c, case as u64).map_err(|e| e.to_string())?;
        let std = 0.3 + rng.random::<f64>();
        w.phi_q.weight = init::normal(&mut rng, w.phi_q.weight.raw_dim(), std);
        w.phi_k.weight = init::normal(&mut rng, w.phi_k.weight.raw_dim(), std);
        let (rows, cols) = (rng.random_range(1..=13), rng.random_range(1..=13));
        let f_h = FeatureMap::new(init::normal(&mut rng, (rows, cols, c), 1.0));
        let f_l = FeatureMap::new(init::normal(
            &mut rng,
            (f_h.rows().div_ceil(r.get()), f_h.cols().div_ceil(r.get()), c),
            1.0,
        ));
        let got = region_attention(&f_l, &f_h, r, &w).map_err(|e| e.to_string())?;
        let want = common::region_attention(f_l.values.view(), f_h.values.view(), r.get(), &w);
        worst = worst.max(common::max_abs_diff(&got.values, &want));
        ensure!(worst <= 1e-10, "case {case}: error {worst:e}");
    }
    Ok(format!("r=1 exact, zero projections uniform, 100 oracle cases, max error {worst:.2e}"))
}

fn gradient_fidelity() -> Outcome {
    let cfg = HarnessConfig::default();
    let batch = harness::synthetic_batch::<f64>(&cfg, 6).map_err(|e| e.to_string())?;
    let mut model = Model::<f64>::new(cfg).map_err(|e| e.to_string())?;
    model.randomize(0.3, 6);
    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut parts = Vec::new();
    for selector in ["compressor.phi_q", "compressor.phi_k", "compressor.shared_mlp", "encoder.blocks"] {
        let report = model.finite_diff_check(&batch, selector, 15, 7).map_err(|e| e.to_string())?;
        probes += report.probes.len();
        worst = worst.max(report.max_rel_err);
        parts.push(format!("{selector} {:.1e}", report.max_rel_err));
    }
    ensure!(probes >= 50, "only {probes} probes");
    ensure!(worst <= 1e-4, "max relative error {worst:e} ({})", parts.join(", "));
    Ok(format!("{probes} probes, max relative error {worst:.2e} ({})", parts.join(", ")))
}

fn freeze_exactness() -> Outcome {
    let cfg = HarnessConfig::default();
    let batch = harness::synthetic_batch::<f64>(&cfg, 8).map_err(|e| e.to_string())?;
    let initial = Model::<f64>::new(cfg).map_err(|e| e.to_string())?;
    for stage in Stage::ALL {
        let schedule = StageSchedule::new(stage);
        let mut model = initial.clone();
        model.train(&batch, &schedule, 100, 0.05).map_err(|e| e.to_string())?;
        let before = initial.named_params();
        let after = model.named_params();
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            let group = Group::of(name).ok_or_else(|| format!("{name} has no group"))?;
            let same = a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !schedule.trainable.contains(&group) {
                ensure!(same, "{stage:?}: frozen {name} changed");
            }
        }
        for g in &schedule.trainable {
            let moved = before
                .iter()
                .zip(&after)
                .filter(|((n, _), _)| Group::of(n) == Some(*g))
                .any(|((_, a), (_, b))| a != b);
            ensure!(moved, "{stage:?}: trainable group {} never moved", g.name());
        }
    }
    Ok("4 schedules x 100 steps, frozen groups bitwise unchanged".into())
}

fn niah_bounds() -> Outcome {
    let synth = SynthConfig::default();
    let run = |seed| niah::eval_grid(&OracleRetriever, &niah::DEFAULT_DEPTHS, &niah::DEFAULT_FRAME_COUNTS, 1, seed, &synth);
    let oracle = run(21).map_err(|e| e.to_string())?;
    ensure!(oracle.accuracy.iter().flatten().all(|&a| a == 1.0), "oracle grid is not all 1.0");
    let wrong = niah::eval_grid(
        &ConstantRetriever("nothing".into()),
        &niah::DEFAULT_DEPTHS,
        &niah::DEFAULT_FRAME_COUNTS,
        1,
        21,
        &synth,
    )
    .map_err(|e| e.to_string())?;
    ensure!(wrong.accuracy.iter().flatten().all(|&a| a == 0.0), "constant grid is not all 0.0");
    let again = run(21).map_err(|e| e.to_string())?;
    ensure!(oracle.to_csv().as_bytes() == again.to_csv().as_bytes(), "CSV differs between identical runs");
    Ok(format!(
        "{}x{} grid, oracle all 1.0, constant all 0.0, CSV reproducible",
        oracle.depths.len(),
        oracle.frame_counts.len()
    ))
}

fn smoke_training() -> Outcome {
    let cfg = HarnessConfig::default();
    let batch = harness::synthetic_batch::<f64>(&cfg, 9).map_err(|e| e.to_string())?;
    let mut model = Model::<f64>::new(cfg).map_err(|e| e.to_string())?;
    let schedule = StageSchedule::new(Stage::Stage2Joint);
    let (_, grads) = model.loss_and_grads(&batch, true).map_err(|e| e.to_string())?;
    let prefixes = |g: Group| match g {
        Group::Encoder => "encoder.",
        Group::Compressor => "compressor.phi_",
        Group::Projector => "compressor.shared_mlp.",
        Group::Head => "head.",
    };
    for g in &schedule.trainable {
        ensure!(grads.max_abs_with_prefix(prefixes(*g)) > 0.0, "group {} has zero gradient", g.name());
    }
    let losses = model.train(&batch, &schedule, 200, 0.1).map_err(|e| e.to_string())?;
    let last = model.loss(&batch).map_err(|e| e.to_string())?;
    ensure!(last < losses[0], "loss went from {} to {last}", losses[0]);
    Ok(format!("loss {:.4} -> {:.4} over 200 steps, gradients nonzero on all trainable groups", losses[0], last))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("token bounds", Duration::from_secs(1), token_bounds),
        ("ratio law", Duration::from_secs(5), ratio_law),
        ("packed attention oracle", Duration::from_secs(60), packed_attention),
        ("position embedding identity and oracle", Duration::from_secs(10), position_embeddings),
        ("region attention closed forms and oracle", Duration::from_secs(30), region_attention_checks),
        ("gradient fidelity", Duration::from_secs(120), gradient_fidelity),
        ("freeze exactness", Duration::from_secs(60), freeze_exactness),
        ("niah harness bounds", Duration::from_secs(120), niah_bounds),
        ("smoke training", Duration::from_secs(300), smoke_training),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > *budget => Err(format!("{msg}; took {elapsed:.2?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("[PASS] {}. {name}: {msg} ({elapsed:.2?})", i + 1),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] {}. {name}: {msg} ({elapsed:.2?})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
