use eta_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::config::{DataConfig, RunConfig};
use crate::data_synth::{apply_shift, generate_scene, sample_sparse, Batch, Sample, ShiftSpec};
use crate::depth_net::{build_model, train_supervised, DepthModel, EpochLoss, NormMode};
use crate::energy_model::{
    build_examples, calibrate_tau, energy_forward, fit_energy, predict_pairs, EnergyArch, EnergyCurve, EnergyGrid,
    EnergyModel, PredictionPair,
};
use crate::error::{Error, Result};
use crate::eval_metrics::{auroc, evaluate_frame, median, EvalConfig, MetricRecord, Phase, RunInfo, SWEEP_GRID, SWEEP_ITERATIONS};
use crate::tta_engine::{run_stream, AdaptConfig, AdaptReport, Adapter, StreamOutcome};

/// Split tags mixed into per-frame seeds.
const TAG_TRAIN: u64 = 1;
const TAG_VAL: u64 = 2;
const TAG_STREAM: u64 = 3;

/// SplitMix64 finalizer over the run seed, a split tag and the frame index.
pub fn frame_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(index.wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn synth_frames(d: &DataConfig, seed: u64, tag: u64, n: usize, prefix: &str, range: (f64, f64), shifted: bool) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let fs = frame_seed(seed, tag, i as u64);
            let mut s = generate_scene(fs, (d.height, d.width), range)?;
            s.frame_id = format!("{prefix}-{i:05}");
            let gt = s.gt.as_ref().expect("generated scenes carry ground truth");
            s.sparse = sample_sparse(gt, d.height, d.width, d.sparse_points, d.sparse_strategy, fs ^ 0x5a5a)?;
            if shifted {
                for (k, step) in d.shifts.iter().enumerate() {
                    s = apply_shift(&s, &ShiftSpec::new(step.kind, step.magnitude, fs.wrapping_add(k as u64 + 1)))?;
                }
            }
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SourceData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub fn synth_source(cfg: &RunConfig) -> Result<SourceData> {
    let d = &cfg.data;
    Ok(SourceData {
        train: synth_frames(d, cfg.seed, TAG_TRAIN, d.train_frames, "src", d.source_depth_range, false)?,
        val: synth_frames(d, cfg.seed, TAG_VAL, d.val_frames, "val", d.source_depth_range, false)?,
    })
}

/// Shifted target frames, ground truth retained for evaluation only.
pub fn synth_stream(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let d = &cfg.data;
    synth_frames(d, cfg.seed, TAG_STREAM, d.stream_frames, "tgt", d.target_depth_range, true)
}

pub fn train_depth(cfg: &RunConfig, train: &[Sample]) -> Result<(DepthModel<f32>, Vec<EpochLoss>)> {
    let out = train_supervised(build_model(&cfg.depth_arch)?, train, &cfg.depth_train)?;
    Ok((out.model, out.curve))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergySummary {
    pub label: String,
    pub grid_cells: usize,
    pub tau: f64,
    pub curve: EnergyCurve,
    /// Clean (negative) vs perturbed (positive) held-out frames scored by
    /// mean energy.
    pub auroc: f64,
}

/// Mean-energy AUROC separating clean from perturbed predictions.
pub fn discrimination_auroc(energy: &EnergyModel<f32>, pairs: &[PredictionPair<f32>]) -> Result<f64> {
    let mut scores = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        let ones = Tensor::full(p.sparse.shape(), 1.0f32);
        scores.push((energy_forward(energy, &p.clean, &p.sparse, &ones)?.mean(), false));
        scores.push((energy_forward(energy, &p.perturbed, &p.sparse, &ones)?.mean(), true));
    }
    auroc(&scores)
}

/// Calibrates and trains one energy model from precomputed prediction
/// pairs of the source training set. `init` replaces the fresh
/// initialization of `arch` and must already be bound to `depth`.
pub fn train_energy_from_pairs(
    cfg: &RunConfig,
    arch: &EnergyArch,
    init: Option<EnergyModel<f32>>,
    depth: &DepthModel<f32>,
    val: &[Sample],
    train_pairs: &[PredictionPair<f32>],
    val_pairs: &[PredictionPair<f32>],
) -> Result<(EnergyModel<f32>, EnergySummary)> {
    let mut model = match init {
        Some(m) => {
            m.check_binding(depth)?;
            m
        }
        None => EnergyModel::new(arch, depth)?,
    };
    let tiles = arch.tiles(cfg.data.height, cfg.data.width)?;
    model.tau = calibrate_tau(depth, val, cfg.energy_train.tau_percentile, tiles)?;
    let examples = build_examples(train_pairs, tiles, model.tau)?;
    let curve = fit_energy(&mut model, &examples, &cfg.energy_train)?;
    let auroc = discrimination_auroc(&model, val_pairs)?;
    let (rows, cols) = tiles.grid_dims(cfg.data.height, cfg.data.width)?;
    let label = if arch.global_pool { "global" } else { "local" };
    let summary = EnergySummary { label: label.into(), grid_cells: rows * cols, tau: model.tau, curve, auroc };
    Ok((model, summary))
}

/// Adapts a fresh copy of `depth` (adapter inserted here) over `stream`.
pub fn adapt_run(
    cfg: &AdaptConfig,
    depth: &DepthModel<f32>,
    energy: Option<&EnergyModel<f32>>,
    stream: &[Sample],
) -> Result<(StreamOutcome, DepthModel<f32>)> {
    let mut model = depth.clone();
    if !model.has_adapter() {
        model.insert_adaptation()?;
    }
    let mut adapter = match energy {
        Some(e) if cfg.w_energy > 0.0 => Adapter::new(model, Some(e.clone()), cfg.clone())?,
        _ => Adapter::baseline(model, cfg.clone())?,
    };
    let ids: Vec<String> = stream.iter().map(|s| s.frame_id.clone()).collect();
    let out = run_stream(&mut adapter, stream.iter().cloned().map(Ok), Some(&ids))?;
    Ok((out, adapter.into_model()))
}

/// Predictions of the unadapted model under the given normalization mode.
pub fn source_predictions(depth: &DepthModel<f32>, mode: NormMode, stream: &[Sample]) -> Result<Vec<Vec<f32>>> {
    let mut m = depth.clone();
    m.norm.mode = mode;
    let mut out = Vec::with_capacity(stream.len());
    for s in stream {
        let b: Batch<f32> = Batch::from_samples(&[s])?;
        out.push(m.predict(&b.image, &b.sparse, &b.sparse_mask)?.into_data());
    }
    Ok(out)
}

pub(crate) fn gt_of(s: &Sample) -> Result<&crate::data_synth::DepthMap> {
    s.gt.as_ref().ok_or_else(|| Error::invalid(format!("frame `{}` has no ground truth to evaluate against", s.frame_id)))
}

pub fn evaluate_predictions(
    run_id: &str,
    phase: Phase,
    preds: &[Vec<f32>],
    stream: &[Sample],
    eval: &EvalConfig,
) -> Result<Vec<MetricRecord>> {
    stream
        .iter()
        .zip(preds)
        .map(|(s, p)| evaluate_frame(run_id, &s.frame_id, phase, p, gt_of(s)?, s.height, s.width, eval))
        .collect()
}

pub fn evaluate_outcome(run_id: &str, out: &StreamOutcome, stream: &[Sample], eval: &EvalConfig) -> Result<Vec<MetricRecord>> {
    let ids: Vec<String> = out.frames.iter().map(|f| f.frame_id.clone()).collect();
    let pre: Vec<Vec<f32>> = out.frames.iter().map(|f| f.pre.clone()).collect();
    let post: Vec<Vec<f32>> = out.frames.iter().map(|f| f.post.clone()).collect();
    evaluate_outcome_frames(run_id, &ids, &pre, &post, stream, eval)
}

/// Pre and post records for each frame, in stream order.
pub fn evaluate_outcome_frames(
    run_id: &str,
    ids: &[String],
    pre: &[Vec<f32>],
    post: &[Vec<f32>],
    stream: &[Sample],
    eval: &EvalConfig,
) -> Result<Vec<MetricRecord>> {
    if ids.len() != stream.len() || pre.len() != ids.len() || post.len() != ids.len() {
        return Err(Error::invalid(format!("{} predictions for {} frames", ids.len(), stream.len())));
    }
    let mut recs = Vec::with_capacity(2 * stream.len());
    for (((id, a), b), s) in ids.iter().zip(pre).zip(post).zip(stream) {
        if *id != s.frame_id {
            return Err(Error::StreamOrder(format!("prediction `{id}` does not match frame `{}`", s.frame_id)));
        }
        let gt = gt_of(s)?;
        recs.push(evaluate_frame(run_id, id, Phase::Pre, a, gt, s.height, s.width, eval)?);
        recs.push(evaluate_frame(run_id, id, Phase::Post, b, gt, s.height, s.width, eval)?);
    }
    Ok(recs)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub info: RunInfo,
    pub records: Vec<MetricRecord>,
    pub report: Option<AdaptReport>,
    pub snapshots: Vec<(String, Phase, EnergyGrid)>,
}

impl RunResult {
    pub fn median_mae(&self, phase: Phase) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter(|r| r.phase == phase).map(|r| r.mae_m).collect();
        (!v.is_empty()).then(|| median(&v))
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: RunConfig,
    pub depth_curve: Vec<EpochLoss>,
    pub energy: Vec<EnergySummary>,
    pub runs: Vec<RunResult>,
    /// Wall-clock seconds per stage, in execution order.
    pub timings: Vec<(String, f64)>,
}

impl ExperimentResult {
    pub fn run(&self, method: &str) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.info.method == method)
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        self.runs.iter().flat_map(|r| r.records.iter().cloned()).collect()
    }
}

pub const METHOD_SOURCE: &str = "source";
pub const METHOD_ETA: &str = "eta";
pub const METHOD_BASELINE: &str = "baseline";
pub const METHOD_GLOBAL: &str = "eta-global";

pub fn iters_method(n: usize) -> String {
    format!("eta-iters{n}")
}

pub fn run_id(method: &str, seed: u64) -> String {
    format!("{method}-s{seed}")
}

pub fn source_run_info(seed: u64) -> RunInfo {
    RunInfo { run_id: run_id(METHOD_SOURCE, seed), method: METHOD_SOURCE.into(), inner_iters: None, grid_cells: None, seed, sweeps: vec![] }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnergyChoice {
    Local,
    Global,
    None,
}

#[derive(Clone, Debug)]
pub struct PlannedRun {
    pub info: RunInfo,
    pub adapt: AdaptConfig,
    pub energy: EnergyChoice,
}

/// Adaptation runs implied by the experiment section, in execution order:
/// the configured method, the w_e = 0 baseline, the global-energy variant,
/// then the remaining inner-iteration counts.
pub fn adapt_plan(cfg: &RunConfig, local_cells: usize, with_global: bool) -> Vec<PlannedRun> {
    let seed = cfg.seed;
    let mk = |method: String, adapt: AdaptConfig, energy: EnergyChoice, cells: Option<usize>, sweeps: &[&str]| PlannedRun {
        info: RunInfo {
            run_id: run_id(&method, seed),
            method,
            inner_iters: Some(adapt.inner_iters),
            grid_cells: cells,
            seed,
            sweeps: sweeps.iter().map(|s| s.to_string()).collect(),
        },
        adapt,
        energy,
    };
    let mut plan = vec![mk(
        METHOD_ETA.into(),
        cfg.adapt.clone(),
        EnergyChoice::Local,
        Some(local_cells),
        &[SWEEP_ITERATIONS, SWEEP_GRID],
    )];
    if cfg.experiment.baseline {
        let b = AdaptConfig { w_energy: 0.0, ..cfg.adapt.clone() };
        plan.push(mk(METHOD_BASELINE.into(), b, EnergyChoice::None, None, &[]));
    }
    if with_global {
        plan.push(mk(METHOD_GLOBAL.into(), cfg.adapt.clone(), EnergyChoice::Global, Some(1), &[SWEEP_GRID]));
    }
    for &n in &cfg.experiment.iteration_sweep {
        if n != cfg.adapt.inner_iters {
            let c = AdaptConfig { inner_iters: n, ..cfg.adapt.clone() };
            plan.push(mk(iters_method(n), c, EnergyChoice::Local, Some(local_cells), &[SWEEP_ITERATIONS]));
        }
    }
    plan
}

/// Energy grids of the first `n` frames, pre and post.
pub fn snapshots(out: &StreamOutcome, n: usize) -> Vec<(String, Phase, EnergyGrid)> {
    let mut v = Vec::new();
    for f in out.frames.iter().take(n) {
        if let Some(g) = &f.pre_energy {
            v.push((f.frame_id.clone(), Phase::Pre, g.clone()));
        }
        if let Some(g) = &f.post_energy {
            v.push((f.frame_id.clone(), Phase::Post, g.clone()));
        }
    }
    v
}

/// The whole pipeline in memory: synthesize, train the depth and energy
/// models, then adapt over the target stream with every configured method.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let mut clock = std::time::Instant::now();
    let mut lap = |name: &str| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = std::time::Instant::now();
    };
    let source = synth_source(cfg)?;
    let stream = synth_stream(cfg)?;
    lap("synth");
    let (depth, depth_curve) = train_depth(cfg, &source.train)?;
    lap("train_depth");

    let train_pairs = predict_pairs(&depth, &source.train, &cfg.perturb, 8)?;
    let val_pairs = predict_pairs(&depth, &source.val, &cfg.perturb, 8)?;
    lap("perturb");
    let (local, local_sum) = train_energy_from_pairs(cfg, &cfg.energy_arch, None, &depth, &source.val, &train_pairs, &val_pairs)?;
    lap("train_energy_local");
    let mut energy = vec![local_sum];
    let global = if cfg.experiment.global_energy {
        let arch = EnergyArch { global_pool: true, ..cfg.energy_arch.clone() };
        let (m, s) = train_energy_from_pairs(cfg, &arch, None, &depth, &source.val, &train_pairs, &val_pairs)?;
        energy.push(s);
        lap("train_energy_global");
        Some(m)
    } else {
        None
    };

    let seed = cfg.seed;
    let mut runs = Vec::new();

    let src_info = source_run_info(seed);
    let src_preds = source_predictions(&depth, NormMode::Frozen, &stream)?;
    runs.push(RunResult {
        records: evaluate_predictions(&src_info.run_id, Phase::Post, &src_preds, &stream, &cfg.eval)?,
        info: src_info,
        report: None,
        snapshots: vec![],
    });

    for plan in adapt_plan(cfg, energy[0].grid_cells, global.is_some()) {
        let e = match plan.energy {
            EnergyChoice::Local => Some(&local),
            EnergyChoice::Global => global.as_ref(),
            EnergyChoice::None => None,
        };
        let (out, _) = adapt_run(&plan.adapt, &depth, e, &stream)?;
        lap(&format!("adapt:{}", plan.info.method));
        let records = evaluate_outcome(&plan.info.run_id, &out, &stream, &cfg.eval)?;
        runs.push(RunResult {
            info: plan.info,
            records,
            snapshots: snapshots(&out, cfg.experiment.snapshot_frames),
            report: Some(out.report),
        });
    }
    Ok(ExperimentResult { config: cfg.clone(), depth_curve, energy, runs, timings })
}
