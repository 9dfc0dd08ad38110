//! On-disk run directory: every stage reads its inputs from and writes its
//! outputs to one directory, so stages can run as separate processes.
//!
//! ```text
//! config.toml                resolved configuration
//! run.json                   seed, scenario, per-stage input/output sha256
//! data/<split>/              synthetic datasets
//! models/depth.bin           depth checkpoint (adapter not inserted)
//! models/energy_local.bin    energy checkpoints
//! models/energy_global.bin
//! models/training.json       training curves, temperatures, AUROC
//! adapt/<run_id>.csv         per-iteration loss log
//! adapt/<run_id>.pred.bin    pre/post predictions
//! energy/<run_id>.csv        energy grids of the first frames
//! runs.json, metrics.csv     evaluation
//! report/                    summaries and charts
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::RunConfig;
use super::pipeline::{
    adapt_plan, evaluate_outcome_frames, gt_of, snapshots, source_run_info, synth_source, synth_stream, train_depth,
    train_energy_from_pairs, EnergyChoice, EnergySummary,
};
use crate::archive::{read_artifact, sha256_hex, Archive, ArrayData};
use crate::data_synth::{load_all, load_dataset, save_dataset, DatasetManifest, Sample, Split};
use crate::depth_net::{DepthModel, EpochLoss, NormMode};
use crate::energy_model::{predict_pairs, EnergyArch, EnergyModel};
use crate::error::{Error, Result};
use crate::eval_metrics::{
    emit_report, evaluate_frame, write_energy_snapshots, write_metrics_csv, write_runs, Phase, RunInfo, METRICS_FILE,
    RUNS_FILE,
};
use crate::tta_engine::{run_stream, Adapter};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const DEPTH_FILE: &str = "models/depth.bin";
pub const ENERGY_LOCAL_FILE: &str = "models/energy_local.bin";
pub const ENERGY_GLOBAL_FILE: &str = "models/energy_global.bin";
pub const TRAINING_FILE: &str = "models/training.json";
pub const ADAPT_DIR: &str = "adapt";

fn data_dir(split: Split) -> String {
    format!("data/{split}")
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct StageRecord {
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct RunManifest {
    seed: u64,
    scenario: String,
    config_sha256: String,
    stages: BTreeMap<String, StageRecord>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct TrainingLog {
    depth: Vec<EpochLoss>,
    energy: Vec<EnergySummary>,
}

/// A run directory bound to one resolved configuration.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub config: RunConfig,
}

fn mkdirs(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = p.parent() {
        mkdirs(d)?;
    }
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn require(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { path: p.to_path_buf() })
    }
}

impl RunDir {
    /// Creates the directory if needed and writes the resolved config.
    pub fn create(root: &Path, config: RunConfig) -> Result<Self> {
        config.validate()?;
        mkdirs(root)?;
        let root = fs::canonicalize(root).map_err(|e| Error::io(root, e))?;
        let dir = Self { root, config };
        write_file(&dir.path(CONFIG_FILE), dir.config.to_toml().as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    /// sha256 of a file, or of a dataset directory's manifest (which itself
    /// lists every sample checksum).
    fn fingerprint(&self, p: &Path) -> Result<String> {
        let f = if p.is_dir() { p.join(crate::data_synth::MANIFEST_FILE) } else { p.to_path_buf() };
        Ok(sha256_hex(&read_artifact(&f)?))
    }

    fn record(&self, stage: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        let path = self.path(RUN_FILE);
        let mut m: RunManifest = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format { path: path.clone(), message: e.to_string() })?
        } else {
            RunManifest::default()
        };
        m.seed = self.config.seed;
        m.scenario = self.config.scenario.to_string();
        m.config_sha256 = self.fingerprint(&self.path(CONFIG_FILE))?;
        let mut rec = StageRecord::default();
        for p in inputs {
            rec.inputs.insert(self.rel(p), self.fingerprint(p)?);
        }
        for p in outputs {
            rec.outputs.insert(self.rel(p), self.fingerprint(p)?);
        }
        m.stages.insert(stage.to_string(), rec);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        write_file(&path, (text + "\n").as_bytes())
    }

    fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        let p = self.path(&data_dir(split));
        require(&p)?;
        Ok(load_all(&p)?.0)
    }

    fn load_depth(&self) -> Result<DepthModel<f32>> {
        let p = self.path(DEPTH_FILE);
        require(&p)?;
        DepthModel::load(&p, Some(&self.config.depth_arch))
    }

    fn read_training(&self) -> Result<TrainingLog> {
        let p = self.path(TRAINING_FILE);
        if !p.exists() {
            return Ok(TrainingLog::default());
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: p, message: e.to_string() })
    }

    fn write_training(&self, log: &TrainingLog) -> Result<PathBuf> {
        let p = self.path(TRAINING_FILE);
        let text = serde_json::to_string_pretty(log).expect("training log serializes");
        write_file(&p, (text + "\n").as_bytes())?;
        Ok(p)
    }

    /// Synthesizes the source train/val sets and the shifted target stream.
    pub fn synth(&self) -> Result<Vec<PathBuf>> {
        let c = &self.config;
        let src = synth_source(c)?;
        let stream = synth_stream(c)?;
        let geom = (c.data.height, c.data.width);
        let mut out = Vec::new();
        for (split, samples, range) in [
            (Split::SourceTrain, &src.train, c.data.source_depth_range),
            (Split::SourceVal, &src.val, c.data.source_depth_range),
            (Split::TargetStream, &stream, c.data.target_depth_range),
        ] {
            let root = self.path(&data_dir(split));
            mkdirs(&root)?;
            let mut m = DatasetManifest::new(&root, split, geom, range);
            save_dataset(samples, &mut m)?;
            out.push(root);
        }
        self.record("synth", &[], &out)?;
        Ok(out)
    }

    pub fn train_depth(&self) -> Result<Vec<PathBuf>> {
        let train_dir = self.path(&data_dir(Split::SourceTrain));
        let train = self.load_split(Split::SourceTrain)?;
        let (model, curve) = train_depth(&self.config, &train)?;
        let p = self.path(DEPTH_FILE);
        if let Some(d) = p.parent() {
            mkdirs(d)?;
        }
        model.save(&p)?;
        let mut log = self.read_training()?;
        log.depth = curve;
        let t = self.write_training(&log)?;
        let out = vec![p, t];
        self.record("train-depth", &[train_dir], &out)?;
        Ok(out)
    }

    /// Trains the local energy model, and the global variant when enabled.
    /// `init` warm-starts the local model from an existing checkpoint, which
    /// must be bound to this run's depth model.
    pub fn train_energy(&self, init: Option<&Path>) -> Result<Vec<PathBuf>> {
        let c = &self.config;
        let depth = self.load_depth()?;
        let mut inputs = vec![self.path(DEPTH_FILE), self.path(&data_dir(Split::SourceTrain)), self.path(&data_dir(Split::SourceVal))];
        let local_init = match init {
            Some(p) => {
                require(p)?;
                let m = EnergyModel::<f32>::load(p, Some(&depth))?;
                if m.arch.widths != c.energy_arch.widths || m.arch.global_pool != c.energy_arch.global_pool {
                    return Err(Error::Config {
                        key: "energy_arch".into(),
                        message: format!("{} was built with a different energy architecture", p.display()),
                    });
                }
                inputs.push(p.to_path_buf());
                Some(m)
            }
            None => None,
        };
        let train = self.load_split(Split::SourceTrain)?;
        let val = self.load_split(Split::SourceVal)?;
        let tp = predict_pairs(&depth, &train, &c.perturb, 8)?;
        let vp = predict_pairs(&depth, &val, &c.perturb, 8)?;

        let mut summaries = Vec::new();
        let mut out = Vec::new();
        let local = train_energy_from_pairs(c, &c.energy_arch, local_init, &depth, &val, &tp, &vp)?;
        let p = self.path(ENERGY_LOCAL_FILE);
        local.0.save(&p)?;
        out.push(p);
        summaries.push(local.1);
        if c.experiment.global_energy {
            let arch = EnergyArch { global_pool: true, ..c.energy_arch.clone() };
            let (m, s) = train_energy_from_pairs(c, &arch, None, &depth, &val, &tp, &vp)?;
            let p = self.path(ENERGY_GLOBAL_FILE);
            m.save(&p)?;
            out.push(p);
            summaries.push(s);
        }
        let mut log = self.read_training()?;
        log.energy = summaries;
        out.push(self.write_training(&log)?);
        self.record("train-energy", &inputs, &out)?;
        Ok(out)
    }

    /// Runs every planned adaptation over the target stream, reading frames
    /// one at a time. Needs the local energy checkpoint.
    pub fn adapt(&self) -> Result<Vec<PathBuf>> {
        let c = &self.config;
        let depth = self.load_depth()?;
        let local_path = self.path(ENERGY_LOCAL_FILE);
        require(&local_path)?;
        let local = EnergyModel::<f32>::load(&local_path, Some(&depth))?;
        let global_path = self.path(ENERGY_GLOBAL_FILE);
        let global = if c.experiment.global_energy {
            require(&global_path)?;
            Some(EnergyModel::<f32>::load(&global_path, Some(&depth))?)
        } else {
            None
        };
        let stream_dir = self.path(&data_dir(Split::TargetStream));
        require(&stream_dir)?;
        let (h, w) = (c.data.height, c.data.width);
        let cells = {
            let (r, q) = local.arch.tiles(h, w)?.grid_dims(h, w)?;
            r * q
        };
        let mut inputs = vec![self.path(DEPTH_FILE), local_path, stream_dir.clone()];
        if global.is_some() {
            inputs.push(global_path);
        }
        let adapt_dir = self.path(ADAPT_DIR);
        mkdirs(&adapt_dir)?;
        let mut out = Vec::new();
        let mut infos = Vec::new();

        let src = source_run_info(c.seed);
        let (reader, manifest) = load_dataset(&stream_dir)?;
        let mut frozen = depth.clone();
        frozen.norm.mode = NormMode::Frozen;
        let mut preds = Vec::with_capacity(manifest.sample_ids.len());
        for s in reader {
            let s = s?;
            let b = crate::data_synth::Batch::<f32>::from_samples(&[&s])?;
            preds.push((s.frame_id.clone(), None, frozen.predict(&b.image, &b.sparse, &b.sparse_mask)?.into_data()));
        }
        let p = adapt_dir.join(format!("{}.pred.bin", src.run_id));
        write_predictions(&p, &src, (h, w), &preds)?;
        out.push(p);
        infos.push(src);

        for plan in adapt_plan(c, cells, global.is_some()) {
            let mut model = depth.clone();
            model.insert_adaptation()?;
            let mut adapter = match plan.energy {
                EnergyChoice::Local => Adapter::new(model, Some(local.clone()), plan.adapt.clone())?,
                EnergyChoice::Global => Adapter::new(model, global.clone(), plan.adapt.clone())?,
                EnergyChoice::None => Adapter::baseline(model, plan.adapt.clone())?,
            };
            let (reader, manifest) = load_dataset(&stream_dir)?;
            let res = run_stream(&mut adapter, reader, Some(&manifest.sample_ids))?;
            let id = &plan.info.run_id;
            let p = adapt_dir.join(format!("{id}.csv"));
            res.report.write_csv(&p)?;
            out.push(p);
            let frames: Vec<_> =
                res.frames.iter().map(|f| (f.frame_id.clone(), Some(f.pre.clone()), f.post.clone())).collect();
            let p = adapt_dir.join(format!("{id}.pred.bin"));
            write_predictions(&p, &plan.info, (h, w), &frames)?;
            out.push(p);
            let snaps = snapshots(&res, c.experiment.snapshot_frames);
            if !snaps.is_empty() {
                write_energy_snapshots(&self.root, id, &snaps)?;
                out.push(self.path(&format!("{}/{id}.csv", crate::eval_metrics::ENERGY_DIR)));
            }
            infos.push(plan.info);
        }
        write_runs(&self.root, &infos)?;
        out.push(self.path(RUNS_FILE));
        self.record("adapt", &inputs, &out)?;
        Ok(out)
    }

    /// Scores every prediction file listed in `runs.json` against the
    /// target ground truth.
    pub fn eval(&self) -> Result<Vec<PathBuf>> {
        let runs_path = self.path(RUNS_FILE);
        require(&runs_path)?;
        let text = fs::read_to_string(&runs_path).map_err(|e| Error::io(&runs_path, e))?;
        let runs: Vec<RunInfo> =
            serde_json::from_str(&text).map_err(|e| Error::Format { path: runs_path.clone(), message: e.to_string() })?;
        let stream_dir = self.path(&data_dir(Split::TargetStream));
        let stream = self.load_split(Split::TargetStream)?;
        let mut inputs = vec![runs_path, stream_dir];
        let mut records = Vec::new();
        for r in &runs {
            let p = self.path(&format!("{ADAPT_DIR}/{}.pred.bin", r.run_id));
            require(&p)?;
            let frames = read_predictions(&p)?;
            inputs.push(p);
            let pre: Vec<_> = frames.iter().map(|f| f.1.clone()).collect();
            let post: Vec<_> = frames.iter().map(|f| f.2.clone()).collect();
            let ids: Vec<_> = frames.iter().map(|f| f.0.clone()).collect();
            if pre.iter().all(Option::is_none) {
                if ids.len() != stream.len() {
                    return Err(Error::invalid(format!("{} predictions for {} frames", ids.len(), stream.len())));
                }
                for ((id, p), s) in ids.iter().zip(&post).zip(&stream) {
                    check_id(id, s)?;
                    let gt = gt_of(s)?;
                    records.push(evaluate_frame(&r.run_id, id, Phase::Post, p, gt, s.height, s.width, &self.config.eval)?);
                }
            } else {
                let pre: Vec<Vec<f32>> = pre.into_iter().map(|p| p.unwrap_or_default()).collect();
                records.extend(evaluate_outcome_frames(&r.run_id, &ids, &pre, &post, &stream, &self.config.eval)?);
            }
        }
        let p = self.path(METRICS_FILE);
        write_metrics_csv(&p, &records)?;
        let out = vec![p];
        self.record("eval", &inputs, &out)?;
        Ok(out)
    }

    pub fn report(&self) -> Result<Vec<PathBuf>> {
        let m = self.path(METRICS_FILE);
        require(&m)?;
        let out = emit_report(&self.root)?;
        self.record("report", &[m], &out)?;
        Ok(out)
    }

    pub fn all(&self) -> Result<Vec<PathBuf>> {
        let mut out = self.synth()?;
        out.extend(self.train_depth()?);
        out.extend(self.train_energy(None)?);
        out.extend(self.adapt()?);
        out.extend(self.eval()?);
        out.extend(self.report()?);
        Ok(out)
    }
}

fn check_id(id: &str, s: &Sample) -> Result<()> {
    if id != s.frame_id {
        return Err(Error::StreamOrder(format!("prediction `{id}` does not match frame `{}`", s.frame_id)));
    }
    Ok(())
}

type FramePrediction = (String, Option<Vec<f32>>, Vec<f32>);

fn write_predictions(path: &Path, run: &RunInfo, (h, w): (usize, usize), frames: &[FramePrediction]) -> Result<()> {
    let ids: Vec<&str> = frames.iter().map(|f| f.0.as_str()).collect();
    let mut a = Archive::new(json!({ "kind": "predictions", "run": run, "height": h, "width": w, "frame_ids": ids }));
    for (i, (_, pre, post)) in frames.iter().enumerate() {
        if let Some(p) = pre {
            a.push(&format!("pre.{i}"), &[h, w], ArrayData::F32(p.clone()));
        }
        a.push(&format!("post.{i}"), &[h, w], ArrayData::F32(post.clone()));
    }
    a.write(path)
}

fn read_predictions(path: &Path) -> Result<Vec<FramePrediction>> {
    let a = Archive::read(path)?;
    let bad = |m: &str| Error::Format { path: path.to_path_buf(), message: m.to_string() };
    if a.header.get("kind").and_then(|k| k.as_str()) != Some("predictions") {
        return Err(bad("not a predictions file"));
    }
    let ids: Vec<String> = a
        .header
        .get("frame_ids")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| bad("header lacks frame_ids"))?;
    let f32s = |name: &str| -> Result<Option<Vec<f32>>> {
        match a.get(name) {
            None => Ok(None),
            Some(arr) => match &arr.data {
                ArrayData::F32(v) => Ok(Some(v.clone())),
                _ => Err(bad("prediction arrays must be f32")),
            },
        }
    };
    ids.into_iter()
        .enumerate()
        .map(|(i, id)| {
            let post = f32s(&format!("post.{i}"))?.ok_or_else(|| bad("missing post array"))?;
            Ok((id, f32s(&format!("pre.{i}"))?, post))
        })
        .collect()
}
