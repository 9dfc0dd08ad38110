use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_synth::{ShiftKind, SparseStrategy};
use crate::depth_net::{DepthArch, TrainConfig};
use crate::energy_model::{EnergyArch, EnergyTrainConfig, PerturbConfig};
use crate::error::{Error, Result};
use crate::eval_metrics::EvalConfig;
use crate::tta_engine::{AdaptConfig, NormPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Clear source scenes, fogged target stream.
    Fog,
    /// Indoor-range scenes; target is darkened, gamma-shifted and noisy.
    Illum,
    /// Source at outdoor range, target at indoor range.
    Outdoor2indoor,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fog" => Ok(Self::Fog),
            "illum" => Ok(Self::Illum),
            "outdoor2indoor" => Ok(Self::Outdoor2indoor),
            _ => Err(Error::Config { key: "scenario".into(), message: format!("unknown scenario `{s}` (fog, illum, outdoor2indoor)") }),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fog => "fog",
            Self::Illum => "illum",
            Self::Outdoor2indoor => "outdoor2indoor",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftStep {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub source_depth_range: (f64, f64),
    pub target_depth_range: (f64, f64),
    pub sparse_points: usize,
    pub sparse_strategy: SparseStrategy,
    pub train_frames: usize,
    pub val_frames: usize,
    pub stream_frames: usize,
    /// Applied in order to every target frame.
    pub shifts: Vec<ShiftStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Adapt without the energy term as a comparator.
    pub baseline: bool,
    /// Adapt with a globally pooled energy model as well.
    pub global_energy: bool,
    /// Extra ETA runs with these inner iteration counts.
    pub iteration_sweep: Vec<usize>,
    /// Frames whose energy grids are dumped for heatmaps.
    pub snapshot_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub data: DataConfig,
    pub depth_arch: DepthArch,
    pub depth_train: TrainConfig,
    pub energy_arch: EnergyArch,
    pub energy_train: EnergyTrainConfig,
    pub perturb: PerturbConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn preset(scenario: Scenario, seed: u64) -> Self {
        let (src, tgt, shifts, eval): ((f64, f64), (f64, f64), _, _) = match scenario {
            Scenario::Fog => (
                (1.0, 20.0),
                (1.0, 20.0),
                vec![ShiftStep { kind: ShiftKind::Fog, magnitude: 0.08 }],
                EvalConfig::outdoor(),
            ),
            Scenario::Illum => (
                (0.2, 5.0),
                (0.2, 5.0),
                vec![
                    ShiftStep { kind: ShiftKind::Illumination, magnitude: 0.8 },
                    ShiftStep { kind: ShiftKind::Noise, magnitude: 0.03 },
                ],
                EvalConfig::indoor(),
            ),
            Scenario::Outdoor2indoor => ((1.0, 20.0), (0.2, 5.0), vec![], EvalConfig::indoor()),
        };
        let d_max: f64 = f64::max(src.1, tgt.1);
        Self {
            seed,
            scenario,
            data: DataConfig {
                height: 64,
                width: 64,
                source_depth_range: src,
                target_depth_range: tgt,
                sparse_points: 150,
                sparse_strategy: SparseStrategy::Uniform,
                train_frames: 240,
                val_frames: 32,
                stream_frames: 200,
                shifts,
            },
            depth_arch: DepthArch { depth_scale: d_max, seed, ..DepthArch::default() },
            depth_train: TrainConfig { epochs: 16, batch_size: 8, learning_rate: 3e-3, validation_fraction: 0.1, seed },
            energy_arch: EnergyArch { widths: vec![16, 32, 64, 128], depth_scale: d_max, seed, ..EnergyArch::default() },
            energy_train: EnergyTrainConfig { epochs: 60, learning_rate: 3e-3, seed, ..EnergyTrainConfig::default() },
            perturb: PerturbConfig { eps_image: 0.1, eps_sparse: 0.01 * d_max },
            adapt: AdaptConfig { norm_policy: NormPolicy::Frozen, learning_rate: 1e-2, w_energy: 0.2, ..AdaptConfig::default() },
            eval,
            experiment: ExperimentConfig {
                baseline: true,
                global_energy: true,
                iteration_sweep: vec![2, 3, 5],
                snapshot_frames: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, e: Error| match e {
            Error::Config { .. } => e,
            other => Error::Config { key: k.into(), message: other.to_string() },
        };
        let d = &self.data;
        crate::data_synth::check_geometry((d.height, d.width), d.source_depth_range).map_err(|e| key("data", e))?;
        crate::data_synth::check_geometry((d.height, d.width), d.target_depth_range).map_err(|e| key("data", e))?;
        if d.train_frames < 2 || d.val_frames == 0 {
            return Err(Error::Config { key: "data.train_frames".into(), message: "needs >= 2 training and >= 1 validation frames".into() });
        }
        let needed = d.source_depth_range.1.max(d.target_depth_range.1);
        if self.depth_arch.depth_scale < needed {
            return Err(Error::Config {
                key: "depth_arch.depth_scale".into(),
                message: format!("must be at least the largest depth {needed}"),
            });
        }
        self.depth_arch.validate().map_err(|e| key("depth_arch", e))?;
        self.depth_train.validate().map_err(|e| key("depth_train", e))?;
        self.energy_arch.validate().map_err(|e| key("energy_arch", e))?;
        self.energy_arch.tiles(d.height, d.width).map_err(|e| key("energy_arch.widths", e))?;
        self.energy_train.validate().map_err(|e| key("energy_train", e))?;
        self.perturb.validate().map_err(|e| key("perturb", e))?;
        self.adapt.validate()?;
        self.eval.validate()?;
        if self.experiment.iteration_sweep.contains(&0) {
            return Err(Error::Config { key: "experiment.iteration_sweep".into(), message: "iteration counts must be >= 1".into() });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words are taken as strings so `--set scenario=fog` works.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Resolves a configuration. Precedence, lowest first: scenario preset,
/// config file, `key.path=value` overrides.
pub fn resolve_config(
    scenario: Option<Scenario>,
    seed: Option<u64>,
    file: Option<&Path>,
    overrides: &[String],
) -> Result<RunConfig> {
    let mut file_tab = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::MissingArtifact { path: p.to_path_buf() }
                } else {
                    Error::io(p, e)
                }
            })?;
            toml::from_str::<toml::Value>(&text)
                .map_err(|e| Error::Config { key: p.display().to_string(), message: e.to_string() })?
        }
        None => toml::Value::Table(Default::default()),
    };
    let mut over_tab = toml::Value::Table(Default::default());
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config { key: o.clone(), message: "override must look like key.path=value".into() })?;
        let mut value = parse_value(v.trim());
        for part in k.trim().rsplit('.') {
            let mut t = toml::Table::new();
            t.insert(part.to_string(), value);
            value = toml::Value::Table(t);
        }
        merge(&mut over_tab, value);
    }
    // Scenario and seed decide the preset, so read them first.
    let pick = |t: &toml::Value, k: &str| t.get(k).cloned();
    let scen = match scenario {
        Some(s) => s,
        None => match pick(&over_tab, "scenario").or_else(|| pick(&file_tab, "scenario")) {
            Some(v) => v.as_str().ok_or_else(|| Error::Config { key: "scenario".into(), message: "must be a string".into() })?.parse()?,
            None => Scenario::Fog,
        },
    };
    let seed = match seed {
        Some(s) => s,
        None => match pick(&over_tab, "seed").or_else(|| pick(&file_tab, "seed")) {
            Some(v) => v.as_integer().filter(|i| *i >= 0).ok_or_else(|| Error::Config { key: "seed".into(), message: "must be a non-negative integer".into() })? as u64,
            None => 0,
        },
    };
    let mut value = toml::Value::try_from(RunConfig::preset(scen, seed)).expect("preset serializes");
    merge(&mut file_tab, over_tab);
    merge(&mut value, file_tab);
    if let toml::Value::Table(t) = &mut value {
        t.insert("scenario".into(), toml::Value::String(scen.to_string()));
        t.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        Error::Config { key, message: e.into_inner().message().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}
