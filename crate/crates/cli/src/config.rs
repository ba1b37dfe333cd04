//! Effective run configuration: preset defaults, then an optional JSON file,
//! then `--set key=value` overrides, then named flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ctnet_core::attention::{Mechanism, Operator};
use ctnet_core::dataset::{load_manifest, synth_dataset, Dataset, Split, SynthSpec};
use ctnet_core::network::{ModelConfig, Preset, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synth { spec: SynthSpec, test_per_class: usize },
    Manifest { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub out: PathBuf,
    /// Drives initialization, shuffling and synthetic data.
    pub seed: u64,
}

pub const DEFAULT_POINTS: usize = 1024;
pub const DEFAULT_CLASSES: usize = 40;

impl RunConfig {
    pub fn defaults(preset: Preset, points: usize) -> Self {
        let mut spec = SynthSpec::desk(100, 0);
        spec.points = points;
        Self {
            model: ModelConfig::preset(preset, points, DEFAULT_CLASSES),
            train: TrainConfig::default(),
            data: DataSource::Synth {
                spec,
                test_per_class: 25,
            },
            out: PathBuf::from("ctnet-run"),
            seed: 0,
        }
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Loads and prepares both splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset), CliError> {
        let (train, test) = match &self.data {
            DataSource::Synth { spec, test_per_class } => {
                let mut spec = spec.clone();
                spec.seed = self.seed;
                let train = synth_dataset(&spec, Split::Train)?;
                spec.per_class = *test_per_class;
                (train, synth_dataset(&spec, Split::Test)?)
            }
            DataSource::Manifest { path } => load_manifest(path)?,
        };
        let points = self.model.points;
        Ok((train.prepare(points, self.seed)?, test.prepare(points, self.seed)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

fn parse_mechanism(s: &str) -> Result<Mechanism, String> {
    s.parse().map_err(|e: ctnet_core::Error| e.to_string())
}

fn parse_operator(s: &str) -> Result<Operator, String> {
    s.parse().map_err(|e: ctnet_core::Error| e.to_string())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: ctnet_core::Error| e.to_string())
}

/// Flags shared by every command that builds a model.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigFlags {
    /// JSON run configuration (any subset of keys).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Width preset: paper or desk.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input points per cloud; module sample counts follow as N/4 and N/16.
    #[arg(long)]
    pub points: Option<usize>,
    /// Grouping scales per module.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["1", "3"]))]
    pub scales: Option<String>,
    /// basic, offset, ascn or pa.
    #[arg(long, value_parser = parse_mechanism)]
    pub mechanism: Option<Mechanism>,
    /// dot, concat, sum, sub, div or hadamard.
    #[arg(long, value_parser = parse_operator)]
    pub operator: Option<Operator>,
    #[arg(long, value_enum)]
    pub pos_enc: Option<Switch>,
    /// Hierarchical downsampling (off keeps every point in both modules).
    #[arg(long, value_enum)]
    pub hierarchy: Option<Switch>,
    #[arg(long, value_enum)]
    pub lfa: Option<Switch>,
    #[arg(long, value_enum)]
    pub gfl: Option<Switch>,
    /// Override any configuration leaf, e.g. `train.lr=0.05` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted path; values parse as JSON, falling back to a string.
fn set_path(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| CliError::Usage(format!("--set: unknown key {key:?}")))?,
            Value::Array(items) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| CliError::Usage(format!("--set: {part:?} is not an index in {key:?}")))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| CliError::Usage(format!("--set: index {i} out of range ({len}) in {key:?}")))?
            }
            _ => return Err(CliError::Usage(format!("--set: {key:?} goes below a leaf"))),
        };
    }
    *slot = value;
    Ok(())
}

fn file_points(file: &Value) -> Option<usize> {
    file.get("model")?.get("points")?.as_u64().map(|v| v as usize)
}

impl ConfigFlags {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                Some(
                    serde_json::from_str::<Value>(&text)
                        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
                )
            }
            None => None,
        };
        let points = self
            .points
            .or_else(|| file.as_ref().and_then(file_points))
            .unwrap_or(DEFAULT_POINTS);
        if points < 16 {
            return Err(CliError::Usage(format!("--points must be at least 16, got {points}")));
        }
        let base = RunConfig::defaults(self.preset.unwrap_or(Preset::Paper), points);
        let mut value = serde_json::to_value(&base).expect("config serializes");
        if let Some(file) = file {
            merge(&mut value, file);
        }
        for s in &self.set {
            set_path(&mut value, s)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
        if let Some(n) = self.points {
            cfg.model.points = n;
            if let [m1, m2] = cfg.model.modules.as_mut_slice() {
                m1.samples = n / 4;
                m2.samples = n / 16;
            }
            if let DataSource::Synth { spec, .. } = &mut cfg.data {
                spec.points = n;
            }
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.train.seed = cfg.seed;
        let mut model = cfg.model.clone();
        if let Some(s) = &self.scales {
            model = model.with_scales(s.parse().expect("validated by clap"))?;
        }
        if let Some(m) = self.mechanism {
            model = model.with_mechanism(m);
        }
        if let Some(op) = self.operator {
            model = model.with_operator(op);
        }
        if let Some(s) = self.pos_enc {
            model = model.with_position_encoding(s.on());
        }
        if let Some(s) = self.hierarchy {
            model = model.with_hierarchy(s.on());
        }
        if let Some(s) = self.lfa {
            model = model.with_lfa(s.on());
        }
        if let Some(s) = self.gfl {
            model = model.with_gfl(s.on());
        }
        model.validate()?;
        cfg.train.validate()?;
        cfg.model = model;
        Ok(cfg)
    }
}
