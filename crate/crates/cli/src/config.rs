use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gnn_attrib::generate::generate_ba2motifs;
use gnn_attrib::graph::{load_graphs, Dataset, GraphFormat};
use gnn_attrib::model::{load_model, ModelSpec};
use gnn_attrib::Error;
use serde::Serialize;

use crate::CommonArgs;

pub const DEFAULT_SEED: u64 = 7;

/// Failures that map to specific exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

impl Failure {
    /// 2 for bad input, 3 for a failed numerical check, 1 for anything else.
    pub fn exit_code(err: &anyhow::Error) -> u8 {
        if let Some(f) = err.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => 2,
                Failure::Numerical(_) => 3,
            };
        }
        match err.downcast_ref::<Error>() {
            Some(
                Error::Parse { .. }
                | Error::InvalidGraph(_)
                | Error::InvalidDataset(_)
                | Error::InvalidModel(_)
                | Error::DimensionMismatch(_)
                | Error::InvalidArgument(_)
                | Error::TraceMismatch(_)
                | Error::SlotNotInTerm { .. }
                | Error::SizeGuard(_)
                | Error::EmptyGraph,
            ) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    File(PathBuf),
    Generated { spec: String },
}

/// Resolved inputs and flags shared by `explain` and `eval`, echoed into every manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub model: PathBuf,
    pub data: DataConfig,
    pub sparsities: Vec<f64>,
    pub class: Option<usize>,
    pub node: Option<usize>,
    pub features_as_variables: bool,
    pub calibrate: bool,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
}

pub fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))
}

impl RunConfig {
    pub fn resolve(command: &str, common: &CommonArgs, sparsities: Vec<f64>) -> Result<Self> {
        for &s in &sparsities {
            if !(0.0..1.0).contains(&s) {
                return Err(Failure::Usage(format!("sparsity {s} outside [0, 1)")).into());
            }
        }
        if sparsities.is_empty() {
            return Err(Failure::Usage("at least one sparsity level is required".into()).into());
        }
        let data = match (&common.source.data, &common.source.generator) {
            (Some(p), None) => DataConfig::File(absolute(p)?),
            (None, Some(spec)) => {
                parse_gen_spec(spec)?;
                DataConfig::Generated { spec: spec.clone() }
            }
            _ => return Err(Failure::Usage("exactly one of --data and --gen is required".into()).into()),
        };
        Ok(RunConfig {
            command: command.into(),
            model: absolute(&common.model)?,
            data,
            sparsities,
            class: None,
            node: None,
            features_as_variables: common.x_as_vars,
            calibrate: !common.no_calibrate,
            seed: common.seed,
            out: absolute(&common.out)?,
            jobs: common.jobs,
        })
    }

    pub fn load_model(&self) -> Result<ModelSpec> {
        load_model(&self.model).with_context(|| format!("loading model {}", self.model.display()))
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataConfig::File(p) => {
                load_graphs(p, GraphFormat::from_path(p)).with_context(|| format!("loading data {}", p.display()))
            }
            DataConfig::Generated { spec } => generate(spec),
        }
    }
}

pub struct GenSpec {
    pub count: usize,
    pub base_size: usize,
    pub seed: u64,
}

pub fn parse_gen_spec(spec: &str) -> Result<GenSpec> {
    let bad = || Failure::Usage(format!("bad generator spec `{spec}`; expected ba2motifs:COUNT:BASE_SIZE:SEED"));
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["ba2motifs", count, base, seed] => Ok(GenSpec {
            count: count.parse().map_err(|_| bad())?,
            base_size: base.parse().map_err(|_| bad())?,
            seed: seed.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad().into()),
    }
}

pub fn generate(spec: &str) -> Result<Dataset> {
    let g = parse_gen_spec(spec)?;
    Ok(generate_ba2motifs(g.count, g.base_size, g.seed)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).context("serializing output")?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}
