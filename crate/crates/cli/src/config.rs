//! Run configuration, loaded from TOML and patched by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wonham_mv::market::validate_model;
use wonham_mv::{ObjectiveConvention, RegimeModel};

use crate::CliError;

pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");
pub const ILLUSTRATIVE_MARKET: &str = include_str!("../configs/illustrative_market.toml");

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Model file, relative to the config file's directory.
    pub path: Option<PathBuf>,
    /// Inline model, used when `path` is absent.
    pub market: Option<RegimeModel>,
    /// Overrides the model's own objective convention.
    pub convention: Option<ObjectiveConvention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub h1: f64,
    pub h2: f64,
    pub x_min: f64,
    pub x_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            h1: 0.2,
            h2: 0.001,
            x_min: 0.0,
            x_max: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub u_max: f64,
    pub du: f64,
    pub n_pi: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            u_max: 4.0,
            du: 0.25,
            n_pi: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Chain paths; also used for the filter marginal check.
    pub n_paths: usize,
    /// Euler paths for the diffusion.
    pub sde_paths: usize,
    pub seed: u64,
    /// Euler step; defaults to `h2`.
    pub sde_step: Option<f64>,
    /// Write one terminal wealth per path to CSV.
    pub path_csv: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            sde_paths: 20_000,
            seed: 20240601,
            sde_step: None,
            path_csv: false,
        }
    }
}

/// Where figure slices are read and simulations start (the latter at time 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub t: f64,
    pub x: f64,
    pub phi: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            t: 1.0,
            x: 2.0,
            phi: vec![0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub k: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k: vec![0.1, 0.3, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// `(h1, h2)` rungs, coarse to fine.
    pub ladder: Vec<[f64; 2]>,
    pub tolerance: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            ladder: vec![[0.4, 0.004], [0.2, 0.001], [0.1, 0.00025]],
            tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub slice_times: Vec<f64>,
    pub debug_stencils: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            slice_times: vec![0.0, 1.0],
            debug_stencils: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    /// CSV `slice,node,u1..ud,pi` replacing stored policy entries before the spike sweep.
    pub policy_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub controls: ControlConfig,
    pub oracle: OracleConfig,
    pub evaluation: EvalConfig,
    pub sweep: SweepConfig,
    pub refine: RefineConfig,
    pub output: OutputConfig,
    pub check: CheckConfig,
}

/// Command-line overrides; `None` keeps the config value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub h1: Option<f64>,
    pub h2: Option<f64>,
    pub paths: Option<usize>,
    pub sweep_k: Option<Vec<f64>>,
    pub ladder: Option<Vec<[f64; 2]>>,
    pub convention: Option<ObjectiveConvention>,
    pub slice_times: Option<Vec<f64>>,
    pub debug_stencils: bool,
}

/// A parsed config together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: Option<PathBuf>,
}

impl LoadedConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config =
            parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self {
            config,
            base_dir: path.parent().map(Path::to_path_buf),
        })
    }

    /// The shipped default config; its model file is embedded as well.
    pub fn builtin() -> Self {
        Self {
            config: parse(DEFAULT_CONFIG).expect("shipped config parses"),
            base_dir: None,
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        let c = &mut self.config;
        if let Some(d) = &o.output_dir {
            c.output.dir = d.clone();
        }
        if let Some(s) = o.seed {
            c.oracle.seed = s;
        }
        if let Some(h) = o.h1 {
            c.grid.h1 = h;
        }
        if let Some(h) = o.h2 {
            c.grid.h2 = h;
        }
        if let Some(p) = o.paths {
            c.oracle.n_paths = p;
            c.oracle.sde_paths = p;
        }
        if let Some(k) = &o.sweep_k {
            c.sweep.k = k.clone();
        }
        if let Some(l) = &o.ladder {
            c.refine.ladder = l.clone();
        }
        if let Some(conv) = o.convention {
            c.model.convention = Some(conv);
        }
        if let Some(t) = &o.slice_times {
            c.output.slice_times = t.clone();
        }
        c.output.debug_stencils |= o.debug_stencils;
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Loads the model, applies the convention override and validates it.
    pub fn model(&self) -> Result<RegimeModel, CliError> {
        let m = &self.config.model;
        let mut model = match (&m.path, &m.market) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "model.path and model.market are mutually exclusive".into(),
                ))
            }
            (Some(p), None)
                if self.base_dir.is_none() && p == Path::new("illustrative_market.toml") =>
            {
                toml::from_str(ILLUSTRATIVE_MARKET).expect("shipped market parses")
            }
            (Some(p), None) => {
                let full = self.resolve(p);
                let text = std::fs::read_to_string(&full).map_err(|e| {
                    CliError::Config(format!("cannot read model {}: {e}", full.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", full.display())))?
            }
            (None, Some(market)) => market.clone(),
            (None, None) => RegimeModel::illustrative(),
        };
        if let Some(conv) = m.convention {
            model.objective_convention = conv;
        }
        let violations = validate_model(&model);
        if violations.is_empty() {
            Ok(model)
        } else {
            Err(CliError::Core(wonham_mv::Error::InvalidModel(violations)))
        }
    }

    pub fn policy_file(&self) -> Option<PathBuf> {
        self.config
            .check
            .policy_file
            .as_deref()
            .map(|p| self.resolve(p))
    }
}

pub fn parse(text: &str) -> Result<RunConfig, toml::de::Error> {
    toml::from_str(text)
}

/// Parses `a,b,c`.
pub fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad number '{t}': {e}"))
        })
        .collect()
}

/// Parses `h1:h2,h1:h2,...`.
pub fn parse_ladder(s: &str) -> Result<Vec<[f64; 2]>, String> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| format!("rung '{pair}' is not h1:h2"))?;
            let h1 = a
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("bad h1 '{a}': {e}"))?;
            let h2 = b
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("bad h2 '{b}': {e}"))?;
            Ok([h1, h2])
        })
        .collect()
}
