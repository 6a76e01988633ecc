//! Turns a config into a model, lattice, control grid and evaluation node.

use serde::Serialize;
use wonham_mv::lattice::{build_grid, GridSpec, Lattice, LatticeNode};
use wonham_mv::{ControlGrid, RegimeModel};

use crate::config::{LoadedConfig, RunConfig};
use crate::CliError;

const ON_GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: RegimeModel,
    pub lattice: Lattice,
    pub grid: ControlGrid,
    /// Slice of the evaluation time.
    pub eval_slice: usize,
    /// Node of the evaluation wealth and belief.
    pub eval_node: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub h1: f64,
    pub h2: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub n_steps: usize,
    pub x_levels: usize,
    pub simplex_points: usize,
    pub nodes: usize,
    pub controls: usize,
}

impl Prepared {
    pub fn summary(&self) -> GridSummary {
        let s = self.lattice.spec();
        GridSummary {
            h1: s.h1,
            h2: s.h2,
            x_min: s.x_min,
            x_max: s.x_max,
            n_steps: s.n_steps,
            x_levels: self.lattice.x_levels(),
            simplex_points: self.lattice.simplex_len(),
            nodes: self.lattice.len(),
            controls: self.grid.len(),
        }
    }

    pub fn slice_of(&self, t: f64) -> Result<usize, CliError> {
        self.lattice.spec().slice_of(t).ok_or_else(|| {
            CliError::Config(format!(
                "time {t} is not on the time grid (h2={})",
                self.lattice.spec().h2
            ))
        })
    }
}

/// Node at `(x, phi)`, if both lie exactly on the lattice.
pub fn locate(lattice: &Lattice, x: f64, phi: &[f64]) -> Result<usize, CliError> {
    let spec = lattice.spec();
    let ix = spec.x_index(x).ok_or_else(|| {
        CliError::Config(format!(
            "evaluation wealth {x} is not on the wealth grid (h1={})",
            spec.h1
        ))
    })?;
    if phi.len() + 1 != lattice.regimes() {
        return Err(CliError::Config(format!(
            "evaluation belief has {} coordinates, model needs {}",
            phi.len(),
            lattice.regimes() - 1
        )));
    }
    let mut iphi = wonham_mv::lattice::SimplexIndex::new();
    for &p in phi {
        let r = p / spec.h1;
        let k = r.round();
        if (r - k).abs() > ON_GRID_TOL * k.abs().max(1.0) || k < 0.0 {
            return Err(CliError::Config(format!(
                "evaluation belief {phi:?} is not on the belief grid (h1={})",
                spec.h1
            )));
        }
        iphi.push(k as u32);
    }
    lattice.index_of(&LatticeNode { ix, iphi }).ok_or_else(|| {
        CliError::Config(format!(
            "evaluation belief {phi:?} lies outside the simplex"
        ))
    })
}

pub fn prepare(loaded: &LoadedConfig) -> Result<Prepared, CliError> {
    let c = &loaded.config;
    prepare_with(c, loaded.model()?, c.grid.h1, c.grid.h2)
}

/// Builds everything for `model` on steps `(h1, h2)`, other settings from `config`.
pub fn prepare_with(
    config: &RunConfig,
    model: RegimeModel,
    h1: f64,
    h2: f64,
) -> Result<Prepared, CliError> {
    let g = &config.grid;
    let spec = GridSpec::new(h1, h2, g.x_min, g.x_max, model.horizon)?;
    let lattice = build_grid(spec, model.regimes)?;
    let c = &config.controls;
    let grid = ControlGrid::uniform(&model, c.u_max, c.du, c.n_pi)?;
    let e = &config.evaluation;
    let eval_slice = spec.slice_of(e.t).ok_or_else(|| {
        CliError::Config(format!(
            "evaluation time {} is not on the time grid (h2={h2})",
            e.t
        ))
    })?;
    let eval_node = locate(&lattice, e.x, &e.phi)?;
    Ok(Prepared {
        model,
        lattice,
        grid,
        eval_slice,
        eval_node,
    })
}
