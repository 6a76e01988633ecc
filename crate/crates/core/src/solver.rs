//! Backward induction for the equilibrium pair `(V, g)`.
//!
//! At slice `n` every node picks the control minimizing
//! `E[V_{n+1}] + corr(g_{n+1})` over the control grid, where the correction is
//! `-(gamma/2) h2 [sigma_bar^2 D2x g + pi sum_{i,k} v_i v_k D2_{ik} g]`. The
//! expected terminal wealth `g_n` is then propagated under the chosen control.

use rayon::prelude::*;
use serde::Serialize;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::kernel::{Invalid, LocalTerms, TransitionStencil};
use crate::lattice::Lattice;
use crate::market::{ControlPoint, Coords, RegimeModel};

const STEP_TOL: f64 = 1e-9;

/// Finite set of candidate controls, sorted by `u` (lexicographic) and then by `pi`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlGrid {
    controls: Vec<ControlPoint>,
}

impl ControlGrid {
    /// Product grid `{0, du, .., u_max}^d x linspace(attention_min, attention_max, n_pi)`.
    pub fn uniform(model: &RegimeModel, u_max: f64, du: f64, n_pi: usize) -> Result<Self> {
        if !(du > 0.0) || !(u_max >= 0.0) {
            return Err(Error::Domain(format!(
                "need du > 0 and u_max >= 0, got du={du}, u_max={u_max}"
            )));
        }
        let steps = (u_max / du).round();
        if (u_max / du - steps).abs() > STEP_TOL * steps.max(1.0) {
            return Err(Error::Domain(format!(
                "u_max={u_max} is not a multiple of du={du}"
            )));
        }
        let (lo, hi) = (model.attention_min, model.attention_max);
        if n_pi == 0 || (n_pi == 1 && lo != hi) {
            return Err(Error::Domain(format!(
                "n_pi={n_pi} cannot include both attention bounds"
            )));
        }
        let pis: Vec<f64> = (0..n_pi)
            .map(|j| {
                if j + 1 == n_pi {
                    hi
                } else {
                    lo + (hi - lo) * j as f64 / (n_pi - 1) as f64
                }
            })
            .collect();
        let levels: Vec<f64> = (0..=steps as usize).map(|k| k as f64 * du).collect();

        let d = model.assets;
        let mut controls = Vec::with_capacity(levels.len().pow(d as u32) * n_pi);
        let mut idx = vec![0usize; d];
        loop {
            let u: Coords = idx.iter().map(|&k| levels[k]).collect();
            for &pi in &pis {
                controls.push(ControlPoint { u: u.clone(), pi });
            }
            // odometer with the last component fastest
            let mut pos = d;
            loop {
                if pos == 0 {
                    return Ok(Self { controls });
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < levels.len() {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }

    /// Sorts and deduplicates an explicit list of controls.
    pub fn from_controls(mut controls: Vec<ControlPoint>) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::Domain("control grid is empty".into()));
        }
        controls.sort_by(|a, b| {
            a.u.iter()
                .zip(&b.u)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.pi.total_cmp(&b.pi))
        });
        controls.dedup();
        Ok(Self { controls })
    }

    pub fn controls(&self) -> &[ControlPoint] {
        &self.controls
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn get(&self, i: usize) -> &ControlPoint {
        &self.controls[i]
    }

    pub fn position(&self, c: &ControlPoint) -> Option<usize> {
        self.controls.iter().position(|x| x == c)
    }

    pub fn check(&self, model: &RegimeModel) -> Result<()> {
        self.controls.iter().try_for_each(|c| c.check(model))
    }
}

/// Diagnostics collected while solving.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    /// Smallest stay probability under the chosen controls.
    pub min_p_stay: f64,
    /// `(slice, node)` where `min_p_stay` occurs.
    pub min_p_stay_at: (usize, usize),
    /// Node/control pairs skipped because their stencil was invalid.
    pub cfl_skipped: usize,
}

/// `V`, `g` and the policy at every slice `0..=N`.
///
/// `policy[n][node]` indexes the control grid and exists for `n < N` only.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionFields {
    pub value: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub policy: Vec<Vec<u32>>,
    pub report: SolveReport,
}

impl SolutionFields {
    /// Terminal slice `V_N = g_N = x` with empty earlier slices.
    pub fn terminal(lattice: &Lattice) -> Self {
        let n = lattice.spec().n_steps;
        let x: Vec<f64> = (0..lattice.len()).map(|i| lattice.x_of(i)).collect();
        let mut value = vec![Vec::new(); n + 1];
        let mut g = vec![Vec::new(); n + 1];
        value[n] = x.clone();
        g[n] = x;
        Self {
            value,
            g,
            policy: vec![Vec::new(); n],
            report: SolveReport {
                min_p_stay: 1.0,
                min_p_stay_at: (n, 0),
                cfl_skipped: 0,
            },
        }
    }

    pub fn n_steps(&self) -> usize {
        self.policy.len()
    }

    pub fn control<'a>(&self, grid: &'a ControlGrid, n: usize, node: usize) -> &'a ControlPoint {
        grid.get(self.policy[n][node] as usize)
    }
}

/// Control-independent data for one node at one slice.
struct NodeContext {
    terms: LocalTerms,
    /// `D2x g_{n+1}`
    dxx: f64,
    /// `sum_{i,k} v_i v_k D2_{ik} g_{n+1}`
    phi_curvature: f64,
}

struct Choice {
    control: u32,
    value: f64,
    g: f64,
    p_stay: f64,
    skipped: usize,
}

struct Scheme<'a> {
    lattice: &'a Lattice,
    h1: f64,
    h2: f64,
    gamma: f64,
}

impl<'a> Scheme<'a> {
    fn new(model: &RegimeModel, lattice: &'a Lattice) -> Self {
        let s = lattice.spec();
        Self {
            lattice,
            h1: s.h1,
            h2: s.h2,
            gamma: model.risk_aversion,
        }
    }

    fn terms(&self, model: &RegimeModel, n: usize) -> Vec<LocalTerms> {
        let piece = model.piece_at(self.lattice.spec().time(n));
        (0..self.lattice.len())
            .map(|node| {
                let (x, b) = self.lattice.state(node);
                LocalTerms::new(model, piece, x, &b)
            })
            .collect()
    }

    fn context(&self, terms: LocalTerms, node: usize, g_next: &[f64]) -> NodeContext {
        let (dxx, dphi) = second_differences(self.lattice, node, g_next);
        let v = &terms.loadings;
        let n = v.len();
        let mut phi_curvature = 0.0;
        for i in 0..n {
            for k in 0..n {
                phi_curvature += v[i] * v[k] * dphi[i * n + k];
            }
        }
        NodeContext {
            terms,
            dxx,
            phi_curvature,
        }
    }

    #[inline]
    fn correction(&self, ctx: &NodeContext, c: &ControlPoint) -> f64 {
        let s2 = ctx.terms.diffusion_sq(&c.u);
        -0.5 * self.gamma * self.h2 * (s2 * ctx.dxx + c.pi * ctx.phi_curvature)
    }

    #[inline]
    fn candidate(
        &self,
        ctx: &NodeContext,
        node: usize,
        c: &ControlPoint,
        v_next: &[f64],
    ) -> std::result::Result<(f64, TransitionStencil), Invalid> {
        let st = ctx.terms.stencil(self.h1, self.h2, c)?;
        let v =
            expectation(&st, node, self.lattice.neighbors(node), v_next) + self.correction(ctx, c);
        Ok((v, st))
    }

    fn optimize(
        &self,
        ctx: &NodeContext,
        node: usize,
        grid: &ControlGrid,
        v_next: &[f64],
        g_next: &[f64],
    ) -> std::result::Result<Choice, Invalid> {
        let mut best: Option<(usize, f64)> = None;
        let mut first_err = None;
        let mut skipped = 0;
        for (ci, c) in grid.controls().iter().enumerate() {
            match self.candidate(ctx, node, c, v_next) {
                Ok((v, _)) => {
                    if best.is_none_or(|b| v < b.1) {
                        best = Some((ci, v));
                    }
                }
                Err(e) => {
                    skipped += 1;
                    first_err.get_or_insert(e);
                }
            }
        }
        match best {
            Some((ci, value)) => {
                let st = ctx
                    .terms
                    .stencil(self.h1, self.h2, grid.get(ci))
                    .expect("chosen stencil was valid");
                Ok(Choice {
                    control: ci as u32,
                    value,
                    g: expectation(&st, node, self.lattice.neighbors(node), g_next),
                    p_stay: st.p_stay,
                    skipped,
                })
            }
            None => Err(first_err.expect("grid is non-empty")),
        }
    }

    fn step(
        &self,
        terms: &[LocalTerms],
        grid: &ControlGrid,
        n: usize,
        fields: &mut SolutionFields,
    ) -> Result<()> {
        let v_next = &fields.value[n + 1];
        let g_next = &fields.g[n + 1];
        let choices: Vec<_> = (0..self.lattice.len())
            .into_par_iter()
            .map(|node| {
                let ctx = self.context(terms[node].clone(), node, g_next);
                self.optimize(&ctx, node, grid, v_next, g_next)
            })
            .collect();
        let mut value = Vec::with_capacity(choices.len());
        let mut g = Vec::with_capacity(choices.len());
        let mut policy = Vec::with_capacity(choices.len());
        for (node, ch) in choices.into_iter().enumerate() {
            let ch = ch.map_err(|e| e.at(Some(n), node, grid.get(0)))?;
            if ch.p_stay < fields.report.min_p_stay {
                fields.report.min_p_stay = ch.p_stay;
                fields.report.min_p_stay_at = (n, node);
            }
            fields.report.cfl_skipped += ch.skipped;
            value.push(ch.value);
            g.push(ch.g);
            policy.push(ch.control);
        }
        fields.value[n] = value;
        fields.g[n] = g;
        fields.policy[n] = policy;
        Ok(())
    }
}

#[inline]
fn expectation(st: &TransitionStencil, node: usize, neighbors: &[u32], f: &[f64]) -> f64 {
    let mut acc = st.p_stay * f[node];
    for (p, &nb) in st.iter_moves().zip(neighbors) {
        acc += p * f[nb as usize];
    }
    acc
}

/// Central second differences of `f` at `node` on clamped neighbors.
///
/// Returns `D2x f` and the `(m-1) x (m-1)` belief Hessian, row-major. Mixed
/// entries use `[f(++) + f(--) - f(+-) - f(-+)] / (4 h1^2)`.
fn second_differences(lattice: &Lattice, node: usize, f: &[f64]) -> (f64, SmallVec<[f64; 9]>) {
    let h1 = lattice.spec().h1;
    let hh = h1 * h1;
    let nb = lattice.neighbors(node);
    let at = |j: usize| f[nb[j] as usize];
    let c = f[node];
    let dxx = (at(0) + at(1) - 2.0 * c) / hh;
    let n = lattice.regimes() - 1;
    let mut d: SmallVec<[f64; 9]> = smallvec::smallvec![0.0; n * n];
    for i in 0..n {
        d[i * n + i] = (at(2 + 2 * i) + at(3 + 2 * i) - 2.0 * c) / hh;
    }
    let mut base = 2 + 2 * n;
    for i in 0..n {
        for k in i + 1..n {
            let v = (at(base) + at(base + 1) - at(base + 2) - at(base + 3)) / (4.0 * hh);
            d[i * n + k] = v;
            d[k * n + i] = v;
            base += 4;
        }
    }
    (dxx, d)
}

fn node_context(
    model: &RegimeModel,
    lattice: &Lattice,
    t: f64,
    node: usize,
    g_next: &[f64],
) -> NodeContext {
    let (x, b) = lattice.state(node);
    let terms = LocalTerms::new(model, model.piece_at(t), x, &b);
    Scheme::new(model, lattice).context(terms, node, g_next)
}

/// Discrete `g` correction at `node` for control `c`.
pub fn g_correction(
    model: &RegimeModel,
    lattice: &Lattice,
    t: f64,
    node: usize,
    c: &ControlPoint,
    g_next: &[f64],
) -> f64 {
    let ctx = node_context(model, lattice, t, node, g_next);
    Scheme::new(model, lattice).correction(&ctx, c)
}

/// `E[V_{n+1}] + g_correction` under control `c`.
pub fn candidate_value(
    model: &RegimeModel,
    lattice: &Lattice,
    t: f64,
    node: usize,
    c: &ControlPoint,
    v_next: &[f64],
    g_next: &[f64],
) -> Result<f64> {
    let ctx = node_context(model, lattice, t, node, g_next);
    Scheme::new(model, lattice)
        .candidate(&ctx, node, c, v_next)
        .map(|(v, _)| v)
        .map_err(|e| e.at(None, node, c).into())
}

/// Minimizing control index and value at `node`.
pub fn optimize_node(
    model: &RegimeModel,
    lattice: &Lattice,
    grid: &ControlGrid,
    t: f64,
    node: usize,
    v_next: &[f64],
    g_next: &[f64],
) -> Result<(usize, f64)> {
    let ctx = node_context(model, lattice, t, node, g_next);
    Scheme::new(model, lattice)
        .optimize(&ctx, node, grid, v_next, g_next)
        .map(|ch| (ch.control as usize, ch.value))
        .map_err(|e| e.at(None, node, grid.get(0)).into())
}

/// Fills slice `n` of `fields` from slice `n + 1`.
pub fn step_back(
    model: &RegimeModel,
    lattice: &Lattice,
    grid: &ControlGrid,
    n: usize,
    fields: &mut SolutionFields,
) -> Result<()> {
    let scheme = Scheme::new(model, lattice);
    let terms = scheme.terms(model, n);
    scheme.step(&terms, grid, n, fields)
}

/// Runs the backward induction from `N` down to `0`.
pub fn solve(model: &RegimeModel, lattice: &Lattice, grid: &ControlGrid) -> Result<SolutionFields> {
    if grid.is_empty() {
        return Err(Error::Domain("control grid is empty".into()));
    }
    grid.check(model)?;
    let scheme = Scheme::new(model, lattice);
    let n_steps = lattice.spec().n_steps;
    let mut fields = SolutionFields::terminal(lattice);
    let mut cache: Option<(usize, Vec<LocalTerms>)> = None;
    let report_every = (n_steps / 10).max(1);
    for n in (0..n_steps).rev() {
        let piece = model.piece_index(lattice.spec().time(n));
        if cache.as_ref().is_none_or(|(p, _)| *p != piece) {
            cache = Some((piece, scheme.terms(model, n)));
        }
        let terms = &cache.as_ref().expect("cache filled above").1;
        scheme.step(terms, grid, n, &mut fields)?;
        if n % report_every == 0 {
            log::debug!(
                "slice {n}/{n_steps} done, min p_stay {:.6}",
                fields.report.min_p_stay
            );
        }
    }
    Ok(fields)
}

/// Gain from the best one-step deviation relative to the stored policy.
///
/// Non-negative (up to rounding) exactly when no spike deviation at `(n, node)`
/// improves on the policy.
pub fn spike_check(
    model: &RegimeModel,
    lattice: &Lattice,
    grid: &ControlGrid,
    fields: &SolutionFields,
    n: usize,
    node: usize,
) -> f64 {
    let t = lattice.spec().time(n);
    let ctx = node_context(model, lattice, t, node, &fields.g[n + 1]);
    let scheme = Scheme::new(model, lattice);
    let v_next = &fields.value[n + 1];
    let at = |c: &ControlPoint| scheme.candidate(&ctx, node, c, v_next).map(|(v, _)| v).ok();
    let Some(current) = at(fields.control(grid, n, node)) else {
        return f64::NEG_INFINITY;
    };
    grid.controls()
        .iter()
        .filter_map(at)
        .map(|v| v - current)
        .fold(f64::INFINITY, f64::min)
}

/// `u / x` per node at slice `n`; `None` where `x = 0`.
pub fn ratio_policy(
    fields: &SolutionFields,
    lattice: &Lattice,
    grid: &ControlGrid,
    n: usize,
) -> Vec<Option<Coords>> {
    (0..lattice.len())
        .map(|node| {
            let x = lattice.x_of(node);
            let c = fields.control(grid, n, node);
            (x != 0.0).then(|| c.u.iter().map(|u| u / x).collect())
        })
        .collect()
}

/// Largest `|g_n - E[g_{n+1}]|` over all slices and nodes under the stored policy.
pub fn propagation_residual(
    model: &RegimeModel,
    lattice: &Lattice,
    grid: &ControlGrid,
    fields: &SolutionFields,
) -> Result<f64> {
    let scheme = Scheme::new(model, lattice);
    let mut worst: f64 = 0.0;
    for n in 0..fields.n_steps() {
        let terms = scheme.terms(model, n);
        for (node, term) in terms.iter().enumerate() {
            let c = fields.control(grid, n, node);
            let st = term
                .stencil(scheme.h1, scheme.h2, c)
                .map_err(|e| e.at(Some(n), node, c))?;
            let g = expectation(&st, node, lattice.neighbors(node), &fields.g[n + 1]);
            worst = worst.max((g - fields.g[n][node]).abs());
        }
    }
    Ok(worst)
}

/// Exact law of the chain started at `(n0, start)` under the stored policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Occupancy {
    /// `E[eta_N]`
    pub terminal_mean: f64,
    /// `Var[eta_N]`
    pub terminal_variance: f64,
    /// Probability of ending on the lowest or highest wealth level.
    pub terminal_boundary_mass: f64,
    /// Largest such probability over all slices.
    pub peak_boundary_mass: f64,
}

pub fn occupancy(
    model: &RegimeModel,
    lattice: &Lattice,
    grid: &ControlGrid,
    fields: &SolutionFields,
    n0: usize,
    start: usize,
) -> Result<Occupancy> {
    let scheme = Scheme::new(model, lattice);
    let nx = lattice.x_levels();
    let on_edge = |node: usize| {
        let ix = lattice.ix_of(node);
        ix == 0 || ix + 1 == nx
    };
    let edge_mass = |dist: &[f64]| {
        dist.iter()
            .enumerate()
            .filter(|(i, _)| on_edge(*i))
            .map(|(_, p)| p)
            .sum::<f64>()
    };

    let mut dist = vec![0.0; lattice.len()];
    dist[start] = 1.0;
    let mut peak = edge_mass(&dist);
    let mut cache: Option<(usize, Vec<LocalTerms>)> = None;
    for n in n0..fields.n_steps() {
        let piece = model.piece_index(lattice.spec().time(n));
        if cache.as_ref().is_none_or(|(p, _)| *p != piece) {
            cache = Some((piece, scheme.terms(model, n)));
        }
        let terms = &cache.as_ref().expect("cache filled above").1;
        let mut next = vec![0.0; lattice.len()];
        for (node, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let c = fields.control(grid, n, node);
            let st = terms[node]
                .stencil(scheme.h1, scheme.h2, c)
                .map_err(|e| e.at(Some(n), node, c))?;
            next[node] += mass * st.p_stay;
            for (p, &nb) in st.moves().iter().zip(lattice.neighbors(node)) {
                next[nb as usize] += mass * p;
            }
        }
        dist = next;
        peak = peak.max(edge_mass(&dist));
    }
    let mean: f64 = dist
        .iter()
        .enumerate()
        .map(|(i, p)| p * lattice.x_of(i))
        .sum();
    let second: f64 = dist
        .iter()
        .enumerate()
        .map(|(i, p)| p * lattice.x_of(i).powi(2))
        .sum();
    Ok(Occupancy {
        terminal_mean: mean,
        terminal_variance: (second - mean * mean).max(0.0),
        terminal_boundary_mass: edge_mass(&dist),
        peak_boundary_mass: peak,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_grid, GridSpec, LatticeNode};
    use approx::assert_abs_diff_eq;
    use smallvec::smallvec;

    fn lattice(model: &RegimeModel, h2: f64, horizon: f64) -> Lattice {
        build_grid(
            GridSpec::new(0.2, h2, 0.0, 4.0, horizon).unwrap(),
            model.regimes,
        )
        .unwrap()
    }

    /// The two-regime update term written out directly; no cross moves exist there.
    fn direct_update_term(
        model: &RegimeModel,
        lat: &Lattice,
        node: usize,
        c: &ControlPoint,
        g: &[f64],
    ) -> f64 {
        let (x, b) = lat.state(node);
        let terms = LocalTerms::new(model, model.piece_at(0.0), x, &b);
        let (h1, h2) = (lat.spec().h1, lat.spec().h2);
        let st = terms.stencil(h1, h2, c).unwrap();
        let bb = terms.drift(c);
        let q = terms.filter_drift[0];
        let nb = lat.neighbors(node);
        let gamma = model.risk_aversion;
        let p1 = st.p_stay + st.defect;
        let mut out = gamma * g[node] * (1.0 - p1 - (q.abs() + bb.abs()) / h1 * h2);
        for l in 0..2 {
            out += gamma
                * (g[nb[l] as usize] * (bb.max(0.0) * h2 - st.p_x[0] * h1) / h1
                    + g[nb[2 + l] as usize] * (q.max(0.0) * h2 - st.p_phi[0][0] * h1) / h1);
        }
        out
    }

    #[test]
    fn direct_update_term_matches_correction_for_two_regimes() {
        let model = RegimeModel::illustrative();
        let lat = lattice(&model, 0.001, 2.0);
        let g: Vec<f64> = (0..lat.len())
            .map(|i| {
                let (x, b) = lat.state(i);
                (x - 1.3).powi(3) * 0.1 + (b.phi()[0] * 3.0).sin() * x + x * x * b.phi()[0]
            })
            .collect();
        for node in 0..lat.len() {
            for c in [
                ControlPoint::new([0.0], 0.001),
                ControlPoint::new([1.5], 1.2),
                ControlPoint::new([3.0], 2.0),
            ] {
                let ours = g_correction(&model, &lat, 0.0, node, &c, &g);
                let direct = direct_update_term(&model, &lat, node, &c, &g);
                assert_abs_diff_eq!(ours, direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn correction_of_quadratic_in_wealth() {
        let mut model = RegimeModel::illustrative();
        model.coefficients[0].vol = vec![vec![vec![0.2]], vec![vec![0.2]]];
        model.signal_levels = vec![0.3, 0.3];
        let lat = lattice(&model, 0.001, 2.0);
        let g: Vec<f64> = (0..lat.len()).map(|i| lat.x_of(i).powi(2)).collect();
        let node = lat
            .index_of(&LatticeNode {
                ix: 10,
                iphi: smallvec![1],
            })
            .unwrap();
        let c = ControlPoint::new([1.0], 1.0);
        assert_abs_diff_eq!(
            g_correction(&model, &lat, 0.0, node, &c, &g),
            -2e-5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn correction_vanishes_on_affine_and_without_risk_aversion() {
        let model = RegimeModel::illustrative();
        let lat = lattice(&model, 0.001, 2.0);
        let affine: Vec<f64> = (0..lat.len())
            .map(|i| {
                let (x, b) = lat.state(i);
                2.0 * x - 3.0 * b.phi()[0] + 0.5
            })
            .collect();
        let curved: Vec<f64> = (0..lat.len()).map(|i| lat.x_of(i).powi(2)).collect();
        let c = ControlPoint::new([2.0], 0.5);
        let node = lat
            .index_of(&LatticeNode {
                ix: 8,
                iphi: smallvec![2],
            })
            .unwrap();
        assert!(g_correction(&model, &lat, 0.0, node, &c, &affine).abs() < 1e-15);
        let calm = RegimeModel {
            risk_aversion: 0.0,
            ..model
        };
        assert_eq!(g_correction(&calm, &lat, 0.0, node, &c, &curved), 0.0);
    }

    #[test]
    fn grid_layout() {
        let model = RegimeModel::illustrative();
        let grid = ControlGrid::uniform(&model, 4.0, 0.25, 11).unwrap();
        assert_eq!(grid.len(), 17 * 11);
        assert_eq!(grid.get(0), &ControlPoint::new([0.0], 0.001));
        assert_eq!(grid.get(10).pi, 2.0);
        assert!(ControlGrid::uniform(&model, 1.0, 0.3, 3).is_err());
        assert!(ControlGrid::uniform(&model, 1.0, 0.5, 1).is_err());
        let m2 = RegimeModel::synthetic(2, 2, 3);
        let g2 = ControlGrid::uniform(&m2, 1.0, 0.5, 2).unwrap();
        assert_eq!(g2.len(), 18);
        let sorted =
            ControlGrid::from_controls(g2.controls().iter().rev().cloned().collect()).unwrap();
        assert_eq!(sorted, g2);
    }

    #[test]
    fn linear_drift_propagates_growth() {
        let mut model = RegimeModel::illustrative();
        model.generator = vec![vec![0.0; 2]; 2];
        model.cost_coeff = 0.0;
        let lat = lattice(&model, 0.001, 2.0);
        let grid = ControlGrid::from_controls(vec![ControlPoint::new([0.0], 1.0)]).unwrap();
        let mut fields = SolutionFields::terminal(&lat);
        let n = fields.n_steps() - 1;
        step_back(&model, &lat, &grid, n, &mut fields).unwrap();
        for node in 0..lat.len() {
            let x = lat.x_of(node);
            if lat.ix_of(node) + 1 < lat.x_levels() {
                assert_abs_diff_eq!(fields.g[n][node], x * (1.0 + 0.03 * 0.001), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn one_step_horizon_by_enumeration() {
        let model = RegimeModel::illustrative();
        let lat = lattice(&model, 0.001, 0.001);
        let grid = ControlGrid::uniform(&model, 2.0, 0.5, 3).unwrap();
        let fields = solve(&model, &lat, &grid).unwrap();
        let x: Vec<f64> = (0..lat.len()).map(|i| lat.x_of(i)).collect();
        for node in 0..lat.len() {
            let vals: Vec<f64> = grid
                .controls()
                .iter()
                .map(|c| candidate_value(&model, &lat, 0.0, node, c, &x, &x).unwrap())
                .collect();
            let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(fields.value[0][node], best);
            let first = vals.iter().position(|v| *v == best).unwrap();
            assert_eq!(fields.policy[0][node] as usize, first);
        }
    }

    #[test]
    fn corrupted_policy_is_detected() {
        let model = RegimeModel::illustrative();
        let lat = lattice(&model, 0.001, 0.01);
        let grid = ControlGrid::uniform(&model, 2.0, 0.5, 3).unwrap();
        let mut fields = solve(&model, &lat, &grid).unwrap();
        let node = lat
            .index_of(&LatticeNode {
                ix: 10,
                iphi: smallvec![1],
            })
            .unwrap();
        assert!(spike_check(&model, &lat, &grid, &fields, 3, node) >= -1e-12);
        let n_controls = grid.len() as u32;
        let current = fields.policy[3][node];
        let worst = (0..n_controls)
            .max_by(|&a, &b| {
                let va = candidate_value(
                    &model,
                    &lat,
                    0.003,
                    node,
                    grid.get(a as usize),
                    &fields.value[4],
                    &fields.g[4],
                )
                .unwrap();
                let vb = candidate_value(
                    &model,
                    &lat,
                    0.003,
                    node,
                    grid.get(b as usize),
                    &fields.value[4],
                    &fields.g[4],
                )
                .unwrap();
                va.total_cmp(&vb)
            })
            .unwrap();
        assert_ne!(worst, current);
        fields.policy[3][node] = worst;
        assert!(spike_check(&model, &lat, &grid, &fields, 3, node) < 0.0);
    }
}
