//! Monte Carlo checks against the solved fields.
//!
//! Each path draws from its own ChaCha8 stream `(seed, path)`, so results do
//! not depend on how paths are scheduled.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::filter::{filter_step, Belief};
use crate::kernel::LocalTerms;
use crate::lattice::Lattice;
use crate::market::{ControlPoint, ObjectiveConvention, RegimeModel};
use crate::solver::{ControlGrid, SolutionFields};

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Moments of terminal wealth over `n_paths` samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub n_paths: usize,
    pub mean_xt: f64,
    /// Population variance (divides by `n_paths`).
    pub var_xt: f64,
    pub objective: f64,
    pub se_mean: f64,
    pub se_var: f64,
    /// Fraction of paths that tried to leave the wealth range.
    pub boundary_hits: f64,
}

impl McSummary {
    pub fn from_samples(
        samples: &[f64],
        hits: usize,
        risk_aversion: f64,
        convention: ObjectiveConvention,
    ) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let m4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        Self {
            n_paths: samples.len(),
            mean_xt: mean,
            var_xt: var,
            objective: convention.compose(mean, var, risk_aversion),
            se_mean: (var / n).sqrt(),
            se_var: ((m4 - var * var).max(0.0) / n).sqrt(),
            boundary_hits: hits as f64 / n,
        }
    }
}

/// Feedback control as a function of time and state.
pub trait PolicyLookup: Sync {
    fn control(&self, t: f64, x: f64, phi: &[f64]) -> ControlPoint;
}

/// The same control everywhere.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub ControlPoint);

impl PolicyLookup for ConstantPolicy {
    fn control(&self, _t: f64, _x: f64, _phi: &[f64]) -> ControlPoint {
        self.0.clone()
    }
}

/// Solved policy read off at the nearest lattice node of the current slice.
#[derive(Debug, Clone, Copy)]
pub struct FieldPolicy<'a> {
    pub lattice: &'a Lattice,
    pub grid: &'a ControlGrid,
    pub fields: &'a SolutionFields,
}

impl PolicyLookup for FieldPolicy<'_> {
    fn control(&self, t: f64, x: f64, phi: &[f64]) -> ControlPoint {
        let last = self.fields.n_steps() - 1;
        let n = ((t / self.lattice.spec().h2 + 1e-9).floor().max(0.0) as usize).min(last);
        let node = self.lattice.nearest(x, phi);
        self.fields.control(self.grid, n, node).clone()
    }
}

/// Path count, seed, step and the wealth range used for boundary counting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SdeConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub step: f64,
    pub x_min: f64,
    pub x_max: f64,
}

/// Terminal wealth per path and the number of paths that left `[x_min, x_max]`.
pub fn simulate_sde_paths(
    model: &RegimeModel,
    policy: &dyn PolicyLookup,
    t0: f64,
    x0: f64,
    b0: &Belief,
    cfg: &SdeConfig,
) -> Result<(Vec<f64>, usize)> {
    if cfg.n_paths < 2 || !(cfg.step > 0.0) {
        return Err(Error::Domain(format!(
            "need n_paths >= 2 and step > 0, got {} and {}",
            cfg.n_paths, cfg.step
        )));
    }
    let steps = ((model.horizon - t0) / cfg.step).round().max(0.0) as usize;
    let h = cfg.step;
    let sh = h.sqrt();
    let d = model.assets;
    let runs: Vec<(f64, bool)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = path_rng(cfg.seed, path);
            let (mut x, mut b) = (x0, b0.clone());
            let mut hit = false;
            for s in 0..steps {
                let t = t0 + s as f64 * h;
                let c = policy.control(t, x, b.phi());
                let terms = LocalTerms::new(model, model.piece_at(t), x, &b);
                let mut noise = 0.0;
                for j in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    let row: f64 = (0..d).map(|l| c.u[l] * terms.sigma[l * d + j]).sum();
                    noise += row * z;
                }
                let zb: f64 = rng.sample(StandardNormal);
                x += terms.drift(&c) * h + sh * noise;
                b = filter_step(model, &b, c.pi, sh * zb, h);
                hit |= x < cfg.x_min || x > cfg.x_max;
            }
            (x, hit)
        })
        .collect();
    let hits = runs.iter().filter(|r| r.1).count();
    Ok((runs.into_iter().map(|r| r.0).collect(), hits))
}

/// Euler simulation of wealth and filter from `(t0, x0, b0)` to the horizon.
pub fn simulate_sde(
    model: &RegimeModel,
    policy: &dyn PolicyLookup,
    t0: f64,
    x0: f64,
    b0: &Belief,
    cfg: &SdeConfig,
) -> Result<McSummary> {
    let (samples, hits) = simulate_sde_paths(model, policy, t0, x0, b0, cfg)?;
    Ok(McSummary::from_samples(
        &samples,
        hits,
        model.risk_aversion,
        model.objective_convention,
    ))
}

/// Terminal wealth per path of the lattice chain and the count of paths that
/// hit a wealth edge of the lattice.
#[allow(clippy::too_many_arguments)]
pub fn simulate_chain_paths(
    model: &RegimeModel,
    lattice: &Lattice,
    grid: &ControlGrid,
    fields: &SolutionFields,
    n0: usize,
    start: usize,
    n_paths: usize,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    if n_paths < 2 || start >= lattice.len() || n0 > fields.n_steps() {
        return Err(Error::Domain(format!(
            "bad chain start: n0={n0}, node={start}, n_paths={n_paths}"
        )));
    }
    let spec = *lattice.spec();
    let nx = lattice.x_levels();
    // canonical offsets 0 and 1 are the wealth moves
    let escapes = |node: usize, j: usize| {
        let ix = lattice.ix_of(node);
        (j == 0 && ix + 1 == nx) || (j == 1 && ix == 0)
    };

    let mut rngs: Vec<ChaCha8Rng> = (0..n_paths).map(|p| path_rng(seed, p)).collect();
    let mut at = vec![start as u32; n_paths];
    let mut hit = vec![false; n_paths];
    let mut cache: Option<(usize, Vec<LocalTerms>)> = None;
    let mut cumulative: Vec<SmallVec<[f64; 16]>> = Vec::with_capacity(lattice.len());
    for n in n0..fields.n_steps() {
        let t = spec.time(n);
        let piece = model.piece_index(t);
        if cache.as_ref().is_none_or(|(p, _)| *p != piece) {
            let piece_ref = model.piece_at(t);
            let terms = (0..lattice.len())
                .map(|node| {
                    let (x, b) = lattice.state(node);
                    LocalTerms::new(model, piece_ref, x, &b)
                })
                .collect();
            cache = Some((piece, terms));
        }
        let terms = &cache.as_ref().expect("cache filled above").1;
        cumulative.clear();
        for (node, term) in terms.iter().enumerate() {
            let c = fields.control(grid, n, node);
            let st = term
                .stencil(spec.h1, spec.h2, c)
                .map_err(|e| e.at(Some(n), node, c))?;
            let mut acc = st.p_stay;
            let mut cum: SmallVec<[f64; 16]> = SmallVec::new();
            cum.push(acc);
            for p in st.moves() {
                acc += p;
                cum.push(acc);
            }
            cumulative.push(cum);
        }
        for ((node, rng), hit) in at.iter_mut().zip(&mut rngs).zip(&mut hit) {
            let cur = *node as usize;
            let u: f64 = rng.random();
            let cum = &cumulative[cur];
            let k = cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1);
            if k > 0 {
                let j = k - 1;
                *hit |= escapes(cur, j);
                *node = lattice.neighbor(cur, j) as u32;
            }
        }
    }
    let hits = hit.iter().filter(|h| **h).count();
    Ok((at.iter().map(|&n| lattice.x_of(n as usize)).collect(), hits))
}

/// Simulates the lattice chain under the stored policy from `(n0, start)` to `N`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_chain(
    model: &RegimeModel,
    lattice: &Lattice,
    grid: &ControlGrid,
    fields: &SolutionFields,
    n0: usize,
    start: usize,
    n_paths: usize,
    seed: u64,
) -> Result<McSummary> {
    let (samples, hits) =
        simulate_chain_paths(model, lattice, grid, fields, n0, start, n_paths, seed)?;
    Ok(McSummary::from_samples(
        &samples,
        hits,
        model.risk_aversion,
        model.objective_convention,
    ))
}

/// Simulated versus exact mean of the full belief vector at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginalReport {
    pub t: f64,
    pub n_paths: usize,
    /// `exp(Q^T t)` applied to the initial full belief.
    pub target: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub max_deviation: f64,
    /// Largest `|mean - target| / (3 se)` over components; at most 1 passes.
    pub ratio: f64,
}

impl MarginalReport {
    pub fn passed(&self) -> bool {
        self.ratio <= 1.0
    }
}

/// `exp(Q^T t) p0`
pub fn forward_marginal(model: &RegimeModel, p0: &[f64], t: f64) -> Vec<f64> {
    let m = model.regimes;
    let qt = DMatrix::from_fn(m, m, |i, j| model.generator[j][i] * t);
    (qt.exp() * DVector::from_column_slice(p0))
        .iter()
        .copied()
        .collect()
}

/// Simulates the filter alone at constant attention `pi` with step `h`.
#[allow(clippy::too_many_arguments)]
pub fn marginal_check(
    model: &RegimeModel,
    b0: &Belief,
    pi: f64,
    t: f64,
    n_paths: usize,
    seed: u64,
    h: f64,
) -> Result<MarginalReport> {
    model.check_attention(pi)?;
    if !(t > 0.0 && t <= model.horizon) || n_paths < 2 || !(h > 0.0) {
        return Err(Error::Domain(format!(
            "marginal check needs 0 < t <= T, n_paths >= 2, h > 0; got t={t}"
        )));
    }
    let steps = (t / h).round().max(1.0) as usize;
    let sh = h.sqrt();
    let finals: Vec<SmallVec<[f64; 4]>> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = path_rng(seed, path);
            let mut b = b0.clone();
            for _ in 0..steps {
                let z: f64 = rng.sample(StandardNormal);
                b = filter_step(model, &b, pi, sh * z, h);
            }
            b.full()
        })
        .collect();
    let m = model.regimes;
    let n = n_paths as f64;
    let mut mean = vec![0.0; m];
    for f in &finals {
        for (a, v) in mean.iter_mut().zip(f) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= n);
    let mut var = vec![0.0; m];
    for f in &finals {
        for ((s, v), mu) in var.iter_mut().zip(f).zip(&mean) {
            *s += (v - mu).powi(2);
        }
    }
    let se: Vec<f64> = var.iter().map(|s| (s / n / n).sqrt()).collect();
    let target = forward_marginal(model, &b0.full(), steps as f64 * h);
    let mut max_deviation: f64 = 0.0;
    let mut ratio: f64 = 0.0;
    for i in 0..m {
        let dev = (mean[i] - target[i]).abs();
        max_deviation = max_deviation.max(dev);
        let r = if dev == 0.0 { 0.0 } else { dev / (3.0 * se[i]) };
        ratio = ratio.max(r);
    }
    Ok(MarginalReport {
        t: steps as f64 * h,
        n_paths,
        target,
        mean,
        se,
        max_deviation,
        ratio,
    })
}
