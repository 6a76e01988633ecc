//! Locally consistent one-step transition stencil for the wealth/belief chain.
//!
//! With `r = h2 / h1^2`, filter loadings `v_i = phi^i (zeta(i) - zeta_bar)`,
//! `a_ik = pi v_i v_k` and filter drift `q_i`:
//!
//! ```text
//! p_x±      = r (sigma_bar^2 + 2 b_bar^± h1) / 2
//! p_phi_i±  = r ((a_ii - pi |v_i| sum_{k≠i} |v_k|) / 2 + q_i^± h1)
//! p_±(ei+ek) = r a_ik^+ / 2,   p_±(ei-ek) = r a_ik^- / 2      (i < k)
//! p_stay    = 1 - sum of the above
//! ```
//!
//! The stay probability also has a closed form; the difference between the
//! two is kept as [`TransitionStencil::defect`].

use serde::Serialize;
use smallvec::SmallVec;

use crate::error::{Result, SchemeError};
use crate::filter::{filter_drift, filter_loadings, full_belief, Belief};
use crate::lattice::{Lattice, Offset};
use crate::market::{CoefficientPiece, ControlPoint, Coords, RegimeModel};

/// Probabilities in canonical offset order, without the stay entry.
pub type Moves = SmallVec<[f64; 16]>;

/// One-step transition probabilities from a node under a fixed control.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionStencil {
    pub p_stay: f64,
    /// `[+h1, -h1]` in wealth.
    pub p_x: [f64; 2],
    /// `[+h1, -h1]` per belief coordinate.
    pub p_phi: SmallVec<[[f64; 2]; 4]>,
    /// Per pair `i < k`: `[+(ei+ek), -(ei+ek), +(ei-ek), -(ei-ek)]`.
    ///
    /// The two ordered pairs `(i, k)` and `(k, i)` reach the same nodes, so
    /// their weights are stored together.
    pub p_cross: SmallVec<[[f64; 4]; 6]>,
    /// Closed-form stay probability minus `p_stay`.
    pub defect: f64,
}

impl TransitionStencil {
    /// Probabilities of all moves except staying, in canonical offset order.
    pub fn moves(&self) -> Moves {
        self.iter_moves().collect()
    }

    #[inline]
    pub fn iter_moves(&self) -> impl Iterator<Item = f64> + '_ {
        self.p_x
            .iter()
            .chain(self.p_phi.iter().flatten())
            .chain(self.p_cross.iter().flatten())
            .copied()
    }

    pub fn total_mass(&self) -> f64 {
        self.p_stay + self.iter_moves().sum::<f64>()
    }

    /// Mean and covariance of the nominal displacement `(dx, dphi)`.
    ///
    /// Computed on the unclamped displacements, i.e. ignoring the boundary
    /// projection of the lattice.
    pub fn moments(&self, h1: f64) -> (Coords, Vec<f64>) {
        let m = self.p_phi.len() + 1;
        let offsets = crate::lattice::canonical_offsets(m);
        let mut mean: Coords = smallvec::smallvec![0.0; m];
        let mut second = vec![0.0; m * m];
        for (p, off) in self.moves().iter().zip(&offsets) {
            let d = off.displacement(m);
            for a in 0..m {
                let da = d[a] as f64 * h1;
                mean[a] += p * da;
                for b in 0..m {
                    second[a * m + b] += p * da * d[b] as f64 * h1;
                }
            }
        }
        for a in 0..m {
            for b in 0..m {
                second[a * m + b] -= mean[a] * mean[b];
            }
        }
        (mean, second)
    }

    pub fn entries(&self) -> Vec<(Offset, f64)> {
        let m = self.p_phi.len() + 1;
        crate::lattice::canonical_offsets(m)
            .into_iter()
            .zip(self.moves())
            .collect()
    }
}

/// Control-independent aggregates at one `(t, x, phi)`.
#[derive(Debug, Clone)]
pub struct LocalTerms {
    pub x: f64,
    /// `sum_i phi^i r(t, i) x`
    pub rate_x: f64,
    /// `sum_i phi^i theta(t, i)`
    pub theta: Coords,
    /// `sum_i phi^i sigma(t, i)`, row-major `d x d`.
    pub sigma: SmallVec<[f64; 16]>,
    pub filter_drift: Coords,
    /// `phi^i (zeta(i) - zeta_bar)`
    pub loadings: Coords,
    pub cost_coeff: f64,
}

impl LocalTerms {
    pub fn new(model: &RegimeModel, piece: &CoefficientPiece, x: f64, b: &Belief) -> Self {
        let d = model.assets;
        let full = full_belief(b);
        let mut theta: Coords = smallvec::smallvec![0.0; d];
        let mut sigma: SmallVec<[f64; 16]> = smallvec::smallvec![0.0; d * d];
        let mut rate = 0.0;
        for (i, &p) in full.iter().enumerate() {
            rate += p * piece.riskfree[i];
            for (t, th) in theta.iter_mut().zip(piece.theta(i)) {
                *t += p * th;
            }
            for (r, row) in piece.vol[i].iter().enumerate() {
                for (c, s) in row.iter().enumerate() {
                    sigma[r * d + c] += p * s;
                }
            }
        }
        Self {
            x,
            rate_x: rate * x,
            theta,
            sigma,
            filter_drift: filter_drift(model, b),
            loadings: filter_loadings(model, b),
            cost_coeff: model.cost_coeff,
        }
    }

    #[inline]
    pub fn drift(&self, c: &ControlPoint) -> f64 {
        let invest: f64 = self.theta.iter().zip(&c.u).map(|(t, u)| t * u).sum();
        self.rate_x + invest - self.cost_coeff * c.pi * c.pi * self.x
    }

    #[inline]
    pub fn diffusion_sq(&self, u: &[f64]) -> f64 {
        let d = u.len();
        (0..d)
            .map(|j| {
                let row: f64 = (0..d).map(|l| u[l] * self.sigma[l * d + j]).sum();
                row * row
            })
            .sum()
    }

    pub fn stencil(
        &self,
        h1: f64,
        h2: f64,
        c: &ControlPoint,
    ) -> std::result::Result<TransitionStencil, Invalid> {
        build_stencil(
            h1,
            h2,
            self.drift(c),
            self.diffusion_sq(&c.u),
            &self.filter_drift,
            &self.loadings,
            c.pi,
        )
    }
}

/// An invalid stencil entry, before node and control are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Invalid {
    pub entry: String,
    pub value: f64,
    pub h2_shrink: Option<f64>,
}

impl Invalid {
    pub fn at(self, slice: Option<usize>, node: usize, control: &ControlPoint) -> SchemeError {
        SchemeError {
            slice,
            node,
            control: control.clone(),
            entry: self.entry,
            value: self.value,
            h2_shrink: self.h2_shrink,
        }
    }
}

#[inline]
fn pos(v: f64) -> f64 {
    v.max(0.0)
}

#[inline]
fn neg(v: f64) -> f64 {
    (-v).max(0.0)
}

/// Builds the stencil from aggregated coefficients.
#[inline]
pub fn build_stencil(
    h1: f64,
    h2: f64,
    drift: f64,
    diffusion_sq: f64,
    filter_drift: &[f64],
    loadings: &[f64],
    pi: f64,
) -> std::result::Result<TransitionStencil, Invalid> {
    let r = h2 / (h1 * h1);
    let n = loadings.len();
    let p_x = [
        r * (diffusion_sq + 2.0 * pos(drift) * h1) / 2.0,
        r * (diffusion_sq + 2.0 * neg(drift) * h1) / 2.0,
    ];
    let abs_sum: f64 = loadings.iter().map(|v| v.abs()).sum();
    let mut p_phi = SmallVec::<[[f64; 2]; 4]>::with_capacity(n);
    for i in 0..n {
        let v = loadings[i];
        let diag = pi * v * v - pi * v.abs() * (abs_sum - v.abs());
        let q = filter_drift[i];
        p_phi.push([
            r * (diag / 2.0 + pos(q) * h1),
            r * (diag / 2.0 + neg(q) * h1),
        ]);
    }
    let mut p_cross = SmallVec::<[[f64; 4]; 6]>::new();
    for i in 0..n {
        for k in i + 1..n {
            let a = pi * loadings[i] * loadings[k];
            let s = r * pos(a) / 2.0;
            let d = r * neg(a) / 2.0;
            p_cross.push([s, s, d, d]);
        }
    }

    let valid = |p: f64| (0.0..=1.0).contains(&p);
    let mut moved = p_x[0] + p_x[1];
    let mut ok = valid(p_x[0]) && valid(p_x[1]);
    for p in &p_phi {
        moved += p[0] + p[1];
        ok &= valid(p[0]) && valid(p[1]);
    }
    for p in &p_cross {
        moved += p[0] + p[1] + p[2] + p[3];
        ok &= p.iter().all(|&v| valid(v));
    }
    let p_stay = 1.0 - moved;

    let sq_sum: f64 = loadings.iter().map(|v| v * v).sum();
    let q_abs: f64 = filter_drift.iter().map(|q| q.abs()).sum();
    let closed = 1.0 + r / 2.0 * pi * (abs_sum * abs_sum - 3.0 * sq_sum)
        - r * ((drift.abs() + q_abs) * h1 + diffusion_sq);
    let stencil = TransitionStencil {
        p_stay,
        p_x,
        p_phi,
        p_cross,
        defect: closed - p_stay,
    };

    if !ok {
        let (j, p) = stencil
            .iter_moves()
            .enumerate()
            .find(|(_, p)| !valid(*p))
            .expect("an invalid entry exists");
        let label = crate::lattice::canonical_offsets(n + 1)[j].label();
        return Err(Invalid {
            entry: label,
            value: p,
            h2_shrink: None,
        });
    }
    if !(p_stay >= 0.0) {
        return Err(Invalid {
            entry: "stay".into(),
            value: p_stay,
            h2_shrink: Some(1.0 / moved),
        });
    }
    if stencil.defect.abs() > 1e-12 {
        log::trace!("stencil mass defect {:e}", stencil.defect);
    }
    Ok(stencil)
}

/// Belief-averaged wealth drift `sum_i phi^i [r x + theta^T u - k pi^2 x]`.
pub fn drift_bar(model: &RegimeModel, t: f64, x: f64, b: &Belief, c: &ControlPoint) -> f64 {
    let piece = model.piece_at(t);
    let cost = model.cost_coeff * c.pi * c.pi * x;
    full_belief(b)
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let th: f64 = piece.theta(i).iter().zip(&c.u).map(|(a, u)| a * u).sum();
            p * (piece.riskfree[i] * x + th - cost)
        })
        .sum()
}

/// Squared norm of the belief-averaged wealth diffusion row `sum_i phi^i u^T sigma(t, i)`.
pub fn diffusion_bar_sq(model: &RegimeModel, t: f64, _x: f64, b: &Belief, c: &ControlPoint) -> f64 {
    let piece = model.piece_at(t);
    let d = model.assets;
    let mut row = vec![0.0; d];
    for (i, p) in full_belief(b).iter().enumerate() {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot += p * (0..d).map(|l| c.u[l] * piece.vol[i][l][j]).sum::<f64>();
        }
    }
    row.iter().map(|v| v * v).sum()
}

/// Stencil at lattice node `node` and time `t` under control `c`.
pub fn stencil(
    model: &RegimeModel,
    lattice: &Lattice,
    t: f64,
    node: usize,
    c: &ControlPoint,
) -> Result<TransitionStencil> {
    c.check(model)?;
    let (x, b) = lattice.state(node);
    let terms = LocalTerms::new(model, model.piece_at(t), x, &b);
    let spec = lattice.spec();
    terms
        .stencil(spec.h1, spec.h2, c)
        .map_err(|e| e.at(None, node, c).into())
}

/// Deviations of the stencil's one-step moments from the diffusion's.
#[derive(Debug, Clone, Serialize)]
pub struct LocalConsistency {
    /// Max abs deviation of the mean from `(b_bar, filter drift) h2`.
    pub mean_error: f64,
    /// Max abs deviation of the covariance from `diag(sigma_bar^2, pi v v^T) h2`.
    pub covariance_error: f64,
    /// `covariance_error / (h1 h2)`.
    pub constant: f64,
    pub mass_error: f64,
    pub defect: f64,
    /// Whether some move of this node is projected back by the boundary.
    pub clamped: bool,
}

pub fn check_local_consistency(
    model: &RegimeModel,
    lattice: &Lattice,
    t: f64,
    node: usize,
    c: &ControlPoint,
) -> Result<LocalConsistency> {
    let st = stencil(model, lattice, t, node, c)?;
    let (x, b) = lattice.state(node);
    let spec = lattice.spec();
    let m = lattice.regimes();
    let (mean, cov) = st.moments(spec.h1);

    let mut target_mean: Coords = smallvec::smallvec![drift_bar(model, t, x, &b, c) * spec.h2];
    target_mean.extend(filter_drift(model, &b).iter().map(|q| q * spec.h2));
    let loads = filter_loadings(model, &b);
    let mut target_cov = vec![0.0; m * m];
    target_cov[0] = diffusion_bar_sq(model, t, x, &b, c) * spec.h2;
    for i in 0..m - 1 {
        for k in 0..m - 1 {
            target_cov[(i + 1) * m + k + 1] = c.pi * loads[i] * loads[k] * spec.h2;
        }
    }
    let mean_error = mean
        .iter()
        .zip(&target_mean)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let covariance_error = cov
        .iter()
        .zip(&target_cov)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let moves = st.moves();
    let clamped = lattice
        .offsets()
        .iter()
        .enumerate()
        .zip(&moves)
        .any(|((j, off), p)| *p > 0.0 && !exact_move(lattice, node, j, off));
    Ok(LocalConsistency {
        mean_error,
        covariance_error,
        constant: covariance_error / (spec.h1 * spec.h2),
        mass_error: (st.total_mass() - 1.0).abs(),
        defect: st.defect,
        clamped,
    })
}

fn exact_move(lattice: &Lattice, node: usize, j: usize, off: &Offset) -> bool {
    let from = lattice.node(node);
    let to = lattice.node(lattice.neighbor(node, j));
    let d = off.displacement(lattice.regimes());
    to.ix as i64 - from.ix as i64 == d[0]
        && from
            .iphi
            .iter()
            .zip(&to.iphi)
            .zip(&d[1..])
            .all(|((a, b), dv)| *b as i64 - *a as i64 == *dv)
}
