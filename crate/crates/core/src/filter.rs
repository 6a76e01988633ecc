//! Wonham filter quantities on the belief simplex.
//!
//! A [`Belief`] stores the first `m - 1` posterior probabilities; the last one
//! is implied. All functions here take the model for `Q` and `zeta` and assume
//! the belief has `m - 1` coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{Coords, RegimeModel};

const SIMPLEX_TOL: f64 = 1e-12;

/// A point of the simplex `{phi : phi_i >= 0, sum phi_i <= 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Belief {
    phi: Coords,
}

impl Belief {
    pub fn new(phi: impl AsRef<[f64]>) -> Result<Self> {
        let phi = Coords::from_slice(phi.as_ref());
        if phi.is_empty() {
            return Err(Error::Domain("belief needs at least one coordinate".into()));
        }
        if let Some(i) = phi.iter().position(|p| !(*p >= -SIMPLEX_TOL)) {
            return Err(Error::Domain(format!(
                "belief coordinate {i} = {} is negative",
                phi[i]
            )));
        }
        let s: f64 = phi.iter().sum();
        if !(s <= 1.0 + SIMPLEX_TOL) {
            return Err(Error::Domain(format!("belief coordinates sum to {s} > 1")));
        }
        Ok(Self { phi })
    }

    /// Belief concentrated on `regime` (0-based) out of `m`.
    pub fn vertex(m: usize, regime: usize) -> Self {
        let mut phi: Coords = smallvec::smallvec![0.0; m - 1];
        if regime < m - 1 {
            phi[regime] = 1.0;
        }
        Self { phi }
    }

    /// Builds a belief from a full probability vector, dropping the last entry.
    pub fn from_full(p: &[f64]) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::Domain(
                "full belief needs at least two entries".into(),
            ));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("full belief sums to {s}")));
        }
        Self::new(Coords::from_slice(&p[..p.len() - 1]))
    }

    pub(crate) fn from_coords_unchecked(phi: Coords) -> Self {
        Self { phi }
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn regimes(&self) -> usize {
        self.phi.len() + 1
    }

    /// `(phi_1, ..., phi_{m-1}, 1 - sum phi_i)`.
    pub fn full(&self) -> Coords {
        full_belief(self)
    }
}

pub fn full_belief(b: &Belief) -> Coords {
    let mut out = b.phi.clone();
    let last = 1.0 - b.phi.iter().sum::<f64>();
    out.push(last.max(0.0));
    out
}

/// Belief-weighted mean signal level.
pub fn zeta_bar(model: &RegimeModel, b: &Belief) -> f64 {
    debug_assert_eq!(b.regimes(), model.regimes);
    full_belief(b)
        .iter()
        .zip(&model.signal_levels)
        .map(|(p, z)| p * z)
        .sum()
}

/// Filter drift `sum_j q^{ji} phi^j` for the first `m - 1` coordinates.
pub fn filter_drift(model: &RegimeModel, b: &Belief) -> Coords {
    let full = full_belief(b);
    (0..model.regimes - 1)
        .map(|i| {
            full.iter()
                .enumerate()
                .map(|(j, p)| model.rate(j, i) * p)
                .sum()
        })
        .collect()
}

/// `phi^i (zeta(i) - zeta_bar)`, the filter diffusion per unit `sqrt(pi)`.
pub(crate) fn filter_loadings(model: &RegimeModel, b: &Belief) -> Coords {
    let zb = zeta_bar(model, b);
    b.phi
        .iter()
        .zip(&model.signal_levels)
        .map(|(p, z)| p * (z - zb))
        .collect()
}

/// Filter diffusion `sqrt(pi) phi^i (zeta(i) - zeta_bar)`.
pub fn filter_diffusion(model: &RegimeModel, b: &Belief, pi: f64) -> Result<Coords> {
    model.check_attention(pi)?;
    let s = pi.sqrt();
    Ok(filter_loadings(model, b)
        .into_iter()
        .map(|v| s * v)
        .collect())
}

/// One Euler step of the filter driven by the innovation increment `dw`.
///
/// Excursions off the simplex are clamped to `[0, 1]` componentwise on the
/// full `m`-vector, which is then rescaled to sum to one.
pub fn filter_step(model: &RegimeModel, b: &Belief, pi: f64, dw: f64, h: f64) -> Belief {
    let drift = filter_drift(model, b);
    let s = pi.sqrt();
    let loads = filter_loadings(model, b);
    let mut next: Coords = b
        .phi
        .iter()
        .zip(drift.iter().zip(&loads))
        .map(|(p, (d, v))| p + d * h + s * v * dw)
        .collect();
    project(&mut next);
    Belief { phi: next }
}

fn project(phi: &mut Coords) {
    let last = 1.0 - phi.iter().sum::<f64>();
    let inside = phi.iter().all(|p| (0.0..=1.0).contains(p)) && (0.0..=1.0).contains(&last);
    if inside {
        return;
    }
    let clamped_last = last.clamp(0.0, 1.0);
    for p in phi.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    let total = phi.iter().sum::<f64>() + clamped_last;
    for p in phi.iter_mut() {
        *p /= total;
    }
}
