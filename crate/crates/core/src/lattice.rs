//! Discretization of the composite state `(x, phi)` and of time.
//!
//! Wealth and belief coordinates share the step `h1`. Nodes are enumerated in
//! lexicographic order of `(ix, iphi_1, ..., iphi_{m-1})`, so the flat index of
//! a node is `ix * simplex_len + s` where `s` is the simplex point's rank.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::filter::Belief;
use crate::market::Coords;

const INTEGER_TOL: f64 = 1e-9;

pub type SimplexIndex = SmallVec<[u32; 4]>;

/// Step sizes, wealth range and number of time steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h1: f64,
    pub h2: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub n_steps: usize,
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let n = r.round();
    if n >= 1.0 && (r - n).abs() <= INTEGER_TOL * n.max(1.0) {
        Some(n as usize)
    } else {
        None
    }
}

impl GridSpec {
    /// Builds a grid for horizon `horizon`, deriving `n_steps = horizon / h2`.
    pub fn new(h1: f64, h2: f64, x_min: f64, x_max: f64, horizon: f64) -> Result<Self> {
        if !(h1 > 0.0 && h1.is_finite()) || !(h2 > 0.0 && h2.is_finite()) {
            return Err(Error::Grid(format!(
                "steps must be positive, got h1={h1}, h2={h2}"
            )));
        }
        let n_steps = integer_ratio(horizon, h2).ok_or_else(|| {
            Error::Grid(format!("horizon {horizon} is not a multiple of h2={h2}"))
        })?;
        let spec = Self {
            h1,
            h2,
            x_min,
            x_max,
            n_steps,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.h1 > 0.0) || !(self.h2 > 0.0) {
            return Err(Error::Grid(format!(
                "steps must be positive, got h1={}, h2={}",
                self.h1, self.h2
            )));
        }
        if !(self.x_min < self.x_max) {
            return Err(Error::Grid(format!(
                "x_min={} must be below x_max={}",
                self.x_min, self.x_max
            )));
        }
        if integer_ratio(self.x_max - self.x_min, self.h1).is_none() {
            return Err(Error::Grid(format!(
                "(x_max - x_min)/h1 = {} is not an integer",
                (self.x_max - self.x_min) / self.h1
            )));
        }
        if integer_ratio(1.0, self.h1).is_none() {
            return Err(Error::Grid(format!(
                "1/h1 = {} is not an integer",
                1.0 / self.h1
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::Grid("n_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.h2
    }

    pub fn x_levels(&self) -> usize {
        integer_ratio(self.x_max - self.x_min, self.h1).unwrap_or(0) + 1
    }

    /// Number of belief steps from 0 to 1, i.e. `1 / h1`.
    pub fn simplex_steps(&self) -> u32 {
        integer_ratio(1.0, self.h1).unwrap_or(0) as u32
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.h2
    }

    /// Slice index of time `t`, if `t` is a multiple of `h2` within the horizon.
    pub fn slice_of(&self, t: f64) -> Option<usize> {
        if t == 0.0 {
            return Some(0);
        }
        let n = integer_ratio(t, self.h2)?;
        (n <= self.n_steps).then_some(n)
    }

    pub fn x_at(&self, ix: usize) -> f64 {
        self.x_min + ix as f64 * self.h1
    }

    /// Index of `x` on the wealth grid, if it is a grid point.
    pub fn x_index(&self, x: f64) -> Option<usize> {
        let r = (x - self.x_min) / self.h1;
        let n = r.round();
        ((r - n).abs() <= INTEGER_TOL * n.abs().max(1.0)
            && n >= 0.0
            && (n as usize) < self.x_levels())
        .then_some(n as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    fn factor(self) -> i64 {
        match self {
            Sign::Plus => 1,
            Sign::Minus => -1,
        }
    }
}

/// Which diagonal a joint belief move follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CrossKind {
    /// `+-(e_i + e_k)`
    Sum,
    /// `+-(e_i - e_k)`
    Diff,
}

/// One stencil displacement, in units of `h1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Offset {
    Wealth(Sign),
    Belief {
        coord: usize,
        sign: Sign,
    },
    Cross {
        i: usize,
        k: usize,
        kind: CrossKind,
        sign: Sign,
    },
}

impl Offset {
    /// Displacement of `(ix, iphi_1, ..)` in grid units, `1 + (m - 1)` entries.
    pub fn displacement(&self, m: usize) -> SmallVec<[i64; 4]> {
        let mut d: SmallVec<[i64; 4]> = smallvec::smallvec![0; m];
        match *self {
            Offset::Wealth(s) => d[0] = s.factor(),
            Offset::Belief { coord, sign } => d[1 + coord] = sign.factor(),
            Offset::Cross { i, k, kind, sign } => {
                d[1 + i] = sign.factor();
                d[1 + k] = match kind {
                    CrossKind::Sum => sign.factor(),
                    CrossKind::Diff => -sign.factor(),
                };
            }
        }
        d
    }

    pub fn label(&self) -> String {
        let s = |s: Sign| if s == Sign::Plus { '+' } else { '-' };
        match *self {
            Offset::Wealth(sign) => format!("x{}", s(sign)),
            Offset::Belief { coord, sign } => format!("phi{}{}", coord + 1, s(sign)),
            Offset::Cross { i, k, kind, sign } => {
                let op = if kind == CrossKind::Sum { '+' } else { '-' };
                format!("{}(e{}{}e{})", s(sign), i + 1, op, k + 1)
            }
        }
    }
}

/// Stencil displacements in canonical order: wealth `+, -`; each belief
/// coordinate `+, -`; each pair `i < k` as `+(e_i+e_k), -(e_i+e_k), +(e_i-e_k), -(e_i-e_k)`.
pub fn canonical_offsets(m: usize) -> Vec<Offset> {
    let mut out = vec![Offset::Wealth(Sign::Plus), Offset::Wealth(Sign::Minus)];
    for coord in 0..m - 1 {
        out.push(Offset::Belief {
            coord,
            sign: Sign::Plus,
        });
        out.push(Offset::Belief {
            coord,
            sign: Sign::Minus,
        });
    }
    for i in 0..m - 1 {
        for k in i + 1..m - 1 {
            for kind in [CrossKind::Sum, CrossKind::Diff] {
                for sign in [Sign::Plus, Sign::Minus] {
                    out.push(Offset::Cross { i, k, kind, sign });
                }
            }
        }
    }
    out
}

/// Integer coordinates of one lattice node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeNode {
    pub ix: usize,
    pub iphi: SimplexIndex,
}

/// The enumerated lattice with precomputed clamped neighbors.
#[derive(Debug, Clone)]
pub struct Lattice {
    spec: GridSpec,
    regimes: usize,
    nx: usize,
    steps: u32,
    simplex: Vec<SimplexIndex>,
    /// Dense map from the base-(steps+1) code of a simplex point to its rank.
    lookup: Vec<u32>,
    offsets: Vec<Offset>,
    /// `neighbors[node * offsets.len() + j]`
    neighbors: Vec<u32>,
}

const NONE: u32 = u32::MAX;

impl Lattice {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn regimes(&self) -> usize {
        self.regimes
    }

    pub fn len(&self) -> usize {
        self.nx * self.simplex.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_levels(&self) -> usize {
        self.nx
    }

    pub fn simplex_len(&self) -> usize {
        self.simplex.len()
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    pub fn simplex_point(&self, s: usize) -> &SimplexIndex {
        &self.simplex[s]
    }

    pub fn node(&self, idx: usize) -> LatticeNode {
        let ns = self.simplex.len();
        LatticeNode {
            ix: idx / ns,
            iphi: self.simplex[idx % ns].clone(),
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = LatticeNode> + '_ {
        (0..self.len()).map(|i| self.node(i))
    }

    #[inline]
    pub fn ix_of(&self, idx: usize) -> usize {
        idx / self.simplex.len()
    }

    #[inline]
    pub fn simplex_rank_of(&self, idx: usize) -> usize {
        idx % self.simplex.len()
    }

    fn code(&self, iphi: &[i64]) -> Option<usize> {
        let base = self.steps as i64 + 1;
        let mut code = 0i64;
        let mut sum = 0i64;
        for &v in iphi {
            if v < 0 || v > self.steps as i64 {
                return None;
            }
            sum += v;
            code = code * base + v;
        }
        (sum <= self.steps as i64).then_some(code as usize)
    }

    /// Flat index of `node`, or `None` if it is off the grid.
    pub fn index_of(&self, node: &LatticeNode) -> Option<usize> {
        if node.ix >= self.nx || node.iphi.len() != self.regimes - 1 {
            return None;
        }
        let iphi: SmallVec<[i64; 4]> = node.iphi.iter().map(|&v| v as i64).collect();
        let s = self.lookup[self.code(&iphi)?];
        (s != NONE).then(|| node.ix * self.simplex.len() + s as usize)
    }

    /// Wealth and belief at node `idx`.
    pub fn state(&self, idx: usize) -> (f64, Belief) {
        let ix = self.ix_of(idx);
        let k = self.steps as f64;
        let phi: Coords = self.simplex[self.simplex_rank_of(idx)]
            .iter()
            .map(|&v| v as f64 / k)
            .collect();
        (self.spec.x_at(ix), Belief::from_coords_unchecked(phi))
    }

    #[inline]
    pub fn x_of(&self, idx: usize) -> f64 {
        self.spec.x_at(self.ix_of(idx))
    }

    /// Clamped neighbor of node `idx` along canonical offset `j`.
    #[inline]
    pub fn neighbor(&self, idx: usize, j: usize) -> usize {
        self.neighbors[idx * self.offsets.len() + j] as usize
    }

    /// All clamped neighbors of node `idx` in canonical offset order.
    #[inline]
    pub fn neighbors(&self, idx: usize) -> &[u32] {
        let w = self.offsets.len();
        &self.neighbors[idx * w..(idx + 1) * w]
    }

    /// Nearest node to an arbitrary state; wealth is clamped into the grid.
    pub fn nearest(&self, x: f64, phi: &[f64]) -> usize {
        let ix = ((x - self.spec.x_min) / self.spec.h1)
            .round()
            .clamp(0.0, (self.nx - 1) as f64) as usize;
        let k = self.steps as f64;
        let scaled: SmallVec<[f64; 4]> = phi.iter().map(|p| (p * k).clamp(0.0, k)).collect();
        let mut iphi: SmallVec<[i64; 4]> = scaled.iter().map(|v| v.round() as i64).collect();
        let mut excess = iphi.iter().sum::<i64>() - self.steps as i64;
        while excess > 0 {
            // drop the coordinate that was rounded up the most
            let j = (0..iphi.len())
                .filter(|&j| iphi[j] > 0)
                .max_by(|&a, &b| {
                    (iphi[a] as f64 - scaled[a])
                        .total_cmp(&(iphi[b] as f64 - scaled[b]))
                        .then(b.cmp(&a))
                })
                .expect("positive coordinate exists while sum exceeds steps");
            iphi[j] -= 1;
            excess -= 1;
        }
        let s = self.lookup[self.code(&iphi).expect("rounded point lies in the simplex")];
        ix * self.simplex.len() + s as usize
    }

    fn clamp_offset(&self, ix: usize, iphi: &SimplexIndex, off: &Offset) -> usize {
        let d = off.displacement(self.regimes);
        let nix = (ix as i64 + d[0]).clamp(0, self.nx as i64 - 1) as usize;
        let moved: SmallVec<[i64; 4]> = iphi
            .iter()
            .zip(&d[1..])
            .map(|(&v, &dv)| (v as i64 + dv).clamp(0, self.steps as i64))
            .collect();
        let s = match self.code(&moved) {
            Some(c) => self.lookup[c],
            None => {
                let orig: SmallVec<[i64; 4]> = iphi.iter().map(|&v| v as i64).collect();
                self.lookup[self.code(&orig).expect("node lies in the simplex")]
            }
        };
        nix * self.simplex.len() + s as usize
    }
}

/// Enumerates the lattice for `m` regimes.
pub fn build_grid(spec: GridSpec, m: usize) -> Result<Lattice> {
    spec.check()?;
    if m < 2 {
        return Err(Error::Grid(format!("need at least 2 regimes, got {m}")));
    }
    let steps = spec.simplex_steps();
    let dim = m - 1;
    let base = steps as usize + 1;
    let lookup_len = base
        .checked_pow(dim as u32)
        .filter(|&n| n <= 1 << 26)
        .ok_or_else(|| Error::Grid(format!("belief grid with {base}^{dim} cells is too large")))?;

    let mut simplex = Vec::new();
    let mut cur: SimplexIndex = smallvec::smallvec![0; dim];
    enumerate_simplex(&mut cur, 0, steps, &mut simplex);

    let mut lattice = Lattice {
        spec,
        regimes: m,
        nx: spec.x_levels(),
        steps,
        simplex,
        lookup: vec![NONE; lookup_len],
        offsets: canonical_offsets(m),
        neighbors: Vec::new(),
    };
    for (rank, p) in lattice.simplex.iter().enumerate() {
        let iphi: SmallVec<[i64; 4]> = p.iter().map(|&v| v as i64).collect();
        let c = lattice
            .code(&iphi)
            .expect("enumerated point lies in the simplex");
        lattice.lookup[c] = rank as u32;
    }
    let mut neighbors = Vec::with_capacity(lattice.len() * lattice.offsets.len());
    for idx in 0..lattice.len() {
        let node = lattice.node(idx);
        for off in &lattice.offsets {
            neighbors.push(lattice.clamp_offset(node.ix, &node.iphi, off) as u32);
        }
    }
    lattice.neighbors = neighbors;
    Ok(lattice)
}

fn enumerate_simplex(
    cur: &mut SimplexIndex,
    pos: usize,
    remaining: u32,
    out: &mut Vec<SimplexIndex>,
) {
    if pos == cur.len() {
        out.push(cur.clone());
        return;
    }
    for v in 0..=remaining {
        cur[pos] = v;
        enumerate_simplex(cur, pos + 1, remaining - v, out);
    }
    cur[pos] = 0;
}

/// State `(x, phi)` of `node`.
pub fn node_state(lattice: &Lattice, node: &LatticeNode) -> Result<(f64, Belief)> {
    let idx = lattice
        .index_of(node)
        .ok_or_else(|| Error::Domain(format!("node {node:?} is off the grid")))?;
    Ok(lattice.state(idx))
}

/// The node reached from `node` along `offset`, or the nearest in-grid node.
///
/// Wealth is clamped to `[x_min, x_max]`. Belief coordinates are clamped to
/// `[0, 1]`; if the result still leaves the simplex the belief part stays put.
pub fn clamp_neighbor(
    lattice: &Lattice,
    node: &LatticeNode,
    offset: Offset,
) -> Result<LatticeNode> {
    let idx = lattice
        .index_of(node)
        .ok_or_else(|| Error::Domain(format!("node {node:?} is off the grid")))?;
    let j = lattice
        .offsets
        .iter()
        .position(|o| *o == offset)
        .ok_or_else(|| Error::Domain(format!("{offset:?} is not a stencil displacement")))?;
    Ok(lattice.node(lattice.neighbor(idx, j)))
}
