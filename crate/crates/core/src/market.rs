//! Market, signal and information-cost parameters of the hidden regime model.
//!
//! Coefficients `r`, `mu` and `sigma` may depend on time through a table of
//! pieces keyed by their start time; each piece holds per-regime values that
//! apply until the next piece starts.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Small inline vector used for per-asset and per-regime quantities.
pub type Coords = SmallVec<[f64; 4]>;

const ROW_SUM_TOL: f64 = 1e-10;
const TIME_TOL: f64 = 1e-9;

/// How the Monte-Carlo oracle folds mean and variance of terminal wealth into
/// one scalar. The backward recursion never reads this.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveConvention {
    /// `Var[X_T] - (gamma/2) E[X_T]`, to be minimized.
    #[default]
    PaperLiteral,
    /// `E[X_T] - (gamma/2) Var[X_T]`, to be maximized.
    MeanMinusVariance,
}

impl ObjectiveConvention {
    pub fn compose(self, mean: f64, variance: f64, risk_aversion: f64) -> f64 {
        match self {
            Self::PaperLiteral => variance - 0.5 * risk_aversion * mean,
            Self::MeanMinusVariance => mean - 0.5 * risk_aversion * variance,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PaperLiteral => "paper-literal",
            Self::MeanMinusVariance => "mean-minus-variance",
        }
    }
}

impl fmt::Display for ObjectiveConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveConvention {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "paper-literal" => Ok(Self::PaperLiteral),
            "mean-minus-variance" => Ok(Self::MeanMinusVariance),
            other => Err(format!(
                "unknown convention '{other}' (expected paper-literal or mean-minus-variance)"
            )),
        }
    }
}

/// Coefficients in force from `start` until the next piece begins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientPiece {
    pub start: f64,
    /// `r(., i)` per regime.
    pub riskfree: Vec<f64>,
    /// `mu_l(., i)` indexed `[regime][asset]`.
    pub drift: Vec<Vec<f64>>,
    /// `sigma_lj(., i)` indexed `[regime][row][col]`.
    pub vol: Vec<Vec<Vec<f64>>>,
}

/// All market, signal and cost parameters.
///
/// Regimes are indexed from 0 in this API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeModel {
    pub regimes: usize,
    pub assets: usize,
    pub horizon: f64,
    /// Generator `Q`, row `i` holding the jump rates out of regime `i`.
    pub generator: Vec<Vec<f64>>,
    /// Mean signal level `zeta(i)` per regime.
    pub signal_levels: Vec<f64>,
    /// `k` in the per-unit-of-wealth cost `K(pi) = k pi^2`.
    pub cost_coeff: f64,
    pub attention_min: f64,
    pub attention_max: f64,
    pub risk_aversion: f64,
    #[serde(default)]
    pub objective_convention: ObjectiveConvention,
    pub coefficients: Vec<CoefficientPiece>,
}

/// Investment amounts and attention level applied over one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    /// Dollar amount held in each risky asset.
    pub u: Coords,
    /// Attention, in inverse-variance units of the aggregated signal.
    pub pi: f64,
}

impl ControlPoint {
    pub fn new(u: impl AsRef<[f64]>, pi: f64) -> Self {
        Self {
            u: Coords::from_slice(u.as_ref()),
            pi,
        }
    }

    /// Checks `u >= 0` componentwise and `pi` within the model's attention bounds.
    pub fn check(&self, model: &RegimeModel) -> Result<()> {
        if self.u.len() != model.assets {
            return Err(Error::Domain(format!(
                "control has {} asset positions, model has {} assets",
                self.u.len(),
                model.assets
            )));
        }
        if let Some(l) = self.u.iter().position(|&u| !(u >= 0.0)) {
            return Err(Error::Domain(format!(
                "negative position u[{l}] = {}",
                self.u[l]
            )));
        }
        model.check_attention(self.pi)
    }
}

/// One violated model invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    TooFewRegimes {
        regimes: usize,
    },
    NoAssets,
    NonPositiveHorizon {
        horizon: f64,
    },
    Shape {
        field: String,
        expected: String,
        found: String,
    },
    NonFinite {
        field: String,
    },
    RowSum {
        row: usize,
        sum: f64,
    },
    NegativeRate {
        row: usize,
        col: usize,
        value: f64,
    },
    DegenerateDiffusion {
        piece: usize,
        regime: usize,
    },
    Breakpoint {
        piece: usize,
        start: f64,
    },
    AttentionBounds {
        min: f64,
        max: f64,
    },
    NegativeCost {
        value: f64,
    },
    RiskAversion {
        value: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TooFewRegimes { regimes } => write!(f, "need at least 2 regimes, got {regimes}"),
            Self::NoAssets => write!(f, "need at least 1 risky asset"),
            Self::NonPositiveHorizon { horizon } => write!(f, "horizon must be > 0, got {horizon}"),
            Self::Shape { field, expected, found } => {
                write!(f, "{field}: expected shape {expected}, found {found}")
            }
            Self::NonFinite { field } => write!(f, "{field}: non-finite value"),
            Self::RowSum { row, sum } => write!(f, "generator row {row}: row sum ≠ 0 ({sum})"),
            Self::NegativeRate { row, col, value } => {
                write!(f, "generator entry ({row}, {col}) = {value} is a negative jump rate")
            }
            Self::DegenerateDiffusion { piece, regime } => write!(
                f,
                "(A4) degenerate diffusion: vol·volᵀ not positive definite (piece {piece}, regime {regime})"
            ),
            Self::Breakpoint { piece, start } => write!(
                f,
                "coefficient piece {piece} starts at {start}; starts must begin at 0, increase, and stay below the horizon"
            ),
            Self::AttentionBounds { min, max } => {
                write!(f, "attention bounds need 0 < min <= max, got [{min}, {max}]")
            }
            Self::NegativeCost { value } => write!(f, "cost coefficient must be >= 0, got {value}"),
            Self::RiskAversion { value } => write!(f, "risk aversion must be > 0, got {value}"),
        }
    }
}

fn shape(
    field: impl Into<String>,
    expected: impl fmt::Display,
    found: impl fmt::Display,
) -> Violation {
    Violation::Shape {
        field: field.into(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

/// Returns every violated invariant of `model`; an empty list means the model is valid.
pub fn validate_model(model: &RegimeModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let m = model.regimes;
    let d = model.assets;
    if m < 2 {
        out.push(Violation::TooFewRegimes { regimes: m });
    }
    if d == 0 {
        out.push(Violation::NoAssets);
    }
    if !(model.horizon > 0.0) || !model.horizon.is_finite() {
        out.push(Violation::NonPositiveHorizon {
            horizon: model.horizon,
        });
    }
    if !(model.attention_min > 0.0 && model.attention_min <= model.attention_max)
        || !model.attention_max.is_finite()
    {
        out.push(Violation::AttentionBounds {
            min: model.attention_min,
            max: model.attention_max,
        });
    }
    if !(model.cost_coeff >= 0.0) || !model.cost_coeff.is_finite() {
        out.push(Violation::NegativeCost {
            value: model.cost_coeff,
        });
    }
    if !(model.risk_aversion > 0.0) || !model.risk_aversion.is_finite() {
        out.push(Violation::RiskAversion {
            value: model.risk_aversion,
        });
    }

    if model.generator.len() != m || model.generator.iter().any(|row| row.len() != m) {
        out.push(shape(
            "generator",
            format!("{m}x{m}"),
            describe_rows(&model.generator),
        ));
    } else {
        for (i, row) in model.generator.iter().enumerate() {
            if row.iter().any(|q| !q.is_finite()) {
                out.push(Violation::NonFinite {
                    field: format!("generator row {i}"),
                });
                continue;
            }
            let scale = row.iter().fold(1.0_f64, |a, q| a.max(q.abs()));
            let sum: f64 = row.iter().sum();
            if sum.abs() > ROW_SUM_TOL * scale {
                out.push(Violation::RowSum { row: i, sum });
            }
            for (j, &q) in row.iter().enumerate() {
                if i != j && q < 0.0 {
                    out.push(Violation::NegativeRate {
                        row: i,
                        col: j,
                        value: q,
                    });
                }
            }
        }
    }

    if model.signal_levels.len() != m {
        out.push(shape("signal_levels", m, model.signal_levels.len()));
    } else if model.signal_levels.iter().any(|z| !z.is_finite()) {
        out.push(Violation::NonFinite {
            field: "signal_levels".into(),
        });
    }

    if model.coefficients.is_empty() {
        out.push(shape("coefficients", "at least one piece", 0));
    }
    let mut last_start = f64::NEG_INFINITY;
    for (p, piece) in model.coefficients.iter().enumerate() {
        let first_ok = p > 0 || piece.start == 0.0;
        if !first_ok || !(piece.start > last_start) || !(piece.start < model.horizon) {
            out.push(Violation::Breakpoint {
                piece: p,
                start: piece.start,
            });
        }
        last_start = piece.start;

        if piece.riskfree.len() != m {
            out.push(shape(
                format!("coefficients[{p}].riskfree"),
                m,
                piece.riskfree.len(),
            ));
        } else if piece.riskfree.iter().any(|r| !r.is_finite()) {
            out.push(Violation::NonFinite {
                field: format!("coefficients[{p}].riskfree"),
            });
        }
        if piece.drift.len() != m || piece.drift.iter().any(|v| v.len() != d) {
            out.push(shape(
                format!("coefficients[{p}].drift"),
                format!("{m}x{d}"),
                describe_rows(&piece.drift),
            ));
        } else if piece.drift.iter().flatten().any(|v| !v.is_finite()) {
            out.push(Violation::NonFinite {
                field: format!("coefficients[{p}].drift"),
            });
        }
        if piece.vol.len() != m {
            out.push(shape(
                format!("coefficients[{p}].vol"),
                format!("{m} matrices"),
                piece.vol.len(),
            ));
            continue;
        }
        for (i, sigma) in piece.vol.iter().enumerate() {
            if sigma.len() != d || sigma.iter().any(|row| row.len() != d) {
                out.push(shape(
                    format!("coefficients[{p}].vol[{i}]"),
                    format!("{d}x{d}"),
                    describe_rows(sigma),
                ));
                continue;
            }
            if sigma.iter().flatten().any(|v| !v.is_finite()) {
                out.push(Violation::NonFinite {
                    field: format!("coefficients[{p}].vol[{i}]"),
                });
                continue;
            }
            let s = DMatrix::from_fn(d, d, |r, c| sigma[r][c]);
            let cov = &s * s.transpose();
            if cov.cholesky().is_none() {
                out.push(Violation::DegenerateDiffusion {
                    piece: p,
                    regime: i,
                });
            }
        }
    }
    out
}

fn describe_rows(rows: &[Vec<impl Sized>]) -> String {
    let lens: Vec<String> = rows.iter().map(|r| r.len().to_string()).collect();
    format!("{} rows of lengths [{}]", rows.len(), lens.join(", "))
}

impl RegimeModel {
    /// Validates and returns the model, or all violations as one error.
    pub fn validated(self) -> Result<Self> {
        let v = validate_model(&self);
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidModel(v))
        }
    }

    /// The illustrative two-regime, one-asset market shipped as the default.
    ///
    /// These coefficients are made up for demonstration; they do not reproduce
    /// any published calibration.
    pub fn illustrative() -> Self {
        Self {
            regimes: 2,
            assets: 1,
            horizon: 2.0,
            generator: vec![vec![-1.0, 1.0], vec![2.0, -2.0]],
            signal_levels: vec![1.0, -1.0],
            cost_coeff: 0.1,
            attention_min: 0.001,
            attention_max: 2.0,
            risk_aversion: 0.5,
            objective_convention: ObjectiveConvention::PaperLiteral,
            coefficients: vec![CoefficientPiece {
                start: 0.0,
                riskfree: vec![0.03, 0.03],
                drift: vec![vec![0.10], vec![0.02]],
                vol: vec![vec![vec![0.20]], vec![vec![0.30]]],
            }],
        }
    }

    /// Builds a random valid model with `m` regimes and `d` assets.
    ///
    /// Used to generate example configurations and property-test inputs.
    pub fn synthetic(m: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut generator = vec![vec![0.0; m]; m];
        for (i, row) in generator.iter_mut().enumerate() {
            let mut out = 0.0;
            for (j, q) in row.iter_mut().enumerate() {
                if i != j {
                    *q = rng.random_range(0.0..2.0);
                    out += *q;
                }
            }
            row[i] = -out;
        }
        let n_pieces = rng.random_range(1..=3usize);
        let horizon = rng.random_range(0.5..3.0);
        let coefficients = (0..n_pieces)
            .map(|p| {
                let start = horizon * p as f64 / n_pieces as f64;
                let riskfree: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..0.06)).collect();
                let drift = (0..m)
                    .map(|i| {
                        (0..d)
                            .map(|_| riskfree[i] + rng.random_range(-0.05..0.15))
                            .collect()
                    })
                    .collect();
                let vol = (0..m)
                    .map(|_| {
                        (0..d)
                            .map(|r| {
                                (0..d)
                                    .map(|c| match r.cmp(&c) {
                                        std::cmp::Ordering::Equal => rng.random_range(0.1..0.5),
                                        std::cmp::Ordering::Greater => {
                                            rng.random_range(-0.05..0.05)
                                        }
                                        std::cmp::Ordering::Less => 0.0,
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                CoefficientPiece {
                    start,
                    riskfree,
                    drift,
                    vol,
                }
            })
            .collect();
        let attention_min = rng.random_range(0.001..0.5);
        Self {
            regimes: m,
            assets: d,
            horizon,
            generator,
            signal_levels: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            cost_coeff: rng.random_range(0.0..1.0),
            attention_min,
            attention_max: attention_min + rng.random_range(0.0..3.0),
            risk_aversion: rng.random_range(0.1..2.0),
            objective_convention: ObjectiveConvention::PaperLiteral,
            coefficients,
        }
    }

    /// Same model with a different information-cost coefficient.
    pub fn with_cost_coeff(&self, k: f64) -> Self {
        Self {
            cost_coeff: k,
            ..self.clone()
        }
    }

    pub fn check_attention(&self, pi: f64) -> Result<()> {
        if pi >= self.attention_min && pi <= self.attention_max {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "attention {pi} outside [{}, {}]",
                self.attention_min, self.attention_max
            )))
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t >= -TIME_TOL && t <= self.horizon * (1.0 + TIME_TOL) + TIME_TOL {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )))
        }
    }

    fn check_regime(&self, regime: usize) -> Result<()> {
        if regime < self.regimes {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "regime {regime} out of range 0..{}",
                self.regimes
            )))
        }
    }

    /// Index of the coefficient piece in force at `t`.
    pub fn piece_index(&self, t: f64) -> usize {
        self.coefficients
            .iter()
            .rposition(|p| p.start <= t + TIME_TOL)
            .unwrap_or(0)
    }

    pub fn piece_at(&self, t: f64) -> &CoefficientPiece {
        &self.coefficients[self.piece_index(t)]
    }

    pub fn riskfree(&self, t: f64, regime: usize) -> Result<f64> {
        self.check_time(t)?;
        self.check_regime(regime)?;
        Ok(self.piece_at(t).riskfree[regime])
    }

    /// Excess return vector `mu(t, i) - r(t, i) 1`.
    pub fn theta(&self, t: f64, regime: usize) -> Result<Coords> {
        self.check_time(t)?;
        self.check_regime(regime)?;
        Ok(self.piece_at(t).theta(regime))
    }

    /// Total information cost rate `k pi^2 x`, signed with wealth.
    pub fn info_cost(&self, pi: f64, x: f64) -> Result<f64> {
        self.check_attention(pi)?;
        Ok(self.cost_coeff * pi * pi * x)
    }

    /// Transition rate `q^{ij}`.
    #[inline]
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.generator[i][j]
    }
}

impl CoefficientPiece {
    pub fn theta(&self, regime: usize) -> Coords {
        let r = self.riskfree[regime];
        self.drift[regime].iter().map(|mu| mu - r).collect()
    }
}
