use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::market::{ControlPoint, Violation};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid model: {}", join_violations(.0))]
    InvalidModel(Vec<Violation>),

    #[error("grid invariant violated: {0}")]
    Grid(String),

    #[error(transparent)]
    Scheme(Box<SchemeError>),
}

impl From<SchemeError> for Error {
    fn from(e: SchemeError) -> Self {
        Error::Scheme(Box::new(e))
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// A transition stencil entry fell outside `[0, 1]`.
///
/// `h2_shrink` is the largest factor by which the time step may be multiplied
/// to restore a valid stencil. It is `None` when the offending entry is an
/// off-diagonal probability, which no time-step reduction can repair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeError {
    pub slice: Option<usize>,
    pub node: usize,
    pub control: ControlPoint,
    pub entry: String,
    pub value: f64,
    pub h2_shrink: Option<f64>,
}

impl fmt::Display for SchemeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "CFL violation: stencil entry {} = {:e}",
            self.entry, self.value
        )?;
        write!(f, " at node {}", self.node)?;
        if let Some(n) = self.slice {
            write!(f, ", slice {n}")?;
        }
        write!(
            f,
            ", control u={:?} pi={}",
            self.control.u.as_slice(),
            self.control.pi
        )?;
        match self.h2_shrink {
            Some(s) => write!(f, "; shrink h2 by a factor of at least {:.6}", 1.0 / s),
            None => write!(f, "; not repairable by reducing h2"),
        }
    }
}

impl std::error::Error for SchemeError {}
