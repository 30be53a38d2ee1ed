use std::fmt;

use thiserror::Error;

/// Coarse failure class, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Numerical,
    NonConvergence,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Input => 2,
            ErrorKind::Numerical => 3,
            ErrorKind::NonConvergence => 4,
        }
    }
}

/// Counts that Algorithm-style rank estimation could not reconcile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankCounts {
    pub d_hat: usize,
    pub count_m: usize,
    pub count_theta: usize,
}

impl fmt::Display for RankCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "d_hat={} count_m={} count_theta={}",
            self.d_hat, self.count_m, self.count_theta
        )
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {block}: expected {expected}, got {got}")]
    Dimension {
        block: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value at ({i}, {j}) in {what}")]
    NonFinite { what: &'static str, i: usize, j: usize },
    #[error("{which} is numerically rank deficient: sigma_{index} = {sigma:.3e}, sigma_max = {sigma_max:.3e}")]
    RankDeficient {
        which: &'static str,
        index: usize,
        sigma: f64,
        sigma_max: f64,
    },
    #[error("infeasible ranks ({d_s}, {d_m}, {d_theta}) for a {n1}x{n2} problem")]
    InfeasibleRanks {
        d_s: usize,
        d_m: usize,
        d_theta: usize,
        n1: usize,
        n2: usize,
    },
    #[error("inconsistent rank counts: {0}")]
    InconsistentRanks(RankCounts),
    #[error("prox undefined: gamma {gamma} must exceed step {step}")]
    ProxUndefined { gamma: f64, step: f64 },
    #[error("degenerate information matrix ({what}), condition number {cond:.3e}")]
    DegenerateInformation { what: String, cond: f64 },
    #[error("correction infeasible: denominator {0:.6e} is not positive")]
    CorrectionInfeasible(f64),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate (user, item) pairs: {0}")]
    Duplicates(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("experiment failed: {failed} of {total} replicates failed")]
    ExperimentFailed { failed: usize, total: usize },
    #[error("no usable mu on the grid: {0}")]
    NoUsableMu(String),
    #[error("did not converge: {0}")]
    NonConvergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Dimension { .. }
            | Error::InvalidInput(_)
            | Error::NonFinite { .. }
            | Error::InfeasibleRanks { .. }
            | Error::ProxUndefined { .. }
            | Error::DegenerateDesign(_)
            | Error::Parse { .. }
            | Error::Duplicates(_)
            | Error::OutOfRange(_)
            | Error::Io(_) => ErrorKind::Input,
            Error::RankDeficient { .. }
            | Error::InconsistentRanks(_)
            | Error::DegenerateInformation { .. }
            | Error::CorrectionInfeasible(_)
            | Error::Numerical(_)
            | Error::ExperimentFailed { .. }
            | Error::NoUsableMu(_) => ErrorKind::Numerical,
            Error::NonConvergence(_) => ErrorKind::NonConvergence,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind().exit_code()
    }

    /// Short stable identifier used in the machine-readable error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidInput(_) => "invalid_input",
            Error::NonFinite { .. } => "non_finite",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::InfeasibleRanks { .. } => "infeasible_ranks",
            Error::InconsistentRanks(_) => "inconsistent_ranks",
            Error::ProxUndefined { .. } => "prox_undefined",
            Error::DegenerateInformation { .. } => "degenerate_information",
            Error::CorrectionInfeasible(_) => "correction_infeasible",
            Error::Numerical(_) => "numerical",
            Error::DegenerateDesign(_) => "degenerate_design",
            Error::Parse { .. } => "parse",
            Error::Duplicates(_) => "duplicates",
            Error::OutOfRange(_) => "out_of_range",
            Error::ExperimentFailed { .. } => "experiment_failed",
            Error::NoUsableMu(_) => "no_usable_mu",
            Error::NonConvergence(_) => "non_convergence",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
