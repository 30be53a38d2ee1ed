//! End-to-end estimation with unknown ranks: choose mu, read off ranks,
//! refit at eta = 1, choose eta, refit, and optionally attach standard errors.

use crate::error::{Error, Result};
use crate::inference::{build_weights, VarianceMap};
use crate::linalg::Mat;
use crate::loss::LossSpec;
use crate::model::{FactorModel, MaskedData, ParamPair};
use crate::oracle::{fit_known_rank, FitReport};
use crate::tuning::{default_mu_grid, select_eta, select_mu, EtaSelection, MuSelection, TuningConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum MuPolicy {
    /// Log grid anchored on the spectral start.
    DefaultGrid,
    Grid(Vec<f64>),
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaPolicy {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub tuning: TuningConfig,
    pub mu: MuPolicy,
    pub eta: EtaPolicy,
    /// Compute per-cell variances of the final fit.
    pub inference: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tuning: TuningConfig::default(),
            mu: MuPolicy::DefaultGrid,
            eta: EtaPolicy::Auto,
            inference: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Variances {
    pub v_theta: Mat,
    pub v_m: Mat,
}

impl Variances {
    /// Standard error of an M entry: sqrt(V / (n1 + n2)).
    pub fn se_m(&self, i: usize, j: usize) -> f64 {
        let n = (self.v_m.nrows() + self.v_m.ncols()) as f64;
        (self.v_m[(i, j)] / n).sqrt()
    }

    pub fn se_theta(&self, i: usize, j: usize) -> f64 {
        let n = (self.v_theta.nrows() + self.v_theta.ncols()) as f64;
        (self.v_theta[(i, j)] / n).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct AutoFit {
    pub selection: MuSelection,
    /// How eta was chosen; `None` when fixed by the caller.
    pub eta_selection: Option<EtaSelection>,
    pub eta: f64,
    pub model: FactorModel,
    pub estimate: ParamPair,
    pub report: FitReport,
    pub variances: Option<Variances>,
    /// Why variances were not computed, when requested.
    pub inference_note: Option<String>,
}

impl AutoFit {
    /// The eta = 1 refit (the unweighted shared-factor estimate).
    pub fn unit_eta_model(&self) -> &FactorModel {
        &self.selection.refit
    }
}

/// Refit at known ranks and a given eta, starting from `start`.
pub fn refit_at_eta(
    data: &MaskedData,
    start: &FactorModel,
    loss: &LossSpec,
    tuning: &TuningConfig,
    eta: f64,
) -> Result<(FactorModel, FitReport)> {
    let mut fc = tuning.fit;
    fc.eta = eta;
    fit_known_rank(data, start.ranks, loss, &fc, Some(start))
}

pub fn fit_auto(data: &MaskedData, loss: &LossSpec, cfg: &PipelineConfig) -> Result<AutoFit> {
    if data.n1() == 0 || data.n2() == 0 {
        return Err(Error::InvalidInput("empty data".into()));
    }
    if data.n_obs() == 0 {
        return Err(Error::InvalidInput("no observed entries".into()));
    }
    let grid = match &cfg.mu {
        MuPolicy::DefaultGrid => default_mu_grid(data, &cfg.tuning),
        MuPolicy::Grid(g) => g.clone(),
        MuPolicy::Fixed(m) => vec![*m],
    };
    let selection = select_mu(data, loss, &grid, &cfg.tuning)?;
    let (eta_selection, eta) = match cfg.eta {
        EtaPolicy::Fixed(e) => {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::InvalidInput(format!("eta must be positive, got {e}")));
            }
            (None, e)
        }
        EtaPolicy::Auto => {
            let sel = select_eta(data, &selection.refit, loss, 1.0)?;
            (Some(sel), sel.eta_hat)
        }
    };
    let (model, report) = if eta == 1.0 {
        (selection.refit.clone(), selection.refit_report.clone())
    } else {
        refit_at_eta(data, &selection.refit, loss, &cfg.tuning, eta)?
    };
    let estimate = model.assemble()?;
    let (variances, inference_note) = if cfg.inference {
        match variances(data, &model, loss, eta) {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };
    Ok(AutoFit {
        selection,
        eta_selection,
        eta,
        model,
        estimate,
        report,
        variances,
        inference_note,
    })
}

/// Per-cell variances of a fitted model.
pub fn variances(data: &MaskedData, fm: &FactorModel, loss: &LossSpec, eta: f64) -> Result<Variances> {
    let w = build_weights(data, fm, loss, eta)?;
    let (v_theta, v_m) = VarianceMap::new(&w, fm)?.all();
    Ok(Variances { v_theta, v_m })
}
