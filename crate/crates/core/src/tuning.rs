//! Choice of the penalty level mu (information criterion) and of the weight
//! eta, plus the variance and dispersion estimators they rely on.

use crate::error::{Error, Result};
use crate::inference::{build_weights_any, loading_designs, minimize_amse};
use crate::linalg::{softplus, spd_inverse, top_svd, Mat};
use crate::loss::{BFamily, FitConfig, LossSpec};
use crate::mcp::{fit_mcp, McpConfig, McpFit};
use crate::model::{canonicalize_with, FactorModel, MaskedData, ParamPair, Ranks};
use crate::oracle::{fit_known_rank, thresholded_spectral_init, FitReport};
use crate::par::par_map;
use crate::ranks::{estimate_ranks_fit, RankEstimate};

pub const DEFAULT_IC_COEF: f64 = 0.125;

/// k_f = d_s (2 n1 + n2 - d_s) + (d_m + d_theta)(n1 + n2 - d_m - d_theta)
pub fn degrees_of_freedom(r: Ranks, n1: usize, n2: usize) -> i64 {
    let (ds, dm, dt) = (r.d_s as i64, r.d_m as i64, r.d_theta as i64);
    let (n1, n2) = (n1 as i64, n2 as i64);
    ds * (2 * n1 + n2 - ds) + (dm + dt) * (n1 + n2 - dm - dt)
}

pub fn ic_penalty(n1: usize, n2: usize, k_f: i64, coef: f64) -> f64 {
    coef * ((n1 * n2) as f64).ln() * k_f as f64
}

fn check_shapes(data: &MaskedData, p: &ParamPair) -> Result<()> {
    if p.m.shape() != data.x.shape() || p.theta.shape() != data.x.shape() {
        return Err(Error::Dimension {
            block: "estimate",
            expected: format!("{}x{}", data.n1(), data.n2()),
            got: format!("{}x{}", p.m.nrows(), p.m.ncols()),
        });
    }
    Ok(())
}

fn mask_term(data: &MaskedData, theta: &Mat) -> f64 {
    let mut q = 0.0;
    for j in 0..data.n2() {
        for i in 0..data.n1() {
            let t = theta[(i, j)];
            q += softplus(t) - data.w[(i, j)] * t;
        }
    }
    q
}

/// Negative Gaussian log-likelihood of the observed entries plus the mask
/// term, at scale `sigma`.
pub fn q_regression(data: &MaskedData, p: &ParamPair, sigma: f64) -> Result<f64> {
    check_shapes(data, p)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    let per_obs = sigma.ln() + 0.5 * ((2.0 * std::f64::consts::PI).ln() + 1.0);
    Ok(mask_term(data, &p.theta) + per_obs * data.n_obs() as f64)
}

/// Negative exponential-family log-likelihood of the observed entries plus
/// the mask term, at dispersion `phi`.
pub fn q_glm(data: &MaskedData, p: &ParamPair, fam: &BFamily, phi: f64) -> Result<f64> {
    check_shapes(data, p)?;
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::InvalidInput(format!("dispersion must be positive, got {phi}")));
    }
    let mut q = mask_term(data, &p.theta);
    for j in 0..data.n2() {
        for i in 0..data.n1() {
            if data.observed(i, j) {
                let (x, m) = (data.x[(i, j)], p.m[(i, j)]);
                q -= (x * m - (fam.b)(m)) / phi + (fam.log_c)(x, phi);
            }
        }
    }
    Ok(q)
}

#[derive(Debug, Clone)]
pub struct IcRecord {
    pub mu: f64,
    pub ranks: RankEstimate,
    pub q_value: f64,
    pub k_f: i64,
    pub ic_value: f64,
    /// sigma-hat (regression and Huber) or phi-hat (exponential family) used in Q.
    pub scale: f64,
}

/// Q at the estimate with the loss-appropriate scale: naive sigma-hat for
/// quadratic and Huber losses, phi-hat for exponential families. The scale is
/// floored at `floor` when positive.
fn q_for_loss(data: &MaskedData, p: &ParamPair, loss: &LossSpec, floor: f64) -> Result<(f64, f64)> {
    match loss {
        LossSpec::Quadratic | LossSpec::Huber(_) => {
            let s = sigma2_naive(data, &p.m)?.sqrt().max(floor);
            Ok((q_regression(data, p, s)?, s))
        }
        LossSpec::ExpFamily(fam) => {
            let phi = dispersion_hat(data, &p.m, fam)?.max(floor);
            Ok((q_glm(data, p, fam, phi)?, phi))
        }
    }
}

/// IC of a fitted pair at the given ranks.
pub fn ic_value(
    data: &MaskedData,
    p: &ParamPair,
    loss: &LossSpec,
    ranks: RankEstimate,
    mu: f64,
    coef: f64,
) -> Result<IcRecord> {
    let (q, scale) = q_for_loss(data, p, loss, 0.0)?;
    Ok(make_record(data, q, scale, ranks, mu, coef))
}

fn make_record(data: &MaskedData, q: f64, scale: f64, ranks: RankEstimate, mu: f64, coef: f64) -> IcRecord {
    let k_f = degrees_of_freedom(ranks.ranks(), data.n1(), data.n2());
    IcRecord {
        mu,
        q_value: q,
        k_f,
        ic_value: q + ic_penalty(data.n1(), data.n2(), k_f, coef),
        scale,
        ranks,
    }
}

#[derive(Debug, Clone)]
pub struct TuningConfig {
    pub gamma: f64,
    /// Rank cap of the penalized fit; `None` means floor(sqrt(min(n1, n2))).
    pub k: Option<usize>,
    pub ic_coef: f64,
    pub grid_points: usize,
    /// Grid ends as fractions of the top singular value of the start.
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub mcp_max_iter: usize,
    pub mcp_tol: f64,
    /// Sweep cap for the refits that only score a rank triple; the chosen
    /// refit is continued to convergence under `fit`.
    pub score_max_iter: usize,
    pub fit: FitConfig,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            gamma: 1.5,
            k: None,
            ic_coef: DEFAULT_IC_COEF,
            grid_points: 15,
            grid_lo: 0.05,
            grid_hi: 0.5,
            mcp_max_iter: 300,
            mcp_tol: 1e-5,
            score_max_iter: 200,
            fit: FitConfig::default(),
        }
    }
}

impl TuningConfig {
    pub fn mcp(&self, mu: f64) -> McpConfig {
        McpConfig {
            mu,
            gamma: self.gamma,
            k: self.k,
            eta: 1.0,
            max_iter: self.mcp_max_iter,
            tol: self.mcp_tol,
            step: None,
        }
    }

    fn rank_cap(&self, data: &MaskedData) -> usize {
        self.mcp(1.0).rank_cap(data.n1(), data.n2()).min(data.n1().min(data.n2()))
    }
}

/// Log-spaced mu values between `grid_lo` and `grid_hi` times the top
/// singular value of the thresholded spectral start.
pub fn default_mu_grid(data: &MaskedData, cfg: &TuningConfig) -> Vec<f64> {
    let init = thresholded_spectral_init(data, cfg.rank_cap(data));
    let s1 = top_svd(&init.stacked(), 1, None).s.iter().cloned().next().unwrap_or(0.0);
    let s1 = if s1 > 0.0 { s1 } else { 1.0 };
    log_grid(cfg.grid_lo * s1, cfg.grid_hi * s1, cfg.grid_points)
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|q| (a + (b - a) * q as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone)]
pub struct SkippedMu {
    pub mu: f64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct MuSelection {
    pub mu: f64,
    pub records: Vec<IcRecord>,
    pub skipped: Vec<SkippedMu>,
    /// Penalized fit at the chosen mu.
    pub fit: McpFit,
    pub ranks: RankEstimate,
    /// Known-rank refit (eta = 1) at the chosen ranks.
    pub refit: FactorModel,
    pub refit_report: FitReport,
}

/// Choose mu by the information criterion. Each mu is fitted from the same
/// thresholded spectral start; ranks are read off the penalized fit; each
/// distinct rank triple is refitted once at eta = 1 and scored. Mu values
/// whose rank counts are inconsistent are skipped. Ties go to the larger mu.
pub fn select_mu(data: &MaskedData, loss: &LossSpec, grid: &[f64], cfg: &TuningConfig) -> Result<MuSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty mu grid".into()));
    }
    loss.validate()?;
    let init = thresholded_spectral_init(data, cfg.rank_cap(data));
    let fits: Vec<Result<(McpFit, RankEstimate)>> = par_map(grid, |&mu| {
        let fit = fit_mcp(data, loss, &cfg.mcp(mu), Some(&init))?;
        let est = estimate_ranks_fit(&fit, mu * cfg.gamma)?;
        Ok((fit, est))
    });

    let mut skipped = Vec::new();
    let mut usable: Vec<(usize, McpFit, RankEstimate)> = Vec::new();
    for (g, r) in fits.into_iter().enumerate() {
        match r {
            Ok((fit, est)) => usable.push((g, fit, est)),
            Err(e) => skipped.push(SkippedMu {
                mu: grid[g],
                reason: e.to_string(),
            }),
        }
    }

    // One refit per distinct triple, started from the fit at the largest mu
    // that produced it.
    let mut triples: Vec<(Ranks, usize)> = Vec::new();
    for (idx, (g, _, est)) in usable.iter().enumerate() {
        let r = est.ranks();
        match triples.iter_mut().find(|(t, _)| *t == r) {
            Some(entry) => {
                if grid[*g] > grid[usable[entry.1].0] {
                    entry.1 = idx;
                }
            }
            None => triples.push((r, idx)),
        }
    }
    let scale_floor = scale_floor(data);
    let refits: Vec<Result<(FactorModel, FitReport, f64, f64)>> = par_map(&triples, |&(r, idx)| {
        let pair = &usable[idx].1.pair;
        let start = canonicalize_with(&pair.m, &pair.theta, r, false)?;
        let mut fc = cfg.fit;
        fc.eta = 1.0;
        fc.max_iter = fc.max_iter.min(cfg.score_max_iter);
        let (fm, rep) = fit_known_rank(data, r, loss, &fc, Some(&start))?;
        let (q, scale) = q_for_loss(data, &fm.assemble()?, loss, scale_floor)?;
        Ok((fm, rep, q, scale))
    });

    let mut records = Vec::new();
    let mut keep: Vec<(usize, usize)> = Vec::new(); // (usable index, triple index)
    for (idx, (g, _, est)) in usable.iter().enumerate() {
        let t = triples.iter().position(|(r, _)| *r == est.ranks()).unwrap();
        match &refits[t] {
            Ok((_, _, q, scale)) => {
                records.push(make_record(data, *q, *scale, est.clone(), grid[*g], cfg.ic_coef));
                keep.push((idx, t));
            }
            Err(e) => skipped.push(SkippedMu {
                mu: grid[*g],
                reason: format!("refit at {}: {e}", est.ranks()),
            }),
        }
    }
    if records.is_empty() {
        let list = skipped
            .iter()
            .map(|s| format!("mu={:.6e}: {}", s.mu, s.reason))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::NoUsableMu(list));
    }
    let mut best = 0;
    for k in 1..records.len() {
        let (a, b) = (records[k].ic_value, records[best].ic_value);
        let tie = (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        if a < b || (tie && records[k].mu > records[best].mu) {
            best = k;
        }
    }
    let (ui, ti) = keep[best];
    let (mut fm, mut rep, _, _) = refits[ti].as_ref().unwrap().clone();
    if !rep.converged && cfg.fit.max_iter > cfg.score_max_iter {
        let mut fc = cfg.fit;
        fc.eta = 1.0;
        let (f2, r2) = fit_known_rank(data, fm.ranks, loss, &fc, Some(&fm))?;
        fm = f2;
        rep = r2;
    }
    let (_, fit, est) = usable.swap_remove(ui);
    Ok(MuSelection {
        mu: records[best].mu,
        records,
        skipped,
        fit,
        ranks: est,
        refit: fm,
        refit_report: rep,
    })
}

/// Positive floor for the fitted scale so exactly fitted (for example
/// all-zero) data still gets a finite criterion.
fn scale_floor(data: &MaskedData) -> f64 {
    let mut amax: f64 = 0.0;
    for j in 0..data.n2() {
        for i in 0..data.n1() {
            if data.observed(i, j) {
                amax = amax.max(data.x[(i, j)].abs());
            }
        }
    }
    1e-8 * amax.max(1.0)
}

/// Observed mean squared residual.
pub fn sigma2_naive(data: &MaskedData, m_hat: &Mat) -> Result<f64> {
    Ok(rss(data, m_hat)? / n_obs_checked(data)?)
}

fn n_obs_checked(data: &MaskedData) -> Result<f64> {
    let n = data.n_obs();
    if n == 0 {
        return Err(Error::InvalidInput("no observed entries".into()));
    }
    Ok(n as f64)
}

fn rss(data: &MaskedData, m_hat: &Mat) -> Result<f64> {
    if m_hat.shape() != data.x.shape() {
        return Err(Error::Dimension {
            block: "m_hat",
            expected: format!("{}x{}", data.n1(), data.n2()),
            got: format!("{}x{}", m_hat.nrows(), m_hat.ncols()),
        });
    }
    let mut s = 0.0;
    for j in 0..data.n2() {
        for i in 0..data.n1() {
            if data.observed(i, j) {
                s += (data.x[(i, j)] - m_hat[(i, j)]).powi(2);
            }
        }
    }
    Ok(s)
}

/// Parts of the bias-corrected variance estimate.
#[derive(Debug, Clone, Copy)]
pub struct CorrectedVariance {
    pub sigma2_co: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub tr_upsilon: f64,
    pub tr_upsilon2: f64,
}

/// Bias-corrected residual variance for the quadratic loss, fitted at `eta`.
pub fn sigma2_corrected(data: &MaskedData, fm: &FactorModel, eta: f64) -> Result<f64> {
    Ok(sigma2_corrected_parts(data, fm, eta)?.sigma2_co)
}

pub fn sigma2_corrected_parts(data: &MaskedData, fm: &FactorModel, eta: f64) -> Result<CorrectedVariance> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidInput(format!("eta must be positive, got {eta}")));
    }
    fm.validate()?;
    let (n1, n2) = (data.n1(), data.n2());
    if fm.n1() != n1 || fm.n2() != n2 {
        return Err(Error::Dimension {
            block: "model",
            expected: format!("{n1}x{n2}"),
            got: format!("{}x{}", fm.n1(), fm.n2()),
        });
    }
    let n_obs = n_obs_checked(data)?;
    let pbar = n_obs / (n1 * n2) as f64;
    let (a_t, a_m) = loading_designs(fm);
    let u_t = a_t.tr_mul(&a_t) * (pbar * (1.0 - pbar));
    let u_m = a_m.tr_mul(&a_m) * (eta * pbar);
    let inv = spd_inverse(&(&u_t + &u_m), "Upsilon_theta + Upsilon_m")?;
    let ups = inv * u_m;
    let tr1 = ups.trace();
    let tr2 = (&ups * &ups).trace();
    let r = fm.ranks;
    let n2f = n2 as f64;
    let numerator = rss(data, &fm.assemble()?.m)? + n2f * (tr2 - tr1) / eta;
    let denominator = n_obs - (n1 * r.rank_m()) as f64 - 2.0 * n2f * tr1 + n2f * tr2;
    if !(denominator > 0.0) {
        return Err(Error::CorrectionInfeasible(denominator));
    }
    let sigma2_co = numerator / denominator;
    if !(sigma2_co > 0.0 && sigma2_co.is_finite()) {
        return Err(Error::Numerical(format!("corrected variance {sigma2_co:.6e} is not positive")));
    }
    Ok(CorrectedVariance {
        sigma2_co,
        numerator,
        denominator,
        tr_upsilon: tr1,
        tr_upsilon2: tr2,
    })
}

/// Pearson-type dispersion sum w (x - b'(m))^2 / b''(m) / sum w.
pub fn dispersion_hat(data: &MaskedData, m_hat: &Mat, fam: &BFamily) -> Result<f64> {
    let n = n_obs_checked(data)?;
    if m_hat.shape() != data.x.shape() {
        return Err(Error::Dimension {
            block: "m_hat",
            expected: format!("{}x{}", data.n1(), data.n2()),
            got: format!("{}x{}", m_hat.nrows(), m_hat.ncols()),
        });
    }
    let mut s = 0.0;
    for j in 0..data.n2() {
        for i in 0..data.n1() {
            if data.observed(i, j) {
                let m = m_hat[(i, j)];
                let v = (fam.d2b)(m);
                if !(v > 0.0) {
                    return Err(Error::Numerical(format!("b''(m) = {v:.3e} at ({i}, {j}) is not positive")));
                }
                s += (data.x[(i, j)] - (fam.db)(m)).powi(2) / v;
            }
        }
    }
    Ok(s / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaMethod {
    InverseVariance,
    InverseDispersion,
    NumericAmseMin,
}

#[derive(Debug, Clone, Copy)]
pub struct EtaSelection {
    pub eta_hat: f64,
    pub method: EtaMethod,
    pub sigma2_hat: Option<f64>,
    pub sigma2_co: Option<f64>,
    pub phi_hat: Option<f64>,
}

/// Pick eta from a model fitted at `fit_eta`: 1 / sigma2_co for the quadratic
/// loss, 1 / phi-hat for exponential families, and the sampled AMSE minimizer
/// otherwise.
pub fn select_eta(data: &MaskedData, fm: &FactorModel, loss: &LossSpec, fit_eta: f64) -> Result<EtaSelection> {
    let m_hat = fm.assemble()?.m;
    match loss {
        LossSpec::Quadratic => {
            let s2 = sigma2_naive(data, &m_hat)?;
            let co = sigma2_corrected(data, fm, fit_eta)?;
            Ok(EtaSelection {
                eta_hat: 1.0 / co,
                method: EtaMethod::InverseVariance,
                sigma2_hat: Some(s2),
                sigma2_co: Some(co),
                phi_hat: None,
            })
        }
        LossSpec::ExpFamily(fam) => {
            let phi = dispersion_hat(data, &m_hat, fam)?;
            if !(phi > 0.0) {
                return Err(Error::Numerical(format!("dispersion estimate {phi:.3e} is not positive")));
            }
            Ok(EtaSelection {
                eta_hat: 1.0 / phi,
                method: EtaMethod::InverseDispersion,
                sigma2_hat: None,
                sigma2_co: None,
                phi_hat: Some(phi),
            })
        }
        LossSpec::Huber(_) => select_eta_numeric(data, fm, loss, fit_eta),
    }
}

/// Minimize the sampled AMSE over eta with plug-ins from `fm`.
pub fn select_eta_numeric(data: &MaskedData, fm: &FactorModel, loss: &LossSpec, fit_eta: f64) -> Result<EtaSelection> {
    let w = build_weights_any(data, fm, loss, fit_eta)?;
    let eta_hat = minimize_amse(&w, fm)?;
    Ok(EtaSelection {
        eta_hat,
        method: EtaMethod::NumericAmseMin,
        sigma2_hat: sigma2_naive(data, &fm.assemble()?.m).ok(),
        sigma2_co: None,
        phi_hat: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{gauss, random_canonical};
    use crate::sim::{generate, SimDesign};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dof_examples() {
        assert_eq!(degrees_of_freedom(Ranks::new(0, 0, 0), 10, 12), 0);
        assert_eq!(degrees_of_freedom(Ranks::new(6, 0, 0), 943, 1682), 21372);
        assert_eq!(degrees_of_freedom(Ranks::new(5, 2, 2), 500, 500), 11459);
        // d_m and d_theta enter only through their sum
        assert_eq!(
            degrees_of_freedom(Ranks::new(1, 3, 0), 7, 9),
            1 * (14 + 9 - 1) + 3 * (16 - 3)
        );
    }

    #[test]
    fn penalty_value() {
        let direct = 0.125 * (250000f64).ln() * 11459.0;
        assert!((ic_penalty(500, 500, 11459, 0.125) - direct).abs() < 1e-9);
        assert!((direct - 17803.3).abs() < 0.1, "{direct}");
    }

    #[test]
    fn q_single_cell_and_empty_mask() {
        let data = MaskedData::full(Mat::from_element(1, 1, 0.3)).unwrap();
        let p = ParamPair::zeros(1, 1);
        let q = q_regression(&data, &p, 1.0).unwrap();
        assert!((q - 2.112086).abs() < 1e-6, "{q}");
        assert!(q_regression(&data, &p, 0.0).is_err());

        let none = MaskedData::new(Mat::from_element(3, 4, f64::NAN), Mat::zeros(3, 4)).unwrap();
        let q = q_regression(&none, &ParamPair::zeros(3, 4), 2.0).unwrap();
        assert!((q - 12.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn glm_q_gaussian_matches_regression() {
        // at phi = sigma^2 = RSS / n_obs the two forms agree
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gauss(&mut rng, 6, 5);
        let w = Mat::from_fn(6, 5, |i, j| ((i + 2 * j) % 3 != 0) as u8 as f64);
        let data = MaskedData::new(x, w).unwrap();
        let p = ParamPair {
            m: gauss(&mut rng, 6, 5) * 0.3,
            theta: gauss(&mut rng, 6, 5),
        };
        let s2 = sigma2_naive(&data, &p.m).unwrap();
        let a = q_regression(&data, &p, s2.sqrt()).unwrap();
        let b = q_glm(&data, &p, &BFamily::gaussian(), s2).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs(), "{a} {b}");
    }

    #[test]
    fn ic_identity() {
        let fm = random_canonical(2, 12, 10, Ranks::new(1, 1, 0));
        let p = fm.assemble().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = MaskedData::full(&p.m + gauss(&mut rng, 12, 10)).unwrap();
        let est = crate::ranks::estimate_ranks(&p, 1e-3).unwrap();
        let rec = ic_value(&data, &p, &LossSpec::Quadratic, est, 0.5, 0.125).unwrap();
        let pen = 0.125 * 120f64.ln() * rec.k_f as f64;
        assert!((rec.ic_value - rec.q_value - pen).abs() < 1e-9);
    }

    #[test]
    fn naive_variance_cases() {
        let x = Mat::from_row_slice(2, 2, &[1.0, 5.0, -1.0, 9.0]);
        let w = Mat::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let data = MaskedData::new(x, w).unwrap();
        let m = Mat::from_row_slice(2, 2, &[0.0, 100.0, 0.0, -100.0]);
        assert!((sigma2_naive(&data, &m).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(sigma2_naive(&data, &data.x.map(|v| if v.is_nan() { 0.0 } else { v })).unwrap(), 0.0);
        let none = MaskedData::new(Mat::zeros(2, 2), Mat::zeros(2, 2)).unwrap();
        assert!(sigma2_naive(&none, &Mat::zeros(2, 2)).is_err());
    }

    #[test]
    fn dispersion_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = gauss(&mut rng, 7, 6);
        let w = Mat::from_fn(7, 6, |i, j| ((i * j) % 4 != 1) as u8 as f64);
        let data = MaskedData::new(x, w).unwrap();
        let m = gauss(&mut rng, 7, 6);
        let g = dispersion_hat(&data, &m, &BFamily::gaussian()).unwrap();
        assert!((g - sigma2_naive(&data, &m).unwrap()).abs() < 1e-14);

        let pois = BFamily::poisson();
        let mp = m.map(|v| 0.5 * v);
        let xp = mp.map(|v| v.exp());
        let dp = MaskedData::new(xp, data.w.clone()).unwrap();
        assert!(dispersion_hat(&dp, &mp, &pois).unwrap().abs() < 1e-15);

        // direct loop oracle
        let xq = Mat::from_fn(7, 6, |i, j| ((i + j) % 5) as f64);
        let dq = MaskedData::new(xq.clone(), data.w.clone()).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..7 {
            for j in 0..6 {
                if data.w[(i, j)] == 1.0 {
                    let mu = mp[(i, j)].exp();
                    num += (xq[(i, j)] - mu).powi(2) / mu;
                    den += 1.0;
                }
            }
        }
        assert!((dispersion_hat(&dq, &mp, &pois).unwrap() - num / den).abs() < 1e-12);

        let bern = BFamily::bernoulli();
        let huge = Mat::from_element(7, 6, 800.0);
        assert!(dispersion_hat(&data, &huge, &bern).is_err());
    }

    #[test]
    fn corrected_variance_direct_oracle() {
        let r = Ranks::new(2, 1, 1);
        let (n1, n2) = (30, 24);
        let fm = random_canonical(11, n1, n2, r);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = &fm.assemble().unwrap().m + gauss(&mut rng, n1, n2) * 0.8;
        let w = Mat::from_fn(n1, n2, |i, j| ((3 * i + j) % 5 < 3) as u8 as f64);
        let data = MaskedData::new(x, w).unwrap();
        let eta = 1.3;
        let got = sigma2_corrected_parts(&data, &fm, eta).unwrap();

        // build the blocks entry by entry in (s, theta, m) order
        let dim = r.total();
        let pbar = data.n_obs() as f64 / (n1 * n2) as f64;
        let mut ut = Mat::zeros(dim, dim);
        let mut um = Mat::zeros(dim, dim);
        for i in 0..n1 {
            let mut lt = vec![0.0; dim];
            let mut lm = vec![0.0; dim];
            lt[0] = fm.lambda_th1[(i, 0)];
            lt[1] = fm.lambda_th1[(i, 1)];
            lt[2] = fm.lambda_th2[(i, 0)];
            lm[0] = fm.lambda_m1[(i, 0)];
            lm[1] = fm.lambda_m1[(i, 1)];
            lm[3] = fm.lambda_m2[(i, 0)];
            for a in 0..dim {
                for b in 0..dim {
                    ut[(a, b)] += pbar * (1.0 - pbar) * lt[a] * lt[b];
                    um[(a, b)] += eta * pbar * lm[a] * lm[b];
                }
            }
        }
        let ups = (&ut + &um).try_inverse().unwrap() * &um;
        let (t1, t2) = (ups.trace(), (&ups * &ups).trace());
        let mut rss = 0.0;
        let mh = fm.assemble().unwrap().m;
        for i in 0..n1 {
            for j in 0..n2 {
                if data.observed(i, j) {
                    rss += (data.x[(i, j)] - mh[(i, j)]).powi(2);
                }
            }
        }
        let want = (rss + n2 as f64 * (t2 - t1) / eta)
            / (data.n_obs() as f64 - (n1 * 3) as f64 - 2.0 * n2 as f64 * t1 + n2 as f64 * t2);
        assert!((got.sigma2_co - want).abs() < 1e-10 * want, "{} {}", got.sigma2_co, want);
        // tr(U^2) <= tr(U) ||U||
        let norm = crate::linalg::spectral_norm(&ups);
        assert!(t2 <= t1 * norm + 1e-10);
    }

    #[test]
    fn corrected_variance_theta_only() {
        // no M loadings: Upsilon vanishes and only the observation count remains
        let r = Ranks::new(0, 0, 2);
        let fm = random_canonical(13, 15, 12, r);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = gauss(&mut rng, 15, 12);
        let w = Mat::from_fn(15, 12, |i, j| ((i + j) % 3 != 0) as u8 as f64);
        let data = MaskedData::new(x, w).unwrap();
        let got = sigma2_corrected(&data, &fm, 2.0).unwrap();
        assert!((got - sigma2_naive(&data, &Mat::zeros(15, 12)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn corrected_variance_infeasible() {
        let r = Ranks::new(2, 2, 0);
        let fm = random_canonical(15, 6, 6, r);
        let w = Mat::from_fn(6, 6, |i, j| (i == j) as u8 as f64);
        let data = MaskedData::new(Mat::from_element(6, 6, 1.0), w).unwrap();
        match sigma2_corrected(&data, &fm, 1.0) {
            Err(Error::CorrectionInfeasible(d)) => assert!(d <= 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eta_rules() {
        let r = Ranks::new(1, 1, 1);
        let fm = random_canonical(21, 40, 30, r);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = &fm.assemble().unwrap().m + gauss(&mut rng, 40, 30);
        let w = Mat::from_fn(40, 30, |i, j| ((i * 3 + j) % 4 != 0) as u8 as f64);
        let data = MaskedData::new(x, w).unwrap();
        let sel = select_eta(&data, &fm, &LossSpec::Quadratic, 1.0).unwrap();
        assert_eq!(sel.method, EtaMethod::InverseVariance);
        assert_eq!(sel.eta_hat, 1.0 / sel.sigma2_co.unwrap());
        let sel = select_eta(&data, &fm, &LossSpec::ExpFamily(BFamily::gaussian()), 1.0).unwrap();
        assert_eq!(sel.method, EtaMethod::InverseDispersion);
        assert!((sel.eta_hat * sel.phi_hat.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn numeric_amse_matches_inverse_variance() {
        // With the quadratic loss the sampled AMSE is minimized near 1 / sigma^2.
        let design = SimDesign {
            sigma2: 0.5,
            seed: 31,
            ..SimDesign::new(150, Ranks::new(2, 1, 1), 1.0, 0.5)
        };
        let inst = generate(&design, 0).unwrap();
        let sel = select_eta_numeric(&inst.data, &inst.model, &LossSpec::Quadratic, 1.0).unwrap();
        assert!((sel.eta_hat * 0.5 - 1.0).abs() < 0.10, "eta {}", sel.eta_hat);
    }

    #[test]
    fn grid_shape() {
        let g = log_grid(0.5, 8.0, 5);
        assert_eq!(g.len(), 5);
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[4] - 8.0).abs() < 1e-12);
        assert!((g[2] - 2.0).abs() < 1e-12);
        assert_eq!(log_grid(1.0, 3.0, 1), vec![3.0]);
    }

    #[test]
    fn select_mu_single_point_and_zero_data() {
        let design = SimDesign {
            seed: 41,
            ..SimDesign::new(40, Ranks::new(2, 1, 1), 1.0, 0.5)
        };
        let inst = generate(&design, 0).unwrap();
        let cfg = TuningConfig::default();
        let grid = default_mu_grid(&inst.data, &cfg);
        assert_eq!(grid.len(), 15);
        let one = [grid[7]];
        let sel = select_mu(&inst.data, &LossSpec::Quadratic, &one, &cfg).unwrap();
        assert_eq!(sel.mu, grid[7]);
        assert!(select_mu(&inst.data, &LossSpec::Quadratic, &[], &cfg).is_err());

        let zero = MaskedData::full(Mat::zeros(20, 20)).unwrap();
        let grid = default_mu_grid(&zero, &cfg);
        let sel = select_mu(&zero, &LossSpec::Quadratic, &grid, &cfg).unwrap();
        let min_rank = sel.records.iter().map(|r| r.ranks.d_hat).min().unwrap();
        assert_eq!(sel.ranks.d_hat, min_rank);
        assert_eq!(sel.ranks.d_m + sel.ranks.d_s, 0);
        for rec in &sel.records {
            let pen = 0.125 * 400f64.ln() * rec.k_f as f64;
            assert!((rec.ic_value - rec.q_value - pen).abs() < 1e-6 * rec.ic_value.abs().max(1.0));
        }
    }
}
