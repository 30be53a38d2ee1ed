//! Known-rank estimator: minimize the joint objective over shared factor
//! models with fixed (d_s, d_m, d_theta).
//!
//! Each sweep updates all loadings with factors held fixed, then all factors
//! with loadings held fixed. Both half-steps decompose into independent small
//! problems (one per row or per column) which take a preconditioned gradient
//! step followed by Armijo backtracking. The preconditioner uses the loss
//! curvature bound where one exists and the local logistic curvature for the
//! mask part; the bound 1/4 makes progress far too slow once pi is near 0 or 1.

use crate::error::{Error, Result};
use crate::linalg::{expit, logit, psd_solve, softplus, top_svd, Mat};
use crate::loss::{FitConfig, LossSpec};
use crate::model::{canonicalize_with, hcat, recanonicalize, FactorModel, MaskedData, ParamPair, Ranks};

/// Diagnostics shared by the fitters.
#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warning: Option<String>,
    pub final_objective: f64,
    /// Norm of the gradient with respect to loadings and factors at the end.
    pub grad_norm: f64,
    /// Mean accepted step length in the loading and factor half-steps.
    pub step_loadings: f64,
    pub step_factors: f64,
    /// Accepted iterations that increased the objective beyond round-off.
    pub descent_violations: usize,
}

/// Entrywise clamp of m to [-alpha_m, alpha_m] and theta to [-alpha_theta, alpha_theta].
pub fn project_infinity_caps(p: &ParamPair, cfg: &FitConfig) -> ParamPair {
    ParamPair {
        m: p.m.map(|v| v.clamp(-cfg.alpha_m, cfg.alpha_m)),
        theta: p.theta.map(|v| v.clamp(-cfg.alpha_theta, cfg.alpha_theta)),
    }
}

/// Spectral starting point at the given ranks: mean-filled, rate-rescaled data for M, logit of a low-rank
/// smoothed mask for Theta.
pub fn spectral_init(data: &MaskedData, ranks: Ranks) -> Result<FactorModel> {
    let p = spectral_init_pair(data, ranks.rank_m(), ranks.rank_theta());
    canonicalize_with(&p.m, &p.theta, ranks, false)
}

/// Dense spectral estimates of (M, Theta) truncated at the given ranks.
pub fn spectral_init_pair(data: &MaskedData, rank_m: usize, rank_theta: usize) -> ParamPair {
    let (n1, n2) = (data.n1(), data.n2());
    let rate = data.obs_rate().max(1.0 / (n1 * n2).max(1) as f64);
    let mean = data.observed_mean();
    let y = Mat::from_fn(n1, n2, |i, j| {
        if data.observed(i, j) {
            mean + (data.x[(i, j)] - mean) / rate
        } else {
            mean
        }
    });
    let m = if rank_m > 0 {
        top_svd(&y, rank_m, None).reconstruct()
    } else {
        Mat::zeros(n1, n2)
    };
    let theta = if rank_theta > 0 {
        let smooth = top_svd(&data.w, rank_theta, None).reconstruct();
        let t = smooth.map(|v| logit(v.clamp(0.01, 0.99)));
        top_svd(&t, rank_theta, None).reconstruct()
    } else {
        Mat::zeros(n1, n2)
    };
    ParamPair { m, theta }
}

/// Spectral start whose ranks are chosen from the data: singular values of
/// the rescaled data and of the mask are kept when they exceed the edge of
/// the spectrum of a pure-noise matrix with the same entry variance,
/// s * (sqrt(n1) + sqrt(n2)). At most `k` components are kept per half.
pub fn thresholded_spectral_init(data: &MaskedData, k: usize) -> ParamPair {
    let (n1, n2) = (data.n1(), data.n2());
    let rate = data.obs_rate().max(1.0 / (n1 * n2).max(1) as f64);
    let mean = data.observed_mean();
    let mut ss = 0.0;
    for j in 0..n2 {
        for i in 0..n1 {
            if data.observed(i, j) {
                ss += (data.x[(i, j)] - mean).powi(2);
            }
        }
    }
    let var_x = ss / data.n_obs().max(1) as f64;
    let root = (n1 as f64).sqrt() + (n2 as f64).sqrt();
    let y = Mat::from_fn(n1, n2, |i, j| {
        if data.observed(i, j) {
            mean + (data.x[(i, j)] - mean) / rate
        } else {
            mean
        }
    });
    let edge_y = (var_x / rate).sqrt() * root;
    let sy = top_svd(&y, k, None);
    let r_m = sy.s.iter().filter(|&&s| s > edge_y).count().max(1);
    let m = sy.truncate(r_m).reconstruct();

    let edge_w = (rate * (1.0 - rate)).sqrt() * root;
    let sw = top_svd(&data.w, k, None);
    let r_t = sw.s.iter().filter(|&&s| s > edge_w).count().max(1);
    let t = sw.truncate(r_t).reconstruct().map(|v| logit(v.clamp(0.01, 0.99)));
    let theta = top_svd(&t, r_t, None).reconstruct();
    ParamPair { m, theta }
}

/// Transposed copy of the data, so the loading half-step can work on columns.
pub(crate) struct Oriented {
    pub data_t: MaskedData,
}

impl Oriented {
    pub fn new(data: &MaskedData) -> Self {
        let data_t = MaskedData {
            x: data.x.transpose(),
            w: data.w.transpose(),
        };
        Oriented { data_t }
    }
}

fn column_objective(
    data: &MaskedData,
    j: usize,
    m: &[f64],
    t: &[f64],
    loss: &LossSpec,
    eta: f64,
) -> f64 {
    let mut s = 0.0;
    for i in 0..m.len() {
        s += softplus(t[i]);
        if data.observed(i, j) {
            s -= t[i] + eta * loss.l(data.x[(i, j)], m[i]);
        }
    }
    s
}

struct StepStats {
    mean_alpha: f64,
    grad_sq: f64,
}

/// One majorize-and-backtrack pass over the columns of (m, t) where column j
/// is m_j = am v_j and t_j = at v_j; `v` holds v_j in its rows.
#[allow(clippy::too_many_arguments)]
fn block_step(
    data: &MaskedData,
    m: &mut Mat,
    t: &mut Mat,
    am: &Mat,
    at: &Mat,
    v: &mut Mat,
    loss: &LossSpec,
    cfg: &FitConfig,
) -> StepStats {
    let (na, nb) = m.shape();
    let d = v.ncols();
    if d == 0 {
        return StepStats {
            mean_alpha: 0.0,
            grad_sq: 0.0,
        };
    }
    let eta = cfg.eta;
    let mut gm = Mat::zeros(na, nb);
    let mut gt = Mat::zeros(na, nb);
    for j in 0..nb {
        for i in 0..na {
            if data.observed(i, j) {
                gm[(i, j)] = -eta * loss.dl(data.x[(i, j)], m[(i, j)]);
            }
            gt[(i, j)] = expit(t[(i, j)]) - data.w[(i, j)];
        }
    }
    // Gradient with respect to v_j, stored as rows.
    let grad = gm.tr_mul(am) + gt.tr_mul(at);
    let grad_sq = grad.norm_squared();
    let mut delta = Mat::zeros(nb, d);
    let mut scaled = Mat::zeros(na, d);
    let mut scaled_t = Mat::zeros(na, d);
    for j in 0..nb {
        let mut cnt = 0;
        for i in 0..na {
            if data.observed(i, j) {
                let c = (eta * loss.step_curvature(data.x[(i, j)], m[(i, j)])).sqrt();
                for k in 0..d {
                    scaled[(cnt, k)] = c * am[(i, k)];
                }
                cnt += 1;
            }
            let pi = expit(t[(i, j)]);
            let c = (pi * (1.0 - pi)).max(1e-10).sqrt();
            for k in 0..d {
                scaled_t[(i, k)] = c * at[(i, k)];
            }
        }
        let sv = scaled.rows(0, cnt);
        let h = sv.tr_mul(&sv) + scaled_t.tr_mul(&scaled_t);
        let g = grad.row(j).transpose();
        let step = psd_solve(&h, &g);
        delta.set_row(j, &(-step).transpose());
    }
    let dm = am * delta.transpose();
    let dt = at * delta.transpose();

    let mut alpha_sum = 0.0;
    let mut trial_m = vec![0.0; na];
    let mut trial_t = vec![0.0; na];
    for j in 0..nb {
        let slope: f64 = grad.row(j).dot(&delta.row(j));
        if !(slope < 0.0) {
            continue;
        }
        let f0 = column_objective(data, j, m.column(j).as_slice(), t.column(j).as_slice(), loss, eta);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut within = true;
            for i in 0..na {
                trial_m[i] = m[(i, j)] + alpha * dm[(i, j)];
                trial_t[i] = t[(i, j)] + alpha * dt[(i, j)];
                if trial_m[i].abs() > cfg.alpha_m || trial_t[i].abs() > cfg.alpha_theta {
                    within = false;
                }
            }
            if within {
                let f1 = column_objective(data, j, &trial_m, &trial_t, loss, eta);
                if f1 <= f0 + cfg.armijo_c * alpha * slope {
                    accepted = true;
                    break;
                }
            }
            alpha *= cfg.backtrack;
        }
        if accepted {
            for i in 0..na {
                m[(i, j)] = trial_m[i];
                t[(i, j)] = trial_t[i];
            }
            for k in 0..d {
                v[(j, k)] += alpha * delta[(j, k)];
            }
            alpha_sum += alpha;
        }
    }
    StepStats {
        mean_alpha: alpha_sum / nb.max(1) as f64,
        grad_sq,
    }
}

/// Working parameters: loadings for M and Theta and stacked factors
/// F = [F_s, F_m, F_th].
struct Params {
    lm: Mat,
    lt: Mat,
    f: Mat,
    ranks: Ranks,
}

impl Params {
    fn from_model(fm: &FactorModel) -> Self {
        Params {
            lm: fm.loadings_m(),
            lt: fm.loadings_theta(),
            f: hcat(&[&fm.f_s, &fm.f_m, &fm.f_th]),
            ranks: fm.ranks,
        }
    }

    fn to_model(&self) -> FactorModel {
        let r = self.ranks;
        let (ds, dm, dt) = (r.d_s, r.d_m, r.d_theta);
        FactorModel {
            lambda_m1: self.lm.columns(0, ds).into_owned(),
            lambda_m2: self.lm.columns(ds, dm).into_owned(),
            lambda_th1: self.lt.columns(0, ds).into_owned(),
            lambda_th2: self.lt.columns(ds, dt).into_owned(),
            f_s: self.f.columns(0, ds).into_owned(),
            f_m: self.f.columns(ds, dm).into_owned(),
            f_th: self.f.columns(ds + dm, dt).into_owned(),
            ranks: r,
        }
    }

    /// Coefficient matrices mapping a factor row to columns of M and Theta.
    fn factor_maps(&self) -> (Mat, Mat) {
        let r = self.ranks;
        let n1 = self.lm.nrows();
        let d = r.total();
        let mut am = Mat::zeros(n1, d);
        am.columns_mut(0, r.rank_m()).copy_from(&self.lm);
        let mut at = Mat::zeros(n1, d);
        at.columns_mut(0, r.d_s).copy_from(&self.lt.columns(0, r.d_s));
        at.columns_mut(r.rank_m(), r.d_theta)
            .copy_from(&self.lt.columns(r.d_s, r.d_theta));
        (am, at)
    }

    /// Coefficient matrices mapping a loading row (lm_i, lt_i) to rows of M
    /// and Theta.
    fn loading_maps(&self) -> (Mat, Mat) {
        let r = self.ranks;
        let n2 = self.f.nrows();
        let (rm, rt) = (r.rank_m(), r.rank_theta());
        let mut am = Mat::zeros(n2, rm + rt);
        am.columns_mut(0, rm).copy_from(&self.f.columns(0, rm));
        let mut at = Mat::zeros(n2, rm + rt);
        at.columns_mut(rm, r.d_s).copy_from(&self.f.columns(0, r.d_s));
        at.columns_mut(rm + r.d_s, r.d_theta)
            .copy_from(&self.f.columns(rm, r.d_theta));
        (am, at)
    }
}

/// Fit the shared factor model at known ranks. Returns the canonical model
/// and a report; failure to converge within `max_iter` is reported through
/// `FitReport::converged` and `warning`, not as an error.
pub fn fit_known_rank(
    data: &MaskedData,
    ranks: Ranks,
    loss: &LossSpec,
    cfg: &FitConfig,
    init: Option<&FactorModel>,
) -> Result<(FactorModel, FitReport)> {
    cfg.validate()?;
    loss.validate()?;
    let (n1, n2) = (data.n1(), data.n2());
    if n1 == 0 || n2 == 0 {
        return Err(Error::InvalidInput("empty data".into()));
    }
    ranks.check_feasible(n1, n2)?;
    let start = match init {
        Some(fm) => {
            if fm.ranks != ranks {
                return Err(Error::InvalidInput(format!(
                    "init ranks {} differ from requested {}",
                    fm.ranks, ranks
                )));
            }
            fm.validate()?;
            if fm.n1() != n1 || fm.n2() != n2 {
                return Err(Error::Dimension {
                    block: "init",
                    expected: format!("{n1}x{n2}"),
                    got: format!("{}x{}", fm.n1(), fm.n2()),
                });
            }
            fm.clone()
        }
        None => spectral_init(data, ranks)?,
    };
    let mut start = start;
    let p0 = start.assemble_unchecked();
    // Pull an out-of-range start inside the caps by shrinking it.
    let peak_m = p0.m.amax() / cfg.alpha_m;
    let peak_t = p0.theta.amax() / cfg.alpha_theta;
    if peak_m > 1.0 {
        let s = 0.99 / peak_m;
        start.lambda_m1 *= s;
        start.lambda_m2 *= s;
    }
    if peak_t > 1.0 {
        let s = 0.99 / peak_t;
        start.lambda_th1 *= s;
        start.lambda_th2 *= s;
    }

    let oriented = Oriented::new(data);
    let mut par = Params::from_model(&start);
    let p = start.assemble_unchecked();
    let (mut m, mut t) = (p.m, p.theta);
    let total = |m: &Mat, t: &Mat| -> f64 {
        crate::loss::mask_objective(data, t) + crate::loss::data_objective(data, m, loss, cfg.eta)
    };
    let mut obj = total(&m, &t);
    let mut report = FitReport {
        objective_trace: vec![obj],
        ..Default::default()
    };
    if !obj.is_finite() {
        return Err(Error::Numerical("objective not finite at start".into()));
    }
    let mut alpha_l = 0.0;
    let mut alpha_f = 0.0;
    let mut grad_sq = 0.0;
    for sweep in 1..=cfg.max_iter {
        // loadings with factors fixed: columns of M^T
        let (bm, bt) = par.loading_maps();
        let mut v = hcat(&[&par.lm, &par.lt]);
        let mut mt = m.transpose();
        let mut tt = t.transpose();
        let s1 = block_step(&oriented.data_t, &mut mt, &mut tt, &bm, &bt, &mut v, loss, cfg);
        let rm = ranks.rank_m();
        par.lm = v.columns(0, rm).into_owned();
        par.lt = v.columns(rm, ranks.rank_theta()).into_owned();
        m = mt.transpose();
        t = tt.transpose();

        // factors with loadings fixed
        let (am, at) = par.factor_maps();
        let s2 = block_step(data, &mut m, &mut t, &am, &at, &mut par.f, loss, cfg);
        alpha_l += s1.mean_alpha;
        alpha_f += s2.mean_alpha;
        grad_sq = s1.grad_sq + s2.grad_sq;

        if sweep % cfg.recanon_every.max(1) == 0 {
            let fm = recanonicalize(&par.to_model(), false)?;
            par = Params::from_model(&fm);
            let p = fm.assemble_unchecked();
            m = p.m;
            t = p.theta;
        }

        let new_obj = total(&m, &t);
        if new_obj > obj + 1e-12 * obj.abs().max(1.0) {
            report.descent_violations += 1;
        }
        let change = (obj - new_obj).abs() / obj.abs().max(1.0);
        obj = new_obj;
        report.objective_trace.push(obj);
        report.iterations = sweep;
        if !obj.is_finite() {
            return Err(Error::Numerical(format!("objective not finite at sweep {sweep}")));
        }
        let grad_ok = grad_sq.sqrt() <= cfg.tol * (1.0 + obj.abs());
        if change <= cfg.tol || grad_ok {
            report.converged = true;
            break;
        }
    }
    let fm = recanonicalize(&par.to_model(), false)?;
    report.final_objective = {
        let p = fm.assemble_unchecked();
        total(&p.m, &p.theta)
    };
    report.grad_norm = grad_sq.sqrt();
    let it = report.iterations.max(1) as f64;
    report.step_loadings = alpha_l / it;
    report.step_factors = alpha_f / it;
    if !report.converged {
        report.warning = Some(format!(
            "no convergence in {} sweeps; returning last iterate",
            cfg.max_iter
        ));
    }
    Ok((fm, report))
}

/// Gradient of the objective with respect to all loadings and factors of a
/// model, as a single Euclidean norm.
pub fn factor_gradient_norm(data: &MaskedData, fm: &FactorModel, loss: &LossSpec, eta: f64) -> f64 {
    let p = fm.assemble_unchecked();
    let gm = crate::loss::grad_m(data, &p.m, loss, eta);
    let gt = crate::loss::grad_theta(data, &p.theta);
    let par = Params::from_model(fm);
    let (am, at) = par.factor_maps();
    let gf = gm.tr_mul(&am) + gt.tr_mul(&at);
    let g_lm = &gm * fm.factors_m();
    let g_lt = &gt * fm.factors_theta();
    (gf.norm_squared() + g_lm.norm_squared() + g_lt.norm_squared()).sqrt()
}
