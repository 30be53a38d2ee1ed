//! Synthetic shared-factor data and the Monte Carlo harness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StudentT};

use std::time::Instant;

use crate::error::{Error, Result};
use crate::linalg::{expit, Mat};
use crate::loss::{FitConfig, LossSpec};
use crate::model::{FactorModel, MaskedData, ParamPair, Ranks};
use crate::oracle::{fit_known_rank, FitReport};
use crate::par::par_map;
use crate::pipeline::{fit_auto, refit_at_eta, EtaPolicy, PipelineConfig};
use crate::tuning::select_eta;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    Normal,
    /// Student t with the given degrees of freedom, rescaled to variance sigma2.
    StudentT(f64),
}

#[derive(Debug, Clone)]
pub struct SimDesign {
    pub n: usize,
    pub ranks: Ranks,
    pub m_p: f64,
    pub sigma2: f64,
    pub noise: Noise,
    pub replicates: usize,
    pub seed: u64,
}

impl SimDesign {
    pub fn new(n: usize, ranks: Ranks, m_p: f64, sigma2: f64) -> Self {
        SimDesign {
            n,
            ranks,
            m_p,
            sigma2,
            noise: Noise::Normal,
            replicates: 1,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.ranks;
        if r.d_s == 0 {
            return Err(Error::DegenerateDesign(
                "d_s must be >= 1: the first shared column is the intercept".into(),
            ));
        }
        if self.n == 0 || r.rank_m() > self.n || r.rank_theta() > self.n {
            return Err(Error::DegenerateDesign(format!("ranks {} do not fit n = {}", r, self.n)));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) || !self.m_p.is_finite() {
            return Err(Error::DegenerateDesign("sigma2 and m_p must be finite, sigma2 >= 0".into()));
        }
        if let Noise::StudentT(df) = self.noise {
            if !(df > 2.0) {
                return Err(Error::DegenerateDesign("t noise needs df > 2 for finite variance".into()));
            }
        }
        Ok(())
    }

    /// Generator for one replicate: the seed picks the key, the replicate
    /// index picks the stream, so replicates are independent and methods run
    /// on the same replicate see identical data.
    pub fn rng(&self, replicate: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate as u64);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct SimInstance {
    pub data: MaskedData,
    pub model: FactorModel,
    pub truth: ParamPair,
}

fn normal_block(rng: &mut ChaCha8Rng, n: usize, c: usize, var: f64) -> Mat {
    let d = Normal::new(0.0, var.sqrt()).unwrap();
    Mat::from_fn(n, c, |_, _| d.sample(rng))
}

fn with_lead(lead: f64, rest: Mat) -> Mat {
    let n = rest.nrows();
    let mut out = Mat::zeros(n, rest.ncols() + 1);
    out.column_mut(0).fill(lead);
    out.columns_mut(1, rest.ncols()).copy_from(&rest);
    out
}

/// Draw one replicate of the design.
pub fn generate(design: &SimDesign, replicate: usize) -> Result<SimInstance> {
    design.validate()?;
    let n = design.n;
    let r = design.ranks;
    let mut rng = design.rng(replicate);
    // With d_s + d_m = 1 there are no random M loadings, so the variance
    // divisor never gets used.
    let var_m = 1.0 / (r.rank_m() as f64 - 1.0).max(1.0);
    let var_t = 1.0 / (r.rank_theta() as f64 - 1.0).max(1.0);
    let lambda_m1 = with_lead(1.0, normal_block(&mut rng, n, r.d_s - 1, var_m));
    let lambda_m2 = normal_block(&mut rng, n, r.d_m, var_m);
    let lambda_th1 = with_lead(-design.m_p, normal_block(&mut rng, n, r.d_s - 1, var_t));
    let lambda_th2 = normal_block(&mut rng, n, r.d_theta, var_t);
    let f_s = with_lead(1.0, normal_block(&mut rng, n, r.d_s - 1, 1.0));
    let f_m = normal_block(&mut rng, n, r.d_m, 1.0);
    let f_th = normal_block(&mut rng, n, r.d_theta, 1.0);
    let model = FactorModel {
        lambda_m1,
        lambda_m2,
        lambda_th1,
        lambda_th2,
        f_s,
        f_m,
        f_th,
        ranks: r,
    };
    let truth = model.assemble()?;
    let sd = design.sigma2.sqrt();
    let mut noise = Mat::zeros(n, n);
    match design.noise {
        Noise::Normal => {
            let d = Normal::new(0.0, 1.0).unwrap();
            noise.iter_mut().for_each(|e| *e = sd * d.sample(&mut rng));
        }
        Noise::StudentT(df) => {
            let d = StudentT::new(df).unwrap();
            let scale = sd * ((df - 2.0) / df).sqrt();
            noise.iter_mut().for_each(|e| *e = scale * d.sample(&mut rng));
        }
    }
    let mut w = Mat::zeros(n, n);
    let mut x = Mat::from_element(n, n, f64::NAN);
    for j in 0..n {
        for i in 0..n {
            let b = Bernoulli::new(expit(truth.theta[(i, j)])).unwrap();
            if b.sample(&mut rng) {
                w[(i, j)] = 1.0;
                x[(i, j)] = truth.m[(i, j)] + noise[(i, j)];
            }
        }
    }
    let data = MaskedData::new(x, w)?;
    Ok(SimInstance { data, model, truth })
}

/// Mean squared entrywise error.
pub fn mse(est: &Mat, truth: &Mat) -> f64 {
    let n = (truth.nrows() * truth.ncols()).max(1) as f64;
    (est - truth).norm_squared() / n
}

/// 1 - MSE(method) / MSE(baseline).
pub fn ratio1(mse_method: f64, mse_baseline: f64) -> f64 {
    1.0 - mse_method / mse_baseline
}

/// Known-rank fit of M alone with a constant observation probability: ranks
/// (0, rank, 0), so Theta is identically zero and drops out.
pub fn baseline_mcar_fit(
    data: &MaskedData,
    rank: usize,
    loss: &LossSpec,
    cfg: &FitConfig,
) -> Result<(FactorModel, FitReport)> {
    fit_known_rank(data, Ranks::new(0, rank, 0), loss, cfg, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// The generating parameters themselves.
    Truth,
    /// Estimated ranks, estimated eta.
    Osh,
    /// Estimated ranks, eta = 1.
    Sh,
    /// M-only fit at rank d_s + d_m with constant observation probability.
    Mht,
    /// True ranks, estimated eta.
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Truth => "truth",
            Method::Osh => "osh",
            Method::Sh => "sh",
            Method::Mht => "mht",
            Method::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.trim().to_ascii_lowercase().as_str() {
            "truth" => Ok(Method::Truth),
            "osh" => Ok(Method::Osh),
            "sh" => Ok(Method::Sh),
            "mht" => Ok(Method::Mht),
            "oracle" => Ok(Method::Oracle),
            other => Err(Error::InvalidInput(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub replicate: usize,
    pub method: Method,
    pub mse_m: f64,
    /// Not defined for the M-only baseline.
    pub mse_theta: Option<f64>,
    /// Against the baseline on the same replicate, when it was run.
    pub ratio1: Option<f64>,
    pub ranks: Option<Ranks>,
    pub ranks_correct: Option<bool>,
    pub eta: Option<f64>,
    pub mu: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Failure {
    pub replicate: usize,
    pub method: Method,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub failures: usize,
    pub mse_m_mean: f64,
    pub mse_m_sd: f64,
    pub mse_theta_mean: Option<f64>,
    pub ratio1_mean: Option<f64>,
    pub ratio1_sd: Option<f64>,
    pub ratio1_positive: Option<usize>,
    pub rank_recovery: Option<f64>,
    pub seconds_mean: f64,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<Failure>,
    pub summary: Vec<MethodSummary>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

type Outcome = std::result::Result<MetricsRow, Failure>;

fn row_for(
    replicate: usize,
    method: Method,
    inst: &SimInstance,
    est: &ParamPair,
    ranks: Option<Ranks>,
    eta: Option<f64>,
    mu: Option<f64>,
    started: Instant,
) -> MetricsRow {
    let theta = method != Method::Mht;
    MetricsRow {
        replicate,
        method,
        mse_m: mse(&est.m, &inst.truth.m),
        mse_theta: theta.then(|| mse(&est.theta, &inst.truth.theta)),
        ratio1: None,
        ranks_correct: ranks.map(|r| r == inst.model.ranks),
        ranks,
        eta,
        mu,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn run_replicate(
    design: &SimDesign,
    replicate: usize,
    methods: &[Method],
    loss: &LossSpec,
    cfg: &PipelineConfig,
) -> Vec<Outcome> {
    let fail = |method: Method, e: Error| Failure {
        replicate,
        method,
        message: e.to_string(),
    };
    let inst = match generate(design, replicate) {
        Ok(i) => i,
        Err(e) => {
            let message = e.to_string();
            return methods
                .iter()
                .map(|&method| {
                    Err(Failure {
                        replicate,
                        method,
                        message: message.clone(),
                    })
                })
                .collect();
        }
    };
    let mut out: Vec<Outcome> = Vec::new();
    // OSH and SH share the mu selection and the eta = 1 refit.
    let needs_auto = methods.iter().any(|m| matches!(m, Method::Osh | Method::Sh));
    let t_auto = Instant::now();
    let auto = if needs_auto {
        let c = PipelineConfig {
            eta: EtaPolicy::Fixed(1.0),
            inference: false,
            ..cfg.clone()
        };
        Some(fit_auto(&inst.data, loss, &c))
    } else {
        None
    };
    let auto_secs = t_auto.elapsed();
    for &method in methods {
        let started = Instant::now();
        let res: Result<MetricsRow> = (|| match method {
            Method::Truth => Ok(row_for(
                replicate,
                method,
                &inst,
                &inst.truth,
                Some(inst.model.ranks),
                None,
                None,
                started,
            )),
            Method::Sh => {
                let a = auto.as_ref().unwrap().as_ref().map_err(clone_err)?;
                let mut row = row_for(
                    replicate,
                    method,
                    &inst,
                    &a.estimate,
                    Some(a.model.ranks),
                    Some(1.0),
                    Some(a.selection.mu),
                    started,
                );
                row.seconds += auto_secs.as_secs_f64();
                Ok(row)
            }
            Method::Osh => {
                let a = auto.as_ref().unwrap().as_ref().map_err(clone_err)?;
                let eta = match cfg.eta {
                    EtaPolicy::Fixed(e) => e,
                    EtaPolicy::Auto => select_eta(&inst.data, &a.model, loss, 1.0)?.eta_hat,
                };
                let (fm, _) = refit_at_eta(&inst.data, &a.model, loss, &cfg.tuning, eta)?;
                let est = fm.assemble()?;
                let mut row = row_for(
                    replicate,
                    method,
                    &inst,
                    &est,
                    Some(fm.ranks),
                    Some(eta),
                    Some(a.selection.mu),
                    started,
                );
                row.seconds += auto_secs.as_secs_f64();
                Ok(row)
            }
            Method::Mht => {
                let r = inst.model.ranks.rank_m();
                let (fm, _) = baseline_mcar_fit(&inst.data, r, loss, &cfg.tuning.fit)?;
                Ok(row_for(replicate, method, &inst, &fm.assemble()?, None, None, None, started))
            }
            Method::Oracle => {
                let r = inst.model.ranks;
                let fc = FitConfig {
                    eta: 1.0,
                    ..cfg.tuning.fit
                };
                let (fm1, _) = fit_known_rank(&inst.data, r, loss, &fc, None)?;
                let eta = match cfg.eta {
                    EtaPolicy::Fixed(e) => e,
                    EtaPolicy::Auto => select_eta(&inst.data, &fm1, loss, 1.0)?.eta_hat,
                };
                let (fm, _) = refit_at_eta(&inst.data, &fm1, loss, &cfg.tuning, eta)?;
                Ok(row_for(replicate, method, &inst, &fm.assemble()?, Some(r), Some(eta), None, started))
            }
        })();
        out.push(res.map_err(|e| fail(method, e)));
    }
    // Ratio against the baseline on this replicate.
    let base = out
        .iter()
        .find_map(|o| o.as_ref().ok().filter(|r| r.method == Method::Mht).map(|r| r.mse_m));
    if let Some(b) = base {
        for row in out.iter_mut().flatten() {
            row.ratio1 = Some(ratio1(row.mse_m, b));
        }
    }
    out
}

fn clone_err(e: &Error) -> Error {
    Error::Numerical(e.to_string())
}

/// Run every method on every replicate of the design. Individual failures
/// are recorded; more than half failing is an error.
pub fn run_experiment(
    design: &SimDesign,
    methods: &[Method],
    loss: &LossSpec,
    cfg: &PipelineConfig,
) -> Result<Experiment> {
    design.validate()?;
    if methods.is_empty() || design.replicates == 0 {
        return Err(Error::InvalidInput("need at least one method and one replicate".into()));
    }
    let reps: Vec<usize> = (0..design.replicates).collect();
    let outcomes = par_map(&reps, |&r| run_replicate(design, r, methods, loss, cfg));
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes.into_iter().flatten() {
        match o {
            Ok(r) => rows.push(r),
            Err(f) => failures.push(f),
        }
    }
    let total = design.replicates * methods.len();
    if 2 * failures.len() > total {
        return Err(Error::ExperimentFailed {
            failed: failures.len(),
            total,
        });
    }
    let summary = methods
        .iter()
        .map(|&m| summarize(m, &rows, &failures))
        .collect();
    Ok(Experiment {
        rows,
        failures,
        summary,
    })
}

fn summarize(method: Method, rows: &[MetricsRow], failures: &[Failure]) -> MethodSummary {
    let mine: Vec<&MetricsRow> = rows.iter().filter(|r| r.method == method).collect();
    let mse_m: Vec<f64> = mine.iter().map(|r| r.mse_m).collect();
    let (mse_m_mean, mse_m_sd) = mean_sd(&mse_m);
    let thetas: Vec<f64> = mine.iter().filter_map(|r| r.mse_theta).collect();
    let ratios: Vec<f64> = mine.iter().filter_map(|r| r.ratio1).collect();
    let (rm, rs) = mean_sd(&ratios);
    let correct: Vec<bool> = mine.iter().filter_map(|r| r.ranks_correct).collect();
    let secs: Vec<f64> = mine.iter().map(|r| r.seconds).collect();
    MethodSummary {
        method,
        runs: mine.len(),
        failures: failures.iter().filter(|f| f.method == method).count(),
        mse_m_mean,
        mse_m_sd,
        mse_theta_mean: (!thetas.is_empty()).then(|| mean_sd(&thetas).0),
        ratio1_mean: (!ratios.is_empty()).then_some(rm),
        ratio1_sd: (!ratios.is_empty()).then_some(rs),
        ratio1_positive: (!ratios.is_empty()).then(|| ratios.iter().filter(|&&r| r > 0.0).count()),
        rank_recovery: (!correct.is_empty())
            .then(|| correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64),
        seconds_mean: mean_sd(&secs).0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(n: usize, m_p: f64, seed: u64) -> SimDesign {
        SimDesign {
            seed,
            ..SimDesign::new(n, Ranks::new(5, 2, 2), m_p, 0.5)
        }
    }

    #[test]
    fn observation_rates() {
        for (m_p, want) in [(1.0, 0.30), (2.0, 0.15)] {
            let inst = generate(&design(500, m_p, 3), 0).unwrap();
            let rate = inst.data.obs_rate();
            assert!((rate - want).abs() <= 0.02, "m_p {m_p}: rate {rate}");
        }
    }

    #[test]
    fn entry_moments_of_m() {
        let inst = generate(&design(1000, 1.0, 4), 0).unwrap();
        let m = &inst.truth.m;
        let n = (m.nrows() * m.ncols()) as f64;
        let mean = m.sum() / n;
        let var = m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 1.0).abs() <= 0.05, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.05, "var {var}");
    }

    #[test]
    fn reproducible_and_streams_differ() {
        let d = design(40, 1.0, 5);
        let a = generate(&d, 2).unwrap();
        let b = generate(&d, 2).unwrap();
        assert_eq!(a.data.w, b.data.w);
        let same = a
            .data
            .x
            .iter()
            .zip(b.data.x.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same);
        let c = generate(&d, 3).unwrap();
        assert_ne!(a.data.w, c.data.w);
    }

    #[test]
    fn design_validation() {
        let mut d = design(10, 1.0, 1);
        d.ranks = Ranks::new(0, 2, 2);
        assert!(matches!(generate(&d, 0), Err(Error::DegenerateDesign(_))));
        d.ranks = Ranks::new(1, 0, 0);
        assert!(generate(&d, 0).is_ok());
        d.noise = Noise::StudentT(2.0);
        assert!(d.validate().is_err());
    }

    #[test]
    fn truth_and_baseline_ratios() {
        let d = SimDesign {
            replicates: 2,
            ..design(40, 1.0, 6)
        };
        let exp = run_experiment(&d, &[Method::Truth, Method::Mht], &LossSpec::Quadratic, &PipelineConfig::default())
            .unwrap();
        for r in &exp.rows {
            match r.method {
                Method::Truth => {
                    assert_eq!(r.mse_m, 0.0);
                    assert_eq!(r.ratio1, Some(1.0));
                }
                Method::Mht => assert_eq!(r.ratio1, Some(0.0)),
                _ => unreachable!(),
            }
        }
        assert_eq!(exp.summary.len(), 2);
        assert!(exp.failures.is_empty());
    }

    #[test]
    fn baseline_exact_recovery() {
        let n = 20;
        let fm = crate::model::tests::random_canonical(7, n, n, Ranks::new(0, 2, 0));
        let data = MaskedData::full(fm.assemble().unwrap().m).unwrap();
        let cfg = FitConfig {
            tol: 1e-14,
            max_iter: 5000,
            ..FitConfig::default()
        };
        let (est, _) = baseline_mcar_fit(&data, 2, &LossSpec::Quadratic, &cfg).unwrap();
        let rel = (est.assemble().unwrap().m - &data.x).norm() / data.x.norm();
        assert!(rel <= 1e-6, "{rel}");
    }
}
