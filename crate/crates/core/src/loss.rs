//! Entrywise pseudo-log-likelihoods and the joint objective
//! L(M, Theta, eta) = sum softplus(theta) - w theta - w eta l(x, m).

use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::{expit, softplus, Mat};
use crate::model::{MaskedData, ParamPair};

/// Cumulant function b with its first two derivatives, plus the log base
/// measure log c(x, phi) used by the information criterion.
#[derive(Clone, Copy)]
pub struct BFamily {
    pub name: &'static str,
    pub b: fn(f64) -> f64,
    pub db: fn(f64) -> f64,
    pub d2b: fn(f64) -> f64,
    pub log_c: fn(f64, f64) -> f64,
}

impl fmt::Debug for BFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BFamily({})", self.name)
    }
}

impl PartialEq for BFamily {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

fn gauss_b(m: f64) -> f64 {
    0.5 * m * m
}
fn gauss_db(m: f64) -> f64 {
    m
}
fn gauss_d2b(_m: f64) -> f64 {
    1.0
}
fn gauss_log_c(x: f64, phi: f64) -> f64 {
    -x * x / (2.0 * phi) - 0.5 * (2.0 * std::f64::consts::PI * phi).ln()
}

fn exp_b(m: f64) -> f64 {
    m.exp()
}
fn poisson_log_c(x: f64, _phi: f64) -> f64 {
    -ln_gamma(x + 1.0)
}

fn bern_b(m: f64) -> f64 {
    softplus(m)
}
fn bern_db(m: f64) -> f64 {
    expit(m)
}
fn bern_d2b(m: f64) -> f64 {
    let p = expit(m);
    p * (1.0 - p)
}
fn zero_log_c(_x: f64, _phi: f64) -> f64 {
    0.0
}

impl BFamily {
    pub fn gaussian() -> Self {
        BFamily {
            name: "gaussian",
            b: gauss_b,
            db: gauss_db,
            d2b: gauss_d2b,
            log_c: gauss_log_c,
        }
    }

    pub fn poisson() -> Self {
        BFamily {
            name: "poisson",
            b: exp_b,
            db: exp_b,
            d2b: exp_b,
            log_c: poisson_log_c,
        }
    }

    pub fn bernoulli() -> Self {
        BFamily {
            name: "bernoulli",
            b: bern_b,
            db: bern_db,
            d2b: bern_d2b,
            log_c: zero_log_c,
        }
    }
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-15 for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (k, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + k as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    /// l = -(x - m)^2 / 2
    Quadratic,
    /// l = x m - b(m)
    ExpFamily(BFamily),
    /// Huber pseudo-likelihood with threshold delta.
    Huber(f64),
}

impl LossSpec {
    pub fn name(&self) -> String {
        match self {
            LossSpec::Quadratic => "quadratic".into(),
            LossSpec::ExpFamily(b) => format!("expfamily:{}", b.name),
            LossSpec::Huber(d) => format!("huber:{d}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossSpec::Huber(d) = self {
            if !(*d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidInput(format!("huber delta must be positive, got {d}")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn l(&self, x: f64, m: f64) -> f64 {
        match self {
            LossSpec::Quadratic => -0.5 * (x - m) * (x - m),
            LossSpec::ExpFamily(f) => x * m - (f.b)(m),
            LossSpec::Huber(d) => {
                let r = (x - m).abs();
                if r <= *d {
                    -0.5 * r * r
                } else {
                    -d * (r - 0.5 * d)
                }
            }
        }
    }

    /// dl/dm
    #[inline]
    pub fn dl(&self, x: f64, m: f64) -> f64 {
        match self {
            LossSpec::Quadratic => x - m,
            LossSpec::ExpFamily(f) => x - (f.db)(m),
            LossSpec::Huber(d) => (x - m).clamp(-d, *d),
        }
    }

    /// d2l/dm2; at the Huber kink the quadratic-branch value is used.
    #[inline]
    pub fn d2l(&self, x: f64, m: f64) -> f64 {
        match self {
            LossSpec::Quadratic => -1.0,
            LossSpec::ExpFamily(f) => -(f.d2b)(m),
            LossSpec::Huber(d) => {
                if (x - m).abs() <= *d {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Uniform bound on -l'' when one exists.
    pub fn curvature_bound(&self) -> Option<f64> {
        match self {
            LossSpec::Quadratic | LossSpec::Huber(_) => Some(1.0),
            LossSpec::ExpFamily(f) if f.name == "gaussian" => Some(1.0),
            LossSpec::ExpFamily(f) if f.name == "bernoulli" => Some(0.25),
            LossSpec::ExpFamily(_) => None,
        }
    }

    /// Curvature weight used by majorizing steps at m: a bound when one is
    /// available, otherwise the local value.
    #[inline]
    pub fn step_curvature(&self, x: f64, m: f64) -> f64 {
        match self.curvature_bound() {
            Some(c) => c,
            None => (-self.d2l(x, m)).max(1e-8),
        }
    }
}

/// Step and cap settings for the known-rank fitter.
#[derive(Debug, Clone, Copy)]
pub struct FitConfig {
    pub eta: f64,
    pub alpha_m: f64,
    pub alpha_theta: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Backtracking factor.
    pub backtrack: f64,
    /// Re-canonicalize every this many sweeps.
    pub recanon_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            eta: 1.0,
            alpha_m: 20.0,
            alpha_theta: 20.0,
            max_iter: 2000,
            tol: 1e-8,
            armijo_c: 1e-4,
            backtrack: 0.5,
            recanon_every: 10,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidInput(format!("eta must be positive and finite, got {}", self.eta)));
        }
        if !(self.alpha_m > 0.0 && self.alpha_theta > 0.0) {
            return Err(Error::InvalidInput("caps must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput("tol must be positive".into()));
        }
        Ok(())
    }
}

fn check_inputs(data: &MaskedData, p: &ParamPair) -> Result<()> {
    if p.m.shape() != data.x.shape() {
        return Err(Error::Dimension {
            block: "m",
            expected: format!("{:?}", data.x.shape()),
            got: format!("{:?}", p.m.shape()),
        });
    }
    if p.theta.shape() != data.x.shape() {
        return Err(Error::Dimension {
            block: "theta",
            expected: format!("{:?}", data.x.shape()),
            got: format!("{:?}", p.theta.shape()),
        });
    }
    for j in 0..data.n2() {
        for i in 0..data.n1() {
            if !p.m[(i, j)].is_finite() {
                return Err(Error::NonFinite { what: "m", i, j });
            }
            if !p.theta[(i, j)].is_finite() {
                return Err(Error::NonFinite { what: "theta", i, j });
            }
            if data.observed(i, j) && !data.x[(i, j)].is_finite() {
                return Err(Error::NonFinite { what: "x", i, j });
            }
        }
    }
    Ok(())
}

pub fn objective(data: &MaskedData, p: &ParamPair, loss: &LossSpec, eta: f64) -> Result<f64> {
    check_inputs(data, p)?;
    let (mask, fit) = objective_parts(data, &p.m, &p.theta, loss, eta);
    Ok(mask + fit)
}

/// (mask part, data part) of the objective; the data part is -eta sum w l.
pub(crate) fn objective_parts(
    data: &MaskedData,
    m: &Mat,
    theta: &Mat,
    loss: &LossSpec,
    eta: f64,
) -> (f64, f64) {
    (mask_objective(data, theta), data_objective(data, m, loss, eta))
}

pub(crate) fn mask_objective(data: &MaskedData, theta: &Mat) -> f64 {
    let mut s = 0.0;
    for j in 0..data.n2() {
        for i in 0..data.n1() {
            let t = theta[(i, j)];
            s += softplus(t);
            if data.observed(i, j) {
                s -= t;
            }
        }
    }
    s
}

pub(crate) fn data_objective(data: &MaskedData, m: &Mat, loss: &LossSpec, eta: f64) -> f64 {
    let mut s = 0.0;
    for j in 0..data.n2() {
        for i in 0..data.n1() {
            if data.observed(i, j) {
                s -= loss.l(data.x[(i, j)], m[(i, j)]);
            }
        }
    }
    eta * s
}

pub fn gradient(data: &MaskedData, p: &ParamPair, loss: &LossSpec, eta: f64) -> Result<(Mat, Mat)> {
    check_inputs(data, p)?;
    Ok((grad_m(data, &p.m, loss, eta), grad_theta(data, &p.theta)))
}

pub(crate) fn grad_m(data: &MaskedData, m: &Mat, loss: &LossSpec, eta: f64) -> Mat {
    let (n1, n2) = m.shape();
    let mut g = Mat::zeros(n1, n2);
    for j in 0..n2 {
        for i in 0..n1 {
            if data.observed(i, j) {
                g[(i, j)] = -eta * loss.dl(data.x[(i, j)], m[(i, j)]);
            }
        }
    }
    g
}

pub(crate) fn grad_theta(data: &MaskedData, theta: &Mat) -> Mat {
    let (n1, n2) = theta.shape();
    let mut g = Mat::zeros(n1, n2);
    for j in 0..n2 {
        for i in 0..n1 {
            g[(i, j)] = expit(theta[(i, j)]) - data.w[(i, j)];
        }
    }
    g
}

pub fn second_derivative_diag(
    data: &MaskedData,
    p: &ParamPair,
    loss: &LossSpec,
    eta: f64,
) -> Result<(Mat, Mat)> {
    check_inputs(data, p)?;
    let (n1, n2) = p.m.shape();
    let mut hm = Mat::zeros(n1, n2);
    let mut ht = Mat::zeros(n1, n2);
    for j in 0..n2 {
        for i in 0..n1 {
            if data.observed(i, j) {
                hm[(i, j)] = -eta * loss.d2l(data.x[(i, j)], p.m[(i, j)]);
            }
            let pi = expit(p.theta[(i, j)]);
            ht[(i, j)] = pi * (1.0 - pi);
        }
    }
    Ok((hm, ht))
}
