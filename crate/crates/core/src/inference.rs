//! Plug-in sandwich variances for entries of the fitted M and Theta.
//!
//! Row weights (one small matrix per row i) act on factor rows; column
//! weights (one per column j) act on loading rows laid out as (s, theta, m).
//! Expectations are replaced by single-cell plug-ins: pi * l'' over all cells
//! and w * l'^2 over observed cells.

use crate::error::{Error, Result};
use crate::linalg::{expit, spd_inverse, Mat, Vecd};
use crate::loss::LossSpec;
use crate::model::{hcat, FactorModel, MaskedData};

#[derive(Debug, Clone)]
pub struct InferenceWeights {
    pub phi_theta: Vec<Mat>,
    pub phi_m: Vec<Mat>,
    pub phi_m_tilde: Vec<Mat>,
    /// Theta part of Psi_j; the full matrix is psi_theta + eta * psi_m.
    pub psi_theta: Vec<Mat>,
    pub psi_m: Vec<Mat>,
    /// Data part of the tilde matrix; Psi~_j = psi_theta + eta^2 * psi_m_tilde.
    pub psi_m_tilde: Vec<Mat>,
    pub eta: f64,
    pub ranks: crate::model::Ranks,
    pub n1: usize,
    pub n2: usize,
}

impl InferenceWeights {
    pub fn psi(&self, j: usize) -> Mat {
        self.psi_at(j, self.eta)
    }

    pub fn psi_tilde(&self, j: usize) -> Mat {
        self.psi_tilde_at(j, self.eta)
    }

    pub fn psi_at(&self, j: usize, eta: f64) -> Mat {
        &self.psi_theta[j] + &self.psi_m[j] * eta
    }

    pub fn psi_tilde_at(&self, j: usize, eta: f64) -> Mat {
        &self.psi_theta[j] + &self.psi_m_tilde[j] * (eta * eta)
    }
}

/// Variances of one entry, on the scale where sqrt(n1 + n2) (est - truth) is
/// asymptotically N(0, V).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryVariance {
    pub v_theta: f64,
    pub v_m: f64,
}

/// Loading rows embedded in (s, theta, m) coordinates.
pub(crate) fn loading_designs(fm: &FactorModel) -> (Mat, Mat) {
    let r = fm.ranks;
    let n1 = fm.n1();
    let dim = r.total();
    let mut a_t = Mat::zeros(n1, dim);
    a_t.columns_mut(0, r.d_s).copy_from(&fm.lambda_th1);
    a_t.columns_mut(r.d_s, r.d_theta).copy_from(&fm.lambda_th2);
    let mut a_m = Mat::zeros(n1, dim);
    a_m.columns_mut(0, r.d_s).copy_from(&fm.lambda_m1);
    a_m.columns_mut(r.d_s + r.d_theta, r.d_m).copy_from(&fm.lambda_m2);
    (a_t, a_m)
}

/// sum_k c_k a_k a_k^T / scale over the rows a_k of `a`.
fn weighted_gram(a: &Mat, c: impl Fn(usize) -> f64, scale: f64) -> Mat {
    let mut scaled = a.clone();
    for k in 0..a.nrows() {
        let ck = c(k);
        scaled.row_mut(k).scale_mut(ck);
    }
    let g = a.tr_mul(&scaled) / scale;
    (&g + g.transpose()) * 0.5
}

pub fn build_weights(data: &MaskedData, fm: &FactorModel, loss: &LossSpec, eta: f64) -> Result<InferenceWeights> {
    if let LossSpec::Huber(_) = loss {
        return Err(Error::InvalidInput(
            "plug-in inference needs a twice differentiable loss; Huber is not supported".into(),
        ));
    }
    build_weights_any(data, fm, loss, eta)
}

/// As [`build_weights`] but also accepts Huber, whose l'' is taken branchwise
/// (-1 inside the threshold, 0 outside). Used only to score eta.
pub(crate) fn build_weights_any(
    data: &MaskedData,
    fm: &FactorModel,
    loss: &LossSpec,
    eta: f64,
) -> Result<InferenceWeights> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidInput(format!("eta must be positive, got {eta}")));
    }
    fm.validate()?;
    let (n1, n2) = (fm.n1(), fm.n2());
    if data.n1() != n1 || data.n2() != n2 {
        return Err(Error::Dimension {
            block: "data",
            expected: format!("{n1}x{n2}"),
            got: format!("{}x{}", data.n1(), data.n2()),
        });
    }
    let p = fm.assemble()?;
    // Plug-in weights per cell.
    let mut omega = Mat::zeros(n1, n2);
    let mut curv = Mat::zeros(n1, n2);
    let mut score = Mat::zeros(n1, n2);
    for j in 0..n2 {
        for i in 0..n1 {
            let t = p.theta[(i, j)];
            let m = p.m[(i, j)];
            let pi = expit(t);
            omega[(i, j)] = pi * expit(-t);
            let x = if data.observed(i, j) { data.x[(i, j)] } else { m };
            curv[(i, j)] = -pi * loss.d2l(x, m);
            if data.observed(i, j) {
                score[(i, j)] = loss.dl(x, m).powi(2);
            }
            for (what, v) in [("pi * l''", curv[(i, j)]), ("l'^2", score[(i, j)])] {
                if !v.is_finite() {
                    return Err(Error::NonFinite { what, i, j });
                }
            }
        }
    }
    let f_t = hcat(&[&fm.f_s, &fm.f_th]);
    let f_m = hcat(&[&fm.f_s, &fm.f_m]);
    let nf = n2 as f64;
    let mut phi_theta = Vec::with_capacity(n1);
    let mut phi_m = Vec::with_capacity(n1);
    let mut phi_m_tilde = Vec::with_capacity(n1);
    for i in 0..n1 {
        phi_theta.push(weighted_gram(&f_t, |j| omega[(i, j)], nf));
        phi_m.push(weighted_gram(&f_m, |j| curv[(i, j)], nf));
        phi_m_tilde.push(weighted_gram(&f_m, |j| score[(i, j)], nf));
    }
    let (a_t, a_m) = loading_designs(fm);
    let nl = n1 as f64;
    let mut psi_theta = Vec::with_capacity(n2);
    let mut psi_m = Vec::with_capacity(n2);
    let mut psi_m_tilde = Vec::with_capacity(n2);
    for j in 0..n2 {
        psi_theta.push(weighted_gram(&a_t, |i| omega[(i, j)], nl));
        psi_m.push(weighted_gram(&a_m, |i| curv[(i, j)], nl));
        psi_m_tilde.push(weighted_gram(&a_m, |i| score[(i, j)], nl));
    }
    Ok(InferenceWeights {
        phi_theta,
        phi_m,
        phi_m_tilde,
        psi_theta,
        psi_m,
        psi_m_tilde,
        eta,
        ranks: fm.ranks,
        n1,
        n2,
    })
}

fn sandwich(bread: &Mat, meat: &Mat, what: &str) -> Result<Mat> {
    let inv = spd_inverse(bread, what)?;
    Ok(&inv * meat * &inv)
}

fn quad(v: &Vecd, a: &Mat) -> f64 {
    v.dot(&(a * v))
}

fn row_vec(blocks: &[&Mat], row: usize) -> Vecd {
    let len: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut v = Vecd::zeros(len);
    let mut at = 0;
    for b in blocks {
        for c in 0..b.ncols() {
            v[at + c] = b[(row, c)];
        }
        at += b.ncols();
    }
    v
}

/// Precomputed inverses for evaluating many entries.
pub struct VarianceMap<'a> {
    fm: &'a FactorModel,
    phi_theta_inv: Vec<Mat>,
    phi_m_sand: Vec<Mat>,
    psi_sand: Vec<Mat>,
}

impl<'a> VarianceMap<'a> {
    pub fn new(w: &InferenceWeights, fm: &'a FactorModel) -> Result<Self> {
        let mut phi_theta_inv = Vec::with_capacity(w.n1);
        let mut phi_m_sand = Vec::with_capacity(w.n1);
        for i in 0..w.n1 {
            phi_theta_inv.push(spd_inverse(&w.phi_theta[i], &format!("Phi_theta row {i}"))?);
            phi_m_sand.push(sandwich(&w.phi_m[i], &w.phi_m_tilde[i], &format!("Phi_m row {i}"))?);
        }
        let mut psi_sand = Vec::with_capacity(w.n2);
        for j in 0..w.n2 {
            psi_sand.push(sandwich(&w.psi(j), &w.psi_tilde(j), &format!("Psi column {j}"))?);
        }
        Ok(VarianceMap {
            fm,
            phi_theta_inv,
            phi_m_sand,
            psi_sand,
        })
    }

    pub fn entry(&self, i: usize, j: usize) -> EntryVariance {
        let fm = self.fm;
        let (n1, n2) = (fm.n1() as f64, fm.n2() as f64);
        let r = fm.ranks;
        let g_t = row_vec(&[&fm.f_s, &fm.f_th], j);
        let g_m = row_vec(&[&fm.f_s, &fm.f_m], j);
        let zero_t = Mat::zeros(fm.n1(), r.d_theta);
        let zero_m = Mat::zeros(fm.n1(), r.d_m);
        let h_t = row_vec(&[&fm.lambda_th1, &fm.lambda_th2, &zero_m], i);
        let h_m = row_vec(&[&fm.lambda_m1, &zero_t, &fm.lambda_m2], i);
        let total = n1 + n2;
        let v_theta = total / n2 * quad(&g_t, &self.phi_theta_inv[i]) + total / n1 * quad(&h_t, &self.psi_sand[j]);
        let v_m = total / n2 * quad(&g_m, &self.phi_m_sand[i]) + total / n1 * quad(&h_m, &self.psi_sand[j]);
        EntryVariance { v_theta, v_m }
    }

    /// Full matrices of V_theta and V_m.
    pub fn all(&self) -> (Mat, Mat) {
        let (n1, n2) = (self.fm.n1(), self.fm.n2());
        let mut vt = Mat::zeros(n1, n2);
        let mut vm = Mat::zeros(n1, n2);
        for j in 0..n2 {
            for i in 0..n1 {
                let e = self.entry(i, j);
                vt[(i, j)] = e.v_theta;
                vm[(i, j)] = e.v_m;
            }
        }
        (vt, vm)
    }
}

/// Variance of a single entry.
pub fn entry_variance(w: &InferenceWeights, fm: &FactorModel, i: usize, j: usize) -> Result<EntryVariance> {
    if i >= w.n1 || j >= w.n2 {
        return Err(Error::OutOfRange(format!("cell ({i}, {j}) outside {}x{}", w.n1, w.n2)));
    }
    let phi_t = spd_inverse(&w.phi_theta[i], &format!("Phi_theta row {i}"))?;
    let phi_m = sandwich(&w.phi_m[i], &w.phi_m_tilde[i], &format!("Phi_m row {i}"))?;
    let psi = sandwich(&w.psi(j), &w.psi_tilde(j), &format!("Psi column {j}"))?;
    let map = VarianceMap {
        fm,
        phi_theta_inv: vec![Mat::zeros(0, 0); i].into_iter().chain([phi_t]).collect(),
        phi_m_sand: vec![Mat::zeros(0, 0); i].into_iter().chain([phi_m]).collect(),
        psi_sand: vec![Mat::zeros(0, 0); j].into_iter().chain([psi]).collect(),
    };
    Ok(map.entry(i, j))
}

/// 95% normal interval for an estimate with variance V on the sqrt(n1+n2) scale.
pub fn confidence_interval(est: f64, v: f64, n1: usize, n2: usize) -> (f64, f64) {
    let half = 1.96 * (v / (n1 + n2) as f64).sqrt();
    (est - half, est + half)
}

/// Sampled asymptotic MSE of the M estimate as a function of eta.
pub fn amse(w: &InferenceWeights, fm: &FactorModel, eta: f64) -> Result<f64> {
    let (n1, n2) = (w.n1, w.n2);
    let f_m = hcat(&[&fm.f_s, &fm.f_m]);
    let g = f_m.tr_mul(&f_m) / n2 as f64;
    let mut first = 0.0;
    for i in 0..n1 {
        let s = sandwich(&w.phi_m[i], &w.phi_m_tilde[i], &format!("Phi_m row {i}"))?;
        first += (&s * &g).trace();
    }
    let (_, a_m) = loading_designs(fm);
    let k = a_m.tr_mul(&a_m);
    let mut second = 0.0;
    for j in 0..n2 {
        let s = sandwich(&w.psi_at(j, eta), &w.psi_tilde_at(j, eta), &format!("Psi column {j} at eta {eta}"))?;
        second += (&s * &k).trace();
    }
    Ok(first + second / n1 as f64)
}

/// Minimize the sampled AMSE over eta: a log grid on [1e-3, 1e3] followed by
/// golden-section search on log(eta) to relative tolerance 1e-3.
pub fn minimize_amse(w: &InferenceWeights, fm: &FactorModel) -> Result<f64> {
    let grid: Vec<f64> = (0..=24).map(|q| 10f64.powf(-3.0 + 6.0 * q as f64 / 24.0)).collect();
    let mut vals = Vec::with_capacity(grid.len());
    for &e in &grid {
        vals.push(amse(w, fm, e)?);
    }
    let best = (0..grid.len())
        .min_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap())
        .unwrap();
    let lo = grid[best.saturating_sub(1)].ln();
    let hi = grid[(best + 1).min(grid.len() - 1)].ln();
    let (mut a, mut b) = (lo, hi);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = amse(w, fm, c.exp())?;
    let mut fd = amse(w, fm, d.exp())?;
    while (b - a) > 1e-3 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = amse(w, fm, c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = amse(w, fm, d.exp())?;
        }
    }
    Ok((0.5 * (a + b)).exp())
}
