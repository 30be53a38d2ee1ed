//! Dense helpers: sorted SVDs, randomized truncated SVD, low-rank products
//! and guarded SPD inversion. Matrices are nalgebra containers; the
//! decompositions themselves are delegated to faer.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vecd = DVector<f64>;

/// Logistic function, evaluated without overflow for any finite input.
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(t)).
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Thin SVD with singular values in decreasing order.
pub struct Svd {
    pub u: Mat,
    pub s: Vecd,
    pub v: Mat,
}

impl Svd {
    pub fn rank(&self, rel_tol: f64) -> usize {
        let smax = self.s.iter().cloned().fold(0.0, f64::max);
        if smax == 0.0 {
            return 0;
        }
        self.s.iter().filter(|&&x| x > rel_tol * smax).count()
    }

    pub fn truncate(mut self, k: usize) -> Svd {
        let k = k.min(self.s.len());
        self.u = self.u.columns(0, k).into_owned();
        self.v = self.v.columns(0, k).into_owned();
        self.s = self.s.rows(0, k).into_owned();
        self
    }

    /// U diag(s) as an n1 x r matrix.
    pub fn us(&self) -> Mat {
        let mut out = self.u.clone();
        for (c, &sv) in self.s.iter().enumerate() {
            out.column_mut(c).scale_mut(sv);
        }
        out
    }

    pub fn reconstruct(&self) -> Mat {
        self.us() * self.v.transpose()
    }
}

fn to_faer(a: &Mat) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_faer(a: faer::MatRef<'_, f64>) -> Mat {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub fn svd(a: &Mat) -> Svd {
    let (n, m) = a.shape();
    if n == 0 || m == 0 {
        return Svd {
            u: Mat::zeros(n, 0),
            s: Vecd::zeros(0),
            v: Mat::zeros(m, 0),
        };
    }
    let fa = to_faer(a);
    match fa.thin_svd() {
        Ok(dec) => {
            let s = dec.S().column_vector();
            Svd {
                u: from_faer(dec.U()),
                s: Vecd::from_fn(s.nrows(), |i, _| s[i]),
                v: from_faer(dec.V()),
            }
        }
        Err(_) => {
            let k = n.min(m);
            Svd {
                u: Mat::from_element(n, k, f64::NAN),
                s: Vecd::from_element(k, f64::NAN),
                v: Mat::from_element(m, k, f64::NAN),
            }
        }
    }
}

pub fn singular_values(a: &Mat) -> Vecd {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vecd::zeros(0);
    }
    match to_faer(a).singular_values() {
        Ok(s) => Vecd::from_vec(s),
        Err(_) => Vecd::from_element(a.nrows().min(a.ncols()), f64::NAN),
    }
}

pub fn spectral_norm(a: &Mat) -> f64 {
    singular_values(a).iter().cloned().fold(0.0, f64::max)
}

/// Orthonormal basis (thin Q) for the column space of `a`.
pub fn orth(a: &Mat) -> Mat {
    let (n, m) = a.shape();
    if m == 0 {
        return Mat::zeros(n, 0);
    }
    let q = to_faer(a).qr().compute_thin_Q();
    from_faer(q.as_ref())
}

fn gaussian(n: usize, m: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng))
}

/// Leading `k` singular triplets. Small problems use a dense SVD; larger ones
/// use subspace iteration on a Gaussian sketch with fixed seed, optionally
/// seeded with `warm` (columns spanning a guess for the right singular space).
pub fn top_svd(a: &Mat, k: usize, warm: Option<&Mat>) -> Svd {
    top_svd_power(a, k, warm, 3)
}

/// `top_svd` with an explicit number of power iterations. One is enough when
/// `warm` already spans the leading right singular space closely, as in
/// iterative solvers that call this on slowly changing matrices.
pub fn top_svd_power(a: &Mat, k: usize, warm: Option<&Mat>, power: usize) -> Svd {
    let (n, m) = a.shape();
    let kmax = n.min(m);
    let k = k.min(kmax);
    let l = (k + 10).min(kmax);
    if kmax <= 2 * l + 16 {
        return svd(a).truncate(k);
    }
    let mut omega = gaussian(m, l, 0x5f37_59df ^ ((n as u64) << 20) ^ m as u64);
    if let Some(w) = warm {
        let c = w.ncols().min(l);
        for j in 0..c {
            omega.set_column(j, &w.column(j));
        }
    }
    let mut q = orth(&(a * &omega));
    for _ in 0..power {
        let z = orth(&(a.tr_mul(&q)));
        q = orth(&(a * z));
    }
    let b = q.tr_mul(a);
    let small = svd(&b).truncate(k);
    Svd {
        u: &q * small.u,
        s: small.s,
        v: small.v,
    }
}

/// Thin QR: q is n x min(n, m), r is min(n, m) x m.
pub fn thin_qr(a: &Mat) -> (Mat, Mat) {
    let qr = to_faer(a).qr();
    let q = from_faer(qr.compute_thin_Q().as_ref());
    let r = from_faer(qr.thin_R());
    (q, r)
}

/// SVD of the product `a * b^T` without forming it.
pub fn lowrank_svd(a: &Mat, b: &Mat) -> Svd {
    assert_eq!(a.ncols(), b.ncols());
    let r = a.ncols();
    if r == 0 {
        return Svd {
            u: Mat::zeros(a.nrows(), 0),
            s: Vecd::zeros(0),
            v: Mat::zeros(b.nrows(), 0),
        };
    }
    let (q1, r1) = thin_qr(a);
    let (q2, r2) = thin_qr(b);
    let core = svd(&(r1 * r2.transpose()));
    Svd {
        u: q1 * core.u,
        s: core.s,
        v: q2 * core.v,
    }
}

/// Symmetric eigendecomposition with eigenvalues in decreasing order.
pub fn sym_eigen_desc(a: &Mat) -> (Vecd, Mat) {
    let n = a.nrows();
    if n == 0 {
        return (Vecd::zeros(0), Mat::zeros(0, 0));
    }
    let sym = to_faer(&((a + a.transpose()) * 0.5));
    let e = match sym.self_adjoint_eigen(faer::Side::Lower) {
        Ok(e) => e,
        Err(_) => return (Vecd::from_element(n, f64::NAN), Mat::identity(n, n)),
    };
    let s = e.S().column_vector();
    let u = e.U();
    // faer returns ascending order
    let vals = Vecd::from_fn(n, |i, _| s[n - 1 - i]);
    let vecs = Mat::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
    (vals, vecs)
}

pub const COND_GUARD: f64 = 1e12;

/// Inverse of a symmetric positive definite matrix; fails when the matrix is
/// not positive definite or its condition number exceeds `COND_GUARD`.
pub fn spd_inverse(a: &Mat, what: &str) -> Result<Mat> {
    let n = a.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let (vals, vecs) = sym_eigen_desc(a);
    let lmax = vals[0];
    let lmin = vals[n - 1];
    if !(lmin > 0.0) || !lmax.is_finite() || lmax / lmin > COND_GUARD {
        let cond = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
        return Err(Error::DegenerateInformation {
            what: what.to_string(),
            cond,
        });
    }
    let mut scaled = vecs.clone();
    for c in 0..n {
        scaled.column_mut(c).scale_mut(1.0 / vals[c]);
    }
    Ok(scaled * vecs.transpose())
}

/// Solve `a x = b` for symmetric positive semidefinite `a`, adding a small
/// relative ridge so flat directions stay bounded.
pub fn psd_solve(a: &Mat, b: &Vecd) -> Vecd {
    let n = a.nrows();
    if n == 0 {
        return Vecd::zeros(0);
    }
    let scale = (0..n).map(|i| a[(i, i)]).fold(0.0, f64::max).max(1e-300);
    let mut ridge = 1e-10 * scale;
    for _ in 0..8 {
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += ridge;
        }
        if let Some(ch) = m.cholesky() {
            return ch.solve(b);
        }
        ridge *= 100.0;
    }
    Vecd::zeros(n)
}

pub fn frob(a: &Mat) -> f64 {
    a.norm()
}
