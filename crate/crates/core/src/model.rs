//! Shared factor model: blocks, assembly, canonical form and diagnostics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{lowrank_svd, spectral_norm, svd, sym_eigen_desc, top_svd, Mat, Svd};

/// Ranks (d_s, d_m, d_theta): shared, data-specific and mask-specific.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Ranks {
    pub d_s: usize,
    pub d_m: usize,
    pub d_theta: usize,
}

impl Ranks {
    pub const fn new(d_s: usize, d_m: usize, d_theta: usize) -> Self {
        Ranks { d_s, d_m, d_theta }
    }

    pub fn total(&self) -> usize {
        self.d_s + self.d_m + self.d_theta
    }

    /// Rank of M under the model.
    pub fn rank_m(&self) -> usize {
        self.d_s + self.d_m
    }

    /// Rank of Theta under the model.
    pub fn rank_theta(&self) -> usize {
        self.d_s + self.d_theta
    }

    pub fn check_feasible(&self, n1: usize, n2: usize) -> Result<()> {
        let cap = n1.min(n2);
        if self.rank_m() > cap || self.rank_theta() > cap || self.total() > (2 * n1).min(n2) {
            return Err(Error::InfeasibleRanks {
                d_s: self.d_s,
                d_m: self.d_m,
                d_theta: self.d_theta,
                n1,
                n2,
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for Ranks {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.d_s, self.d_m, self.d_theta)
    }
}

/// Observed matrix with its binary mask. Entries of `x` where `w` is zero are
/// never read and may hold anything, NaN included.
#[derive(Debug, Clone)]
pub struct MaskedData {
    pub x: Mat,
    pub w: Mat,
}

impl MaskedData {
    pub fn new(x: Mat, w: Mat) -> Result<Self> {
        if x.shape() != w.shape() {
            return Err(Error::Dimension {
                block: "mask",
                expected: format!("{:?}", x.shape()),
                got: format!("{:?}", w.shape()),
            });
        }
        for j in 0..w.ncols() {
            for i in 0..w.nrows() {
                let v = w[(i, j)];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::InvalidInput(format!(
                        "mask entry ({i}, {j}) is {v}, expected 0 or 1"
                    )));
                }
                if v == 1.0 && !x[(i, j)].is_finite() {
                    return Err(Error::NonFinite { what: "x", i, j });
                }
            }
        }
        Ok(MaskedData { x, w })
    }

    /// Fully observed data.
    pub fn full(x: Mat) -> Result<Self> {
        let w = Mat::from_element(x.nrows(), x.ncols(), 1.0);
        Self::new(x, w)
    }

    pub fn n1(&self) -> usize {
        self.x.nrows()
    }

    pub fn n2(&self) -> usize {
        self.x.ncols()
    }

    #[inline]
    pub fn observed(&self, i: usize, j: usize) -> bool {
        self.w[(i, j)] != 0.0
    }

    pub fn n_obs(&self) -> usize {
        self.w.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn obs_rate(&self) -> f64 {
        let n = (self.n1() * self.n2()) as f64;
        if n == 0.0 {
            0.0
        } else {
            self.n_obs() as f64 / n
        }
    }

    /// Mean of the observed entries (0 when nothing is observed).
    pub fn observed_mean(&self) -> f64 {
        let mut s = 0.0;
        let mut c = 0usize;
        for j in 0..self.n2() {
            for i in 0..self.n1() {
                if self.observed(i, j) {
                    s += self.x[(i, j)];
                    c += 1;
                }
            }
        }
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    }
}

/// Data-parameter matrix M and observation logits Theta.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPair {
    pub m: Mat,
    pub theta: Mat,
}

impl ParamPair {
    pub fn zeros(n1: usize, n2: usize) -> Self {
        ParamPair {
            m: Mat::zeros(n1, n2),
            theta: Mat::zeros(n1, n2),
        }
    }

    /// H = [M; Theta], a 2 n1 x n2 matrix.
    pub fn stacked(&self) -> Mat {
        let (n1, n2) = self.m.shape();
        let mut h = Mat::zeros(2 * n1, n2);
        h.rows_mut(0, n1).copy_from(&self.m);
        h.rows_mut(n1, n1).copy_from(&self.theta);
        h
    }

    pub fn from_stacked(h: &Mat) -> Self {
        let n1 = h.nrows() / 2;
        ParamPair {
            m: h.rows(0, n1).into_owned(),
            theta: h.rows(n1, n1).into_owned(),
        }
    }

    pub fn frob_norm(&self) -> f64 {
        (self.m.norm_squared() + self.theta.norm_squared()).sqrt()
    }
}

/// Horizontal concatenation.
pub fn hcat(blocks: &[&Mat]) -> Mat {
    let n = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(n, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), n);
        out.columns_mut(c, b.ncols()).copy_from(*b);
        c += b.ncols();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub lambda_m1: Mat,
    pub lambda_m2: Mat,
    pub lambda_th1: Mat,
    pub lambda_th2: Mat,
    pub f_s: Mat,
    pub f_m: Mat,
    pub f_th: Mat,
    pub ranks: Ranks,
}

fn expect_shape(block: &'static str, m: &Mat, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Dimension {
            block,
            expected: format!("{rows}x{cols}"),
            got: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

impl FactorModel {
    pub fn zeros(n1: usize, n2: usize, ranks: Ranks) -> Self {
        FactorModel {
            lambda_m1: Mat::zeros(n1, ranks.d_s),
            lambda_m2: Mat::zeros(n1, ranks.d_m),
            lambda_th1: Mat::zeros(n1, ranks.d_s),
            lambda_th2: Mat::zeros(n1, ranks.d_theta),
            f_s: Mat::zeros(n2, ranks.d_s),
            f_m: Mat::zeros(n2, ranks.d_m),
            f_th: Mat::zeros(n2, ranks.d_theta),
            ranks,
        }
    }

    pub fn n1(&self) -> usize {
        self.lambda_m1.nrows()
    }

    pub fn n2(&self) -> usize {
        self.f_s.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n1 = self.lambda_m1.nrows();
        let n2 = self.f_s.nrows();
        let r = self.ranks;
        expect_shape("lambda_m1", &self.lambda_m1, n1, r.d_s)?;
        expect_shape("lambda_m2", &self.lambda_m2, n1, r.d_m)?;
        expect_shape("lambda_th1", &self.lambda_th1, n1, r.d_s)?;
        expect_shape("lambda_th2", &self.lambda_th2, n1, r.d_theta)?;
        expect_shape("f_s", &self.f_s, n2, r.d_s)?;
        expect_shape("f_m", &self.f_m, n2, r.d_m)?;
        expect_shape("f_th", &self.f_th, n2, r.d_theta)?;
        Ok(())
    }

    /// [Lambda_m1, Lambda_m2].
    pub fn loadings_m(&self) -> Mat {
        hcat(&[&self.lambda_m1, &self.lambda_m2])
    }

    /// [Lambda_th1, Lambda_th2].
    pub fn loadings_theta(&self) -> Mat {
        hcat(&[&self.lambda_th1, &self.lambda_th2])
    }

    /// [F_s, F_m].
    pub fn factors_m(&self) -> Mat {
        hcat(&[&self.f_s, &self.f_m])
    }

    /// [F_s, F_th].
    pub fn factors_theta(&self) -> Mat {
        hcat(&[&self.f_s, &self.f_th])
    }

    pub fn assemble(&self) -> Result<ParamPair> {
        self.validate()?;
        Ok(self.assemble_unchecked())
    }

    pub(crate) fn assemble_unchecked(&self) -> ParamPair {
        let m = &self.lambda_m1 * self.f_s.transpose() + &self.lambda_m2 * self.f_m.transpose();
        let theta =
            &self.lambda_th1 * self.f_s.transpose() + &self.lambda_th2 * self.f_th.transpose();
        ParamPair { m, theta }
    }

    /// Stacked loadings L (2 n1 x d) and factors F (n2 x d) with H = L F^T,
    /// columns ordered (s, m, theta).
    pub fn stacked_factors(&self) -> (Mat, Mat) {
        let n1 = self.n1();
        let r = self.ranks;
        let d = r.total();
        let mut l = Mat::zeros(2 * n1, d);
        l.view_mut((0, 0), (n1, r.d_s)).copy_from(&self.lambda_m1);
        l.view_mut((n1, 0), (n1, r.d_s)).copy_from(&self.lambda_th1);
        l.view_mut((0, r.d_s), (n1, r.d_m)).copy_from(&self.lambda_m2);
        l.view_mut((n1, r.d_s + r.d_m), (n1, r.d_theta))
            .copy_from(&self.lambda_th2);
        (l, hcat(&[&self.f_s, &self.f_m, &self.f_th]))
    }

    pub fn singular_values_h(&self) -> Vec<f64> {
        let (l, f) = self.stacked_factors();
        lowrank_svd(&l, &f).s.iter().cloned().collect()
    }

    pub fn singular_values_m(&self) -> Vec<f64> {
        lowrank_svd(&self.loadings_m(), &self.factors_m())
            .s
            .iter()
            .cloned()
            .collect()
    }

    pub fn singular_values_theta(&self) -> Vec<f64> {
        lowrank_svd(&self.loadings_theta(), &self.factors_theta())
            .s
            .iter()
            .cloned()
            .collect()
    }

    /// Deviations from the identification constraints.
    pub fn constraint_report(&self) -> ConstraintReport {
        let n2 = self.n2() as f64;
        let eye_dev = |f: &Mat| -> f64 {
            if f.ncols() == 0 {
                return 0.0;
            }
            let g = f.tr_mul(f) / n2;
            (g - Mat::identity(f.ncols(), f.ncols())).amax()
        };
        let cross = |a: &Mat, b: &Mat| -> f64 {
            if a.ncols() == 0 || b.ncols() == 0 {
                0.0
            } else {
                a.tr_mul(b).amax()
            }
        };
        let offdiag = |g: &Mat| -> f64 {
            let n = g.nrows();
            if n == 0 {
                return 0.0;
            }
            let dmax = (0..n).map(|i| g[(i, i)].abs()).fold(0.0, f64::max);
            let mut off: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off = off.max(g[(i, j)].abs());
                    }
                }
            }
            if dmax == 0.0 {
                off
            } else {
                off / dmax
            }
        };
        let g_s = self.lambda_m1.tr_mul(&self.lambda_m1) + self.lambda_th1.tr_mul(&self.lambda_th1);
        let g_m = self.lambda_m2.tr_mul(&self.lambda_m2);
        let g_t = self.lambda_th2.tr_mul(&self.lambda_th2);
        ConstraintReport {
            orth_s: eye_dev(&self.f_s),
            orth_m: eye_dev(&self.f_m),
            orth_theta: eye_dev(&self.f_th),
            cross_sm: cross(&self.f_s, &self.f_m) / n2,
            cross_stheta: cross(&self.f_s, &self.f_th) / n2,
            gram_offdiag: offdiag(&g_s).max(offdiag(&g_m)).max(offdiag(&g_t)),
            xi: shared_coupling_xi(self),
        }
    }
}

/// Maximum absolute deviations from the identification constraints. The
/// cross terms are reported divided by n2.
#[derive(Debug, Clone, Copy)]
pub struct ConstraintReport {
    pub orth_s: f64,
    pub orth_m: f64,
    pub orth_theta: f64,
    pub cross_sm: f64,
    pub cross_stheta: f64,
    pub gram_offdiag: f64,
    pub xi: f64,
}

impl ConstraintReport {
    pub fn holds(&self) -> bool {
        self.orth_s <= 1e-8
            && self.orth_m <= 1e-8
            && self.orth_theta <= 1e-8
            && self.cross_sm <= 1e-8
            && self.cross_stheta <= 1e-8
            && self.gram_offdiag <= 1e-6
            && self.xi < 1.0
    }
}

pub fn assemble(fm: &FactorModel) -> Result<ParamPair> {
    fm.assemble()
}

/// Spectral norm of F_m^T F_th / n2; zero when either block is empty.
pub fn shared_coupling_xi(fm: &FactorModel) -> f64 {
    if fm.ranks.d_m == 0 || fm.ranks.d_theta == 0 {
        return 0.0;
    }
    spectral_norm(&(fm.f_m.tr_mul(&fm.f_th) / fm.n2() as f64))
}

/// True when xi is strictly below one, i.e. the specific blocks do not share
/// a direction.
pub fn xi_is_valid(xi: f64) -> bool {
    xi < 1.0 - 1e-12
}

#[derive(Debug, Clone, Copy)]
pub struct SigmaBound {
    pub lhs: f64,
    pub rhs: f64,
    pub xi: f64,
    pub holds: bool,
}

/// Compare sigma_d(H) with sqrt(1 - xi) * min(sigma_{d_s+d_m}(M), sigma_{d_s+d_th}(Theta)).
pub fn check_sigma_lower_bound(fm: &FactorModel) -> SigmaBound {
    let r = fm.ranks;
    let xi = shared_coupling_xi(fm);
    let sh = fm.singular_values_h();
    let lhs = if r.total() == 0 {
        0.0
    } else {
        sh.get(r.total() - 1).cloned().unwrap_or(0.0)
    };
    let mut cands = Vec::new();
    if r.rank_m() > 0 {
        cands.push(fm.singular_values_m()[r.rank_m() - 1]);
    }
    if r.rank_theta() > 0 {
        cands.push(fm.singular_values_theta()[r.rank_theta() - 1]);
    }
    let min_block = cands.into_iter().fold(f64::INFINITY, f64::min);
    let rhs = if min_block.is_finite() {
        (1.0 - xi).max(0.0).sqrt() * min_block
    } else {
        0.0
    };
    SigmaBound {
        lhs,
        rhs,
        xi,
        holds: lhs >= rhs - 1e-8,
    }
}

pub const RANK_REL_TOL: f64 = 1e-10;

fn check_rank(which: &'static str, s: &[f64], r: usize) -> Result<()> {
    if r == 0 {
        return Ok(());
    }
    let smax = s.first().cloned().unwrap_or(0.0);
    let sr = s.get(r - 1).cloned().unwrap_or(0.0);
    if !(sr > RANK_REL_TOL * smax) {
        return Err(Error::RankDeficient {
            which,
            index: r,
            sigma: sr,
            sigma_max: smax,
        });
    }
    Ok(())
}

/// Bring dense (M, Theta) onto the identification constraints at the given
/// ranks. Fails when either matrix has fewer numerically nonzero singular
/// values than the ranks require.
pub fn canonicalize(m: &Mat, theta: &Mat, ranks: Ranks) -> Result<FactorModel> {
    canonicalize_with(m, theta, ranks, true)
}

/// As [`canonicalize`]; with `strict = false` rank deficiency is tolerated
/// and missing directions are filled arbitrarily (used for initialization).
pub fn canonicalize_with(m: &Mat, theta: &Mat, ranks: Ranks, strict: bool) -> Result<FactorModel> {
    if m.shape() != theta.shape() {
        return Err(Error::Dimension {
            block: "theta",
            expected: format!("{:?}", m.shape()),
            got: format!("{:?}", theta.shape()),
        });
    }
    let (n1, n2) = m.shape();
    ranks.check_feasible(n1, n2)?;
    let sm = top_svd(m, ranks.rank_m() + 1, None);
    let st = top_svd(theta, ranks.rank_theta() + 1, None);
    canon_from_svds(sm, st, ranks, strict, n1, n2)
}

/// Canonicalize M = a_m b_m^T, Theta = a_t b_t^T given in factored form.
pub fn canonicalize_factored(
    a_m: &Mat,
    b_m: &Mat,
    a_t: &Mat,
    b_t: &Mat,
    ranks: Ranks,
    strict: bool,
) -> Result<FactorModel> {
    let n1 = a_m.nrows();
    let n2 = b_m.nrows();
    ranks.check_feasible(n1, n2)?;
    let sm = lowrank_svd(a_m, b_m);
    let st = lowrank_svd(a_t, b_t);
    canon_from_svds(sm, st, ranks, strict, n1, n2)
}

/// Re-express a model in canonical form without changing its product.
pub fn recanonicalize(fm: &FactorModel, strict: bool) -> Result<FactorModel> {
    canonicalize_factored(
        &fm.loadings_m(),
        &fm.factors_m(),
        &fm.loadings_theta(),
        &fm.factors_theta(),
        fm.ranks,
        strict,
    )
}

/// Orthonormalize `cand` against the orthonormal columns of `basis` and
/// itself; columns that collapse are replaced by seeded Gaussian directions.
fn orthonormal_completion(basis: &Mat, cand: &Mat, seed: u64) -> Mat {
    let n = cand.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Mat::zeros(n, cand.ncols());
    for c in 0..cand.ncols() {
        let mut v = cand.column(c).into_owned();
        let mut tries = 0;
        loop {
            for _ in 0..2 {
                for b in 0..basis.ncols() {
                    let p = basis.column(b).dot(&v);
                    v.axpy(-p, &basis.column(b), 1.0);
                }
                for b in 0..c {
                    let p = out.column(b).dot(&v);
                    v.axpy(-p, &out.column(b), 1.0);
                }
            }
            let nv = v.norm();
            if nv > 1e-8 || tries > 5 {
                out.set_column(c, &(v / nv.max(1e-300)));
                break;
            }
            v = crate::linalg::Vecd::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            tries += 1;
        }
    }
    out
}

fn canon_from_svds(
    sm: Svd,
    st: Svd,
    ranks: Ranks,
    strict: bool,
    n1: usize,
    n2: usize,
) -> Result<FactorModel> {
    let rm = ranks.rank_m();
    let rt = ranks.rank_theta();
    if strict {
        check_rank("m", sm.s.as_slice(), rm)?;
        check_rank("theta", st.s.as_slice(), rt)?;
    }
    let pad = |s: Svd, r: usize, salt: u64| -> (Mat, Mat) {
        let have = s.s.len().min(r);
        let s = s.truncate(have);
        let mut am = Mat::zeros(n1, r);
        am.columns_mut(0, have).copy_from(&s.us());
        let mut v = Mat::zeros(n2, r);
        v.columns_mut(0, have).copy_from(&s.v);
        if have < r {
            let extra = orthonormal_completion(&s.v, &Mat::zeros(n2, r - have), salt);
            v.columns_mut(have, r - have).copy_from(&extra);
        }
        (am, v)
    };
    let (am, vm) = pad(sm, rm, 11);
    let (at, vt) = pad(st, rt, 13);
    let ds = ranks.d_s;
    let sqn2 = (n2 as f64).sqrt();

    // Shared directions: leading canonical pairs of the two row spaces.
    let u_s = if ds > 0 {
        let c = svd(&vm.tr_mul(&vt));
        let a = &vm * c.u.columns(0, ds);
        let b = &vt * c.v.columns(0, ds);
        let avg = (a + b) * 0.5;
        let p = svd(&avg);
        let polar = &p.u * p.v.transpose();
        orthonormal_completion(&Mat::zeros(n2, 0), &polar, 17)
    } else {
        Mat::zeros(n2, 0)
    };

    let specific = |v: &Mat, d: usize, salt: u64| -> Mat {
        if d == 0 {
            return Mat::zeros(n2, 0);
        }
        let resid = v - &u_s * u_s.tr_mul(v);
        let r = svd(&resid);
        let take = r.u.ncols().min(d);
        let mut cand = Mat::zeros(n2, d);
        cand.columns_mut(0, take).copy_from(&r.u.columns(0, take));
        orthonormal_completion(&u_s, &cand, salt)
    };
    let u_m = specific(&vm, ranks.d_m, 19);
    let u_t = specific(&vt, ranks.d_theta, 23);

    let f_s = &u_s * sqn2;
    let f_m = &u_m * sqn2;
    let f_th = &u_t * sqn2;
    // Least-squares loadings: M F / n2 with M = am vm^T.
    let lam = |a: &Mat, v: &Mat, f: &Mat| -> Mat { a * (v.tr_mul(f) / n2 as f64) };
    let mut fm = FactorModel {
        lambda_m1: lam(&am, &vm, &f_s),
        lambda_m2: lam(&am, &vm, &f_m),
        lambda_th1: lam(&at, &vt, &f_s),
        lambda_th2: lam(&at, &vt, &f_th),
        f_s,
        f_m,
        f_th,
        ranks,
    };
    diagonalize_blocks(&mut fm);
    Ok(fm)
}

/// Rotate within each block so the loading Gram matrices are diagonal with
/// decreasing entries, then fix factor column signs.
pub fn diagonalize_blocks(fm: &mut FactorModel) {
    let rot = |g: &Mat| sym_eigen_desc(g).1;
    if fm.ranks.d_s > 0 {
        let g = fm.lambda_m1.tr_mul(&fm.lambda_m1) + fm.lambda_th1.tr_mul(&fm.lambda_th1);
        let r = rot(&g);
        fm.f_s = &fm.f_s * &r;
        fm.lambda_m1 = &fm.lambda_m1 * &r;
        fm.lambda_th1 = &fm.lambda_th1 * &r;
    }
    if fm.ranks.d_m > 0 {
        let r = rot(&fm.lambda_m2.tr_mul(&fm.lambda_m2));
        fm.f_m = &fm.f_m * &r;
        fm.lambda_m2 = &fm.lambda_m2 * &r;
    }
    if fm.ranks.d_theta > 0 {
        let r = rot(&fm.lambda_th2.tr_mul(&fm.lambda_th2));
        fm.f_th = &fm.f_th * &r;
        fm.lambda_th2 = &fm.lambda_th2 * &r;
    }
    fix_signs(fm);
}

fn sign_of_largest(col: nalgebra::DVectorView<'_, f64>) -> f64 {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &v in col.iter() {
        if v.abs() > best {
            best = v.abs();
            sign = if v < 0.0 { -1.0 } else { 1.0 };
        }
    }
    sign
}

/// Flip factor columns (and their loadings) so each factor column's
/// largest-magnitude entry is positive.
pub fn fix_signs(fm: &mut FactorModel) {
    for c in 0..fm.ranks.d_s {
        if sign_of_largest(fm.f_s.column(c)) < 0.0 {
            fm.f_s.column_mut(c).neg_mut();
            fm.lambda_m1.column_mut(c).neg_mut();
            fm.lambda_th1.column_mut(c).neg_mut();
        }
    }
    for c in 0..fm.ranks.d_m {
        if sign_of_largest(fm.f_m.column(c)) < 0.0 {
            fm.f_m.column_mut(c).neg_mut();
            fm.lambda_m2.column_mut(c).neg_mut();
        }
    }
    for c in 0..fm.ranks.d_theta {
        if sign_of_largest(fm.f_th.column(c)) < 0.0 {
            fm.f_th.column_mut(c).neg_mut();
            fm.lambda_th2.column_mut(c).neg_mut();
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    pub fn gauss(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Mat {
        Mat::from_fn(n, m, |_, _| StandardNormal.sample(rng))
    }

    /// Random model with generic (non-canonical) blocks.
    pub fn random_model(seed: u64, n1: usize, n2: usize, r: Ranks) -> FactorModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FactorModel {
            lambda_m1: gauss(&mut rng, n1, r.d_s),
            lambda_m2: gauss(&mut rng, n1, r.d_m),
            lambda_th1: gauss(&mut rng, n1, r.d_s),
            lambda_th2: gauss(&mut rng, n1, r.d_theta),
            f_s: gauss(&mut rng, n2, r.d_s),
            f_m: gauss(&mut rng, n2, r.d_m),
            f_th: gauss(&mut rng, n2, r.d_theta),
            ranks: r,
        }
    }

    pub fn random_canonical(seed: u64, n1: usize, n2: usize, r: Ranks) -> FactorModel {
        let p = random_model(seed, n1, n2, r).assemble().unwrap();
        canonicalize(&p.m, &p.theta, r).unwrap()
    }

    #[test]
    fn assemble_zero_and_rank_one() {
        let fm = FactorModel::zeros(3, 4, Ranks::new(1, 1, 1));
        let p = assemble(&fm).unwrap();
        assert_eq!(p.m, Mat::zeros(3, 4));
        assert_eq!(p.theta, Mat::zeros(3, 4));

        let mut fm = FactorModel::zeros(3, 4, Ranks::new(1, 0, 0));
        fm.lambda_m1.fill(1.0);
        fm.f_s.fill(1.0);
        assert_eq!(assemble(&fm).unwrap().m, Mat::from_element(3, 4, 1.0));
    }

    #[test]
    fn assemble_matches_entrywise_loop() {
        let fm = random_model(7, 5, 5, Ranks::new(2, 1, 1));
        let p = assemble(&fm).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut m = 0.0;
                let mut t = 0.0;
                for k in 0..2 {
                    m += fm.lambda_m1[(i, k)] * fm.f_s[(j, k)];
                    t += fm.lambda_th1[(i, k)] * fm.f_s[(j, k)];
                }
                m += fm.lambda_m2[(i, 0)] * fm.f_m[(j, 0)];
                t += fm.lambda_th2[(i, 0)] * fm.f_th[(j, 0)];
                assert!((p.m[(i, j)] - m).abs() < 1e-12);
                assert!((p.theta[(i, j)] - t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assemble_names_bad_block() {
        let mut fm = random_model(1, 4, 5, Ranks::new(1, 1, 1));
        fm.f_m = Mat::zeros(4, 1);
        match assemble(&fm) {
            Err(Error::Dimension { block, .. }) => assert_eq!(block, "f_m"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn assemble_linear_in_specific_block() {
        let fm = random_model(3, 6, 7, Ranks::new(1, 2, 1));
        let mut scaled = fm.clone();
        scaled.lambda_m2 *= 2.5;
        let base = assemble(&fm).unwrap();
        let sc = assemble(&scaled).unwrap();
        let spec = &fm.lambda_m2 * fm.f_m.transpose();
        let diff = &sc.m - &base.m - spec * 1.5;
        assert!(diff.amax() < 1e-12);
    }

    #[test]
    fn canonical_input_reproduced_up_to_sign() {
        let r = Ranks::new(2, 1, 2);
        let fm = random_canonical(5, 20, 25, r);
        let p = fm.assemble().unwrap();
        let again = canonicalize(&p.m, &p.theta, r).unwrap();
        for (a, b) in [
            (&fm.f_s, &again.f_s),
            (&fm.f_m, &again.f_m),
            (&fm.f_th, &again.f_th),
        ] {
            for c in 0..a.ncols() {
                let d1 = (a.column(c) - b.column(c)).amax();
                let d2 = (a.column(c) + b.column(c)).amax();
                assert!(d1.min(d2) < 1e-7, "column {c} moved: {d1} {d2}");
                assert!(d1 < 1e-7, "sign convention should make flips vanish");
            }
        }
    }

    #[test]
    fn decoupled_case_uses_separate_svds() {
        let r = Ranks::new(0, 2, 1);
        let fm = random_canonical(9, 15, 12, r);
        assert_eq!(fm.f_s.ncols(), 0);
        let p = fm.assemble().unwrap();
        let sm = crate::linalg::svd(&p.m);
        let lm: Vec<f64> = fm.singular_values_m();
        for k in 0..2 {
            assert!((lm[k] - sm.s[k]).abs() < 1e-9 * sm.s[0]);
        }
    }

    #[test]
    fn rank_deficient_input_is_rejected() {
        let fm = random_model(2, 10, 10, Ranks::new(1, 0, 0));
        let p = fm.assemble().unwrap();
        match canonicalize(&p.m, &p.theta, Ranks::new(1, 1, 0)) {
            Err(Error::RankDeficient { which, index, .. }) => {
                assert_eq!(which, "m");
                assert_eq!(index, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn xi_cases() {
        let n2 = 50;
        let mut fm = FactorModel::zeros(4, n2, Ranks::new(0, 1, 1));
        for j in 0..n2 {
            let s = if j % 2 == 0 { 1.0 } else { -1.0 };
            fm.f_m[(j, 0)] = 1.0;
            fm.f_th[(j, 0)] = s;
        }
        assert!(shared_coupling_xi(&fm).abs() < 1e-12);
        fm.f_th = fm.f_m.clone();
        let xi = shared_coupling_xi(&fm);
        assert!((xi - 1.0).abs() < 1e-12);
        assert!(!xi_is_valid(xi));

        let fm = random_canonical(4, 30, n2, Ranks::new(1, 2, 2));
        let cross = fm.f_m.tr_mul(&fm.f_th) / n2 as f64;
        let direct = crate::linalg::svd(&cross).s[0];
        assert!((shared_coupling_xi(&fm) - direct).abs() < 1e-14);
        assert!(xi_is_valid(direct));
    }

    #[test]
    fn sigma_bound_decoupled_reduction() {
        let fm = random_canonical(8, 20, 24, Ranks::new(3, 0, 0));
        let b = check_sigma_lower_bound(&fm);
        assert_eq!(b.xi, 0.0);
        let sm = fm.singular_values_m()[2];
        let st = fm.singular_values_theta()[2];
        assert!((b.rhs - sm.min(st)).abs() < 1e-12);
        assert!(b.holds);
    }

    /// Zero shared block, one specific factor each with equal loading norms
    /// and factor correlation xi: the bound holds with equality.
    #[test]
    fn sigma_bound_tight_instance() {
        let n1 = 12;
        let n2 = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let q = orth_cols(&gauss(&mut rng, n2, 2));
        let rho: f64 = 0.6;
        let sq = (n2 as f64).sqrt();
        let f1 = q.column(0) * sq;
        let f2 = (q.column(0) * rho + q.column(1) * (1.0 - rho * rho).sqrt()) * sq;
        let a = gauss(&mut rng, n1, 1);
        let mut fm = FactorModel::zeros(n1, n2, Ranks::new(0, 1, 1));
        fm.f_m.set_column(0, &f1);
        fm.f_th.set_column(0, &f2);
        fm.lambda_m2 = a.clone();
        fm.lambda_th2 = a;
        let b = check_sigma_lower_bound(&fm);
        assert!((b.xi - rho).abs() < 1e-12);
        assert!(b.holds);
        assert!((b.lhs - b.rhs).abs() < 1e-6 * b.rhs, "{b:?}");
    }

    fn orth_cols(a: &Mat) -> Mat {
        crate::linalg::orth(a)
    }

    fn check_canonical(fm: &FactorModel) {
        let rep = fm.constraint_report();
        let n2 = fm.n2() as f64;
        assert!(rep.orth_s <= 1e-8, "{rep:?}");
        assert!(rep.orth_m <= 1e-8, "{rep:?}");
        assert!(rep.orth_theta <= 1e-8, "{rep:?}");
        assert!(rep.cross_sm * n2 <= 1e-8 * n2, "{rep:?}");
        assert!(rep.cross_stheta * n2 <= 1e-8 * n2, "{rep:?}");
        assert!(rep.gram_offdiag <= 1e-6, "{rep:?}");
        assert!(rep.xi < 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn canonicalize_invariants_and_round_trip(
            seed in 0u64..10_000,
            n1 in 8usize..30,
            n2 in 8usize..30,
            ds in 0usize..3,
            dm in 0usize..3,
            dt in 0usize..3,
        ) {
            let r = Ranks::new(ds, dm, dt);
            prop_assume!(r.rank_m() <= n1.min(n2) && r.rank_theta() <= n1.min(n2));
            let truth = random_model(seed, n1, n2, r).assemble().unwrap();
            let fm = canonicalize(&truth.m, &truth.theta, r).unwrap();
            check_canonical(&fm);
            let back = fm.assemble().unwrap();
            let err = ((&back.m - &truth.m).norm_squared()
                + (&back.theta - &truth.theta).norm_squared()).sqrt();
            prop_assert!(err <= 1e-8 * truth.frob_norm().max(1e-300));
            // canonicalize . assemble . canonicalize is sign stable
            let again = canonicalize(&back.m, &back.theta, r).unwrap();
            let d = (&again.f_s - &fm.f_s).amax()
                .max((&again.f_m - &fm.f_m).amax())
                .max((&again.f_th - &fm.f_th).amax());
            prop_assert!(d < 1e-6, "drift {}", d);
        }

        #[test]
        fn lemma_bound_holds(
            seed in 0u64..100_000,
            n1 in 10usize..40,
            n2 in 10usize..40,
            ds in 0usize..3,
            dm in 0usize..3,
            dt in 0usize..3,
        ) {
            let r = Ranks::new(ds, dm, dt);
            prop_assume!(r.total() > 0 && r.rank_m() <= n1.min(n2) && r.rank_theta() <= n1.min(n2));
            let fm = random_canonical(seed, n1, n2, r);
            let b = check_sigma_lower_bound(&fm);
            prop_assert!(b.holds, "{:?}", b);
        }

        #[test]
        fn gram_rotation_keeps_product(seed in 0u64..1000, c in 0.1f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = Ranks::new(1, 1, 1);
            let mut fm = random_model(rng.random(), 9, 11, r);
            fm.lambda_m2 *= c;
            let before = fm.assemble().unwrap();
            diagonalize_blocks(&mut fm);
            let after = fm.assemble().unwrap();
            prop_assert!((&before.m - &after.m).amax() < 1e-10);
        }
    }
}
