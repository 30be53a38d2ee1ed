//! Rank estimation from a penalized fit by thresholding singular values.

use crate::error::{Error, RankCounts, Result};
use crate::linalg::singular_values;
use crate::mcp::McpFit;
use crate::model::{ParamPair, Ranks, RANK_REL_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct RankEstimate {
    pub d_hat: usize,
    pub d_s: usize,
    pub d_m: usize,
    pub d_theta: usize,
    pub threshold: f64,
    pub sv_h: Vec<f64>,
    pub sv_m: Vec<f64>,
    pub sv_theta: Vec<f64>,
}

impl RankEstimate {
    pub fn ranks(&self) -> Ranks {
        Ranks::new(self.d_s, self.d_m, self.d_theta)
    }
}

fn numerical_rank(s: &[f64]) -> usize {
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > RANK_REL_TOL * smax).count()
}

/// Split the counts into (d_s, d_m, d_theta).
pub fn split_counts(d_hat: usize, count_m: usize, count_theta: usize) -> Result<Ranks> {
    let bad = || {
        Error::InconsistentRanks(RankCounts {
            d_hat,
            count_m,
            count_theta,
        })
    };
    let d_theta = d_hat.checked_sub(count_m).ok_or_else(bad)?;
    let d_m = d_hat.checked_sub(count_theta).ok_or_else(bad)?;
    let d_s = (count_m + count_theta).checked_sub(d_hat).ok_or_else(bad)?;
    Ok(Ranks::new(d_s, d_m, d_theta))
}

/// Estimate ranks from singular values of H, M and Theta at threshold `t`.
pub fn estimate_from_values(sv_h: Vec<f64>, sv_m: Vec<f64>, sv_theta: Vec<f64>, t: f64) -> Result<RankEstimate> {
    if !(t > 0.0) {
        return Err(Error::InvalidInput(format!("threshold must be positive, got {t}")));
    }
    let d_hat = numerical_rank(&sv_h);
    let count_m = sv_m.iter().filter(|&&s| s > t).count();
    let count_theta = sv_theta.iter().filter(|&&s| s > t).count();
    let r = split_counts(d_hat, count_m, count_theta)?;
    Ok(RankEstimate {
        d_hat,
        d_s: r.d_s,
        d_m: r.d_m,
        d_theta: r.d_theta,
        threshold: t,
        sv_h,
        sv_m,
        sv_theta,
    })
}

/// Dense version: computes all singular values of H, M and Theta.
pub fn estimate_ranks(h_hat: &ParamPair, t: f64) -> Result<RankEstimate> {
    let sv = |a: &crate::linalg::Mat| singular_values(a).iter().cloned().collect::<Vec<_>>();
    estimate_from_values(sv(&h_hat.stacked()), sv(&h_hat.m), sv(&h_hat.theta), t)
}

/// Same estimate using the factored form kept by the penalized fit.
pub fn estimate_ranks_fit(fit: &McpFit, t: f64) -> Result<RankEstimate> {
    estimate_from_values(fit.s.clone(), fit.singular_values_m(), fit.singular_values_theta(), t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::model::tests::random_canonical;
    use proptest::prelude::*;

    #[test]
    fn split_examples() {
        assert_eq!(split_counts(9, 7, 7).unwrap(), Ranks::new(5, 2, 2));
        assert_eq!(split_counts(9, 9, 9).unwrap(), Ranks::new(9, 0, 0));
        assert_eq!(split_counts(6, 6, 6).unwrap(), Ranks::new(6, 0, 0));
        match split_counts(9, 3, 3) {
            Err(Error::InconsistentRanks(c)) => assert_eq!((c.d_hat, c.count_m, c.count_theta), (9, 3, 3)),
            other => panic!("{other:?}"),
        }
        assert!(split_counts(2, 3, 1).is_err());
    }

    #[test]
    fn exact_low_rank_model() {
        let fm = random_canonical(3, 30, 25, Ranks::new(2, 1, 1));
        let p = fm.assemble().unwrap();
        let smin = fm
            .singular_values_m()
            .last()
            .cloned()
            .unwrap()
            .min(fm.singular_values_theta().last().cloned().unwrap());
        let est = estimate_ranks(&p, 0.5 * smin).unwrap();
        assert_eq!(est.ranks(), Ranks::new(2, 1, 1));
        assert_eq!(est.d_s + est.d_m + est.d_theta, est.d_hat);
        let zero = ParamPair::zeros(4, 5);
        assert_eq!(estimate_ranks(&zero, 1.0).unwrap().ranks(), Ranks::new(0, 0, 0));
        assert!(estimate_ranks(&zero, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn threshold_monotone(seed in 0u64..500, t1 in 0.01f64..20.0, t2 in 0.01f64..20.0) {
            let fm = random_canonical(seed, 15, 12, Ranks::new(1, 1, 2));
            let p = fm.assemble().unwrap();
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let count = |a: &Mat, t: f64| singular_values(a).iter().filter(|&&s| s > t).count();
            prop_assert!(count(&p.m, hi) <= count(&p.m, lo));
            prop_assert!(count(&p.theta, hi) <= count(&p.theta, lo));
            if let Ok(e) = estimate_ranks(&p, lo) {
                prop_assert_eq!(e.d_s + e.d_m + e.d_theta, e.d_hat);
            }
        }
    }
}
