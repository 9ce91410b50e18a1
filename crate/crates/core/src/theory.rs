//! Probability bound for the existence of a recommendation that meets both a
//! target recall `c` and the proportional-interaction criterion.
//!
//! User degrees are modelled as Pareto with exponent `beta`, so a user has more
//! than `k` liked items with probability `p = k^(1 - beta)`. A Chernoff bound
//! on the binomial lower tail then bounds the probability `q` that an item is
//! at risk of discrimination, and
//!
//! ```text
//! P(condition-1) <= 1 - prod_{u: |I_u| > k} (1 - sum_{j=k+1}^{|I_u|} C(|I_u|, j) q^j)
//! ```
//!
//! Everything is evaluated in log space; intermediates that leave `[0, 1]`
//! collapse to the vacuous bound `1` with a diagnostic instead of erroring.

use std::io::Write;

use serde::Serialize;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("no degrees to fit")]
    NoDegrees,
    #[error("x_min must be finite and at least 1, got {0}")]
    BadMinimum(f64),
    #[error("degree {value} is below x_min = {x_min}")]
    BelowMinimum { value: f64, x_min: f64 },
    #[error("all {n} degrees equal x_min; the Pareto exponent is unbounded")]
    Degenerate { n: usize },
    #[error("target recall must lie in (0, 1), got {0}")]
    BadRecall(f64),
    #[error("list length k must be at least 1")]
    ZeroK,
}

pub type Result<T> = std::result::Result<T, TheoryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParetoFit {
    pub beta: f64,
    pub n: usize,
    pub x_min: f64,
}

/// Continuous Pareto maximum-likelihood exponent `1 + n / sum ln(x / x_min)`.
pub fn fit_pareto_beta(degrees: &[f64], x_min: f64) -> Result<ParetoFit> {
    if !(x_min.is_finite() && x_min >= 1.0) {
        return Err(TheoryError::BadMinimum(x_min));
    }
    if degrees.is_empty() {
        return Err(TheoryError::NoDegrees);
    }
    let mut log_sum = 0.0;
    for &d in degrees {
        if !(d >= x_min) {
            return Err(TheoryError::BelowMinimum { value: d, x_min });
        }
        log_sum += (d / x_min).ln();
    }
    if log_sum <= 0.0 {
        return Err(TheoryError::Degenerate { n: degrees.len() });
    }
    Ok(ParetoFit {
        beta: 1.0 + degrees.len() as f64 / log_sum,
        n: degrees.len(),
        x_min,
    })
}

/// Probability that a Pareto-degree user likes more than `k` items: `k^(1 - beta)`.
pub fn p_at_risk(k: usize, beta: f64) -> f64 {
    (k as f64).powf(1.0 - beta)
}

/// KL exponent `(1-c) ln((1-c)/p) + c ln(c/(1-p))` without any range check.
pub fn chernoff_exponent(c: f64, p: f64) -> f64 {
    (1.0 - c) * ((1.0 - c) / p).ln() + c * (c / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MembershipBound {
    pub q: f64,
    pub ln_q: f64,
    /// The Chernoff bound does not apply at these parameters and `q = 1`.
    pub vacuous: bool,
}

impl MembershipBound {
    const VACUOUS: Self = Self {
        q: 1.0,
        ln_q: 0.0,
        vacuous: true,
    };
}

/// Upper bound `q = exp(-D)` on the probability that an item is at risk.
///
/// The bound holds only on the lower tail, i.e. when `1 - c > p`; elsewhere,
/// and for `p` or `c` outside `(0, 1)`, the result is the vacuous `q = 1`.
pub fn membership_bound_q(c: f64, p: f64) -> MembershipBound {
    let in_range = |x: f64| x > 0.0 && x < 1.0;
    if !in_range(c) || !in_range(p) || !(1.0 - c > p) {
        return MembershipBound::VACUOUS;
    }
    let d = chernoff_exponent(c, p);
    if !(d.is_finite() && d >= 0.0) {
        return MembershipBound::VACUOUS;
    }
    MembershipBound {
        q: (-d).exp(),
        ln_q: -d,
        vacuous: false,
    }
}

fn ln_choose(n: u64, j: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(j as f64 + 1.0) - ln_gamma((n - j) as f64 + 1.0)
}

/// `ln sum_{j=k+1}^{n} C(n, j) q^j`, or `-inf` when the sum is empty.
pub fn ln_binomial_tail(n: u64, k: u64, ln_q: f64) -> f64 {
    if n <= k {
        return f64::NEG_INFINITY;
    }
    let terms: Vec<f64> = (k + 1..=n).map(|j| ln_choose(n, j) + j as f64 * ln_q).collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundInputs {
    pub user_degrees: Vec<u32>,
    pub k: usize,
    pub c: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub p: f64,
    pub q: f64,
    pub bound: f64,
    /// Users with more than `k` items.
    pub at_risk_users: usize,
    /// At-risk users whose inner sum reached 1.
    pub saturated_users: usize,
    pub vacuous: bool,
    pub diagnostic: Option<String>,
}

/// Upper bound on the probability of condition-1 for the given degrees.
pub fn condition1_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    let BoundInputs {
        user_degrees,
        k,
        c,
        beta,
    } = inputs;
    if !(*c > 0.0 && *c < 1.0) {
        return Err(TheoryError::BadRecall(*c));
    }
    if *k == 0 {
        return Err(TheoryError::ZeroK);
    }
    let at_risk: Vec<u64> = user_degrees
        .iter()
        .filter(|&&d| d as usize > *k)
        .map(|&d| d as u64)
        .collect();

    let p = p_at_risk(*k, *beta);
    let mut diagnostic = None;
    let mb = if beta.is_finite() && *beta > 1.0 {
        let mb = membership_bound_q(*c, p);
        if mb.vacuous {
            diagnostic = Some(format!(
                "Chernoff bound inapplicable: 1 - c = {} is not above p = {p}",
                1.0 - c
            ));
        }
        mb
    } else {
        diagnostic = Some(format!("degenerate Pareto exponent beta = {beta}"));
        MembershipBound::VACUOUS
    };

    if at_risk.is_empty() {
        return Ok(BoundReport {
            p,
            q: mb.q,
            bound: 0.0,
            at_risk_users: 0,
            saturated_users: 0,
            vacuous: false,
            diagnostic,
        });
    }

    let mut ln_prod = 0.0;
    let mut saturated = 0usize;
    for &n in &at_risk {
        let inner = ln_binomial_tail(n, *k as u64, mb.ln_q).exp().clamp(0.0, 1.0);
        if inner >= 1.0 {
            saturated += 1;
            ln_prod = f64::NEG_INFINITY;
        } else {
            ln_prod += (-inner).ln_1p();
        }
    }
    let bound = (-ln_prod.exp_m1()).clamp(0.0, 1.0);
    if saturated > 0 && diagnostic.is_none() {
        diagnostic = Some(format!("{saturated} users have an inner tail sum of at least 1"));
    }
    Ok(BoundReport {
        p,
        q: mb.q,
        bound,
        at_risk_users: at_risk.len(),
        saturated_users: saturated,
        vacuous: mb.vacuous || bound >= 1.0,
        diagnostic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub c: f64,
    pub k: usize,
    pub beta: f64,
    pub q: f64,
    pub bound: f64,
}

/// Bound over every `(c, k)` combination, `c` varying fastest.
pub fn bound_grid(degrees: &[u32], cs: &[f64], ks: &[usize], beta: f64) -> Result<Vec<GridRow>> {
    let mut rows = Vec::with_capacity(cs.len() * ks.len());
    for &k in ks {
        for &c in cs {
            let rep = condition1_bound(&BoundInputs {
                user_degrees: degrees.to_vec(),
                k,
                c,
                beta,
            })?;
            rows.push(GridRow {
                c,
                k,
                beta,
                q: rep.q,
                bound: rep.bound,
            });
        }
    }
    Ok(rows)
}

pub fn write_grid_csv<W: Write>(rows: &[GridRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "c,k,beta,q,bound")?;
    for r in rows {
        writeln!(out, "{},{},{},{:e},{:e}", r.c, r.k, r.beta, r.q, r.bound)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use num::{BigInt, BigRational, One, ToPrimitive, Zero};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn pareto_closed_form() {
        let x_min = 3.0;
        let degrees = vec![std::f64::consts::E * x_min; 50];
        let fit = fit_pareto_beta(&degrees, x_min).unwrap();
        assert_relative_eq!(fit.beta, 2.0, max_relative = 1e-12);
        assert_eq!(fit.n, 50);
    }

    #[test]
    fn pareto_errors() {
        assert_eq!(fit_pareto_beta(&[2.0, 2.0], 2.0), Err(TheoryError::Degenerate { n: 2 }));
        assert!(matches!(fit_pareto_beta(&[1.0], 2.0), Err(TheoryError::BelowMinimum { .. })));
        assert_eq!(fit_pareto_beta(&[], 1.0), Err(TheoryError::NoDegrees));
        assert_eq!(fit_pareto_beta(&[3.0], 0.5), Err(TheoryError::BadMinimum(0.5)));
    }

    #[test]
    fn pareto_recovers_sampled_exponent() {
        // inverse-CDF sampling of density (beta - 1) x^-beta on [1, inf)
        let beta = 2.5;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                let u: f64 = 1.0 - rng.random::<f64>();
                u.powf(-1.0 / (beta - 1.0))
            })
            .collect();
        let fit = fit_pareto_beta(&xs, 1.0).unwrap();
        assert!((fit.beta - beta).abs() < 0.02, "beta = {}", fit.beta);
    }

    #[test]
    fn q_examples() {
        assert_abs_diff_eq!(p_at_risk(20, 2.0), 0.05, epsilon = 1e-15);
        // mpmath at 40 digits on the f64 inputs
        assert_relative_eq!(chernoff_exponent(0.99, 0.05), 0.024736149824367585, max_relative = 1e-13);
        // 1 - c = 0.01 is not above p = 0.05: outside the lower tail
        let corner = membership_bound_q(0.99, 0.05);
        assert!(corner.vacuous);
        assert_eq!(corner.q, 1.0);
        let valid = membership_bound_q(0.9, p_at_risk(20, 3.0));
        assert!(!valid.vacuous);
        assert_relative_eq!(valid.q, 0.7585729573112043, max_relative = 1e-13);
        // 1 - c = p: first KL term vanishes and the second is c ln 1 = 0
        let edge = membership_bound_q(0.75, 0.25);
        assert_eq!(edge.q, 1.0);
        assert!(membership_bound_q(1.0, 0.1).vacuous);
        assert!(membership_bound_q(0.5, 0.0).vacuous);
    }

    fn exact_tail(n: u64, k: u64, q: f64) -> f64 {
        let q = BigRational::from_float(q).unwrap();
        let mut sum = BigRational::zero();
        let mut binom = BigInt::one();
        let mut q_pow = BigRational::one();
        for j in 0..=n {
            if j > 0 {
                binom = binom * BigInt::from(n - j + 1) / BigInt::from(j);
                q_pow = &q_pow * &q;
            }
            if j > k {
                sum += BigRational::from_integer(binom.clone()) * &q_pow;
            }
        }
        sum.to_f64().unwrap()
    }

    #[test]
    fn log_tail_matches_exact_rational_sum() {
        for &q in &[1e-3, 0.01, 0.0731, 0.2, 0.5] {
            for n in 1..=60u64 {
                for &k in &[0u64, 1, 5, 20, 40] {
                    let exact = exact_tail(n, k, q);
                    let got = ln_binomial_tail(n, k, q.ln()).exp();
                    if n <= k {
                        assert_eq!(got, 0.0);
                        assert_eq!(exact, 0.0);
                    } else {
                        assert_relative_eq!(got, exact, max_relative = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn no_at_risk_users_gives_zero() {
        let rep = condition1_bound(&BoundInputs {
            user_degrees: vec![3, 20, 7],
            k: 20,
            c: 0.9,
            beta: 3.0,
        })
        .unwrap();
        assert_eq!(rep.bound, 0.0);
        assert_eq!(rep.at_risk_users, 0);
    }

    #[test]
    fn bound_shrinks_with_q() {
        let degrees = vec![25u32, 30, 40, 22];
        let mut last = f64::INFINITY;
        for beta in [3.5, 4.0, 6.0, 10.0, 20.0] {
            let rep = condition1_bound(&BoundInputs {
                user_degrees: degrees.clone(),
                k: 20,
                c: 0.5,
                beta,
            })
            .unwrap();
            assert!(rep.bound <= last);
            last = rep.bound;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn inapplicable_chernoff_is_vacuous() {
        // c = 0.99 needs p < 0.01, i.e. beta > 1 + ln 100 / ln 20 ~ 2.54 at k = 20
        let rep = condition1_bound(&BoundInputs {
            user_degrees: vec![50, 100, 200],
            k: 20,
            c: 0.99,
            beta: 1.5,
        })
        .unwrap();
        assert!(rep.vacuous);
        assert_eq!(rep.bound, 1.0);
        assert!(rep.diagnostic.is_some());

        let rep = condition1_bound(&BoundInputs {
            user_degrees: vec![50],
            k: 20,
            c: 0.5,
            beta: f64::INFINITY,
        })
        .unwrap();
        assert!(rep.vacuous);
    }

    #[test]
    fn invalid_inputs() {
        let base = BoundInputs {
            user_degrees: vec![5],
            k: 2,
            c: 0.5,
            beta: 2.0,
        };
        let bad_c = BoundInputs { c: 1.0, ..base.clone() };
        assert_eq!(condition1_bound(&bad_c), Err(TheoryError::BadRecall(1.0)));
        let bad_k = BoundInputs { k: 0, ..base };
        assert_eq!(condition1_bound(&bad_k), Err(TheoryError::ZeroK));
    }

    #[test]
    fn grid_csv() {
        let rows = bound_grid(&[30, 40], &[0.5, 0.9], &[10, 20], 4.0).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[1].c, rows[1].k), (0.9, 10));
        let mut out = Vec::new();
        write_grid_csv(&rows, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 5);
    }

    proptest! {
        #[test]
        fn bound_monotone_in_degrees_and_q(
            degrees in prop::collection::vec(1u32..60, 1..12),
            bump in 0usize..12,
            k in 1usize..15,
            c in 0.05f64..0.6,
            beta in 2.0f64..12.0,
        ) {
            let base = BoundInputs { user_degrees: degrees.clone(), k, c, beta };
            let b0 = condition1_bound(&base).unwrap();
            prop_assert!((0.0..=1.0).contains(&b0.bound));

            let mut more = degrees.clone();
            let idx = bump % more.len();
            more[idx] += 1;
            let b1 = condition1_bound(&BoundInputs { user_degrees: more, ..base.clone() }).unwrap();
            prop_assert!(b1.bound >= b0.bound);

            // larger beta shrinks p, which shrinks q while 1 - c > p
            let b2 = condition1_bound(&BoundInputs { beta: beta + 1.0, ..base.clone() }).unwrap();
            if !b0.vacuous {
                prop_assert!(b2.q <= b0.q + 1e-15);
                prop_assert!(b2.bound <= b0.bound + 1e-15);
            }
        }
    }
}
