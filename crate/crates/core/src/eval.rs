//! Accuracy and popularity-bias metrics for a recommendation run.
//!
//! Accuracy metrics are macro-averaged over users with a nonempty test set and
//! reported multiplied by 100. Bias metrics work on the per-item rate
//! `r_i = C*_i / Q*_i^(2-gamma)`, where `C*_i` counts the users that have item
//! `i` both in their top-k list and in their test set.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::InteractionLog;
use crate::estimator::{interaction_rate, snips_weights, EstimatorError, InteractionRate, RateSource};
use crate::model::RecommendationRun;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cutoff {k} exceeds run list length {run_k}")]
    CutoffTooLarge { k: usize, run_k: usize },
    #[error("cutoff must be at least 1")]
    ZeroCutoff,
    #[error("no user has both a recommendation list and test items")]
    NoEvaluableUsers,
    #[error("DI undefined: mean interaction rate is zero")]
    UndefinedDi,
    #[error("DI undefined: no item with positive popularity")]
    NoRatedItems,
    #[error("mutual information needs at least 2 items and 2 bins (items={items}, bins={bins})")]
    MiTooSmall { items: usize, bins: usize },
    #[error("value vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("weights cover {weights} items, test log has {items}")]
    WeightLength { weights: usize, items: usize },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_k(run: &RecommendationRun, k: usize) -> Result<()> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    if k > run.k {
        return Err(EvalError::CutoffTooLarge { k, run_k: run.k });
    }
    Ok(())
}

fn sorted_contains(sorted: &[u32], x: u32) -> bool {
    sorted.binary_search(&x).is_ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Accuracy {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub n_users: usize,
}

fn user_accuracy(list: &[u32], truth: &[u32], k: usize) -> (f64, f64, f64) {
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (rank, &i) in list.iter().take(k).enumerate() {
        if sorted_contains(truth, i) {
            hits += 1;
            dcg += 1.0 / ((rank + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(truth.len()))
        .map(|rank| 1.0 / ((rank + 2) as f64).log2())
        .sum();
    (
        hits as f64 / k as f64,
        hits as f64 / truth.len() as f64,
        dcg / idcg,
    )
}

/// Precision@k, Recall@k and NDCG@k (binary gains, log2 discounts), times 100.
pub fn precision_recall_ndcg(
    run: &RecommendationRun,
    test: &InteractionLog,
    k: usize,
    parallel: bool,
) -> Result<Accuracy> {
    check_k(run, k)?;
    let per_user = |l: &crate::model::UserList| {
        let truth = test.items_of(l.user);
        (!truth.is_empty()).then(|| user_accuracy(&l.items, truth, k))
    };
    let rows: Vec<(f64, f64, f64)> = if parallel {
        run.lists.par_iter().filter_map(per_user).collect()
    } else {
        run.lists.iter().filter_map(per_user).collect()
    };
    if rows.is_empty() {
        return Err(EvalError::NoEvaluableUsers);
    }
    let n = rows.len() as f64;
    let (mut p, mut r, mut g) = (0.0, 0.0, 0.0);
    for (a, b, c) in &rows {
        p += a;
        r += b;
        g += c;
    }
    Ok(Accuracy {
        precision: 100.0 * p / n,
        recall: 100.0 * r / n,
        ndcg: 100.0 * g / n,
        n_users: rows.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SnipsRecall {
    /// Times 100, like the other accuracy metrics.
    pub value: f64,
    pub n_users: usize,
    /// Users whose test items all carry zero weight.
    pub excluded: usize,
}

/// Self-normalized IPS recall: per user `sum_{hits} w / sum_{test} w`, macro-averaged.
pub fn snips_recall(
    run: &RecommendationRun,
    test: &InteractionLog,
    weights: &[f64],
    k: usize,
) -> Result<SnipsRecall> {
    check_k(run, k)?;
    if weights.len() != test.n_items() {
        return Err(EvalError::WeightLength {
            weights: weights.len(),
            items: test.n_items(),
        });
    }
    let mut total = 0.0;
    let mut n_users = 0usize;
    let mut excluded = 0usize;
    for l in &run.lists {
        let truth = test.items_of(l.user);
        if truth.is_empty() {
            continue;
        }
        let denom: f64 = truth.iter().map(|&i| weights[i as usize]).sum();
        if denom <= 0.0 {
            excluded += 1;
            continue;
        }
        let num: f64 = l
            .items
            .iter()
            .take(k)
            .filter(|&&i| sorted_contains(truth, i))
            .map(|&i| weights[i as usize])
            .sum();
        total += num / denom;
        n_users += 1;
    }
    if n_users == 0 {
        return Err(EvalError::NoEvaluableUsers);
    }
    Ok(SnipsRecall {
        value: 100.0 * total / n_users as f64,
        n_users,
        excluded,
    })
}

/// `C*_i`: number of users with `i` in their top-k list and in their test set.
pub fn observed_hits(run: &RecommendationRun, test: &InteractionLog, k: usize) -> Result<Vec<f64>> {
    check_k(run, k)?;
    let mut c = vec![0.0; test.n_items()];
    for l in &run.lists {
        let truth = test.items_of(l.user);
        for &i in l.items.iter().take(k) {
            if sorted_contains(truth, i) {
                c[i as usize] += 1.0;
            }
        }
    }
    Ok(c)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Deviation of the interaction distribution: population std over mean of the rates.
pub fn di_from_rates(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(EvalError::NoRatedItems);
    }
    let (mean, std) = mean_std(rates);
    if mean <= 0.0 {
        return Err(EvalError::UndefinedDi);
    }
    Ok(std / mean)
}

/// Observed interaction rates of a run over items with `Q* > 0`.
pub fn run_rates(
    run: &RecommendationRun,
    test: &InteractionLog,
    q_star: &[u32],
    gamma: f64,
    k: usize,
) -> Result<InteractionRate> {
    let c = observed_hits(run, test, k)?;
    Ok(interaction_rate(&c, q_star, gamma, RateSource::RunObserved)?)
}

pub fn di(
    run: &RecommendationRun,
    test: &InteractionLog,
    q_star: &[u32],
    gamma: f64,
    k: usize,
) -> Result<f64> {
    let rates = run_rates(run, test, q_star, gamma, k)?;
    di_from_rates(&rates.rates())
}

/// Equal-mass bin index of every value. The element at sorted rank `j` of `n`
/// lands in bin `floor(j * bins / n)`; runs of equal values all take the bin
/// of their lowest rank.
pub fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0usize; n];
    let mut current = 0usize;
    for (rank, &idx) in order.iter().enumerate() {
        if rank == 0 || values[idx] != values[order[rank - 1]] {
            current = rank * bins / n;
        }
        out[idx] = current;
    }
    out
}

/// Mutual information (nats) between two variables after equal-mass binning.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 || bins < 2 {
        return Err(EvalError::MiTooSmall { items: n, bins });
    }
    let bx = quantile_bins(x, bins);
    let by = quantile_bins(y, bins);
    let mut joint = vec![0usize; bins * bins];
    let mut mx = vec![0usize; bins];
    let mut my = vec![0usize; bins];
    for (&a, &b) in bx.iter().zip(&by) {
        joint[a * bins + b] += 1;
        mx[a] += 1;
        my[b] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let c = joint[a * bins + b];
            if c == 0 {
                continue;
            }
            let c = c as f64;
            mi += c / nf * (c * nf / (mx[a] as f64 * my[b] as f64)).ln();
        }
    }
    // guard tiny negative rounding at independence
    Ok(mi.max(0.0))
}

/// MI between observed rates and item popularity.
pub fn mi(r: &[f64], q_star: &[u32], bins: usize) -> Result<f64> {
    let q: Vec<f64> = q_star.iter().map(|&q| q as f64).collect();
    mutual_information(r, &q, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub k: usize,
    pub mi_bins: usize,
    /// SNIPS propensity exponent; `None` means `gamma / 2`.
    pub snips_eta: Option<f64>,
    pub gamma: f64,
    pub parallel: bool,
}

impl EvalConfig {
    pub fn new(gamma: f64) -> Self {
        Self {
            k: 20,
            mi_bins: 10,
            snips_eta: None,
            gamma,
            parallel: false,
        }
    }

    pub fn eta(&self) -> f64 {
        self.snips_eta.unwrap_or(self.gamma / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub snips_recall: f64,
    /// Nats.
    pub mi: f64,
    /// `None` when no item received a hit.
    pub di: Option<f64>,
    pub k: usize,
    pub n_users_evaluated: usize,
    pub skipped_items: usize,
    pub snips_excluded_users: usize,
    pub gamma: f64,
    pub snips_eta: f64,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "model,lambda_f,seed,precision,recall,ndcg,snips_recall,mi,di,k,n_users,skipped_items"
    }

    pub fn csv_row(&self, model: &str, lambda_f: f64, seed: u64) -> String {
        format!(
            "{model},{lambda_f:e},{seed},{},{},{},{},{},{},{},{},{}",
            self.precision_at_k,
            self.recall_at_k,
            self.ndcg_at_k,
            self.snips_recall,
            self.mi,
            self.di.map(|d| d.to_string()).unwrap_or_default(),
            self.k,
            self.n_users_evaluated,
            self.skipped_items
        )
    }

    pub fn write_json<W: Write>(&self, out: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(out, self)
    }
}

/// All metrics of one run. `q_star` is the reference popularity (normally the training split's).
pub fn evaluate(
    run: &RecommendationRun,
    test: &InteractionLog,
    q_star: &[u32],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let acc = precision_recall_ndcg(run, test, cfg.k, cfg.parallel)?;
    let eta = cfg.eta();
    let weights = snips_weights(q_star, eta);
    let snips = snips_recall(run, test, &weights.weights, cfg.k)?;
    let rates = run_rates(run, test, q_star, cfg.gamma, cfg.k)?;
    let r = rates.rates();
    let di = match di_from_rates(&r) {
        Ok(v) => Some(v),
        Err(EvalError::UndefinedDi) => None,
        Err(e) => return Err(e),
    };
    let mi = mi(&r, &rates.q_star(), cfg.mi_bins)?;
    Ok(MetricsReport {
        precision_at_k: acc.precision,
        recall_at_k: acc.recall,
        ndcg_at_k: acc.ndcg,
        snips_recall: snips.value,
        mi,
        di,
        k: cfg.k,
        n_users_evaluated: acc.n_users,
        skipped_items: rates.skipped.len(),
        snips_excluded_users: snips.excluded,
        gamma: cfg.gamma,
        snips_eta: eta,
    })
}
