//! Inverse-propensity estimates of how many interactions each item receives
//! relative to how many users like it.
//!
//! With exposure probability proportional to `Q*^gamma`, the observed count of
//! recommended-and-liked interactions `C*` and the observed popularity `Q*`
//! combine into the rate `r = C* / Q*^(2 - gamma)`. Equal `r` across items is
//! the offline form of "interactions proportional to the number of users who
//! like the item".

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::InteractionLog;
use crate::model::{Model, ModelError};
use crate::train::sigmoid;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("count vectors have different lengths ({c} vs {q})")]
    LengthMismatch { c: usize, q: usize },
    #[error("item {item} has invalid count {value}")]
    NegativeCount { item: usize, value: f64 },
    #[error("gamma must be finite, got {0}")]
    NonFiniteGamma(f64),
    #[error("no gamma known for dataset {0:?}; supply a value")]
    UnknownDataset(String),
    #[error("no gamma configured: supply a dataset name or an explicit value")]
    NoGammaConfigured,
    #[error("exposure proxy has {proxy} entries for {items} items")]
    ProxyLength { proxy: usize, items: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateSource {
    /// `sum_u sigma(y_ui)` over the item's training users.
    ModelExpected,
    /// Test hits inside top-k lists.
    RunObserved,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateEntry {
    pub item: u32,
    pub c_star: f64,
    pub q_star: u32,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InteractionRate {
    pub entries: Vec<RateEntry>,
    /// Items with `Q* = 0`, for which the rate is undefined.
    pub skipped: Vec<u32>,
    pub gamma: f64,
    pub source: RateSource,
}

impl InteractionRate {
    pub fn rates(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.r).collect()
    }

    pub fn q_star(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.q_star).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "item,c_star,q_star,r")?;
        for e in &self.entries {
            writeln!(out, "{},{},{},{}", e.item, e.c_star, e.q_star, e.r)?;
        }
        Ok(())
    }
}

/// Popularity normalizer `Q*^(2 - gamma)`.
#[inline]
pub fn rate_denominator(q_star: f64, gamma: f64) -> f64 {
    let e = 2.0 - gamma;
    if e == 0.0 {
        1.0
    } else {
        q_star.powf(e)
    }
}

/// `r_i = C*_i / Q*_i^(2 - gamma)` for every item with `Q*_i > 0`.
pub fn interaction_rate(
    c_star: &[f64],
    q_star: &[u32],
    gamma: f64,
    source: RateSource,
) -> Result<InteractionRate> {
    if c_star.len() != q_star.len() {
        return Err(EstimatorError::LengthMismatch {
            c: c_star.len(),
            q: q_star.len(),
        });
    }
    if !gamma.is_finite() {
        return Err(EstimatorError::NonFiniteGamma(gamma));
    }
    if let Some((item, &value)) = c_star
        .iter()
        .enumerate()
        .find(|(_, c)| !(c.is_finite() && **c >= 0.0))
    {
        return Err(EstimatorError::NegativeCount { item, value });
    }
    let mut entries = Vec::with_capacity(c_star.len());
    let mut skipped = Vec::new();
    for (i, (&c, &q)) in c_star.iter().zip(q_star).enumerate() {
        if q == 0 {
            skipped.push(i as u32);
            continue;
        }
        let r = if c == 0.0 {
            0.0
        } else {
            c / rate_denominator(q as f64, gamma)
        };
        entries.push(RateEntry {
            item: i as u32,
            c_star: c,
            q_star: q,
            r,
        });
    }
    Ok(InteractionRate {
        entries,
        skipped,
        gamma,
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnipsWeights {
    pub weights: Vec<f64>,
    /// Items with `Q* = 0`; their weight is 0 unless `eta = 0`.
    pub flagged: Vec<u32>,
}

/// Inverse-propensity weights `w_i = Q*_i^(-eta)`. With `eta = 0` every weight
/// is 1, unseen items included, so SNIPS recall reduces to plain recall.
pub fn snips_weights(q_star: &[u32], eta: f64) -> SnipsWeights {
    let mut flagged = Vec::new();
    let weights = q_star
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            if q == 0 {
                flagged.push(i as u32);
            }
            if eta == 0.0 {
                1.0
            } else if q == 0 {
                0.0
            } else {
                (q as f64).powf(-eta)
            }
        })
        .collect();
    SnipsWeights { weights, flagged }
}

/// Exposure exponents reported for the benchmark datasets.
pub fn known_gamma(dataset: &str) -> Option<f64> {
    let key: String = dataset
        .to_ascii_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect();
    match key.as_str() {
        "movielens1m" | "ml1m" | "movielens" => Some(1.826),
        "gowalla" => Some(1.285),
        "yelp" | "yelp2018" => Some(1.552),
        "amazonbook" | "amazon" => Some(1.446),
        _ => None,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GammaConfig {
    pub dataset: Option<String>,
    /// Overrides the per-dataset default.
    pub value: Option<f64>,
}

impl GammaConfig {
    pub fn dataset(name: &str) -> Self {
        Self {
            dataset: Some(name.to_owned()),
            value: None,
        }
    }

    pub fn value(v: f64) -> Self {
        Self {
            dataset: None,
            value: Some(v),
        }
    }

    pub fn configured(&self) -> Result<f64> {
        if let Some(v) = self.value {
            return if v.is_finite() {
                Ok(v)
            } else {
                Err(EstimatorError::NonFiniteGamma(v))
            };
        }
        match &self.dataset {
            Some(name) => known_gamma(name).ok_or_else(|| EstimatorError::UnknownDataset(name.clone())),
            None => Err(EstimatorError::NoGammaConfigured),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaMethod {
    ConfigSupplied,
    PowerlawFit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// Root-mean-square residual of the log-log regression.
    pub residual: Option<f64>,
    pub n_items: usize,
    /// The regressor had no spread; `value` is the configured fallback.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaEstimate {
    pub value: f64,
    pub method: GammaMethod,
    pub diagnostics: Option<FitDiagnostics>,
}

/// Where per-item exposure evidence comes from for the power-law fit.
pub enum ExposureProxy<'a> {
    /// Measured per-item exposure counts (impressions or similar).
    Observed(&'a [f64]),
    /// `sum_u sigma(y_ui)` over all users of a converged plain-BPR model.
    Model(&'a Model),
}

pub enum GammaRequest<'a> {
    ConfigSupplied,
    PowerlawFit(ExposureProxy<'a>),
}

/// Per-item sum of `sigma(y_ui)` over every user.
pub fn model_exposure(model: &Model) -> Result<Vec<f64>> {
    let scorer = model.scorer()?;
    let mut exposure = vec![0.0; model.n_items()];
    for u in 0..model.n_users() as u32 {
        for (e, s) in exposure.iter_mut().zip(scorer.user_scores(u)) {
            *e += sigmoid(s);
        }
    }
    Ok(exposure)
}

/// Least-squares slope of `ln(exposure)` on `ln(Q*)` over items with both positive.
pub fn fit_exposure_exponent(exposure: &[f64], q_star: &[u32]) -> FitDiagnostics {
    let points: Vec<(f64, f64)> = exposure
        .iter()
        .zip(q_star)
        .filter(|(e, q)| **q > 0 && **e > 0.0 && e.is_finite())
        .map(|(e, &q)| ((q as f64).ln(), e.ln()))
        .collect();
    let n = points.len();
    let degenerate = FitDiagnostics {
        slope: None,
        intercept: None,
        residual: None,
        n_items: n,
        degenerate: true,
    };
    if n < 2 {
        return degenerate;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 1e-12 * n as f64 {
        return degenerate;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    FitDiagnostics {
        slope: Some(slope),
        intercept: Some(intercept),
        residual: Some((sse / n as f64).sqrt()),
        n_items: n,
        degenerate: false,
    }
}

/// Resolves the exposure exponent either from configuration or by a log-log fit.
///
/// A degenerate fit (no spread in popularity) falls back to the configured
/// value and is flagged in the diagnostics.
pub fn estimate_gamma(
    log: &InteractionLog,
    request: GammaRequest<'_>,
    config: &GammaConfig,
) -> Result<GammaEstimate> {
    let proxy = match request {
        GammaRequest::ConfigSupplied => {
            return Ok(GammaEstimate {
                value: config.configured()?,
                method: GammaMethod::ConfigSupplied,
                diagnostics: None,
            })
        }
        GammaRequest::PowerlawFit(p) => p,
    };
    let exposure = match proxy {
        ExposureProxy::Observed(v) => v.to_vec(),
        ExposureProxy::Model(m) => model_exposure(m)?,
    };
    if exposure.len() != log.n_items() {
        return Err(EstimatorError::ProxyLength {
            proxy: exposure.len(),
            items: log.n_items(),
        });
    }
    let q_star: Vec<u32> = (0..log.n_items() as u32)
        .map(|i| log.item_degree(i) as u32)
        .collect();
    let diag = fit_exposure_exponent(&exposure, &q_star);
    let value = match diag.slope {
        Some(s) => s,
        None => {
            log::warn!("power-law fit degenerate over {} items; using configured gamma", diag.n_items);
            config.configured()?
        }
    };
    Ok(GammaEstimate {
        value,
        method: GammaMethod::PowerlawFit,
        diagnostics: Some(diag),
    })
}
