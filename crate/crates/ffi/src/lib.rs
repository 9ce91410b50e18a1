//! C ABI over `ipl-core`.
//!
//! Every fallible function returns an [`IplStatus`]; on failure the message is
//! available from [`ipl_last_error`] on the same thread. Handles are opaque and
//! owned by the caller, who releases them with the matching `*_free`.
//! Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ipl_core::dataset::{self, Delimiter, FormatSpec, InteractionLog, SplitBundle, SplitRatios};
use ipl_core::estimator::{self, RateSource};
use ipl_core::eval::{self, EvalConfig};
use ipl_core::model::{self, Model, ModelKind, ModelSpec};
use ipl_core::theory::{self, BoundInputs};
use ipl_core::train::{self, IplScope, NoopObserver, TrainConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IplStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Split = 5,
    Model = 6,
    Train = 7,
    Eval = 8,
    Theory = 9,
    BufferTooSmall = 10,
    Panic = 255,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IplDelimiter {
    Tab = 0,
    Comma = 1,
    DoubleColon = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IplSplitPart {
    Train = 0,
    Validation = 1,
    Test = 2,
}

/// Opaque interaction log.
pub struct IplLog(InteractionLog);

/// Opaque train/validation/test split.
pub struct IplSplit(SplitBundle);

/// Opaque trained or loaded model.
pub struct IplModel(Model);

/// Training parameters. `n_layers = 0` trains matrix factorization, otherwise LightGCN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct IplTrainConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub lambda_f: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Regularize over every rated item instead of the batch's positives.
    pub full_ipl: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct IplMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub snips_recall: f64,
    pub mi: f64,
    /// NaN when no item was hit.
    pub di: f64,
    pub n_users: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(IplStatus, String);

type FfiResult<T = ()> = Result<T, Failure>;

fn fail<T>(status: IplStatus, msg: impl std::fmt::Display) -> FfiResult<T> {
    Err(Failure(status, msg.to_string()))
}

trait Tag<T> {
    fn tag(self, status: IplStatus) -> FfiResult<T>;
}

impl<T, E: std::fmt::Display> Tag<T> for Result<T, E> {
    fn tag(self, status: IplStatus) -> FfiResult<T> {
        self.map_err(|e| Failure(status, e.to_string()))
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> IplStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IplStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            IplStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(IplStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return fail(IplStatus::NullPointer, format!("{what} is null"));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref()
        .ok_or_else(|| Failure(IplStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<T>(p: *mut T, value: T, what: &str) -> FfiResult {
    if p.is_null() {
        return fail(IplStatus::NullPointer, format!("{what} is null"));
    }
    p.write(value);
    Ok(())
}

unsafe fn path(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return fail(IplStatus::NullPointer, "path is null");
    }
    let s = CStr::from_ptr(p).to_str().tag(IplStatus::InvalidArgument)?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or NULL. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn ipl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn ipl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a delimited file. `rating_col < 0` means no rating column;
/// a NaN `rating_threshold` keeps every row.
#[no_mangle]
pub unsafe extern "C" fn ipl_log_parse_file(
    file: *const c_char,
    delimiter: IplDelimiter,
    user_col: usize,
    item_col: usize,
    rating_col: i64,
    rating_threshold: f64,
    has_header: bool,
    out_log: *mut *mut IplLog,
) -> IplStatus {
    guard(|| {
        let p = path(file)?;
        let spec = FormatSpec {
            delimiter: match delimiter {
                IplDelimiter::Tab => Delimiter::Tab,
                IplDelimiter::Comma => Delimiter::Comma,
                IplDelimiter::DoubleColon => Delimiter::DoubleColon,
            },
            user_col,
            item_col,
            rating_col: usize::try_from(rating_col).ok(),
            rating_threshold: (!rating_threshold.is_nan()).then_some(rating_threshold),
            has_header,
        };
        let parsed = dataset::parse_file(&p, &spec).map_err(|e| {
            let status = match e {
                dataset::DatasetError::Io(_) => IplStatus::Io,
                _ => IplStatus::Parse,
            };
            Failure(status, format!("{}: {e}", p.display()))
        })?;
        out(out_log, Box::into_raw(Box::new(IplLog(parsed.log))), "out_log")
    })
}

/// Builds a log from index pairs; duplicates are dropped.
#[no_mangle]
pub unsafe extern "C" fn ipl_log_from_pairs(
    n_users: usize,
    n_items: usize,
    users: *const u32,
    items: *const u32,
    len: usize,
    out_log: *mut *mut IplLog,
) -> IplStatus {
    guard(|| {
        let u = slice(users, len, "users")?;
        let i = slice(items, len, "items")?;
        if let Some(bad) = u.iter().find(|&&x| x as usize >= n_users) {
            return fail(IplStatus::InvalidArgument, format!("user {bad} out of range"));
        }
        if let Some(bad) = i.iter().find(|&&x| x as usize >= n_items) {
            return fail(IplStatus::InvalidArgument, format!("item {bad} out of range"));
        }
        let log = InteractionLog::from_index_pairs(n_users, n_items, u.iter().copied().zip(i.iter().copied()));
        out(out_log, Box::into_raw(Box::new(IplLog(log))), "out_log")
    })
}

#[no_mangle]
pub unsafe extern "C" fn ipl_log_free(log: *mut IplLog) {
    if !log.is_null() {
        drop(Box::from_raw(log));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ipl_log_n_users(log: *const IplLog) -> usize {
    log.as_ref().map_or(0, |l| l.0.n_users())
}

#[no_mangle]
pub unsafe extern "C" fn ipl_log_n_items(log: *const IplLog) -> usize {
    log.as_ref().map_or(0, |l| l.0.n_items())
}

#[no_mangle]
pub unsafe extern "C" fn ipl_log_n_interactions(log: *const IplLog) -> usize {
    log.as_ref().map_or(0, |l| l.0.n_interactions())
}

/// Writes `Q*` for every item; `len` must equal the item count.
#[no_mangle]
pub unsafe extern "C" fn ipl_log_item_popularity(log: *const IplLog, q_star: *mut u32, len: usize) -> IplStatus {
    guard(|| {
        let l = &get(log, "log")?.0;
        if len < l.n_items() {
            return fail(IplStatus::BufferTooSmall, format!("need {} entries", l.n_items()));
        }
        let dst = slice_mut(q_star, len, "q_star")?;
        dst[..l.n_items()].copy_from_slice(&dataset::popularity(l).q_star);
        Ok(())
    })
}

/// Writes every user's degree; `len` must be at least the user count.
#[no_mangle]
pub unsafe extern "C" fn ipl_log_user_degrees(log: *const IplLog, degrees: *mut u32, len: usize) -> IplStatus {
    guard(|| {
        let l = &get(log, "log")?.0;
        if len < l.n_users() {
            return fail(IplStatus::BufferTooSmall, format!("need {} entries", l.n_users()));
        }
        let dst = slice_mut(degrees, len, "degrees")?;
        dst[..l.n_users()].copy_from_slice(&dataset::popularity(l).user_degree);
        Ok(())
    })
}

/// Per-item stratified split.
#[no_mangle]
pub unsafe extern "C" fn ipl_split(
    log: *const IplLog,
    train: f64,
    validation: f64,
    test: f64,
    seed: u64,
    out_split: *mut *mut IplSplit,
) -> IplStatus {
    guard(|| {
        let l = &get(log, "log")?.0;
        let ratios = SplitRatios::new(train, validation, test).tag(IplStatus::InvalidArgument)?;
        let split = dataset::stratified_split(l, ratios, seed).tag(IplStatus::Split)?;
        out(out_split, Box::into_raw(Box::new(IplSplit(split))), "out_split")
    })
}

/// Copies one part of a split into a new log handle.
#[no_mangle]
pub unsafe extern "C" fn ipl_split_part(split: *const IplSplit, part: IplSplitPart, out_log: *mut *mut IplLog) -> IplStatus {
    guard(|| {
        let s = &get(split, "split")?.0;
        let l = match part {
            IplSplitPart::Train => &s.train,
            IplSplitPart::Validation => &s.validation,
            IplSplitPart::Test => &s.test,
        };
        out(out_log, Box::into_raw(Box::new(IplLog(l.clone()))), "out_log")
    })
}

#[no_mangle]
pub unsafe extern "C" fn ipl_split_free(split: *mut IplSplit) {
    if !split.is_null() {
        drop(Box::from_raw(split));
    }
}

/// `r_i = C*_i / Q*_i^(2 - gamma)`. Items with `Q* = 0` get NaN.
#[no_mangle]
pub unsafe extern "C" fn ipl_interaction_rate(
    c_star: *const f64,
    q_star: *const u32,
    len: usize,
    gamma: f64,
    out_rates: *mut f64,
) -> IplStatus {
    guard(|| {
        let c = slice(c_star, len, "c_star")?;
        let q = slice(q_star, len, "q_star")?;
        let dst = slice_mut(out_rates, len, "out_rates")?;
        let rates = estimator::interaction_rate(c, q, gamma, RateSource::RunObserved).tag(IplStatus::InvalidArgument)?;
        dst.fill(f64::NAN);
        for e in rates.entries {
            dst[e.item as usize] = e.r;
        }
        Ok(())
    })
}

/// Population std over mean of `rates`.
#[no_mangle]
pub unsafe extern "C" fn ipl_di(rates: *const f64, len: usize, out_di: *mut f64) -> IplStatus {
    guard(|| {
        let r = slice(rates, len, "rates")?;
        let d = eval::di_from_rates(r).tag(IplStatus::Eval)?;
        out(out_di, d, "out_di")
    })
}

/// Mutual information (nats) between `rates` and `q_star` under equal-mass binning.
#[no_mangle]
pub unsafe extern "C" fn ipl_mi(rates: *const f64, q_star: *const u32, len: usize, bins: usize, out_mi: *mut f64) -> IplStatus {
    guard(|| {
        let r = slice(rates, len, "rates")?;
        let q = slice(q_star, len, "q_star")?;
        let v = eval::mi(r, q, bins).tag(IplStatus::Eval)?;
        out(out_mi, v, "out_mi")
    })
}

#[no_mangle]
pub unsafe extern "C" fn ipl_fit_pareto_beta(degrees: *const f64, len: usize, x_min: f64, out_beta: *mut f64) -> IplStatus {
    guard(|| {
        let d = slice(degrees, len, "degrees")?;
        let fit = theory::fit_pareto_beta(d, x_min).tag(IplStatus::Theory)?;
        out(out_beta, fit.beta, "out_beta")
    })
}

/// Chernoff bound `q` on at-risk membership; `*out_vacuous` is set when the bound does not apply.
#[no_mangle]
pub unsafe extern "C" fn ipl_membership_bound_q(c: f64, p: f64, out_q: *mut f64, out_vacuous: *mut bool) -> IplStatus {
    guard(|| {
        let mb = theory::membership_bound_q(c, p);
        out(out_q, mb.q, "out_q")?;
        if !out_vacuous.is_null() {
            out_vacuous.write(mb.vacuous);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ipl_condition1_bound(
    degrees: *const u32,
    len: usize,
    k: usize,
    c: f64,
    beta: f64,
    out_bound: *mut f64,
) -> IplStatus {
    guard(|| {
        let d = slice(degrees, len, "degrees")?;
        let r = theory::condition1_bound(&BoundInputs {
            user_degrees: d.to_vec(),
            k,
            c,
            beta,
        })
        .tag(IplStatus::Theory)?;
        out(out_bound, r.bound, "out_bound")
    })
}

#[no_mangle]
pub extern "C" fn ipl_train_config_default() -> IplTrainConfig {
    let t = TrainConfig::default();
    IplTrainConfig {
        dim: 64,
        n_layers: 0,
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        l2: t.l2,
        lambda_f: t.lambda_f,
        gamma: t.gamma,
        seed: t.seed,
        full_ipl: false,
    }
}

/// Trains on the split's training part. Deterministic for a given seed.
#[no_mangle]
pub unsafe extern "C" fn ipl_model_train(
    split: *const IplSplit,
    config: *const IplTrainConfig,
    out_model: *mut *mut IplModel,
) -> IplStatus {
    guard(|| {
        let s = &get(split, "split")?.0;
        let c = *get(config, "config")?;
        let (n_users, n_items) = (s.train.n_users(), s.train.n_items());
        let spec = if c.n_layers == 0 {
            ModelSpec::mf(n_users, n_items, c.dim)
        } else {
            ModelSpec::lightgcn(n_users, n_items, c.dim, c.n_layers)
        };
        let model = Model::init(&spec, c.seed).tag(IplStatus::Model)?;
        let tc = TrainConfig {
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            l2: c.l2,
            lambda_f: c.lambda_f,
            gamma: c.gamma,
            seed: c.seed,
            ipl_scope: if c.full_ipl { IplScope::Full } else { IplScope::Batch },
            ..TrainConfig::default()
        };
        let trained = train::train(model, s, &tc, &mut NoopObserver).tag(IplStatus::Train)?;
        out(out_model, Box::into_raw(Box::new(IplModel(trained.model))), "out_model")
    })
}

/// Loads a JSON or binary (`.bin`) checkpoint. LightGCN checkpoints need
/// [`ipl_model_attach_graph`] before scoring.
#[no_mangle]
pub unsafe extern "C" fn ipl_model_load(file: *const c_char, out_model: *mut *mut IplModel) -> IplStatus {
    guard(|| {
        let p = path(file)?;
        let m = Model::load(&p).map_err(|e| Failure(IplStatus::Model, format!("{}: {e}", p.display())))?;
        out(out_model, Box::into_raw(Box::new(IplModel(m))), "out_model")
    })
}

#[no_mangle]
pub unsafe extern "C" fn ipl_model_save(model: *const IplModel, file: *const c_char) -> IplStatus {
    guard(|| {
        let m = &get(model, "model")?.0;
        let p = path(file)?;
        m.save(&p).map_err(|e| Failure(IplStatus::Io, format!("{}: {e}", p.display())))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ipl_model_attach_graph(model: *mut IplModel, train_log: *const IplLog) -> IplStatus {
    guard(|| {
        let l = &get(train_log, "train_log")?.0;
        let m = model
            .as_mut()
            .ok_or_else(|| Failure(IplStatus::NullPointer, "model is null".into()))?;
        m.0.attach_graph(l).tag(IplStatus::Model)
    })
}

#[no_mangle]
pub unsafe extern "C" fn ipl_model_free(model: *mut IplModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ipl_model_n_users(model: *const IplModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.n_users())
}

#[no_mangle]
pub unsafe extern "C" fn ipl_model_n_items(model: *const IplModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.n_items())
}

#[no_mangle]
pub unsafe extern "C" fn ipl_model_dim(model: *const IplModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.dim())
}

#[no_mangle]
pub unsafe extern "C" fn ipl_model_is_lightgcn(model: *const IplModel) -> bool {
    model.as_ref().is_some_and(|m| m.0.kind() == ModelKind::LightGcn)
}

#[no_mangle]
pub unsafe extern "C" fn ipl_model_score(model: *const IplModel, user: u32, item: u32, out_score: *mut f64) -> IplStatus {
    guard(|| {
        let m = &get(model, "model")?.0;
        let s = m.score(user, item).tag(IplStatus::Model)?;
        out(out_score, s, "out_score")
    })
}

/// Top-`k` items for one user, optionally excluding the positives in `exclude`
/// (may be NULL). Both output buffers need room for `k` entries; `*out_len`
/// receives the number written, which is smaller than `k` only for tiny catalogs.
#[no_mangle]
pub unsafe extern "C" fn ipl_model_top_k(
    model: *const IplModel,
    user: u32,
    k: usize,
    exclude: *const IplLog,
    out_items: *mut u32,
    out_scores: *mut f64,
    out_len: *mut usize,
) -> IplStatus {
    guard(|| {
        let m = &get(model, "model")?.0;
        let ex = exclude.as_ref().map(|l| &l.0);
        let items = slice_mut(out_items, k, "out_items")?;
        let scorer = m.scorer().tag(IplStatus::Model)?;
        let run = model::top_k(&scorer, &[user], k, ex, false).tag(IplStatus::Model)?;
        let list = &run.lists[0];
        items[..list.items.len()].copy_from_slice(&list.items);
        if !out_scores.is_null() {
            slice_mut(out_scores, k, "out_scores")?[..list.scores.len()].copy_from_slice(&list.scores);
        }
        out(out_len, list.items.len(), "out_len")
    })
}

/// Accuracy and bias metrics of `model` on the split's test part.
#[no_mangle]
pub unsafe extern "C" fn ipl_evaluate(
    model: *const IplModel,
    split: *const IplSplit,
    k: usize,
    gamma: f64,
    mi_bins: usize,
    out_metrics: *mut IplMetrics,
) -> IplStatus {
    guard(|| {
        let m = &get(model, "model")?.0;
        let s = &get(split, "split")?.0;
        let users: Vec<u32> = (0..s.test.n_users() as u32).filter(|&u| s.test.user_degree(u) > 0).collect();
        let scorer = m.scorer().tag(IplStatus::Model)?;
        let run = model::top_k(&scorer, &users, k, Some(&s.train), false).tag(IplStatus::Model)?;
        let cfg = EvalConfig {
            k,
            mi_bins,
            ..EvalConfig::new(gamma)
        };
        let q_star = dataset::popularity(&s.train).q_star;
        let r = eval::evaluate(&run, &s.test, &q_star, &cfg).tag(IplStatus::Eval)?;
        out(
            out_metrics,
            IplMetrics {
                precision: r.precision_at_k,
                recall: r.recall_at_k,
                ndcg: r.ndcg_at_k,
                snips_recall: r.snips_recall,
                mi: r.mi,
                di: r.di.unwrap_or(f64::NAN),
                n_users: r.n_users_evaluated,
            },
            "out_metrics",
        )
    })
}
