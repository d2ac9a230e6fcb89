//! C ABI over the `cdte` library.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible function returns a
//! [`CdteStatus`] and writes results through out-pointers. On failure the
//! message is available from [`cdte_last_error_message`] on the same thread.
//! Panics never cross the boundary; they are reported as
//! [`CdteStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cdte::crossfit::{cdte_learn, FinalStage, FittedCdte, NuisanceConfig};
use cdte::dataset::{load_csv, Dataset, Observation};
use cdte::inference::FeatureMap;
use cdte::statistics::{weighted_evar, weighted_quantile, weighted_superquantile, StatisticSpec};
use cdte::CdteError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdteStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Numerical = 6,
    DegenerateSplit = 7,
    Panic = 8,
}

impl From<&CdteError> for CdteStatus {
    fn from(e: &CdteError) -> Self {
        match e {
            CdteError::Io(_) => CdteStatus::Io,
            CdteError::Schema(_) | CdteError::Parse { .. } | CdteError::Validation { .. } | CdteError::Csv(_) => {
                CdteStatus::Parse
            }
            CdteError::Config(_) => CdteStatus::Config,
            CdteError::DegenerateSplit(_) => CdteStatus::DegenerateSplit,
            CdteError::Fold { source, .. } => CdteStatus::from(source.as_ref()),
            CdteError::Domain(_) | CdteError::Precondition(_) => CdteStatus::InvalidArgument,
            _ => CdteStatus::Numerical,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdteStatisticKind {
    Mean = 0,
    Quantile = 1,
    Superquantile = 2,
    KlRisk = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdteFinalStage {
    Forest = 0,
    /// OLS on `(1, x)`.
    Ols = 1,
}

/// `tau` applies to quantiles and superquantiles, `delta` to the KL risk.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CdteFitOptions {
    pub statistic: CdteStatisticKind,
    pub tau: f64,
    pub delta: f64,
    pub folds: u32,
    pub seed: u64,
    pub final_stage: CdteFinalStage,
}

/// Opaque dataset handle.
pub struct CdteDataset(Dataset);

/// Opaque fitted model handle.
pub struct CdteModel(FittedCdte);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(CdteStatus, String);

impl From<CdteError> for Fail {
    fn from(e: CdteError) -> Self {
        Fail(CdteStatus::from(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(CdteStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CdteStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CdteStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CdteStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(CdteStatus::NullPointer, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn string(p: *const c_char, name: &str) -> Result<String, Fail> {
    non_null(p, name)?;
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_string)
        .map_err(|_| invalid(format!("`{name}` is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cdte_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Defaults: superquantile at 0.75, 5 folds, seed 0, forest final stage.
#[no_mangle]
pub extern "C" fn cdte_fit_options_default() -> CdteFitOptions {
    CdteFitOptions {
        statistic: CdteStatisticKind::Superquantile,
        tau: 0.75,
        delta: 0.0,
        folds: 5,
        seed: 0,
        final_stage: CdteFinalStage::Forest,
    }
}

/// Build a dataset from row-major covariates `x` (`n * d`), treatments `a`
/// (0 or 1) and outcomes `y`.
///
/// # Safety
/// The arrays must hold `n * d`, `n` and `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdte_dataset_new(
    x: *const f64,
    a: *const u8,
    y: *const f64,
    n: usize,
    d: usize,
    out: *mut *mut CdteDataset,
) -> CdteStatus {
    guard(|| {
        non_null(out, "out")?;
        let len = n.checked_mul(d).ok_or_else(|| invalid("n * d overflows"))?;
        let x = slice(x, len, "x")?;
        let a = slice(a, n, "a")?;
        let y = slice(y, n, "y")?;
        let rows = (0..n)
            .map(|i| Observation::new(x[i * d..(i + 1) * d].to_vec(), a[i], y[i]))
            .collect();
        let names = (0..d).map(|j| format!("x{j}")).collect();
        let data = Dataset::with_names(rows, names)?;
        *out = Box::into_raw(Box::new(CdteDataset(data)));
        Ok(())
    })
}

/// Load a dataset from a headered CSV file.
///
/// # Safety
/// Strings must be NUL-terminated; `features` must hold `n_features` strings.
#[no_mangle]
pub unsafe extern "C" fn cdte_dataset_load_csv(
    path: *const c_char,
    outcome: *const c_char,
    treatment: *const c_char,
    features: *const *const c_char,
    n_features: usize,
    out: *mut *mut CdteDataset,
) -> CdteStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = string(path, "path")?;
        let outcome = string(outcome, "outcome")?;
        let treatment = string(treatment, "treatment")?;
        let cols = slice(features, n_features, "features")?
            .iter()
            .map(|&p| string(p, "features[i]"))
            .collect::<Result<Vec<_>, _>>()?;
        let data = load_csv(path, &outcome, &treatment, &cols)?;
        *out = Box::into_raw(Box::new(CdteDataset(data)));
        Ok(())
    })
}

/// # Safety
/// `data` must be a live handle; `n` and `d` writable.
#[no_mangle]
pub unsafe extern "C" fn cdte_dataset_shape(data: *const CdteDataset, n: *mut usize, d: *mut usize) -> CdteStatus {
    guard(|| {
        non_null(data, "data")?;
        non_null(n, "n")?;
        non_null(d, "d")?;
        *n = (*data).0.len();
        *d = (*data).0.d();
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdte_dataset_free(data: *mut CdteDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

fn spec_of(o: &CdteFitOptions) -> Result<StatisticSpec, Fail> {
    Ok(match o.statistic {
        CdteStatisticKind::Mean => StatisticSpec::Mean,
        CdteStatisticKind::Quantile => StatisticSpec::quantile(o.tau)?,
        CdteStatisticKind::Superquantile => StatisticSpec::superquantile(o.tau)?,
        CdteStatisticKind::KlRisk => {
            let s = StatisticSpec::KlRisk { delta: o.delta };
            s.validate()?;
            s
        }
    })
}

/// Fit the cross-fitted learner with default nuisance learners.
///
/// # Safety
/// `data` must be a live handle, `options` readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdte_fit(
    data: *const CdteDataset,
    options: *const CdteFitOptions,
    out: *mut *mut CdteModel,
) -> CdteStatus {
    guard(|| {
        non_null(data, "data")?;
        non_null(options, "options")?;
        non_null(out, "out")?;
        let o = *options;
        let spec = spec_of(&o)?;
        let stage = match o.final_stage {
            CdteFinalStage::Forest => FinalStage::Forest,
            CdteFinalStage::Ols => FinalStage::Ols(FeatureMap::Linear),
        };
        let fitted = cdte_learn(
            &(*data).0,
            o.folds as usize,
            &spec,
            &NuisanceConfig::default(),
            &stage,
            o.seed,
        )?;
        *out = Box::into_raw(Box::new(CdteModel(fitted)));
        Ok(())
    })
}

/// Predict the effect at `n` row-major points of dimension `d`.
///
/// # Safety
/// `x` must hold `n * d` values and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn cdte_model_predict(
    model: *const CdteModel,
    x: *const f64,
    n: usize,
    d: usize,
    out: *mut f64,
) -> CdteStatus {
    guard(|| {
        non_null(model, "model")?;
        let len = n.checked_mul(d).ok_or_else(|| invalid("n * d overflows"))?;
        let x = slice(x, len, "x")?;
        if n > 0 {
            non_null(out, "out")?;
        }
        for i in 0..n {
            *out.add(i) = (*model).0.predict(&x[i * d..(i + 1) * d])?;
        }
        Ok(())
    })
}

/// Copy the cross-fitted pseudo-outcomes (in dataset row order) into `out`,
/// which must have room for exactly `len` = n values.
///
/// # Safety
/// `out` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn cdte_model_pseudo_outcomes(model: *const CdteModel, out: *mut f64, len: usize) -> CdteStatus {
    guard(|| {
        non_null(model, "model")?;
        let v = &(*model).0.targets.values;
        if len != v.len() {
            return Err(invalid(format!("buffer holds {len} values, model has {}", v.len())));
        }
        non_null(out, "out")?;
        ptr::copy_nonoverlapping(v.as_ptr(), out, len);
        Ok(())
    })
}

/// Linear projection of the pseudo-outcomes on `(1, x[columns...])` with HC1
/// intervals at `level`. Each output buffer holds `n_columns + 1` values,
/// intercept first; `stderr`, `lower` and `upper` may be null.
///
/// # Safety
/// `model` and `data` must be the live handles used for the fit.
#[no_mangle]
pub unsafe extern "C" fn cdte_model_projection(
    model: *const CdteModel,
    data: *const CdteDataset,
    columns: *const usize,
    n_columns: usize,
    level: f64,
    coef: *mut f64,
    stderr: *mut f64,
    lower: *mut f64,
    upper: *mut f64,
) -> CdteStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(data, "data")?;
        non_null(coef, "coef")?;
        let model = &(*model).0;
        let data = &(*data).0;
        if data.len() != model.targets.values.len() {
            return Err(invalid("dataset does not match the fitted model"));
        }
        let cols = slice(columns, n_columns, "columns")?.to_vec();
        let p = model.project(data, &FeatureMap::Columns(cols), level)?;
        for (j, &c) in p.coef.iter().enumerate() {
            *coef.add(j) = c;
            if !stderr.is_null() {
                *stderr.add(j) = p.stderr[j];
            }
            if !lower.is_null() {
                *lower.add(j) = p.ci_lower[j];
            }
            if !upper.is_null() {
                *upper.add(j) = p.ci_upper[j];
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cdte_model_free(model: *mut CdteModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `values` and `weights` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdte_weighted_quantile(
    values: *const f64,
    weights: *const f64,
    n: usize,
    tau: f64,
    out: *mut f64,
) -> CdteStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = weighted_quantile(slice(values, n, "values")?, slice(weights, n, "weights")?, tau)?;
        Ok(())
    })
}

/// # Safety
/// `values` and `weights` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdte_weighted_superquantile(
    values: *const f64,
    weights: *const f64,
    n: usize,
    tau: f64,
    out: *mut f64,
) -> CdteStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = weighted_superquantile(slice(values, n, "values")?, slice(weights, n, "weights")?, tau)?.mu;
        Ok(())
    })
}

/// Weighted EVaR at KL radius `delta`; `beta_out` may be null.
///
/// # Safety
/// `values` and `weights` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdte_weighted_evar(
    values: *const f64,
    weights: *const f64,
    n: usize,
    delta: f64,
    out: *mut f64,
    beta_out: *mut f64,
) -> CdteStatus {
    guard(|| {
        non_null(out, "out")?;
        let e = weighted_evar(slice(values, n, "values")?, slice(weights, n, "weights")?, delta)?;
        *out = e.risk;
        if !beta_out.is_null() {
            *beta_out = e.beta;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(CdteStatus::from(&CdteError::Config("x".into())), CdteStatus::Config);
        let nested = CdteError::Fold {
            fold: 2,
            source: Box::new(CdteError::DegenerateSplit("x".into())),
        };
        assert_eq!(CdteStatus::from(&nested), CdteStatus::DegenerateSplit);
    }

    #[test]
    fn panics_are_caught() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, CdteStatus::Panic);
        let msg = unsafe { CStr::from_ptr(cdte_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("boom"));
    }
}
