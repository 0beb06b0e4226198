//! C ABI over the `flowmc` library.
//!
//! Targets and fields are opaque heap handles released with the matching
//! `*_free`. Every fallible call returns a [`FlowmcStatus`]; on failure the
//! message is kept per thread and can be copied out with [`flowmc_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use flowmc::field::VelocityField;
use flowmc::flow::{flow_backward, flow_forward, TimeGrid};
use flowmc::importance::{transport_weights, weight_diagnostics, z_ratio_estimate};
use flowmc::rng::stream;
use flowmc::targets::{GaussianMixture, TargetModel};
use flowmc::trainer::checkpoint_load;
use flowmc::Error;

/// Result codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowmcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Format = 5,
    Io = 6,
    Panic = 7,
}

/// Target distribution handle.
pub struct FlowmcTarget(TargetModel);

/// Velocity or score field handle.
pub struct FlowmcField(VelocityField);

/// Summary of a transport importance-sampling run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct FlowmcEstimate {
    pub z_ratio: f64,
    pub z_ratio_std_error: f64,
    pub log_z_ratio: f64,
    pub ess: f64,
    pub ess_fraction: f64,
    pub n_failed: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> FlowmcStatus {
    match e {
        Error::DimensionMismatch { .. } => FlowmcStatus::DimensionMismatch,
        Error::Format(_) => FlowmcStatus::Format,
        Error::Io(_) => FlowmcStatus::Io,
        e if e.is_numerical() => FlowmcStatus::Numerical,
        _ => FlowmcStatus::InvalidArgument,
    }
}

struct Fail(FlowmcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FlowmcStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FlowmcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlowmcStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("panic inside flowmc".to_string());
            FlowmcStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn check_len(expected: usize, got: usize) -> Result<(), Fail> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got }.into());
    }
    Ok(())
}

/// Copies the last error message of the calling thread into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn flowmc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Standard normal target in `dim` dimensions.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn flowmc_target_standard_normal(dim: usize, out: *mut *mut FlowmcTarget) -> FlowmcStatus {
    guard(|| put(out, FlowmcTarget(TargetModel::standard_normal(dim)?)))
}

/// Gaussian `N(0, alpha^-1 I)`.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn flowmc_target_isotropic_gaussian(
    dim: usize,
    alpha: f64,
    out: *mut *mut FlowmcTarget,
) -> FlowmcStatus {
    guard(|| put(out, FlowmcTarget(TargetModel::isotropic_gaussian(dim, alpha)?)))
}

/// Double-well potential `a (x0^2 - 1)^2 + |x_rest|^2 / 2`.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn flowmc_target_double_well(dim: usize, a: f64, out: *mut *mut FlowmcTarget) -> FlowmcStatus {
    guard(|| put(out, FlowmcTarget(TargetModel::double_well(dim, a)?)))
}

/// Mixture of isotropic Gaussians. `means` is row-major `n_modes x dim`,
/// `probs` and `variances` have `n_modes` entries.
///
/// # Safety
/// Array arguments must be valid for the stated lengths; `out` for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn flowmc_target_gaussian_mixture(
    dim: usize,
    n_modes: usize,
    probs: *const f64,
    means: *const f64,
    variances: *const f64,
    out: *mut *mut FlowmcTarget,
) -> FlowmcStatus {
    guard(|| {
        let probs = input(probs, n_modes, "probs")?.to_vec();
        let means = input(means, n_modes * dim, "means")?;
        let vars = input(variances, n_modes, "variances")?;
        let means = if dim == 0 { vec![Vec::new(); n_modes] } else { means.chunks(dim).map(<[f64]>::to_vec).collect() };
        let mix = GaussianMixture::isotropic(dim, probs, means, vars)?;
        put(out, FlowmcTarget(TargetModel::gaussian_mixture(mix, 0.0)?))
    })
}

/// Releases a target. Null is ignored.
///
/// # Safety
/// `t` must come from a target constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn flowmc_target_free(t: *mut FlowmcTarget) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Dimension of a target, 0 for null.
///
/// # Safety
/// `t` must be null or a live target.
#[no_mangle]
pub unsafe extern "C" fn flowmc_target_dim(t: *const FlowmcTarget) -> usize {
    t.as_ref().map_or(0, |t| t.0.dim())
}

/// Potential `U(x)`, the negative unnormalized log density.
///
/// # Safety
/// `x` must hold `len` values; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn flowmc_target_potential(
    t: *const FlowmcTarget,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> FlowmcStatus {
    guard(|| {
        let t = handle(t, "target")?;
        let v = t.0.potential(input(x, len, "x")?)?;
        *output(out, 1, "out")?.first_mut().unwrap() = v;
        Ok(())
    })
}

/// Gradient of the potential, written to `grad` (`len` values).
///
/// # Safety
/// `x` and `grad` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn flowmc_target_grad_potential(
    t: *const FlowmcTarget,
    x: *const f64,
    len: usize,
    grad: *mut f64,
) -> FlowmcStatus {
    guard(|| {
        let t = handle(t, "target")?;
        let g = t.0.grad_potential(input(x, len, "x")?)?;
        output(grad, len, "grad")?.copy_from_slice(&g);
        Ok(())
    })
}

/// Tanh network velocity field with `n_hidden` layers of the given widths.
///
/// # Safety
/// `hidden` must hold `n_hidden` values; `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn flowmc_field_mlp(
    dim: usize,
    hidden: *const usize,
    n_hidden: usize,
    seed: u64,
    init_scale: f64,
    out: *mut *mut FlowmcField,
) -> FlowmcStatus {
    guard(|| {
        let hidden = input(hidden, n_hidden, "hidden")?;
        put(out, FlowmcField(VelocityField::mlp(dim, hidden, seed, init_scale)?))
    })
}

/// Affine field `v(t, x) = A x + b` with `A` row-major `dim x dim`.
///
/// # Safety
/// `a` must hold `dim * dim` values and `b` `dim` values.
#[no_mangle]
pub unsafe extern "C" fn flowmc_field_affine(
    dim: usize,
    a: *const f64,
    b: *const f64,
    out: *mut *mut FlowmcField,
) -> FlowmcStatus {
    guard(|| {
        let a = input(a, dim * dim, "a")?;
        let b = input(b, dim, "b")?;
        put(out, FlowmcField(VelocityField::affine(dim, a, b)?))
    })
}

/// Loads the field stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn flowmc_field_load(path: *const c_char, out: *mut *mut FlowmcField) -> FlowmcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(FlowmcStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let (f, _, _) = checkpoint_load(Path::new(path))?;
        put(out, FlowmcField(f))
    })
}

/// Releases a field. Null is ignored.
///
/// # Safety
/// `f` must come from a field constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn flowmc_field_free(f: *mut FlowmcField) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// Dimension of a field, 0 for null.
///
/// # Safety
/// `f` must be null or a live field.
#[no_mangle]
pub unsafe extern "C" fn flowmc_field_dim(f: *const FlowmcField) -> usize {
    f.as_ref().map_or(0, |f| f.0.dim())
}

/// Number of trainable parameters, 0 for null.
///
/// # Safety
/// `f` must be null or a live field.
#[no_mangle]
pub unsafe extern "C" fn flowmc_field_n_params(f: *const FlowmcField) -> usize {
    f.as_ref().map_or(0, |f| f.0.n_params())
}

/// Copies the parameter vector into `out`, which must hold exactly
/// `flowmc_field_n_params` values.
///
/// # Safety
/// `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn flowmc_field_params(f: *const FlowmcField, out: *mut f64, len: usize) -> FlowmcStatus {
    guard(|| {
        let f = handle(f, "field")?;
        check_len(f.0.n_params(), len)?;
        output(out, len, "out")?.copy_from_slice(f.0.params());
        Ok(())
    })
}

/// Velocity `v(t, x)` and divergence at one point.
///
/// # Safety
/// `x` and `v` must hold `len` values; `div` may be null.
#[no_mangle]
pub unsafe extern "C" fn flowmc_field_velocity(
    f: *const FlowmcField,
    t: f64,
    x: *const f64,
    len: usize,
    v: *mut f64,
    div: *mut f64,
) -> FlowmcStatus {
    guard(|| {
        let f = handle(f, "field")?;
        let (vel, d) = f.0.velocity_and_divergence(t, input(x, len, "x")?)?;
        output(v, len, "v")?.copy_from_slice(&vel);
        if let Some(div) = div.as_mut() {
            *div = d;
        }
        Ok(())
    })
}

unsafe fn flow_ffi(
    f: *const FlowmcField,
    x: *const f64,
    len: usize,
    n_steps: usize,
    y: *mut f64,
    logjac: *mut f64,
    backward: bool,
) -> FlowmcStatus {
    guard(|| {
        let f = handle(f, "field")?;
        let x = input(x, len, "x")?;
        let grid = TimeGrid::unit(n_steps)?;
        let (img, lj) = if backward { flow_backward(&f.0, x, &grid)? } else { flow_forward(&f.0, x, &grid)? };
        output(y, len, "y")?.copy_from_slice(&img);
        if let Some(out) = logjac.as_mut() {
            *out = lj;
        }
        Ok(())
    })
}

/// Pushes `x` from t = 0 to t = 1 with `n_steps` RK4 steps. Writes the image
/// to `y` and the log-Jacobian to `logjac` (may be null).
///
/// # Safety
/// `x` and `y` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn flowmc_flow_forward(
    f: *const FlowmcField,
    x: *const f64,
    len: usize,
    n_steps: usize,
    y: *mut f64,
    logjac: *mut f64,
) -> FlowmcStatus {
    flow_ffi(f, x, len, n_steps, y, logjac, false)
}

/// Pulls `x` back from t = 1 to t = 0; the inverse of [`flowmc_flow_forward`].
///
/// # Safety
/// `x` and `y` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn flowmc_flow_backward(
    f: *const FlowmcField,
    x: *const f64,
    len: usize,
    n_steps: usize,
    y: *mut f64,
    logjac: *mut f64,
) -> FlowmcStatus {
    flow_ffi(f, x, len, n_steps, y, logjac, true)
}

/// Transport importance sampling from a standard normal base: draws `n`
/// base points from the seeded stream, pushes them through `f`, and reports
/// the normalizing-constant ratio and weight diagnostics.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn flowmc_estimate(
    f: *const FlowmcField,
    t: *const FlowmcTarget,
    n: usize,
    n_steps: usize,
    seed: u64,
    out: *mut FlowmcEstimate,
) -> FlowmcStatus {
    guard(|| {
        let f = handle(f, "field")?;
        let target = handle(t, "target")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        check_len(target.0.dim(), f.0.dim())?;
        if n == 0 {
            return Err(Fail(FlowmcStatus::InvalidArgument, "n must be positive".to_string()));
        }
        let base = TargetModel::standard_normal(target.0.dim())?;
        let xs = base.sample_base(n, &mut stream(seed, &[1]))?;
        let wb = transport_weights(&f.0, &target.0, &base, &xs, &TimeGrid::unit(n_steps)?)?;
        let z = z_ratio_estimate(&wb);
        let d = weight_diagnostics(&wb);
        *out = FlowmcEstimate {
            z_ratio: z.value,
            z_ratio_std_error: z.std_error,
            log_z_ratio: z.log_value,
            ess: d.ess,
            ess_fraction: d.ess_fraction,
            n_failed: wb.n_failed,
        };
        Ok(())
    })
}
