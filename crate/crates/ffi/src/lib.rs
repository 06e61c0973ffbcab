//! C ABI over the simulator: opaque program handles, status codes and a
//! per-thread error message.
//!
//! Every function returns a [`SasimStatus`]; on failure the message is
//! available from [`sasim_last_error`] until the next call on the same
//! thread. Handles are freed with [`sasim_program_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sasim::array::{run_program, HwConfig, Program};
use sasim::cmul::{cmul_mul, CmulOperands};
use sasim::compiler::{compile, ModelDesc};
use sasim::perf::{summarize, CycleReport};
use sasim::quant::{BitWidth, QTensor};
use sasim::signal::{self, synth, Bandpass, Class, FilterConfig, Recording, RECORDING_LEN, SAMPLE_RATE_HZ};
use sasim::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SasimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ProgramInvalid = 5,
    Shape = 6,
    Overflow = 7,
    Compile = 8,
    BufferTooSmall = 9,
    VoteCount = 10,
    Panic = 11,
}

/// Opaque compiled program.
pub struct SasimProgram {
    prog: Program,
}

/// Cycle accounting of one inference.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SasimCycles {
    pub total_cycles: u64,
    pub reg_load_cycles: u64,
    pub mac_cycles: u64,
    pub writeback_cycles: u64,
    pub dense_macs: u64,
    pub actual_macs: u64,
    pub active_units: u64,
    pub freq_hz: u64,
    pub latency_s: f64,
    pub raw_gops: f64,
    pub effective_gops: f64,
}

impl From<&CycleReport> for SasimCycles {
    fn from(r: &CycleReport) -> Self {
        SasimCycles {
            total_cycles: r.total_cycles,
            reg_load_cycles: r.reg_load_cycles,
            mac_cycles: r.mac_cycles,
            writeback_cycles: r.writeback_cycles,
            dense_macs: r.dense_macs,
            actual_macs: r.actual_macs,
            active_units: r.active_units,
            freq_hz: r.freq_hz,
            latency_s: r.latency_s,
            raw_gops: r.raw_gops,
            effective_gops: r.effective_gops,
        }
    }
}

/// One six-recording vote. `verdict` is 0 for VA, 1 for non-VA.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SasimDiagnosis {
    pub verdict: u32,
    pub votes_va: u32,
    pub votes_nonva: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(SasimStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Format { .. } => SasimStatus::Format,
            Error::ProgramInvalid(_) => SasimStatus::ProgramInvalid,
            Error::Shape(_) | Error::EmptyTensor => SasimStatus::Shape,
            Error::AccOverflow => SasimStatus::Overflow,
            Error::UnsupportedLayer { .. } | Error::Sizing { .. } | Error::Model { .. } | Error::Calib(_) => {
                SasimStatus::Compile
            }
            Error::EmptyVote | Error::VoteCount { .. } => SasimStatus::VoteCount,
            _ => SasimStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SasimStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SasimStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SasimStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SasimStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure(SasimStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| {
        let msg = if e.kind() == std::io::ErrorKind::NotFound {
            format!("file not found: {}", path.display())
        } else {
            format!("cannot read {}: {e}", path.display())
        };
        Failure(SasimStatus::Io, msg)
    })
}

unsafe fn emit(out: *mut *mut SasimProgram, prog: Program) {
    *out = Box::into_raw(Box::new(SasimProgram { prog }));
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sasim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after success.
#[no_mangle]
pub extern "C" fn sasim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a program file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sasim_program_load(path: *const c_char, out: *mut *mut SasimProgram) -> SasimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let prog = Program::from_bytes(&read(path)?)?;
        emit(out, prog);
        Ok(())
    })
}

/// Parses a program from its binary form.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sasim_program_from_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut SasimProgram,
) -> SasimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if data.is_null() {
            return Err(null("data"));
        }
        let prog = Program::from_bytes(std::slice::from_raw_parts(data, len))?;
        emit(out, prog);
        Ok(())
    })
}

/// Compiles a model (JSON description plus weight blob) on the default
/// array, calibrating on synthetic inputs drawn from `seed`.
///
/// # Safety
/// Both paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sasim_program_compile(
    model_path: *const c_char,
    weights_path: *const c_char,
    sparsity: f64,
    seed: u64,
    out: *mut *mut SasimProgram,
) -> SasimStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let json = read(path_arg(model_path, "model_path")?)?;
        let blob = read(path_arg(weights_path, "weights_path")?)?;
        let json = String::from_utf8(json).map_err(|_| Failure(SasimStatus::Format, "model is not UTF-8".into()))?;
        let model = ModelDesc::from_json_and_blob(&json, &blob)?;
        let filter = Bandpass::design(SAMPLE_RATE_HZ, &FilterConfig::default())?;
        let calib = synth::default_calibration(&model, &filter, seed);
        let prog = compile(&model, &HwConfig::default(), sparsity, &calib)?;
        emit(out, prog);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `prog` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sasim_program_free(prog: *mut SasimProgram) {
    if !prog.is_null() {
        drop(Box::from_raw(prog));
    }
}

/// Number of input elements, 0 for a null handle.
///
/// # Safety
/// `prog` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sasim_program_input_len(prog: *const SasimProgram) -> usize {
    prog.as_ref().map_or(0, |p| p.prog.input_shape.iter().product())
}

/// Number of output elements, 0 for a null handle.
///
/// # Safety
/// `prog` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sasim_program_output_len(prog: *const SasimProgram) -> usize {
    prog.as_ref().map_or(0, |p| p.prog.output_shape().iter().product())
}

/// Calibrated input scale exponent, 0 for a null handle.
///
/// # Safety
/// `prog` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sasim_program_input_scale_exp(prog: *const SasimProgram) -> i32 {
    prog.as_ref().map_or(0, |p| p.prog.input_scale_exp)
}

/// Runs one inference on 8-bit input values at `2^input_scale_exp`.
/// `out_scale_exp` and `cycles` may be null.
///
/// # Safety
/// Buffers must hold the stated number of elements; `prog` must be live.
#[no_mangle]
pub unsafe extern "C" fn sasim_program_run(
    prog: *const SasimProgram,
    input: *const i8,
    input_len: usize,
    input_scale_exp: i32,
    output: *mut i8,
    output_len: usize,
    out_scale_exp: *mut i32,
    cycles: *mut SasimCycles,
) -> SasimStatus {
    guard(|| {
        let p = &prog.as_ref().ok_or_else(|| null("prog"))?.prog;
        if input.is_null() {
            return Err(null("input"));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        let need: usize = p.output_shape().iter().product();
        if output_len < need {
            return Err(Failure(
                SasimStatus::BufferTooSmall,
                format!("output holds {output_len} values, need {need}"),
            ));
        }
        let data = std::slice::from_raw_parts(input, input_len).to_vec();
        let x = QTensor::new(data, p.input_shape.clone(), BitWidth::B8, input_scale_exp)?;
        let (y, trace) = run_program(p, &x)?;
        std::slice::from_raw_parts_mut(output, need).copy_from_slice(y.data());
        if let Some(s) = out_scale_exp.as_mut() {
            *s = y.scale_exp();
        }
        if let Some(c) = cycles.as_mut() {
            *c = SasimCycles::from(&summarize(&trace, &p.hw)?);
        }
        Ok(())
    })
}

/// Filters, infers and votes over `n_samples` 16-bit samples, a multiple
/// of six 512-sample recordings. Writes one diagnosis per six recordings
/// into `out` (capacity `out_cap`) and their count into `written`.
///
/// # Safety
/// `samples` must hold `n_samples` values, `out` `out_cap` entries.
#[no_mangle]
pub unsafe extern "C" fn sasim_diagnose(
    prog: *const SasimProgram,
    samples: *const i16,
    n_samples: usize,
    out: *mut SasimDiagnosis,
    out_cap: usize,
    written: *mut usize,
) -> SasimStatus {
    guard(|| {
        let p = &prog.as_ref().ok_or_else(|| null("prog"))?.prog;
        if samples.is_null() {
            return Err(null("samples"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let all = std::slice::from_raw_parts(samples, n_samples);
        if !n_samples.is_multiple_of(RECORDING_LEN) {
            return Err(Failure(
                SasimStatus::Shape,
                format!("{n_samples} samples are not whole {RECORDING_LEN}-sample recordings"),
            ));
        }
        let recs: Vec<Recording> = all
            .chunks(RECORDING_LEN)
            .map(|c| Recording::new(c.to_vec()))
            .collect::<Result<_, _>>()?;
        let filter = Bandpass::design(SAMPLE_RATE_HZ, &FilterConfig::default())?;
        let (diagnoses, _) = signal::diagnose_recordings(&recs, p, &filter)?;
        if diagnoses.len() > out_cap {
            return Err(Failure(
                SasimStatus::BufferTooSmall,
                format!("{} diagnoses do not fit {out_cap} slots", diagnoses.len()),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, diagnoses.len());
        for (d, s) in diagnoses.iter().zip(dst) {
            *s = SasimDiagnosis {
                verdict: match d.verdict {
                    Class::Va => 0,
                    Class::NonVa => 1,
                },
                votes_va: d.votes_va as u32,
                votes_nonva: d.votes_nonva as u32,
            };
        }
        if let Some(w) = written.as_mut() {
            *w = diagnoses.len();
        }
        Ok(())
    })
}

/// Bit-serial signed product of an activation and a `bits`-wide weight.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sasim_cmul(activation: i8, weight: i32, bits: u32, out: *mut i32) -> SasimStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let bits = BitWidth::try_from(bits)?;
        *out = cmul_mul(CmulOperands::new(activation, weight, bits)?)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_mapping() {
        let f = Failure::from(Error::AccOverflow);
        assert_eq!(f.0, SasimStatus::Overflow);
        let f = Failure::from(Error::Sizing { layer: 3, msg: "too wide".into() });
        assert_eq!((f.0, f.1.as_str()), (SasimStatus::Compile, "layer 3: too wide"));
        assert_eq!(Failure::from(Error::EmptyVote).0, SasimStatus::VoteCount);
    }

    #[test]
    fn panics_become_status() {
        assert_eq!(guard(|| panic!("boom")), SasimStatus::Panic);
        assert_eq!(unsafe { CStr::from_ptr(sasim_last_error()) }.to_str().unwrap(), "internal panic");
    }
}
