use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use singqa::Error;

/// Result code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SingqaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    MissingInput = 6,
    StaleModel = 7,
    Panic = 8,
}

impl SingqaStatus {
    pub fn name(self) -> &'static str {
        match self {
            SingqaStatus::Ok => "ok",
            SingqaStatus::NullPointer => "null pointer",
            SingqaStatus::InvalidArgument => "invalid argument",
            SingqaStatus::Io => "i/o error",
            SingqaStatus::Format => "format error",
            SingqaStatus::DimensionMismatch => "dimension mismatch",
            SingqaStatus::MissingInput => "missing input",
            SingqaStatus::StaleModel => "stale model",
            SingqaStatus::Panic => "internal panic",
        }
    }

    fn for_error(err: &Error) -> Self {
        match err {
            Error::Io { .. } => SingqaStatus::Io,
            Error::ManifestRow { .. }
            | Error::DuplicateUttId { .. }
            | Error::LabelOutOfRange { .. }
            | Error::UnsupportedWav(_)
            | Error::MalformedWav(_)
            | Error::FeatureFormat(_)
            | Error::InvalidFeatures(_)
            | Error::ModelFormat { .. }
            | Error::Csv { .. } => SingqaStatus::Format,
            Error::DimensionMismatch { .. } | Error::Alignment(_) => {
                SingqaStatus::DimensionMismatch
            }
            Error::MissingInput(_) => SingqaStatus::MissingInput,
            Error::StaleMember { .. } => SingqaStatus::StaleModel,
            Error::Utterance { source, .. } => Self::for_error(source),
            _ => SingqaStatus::InvalidArgument,
        }
    }
}

pub(crate) struct Failure {
    status: SingqaStatus,
    message: String,
}

impl Failure {
    pub(crate) fn new(status: SingqaStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub(crate) fn null(what: &str) -> Self {
        Self::new(SingqaStatus::NullPointer, format!("{what} is null"))
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Self::new(SingqaStatus::InvalidArgument, message)
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Self::new(SingqaStatus::for_error(&err), err.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    // interior NULs cannot cross the boundary
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

pub(crate) fn last_error_ptr() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |m| m.as_ptr()))
}

/// Runs `f`, recording any failure or panic as this thread's last error.
pub(crate) fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SingqaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SingqaStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(failure.message);
            failure.status
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {what}"));
            SingqaStatus::Panic
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CStr;

    fn last() -> String {
        unsafe { CStr::from_ptr(last_error_ptr()) }
            .to_string_lossy()
            .into_owned()
    }

    #[test]
    fn failure_sets_message() {
        let s = guard(|| Err(Failure::invalid("bad\0value")));
        assert_eq!(s, SingqaStatus::InvalidArgument);
        assert_eq!(last(), "bad value");
    }

    #[test]
    fn panic_is_caught() {
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let s = guard(|| panic!("boom"));
        std::panic::set_hook(prev);
        assert_eq!(s, SingqaStatus::Panic);
        assert_eq!(last(), "panic: boom");
    }

    #[test]
    fn nested_utterance_errors_keep_their_class() {
        let inner = Error::MissingInput("pitch".into());
        let err = Error::Utterance {
            utt_id: "u1".into(),
            source: Box::new(inner),
        };
        assert_eq!(SingqaStatus::for_error(&err), SingqaStatus::MissingInput);
    }
}
