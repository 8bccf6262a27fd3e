//! Shared pieces of the `reed`, `reed-server` and `reed-trace` binaries.

use std::process::ExitCode;

use reed_core::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_ACCESS_DENIED: u8 = 2;
pub const EXIT_INTEGRITY: u8 = 3;
pub const EXIT_TRANSPORT: u8 = 4;
pub const EXIT_RATE_LIMITED: u8 = 5;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::AccessDenied | Error::NotOwner => EXIT_ACCESS_DENIED,
        Error::IntegrityViolation | Error::AuthenticationFailure | Error::FingerprintMismatch => EXIT_INTEGRITY,
        Error::Transport(_) | Error::Protocol(_) => EXIT_TRANSPORT,
        Error::RateLimited => EXIT_RATE_LIMITED,
        _ => EXIT_OTHER,
    }
}

/// Prints the error and turns it into the process exit status.
pub fn finish(result: reed_core::Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Parses arguments, reporting usage errors with exit status 1 rather
/// than clap's 2, which is reserved for access denial.
pub fn parse_args<P: clap::Parser>() -> Result<P, ExitCode> {
    P::try_parse().map_err(|e| {
        let _ = e.print();
        if e.use_stderr() {
            ExitCode::from(EXIT_OTHER)
        } else {
            ExitCode::from(EXIT_OK)
        }
    })
}

/// Parses sizes like `4096`, `8K`, `1M` or `2G` (powers of 1024).
pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, shift) = match s.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => {
            let shift = match c.to_ascii_uppercase() {
                'K' => 10,
                'M' => 20,
                'G' => 30,
                _ => return Err(format!("unknown size suffix in {s:?}")),
            };
            (&s[..i], shift)
        }
        _ => (s, 0),
    };
    let n: u64 = digits.parse().map_err(|_| format!("bad size {s:?}"))?;
    n.checked_shl(shift)
        .filter(|v| v >> shift == n)
        .ok_or_else(|| format!("size {s:?} overflows"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("4096"), Ok(4096));
        assert_eq!(parse_size("8K"), Ok(8192));
        assert_eq!(parse_size("1m"), Ok(1 << 20));
        assert_eq!(parse_size("2G"), Ok(2 << 30));
        assert!(parse_size("1X").is_err());
        assert!(parse_size("M").is_err());
        assert!(parse_size("99999999999G").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::AccessDenied), 2);
        assert_eq!(exit_code(&Error::IntegrityViolation), 3);
        assert_eq!(exit_code(&Error::Transport("x".into())), 4);
        assert_eq!(exit_code(&Error::RateLimited), 5);
        assert_eq!(exit_code(&Error::PolicyEmpty), 1);
    }
}
