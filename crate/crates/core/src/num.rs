//! Number formatting shared by every text format the crate writes.

/// Shortest text that parses back to exactly `x`.
///
/// Non-finite values render as `nan`, `inf` and `-inf`; those only ever
/// appear in result tables as sentinels.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{}", x)
    }
}

/// Like [`fmt_f64`] but always contains `.` or `e`, so the text reads back
/// as a real rather than an integer.
pub fn fmt_real_literal(x: f64) -> String {
    let s = fmt_f64(x);
    if s.contains(['.', 'e', 'E', 'n', 'i']) {
        s
    } else {
        s + ".0"
    }
}

/// Parses a finite float written by [`fmt_f64`].
pub fn parse_finite(s: &str) -> Option<f64> {
    let bytes = s.as_bytes();
    let numeric = !bytes.is_empty()
        && bytes
            .iter()
            .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'e' | b'E' | b'+' | b'-'));
    if !numeric {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}
