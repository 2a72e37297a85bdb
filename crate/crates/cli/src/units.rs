//! Parsing of unit-suffixed durations.

use crate::error::CliError;

/// Parse a duration such as `3us`, `0.49ns`, `2.5e-6s` or `1.5ms` into
/// seconds. A bare number is taken as seconds. `µs` is accepted for `us`.
pub fn parse_seconds(text: &str) -> Result<f64, CliError> {
    let trimmed = text.trim();
    let split = trimmed
        .find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E' || c == 'µ')
        .unwrap_or(trimmed.len());
    let (number, unit) = trimmed.split_at(split);
    let scale = match unit.trim() {
        "" | "s" => 1.0,
        "ms" => 1e-3,
        "us" | "µs" => 1e-6,
        "ns" => 1e-9,
        other => {
            return Err(CliError::Input(format!(
                "unknown time unit {other:?} in {text:?} (use s, ms, us or ns)"
            )))
        }
    };
    let value: f64 = number
        .trim()
        .parse()
        .map_err(|_| CliError::Input(format!("cannot parse duration {text:?}")))?;
    if !value.is_finite() {
        return Err(CliError::Input(format!("duration {text:?} is not finite")));
    }
    Ok(value * scale)
}

/// Format `x` with at least `digits` significant digits.
pub fn fmt_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffixes() {
        assert_eq!(parse_seconds("3us").unwrap(), 3e-6);
        assert_eq!(parse_seconds("3 µs").unwrap(), 3e-6);
        assert!((parse_seconds("0.49ns").unwrap() / 0.49e-9 - 1.0).abs() < 1e-15);
        assert_eq!(parse_seconds("1.5ms").unwrap(), 1.5e-3);
        assert_eq!(parse_seconds("2s").unwrap(), 2.0);
        assert_eq!(parse_seconds("2.5e-6").unwrap(), 2.5e-6);
        assert_eq!(parse_seconds("2.5e-6s").unwrap(), 2.5e-6);
        assert!((parse_seconds("1E-3ms").unwrap() / 1e-6 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_seconds("3 fortnights").is_err());
        assert!(parse_seconds("us").is_err());
        assert!(parse_seconds("").is_err());
        assert!(parse_seconds("inf").is_err());
    }

    #[test]
    fn significant_digits() {
        assert_eq!(fmt_significant(0.489715123, 6), "0.489715");
        assert_eq!(fmt_significant(12.3456789, 6), "12.3457");
        assert_eq!(fmt_significant(123456.7, 6), "123457");
    }
}
