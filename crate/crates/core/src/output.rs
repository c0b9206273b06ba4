//! Shared formatting of tabular output.

/// First line of every CSV file.
pub const SCHEMA_HEADER: &str = "# levyap-schema v1";

/// Formats a float with 17 significant digits, which round-trips exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
