use std::path::Path;

use crate::error::{FlicError, Result};
use crate::federation::MetricsRecord;

pub const METRICS_HEADER: &str = "round,train_loss,mean_accuracy,min_accuracy,max_accuracy,wall_ms,bytes_up,bytes_down";

/// Six significant digits, positional notation for moderate magnitudes.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&exp) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // rounding can carry into a new leading digit, e.g. 9.999995 -> 10.00000
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.round,
            format_sig6(r.train_loss),
            format_sig6(r.mean_accuracy),
            format_sig6(r.min_accuracy),
            format_sig6(r.max_accuracy),
            format_sig6(r.wall_ms),
            r.bytes_up,
            r.bytes_down
        ));
    }
    out
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    if records.windows(2).any(|w| w[1].round <= w[0].round) {
        return Err(FlicError::InvalidArgument("metrics rounds must be strictly increasing".into()));
    }
    std::fs::write(path, metrics_csv(records)).map_err(|e| FlicError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_examples() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.123456789), "0.123457");
        assert_eq!(format_sig6(1234.56789), "1234.57");
        assert_eq!(format_sig6(-2.5), "-2.5");
        assert_eq!(format_sig6(1.5e-9), "1.50000e-9");
        assert_eq!(format_sig6(9.9999996), "10");
    }
}
