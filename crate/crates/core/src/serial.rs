//! Fixed-precision text output for reals.

/// Decimal (non-exponent) rendering with 17 significant digits, which
/// round-trips every finite `f64`.
pub fn decimal17(x: f64) -> String {
    if x == 0.0 {
        return "0.0000000000000000".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (16 - exp).max(0) as usize;
    format!("{:.*}", decimals, x)
}

pub fn decimal17_array(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|&x| decimal17(x)).collect();
    format!("[{}]", parts.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn significant_digits(s: &str) -> usize {
        s.chars().filter(|c| c.is_ascii_digit()).collect::<String>().trim_start_matches('0').len()
    }

    #[test]
    fn round_trips_and_keeps_precision() {
        for &x in &[0.1, 1.0 / 3.0, 55.3, 1e-7, -12345.678, 94.99999999999] {
            let s = decimal17(x);
            assert!(!s.contains('e'), "{s}");
            assert!(significant_digits(&s) >= 15, "{s}");
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
    }
}
