/// Formats `x` with 6 significant digits, switching to scientific notation
/// for very large or very small magnitudes.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let exponent = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&exponent) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - exponent).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new digit (999999.5 -> 1000000); fall back
    // to scientific notation then.
    let digits = s.chars().filter(char::is_ascii_digit).collect::<String>();
    if digits.trim_start_matches('0').len() > 6 {
        return format!("{x:.5e}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(4.5), "4.50000");
        assert_eq!(sig6(120.0), "120.000");
        assert_eq!(sig6(-3.14159265), "-3.14159");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(1.5e-7), "1.50000e-7");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(999999.7), "1.00000e6");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(f64::NAN), "NaN");
    }
}
