use crate::pipeline::RunReport;

/// Formats `x` with six significant digits, in the shortest form that
/// reads back to the rounded value.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("scientific notation parses");
    rounded.to_string()
}

pub const ABLATION_HEADER: &str = "variant,label,test_auc,test_logloss,compression_ratio,weighted_code_entropy";

/// One row per report; the entropy column is empty for dense runs.
pub fn ablation_csv(reports: &[RunReport]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in reports {
        let entropy = r
            .quantizer
            .as_ref()
            .map_or(String::new(), |q| fmt_sig(q.weighted_code_entropy));
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant.name(),
            r.variant.label(),
            fmt_sig(r.stage2.test.auc),
            fmt_sig(r.stage2.test.logloss),
            fmt_sig(r.memory.compression_ratio),
            entropy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig(0.779012345), "0.779012");
        assert_eq!(fmt_sig(50.95541401), "50.9554");
        assert_eq!(fmt_sig(1234567.0), "1234570");
        assert_eq!(fmt_sig(0.5), "0.5");
        assert_eq!(fmt_sig(-1.23456789e-7), "-0.000000123457");
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(2.0), "2");
    }
}
