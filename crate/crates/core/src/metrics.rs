/// Reference parameter scale of the trade-off score.
pub const PPT_P0: f64 = 1e7;

/// Performance-parameter trade-off: `(top1/100) · exp(−log10(1 + P/P₀))`.
///
/// Strictly increasing in accuracy and strictly decreasing in parameters.
pub fn ppt_score(top1: f64, adapter_params: u64) -> f64 {
    (top1 / 100.0) * (-(1.0 + adapter_params as f64 / PPT_P0).log10()).exp()
}

/// Top-1 accuracy in percent.
pub fn top1_percent(predictions: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppt_examples() {
        assert!((ppt_score(52.94, 0) - 0.5294).abs() < 1e-12);
        assert!((ppt_score(71.70, 2_380_000) - 0.6530).abs() < 0.002);
        assert!((ppt_score(75.19, 49_920) - 0.7503).abs() < 1e-4);
        assert!((ppt_score(74.21, 280_000) - 0.7332).abs() < 1e-4);
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(top1_percent(&[1, 2, 3], &[1, 2, 3]), 100.0);
        assert_eq!(top1_percent(&[0, 1], &[0, 0]), 50.0);
    }
}
