use rand::seq::index::sample;
use rand::Rng;

/// Number of RANSAC iterations needed to draw one all-inlier sample with
/// probability `confidence`, capped at `max_iters`.
pub fn adaptive_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64, max_iters: usize) -> usize {
    if inlier_ratio <= 0.0 {
        return max_iters;
    }
    let good = inlier_ratio.min(1.0).powi(sample_size as i32);
    if good >= 1.0 - 1e-12 {
        return 1;
    }
    let n = (1.0 - confidence).ln() / (1.0 - good).ln();
    if !n.is_finite() {
        return max_iters;
    }
    (n.ceil() as usize).clamp(1, max_iters)
}

pub(crate) fn draw<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    sample(rng, n, k).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_budget() {
        assert_eq!(adaptive_iterations(1.0, 5, 0.99, 1000), 1);
        assert_eq!(adaptive_iterations(0.0, 5, 0.99, 1000), 1000);
        // 0.5^5 = 1/32 -> log(0.01)/log(31/32) = 145.05
        assert_eq!(adaptive_iterations(0.5, 5, 0.99, 1000), 146);
        assert_eq!(adaptive_iterations(0.1, 5, 0.99, 1000), 1000);
    }
}
