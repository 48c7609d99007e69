//! Variance of the query/state dot product under random inputs.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

/// Analytic and Monte-Carlo variance of `(T_q x_i) . (T_h x_j)` for
/// independent `x ~ N(0, sigma I)`.
#[derive(Clone, Debug, Serialize)]
pub struct VarianceReport {
    /// `tr(Sigma_q Sigma_h) = sigma^2 |T_q^T T_h|_F^2`.
    pub analytic: f64,
    pub empirical: f64,
    pub sample_count: usize,
    pub empirical_mean: f64,
    /// Standard error of the empirical mean.
    pub mean_stderr: f64,
    /// `|empirical - analytic| / analytic` (0 when analytic is 0).
    pub relative_deviation: f64,
}

impl VarianceReport {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "analytic,empirical,sample_count,empirical_mean,mean_stderr,relative_deviation")?;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            self.analytic,
            self.empirical,
            self.sample_count,
            self.empirical_mean,
            self.mean_stderr,
            self.relative_deviation
        )
    }
}

/// `sigma` is the per-coordinate variance of the inputs (their covariance is
/// `sigma I`). Requires at least 1000 samples for a meaningful empirical
/// estimate.
pub fn dot_product_variance(
    t_q: &Array2<f64>,
    t_h: &Array2<f64>,
    sigma: f64,
    samples: usize,
    seed: u64,
) -> VarianceReport {
    assert!(samples >= 1000, "need at least 1000 samples");
    assert_eq!(t_q.ncols(), t_h.ncols(), "transforms must share input dimension");
    assert!(sigma > 0.0, "sigma must be positive");

    // Frobenius route for the analytic value.
    let cross = t_q.t().dot(t_h);
    let analytic = sigma * sigma * cross.iter().map(|v| v * v).sum::<f64>();

    let d = t_q.ncols();
    let std = sigma.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut xi = ndarray::Array1::<f64>::zeros(d);
    let mut xj = ndarray::Array1::<f64>::zeros(d);
    for _ in 0..samples {
        for v in xi.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = g * std;
        }
        for v in xj.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = g * std;
        }
        let q = t_q.dot(&xi);
        let h = t_h.dot(&xj);
        let z = q.dot(&h);
        sum += z;
        sumsq += z * z;
    }
    let n = samples as f64;
    let empirical_mean = sum / n;
    let empirical = (sumsq - n * empirical_mean * empirical_mean) / (n - 1.0);
    let mean_stderr = (empirical / n).sqrt();
    let relative_deviation = if analytic != 0.0 {
        (empirical - analytic).abs() / analytic
    } else {
        0.0
    };
    VarianceReport {
        analytic,
        empirical,
        sample_count: samples,
        empirical_mean,
        mean_stderr,
        relative_deviation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::specgen::standard_normal_matrix;

    #[test]
    fn identity_transforms_give_exactly_n() {
        let n = 6;
        let eye = Array2::<f64>::eye(n);
        let r = dot_product_variance(&eye, &eye, 1.0, 2000, 1);
        assert_eq!(r.analytic, n as f64);
    }

    #[test]
    fn trace_route_matches_frobenius_route() {
        // tr(Sigma_q Sigma_h) computed from the covariance matrices equals
        // the Frobenius form used by the implementation.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        use rand::SeedableRng as _;
        let t_q = standard_normal_matrix(&mut rng, 4, 3, 1.0);
        let t_h = standard_normal_matrix(&mut rng, 4, 3, 1.0);
        let sigma = 0.7;
        let sq = t_q.dot(&t_q.t()) * sigma;
        let sh = t_h.dot(&t_h.t()) * sigma;
        let trace: f64 = sq.dot(&sh).diag().sum();
        let r = dot_product_variance(&t_q, &t_h, sigma, 1000, 3);
        assert!((trace - r.analytic).abs() < 1e-10 * trace.abs().max(1.0));
    }

    #[test]
    fn monte_carlo_converges_to_analytic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        use rand::SeedableRng as _;
        let t_q = standard_normal_matrix(&mut rng, 4, 4, 0.5);
        let t_h = standard_normal_matrix(&mut rng, 4, 4, 0.5);
        let r = dot_product_variance(&t_q, &t_h, 1.0, 100_000, 7);
        assert!(
            r.relative_deviation < 0.10,
            "deviation {} too large (analytic {}, empirical {})",
            r.relative_deviation,
            r.analytic,
            r.empirical
        );
        // Zero mean within three standard errors.
        assert!(r.empirical_mean.abs() < 3.0 * r.mean_stderr);
    }
}
