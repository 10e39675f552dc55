//! Special functions: normal distribution helpers, the Matérn kernel through
//! the modified Bessel function of the second kind, and Gauss–Hermite rules.

use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

/// Standard normal CDF, accurate in both tails.
#[inline]
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(p)
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Maps a standard normal variate onto an Exponential(1) variate by the
/// inverse probability transform, `-ln(1 - Φ(z))`, evaluated without
/// cancellation in either tail.
#[inline]
pub fn normal_to_exponential(z: f64) -> f64 {
    if z < 0.0 {
        -(-norm_cdf(z)).ln_1p()
    } else {
        -(0.5 * erfc(z / std::f64::consts::SQRT_2)).ln()
    }
}

/// `ln K_ν(x)` for real order `ν ≥ 0` and `x > 0`.
///
/// Evaluated from `K_ν(x) = ∫₀^∞ exp(-x cosh t) cosh(νt) dt` with the
/// trapezoid rule, which converges geometrically for this even, doubly
/// exponentially decaying integrand. Step halving stops at 1e-13 relative
/// change.
pub fn ln_bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0 && nu >= 0.0, "ln_bessel_k domain: nu={nu}, x={x}");
    let log_integrand = |t: f64| -> f64 {
        let nt = nu * t;
        // ln cosh(nt) without overflow
        let lc = nt + (0.5 * (1.0 + (-2.0 * nt).exp())).ln();
        -x * t.cosh() + lc
    };
    // integrand peak: x sinh t = nu tanh(nu t) ≈ nu
    let t_peak = if nu > 0.0 { (nu / x).asinh() } else { 0.0 };
    let g_peak = log_integrand(t_peak);
    let mut t_max = t_peak + 1.0;
    while log_integrand(t_max) > g_peak - 46.0 {
        t_max += 0.5;
    }

    let mut h = 0.1f64.min(t_max / 8.0);
    let mut prev = f64::NAN;
    for _ in 0..12 {
        let n = (t_max / h).ceil() as usize;
        let mut sum = 0.5 * (log_integrand(0.0) - g_peak).exp();
        for k in 1..=n {
            sum += (log_integrand(k as f64 * h) - g_peak).exp();
        }
        let val = sum * h;
        if prev.is_finite() && ((val - prev) / val).abs() < 1e-13 {
            return g_peak + val.ln();
        }
        prev = val;
        h *= 0.5;
    }
    g_peak + prev.ln()
}

/// Matérn correlation `2^{1-ν}/Γ(ν) (m/L)^ν K_ν(m/L)`, with limit 1 at `m = 0`.
pub fn matern_correlation(distance: f64, range: f64, nu: f64) -> f64 {
    let x = distance / range;
    if x <= 1e-12 {
        return 1.0;
    }
    if x > 745.0 + 2.0 * nu {
        return 0.0;
    }
    let ln_c = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * x.ln();
    (ln_c + ln_bessel_k(nu, x)).exp().min(1.0)
}

/// Gauss–Hermite rule for weight `exp(-x²)` via the Golub–Welsch eigenproblem.
/// Returns `(nodes, weights)` with nodes ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matern_half_is_exponential() {
        for i in 0..200 {
            let m = i as f64 * 0.37;
            let a = matern_correlation(m, 7.0, 0.5);
            let b = (-m / 7.0).exp();
            assert!((a - b).abs() < 1e-9, "m={m}: {a} vs {b}");
        }
    }

    #[test]
    fn matern_three_halves_closed_form() {
        // ν = 3/2: (1 + x) e^{-x}
        for i in 1..100 {
            let x = i as f64 * 0.11;
            let a = matern_correlation(x, 1.0, 1.5);
            assert_relative_eq!(a, (1.0 + x) * (-x).exp(), epsilon = 1e-10);
        }
    }

    #[test]
    fn bessel_k_reference_values() {
        // reference values from scipy.special.kv
        assert_relative_eq!(ln_bessel_k(0.0, 1.0).exp(), 0.421_024_438_240_708_3, max_relative = 1e-11);
        assert_relative_eq!(ln_bessel_k(1.0, 2.0).exp(), 0.139_865_881_816_522_4, max_relative = 1e-11);
        assert_relative_eq!(ln_bessel_k(5.0, 0.5).exp(), 12_097.979_476_096_392, max_relative = 1e-9);
    }

    #[test]
    fn matern_is_monotone_and_bounded() {
        for &nu in &[0.3, 1.0, 5.0, 12.0] {
            let mut prev = 1.0;
            for i in 0..300 {
                let c = matern_correlation(i as f64 * 0.05, 1.0, nu);
                assert!(c <= prev + 1e-12 && c >= 0.0);
                prev = c;
            }
        }
        assert_eq!(matern_correlation(0.0, 3.85, 5.0), 1.0);
    }

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite(48);
        let m0: f64 = w.iter().sum();
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert_relative_eq!(m0, std::f64::consts::PI.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(m2, std::f64::consts::PI.sqrt() / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn exponential_transform_tails() {
        assert_relative_eq!(normal_to_exponential(0.0), std::f64::consts::LN_2, epsilon = 1e-14);
        let z = 9.0;
        let w = normal_to_exponential(z);
        assert!(w.is_finite() && w > 40.0);
        assert!(normal_to_exponential(-9.0) > 0.0);
    }
}
