//! One-dimensional weighted Gaussian kernel density on a binned grid.

use serde::{Deserialize, Serialize};

use crate::error::{AdtError, Result};
use crate::stats;

const GRID_POINTS: usize = 1024;
const TAIL_BANDWIDTHS: f64 = 5.0;

/// Piecewise-linear density on an even grid, zero outside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDensity {
    pub lo: f64,
    pub step: f64,
    pub values: Vec<f64>,
    pub bandwidth: f64,
}

/// Silverman's rule of thumb: `0.9 min(sd, IQR/1.34) n^{-1/5}`.
pub fn silverman_bandwidth(x: &[f64], w: &[f64]) -> f64 {
    let sd = stats::std_dev(x, Some(w));
    let iqr = stats::weighted_quantile(x, w, 0.75) - stats::weighted_quantile(x, w, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let n = w.iter().filter(|&&v| v > 0.0).count() as f64;
    0.9 * spread * n.powf(-0.2)
}

impl KernelDensity {
    /// Weighted KDE with Silverman bandwidth. Points are linearly binned onto
    /// the grid, convolved with the sampled kernel, then renormalised so the
    /// piecewise-linear density integrates to one.
    pub fn fit(x: &[f64], w: Option<&[f64]>) -> Result<Self> {
        let ones;
        let w = match w {
            Some(w) => w,
            None => {
                ones = vec![1.0; x.len()];
                &ones
            }
        };
        let tw: f64 = w.iter().sum();
        if x.len() < 2 || !(tw > 0.0) {
            return Err(AdtError::InvalidInput("density needs at least two weighted points".into()));
        }
        let h = silverman_bandwidth(x, w);
        // standardized inputs: a spread this small means no residual variation
        if !(h > 1e-9) || !h.is_finite() {
            return Err(AdtError::Numerical(
                "standardized dose residuals have zero variance; the dose looks deterministic given the covariates".into(),
            ));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (&xi, &wi) in x.iter().zip(w) {
            if wi > 0.0 {
                lo = lo.min(xi);
                hi = hi.max(xi);
            }
        }
        lo -= TAIL_BANDWIDTHS * h;
        hi += TAIL_BANDWIDTHS * h;
        let step = (hi - lo) / (GRID_POINTS - 1) as f64;

        let mut mass = vec![0.0; GRID_POINTS];
        for (&xi, &wi) in x.iter().zip(w) {
            if wi <= 0.0 {
                continue;
            }
            let pos = (xi - lo) / step;
            let k = (pos.floor() as usize).min(GRID_POINTS - 2);
            let frac = pos - k as f64;
            mass[k] += wi * (1.0 - frac);
            mass[k + 1] += wi * frac;
        }
        let reach = ((TAIL_BANDWIDTHS * h / step).ceil() as usize).min(GRID_POINTS - 1);
        let kernel: Vec<f64> = (0..=reach)
            .map(|j| {
                let u = j as f64 * step / h;
                (-0.5 * u * u).exp()
            })
            .collect();
        let mut values = vec![0.0; GRID_POINTS];
        for (k, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let a = k.saturating_sub(reach);
            let b = (k + reach).min(GRID_POINTS - 1);
            for (j, v) in values.iter_mut().enumerate().take(b + 1).skip(a) {
                *v += m * kernel[j.abs_diff(k)];
            }
        }
        let integral = trapezoid(&values, step);
        values.iter_mut().for_each(|v| *v /= integral);
        Ok(KernelDensity {
            lo,
            step,
            values,
            bandwidth: h,
        })
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.step * (self.values.len() - 1) as f64
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        let pos = (u - self.lo) / self.step;
        if !(pos >= 0.0) || pos > (self.values.len() - 1) as f64 {
            return 0.0;
        }
        let k = (pos.floor() as usize).min(self.values.len() - 2);
        let frac = pos - k as f64;
        self.values[k] * (1.0 - frac) + self.values[k + 1] * frac
    }
}

fn trapezoid(v: &[f64], step: f64) -> f64 {
    let inner: f64 = v[1..v.len() - 1].iter().sum();
    step * (inner + 0.5 * (v[0] + v[v.len() - 1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    #[test]
    fn integrates_to_one_by_independent_quadrature() {
        let mut rng = crate::rng::substream(2, &[]);
        let x: Vec<f64> = (0..500).map(|_| rng.sample::<f64, _>(StandardNormal).powi(3)).collect();
        let w: Vec<f64> = (0..500).map(|_| rng.gen::<f64>()).collect();
        let kde = KernelDensity::fit(&x, Some(&w)).unwrap();
        // composite Simpson on a grid finer than and offset from the bins
        let (a, b) = (kde.lo - 1.0, kde.hi() + 1.0);
        let n = 400_000;
        let h = (b - a) / n as f64;
        let mut s = kde.eval(a) + kde.eval(b);
        for i in 1..n {
            s += kde.eval(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let integral = s * h / 3.0;
        assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
    }

    #[test]
    fn standard_normal_sample_recovers_density() {
        let mut rng = crate::rng::substream(3, &[]);
        let x: Vec<f64> = (0..20_000).map(|_| rng.sample(StandardNormal)).collect();
        let kde = KernelDensity::fit(&x, None).unwrap();
        for &u in &[-1.5, -0.5, 0.0, 0.7, 1.2] {
            let truth = crate::special::norm_pdf(u);
            assert!((kde.eval(u) - truth).abs() < 0.02, "u={u}");
        }
        assert_eq!(kde.eval(1e6), 0.0);
    }

    #[test]
    fn zero_variance_is_rejected() {
        assert!(KernelDensity::fit(&[0.3; 10], None).is_err());
    }
}
