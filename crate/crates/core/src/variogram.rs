//! Robust empirical variogram and least-squares fitting of correlation
//! families to it.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{AdtError, Result};
use crate::panel::DistanceMatrix;
use crate::special::matern_correlation;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariogramConfig {
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default = "default_min_pairs")]
    pub min_pairs: usize,
}

fn default_bins() -> usize {
    15
}
fn default_min_pairs() -> usize {
    30
}

impl Default for VariogramConfig {
    fn default() -> Self {
        VariogramConfig {
            n_bins: default_bins(),
            min_pairs: default_min_pairs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalVariogram {
    /// Mean pair distance per bin (km), increasing.
    pub bins: Vec<f64>,
    pub gamma: Vec<f64>,
    pub counts: Vec<usize>,
    /// Sample variance of the input values (population form).
    pub variance: f64,
    /// Representative pair distances per bin (quantile midpoints), used to
    /// average a model over each bin the same way the estimator does.
    #[serde(default)]
    pub support: Vec<Vec<f64>>,
}

/// Pair distances kept per bin to represent its distance distribution.
const SUPPORT_POINTS: usize = 32;

impl EmpiricalVariogram {
    /// Model semivariance matched to bin `k`: the estimator averages
    /// `|Δ|^{1/2}`, i.e. `γ^{1/4}` across pairs, so the model is averaged on
    /// that scale. Falls back to the bin centre without support.
    pub fn bin_model(&self, k: usize, gamma: impl Fn(f64) -> f64) -> f64 {
        match self.support.get(k) {
            Some(s) if !s.is_empty() => {
                let m = s.iter().map(|&d| gamma(d).max(0.0).powf(0.25)).sum::<f64>() / s.len() as f64;
                m.powi(4)
            }
            _ => gamma(self.bins[k]),
        }
    }
}

/// Cressie–Hawkins variogram over equal-count distance bins up to half the
/// largest pairwise distance. Bins with fewer than `min_pairs` pairs are
/// dropped.
pub fn robust_variogram(values: &[f64], dist: &DistanceMatrix, cfg: &VariogramConfig) -> Result<EmpiricalVariogram> {
    let n = values.len();
    if n < 2 || dist.len() != n {
        return Err(AdtError::InvalidInput(
            "variogram needs at least two sites with matching distances".into(),
        ));
    }
    if cfg.n_bins == 0 {
        return Err(AdtError::Config("variogram needs at least one bin".into()));
    }
    let cutoff = dist.max() / 2.0;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dist.get(i, j);
            if d <= cutoff || n == 2 {
                pairs.push((d, (values[i] - values[j]).abs().sqrt()));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut bins, mut gamma, mut counts, mut support) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let total = pairs.len();
    for b in 0..cfg.n_bins {
        let lo = b * total / cfg.n_bins;
        let hi = (b + 1) * total / cfg.n_bins;
        let k = hi - lo;
        if k < cfg.min_pairs.max(1) {
            continue;
        }
        let chunk = &pairs[lo..hi];
        let mean_d = chunk.iter().map(|p| p.0).sum::<f64>() / k as f64;
        let mean_root = chunk.iter().map(|p| p.1).sum::<f64>() / k as f64;
        bins.push(mean_d);
        gamma.push(0.5 * mean_root.powi(4) / (0.457 + 0.494 / k as f64));
        counts.push(k);
        support.push(
            (0..SUPPORT_POINTS)
                .map(|q| chunk[((2 * q + 1) * k / (2 * SUPPORT_POINTS)).min(k - 1)].0)
                .collect(),
        );
    }
    if bins.is_empty() {
        return Err(AdtError::Numerical(format!(
            "every variogram bin has fewer than {} pairs",
            cfg.min_pairs
        )));
    }
    let variance = stats::std_dev(values, None).powi(2);
    Ok(EmpiricalVariogram {
        bins,
        gamma,
        counts,
        variance,
        support,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Exponential,
    Matern,
    Power,
    Linear,
    Spherical,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Exponential,
        Family::Matern,
        Family::Power,
        Family::Linear,
        Family::Spherical,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Exponential => "exponential",
            Family::Matern => "matern",
            Family::Power => "power",
            Family::Linear => "linear",
            Family::Spherical => "spherical",
        }
    }
}

/// Correlation function of distance (km). Every variant has `corr(0) = 1`
/// and is nonincreasing and nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Correlation {
    Exponential { range: f64 },
    Matern { range: f64, smoothness: f64 },
    /// Power variogram `scale·m^exponent` capped at `sill`.
    Power { scale: f64, exponent: f64, sill: f64 },
    Linear { range: f64 },
    Spherical { range: f64 },
}

impl Correlation {
    pub fn family(&self) -> Family {
        match self {
            Correlation::Exponential { .. } => Family::Exponential,
            Correlation::Matern { .. } => Family::Matern,
            Correlation::Power { .. } => Family::Power,
            Correlation::Linear { .. } => Family::Linear,
            Correlation::Spherical { .. } => Family::Spherical,
        }
    }

    pub fn corr(&self, m: f64) -> f64 {
        if m <= 0.0 {
            return 1.0;
        }
        match *self {
            Correlation::Exponential { range } => (-m / range).exp(),
            Correlation::Matern { range, smoothness } => matern_correlation(m, range, smoothness),
            Correlation::Power { scale, exponent, sill } => (1.0 - scale * m.powf(exponent) / sill).max(0.0),
            Correlation::Linear { range } => (1.0 - m / range).max(0.0),
            Correlation::Spherical { range } => {
                let u = m / range;
                if u >= 1.0 {
                    0.0
                } else {
                    1.0 - 1.5 * u + 0.5 * u * u * u
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Correlation::Exponential { range } | Correlation::Linear { range } | Correlation::Spherical { range } => {
                range > 0.0 && range.is_finite()
            }
            Correlation::Matern { range, smoothness } => range > 0.0 && range.is_finite() && smoothness > 0.0,
            Correlation::Power { scale, exponent, sill } => {
                scale >= 0.0 && exponent > 0.0 && exponent <= 2.0 && sill > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(AdtError::Config(format!("invalid correlation parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationModel {
    pub correlation: Correlation,
    pub sigma2: f64,
    /// Pair-count weighted RMSE against the empirical variogram.
    pub rmse: f64,
}

const MATERN_SMOOTHNESS: [f64; 11] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0];
const SCAN_POINTS: usize = 120;

/// Matérn correlation tabulated against `ln(m/L)` for the optimiser's many
/// evaluations; linear interpolation of the log-correlation.
struct MaternTable {
    ln_lo: f64,
    step: f64,
    ln_corr: Vec<f64>,
}

impl MaternTable {
    const POINTS: usize = 4000;

    fn new(nu: f64) -> Self {
        let ln_lo = 1e-8f64.ln();
        let ln_hi = (60.0 + 4.0 * nu).ln();
        let step = (ln_hi - ln_lo) / (Self::POINTS - 1) as f64;
        let ln_corr = (0..Self::POINTS)
            .map(|i| matern_correlation((ln_lo + step * i as f64).exp(), 1.0, nu).max(1e-300).ln())
            .collect();
        MaternTable { ln_lo, step, ln_corr }
    }

    fn corr(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        let pos = (x.ln() - self.ln_lo) / self.step;
        if pos <= 0.0 {
            return self.ln_corr[0].exp();
        }
        let last = self.ln_corr.len() - 1;
        if pos >= last as f64 {
            return 0.0;
        }
        let k = pos.floor() as usize;
        let f = pos - k as f64;
        (self.ln_corr[k] * (1.0 - f) + self.ln_corr[k + 1] * f).exp()
    }
}

fn matern_tables() -> &'static [MaternTable] {
    static TABLES: OnceLock<Vec<MaternTable>> = OnceLock::new();
    TABLES.get_or_init(|| MATERN_SMOOTHNESS.iter().map(|&nu| MaternTable::new(nu)).collect())
}

/// Weighted SSE with the sill profiled out in closed form; returns
/// `(sse, sigma2)`.
fn profiled_sse(v: &EmpiricalVariogram, corr: impl Fn(f64) -> f64) -> (f64, f64) {
    let g: Vec<f64> = (0..v.bins.len()).map(|k| v.bin_model(k, |m| 1.0 - corr(m))).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..g.len() {
        let c = v.counts[k] as f64;
        num += c * g[k] * v.gamma[k];
        den += c * g[k] * g[k];
    }
    let s2 = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
    (weighted_sse(v, |k| s2 * g[k]), s2)
}

fn weighted_sse(v: &EmpiricalVariogram, model: impl Fn(usize) -> f64) -> f64 {
    (0..v.bins.len())
        .map(|k| v.counts[k] as f64 * (v.gamma[k] - model(k)).powi(2))
        .sum()
}

/// Minimise `f` over `[lo, hi]` in log space: scan, then golden section
/// around the best scan point.
fn minimize_log(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (a, b) = (lo.ln(), hi.ln());
    let step = (b - a) / (SCAN_POINTS - 1) as f64;
    let mut best = (a, f64::INFINITY);
    for i in 0..SCAN_POINTS {
        let x = a + step * i as f64;
        let y = f(x.exp());
        if y < best.1 {
            best = (x, y);
        }
    }
    let (mut l, mut r) = ((best.0 - step).max(a), (best.0 + step).min(b));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = r - phi * (r - l);
    let mut x2 = l + phi * (r - l);
    let (mut f1, mut f2) = (f(x1.exp()), f(x2.exp()));
    for _ in 0..60 {
        if f1 < f2 {
            r = x2;
            x2 = x1;
            f2 = f1;
            x1 = r - phi * (r - l);
            f1 = f(x1.exp());
        } else {
            l = x1;
            x1 = x2;
            f1 = f2;
            x2 = l + phi * (r - l);
            f2 = f(x2.exp());
        }
    }
    let x = 0.5 * (l + r);
    if f(x.exp()) <= best.1 {
        x.exp()
    } else {
        best.0.exp()
    }
}

fn finish(v: &EmpiricalVariogram, correlation: Correlation, sse: f64, sigma2: f64) -> Option<CorrelationModel> {
    let total: f64 = v.counts.iter().map(|&c| c as f64).sum();
    let rmse = (sse / total).sqrt();
    (rmse.is_finite() && sigma2.is_finite()).then_some(CorrelationModel {
        correlation,
        sigma2,
        rmse,
    })
}

/// Least-squares fit of one family. `None` when the fit is not usable.
pub fn fit_family(v: &EmpiricalVariogram, family: Family) -> Option<CorrelationModel> {
    let dmin = v.bins[0].max(1e-9);
    let dmax = *v.bins.last().unwrap();
    let (lo, hi) = (dmin / 50.0, dmax * 50.0);
    let one_param = |make: fn(f64) -> Correlation| {
        let l = minimize_log(lo, hi, |l| profiled_sse(v, |m| make(l).corr(m)).0);
        let c = make(l);
        let (sse, s2) = profiled_sse(v, |m| c.corr(m));
        finish(v, c, sse, s2)
    };
    match family {
        Family::Exponential => one_param(|range| Correlation::Exponential { range }),
        Family::Linear => one_param(|range| Correlation::Linear { range }),
        Family::Spherical => one_param(|range| Correlation::Spherical { range }),
        Family::Matern => MATERN_SMOOTHNESS
            .iter()
            .zip(matern_tables())
            .filter_map(|(&nu, table)| {
                let l = minimize_log(lo, hi, |l| profiled_sse(v, |m| table.corr(m / l)).0);
                let c = Correlation::Matern { range: l, smoothness: nu };
                let (sse, s2) = profiled_sse(v, |m| c.corr(m));
                finish(v, c, sse, s2)
            })
            .min_by(|a, b| a.rmse.total_cmp(&b.rmse)),
        Family::Power => {
            let sill = v.variance;
            if !(sill > 0.0) {
                return None;
            }
            // scale brackets: the capped variogram reaches the sill between
            // a fiftieth of the first bin and fifty times the last
            (1..=40)
                .filter_map(|i| {
                    let exponent = i as f64 * 0.05;
                    let s_lo = sill / hi.powf(exponent);
                    let s_hi = sill / lo.powf(exponent);
                    let make = |scale| Correlation::Power { scale, exponent, sill };
                    let sse = |scale| weighted_sse(v, |k| v.bin_model(k, |m| sill * (1.0 - make(scale).corr(m))));
                    let scale = minimize_log(s_lo, s_hi, sse);
                    finish(v, make(scale), sse(scale), sill)
                })
                .min_by(|a, b| a.rmse.total_cmp(&b.rmse))
        }
    }
}

/// Fit each requested family and return all usable fits ordered by RMSE,
/// best first.
pub fn fit_correlation(v: &EmpiricalVariogram, families: &[Family]) -> Result<Vec<CorrelationModel>> {
    if v.bins.len() < 3 {
        return Err(AdtError::Numerical(format!(
            "correlation fitting needs at least 3 variogram bins, got {}",
            v.bins.len()
        )));
    }
    let mut fits = Vec::new();
    for &f in families {
        match fit_family(v, f) {
            Some(m) => fits.push(m),
            None => log::warn!("{} correlation fit failed; family skipped", f.name()),
        }
    }
    if fits.is_empty() {
        return Err(AdtError::Numerical("no correlation family could be fitted".into()));
    }
    fits.sort_by(|a, b| a.rmse.total_cmp(&b.rmse));
    Ok(fits)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    /// Uniform sites on a square (km) with planar distances.
    pub(crate) fn planar_sites(n: usize, side: f64, seed: u64) -> DistanceMatrix {
        let mut rng = crate::rng::substream(seed, &[]);
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>() * side, rng.gen::<f64>() * side)).collect();
        DistanceMatrix::from_fn(n, |i, j| ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt())
    }

    /// One draw of a zero-mean Gaussian field with the given correlation.
    pub(crate) fn gaussian_field(dist: &DistanceMatrix, corr: &Correlation, sd: f64, seed: u64) -> Vec<f64> {
        let n = dist.len();
        let c = DMatrix::from_fn(n, n, |i, j| corr.corr(dist.get(i, j)) + if i == j { 1e-10 } else { 0.0 });
        let l = c.cholesky().expect("field covariance").l();
        let mut rng = crate::rng::substream(seed, &[]);
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        (l * z).iter().map(|v| v * sd).collect()
    }

    #[test]
    fn matern_table_tracks_the_exact_function() {
        for nu in MATERN_SMOOTHNESS {
            let t = MaternTable::new(nu);
            for i in 0..500 {
                let x = 1e-3 * 1.03f64.powi(i);
                assert!((t.corr(x) - matern_correlation(x, 1.0, nu)).abs() < 1e-5, "nu={nu} x={x}");
            }
        }
    }

    #[test]
    fn matern_half_equals_exponential() {
        let m = Correlation::Matern { range: 37.0, smoothness: 0.5 };
        let e = Correlation::Exponential { range: 37.0 };
        for i in 0..200 {
            let d = i as f64 * 1.7;
            assert!((m.corr(d) - e.corr(d)).abs() < 1e-9);
        }
    }

    #[test]
    fn families_are_unit_at_zero_and_nonincreasing() {
        let all = [
            Correlation::Exponential { range: 10.0 },
            Correlation::Matern { range: 3.85, smoothness: 5.0 },
            Correlation::Power { scale: 0.2, exponent: 1.5, sill: 4.0 },
            Correlation::Linear { range: 10.0 },
            Correlation::Spherical { range: 10.0 },
        ];
        for c in all {
            assert_eq!(c.corr(0.0), 1.0);
            let mut prev = 1.0;
            for i in 1..300 {
                let v = c.corr(i as f64 * 0.25);
                assert!(v <= prev + 1e-12 && v >= 0.0, "{c:?}");
                prev = v;
            }
        }
    }

    #[test]
    fn fixed_parameters_round_trip_through_toml() {
        let c = Correlation::Matern { range: 3.85, smoothness: 5.0 };
        let s = toml::to_string(&c).unwrap();
        assert!(s.contains("family = \"matern\""));
        let back: Correlation = toml::from_str(&s).unwrap();
        assert_eq!(back, c);
        back.validate().unwrap();
        assert!(Correlation::Power { scale: 1.0, exponent: 2.5, sill: 1.0 }.validate().is_err());
    }

    #[test]
    fn cressie_hawkins_on_hand_computed_pairs() {
        // three collinear sites, one bin holding all pairs
        let dist = DistanceMatrix::from_fn(3, |i, j| (i as f64 - j as f64).abs() * 10.0);
        let v = [0.0, 1.0, 4.0];
        let cfg = VariogramConfig { n_bins: 1, min_pairs: 1 };
        // cutoff is half the max distance (10 km): only the two 10 km pairs
        let vg = robust_variogram(&v, &dist, &cfg).unwrap();
        let mean_root = (1.0f64.sqrt() + 3.0f64.sqrt()) / 2.0;
        let expect = 0.5 * mean_root.powi(4) / (0.457 + 0.494 / 2.0);
        assert_eq!(vg.counts, vec![2]);
        assert!((vg.gamma[0] - expect).abs() < 1e-12);
        assert!((vg.bins[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn two_sites_give_one_bin_and_fitting_refuses() {
        let dist = DistanceMatrix::from_fn(2, |_, _| 5.0);
        let vg = robust_variogram(&[1.0, 2.0], &dist, &VariogramConfig { n_bins: 15, min_pairs: 1 }).unwrap();
        assert_eq!(vg.bins.len(), 1);
        assert!(fit_correlation(&vg, &Family::ALL).is_err());
        assert!(robust_variogram(&[1.0, 2.0], &dist, &VariogramConfig::default()).is_err());
    }

    #[test]
    fn bins_are_equal_count_and_increasing() {
        let dist = planar_sites(120, 1000.0, 1);
        let mut rng = crate::rng::substream(2, &[]);
        let v: Vec<f64> = (0..120).map(|_| rng.gen()).collect();
        let vg = robust_variogram(&v, &dist, &VariogramConfig::default()).unwrap();
        assert_eq!(vg.bins.len(), 15);
        assert!(vg.bins.windows(2).all(|w| w[0] < w[1]));
        let (mn, mx) = (vg.counts.iter().min().unwrap(), vg.counts.iter().max().unwrap());
        assert!(mx - mn <= 1);
        assert!(vg.bins.last().unwrap() <= &(dist.max() / 2.0));
    }

    #[test]
    fn white_noise_variogram_is_flat() {
        // pooled slope of γ̂ on distance over 20 i.i.d. fields
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for rep in 0..20 {
            let dist = planar_sites(150, 1000.0, 40 + rep);
            let mut rng = crate::rng::substream(80 + rep, &[]);
            let v: Vec<f64> = (0..150).map(|_| rng.sample(StandardNormal)).collect();
            let vg = robust_variogram(&v, &dist, &VariogramConfig::default()).unwrap();
            xs.extend(&vg.bins);
            ys.extend(&vg.gamma);
        }
        let (slope, se) = stats::ols_slope(&xs, &ys);
        let p = 2.0 * (1.0 - crate::special::norm_cdf((slope / se).abs()));
        assert!(p > 0.01, "slope {slope} se {se}");
    }

    #[test]
    fn power_variogram_selects_power_family() {
        let truth = Correlation::Power { scale: 0.12, exponent: 0.5, sill: 2.0 };
        let dist = planar_sites(120, 1000.0, 3);
        let template = robust_variogram(&vec![0.0; 120], &dist, &VariogramConfig::default()).unwrap();
        let mut hits = 0;
        for rep in 0..20 {
            let mut rng = crate::rng::substream(500 + rep, &[]);
            let mut vg = template.clone();
            vg.variance = 2.0;
            for k in 0..vg.bins.len() {
                let exact = vg.bin_model(k, |m| 2.0 * (1.0 - truth.corr(m)));
                vg.gamma[k] = exact * (1.0 + 0.03 * rng.sample::<f64, _>(StandardNormal));
            }
            if fit_correlation(&vg, &Family::ALL).unwrap()[0].correlation.family() == Family::Power {
                hits += 1;
            }
        }
        assert!(hits >= 18, "{hits}/20");
    }

    #[test]
    fn exponential_field_range_is_recovered_in_the_median() {
        let truth = Correlation::Exponential { range: 100.0 };
        let mut ranges: Vec<f64> = (0..9)
            .map(|rep| {
                let dist = planar_sites(400, 2000.0, 60 + rep);
                let f = gaussian_field(&dist, &truth, 1.5, 70 + rep);
                let vg = robust_variogram(&f, &dist, &VariogramConfig::default()).unwrap();
                match fit_family(&vg, Family::Exponential).unwrap().correlation {
                    Correlation::Exponential { range } => range,
                    _ => unreachable!(),
                }
            })
            .collect();
        ranges.sort_by(f64::total_cmp);
        assert!((ranges[4] - 100.0).abs() < 25.0, "{ranges:?}");
    }

    #[test]
    fn exact_family_variogram_is_recovered() {
        // noiseless semivariances generated from each family
        let truth = [
            Correlation::Exponential { range: 80.0 },
            Correlation::Spherical { range: 300.0 },
            Correlation::Linear { range: 400.0 },
        ];
        for c in truth {
            let bins: Vec<f64> = (1..=15).map(|k| k as f64 * 30.0).collect();
            let gamma = bins.iter().map(|&m| 2.0 * (1.0 - c.corr(m))).collect();
            let vg = EmpiricalVariogram { bins, gamma, counts: vec![100; 15], variance: 2.0, support: Vec::new() };
            let best = fit_correlation(&vg, &Family::ALL).unwrap()[0];
            assert_eq!(best.correlation.family(), c.family(), "{best:?}");
            assert!(best.rmse < 1e-4);
        }
    }
}
