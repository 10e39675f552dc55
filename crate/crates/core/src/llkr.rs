//! Local linear kernel regression with a Gaussian kernel, observation
//! weights, and cross-validated bandwidth selection.
//!
//! Observations sharing a (site, dose) pair enter every local fit only through
//! their summed weight and weighted response, so a panel's repeated monthly
//! rows are aggregated once up front.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AdtError, Result};

pub const LADDER_SIZE: usize = 40;
/// Minimum kernel mass, relative to the total weight, at an evaluation point.
const MIN_RELATIVE_MASS: f64 = 1e-8;
/// Relative determinant below which the local design counts as singular.
const SINGULAR_TOL: f64 = 1e-10;

/// Bandwidth as written in configuration: a positive number or `"cv"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Fixed(f64),
    Selected(BandwidthRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Leave-one-location-out cross-validation.
    Cv,
    /// Row-level leave-one-out cross-validation (ignores repeated sites).
    CvRows,
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Selected(BandwidthRule::Cv)
    }
}

#[derive(Debug, Clone)]
struct Group {
    site: u64,
    d: f64,
    w: f64,
    /// Σ w v
    s: f64,
    /// Σ w v²
    q: f64,
    /// (w, v) of the member rows, for row-level cross-validation.
    rows: Vec<(f64, f64)>,
}

/// Aggregated training data.
#[derive(Debug, Clone)]
pub struct LlkrData {
    groups: Vec<Group>,
    total_w: f64,
}

impl LlkrData {
    pub fn new(d: &[f64], v: &[f64], w: &[f64], sites: &[u64]) -> Result<Self> {
        let n = d.len();
        if v.len() != n || w.len() != n || sites.len() != n {
            return Err(AdtError::InvalidInput("LLKR inputs differ in length".into()));
        }
        if d.iter().chain(v).chain(w).any(|x| !x.is_finite()) {
            return Err(AdtError::InvalidInput("non-finite LLKR input".into()));
        }
        if w.iter().any(|&x| x < 0.0) {
            return Err(AdtError::InvalidInput("negative LLKR weight".into()));
        }
        let mut map: BTreeMap<(u64, u64), Group> = BTreeMap::new();
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let g = map.entry((sites[i], d[i].to_bits())).or_insert_with(|| Group {
                site: sites[i],
                d: d[i],
                w: 0.0,
                s: 0.0,
                q: 0.0,
                rows: Vec::new(),
            });
            g.w += w[i];
            g.s += w[i] * v[i];
            g.q += w[i] * v[i] * v[i];
            g.rows.push((w[i], v[i]));
        }
        let groups: Vec<Group> = map.into_values().collect();
        let mut distinct: Vec<f64> = groups.iter().map(|g| g.d).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(AdtError::InvalidInput(
                "LLKR needs at least two distinct dose values with positive weight".into(),
            ));
        }
        let total_w = groups.iter().map(|g| g.w).sum();
        Ok(LlkrData { groups, total_w })
    }

    fn distinct_doses(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self.groups.iter().map(|g| g.d).collect();
        d.sort_by(f64::total_cmp);
        d.dedup();
        d
    }

    /// Kernel sums at `d0`, skipping groups for which `skip` is true.
    fn sums(&self, d0: f64, h: f64, skip: impl Fn(&Group) -> bool) -> Sums {
        let mut out = Sums::default();
        for g in &self.groups {
            if skip(g) {
                continue;
            }
            let u = (g.d - d0) / h;
            let k = (-0.5 * u * u).exp();
            if k == 0.0 {
                continue;
            }
            let x = g.d - d0;
            let kw = k * g.w;
            let ks = k * g.s;
            out.s0 += kw;
            out.s1 += kw * x;
            out.s2 += kw * x * x;
            out.t0 += ks;
            out.t1 += ks * x;
        }
        out
    }

    /// Local solve at `d0`, widening the bandwidth when the kernel mass is
    /// negligible. Returns the value and the bandwidth actually used.
    fn local_fit(&self, d0: f64, h: f64, skip: &dyn Fn(&Group) -> bool, total_w: f64) -> (f64, f64) {
        let mut h_used = h;
        let mut s = self.sums(d0, h_used, skip);
        let mut widened = 0;
        while s.s0 < MIN_RELATIVE_MASS * total_w && widened < 60 {
            h_used *= 2.0;
            widened += 1;
            s = self.sums(d0, h_used, skip);
        }
        (s.solve(), h_used)
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Sums {
    s0: f64,
    s1: f64,
    s2: f64,
    t0: f64,
    t1: f64,
}

impl Sums {
    /// Intercept of the local linear fit; local constant when the design is
    /// singular.
    fn solve(&self) -> f64 {
        let det = self.s0 * self.s2 - self.s1 * self.s1;
        if det > SINGULAR_TOL * self.s0 * self.s2 && det > 0.0 {
            (self.s2 * self.t0 - self.s1 * self.t1) / det
        } else if self.s0 > 0.0 {
            self.t0 / self.s0
        } else {
            f64::NAN
        }
    }
}

/// Log-spaced candidates from half the median nearest-neighbour gap between
/// distinct doses up to the dose range.
pub fn bandwidth_ladder(data: &LlkrData) -> Vec<f64> {
    let d = data.distinct_doses();
    let m = d.len();
    let mut gaps: Vec<f64> = (0..m)
        .map(|i| {
            let left = if i > 0 { d[i] - d[i - 1] } else { f64::INFINITY };
            let right = if i + 1 < m { d[i + 1] - d[i] } else { f64::INFINITY };
            left.min(right)
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    let median = if m % 2 == 1 {
        gaps[m / 2]
    } else {
        0.5 * (gaps[m / 2 - 1] + gaps[m / 2])
    };
    let lo = 0.5 * median;
    let hi = d[m - 1] - d[0];
    if !(hi > lo) {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..LADDER_SIZE)
        .map(|i| (a + (b - a) * i as f64 / (LADDER_SIZE - 1) as f64).exp())
        .collect()
}

/// Cross-validation score `Σ w (v − fit_{−fold})²` at bandwidth `h`.
pub fn cv_score(data: &LlkrData, h: f64, rule: BandwidthRule) -> f64 {
    let mut score = 0.0;
    match rule {
        BandwidthRule::Cv => {
            for g in &data.groups {
                let site = g.site;
                let held_w: f64 = data.groups.iter().filter(|o| o.site == site).map(|o| o.w).sum();
                let (f, _) = data.local_fit(g.d, h, &|o: &Group| o.site == site, data.total_w - held_w);
                score += g.q - 2.0 * f * g.s + f * f * g.w;
            }
        }
        BandwidthRule::CvRows => {
            for g in &data.groups {
                let full = data.sums(g.d, h, |_| false);
                for &(w, v) in &g.rows {
                    // the held-out row sits at distance zero: kernel weight w
                    let s = Sums {
                        s0: full.s0 - w,
                        t0: full.t0 - w * v,
                        ..full
                    };
                    let f = if s.s0 < MIN_RELATIVE_MASS * (data.total_w - w) {
                        data.local_fit(g.d, h * 2.0, &|_| false, data.total_w).0
                    } else {
                        s.solve()
                    };
                    score += w * (v - f).powi(2);
                }
            }
        }
    }
    score
}

/// Bandwidth minimising the CV score over the ladder, with the full CV curve.
pub fn select_bandwidth(data: &LlkrData, rule: BandwidthRule) -> (f64, Vec<(f64, f64)>) {
    let curve: Vec<(f64, f64)> = bandwidth_ladder(data)
        .into_iter()
        .map(|h| (h, cv_score(data, h, rule)))
        .collect();
    let best = curve
        .iter()
        .filter(|(_, s)| s.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(curve[0].0, |c| c.0);
    (best, curve)
}

/// Fitted curve on an evaluation grid.
#[derive(Debug, Clone)]
pub struct LlkrFit {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Grid points where the bandwidth had to be widened.
    pub widened: Vec<usize>,
    data: LlkrData,
}

impl LlkrFit {
    /// Aggregated regression data the fit was computed from.
    pub fn data(&self) -> &LlkrData {
        &self.data
    }
}

pub fn llkr_fit(
    d: &[f64],
    v: &[f64],
    w: &[f64],
    sites: &[u64],
    bandwidth: Bandwidth,
    grid: &[f64],
) -> Result<LlkrFit> {
    let data = LlkrData::new(d, v, w, sites)?;
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(AdtError::Config(format!("bandwidth {h} must be positive"))),
        Bandwidth::Selected(rule) => select_bandwidth(&data, rule).0,
    };
    let mut values = Vec::with_capacity(grid.len());
    let mut widened = Vec::new();
    for (i, &d0) in grid.iter().enumerate() {
        let (val, h_used) = data.local_fit(d0, h, &|_| false, data.total_w);
        if h_used > h {
            widened.push(i);
        }
        values.push(val);
    }
    if !widened.is_empty() {
        log::warn!(
            "LLKR bandwidth widened locally at {} of {} evaluation points",
            widened.len(),
            grid.len()
        );
    }
    Ok(LlkrFit {
        bandwidth: h,
        grid: grid.to_vec(),
        values,
        widened,
        data,
    })
}

/// Direct local solve at `d0`.
pub fn llkr_predict(fit: &LlkrFit, d0: f64) -> f64 {
    fit.data.local_fit(d0, fit.bandwidth, &|_| false, fit.data.total_w).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn linear_data(n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<u64>) {
        let d: Vec<f64> = (0..n).map(|i| ((i * 37) % n) as f64 / n as f64).collect();
        let v: Vec<f64> = d.iter().map(|x| 3.0 + 2.0 * x).collect();
        let w: Vec<f64> = (0..n).map(|i| 0.5 + (i % 3) as f64).collect();
        let s: Vec<u64> = (0..n as u64).collect();
        (d, v, w, s)
    }

    #[test]
    fn affine_data_is_reproduced() {
        let (d, v, w, s) = linear_data(60);
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        for bw in [Bandwidth::Fixed(0.05), Bandwidth::Fixed(0.3), Bandwidth::default()] {
            let fit = llkr_fit(&d, &v, &w, &s, bw, &grid).unwrap();
            for (g, val) in grid.iter().zip(&fit.values) {
                assert!((val - (3.0 + 2.0 * g)).abs() < 1e-8, "at {g}: {val}");
            }
            assert!((llkr_predict(&fit, d[7]) - v[7]).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_response_gives_constant_curve() {
        let (d, _, w, s) = linear_data(30);
        let v = vec![4.25; 30];
        let fit = llkr_fit(&d, &v, &w, &s, Bandwidth::default(), &[0.0, 0.5, 1.0]).unwrap();
        assert!(fit.values.iter().all(|x| (x - 4.25).abs() < 1e-10));
    }

    #[test]
    fn huge_bandwidth_is_global_weighted_least_squares() {
        let mut rng = crate::rng::substream(4, &[]);
        let d: Vec<f64> = (0..50).map(|_| rng.gen()).collect();
        let v: Vec<f64> = d.iter().map(|x| (5.0 * x).sin() + rng.gen::<f64>()).collect();
        let w: Vec<f64> = (0..50).map(|_| rng.gen::<f64>() + 0.1).collect();
        let s: Vec<u64> = (0..50).collect();
        // closed-form weighted least squares line
        let sw: f64 = w.iter().sum();
        let dbar = d.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
        let vbar = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
        let sxy: f64 = (0..50).map(|i| w[i] * (d[i] - dbar) * (v[i] - vbar)).sum();
        let sxx: f64 = (0..50).map(|i| w[i] * (d[i] - dbar).powi(2)).sum();
        let slope = sxy / sxx;
        let grid = [0.0, 0.25, 0.9, 1.0];
        let fit = llkr_fit(&d, &v, &w, &s, Bandwidth::Fixed(1e6), &grid).unwrap();
        for (g, val) in grid.iter().zip(&fit.values) {
            assert!((val - (vbar + slope * (g - dbar))).abs() < 1e-6);
        }
    }

    #[test]
    fn boundary_evaluation_is_finite() {
        let d = [0.1, 0.2, 0.3, 0.35];
        let v = [1.0, 0.0, 2.0, 1.5];
        let w = [1.0; 4];
        let s = [0, 1, 2, 3];
        let fit = llkr_fit(&d, &v, &w, &s, Bandwidth::Fixed(0.05), &[1.0]).unwrap();
        assert!(fit.values[0].is_finite());
        // far from all data the mass check widens the bandwidth
        assert_eq!(fit.widened, vec![0]);
    }

    #[test]
    fn single_dose_is_an_error_and_singular_design_falls_back() {
        assert!(LlkrData::new(&[0.5, 0.5], &[1.0, 2.0], &[1.0, 1.0], &[0, 1]).is_err());
        // two points far apart with a tiny bandwidth: local design is
        // effectively a single point, so the local constant is used
        let fit = llkr_fit(&[0.0, 1.0], &[1.0, 5.0], &[1.0, 1.0], &[0, 1], Bandwidth::Fixed(0.01), &[0.0]).unwrap();
        assert!((fit.values[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn site_aggregation_matches_row_level_fit() {
        // rows at the same (site, dose) enter only through their sums
        let d = [0.1, 0.1, 0.4, 0.7, 0.7, 0.9];
        let v = [1.0, 3.0, 2.0, 5.0, 4.0, 0.5];
        let w = [1.0, 2.0, 1.0, 0.5, 1.5, 1.0];
        let sites = [0, 0, 1, 2, 2, 3];
        let unique_sites = [0, 10, 1, 2, 20, 3];
        let a = llkr_fit(&d, &v, &w, &sites, Bandwidth::Fixed(0.2), &[0.3, 0.6]).unwrap();
        let b = llkr_fit(&d, &v, &w, &unique_sites, Bandwidth::Fixed(0.2), &[0.3, 0.6]).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Repeated per-site rows with a shared site effect.
    fn clustered(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<u64>) {
        let mut rng = crate::rng::substream(seed, &[]);
        let (mut d, mut v, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for site in 0..80u64 {
            let dose: f64 = rng.gen();
            let effect: f64 = rng.sample::<f64, _>(StandardNormal) * 1.0;
            for _ in 0..12 {
                d.push(dose);
                v.push((3.0 * dose).sin() + effect + 0.3 * rng.sample::<f64, _>(StandardNormal));
                s.push(site);
            }
        }
        let w = vec![1.0; d.len()];
        (d, v, w, s)
    }

    #[test]
    fn location_cv_chooses_larger_bandwidth_than_row_cv() {
        let mut wins = 0;
        for rep in 0..5 {
            let (d, v, w, s) = clustered(100 + rep);
            let data = LlkrData::new(&d, &v, &w, &s).unwrap();
            let (h_site, _) = select_bandwidth(&data, BandwidthRule::Cv);
            let (h_row, _) = select_bandwidth(&data, BandwidthRule::CvRows);
            if h_site > h_row {
                wins += 1;
            }
        }
        assert!(wins >= 4, "{wins}/5");
    }

    #[test]
    fn row_cv_matches_brute_force() {
        // independent oracle: refit without each row by direct computation
        let (d, v, w, s) = clustered(7);
        let (d, v, w, s) = (&d[..60], &v[..60], &w[..60], &s[..60]);
        let h = 0.08;
        let data = LlkrData::new(d, v, w, s).unwrap();
        let fast = cv_score(&data, h, BandwidthRule::CvRows);
        let mut brute = 0.0;
        for i in 0..d.len() {
            let mut w2 = w.to_vec();
            w2[i] = 0.0;
            let f = llkr_fit(d, v, &w2, s, Bandwidth::Fixed(h), &[d[i]]).unwrap().values[0];
            brute += w[i] * (v[i] - f).powi(2);
        }
        assert!((fast - brute).abs() < 1e-8 * brute.max(1.0), "{fast} vs {brute}");
        // leave-one-location-out against dropping the whole site
        let fast = cv_score(&data, h, BandwidthRule::Cv);
        let mut brute = 0.0;
        for i in 0..d.len() {
            let w2: Vec<f64> = (0..d.len()).map(|j| if s[j] == s[i] { 0.0 } else { w[j] }).collect();
            let f = llkr_fit(d, v, &w2, s, Bandwidth::Fixed(h), &[d[i]]).unwrap().values[0];
            brute += w[i] * (v[i] - f).powi(2);
        }
        assert!((fast - brute).abs() < 1e-8 * brute.max(1.0), "{fast} vs {brute}");
    }

    proptest! {
        #[test]
        fn weight_scale_invariance(c in 0.01f64..100.0, seed in 0u64..1000) {
            let mut rng = crate::rng::substream(seed, &[]);
            let d: Vec<f64> = (0..25).map(|_| rng.gen()).collect();
            let v: Vec<f64> = (0..25).map(|_| rng.gen()).collect();
            let w: Vec<f64> = (0..25).map(|_| rng.gen::<f64>() + 0.05).collect();
            let wc: Vec<f64> = w.iter().map(|x| x * c).collect();
            let s: Vec<u64> = (0..25).collect();
            let grid = [0.0, 0.3, 0.77, 1.0];
            let a = llkr_fit(&d, &v, &w, &s, Bandwidth::Fixed(0.15), &grid).unwrap();
            let b = llkr_fit(&d, &v, &wc, &s, Bandwidth::Fixed(0.15), &grid).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn affine_exactness_property(a in -5.0f64..5.0, b in -5.0f64..5.0, h in 0.03f64..2.0) {
            let d: Vec<f64> = (0..30).map(|i| (i as f64 / 29.0).powf(1.3)).collect();
            let v: Vec<f64> = d.iter().map(|x| a + b * x).collect();
            let w = vec![1.0; 30];
            let s: Vec<u64> = (0..30).collect();
            let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
            let fit = llkr_fit(&d, &v, &w, &s, Bandwidth::Fixed(h), &grid).unwrap();
            for (g, val) in grid.iter().zip(&fit.values) {
                prop_assert!((val - (a + b * g)).abs() < 1e-8);
            }
        }
    }
}
