//! Weighted bootstrap with spatially correlated per-site weights.
//!
//! Site weights are Exponential(1) variates obtained from a latent Gaussian
//! vector through the inverse probability transform. The latent correlation
//! is chosen pairwise so that the transformed weights carry the correlation
//! fitted to the residual variogram.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AdtError, Result};
use crate::estimator::{estimate_with, AdtCurve, PointEstimate};
use crate::nuisance::FitContext;
use crate::panel::{DistanceMatrix, PanelDataset};
use crate::rng::{derive_seed, substream};
use crate::special::{gauss_hermite, normal_to_exponential};
use crate::variogram::{fit_correlation, robust_variogram, Correlation, CorrelationModel, EmpiricalVariogram, Family, VariogramConfig};

const GH_NODES: usize = 64;
const RHO_MAP_POINTS: usize = 200;
/// Largest target correlation handled by the lookup; larger targets map to 1.
pub const RHO_MAX: f64 = 0.9999;
const EIGEN_FLOOR: f64 = 1e-8;
/// Fraction of replicates that must succeed.
pub const MIN_SUCCESS_FRACTION: f64 = 0.8;

const SEED_WEIGHTS: u64 = 11;
const SEED_REFIT: u64 = 12;

struct Quadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// Exponential transform at `√2·node`.
    g: Vec<f64>,
}

fn quadrature() -> &'static Quadrature {
    static Q: OnceLock<Quadrature> = OnceLock::new();
    Q.get_or_init(|| {
        let (nodes, weights) = gauss_hermite(GH_NODES);
        let g = nodes.iter().map(|&x| normal_to_exponential(std::f64::consts::SQRT_2 * x)).collect();
        Quadrature { nodes, weights, g }
    })
}

/// Correlation of two Exponential(1) variates obtained from standard normals
/// with correlation `rho_star`, by 2-D Gauss–Hermite quadrature of
/// `E[X₁X₂]` (the variates have mean and variance 1).
pub fn transformed_correlation(rho_star: f64) -> f64 {
    let q = quadrature();
    let s2 = std::f64::consts::SQRT_2;
    let c = (1.0 - rho_star * rho_star).max(0.0).sqrt();
    let mut acc = 0.0;
    for i in 0..GH_NODES {
        let z1 = s2 * q.nodes[i];
        let mut inner = 0.0;
        for j in 0..GH_NODES {
            let z2 = rho_star * z1 + c * s2 * q.nodes[j];
            inner += q.weights[j] * normal_to_exponential(z2);
        }
        acc += q.weights[i] * q.g[i] * inner;
    }
    acc / std::f64::consts::PI - 1.0
}

/// Latent Gaussian correlation whose Exponential transform has correlation
/// `rho`, by bisection on the increasing map [`transformed_correlation`].
pub fn equivalent_correlation(rho: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(AdtError::InvalidInput(format!("target correlation {rho} outside [0, 1)")));
    }
    if rho == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        if transformed_correlation(mid) < rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Cached monotone lookup from target correlation to latent correlation.
pub struct RhoMap {
    targets: Vec<f64>,
    latent: Vec<f64>,
}

impl RhoMap {
    pub fn global() -> &'static RhoMap {
        static MAP: OnceLock<RhoMap> = OnceLock::new();
        MAP.get_or_init(|| {
            let targets: Vec<f64> = crate::stats::linspace(0.0, RHO_MAX, RHO_MAP_POINTS);
            let latent = targets
                .par_iter()
                .map(|&r| equivalent_correlation(r).expect("grid inside [0, 1)"))
                .collect();
            RhoMap { targets, latent }
        })
    }

    pub fn map(&self, rho: f64) -> f64 {
        if rho <= 0.0 {
            0.0
        } else if rho >= 1.0 {
            1.0
        } else if rho > RHO_MAX {
            // between the last node and the comonotone limit
            let last = *self.latent.last().unwrap();
            last + (1.0 - last) * (rho - RHO_MAX) / (1.0 - RHO_MAX)
        } else {
            crate::stats::interp_clamped(&self.targets, &self.latent, rho)
        }
    }

    pub fn nodes(&self) -> (&[f64], &[f64]) {
        (&self.targets, &self.latent)
    }
}

/// Latent Gaussian factor for spatially correlated site weights.
#[derive(Debug, Clone)]
pub struct SpatialWeightModel {
    pub correlation: Correlation,
    /// Latent group of each site; sites at distance zero share one group.
    groups: Vec<usize>,
    chol: DMatrix<f64>,
    /// Eigenvalues of Σ* clipped during repair.
    pub clipped_eigenvalues: usize,
}

impl SpatialWeightModel {
    pub fn new(correlation: Correlation, dist: &DistanceMatrix) -> Result<Self> {
        correlation.validate()?;
        let (groups, reps) = colocated_groups(dist);
        let m = reps.len();
        let map = RhoMap::global();
        let mut sigma = DMatrix::<f64>::identity(m, m);
        for a in 0..m {
            for b in (a + 1)..m {
                let rho = correlation.corr(dist.get(reps[a], reps[b])).clamp(0.0, 1.0);
                let v = map.map(rho);
                sigma[(a, b)] = v;
                sigma[(b, a)] = v;
            }
        }
        let (sigma, clipped) = repair(sigma);
        let chol = sigma
            .cholesky()
            .ok_or_else(|| AdtError::Numerical("Cholesky factorisation of the latent correlation failed after repair".into()))?
            .l();
        Ok(SpatialWeightModel {
            correlation,
            groups,
            chol,
            clipped_eigenvalues: clipped,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.groups.len()
    }

    /// Latent correlation matrix Σ* over sites.
    pub fn sigma_star(&self) -> DMatrix<f64> {
        let g = &self.chol * self.chol.transpose();
        let n = self.groups.len();
        DMatrix::from_fn(n, n, |i, j| g[(self.groups[i], self.groups[j])])
    }

    fn latent(&self, z: &[f64]) -> Vec<f64> {
        let m = self.chol.nrows();
        let x = &self.chol * DVector::from_column_slice(&z[..m]);
        self.groups.iter().map(|&g| x[g]).collect()
    }
}

/// Group sites at distance zero. Returns the group of each site and one
/// representative site per group, in order of first appearance.
pub(crate) fn colocated_groups(dist: &DistanceMatrix) -> (Vec<usize>, Vec<usize>) {
    let n = dist.len();
    let mut groups = vec![usize::MAX; n];
    let mut reps: Vec<usize> = Vec::new();
    for i in 0..n {
        if groups[i] != usize::MAX {
            continue;
        }
        groups[i] = reps.len();
        for j in (i + 1)..n {
            if groups[j] == usize::MAX && dist.get(i, j) == 0.0 {
                groups[j] = reps.len();
            }
        }
        reps.push(i);
    }
    (groups, reps)
}

/// Clip eigenvalues below the floor, then rescale to unit diagonal.
pub(crate) fn repair(sigma: DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = sigma.clone().symmetric_eigen();
    let clipped = eig.eigenvalues.iter().filter(|&&v| v < EIGEN_FLOOR).count();
    if clipped == 0 {
        return (sigma, 0);
    }
    let vals = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    let n = rebuilt.nrows();
    let d: Vec<f64> = (0..n).map(|i| rebuilt[(i, i)].sqrt()).collect();
    let out = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { rebuilt[(i, j)] / (d[i] * d[j]) });
    (out, clipped)
}

/// Source of per-site bootstrap weights.
#[derive(Debug, Clone)]
pub enum WeightSampler {
    Spatial(SpatialWeightModel),
    Independent { n_sites: usize },
}

impl WeightSampler {
    pub fn n_sites(&self) -> usize {
        match self {
            WeightSampler::Spatial(m) => m.n_sites(),
            WeightSampler::Independent { n_sites } => *n_sites,
        }
    }

    /// Exponential(1) site weights. Both variants consume the same standard
    /// normal stream, so they coincide when Σ* is the identity.
    pub fn draw(&self, seed: u64) -> Vec<f64> {
        let n = self.n_sites();
        let mut rng = substream(seed, &[]);
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let latent = match self {
            WeightSampler::Spatial(m) => m.latent(&z),
            WeightSampler::Independent { .. } => z,
        };
        latent.into_iter().map(normal_to_exponential).collect()
    }
}

/// Expand site weights to rows, then rescale each period so its weights sum
/// to its row count.
pub fn expand_weights(panel: &PanelDataset, site_weights: &[f64]) -> Result<Vec<f64>> {
    if site_weights.len() != panel.n_sites() {
        return Err(AdtError::InvalidInput("site weight length mismatch".into()));
    }
    let mut w: Vec<f64> = panel.observations.iter().map(|o| site_weights[o.site]).collect();
    for post in [false, true] {
        let rows: Vec<usize> = (0..w.len()).filter(|&r| panel.is_post(r) == post).collect();
        let total: f64 = rows.iter().map(|&r| w[r]).sum();
        if !(total > 0.0) {
            return Err(AdtError::Numerical("bootstrap weights vanish in one period".into()));
        }
        let scale = rows.len() as f64 / total;
        rows.iter().for_each(|&r| w[r] *= scale);
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    #[serde(default = "default_true")]
    pub spatial: bool,
    #[serde(default)]
    pub variogram: VariogramConfig,
    #[serde(default = "default_families")]
    pub families: Vec<Family>,
    /// Fixed correlation used instead of the variogram fit.
    #[serde(default)]
    pub correlation: Option<Correlation>,
}

fn default_n_boot() -> usize {
    100
}
fn default_true() -> bool {
    true
}
fn default_families() -> Vec<Family> {
    Family::ALL.to_vec()
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_boot: default_n_boot(),
            spatial: true,
            variogram: VariogramConfig::default(),
            families: default_families(),
            correlation: None,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_boot == 0 {
            return Err(AdtError::Config("n_boot must be positive".into()));
        }
        if self.families.is_empty() && self.correlation.is_none() {
            return Err(AdtError::Config("no correlation family to fit".into()));
        }
        if let Some(c) = &self.correlation {
            c.validate()?;
        }
        Ok(())
    }
}

/// Mean residual per site over its post-period rows. Returns the sites that
/// have post rows and their means.
pub fn site_mean_residuals(panel: &PanelDataset, post_rows: &[usize], residuals: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let n = panel.n_sites();
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0usize; n];
    for (&r, &e) in post_rows.iter().zip(residuals) {
        let s = panel.observations[r].site;
        sum[s] += e;
        cnt[s] += 1;
    }
    (0..n).filter(|&s| cnt[s] > 0).map(|s| (s, sum[s] / cnt[s] as f64)).unzip()
}

/// Residual variogram and correlation fits behind the spatial weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialDiagnostics {
    pub variogram: EmpiricalVariogram,
    /// Usable fits, best RMSE first. Empty when a fixed correlation is used.
    pub fits: Vec<CorrelationModel>,
    pub chosen: Correlation,
}

pub fn spatial_diagnostics(
    panel: &PanelDataset,
    point: &PointEstimate,
    dist: &DistanceMatrix,
    cfg: &BootstrapConfig,
) -> Result<SpatialDiagnostics> {
    let residuals = point.residuals(panel);
    let (sites, means) = site_mean_residuals(panel, &point.pseudo.post_rows, &residuals);
    let sub = DistanceMatrix::from_fn(sites.len(), |a, b| dist.get(sites[a], sites[b]));
    let variogram = robust_variogram(&means, &sub, &cfg.variogram)?;
    match cfg.correlation {
        Some(c) => Ok(SpatialDiagnostics {
            variogram,
            fits: Vec::new(),
            chosen: c,
        }),
        None => {
            let fits = fit_correlation(&variogram, &cfg.families)?;
            let chosen = fits[0].correlation;
            Ok(SpatialDiagnostics { variogram, fits, chosen })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraws {
    /// Successful replicate curves of Ψ̂ in replicate order.
    pub draws: Vec<Vec<f64>>,
    pub requested: usize,
    /// Replicates that needed their retry.
    pub retried: usize,
    pub failed: usize,
}

/// Refit the frozen pipeline under `n_boot` weight draws. Replicate `r`
/// depends only on `(seed, r)`, so spatial and independent runs with the same
/// seed share their nuisance-fit seeds and latent normals.
pub fn run_replicates(
    panel: &PanelDataset,
    point: &PointEstimate,
    sampler: &WeightSampler,
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapDraws> {
    if sampler.n_sites() != panel.n_sites() {
        return Err(AdtError::InvalidInput("weight sampler does not match the panel".into()));
    }
    let cfg = point.frozen_config();
    let fold_map = &point.nuisance.bundle.fold_map;
    let replicate = |r: usize, attempt: u64| -> Result<Vec<f64>> {
        let site_w = sampler.draw(derive_seed(seed, &[SEED_WEIGHTS, r as u64, attempt]));
        let row_w = expand_weights(panel, &site_w)?;
        let ctx = FitContext {
            panel,
            weights: Some(&row_w),
            seed: derive_seed(seed, &[SEED_REFIT, r as u64, attempt]),
        };
        Ok(estimate_with(&ctx, &cfg, Some(fold_map))?.curve.psi)
    };
    let outcomes: Vec<(Option<Vec<f64>>, bool)> = (0..n_boot)
        .into_par_iter()
        .map(|r| match replicate(r, 0) {
            Ok(c) => (Some(c), false),
            Err(e) => {
                log::warn!("bootstrap replicate {r} failed ({e}); retrying");
                match replicate(r, 1) {
                    Ok(c) => (Some(c), true),
                    Err(e) => {
                        log::warn!("bootstrap replicate {r} failed again ({e}); recorded as missing");
                        (None, true)
                    }
                }
            }
        })
        .collect();
    let retried = outcomes.iter().filter(|o| o.1).count();
    let draws: Vec<Vec<f64>> = outcomes.into_iter().filter_map(|o| o.0).collect();
    let failed = n_boot - draws.len();
    if (draws.len() as f64) < MIN_SUCCESS_FRACTION * n_boot as f64 {
        return Err(AdtError::BootstrapFailed {
            successes: draws.len(),
            requested: n_boot,
        });
    }
    Ok(BootstrapDraws {
        draws,
        requested: n_boot,
        retried,
        failed,
    })
}

/// Point-estimate curve with bootstrap draws and percentile intervals
/// attached.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub curve: AdtCurve,
    pub draws: BootstrapDraws,
    pub diagnostics: Option<SpatialDiagnostics>,
}

pub fn bootstrap_adt(panel: &PanelDataset, point: &PointEstimate, cfg: &BootstrapConfig, seed: u64) -> Result<BootstrapResult> {
    cfg.validate()?;
    let (sampler, diagnostics) = if cfg.spatial {
        let dist = panel.distances();
        let diag = spatial_diagnostics(panel, point, &dist, cfg)?;
        let model = SpatialWeightModel::new(diag.chosen, &dist)?;
        (WeightSampler::Spatial(model), Some(diag))
    } else {
        (WeightSampler::Independent { n_sites: panel.n_sites() }, None)
    };
    let draws = run_replicates(panel, point, &sampler, cfg.n_boot, seed)?;
    let mut curve = point.curve.clone();
    curve.set_draws(draws.draws.clone());
    Ok(BootstrapResult {
        curve,
        draws,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::matern_correlation;
    use rand::Rng as _;

    /// Quadrature value of the latent correlation for a target of 0.5,
    /// checked against a 10⁷-draw Monte Carlo oracle below.
    const LATENT_FOR_HALF: f64 = 0.546_598_649_7;

    fn empirical_corr(a: &[f64], b: &[f64]) -> f64 {
        let ma = crate::stats::mean(a, None);
        let mb = crate::stats::mean(b, None);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    /// Monte Carlo correlation of the transformed pair at latent `rho_star`.
    fn mc_transformed(rho_star: f64, n: usize, seed: u64) -> f64 {
        let mut rng = substream(seed, &[]);
        let c = (1.0 - rho_star * rho_star).sqrt();
        let (mut s1, mut s2, mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let a = normal_to_exponential(z1);
            let b = normal_to_exponential(rho_star * z1 + c * e);
            s1 += a;
            s2 += b;
            s11 += a * a;
            s22 += b * b;
            s12 += a * b;
        }
        let n = n as f64;
        let cov = s12 / n - s1 / n * s2 / n;
        cov / ((s11 / n - (s1 / n).powi(2)) * (s22 / n - (s2 / n).powi(2))).sqrt()
    }

    #[test]
    fn equivalent_correlation_endpoints() {
        assert_eq!(equivalent_correlation(0.0).unwrap(), 0.0);
        // quadrature error of the 64-node rule
        assert!(transformed_correlation(0.0).abs() < 1e-8, "{}", transformed_correlation(0.0));
        assert!((transformed_correlation(1.0) - 1.0).abs() < 1e-9);
        assert!(equivalent_correlation(0.9999).unwrap() > 0.9998);
        assert!(equivalent_correlation(1.0).is_err());
        assert!(equivalent_correlation(-0.1).is_err());
    }

    #[test]
    fn equivalent_correlation_at_half_matches_monte_carlo() {
        let q = equivalent_correlation(0.5).unwrap();
        assert!((q - LATENT_FOR_HALF).abs() < 1e-9);
        assert!(q > 0.5);
        // forward check: the MC correlation at the quadrature latent value,
        // then a local inversion using the MC slope
        let mc = mc_transformed(q, 10_000_000, 17);
        let mc_hi = mc_transformed(q + 0.02, 10_000_000, 17);
        let slope = (mc_hi - mc) / 0.02;
        let mc_latent = q + (0.5 - mc) / slope;
        assert!((mc_latent - q).abs() < 0.005, "mc {mc} latent {mc_latent}");
    }

    #[test]
    fn rho_map_is_monotone_and_anchored() {
        let map = RhoMap::global();
        let (t, l) = map.nodes();
        assert_eq!(t.len(), 200);
        assert_eq!(map.map(0.0), 0.0);
        assert!(l.windows(2).all(|w| w[1] > w[0]));
        assert!(t.iter().zip(l).skip(1).all(|(a, b)| b > a));
        assert_eq!(map.map(1.0), 1.0);
        assert!((map.map(0.5) - LATENT_FOR_HALF).abs() < 1e-4);
    }

    #[test]
    fn identity_latent_gives_uncorrelated_exponential_weights() {
        let dist = DistanceMatrix::from_fn(4, |i, j| 1000.0 * (i as f64 - j as f64).abs());
        let model = SpatialWeightModel::new(Correlation::Exponential { range: 1e-3 }, &dist).unwrap();
        let sp = WeightSampler::Spatial(model);
        let ind = WeightSampler::Independent { n_sites: 4 };
        let draws: Vec<Vec<f64>> = (0..10_000).map(|k| sp.draw(k)).collect();
        for k in 0..20 {
            let (a, b) = (sp.draw(k), ind.draw(k));
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                let a: Vec<f64> = draws.iter().map(|d| d[i]).collect();
                let b: Vec<f64> = draws.iter().map(|d| d[j]).collect();
                assert!(empirical_corr(&a, &b).abs() < 0.05);
            }
        }
        // marginal: Kolmogorov–Smirnov against Exponential(1)
        let mut w: Vec<f64> = draws.iter().map(|d| d[0]).collect();
        w.sort_by(f64::total_cmp);
        let n = w.len() as f64;
        let ks = w
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let f = 1.0 - (-x).exp();
                (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // 1% critical value 1.628/√n
        assert!(ks < 1.628 / n.sqrt(), "ks {ks}");
        assert!((crate::stats::mean(&w, None) - 1.0).abs() < 0.05);
    }

    #[test]
    fn colocated_sites_get_identical_weights() {
        let dist = DistanceMatrix::from_fn(3, |i, j| if i + j == 1 { 0.0 } else { 10.0 });
        let model = SpatialWeightModel::new(Correlation::Exponential { range: 5.0 }, &dist).unwrap();
        let s = WeightSampler::Spatial(model);
        for k in 0..50 {
            let w = s.draw(k);
            assert_eq!(w[0], w[1]);
            assert_ne!(w[0], w[2]);
        }
    }

    #[test]
    fn matern_weights_two_km_apart_carry_the_model_correlation() {
        let dist = DistanceMatrix::from_fn(2, |_, _| 2.0);
        let corr = Correlation::Matern { range: 3.85, smoothness: 5.0 };
        let s = WeightSampler::Spatial(SpatialWeightModel::new(corr, &dist).unwrap());
        let draws: Vec<Vec<f64>> = (0..10_000).map(|k| s.draw(1000 + k)).collect();
        let a: Vec<f64> = draws.iter().map(|d| d[0]).collect();
        let b: Vec<f64> = draws.iter().map(|d| d[1]).collect();
        let target = matern_correlation(2.0, 3.85, 5.0);
        assert!((empirical_corr(&a, &b) - target).abs() < 0.03, "{target}");
    }

    #[test]
    fn repair_restores_a_valid_correlation_matrix() {
        // pairwise correlations that cannot be jointly positive definite
        let mut m = DMatrix::<f64>::identity(3, 3);
        for (i, j, v) in [(0, 1, 0.95), (1, 2, 0.95), (0, 2, -0.5)] {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        let (r, clipped) = repair(m);
        assert_eq!(clipped, 1);
        assert!((0..3).all(|i| (r[(i, i)] - 1.0).abs() < 1e-12));
        let eig = r.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&v| v > 0.0));
        assert!(r.cholesky().is_some());
    }

    #[test]
    fn expanded_weights_sum_to_period_counts() {
        let panel = crate::testutil::synthetic_panel(15, 6, 4, 1, |x, _| (x + 1.0) / 2.0, |_, _, _, _, _| 1.0);
        let mut rng = substream(2, &[]);
        let site_w: Vec<f64> = (0..15).map(|_| rng.gen::<f64>() * 3.0).collect();
        let w = expand_weights(&panel, &site_w).unwrap();
        let post: f64 = panel.post_rows().iter().map(|&r| w[r]).sum();
        let pre: f64 = panel.pre_rows().iter().map(|&r| w[r]).sum();
        assert!((post - 45.0).abs() < 1e-9 && (pre - 45.0).abs() < 1e-9);
        // rows of one site share a weight within each period
        let rows = &panel.rows_by_site()[3];
        let pre_w: Vec<f64> = rows.iter().filter(|&&r| !panel.is_post(r)).map(|&r| w[r]).collect();
        assert!(pre_w.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn site_mean_residuals_average_per_site() {
        let panel = crate::testutil::synthetic_panel(3, 4, 3, 1, |x, _| (x + 1.0) / 2.0, |_, _, _, _, _| 1.0);
        let post = panel.post_rows();
        let res: Vec<f64> = post.iter().map(|&r| panel.observations[r].site as f64 + panel.observations[r].t as f64).collect();
        let (sites, means) = site_mean_residuals(&panel, &post, &res);
        assert_eq!(sites, vec![0, 1, 2]);
        assert_eq!(means, vec![3.5, 4.5, 5.5]);
    }

    fn linear_config() -> crate::estimator::EstimatorConfig {
        use crate::learner::{LearnerConfig, LinearParams};
        use crate::nuisance::NuisanceConfig;
        let lin = |t: &[&str]| LearnerConfig::Linear(LinearParams::new(t));
        let f = |t: &[&str]| Some(t.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        crate::estimator::EstimatorConfig {
            nuisance: NuisanceConfig {
                mu0: lin(&["x", "z"]),
                mu1: lin(&["x", "z", "dose"]),
                pi_b: crate::learner::LearnerConfig::Forest(crate::forest::ForestParams::default().with_trees(10).with_mtry(1)),
                dose_mean: lin(&["x"]),
                dose_scale: lin(&["x"]),
                outcome_features: f(&["x", "z"]),
                pi_b_features: f(&["x"]),
                pi_d_features: f(&["x"]),
                ..NuisanceConfig::default()
            },
            bandwidth: crate::llkr::Bandwidth::Fixed(0.15),
        }
    }

    #[test]
    fn noiseless_panel_gives_near_degenerate_intervals() {
        let panel = crate::testutil::synthetic_panel(
            60,
            6,
            4,
            3,
            |x, rng| 0.5 + 0.25 * x + 0.1 * rng.gen::<f64>(),
            |x, d, z, post, _| 1.0 + x + z + if post { 2.0 * d } else { 0.0 },
        );
        let point = crate::estimator::estimate_adt(&panel, &linear_config(), 5).unwrap();
        let cfg = BootstrapConfig {
            n_boot: 12,
            spatial: true,
            variogram: VariogramConfig { n_bins: 15, min_pairs: 10 },
            correlation: Some(Correlation::Exponential { range: 50.0 }),
            ..BootstrapConfig::default()
        };
        let a = bootstrap_adt(&panel, &point, &cfg, 9).unwrap();
        let (lo, hi) = (a.curve.ci_lo.as_ref().unwrap(), a.curve.ci_hi.as_ref().unwrap());
        let width = lo.iter().zip(hi).map(|(l, h)| h - l).fold(0.0, f64::max);
        assert!(width < 0.1, "max width {width}");
        assert!(lo.iter().zip(hi).all(|(l, h)| l <= h));
        assert_eq!(a.draws.draws.len(), 12);
        let b = bootstrap_adt(&panel, &point, &cfg, 9).unwrap();
        assert_eq!(a.curve, b.curve);
    }
}
