//! Synthetic panels with a known dose-effect curve, scenario presets, and the
//! interval metrics used to evaluate simulation campaigns.
//!
//! Covariates are generated once per campaign and held fixed; replicate `r`
//! redraws only the noise, from a stream keyed by `(seed, r)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_adt, colocated_groups, repair, BootstrapConfig};
use crate::error::{AdtError, Result};
use crate::estimator::{estimate_adt, EstimatorConfig};
use crate::forest::ForestParams;
use crate::learner::{LearnerConfig, LinearParams};
use crate::nuisance::NuisanceConfig;
use crate::panel::{quantile_transform, DistanceMatrix, Observation, PanelDataset, SiteRecord};
use crate::rng::{derive_seed, substream};
use crate::stats;

pub const COV_POP: &str = "pop";
pub const COV_TEMP: &str = "temp";
pub const COV_PRECIP: &str = "precip";
pub const COV_FIRES: &str = "fires";
pub const COV_TIME: &str = "time";

const KM_PER_DEG_LAT: f64 = 110.574;
const KM_PER_DEG_LON_EQ: f64 = 111.320;

/// Cross-fitting folds in simulation runs; fewer than the default to keep
/// campaigns affordable.
pub const SIM_FOLDS: usize = 5;

const SEED_DATA: u64 = 1;
const SEED_FIT: u64 = 2;
const SEED_BOOT: u64 = 3;

/// Covariate values entering the mean functions for one site-month.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovariateRow {
    pub temp: f64,
    pub pop: f64,
    pub time: f64,
    pub fires: f64,
    pub precip: f64,
}

/// Linear-with-interactions mean function of the covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCoefficients {
    pub intercept: f64,
    pub temp: f64,
    pub pop: f64,
    pub temp_pop: f64,
    pub time: f64,
    pub time_pop: f64,
    pub fires: f64,
    pub precip: f64,
}

impl MeanCoefficients {
    pub fn eval(&self, x: &CovariateRow) -> f64 {
        self.intercept
            + self.temp * x.temp
            + self.pop * x.pop
            + self.temp_pop * x.temp * x.pop
            + self.time * x.time
            + self.time_pop * x.time * x.pop
            + self.fires * x.fires
            + self.precip * x.precip
    }
}

/// Dose term `outer·d·(dose·d + pop·Pop + time·Time)` of the post-period mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseBlock {
    pub outer: f64,
    pub dose: f64,
    pub pop: f64,
    pub time: f64,
}

impl DoseBlock {
    pub fn eval(&self, x: &CovariateRow, d: f64) -> f64 {
        self.outer * d * (self.dose * d + self.pop * x.pop + self.time * x.time)
    }
}

/// Mean functions of the data-generating process: `l0` before the
/// intervention, `l1` plus the dose block after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpCoefficients {
    pub l0: MeanCoefficients,
    pub l1: MeanCoefficients,
    pub dose: DoseBlock,
}

impl Default for DgpCoefficients {
    fn default() -> Self {
        DgpCoefficients {
            l0: MeanCoefficients {
                intercept: -9.5,
                temp: 0.075,
                pop: 0.075,
                temp_pop: 0.0001,
                time: 0.15,
                time_pop: 0.001,
                fires: 1.0,
                precip: -18.0,
            },
            l1: MeanCoefficients {
                intercept: -12.5,
                temp: 0.075,
                pop: 0.075,
                temp_pop: 0.0007,
                time: 0.15,
                time_pop: 0.001,
                fires: 1.5,
                precip: -20.0,
            },
            dose: DoseBlock {
                outer: 2.0,
                dose: -3.0,
                pop: 0.4,
                time: 0.2,
            },
        }
    }
}

impl DgpCoefficients {
    pub fn l0(&self, x: &CovariateRow) -> f64 {
        self.l0.eval(x)
    }

    pub fn l1(&self, x: &CovariateRow, d: f64) -> f64 {
        self.l1.eval(x) + self.dose.eval(x, d)
    }
}

/// Scale constants of the synthetic covariate generator. The defaults are
/// the calibrated values frozen in `data/sim_covariates.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateConfig {
    /// Bounding box width and height in km.
    pub box_km: [f64; 2],
    /// South-west corner of the box as (lon, lat).
    pub origin: [f64; 2],
    pub n_clusters: usize,
    pub cluster_sd_km: f64,
    pub n_ports: usize,
    /// Distance scale of the port kernel `1 / (1 + d / scale)`.
    pub port_scale_km: f64,
    /// Log-scale noise on the raw dose.
    pub dose_noise_sd: f64,
    pub temp_mean: f64,
    pub temp_site_sd: f64,
    pub temp_amplitude: f64,
    pub temp_noise_sd: f64,
    pub precip_log_mean: f64,
    pub precip_log_amplitude: f64,
    pub precip_log_sd: f64,
    pub pop_log_mean: f64,
    pub pop_log_sd: f64,
    /// Shift of log population per unit of mean port proximity.
    pub pop_port_boost: f64,
    /// Mean monthly fire count per cluster.
    pub fires_rate: f64,
    pub fires_amplitude: f64,
    pub days_per_month: f64,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        CovariateConfig {
            box_km: [2000.0, 1000.0],
            origin: [100.0, -6.0],
            n_clusters: 8,
            cluster_sd_km: 60.0,
            n_ports: 3,
            port_scale_km: 120.0,
            dose_noise_sd: 1.0,
            temp_mean: 300.0,
            temp_site_sd: 1.0,
            temp_amplitude: 1.5,
            temp_noise_sd: 0.5,
            precip_log_mean: -5.0,
            precip_log_amplitude: 0.6,
            precip_log_sd: 0.5,
            pop_log_mean: 1.6,
            pop_log_sd: 0.6,
            pop_port_boost: 0.8,
            fires_rate: 160.0,
            fires_amplitude: 0.6,
            days_per_month: 30.4375,
        }
    }
}

impl CovariateConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("box_km[0]", self.box_km[0]),
            ("box_km[1]", self.box_km[1]),
            ("cluster_sd_km", self.cluster_sd_km),
            ("port_scale_km", self.port_scale_km),
            ("fires_rate", self.fires_rate),
            ("days_per_month", self.days_per_month),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AdtError::Config(format!("covariate setting {name} must be positive")));
            }
        }
        if self.n_clusters == 0 || self.n_ports == 0 {
            return Err(AdtError::Config("need at least one cluster and one port".into()));
        }
        if !(0.0..1.0).contains(&self.fires_amplitude) {
            return Err(AdtError::Config("fires_amplitude must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Default first post-intervention month: the last quarter of the months
/// form the post period.
pub fn default_t0(n_months: u32) -> u32 {
    n_months - n_months / 4 + 1
}

/// Fifth root of the day count since the start of month 1, counting that
/// first day as 1.
pub fn time_variable(t: u32, days_per_month: f64) -> f64 {
    (1.0 + ((t - 1) as f64 * days_per_month).floor()).powf(0.2)
}

fn seasonal(t: u32) -> f64 {
    (2.0 * PI * (t - 1) as f64 / 12.0).sin()
}

/// Synthetic skeleton with default scale constants; outcomes are zero.
pub fn generate_covariates(n_sites: usize, n_months: u32, seed: u64) -> Result<PanelDataset> {
    generate_covariates_with(&CovariateConfig::default(), n_sites, n_months, default_t0(n_months), seed)
}

pub fn generate_covariates_with(
    cfg: &CovariateConfig,
    n_sites: usize,
    n_months: u32,
    t0: u32,
    seed: u64,
) -> Result<PanelDataset> {
    cfg.validate()?;
    if n_sites < 10 {
        return Err(AdtError::InvalidInput(format!(
            "simulation needs at least 10 sites, got {n_sites}"
        )));
    }
    if n_months < 2 {
        return Err(AdtError::InvalidInput("simulation needs at least 2 months".into()));
    }
    let [w, h] = cfg.box_km;
    let mut rng = substream(seed, &[1]);

    let centers: Vec<(f64, f64)> = (0..cfg.n_clusters)
        .map(|_| (w * (0.1 + 0.8 * rng.gen::<f64>()), h * (0.1 + 0.8 * rng.gen::<f64>())))
        .collect();
    // Ports sit near the first clusters, so dose is highest in populated areas.
    let ports: Vec<(f64, f64)> = (0..cfg.n_ports)
        .map(|p| {
            let (cx, cy) = centers[p % cfg.n_clusters];
            let off = Normal::new(0.0, cfg.cluster_sd_km).unwrap();
            ((cx + off.sample(&mut rng)).clamp(0.0, w), (cy + off.sample(&mut rng)).clamp(0.0, h))
        })
        .collect();

    let scatter = Normal::new(0.0, cfg.cluster_sd_km).unwrap();
    let mut xy = Vec::with_capacity(n_sites);
    let mut cluster = Vec::with_capacity(n_sites);
    for i in 0..n_sites {
        let k = i % cfg.n_clusters;
        let (cx, cy) = centers[k];
        xy.push((
            (cx + scatter.sample(&mut rng)).clamp(0.0, w),
            (cy + scatter.sample(&mut rng)).clamp(0.0, h),
        ));
        cluster.push(k);
    }

    let mut raw_dose = Vec::with_capacity(n_sites);
    let mut pop = Vec::with_capacity(n_sites);
    let mut temp_site = Vec::with_capacity(n_sites);
    for &(x, y) in &xy {
        let prox: f64 = ports
            .iter()
            .map(|&(px, py)| 1.0 / (1.0 + (x - px).hypot(y - py) / cfg.port_scale_km))
            .sum();
        let z: f64 = StandardNormal.sample(&mut rng);
        raw_dose.push(prox * (cfg.dose_noise_sd * z).exp());
        let z: f64 = StandardNormal.sample(&mut rng);
        let boost = cfg.pop_port_boost * prox / cfg.n_ports as f64;
        pop.push((cfg.pop_log_mean + cfg.pop_log_sd * z + boost).exp());
        let z: f64 = StandardNormal.sample(&mut rng);
        temp_site.push(cfg.temp_mean + cfg.temp_site_sd * z);
    }
    let dose = quantile_transform(&raw_dose)?;

    let mut fires = vec![vec![0.0; n_months as usize]; cfg.n_clusters];
    for row in fires.iter_mut() {
        for (m, v) in row.iter_mut().enumerate() {
            let lambda = cfg.fires_rate * (1.0 + cfg.fires_amplitude * seasonal(m as u32 + 1));
            let count: f64 = Poisson::new(lambda.max(1e-9)).unwrap().sample(&mut rng);
            *v = count.powf(0.25);
        }
    }

    let lat_scale = KM_PER_DEG_LON_EQ * cfg.origin[1].to_radians().cos();
    let sites: Vec<SiteRecord> = (0..n_sites)
        .map(|i| SiteRecord {
            site_id: format!("s{:04}", i + 1),
            lon: cfg.origin[0] + xy[i].0 / lat_scale,
            lat: cfg.origin[1] + xy[i].1 / KM_PER_DEG_LAT,
            province: format!("c{:02}", cluster[i] + 1),
            raw_dose: raw_dose[i],
            static_covariates: vec![pop[i]],
        })
        .collect();

    let temp_noise = Normal::new(0.0, cfg.temp_noise_sd.max(0.0)).unwrap();
    let precip_noise = Normal::new(0.0, cfg.precip_log_sd.max(0.0)).unwrap();
    let mut observations = Vec::with_capacity(n_sites * n_months as usize);
    for i in 0..n_sites {
        for t in 1..=n_months {
            let s = seasonal(t);
            let temp = temp_site[i] + cfg.temp_amplitude * s + temp_noise.sample(&mut rng);
            let precip =
                (cfg.precip_log_mean + cfg.precip_log_amplitude * s + precip_noise.sample(&mut rng)).exp();
            observations.push(Observation {
                site: i,
                t,
                y: 0.0,
                time_covariates: vec![
                    temp,
                    precip,
                    fires[cluster[i]][t as usize - 1],
                    time_variable(t, cfg.days_per_month),
                ],
            });
        }
    }
    PanelDataset::new(
        sites,
        vec![COV_POP.into()],
        vec![COV_TEMP.into(), COV_PRECIP.into(), COV_FIRES.into(), COV_TIME.into()],
        observations,
        dose,
        t0,
        n_months,
    )
}

/// Mean-function covariates for every row of a panel that carries the
/// simulation covariates.
pub fn covariate_rows(panel: &PanelDataset) -> Result<Vec<CovariateRow>> {
    let missing = |n: &str| AdtError::InvalidInput(format!("panel lacks simulation covariate `{n}`"));
    let pop = panel.static_names.iter().position(|n| n == COV_POP).ok_or_else(|| missing(COV_POP))?;
    let time_pos = |n: &str| panel.time_names.iter().position(|m| m == n).ok_or_else(|| missing(n));
    let (temp, precip, fires, time) =
        (time_pos(COV_TEMP)?, time_pos(COV_PRECIP)?, time_pos(COV_FIRES)?, time_pos(COV_TIME)?);
    Ok(panel
        .observations
        .iter()
        .map(|o| CovariateRow {
            temp: o.time_covariates[temp],
            pop: panel.sites[o.site].static_covariates[pop],
            time: o.time_covariates[time],
            fires: o.time_covariates[fires],
            precip: o.time_covariates[precip],
        })
        .collect())
}

/// Noise parameters of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub name: String,
    /// Range of the exponential correlation of the site effect, in km.
    pub range_km: f64,
    pub sigma_sp: f64,
    pub sigma_ind: f64,
}

impl SimScenario {
    fn preset(name: &str, range_km: f64, sigma_sp: f64, sigma_ind: f64) -> Self {
        SimScenario {
            name: name.into(),
            range_km,
            sigma_sp,
            sigma_ind,
        }
    }

    /// Presets `s1` (base case) to `s4`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "s1" => Ok(Self::preset("s1", 100.0, 2.0, 0.5)),
            "s2" => Ok(Self::preset("s2", 500.0, 2.0, 0.5)),
            "s3" => Ok(Self::preset("s3", 100.0, 3.0, 0.5)),
            "s4" => Ok(Self::preset("s4", 100.0, 2.0, 1.5)),
            other => Err(AdtError::Config(format!(
                "unknown scenario `{other}`; expected one of s1, s2, s3, s4"
            ))),
        }
    }

    pub fn all() -> Vec<Self> {
        ["s1", "s2", "s3", "s4"].iter().map(|n| Self::by_name(n).unwrap()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.range_km > 0.0) || self.sigma_sp < 0.0 || self.sigma_ind < 0.0 {
            return Err(AdtError::Config(format!(
                "scenario `{}` needs a positive range and non-negative noise scales",
                self.name
            )));
        }
        Ok(())
    }
}

/// Campaign size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScale {
    pub n_sites: usize,
    pub n_months: u32,
    pub n_replicates: usize,
    pub n_boot: usize,
}

impl SimScale {
    pub const DESK: SimScale = SimScale {
        n_sites: 100,
        n_months: 48,
        n_replicates: 50,
        n_boot: 60,
    };
    pub const FULL: SimScale = SimScale {
        n_sites: 356,
        n_months: 96,
        n_replicates: 100,
        n_boot: 100,
    };
}

/// Factor of the exponential site-effect correlation. Co-located sites share
/// one latent value, so their effects are identical.
#[derive(Debug, Clone)]
pub struct NoiseField {
    groups: Vec<usize>,
    chol: DMatrix<f64>,
}

impl NoiseField {
    pub fn new(dist: &DistanceMatrix, range_km: f64) -> Result<Self> {
        if !(range_km > 0.0) {
            return Err(AdtError::InvalidInput("noise range must be positive".into()));
        }
        let (groups, reps) = colocated_groups(dist);
        let m = reps.len();
        let corr = DMatrix::from_fn(m, m, |a, b| (-dist.get(reps[a], reps[b]) / range_km).exp());
        let (corr, _) = repair(corr);
        let chol = corr
            .cholesky()
            .ok_or_else(|| AdtError::Numerical("site-effect correlation is not positive definite".into()))?
            .l();
        Ok(NoiseField { groups, chol })
    }

    pub fn n_sites(&self) -> usize {
        self.groups.len()
    }

    /// Unit-variance site effects from `z`, which needs at least one value
    /// per distinct location.
    pub fn site_effects(&self, z: &[f64]) -> Vec<f64> {
        let m = self.chol.nrows();
        let x = &self.chol * DVector::from_column_slice(&z[..m]);
        self.groups.iter().map(|&g| x[g]).collect()
    }
}

/// Noise-free mean per row, negative values truncated to zero, and the
/// number of truncated rows.
pub fn mean_surface(skeleton: &PanelDataset, coefs: &DgpCoefficients) -> Result<(Vec<f64>, usize)> {
    let rows = covariate_rows(skeleton)?;
    let mut truncated = 0;
    let mu = skeleton
        .observations
        .iter()
        .zip(&rows)
        .map(|(o, x)| {
            let v = if o.t >= skeleton.t0 {
                coefs.l1(x, skeleton.dose[o.site])
            } else {
                coefs.l0(x)
            };
            if v < 0.0 {
                truncated += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    Ok((mu, truncated))
}

/// Outcome draw for one replicate: truncated mean plus a spatially
/// correlated site effect held fixed over time plus independent noise. The
/// latent normals depend only on `seed`, so scenarios that share a seed share
/// them.
pub fn simulate_outcome(
    skeleton: &PanelDataset,
    mu: &[f64],
    field: &NoiseField,
    scenario: &SimScenario,
    seed: u64,
) -> Result<PanelDataset> {
    scenario.validate()?;
    if field.n_sites() != skeleton.n_sites() || mu.len() != skeleton.n_rows() {
        return Err(AdtError::InvalidInput("noise field or mean surface does not match the skeleton".into()));
    }
    let mut rng = substream(seed, &[1]);
    let z: Vec<f64> = (0..skeleton.n_sites()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let gamma = field.site_effects(&z);
    let mut rng = substream(seed, &[2]);
    let y: Vec<f64> = skeleton
        .observations
        .iter()
        .zip(mu)
        .map(|(o, &m)| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            m + scenario.sigma_sp * gamma[o.site] + scenario.sigma_ind * eps
        })
        .collect();
    skeleton.with_outcomes(&y)
}

/// True curve: the average over every site and every month of
/// `L1(x, δ) − L0(x)`, without truncation.
pub fn true_adt(skeleton: &PanelDataset, coefs: &DgpCoefficients, grid: &[f64]) -> Result<Vec<f64>> {
    let rows = covariate_rows(skeleton)?;
    let n = rows.len() as f64;
    Ok(grid
        .iter()
        .map(|&d| rows.iter().map(|x| coefs.l1(x, d) - coefs.l0(x)).sum::<f64>() / n)
        .collect())
}

/// Minimal node size of the simulation π_B forest. Large leaves keep the
/// out-of-bag odds π_B/(1−π_B) away from the clipping bounds.
pub const SIM_PI_B_MIN_NODE: usize = 100;
/// Minimal node size of the simulation dose mean and scale forests.
pub const SIM_DOSE_MIN_NODE: usize = 20;

/// Nuisance settings for simulation runs: outcome regressions linear in the
/// terms of the generating model, propensity models as small forests with
/// fixed `mtry`.
pub fn sim_estimator_config(pi_b_trees: usize, dose_trees: usize) -> EstimatorConfig {
    let names = |t: &[&str]| Some(t.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    let base = ["temp", "pop", "temp*pop", "time", "time*pop", "fires", "precip"];
    let mut mu1_terms = base.to_vec();
    mu1_terms.extend(["dose*dose", "dose*pop", "dose*time"]);
    let forest = |trees: usize, min_node: usize| {
        LearnerConfig::Forest(ForestParams::default().with_trees(trees).with_mtry(2).with_min_node_size(min_node))
    };
    EstimatorConfig {
        nuisance: NuisanceConfig {
            mu0: LearnerConfig::Linear(LinearParams::new(&base)),
            mu1: LearnerConfig::Linear(LinearParams::new(&mu1_terms)),
            pi_b: forest(pi_b_trees, SIM_PI_B_MIN_NODE),
            dose_mean: forest(dose_trees, SIM_DOSE_MIN_NODE),
            dose_scale: forest(dose_trees, SIM_DOSE_MIN_NODE),
            outcome_features: names(&[COV_TEMP, COV_POP, COV_TIME, COV_FIRES, COV_PRECIP]),
            pi_b_features: names(&[COV_POP, COV_TEMP, COV_PRECIP, COV_FIRES]),
            pi_d_features: names(&[COV_POP, COV_TEMP, COV_PRECIP, COV_FIRES]),
            folds: SIM_FOLDS,
            ..NuisanceConfig::default()
        },
        ..EstimatorConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Spatial,
    NonSpatial,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Spatial => "spatial",
            Method::NonSpatial => "non_spatial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Outcome of one simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    /// Point estimate; `None` when estimation failed.
    pub psi: Option<Vec<f64>>,
    pub spatial: Option<Interval>,
    pub non_spatial: Option<Interval>,
    pub bandwidth: Option<f64>,
    /// Correlation family picked for the spatial weights.
    pub family: Option<String>,
    pub errors: Vec<String>,
}

impl ReplicateRecord {
    pub fn interval(&self, method: Method) -> Option<&Interval> {
        match method {
            Method::Spatial => self.spatial.as_ref(),
            Method::NonSpatial => self.non_spatial.as_ref(),
        }
    }
}

/// Pointwise performance of one interval method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub method: Method,
    pub delta: Vec<f64>,
    pub bias: Vec<f64>,
    pub mae: Vec<f64>,
    pub coverage: Vec<f64>,
    pub width: Vec<f64>,
    /// Coverage after shifting every interval by the mean bias.
    pub debiased_coverage: Vec<f64>,
    pub n_estimates: usize,
    pub n_intervals: usize,
}

/// Grid points counted as tails: the outer tenth of the dose range on each
/// side.
pub fn is_tail(delta: f64) -> bool {
    delta <= 0.1 + 1e-12 || delta >= 0.9 - 1e-12
}

impl MetricsTable {
    /// Bias and MAE use every replicate with a point estimate; coverage and
    /// width use those that also have an interval for `method`.
    pub fn from_records(method: Method, delta: &[f64], truth: &[f64], records: &[ReplicateRecord]) -> Result<Self> {
        let g = delta.len();
        if truth.len() != g {
            return Err(AdtError::InvalidInput("truth and grid lengths differ".into()));
        }
        let estimates: Vec<&Vec<f64>> = records.iter().filter_map(|r| r.psi.as_ref()).collect();
        let with_ci: Vec<(&Vec<f64>, &Interval)> = records
            .iter()
            .filter_map(|r| Some((r.psi.as_ref()?, r.interval(method)?)))
            .collect();
        if estimates.is_empty() {
            return Err(AdtError::InvalidInput("no successful replicates".into()));
        }
        if estimates.iter().any(|e| e.len() != g) || with_ci.iter().any(|(_, c)| c.lo.len() != g || c.hi.len() != g) {
            return Err(AdtError::InvalidInput("replicate curve length differs from the grid".into()));
        }
        let ne = estimates.len() as f64;
        let bias: Vec<f64> = (0..g).map(|k| estimates.iter().map(|e| e[k] - truth[k]).sum::<f64>() / ne).collect();
        let mae: Vec<f64> = (0..g).map(|k| estimates.iter().map(|e| (e[k] - truth[k]).abs()).sum::<f64>() / ne).collect();
        let nc = with_ci.len() as f64;
        let frac = |f: &dyn Fn(&Interval, usize) -> bool| -> Vec<f64> {
            (0..g)
                .map(|k| {
                    if with_ci.is_empty() {
                        f64::NAN
                    } else {
                        with_ci.iter().filter(|(_, c)| f(c, k)).count() as f64 / nc
                    }
                })
                .collect()
        };
        let coverage = frac(&|c, k| c.lo[k] <= truth[k] && truth[k] <= c.hi[k]);
        let debiased_coverage = frac(&|c, k| c.lo[k] - bias[k] <= truth[k] && truth[k] <= c.hi[k] - bias[k]);
        let width = (0..g)
            .map(|k| {
                if with_ci.is_empty() {
                    f64::NAN
                } else {
                    with_ci.iter().map(|(_, c)| c.hi[k] - c.lo[k]).sum::<f64>() / nc
                }
            })
            .collect();
        Ok(MetricsTable {
            method,
            delta: delta.to_vec(),
            bias,
            mae,
            coverage,
            width,
            debiased_coverage,
            n_estimates: estimates.len(),
            n_intervals: with_ci.len(),
        })
    }

    fn mean_where(values: &[f64], delta: &[f64], keep: impl Fn(f64) -> bool) -> f64 {
        let sel: Vec<f64> = values.iter().zip(delta).filter(|(_, &d)| keep(d)).map(|(v, _)| *v).collect();
        stats::mean(&sel, None)
    }

    pub fn mean_coverage(&self) -> f64 {
        stats::mean(&self.coverage, None)
    }

    pub fn min_coverage(&self) -> f64 {
        self.coverage.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_width(&self) -> f64 {
        stats::mean(&self.width, None)
    }

    pub fn mean_mae(&self) -> f64 {
        stats::mean(&self.mae, None)
    }

    pub fn tail_coverage(&self) -> f64 {
        Self::mean_where(&self.coverage, &self.delta, is_tail)
    }

    pub fn debiased_tail_coverage(&self) -> f64 {
        Self::mean_where(&self.debiased_coverage, &self.delta, is_tail)
    }

    /// Coverage at the grid point nearest to `d`.
    pub fn coverage_at(&self, d: f64) -> f64 {
        let k = self
            .delta
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - d).abs().total_cmp(&(b.1 - d).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        self.coverage[k]
    }
}

/// Everything needed to run one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub scale: SimScale,
    #[serde(default)]
    pub covariates: CovariateConfig,
    #[serde(default)]
    pub coefficients: DgpCoefficients,
    #[serde(default = "default_pi_b_trees")]
    pub pi_b_trees: usize,
    /// Trees in each dose mean and scale forest.
    #[serde(default = "default_dose_trees")]
    pub dose_trees: usize,
}

fn default_pi_b_trees() -> usize {
    20
}
fn default_dose_trees() -> usize {
    10
}

impl CampaignConfig {
    pub fn new(scale: SimScale) -> Self {
        CampaignConfig {
            scale,
            covariates: CovariateConfig::default(),
            coefficients: DgpCoefficients::default(),
            pi_b_trees: default_pi_b_trees(),
            dose_trees: default_dose_trees(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: SimScenario,
    pub scale: SimScale,
    pub delta: Vec<f64>,
    pub truth: Vec<f64>,
    pub spatial: MetricsTable,
    pub non_spatial: MetricsTable,
    pub records: Vec<ReplicateRecord>,
    /// Mean of the simulated outcome over pre-period rows of replicate 0's
    /// noise-free surface.
    pub pre_mean: f64,
    pub truncated_fraction: f64,
}

impl ScenarioResult {
    pub fn metrics(&self, method: Method) -> &MetricsTable {
        match method {
            Method::Spatial => &self.spatial,
            Method::NonSpatial => &self.non_spatial,
        }
    }
}

fn run_replicate(
    skeleton: &PanelDataset,
    mu: &[f64],
    field: &NoiseField,
    scenario: &SimScenario,
    est: &EstimatorConfig,
    n_boot: usize,
    seed: u64,
    r: usize,
) -> ReplicateRecord {
    let mut rec = ReplicateRecord {
        replicate: r,
        psi: None,
        spatial: None,
        non_spatial: None,
        bandwidth: None,
        family: None,
        errors: Vec::new(),
    };
    let key = r as u64;
    let panel = match simulate_outcome(skeleton, mu, field, scenario, derive_seed(seed, &[SEED_DATA, key])) {
        Ok(p) => p,
        Err(e) => {
            rec.errors.push(format!("simulate: {e}"));
            return rec;
        }
    };
    let point = match estimate_adt(&panel, est, derive_seed(seed, &[SEED_FIT, key])) {
        Ok(p) => p,
        Err(e) => {
            rec.errors.push(format!("estimate: {e}"));
            return rec;
        }
    };
    rec.psi = Some(point.curve.psi.clone());
    rec.bandwidth = Some(point.curve.bandwidth);
    let boot_seed = derive_seed(seed, &[SEED_BOOT, key]);
    for method in [Method::Spatial, Method::NonSpatial] {
        let cfg = BootstrapConfig {
            n_boot,
            spatial: method == Method::Spatial,
            ..BootstrapConfig::default()
        };
        match bootstrap_adt(&panel, &point, &cfg, boot_seed) {
            Ok(b) => {
                if let Some(d) = &b.diagnostics {
                    rec.family = Some(d.chosen.family().name().to_string());
                }
                let ci = Interval {
                    lo: b.curve.ci_lo.unwrap_or_default(),
                    hi: b.curve.ci_hi.unwrap_or_default(),
                };
                match method {
                    Method::Spatial => rec.spatial = Some(ci),
                    Method::NonSpatial => rec.non_spatial = Some(ci),
                }
            }
            Err(e) => rec.errors.push(format!("{} bootstrap: {e}", method.name())),
        }
    }
    rec
}

/// Simulate, estimate and bootstrap every replicate of a scenario, then
/// reduce to pointwise metrics against the true curve. Covariates depend on
/// `seed` only, so scenarios run with one seed share them.
pub fn run_scenario(scenario: &SimScenario, campaign: &CampaignConfig, seed: u64) -> Result<ScenarioResult> {
    scenario.validate()?;
    let scale = campaign.scale;
    if scale.n_replicates == 0 || scale.n_boot == 0 {
        return Err(AdtError::Config("replicate and bootstrap counts must be positive".into()));
    }
    let skeleton = generate_covariates_with(
        &campaign.covariates,
        scale.n_sites,
        scale.n_months,
        default_t0(scale.n_months),
        derive_seed(seed, &[0]),
    )?;
    let est = sim_estimator_config(campaign.pi_b_trees, campaign.dose_trees);
    let delta = est.nuisance.dose_grid();
    let truth = true_adt(&skeleton, &campaign.coefficients, &delta)?;
    let (mu, truncated) = mean_surface(&skeleton, &campaign.coefficients)?;
    let field = NoiseField::new(&skeleton.distances(), scenario.range_km)?;

    let records: Vec<ReplicateRecord> = (0..scale.n_replicates)
        .into_par_iter()
        .map(|r| run_replicate(&skeleton, &mu, &field, scenario, &est, scale.n_boot, seed, r))
        .collect();
    for rec in &records {
        for e in &rec.errors {
            log::warn!("{} replicate {}: {e}", scenario.name, rec.replicate);
        }
    }
    let pre: Vec<f64> = skeleton
        .observations
        .iter()
        .zip(&mu)
        .filter(|(o, _)| o.t < skeleton.t0)
        .map(|(_, &m)| m)
        .collect();
    Ok(ScenarioResult {
        scenario: scenario.clone(),
        scale,
        spatial: MetricsTable::from_records(Method::Spatial, &delta, &truth, &records)?,
        non_spatial: MetricsTable::from_records(Method::NonSpatial, &delta, &truth, &records)?,
        delta,
        truth,
        records,
        pre_mean: stats::mean(&pre, None),
        truncated_fraction: truncated as f64 / skeleton.n_rows() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn skeleton() -> PanelDataset {
        generate_covariates(60, 24, 5).unwrap()
    }

    #[test]
    fn time_variable_starts_at_one() {
        assert_eq!(time_variable(1, 30.4375), 1.0);
        let t2 = time_variable(2, 30.4375);
        assert!((t2 - 31f64.powf(0.2)).abs() < 1e-15);
    }

    #[test]
    fn skeleton_shape_and_dose_marginal() {
        let p = skeleton();
        assert_eq!(p.n_sites(), 60);
        assert!(p.is_balanced());
        assert_eq!(p.t0, default_t0(24));
        assert_eq!(default_t0(96), 73);
        assert_eq!(default_t0(48), 37);
        let mut d = p.dose.clone();
        d.sort_by(f64::total_cmp);
        for (k, v) in d.iter().enumerate() {
            assert!((v - (k + 1) as f64 / 60.0).abs() < 1e-12, "dose not uniform on (0, 1]");
        }
        assert!(generate_covariates(9, 24, 5).is_err());
    }

    #[test]
    fn covariates_are_seed_deterministic() {
        assert_eq!(generate_covariates(30, 12, 8).unwrap(), generate_covariates(30, 12, 8).unwrap());
        assert_ne!(generate_covariates(30, 12, 8).unwrap(), generate_covariates(30, 12, 9).unwrap());
    }

    #[test]
    fn frozen_calibration_file_matches_defaults() {
        let text = include_str!("../data/sim_covariates.toml");
        let parsed: CovariateConfig = toml::from_str(text).unwrap();
        assert_eq!(parsed, CovariateConfig::default());
    }

    #[test]
    fn calibrated_scales_hit_pre_period_band() {
        let p = generate_covariates(100, 48, 11).unwrap();
        let (mu, truncated) = mean_surface(&p, &DgpCoefficients::default()).unwrap();
        let pre: Vec<f64> = p.observations.iter().zip(&mu).filter(|(o, _)| o.t < p.t0).map(|(_, &m)| m).collect();
        let m = stats::mean(&pre, None);
        assert!((15.0..=40.0).contains(&m), "pre-period mean {m}");
        let frac = truncated as f64 / mu.len() as f64;
        assert!((frac - 0.0006).abs() <= 0.002, "truncated fraction {frac}");
    }

    #[test]
    fn noiseless_outcome_equals_truncated_mean() {
        let p = skeleton();
        let (mu, _) = mean_surface(&p, &DgpCoefficients::default()).unwrap();
        let field = NoiseField::new(&p.distances(), 100.0).unwrap();
        let sc = SimScenario { name: "quiet".into(), range_km: 100.0, sigma_sp: 0.0, sigma_ind: 0.0 };
        let y = simulate_outcome(&p, &mu, &field, &sc, 3).unwrap().outcomes();
        assert_eq!(y, mu);
    }

    #[test]
    fn negative_means_are_truncated() {
        let p = skeleton();
        let mut coefs = DgpCoefficients::default();
        coefs.l0.intercept = -1e4;
        let (mu, truncated) = mean_surface(&p, &coefs).unwrap();
        assert_eq!(truncated, p.pre_rows().len());
        assert!(mu.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn coincident_sites_share_their_series() {
        let mut p = skeleton();
        p.sites[1].lon = p.sites[0].lon;
        p.sites[1].lat = p.sites[0].lat;
        for k in 0..p.observations.len() {
            if p.observations[k].site == 1 {
                let t = p.observations[k].t as usize;
                p.observations[k].time_covariates = p.observations[t - 1].time_covariates.clone();
            }
        }
        p.sites[1].static_covariates = p.sites[0].static_covariates.clone();
        p.dose[1] = p.dose[0];
        let (mu, _) = mean_surface(&p, &DgpCoefficients::default()).unwrap();
        let field = NoiseField::new(&p.distances(), 100.0).unwrap();
        let sc = SimScenario { name: "sp".into(), range_km: 100.0, sigma_sp: 2.0, sigma_ind: 0.0 };
        let q = simulate_outcome(&p, &mu, &field, &sc, 4).unwrap();
        let series = |s: usize| -> Vec<f64> { q.observations.iter().filter(|o| o.site == s).map(|o| o.y).collect() };
        assert_eq!(series(0), series(1));
        assert_ne!(series(0), series(2));
    }

    #[test]
    fn site_effect_correlation_decays_with_distance() {
        let p = skeleton();
        let dist = p.distances();
        let field = NoiseField::new(&dist, 100.0).unwrap();
        let (mut near, mut far) = ((0usize, 0usize), (0usize, 0usize));
        'outer: for i in 0..p.n_sites() {
            for j in (i + 1)..p.n_sites() {
                let d = dist.get(i, j);
                if d > 5.0 && d < 30.0 && near == (0, 0) {
                    near = (i, j);
                }
                if d > 800.0 && far == (0, 0) {
                    far = (i, j);
                }
                if near != (0, 0) && far != (0, 0) {
                    break 'outer;
                }
            }
        }
        let n = 20_000;
        let mut rng = substream(1, &[]);
        let (mut a, mut b, mut c, mut e) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let z: Vec<f64> = (0..p.n_sites()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let g = field.site_effects(&z);
            a.push(g[near.0]);
            b.push(g[near.1]);
            c.push(g[far.0]);
            e.push(g[far.1]);
        }
        let corr = |x: &[f64], y: &[f64]| -> f64 {
            let (mx, my) = (stats::mean(x, None), stats::mean(y, None));
            let cov: f64 = x.iter().zip(y).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>();
            let vx: f64 = x.iter().map(|u| (u - mx).powi(2)).sum::<f64>();
            let vy: f64 = y.iter().map(|v| (v - my).powi(2)).sum::<f64>();
            cov / (vx * vy).sqrt()
        };
        let target = (-dist.get(near.0, near.1) / 100.0).exp();
        assert!((corr(&a, &b) - target).abs() < 0.03, "near {} vs {target}", corr(&a, &b));
        assert!(corr(&c, &e).abs() < 0.03);
    }

    #[test]
    fn true_curve_is_quadratic_with_fixed_curvature() {
        let p = skeleton();
        let grid = stats::linspace(0.0, 1.0, 101);
        let psi = true_adt(&p, &DgpCoefficients::default(), &grid).unwrap();
        let step = grid[1] - grid[0];
        for k in 1..100 {
            let second = psi[k + 1] - 2.0 * psi[k] + psi[k - 1];
            assert!((second + 12.0 * step * step).abs() < 1e-9, "second difference {second}");
        }
    }

    #[test]
    fn zero_effect_coefficients_give_zero_truth() {
        let p = skeleton();
        let mut coefs = DgpCoefficients::default();
        coefs.l1 = coefs.l0;
        coefs.dose = DoseBlock { outer: 0.0, dose: 0.0, pop: 0.0, time: 0.0 };
        let psi = true_adt(&p, &coefs, &[0.0, 0.3, 1.0]).unwrap();
        assert!(psi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn presets_and_names() {
        let s = SimScenario::by_name("s3").unwrap();
        assert_eq!((s.range_km, s.sigma_sp, s.sigma_ind), (100.0, 3.0, 0.5));
        assert_eq!(SimScenario::all().len(), 4);
        assert!(SimScenario::by_name("s5").is_err());
    }

    #[test]
    fn sim_config_roles_resolve() {
        let p = skeleton();
        sim_estimator_config(5, 5).nuisance.roles(&p).unwrap();
    }

    #[test]
    fn metrics_by_hand() {
        let rec = |psi: [f64; 2], lo: [f64; 2], hi: [f64; 2]| ReplicateRecord {
            replicate: 0,
            psi: Some(psi.to_vec()),
            spatial: Some(Interval { lo: lo.to_vec(), hi: hi.to_vec() }),
            non_spatial: None,
            bandwidth: None,
            family: None,
            errors: Vec::new(),
        };
        let records = vec![rec([1.0, 2.0], [0.5, 2.5], [1.5, 3.5]), rec([3.0, 0.0], [2.5, -1.0], [3.5, 1.0])];
        let m = MetricsTable::from_records(Method::Spatial, &[0.0, 1.0], &[1.0, 1.0], &records).unwrap();
        assert_eq!(m.bias, vec![1.0, 0.0]);
        assert_eq!(m.mae, vec![1.0, 1.0]);
        assert_eq!(m.coverage, vec![0.5, 0.5]);
        assert_eq!(m.width, vec![1.0, 1.5]);
        // Shifted by the bias of 1 at δ=0 the intervals become [-0.5, 0.5]
        // and [1.5, 2.5], and neither covers 1.
        assert_eq!(m.debiased_coverage, vec![0.0, 0.5]);
        let ns = MetricsTable::from_records(Method::NonSpatial, &[0.0, 1.0], &[1.0, 1.0], &records).unwrap();
        assert_eq!(ns.n_intervals, 0);
        assert!(ns.coverage[0].is_nan());
    }

    proptest! {
        #[test]
        fn metrics_respect_their_bounds(
            vals in proptest::collection::vec((-5.0f64..5.0, 0.0f64..3.0, 0.0f64..3.0), 3..30),
            truth in -2.0f64..2.0,
        ) {
            let records: Vec<ReplicateRecord> = vals.iter().enumerate().map(|(r, &(e, a, b))| ReplicateRecord {
                replicate: r,
                psi: Some(vec![e]),
                spatial: Some(Interval { lo: vec![e - a], hi: vec![e + b] }),
                non_spatial: None,
                bandwidth: None,
                family: None,
                errors: Vec::new(),
            }).collect();
            let m = MetricsTable::from_records(Method::Spatial, &[0.5], &[truth], &records).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.coverage[0]));
            prop_assert!((0.0..=1.0).contains(&m.debiased_coverage[0]));
            prop_assert!(m.mae[0] + 1e-12 >= m.bias[0].abs());
            prop_assert!(m.width[0] >= 0.0);
        }
    }
}
