//! Nuisance functions: outcome regressions μ0 and μ1, the period propensity
//! π_B, the generalized propensity score π_D, and the dose marginals m and f.
//!
//! μ1 and π_D are cross-fitted over site folds. μ0 and π_B are fitted once;
//! their predictions on training rows are out-of-bag when the learner
//! provides them. All fitted quantities are stored as evaluated arrays in a
//! [`NuisanceBundle`], so alternative nuisance estimates can be injected
//! directly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::KernelDensity;
use crate::error::{AdtError, Result};
use crate::forest::{ForestParams, Mtry, MtryKeyword};
use crate::frame::FeatureFrame;
use crate::learner::{FitOptions, Fitted, LearnerConfig, Task};
use crate::panel::{PanelDataset, FEATURE_DOSE, FEATURE_MONTH, FEATURE_SITE};
use crate::rng::derive_seed;
use crate::stats;
use crate::tuning::{make_folds, TuningPolicy};

pub const PI_B_LOWER: f64 = 0.001;
pub const PI_B_UPPER: f64 = 0.99;
/// Floor applied to π_D and f wherever they are evaluated.
pub const DENSITY_FLOOR: f64 = 1e-4;
/// Floor applied to the fitted dose-residual scale.
pub const SCALE_FLOOR: f64 = 0.01;

const SEED_MU0: u64 = 1;
const SEED_MU1: u64 = 2;
const SEED_PI_B: u64 = 3;
const SEED_DOSE_MEAN: u64 = 4;
const SEED_DOSE_SCALE: u64 = 5;
const SEED_FOLDS: u64 = 6;

fn tuned_forest(policy: TuningPolicy) -> LearnerConfig {
    LearnerConfig::Forest(ForestParams {
        mtry: Mtry::Keyword(MtryKeyword::Tune),
        tuning_policy: Some(policy),
        ..ForestParams::default()
    })
}

fn default_mu0() -> LearnerConfig {
    tuned_forest(TuningPolicy::TemporalBias)
}
fn default_mu1() -> LearnerConfig {
    tuned_forest(TuningPolicy::Plateau)
}
fn default_pi_b() -> LearnerConfig {
    tuned_forest(TuningPolicy::ProbBounded)
}
fn default_dose_model() -> LearnerConfig {
    tuned_forest(TuningPolicy::SiteFold)
}
fn default_folds() -> usize {
    10
}
fn default_grid_size() -> usize {
    101
}
fn default_truncation() -> Option<f64> {
    Some(0.995)
}

/// Learners and covariate roles for the nuisance models.
///
/// Feature lists left unset default to every available covariate: the
/// outcome models see the month index, site and province effects and all
/// covariates; π_B drops the month index; π_D also drops the site effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceConfig {
    #[serde(default = "default_mu0")]
    pub mu0: LearnerConfig,
    #[serde(default = "default_mu1")]
    pub mu1: LearnerConfig,
    #[serde(default = "default_pi_b")]
    pub pi_b: LearnerConfig,
    #[serde(default = "default_dose_model")]
    pub dose_mean: LearnerConfig,
    #[serde(default = "default_dose_model")]
    pub dose_scale: LearnerConfig,
    #[serde(default)]
    pub outcome_features: Option<Vec<String>>,
    #[serde(default)]
    pub pi_b_features: Option<Vec<String>>,
    #[serde(default)]
    pub pi_d_features: Option<Vec<String>>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    /// Upper quantile at which the stabilized ratio f/π_D is truncated.
    #[serde(default = "default_truncation")]
    pub ratio_truncation: Option<f64>,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            mu0: default_mu0(),
            mu1: default_mu1(),
            pi_b: default_pi_b(),
            dose_mean: default_dose_model(),
            dose_scale: default_dose_model(),
            outcome_features: None,
            pi_b_features: None,
            pi_d_features: None,
            folds: default_folds(),
            grid_size: default_grid_size(),
            ratio_truncation: default_truncation(),
        }
    }
}

/// Feature lists actually used by each model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRoles {
    pub mu0: Vec<String>,
    pub mu1: Vec<String>,
    pub pi_b: Vec<String>,
    pub pi_d: Vec<String>,
}

impl NuisanceConfig {
    pub fn dose_grid(&self) -> Vec<f64> {
        stats::linspace(0.0, 1.0, self.grid_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(AdtError::Config("cross-fitting needs at least 2 folds".into()));
        }
        if self.grid_size < 2 {
            return Err(AdtError::Config("dose grid needs at least 2 points".into()));
        }
        if let Some(q) = self.ratio_truncation {
            if !(q > 0.0 && q <= 1.0) {
                return Err(AdtError::Config(format!("ratio_truncation {q} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Resolve and check the covariate roles against a panel.
    pub fn roles(&self, panel: &PanelDataset) -> Result<FeatureRoles> {
        let available = panel.available_features();
        let all: Vec<String> = available
            .iter()
            .filter(|n| n.as_str() != FEATURE_DOSE)
            .cloned()
            .collect();
        let outcome = self.outcome_features.clone().unwrap_or_else(|| all.clone());
        let pi_b = self.pi_b_features.clone().unwrap_or_else(|| {
            all.iter().filter(|n| n.as_str() != FEATURE_MONTH).cloned().collect()
        });
        let pi_d = self.pi_d_features.clone().unwrap_or_else(|| {
            all.iter()
                .filter(|n| n.as_str() != FEATURE_MONTH && n.as_str() != FEATURE_SITE)
                .cloned()
                .collect()
        });
        for (role, list) in [("outcome", &outcome), ("pi_b", &pi_b), ("pi_d", &pi_d)] {
            if list.is_empty() {
                return Err(AdtError::Config(format!("{role} feature list is empty")));
            }
            for f in list.iter() {
                if !available.contains(f) {
                    return Err(AdtError::Config(format!("{role} feature `{f}` is not in the panel")));
                }
                if f == FEATURE_DOSE {
                    return Err(AdtError::Config(format!(
                        "`dose` may not be listed among the {role} features"
                    )));
                }
            }
        }
        if pi_b.iter().any(|f| f == FEATURE_MONTH) {
            return Err(AdtError::Config("π_B features must exclude the month index".into()));
        }
        if pi_d.iter().any(|f| f == FEATURE_MONTH || f == FEATURE_SITE) {
            return Err(AdtError::Config(
                "π_D features must exclude the month index and the site effect".into(),
            ));
        }
        let mut mu1 = outcome.clone();
        mu1.push(FEATURE_DOSE.to_string());
        let roles = FeatureRoles {
            mu0: outcome,
            mu1,
            pi_b,
            pi_d,
        };
        for (name, learner, list) in [
            ("mu0", &self.mu0, &roles.mu0),
            ("mu1", &self.mu1, &roles.mu1),
            ("dose_mean", &self.dose_mean, &roles.pi_d),
            ("dose_scale", &self.dose_scale, &roles.pi_d),
        ] {
            for f in learner.required_features() {
                if !list.contains(&f) {
                    return Err(AdtError::Config(format!(
                        "{name} model uses `{f}`, which is not among its features"
                    )));
                }
            }
        }
        Ok(roles)
    }
}

/// Shared inputs of every nuisance fit.
#[derive(Debug, Clone, Copy)]
pub struct FitContext<'a> {
    pub panel: &'a PanelDataset,
    /// Per-row observation weights (bootstrap); `None` means unit weights.
    pub weights: Option<&'a [f64]>,
    pub seed: u64,
}

impl<'a> FitContext<'a> {
    fn subset_weights(&self, rows: &[usize]) -> Option<Vec<f64>> {
        self.weights.map(|w| rows.iter().map(|&r| w[r]).collect())
    }

    fn row_weight(&self, row: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[row])
    }
}

fn row_keys(rows: &[usize]) -> Vec<u64> {
    rows.iter().map(|&r| r as u64).collect()
}

fn site_keys(panel: &PanelDataset, rows: &[usize]) -> Vec<u64> {
    rows.iter().map(|&r| panel.observations[r].site as u64).collect()
}

fn months(panel: &PanelDataset, rows: &[usize]) -> Vec<u32> {
    rows.iter().map(|&r| panel.observations[r].t).collect()
}

/// In-sample predictions, out-of-bag where available.
fn training_predictions(fitted: &dyn Fitted, x: &FeatureFrame) -> Result<Vec<f64>> {
    match fitted.oob_predictions() {
        Some(p) => Ok(p.to_vec()),
        None => fitted.predict(x),
    }
}

/// μ0 fitted on pre-period rows; returns predictions for every row and the
/// resolved learner.
pub fn fit_mu0(
    ctx: &FitContext,
    learner: &LearnerConfig,
    features: &[String],
) -> Result<(Vec<f64>, LearnerConfig)> {
    let panel = ctx.panel;
    let pre = panel.pre_rows();
    let x = panel.feature_frame(features, &pre, None)?;
    let y: Vec<f64> = pre.iter().map(|&r| panel.observations[r].y).collect();
    let w = ctx.subset_weights(&pre);
    let keys = row_keys(&pre);
    let times = months(panel, &pre);
    let opts = FitOptions::new(Task::Regression, derive_seed(ctx.seed, &[SEED_MU0]))
        .with_weights(w.as_deref())
        .with_bag_keys(Some(&keys))
        .with_groups(None)
        .with_times(Some(&times));
    let resolved = learner.resolve(&x, &y, &opts)?;
    let fitted = resolved.fit(&x, &y, &opts)?;
    let mut out = vec![0.0; panel.n_rows()];
    for (&r, v) in pre.iter().zip(training_predictions(fitted.as_ref(), &x)?) {
        out[r] = v;
    }
    let post = panel.post_rows();
    let xp = panel.feature_frame(features, &post, None)?;
    for (&r, v) in post.iter().zip(fitted.predict(&xp)?) {
        out[r] = v;
    }
    Ok((out, resolved))
}

/// Site-to-fold assignment with fold sizes differing by at most one.
pub fn assign_folds(n_sites: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if n_sites < k {
        return Err(AdtError::InvalidInput(format!(
            "cross-fitting needs at least {k} sites, found {n_sites}"
        )));
    }
    Ok(make_folds(n_sites, k, None, derive_seed(seed, &[SEED_FOLDS])))
}

/// Post rows grouped by the fold of their site.
fn rows_by_fold(panel: &PanelDataset, post: &[usize], fold_map: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); k];
    for &r in post {
        out[fold_map[panel.observations[r].site]].push(r);
    }
    out
}

/// Cross-fitted μ1: one model per fold, each trained without that fold's sites.
#[derive(Debug)]
pub struct Mu1CrossFit {
    pub fold_map: Vec<usize>,
    pub models: Vec<Box<dyn Fitted>>,
    pub features: Vec<String>,
    pub learner: LearnerConfig,
}

pub fn fit_mu1_crossfit(
    ctx: &FitContext,
    learner: &LearnerConfig,
    features: &[String],
    fold_map: &[usize],
    k: usize,
) -> Result<Mu1CrossFit> {
    let panel = ctx.panel;
    let post = panel.post_rows();
    let by_fold = rows_by_fold(panel, &post, fold_map, k);
    if by_fold.iter().any(|f| f.is_empty()) {
        return Err(AdtError::InvalidInput("a cross-fitting fold has no post-period rows".into()));
    }
    let seed = derive_seed(ctx.seed, &[SEED_MU1]);
    let resolved = {
        let x = panel.feature_frame(features, &post, None)?;
        let y: Vec<f64> = post.iter().map(|&r| panel.observations[r].y).collect();
        let w = ctx.subset_weights(&post);
        let keys = row_keys(&post);
        let groups = site_keys(panel, &post);
        let opts = FitOptions::new(Task::Regression, seed)
            .with_weights(w.as_deref())
            .with_bag_keys(Some(&keys))
            .with_groups(Some(&groups));
        learner.resolve(&x, &y, &opts)?
    };
    let models = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = post
                .iter()
                .copied()
                .filter(|&r| fold_map[panel.observations[r].site] != f)
                .collect();
            let x = panel.feature_frame(features, &train, None)?;
            let y: Vec<f64> = train.iter().map(|&r| panel.observations[r].y).collect();
            let w = ctx.subset_weights(&train);
            let keys = row_keys(&train);
            let opts = FitOptions::new(Task::Regression, derive_seed(seed, &[f as u64]))
                .with_weights(w.as_deref())
                .with_bag_keys(Some(&keys));
            resolved.fit(&x, &y, &opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Mu1CrossFit {
        fold_map: fold_map.to_vec(),
        models,
        features: features.to_vec(),
        learner: resolved,
    })
}

impl Mu1CrossFit {
    /// Out-of-fold μ1 at the observed dose for the given rows.
    pub fn predict_rows(&self, panel: &PanelDataset, rows: &[usize], dose: Option<f64>) -> Result<Vec<f64>> {
        let k = self.models.len();
        let by_fold = rows_by_fold(panel, rows, &self.fold_map, k);
        let pos: std::collections::HashMap<usize, usize> =
            rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let mut out = vec![0.0; rows.len()];
        for (f, fr) in by_fold.iter().enumerate() {
            if fr.is_empty() {
                continue;
            }
            let x = panel.feature_frame(&self.features, fr, dose)?;
            for (&r, v) in fr.iter().zip(self.models[f].predict(&x)?) {
                out[pos[&r]] = v;
            }
        }
        Ok(out)
    }
}

/// Cross-fitted m(δ) = average over post rows of μ1(δ, X), each row scored by
/// the model that excluded its site.
pub fn marginalize_m(
    mu1: &Mu1CrossFit,
    ctx: &FitContext,
    grid: &[f64],
) -> Result<Vec<f64>> {
    let panel = ctx.panel;
    let post = panel.post_rows();
    let k = mu1.models.len();
    let by_fold = rows_by_fold(panel, &post, &mu1.fold_map, k);
    let total_w: f64 = post.iter().map(|&r| ctx.row_weight(r)).sum();
    let mut m = vec![0.0; grid.len()];
    for (f, fr) in by_fold.iter().enumerate() {
        if fr.is_empty() {
            continue;
        }
        let base = panel.feature_frame(&mu1.features, fr, None)?;
        let w: Vec<f64> = fr.iter().map(|&r| ctx.row_weight(r)).collect();
        let sums = grid
            .par_iter()
            .map(|&d| {
                let x = base.with_constant(FEATURE_DOSE, d)?;
                let p = mu1.models[f].predict(&x)?;
                Ok(p.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
            })
            .collect::<Result<Vec<f64>>>()?;
        for (acc, s) in m.iter_mut().zip(sums) {
            *acc += s;
        }
    }
    m.iter_mut().for_each(|v| *v /= total_w);
    Ok(m)
}

/// Conditional dose density model: `π_D(δ|x) = kde((δ − D̂(x))/ε̂(x)) / ε̂(x)`.
#[derive(Debug)]
pub struct GpsModel {
    pub mean: Box<dyn Fitted>,
    pub scale: Box<dyn Fitted>,
    pub density: KernelDensity,
}

impl GpsModel {
    /// `(D̂, ε̂)` for each row of `x`; ε̂ is floored.
    pub fn location_scale(&self, x: &FeatureFrame) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.mean.predict(x)?;
        let e = self
            .scale
            .predict(x)?
            .into_iter()
            .map(|v| v.max(SCALE_FLOOR))
            .collect();
        Ok((d, e))
    }

    #[inline]
    pub fn density_at(&self, delta: f64, d_hat: f64, eps_hat: f64) -> f64 {
        (self.density.eval((delta - d_hat) / eps_hat) / eps_hat).max(DENSITY_FLOOR)
    }
}

#[derive(Debug)]
pub struct GpsCrossFit {
    pub fold_map: Vec<usize>,
    pub models: Vec<GpsModel>,
    pub features: Vec<String>,
    pub mean_learner: LearnerConfig,
    pub scale_learner: LearnerConfig,
}

/// Per-row GPS location/scale, evaluated by each row's own fold model.
#[derive(Debug, Clone)]
pub struct GpsRowParams {
    pub rows: Vec<usize>,
    pub fold: Vec<usize>,
    pub d_hat: Vec<f64>,
    pub eps_hat: Vec<f64>,
}

pub fn fit_gps_crossfit(
    ctx: &FitContext,
    mean_learner: &LearnerConfig,
    scale_learner: &LearnerConfig,
    features: &[String],
    fold_map: &[usize],
    k: usize,
) -> Result<GpsCrossFit> {
    if features.iter().any(|f| f == FEATURE_MONTH || f == FEATURE_SITE) {
        return Err(AdtError::Config(
            "GPS features must exclude the month index and the site effect".into(),
        ));
    }
    let panel = ctx.panel;
    let post = panel.post_rows();
    let seed_mean = derive_seed(ctx.seed, &[SEED_DOSE_MEAN]);
    let seed_scale = derive_seed(ctx.seed, &[SEED_DOSE_SCALE]);

    // tuning uses all post rows once; folds reuse the resolved settings
    let x_all = panel.feature_frame(features, &post, None)?;
    let d_all: Vec<f64> = post.iter().map(|&r| panel.row_dose(r)).collect();
    let w_all = ctx.subset_weights(&post);
    let groups_all = site_keys(panel, &post);
    let opts_all = FitOptions::new(Task::Regression, seed_mean)
        .with_weights(w_all.as_deref())
        .with_bag_keys(Some(&groups_all))
        .with_groups(Some(&groups_all));
    let mean_resolved = mean_learner.resolve(&x_all, &d_all, &opts_all)?;
    let scale_resolved = if scale_learner.is_tuned() {
        let fit = mean_resolved.fit(&x_all, &d_all, &opts_all)?;
        let pred = training_predictions(fit.as_ref(), &x_all)?;
        let abs_res: Vec<f64> = d_all.iter().zip(&pred).map(|(d, p)| (d - p).abs()).collect();
        scale_learner.resolve(&x_all, &abs_res, &opts_all.with_groups(Some(&groups_all)))?
    } else {
        scale_learner.clone()
    };

    let models = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = post
                .iter()
                .copied()
                .filter(|&r| fold_map[panel.observations[r].site] != f)
                .collect();
            let x = panel.feature_frame(features, &train, None)?;
            let d: Vec<f64> = train.iter().map(|&r| panel.row_dose(r)).collect();
            let w = ctx.subset_weights(&train);
            let keys = site_keys(panel, &train);
            let opts = FitOptions::new(Task::Regression, derive_seed(seed_mean, &[f as u64]))
                .with_weights(w.as_deref())
                .with_bag_keys(Some(&keys));
            let mean = mean_resolved.fit(&x, &d, &opts)?;
            let d_hat = training_predictions(mean.as_ref(), &x)?;
            let resid: Vec<f64> = d.iter().zip(&d_hat).map(|(a, b)| a - b).collect();
            let abs_resid: Vec<f64> = resid.iter().map(|v| v.abs()).collect();
            let opts_s = FitOptions::new(Task::Regression, derive_seed(seed_scale, &[f as u64]))
                .with_weights(w.as_deref())
                .with_bag_keys(Some(&keys));
            let scale = scale_resolved.fit(&x, &abs_resid, &opts_s)?;
            let eps: Vec<f64> = training_predictions(scale.as_ref(), &x)?
                .into_iter()
                .map(|v| v.max(SCALE_FLOOR))
                .collect();
            let standardized: Vec<f64> = resid.iter().zip(&eps).map(|(r, e)| r / e).collect();
            let density = KernelDensity::fit(&standardized, w.as_deref())?;
            Ok(GpsModel { mean, scale, density })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GpsCrossFit {
        fold_map: fold_map.to_vec(),
        models,
        features: features.to_vec(),
        mean_learner: mean_resolved,
        scale_learner: scale_resolved,
    })
}

impl GpsCrossFit {
    pub fn row_params(&self, panel: &PanelDataset, rows: &[usize]) -> Result<GpsRowParams> {
        let k = self.models.len();
        let by_fold = rows_by_fold(panel, rows, &self.fold_map, k);
        let pos: std::collections::HashMap<usize, usize> =
            rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let mut fold = vec![0; rows.len()];
        let mut d_hat = vec![0.0; rows.len()];
        let mut eps_hat = vec![0.0; rows.len()];
        for (f, fr) in by_fold.iter().enumerate() {
            if fr.is_empty() {
                continue;
            }
            let x = panel.feature_frame(&self.features, fr, None)?;
            let (d, e) = self.models[f].location_scale(&x)?;
            for (i, &r) in fr.iter().enumerate() {
                let p = pos[&r];
                fold[p] = f;
                d_hat[p] = d[i];
                eps_hat[p] = e[i];
            }
        }
        Ok(GpsRowParams {
            rows: rows.to_vec(),
            fold,
            d_hat,
            eps_hat,
        })
    }

    /// π̂_D at each row's observed dose.
    pub fn density_at_observed(&self, panel: &PanelDataset, params: &GpsRowParams) -> Vec<f64> {
        params
            .rows
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                self.models[params.fold[i]].density_at(panel.row_dose(r), params.d_hat[i], params.eps_hat[i])
            })
            .collect()
    }
}

/// f(δ) = average over post rows of π̂_D(δ | X), floored.
pub fn marginalize_f(gps: &GpsCrossFit, params: &GpsRowParams, ctx: &FitContext, grid: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = params.rows.iter().map(|&r| ctx.row_weight(r)).collect();
    let tw: f64 = w.iter().sum();
    grid.par_iter()
        .map(|&delta| {
            let s: f64 = (0..params.rows.len())
                .map(|i| w[i] * gps.models[params.fold[i]].density_at(delta, params.d_hat[i], params.eps_hat[i]))
                .sum();
            (s / tw).max(DENSITY_FLOOR)
        })
        .collect()
}

/// π_B on every row, clipped to `[PI_B_LOWER, PI_B_UPPER]`.
pub fn fit_pi_b(ctx: &FitContext, learner: &LearnerConfig, features: &[String]) -> Result<(Vec<f64>, LearnerConfig)> {
    if features.iter().any(|f| f == FEATURE_MONTH) {
        return Err(AdtError::Config("π_B features must exclude the month index".into()));
    }
    let panel = ctx.panel;
    let rows: Vec<usize> = (0..panel.n_rows()).collect();
    let x = panel.feature_frame(features, &rows, None)?;
    let b: Vec<f64> = rows.iter().map(|&r| if panel.is_post(r) { 1.0 } else { 0.0 }).collect();
    let keys = row_keys(&rows);
    let opts = FitOptions::new(Task::Classification, derive_seed(ctx.seed, &[SEED_PI_B]))
        .with_weights(ctx.weights)
        .with_bag_keys(Some(&keys));
    let resolved = learner.resolve(&x, &b, &opts)?;
    let fitted = resolved.fit(&x, &b, &opts)?;
    let p = training_predictions(fitted.as_ref(), &x)?;
    Ok((p.into_iter().map(clip_pi_b).collect(), resolved))
}

#[inline]
pub fn clip_pi_b(p: f64) -> f64 {
    p.clamp(PI_B_LOWER, PI_B_UPPER)
}

/// Evaluated nuisance functions. Row-indexed arrays cover every panel row;
/// post-indexed arrays follow `post_rows`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceBundle {
    pub post_rows: Vec<usize>,
    pub mu0: Vec<f64>,
    pub pi_b: Vec<f64>,
    /// Cross-fitted μ1 at the observed dose.
    pub mu1: Vec<f64>,
    /// Cross-fitted π_D at the observed dose.
    pub gps: Vec<f64>,
    pub grid: Vec<f64>,
    pub m_curve: Vec<f64>,
    pub f_curve: Vec<f64>,
    pub m_at_dose: Vec<f64>,
    pub f_at_dose: Vec<f64>,
    /// Cross-fitting fold per site.
    pub fold_map: Vec<usize>,
    pub features: FeatureRoles,
}

impl NuisanceBundle {
    /// Check lengths, finiteness, floors and clipping bounds against a panel.
    pub fn validate(&self, panel: &PanelDataset) -> Result<()> {
        let n = panel.n_rows();
        let np = self.post_rows.len();
        if self.post_rows != panel.post_rows() {
            return Err(AdtError::InvalidInput("bundle post rows do not match the panel".into()));
        }
        if self.mu0.len() != n || self.pi_b.len() != n {
            return Err(AdtError::InvalidInput("bundle row arrays have the wrong length".into()));
        }
        if [&self.mu1, &self.gps, &self.m_at_dose, &self.f_at_dose]
            .iter()
            .any(|v| v.len() != np)
        {
            return Err(AdtError::InvalidInput("bundle post arrays have the wrong length".into()));
        }
        if self.m_curve.len() != self.grid.len() || self.f_curve.len() != self.grid.len() {
            return Err(AdtError::InvalidInput("bundle curves do not match the grid".into()));
        }
        let all = [&self.mu0, &self.pi_b, &self.mu1, &self.gps, &self.m_curve, &self.f_curve];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(AdtError::Numerical("non-finite nuisance value".into()));
        }
        if self.pi_b.iter().any(|&p| !(PI_B_LOWER..=PI_B_UPPER).contains(&p)) {
            return Err(AdtError::InvalidInput("π_B outside its clipping bounds".into()));
        }
        if self.gps.iter().chain(&self.f_curve).chain(&self.f_at_dose).any(|&p| p < DENSITY_FLOOR) {
            return Err(AdtError::InvalidInput("density below its positivity floor".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| AdtError::InvalidInput(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| AdtError::InvalidInput(e.to_string()))
    }
}

/// Result of a full nuisance fit: the evaluated bundle plus the learner
/// settings after tuning, reusable to refit without re-tuning.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub bundle: NuisanceBundle,
    pub resolved: NuisanceConfig,
}

/// Fit every nuisance function. `fold_map` defaults to a fresh site split;
/// pass the point-estimate map to reuse it.
pub fn fit_nuisances(ctx: &FitContext, cfg: &NuisanceConfig, fold_map: Option<&[usize]>) -> Result<NuisanceFit> {
    cfg.validate()?;
    let panel = ctx.panel;
    if let Some(w) = ctx.weights {
        if w.len() != panel.n_rows() {
            return Err(AdtError::InvalidInput("row weight length mismatch".into()));
        }
    }
    let roles = cfg.roles(panel)?;
    let fold_map = match fold_map {
        Some(f) => {
            if f.len() != panel.n_sites() || f.iter().any(|&k| k >= cfg.folds) {
                return Err(AdtError::InvalidInput("fold map does not match the panel".into()));
            }
            f.to_vec()
        }
        None => assign_folds(panel.n_sites(), cfg.folds, ctx.seed)?,
    };
    let grid = cfg.dose_grid();
    let post = panel.post_rows();

    let (mu0, mu0_l) = fit_mu0(ctx, &cfg.mu0, &roles.mu0)?;
    let (pi_b, pi_b_l) = fit_pi_b(ctx, &cfg.pi_b, &roles.pi_b)?;
    let mu1_cf = fit_mu1_crossfit(ctx, &cfg.mu1, &roles.mu1, &fold_map, cfg.folds)?;
    let mu1 = mu1_cf.predict_rows(panel, &post, None)?;
    let m_curve = marginalize_m(&mu1_cf, ctx, &grid)?;
    let gps_cf = fit_gps_crossfit(ctx, &cfg.dose_mean, &cfg.dose_scale, &roles.pi_d, &fold_map, cfg.folds)?;
    let params = gps_cf.row_params(panel, &post)?;
    let gps = gps_cf.density_at_observed(panel, &params);
    let f_curve = marginalize_f(&gps_cf, &params, ctx, &grid);

    let m_at_dose = post.iter().map(|&r| stats::interp_clamped(&grid, &m_curve, panel.row_dose(r))).collect();
    let f_at_dose = post
        .iter()
        .map(|&r| stats::interp_clamped(&grid, &f_curve, panel.row_dose(r)).max(DENSITY_FLOOR))
        .collect();

    let mut resolved = cfg.clone();
    resolved.mu0 = mu0_l;
    resolved.pi_b = pi_b_l;
    resolved.mu1 = mu1_cf.learner.clone();
    resolved.dose_mean = gps_cf.mean_learner.clone();
    resolved.dose_scale = gps_cf.scale_learner.clone();
    resolved.outcome_features = Some(roles.mu0.clone());
    resolved.pi_b_features = Some(roles.pi_b.clone());
    resolved.pi_d_features = Some(roles.pi_d.clone());

    let bundle = NuisanceBundle {
        post_rows: post,
        mu0,
        pi_b,
        mu1,
        gps,
        grid,
        m_curve,
        f_curve,
        m_at_dose,
        f_at_dose,
        fold_map,
        features: roles,
    };
    Ok(NuisanceFit { bundle, resolved })
}
