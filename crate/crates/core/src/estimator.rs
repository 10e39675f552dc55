//! Pseudo-outcome assembly and the dose-effect curve, plus the comparison
//! estimators (outcome regression only, naive) and curve summaries.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{AdtError, Result};
use crate::llkr::{llkr_fit, llkr_predict, Bandwidth, LlkrFit};
use crate::nuisance::{fit_nuisances, FitContext, NuisanceBundle, NuisanceConfig, NuisanceFit};
use crate::panel::PanelDataset;
use crate::stats;

/// Everything needed to produce a point estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    #[serde(default)]
    pub bandwidth: Bandwidth,
}

/// ξ on post-period rows and τ on every row.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcomes {
    pub post_rows: Vec<usize>,
    pub xi: Vec<f64>,
    pub tau: Vec<f64>,
    /// Estimated P(B = 1).
    pub p_post: f64,
    /// Value at which f/π_D was truncated, if truncation is on.
    pub ratio_cap: Option<f64>,
}

/// Dose-effect curve on a grid, with bootstrap draws and pointwise intervals
/// once available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdtCurve {
    pub delta: Vec<f64>,
    pub psi: Vec<f64>,
    pub psi_d: Vec<f64>,
    pub psi_0: f64,
    pub bandwidth: f64,
    pub ci_lo: Option<Vec<f64>>,
    pub ci_hi: Option<Vec<f64>>,
    /// Replicate curves of `psi`, one per successful bootstrap draw.
    pub draws: Vec<Vec<f64>>,
}

impl AdtCurve {
    fn new(delta: Vec<f64>, psi_d: Vec<f64>, psi_0: f64, bandwidth: f64) -> Self {
        let psi = psi_d.iter().map(|v| v - psi_0).collect();
        AdtCurve {
            delta,
            psi,
            psi_d,
            psi_0,
            bandwidth,
            ci_lo: None,
            ci_hi: None,
            draws: Vec::new(),
        }
    }

    /// Attach replicate curves and their 2.5% / 97.5% percentile intervals.
    pub fn set_draws(&mut self, draws: Vec<Vec<f64>>) {
        if draws.is_empty() {
            self.ci_lo = None;
            self.ci_hi = None;
        } else {
            let (lo, hi): (Vec<f64>, Vec<f64>) = (0..self.delta.len())
                .map(|g| {
                    let mut col: Vec<f64> = draws.iter().map(|d| d[g]).collect();
                    col.sort_by(f64::total_cmp);
                    (stats::quantile_sorted(&col, 0.025), stats::quantile_sorted(&col, 0.975))
                })
                .unzip();
            self.ci_lo = Some(lo);
            self.ci_hi = Some(hi);
        }
        self.draws = draws;
    }

    /// Curve value at `d` by linear interpolation on the grid.
    pub fn psi_at(&self, d: f64) -> f64 {
        stats::interp_clamped(&self.delta, &self.psi, d)
    }
}

/// Stabilized ratios f(D)/π_D(D|X) on post rows, truncated at the given
/// upper quantile. Returns the ratios and the cap.
fn stabilized_ratios(bundle: &NuisanceBundle, truncation: Option<f64>) -> (Vec<f64>, Option<f64>) {
    let mut ratio: Vec<f64> = bundle
        .f_at_dose
        .iter()
        .zip(&bundle.gps)
        .map(|(f, p)| f / p)
        .collect();
    let cap = truncation.filter(|&q| q < 1.0).map(|q| stats::quantile(&ratio, q));
    if let Some(c) = cap {
        ratio.iter_mut().for_each(|r| *r = r.min(c));
    }
    (ratio, cap)
}

pub fn compute_pseudo_outcomes(
    panel: &PanelDataset,
    bundle: &NuisanceBundle,
    truncation: Option<f64>,
) -> Result<PseudoOutcomes> {
    bundle.validate(panel)?;
    let p_post = panel.post_fraction();
    let (ratio, ratio_cap) = stabilized_ratios(bundle, truncation);
    let diagnose = |row: usize, detail: String| {
        let o = &panel.observations[row];
        AdtError::NonFinitePseudoOutcome {
            row,
            site: panel.sites[o.site].site_id.clone(),
            t: o.t,
            detail,
        }
    };
    let mut xi = Vec::with_capacity(bundle.post_rows.len());
    for (k, &r) in bundle.post_rows.iter().enumerate() {
        let y = panel.observations[r].y;
        let v = ratio[k] * (y - bundle.mu1[k]) + bundle.m_at_dose[k];
        if !v.is_finite() {
            return Err(diagnose(
                r,
                format!("ratio {} mu1 {} m {}", ratio[k], bundle.mu1[k], bundle.m_at_dose[k]),
            ));
        }
        xi.push(v);
    }
    let mut tau = Vec::with_capacity(panel.n_rows());
    for (r, o) in panel.observations.iter().enumerate() {
        let mu0 = bundle.mu0[r];
        let v = if panel.is_post(r) {
            mu0 / p_post
        } else {
            let p = bundle.pi_b[r];
            p / (1.0 - p) * (o.y - mu0) / p_post
        };
        if !v.is_finite() {
            return Err(diagnose(r, format!("pi_b {} mu0 {mu0}", bundle.pi_b[r])));
        }
        tau.push(v);
    }
    Ok(PseudoOutcomes {
        post_rows: bundle.post_rows.clone(),
        xi,
        tau,
        p_post,
        ratio_cap,
    })
}

fn post_inputs(panel: &PanelDataset, rows: &[usize], weights: Option<&[f64]>) -> (Vec<f64>, Vec<f64>, Vec<u64>) {
    let d = rows.iter().map(|&r| panel.row_dose(r)).collect();
    let w = rows.iter().map(|&r| weights.map_or(1.0, |w| w[r])).collect();
    let s = rows.iter().map(|&r| panel.observations[r].site as u64).collect();
    (d, w, s)
}

/// Ψ̂_D by LLKR of ξ on dose over post rows and Ψ̂_0 as the weighted mean of τ.
pub fn curve_from_pseudo(
    panel: &PanelDataset,
    pseudo: &PseudoOutcomes,
    grid: &[f64],
    weights: Option<&[f64]>,
    bandwidth: Bandwidth,
) -> Result<(AdtCurve, LlkrFit)> {
    let (d, w, s) = post_inputs(panel, &pseudo.post_rows, weights);
    let fit = llkr_fit(&d, &pseudo.xi, &w, &s, bandwidth, grid)?;
    let psi_0 = stats::mean(&pseudo.tau, weights);
    let curve = AdtCurve::new(grid.to_vec(), fit.values.clone(), psi_0, fit.bandwidth);
    Ok((curve, fit))
}

/// Point estimate together with the pieces reused by the bootstrap.
#[derive(Debug, Clone)]
pub struct PointEstimate {
    pub curve: AdtCurve,
    pub pseudo: PseudoOutcomes,
    pub nuisance: NuisanceFit,
    pub llkr: LlkrFit,
}

impl PointEstimate {
    /// ξ − Ψ̂_D(D) on post rows, with Ψ̂_D solved directly at each dose.
    pub fn residuals(&self, panel: &PanelDataset) -> Vec<f64> {
        let mut cache: HashMap<u64, f64> = HashMap::new();
        self.pseudo
            .post_rows
            .iter()
            .zip(&self.pseudo.xi)
            .map(|(&r, xi)| {
                let d = panel.row_dose(r);
                let fitted = *cache.entry(d.to_bits()).or_insert_with(|| llkr_predict(&self.llkr, d));
                xi - fitted
            })
            .collect()
    }

    /// Settings that reproduce this estimate without re-tuning: resolved
    /// learners and the selected bandwidth.
    pub fn frozen_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            nuisance: self.nuisance.resolved.clone(),
            bandwidth: Bandwidth::Fixed(self.curve.bandwidth),
        }
    }
}

/// Full pipeline under the given context: nuisances, pseudo-outcomes, LLKR.
pub fn estimate_with(ctx: &FitContext, cfg: &EstimatorConfig, fold_map: Option<&[usize]>) -> Result<PointEstimate> {
    let nuisance = fit_nuisances(ctx, &cfg.nuisance, fold_map)?;
    let pseudo = compute_pseudo_outcomes(ctx.panel, &nuisance.bundle, cfg.nuisance.ratio_truncation)?;
    let (curve, llkr) = curve_from_pseudo(ctx.panel, &pseudo, &nuisance.bundle.grid, ctx.weights, cfg.bandwidth)?;
    Ok(PointEstimate {
        curve,
        pseudo,
        nuisance,
        llkr,
    })
}

pub fn estimate_adt(panel: &PanelDataset, cfg: &EstimatorConfig, seed: u64) -> Result<PointEstimate> {
    estimate_with(
        &FitContext {
            panel,
            weights: None,
            seed,
        },
        cfg,
        None,
    )
}

/// Curve from a supplied nuisance bundle, for externally estimated or
/// deliberately perturbed nuisances.
pub fn estimate_from_bundle(
    panel: &PanelDataset,
    bundle: &NuisanceBundle,
    truncation: Option<f64>,
    bandwidth: Bandwidth,
) -> Result<AdtCurve> {
    let pseudo = compute_pseudo_outcomes(panel, bundle, truncation)?;
    Ok(curve_from_pseudo(panel, &pseudo, &bundle.grid, None, bandwidth)?.0)
}

/// Outcome-regression-only comparison: LLKR of cross-fitted μ1 at the
/// observed dose, minus the post-row mean of μ0.
pub fn outcome_regression_from_bundle(
    panel: &PanelDataset,
    bundle: &NuisanceBundle,
    bandwidth: Bandwidth,
) -> Result<AdtCurve> {
    bundle.validate(panel)?;
    let (d, w, s) = post_inputs(panel, &bundle.post_rows, None);
    let fit = llkr_fit(&d, &bundle.mu1, &w, &s, bandwidth, &bundle.grid)?;
    let mu0_post: Vec<f64> = bundle.post_rows.iter().map(|&r| bundle.mu0[r]).collect();
    Ok(AdtCurve::new(bundle.grid.clone(), fit.values, stats::mean(&mu0_post, None), fit.bandwidth))
}

pub fn estimate_outcome_regression_only(panel: &PanelDataset, cfg: &EstimatorConfig, seed: u64) -> Result<AdtCurve> {
    let ctx = FitContext {
        panel,
        weights: None,
        seed,
    };
    let fit = fit_nuisances(&ctx, &cfg.nuisance, None)?;
    outcome_regression_from_bundle(panel, &fit.bundle, cfg.bandwidth)
}

/// Naive comparison: LLKR of raw post-period outcomes on dose minus the
/// pre-period mean outcome.
pub fn estimate_naive(panel: &PanelDataset, grid: &[f64], bandwidth: Bandwidth) -> Result<AdtCurve> {
    let post = panel.post_rows();
    let (d, w, s) = post_inputs(panel, &post, None);
    let y: Vec<f64> = post.iter().map(|&r| panel.observations[r].y).collect();
    let fit = llkr_fit(&d, &y, &w, &s, bandwidth, grid)?;
    let pre: Vec<f64> = panel.pre_rows().iter().map(|&r| panel.observations[r].y).collect();
    Ok(AdtCurve::new(grid.to_vec(), fit.values, stats::mean(&pre, None), fit.bandwidth))
}

/// Point estimate on a pseudo-treatment panel: months `[t_a, t_b]` of the
/// pre-period play the post-period, later months are dropped.
pub fn estimate_pretrends(
    panel: &PanelDataset,
    cfg: &EstimatorConfig,
    window: (u32, u32),
    seed: u64,
) -> Result<(PanelDataset, PointEstimate)> {
    let pseudo = panel.pseudo_treatment(window.0, window.1)?;
    let est = estimate_adt(&pseudo, cfg, seed)?;
    Ok((pseudo, est))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    /// Mean of Ψ̂ at the observed site doses.
    pub average_effect: f64,
    /// Same mean restricted to sites whose pointwise interval excludes zero;
    /// `None` without intervals or when no site qualifies.
    pub average_effect_significant_only: Option<f64>,
    pub n_significant_sites: usize,
    /// `average_effect` as a percentage of the pre-period mean outcome.
    pub percent_change: f64,
    /// Restricted mean as a percentage of those sites' pre-period mean.
    pub percent_change_significant_only: Option<f64>,
    pub pre_mean: f64,
}

pub fn summarize_curve(curve: &AdtCurve, panel: &PanelDataset) -> CurveSummary {
    let effects: Vec<f64> = panel.dose.iter().map(|&d| curve.psi_at(d)).collect();
    let average_effect = stats::mean(&effects, None);
    let mut pre_sum = vec![0.0; panel.n_sites()];
    let mut pre_n = vec![0usize; panel.n_sites()];
    for r in panel.pre_rows() {
        let o = &panel.observations[r];
        pre_sum[o.site] += o.y;
        pre_n[o.site] += 1;
    }
    let pre_mean = pre_sum.iter().sum::<f64>() / pre_n.iter().sum::<usize>() as f64;
    let significant: Vec<usize> = match (&curve.ci_lo, &curve.ci_hi) {
        (Some(lo), Some(hi)) => (0..panel.n_sites())
            .filter(|&i| {
                let d = panel.dose[i];
                let l = stats::interp_clamped(&curve.delta, lo, d);
                let h = stats::interp_clamped(&curve.delta, hi, d);
                l > 0.0 || h < 0.0
            })
            .collect(),
        _ => Vec::new(),
    };
    let (sig_avg, sig_pct) = if significant.is_empty() {
        (None, None)
    } else {
        let avg = significant.iter().map(|&i| effects[i]).sum::<f64>() / significant.len() as f64;
        let base = significant.iter().map(|&i| pre_sum[i]).sum::<f64>()
            / significant.iter().map(|&i| pre_n[i]).sum::<usize>() as f64;
        (Some(avg), Some(percent_change(avg, base)))
    };
    CurveSummary {
        average_effect,
        average_effect_significant_only: sig_avg,
        n_significant_sites: significant.len(),
        percent_change: percent_change(average_effect, pre_mean),
        percent_change_significant_only: sig_pct,
        pre_mean,
    }
}

pub fn percent_change(effect: f64, baseline: f64) -> f64 {
    100.0 * effect / baseline
}
