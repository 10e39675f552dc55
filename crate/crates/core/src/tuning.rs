//! Selection of the forest `mtry` hyperparameter.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{AdtError, Result};
use crate::forest::{ForestParams, RandomForest};
use crate::frame::FeatureFrame;
use crate::learner::{FitOptions, Task};
use crate::rng::{derive_seed, substream};

pub const CV_FOLDS: usize = 5;
const PLATEAU_R2: f64 = 0.01;
const PLATEAU_RMSE: f64 = 0.1;
pub const PROB_LOWER: f64 = 0.001;
pub const PROB_UPPER: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningPolicy {
    /// Smallest mtry past which 5-fold CV gains are negligible.
    Plateau,
    /// As `Plateau`, with folds formed from whole groups (sites).
    SiteFold,
    /// Largest mtry whose CV probabilities stay inside the clipping band.
    ProbBounded,
    /// Mtry minimising the mean prediction bias on the later half of months.
    TemporalBias,
}

/// Cross-validated quality of one candidate `mtry`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub mtry: usize,
    pub r2: f64,
    pub rmse: f64,
    pub min_prob: f64,
    pub max_prob: f64,
    /// |mean(prediction) − mean(y)| on the held-out set.
    pub abs_bias: f64,
}

/// Fold index per row. Groups, when given, are kept whole.
pub fn make_folds(n: usize, k: usize, groups: Option<&[u64]>, seed: u64) -> Vec<usize> {
    let mut rng = substream(seed, &[0x_f01d]);
    match groups {
        Some(g) => {
            let mut uniq: Vec<u64> = g.to_vec();
            uniq.sort_unstable();
            uniq.dedup();
            uniq.shuffle(&mut rng);
            let fold_of: std::collections::HashMap<u64, usize> =
                uniq.iter().enumerate().map(|(i, &gid)| (gid, i % k)).collect();
            g.iter().map(|gid| fold_of[gid]).collect()
        }
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut folds = vec![0; n];
            for (pos, &i) in idx.iter().enumerate() {
                folds[i] = pos % k;
            }
            folds
        }
    }
}

fn weighted_mean(v: &[f64], w: Option<&[f64]>) -> f64 {
    match w {
        Some(w) => {
            let tw: f64 = w.iter().sum();
            v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / tw
        }
        None => v.iter().sum::<f64>() / v.len() as f64,
    }
}

fn subset(v: Option<&[f64]>, rows: &[usize]) -> Option<Vec<f64>> {
    v.map(|v| rows.iter().map(|&i| v[i]).collect())
}

/// Score every candidate with the given train/test partitions.
fn score_candidates(
    params: &ForestParams,
    x: &FeatureFrame,
    y: &[f64],
    opts: &FitOptions,
    splits: &[(Vec<usize>, Vec<usize>)],
) -> Result<Vec<CandidateScore>> {
    let p = x.n_features();
    let mut base = params.clone();
    if let Some(t) = params.tuning_trees {
        base.num_trees = t;
    }
    let mut scores = Vec::with_capacity(p);
    for m in 1..=p {
        let forest = RandomForest::new(base.clone().with_mtry(m));
        let mut pred_all = Vec::new();
        let mut y_all = Vec::new();
        let mut w_all = Vec::new();
        let mut bias_num = 0.0;
        for (f, (train, test)) in splits.iter().enumerate() {
            let xt = x.select_rows(train);
            let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let wt = subset(opts.weights, train);
            let keys: Option<Vec<u64>> = opts.bag_keys.map(|k| train.iter().map(|&i| k[i]).collect());
            let fo = FitOptions::new(opts.task, derive_seed(opts.seed, &[0x7e57, m as u64, f as u64]))
                .with_weights(wt.as_deref())
                .with_bag_keys(keys.as_deref());
            let fitted = forest.fit_forest(&xt, &yt, &fo)?;
            let pred = crate::learner::Fitted::predict(&fitted, &x.select_rows(test))?;
            let ytest: Vec<f64> = test.iter().map(|&i| y[i]).collect();
            let wtest = subset(opts.weights, test);
            bias_num += weighted_mean(&pred, wtest.as_deref()) - weighted_mean(&ytest, wtest.as_deref());
            pred_all.extend(pred);
            y_all.extend(ytest);
            w_all.extend(wtest.unwrap_or_else(|| vec![1.0; test.len()]));
        }
        let tw: f64 = w_all.iter().sum();
        let ybar = y_all.iter().zip(&w_all).map(|(a, b)| a * b).sum::<f64>() / tw;
        let sse: f64 = y_all
            .iter()
            .zip(&pred_all)
            .zip(&w_all)
            .map(|((a, b), w)| w * (a - b).powi(2))
            .sum();
        let sst: f64 = y_all.iter().zip(&w_all).map(|(a, w)| w * (a - ybar).powi(2)).sum();
        let r2 = if sst > 0.0 { 1.0 - sse / sst } else { 1.0 };
        let (min_prob, max_prob) = pred_all
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        scores.push(CandidateScore {
            mtry: m,
            r2,
            rmse: (sse / tw).sqrt(),
            min_prob,
            max_prob,
            abs_bias: (bias_num / splits.len() as f64).abs(),
        });
    }
    Ok(scores)
}

fn kfold_splits(folds: &[usize], k: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..folds.len()).partition(|&i| folds[i] == f);
            (train, test)
        })
        .filter(|(train, test)| !train.is_empty() && !test.is_empty())
        .collect()
}

/// Train on the earlier half of the observed months, test on the later half.
pub fn temporal_split(times: &[u32]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut months: Vec<u32> = times.to_vec();
    months.sort_unstable();
    months.dedup();
    if months.len() < 2 {
        return Err(AdtError::InvalidInput(
            "temporal tuning needs at least two distinct months".into(),
        ));
    }
    let cut = months[months.len() / 2 - 1];
    let (train, test): (Vec<usize>, Vec<usize>) = (0..times.len()).partition(|&i| times[i] <= cut);
    Ok((train, test))
}

/// CV scores for every `mtry` in `1..=p` under `policy`.
pub fn mtry_sweep(
    params: &ForestParams,
    x: &FeatureFrame,
    y: &[f64],
    opts: &FitOptions,
    policy: TuningPolicy,
) -> Result<Vec<CandidateScore>> {
    let n = x.n_rows();
    let splits = match policy {
        TuningPolicy::Plateau | TuningPolicy::ProbBounded => {
            kfold_splits(&make_folds(n, CV_FOLDS, None, opts.seed), CV_FOLDS)
        }
        TuningPolicy::SiteFold => {
            let groups = opts
                .groups
                .ok_or_else(|| AdtError::Config("site_fold tuning requires site ids".into()))?;
            kfold_splits(&make_folds(n, CV_FOLDS, Some(groups), opts.seed), CV_FOLDS)
        }
        TuningPolicy::TemporalBias => {
            let times = opts
                .times
                .ok_or_else(|| AdtError::Config("temporal_bias tuning requires month indices".into()))?;
            vec![temporal_split(times)?]
        }
    };
    if splits.is_empty() {
        return Err(AdtError::InvalidInput("too few rows for cross-validation".into()));
    }
    score_candidates(params, x, y, opts, &splits)
}

/// Apply a policy's selection rule to precomputed scores.
pub fn select_mtry(scores: &[CandidateScore], policy: TuningPolicy) -> usize {
    match policy {
        TuningPolicy::Plateau | TuningPolicy::SiteFold => {
            for (i, s) in scores.iter().enumerate() {
                let later = &scores[i + 1..];
                let best_r2 = later.iter().map(|c| c.r2).fold(f64::NEG_INFINITY, f64::max);
                let best_rmse = later.iter().map(|c| c.rmse).fold(f64::INFINITY, f64::min);
                if later.is_empty() || (best_r2 - s.r2 < PLATEAU_R2 && s.rmse - best_rmse < PLATEAU_RMSE) {
                    return s.mtry;
                }
            }
            scores.last().map_or(1, |s| s.mtry)
        }
        TuningPolicy::ProbBounded => scores
            .iter()
            .rev()
            .find(|s| s.min_prob >= PROB_LOWER && s.max_prob <= PROB_UPPER)
            .map_or_else(
                || {
                    log::warn!("no mtry keeps CV probabilities inside [0.001, 0.99]; using mtry = 1");
                    1
                },
                |s| s.mtry,
            ),
        TuningPolicy::TemporalBias => scores
            .iter()
            .min_by(|a, b| a.abs_bias.total_cmp(&b.abs_bias).then(a.mtry.cmp(&b.mtry)))
            .map_or(1, |s| s.mtry),
    }
}

pub fn tune_mtry(
    params: &ForestParams,
    x: &FeatureFrame,
    y: &[f64],
    opts: &FitOptions,
    policy: TuningPolicy,
) -> Result<usize> {
    if x.n_features() == 1 {
        return Ok(1);
    }
    if policy == TuningPolicy::ProbBounded && opts.task != Task::Classification {
        return Err(AdtError::Config("prob_bounded tuning applies to classifiers only".into()));
    }
    let scores = mtry_sweep(params, x, y, opts, policy)?;
    let m = select_mtry(&scores, policy);
    log::debug!("tuned mtry = {m} under {policy:?}");
    Ok(m)
}
