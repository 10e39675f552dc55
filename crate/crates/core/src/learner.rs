//! Pluggable learner interface used for every nuisance model, plus the
//! linear least-squares learner used when the outcome models' functional
//! form is known.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AdtError, Result};
use crate::forest::{ForestParams, RandomForest};
use crate::frame::{Column, FeatureFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// Per-fit inputs beyond the feature table and targets.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions<'a> {
    pub task: Task,
    /// Nonnegative observation weights; `None` means unit weights.
    pub weights: Option<&'a [f64]>,
    pub seed: u64,
    /// Identity used for bagging draws. Rows sharing a key are drawn
    /// together, so passing site ids yields a site-level bootstrap.
    pub bag_keys: Option<&'a [u64]>,
    /// Group labels for grouped cross-validation during tuning.
    pub groups: Option<&'a [u64]>,
    /// Month index per row, for temporal tuning splits.
    pub times: Option<&'a [u32]>,
}

impl<'a> FitOptions<'a> {
    pub fn new(task: Task, seed: u64) -> Self {
        FitOptions {
            task,
            weights: None,
            seed,
            bag_keys: None,
            groups: None,
            times: None,
        }
    }

    pub fn with_weights(mut self, w: Option<&'a [f64]>) -> Self {
        self.weights = w;
        self
    }

    pub fn with_bag_keys(mut self, keys: Option<&'a [u64]>) -> Self {
        self.bag_keys = keys;
        self
    }

    pub fn with_groups(mut self, g: Option<&'a [u64]>) -> Self {
        self.groups = g;
        self
    }

    pub fn with_times(mut self, t: Option<&'a [u32]>) -> Self {
        self.times = t;
        self
    }
}

/// A fitted model.
pub trait Fitted: Send + Sync + Debug {
    fn predict(&self, x: &FeatureFrame) -> Result<Vec<f64>>;

    /// Out-of-bag predictions for the training rows, when the learner
    /// produces them.
    fn oob_predictions(&self) -> Option<&[f64]> {
        None
    }

    fn feature_names(&self) -> &[String];
}

pub trait Learner: Send + Sync {
    fn fit(&self, x: &FeatureFrame, y: &[f64], opts: &FitOptions) -> Result<Box<dyn Fitted>>;
}

/// Learner choice as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerConfig {
    Forest(ForestParams),
    Linear(LinearParams),
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig::Forest(ForestParams::default())
    }
}

impl LearnerConfig {
    /// Resolve any tuned hyperparameters against the training data, returning
    /// a configuration that fits without further tuning.
    pub fn resolve(&self, x: &FeatureFrame, y: &[f64], opts: &FitOptions) -> Result<LearnerConfig> {
        match self {
            LearnerConfig::Forest(p) => Ok(LearnerConfig::Forest(p.resolve(x, y, opts)?)),
            LearnerConfig::Linear(_) => Ok(self.clone()),
        }
    }

    pub fn fit(&self, x: &FeatureFrame, y: &[f64], opts: &FitOptions) -> Result<Box<dyn Fitted>> {
        match self {
            LearnerConfig::Forest(p) => RandomForest::new(p.clone()).fit(x, y, opts),
            LearnerConfig::Linear(p) => LinearLearner::new(p.clone()).fit(x, y, opts),
        }
    }

    /// True when fitting would run hyperparameter tuning first.
    pub fn is_tuned(&self) -> bool {
        matches!(self, LearnerConfig::Forest(p) if p.mtry == crate::forest::Mtry::Keyword(crate::forest::MtryKeyword::Tune))
    }

    /// Features referenced by the learner beyond the role list, if any.
    pub fn required_features(&self) -> Vec<String> {
        match self {
            LearnerConfig::Forest(_) => Vec::new(),
            LearnerConfig::Linear(p) => p.features(),
        }
    }
}

/// Linear model over products of features. `terms = ["temp", "temp*pop"]`
/// gives `b0 + b1 temp + b2 temp*pop`. A categorical feature may only
/// appear alone and expands to treatment-coded dummies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearParams {
    pub terms: Vec<String>,
}

impl LinearParams {
    pub fn new(terms: &[&str]) -> Self {
        LinearParams {
            terms: terms.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn parsed(&self) -> Vec<Vec<String>> {
        self.terms
            .iter()
            .map(|t| t.split('*').map(|f| f.trim().to_string()).collect())
            .collect()
    }

    pub fn features(&self) -> Vec<String> {
        let mut out: Vec<String> = self.parsed().into_iter().flatten().collect();
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone)]
pub struct LinearLearner {
    params: LinearParams,
}

impl LinearLearner {
    pub fn new(params: LinearParams) -> Self {
        LinearLearner { params }
    }
}

#[derive(Debug, Clone)]
enum DesignTerm {
    Product(Vec<usize>),
    Dummy { feature: usize, level: u32 },
}

#[derive(Debug, Clone)]
pub struct FittedLinear {
    names: Vec<String>,
    terms: Vec<Vec<String>>,
    design: Vec<DesignTerm>,
    coef: Vec<f64>,
}

impl FittedLinear {
    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }
}

fn build_terms(terms: &[Vec<String>], x: &FeatureFrame) -> Result<Vec<DesignTerm>> {
    let mut out = Vec::new();
    for term in terms {
        let idx = term
            .iter()
            .map(|f| {
                x.position(f)
                    .ok_or_else(|| AdtError::Learner(format!("linear term uses unknown feature `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if idx.iter().any(|&k| x.column(k).is_categorical()) {
            if idx.len() != 1 {
                return Err(AdtError::Learner(format!(
                    "categorical feature in interaction `{}`",
                    term.join("*")
                )));
            }
            if let Column::Categorical { n_levels, .. } = x.column(idx[0]) {
                for level in 1..*n_levels {
                    out.push(DesignTerm::Dummy {
                        feature: idx[0],
                        level,
                    });
                }
            }
        } else {
            out.push(DesignTerm::Product(idx));
        }
    }
    Ok(out)
}

fn design_matrix(design: &[DesignTerm], x: &FeatureFrame) -> DMatrix<f64> {
    let n = x.n_rows();
    let mut m = DMatrix::<f64>::zeros(n, design.len() + 1);
    for i in 0..n {
        m[(i, 0)] = 1.0;
    }
    for (j, term) in design.iter().enumerate() {
        match term {
            DesignTerm::Product(idx) => {
                for i in 0..n {
                    let mut v = 1.0;
                    for &k in idx {
                        if let Column::Numeric(col) = x.column(k) {
                            v *= col[i];
                        }
                    }
                    m[(i, j + 1)] = v;
                }
            }
            DesignTerm::Dummy { feature, level } => {
                if let Column::Categorical { codes, .. } = x.column(*feature) {
                    for i in 0..n {
                        m[(i, j + 1)] = if codes[i] == *level { 1.0 } else { 0.0 };
                    }
                }
            }
        }
    }
    m
}

impl Learner for LinearLearner {
    fn fit(&self, x: &FeatureFrame, y: &[f64], opts: &FitOptions) -> Result<Box<dyn Fitted>> {
        if opts.task != Task::Regression {
            return Err(AdtError::Learner("linear learner supports regression only".into()));
        }
        if x.n_rows() == 0 || x.n_rows() != y.len() {
            return Err(AdtError::Learner("empty or mismatched training data".into()));
        }
        let terms = self.params.parsed();
        let design = build_terms(&terms, x)?;
        let mut a = design_matrix(&design, x);
        let mut b = DVector::from_column_slice(y);
        if let Some(w) = opts.weights {
            if w.len() != y.len() {
                return Err(AdtError::Learner("weight length mismatch".into()));
            }
            for (i, &wi) in w.iter().enumerate() {
                if wi < 0.0 || !wi.is_finite() {
                    return Err(AdtError::Learner("weights must be finite and nonnegative".into()));
                }
                let s = wi.sqrt();
                a.row_mut(i).scale_mut(s);
                b[i] *= s;
            }
        }
        // column scaling keeps the SVD tolerance meaningful across units
        let scales: Vec<f64> = (0..a.ncols())
            .map(|j| {
                let n = a.column(j).norm();
                if n > 0.0 {
                    n
                } else {
                    1.0
                }
            })
            .collect();
        for (j, s) in scales.iter().enumerate() {
            a.column_mut(j).scale_mut(1.0 / s);
        }
        let svd = a.svd(true, true);
        let max_sv = svd.singular_values.max();
        let beta = svd
            .solve(&b, 1e-10 * max_sv)
            .map_err(|e| AdtError::Numerical(format!("least squares failed: {e}")))?;
        let coef = beta
            .iter()
            .zip(&scales)
            .map(|(b, s)| b / s)
            .collect::<Vec<_>>();
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(AdtError::Numerical("non-finite regression coefficient".into()));
        }
        Ok(Box::new(FittedLinear {
            names: x.names().to_vec(),
            terms,
            design,
            coef,
        }))
    }
}

impl Fitted for FittedLinear {
    fn predict(&self, x: &FeatureFrame) -> Result<Vec<f64>> {
        let design = if x.names() == self.names.as_slice() {
            self.design.clone()
        } else {
            build_terms(&self.terms, x)?
        };
        let m = design_matrix(&design, x);
        let beta = DVector::from_column_slice(&self.coef);
        Ok((m * beta).iter().copied().collect())
    }

    fn feature_names(&self) -> &[String] {
        &self.names
    }
}
