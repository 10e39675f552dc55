//! Random-forest regressor / probability classifier.
//!
//! CART-style axis-aligned trees on histogram-binned features, grown on
//! Poisson(1) bootstrap counts and per-node feature subsampling. Observation
//! weights multiply the bootstrap counts in every split criterion and leaf
//! value. Categoricals with at most [`ONE_VS_REST_MAX_LEVELS`] levels are
//! split one level against the rest; larger ones are target-encoded per tree
//! from in-bag rows and split as ordered values.
//!
//! Bootstrap counts are keyed by row identity (or by a caller-provided bag
//! key), so a fit does not depend on row order or on the number of worker
//! threads.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AdtError, Result};
use crate::frame::{Column, FeatureFrame};
use crate::learner::{FitOptions, Fitted, Learner, Task};
use crate::rng::{derive_seed, keyed_poisson1, substream};
use crate::tuning::{tune_mtry, TuningPolicy};

pub const ONE_VS_REST_MAX_LEVELS: u32 = 32;

/// `mtry` as written in configuration: an integer, `"auto"` (⌊√p⌋) or `"tune"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Mtry {
    Fixed(usize),
    Keyword(MtryKeyword),
}

impl Default for Mtry {
    fn default() -> Self {
        Mtry::Keyword(MtryKeyword::Auto)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtryKeyword {
    Auto,
    Tune,
}

impl Mtry {
    fn is_tune(&self) -> bool {
        matches!(self, Mtry::Keyword(MtryKeyword::Tune))
    }
}

fn default_trees() -> usize {
    500
}
fn default_bins() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    #[serde(default = "default_trees")]
    pub num_trees: usize,
    /// Minimal node size to attempt a split; defaults to 5 for regression and
    /// 10 for classification.
    #[serde(default)]
    pub min_node_size: Option<usize>,
    #[serde(default)]
    pub mtry: Mtry,
    #[serde(default)]
    pub tuning_policy: Option<TuningPolicy>,
    #[serde(default)]
    pub max_depth: Option<usize>,
    #[serde(default = "default_bins")]
    pub max_bins: usize,
    /// Trees per candidate fit while tuning `mtry`; defaults to `num_trees`.
    #[serde(default)]
    pub tuning_trees: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            num_trees: default_trees(),
            min_node_size: None,
            mtry: Mtry::default(),
            tuning_policy: None,
            max_depth: None,
            max_bins: default_bins(),
            tuning_trees: None,
        }
    }
}

impl ForestParams {
    pub fn with_trees(mut self, n: usize) -> Self {
        self.num_trees = n;
        self
    }

    pub fn with_mtry(mut self, m: usize) -> Self {
        self.mtry = Mtry::Fixed(m);
        self
    }

    pub fn with_min_node_size(mut self, n: usize) -> Self {
        self.min_node_size = Some(n);
        self
    }

    pub fn min_node_size_for(&self, task: Task) -> usize {
        self.min_node_size.unwrap_or(match task {
            Task::Regression => 5,
            Task::Classification => 10,
        })
    }

    /// Concrete `mtry` for `p` features (tuned values must be resolved first).
    pub fn mtry_for(&self, p: usize) -> usize {
        match self.mtry {
            Mtry::Fixed(m) => m.clamp(1, p.max(1)),
            _ => ((p as f64).sqrt().floor() as usize).clamp(1, p.max(1)),
        }
    }

    /// Replace `mtry = "tune"` by the value selected under the tuning policy.
    pub fn resolve(&self, x: &FeatureFrame, y: &[f64], opts: &FitOptions) -> Result<ForestParams> {
        if !self.mtry.is_tune() {
            return Ok(self.clone());
        }
        let policy = self.tuning_policy.ok_or_else(|| {
            AdtError::Config("mtry = \"tune\" requires a tuning_policy".into())
        })?;
        let m = tune_mtry(self, x, y, opts, policy)?;
        let mut out = self.clone();
        out.mtry = Mtry::Fixed(m);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
enum FeatureKind {
    /// Split candidates `x <= edges[b]`.
    Numeric { edges: Vec<f64> },
    SmallCategorical { n_levels: u32 },
    LargeCategorical { n_levels: u32 },
}

#[derive(Debug, Clone)]
struct Binned {
    kinds: Vec<FeatureKind>,
    /// Per feature, per row: bin index (numeric) or level code (categorical).
    codes: Vec<Vec<u16>>,
}

fn numeric_edges(values: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut uniq = sorted.clone();
    uniq.dedup();
    if uniq.len() <= max_bins {
        return uniq;
    }
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..=max_bins)
        .map(|k| sorted[((k * n + max_bins - 1) / max_bins).clamp(1, n) - 1])
        .collect();
    edges.dedup();
    edges
}

#[inline]
fn bin_of(edges: &[f64], x: f64) -> u16 {
    edges.partition_point(|&e| e < x).min(edges.len() - 1) as u16
}

fn bin_frame(x: &FeatureFrame, max_bins: usize) -> Result<Binned> {
    let max_bins = max_bins.clamp(2, u16::MAX as usize);
    let mut kinds = Vec::with_capacity(x.n_features());
    let mut codes = Vec::with_capacity(x.n_features());
    for k in 0..x.n_features() {
        match x.column(k) {
            Column::Numeric(v) => {
                let edges = numeric_edges(v, max_bins);
                codes.push(v.iter().map(|&xi| bin_of(&edges, xi)).collect());
                kinds.push(FeatureKind::Numeric { edges });
            }
            Column::Categorical { codes: c, n_levels } => {
                if *n_levels > u16::MAX as u32 {
                    return Err(AdtError::Learner("too many categorical levels".into()));
                }
                codes.push(c.iter().map(|&v| v as u16).collect());
                kinds.push(if *n_levels <= ONE_VS_REST_MAX_LEVELS {
                    FeatureKind::SmallCategorical { n_levels: *n_levels }
                } else {
                    FeatureKind::LargeCategorical { n_levels: *n_levels }
                });
            }
        }
    }
    Ok(Binned { kinds, codes })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
enum Rule {
    LessEq(f64),
    Equals(u32),
    /// Compare the tree's encoding of a large categorical against a threshold.
    EncodedLessEq(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: u32,
        rule: Rule,
        left: u32,
        right: u32,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
    /// Per-feature target encoding (large categoricals only) and its default.
    encodings: Vec<Option<(Vec<f64>, f64)>>,
}

impl Tree {
    /// Traverse using the training-time binned codes.
    fn leaf_for_codes(&self, codes: &[Vec<u16>], row: usize, kinds: &[FeatureKind]) -> f64 {
        let mut node = 0usize;
        loop {
            match &self.nodes[node] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    rule,
                    left,
                    right,
                } => {
                    let f = *feature as usize;
                    let go_left = match (rule, &kinds[f]) {
                        (Rule::LessEq(thr), FeatureKind::Numeric { edges }) => {
                            edges[codes[f][row] as usize] <= *thr
                        }
                        (Rule::Equals(level), _) => codes[f][row] as u32 == *level,
                        (Rule::EncodedLessEq(thr), _) => {
                            let (enc, _) = self.encodings[f].as_ref().expect("encoding");
                            enc[codes[f][row] as usize] <= *thr
                        }
                        _ => unreachable!("rule/feature mismatch"),
                    };
                    node = if go_left { *left } else { *right } as usize;
                }
            }
        }
    }

    fn leaf_for_values(&self, cols: &[&Column], row: usize) -> f64 {
        let mut node = 0usize;
        loop {
            match &self.nodes[node] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    rule,
                    left,
                    right,
                } => {
                    let f = *feature as usize;
                    let go_left = match (rule, cols[f]) {
                        (Rule::LessEq(thr), Column::Numeric(v)) => v[row] <= *thr,
                        (Rule::Equals(level), Column::Categorical { codes, .. }) => {
                            codes[row] == *level
                        }
                        (Rule::EncodedLessEq(thr), Column::Categorical { codes, .. }) => {
                            let (enc, default) = self.encodings[f].as_ref().expect("encoding");
                            let e = enc.get(codes[row] as usize).copied().unwrap_or(*default);
                            e <= *thr
                        }
                        _ => unreachable!("column kind validated at predict time"),
                    };
                    node = if go_left { *left } else { *right } as usize;
                }
            }
        }
    }
}

struct GrowContext<'a> {
    binned: &'a Binned,
    y: &'a [f64],
    /// count × observation weight per row
    weight: Vec<f64>,
    count: Vec<u32>,
    mtry: usize,
    min_node_size: usize,
    max_depth: usize,
}

#[derive(Default)]
struct Hist {
    w: Vec<f64>,
    s: Vec<f64>,
    c: Vec<u32>,
}

impl Hist {
    fn reset(&mut self, n: usize) {
        self.w.clear();
        self.w.resize(n, 0.0);
        self.s.clear();
        self.s.resize(n, 0.0);
        self.c.clear();
        self.c.resize(n, 0);
    }
}

fn grow_tree(ctx: &GrowContext, tree_seed: u64) -> Tree {
    let binned = ctx.binned;
    let p = binned.kinds.len();
    let mut rng = substream(tree_seed, &[1]);

    let mut idx: Vec<u32> = (0..ctx.y.len() as u32)
        .filter(|&i| ctx.weight[i as usize] > 0.0)
        .collect();

    // per-tree target encodings and ordered codes for large categoricals
    let mut encodings: Vec<Option<(Vec<f64>, f64)>> = vec![None; p];
    let mut enc_edges: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut enc_codes: Vec<Vec<u16>> = vec![Vec::new(); p];
    let (tw, ts) = idx.iter().fold((0.0, 0.0), |(w, s), &i| {
        let i = i as usize;
        (w + ctx.weight[i], s + ctx.weight[i] * ctx.y[i])
    });
    let global_mean = if tw > 0.0 { ts / tw } else { 0.0 };
    for f in 0..p {
        if let FeatureKind::LargeCategorical { n_levels } = binned.kinds[f] {
            let mut sw = vec![0.0; n_levels as usize];
            let mut ss = vec![0.0; n_levels as usize];
            for &i in &idx {
                let i = i as usize;
                let l = binned.codes[f][i] as usize;
                sw[l] += ctx.weight[i];
                ss[l] += ctx.weight[i] * ctx.y[i];
            }
            let enc: Vec<f64> = sw
                .iter()
                .zip(&ss)
                .map(|(w, s)| if *w > 0.0 { s / w } else { global_mean })
                .collect();
            let edges = numeric_edges(&enc, 64);
            enc_codes[f] = binned.codes[f]
                .iter()
                .map(|&l| bin_of(&edges, enc[l as usize]))
                .collect();
            enc_edges[f] = edges;
            encodings[f] = Some((enc, global_mean));
        }
    }

    let mut nodes: Vec<Node> = Vec::new();
    if idx.is_empty() {
        nodes.push(Node::Leaf(0.0));
        return Tree { nodes, encodings };
    }
    nodes.push(Node::Leaf(0.0));
    let mut stack: Vec<(usize, usize, usize, usize)> = vec![(0, 0, idx.len(), 0)];
    let mut hist = Hist::default();

    while let Some((node_id, start, end, depth)) = stack.pop() {
        let rows = &idx[start..end];
        let mut w_tot = 0.0;
        let mut s_tot = 0.0;
        let mut c_tot = 0u32;
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for &i in rows {
            let i = i as usize;
            w_tot += ctx.weight[i];
            s_tot += ctx.weight[i] * ctx.y[i];
            c_tot += ctx.count[i];
            y_min = y_min.min(ctx.y[i]);
            y_max = y_max.max(ctx.y[i]);
        }
        let leaf_value = s_tot / w_tot;
        nodes[node_id] = Node::Leaf(leaf_value);
        if (c_tot as usize) < ctx.min_node_size || depth >= ctx.max_depth || y_max <= y_min {
            continue;
        }
        let parent_score = s_tot * s_tot / w_tot;

        let mut best: Option<(f64, usize, Rule, u16, bool)> = None; // gain, feature, rule, code, is_equals
        let candidates = sample(&mut rng, p, ctx.mtry.min(p));
        for f in candidates.iter() {
            let (n_bins, codes): (usize, &[u16]) = match &binned.kinds[f] {
                FeatureKind::Numeric { edges } => (edges.len(), &binned.codes[f]),
                FeatureKind::SmallCategorical { n_levels } => (*n_levels as usize, &binned.codes[f]),
                FeatureKind::LargeCategorical { .. } => (enc_edges[f].len(), &enc_codes[f]),
            };
            if n_bins < 2 {
                continue;
            }
            hist.reset(n_bins);
            for &i in rows {
                let i = i as usize;
                let b = codes[i] as usize;
                hist.w[b] += ctx.weight[i];
                hist.s[b] += ctx.weight[i] * ctx.y[i];
                hist.c[b] += ctx.count[i];
            }
            match &binned.kinds[f] {
                FeatureKind::SmallCategorical { .. } => {
                    for b in 0..n_bins {
                        let (wl, sl, cl) = (hist.w[b], hist.s[b], hist.c[b]);
                        let wr = w_tot - wl;
                        let cr = c_tot - cl;
                        if cl == 0 || cr == 0 || wl <= 0.0 || wr <= 1e-300 {
                            continue;
                        }
                        let sr = s_tot - sl;
                        let gain = sl * sl / wl + sr * sr / wr - parent_score;
                        if best.as_ref().map_or(true, |bst| gain > bst.0) {
                            best = Some((gain, f, Rule::Equals(b as u32), b as u16, true));
                        }
                    }
                }
                _ => {
                    let (mut wl, mut sl, mut cl) = (0.0, 0.0, 0u32);
                    for b in 0..n_bins - 1 {
                        wl += hist.w[b];
                        sl += hist.s[b];
                        cl += hist.c[b];
                        if hist.c[b] == 0 {
                            continue;
                        }
                        let wr = w_tot - wl;
                        let cr = c_tot - cl;
                        if cl == 0 || cr == 0 || wl <= 0.0 || wr <= 1e-300 {
                            continue;
                        }
                        let sr = s_tot - sl;
                        let gain = sl * sl / wl + sr * sr / wr - parent_score;
                        if best.as_ref().map_or(true, |bst| gain > bst.0) {
                            let thr = match &binned.kinds[f] {
                                FeatureKind::Numeric { edges } => Rule::LessEq(edges[b]),
                                _ => Rule::EncodedLessEq(enc_edges[f][b]),
                            };
                            best = Some((gain, f, thr, b as u16, false));
                        }
                    }
                }
            }
        }

        let Some((gain, f, rule, code, is_equals)) = best else {
            continue;
        };
        if !(gain > 1e-12 * parent_score.abs().max(1e-300)) {
            continue;
        }
        let codes: &[u16] = match binned.kinds[f] {
            FeatureKind::LargeCategorical { .. } => &enc_codes[f],
            _ => &binned.codes[f],
        };
        // in-place partition: left rows first
        let slice = &mut idx[start..end];
        let mut mid = 0;
        for k in 0..slice.len() {
            let c = codes[slice[k] as usize];
            let left = if is_equals { c == code } else { c <= code };
            if left {
                slice.swap(k, mid);
                mid += 1;
            }
        }
        if mid == 0 || mid == slice.len() {
            continue;
        }
        let left_id = nodes.len();
        nodes.push(Node::Leaf(0.0));
        nodes.push(Node::Leaf(0.0));
        nodes[node_id] = Node::Split {
            feature: f as u32,
            rule,
            left: left_id as u32,
            right: left_id as u32 + 1,
        };
        stack.push((left_id + 1, start + mid, end, depth + 1));
        stack.push((left_id, start, start + mid, depth + 1));
    }
    Tree { nodes, encodings }
}

#[derive(Debug, Clone)]
pub struct RandomForest {
    params: ForestParams,
}

impl RandomForest {
    pub fn new(params: ForestParams) -> Self {
        RandomForest { params }
    }
}

/// A fitted forest: predictions are tree averages.
#[derive(Debug, Clone)]
pub struct FittedForest {
    names: Vec<String>,
    kinds: Vec<bool>, // true if categorical
    trees: Vec<Tree>,
    oob: Option<Vec<f64>>,
    task: Task,
    mtry: usize,
}

impl FittedForest {
    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn mtry(&self) -> usize {
        self.mtry
    }

    pub fn task(&self) -> Task {
        self.task
    }
}

impl RandomForest {
    pub fn fit_forest(&self, x: &FeatureFrame, y: &[f64], opts: &FitOptions) -> Result<FittedForest> {
        let n = x.n_rows();
        if n == 0 || x.n_features() == 0 {
            return Err(AdtError::Learner("empty training data".into()));
        }
        if y.len() != n {
            return Err(AdtError::Learner("feature/target length mismatch".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(AdtError::Learner("non-finite target".into()));
        }
        if self.params.num_trees == 0 {
            return Err(AdtError::Config("num_trees must be at least 1".into()));
        }
        let p = x.n_features();
        let mtry = match self.params.mtry {
            Mtry::Fixed(m) if m == 0 || m > p => {
                return Err(AdtError::Config(format!("mtry={m} outside 1..={p}")))
            }
            Mtry::Keyword(MtryKeyword::Tune) => {
                return Err(AdtError::Config("mtry must be resolved before fitting".into()))
            }
            _ => self.params.mtry_for(p),
        };
        if opts.task == Task::Classification {
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(AdtError::Learner("classification targets must be 0/1".into()));
            }
            if y.iter().all(|&v| v == y[0]) {
                return Err(AdtError::Learner(
                    "classification target is constant (single class)".into(),
                ));
            }
        }
        let obs_w: Vec<f64> = match opts.weights {
            Some(w) => {
                if w.len() != n {
                    return Err(AdtError::Learner("weight length mismatch".into()));
                }
                if w.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                    return Err(AdtError::Learner("weights must be finite and nonnegative".into()));
                }
                if w.iter().all(|v| *v == 0.0) {
                    return Err(AdtError::Learner("all weights are zero".into()));
                }
                w.to_vec()
            }
            None => vec![1.0; n],
        };
        let bag_keys: Vec<u64> = match opts.bag_keys {
            Some(k) if k.len() == n => k.to_vec(),
            Some(_) => return Err(AdtError::Learner("bag key length mismatch".into())),
            None => (0..n as u64).collect(),
        };

        let binned = bin_frame(x, self.params.max_bins)?;
        let min_node_size = self.params.min_node_size_for(opts.task);
        let max_depth = self.params.max_depth.unwrap_or(usize::MAX);

        let results: Vec<(Tree, Vec<u32>)> = (0..self.params.num_trees)
            .into_par_iter()
            .map(|k| {
                let tree_seed = derive_seed(opts.seed, &[k as u64]);
                let count: Vec<u32> = bag_keys
                    .iter()
                    .map(|&key| keyed_poisson1(tree_seed, key))
                    .collect();
                let weight: Vec<f64> = count
                    .iter()
                    .zip(&obs_w)
                    .map(|(&c, &w)| c as f64 * w)
                    .collect();
                let ctx = GrowContext {
                    binned: &binned,
                    y,
                    weight,
                    count,
                    mtry,
                    min_node_size,
                    max_depth,
                };
                let tree = grow_tree(&ctx, tree_seed);
                (tree, ctx.count)
            })
            .collect();

        let mut oob_sum = vec![0.0; n];
        let mut oob_n = vec![0u32; n];
        for (tree, count) in &results {
            for i in 0..n {
                if count[i] == 0 {
                    oob_sum[i] += tree.leaf_for_codes(&binned.codes, i, &binned.kinds);
                    oob_n[i] += 1;
                }
            }
        }
        let trees: Vec<Tree> = results.into_iter().map(|(t, _)| t).collect();
        let kinds: Vec<bool> = (0..p).map(|k| x.column(k).is_categorical()).collect();
        let mut fitted = FittedForest {
            names: x.names().to_vec(),
            kinds,
            trees,
            oob: None,
            task: opts.task,
            mtry,
        };
        // rows never out of bag fall back to the full-forest prediction
        let full = fitted.predict(x)?;
        let oob = (0..n)
            .map(|i| {
                if oob_n[i] > 0 {
                    oob_sum[i] / oob_n[i] as f64
                } else {
                    full[i]
                }
            })
            .collect();
        fitted.oob = Some(oob);
        Ok(fitted)
    }
}

impl Learner for RandomForest {
    fn fit(&self, x: &FeatureFrame, y: &[f64], opts: &FitOptions) -> Result<Box<dyn Fitted>> {
        Ok(Box::new(self.fit_forest(x, y, opts)?))
    }
}

impl Fitted for FittedForest {
    fn predict(&self, x: &FeatureFrame) -> Result<Vec<f64>> {
        let cols = self
            .names
            .iter()
            .zip(&self.kinds)
            .map(|(name, &cat)| {
                let k = x
                    .position(name)
                    .ok_or_else(|| AdtError::Learner(format!("missing feature `{name}` at predict time")))?;
                let c = x.column(k);
                if c.is_categorical() != cat {
                    return Err(AdtError::Learner(format!("feature `{name}` changed kind")));
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = x.n_rows();
        let mut out = vec![0.0; n];
        for tree in &self.trees {
            for (i, o) in out.iter_mut().enumerate() {
                *o += tree.leaf_for_values(&cols, i);
            }
        }
        let k = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        Ok(out)
    }

    fn oob_predictions(&self) -> Option<&[f64]> {
        self.oob.as_deref()
    }

    fn feature_names(&self) -> &[String] {
        &self.names
    }
}
