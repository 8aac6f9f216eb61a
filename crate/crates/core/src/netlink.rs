//! Link-existence prediction: a gradient-boosted tree classifier over
//! origin-destination pair features that builds the candidate edge set.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Matrix};
use crate::error::{Error, Result};
use crate::geodata::{CityGraph, Edge, FlowNetwork, NormStats};
use crate::physcore::node_inputs;

/// Above this many ordered pairs, negatives are subsampled to 10× positives.
pub const MAX_FULL_PAIRS: usize = 1_000_000;

/// Pair-feature rows with binary labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkDataset {
    pub feature_names: Vec<String>,
    pub pairs: Vec<Edge>,
    /// Row-major, `pairs.len() × feature_names.len()`.
    pub x: Vec<f64>,
    pub y: Vec<bool>,
}

impl LinkDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let d = self.n_features();
        &self.x[k * d..(k + 1) * d]
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v).count()
    }
}

/// Names of the pair features `[h⁰_i ‖ h⁰_j ‖ D ‖ log(1+D)]`.
pub fn pair_feature_names(stats: &NormStats) -> Vec<String> {
    let node: Vec<String> = stats.names.iter().cloned().chain(["log_population_z".to_string()]).collect();
    node.iter()
        .map(|n| format!("origin.{n}"))
        .chain(node.iter().map(|n| format!("destination.{n}")))
        .chain(["distance_km".to_string(), "log1p_distance_km".to_string()])
        .collect()
}

fn push_pair_features(h0: &Matrix, city: &CityGraph, i: usize, j: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(h0.row(i));
    out.extend_from_slice(h0.row(j));
    let d = city.distance(i, j);
    out.push(d);
    out.push(d.ln_1p());
}

/// Ordered pairs among `regions` labelled by membership in `positives`.
pub fn build_pair_dataset(
    city: &CityGraph,
    stats: &NormStats,
    regions: &BTreeSet<usize>,
    positives: &BTreeSet<Edge>,
    seed: u64,
) -> Result<LinkDataset> {
    if regions.len() < 2 {
        return Err(Error::Invalid(format!(
            "link dataset needs at least 2 observed regions, got {}",
            regions.len()
        )));
    }
    let h0 = node_inputs(city, stats);
    let mut pairs: Vec<Edge> = regions
        .iter()
        .flat_map(|&i| regions.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
        .collect();
    if pairs.len() > MAX_FULL_PAIRS {
        let (pos, neg): (Vec<Edge>, Vec<Edge>) = pairs.into_iter().partition(|e| positives.contains(e));
        let keep = (10 * pos.len()).min(neg.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, neg.len(), keep).into_vec();
        picked.sort_unstable();
        pairs = pos.into_iter().chain(picked.into_iter().map(|k| neg[k])).collect();
        pairs.sort_unstable();
    }
    let names = pair_feature_names(stats);
    let mut x = Vec::with_capacity(pairs.len() * names.len());
    let mut y = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        push_pair_features(&h0, city, i, j, &mut x);
        y.push(positives.contains(&(i, j)));
    }
    Ok(LinkDataset { feature_names: names, pairs, x, y })
}

/// Dataset over every ordered pair inside the observed regions; positives are the observed edges.
pub fn build_link_dataset(city: &CityGraph, stats: &NormStats, obs: &FlowNetwork, seed: u64) -> Result<LinkDataset> {
    build_pair_dataset(city, stats, obs.observed_regions(), obs.observed_edges(), seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub max_bins: usize,
    /// L2 leaf penalty as a fraction of the total sample weight.
    pub lambda: f64,
    /// Minimum child hessian as a fraction of the total sample weight.
    pub min_child_weight: f64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: 6,
            learning_rate: 0.1,
            max_bins: 64,
            lambda: 1e-3,
            min_child_weight: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                TreeNode::Leaf(v) => return *v,
                TreeNode::Split { feature, threshold, left, right } => {
                    k = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// Boosted trees plus the decision threshold `θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkClassifier {
    pub feature_names: Vec<String>,
    pub threshold: f64,
    base_score: f64,
    trees: Vec<Tree>,
}

impl LinkClassifier {
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.base_score + self.trees.iter().map(|t| t.predict(x)).sum::<f64>())
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

/// Per-feature split thresholds: midpoints between consecutive unique values,
/// thinned to quantiles of the unique values when there are too many.
fn bin_thresholds(ds: &LinkDataset, max_bins: usize) -> Vec<Vec<f64>> {
    let d = ds.n_features();
    (0..d)
        .map(|f| {
            let mut u: Vec<f64> = (0..ds.len()).map(|k| ds.row(k)[f]).collect();
            u.sort_by(f64::total_cmp);
            u.dedup();
            if u.len() <= max_bins {
                u.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
            } else {
                let mut t: Vec<f64> = (1..max_bins)
                    .map(|b| {
                        let idx = b * u.len() / max_bins;
                        0.5 * (u[idx - 1] + u[idx])
                    })
                    .collect();
                t.dedup();
                t
            }
        })
        .collect()
}

struct Grower<'a> {
    bins: &'a [Vec<u16>],
    thresholds: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    lambda: f64,
    min_child: f64,
    max_depth: usize,
}

impl Grower<'_> {
    fn grow(&self, rows: Vec<usize>, depth: usize, nodes: &mut Vec<TreeNode>) -> usize {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        let id = nodes.len();
        nodes.push(TreeNode::Leaf(-g / (h + self.lambda)));
        if depth >= self.max_depth || rows.len() < 2 {
            return id;
        }
        let parent = g * g / (h + self.lambda);
        let mut best: Option<(f64, usize, usize)> = None;
        for (f, th) in self.thresholds.iter().enumerate() {
            if th.is_empty() {
                continue;
            }
            let nb = th.len() + 1;
            let mut hg = vec![0.0; nb];
            let mut hh = vec![0.0; nb];
            for &r in &rows {
                let b = self.bins[f][r] as usize;
                hg[b] += self.grad[r];
                hh[b] += self.hess[r];
            }
            let (mut gl, mut hl) = (0.0, 0.0);
            for b in 0..nb - 1 {
                gl += hg[b];
                hl += hh[b];
                let (gr, hr) = (g - gl, h - hl);
                if hl < self.min_child || hr < self.min_child {
                    continue;
                }
                let gain = gl * gl / (hl + self.lambda) + gr * gr / (hr + self.lambda) - parent;
                if gain > 1e-12 * parent.abs().max(1e-300) && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, b));
                }
            }
        }
        let Some((_, f, b)) = best else { return id };
        let (left, right): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&r| (self.bins[f][r] as usize) <= b);
        let l = self.grow(left, depth + 1, nodes);
        let r = self.grow(right, depth + 1, nodes);
        nodes[id] = TreeNode::Split { feature: f, threshold: self.thresholds[f][b], left: l, right: r };
        id
    }
}

/// Logistic-loss boosting with positive class weight `#neg/#pos`.
pub fn train_link_classifier(ds: &LinkDataset, cfg: &GbdtConfig, _seed: u64) -> Result<LinkClassifier> {
    let n = ds.len();
    let pos = ds.positives();
    if pos == 0 || pos == n {
        return Err(Error::Invalid("link classifier needs both positive and negative pairs".into()));
    }
    let w_pos = (n - pos) as f64 / pos as f64;
    let weights: Vec<f64> = ds.y.iter().map(|&y| if y { w_pos } else { 1.0 }).collect();
    let total_w: f64 = weights.iter().sum();
    let wy: f64 = weights.iter().zip(&ds.y).filter(|(_, &y)| y).map(|(w, _)| w).sum();
    let base_score = (wy / (total_w - wy)).ln();

    let thresholds = bin_thresholds(ds, cfg.max_bins);
    let bins: Vec<Vec<u16>> = thresholds
        .iter()
        .enumerate()
        .map(|(f, th)| (0..n).map(|k| th.partition_point(|&t| t < ds.row(k)[f]) as u16).collect())
        .collect();

    let mut score = vec![base_score; n];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for _ in 0..cfg.n_trees {
        for k in 0..n {
            let p = sigmoid(score[k]);
            let y = if ds.y[k] { 1.0 } else { 0.0 };
            grad[k] = weights[k] * (p - y);
            hess[k] = weights[k] * (p * (1.0 - p)).max(1e-16);
        }
        let grower = Grower {
            bins: &bins,
            thresholds: &thresholds,
            grad: &grad,
            hess: &hess,
            lambda: cfg.lambda * total_w,
            min_child: cfg.min_child_weight * total_w,
            max_depth: cfg.max_depth,
        };
        let mut nodes = Vec::new();
        grower.grow((0..n).collect(), 0, &mut nodes);
        for v in nodes.iter_mut() {
            if let TreeNode::Leaf(x) = v {
                *x *= cfg.learning_rate;
            }
        }
        let tree = Tree { nodes };
        for (k, s) in score.iter_mut().enumerate() {
            *s += tree.predict(ds.row(k));
        }
        trees.push(tree);
    }
    Ok(LinkClassifier { feature_names: ds.feature_names.clone(), threshold: 0.5, base_score, trees })
}

/// Threshold grid `0.05, 0.10, …, 0.95`.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

/// F1-maximizing threshold on the grid; ties go to the smaller threshold.
pub fn calibrate_threshold(clf: &LinkClassifier, validation: &LinkDataset) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::Invalid("threshold calibration needs a non-empty validation set".into()));
    }
    if validation.positives() == 0 {
        return Err(Error::Invalid("threshold calibration needs validation positives".into()));
    }
    let probs: Vec<f64> = (0..validation.len()).map(|k| clf.predict_proba(validation.row(k))).collect();
    Ok(best_f1_threshold(&probs, &validation.y))
}

fn best_f1_threshold(probs: &[f64], labels: &[bool]) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.05);
    for t in threshold_grid() {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&p, &y) in probs.iter().zip(labels) {
            match (p >= t, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    best.1
}

/// Candidate edges `{(i, j) : p(i, j) ≥ θ} ∪ observed edges`.
pub fn predict_edges(clf: &LinkClassifier, city: &CityGraph, stats: &NormStats, obs: &FlowNetwork) -> BTreeSet<Edge> {
    let mut out = predict_links(clf, city, stats);
    out.extend(obs.observed_edges().iter().copied());
    out
}

/// Ordered pairs whose predicted link probability reaches the classifier's threshold.
pub fn predict_links(clf: &LinkClassifier, city: &CityGraph, stats: &NormStats) -> BTreeSet<Edge> {
    let h0 = node_inputs(city, stats);
    let mut buf = Vec::with_capacity(clf.feature_names.len());
    let mut out = BTreeSet::new();
    for (i, j) in city.all_pairs() {
        buf.clear();
        push_pair_features(&h0, city, i, j, &mut buf);
        if clf.predict_proba(&buf) >= clf.threshold {
            out.insert((i, j));
        }
    }
    out
}
