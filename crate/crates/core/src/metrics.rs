//! Flow-reconstruction metrics: R², CPC, rank metrics, distance-binned
//! log error and per-region marginal profiles.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{CityGraph, Edge, FlowNetwork};

fn check_len(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension(format!("{} truths vs {} predictions", truth.len(), pred.len())));
    }
    Ok(())
}

/// Coefficient of determination `1 - SS_res / SS_tot` on raw flows.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(truth, pred)?;
    if truth.len() < 2 {
        return Err(Error::Invalid("R² needs at least 2 edges".into()));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|f| (f - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Invalid("R² undefined for constant truth".into()));
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(f, p)| (f - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Common part of commuters, `2 Σ min(F, F̂) / (ΣF + ΣF̂)`.
pub fn cpc(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(truth, pred)?;
    let total: f64 = truth.iter().sum::<f64>() + pred.iter().sum::<f64>();
    if total <= 0.0 {
        return Err(Error::Invalid("CPC undefined when both totals are zero".into()));
    }
    let common: f64 = truth.iter().zip(pred).map(|(a, b)| a.min(*b)).sum();
    Ok(2.0 * common / total)
}

/// Ranks starting at 1, ties share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation with average-rank ties; `None` when undefined.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub spearman: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub ndcg_at_k: BTreeMap<usize, f64>,
}

/// Indices sorted by value descending; ties keep input (edge) order.
fn descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Spearman over all edges, plus Recall@K and nDCG@K for each `K`.
///
/// nDCG uses the raw true flow as gain and a `log2(rank + 1)` discount.
/// Ties in the top-K are broken by input position, which for edge lists
/// in (origin, dest) order means smaller origin, then smaller destination.
pub fn rank_metrics(truth: &[f64], pred: &[f64], ks: &[usize]) -> Result<RankMetrics> {
    check_len(truth, pred)?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > truth.len()) {
        return Err(Error::Invalid(format!("K={k} outside 1..={}", truth.len())));
    }
    let by_truth = descending(truth);
    let by_pred = descending(pred);
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let top_true: std::collections::HashSet<usize> = by_truth[..k].iter().copied().collect();
        let hits = by_pred[..k].iter().filter(|i| top_true.contains(i)).count();
        recall.insert(k, hits as f64 / k as f64);
        let dcg = |order: &[usize]| -> f64 {
            order[..k]
                .iter()
                .enumerate()
                .map(|(r, &i)| truth[i] / ((r + 2) as f64).log2())
                .sum()
        };
        let ideal = dcg(&by_truth);
        ndcg.insert(k, if ideal > 0.0 { dcg(&by_pred) / ideal } else { 0.0 });
    }
    Ok(RankMetrics {
        spearman: spearman(truth, pred).unwrap_or(0.0),
        recall_at_k: recall,
        ndcg_at_k: ndcg,
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub lo_km: f64,
    pub hi_km: f64,
    pub count: usize,
    pub median_abs_log_error: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Equal-count distance bins of `|log F̂ - log F|` over edges with `F > 0`.
///
/// A zero prediction on a positive edge has infinite log error.
pub fn distance_binned_error(truth: &[f64], pred: &[f64], distances: &[f64], bins: usize) -> Result<Vec<DistanceBin>> {
    check_len(truth, pred)?;
    check_len(truth, distances)?;
    if bins == 0 {
        return Err(Error::Invalid("need at least one distance bin".into()));
    }
    let mut rows: Vec<(f64, f64)> = truth
        .iter()
        .zip(pred)
        .zip(distances)
        .filter(|((f, _), _)| **f > 0.0)
        .map(|((f, p), d)| {
            let err = if *p > 0.0 { (p.ln() - f.ln()).abs() } else { f64::INFINITY };
            (*d, err)
        })
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = rows.len();
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let chunk = &rows[b * n / bins..(b + 1) * n / bins];
        if chunk.is_empty() {
            continue;
        }
        let mut errs: Vec<f64> = chunk.iter().map(|r| r.1).collect();
        errs.sort_by(f64::total_cmp);
        out.push(DistanceBin {
            lo_km: chunk[0].0,
            hi_km: chunk[chunk.len() - 1].0,
            count: chunk.len(),
            median_abs_log_error: quantile_sorted(&errs, 0.5),
            q1: quantile_sorted(&errs, 0.25),
            q3: quantile_sorted(&errs, 0.75),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalProfile {
    pub region: usize,
    /// Relative outflow error `(ΣF̂ - ΣF) / ΣF`, or absolute when `outflow_absolute`.
    pub outflow_error: f64,
    pub outflow_absolute: bool,
    pub inflow_error: f64,
    pub inflow_absolute: bool,
}

/// Per-region relative error of total outflow and inflow.
pub fn marginal_profiles(
    truth: &BTreeMap<Edge, f64>,
    pred: &BTreeMap<Edge, f64>,
    n_regions: usize,
) -> Vec<MarginalProfile> {
    let totals = |m: &BTreeMap<Edge, f64>| {
        let mut out = vec![0.0; n_regions];
        let mut inn = vec![0.0; n_regions];
        for (&(o, d), &f) in m {
            out[o] += f;
            inn[d] += f;
        }
        (out, inn)
    };
    let (t_out, t_in) = totals(truth);
    let (p_out, p_in) = totals(pred);
    let rel = |p: f64, t: f64| if t > 0.0 { ((p - t) / t, false) } else { (p - t, true) };
    (0..n_regions)
        .map(|r| {
            let (outflow_error, outflow_absolute) = rel(p_out[r], t_out[r]);
            let (inflow_error, inflow_absolute) = rel(p_in[r], t_in[r]);
            MarginalProfile {
                region: r,
                outflow_error,
                outflow_absolute,
                inflow_error,
                inflow_absolute,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub bins: usize,
    /// Evaluate on observed edges too (off by default: leakage guard).
    pub include_observed: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![10, 100, 1000],
            bins: 10,
            include_observed: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_edges: usize,
    pub r2: f64,
    pub cpc: f64,
    pub spearman: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub ndcg_at_k: BTreeMap<usize, f64>,
    pub distance_bins: Vec<DistanceBin>,
    pub marginal_profiles: Vec<MarginalProfile>,
    /// Predicted edges whose true flow is zero.
    pub false_positive_edges: usize,
    pub false_positive_flow: f64,
}

/// Evaluates predictions on the hidden positive edges of `truth`.
pub fn evaluate(
    truth: &FlowNetwork,
    pred: &BTreeMap<Edge, f64>,
    city: &CityGraph,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let edges: Vec<Edge> = if opts.include_observed {
        truth.flows().keys().copied().collect()
    } else {
        truth.hidden_edges()
    };
    let t: Vec<f64> = edges.iter().map(|&e| truth.flow(e)).collect();
    let p: Vec<f64> = edges.iter().map(|e| pred.get(e).copied().unwrap_or(0.0)).collect();
    let d: Vec<f64> = edges.iter().map(|&(o, dd)| city.distance(o, dd)).collect();
    let ks: Vec<usize> = opts.ks.iter().copied().filter(|&k| k <= edges.len()).collect();
    let rank = rank_metrics(&t, &p, &ks)?;
    let truth_map: BTreeMap<Edge, f64> = edges.iter().copied().zip(t.iter().copied()).collect();
    let pred_map: BTreeMap<Edge, f64> = edges.iter().copied().zip(p.iter().copied()).collect();
    let (mut fp_edges, mut fp_flow) = (0, 0.0);
    for (e, &f) in pred {
        if truth.flow(*e) == 0.0 && f > 0.0 {
            fp_edges += 1;
            fp_flow += f;
        }
    }
    Ok(EvalReport {
        n_edges: edges.len(),
        r2: r_squared(&t, &p)?,
        cpc: cpc(&t, &p)?,
        spearman: rank.spearman,
        recall_at_k: rank.recall_at_k,
        ndcg_at_k: rank.ndcg_at_k,
        distance_bins: distance_binned_error(&t, &p, &d, opts.bins)?,
        marginal_profiles: marginal_profiles(&truth_map, &pred_map, city.n_regions()),
        false_positive_edges: fp_edges,
        false_positive_flow: fp_flow,
    })
}

impl EvalReport {
    /// Flat `key=value` text.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_edges={}", self.n_edges);
        let _ = writeln!(s, "r2={}", self.r2);
        let _ = writeln!(s, "cpc={}", self.cpc);
        let _ = writeln!(s, "spearman={}", self.spearman);
        for (k, v) in &self.recall_at_k {
            let _ = writeln!(s, "recall_at_{k}={v}");
        }
        for (k, v) in &self.ndcg_at_k {
            let _ = writeln!(s, "ndcg_at_{k}={v}");
        }
        let _ = writeln!(s, "false_positive_edges={}", self.false_positive_edges);
        let _ = writeln!(s, "false_positive_flow={}", self.false_positive_flow);
        let mean_abs = |f: fn(&MarginalProfile) -> f64| {
            self.marginal_profiles.iter().map(|m| f(m).abs()).sum::<f64>() / self.marginal_profiles.len().max(1) as f64
        };
        let _ = writeln!(s, "mean_abs_outflow_error={}", mean_abs(|m| m.outflow_error));
        let _ = writeln!(s, "mean_abs_inflow_error={}", mean_abs(|m| m.inflow_error));
        s
    }

    /// Per-bin CSV.
    pub fn bins_csv(&self) -> String {
        let mut s = String::from("lo_km,hi_km,count,median_abs_log_error,q1,q3\n");
        for b in &self.distance_bins {
            let _ = writeln!(s, "{},{},{},{},{},{}", b.lo_km, b.hi_km, b.count, b.median_abs_log_error, b.q1, b.q3);
        }
        s
    }
}
