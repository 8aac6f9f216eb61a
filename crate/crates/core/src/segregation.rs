//! Spatial income segregation index.
//!
//! Bregman information with the squared-Euclidean divergence is the
//! population-weighted variance of income. For any partition of the regions
//! it splits exactly into a between-cluster and a within-cluster term. The
//! segregation index is the between-cluster share after merging adjacent
//! regions of similar income down to `K` clusters.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::CityGraph;

/// Incomes, populations and adjacency of a set of regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncomeField {
    incomes: Vec<f64>,
    populations: Vec<f64>,
    neighbors: Vec<Vec<usize>>,
}

impl IncomeField {
    pub fn new(incomes: Vec<f64>, populations: Vec<f64>, neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = incomes.len();
        if populations.len() != n || neighbors.len() != n {
            return Err(Error::Dimension(format!(
                "{n} incomes, {} populations, {} neighbor lists",
                populations.len(),
                neighbors.len()
            )));
        }
        if populations.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Invalid("populations must be finite and non-negative".into()));
        }
        if incomes.iter().any(|y| !y.is_finite()) {
            return Err(Error::Invalid("incomes must be finite".into()));
        }
        // symmetrize and drop self-loops
        let mut sets = vec![BTreeSet::new(); n];
        for (i, list) in neighbors.iter().enumerate() {
            for &j in list {
                if j >= n {
                    return Err(Error::Invalid(format!("neighbor index {j} out of range")));
                }
                if i != j {
                    sets[i].insert(j);
                    sets[j].insert(i);
                }
            }
        }
        Ok(Self {
            incomes,
            populations,
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    /// Income field of a city; every region must carry an income.
    pub fn from_city(city: &CityGraph) -> Result<Self> {
        let incomes = city
            .regions()
            .iter()
            .map(|r| r.income.ok_or_else(|| Error::Invalid(format!("region {} has no income", r.id))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            incomes,
            city.regions().iter().map(|r| r.population).collect(),
            city.regions().iter().map(|r| r.neighbors.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.incomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.incomes.is_empty()
    }

    pub fn incomes(&self) -> &[f64] {
        &self.incomes
    }

    pub fn populations(&self) -> &[f64] {
        &self.populations
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Connected components of the adjacency graph, each sorted.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut k = 0;
            while k < comp.len() {
                for &j in &self.neighbors[comp[k]] {
                    if !seen[j] {
                        seen[j] = true;
                        comp.push(j);
                    }
                }
                k += 1;
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Population-weighted mean income over `members`; plain mean if they have no population.
    fn mean_of(&self, members: &[usize]) -> f64 {
        let pop: f64 = members.iter().map(|&i| self.populations[i]).sum();
        if pop > 0.0 {
            members.iter().map(|&i| self.populations[i] * self.incomes[i]).sum::<f64>() / pop
        } else {
            members.iter().map(|&i| self.incomes[i]).sum::<f64>() / members.len() as f64
        }
    }

    /// Bregman information restricted to `members` (0 for a zero-population set).
    fn bi_of(&self, members: &[usize]) -> f64 {
        let pop: f64 = members.iter().map(|&i| self.populations[i]).sum();
        if pop <= 0.0 {
            return 0.0;
        }
        let mean = self.mean_of(members);
        members
            .iter()
            .map(|&i| self.populations[i] / pop * (self.incomes[i] - mean).powi(2))
            .sum()
    }
}

/// Population-weighted mean squared deviation from the weighted mean income.
pub fn bregman_information(field: &IncomeField) -> Result<f64> {
    let total: f64 = field.populations.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Invalid("Bregman information needs a positive total population".into()));
    }
    let all: Vec<usize> = (0..field.len()).collect();
    Ok(field.bi_of(&all))
}

/// Disjoint, covering, internally connected clusters of region indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    clusters: Vec<Vec<usize>>,
}

impl Partition {
    /// Validates the partition against `field`.
    pub fn new(field: &IncomeField, mut clusters: Vec<Vec<usize>>) -> Result<Self> {
        let n = field.len();
        let mut owner = vec![usize::MAX; n];
        for (k, c) in clusters.iter_mut().enumerate() {
            if c.is_empty() {
                return Err(Error::Invalid(format!("cluster {k} is empty")));
            }
            c.sort_unstable();
            for &i in c.iter() {
                if i >= n {
                    return Err(Error::Invalid(format!("region index {i} out of range")));
                }
                if owner[i] != usize::MAX {
                    return Err(Error::Invalid(format!("region {i} appears in two clusters")));
                }
                owner[i] = k;
            }
        }
        if let Some(i) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::Invalid(format!("partition does not cover region {i}")));
        }
        for (k, c) in clusters.iter().enumerate() {
            let mut seen = BTreeSet::from([c[0]]);
            let mut stack = vec![c[0]];
            while let Some(i) = stack.pop() {
                for &j in field.neighbors(i) {
                    if owner[j] == k && seen.insert(j) {
                        stack.push(j);
                    }
                }
            }
            if seen.len() != c.len() {
                return Err(Error::Invalid(format!("cluster {k} is not connected")));
            }
        }
        clusters.sort_by_key(|c| c[0]);
        Ok(Self { clusters })
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Greedy adjacency-constrained merging down to `k` clusters.
///
/// Each step merges the adjacent pair of clusters whose population-weighted
/// mean incomes differ least; ties go to the pair with the smallest
/// (min member, min member) key. Disconnected graphs are handled per
/// component with `k` split proportionally to component size.
pub fn agglomerate(field: &IncomeField, k: usize) -> Result<Partition> {
    let n = field.len();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("K={k} outside 1..={n}")));
    }
    let comps = field.components();
    if k < comps.len() {
        return Err(Error::Invalid(format!(
            "K={k} is below the {} connected components of the adjacency graph",
            comps.len()
        )));
    }
    let quotas = allocate_quotas(&comps, k);
    let mut clusters = Vec::with_capacity(k);
    for (comp, quota) in comps.iter().zip(quotas) {
        clusters.extend(greedy_merge(field, comp, quota));
    }
    Partition::new(field, clusters)
}

/// Largest-remainder allocation of `k` over components, at least 1 and at
/// most the component size each.
fn allocate_quotas(comps: &[Vec<usize>], k: usize) -> Vec<usize> {
    let n: usize = comps.iter().map(Vec::len).sum();
    let extra = k - comps.len();
    let free: usize = n - comps.len();
    let mut quota: Vec<usize> = vec![1; comps.len()];
    if extra == 0 || free == 0 {
        return quota;
    }
    let shares: Vec<f64> = comps
        .iter()
        .map(|c| extra as f64 * (c.len() - 1) as f64 / free as f64)
        .collect();
    let mut given = 0;
    for (q, s) in quota.iter_mut().zip(&shares) {
        *q += s.floor() as usize;
        given += s.floor() as usize;
    }
    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = extra - given;
    while left > 0 {
        let mut progressed = false;
        for &c in &order {
            if left > 0 && quota[c] < comps[c].len() {
                quota[c] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    quota
}

struct Cluster {
    members: Vec<usize>,
    pop: f64,
    weighted: f64,
    plain: f64,
    alive: bool,
}

impl Cluster {
    fn mean(&self) -> f64 {
        if self.pop > 0.0 {
            self.weighted / self.pop
        } else {
            self.plain / self.members.len() as f64
        }
    }
}

fn greedy_merge(field: &IncomeField, comp: &[usize], target: usize) -> Vec<Vec<usize>> {
    let mut slot = vec![usize::MAX; field.len()];
    let mut clusters: Vec<Cluster> = comp
        .iter()
        .enumerate()
        .map(|(s, &i)| {
            slot[i] = s;
            Cluster {
                members: vec![i],
                pop: field.populations[i],
                weighted: field.populations[i] * field.incomes[i],
                plain: field.incomes[i],
                alive: true,
            }
        })
        .collect();
    let mut adj: Vec<BTreeSet<usize>> = comp
        .iter()
        .map(|&i| field.neighbors(i).iter().map(|&j| slot[j]).collect())
        .collect();
    let mut alive = comp.len();
    while alive > target {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for a in 0..clusters.len() {
            if !clusters[a].alive {
                continue;
            }
            for &b in adj[a].range(a + 1..) {
                let diff = (clusters[a].mean() - clusters[b].mean()).abs();
                let ia = clusters[a].members[0];
                let ib = clusters[b].members[0];
                let key = (ia.min(ib), ia.max(ib));
                let better = match &best {
                    None => true,
                    Some((d, k, _, _)) => diff < *d || (diff == *d && key < *k),
                };
                if better {
                    best = Some((diff, key, a, b));
                }
            }
        }
        let Some((_, _, a, b)) = best else { break };
        let moved = std::mem::take(&mut clusters[b].members);
        clusters[a].members.extend(moved);
        clusters[a].members.sort_unstable();
        clusters[a].pop += clusters[b].pop;
        clusters[a].weighted += clusters[b].weighted;
        clusters[a].plain += clusters[b].plain;
        clusters[b].alive = false;
        let nb = std::mem::take(&mut adj[b]);
        for c in nb {
            adj[c].remove(&b);
            if c != a {
                adj[c].insert(a);
                adj[a].insert(c);
            }
        }
        adj[a].remove(&a);
        alive -= 1;
    }
    clusters.into_iter().filter(|c| c.alive).map(|c| c.members).collect()
}

/// `(BI_inter, BI_intra)` of a partition.
pub fn decompose(field: &IncomeField, partition: &Partition) -> Result<(f64, f64)> {
    let covered: usize = partition.clusters().iter().map(Vec::len).sum();
    if covered != field.len() {
        return Err(Error::Invalid("partition does not cover the income field".into()));
    }
    let total: f64 = field.populations.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Invalid("Bregman information needs a positive total population".into()));
    }
    let global_mean = field.mean_of(&(0..field.len()).collect::<Vec<_>>());
    let mut inter = 0.0;
    let mut intra = 0.0;
    for c in partition.clusters() {
        let pop: f64 = c.iter().map(|&i| field.populations[i]).sum();
        if pop <= 0.0 {
            continue;
        }
        let share = pop / total;
        inter += share * (field.mean_of(c) - global_mean).powi(2);
        intra += share * field.bi_of(c);
    }
    Ok((inter, intra))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegregationResult {
    pub bi_global: f64,
    pub bi_inter: f64,
    pub bi_intra: f64,
    pub si: f64,
    pub k: usize,
    /// Global Bregman information is negligible; `si` reported as 0.
    pub degenerate: bool,
}

/// Default cluster count `max(2, ceil(N / 10))`, capped at N.
pub fn default_k(n: usize) -> usize {
    n.div_ceil(10).max(2).min(n)
}

/// Segregation index of a given partition.
pub fn segregation_of_partition(field: &IncomeField, partition: &Partition) -> Result<SegregationResult> {
    let bi_global = bregman_information(field)?;
    let (bi_inter, bi_intra) = decompose(field, partition)?;
    let mean = field.mean_of(&(0..field.len()).collect::<Vec<_>>());
    let degenerate = bi_global <= 1e-12 * mean * mean;
    let si = if degenerate { 0.0 } else { (bi_inter / bi_global).clamp(0.0, 1.0) };
    Ok(SegregationResult {
        bi_global,
        bi_inter,
        bi_intra,
        si,
        k: partition.len(),
        degenerate,
    })
}

/// Agglomerates to `k` clusters (default [`default_k`]) and reports SI.
pub fn segregation_index(field: &IncomeField, k: Option<usize>) -> Result<SegregationResult> {
    let k = k.unwrap_or_else(|| default_k(field.len()));
    let partition = agglomerate(field, k)?;
    segregation_of_partition(field, &partition)
}

/// SI for every K from 2 to N/2 (or the component count, if larger).
pub fn si_scan(field: &IncomeField) -> Result<Vec<SegregationResult>> {
    let lo = 2.max(field.components().len());
    let hi = (field.len() / 2).max(lo).min(field.len());
    (lo..=hi).map(|k| segregation_index(field, Some(k))).collect()
}

/// City-level inputs of the transferability regression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityStats {
    pub si: f64,
    pub area_mean: f64,
    pub area_cv: f64,
    pub osm_density: f64,
}

impl CityStats {
    /// Area statistics and mean per-km² feature mass of a city with a known SI.
    pub fn from_city(city: &CityGraph, si: f64) -> Self {
        let areas: Vec<f64> = city.regions().iter().map(|r| r.area_km2).collect();
        let n = areas.len() as f64;
        let mean = areas.iter().sum::<f64>() / n;
        let sd = (areas.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        let density = (0..city.n_regions())
            .map(|i| city.features().row(i).iter().map(|v| v.abs()).sum::<f64>() / areas[i])
            .sum::<f64>()
            / n;
        Self {
            si,
            area_mean: mean,
            area_cv: if mean > 0.0 { sd / mean } else { 0.0 },
            osm_density: density,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub source: CityStats,
    pub target: CityStats,
    pub transfer_r2: f64,
}

pub const TRANSFER_FEATURES: [&str; 9] = [
    "si_source",
    "si_target",
    "abs_si_diff",
    "area_mean_source",
    "area_cv_source",
    "area_mean_target",
    "area_cv_target",
    "osm_density_source",
    "osm_density_target",
];

impl TransferRow {
    pub fn features(&self) -> [f64; 9] {
        let (s, t) = (&self.source, &self.target);
        [
            s.si,
            t.si,
            (s.si - t.si).abs(),
            s.area_mean,
            s.area_cv,
            t.area_mean,
            t.area_cv,
            s.osm_density,
            t.osm_density,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferabilityModel {
    pub intercept: f64,
    /// Raw OLS coefficients in [`TRANSFER_FEATURES`] order.
    pub coefficients: Vec<f64>,
    pub fit_r2: f64,
    /// Response had zero variance; `fit_r2` reported as 0.
    pub degenerate_response: bool,
    /// Feature names by descending |coefficient × feature std|.
    pub ranking: Vec<(String, f64)>,
}

impl TransferabilityModel {
    pub fn predict(&self, row: &TransferRow) -> f64 {
        self.intercept + row.features().iter().zip(&self.coefficients).map(|(x, b)| x * b).sum::<f64>()
    }
}

/// Ordinary least squares of transfer R² on the city-pair features.
pub fn fit_transferability_model(rows: &[TransferRow]) -> Result<TransferabilityModel> {
    let p = TRANSFER_FEATURES.len();
    if rows.len() < p + 1 {
        return Err(Error::Invalid(format!("need at least {} rows, got {}", p + 1, rows.len())));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { rows[i].features()[j - 1] });
    let y = DVector::from_iterator(n, rows.iter().map(|r| r.transfer_r2));

    let collinear = collinear_columns(&x);
    if !collinear.is_empty() {
        let names = collinear
            .into_iter()
            .map(|j| if j == 0 { "intercept".to_string() } else { TRANSFER_FEATURES[j - 1].to_string() })
            .collect();
        return Err(Error::RankDeficient { columns: names });
    }

    let svd = x.clone().svd(true, true);
    let beta = svd
        .solve(&y, 1e-14)
        .map_err(|e| Error::Invalid(format!("least squares failed: {e}")))?;
    let fitted = &x * &beta;
    let ymean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - ymean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let degenerate = ss_tot == 0.0;
    let fit_r2 = if degenerate { 0.0 } else { 1.0 - ss_res / ss_tot };

    let coefficients: Vec<f64> = beta.iter().skip(1).copied().collect();
    let mut ranking: Vec<(String, f64)> = (0..p)
        .map(|j| {
            let col = x.column(j + 1);
            let m = col.mean();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            (TRANSFER_FEATURES[j].to_string(), (coefficients[j] * sd).abs())
        })
        .collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(TransferabilityModel {
        intercept: beta[0],
        coefficients,
        fit_r2,
        degenerate_response: degenerate,
        ranking,
    })
}

/// Columns that are (numerically) linear combinations of earlier columns.
fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut out = Vec::new();
    for j in 0..x.ncols() {
        let col: DVector<f64> = x.column(j).into();
        let norm = col.norm();
        let mut v = col.clone();
        for q in &basis {
            let c = q.dot(&v);
            v -= q * c;
        }
        if norm == 0.0 || v.norm() <= 1e-9 * norm {
            out.push(j);
        } else {
            let vn = v.norm();
            basis.push(v / vn);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(incomes: &[f64]) -> IncomeField {
        let n = incomes.len();
        let nb = (0..n)
            .map(|i| {
                let mut v = vec![];
                if i > 0 {
                    v.push(i - 1)
                }
                if i + 1 < n {
                    v.push(i + 1)
                }
                v
            })
            .collect();
        IncomeField::new(incomes.to_vec(), vec![1.0; n], nb).unwrap()
    }

    #[test]
    fn bregman_examples() {
        assert_eq!(bregman_information(&chain(&[5.0, 5.0, 5.0])).unwrap(), 0.0);
        assert!((bregman_information(&chain(&[0.0, 2.0])).unwrap() - 1.0).abs() < 1e-15);
        let f = IncomeField::new(vec![0.0, 4.0], vec![3.0, 1.0], vec![vec![1], vec![0]]).unwrap();
        assert!((bregman_information(&f).unwrap() - 3.0).abs() < 1e-15);
        let z = IncomeField::new(vec![0.0, 4.0], vec![0.0, 0.0], vec![vec![1], vec![0]]).unwrap();
        assert!(bregman_information(&z).is_err());
    }

    #[test]
    fn agglomerate_examples() {
        let f = chain(&[1.0, 1.0, 9.0, 9.0]);
        let id = agglomerate(&f, 4).unwrap();
        assert_eq!(id.clusters(), &[vec![0], vec![1], vec![2], vec![3]]);
        let two = agglomerate(&f, 2).unwrap();
        assert_eq!(two.clusters(), &[vec![0, 1], vec![2, 3]]);

        let split = IncomeField::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![1.0; 4],
            vec![vec![1], vec![0], vec![3], vec![2]],
        )
        .unwrap();
        assert_eq!(agglomerate(&split, 2).unwrap().clusters(), &[vec![0, 1], vec![2, 3]]);
        assert!(agglomerate(&split, 1).is_err());
        assert!(agglomerate(&split, 5).is_err());
    }

    #[test]
    fn ties_merge_smallest_ids_first() {
        // all differences equal: first merge must be (0,1)
        let f = chain(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(agglomerate(&f, 3).unwrap().clusters(), &[vec![0, 1], vec![2], vec![3]]);
    }

    #[test]
    fn decompose_extremes() {
        let f = chain(&[1.0, 3.0, 7.0, 2.0]);
        let g = bregman_information(&f).unwrap();
        let singles = Partition::new(&f, (0..4).map(|i| vec![i]).collect()).unwrap();
        let (inter, intra) = decompose(&f, &singles).unwrap();
        assert!((inter - g).abs() < 1e-12 && intra.abs() < 1e-12);
        let one = Partition::new(&f, vec![vec![0, 1, 2, 3]]).unwrap();
        let (inter, intra) = decompose(&f, &one).unwrap();
        assert!(inter.abs() < 1e-12 && (intra - g).abs() < 1e-12);
        assert_eq!(segregation_of_partition(&f, &one).unwrap().si, 0.0);
    }

    #[test]
    fn partition_validation() {
        let f = chain(&[1.0, 2.0, 3.0]);
        assert!(Partition::new(&f, vec![vec![0, 2], vec![1]]).is_err());
        assert!(Partition::new(&f, vec![vec![0, 1]]).is_err());
        assert!(Partition::new(&f, vec![vec![0, 1], vec![1, 2]]).is_err());
    }

    #[test]
    fn si_examples() {
        let blocks = chain(&[10.0, 10.0, 10.0, 30.0, 30.0, 30.0]);
        let r = segregation_index(&blocks, Some(2)).unwrap();
        assert!((r.si - 1.0).abs() < 1e-9);
        let flat = chain(&[7.0; 6]);
        let r = segregation_index(&flat, None).unwrap();
        assert!(r.degenerate && r.si == 0.0);
    }

    #[test]
    fn checkerboard_is_barely_segregated() {
        let y: Vec<f64> = (0..100).map(|i| ((i % 10 + i / 10) % 2) as f64 * 50.0 + 10.0).collect();
        let f = grid_field(10, 10, y, vec![1.0; 100]);
        let r = segregation_index(&f, None).unwrap();
        assert_eq!(r.k, 10);
        assert!(r.si < 0.1, "{}", r.si);
        let part = agglomerate(&f, 10).unwrap();
        let (agg_y, agg_p): (Vec<f64>, Vec<f64>) = part
            .clusters()
            .iter()
            .map(|c| (c.iter().map(|&i| f.incomes()[i]).sum::<f64>() / c.len() as f64, c.len() as f64))
            .unzip();
        let brute = pairwise_var(&agg_y, &agg_p) / pairwise_var(f.incomes(), f.populations());
        assert!((brute - r.si).abs() < 1e-12);
    }

    #[test]
    fn scan_rows() {
        let f = chain(&(0..20).map(|i| (i % 3) as f64).collect::<Vec<_>>());
        let scan = si_scan(&f).unwrap();
        assert_eq!(scan.len(), 9);
        assert_eq!(scan.first().unwrap().k, 2);
        assert_eq!(scan.last().unwrap().k, 10);
    }

    #[test]
    fn quota_allocation() {
        let comps = vec![vec![0, 1, 2, 3, 4, 5], vec![6, 7]];
        assert_eq!(allocate_quotas(&comps, 2), vec![1, 1]);
        assert_eq!(allocate_quotas(&comps, 8), vec![6, 2]);
        let q = allocate_quotas(&comps, 5);
        assert_eq!(q.iter().sum::<usize>(), 5);
    }

    fn random_stats(rng: &mut impl rand::Rng) -> CityStats {
        CityStats {
            si: rng.random_range(0.0..1.0),
            area_mean: rng.random_range(0.5..5.0),
            area_cv: rng.random_range(0.1..1.0),
            osm_density: rng.random_range(1.0..20.0),
        }
    }

    fn random_rows(n: usize, seed: u64) -> Vec<TransferRow> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| TransferRow {
                source: random_stats(&mut rng),
                target: random_stats(&mut rng),
                transfer_r2: 0.0,
            })
            .collect()
    }

    #[test]
    fn transferability_noiseless_recovery() {
        let truth = [-0.2, 0.05, -0.9, 0.01, 0.02, -0.03, 0.04, 0.005, -0.002];
        let mut rows = random_rows(30, 4);
        for row in &mut rows {
            row.transfer_r2 = 0.7 + row.features().iter().zip(truth).map(|(x, b)| x * b).sum::<f64>();
        }
        let m = fit_transferability_model(&rows).unwrap();
        for (b, t) in m.coefficients.iter().zip(truth) {
            assert!((b - t).abs() < 1e-8, "{b} vs {t}");
        }
        assert!((m.intercept - 0.7).abs() < 1e-8);
        assert!((m.fit_r2 - 1.0).abs() < 1e-10);
        assert_eq!(m.ranking[0].0, "abs_si_diff");
        assert!((m.predict(&rows[3]) - rows[3].transfer_r2).abs() < 1e-10);
    }

    #[test]
    fn transferability_degenerate_cases() {
        let mut rows = random_rows(12, 9);
        for (k, row) in rows.iter_mut().enumerate() {
            row.source.si = 0.1;
            row.transfer_r2 = k as f64;
        }
        match fit_transferability_model(&rows) {
            Err(Error::RankDeficient { columns }) => assert!(columns.contains(&"si_source".to_string())),
            other => panic!("{other:?}"),
        }
        let mut rows = random_rows(12, 10);
        for row in &mut rows {
            row.transfer_r2 = 0.5;
        }
        let m = fit_transferability_model(&rows).unwrap();
        assert!(m.degenerate_response);
        assert_eq!(m.fit_r2, 0.0);
        assert!(fit_transferability_model(&rows[..5]).is_err());
    }

    fn grid_field(w: usize, h: usize, incomes: Vec<f64>, pops: Vec<f64>) -> IncomeField {
        let nb = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let mut v = vec![];
                if x > 0 {
                    v.push(i - 1)
                }
                if x + 1 < w {
                    v.push(i + 1)
                }
                if y > 0 {
                    v.push(i - w)
                }
                if y + 1 < h {
                    v.push(i + w)
                }
                v
            })
            .collect();
        IncomeField::new(incomes, pops, nb).unwrap()
    }

    /// Multi-source random growth: every cluster is connected by construction.
    fn random_partition(field: &IncomeField, k: usize, seed: u64) -> Partition {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = field.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut owner = vec![usize::MAX; n];
        let mut frontier = Vec::new();
        for (c, &s) in order.iter().take(k).enumerate() {
            owner[s] = c;
            frontier.push(s);
        }
        while !frontier.is_empty() {
            let pick = rand::Rng::random_range(&mut rng, 0..frontier.len());
            let i = frontier[pick];
            let free: Vec<usize> = field.neighbors(i).iter().copied().filter(|&j| owner[j] == usize::MAX).collect();
            if free.is_empty() {
                frontier.swap_remove(pick);
                continue;
            }
            let j = free[rand::Rng::random_range(&mut rng, 0..free.len())];
            owner[j] = owner[i];
            frontier.push(j);
        }
        let mut clusters = vec![Vec::new(); k];
        for (i, &c) in owner.iter().enumerate() {
            clusters[c].push(i);
        }
        Partition::new(field, clusters).unwrap()
    }

    /// Weighted variance via the pairwise identity, independent of the mean.
    fn pairwise_var(y: &[f64], p: &[f64]) -> f64 {
        let tot: f64 = p.iter().sum();
        let mut s = 0.0;
        for i in 0..y.len() {
            for j in 0..y.len() {
                s += p[i] * p[j] * (y[i] - y[j]).powi(2);
            }
        }
        s / (2.0 * tot * tot)
    }

    fn field_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, u64)> {
        (2usize..8, 1usize..7).prop_flat_map(|(w, h)| {
            let n = w * h;
            (
                Just(w),
                Just(h),
                proptest::collection::vec(-50.0f64..200.0, n),
                proptest::collection::vec(0.1f64..1000.0, n),
                any::<u64>(),
            )
        })
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn chain_rule_matches_pairwise_oracle((w, h, y, p, seed) in field_strategy(), kfrac in 0.0f64..1.0) {
            let field = grid_field(w, h, y.clone(), p.clone());
            let n = w * h;
            let k = 1 + ((n - 1) as f64 * kfrac) as usize;
            let part = random_partition(&field, k, seed);
            let (inter, intra) = decompose(&field, &part).unwrap();
            let global = bregman_information(&field).unwrap();
            let tot: f64 = p.iter().sum();
            let mut agg_y = vec![];
            let mut agg_p = vec![];
            let mut brute_intra = 0.0;
            for c in part.clusters() {
                let cy: Vec<f64> = c.iter().map(|&i| y[i]).collect();
                let cp: Vec<f64> = c.iter().map(|&i| p[i]).collect();
                let pop: f64 = cp.iter().sum();
                agg_y.push(cy.iter().zip(&cp).map(|(a, b)| a * b).sum::<f64>() / pop);
                agg_p.push(pop);
                brute_intra += pop / tot * pairwise_var(&cy, &cp);
            }
            let brute_global = pairwise_var(&y, &p);
            let brute_inter = pairwise_var(&agg_y, &agg_p);
            let scale = global.max(1e-300);
            prop_assert!((global - (inter + intra)).abs() <= 1e-9 * scale);
            prop_assert!((global - brute_global).abs() <= 1e-9 * scale);
            prop_assert!((inter - brute_inter).abs() <= 1e-9 * scale);
            prop_assert!((intra - brute_intra).abs() <= 1e-9 * scale);
        }

        #[test]
        fn rescaling_behaviour((w, h, y, p, _s) in field_strategy(), c in 0.1f64..10.0) {
            let field = grid_field(w, h, y.clone(), p.clone());
            let k = default_k(w * h);
            let base = segregation_index(&field, Some(k)).unwrap();
            let popped = grid_field(w, h, y.clone(), p.iter().map(|v| v * c).collect());
            let scaled = grid_field(w, h, y.iter().map(|v| v * c).collect(), p.clone());
            let a = segregation_index(&popped, Some(k)).unwrap();
            let b = segregation_index(&scaled, Some(k)).unwrap();
            prop_assert!((a.bi_global - base.bi_global).abs() <= 1e-9 * base.bi_global);
            prop_assert!((b.bi_global - c * c * base.bi_global).abs() <= 1e-9 * c * c * base.bi_global);
            prop_assert!((a.si - base.si).abs() < 1e-9);
            prop_assert!((b.si - base.si).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&base.si));
        }

        #[test]
        fn inter_term_shrinks_as_clusters_merge((w, h, y, p, _s) in field_strategy()) {
            let field = grid_field(w, h, y, p);
            let mut prev = f64::INFINITY;
            for k in (1..=field.len()).rev() {
                let part = agglomerate(&field, k).unwrap();
                let (inter, _) = decompose(&field, &part).unwrap();
                prop_assert!(inter <= prev + 1e-9 * prev.abs().min(1e300));
                prev = inter;
            }
        }
    }
}
