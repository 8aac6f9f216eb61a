//! Regions, built-environment features, distances and OD flows.
//!
//! A [`CityGraph`] owns the region list, a dense great-circle distance
//! matrix and the per-region feature table. A [`FlowNetwork`] stores the
//! positive directed flows of one city, indexed by region position, together
//! with the observation mask produced by [`sample_observation`].

mod io;
mod observe;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_city, load_flows, load_regions, write_features_csv, write_flows_csv, write_regions_csv};
pub use observe::{sample_observation, ObservationSpec, Scenario};

/// Earth radius of the adopted sphere, km.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Neighbors used for centroid-only adjacency.
pub const KNN_ADJACENCY: usize = 6;

/// Ordered (origin, destination) pair of region indices.
pub type Edge = (usize, usize);

/// Great-circle distance between two (lat, lon) points in degrees, km.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for &(lat, lon) in &[a, b] {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::Domain(format!(
                "coordinate ({lat}, {lon}) outside WGS-84 range"
            )));
        }
    }
    Ok(haversine_unchecked(a, b))
}

fn haversine_unchecked(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (phi1, phi2) = (a.0.to_radians(), b.0.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.1 - a.1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).sqrt())
}

/// One administrative region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub area_km2: f64,
    pub population: f64,
    pub income: Option<f64>,
    /// Indices of spatially adjacent regions, sorted.
    pub neighbors: Vec<usize>,
}

/// How adjacency between regions is established.
#[derive(Clone, Debug)]
pub enum Adjacency {
    /// `k` nearest centroids, symmetrized.
    Knn(usize),
    /// One outer ring per region; regions sharing a boundary segment are adjacent.
    Polygons(Vec<Vec<(f64, f64)>>),
    /// Explicit neighbor lists by index; symmetrized on construction.
    Explicit(Vec<Vec<usize>>),
}

/// Named per-region feature values, row-major (one row per region).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    names: Vec<String>,
    rows: usize,
    values: Vec<f64>,
}

impl FeatureTable {
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = names.len();
        let mut values = Vec::with_capacity(rows.len() * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Dimension(format!(
                    "feature row {i} has {} values, expected {k}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("non-finite feature value {v} in row {i}")));
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            names,
            rows: rows.len(),
            values,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.names.len();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        let k = self.names.len();
        (0..self.rows).map(move |i| self.values[i * k + j])
    }

    fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let k = self.names.len().max(1);
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(idx, &v)| f(idx % k, v))
            .collect();
        Self {
            names: self.names.clone(),
            rows: self.rows,
            values,
        }
    }
}

/// Regions, features and pairwise distances of one city.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityGraph {
    regions: Vec<Region>,
    features: FeatureTable,
    distances: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl CityGraph {
    /// Validates the regions, computes distances and adjacency.
    ///
    /// `regions[i].neighbors` is ignored and recomputed from `adjacency`.
    pub fn new(mut regions: Vec<Region>, features: FeatureTable, adjacency: Adjacency) -> Result<Self> {
        let n = regions.len();
        if features.n_rows() != n {
            return Err(Error::Dimension(format!(
                "{} feature rows for {n} regions",
                features.n_rows()
            )));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, r) in regions.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate region id {}", r.id)));
            }
            if !(r.population >= 0.0) || !r.population.is_finite() {
                return Err(Error::Invalid(format!("region {} has invalid population {}", r.id, r.population)));
            }
            if !(r.area_km2 > 0.0) || !r.area_km2.is_finite() {
                return Err(Error::Invalid(format!("region {} has non-positive area {}", r.id, r.area_km2)));
            }
            if let Some(y) = r.income {
                if !y.is_finite() {
                    return Err(Error::Invalid(format!("region {} has non-finite income", r.id)));
                }
            }
            haversine((r.lat, r.lon), (r.lat, r.lon))?;
        }

        let mut distances = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = haversine_unchecked((regions[i].lat, regions[i].lon), (regions[j].lat, regions[j].lon));
                if d <= 0.0 {
                    return Err(Error::Invalid(format!(
                        "regions {} and {} share a centroid",
                        regions[i].id, regions[j].id
                    )));
                }
                distances[i * n + j] = d;
                distances[j * n + i] = d;
            }
        }

        let neighbors = match adjacency {
            Adjacency::Knn(k) => knn_adjacency(&distances, n, k),
            Adjacency::Polygons(rings) => {
                if rings.len() != n {
                    return Err(Error::Dimension(format!("{} polygons for {n} regions", rings.len())));
                }
                polygon_adjacency(&rings)
            }
            Adjacency::Explicit(lists) => {
                if lists.len() != n {
                    return Err(Error::Dimension(format!("{} neighbor lists for {n} regions", lists.len())));
                }
                let mut sets = vec![BTreeSet::new(); n];
                for (i, list) in lists.iter().enumerate() {
                    for &j in list {
                        if j >= n {
                            return Err(Error::Invalid(format!("neighbor index {j} out of range")));
                        }
                        if j != i {
                            sets[i].insert(j);
                            sets[j].insert(i);
                        }
                    }
                }
                sets
            }
        };
        for (r, nb) in regions.iter_mut().zip(neighbors) {
            r.neighbors = nb.into_iter().collect();
        }

        Ok(Self {
            regions,
            features,
            distances,
            index,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, i: usize) -> &Region {
        &self.regions[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn features(&self) -> &FeatureTable {
        &self.features
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[i * self.regions.len() + j]
    }

    pub fn population(&self, i: usize) -> f64 {
        self.regions[i].population
    }

    /// All ordered pairs `(i, j)` with `i != j`.
    pub fn all_pairs(&self) -> Vec<Edge> {
        let n = self.n_regions();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Same city with a replaced feature table.
    pub fn with_features(&self, features: FeatureTable) -> Result<Self> {
        if features.n_rows() != self.n_regions() {
            return Err(Error::Dimension(format!(
                "{} feature rows for {} regions",
                features.n_rows(),
                self.n_regions()
            )));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    /// Same city with replaced incomes (`None` clears them).
    pub fn with_incomes(&self, incomes: Option<&[f64]>) -> Result<Self> {
        let mut out = self.clone();
        match incomes {
            Some(ys) => {
                if ys.len() != self.n_regions() {
                    return Err(Error::Dimension(format!("{} incomes for {} regions", ys.len(), self.n_regions())));
                }
                for (r, &y) in out.regions.iter_mut().zip(ys) {
                    r.income = Some(y);
                }
            }
            None => out.regions.iter_mut().for_each(|r| r.income = None),
        }
        Ok(out)
    }

    /// Rebuilds the id index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .regions
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
    }
}

fn knn_adjacency(distances: &[f64], n: usize, k: usize) -> Vec<BTreeSet<usize>> {
    let mut sets = vec![BTreeSet::new(); n];
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| distances[i * n + a].total_cmp(&distances[i * n + b]).then(a.cmp(&b)));
        for &j in others.iter().take(k) {
            sets[i].insert(j);
            sets[j].insert(i);
        }
    }
    sets
}

fn polygon_adjacency(rings: &[Vec<(f64, f64)>]) -> Vec<BTreeSet<usize>> {
    let key = |p: (f64, f64)| ((p.0 * 1e9).round() as i64, (p.1 * 1e9).round() as i64);
    let mut owners: HashMap<((i64, i64), (i64, i64)), Vec<usize>> = HashMap::new();
    for (r, ring) in rings.iter().enumerate() {
        if ring.len() < 2 {
            continue;
        }
        for w in 0..ring.len() {
            let a = key(ring[w]);
            let b = key(ring[(w + 1) % ring.len()]);
            if a == b {
                continue;
            }
            let seg = if a < b { (a, b) } else { (b, a) };
            let list = owners.entry(seg).or_default();
            if !list.contains(&r) {
                list.push(r);
            }
        }
    }
    let mut sets = vec![BTreeSet::new(); rings.len()];
    for list in owners.values() {
        for &a in list {
            for &b in list {
                if a != b {
                    sets[a].insert(b);
                }
            }
        }
    }
    sets
}

/// Positive directed flows of one city plus the observation mask.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowNetwork {
    flows: BTreeMap<Edge, f64>,
    observed_regions: BTreeSet<usize>,
    observed_edges: BTreeSet<Edge>,
}

impl FlowNetwork {
    /// Builds a network with no observation mask. Zero flows are dropped.
    pub fn new(flows: impl IntoIterator<Item = (Edge, f64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for ((o, d), f) in flows {
            if o == d {
                return Err(Error::Invalid(format!("self-flow on region index {o}")));
            }
            if !f.is_finite() || f < 0.0 {
                return Err(Error::Invalid(format!("flow {f} on ({o},{d}) is not a non-negative finite value")));
            }
            if f > 0.0 && map.insert((o, d), f).is_some() {
                return Err(Error::Invalid(format!("duplicate flow entry ({o},{d})")));
            }
        }
        Ok(Self {
            flows: map,
            ..Default::default()
        })
    }

    /// Attaches an observation mask. Observed edges must be stored pairs.
    pub fn with_observation(&self, regions: BTreeSet<usize>, edges: BTreeSet<Edge>) -> Result<Self> {
        if let Some(e) = edges.iter().find(|e| !self.flows.contains_key(e)) {
            return Err(Error::Invalid(format!("observed edge {e:?} has no positive flow")));
        }
        Ok(Self {
            flows: self.flows.clone(),
            observed_regions: regions,
            observed_edges: edges,
        })
    }

    pub fn flow(&self, e: Edge) -> f64 {
        self.flows.get(&e).copied().unwrap_or(0.0)
    }

    pub fn flows(&self) -> &BTreeMap<Edge, f64> {
        &self.flows
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn observed_regions(&self) -> &BTreeSet<usize> {
        &self.observed_regions
    }

    pub fn observed_edges(&self) -> &BTreeSet<Edge> {
        &self.observed_edges
    }

    /// Positive edges that are not observed, in (origin, dest) order.
    pub fn hidden_edges(&self) -> Vec<Edge> {
        self.flows
            .keys()
            .filter(|e| !self.observed_edges.contains(e))
            .copied()
            .collect()
    }

    pub fn max_region_index(&self) -> Option<usize> {
        self.flows.keys().map(|&(o, d)| o.max(d)).max()
    }
}

/// Per-column mean and population standard deviation of a feature table,
/// plus the statistics of `ln(1 + population)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub log_pop_mean: f64,
    pub log_pop_std: f64,
}

impl NormStats {
    pub fn fit(city: &CityGraph) -> Result<Self> {
        let table = city.features();
        let n = table.n_rows();
        if n < 2 {
            return Err(Error::Invalid("normalization needs at least 2 regions".into()));
        }
        let mut mean = Vec::with_capacity(table.n_features());
        let mut std = Vec::with_capacity(table.n_features());
        for j in 0..table.n_features() {
            let (m, s) = mean_std(table.column(j));
            mean.push(m);
            std.push(s);
        }
        let (log_pop_mean, log_pop_std) = mean_std(city.regions().iter().map(|r| r.population.ln_1p()));
        Ok(Self {
            names: table.names().to_vec(),
            mean,
            std,
            log_pop_mean,
            log_pop_std,
        })
    }

    /// z-score of `ln(1 + p)`; 0 for a zero-variance population column.
    pub fn population_z(&self, p: f64) -> f64 {
        if self.log_pop_std > 0.0 {
            (p.ln_1p() - self.log_pop_mean) / self.log_pop_std
        } else {
            0.0
        }
    }

    /// Inverse of [`normalize_features`] under these statistics.
    pub fn denormalize(&self, city: &CityGraph) -> Result<CityGraph> {
        self.check_dims(city)?;
        let table = city
            .features()
            .map_values(|j, v| if self.std[j] > 0.0 { v * self.std[j] + self.mean[j] } else { self.mean[j] });
        city.with_features(table)
    }

    fn check_dims(&self, city: &CityGraph) -> Result<()> {
        let names = city.features().names();
        if names.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "normalization stats cover {} features, city has {}",
                self.mean.len(),
                names.len()
            )));
        }
        Ok(())
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// z-scores every feature column with `stats` (fit on this city when `None`).
///
/// Zero-variance columns map to 0.
pub fn normalize_features(city: &CityGraph, stats: Option<&NormStats>) -> Result<(CityGraph, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(city)?,
    };
    stats.check_dims(city)?;
    let table = city
        .features()
        .map_values(|j, v| if stats.std[j] > 0.0 { (v - stats.mean[j]) / stats.std[j] } else { 0.0 });
    Ok((city.with_features(table)?, stats))
}

/// Zeroes each entry independently with probability `rate`.
pub fn feature_dropout(features: &FeatureTable, rate: f64, seed: u64) -> Result<FeatureTable> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = features.clone();
    for v in out.values.iter_mut() {
        if rng.random::<f64>() < rate {
            *v = 0.0;
        }
    }
    Ok(out)
}
