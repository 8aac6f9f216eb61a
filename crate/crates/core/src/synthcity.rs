//! Synthetic cities with known flow-generating fields.
//!
//! Regions sit on a grid or at uniform random positions. Smooth random
//! fields define each region's distance-decay exponent, emissiveness,
//! attractiveness and functional class; ten features are deterministic
//! transforms of these fields and the remaining channels are nuisance. Flows
//! follow the gravity law with pair-specific `G` and `α`, times lognormal
//! noise, and the smallest ones are dropped to reach a target density.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{
    write_features_csv, write_flows_csv, write_regions_csv, Adjacency, CityGraph, FeatureTable, FlowNetwork, Region,
    KNN_ADJACENCY,
};
use crate::segregation::{segregation_index, IncomeField};

const KM_PER_DEGREE: f64 = 111.194_926_644_558_73;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Grid,
    RandomUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sparsity {
    /// Keep every positive flow.
    None,
    /// Drop pairs farther apart than this many km.
    DistanceCutoff(f64),
    /// Keep the `k` largest outflows of each origin.
    TopK(usize),
    /// Drop flows below this value.
    MinFlow(f64),
    /// Keep the largest flows so that exactly this many edges remain.
    TargetEdges(usize),
}

/// Amplitudes of the planted parameter fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Gravity constant at zero field values.
    pub g0: f64,
    pub alpha_mean: f64,
    /// Standard deviation of the per-region decay exponent.
    pub alpha_amp: f64,
    /// Log-scale weight of origin emissiveness.
    pub emit_amp: f64,
    /// Log-scale weight of destination attractiveness.
    pub attract_amp: f64,
    /// Log-scale bonus for destinations of functional class 1.
    pub class_amp: f64,
    /// Correlation length of the smooth fields, km.
    pub length_km: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            g0: 2e-8,
            alpha_mean: 1.6,
            alpha_amp: 0.15,
            emit_amp: 0.25,
            attract_amp: 0.3,
            class_amp: 0.3,
            length_km: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IncomeConfig {
    pub mean: f64,
    /// Log-scale spread of incomes.
    pub contrast: f64,
    /// Correlation length of the smooth income component, km.
    pub length_km: f64,
    /// Target segregation index; `None` draws i.i.d. incomes.
    pub target_si: Option<f64>,
    /// Cluster count at which the target is measured; the segregation
    /// module's default rule when `None`.
    pub k: Option<usize>,
    /// Flow penalty `exp(−κ·|y_i − y_j| / sd(y))`.
    pub homophily: f64,
}

impl Default for IncomeConfig {
    fn default() -> Self {
        Self {
            mean: 60_000.0,
            contrast: 0.4,
            length_km: 12.0,
            target_si: None,
            k: Some(5),
            homophily: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_regions: usize,
    pub layout: Layout,
    pub extent_km: f64,
    pub center: (f64, f64),
    pub pop_log_mean: f64,
    pub pop_log_sd: f64,
    pub noise_sigma: f64,
    pub sparsity: Sparsity,
    pub fields: FieldConfig,
    pub income: IncomeConfig,
    pub n_nuisance: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_regions: 250,
            layout: Layout::Grid,
            extent_km: 40.0,
            center: (42.36, -71.06),
            pop_log_mean: 9.6,
            pop_log_sd: 0.5,
            noise_sigma: 0.3,
            sparsity: Sparsity::TargetEdges(51_786),
            fields: FieldConfig::default(),
            income: IncomeConfig::default(),
            n_nuisance: 42,
            seed: 0,
        }
    }
}

/// Number of informative feature channels.
const FEATURE_UNITS_SEED: u64 = 0x005e_ed0f_f3a7;

pub const N_INFORMATIVE: usize = 10;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions < 10 {
            return Err(Error::Invalid(format!("need at least 10 regions, got {}", self.n_regions)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.pop_log_sd >= 0.0) {
            return Err(Error::Invalid("noise and population spreads must be non-negative".into()));
        }
        if !(self.fields.length_km > 0.0) || !(self.income.length_km > 0.0) {
            return Err(Error::Invalid("correlation lengths must be positive".into()));
        }
        if !(self.extent_km > 0.0) {
            return Err(Error::Invalid("extent must be positive".into()));
        }
        if let Some(t) = self.income.target_si {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Invalid(format!("target SI {t} outside [0, 1]")));
            }
        }
        if let Sparsity::TargetEdges(k) = self.sparsity {
            if k == 0 || k > self.n_regions * (self.n_regions - 1) {
                return Err(Error::Invalid(format!("target edge count {k} impossible")));
            }
        }
        Ok(())
    }
}

/// Stationary Gaussian-like random field from random Fourier features,
/// standardized over the evaluation points.
struct SmoothField {
    waves: Vec<(f64, f64, f64)>,
}

impl SmoothField {
    fn new(length_km: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / length_km).expect("positive scale");
        let waves = (0..64)
            .map(|_| (normal.sample(rng), normal.sample(rng), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        Self { waves }
    }

    fn eval_standardized(&self, points: &[(f64, f64)]) -> Vec<f64> {
        let raw: Vec<f64> = points
            .iter()
            .map(|&(x, y)| self.waves.iter().map(|&(wx, wy, p)| (wx * x + wy * y + p).cos()).sum())
            .collect();
        standardize(raw)
    }
}

fn standardize(v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        v.into_iter().map(|x| (x - m) / sd).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Planted per-region generator fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedFields {
    /// Per-region decay exponent; a pair uses the mean of its endpoints.
    pub alpha: Vec<f64>,
    /// Origin term of `log G`.
    pub log_emit: Vec<f64>,
    /// Destination term of `log G`, class bonus included.
    pub log_attract: Vec<f64>,
    pub class: Vec<u8>,
    pub log_g0: f64,
}

impl PlantedFields {
    pub fn alpha_ij(&self, i: usize, j: usize) -> f64 {
        0.5 * (self.alpha[i] + self.alpha[j])
    }

    pub fn log_g_ij(&self, i: usize, j: usize) -> f64 {
        self.log_g0 + self.log_emit[i] + self.log_attract[j]
    }
}

#[derive(Clone, Debug)]
pub struct SynthCity {
    pub city: CityGraph,
    /// Ground-truth flows; nothing is marked observed.
    pub flows: FlowNetwork,
    pub fields: PlantedFields,
    /// Noise-free, pre-sparsity flows for every ordered pair, row-major.
    pub clean: Vec<f64>,
}

impl SynthCity {
    /// Writes `regions.csv`, `features.csv` and `flows.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        write_regions_csv(&self.city, &dir.join("regions.csv"))?;
        write_features_csv(&self.city, &dir.join("features.csv"))?;
        write_flows_csv(&self.city, self.flows.flows(), &dir.join("flows.csv"))
    }
}

/// Positions in km relative to the center.
fn layout_points(cfg: &SynthConfig, rng: &mut impl Rng) -> (Vec<(f64, f64)>, f64) {
    let n = cfg.n_regions;
    match cfg.layout {
        Layout::Grid => {
            let side = (n as f64).sqrt().ceil() as usize;
            let step = cfg.extent_km / side as f64;
            let pts = (0..n)
                .map(|k| {
                    let (c, r) = (k % side, k / side);
                    ((c as f64 + 0.5) * step - cfg.extent_km / 2.0, (r as f64 + 0.5) * step - cfg.extent_km / 2.0)
                })
                .collect();
            (pts, step * step)
        }
        Layout::RandomUniform => {
            let h = cfg.extent_km / 2.0;
            let pts = (0..n).map(|_| (rng.random_range(-h..h), rng.random_range(-h..h))).collect();
            (pts, cfg.extent_km * cfg.extent_km / n as f64)
        }
    }
}

fn to_latlon(center: (f64, f64), (x, y): (f64, f64)) -> (f64, f64) {
    let lat = center.0 + y / KM_PER_DEGREE;
    let lon = center.1 + x / (KM_PER_DEGREE * center.0.to_radians().cos());
    (lat, lon)
}

/// Latent fields of one city: the feature-visible ones and, for pair
/// generation, hidden replacements mixed into the flow law.
struct Latent {
    decay: Vec<f64>,
    emit: Vec<f64>,
    attract: Vec<f64>,
    class_field: Vec<f64>,
}

impl Latent {
    fn draw(points: &[(f64, f64)], length_km: f64, rng: &mut impl Rng) -> Self {
        let mut f = || SmoothField::new(length_km, rng).eval_standardized(points);
        Self { decay: f(), emit: f(), attract: f(), class_field: f() }
    }
}

fn informative_features(l: &Latent, class: &[u8], scales: &[f64; N_INFORMATIVE]) -> Vec<Vec<f64>> {
    (0..l.decay.len())
        .map(|i| {
            let (a, s, g, k) = (l.decay[i], l.emit[i], l.attract[i], class[i] as f64);
            let raw = [
                a,
                s,
                g,
                k,
                (0.5 * g).exp(),
                a.tanh(),
                (s + 1.0).powi(2),
                a + g,
                s.exp().ln_1p(),
                k * (g + 3.0),
            ];
            raw.iter().zip(scales).map(|(v, c)| v * c).collect()
        })
        .collect()
}

fn feature_names(n_nuisance: usize) -> Vec<String> {
    let informative = [
        "road_density",
        "residential_area",
        "poi_count",
        "commercial_zone",
        "amenity_density",
        "transit_stops",
        "building_volume",
        "intersection_count",
        "housing_units",
        "retail_floor_area",
    ];
    informative
        .iter()
        .map(|s| s.to_string())
        .chain((0..n_nuisance).map(|k| format!("osm_{k:02}")))
        .collect()
}

/// Generates one city from `cfg`.
pub fn generate_city(cfg: &SynthConfig) -> Result<SynthCity> {
    generate_with(cfg, 0.0, cfg.income.target_si)
}

fn generate_with(cfg: &SynthConfig, divergence: f64, target_si: Option<f64>) -> Result<SynthCity> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&divergence) {
        return Err(Error::Invalid(format!("divergence {divergence} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_regions;
    let (points, area) = layout_points(cfg, &mut rng);
    let visible = Latent::draw(&points, cfg.fields.length_km, &mut rng);
    let hidden = Latent::draw(&points, cfg.fields.length_km, &mut rng);
    let class: Vec<u8> = visible.class_field.iter().map(|&c| u8::from(c > 0.0)).collect();

    // Feature units are shared by every city.
    let mut units = ChaCha8Rng::seed_from_u64(FEATURE_UNITS_SEED);
    let mut scales = [0.0; N_INFORMATIVE];
    for s in scales.iter_mut() {
        *s = 10f64.powf(units.random_range(-1.0..3.0));
    }
    let mut rows = informative_features(&visible, &class, &scales);
    let nuisance_smooth = cfg.n_nuisance / 2;
    let smooth: Vec<Vec<f64>> = (0..nuisance_smooth)
        .map(|_| SmoothField::new(cfg.fields.length_km, &mut rng).eval_standardized(&points))
        .collect();
    let lognormal = LogNormal::new(0.0, 1.0).expect("valid");
    for (i, row) in rows.iter_mut().enumerate() {
        for f in &smooth {
            row.push(10.0 * f[i]);
        }
        for _ in nuisance_smooth..cfg.n_nuisance {
            row.push(lognormal.sample(&mut rng));
        }
    }

    let pop_dist = LogNormal::new(cfg.pop_log_mean, cfg.pop_log_sd).map_err(|e| Error::Invalid(e.to_string()))?;
    let regions: Vec<Region> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let (lat, lon) = to_latlon(cfg.center, p);
            Region {
                id: format!("Z{i:04}"),
                lat,
                lon,
                area_km2: area,
                population: pop_dist.sample(&mut rng).round().max(1.0),
                income: None,
                neighbors: vec![],
            }
        })
        .collect();
    let features = FeatureTable::new(feature_names(cfg.n_nuisance), rows)?;
    let mut city = CityGraph::new(regions, features, Adjacency::Knn(KNN_ADJACENCY))?;

    let incomes = match target_si {
        Some(t) => {
            let k = cfg.income.k;
            plant_income(&city, &cfg.income, t, k, rng.random())?
                .incomes()
                .to_vec()
        }
        None => iid_incomes(n, &cfg.income, &mut rng),
    };
    city = city.with_incomes(Some(&incomes))?;

    let d = divergence;
    let fc = &cfg.fields;
    let mix = |v: &[f64], h: &[f64]| -> Vec<f64> {
        v.iter().zip(h).map(|(a, b)| (1.0 - d) * a + d * b).collect()
    };
    let decay = mix(&visible.decay, &hidden.decay);
    let emit = mix(&visible.emit, &hidden.emit);
    let attract = mix(&visible.attract, &hidden.attract);
    let fields = PlantedFields {
        alpha: decay.iter().map(|a| (fc.alpha_mean + fc.alpha_amp * a).max(0.1)).collect(),
        log_emit: emit.iter().map(|s| fc.emit_amp * s).collect(),
        log_attract: attract.iter().zip(&class).map(|(g, &k)| fc.attract_amp * g + fc.class_amp * k as f64).collect(),
        class,
        log_g0: fc.g0.ln(),
    };

    let income_sd = {
        let m = incomes.iter().sum::<f64>() / n as f64;
        (incomes.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    let mut clean = vec![0.0; n * n];
    let mut noisy = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut log_f = fields.log_g_ij(i, j) + city.population(i).ln() + city.population(j).ln()
                - fields.alpha_ij(i, j) * city.distance(i, j).ln();
            if cfg.income.homophily > 0.0 && income_sd > 0.0 {
                log_f -= cfg.income.homophily * (incomes[i] - incomes[j]).abs() / income_sd;
            }
            clean[i * n + j] = log_f.exp();
            let eps: f64 = StandardNormal.sample(&mut rng);
            noisy[i * n + j] = (log_f + cfg.noise_sigma * eps).exp();
        }
    }
    let keep = sparsity_mask(cfg, &city, &noisy);
    let flows = FlowNetwork::new(
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && keep[i * n + j])
            .map(|(i, j)| ((i, j), noisy[i * n + j])),
    )?;
    Ok(SynthCity { city, flows, fields, clean })
}

fn sparsity_mask(cfg: &SynthConfig, city: &CityGraph, flows: &[f64]) -> Vec<bool> {
    let n = cfg.n_regions;
    let off = |k: usize| k / n != k % n;
    match cfg.sparsity {
        Sparsity::None => (0..n * n).map(off).collect(),
        Sparsity::DistanceCutoff(km) => (0..n * n).map(|k| off(k) && city.distance(k / n, k % n) <= km).collect(),
        Sparsity::MinFlow(t) => (0..n * n).map(|k| off(k) && flows[k] >= t).collect(),
        Sparsity::TopK(top) => {
            let mut keep = vec![false; n * n];
            for i in 0..n {
                let mut js: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                js.sort_by(|&a, &b| flows[i * n + b].total_cmp(&flows[i * n + a]).then(a.cmp(&b)));
                for &j in js.iter().take(top) {
                    keep[i * n + j] = true;
                }
            }
            keep
        }
        Sparsity::TargetEdges(target) => {
            let mut order: Vec<usize> = (0..n * n).filter(|&k| off(k)).collect();
            order.sort_by(|&a, &b| flows[b].total_cmp(&flows[a]).then(a.cmp(&b)));
            let mut keep = vec![false; n * n];
            for &k in order.iter().take(target) {
                keep[k] = true;
            }
            keep
        }
    }
}

fn iid_incomes(n: usize, cfg: &IncomeConfig, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            cfg.mean * (cfg.contrast * z).exp()
        })
        .collect()
}

/// Income field with a measured segregation index within ±0.05 of `target`.
///
/// Incomes are `mean·exp(contrast·z)` where `z = w·smooth + (1−w)·noise`
/// mixes a spatially correlated field with i.i.d. noise. A grid of weights
/// is scanned per draw and fresh draws are taken until one lands within
/// tolerance. Targets at or above 0.999 give two homogeneous halves split at
/// the median longitude.
pub fn plant_income(city: &CityGraph, cfg: &IncomeConfig, target: f64, k: Option<usize>, seed: u64) -> Result<IncomeField> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Invalid(format!("target SI {target} outside [0, 1]")));
    }
    let n = city.n_regions();
    let populations: Vec<f64> = city.regions().iter().map(|r| r.population).collect();
    let neighbors: Vec<Vec<usize>> = city.regions().iter().map(|r| r.neighbors.clone()).collect();
    let field_of = |z: &[f64]| -> Result<IncomeField> {
        IncomeField::new(
            z.iter().map(|v| cfg.mean * (cfg.contrast * v).exp()).collect(),
            populations.clone(),
            neighbors.clone(),
        )
    };
    if target >= 0.999 {
        let mut lons: Vec<f64> = city.regions().iter().map(|r| r.lon).collect();
        lons.sort_by(f64::total_cmp);
        let cut = lons[n / 2];
        let z: Vec<f64> = city.regions().iter().map(|r| if r.lon < cut { -1.0 } else { 1.0 }).collect();
        return field_of(&z);
    }
    let lat0 = city.region(0).lat;
    let points: Vec<(f64, f64)> = city
        .regions()
        .iter()
        .map(|r| {
            let x = (r.lon - city.region(0).lon) * KM_PER_DEGREE * lat0.to_radians().cos();
            let y = (r.lat - lat0) * KM_PER_DEGREE;
            (x, y)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, IncomeField)> = None;
    for _ in 0..100 {
        let smooth = SmoothField::new(cfg.length_km, &mut rng).eval_standardized(&points);
        let iid = standardize((0..n).map(|_| StandardNormal.sample(&mut rng)).collect());
        for step in 0..=20 {
            let w = step as f64 / 20.0;
            let z = standardize(smooth.iter().zip(&iid).map(|(s, e)| w * s + (1.0 - w) * e).collect());
            let f = field_of(&z)?;
            let si = segregation_index(&f, k)?.si;
            if best.as_ref().is_none_or(|(b, _)| (si - target).abs() < (b - target).abs()) {
                best = Some((si, f));
            }
        }
        if best.as_ref().is_some_and(|(si, _)| (si - target).abs() <= 0.05) {
            break;
        }
    }
    let (si, field) = best.expect("at least one draw");
    if (si - target).abs() > 0.05 {
        return Err(Error::UnattainableSi { target, best: si });
    }
    Ok(field)
}

/// A city and a second city whose flow law drifts by `divergence` and
/// whose planted segregation index differs by `si_offset`.
pub fn generate_pair(cfg: &SynthConfig, divergence: f64, si_offset: f64) -> Result<(SynthCity, SynthCity)> {
    let base_si = cfg.income.target_si;
    let a = generate_with(cfg, 0.0, base_si)?;
    let b_target = match (base_si, si_offset) {
        (Some(t), o) => Some(t + o),
        (None, o) if o == 0.0 => None,
        (None, _) => return Err(Error::Invalid("an SI offset needs a base target SI".into())),
    };
    if let Some(t) = b_target {
        if t > 1.0 {
            return Err(Error::Invalid(format!("target SI {t} for the second city exceeds 1")));
        }
    }
    let mut cfg_b = cfg.clone();
    cfg_b.seed = cfg.seed ^ 0x9E37_79B9_7F4A_7C15;
    let b = generate_with(&cfg_b, divergence, b_target)?;
    Ok((a, b))
}
