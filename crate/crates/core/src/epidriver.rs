//! Deterministic metapopulation SEIR driven by a mobility flow matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::Edge;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeirParams {
    /// Transmission rate per day.
    pub beta: f64,
    /// Incubation rate (E to I) per day.
    pub sigma: f64,
    /// Recovery rate (I to R) per day.
    pub gamma: f64,
    /// Fraction of contacts made through mobility mixing.
    pub mixing: f64,
    pub horizon: usize,
    pub dt: f64,
}

impl Default for SeirParams {
    fn default() -> Self {
        Self {
            beta: 0.5,
            sigma: 1.0 / 3.0,
            gamma: 1.0 / 5.0,
            mixing: 0.5,
            horizon: 365,
            dt: 1.0,
        }
    }
}

impl SeirParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("sigma", self.sigma), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mixing) {
            return Err(Error::Invalid(format!("mixing fraction {} outside [0, 1]", self.mixing)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Row-stochastic mixing matrix, dense row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingMatrix {
    n: usize,
    values: Vec<f64>,
}

impl MixingMatrix {
    pub fn identity(n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Self { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Row-normalizes `flows` over `n` regions; rows without outflow become identity rows.
pub fn mixing_from_flows(flows: &BTreeMap<Edge, f64>, n: usize) -> Result<MixingMatrix> {
    let mut values = vec![0.0; n * n];
    for (&(o, d), &f) in flows {
        if o >= n || d >= n {
            return Err(Error::Invalid(format!("flow ({o}, {d}) references a region outside 0..{n}")));
        }
        if !(f >= 0.0 && f.is_finite()) {
            return Err(Error::Invalid(format!("flow ({o}, {d}) = {f} is negative or non-finite")));
        }
        values[o * n + d] += f;
    }
    for i in 0..n {
        let row = &mut values[i * n..(i + 1) * n];
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        } else {
            row[i] = 1.0;
        }
    }
    Ok(MixingMatrix { n, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeirState {
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    pub i: Vec<f64>,
    pub r: Vec<f64>,
}

impl SeirState {
    /// Everyone susceptible except the seeded infectious counts.
    pub fn seeded(populations: &[f64], seeds: &[(usize, f64)]) -> Result<Self> {
        let n = populations.len();
        if populations.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(Error::Invalid("populations must be finite and non-negative".into()));
        }
        let mut s = populations.to_vec();
        let mut i = vec![0.0; n];
        for &(region, count) in seeds {
            if region >= n {
                return Err(Error::Invalid(format!("seed region {region} outside 0..{n}")));
            }
            if !(count >= 0.0) || count > s[region] {
                return Err(Error::Invalid(format!(
                    "seed of {count} exceeds remaining susceptibles in region {region}"
                )));
            }
            s[region] -= count;
            i[region] += count;
        }
        Ok(Self { s, e: vec![0.0; n], i, r: vec![0.0; n] })
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn population(&self, k: usize) -> f64 {
        self.s[k] + self.e[k] + self.i[k] + self.r[k]
    }

    pub fn total_infectious(&self) -> f64 {
        self.i.iter().sum()
    }
}

/// One explicit Euler step with transitions clipped to the source compartment.
pub fn seir_step(state: &SeirState, params: &SeirParams, mixing: &MixingMatrix) -> SeirState {
    let n = state.len();
    let dt = params.dt;
    let prevalence: Vec<f64> = (0..n)
        .map(|k| {
            let p = state.population(k);
            if p > 0.0 {
                state.i[k] / p
            } else {
                0.0
            }
        })
        .collect();
    let mut next = state.clone();
    for k in 0..n {
        let coupled: f64 = mixing.row(k).iter().zip(&prevalence).map(|(m, x)| m * x).sum();
        let lambda = params.beta * ((1.0 - params.mixing) * prevalence[k] + params.mixing * coupled);
        let infected = (lambda * state.s[k] * dt).clamp(0.0, state.s[k]);
        let onset = (params.sigma * state.e[k] * dt).clamp(0.0, state.e[k]);
        let recovered = (params.gamma * state.i[k] * dt).clamp(0.0, state.i[k]);
        next.s[k] = state.s[k] - infected;
        next.e[k] = state.e[k] + infected - onset;
        next.i[k] = state.i[k] + onset - recovered;
        next.r[k] = state.r[k] + recovered;
    }
    next
}

/// Daily states, day 0 included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeirTrajectory {
    pub days: Vec<SeirState>,
}

pub fn simulate(initial: &SeirState, params: &SeirParams, mixing: &MixingMatrix) -> Result<SeirTrajectory> {
    params.validate()?;
    if params.horizon < 1 {
        return Err(Error::Invalid("horizon must be at least one day".into()));
    }
    if mixing.n() != initial.len() {
        return Err(Error::Dimension(format!(
            "mixing matrix over {} regions, state over {}",
            mixing.n(),
            initial.len()
        )));
    }
    let mut days = Vec::with_capacity(params.horizon + 1);
    days.push(initial.clone());
    for _ in 0..params.horizon {
        let next = seir_step(days.last().expect("non-empty"), params, mixing);
        days.push(next);
    }
    Ok(SeirTrajectory { days })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakComparison {
    pub peak_day_a: usize,
    pub peak_day_b: usize,
    pub peak_height_a: f64,
    pub peak_height_b: f64,
    pub day_difference: usize,
    /// |height_b − height_a| / height_a.
    pub relative_height_difference: f64,
}

impl SeirTrajectory {
    /// Day and height of the city-wide infectious peak (first day on ties).
    pub fn peak(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (d, s) in self.days.iter().enumerate() {
            let total = s.total_infectious();
            if total > best.1 {
                best = (d, total);
            }
        }
        best
    }

    pub fn compare_peaks(&self, other: &SeirTrajectory) -> PeakComparison {
        let (da, ha) = self.peak();
        let (db, hb) = other.peak();
        PeakComparison {
            peak_day_a: da,
            peak_day_b: db,
            peak_height_a: ha,
            peak_height_b: hb,
            day_difference: da.abs_diff(db),
            relative_height_difference: if ha > 0.0 { (hb - ha).abs() / ha } else { (hb - ha).abs() },
        }
    }

    /// `day,region,S,E,I,R` rows.
    pub fn to_csv(&self, region_ids: &[String]) -> String {
        let mut out = String::from("day,region,S,E,I,R\n");
        for (d, s) in self.days.iter().enumerate() {
            for (k, id) in region_ids.iter().enumerate() {
                let _ = writeln!(out, "{d},{id},{},{},{},{}", s.s[k], s.e[k], s.i[k], s.r[k]);
            }
        }
        out
    }

    pub fn write_csv(&self, region_ids: &[String], path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv(region_ids)).map_err(|e| Error::io(path, e))
    }
}
