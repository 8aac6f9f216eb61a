//! Observation-sampling protocols.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CityGraph, Edge, FlowNetwork};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Uniformly sampled edges.
    RandomEdges,
    /// All flows from or to a sampled region subset.
    NodeBased,
    /// Only flows with both endpoints inside a sampled region subset.
    Internal,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::RandomEdges => "random_edges",
            Scenario::NodeBased => "node_based",
            Scenario::Internal => "internal",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_edges" => Ok(Scenario::RandomEdges),
            "node_based" => Ok(Scenario::NodeBased),
            "internal" => Ok(Scenario::Internal),
            other => Err(Error::Invalid(format!("unknown scenario {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSpec {
    pub scenario: Scenario,
    pub ratio: f64,
    pub seed: u64,
}

impl ObservationSpec {
    pub fn new(scenario: Scenario, ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Domain(format!("observation ratio {ratio} outside (0, 1]")));
        }
        Ok(Self { scenario, ratio, seed })
    }
}

/// Copies `flows` with the observation mask drawn according to `spec`.
pub fn sample_observation(flows: &FlowNetwork, city: &CityGraph, spec: &ObservationSpec) -> Result<FlowNetwork> {
    let spec = ObservationSpec::new(spec.scenario, spec.ratio, spec.seed)?;
    if flows.is_empty() {
        return Err(Error::Invalid("cannot sample observations from an empty flow network".into()));
    }
    let n = city.n_regions();
    if flows.max_region_index().is_some_and(|m| m >= n) {
        return Err(Error::Invalid("flow network references regions outside the city".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (regions, edges): (BTreeSet<usize>, BTreeSet<Edge>) = match spec.scenario {
        Scenario::Internal | Scenario::NodeBased => {
            let k = ((spec.ratio * n as f64).ceil() as usize).clamp(1, n);
            let regions: BTreeSet<usize> = sample(&mut rng, n, k).into_iter().collect();
            let edges = flows
                .flows()
                .keys()
                .filter(|(o, d)| match spec.scenario {
                    Scenario::Internal => regions.contains(o) && regions.contains(d),
                    _ => regions.contains(o) || regions.contains(d),
                })
                .copied()
                .collect();
            (regions, edges)
        }
        Scenario::RandomEdges => {
            let all: Vec<Edge> = flows.flows().keys().copied().collect();
            let k = ((spec.ratio * all.len() as f64).ceil() as usize).clamp(1, all.len());
            let edges: BTreeSet<Edge> = sample(&mut rng, all.len(), k).into_iter().map(|i| all[i]).collect();
            let regions = edges.iter().flat_map(|&(o, d)| [o, d]).collect();
            (regions, edges)
        }
    };
    if edges.is_empty() {
        return Err(Error::EmptyObservation {
            scenario: spec.scenario.to_string(),
            seed: spec.seed,
        });
    }
    flows.with_observation(regions, edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{Adjacency, FeatureTable, Region};

    fn grid_city(n: usize) -> CityGraph {
        let regions = (0..n)
            .map(|i| Region {
                id: format!("R{i}"),
                lat: 42.0 + 0.01 * (i / 10) as f64,
                lon: -71.0 + 0.01 * (i % 10) as f64,
                area_km2: 1.0,
                population: 100.0,
                income: None,
                neighbors: vec![],
            })
            .collect();
        let feats = FeatureTable::new(vec!["x".into()], vec![vec![0.0]; n]).unwrap();
        CityGraph::new(regions, feats, Adjacency::Knn(4)).unwrap()
    }

    fn dense_flows(n: usize) -> FlowNetwork {
        FlowNetwork::new(
            (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|e| (e, 1.0 + (e.0 + e.1) as f64)),
        )
        .unwrap()
    }

    #[test]
    fn internal_edges_are_closed_over_regions() {
        let city = grid_city(40);
        let flows = dense_flows(40);
        let spec = ObservationSpec::new(Scenario::Internal, 0.2, 3).unwrap();
        let obs = sample_observation(&flows, &city, &spec).unwrap();
        assert_eq!(obs.observed_regions().len(), 8);
        assert_eq!(obs.observed_edges().len(), 8 * 7);
        for (o, d) in obs.observed_edges() {
            assert!(obs.observed_regions().contains(o) && obs.observed_regions().contains(d));
        }
        let hidden = obs.hidden_edges();
        assert!(hidden.iter().all(|e| !obs.observed_edges().contains(e)));
        assert_eq!(hidden.len() + obs.observed_edges().len(), flows.len());
    }

    #[test]
    fn full_ratio_observes_everything() {
        let city = grid_city(12);
        let flows = dense_flows(12);
        for scenario in [Scenario::Internal, Scenario::NodeBased, Scenario::RandomEdges] {
            let obs = sample_observation(&flows, &city, &ObservationSpec::new(scenario, 1.0, 0).unwrap()).unwrap();
            assert_eq!(obs.observed_edges().len(), flows.len(), "{scenario}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let city = grid_city(30);
        let flows = dense_flows(30);
        for scenario in [Scenario::Internal, Scenario::NodeBased, Scenario::RandomEdges] {
            let spec = ObservationSpec::new(scenario, 0.3, 11).unwrap();
            let a = sample_observation(&flows, &city, &spec).unwrap();
            let b = sample_observation(&flows, &city, &spec).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn node_based_touches_sampled_regions() {
        let city = grid_city(20);
        let flows = dense_flows(20);
        let obs =
            sample_observation(&flows, &city, &ObservationSpec::new(Scenario::NodeBased, 0.1, 5).unwrap()).unwrap();
        let r = obs.observed_regions();
        assert!(obs.observed_edges().iter().all(|(o, d)| r.contains(o) || r.contains(d)));
        // two regions: 2 * 19 * 2 - 2 edges touching them
        assert_eq!(obs.observed_edges().len(), 2 * 19 * 2 - 2);
    }

    #[test]
    fn empty_internal_sample_errors() {
        let city = grid_city(20);
        let flows = FlowNetwork::new([((0, 1), 1.0)]).unwrap();
        let spec = ObservationSpec::new(Scenario::Internal, 0.05, 1).unwrap();
        assert!(matches!(
            sample_observation(&flows, &city, &spec),
            Err(Error::EmptyObservation { .. })
        ));
        assert!(ObservationSpec::new(Scenario::Internal, 0.0, 1).is_err());
        assert!(ObservationSpec::new(Scenario::Internal, 1.5, 1).is_err());
    }
}
