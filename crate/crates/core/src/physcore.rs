//! Gravity models: the constant-parameter baseline and meta-Gravity, whose
//! `G` and `α` are produced per origin-destination pair by two MLPs.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logit, softplus_inverse, Linear, Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geodata::{CityGraph, Edge, FlowNetwork, NormStats};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GravityParams {
    pub g: f64,
    pub alpha: f64,
}

impl GravityParams {
    pub fn new(g: f64, alpha: f64) -> Result<Self> {
        if !(g > 0.0 && g.is_finite()) || !alpha.is_finite() {
            return Err(Error::Domain(format!("gravity parameters G={g}, alpha={alpha}")));
        }
        Ok(Self { g, alpha })
    }

    pub fn log_flow(&self, pi: f64, pj: f64, d: f64) -> f64 {
        self.g.ln() + pi.ln() + pj.ln() - self.alpha * d.ln()
    }
}

/// `G·P_i·P_j / D^α`, evaluated in log space.
pub fn gravity_flow(params: &GravityParams, pi: f64, pj: f64, d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("distance {d} must be positive")));
    }
    if !(pi >= 0.0 && pj >= 0.0) {
        return Err(Error::Domain(format!("populations {pi}, {pj} must be non-negative")));
    }
    if pi == 0.0 || pj == 0.0 {
        return Ok(0.0);
    }
    Ok(params.log_flow(pi, pj, d).exp())
}

/// Natural log of a population, floored at one person so empty regions stay finite.
pub fn log_population(p: f64) -> f64 {
    p.max(1.0).ln()
}

/// Least-squares fit of `log F − log P_i − log P_j = log G − α log D` over observed edges.
pub fn fit_classical_gravity(obs: &FlowNetwork, city: &CityGraph) -> Result<GravityParams> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(o, d) in obs.observed_edges() {
        let f = obs.flow((o, d));
        let (po, pd) = (city.population(o), city.population(d));
        if f > 0.0 && po > 0.0 && pd > 0.0 {
            xs.push(city.distance(o, d).ln());
            ys.push(f.ln() - po.ln() - pd.ln());
        }
    }
    if xs.len() < 2 {
        return Err(Error::Invalid(format!(
            "gravity fit needs at least 2 observed positive flows, got {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 1e-12 * n * mx.abs().max(1.0).powi(2) {
        return Err(Error::Invalid(
            "all observed pairs lie at one distance; the decay exponent is unidentifiable".into(),
        ));
    }
    let slope = sxy / sxx;
    GravityParams::new((my - slope * mx).exp(), -slope)
}

/// Node input matrix `h⁰`: normalized features followed by the population z-score.
pub fn node_inputs(city: &CityGraph, stats: &NormStats) -> Matrix {
    let n = city.n_regions();
    let f = city.features().n_features();
    let mut m = Matrix::zeros(n, f + 1);
    for i in 0..n {
        m.data[i * (f + 1)..i * (f + 1) + f].copy_from_slice(city.features().row(i));
        m.data[i * (f + 1) + f] = stats.population_z(city.population(i));
    }
    m
}

/// Rejects node inputs that look unnormalized (any magnitude above 10³).
pub fn check_normalized(h0: &Matrix) -> Result<()> {
    match h0.data.iter().position(|v| v.abs() > 1e3) {
        Some(k) => Err(Error::Invalid(format!(
            "node input {} of region {} is {}; features look unnormalized",
            k % h0.cols,
            k / h0.cols,
            h0.data[k]
        ))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaGravityConfig {
    pub hidden: Vec<usize>,
    pub alpha_max: f64,
}

impl Default for MetaGravityConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], alpha_max: 4.0 }
    }
}

/// MLP over the ordered concatenation `h_i ⊕ h_j`, with the first layer
/// split into origin and destination blocks so it runs per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PairMlp {
    first_src: Linear,
    first_dst: Linear,
    rest: Vec<Linear>,
}

impl PairMlp {
    fn new(store: &mut ParamStore, name: &str, inp: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        assert!(!hidden.is_empty(), "meta-Gravity networks need at least one hidden layer");
        let first_src = Linear::new(store, &format!("{name}.l0_src"), inp, hidden[0], false, rng);
        let first_dst = Linear::new(store, &format!("{name}.l0_dst"), inp, hidden[0], true, rng);
        let widths: Vec<usize> = hidden.iter().copied().chain([1]).collect();
        let rest = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(store, &format!("{name}.l{}", k + 1), w[0], w[1], true, rng))
            .collect();
        Self { first_src, first_dst, rest }
    }

    fn last(&self) -> &Linear {
        self.rest.last().expect("output layer")
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, h0: Var, src: &Rc<[usize]>, dst: &Rc<[usize]>) -> Var {
        let a = self.first_src.apply(tape, store, h0);
        let b = self.first_dst.apply(tape, store, h0);
        let ga = tape.gather(a, src.clone());
        let gb = tape.gather(b, dst.clone());
        let mut x = tape.add(ga, gb);
        for layer in &self.rest {
            x = tape.relu(x);
            x = layer.apply(tape, store, x);
        }
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaGravityNet {
    g_net: PairMlp,
    alpha_net: PairMlp,
    pub alpha_max: f64,
}

/// Per-edge outputs of a meta-Gravity forward pass (E×1 each).
pub struct MetaOutput {
    pub log_flow: Var,
    pub log_g: Var,
    pub alpha: Var,
}

impl MetaGravityNet {
    pub fn new(store: &mut ParamStore, input_dim: usize, cfg: &MetaGravityConfig, rng: &mut impl Rng) -> Self {
        Self {
            g_net: PairMlp::new(store, "meta.g", input_dim, &cfg.hidden, rng),
            alpha_net: PairMlp::new(store, "meta.alpha", input_dim, &cfg.hidden, rng),
            alpha_max: cfg.alpha_max,
        }
    }

    /// Zeroes both output layers and sets their biases so every edge gets `(g, alpha)`.
    pub fn set_constant(&self, store: &mut ParamStore, params: GravityParams) {
        let alpha = params.alpha.clamp(0.0, self.alpha_max);
        for (net, bias) in [
            (&self.g_net, softplus_inverse(params.g)),
            (&self.alpha_net, if alpha <= 0.0 { -800.0 } else if alpha >= self.alpha_max { 800.0 } else { logit(alpha / self.alpha_max) }),
        ] {
            let last = net.last();
            store.get_mut(last.w).data.fill(0.0);
            let b = last.b.expect("output layer has a bias");
            store.get_mut(b).data.fill(bias);
        }
    }

    /// `log F̂ᵍ = log G + log P_i + log P_j − α log D` on the edges `(src[k], dst[k])`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h0: Var,
        src: &Rc<[usize]>,
        dst: &Rc<[usize]>,
        log_pp: Var,
        log_d: Var,
    ) -> MetaOutput {
        let g_raw = self.g_net.apply(tape, store, h0, src, dst);
        let log_g = tape.log_softplus(g_raw);
        let a_raw = self.alpha_net.apply(tape, store, h0, src, dst);
        let a_sig = tape.sigmoid(a_raw);
        let alpha = tape.scale(a_sig, self.alpha_max);
        let decay = tape.mul(alpha, log_d);
        let base = tape.add(log_g, log_pp);
        let log_flow = tape.sub(base, decay);
        MetaOutput { log_flow, log_g, alpha }
    }
}

/// Per-edge inputs shared by the gravity terms.
pub fn edge_log_terms(city: &CityGraph, edges: &[Edge]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut log_pp = Vec::with_capacity(edges.len());
    let mut log_d = Vec::with_capacity(edges.len());
    for &(o, d) in edges {
        let dist = city.distance(o, d);
        if !(dist > 0.0) {
            return Err(Error::Domain(format!("edge ({o}, {d}) has non-positive distance {dist}")));
        }
        log_pp.push(log_population(city.population(o)) + log_population(city.population(d)));
        log_d.push(dist.ln());
    }
    Ok((log_pp, log_d))
}

/// Evaluates meta-Gravity flows `F̂ᵍ` on `edges` of a normalized city.
pub fn meta_gravity_forward(
    net: &MetaGravityNet,
    store: &ParamStore,
    city: &CityGraph,
    stats: &NormStats,
    edges: &[Edge],
) -> Result<BTreeMap<Edge, f64>> {
    let h0 = node_inputs(city, stats);
    check_normalized(&h0)?;
    let (log_pp, log_d) = edge_log_terms(city, edges)?;
    let src: Rc<[usize]> = edges.iter().map(|e| e.0).collect();
    let dst: Rc<[usize]> = edges.iter().map(|e| e.1).collect();
    let mut tape = Tape::new();
    let h = tape.input(h0);
    let pp = tape.input(Matrix::column(log_pp));
    let ld = tape.input(Matrix::column(log_d));
    let out = net.forward(&mut tape, store, h, &src, &dst, pp, ld);
    let v = tape.value(out.log_flow);
    Ok(edges.iter().zip(&v.data).map(|(&e, &l)| (e, l.exp())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{normalize_features, Adjacency, FeatureTable, Region};
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn city(n: usize, seed: u64) -> CityGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regions = (0..n)
            .map(|i| Region {
                id: format!("R{i}"),
                lat: 42.0 + rng.random_range(0.0..0.3),
                lon: -71.0 + rng.random_range(0.0..0.3),
                area_km2: 1.0,
                population: rng.random_range(500.0..50_000.0),
                income: None,
                neighbors: vec![],
            })
            .collect();
        let feats = FeatureTable::new(
            vec!["a".into(), "b".into()],
            (0..n).map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(-5.0..5.0)]).collect(),
        )
        .unwrap();
        CityGraph::new(regions, feats, Adjacency::Knn(4)).unwrap()
    }

    fn exact_flows(c: &CityGraph, g: f64, alpha: f64) -> FlowNetwork {
        let p = GravityParams::new(g, alpha).unwrap();
        let flows = FlowNetwork::new(c.all_pairs().into_iter().map(|(o, d)| {
            ((o, d), gravity_flow(&p, c.population(o), c.population(d), c.distance(o, d)).unwrap())
        }))
        .unwrap();
        let regions = (0..c.n_regions()).collect();
        let edges = flows.flows().keys().copied().collect();
        flows.with_observation(regions, edges).unwrap()
    }

    #[test]
    fn gravity_flow_examples() {
        let unit = GravityParams::new(1.0, 0.0).unwrap();
        assert!((gravity_flow(&unit, 1.0, 1.0, 17.0).unwrap() - 1.0).abs() < 1e-15);
        let p = GravityParams::new(0.01, 2.0).unwrap();
        assert!((gravity_flow(&p, 1000.0, 1000.0, 10.0).unwrap() - 100.0).abs() < 1e-10);
        assert_eq!(gravity_flow(&p, 0.0, 1000.0, 10.0).unwrap(), 0.0);
        assert!(gravity_flow(&p, 1.0, 1.0, 0.0).is_err());
        assert!(gravity_flow(&p, 1.0, 1.0, -3.0).is_err());
    }

    #[test]
    fn classical_fit_recovers_exact_parameters() {
        let c = city(30, 1);
        let fit = fit_classical_gravity(&exact_flows(&c, 0.01, 2.0), &c).unwrap();
        assert!((fit.g - 0.01).abs() < 1e-6 * 0.01);
        assert!((fit.alpha - 2.0).abs() < 1e-6 * 2.0);
        let flat = fit_classical_gravity(&exact_flows(&c, 3e-4, 0.0), &c).unwrap();
        assert!(flat.alpha.abs() < 1e-9);
    }

    #[test]
    fn classical_fit_rejects_degenerate_inputs() {
        let c = city(10, 2);
        let one = FlowNetwork::new([((0, 1), 5.0)]).unwrap();
        let one = one.with_observation([0, 1].into(), [(0, 1)].into()).unwrap();
        assert!(fit_classical_gravity(&one, &c).is_err());
        let two = FlowNetwork::new([((0, 1), 5.0), ((1, 0), 7.0)]).unwrap();
        let two = two.with_observation([0, 1].into(), [(0, 1), (1, 0)].into()).unwrap();
        assert!(fit_classical_gravity(&two, &c).is_err());
    }

    #[test]
    fn constant_networks_reduce_to_gravity() {
        let c = city(12, 3);
        let (norm, stats) = normalize_features(&c, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::default();
        let net = MetaGravityNet::new(&mut store, 3, &MetaGravityConfig { hidden: vec![8, 8], alpha_max: 4.0 }, &mut rng);
        for params in [GravityParams::new(1.0, 0.0).unwrap(), GravityParams::new(2e-5, 1.7).unwrap()] {
            net.set_constant(&mut store, params);
            let edges = c.all_pairs();
            let out = meta_gravity_forward(&net, &store, &norm, &stats, &edges).unwrap();
            for (&(o, d), &f) in &out {
                let want = gravity_flow(&params, c.population(o), c.population(d), c.distance(o, d)).unwrap();
                assert!((f - want).abs() <= 1e-10 * want, "{f} vs {want}");
            }
        }
    }

    #[test]
    fn meta_gravity_is_directed() {
        let c = city(8, 4);
        let (norm, stats) = normalize_features(&c, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::default();
        let net = MetaGravityNet::new(&mut store, 3, &MetaGravityConfig { hidden: vec![8, 8], alpha_max: 4.0 }, &mut rng);
        let out = meta_gravity_forward(&net, &store, &norm, &stats, &[(0, 1), (1, 0)]).unwrap();
        assert!((out[&(0, 1)] - out[&(1, 0)]).abs() > 1e-12);
        assert!(out.values().all(|f| f.is_finite() && *f > 0.0));
    }

    #[test]
    fn unnormalized_inputs_rejected() {
        let c = city(8, 6);
        let stats = NormStats::fit(&c).unwrap();
        let mut h0 = node_inputs(&c, &stats);
        assert!(check_normalized(&h0).is_ok());
        h0.data[3] = 5e3;
        assert!(check_normalized(&h0).is_err());
    }

    proptest! {
        #[test]
        fn log_gravity_is_linear(
            g in 1e-8f64..10.0, alpha in 0.0f64..4.0,
            pi in 1.0f64..1e8, pj in 1.0f64..1e8, d in 0.1f64..2e4,
        ) {
            let p = GravityParams::new(g, alpha).unwrap();
            let f = gravity_flow(&p, pi, pj, d).unwrap();
            prop_assert!(f.is_finite() && f > 0.0);
            let want = g.ln() + pi.ln() + pj.ln() - alpha * d.ln();
            prop_assert!((f.ln() - want).abs() <= 1e-12 * want.abs().max(1.0));
            prop_assert!(gravity_flow(&p, pi * 1.5, pj, d).unwrap() > f);
            prop_assert!(gravity_flow(&p, pi, pj * 1.5, d).unwrap() > f);
            if alpha > 1e-6 {
                prop_assert!(gravity_flow(&p, pi, pj, d * 1.5).unwrap() < f);
            }
        }
    }
}
