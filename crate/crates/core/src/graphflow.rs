//! Edge-enhanced graph transformer over candidate flow edges and the
//! log-space flow head `log F̂ = MLP(P_i, P_j, h_i, h_j, e_ij) − α log D + ε`.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Linear, Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geodata::{CityGraph, Edge, NormStats};
use crate::metrics::{quantile_sorted, spearman};
use crate::physcore::{check_normalized, edge_log_terms, node_inputs, GravityParams, MetaGravityConfig, MetaGravityNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_node: usize,
    pub d_edge: usize,
    pub d_qkv: usize,
    pub heads: usize,
    /// Hidden width of the flow-head MLP.
    pub head_hidden: usize,
    pub meta: MetaGravityConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_layers: 3, d_node: 64, d_edge: 32, d_qkv: 64, heads: 4, head_hidden: 64, meta: MetaGravityConfig::default() }
    }
}

impl ModelConfig {
    /// A small configuration that trains in seconds on a single core.
    pub fn compact() -> Self {
        Self {
            n_layers: 2,
            d_node: 16,
            d_edge: 8,
            d_qkv: 16,
            heads: 2,
            head_hidden: 32,
            meta: MetaGravityConfig { hidden: vec![32], alpha_max: 4.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_node == 0 || self.d_qkv == 0 || self.heads == 0 || self.head_hidden == 0 {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        if self.d_edge < 2 {
            return Err(Error::Invalid(format!("d_edge must be at least 2, got {}", self.d_edge)));
        }
        if self.d_qkv % self.heads != 0 {
            return Err(Error::Invalid(format!("d_qkv {} not divisible by {} heads", self.d_qkv, self.heads)));
        }
        if self.meta.hidden.is_empty() || self.meta.hidden.contains(&0) {
            return Err(Error::Invalid("meta-Gravity networks need non-empty hidden layers".into()));
        }
        if !(self.meta.alpha_max > 0.0) {
            return Err(Error::Invalid("alpha_max must be positive".into()));
        }
        Ok(())
    }
}

/// Standardization of `log D` and `log F̂ᵍ` for the initial edge state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeTransform {
    pub log_d_mean: f64,
    pub log_d_std: f64,
    pub log_fg_mean: f64,
    pub log_fg_std: f64,
}

impl Default for EdgeTransform {
    fn default() -> Self {
        Self { log_d_mean: 0.0, log_d_std: 1.0, log_fg_mean: 0.0, log_fg_std: 1.0 }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    (m, if s > 0.0 { s } else { 1.0 })
}

impl EdgeTransform {
    pub fn fit(log_d: &[f64], log_fg: &[f64]) -> Result<Self> {
        if log_d.is_empty() || log_d.len() != log_fg.len() {
            return Err(Error::Dimension(format!("{} distances vs {} base flows", log_d.len(), log_fg.len())));
        }
        let (log_d_mean, log_d_std) = mean_std(log_d);
        let (log_fg_mean, log_fg_std) = mean_std(log_fg);
        Ok(Self { log_d_mean, log_d_std, log_fg_mean, log_fg_std })
    }

    pub fn apply(&self, log_d: f64, log_fg: f64) -> [f64; 2] {
        [(log_d - self.log_d_mean) / self.log_d_std, (log_fg - self.log_fg_mean) / self.log_fg_std]
    }
}

/// `e⁰_ij = [z(log D_ij), z(log F̂ᵍ_ij)]` with the fitted transform.
pub fn init_edge_features(
    city: &CityGraph,
    base_flows: &BTreeMap<Edge, f64>,
) -> Result<(BTreeMap<Edge, [f64; 2]>, EdgeTransform)> {
    if let Some((e, f)) = base_flows.iter().find(|(_, f)| !(**f > 0.0 && f.is_finite())) {
        return Err(Error::Domain(format!("base flow {f} on edge {e:?} is not positive and finite")));
    }
    let edges: Vec<Edge> = base_flows.keys().copied().collect();
    let (_, log_d) = edge_log_terms(city, &edges)?;
    let log_fg: Vec<f64> = base_flows.values().map(|f| f.ln()).collect();
    let t = EdgeTransform::fit(&log_d, &log_fg)?;
    let out = edges.iter().zip(log_d.iter().zip(&log_fg)).map(|(&e, (&d, &g))| (e, t.apply(d, g))).collect();
    Ok((out, t))
}

/// A normalized city together with its candidate edge set.
#[derive(Clone, Debug)]
pub struct GraphContext {
    edges: Vec<Edge>,
    index: BTreeMap<Edge, usize>,
    incoming: Vec<Vec<usize>>,
    log_d: Vec<f64>,
    log_pp: Vec<f64>,
    h0: Matrix,
    pop_z: Vec<f64>,
}

impl GraphContext {
    /// `city` must already carry normalized features.
    pub fn new(city: &CityGraph, stats: &NormStats, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let n = city.n_regions();
        let set: BTreeSet<Edge> = edges.into_iter().collect();
        if let Some(&(o, d)) = set.iter().find(|&&(o, d)| o >= n || d >= n || o == d) {
            return Err(Error::Invalid(format!("edge ({o}, {d}) invalid for {n} regions")));
        }
        let edges: Vec<Edge> = set.into_iter().collect();
        let h0 = node_inputs(city, stats);
        check_normalized(&h0)?;
        let (log_pp, log_d) = edge_log_terms(city, &edges)?;
        let mut incoming = vec![Vec::new(); n];
        for (k, &(_, d)) in edges.iter().enumerate() {
            incoming[d].push(k);
        }
        let index = edges.iter().enumerate().map(|(k, &e)| (e, k)).collect();
        let pop_z = (0..n).map(|i| stats.population_z(city.population(i))).collect();
        Ok(Self { edges, index, incoming, log_d, log_pp, h0, pop_z })
    }

    pub fn n_nodes(&self) -> usize {
        self.incoming.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_index(&self, e: Edge) -> Option<usize> {
        self.index.get(&e).copied()
    }

    pub fn log_d(&self) -> &[f64] {
        &self.log_d
    }

    pub fn log_pp(&self) -> &[f64] {
        &self.log_pp
    }

    pub fn node_inputs(&self) -> &Matrix {
        &self.h0
    }

    pub fn input_dim(&self) -> usize {
        self.h0.cols
    }
}

fn rc(v: Vec<usize>) -> Rc<[usize]> {
    v.into()
}

fn local_map(ids: &[usize], n: usize) -> Vec<usize> {
    let mut m = vec![usize::MAX; n];
    for (k, &i) in ids.iter().enumerate() {
        m[i] = k;
    }
    m
}

struct LayerPlan {
    att_edges: Vec<usize>,
    att_e: Rc<[usize]>,
    att_src: Rc<[usize]>,
    att_dst_prev: Rc<[usize]>,
    att_seg: Rc<[usize]>,
    self_nodes: Rc<[usize]>,
    upd_e: Rc<[usize]>,
    upd_src: Rc<[usize]>,
    upd_dst: Rc<[usize]>,
}

/// Which node and edge states each layer must compute to answer a query.
pub struct Plan {
    nodes: Vec<Vec<usize>>,
    edges: Vec<Vec<usize>>,
    layers: Vec<LayerPlan>,
    query: Vec<usize>,
    h0_rows: Rc<[usize]>,
    meta_src: Rc<[usize]>,
    meta_dst: Rc<[usize]>,
    query_in_e0: Rc<[usize]>,
    head_src: Rc<[usize]>,
    head_dst: Rc<[usize]>,
    head_e: Rc<[usize]>,
}

impl Plan {
    /// Plan for predictions on `query` (edge indices into the context) and
    /// final states of `top_nodes`.
    pub fn new(ctx: &GraphContext, n_layers: usize, query: &[usize], top_nodes: &[usize]) -> Result<Self> {
        let n = ctx.n_nodes();
        if let Some(&q) = query.iter().find(|&&q| q >= ctx.edges.len()) {
            return Err(Error::Invalid(format!("query edge index {q} out of range")));
        }
        if let Some(&v) = top_nodes.iter().find(|&&v| v >= n) {
            return Err(Error::Invalid(format!("node {v} out of range")));
        }
        let query: Vec<usize> = query.to_vec();
        let mut nodes = vec![Vec::new(); n_layers + 1];
        let mut edges = vec![Vec::new(); n_layers + 1];
        let top_e: BTreeSet<usize> = query.iter().copied().collect();
        let mut top_n: BTreeSet<usize> = top_nodes.iter().copied().collect();
        for &q in &top_e {
            top_n.insert(ctx.edges[q].0);
            top_n.insert(ctx.edges[q].1);
        }
        nodes[n_layers] = top_n.into_iter().collect();
        edges[n_layers] = top_e.into_iter().collect();
        let mut att = vec![Vec::new(); n_layers + 1];
        for l in (1..=n_layers).rev() {
            let a: Vec<usize> = nodes[l].iter().flat_map(|&v| ctx.incoming[v].iter().copied()).collect();
            let mut e_prev: BTreeSet<usize> = edges[l].iter().copied().collect();
            e_prev.extend(a.iter().copied());
            let mut n_prev: BTreeSet<usize> = nodes[l].iter().copied().collect();
            for &k in &e_prev {
                n_prev.insert(ctx.edges[k].0);
                n_prev.insert(ctx.edges[k].1);
            }
            edges[l - 1] = e_prev.into_iter().collect();
            nodes[l - 1] = n_prev.into_iter().collect();
            att[l] = a;
        }
        let node_maps: Vec<Vec<usize>> = nodes.iter().map(|v| local_map(v, n)).collect();
        let edge_maps: Vec<Vec<usize>> = edges.iter().map(|v| local_map(v, ctx.edges.len())).collect();
        let mut layers = Vec::with_capacity(n_layers);
        for l in 1..=n_layers {
            let (np, nl, ep) = (&node_maps[l - 1], &node_maps[l], &edge_maps[l - 1]);
            let a = std::mem::take(&mut att[l]);
            layers.push(LayerPlan {
                att_e: rc(a.iter().map(|&k| ep[k]).collect()),
                att_src: rc(a.iter().map(|&k| np[ctx.edges[k].0]).collect()),
                att_dst_prev: rc(a.iter().map(|&k| np[ctx.edges[k].1]).collect()),
                att_seg: rc(a.iter().map(|&k| nl[ctx.edges[k].1]).collect()),
                att_edges: a,
                self_nodes: rc(nodes[l].iter().map(|&v| np[v]).collect()),
                upd_e: rc(edges[l].iter().map(|&k| ep[k]).collect()),
                upd_src: rc(edges[l].iter().map(|&k| nl[ctx.edges[k].0]).collect()),
                upd_dst: rc(edges[l].iter().map(|&k| nl[ctx.edges[k].1]).collect()),
            });
        }
        let (n0, e0, el, nl) = (&node_maps[0], &edge_maps[0], &edge_maps[n_layers], &node_maps[n_layers]);
        Ok(Self {
            h0_rows: rc(nodes[0].clone()),
            meta_src: rc(edges[0].iter().map(|&k| n0[ctx.edges[k].0]).collect()),
            meta_dst: rc(edges[0].iter().map(|&k| n0[ctx.edges[k].1]).collect()),
            query_in_e0: rc(query.iter().map(|&k| e0[k]).collect()),
            head_src: rc(query.iter().map(|&k| nl[ctx.edges[k].0]).collect()),
            head_dst: rc(query.iter().map(|&k| nl[ctx.edges[k].1]).collect()),
            head_e: rc(query.iter().map(|&k| el[k]).collect()),
            nodes,
            edges,
            layers,
            query,
        })
    }

    /// Plan over every node and edge of the context.
    pub fn full(ctx: &GraphContext, n_layers: usize) -> Result<Self> {
        let all_e: Vec<usize> = (0..ctx.edges.len()).collect();
        let all_n: Vec<usize> = (0..ctx.n_nodes()).collect();
        Self::new(ctx, n_layers, &all_e, &all_n)
    }

    pub fn query(&self) -> &[usize] {
        &self.query
    }

    /// Regions whose final embeddings the plan computes, in row order.
    pub fn top_nodes(&self) -> &[usize] {
        self.nodes.last().expect("at least one level")
    }

    /// Number of edge states computed per level, input level first.
    pub fn edge_counts(&self) -> Vec<usize> {
        self.edges.iter().map(Vec::len).collect()
    }
}

/// One edge-enhanced transformer layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerLayer {
    w_q: Linear,
    w_k: Linear,
    w_ke: Linear,
    w_vn: Linear,
    w_ve: Linear,
    w_o: Linear,
    gamma1: Linear,
    gamma2: Linear,
    psi_e: Linear,
    psi_src: Linear,
    psi_dst: Linear,
    psi_out: Linear,
    heads: usize,
    d_qkv: usize,
}

impl TransformerLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (dn, de, dq) = (cfg.d_node, cfg.d_edge, cfg.d_qkv);
        let mut lin = |s: &str, i, o, b| Linear::new(store, &format!("{name}.{s}"), i, o, b, rng);
        let layer = Self {
            w_q: lin("w_q", dn, dq, false),
            w_k: lin("w_k", dn, dq, false),
            w_ke: lin("w_ke", de, dq, false),
            w_vn: lin("w_vn", dn, dq, false),
            w_ve: lin("w_ve", de, dq, true),
            w_o: lin("w_o", dq, dn, false),
            gamma1: lin("gamma1", dn, dn, true),
            gamma2: lin("gamma2", dn, dn, true),
            psi_e: lin("psi_e", de, de, true),
            psi_src: lin("psi_src", dn, de, false),
            psi_dst: lin("psi_dst", dn, de, false),
            psi_out: lin("psi_out", de, de, true),
            heads: cfg.heads,
            d_qkv: dq,
        };
        layer.psi_out.zero(store);
        layer
    }

    fn zero_messages(&self, store: &mut ParamStore) {
        for l in [&self.w_vn, &self.w_ve, &self.w_o] {
            l.zero(store);
        }
    }

    /// Returns the new node states (rows `plan.nodes[l]`), edge states
    /// (rows `plan.edges[l]`) and attention weights (rows `att_edges`).
    fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, e: Var, lp: &LayerPlan, n_out: usize) -> (Var, Var, Var) {
        let q = self.w_q.apply(tape, store, h);
        let kn = self.w_k.apply(tape, store, h);
        let e_att = tape.gather(e, lp.att_e.clone());
        let ke = self.w_ke.apply(tape, store, e_att);
        let q_e = tape.gather(q, lp.att_dst_prev.clone());
        let k_src = tape.gather(kn, lp.att_src.clone());
        let k_e = tape.add(k_src, ke);
        let prod = tape.mul(q_e, k_e);
        let dots = tape.group_sum(prod, self.heads);
        let logits = tape.scale(dots, 1.0 / (self.d_qkv as f64).sqrt());
        let lambda = tape.segment_softmax(logits, lp.att_seg.clone(), n_out);
        let vn = self.w_vn.apply(tape, store, h);
        let v_src = tape.gather(vn, lp.att_src.clone());
        let v_e = self.w_ve.apply(tape, store, e_att);
        let msg = tape.add(v_src, v_e);
        let lam = tape.repeat_cols(lambda, self.d_qkv / self.heads);
        let weighted = tape.mul(lam, msg);
        let agg = tape.scatter_add(weighted, lp.att_seg.clone(), n_out);
        let update = self.w_o.apply(tape, store, agg);
        let h_self = tape.gather(h, lp.self_nodes.clone());
        let g1 = self.gamma1.apply(tape, store, h_self);
        let g1 = tape.relu(g1);
        let g2 = self.gamma2.apply(tape, store, g1);
        let gamma = tape.add(h_self, g2);
        let h_new = tape.add(gamma, update);

        let e_old = tape.gather(e, lp.upd_e.clone());
        let pe = self.psi_e.apply(tape, store, e_old);
        let ps = self.psi_src.apply(tape, store, h_new);
        let ps = tape.gather(ps, lp.upd_src.clone());
        let pd = self.psi_dst.apply(tape, store, h_new);
        let pd = tape.gather(pd, lp.upd_dst.clone());
        let hidden = tape.add(pe, ps);
        let hidden = tape.add(hidden, pd);
        let hidden = tape.relu(hidden);
        let delta = self.psi_out.apply(tape, store, hidden);
        let e_new = tape.add(e_old, delta);
        (h_new, e_new, lambda)
    }
}

/// Flow head over `[zP_i, h_i, zP_j, h_j, e_ij]`: a linear skip plus a
/// one-hidden-layer MLP, then `− α log D + ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogFlowHead {
    skip: Linear,
    l1: Linear,
    l2: Linear,
    pub alpha: ParamId,
    pub eps: ParamId,
    d_node: usize,
    d_edge: usize,
}

impl LogFlowHead {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let inp = 2 + 2 * cfg.d_node + cfg.d_edge;
        let head = Self {
            skip: Linear::new(store, "head.skip", inp, 1, false, rng),
            l1: Linear::new(store, "head.l1", inp, cfg.head_hidden, true, rng),
            l2: Linear::new(store, "head.l2", cfg.head_hidden, 1, true, rng),
            alpha: store.add("head.alpha", Matrix::scalar(0.0)),
            eps: store.add("head.eps", Matrix::scalar(0.0)),
            d_node: cfg.d_node,
            d_edge: cfg.d_edge,
        };
        head.skip.zero(store);
        head.l2.zero(store);
        head
    }

    pub fn input_dim(&self) -> usize {
        2 + 2 * self.d_node + self.d_edge
    }

    /// Column of the head input holding `z(log F̂ᵍ)` from the edge state.
    fn base_flow_column(&self) -> usize {
        2 + 2 * self.d_node + 1
    }

    /// Makes the MLP term identically zero.
    pub fn freeze_mlp_to_zero(&self, store: &mut ParamStore) {
        self.skip.zero(store);
        self.l2.zero(store);
    }

    pub fn set_scalars(&self, store: &mut ParamStore, alpha: f64, eps: f64) {
        store.get_mut(self.alpha).data[0] = alpha;
        store.get_mut(self.eps).data[0] = eps;
    }

    fn mlp(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let s = self.skip.apply(tape, store, x);
        let a = self.l1.apply(tape, store, x);
        let a = tape.relu(a);
        let b = self.l2.apply(tape, store, a);
        tape.add(s, b)
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, log_d: Var) -> Var {
        let m = self.mlp(tape, store, x);
        let alpha = tape.param(store, self.alpha);
        let decay = tape.scale_by(log_d, alpha);
        let eps = tape.param(store, self.eps);
        let y = tape.sub(m, decay);
        tape.add_row(y, eps)
    }

    /// `log F̂_ij` for one edge; `zp_*` are population z-scores.
    #[allow(clippy::too_many_arguments)]
    pub fn predict(&self, store: &ParamStore, zp_i: f64, zp_j: f64, h_i: &[f64], h_j: &[f64], e_ij: &[f64], d: f64) -> Result<f64> {
        if !(d > 0.0) {
            return Err(Error::Domain(format!("distance {d} must be positive")));
        }
        if h_i.len() != self.d_node || h_j.len() != self.d_node || e_ij.len() != self.d_edge {
            return Err(Error::Dimension("head input sizes do not match the model".into()));
        }
        let row: Vec<f64> = [zp_i].iter().chain(h_i).chain(&[zp_j]).chain(h_j).chain(e_ij).copied().collect();
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_vec(1, row.len(), row));
        let ld = tape.input(Matrix::scalar(d.ln()));
        let y = self.apply(&mut tape, store, x, ld);
        Ok(tape.value(y).data[0])
    }
}

/// Meta-Gravity, graph transformer and flow head with their weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub meta: MetaGravityNet,
    node_in: Linear,
    edge_in: Linear,
    layers: Vec<TransformerLayer>,
    pub head: LogFlowHead,
    pub edge_transform: EdgeTransform,
    input_dim: usize,
}

/// Tape handles of one forward pass.
pub struct ForwardOut {
    /// `log F̂` on the plan's query edges (|query|×1), absent for an empty query.
    pub log_flow: Option<Var>,
    /// `log F̂ᵍ` on the query edges.
    pub log_fg: Option<Var>,
    /// Final node states, rows in `plan.top_nodes()` order.
    pub h_top: Var,
    /// Attention weights per layer, rows in incoming-edge order.
    pub attention: Vec<Var>,
}

impl FlowModel {
    pub fn new(config: ModelConfig, input_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let meta = MetaGravityNet::new(&mut store, input_dim, &config.meta, rng);
        let node_in = Linear::new(&mut store, "node_in", input_dim, config.d_node, true, rng);
        let edge_in = Linear::new(&mut store, "edge_in", 2, config.d_edge, true, rng);
        {
            let w = store.get_mut(edge_in.w);
            for r in 0..2 {
                for c in 0..2 {
                    w.set(r, c, if r == c { 1.0 } else { 0.0 });
                }
            }
        }
        let layers = (0..config.n_layers)
            .map(|l| TransformerLayer::new(&mut store, &format!("layer{l}"), &config, rng))
            .collect();
        let head = LogFlowHead::new(&mut store, &config, rng);
        Ok(Self { config, store, meta, node_in, edge_in, layers, head, edge_transform: EdgeTransform::default(), input_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Sets meta-Gravity to output the constant `(G, α)` on every edge.
    pub fn warm_start_meta(&mut self, params: GravityParams) {
        self.meta.set_constant(&mut self.store, params);
    }

    /// Installs the edge transform and resets the head so the initial
    /// prediction equals the meta-Gravity flow.
    pub fn set_edge_transform(&mut self, t: EdgeTransform) {
        self.edge_transform = t;
        self.head.freeze_mlp_to_zero(&mut self.store);
        let col = self.head.base_flow_column();
        self.store.get_mut(self.head.skip.w).set(col, 0, t.log_fg_std);
        self.head.set_scalars(&mut self.store, 0.0, t.log_fg_mean);
    }

    /// Zeroes the message map of layer `l`, leaving a residual-only update.
    pub fn zero_messages(&mut self, l: usize) {
        self.layers[l].zero_messages(&mut self.store);
    }

    /// Meta-Gravity `log F̂ᵍ` on edges of the context.
    pub fn meta_forward(&self, tape: &mut Tape, ctx: &GraphContext, edges: &[usize]) -> Var {
        let h0 = tape.input(ctx.h0.clone());
        let src: Rc<[usize]> = edges.iter().map(|&k| ctx.edges[k].0).collect();
        let dst: Rc<[usize]> = edges.iter().map(|&k| ctx.edges[k].1).collect();
        let pp = tape.input(Matrix::column(edges.iter().map(|&k| ctx.log_pp[k]).collect()));
        let ld = tape.input(Matrix::column(edges.iter().map(|&k| ctx.log_d[k]).collect()));
        self.meta.forward(tape, &self.store, h0, &src, &dst, pp, ld).log_flow
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &GraphContext, plan: &Plan) -> ForwardOut {
        let t = self.edge_transform;
        let h0_all = tape.input(ctx.h0.clone());
        let h0 = tape.gather(h0_all, plan.h0_rows.clone());
        let e0_idx = &plan.edges[0];
        let pp = tape.input(Matrix::column(e0_idx.iter().map(|&k| ctx.log_pp[k]).collect()));
        let ld = tape.input(Matrix::column(e0_idx.iter().map(|&k| ctx.log_d[k]).collect()));
        let log_fg = self.meta.forward(tape, &self.store, h0, &plan.meta_src, &plan.meta_dst, pp, ld).log_flow;

        let zd = tape.input(Matrix::column(
            e0_idx.iter().map(|&k| (ctx.log_d[k] - t.log_d_mean) / t.log_d_std).collect(),
        ));
        let shift = tape.input(Matrix::scalar(-t.log_fg_mean));
        let zf = tape.add_row(log_fg, shift);
        let zf = tape.scale(zf, 1.0 / t.log_fg_std);
        let e_in = tape.concat(&[zd, zf]);
        let mut e = self.edge_in.apply(tape, &self.store, e_in);
        let mut h = self.node_in.apply(tape, &self.store, h0);
        let mut attention = Vec::with_capacity(self.layers.len());
        for (l, (layer, lp)) in self.layers.iter().zip(&plan.layers).enumerate() {
            let (hn, en, lam) = layer.forward(tape, &self.store, h, e, lp, plan.nodes[l + 1].len());
            h = hn;
            e = en;
            attention.push(lam);
        }
        if plan.query.is_empty() {
            return ForwardOut { log_flow: None, log_fg: None, h_top: h, attention };
        }
        let top = plan.top_nodes();
        let zp = tape.input(Matrix::column(top.iter().map(|&v| ctx.pop_z[v]).collect()));
        let parts = [
            tape.gather(zp, plan.head_src.clone()),
            tape.gather(h, plan.head_src.clone()),
            tape.gather(zp, plan.head_dst.clone()),
            tape.gather(h, plan.head_dst.clone()),
            tape.gather(e, plan.head_e.clone()),
        ];
        let x = tape.concat(&parts);
        let ld_q = tape.input(Matrix::column(plan.query.iter().map(|&k| ctx.log_d[k]).collect()));
        let log_flow = self.head.apply(tape, &self.store, x, ld_q);
        let log_fg_q = tape.gather(log_fg, plan.query_in_e0.clone());
        ForwardOut { log_flow: Some(log_flow), log_fg: Some(log_fg_q), h_top: h, attention }
    }

    /// `log F̂` for every candidate edge of the context, in context order.
    pub fn predict_log(&self, ctx: &GraphContext) -> Result<Vec<f64>> {
        if ctx.edges.is_empty() {
            return Ok(Vec::new());
        }
        let plan = Plan::new(ctx, self.layers.len(), &(0..ctx.edges.len()).collect::<Vec<_>>(), &[])?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, ctx, &plan);
        let v = tape.value(out.log_flow.expect("non-empty query"));
        if !v.is_finite() {
            return Err(Error::Domain("non-finite flow prediction".into()));
        }
        Ok(v.data.clone())
    }

    /// Predicted flows `exp(log F̂)` on every candidate edge.
    pub fn predict_flows(&self, ctx: &GraphContext) -> Result<BTreeMap<Edge, f64>> {
        let logs = self.predict_log(ctx)?;
        Ok(ctx.edges.iter().zip(logs).map(|(&e, l)| (e, l.exp())).collect())
    }

    /// Meta-Gravity flows `F̂ᵍ` on every candidate edge.
    pub fn predict_base_flows(&self, ctx: &GraphContext) -> BTreeMap<Edge, f64> {
        let all: Vec<usize> = (0..ctx.edges.len()).collect();
        let mut tape = Tape::new();
        let v = self.meta_forward(&mut tape, ctx, &all);
        ctx.edges.iter().zip(&tape.value(v).data).map(|(&e, &l)| (e, l.exp())).collect()
    }

    /// Per-head attention weights of the edges into `target` at layer `l`,
    /// keyed by source region. Empty for a region without incoming edges.
    pub fn attention_weights(&self, ctx: &GraphContext, l: usize, target: usize) -> Result<BTreeMap<usize, Vec<f64>>> {
        if l >= self.layers.len() {
            return Err(Error::Invalid(format!("layer {l} out of range")));
        }
        let plan = Plan::new(ctx, self.layers.len(), &[], &(0..ctx.n_nodes()).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, ctx, &plan);
        let lam = tape.value(out.attention[l]);
        let lp = &plan.layers[l];
        Ok(lp
            .att_edges
            .iter()
            .enumerate()
            .filter(|(_, &k)| ctx.edges[k].1 == target)
            .map(|(r, &k)| (ctx.edges[k].0, lam.row(r).to_vec()))
            .collect())
    }

    /// Final-layer node states of every region, in region order.
    pub fn export_embeddings(&self, ctx: &GraphContext) -> Result<Vec<Vec<f64>>> {
        let plan = Plan::new(ctx, self.layers.len(), &[], &(0..ctx.n_nodes()).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, ctx, &plan);
        let h = tape.value(out.h_top);
        Ok((0..h.rows).map(|r| h.row(r).to_vec()).collect())
    }
}

/// One embedding-distance decile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub lo: f64,
    pub hi: f64,
    pub n_pairs: usize,
    pub gap_q1: f64,
    pub gap_median: f64,
    pub gap_q3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingAnalysis {
    pub n_pairs: usize,
    pub bins: Vec<DistanceBin>,
    /// Spearman correlation of bin index with median gap.
    pub spearman: f64,
    /// The attribute was constant, so `spearman` is reported as 0.
    pub degenerate: bool,
}

impl EmbeddingAnalysis {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,lo,hi,n_pairs,gap_q1,gap_median,gap_q3\n");
        for (k, b) in self.bins.iter().enumerate() {
            s.push_str(&format!("{k},{},{},{},{},{},{}\n", b.lo, b.hi, b.n_pairs, b.gap_q1, b.gap_median, b.gap_q3));
        }
        s
    }
}

/// Attribute gaps of ordered region pairs, bucketed into embedding-distance deciles.
pub fn embedding_distance_analysis(embeddings: &[Vec<f64>], attribute: &BTreeMap<usize, f64>) -> Result<EmbeddingAnalysis> {
    let ids: Vec<usize> = attribute.keys().copied().collect();
    if ids.len() < 10 {
        return Err(Error::Invalid(format!("need at least 10 regions with attributes, got {}", ids.len())));
    }
    if let Some(&i) = ids.iter().find(|&&i| i >= embeddings.len()) {
        return Err(Error::Invalid(format!("region {i} has no embedding")));
    }
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(ids.len() * (ids.len() - 1));
    for &i in &ids {
        for &j in ids.iter().filter(|&&j| j != i) {
            let d = embeddings[i].iter().zip(&embeddings[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            pairs.push((d, (attribute[&i] - attribute[&j]).abs()));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n = pairs.len();
    let bins: Vec<DistanceBin> = (0..10)
        .filter_map(|b| {
            let (lo, hi) = (b * n / 10, (b + 1) * n / 10);
            if lo == hi {
                return None;
            }
            let slice = &pairs[lo..hi];
            let mut gaps: Vec<f64> = slice.iter().map(|p| p.1).collect();
            gaps.sort_by(f64::total_cmp);
            Some(DistanceBin {
                lo: slice[0].0,
                hi: slice[slice.len() - 1].0,
                n_pairs: slice.len(),
                gap_q1: quantile_sorted(&gaps, 0.25),
                gap_median: quantile_sorted(&gaps, 0.5),
                gap_q3: quantile_sorted(&gaps, 0.75),
            })
        })
        .collect();
    let degenerate = pairs.iter().all(|p| p.1 == 0.0);
    let idx: Vec<f64> = (0..bins.len()).map(|k| k as f64).collect();
    let med: Vec<f64> = bins.iter().map(|b| b.gap_median).collect();
    let rho = if degenerate { 0.0 } else { spearman(&idx, &med).unwrap_or(0.0) };
    Ok(EmbeddingAnalysis { n_pairs: n, bins, spearman: rho, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{Adjacency, FeatureTable, Region};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn city(n: usize, seed: u64) -> (CityGraph, NormStats) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regions: Vec<Region> = (0..n)
            .map(|i| Region {
                id: format!("r{i}"),
                lat: 42.0 + rng.random_range(0.0..0.2),
                lon: -71.0 + rng.random_range(0.0..0.2),
                area_km2: 1.0,
                population: rng.random_range(100.0..5000.0),
                income: None,
                neighbors: vec![],
            })
            .collect();
        let rows = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let features = FeatureTable::new(vec!["a".into(), "b".into(), "c".into()], rows).unwrap();
        let c = CityGraph::new(regions, features, Adjacency::Knn(3)).unwrap();
        let stats = NormStats::fit(&c).unwrap();
        (c, stats)
    }

    fn model(input_dim: usize, seed: u64) -> FlowModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FlowModel::new(ModelConfig::compact(), input_dim, &mut rng).unwrap();
        // Random non-zero weights everywhere so every path is exercised.
        for p in &mut m.store.params {
            for v in &mut p.value.data {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        m
    }

    fn random_edges(n: usize, p: f64, seed: u64) -> Vec<Edge> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.random_bool(p) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn edge_feature_examples() {
        let (c, _) = city(4, 1);
        let same: BTreeMap<Edge, f64> = [((0, 1), 5.0)].into();
        let (e, _) = init_edge_features(&c, &same).unwrap();
        assert_eq!(e[&(0, 1)], [0.0, 0.0]);
        let bad: BTreeMap<Edge, f64> = [((0, 1), 5.0), ((1, 2), 0.0)].into();
        assert!(init_edge_features(&c, &bad).is_err());
        let t = EdgeTransform::fit(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(t.apply(0.0, 1.0), [-1.0, 0.0]);
        assert_eq!(t.apply(2.0, 1.0), [1.0, 0.0]);
    }

    #[test]
    fn head_closed_forms() {
        let (c, stats) = city(5, 2);
        let m = model(stats.names.len() + 1, 3);
        let mut store = m.store.clone();
        m.head.freeze_mlp_to_zero(&mut store);
        let (h, e) = (vec![0.3; 16], vec![0.1; 8]);
        m.head.set_scalars(&mut store, 1.0, 0.0);
        let y = m.head.predict(&store, 0.2, -0.1, &h, &h, &e, std::f64::consts::E).unwrap();
        assert!((y + 1.0).abs() < 1e-12);
        m.head.set_scalars(&mut store, 2.0, 0.7);
        let a = m.head.predict(&store, 0.2, -0.1, &h, &h, &e, 3.0).unwrap();
        let b = m.head.predict(&store, 0.2, -0.1, &h, &h, &e, 6.0).unwrap();
        assert!(((a - b).exp() - 4.0).abs() < 1e-12);
        m.head.set_scalars(&mut store, 2.0, 0.7 + 2f64.ln());
        let a2 = m.head.predict(&store, 0.2, -0.1, &h, &h, &e, 3.0).unwrap();
        assert!(((a2 - a).exp() - 2.0).abs() < 1e-12);
        assert!(m.head.predict(&store, 0.0, 0.0, &h, &h, &e, 0.0).is_err());
        assert!(m.head.predict(&store, 0.0, 0.0, &h[..3], &h, &e, 1.0).is_err());
        let _ = c;
    }

    #[test]
    fn log_distance_slope_is_minus_alpha() {
        let (_, stats) = city(5, 2);
        let m = model(stats.names.len() + 1, 4);
        let (h, e) = (vec![0.2; 16], vec![-0.3; 8]);
        let a = m.head.predict(&m.store, 0.1, 0.2, &h, &h, &e, 2.0).unwrap();
        let b = m.head.predict(&m.store, 0.1, 0.2, &h, &h, &e, 2.0 * std::f64::consts::E).unwrap();
        let alpha = m.store.get(m.head.alpha).data[0];
        assert!((b - a + alpha).abs() < 1e-12);
    }

    #[test]
    fn attention_examples_and_sums() {
        let (c, stats) = city(12, 5);
        let (nc, _) = crate::geodata::normalize_features(&c, Some(&stats)).unwrap();
        let edges = random_edges(12, 0.3, 6);
        let ctx = GraphContext::new(&nc, &stats, edges.iter().copied().chain([(0, 11)])).unwrap();
        let m = model(ctx.input_dim(), 7);
        for l in 0..2 {
            for t in 0..12 {
                let w = m.attention_weights(&ctx, l, t).unwrap();
                for h in 0..2 {
                    if !w.is_empty() {
                        let s: f64 = w.values().map(|v| v[h]).sum();
                        assert!((s - 1.0).abs() < 1e-9);
                        assert!(w.values().all(|v| v[h] > 0.0));
                    }
                }
            }
        }
        let single = GraphContext::new(&nc, &stats, [(0, 1), (2, 3)]).unwrap();
        let w = m.attention_weights(&single, 0, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[&0].iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(m.attention_weights(&single, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn symmetric_sources_share_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let regions: Vec<Region> = [(42.0, -71.0), (42.1, -71.0), (41.9, -71.0)]
            .iter()
            .enumerate()
            .map(|(i, &(lat, lon))| Region {
                id: format!("r{i}"),
                lat,
                lon,
                area_km2: 1.0,
                population: if i == 0 { 300.0 } else { 1000.0 },
                income: None,
                neighbors: vec![],
            })
            .collect();
        let rows = vec![vec![0.5, -0.2], vec![0.1, 0.4], vec![0.1, 0.4]];
        let c = CityGraph::new(regions, FeatureTable::new(vec!["a".into(), "b".into()], rows).unwrap(), Adjacency::Knn(2)).unwrap();
        let stats = NormStats::fit(&c).unwrap();
        let (nc, _) = crate::geodata::normalize_features(&c, Some(&stats)).unwrap();
        let ctx = GraphContext::new(&nc, &stats, [(1, 0), (2, 0)]).unwrap();
        let m = FlowModel::new(ModelConfig::compact(), ctx.input_dim(), &mut rng).unwrap();
        let w = m.attention_weights(&ctx, 0, 0).unwrap();
        for h in 0..2 {
            assert!((w[&1][h] - 0.5).abs() < 1e-12);
            assert!((w[&2][h] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_prediction_equals_base_flow() {
        let (c, stats) = city(10, 9);
        let (nc, _) = crate::geodata::normalize_features(&c, Some(&stats)).unwrap();
        let ctx = GraphContext::new(&nc, &stats, random_edges(10, 0.5, 10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = FlowModel::new(ModelConfig::compact(), ctx.input_dim(), &mut rng).unwrap();
        m.warm_start_meta(GravityParams::new(1e-3, 1.5).unwrap());
        let base = m.predict_base_flows(&ctx);
        let (_, t) = init_edge_features(&nc, &base).unwrap();
        m.set_edge_transform(t);
        let pred = m.predict_flows(&ctx).unwrap();
        for (e, f) in &pred {
            assert!((f / base[e] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn message_ablation_is_pure_residual() {
        let (c, stats) = city(10, 12);
        let (nc, _) = crate::geodata::normalize_features(&c, Some(&stats)).unwrap();
        let a = GraphContext::new(&nc, &stats, random_edges(10, 0.5, 13)).unwrap();
        let b = GraphContext::new(&nc, &stats, random_edges(10, 0.2, 14)).unwrap();
        let mut m = model(a.input_dim(), 15);
        m.config.n_layers = 1;
        m.layers.truncate(1);
        m.zero_messages(0);
        // With no messages node states ignore the edge set entirely.
        assert_eq!(m.export_embeddings(&a).unwrap(), m.export_embeddings(&b).unwrap());
    }

    #[test]
    fn disconnected_components_are_independent() {
        let (c, stats) = city(10, 16);
        let (nc, _) = crate::geodata::normalize_features(&c, Some(&stats)).unwrap();
        let edges: Vec<Edge> = random_edges(10, 0.6, 17).into_iter().filter(|&(i, j)| (i < 5) == (j < 5)).collect();
        let ctx = GraphContext::new(&nc, &stats, edges.clone()).unwrap();
        let m = model(ctx.input_dim(), 18);
        let base = m.export_embeddings(&ctx).unwrap();
        let mut feats: Vec<Vec<f64>> = (0..10).map(|i| nc.features().row(i).to_vec()).collect();
        feats[7][0] += 0.5;
        let moved = nc.with_features(FeatureTable::new(nc.features().names().to_vec(), feats).unwrap()).unwrap();
        let ctx2 = GraphContext::new(&moved, &stats, edges).unwrap();
        let after = m.export_embeddings(&ctx2).unwrap();
        assert_eq!(base[..5], after[..5]);
        assert_ne!(base[7], after[7]);
    }

    #[test]
    fn permutation_equivariance() {
        let (c, stats) = city(10, 19);
        let (nc, _) = crate::geodata::normalize_features(&c, Some(&stats)).unwrap();
        let edges = random_edges(10, 0.4, 20);
        let ctx = GraphContext::new(&nc, &stats, edges.clone()).unwrap();
        let m = model(ctx.input_dim(), 21);
        let perm = [3usize, 7, 0, 9, 1, 4, 8, 2, 6, 5];
        let regions: Vec<Region> = {
            let mut r = vec![nc.region(0).clone(); 10];
            for i in 0..10 {
                r[perm[i]] = nc.region(i).clone();
            }
            r
        };
        let mut rows = vec![Vec::new(); 10];
        for i in 0..10 {
            rows[perm[i]] = nc.features().row(i).to_vec();
        }
        let pc = CityGraph::new(regions, FeatureTable::new(nc.features().names().to_vec(), rows).unwrap(), Adjacency::Knn(3)).unwrap();
        let pedges: Vec<Edge> = edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        let pctx = GraphContext::new(&pc, &stats, pedges).unwrap();
        let (h, ph) = (m.export_embeddings(&ctx).unwrap(), m.export_embeddings(&pctx).unwrap());
        let (f, pf) = (m.predict_flows(&ctx).unwrap(), m.predict_flows(&pctx).unwrap());
        for i in 0..10 {
            for (a, b) in h[i].iter().zip(&ph[perm[i]]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        for (&(i, j), v) in &f {
            assert!((pf[&(perm[i], perm[j])] / v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn pruned_plan_matches_full_graph() {
        let (c, stats) = city(15, 22);
        let (nc, _) = crate::geodata::normalize_features(&c, Some(&stats)).unwrap();
        let ctx = GraphContext::new(&nc, &stats, random_edges(15, 0.3, 23)).unwrap();
        let m = model(ctx.input_dim(), 24);
        let full = m.predict_log(&ctx).unwrap();
        let query = [2usize, 9, 17];
        let plan = Plan::new(&ctx, m.n_layers(), &query, &[]).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &ctx, &plan);
        let v = tape.value(out.log_flow.unwrap());
        for (r, &q) in query.iter().enumerate() {
            assert!((v.data[r] - full[q]).abs() < 1e-12);
        }
        assert!(plan.edge_counts()[2] == 3);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (c, stats) = city(8, 25);
        let (nc, _) = crate::geodata::normalize_features(&c, Some(&stats)).unwrap();
        let ctx = GraphContext::new(&nc, &stats, random_edges(8, 0.5, 26)).unwrap();
        let mut cfg = ModelConfig::compact();
        cfg.n_layers = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut m = FlowModel::new(cfg, ctx.input_dim(), &mut rng).unwrap();
        for p in &mut m.store.params {
            for v in &mut p.value.data {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let query: Vec<usize> = (0..ctx.edges().len()).step_by(2).collect();
        let plan = Plan::new(&ctx, 1, &query, &[]).unwrap();
        let targets: Rc<[f64]> = query.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let weights: Rc<[f64]> = query.iter().map(|_| rng.random_range(0.1..1.0)).collect();
        let loss = |m: &FlowModel| {
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &ctx, &plan);
            let l = tape.huber_loss(out.log_flow.unwrap(), targets.clone(), weights.clone(), 0.5);
            (tape.value(l).data[0], tape.backward(l).for_params(&m.store))
        };
        let (_, grads) = loss(&m);
        let total = m.store.n_scalars();
        let mut checked = 0;
        while checked < 50 {
            let flat = rng.random_range(0..total);
            let (mut p, mut k) = (0, flat);
            while k >= m.store.params[p].value.data.len() {
                k -= m.store.params[p].value.data.len();
                p += 1;
            }
            let h = 1e-5;
            let orig = m.store.params[p].value.data[k];
            m.store.params[p].value.data[k] = orig + h;
            let up = loss(&m).0;
            m.store.params[p].value.data[k] = orig - h;
            let down = loss(&m).0;
            m.store.params[p].value.data[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[p].data[k];
            let scale = fd.abs().max(an.abs());
            if scale < 1e-6 {
                continue;
            }
            assert!((fd - an).abs() / scale < 1e-4, "{}[{k}]: fd {fd} vs {an}", m.store.params[p].name);
            checked += 1;
        }
    }

    #[test]
    fn embedding_analysis_examples() {
        let emb: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.37 % 5.0, 1.0]).collect();
        let attr: BTreeMap<usize, f64> = (0..20).map(|i| (i, emb[i][0])).collect();
        let a = embedding_distance_analysis(&emb, &attr).unwrap();
        assert_eq!(a.n_pairs, 380);
        assert!((a.spearman - 1.0).abs() < 1e-12);
        let flat: BTreeMap<usize, f64> = (0..20).map(|i| (i, 3.0)).collect();
        let d = embedding_distance_analysis(&emb, &flat).unwrap();
        assert!(d.degenerate && d.spearman == 0.0);
        let few: BTreeMap<usize, f64> = (0..5).map(|i| (i, i as f64)).collect();
        assert!(embedding_distance_analysis(&emb, &few).is_err());
    }

    #[test]
    fn embedding_analysis_null_and_pair_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let emb: Vec<Vec<f64>> = (0..250).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let attr: BTreeMap<usize, f64> = (0..250).map(|i| (i, rng.random_range(0.0..1.0))).collect();
        let a = embedding_distance_analysis(&emb, &attr).unwrap();
        assert_eq!(a.n_pairs, 62_250);
        assert_eq!(a.bins.iter().map(|b| b.n_pairs).sum::<usize>(), 62_250);
        let small: BTreeMap<usize, f64> = (0..100).map(|i| (i, rng.random_range(0.0..1.0))).collect();
        assert!(embedding_distance_analysis(&emb, &small).unwrap().spearman.abs() < 0.5);
    }
}
