//! Meta-Gravity pretraining, joint training with early stopping,
//! ensembles, checkpoints and zero-shot transfer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{huber, Adam, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::geodata::{normalize_features, CityGraph, Edge, FeatureTable, FlowNetwork, NormStats};
use crate::graphflow::{init_edge_features, FlowModel, GraphContext, ModelConfig, Plan};
use crate::metrics::{cpc, r_squared};
use crate::netlink::{build_pair_dataset, calibrate_threshold, predict_links, train_link_classifier, GbdtConfig, LinkClassifier};
use crate::physcore::{fit_classical_gravity, GravityParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w_ij = 1`.
    Uniform,
    /// `w_ij = exp(F_ij/τ) / Σ exp(F_kl/τ)` on raw flows.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub delta: f64,
    pub tau: f64,
    pub weighting: Weighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { delta: 0.5, tau: 2.0, weighting: Weighting::Softmax }
    }
}

impl LossConfig {
    /// Uniform weights, as used for cross-city transfer.
    pub fn transfer() -> Self {
        Self { weighting: Weighting::Uniform, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Invalid(format!("delta {} and tau {} must be positive", self.delta, self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub pretrain_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { pretrain_epochs: 200, max_epochs: 3000, patience: 100, validation_fraction: 0.2, learning_rate: 1e-3, seed: 0 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Invalid("patience must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Invalid(format!("validation fraction {} outside (0, 1)", self.validation_fraction)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        Ok(())
    }
}

pub fn huber_loss(r: f64, delta: f64) -> f64 {
    huber(r, delta)
}

/// Per-edge sample weights over the given observed flows.
pub fn sample_weights(flows: &BTreeMap<Edge, f64>, cfg: &LossConfig) -> Result<BTreeMap<Edge, f64>> {
    cfg.validate()?;
    if flows.is_empty() {
        return Err(Error::Invalid("sample weights need at least one observed flow".into()));
    }
    Ok(match cfg.weighting {
        Weighting::Uniform => flows.keys().map(|&e| (e, 1.0)).collect(),
        Weighting::Softmax => {
            let mx = flows.values().map(|f| f / cfg.tau).fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = flows.values().map(|f| (f / cfg.tau - mx).exp()).collect();
            let s: f64 = ex.iter().sum();
            flows.keys().zip(ex).map(|(&e, x)| (e, x / s)).collect()
        }
    })
}

fn log_huber_sum(pred: &[f64], target: &[f64], weights: &[f64], delta: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != weights.len() {
        return Err(Error::Dimension(format!("{} predictions, {} targets, {} weights", pred.len(), target.len(), weights.len())));
    }
    if let Some(t) = target.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Domain(format!("target flow {t} is not positive")));
    }
    if let Some(p) = pred.iter().find(|p| !(**p > 0.0)) {
        return Err(Error::Domain(format!("predicted flow {p} is not positive")));
    }
    Ok(pred.iter().zip(target).zip(weights).map(|((p, t), w)| w * huber(p.ln() - t.ln(), delta)).sum())
}

/// `𝓛ᵍ = Σ w·Q_δ(log F̂ᵍ − log F)`.
pub fn loss_meta(pred: &[f64], target: &[f64], weights: &[f64], delta: f64) -> Result<f64> {
    log_huber_sum(pred, target, weights, delta)
}

/// `𝓛 = Σ w·Q_δ(log F̂ − log F)`.
pub fn loss_joint(pred: &[f64], target: &[f64], weights: &[f64], delta: f64) -> Result<f64> {
    log_huber_sum(pred, target, weights, delta)
}

/// Observed zones split into training and validation zones.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoneSplit {
    pub train_zones: BTreeSet<usize>,
    pub val_zones: BTreeSet<usize>,
    /// Observed edges touching no validation zone.
    pub train_edges: BTreeSet<Edge>,
    /// Observed edges internal to the validation zones.
    pub val_edges: BTreeSet<Edge>,
}

pub fn split_zones(obs: &FlowNetwork, fraction: f64, seed: u64) -> Result<ZoneSplit> {
    let zones: Vec<usize> = obs.observed_regions().iter().copied().collect();
    if zones.len() < 2 {
        return Err(Error::Invalid(format!("{} observed zones cannot be split; increase the observation ratio", zones.len())));
    }
    let k = ((fraction * zones.len() as f64).round() as usize).clamp(1, zones.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let val_zones: BTreeSet<usize> = sample(&mut rng, zones.len(), k).into_iter().map(|i| zones[i]).collect();
    let train_zones: BTreeSet<usize> = zones.iter().copied().filter(|z| !val_zones.contains(z)).collect();
    let mut train_edges = BTreeSet::new();
    let mut val_edges = BTreeSet::new();
    for &(o, d) in obs.observed_edges() {
        match (val_zones.contains(&o), val_zones.contains(&d)) {
            (true, true) => {
                val_edges.insert((o, d));
            }
            (false, false) => {
                train_edges.insert((o, d));
            }
            _ => {}
        }
    }
    if val_edges.is_empty() {
        return Err(Error::Invalid(
            "validation zones have no internal observed flows; increase the observation ratio".into(),
        ));
    }
    if train_edges.is_empty() {
        return Err(Error::Invalid("no training flows outside the validation zones; increase the observation ratio".into()));
    }
    Ok(ZoneSplit { train_zones, val_zones, train_edges, val_edges })
}

/// Observed edges as context indices with targets and weights.
struct EdgeBatch {
    idx: Vec<usize>,
    targets: Vec<f64>,
    log_targets: Rc<[f64]>,
    weights: Rc<[f64]>,
}

impl EdgeBatch {
    fn new(ctx: &GraphContext, obs: &FlowNetwork, edges: &BTreeSet<Edge>, loss: &LossConfig) -> Result<Self> {
        let flows: BTreeMap<Edge, f64> = edges.iter().map(|&e| (e, obs.flow(e))).collect();
        let w = sample_weights(&flows, loss)?;
        let mut idx = Vec::with_capacity(edges.len());
        for e in edges {
            idx.push(ctx.edge_index(*e).ok_or_else(|| Error::Invalid(format!("observed edge {e:?} missing from candidates")))?);
        }
        let targets: Vec<f64> = flows.values().copied().collect();
        if let Some(t) = targets.iter().find(|t| !(**t > 0.0)) {
            return Err(Error::Domain(format!("observed flow {t} is not positive")));
        }
        Ok(Self {
            idx,
            log_targets: targets.iter().map(|t| t.ln()).collect(),
            targets,
            weights: w.values().copied().collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_loss: f64,
}

/// Minimizes `𝓛ᵍ` over the meta-Gravity weights on the edges `train` and
/// keeps the lowest-loss weights. A loss that turns non-finite or exceeds
/// its initial value by a factor of 10⁶ counts as divergence: the model is
/// left at the last finite weights and an error is returned.
pub fn pretrain_meta(
    model: &mut FlowModel,
    ctx: &GraphContext,
    obs: &FlowNetwork,
    train: &BTreeSet<Edge>,
    schedule: &TrainSchedule,
    loss: &LossConfig,
) -> Result<PretrainReport> {
    schedule.validate()?;
    let batch = EdgeBatch::new(ctx, obs, train, loss)?;
    let n_meta = meta_param_count(model);
    let mut adam = Adam::new(schedule.learning_rate);
    let mut losses = Vec::with_capacity(schedule.pretrain_epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut last_finite = model.store.clone();
    for epoch in 0..schedule.pretrain_epochs {
        let mut tape = Tape::new();
        let pred = model.meta_forward(&mut tape, ctx, &batch.idx);
        let l = tape.huber_loss(pred, batch.log_targets.clone(), batch.weights.clone(), loss.delta);
        let value = tape.value(l).data[0];
        let exploded = losses.first().is_some_and(|&l0: &f64| value > 1e6 * l0.max(1e-12));
        if !value.is_finite() || !model.store.is_finite() || exploded {
            model.store = last_finite;
            return Err(Error::Diverged { epoch, message: format!("meta-Gravity loss became {value}") });
        }
        if best.as_ref().is_none_or(|b| value < b.1) {
            best = Some((epoch, value, model.store.clone()));
        }
        losses.push(value);
        last_finite = model.store.clone();
        let mut grads = tape.backward(l).for_params(&model.store);
        for g in grads.iter_mut().skip(n_meta) {
            g.data.fill(0.0);
        }
        adam.step(&mut model.store, &grads);
    }
    match best {
        Some((best_epoch, best_loss, store)) => {
            model.store = store;
            Ok(PretrainReport { losses, best_epoch, best_loss })
        }
        None => Ok(PretrainReport { losses, best_epoch: 0, best_loss: f64::NAN }),
    }
}

/// Meta-Gravity weights are registered first in the parameter store.
fn meta_param_count(model: &FlowModel) -> usize {
    model.store.params.iter().take_while(|p| p.name.starts_with("meta.")).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_r2: f64,
    pub val_cpc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch 0 is the untrained model; later entries follow each update.
    pub epochs: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub best_epoch: usize,
    pub best_val_r2: f64,
}

impl TrainReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            let _ = writeln!(s, "epoch={} train_loss={} val_r2={} val_cpc={}", e.epoch, e.train_loss, e.val_r2, e.val_cpc);
        }
        let _ = writeln!(s, "stop_epoch={}\nrestored_epoch={}\nbest_val_r2={}", self.stop_epoch, self.best_epoch, self.best_val_r2);
        s
    }
}

fn eval_plan(model: &FlowModel, ctx: &GraphContext, plan: &Plan, truth: &[f64]) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, ctx, plan);
    let pred: Vec<f64> = tape.value(out.log_flow.expect("non-empty plan")).data.iter().map(|l| l.exp()).collect();
    let r2 = if truth.len() >= 2 { r_squared(truth, &pred).unwrap_or(f64::NEG_INFINITY) } else { f64::NEG_INFINITY };
    Ok((r2, cpc(truth, &pred)?))
}

/// End-to-end training of all weights on `train`, early-stopped on `val`.
#[allow(clippy::too_many_arguments)]
pub fn joint_train(
    model: &mut FlowModel,
    ctx: &GraphContext,
    obs: &FlowNetwork,
    train: &BTreeSet<Edge>,
    val: &BTreeSet<Edge>,
    schedule: &TrainSchedule,
    loss: &LossConfig,
) -> Result<TrainReport> {
    schedule.validate()?;
    if val.is_empty() {
        return Err(Error::Invalid("validation split is empty; increase the observation ratio".into()));
    }
    let batch = EdgeBatch::new(ctx, obs, train, loss)?;
    let val_batch = EdgeBatch::new(ctx, obs, val, &LossConfig::transfer())?;
    let train_plan = Plan::new(ctx, model.n_layers(), &batch.idx, &[])?;
    let val_plan = Plan::new(ctx, model.n_layers(), &val_batch.idx, &[])?;
    let mut adam = Adam::new(schedule.learning_rate);
    let (r2, c) = eval_plan(model, ctx, &val_plan, &val_batch.targets)?;
    let mut epochs = vec![EpochRecord { epoch: 0, train_loss: f64::NAN, val_r2: r2, val_cpc: c }];
    let (mut best_r2, mut best_cpc) = (r2, c);
    let mut best = (0usize, r2, model.store.clone());
    let mut since = 0usize;
    let mut stop_epoch = 0;
    for epoch in 1..=schedule.max_epochs {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, ctx, &train_plan);
        let l = tape.huber_loss(out.log_flow.expect("non-empty plan"), batch.log_targets.clone(), batch.weights.clone(), loss.delta);
        let train_loss = tape.value(l).data[0];
        if !train_loss.is_finite() {
            model.store = best.2;
            return Err(Error::Diverged { epoch, message: format!("training loss became {train_loss}") });
        }
        let grads = tape.backward(l).for_params(&model.store);
        drop(tape);
        adam.step(&mut model.store, &grads);
        if !model.store.is_finite() {
            model.store = best.2;
            return Err(Error::Diverged { epoch, message: "non-finite weights".into() });
        }
        let (r2, c) = eval_plan(model, ctx, &val_plan, &val_batch.targets)?;
        epochs.push(EpochRecord { epoch, train_loss, val_r2: r2, val_cpc: c });
        stop_epoch = epoch;
        let improved_r2 = r2 > best_r2;
        let improved_cpc = c > best_cpc;
        if improved_r2 {
            best_r2 = r2;
            best = (epoch, r2, model.store.clone());
        }
        if improved_cpc {
            best_cpc = c;
        }
        if improved_r2 || improved_cpc {
            since = 0;
        } else {
            since += 1;
            if since >= schedule.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val_r2, store) = best;
    model.store = store;
    Ok(TrainReport { epochs, stop_epoch, best_epoch, best_val_r2 })
}

/// Architecture, optimization and link-classifier settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub gbdt: GbdtConfig,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self { model: ModelConfig::default(), loss: LossConfig::default(), schedule: TrainSchedule::default(), gbdt: GbdtConfig::default() }
    }
}

/// Everything needed to run inference on a city with no flow data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: FlowModel,
    pub stats: NormStats,
    pub classifier: LinkClassifier,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reorders `city`'s features to the checkpoint schema and normalizes
    /// them with the stored statistics.
    pub fn prepare_city(&self, city: &CityGraph) -> Result<CityGraph> {
        let names = city.features().names();
        let missing: Vec<String> = self.stats.names.iter().filter(|n| !names.contains(n)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::SchemaMismatch { missing });
        }
        let cols: Vec<usize> = self.stats.names.iter().map(|n| names.iter().position(|m| m == n).expect("checked")).collect();
        let rows = (0..city.n_regions()).map(|i| cols.iter().map(|&c| city.features().row(i)[c]).collect()).collect();
        let table = FeatureTable::new(self.stats.names.clone(), rows)?;
        let (normalized, _) = normalize_features(&city.with_features(table)?, Some(&self.stats))?;
        Ok(normalized)
    }

    /// Predicted flows on the classifier's candidate edges of `city`.
    pub fn infer(&self, city: &CityGraph) -> Result<BTreeMap<Edge, f64>> {
        let prepared = self.prepare_city(city)?;
        let links = predict_links(&self.classifier, &prepared, &self.stats);
        let ctx = GraphContext::new(&prepared, &self.stats, links)?;
        self.model.predict_flows(&ctx)
    }
}

/// Zero-shot prediction of a target city's flows from a source checkpoint.
pub fn transfer_apply(checkpoint: &Checkpoint, target: &CityGraph) -> Result<FlowNetwork> {
    FlowNetwork::new(checkpoint.infer(target)?)
}

/// Output of a full reconstruction run.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub checkpoint: Checkpoint,
    /// Predicted flows on the candidate edge set.
    pub flows: BTreeMap<Edge, f64>,
    pub gravity: GravityParams,
    pub pretrain: PretrainReport,
    pub report: TrainReport,
    pub n_candidates: usize,
}

/// Gravity model fitted on the observed flows, evaluated on every ordered pair.
pub fn gravity_baseline(obs: &FlowNetwork, city: &CityGraph) -> Result<(GravityParams, BTreeMap<Edge, f64>)> {
    let params = fit_classical_gravity(obs, city)?;
    let flows = city
        .all_pairs()
        .into_iter()
        .map(|(i, j)| ((i, j), params.log_flow(city.population(i), city.population(j), city.distance(i, j)).exp()))
        .collect();
    Ok((params, flows))
}

/// Link prediction, meta-Gravity pretraining and joint training on one city.
pub fn reconstruct(city: &CityGraph, obs: &FlowNetwork, cfg: &ReconstructConfig) -> Result<Reconstruction> {
    cfg.model.validate()?;
    cfg.loss.validate()?;
    let seed = cfg.schedule.seed;
    let (normalized, stats) = normalize_features(city, None)?;
    let split = split_zones(obs, cfg.schedule.validation_fraction, seed)?;

    let train_ds = build_pair_dataset(&normalized, &stats, &split.train_zones, &split.train_edges, seed)?;
    let mut classifier = train_link_classifier(&train_ds, &cfg.gbdt, seed)?;
    let val_ds = build_pair_dataset(&normalized, &stats, &split.val_zones, &split.val_edges, seed)?;
    classifier.threshold = calibrate_threshold(&classifier, &val_ds)?;
    let mut candidates = predict_links(&classifier, &normalized, &stats);
    candidates.extend(obs.observed_edges().iter().copied());
    let ctx = GraphContext::new(&normalized, &stats, candidates)?;

    let train_obs = obs.with_observation(split.train_zones.clone(), split.train_edges.clone())?;
    let gravity = fit_classical_gravity(&train_obs, &normalized)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FlowModel::new(cfg.model.clone(), ctx.input_dim(), &mut rng)?;
    model.warm_start_meta(gravity);
    let pretrain = pretrain_meta(&mut model, &ctx, obs, &split.train_edges, &cfg.schedule, &cfg.loss)?;
    let base = model.predict_base_flows(&ctx);
    let (_, transform) = init_edge_features(&normalized, &base)?;
    model.set_edge_transform(transform);
    let report = joint_train(&mut model, &ctx, obs, &split.train_edges, &split.val_edges, &cfg.schedule, &cfg.loss)?;
    let flows = model.predict_flows(&ctx)?;
    Ok(Reconstruction {
        checkpoint: Checkpoint { format_version: 1, model, stats, classifier },
        flows,
        gravity,
        pretrain,
        report,
        n_candidates: ctx.edges().len(),
    })
}

/// Members trained on independent 80% subsamples of the observed zones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub members: Vec<Checkpoint>,
}

/// Restricts the observation to a seeded subsample of its zones.
pub fn subsample_zones(obs: &FlowNetwork, fraction: f64, seed: u64) -> Result<FlowNetwork> {
    let zones: Vec<usize> = obs.observed_regions().iter().copied().collect();
    let k = ((fraction * zones.len() as f64).round() as usize).clamp(1, zones.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep: BTreeSet<usize> = sample(&mut rng, zones.len(), k).into_iter().map(|i| zones[i]).collect();
    let edges = obs.observed_edges().iter().filter(|(o, d)| keep.contains(o) && keep.contains(d)).copied().collect();
    obs.with_observation(keep, edges)
}

pub fn ensemble_train(city: &CityGraph, obs: &FlowNetwork, cfg: &ReconstructConfig, members: usize, seed: u64) -> Result<Ensemble> {
    if members == 0 {
        return Err(Error::Invalid("an ensemble needs at least one member".into()));
    }
    let mut out = Vec::with_capacity(members);
    for m in 0..members {
        let member_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(m as u64);
        let sub = if members == 1 { obs.clone() } else { subsample_zones(obs, 0.8, member_seed)? };
        let mut c = cfg.clone();
        c.schedule.seed = member_seed;
        out.push(reconstruct(city, &sub, &c)?.checkpoint);
    }
    Ok(Ensemble { members: out })
}

/// Median of the members' log-flows per edge; a member without the edge
/// contributes `−∞`, and edges whose median is `−∞` are dropped.
pub fn median_log_aggregate(predictions: &[BTreeMap<Edge, f64>]) -> BTreeMap<Edge, f64> {
    let edges: BTreeSet<Edge> = predictions.iter().flat_map(|p| p.keys().copied()).collect();
    let mut out = BTreeMap::new();
    for e in edges {
        let mut logs: Vec<f64> = predictions.iter().map(|p| p.get(&e).map_or(f64::NEG_INFINITY, |f| f.ln())).collect();
        logs.sort_by(f64::total_cmp);
        let m = logs.len();
        let med = if m % 2 == 1 { logs[m / 2] } else { 0.5 * (logs[m / 2 - 1] + logs[m / 2]) };
        if med.is_finite() {
            out.insert(e, med.exp());
        }
    }
    out
}

pub fn ensemble_predict(ens: &Ensemble, city: &CityGraph) -> Result<FlowNetwork> {
    let preds = ens.members.iter().map(|c| c.infer(city)).collect::<Result<Vec<_>>>()?;
    FlowNetwork::new(median_log_aggregate(&preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::{sample_observation, ObservationSpec, Scenario};
    use crate::synthcity::{generate_city, FieldConfig, Sparsity, SynthConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn huber_examples() {
        assert_eq!(huber_loss(0.0, 0.5), 0.0);
        assert_relative_eq!(huber_loss(0.3, 0.5), 0.045, epsilon = 1e-15);
        assert_relative_eq!(huber_loss(1.0, 0.5), 0.375, epsilon = 1e-15);
    }

    #[test]
    fn weight_examples() {
        let flows: BTreeMap<Edge, f64> = [((0, 1), 2.0), ((1, 0), 2.0), ((1, 2), 2.0)].into();
        let u = sample_weights(&flows, &LossConfig::transfer()).unwrap();
        assert!(u.values().all(|&w| w == 1.0));
        let s = sample_weights(&flows, &LossConfig::default()).unwrap();
        assert!(s.values().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        let two: BTreeMap<Edge, f64> = [((0, 1), 0.0), ((1, 0), 2.0 * 3f64.ln())].into();
        let s = sample_weights(&two, &LossConfig::default()).unwrap();
        assert_relative_eq!(s[&(0, 1)], 0.25, epsilon = 1e-15);
        assert_relative_eq!(s[&(1, 0)], 0.75, epsilon = 1e-15);
        let huge: BTreeMap<Edge, f64> = [((0, 1), 1e6), ((1, 0), 1e6 - 2.0)].into();
        let s = sample_weights(&huge, &LossConfig::default()).unwrap();
        assert!(s.values().all(|w| w.is_finite()));
        assert!(sample_weights(&BTreeMap::new(), &LossConfig::default()).is_err());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_joint(&[3.0, 5.0], &[3.0, 5.0], &[1.0, 1.0], 0.5).unwrap(), 0.0);
        let one = loss_meta(&[0.3f64.exp()], &[1.0], &[1.0], 0.5).unwrap();
        assert_relative_eq!(one, 0.045, epsilon = 1e-14);
        let full = loss_joint(&[2.0, 7.0], &[3.0, 5.0], &[1.0, 1.0], 0.5).unwrap();
        let half = loss_joint(&[2.0, 7.0], &[3.0, 5.0], &[0.5, 0.5], 0.5).unwrap();
        assert_relative_eq!(half, full / 2.0, epsilon = 1e-15);
        assert!(loss_joint(&[1.0], &[0.0], &[1.0], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn huber_properties(r in -10.0f64..10.0, delta in 0.01f64..3.0) {
            prop_assert!((huber(r, delta) - huber(-r, delta)).abs() < 1e-12);
            prop_assert!(huber(r, delta) <= 0.5 * r * r + 1e-12);
            let h = 1e-6;
            let d = |x: f64| (huber(x + h, delta) - huber(x - h, delta)) / (2.0 * h);
            prop_assert!((d(delta + 1e-9) - d(delta - 1e-9)).abs() < 1e-4);
        }

        #[test]
        fn softmax_weight_properties(fs in proptest::collection::vec(0.0f64..50.0, 1..20), shift in -5.0f64..5.0) {
            let flows: BTreeMap<Edge, f64> = fs.iter().enumerate().map(|(k, &f)| ((k, k + 1), f)).collect();
            let cfg = LossConfig::default();
            let w = sample_weights(&flows, &cfg).unwrap();
            prop_assert!(w.values().all(|&v| v > 0.0));
            prop_assert!((w.values().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: BTreeMap<Edge, f64> = flows.iter().map(|(&e, &f)| (e, f + shift * cfg.tau)).collect();
            let w2 = sample_weights(&shifted, &cfg).unwrap();
            for (a, b) in w.values().zip(w2.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ensemble_median() {
        let preds: Vec<BTreeMap<Edge, f64>> =
            [1.0f64, 2.0, 9.0].iter().map(|&l| [((0, 1), l.exp())].into()).collect();
        let m = median_log_aggregate(&preds);
        assert_relative_eq!(m[&(0, 1)], 2f64.exp(), epsilon = 1e-12);
        let sparse: Vec<BTreeMap<Edge, f64>> = vec![[((0, 1), 1.0)].into(), BTreeMap::new(), BTreeMap::new()];
        assert!(median_log_aggregate(&sparse).is_empty());
    }

    fn oracle(seed: u64, n: usize) -> (crate::synthcity::SynthCity, FlowNetwork) {
        let cfg = SynthConfig { n_regions: n, sparsity: Sparsity::TopK(20), seed, n_nuisance: 6, ..SynthConfig::default() };
        let s = generate_city(&cfg).unwrap();
        let obs = sample_observation(&s.flows, &s.city, &ObservationSpec::new(Scenario::Internal, 0.4, seed).unwrap()).unwrap();
        (s, obs)
    }

    fn quick() -> ReconstructConfig {
        ReconstructConfig {
            model: ModelConfig::compact(),
            schedule: TrainSchedule { pretrain_epochs: 20, max_epochs: 30, patience: 10, ..TrainSchedule::default() },
            gbdt: GbdtConfig { n_trees: 20, ..GbdtConfig::default() },
            loss: LossConfig::transfer(),
        }
    }

    #[test]
    fn zone_split_is_disjoint_and_internal() {
        let (_, obs) = oracle(1, 60);
        let s = split_zones(&obs, 0.2, 3).unwrap();
        assert!(s.train_zones.is_disjoint(&s.val_zones));
        assert!(s.val_edges.iter().all(|(o, d)| s.val_zones.contains(o) && s.val_zones.contains(d)));
        assert!(s.train_edges.iter().all(|(o, d)| !s.val_zones.contains(o) && !s.val_zones.contains(d)));
        let tiny = obs.with_observation([0].into(), BTreeSet::new()).unwrap();
        assert!(split_zones(&tiny, 0.2, 0).is_err());
    }

    #[test]
    fn pretrain_recovers_constant_field() {
        let mut cfg = SynthConfig { n_regions: 50, sparsity: Sparsity::None, n_nuisance: 4, seed: 2, ..SynthConfig::default() };
        cfg.fields = FieldConfig { alpha_amp: 0.0, emit_amp: 0.0, attract_amp: 0.0, class_amp: 0.0, ..FieldConfig::default() };
        let s = generate_city(&cfg).unwrap();
        let obs = sample_observation(&s.flows, &s.city, &ObservationSpec::new(Scenario::Internal, 1.0, 2).unwrap()).unwrap();
        let (nc, stats) = normalize_features(&s.city, None).unwrap();
        let ctx = GraphContext::new(&nc, &stats, obs.observed_edges().iter().copied()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = FlowModel::new(ModelConfig::compact(), ctx.input_dim(), &mut rng).unwrap();
        model.warm_start_meta(GravityParams::new(cfg.fields.g0 * 10.0, 0.5).unwrap());
        let sched = TrainSchedule { pretrain_epochs: 2000, learning_rate: 3e-2, ..TrainSchedule::default() };
        let rep = pretrain_meta(&mut model, &ctx, &obs, obs.observed_edges(), &sched, &LossConfig::transfer()).unwrap();
        assert!(rep.best_loss <= rep.losses[0]);
        let fit = fit_classical_gravity(&obs, &s.city).unwrap();
        // Gravity slope of the pretrained outputs over all observed edges.
        let all: Vec<usize> = (0..ctx.edges().len()).collect();
        let mut tape = Tape::new();
        let h0 = tape.input(ctx.node_inputs().clone());
        let src: Rc<[usize]> = ctx.edges().iter().map(|e| e.0).collect();
        let dst: Rc<[usize]> = ctx.edges().iter().map(|e| e.1).collect();
        let pp = tape.input(crate::autodiff::Matrix::column(all.iter().map(|&k| ctx.log_pp()[k]).collect()));
        let ld = tape.input(crate::autodiff::Matrix::column(all.iter().map(|&k| ctx.log_d()[k]).collect()));
        let out = model.meta.forward(&mut tape, &model.store, h0, &src, &dst, pp, ld);
        let lf = tape.value(out.log_flow);
        let y: Vec<f64> = all.iter().map(|&k| lf.data[k] - ctx.log_pp()[k]).collect();
        let x: Vec<f64> = all.iter().map(|&k| ctx.log_d()[k]).collect();
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let alpha = -sxy / sxx;
        assert!((alpha - fit.alpha).abs() < 0.1, "{alpha} vs {}", fit.alpha);
    }

    #[test]
    fn pretrain_zero_epochs_and_divergence() {
        let (s, obs) = oracle(3, 40);
        let (nc, stats) = normalize_features(&s.city, None).unwrap();
        let ctx = GraphContext::new(&nc, &stats, obs.observed_edges().iter().copied()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = FlowModel::new(ModelConfig::compact(), ctx.input_dim(), &mut rng).unwrap();
        let before = model.clone();
        let zero = TrainSchedule { pretrain_epochs: 0, ..TrainSchedule::default() };
        pretrain_meta(&mut model, &ctx, &obs, obs.observed_edges(), &zero, &LossConfig::transfer()).unwrap();
        assert_eq!(model, before);
        let wild = TrainSchedule { pretrain_epochs: 500, learning_rate: 1e3, ..TrainSchedule::default() };
        let err = pretrain_meta(&mut model, &ctx, &obs, obs.observed_edges(), &wild, &LossConfig::transfer());
        assert!(matches!(err, Err(Error::Diverged { .. })), "{err:?}");
        assert!(model.store.is_finite());
    }

    #[test]
    fn early_stopping_contract_and_determinism() {
        let (s, obs) = oracle(4, 60);
        let cfg = quick();
        let a = reconstruct(&s.city, &obs, &cfg).unwrap();
        let r = &a.report;
        let max = r.epochs.iter().map(|e| e.val_r2).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_val_r2, max);
        assert!(r.stop_epoch <= cfg.schedule.max_epochs);
        let last_improvement = r
            .epochs
            .iter()
            .scan((f64::NEG_INFINITY, f64::NEG_INFINITY, 0), |st, e| {
                if e.val_r2 > st.0 || e.val_cpc > st.1 {
                    st.2 = e.epoch;
                }
                st.0 = st.0.max(e.val_r2);
                st.1 = st.1.max(e.val_cpc);
                Some(st.2)
            })
            .last()
            .unwrap();
        assert!(r.stop_epoch <= last_improvement + cfg.schedule.patience);
        let b = reconstruct(&s.city, &obs, &cfg).unwrap();
        assert_eq!(a.report.to_text(), b.report.to_text());
        assert_eq!(a.flows, b.flows);
    }

    #[test]
    fn self_transfer_matches_inference_and_schema_errors() {
        let (s, obs) = oracle(5, 50);
        let rec = reconstruct(&s.city, &obs, &quick()).unwrap();
        let t = transfer_apply(&rec.checkpoint, &s.city).unwrap();
        assert_eq!(t.flows(), &rec.checkpoint.infer(&s.city).unwrap());
        let mut names = s.city.features().names().to_vec();
        names[0] = "renamed".into();
        let rows = (0..s.city.n_regions()).map(|i| s.city.features().row(i).to_vec()).collect();
        let other = s.city.with_features(FeatureTable::new(names, rows).unwrap()).unwrap();
        match transfer_apply(&rec.checkpoint, &other) {
            Err(Error::SchemaMismatch { missing }) => assert_eq!(missing, vec![s.city.features().names()[0].clone()]),
            other => panic!("{other:?}"),
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        rec.checkpoint.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), rec.checkpoint);
    }

    #[test]
    fn single_member_ensemble_equals_model() {
        let (s, obs) = oracle(6, 50);
        let cfg = quick();
        let ens = ensemble_train(&s.city, &obs, &cfg, 1, 7).unwrap();
        let single = ens.members[0].infer(&s.city).unwrap();
        let pred = ensemble_predict(&ens, &s.city).unwrap();
        for (e, f) in pred.flows() {
            assert_relative_eq!(*f, single[e], max_relative = 1e-12);
        }
        assert!(ensemble_train(&s.city, &obs, &cfg, 0, 0).is_err());
    }
}
