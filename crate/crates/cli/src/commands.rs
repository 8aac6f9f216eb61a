//! Command bodies. Each writes its artifacts and resolved config into `out`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use odflow::epidriver::{mixing_from_flows, simulate, SeirState, SeirTrajectory};
use odflow::geodata::{
    load_city, load_flows, load_regions, sample_observation, write_flows_csv, CityGraph, Edge, FlowNetwork,
    ObservationSpec,
};
use odflow::metrics::{evaluate, median, quantile_sorted, EvalOptions, EvalReport};
use odflow::segregation::{segregation_index, si_scan, IncomeField, SegregationResult};
use odflow::synthcity::{generate_city, generate_pair, SynthCity};
use odflow::trainer::{
    ensemble_predict, ensemble_train, gravity_baseline, reconstruct, Checkpoint, Ensemble, Reconstruction,
};

use crate::config::*;
use crate::plots;

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_input(input: &CityInput) -> Result<(CityGraph, Option<FlowNetwork>)> {
    match &input.regions {
        Some(regions) => {
            let features = input.features.as_ref().ok_or_else(|| anyhow!("a features file is required with a regions file"))?;
            Ok(load_city(regions, features, input.flows.as_deref())?)
        }
        None => {
            let s = generate_city(&input.synth)?;
            Ok((s.city, Some(s.flows)))
        }
    }
}

fn require_flows(flows: Option<FlowNetwork>) -> Result<FlowNetwork> {
    flows.ok_or_else(|| anyhow!("a flows file is required"))
}

fn pairs(truth: &FlowNetwork, pred: &BTreeMap<Edge, f64>, edges: &[Edge]) -> (Vec<f64>, Vec<f64>) {
    edges.iter().map(|e| (truth.flow(*e), pred.get(e).copied().unwrap_or(0.0))).unzip()
}

fn write_eval(out: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    write(&out.join(format!("{stem}.txt")), &report.to_kv())?;
    write(&out.join(format!("{stem}_bins.csv")), &report.bins_csv())
}

struct Outcome {
    obs: FlowNetwork,
    rec: Reconstruction,
    neuro: EvalReport,
    gravity: EvalReport,
}

fn reconstruct_once(city: &CityGraph, truth: &FlowNetwork, run: &ReconstructRun, seed: u64) -> Result<Outcome> {
    let spec = ObservationSpec::new(run.scenario, run.ratio, seed)?;
    let obs = sample_observation(truth, city, &spec)?;
    let mut cfg = run.train.clone();
    cfg.schedule.seed = seed;
    let rec = reconstruct(city, &obs, &cfg)?;
    let opts = EvalOptions::default();
    let neuro = evaluate(&obs, &rec.flows, city, &opts)?;
    let (_, grav) = gravity_baseline(&obs, city)?;
    let gravity = evaluate(&obs, &grav, city, &opts)?;
    Ok(Outcome { obs, rec, neuro, gravity })
}

fn write_outcome(out: &Path, city: &CityGraph, o: &Outcome, top_fraction: f64) -> Result<()> {
    o.rec.checkpoint.save(&out.join("checkpoint.json"))?;
    write_flows_csv(city, &o.rec.flows, &out.join("predicted_flows.csv"))?;
    write_eval(out, "eval_report", &o.neuro)?;
    write_eval(out, "gravity_report", &o.gravity)?;
    let mut train = o.rec.report.to_text();
    let _ = writeln!(train, "gravity_g={}\ngravity_alpha={}", o.rec.gravity.g, o.rec.gravity.alpha);
    let _ = writeln!(train, "candidates={}", o.rec.n_candidates);
    for (e, l) in o.rec.pretrain.losses.iter().enumerate() {
        let _ = writeln!(train, "pretrain {e} {l}");
    }
    write(&out.join("training_report.txt"), &train)?;
    let hidden = o.obs.hidden_edges();
    let (t, p) = pairs(&o.obs, &o.rec.flows, &hidden);
    plots::scatter(&out.join("scatter.svg"), &t, &p, "hidden edges")?;
    plots::distance_errors(&out.join("distance_error.svg"), &o.neuro.distance_bins)?;
    plots::flow_map(&out.join("flow_map.svg"), city, &o.rec.flows, top_fraction)
}

pub fn cmd_reconstruct(run: &ReconstructRun, out: &Path) -> Result<()> {
    if run.repeats == 0 {
        bail!("repeats must be at least 1");
    }
    let (city, flows) = load_input(&run.input)?;
    let truth = require_flows(flows)?;
    write_resolved(run, out)?;
    let mut rows = String::from("repeat,seed,r2,cpc,gravity_r2,gravity_cpc\n");
    let mut cols: [Vec<f64>; 4] = Default::default();
    for r in 0..run.repeats {
        let seed = run.seed + r as u64;
        let o = reconstruct_once(&city, &truth, run, seed)?;
        if r == 0 {
            write_outcome(out, &city, &o, run.top_fraction)?;
        }
        let vals = [o.neuro.r2, o.neuro.cpc, o.gravity.r2, o.gravity.cpc];
        let _ = writeln!(rows, "{r},{seed},{},{},{},{}", vals[0], vals[1], vals[2], vals[3]);
        for (c, v) in cols.iter_mut().zip(vals) {
            c.push(v);
        }
    }
    if run.repeats > 1 {
        write(&out.join("repeats.csv"), &rows)?;
        let mut summary = String::from("metric,median,q1,q3\n");
        for (name, mut c) in ["r2", "cpc", "gravity_r2", "gravity_cpc"].into_iter().zip(cols) {
            c.sort_by(f64::total_cmp);
            let _ = writeln!(summary, "{name},{},{},{}", median(&c), quantile_sorted(&c, 0.25), quantile_sorted(&c, 0.75));
        }
        write(&out.join("summary.csv"), &summary)?;
    }
    Ok(())
}

pub fn cmd_train_ensemble(run: &EnsembleRun, out: &Path) -> Result<()> {
    let (city, flows) = load_input(&run.input)?;
    let truth = require_flows(flows)?;
    write_resolved(run, out)?;
    let obs = sample_observation(&truth, &city, &ObservationSpec::new(run.scenario, run.ratio, run.seed)?)?;
    let mut cfg = run.train.clone();
    cfg.schedule.seed = run.seed;
    let ens = ensemble_train(&city, &obs, &cfg, run.members, run.seed)?;
    let dir = out.join("members");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (m, c) in ens.members.iter().enumerate() {
        c.save(&dir.join(format!("member_{m:02}.json")))?;
    }
    let pred = ensemble_predict(&ens, &city)?;
    write_flows_csv(&city, pred.flows(), &out.join("predicted_flows.csv"))?;
    let report = evaluate(&obs, pred.flows(), &city, &EvalOptions::default())?;
    write_eval(out, "eval_report", &report)
}

/// A checkpoint file, or every `.json` checkpoint in a directory (sorted by name).
pub fn load_checkpoints(path: &Path) -> Result<Vec<Checkpoint>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        if files.is_empty() {
            bail!("no checkpoint files in {}", path.display());
        }
        files.iter().map(|f| Ok(Checkpoint::load(f)?)).collect()
    } else {
        Ok(vec![Checkpoint::load(path)?])
    }
}

pub fn cmd_transfer(run: &TransferRun, out: &Path) -> Result<()> {
    let members = load_checkpoints(&run.checkpoint)?;
    let (city, truth) = load_input(&run.target)?;
    write_resolved(run, out)?;
    let pred = ensemble_predict(&Ensemble { members }, &city)?;
    write_flows_csv(&city, pred.flows(), &out.join("predicted_flows.csv"))?;
    plots::flow_map(&out.join("flow_map.svg"), &city, pred.flows(), run.top_fraction)?;
    if let Some(truth) = truth {
        let report = evaluate(&truth, pred.flows(), &city, &EvalOptions::default())?;
        write_eval(out, "eval_report", &report)?;
        let edges: Vec<Edge> = truth.flows().keys().copied().collect();
        let (t, p) = pairs(&truth, pred.flows(), &edges);
        plots::scatter(&out.join("scatter.svg"), &t, &p, "zero-shot transfer")?;
    }
    Ok(())
}

fn seg_text(r: &SegregationResult) -> String {
    format!(
        "k={}\nsi={}\nbi_global={}\nbi_inter={}\nbi_intra={}\ndegenerate={}\n",
        r.k, r.si, r.bi_global, r.bi_inter, r.bi_intra, r.degenerate
    )
}

pub fn cmd_segindex(run: &SegindexRun, out: &Path) -> Result<()> {
    let city = match &run.regions {
        Some(p) => load_regions(p)?,
        None => generate_city(&run.synth)?.city,
    };
    let field = IncomeField::from_city(&city)?;
    write_resolved(run, out)?;
    let result = segregation_index(&field, run.k)?;
    write(&out.join("segregation.txt"), &seg_text(&result))?;
    if run.scan {
        let curve = si_scan(&field)?;
        let mut csv = String::from("k,si,bi_inter,bi_intra,degenerate\n");
        for r in &curve {
            let _ = writeln!(csv, "{},{},{},{},{}", r.k, r.si, r.bi_inter, r.bi_intra, r.degenerate);
        }
        write(&out.join("si_curve.csv"), &csv)?;
        let pts: Vec<(f64, f64)> = curve.iter().map(|r| (r.k as f64, r.si)).collect();
        plots::lines(&out.join("si_curve.svg"), "segregation index", "K", "SI", &[("SI", pts)])?;
    }
    Ok(())
}

fn run_seir(city: &CityGraph, flows: &BTreeMap<Edge, f64>, run: &SeirRun) -> Result<SeirTrajectory> {
    let populations: Vec<f64> = city.regions().iter().map(|r| r.population).collect();
    let seeds: Vec<(usize, f64)> = if run.seed_regions.is_empty() {
        let top = (0..populations.len())
            .max_by(|&a, &b| populations[a].total_cmp(&populations[b]).then(b.cmp(&a)))
            .ok_or_else(|| anyhow!("the city has no regions"))?;
        vec![(top, run.seed_infected)]
    } else {
        run.seed_regions
            .iter()
            .map(|id| city.index_of(id).map(|k| (k, run.seed_infected)).ok_or_else(|| anyhow!("unknown seed region {id}")))
            .collect::<Result<_>>()?
    };
    let state = SeirState::seeded(&populations, &seeds)?;
    let mixing = mixing_from_flows(flows, city.n_regions())?;
    Ok(simulate(&state, &run.params, &mixing)?)
}

fn curve(t: &SeirTrajectory) -> Vec<(f64, f64)> {
    t.days.iter().enumerate().map(|(d, s)| (d as f64, s.total_infectious())).collect()
}

pub fn cmd_seir(run: &SeirRun, out: &Path) -> Result<()> {
    if run.checkpoint.is_some() && run.estimated_flows.is_some() {
        bail!("give either a checkpoint or an estimated flows file, not both");
    }
    let (city, flows) = load_input(&run.input)?;
    let truth = require_flows(flows)?;
    let estimated = match (&run.checkpoint, &run.estimated_flows) {
        (Some(c), _) => Some(Checkpoint::load(c)?.infer(&city)?),
        (_, Some(f)) => Some(load_flows(f, &city)?.flows().clone()),
        _ => None,
    };
    run.params.validate()?;
    write_resolved(run, out)?;
    let ids: Vec<String> = city.regions().iter().map(|r| r.id.clone()).collect();
    let base = run_seir(&city, truth.flows(), run)?;
    match estimated {
        None => {
            base.write_csv(&ids, &out.join("trajectory.csv"))?;
            plots::lines(&out.join("epidemic_curve.svg"), "infectious", "day", "I", &[("flows", curve(&base))])
        }
        Some(est) => {
            let other = run_seir(&city, &est, run)?;
            base.write_csv(&ids, &out.join("trajectory_true.csv"))?;
            other.write_csv(&ids, &out.join("trajectory_estimated.csv"))?;
            let c = base.compare_peaks(&other);
            let text = format!(
                "peak_day_true={}\npeak_day_estimated={}\npeak_height_true={}\npeak_height_estimated={}\npeak_day_difference={}\npeak_height_relative_difference={}\n",
                c.peak_day_a, c.peak_day_b, c.peak_height_a, c.peak_height_b, c.day_difference, c.relative_height_difference
            );
            write(&out.join("peaks.txt"), &text)?;
            plots::lines(
                &out.join("epidemic_curve.svg"),
                "infectious",
                "day",
                "I",
                &[("true flows", curve(&base)), ("estimated flows", curve(&other))],
            )
        }
    }
}

fn write_synth(s: &SynthCity, dir: &Path, top_fraction: f64) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    s.write_csv(dir)?;
    let mut fields = String::from("id,alpha,log_emit,log_attract,class\n");
    for (k, r) in s.city.regions().iter().enumerate() {
        let f = &s.fields;
        let _ = writeln!(fields, "{},{},{},{},{}", r.id, f.alpha[k], f.log_emit[k], f.log_attract[k], f.class[k]);
    }
    write(&dir.join("fields.csv"), &fields)?;
    plots::flow_map(&dir.join("flow_map.svg"), &s.city, s.flows.flows(), top_fraction)
}

pub fn cmd_synth(run: &SynthRun, out: &Path) -> Result<()> {
    match &run.pair {
        None => {
            let s = generate_city(&run.synth)?;
            write_resolved(run, out)?;
            write_synth(&s, out, run.top_fraction)
        }
        Some(p) => {
            let (a, b) = generate_pair(&run.synth, p.divergence, p.si_offset)?;
            write_resolved(run, out)?;
            write_synth(&a, &out.join("city_a"), run.top_fraction)?;
            write_synth(&b, &out.join("city_b"), run.top_fraction)
        }
    }
}

pub fn cmd_eval(run: &EvalRun, out: &Path) -> Result<()> {
    let city = load_regions(&run.regions)?;
    let truth = load_flows(&run.truth, &city)?;
    let pred = load_flows(&run.predicted, &city)?;
    write_resolved(run, out)?;
    let report = evaluate(&truth, pred.flows(), &city, &EvalOptions::default())?;
    write_eval(out, "eval_report", &report)?;
    let edges: Vec<Edge> = truth.flows().keys().copied().collect();
    let (t, p) = pairs(&truth, pred.flows(), &edges);
    plots::scatter(&out.join("scatter.svg"), &t, &p, "estimated vs true")
}
