//! Ranking metrics, multi-step rollout evaluation, seed aggregation and
//! graph-recovery scoring.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cpm::{Choice, Scope};
use crate::dataset::Dataset;
use crate::env::{EnvAction, Image};
use crate::error::{Error, Result};
use crate::model::WorldModel;
use crate::nn::{Tape, Tensor};

/// Factorized latent distance: summed squared differences.
pub fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

/// `1 +` the number of non-target references at distance no greater than
/// the target's, so ties count against the prediction.
pub fn rank(pred: &[f32], target: usize, refs: &[&[f32]]) -> Result<usize> {
    if refs.is_empty() {
        return Err(Error::input("empty reference set"));
    }
    if target >= refs.len() {
        return Err(Error::input(format!("target {target} outside {} references", refs.len())));
    }
    let dt = distance(pred, refs[target]);
    Ok(1 + refs
        .iter()
        .enumerate()
        .filter(|&(k, r)| k != target && distance(pred, r) <= dt)
        .count())
}

pub fn hits_at_1(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::input("no ranks"));
    }
    Ok(ranks.iter().filter(|&&r| r == 1).count() as f64 / ranks.len() as f64)
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::input("no ranks"));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Mean of the `k` largest values.
pub fn aggregate_seeds(values: &[f64], k: usize) -> Result<f64> {
    if k == 0 || values.len() < k {
        return Err(Error::input(format!("cannot keep the top {k} of {} values", values.len())));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recovery {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn unordered(p: (usize, usize)) -> (usize, usize) {
    (p.0.min(p.1), p.0.max(p.1))
}

/// Per-step comparison of inferred object pairs (`None` for single-object
/// scopes) with realized interactions. Pairs are compared unordered. With
/// no positives and no predictions every score is 1.
pub fn graph_recovery_f1(inferred: &[Option<(usize, usize)>], truth: &[Option<(usize, usize)>]) -> Result<Recovery> {
    if inferred.len() != truth.len() {
        return Err(Error::input("inferred and true graphs cover different steps"));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, t) in inferred.iter().zip(truth) {
        let p = p.map(unordered);
        let t = t.map(unordered);
        match (p, t) {
            (Some(a), Some(b)) if a == b => tp += 1,
            (Some(_), Some(_)) => {
                fp += 1;
                fneg += 1;
            }
            (Some(_), None) => fp += 1,
            (None, Some(_)) => fneg += 1,
            (None, None) => {}
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fneg) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Recovery { precision, recall, f1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model: String,
    pub setting: String,
    pub objects: usize,
    pub horizon: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub const CSV_HEADER: &str = "model,setting,objects,horizon,seed,metric,value";

pub fn write_csv(records: &[MetricRecord], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if records.is_empty() {
        out.write_record(CSV_HEADER.split(','))?;
    }
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    if rdr.headers()?.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Format("metrics CSV header mismatch".into()));
    }
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Encoded reference set: every distinct next-state frame of the dataset.
pub struct References {
    pub latents: Tensor<f32>,
    index: HashMap<Vec<u8>, usize>,
}

impl References {
    pub fn build(model: &WorldModel, data: &Dataset) -> Result<Self> {
        let mut index = HashMap::new();
        let mut frames: Vec<&Image> = Vec::new();
        for ep in &data.episodes {
            for f in &ep.frames[1..] {
                let key = f.quantize();
                if let Entry::Vacant(e) = index.entry(key) {
                    e.insert(frames.len());
                    frames.push(f);
                }
            }
        }
        if frames.is_empty() {
            return Err(Error::input("evaluation dataset has no transitions"));
        }
        let z = model.encode(&frames)?;
        let width = z.len() / frames.len();
        let latents = z.reshaped(&[frames.len(), width])?;
        Ok(References { latents, index })
    }

    pub fn len(&self) -> usize {
        self.latents.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, frame: &Image) -> Option<usize> {
        self.index.get(&frame.quantize()).copied()
    }
}

/// Ranks of `horizon`-step latent rollouts from every valid start.
pub fn rollout_ranks(
    model: &WorldModel,
    data: &Dataset,
    refs: &References,
    horizon: usize,
    sampled: Option<u64>,
) -> Result<Vec<usize>> {
    if horizon == 0 {
        return Err(Error::input("horizon must be at least 1"));
    }
    let mut starts = Vec::new();
    for (e, ep) in data.episodes.iter().enumerate() {
        for t in 0..ep.len().saturating_sub(horizon - 1) {
            starts.push((e, t));
        }
    }
    if starts.is_empty() {
        return Err(Error::input(format!("no episode is long enough for horizon {horizon}")));
    }
    let rows: Vec<&[f32]> = (0..refs.len()).map(|r| refs.latents.row(r)).collect();
    let mut mode = model.eval_mode(sampled.map(ChaCha8Rng::seed_from_u64));
    let mut ranks = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(256) {
        let frames: Vec<&Image> = chunk.iter().map(|&(e, t)| data.frame(e, t)).collect();
        let z = model.encode(&frames)?;
        let actions: Vec<Vec<EnvAction>> = (0..horizon)
            .map(|k| chunk.iter().map(|&(e, t)| data.episodes[e].actions[t + k]).collect())
            .collect();
        let pred = model.rollout(&z, &actions, &mut mode)?;
        let width = pred.len() / chunk.len();
        for (i, &(e, t)) in chunk.iter().enumerate() {
            let target = refs
                .position(data.frame(e, t + horizon))
                .ok_or_else(|| Error::contract("target frame missing from the reference set"))?;
            ranks.push(rank(&pred.data()[i * width..(i + 1) * width], target, &rows)?);
        }
    }
    Ok(ranks)
}

/// Pairs chosen by the scope controller (argmax) on every transition, next
/// to the realized interactions.
#[allow(clippy::type_complexity)]
pub fn inferred_interactions(
    model: &WorldModel,
    data: &Dataset,
) -> Result<(Vec<Option<(usize, usize)>>, Vec<Option<(usize, usize)>>)> {
    let net = model
        .arch
        .cpm()
        .ok_or_else(|| Error::input(format!("{} builds no causal graph", model.kind())))?;
    let steps: Vec<_> = data.steps().collect();
    let n = model.arch.slots();
    let mut inferred = Vec::with_capacity(steps.len());
    let mut truth = Vec::with_capacity(steps.len());
    for chunk in steps.chunks(256) {
        let frames: Vec<&Image> = chunk.iter().map(|s| data.frame(s.episode, s.t)).collect();
        let actions: Vec<EnvAction> = chunk.iter().map(|&s| data.action(s)).collect();
        let mut tape = Tape::new(&model.store);
        let z = model.arch.encode(&mut tape, &frames)?;
        let f = model.arch.forces(&mut tape, &actions)?;
        let out = net.step(&mut tape, z, f, n, Choice::Argmax)?;
        for (scope, s) in out.scopes.iter().zip(chunk) {
            inferred.push(match *scope {
                Scope::Pair(i, j) => Some((i, j)),
                Scope::Single(_) => None,
            });
            truth.push(data.episodes[s.episode].interactions[s.t].first().copied());
        }
    }
    Ok((inferred, truth))
}

/// H@1 and MRR at each horizon, plus graph recovery for controller-trained
/// causal process models.
pub fn evaluate(
    model: &WorldModel,
    data: &Dataset,
    horizons: &[usize],
    seed: u64,
    sampled: bool,
) -> Result<Vec<MetricRecord>> {
    let refs = References::build(model, data)?;
    let record = |horizon: usize, metric: &str, value: f64| MetricRecord {
        model: model.kind().to_string(),
        setting: data.config.mode.to_string(),
        objects: data.config.objects,
        horizon,
        seed,
        metric: metric.into(),
        value,
    };
    let mut out = Vec::new();
    for &h in horizons {
        let ranks = rollout_ranks(model, data, &refs, h, sampled.then_some(seed))?;
        out.push(record(h, "h@1", hits_at_1(&ranks)?));
        out.push(record(h, "mrr", mrr(&ranks)?));
    }
    if model.arch.cpm().is_some() && model.stage >= 2 {
        let (inferred, truth) = inferred_interactions(model, data)?;
        out.push(record(1, "graph_f1", graph_recovery_f1(&inferred, &truth)?.f1));
    }
    Ok(out)
}
