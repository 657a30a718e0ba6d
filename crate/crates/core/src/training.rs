//! Three-stage training: contrastive world-model fitting on the complete
//! graph, REINFORCE on the controllers, then alternating model and
//! controller updates with a Q-consistency regularizer on the rewards.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::cpm::{Choice, CpmNet, StepOut};
use crate::dataset::{Dataset, StepRef};
use crate::env::{EnvAction, Image};
use crate::error::{Error, Result};
use crate::model::{is_controller, is_reward, Arch, GraphMode, WorldModel};
use crate::nn::{grad_filtered, Adam, AdamConfig, Real, Tape, Tensor, Var};

/// Transitions `(s, a, s')` with one negative frame each.
#[derive(Clone, Debug)]
pub struct Batch<'d> {
    pub obs: Vec<&'d Image>,
    pub next: Vec<&'d Image>,
    pub neg: Vec<&'d Image>,
    pub actions: Vec<EnvAction>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Builds a batch from `steps`, drawing each negative from a different
/// transition of the same dataset.
pub fn make_batch<'d>(data: &'d Dataset, steps: &[StepRef], all: &[StepRef], rng: &mut ChaCha8Rng) -> Result<Batch<'d>> {
    if steps.is_empty() {
        return Err(Error::input("empty batch"));
    }
    if all.len() < 2 {
        return Err(Error::input("negative sampling needs at least two transitions"));
    }
    let mut b = Batch {
        obs: Vec::with_capacity(steps.len()),
        next: Vec::with_capacity(steps.len()),
        neg: Vec::with_capacity(steps.len()),
        actions: Vec::with_capacity(steps.len()),
    };
    for &s in steps {
        let neg = loop {
            let k = all[rng.gen_range(0..all.len())];
            if k != s {
                break k;
            }
        };
        b.obs.push(data.frame(s.episode, s.t));
        b.next.push(data.frame(s.episode, s.t + 1));
        b.neg.push(data.frame(neg.episode, neg.t));
        b.actions.push(data.action(s));
    }
    Ok(b)
}

/// Encodings of a batch's current, next and negative frames.
pub struct Encoded {
    pub obs: Var,
    pub next: Var,
    pub neg: Var,
}

pub fn encode_batch<T: Real>(arch: &Arch, tape: &mut Tape<'_, T>, batch: &Batch<'_>) -> Result<Encoded> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let b = batch.len();
    let n = arch.slots();
    let images: Vec<&Image> = batch.obs.iter().chain(&batch.next).chain(&batch.neg).copied().collect();
    let z = arch.encode(tape, &images)?;
    let part = |k: usize| -> Vec<usize> { (k * b * n..(k + 1) * b * n).collect() };
    Ok(Encoded {
        obs: tape.gather_rows(z, &part(0))?,
        next: tape.gather_rows(z, &part(1))?,
        neg: tape.gather_rows(z, &part(2))?,
    })
}

/// Per-sample factorized distance: the sum over the `n` object rows of each
/// sample of the squared Euclidean distance, as `[B, 1]`.
pub fn sample_distance<T: Real>(tape: &mut Tape<'_, T>, a: Var, b: Var, n: usize) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let per = tape.sum_row_groups(sq, n)?;
    let w = tape.shape(per)[1];
    let ones = tape.constant(Tensor::from_vec(&[w, 1], vec![T::one(); w])?);
    tape.matmul(per, ones)
}

/// Mean over the batch of `d(pred, next) + max(0, beta - d(neg, next))`.
pub fn contrastive_from<T: Real>(
    tape: &mut Tape<'_, T>,
    pred: Var,
    next: Var,
    neg: Var,
    n: usize,
    beta: f64,
) -> Result<Var> {
    let pos = sample_distance(tape, pred, next, n)?;
    let negd = sample_distance(tape, neg, next, n)?;
    let margin = tape.affine(negd, -T::one(), T::lit(beta));
    let hinge = tape.relu(margin);
    let total = tape.add(pos, hinge)?;
    Ok(tape.mean(total))
}

pub fn contrastive_loss<T: Real>(
    arch: &Arch,
    tape: &mut Tape<'_, T>,
    batch: &Batch<'_>,
    mode: GraphMode<'_>,
    beta: f64,
) -> Result<Var> {
    let e = encode_batch(arch, tape, batch)?;
    let f = arch.forces(tape, &batch.actions)?;
    let pred = arch.predict(tape, e.obs, f, mode)?;
    contrastive_from(tape, pred, e.next, e.neg, arch.slots(), beta)
}

/// Discounted return `sum_tau gamma^tau r_tau` of each episode; `rewards`
/// is episode-major with `len` steps per episode.
pub fn discounted_returns(rewards: &[f64], len: usize, gamma: f64) -> Vec<f64> {
    rewards
        .chunks(len)
        .map(|ep| ep.iter().enumerate().map(|(t, r)| gamma.powi(t as i32) * r).sum())
        .collect()
}

/// `-(1/E) sum_e sum_t log pi(choice_{e,t}) * G_e`, where `G_e` is the full
/// discounted return of episode `e` computed from fixed `rewards`.
pub fn reinforce_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    logp: Var,
    rewards: &[f64],
    len: usize,
    gamma: f64,
) -> Result<Var> {
    let b = tape.value(logp).len();
    if rewards.len() != b || len == 0 || !b.is_multiple_of(len) {
        return Err(Error::shape("rewards must cover whole episodes of the chosen log-probs"));
    }
    let returns = discounted_returns(rewards, len, gamma);
    let weights: Vec<T> = (0..b).map(|r| T::lit(returns[r / len])).collect();
    let lp = tape.reshape(logp, &[b, 1])?;
    let weighted = tape.mul_const(lp, weights)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, T::lit(-1.0 / (b / len) as f64)))
}

/// `(mu/E) sum_{e,tau} |R_tau - (log pi_tau - gamma max log pi_{tau+1})|`
/// with the next-step term zero at the end of each episode.
pub fn q_regularizer<T: Real>(
    tape: &mut Tape<'_, T>,
    reward: Var,
    logp: Var,
    logp_max: Var,
    len: usize,
    gamma: f64,
    mu: f64,
) -> Result<Var> {
    let b = tape.value(logp).len();
    if tape.value(reward).len() != b || tape.value(logp_max).len() != b || len == 0 || !b.is_multiple_of(len) {
        return Err(Error::shape("regularizer inputs must cover whole episodes"));
    }
    let r = tape.reshape(reward, &[b, 1])?;
    let lp = tape.reshape(logp, &[b, 1])?;
    let mx = tape.reshape(logp_max, &[b, 1])?;
    let next_idx: Vec<usize> = (0..b).map(|i| if (i + 1) % len == 0 { i } else { i + 1 }).collect();
    let mask: Vec<T> = (0..b)
        .map(|i| if (i + 1) % len == 0 { T::zero() } else { T::lit(gamma) })
        .collect();
    let next = tape.gather_rows(mx, &next_idx)?;
    let next = tape.mul_const(next, mask)?;
    let td = tape.sub(lp, next)?;
    let diff = tape.sub(r, td)?;
    let a = tape.abs(diff);
    let s = tape.sum(a);
    Ok(tape.scale(s, T::lit(mu / (b / len) as f64)))
}

/// One controller-driven step over a batch plus both learned rewards.
pub struct Trace {
    pub step: StepOut,
    pub scope_reward: Var,
    pub attr_reward: Var,
    pub scope_logp: Var,
    pub attr_logp: Var,
    pub scope_max: Var,
    pub attr_max: Var,
}

pub fn trace<T: Real>(
    net: &CpmNet,
    tape: &mut Tape<'_, T>,
    objects: Var,
    force: Var,
    n: usize,
    choice: Choice<'_>,
) -> Result<Trace> {
    let step = net.step(tape, objects, force, n, choice)?;
    let (Some(sl), Some(al)) = (step.scope_logp, step.attr_logp) else {
        return Err(Error::contract("traces need controller choices"));
    };
    let scope_reward = net.rewards.scope_reward(tape, objects, force, step.force, &step.scopes, n)?;
    let attr_reward = net
        .rewards
        .attr_reward(tape, step.force, objects, step.objects, &step.scopes, &step.targets, n)?;
    let si = step.scope_indices(n)?;
    let ai = step.attr_positions()?;
    let scope_logp = tape.pick(sl, &si)?;
    let attr_logp = tape.pick(al, &ai)?;
    let scope_max = tape.max_rows(sl)?;
    let attr_max = tape.max_rows(al)?;
    Ok(Trace {
        step,
        scope_reward,
        attr_reward,
        scope_logp,
        attr_logp,
        scope_max,
        attr_max,
    })
}

fn values<T: Real>(tape: &Tape<'_, T>, v: Var) -> Vec<f64> {
    tape.value(v).data().iter().map(|x| x.as_f64()).collect()
}

/// Controller loss on an episode-major batch of `len`-step episodes; the
/// rewards enter as constants.
pub fn policy_loss<T: Real>(
    net: &CpmNet,
    tape: &mut Tape<'_, T>,
    arch: &Arch,
    batch: &Batch<'_>,
    len: usize,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let n = arch.slots();
    let z = arch.encode(tape, &batch.obs)?;
    let f = arch.forces(tape, &batch.actions)?;
    let tr = trace(net, tape, z, f, n, Choice::Sample(rng))?;
    let rs = values(tape, tr.scope_reward);
    let ra = values(tape, tr.attr_reward);
    let ls = reinforce_loss(tape, tr.scope_logp, &rs, len, gamma)?;
    let la = reinforce_loss(tape, tr.attr_logp, &ra, len, gamma)?;
    tape.add(ls, la)
}

/// Stage-three model loss: contrastive loss on sampled graphs plus the
/// Q-consistency regularizer of both controllers. Returns `(total,
/// contrastive, regularizer)`.
#[allow(clippy::too_many_arguments)]
pub fn model_loss<T: Real>(
    net: &CpmNet,
    tape: &mut Tape<'_, T>,
    arch: &Arch,
    batch: &Batch<'_>,
    len: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var, Var)> {
    let n = arch.slots();
    let e = encode_batch(arch, tape, batch)?;
    let f = arch.forces(tape, &batch.actions)?;
    let tr = trace(net, tape, e.obs, f, n, Choice::Sample(rng))?;
    let c = contrastive_from(tape, tr.step.objects, e.next, e.neg, n, cfg.beta)?;
    let qs = q_regularizer(tape, tr.scope_reward, tr.scope_logp, tr.scope_max, len, cfg.gamma, cfg.mu)?;
    let qa = q_regularizer(tape, tr.attr_reward, tr.attr_logp, tr.attr_max, len, cfg.gamma, cfg.mu)?;
    let q = tape.add(qs, qa)?;
    Ok((tape.add(c, q)?, c, q))
}

/// Training stage identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One = 1,
    Two = 2,
    Three = 3,
}

pub fn world_params(name: &str) -> bool {
    !is_controller(name) && !is_reward(name)
}

pub fn theta_params(name: &str) -> bool {
    !is_controller(name)
}

pub fn controller_params(name: &str) -> bool {
    is_controller(name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub stage: u32,
    pub round: usize,
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

/// Loss stream of a run. Wall-clock times are kept apart so the loss file
/// is reproducible byte for byte.
#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
    pub timing: Vec<(u32, usize, usize, f64)>,
}

impl MetricsLog {
    fn push(&mut self, stage: u32, round: usize, epoch: usize, term: &str, value: f64) {
        self.rows.push(MetricRow {
            stage,
            round,
            epoch,
            term: term.into(),
            value,
        });
    }

    pub fn last(&self, stage: u32, term: &str) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.stage == stage && r.term == term).map(|r| r.value)
    }

    pub fn series(&self, stage: u32, term: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.stage == stage && r.term == term).map(|r| r.value).collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["stage", "round", "epoch", "term", "value"])?;
        for r in &self.rows {
            out.write_record([
                r.stage.to_string(),
                r.round.to_string(),
                r.epoch.to_string(),
                r.term.clone(),
                r.value.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_timing(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["stage", "round", "epoch", "seconds"])?;
        for (s, r, e, t) in &self.timing {
            out.write_record([s.to_string(), r.to_string(), e.to_string(), format!("{t:.3}")])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, metrics: &Path, timing: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(metrics, buf)?;
        let mut buf = Vec::new();
        self.write_timing(&mut buf)?;
        std::fs::write(timing, buf)?;
        Ok(())
    }
}

fn check_finite(stage: u32, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged(format!("stage {stage} {term} loss became {v}")))
    }
}

fn adam(cfg: &TrainConfig) -> Adam {
    Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    })
}

/// Runs training stages on one dataset with one RNG stream.
pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub data: &'d Dataset,
    pub log: MetricsLog,
    rng: ChaCha8Rng,
    all: Vec<StepRef>,
    model_opt: Adam,
    policy_opt: Adam,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, data: &'d Dataset, seed: u64) -> Result<Self> {
        let all: Vec<StepRef> = data.steps().collect();
        if all.len() < 2 {
            return Err(Error::input("training needs at least two transitions"));
        }
        if cfg.batch == 0 || cfg.episode_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        Ok(Trainer {
            model_opt: adam(&cfg),
            policy_opt: adam(&cfg),
            cfg,
            data,
            log: MetricsLog::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            all,
        })
    }

    fn episode_len(&self) -> Result<usize> {
        let len = self.data.episodes[0].len();
        if len == 0 || self.data.episodes.iter().any(|e| e.len() != len) {
            return Err(Error::input("controller training needs equal-length, nonempty episodes"));
        }
        Ok(len)
    }

    /// Episode-major batches of whole episodes.
    fn episode_batches(&mut self) -> Result<Vec<Batch<'d>>> {
        let len = self.episode_len()?;
        let mut order: Vec<usize> = (0..self.data.episodes.len()).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::new();
        for chunk in order.chunks(self.cfg.episode_batch) {
            let steps: Vec<StepRef> = chunk
                .iter()
                .flat_map(|&e| (0..len).map(move |t| StepRef { episode: e, t }))
                .collect();
            out.push(make_batch(self.data, &steps, &self.all, &mut self.rng)?);
        }
        Ok(out)
    }

    fn stage1_epoch(&mut self, model: &mut WorldModel) -> Result<f64> {
        let mut order = self.all.clone();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(self.cfg.batch) {
            let batch = make_batch(self.data, chunk, &self.all, &mut self.rng)?;
            let arch = &model.arch;
            let beta = self.cfg.beta;
            let v = grad_filtered(&mut model.store, world_params, |tape| {
                contrastive_loss(arch, tape, &batch, GraphMode::Complete, beta)
            })?;
            check_finite(1, "contrastive", v as f64)?;
            self.model_opt.step(&mut model.store, world_params)?;
            total += v as f64 * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(total / count as f64)
    }

    /// Contrastive training on the complete graph; controllers and reward
    /// heads are left untouched.
    pub fn stage1(&mut self, model: &mut WorldModel) -> Result<()> {
        for epoch in 0..self.cfg.stage1_epochs {
            let t0 = Instant::now();
            let loss = self.stage1_epoch(model)?;
            self.log.push(1, 0, epoch, "contrastive", loss);
            self.log.timing.push((1, 0, epoch, t0.elapsed().as_secs_f64()));
        }
        model.stage = model.stage.max(1);
        Ok(())
    }

    fn policy_epoch(&mut self, model: &mut WorldModel, stage: u32) -> Result<f64> {
        let net = model
            .arch
            .cpm()
            .cloned()
            .ok_or_else(|| Error::Pipeline(format!("{} has no controllers to train", model.kind())))?;
        let len = self.episode_len()?;
        let batches = self.episode_batches()?;
        let mut total = 0.0;
        for batch in &batches {
            let arch = &model.arch;
            let gamma = self.cfg.gamma;
            let rng = &mut self.rng;
            let v = grad_filtered(&mut model.store, controller_params, |tape| {
                policy_loss(&net, tape, arch, batch, len, gamma, rng)
            })?;
            check_finite(stage, "policy", v as f64)?;
            self.policy_opt.step(&mut model.store, controller_params)?;
            total += v as f64;
        }
        Ok(total / batches.len() as f64)
    }

    fn model_epoch(&mut self, model: &mut WorldModel) -> Result<(f64, f64)> {
        let net = model
            .arch
            .cpm()
            .cloned()
            .ok_or_else(|| Error::Pipeline(format!("{} has no controllers to train", model.kind())))?;
        let len = self.episode_len()?;
        let batches = self.episode_batches()?;
        let (mut tc, mut tq) = (0.0, 0.0);
        for batch in &batches {
            let arch = &model.arch;
            let cfg = self.cfg.clone();
            let rng = &mut self.rng;
            let mut parts = (0.0, 0.0);
            let parts_ref = &mut parts;
            grad_filtered(&mut model.store, theta_params, |tape| {
                let (total, c, q) = model_loss(&net, tape, arch, batch, len, &cfg, rng)?;
                *parts_ref = (tape.scalar(c)?.as_f64(), tape.scalar(q)?.as_f64());
                Ok(total)
            })?;
            check_finite(3, "contrastive", parts.0)?;
            check_finite(3, "q_reg", parts.1)?;
            self.model_opt.step(&mut model.store, theta_params)?;
            tc += parts.0;
            tq += parts.1;
        }
        let k = batches.len() as f64;
        Ok((tc / k, tq / k))
    }

    /// REINFORCE on the controllers with the learned rewards held fixed.
    pub fn stage2(&mut self, model: &mut WorldModel) -> Result<()> {
        if model.stage < 1 {
            return Err(Error::Pipeline("stage 2 needs a model that completed stage 1".into()));
        }
        for epoch in 0..self.cfg.stage2_epochs {
            let t0 = Instant::now();
            let loss = self.policy_epoch(model, 2)?;
            self.log.push(2, 0, epoch, "policy", loss);
            self.log.timing.push((2, 0, epoch, t0.elapsed().as_secs_f64()));
        }
        model.stage = model.stage.max(2);
        Ok(())
    }

    /// Alternates one model epoch and one controller epoch per round.
    pub fn stage3(&mut self, model: &mut WorldModel) -> Result<()> {
        if model.stage < 2 {
            return Err(Error::Pipeline("stage 3 needs a model that completed stage 2".into()));
        }
        for round in 0..self.cfg.stage3_rounds {
            let t0 = Instant::now();
            let (c, q) = self.model_epoch(model)?;
            self.log.push(3, round, 0, "contrastive", c);
            self.log.push(3, round, 0, "q_reg", q);
            let p = self.policy_epoch(model, 3)?;
            self.log.push(3, round, 1, "policy", p);
            self.log.timing.push((3, round, 0, t0.elapsed().as_secs_f64()));
        }
        model.stage = model.stage.max(3);
        Ok(())
    }

    /// Runs `stage`, or every stage the model supports when `None`.
    pub fn run(&mut self, model: &mut WorldModel, stage: Option<Stage>) -> Result<()> {
        match stage {
            Some(Stage::One) => self.stage1(model),
            Some(Stage::Two) => self.stage2(model),
            Some(Stage::Three) => self.stage3(model),
            None => {
                self.stage1(model)?;
                if model.arch.cpm().is_some() {
                    self.stage2(model)?;
                    self.stage3(model)?;
                }
                Ok(())
            }
        }
    }
}
