//! One step of the causal process model over a batch of samples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::latent::Layout;
use crate::nn::{ParamStore, Real, Tape, Var};

use super::blocks::{CausalBlock, Parents};
use super::policy::{AttributionPolicy, Scope, ScopePolicy};
use super::reward::RewardHeads;

/// Blocks, controllers and reward heads of the model.
#[derive(Clone, Debug)]
pub struct CpmNet {
    pub force_block: CausalBlock,
    pub object_block: CausalBlock,
    pub scope: ScopePolicy,
    pub attr: AttributionPolicy,
    pub rewards: RewardHeads,
    pub object: Layout,
    pub force: Layout,
}

/// How a step's graph is chosen.
pub enum Choice<'a> {
    /// Every object feeds the force and every object receives it.
    Complete,
    Sample(&'a mut ChaCha8Rng),
    Argmax,
    /// One `(scope, target)` per sample.
    Forced(&'a [(Scope, usize)]),
}

/// Result of [`CpmNet::step`].
pub struct StepOut {
    pub objects: Var,
    pub force: Var,
    /// Empty for [`Choice::Complete`].
    pub scopes: Vec<Scope>,
    pub targets: Vec<usize>,
    /// Full scope log-probabilities `[B, n(n+1)/2]`.
    pub scope_logp: Option<Var>,
    /// Attribution log-probabilities `[B, 2]`.
    pub attr_logp: Option<Var>,
}

impl StepOut {
    pub fn scope_indices(&self, n: usize) -> Result<Vec<usize>> {
        self.scopes.iter().map(|s| s.index(n)).collect()
    }

    pub fn attr_positions(&self) -> Result<Vec<usize>> {
        self.scopes.iter().zip(&self.targets).map(|(s, &t)| s.position(t)).collect()
    }
}

pub(crate) fn sample_row(rng: &mut ChaCha8Rng, logp: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &lp) in logp.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

pub(crate) fn argmax_row(logp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logp.iter().enumerate() {
        if v > logp[best] {
            best = i;
        }
    }
    best
}

impl CpmNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let object = Layout::object(cfg.sub_object);
        let force = Layout::force(cfg.sub_force);
        Ok(CpmNet {
            force_block: CausalBlock::new(store, "f_force", force, object, cfg.attention_dim, cfg.ffn_hidden)?,
            object_block: CausalBlock::new(store, "f_object", object, force, cfg.attention_dim, cfg.ffn_hidden)?,
            scope: ScopePolicy::new(store, object, cfg.score_dim)?,
            attr: AttributionPolicy::new(store, force, object, cfg.score_dim)?,
            rewards: RewardHeads::new(store, object, force, cfg.objects, cfg.reward_hidden)?,
            object,
            force,
        })
    }

    /// Applies both blocks given explicit parent lists: `force_parents[f]`
    /// indexes object rows, `object_parents[o]` indexes force rows.
    pub fn propagate<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        objects: Var,
        forces: Var,
        force_parents: &[Vec<usize>],
        object_parents: &[Vec<usize>],
    ) -> Result<(Var, Var)> {
        let n_obj = tape.shape(objects)[0];
        let n_force = tape.shape(forces)[0];
        let fp = Parents::from_lists(force_parents, n_obj)?;
        let new_forces = self.force_block.forward(tape, forces, objects, &fp)?;
        let op = Parents::from_lists(object_parents, n_force)?;
        let new_objects = self.object_block.forward(tape, objects, new_forces, &op)?;
        Ok((new_objects, new_forces))
    }

    /// Next latents on the complete graph.
    pub fn complete_step<T: Real>(&self, tape: &mut Tape<'_, T>, objects: Var, force: Var, n: usize) -> Result<(Var, Var)> {
        let b = tape.shape(force)[0];
        if tape.shape(objects)[0] != b * n {
            return Err(Error::shape("objects and forces disagree on batch size"));
        }
        let fp: Vec<Vec<usize>> = (0..b).map(|s| (s * n..(s + 1) * n).collect()).collect();
        let op: Vec<Vec<usize>> = (0..b * n).map(|r| vec![r / n]).collect();
        self.propagate(tape, objects, force, &fp, &op)
    }

    /// Objects `[B*n, w_o]`, force `[B, w_f]`: chooses a scope, updates the
    /// force from it, chooses an attribution and updates that object.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        objects: Var,
        force: Var,
        n: usize,
        choice: Choice<'_>,
    ) -> Result<StepOut> {
        let b = tape.shape(force)[0];
        if tape.shape(objects)[0] != b * n || n == 0 {
            return Err(Error::shape("objects and forces disagree on batch size"));
        }
        let mut rng = None;
        let forced = match choice {
            Choice::Complete => {
                let (o, f) = self.complete_step(tape, objects, force, n)?;
                return Ok(StepOut {
                    objects: o,
                    force: f,
                    scopes: vec![],
                    targets: vec![],
                    scope_logp: None,
                    attr_logp: None,
                });
            }
            Choice::Forced(f) => {
                if f.len() != b {
                    return Err(Error::contract(format!("{} forced choices for {b} samples", f.len())));
                }
                for (s, t) in f {
                    s.index(n)?;
                    s.position(*t)?;
                }
                Some(f)
            }
            Choice::Sample(r) => {
                rng = Some(r);
                None
            }
            Choice::Argmax => None,
        };

        let scope_logp = self.scope.log_probs(tape, objects, n)?;
        let p = ScopePolicy::choices(n);
        let lp: Vec<f64> = tape.value(scope_logp).data().iter().map(|v| v.as_f64()).collect();
        let scopes: Vec<Scope> = match forced {
            Some(f) => f.iter().map(|(s, _)| *s).collect(),
            None => (0..b)
                .map(|s| {
                    let row = &lp[s * p..(s + 1) * p];
                    let k = match rng.as_deref_mut() {
                        Some(r) => sample_row(r, row),
                        None => argmax_row(row),
                    };
                    Scope::from_index(k, n)
                })
                .collect::<Result<_>>()?,
        };

        let fp: Vec<Vec<usize>> = scopes
            .iter()
            .enumerate()
            .map(|(s, sc)| sc.members().into_iter().map(|i| s * n + i).collect())
            .collect();
        let op = Parents::from_lists(&fp, b * n)?;
        let new_force = self.force_block.forward(tape, force, objects, &op)?;

        let members: Vec<(usize, Option<usize>)> = scopes
            .iter()
            .enumerate()
            .map(|(s, sc)| {
                let (i, j) = sc.slots();
                (s * n + i, j.map(|j| s * n + j))
            })
            .collect();
        let attr_logp = self.attr.log_probs(tape, new_force, objects, &members)?;
        let alp: Vec<f64> = tape.value(attr_logp).data().iter().map(|v| v.as_f64()).collect();
        let targets: Vec<usize> = match forced {
            Some(f) => f.iter().map(|(_, t)| *t).collect(),
            None => scopes
                .iter()
                .enumerate()
                .map(|(s, sc)| {
                    let row = &alp[s * 2..s * 2 + 2];
                    let pos = match rng.as_deref_mut() {
                        Some(r) => sample_row(r, row),
                        None => argmax_row(row),
                    };
                    let (i, j) = sc.slots();
                    if pos == 0 {
                        i
                    } else {
                        j.unwrap_or(i)
                    }
                })
                .collect(),
        };

        let mut object_parents = vec![Vec::new(); b * n];
        for (s, &t) in targets.iter().enumerate() {
            object_parents[s * n + t].push(s);
        }
        let opar = Parents::from_lists(&object_parents, b)?;
        let new_objects = self.object_block.forward(tape, objects, new_force, &opar)?;
        Ok(StepOut {
            objects: new_objects,
            force: new_force,
            scopes,
            targets,
            scope_logp: Some(scope_logp),
            attr_logp: Some(attr_logp),
        })
    }
}
