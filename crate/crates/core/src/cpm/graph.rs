//! Time-unrolled causal graphs: construction by rollout, invariant checks,
//! JSON-lines dumps and interventions.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape, Tensor};

use super::policy::{Scope, ScopePolicy};
use super::transition::{argmax_row, sample_row, CpmNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    /// Encoded from an environment action.
    Exogenous,
    /// Added by an intervention.
    Injected,
}

/// One force node of a step: `input` is its latent before the force block,
/// `output` after.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceNode {
    pub input: Vec<f32>,
    pub output: Vec<f32>,
    pub scope: Scope,
    pub target: usize,
    pub origin: Origin,
}

/// Object layers `0..=T` and force layers `0..T`; the forces of step `t`
/// read layer `t` and write layer `t + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub n: usize,
    pub objects: Vec<Vec<Vec<f32>>>,
    pub steps: Vec<Vec<ForceNode>>,
}

/// How the controllers pick edges while building a graph.
pub enum Controller<'a> {
    Sample(&'a mut ChaCha8Rng),
    Argmax,
    /// One `(scope, target)` per force node, per step.
    Forced(&'a [Vec<(Scope, usize)>]),
}

impl Controller<'_> {
    fn fixed(&self, step: usize, forces: usize) -> Result<Option<&[(Scope, usize)]>> {
        match self {
            Controller::Forced(all) => {
                let c = all
                    .get(step)
                    .ok_or_else(|| Error::contract(format!("no forced choices for step {step}")))?;
                if c.len() != forces {
                    return Err(Error::contract(format!(
                        "step {step} has {forces} forces but {} forced choices",
                        c.len()
                    )));
                }
                Ok(Some(c))
            }
            _ => Ok(None),
        }
    }

    fn pick(&mut self, row: &[f64]) -> usize {
        match self {
            Controller::Sample(rng) => sample_row(rng, row),
            _ => argmax_row(row),
        }
    }
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn stack(rows: &[Vec<f32>], width: usize) -> Result<Tensor<f32>> {
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::shape(format!("latent rows must have width {width}")));
    }
    Tensor::from_vec(&[rows.len(), width], rows.concat())
}

/// One layer update for a single scene with any number of force nodes.
/// Returns next objects, force outputs, scopes and targets.
#[allow(clippy::type_complexity)]
pub fn layer_step(
    net: &CpmNet,
    store: &ParamStore<f32>,
    objects: &[Vec<f32>],
    forces: &[Vec<f32>],
    fixed: Option<&[(Scope, usize)]>,
    ctrl: &mut Controller<'_>,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>, Vec<Scope>, Vec<usize>)> {
    let n = objects.len();
    let k = forces.len();
    if n == 0 {
        return Err(Error::input("a scene needs at least one object"));
    }
    if k == 0 {
        return Ok((objects.to_vec(), vec![], vec![], vec![]));
    }
    let mut tape = Tape::new(store);
    let o = tape.constant(stack(objects, net.object.width())?);
    let f = tape.constant(stack(forces, net.force.width())?);

    let scopes: Vec<Scope> = match fixed {
        Some(c) => {
            for (s, t) in c {
                s.index(n)?;
                s.position(*t)?;
            }
            c.iter().map(|(s, _)| *s).collect()
        }
        None => {
            let lp = net.scope.log_probs(&mut tape, o, n)?;
            let row: Vec<f64> = tape.value(lp).data().iter().map(|&v| v as f64).collect();
            debug_assert_eq!(row.len(), ScopePolicy::choices(n));
            (0..k).map(|_| Scope::from_index(ctrl.pick(&row), n)).collect::<Result<_>>()?
        }
    };
    let fp: Vec<Vec<usize>> = scopes.iter().map(|s| s.members()).collect();
    let fpar = super::blocks::Parents::from_lists(&fp, n)?;
    let new_f = net.force_block.forward(&mut tape, f, o, &fpar)?;

    let targets: Vec<usize> = match fixed {
        Some(c) => c.iter().map(|(_, t)| *t).collect(),
        None => {
            let members: Vec<_> = scopes.iter().map(|s| s.slots()).collect();
            let lp = net.attr.log_probs(&mut tape, new_f, o, &members)?;
            let data: Vec<f64> = tape.value(lp).data().iter().map(|&v| v as f64).collect();
            scopes
                .iter()
                .enumerate()
                .map(|(r, s)| {
                    let (i, j) = s.slots();
                    match ctrl.pick(&data[r * 2..r * 2 + 2]) {
                        0 => i,
                        _ => j.unwrap_or(i),
                    }
                })
                .collect()
        }
    };
    let mut op = vec![Vec::new(); n];
    for (r, &t) in targets.iter().enumerate() {
        op[t].push(r);
    }
    let opar = super::blocks::Parents::from_lists(&op, k)?;
    let new_o = net.object_block.forward(&mut tape, o, new_f, &opar)?;
    Ok((rows(tape.value(new_o)), rows(tape.value(new_f)), scopes, targets))
}

impl CausalGraph {
    /// Unrolls the model from `initial` objects, feeding the exogenous
    /// force latents `forces[t]` at step `t`.
    pub fn rollout(
        net: &CpmNet,
        store: &ParamStore<f32>,
        initial: Vec<Vec<f32>>,
        forces: &[Vec<Vec<f32>>],
        mut ctrl: Controller<'_>,
    ) -> Result<Self> {
        let n = initial.len();
        let mut graph = CausalGraph {
            n,
            objects: vec![initial],
            steps: Vec::with_capacity(forces.len()),
        };
        for (t, inputs) in forces.iter().enumerate() {
            let fixed = ctrl.fixed(t, inputs.len())?;
            let fixed: Option<Vec<(Scope, usize)>> = fixed.map(|c| c.to_vec());
            let (next, outs, scopes, targets) =
                layer_step(net, store, &graph.objects[t], inputs, fixed.as_deref(), &mut ctrl)?;
            graph.steps.push(
                inputs
                    .iter()
                    .zip(outs)
                    .zip(scopes.into_iter().zip(targets))
                    .map(|((input, output), (scope, target))| ForceNode {
                        input: input.clone(),
                        output,
                        scope,
                        target,
                        origin: Origin::Exogenous,
                    })
                    .collect(),
            );
            graph.objects.push(next);
        }
        Ok(graph)
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// `(scope, target)` of every force node, step by step.
    pub fn choices(&self) -> Vec<Vec<(Scope, usize)>> {
        self.steps.iter().map(|s| s.iter().map(|f| (f.scope, f.target)).collect()).collect()
    }

    /// Checks the degree and mirroring constraints and the layer counts.
    pub fn validate(&self) -> Result<()> {
        if self.objects.len() != self.steps.len() + 1 {
            return Err(Error::contract("graph needs one more object layer than force layers"));
        }
        if self.objects.iter().any(|l| l.len() != self.n) {
            return Err(Error::contract("object layers disagree on object count"));
        }
        for (t, step) in self.steps.iter().enumerate() {
            for f in step {
                f.scope
                    .index(self.n)
                    .map_err(|e| Error::contract(format!("step {t}: {e}")))?;
                f.scope
                    .position(f.target)
                    .map_err(|e| Error::contract(format!("step {t}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Inbound object edges of every force node, step by step.
    pub fn in_degrees(&self) -> Vec<Vec<usize>> {
        self.steps.iter().map(|s| s.iter().map(|f| f.scope.members().len()).collect()).collect()
    }

    /// Unordered object pairs sharing a force scope in step `t`.
    pub fn interactions(&self, t: usize) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self.steps[t]
            .iter()
            .filter_map(|f| match f.scope {
                Scope::Pair(i, j) => Some((i, j)),
                Scope::Single(_) => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// One JSON object per step: node ids, chosen scopes and targets, edges.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (t, step) in self.steps.iter().enumerate() {
            let mut edges = Vec::new();
            let mut forces = Vec::new();
            for (j, f) in step.iter().enumerate() {
                let id = format!("F{}_{j}", t + 1);
                for m in f.scope.members() {
                    edges.push((format!("O{t}_{m}"), id.clone()));
                }
                edges.push((id.clone(), format!("O{}_{}", t + 1, f.target)));
                forces.push(serde_json::json!({
                    "id": id,
                    "scope": f.scope,
                    "target": f.target,
                    "origin": f.origin,
                }));
            }
            let line = serde_json::json!({
                "t": t,
                "objects": (0..self.n).map(|i| format!("O{t}_{i}")).collect::<Vec<_>>(),
                "forces": forces,
                "edges": edges,
            });
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Injects the force latents `acts` into step `at` and recomputes every
    /// later layer. Object layers `0..=at` and steps before `at` are copied.
    /// Each exogenous force keeps its original input; injected forces carry
    /// their own output forward as the next step's input. Within a step
    /// exogenous nodes come first, injected ones after, so forced choices
    /// list them in that order.
    pub fn intervene(
        &self,
        net: &CpmNet,
        store: &ParamStore<f32>,
        at: usize,
        acts: &[Vec<f32>],
        mut ctrl: Controller<'_>,
    ) -> Result<CausalGraph> {
        if at >= self.steps.len() {
            return Err(Error::input(format!(
                "intervention step {at} outside a graph with {} steps",
                self.steps.len()
            )));
        }
        let mut out = CausalGraph {
            n: self.n,
            objects: self.objects[..=at].to_vec(),
            steps: self.steps[..at].to_vec(),
        };
        let mut injected: Vec<Vec<f32>> = self.steps[at]
            .iter()
            .filter(|f| f.origin == Origin::Injected)
            .map(|f| f.input.clone())
            .chain(acts.iter().cloned())
            .collect();
        for t in at..self.steps.len() {
            let mut inputs: Vec<Vec<f32>> = self.steps[t]
                .iter()
                .filter(|f| f.origin == Origin::Exogenous)
                .map(|f| f.input.clone())
                .collect();
            let exo = inputs.len();
            inputs.extend(injected.iter().cloned());
            let fixed = ctrl.fixed(t - at, inputs.len())?.map(|c| c.to_vec());
            let (next, outs, scopes, targets) =
                layer_step(net, store, &out.objects[t], &inputs, fixed.as_deref(), &mut ctrl)?;
            let mut nodes = Vec::with_capacity(inputs.len());
            for (r, ((input, output), (scope, target))) in
                inputs.into_iter().zip(outs).zip(scopes.into_iter().zip(targets)).enumerate()
            {
                nodes.push(ForceNode {
                    input,
                    output,
                    scope,
                    target,
                    origin: if r < exo { Origin::Exogenous } else { Origin::Injected },
                });
            }
            injected = nodes[exo..].iter().map(|f| f.output.clone()).collect();
            out.steps.push(nodes);
            out.objects.push(next);
        }
        Ok(out)
    }
}
