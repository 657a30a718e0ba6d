//! Goal-reaching with a world model: random-shooting action selection and
//! the ±1 task reward.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PlanConfig;
use crate::env::{EnvAction, EnvConfig, GridWorld, Mode};
use crate::error::{Error, Result};
use crate::eval::distance;
use crate::model::WorldModel;
use crate::nn::Tensor;

/// Move object `target` of `world` onto `goal` within `max_steps` actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalTask {
    pub world: GridWorld,
    pub target: usize,
    /// `(col, row)`.
    pub goal: (i32, i32),
    pub max_steps: usize,
}

impl GoalTask {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.target >= self.world.len() {
            return Err(Error::input(format!("task target {} outside {} objects", self.target, self.world.len())));
        }
        if !self.world.in_bounds(self.goal) {
            return Err(Error::input(format!("goal {:?} is off the grid", self.goal)));
        }
        Ok(())
    }

    pub fn solved(&self, world: &GridWorld) -> bool {
        world.objects[self.target].pos == self.goal
    }

    /// The initial world with the target placed on the goal cell.
    pub fn goal_world(&self) -> Result<GridWorld> {
        if let Some(o) = self.world.occupant(self.goal) {
            if o != self.target {
                return Err(Error::input(format!("goal {:?} is occupied by object {o}", self.goal)));
            }
        }
        let mut w = self.world.clone();
        w.objects[self.target].pos = self.goal;
        Ok(w)
    }
}

fn manhattan(a: (i32, i32), b: (i32, i32)) -> i32 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

/// Tasks whose target is the heaviest object and whose bounding rectangle
/// from target to goal holds no other object, at distance `1..=max_steps`.
pub fn solvable_suite(env: &EnvConfig, count: usize, max_steps: usize, seed: u64) -> Result<Vec<GoalTask>> {
    env.validate()?;
    if max_steps == 0 {
        return Err(Error::config("tasks need at least one step"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 10_000 * count.max(1) {
            return Err(Error::config("could not construct enough solvable tasks"));
        }
        let world = env.random_world(&mut rng)?;
        let target = world.len() - 1;
        let start = world.objects[target].pos;
        let goal = (rng.gen_range(0..env.width as i32), rng.gen_range(0..env.height as i32));
        let d = manhattan(start, goal) as usize;
        if d == 0 || d > max_steps {
            continue;
        }
        let (c0, c1) = (start.0.min(goal.0), start.0.max(goal.0));
        let (r0, r1) = (start.1.min(goal.1), start.1.max(goal.1));
        let clear = world
            .objects
            .iter()
            .filter(|o| o.id != target)
            .all(|o| !(c0..=c1).contains(&o.pos.0) || !(r0..=r1).contains(&o.pos.1));
        if clear {
            out.push(GoalTask {
                world,
                target,
                goal,
                max_steps,
            });
        }
    }
    Ok(out)
}

pub fn save_suite(path: &Path, tasks: &[GoalTask]) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(tasks)?)?;
    Ok(())
}

pub fn load_suite(path: &Path) -> Result<Vec<GoalTask>> {
    let tasks: Vec<GoalTask> = serde_json::from_slice(&std::fs::read(path)?)?;
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

/// Action-selection back ends.
pub enum Planner<'a> {
    /// The true environment as the model.
    Oracle,
    Learned(&'a WorldModel),
    /// Uniformly random actions.
    Random,
}

/// Candidate action sequences: all of them when `budget >= A^H`, otherwise
/// `budget` uniform draws.
pub fn candidate_sequences(actions: usize, horizon: usize, budget: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if budget == 0 {
        return Err(Error::input("planning budget must be at least 1"));
    }
    if horizon == 0 || actions == 0 {
        return Err(Error::input("planning needs a positive horizon and action count"));
    }
    let total = (actions as u128).checked_pow(horizon as u32);
    match total {
        Some(t) if t <= budget as u128 => Ok((0..t as usize)
            .map(|mut k| {
                let mut seq = vec![0; horizon];
                for s in seq.iter_mut() {
                    *s = k % actions;
                    k /= actions;
                }
                seq
            })
            .collect()),
        _ => Ok((0..budget)
            .map(|_| (0..horizon).map(|_| rng.gen_range(0..actions)).collect())
            .collect()),
    }
}

/// First action of the best-scoring sequence.
pub fn plan_action(
    planner: &Planner<'_>,
    world: &GridWorld,
    task: &GoalTask,
    mode: Mode,
    cfg: &PlanConfig,
    seed: u64,
) -> Result<EnvAction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions = world.len() * 4;
    match planner {
        Planner::Random => {
            if cfg.budget == 0 {
                return Err(Error::input("planning budget must be at least 1"));
            }
            Ok(EnvAction::from_index(rng.gen_range(0..actions)))
        }
        Planner::Oracle => {
            let seqs = candidate_sequences(actions, cfg.horizon, cfg.budget, &mut rng)?;
            let mut best: Option<((i32, i32), usize)> = None;
            for (k, seq) in seqs.iter().enumerate() {
                let mut w = world.clone();
                let mut path = 0;
                for &a in seq {
                    w = w.step(EnvAction::from_index(a))?;
                    path += manhattan(w.objects[task.target].pos, task.goal);
                }
                let key = (manhattan(w.objects[task.target].pos, task.goal), path);
                if best.is_none_or(|(b, _)| key < b) {
                    best = Some((key, k));
                }
            }
            let (_, k) = best.expect("at least one sequence");
            Ok(EnvAction::from_index(seqs[k][0]))
        }
        Planner::Learned(model) => {
            let slots = model.arch.slots();
            if actions > slots * 4 {
                return Err(Error::input(format!("{} objects exceed the model's {slots} slots", world.len())));
            }
            let seqs = candidate_sequences(actions, cfg.horizon, cfg.budget, &mut rng)?;
            let obs = world.render(mode);
            let goal = task.goal_world()?.render(mode);
            let z = model.encode(&[&obs])?;
            let g = model.encode(&[&goal])?;
            let width = z.cols();
            let tiled: Vec<f32> = (0..seqs.len()).flat_map(|_| z.data().iter().copied()).collect();
            let z = Tensor::from_vec(&[seqs.len() * slots, width], tiled)?;
            let steps: Vec<Vec<EnvAction>> = (0..cfg.horizon)
                .map(|h| seqs.iter().map(|s| EnvAction::from_index(s[h])).collect())
                .collect();
            let mut mode = model.eval_mode(None);
            let pred = model.rollout(&z, &steps, &mut mode)?;
            let per = slots * width;
            let mut best = (f64::INFINITY, 0);
            for k in 0..seqs.len() {
                let d = distance(&pred.data()[k * per..(k + 1) * per], g.data());
                if d < best.0 {
                    best = (d, k);
                }
            }
            Ok(EnvAction::from_index(seqs[best.1][0]))
        }
    }
}

/// +1 if the target reaches the goal within the step limit, else -1.
pub fn run_task(planner: &Planner<'_>, task: &GoalTask, mode: Mode, cfg: &PlanConfig, seed: u64) -> Result<f64> {
    task.validate()?;
    let mut world = task.world.clone();
    if task.solved(&world) {
        return Ok(1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..task.max_steps {
        let a = plan_action(planner, &world, task, mode, cfg, rng.gen())?;
        world = world.step(a)?;
        if task.solved(&world) {
            return Ok(1.0);
        }
    }
    Ok(-1.0)
}

/// Reward of every task, in suite order.
pub fn run_suite(planner: &Planner<'_>, tasks: &[GoalTask], mode: Mode, cfg: &PlanConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tasks.iter().map(|t| run_task(planner, t, mode, cfg, rng.gen())).collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
