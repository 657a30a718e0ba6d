//! The two controllers that construct each step's causal graph.
//!
//! The scope controller picks which objects feed a force: an unordered pair
//! of objects, or one object paired with a learned "no choice" token. The
//! attribution controller then picks which member of that scope the force
//! acts on. Both read only the control-relevant slots of their inputs and
//! score with bilinear forms divided by the projection width `d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Layout;
use crate::nn::{upper_pair_count, upper_pairs, Init, ParamId, ParamStore, Projection, Real, Tape, Var};

/// Objects feeding one force node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Pair(usize, usize),
    Single(usize),
}

impl Scope {
    pub fn pair(i: usize, j: usize) -> Result<Self> {
        if i == j {
            return Err(Error::contract(format!("scope pair repeats object {i}")));
        }
        Ok(Scope::Pair(i.min(j), i.max(j)))
    }

    pub fn members(&self) -> Vec<usize> {
        match *self {
            Scope::Pair(i, j) => vec![i, j],
            Scope::Single(i) => vec![i],
        }
    }

    pub fn contains(&self, o: usize) -> bool {
        self.members().contains(&o)
    }

    /// `(first, second)` member; `second` is absent for a single scope.
    pub fn slots(&self) -> (usize, Option<usize>) {
        match *self {
            Scope::Pair(i, j) => (i, Some(j)),
            Scope::Single(i) => (i, None),
        }
    }

    /// Position of `target` within the scope.
    pub fn position(&self, target: usize) -> Result<usize> {
        match *self {
            Scope::Pair(i, _) if target == i => Ok(0),
            Scope::Pair(_, j) if target == j => Ok(1),
            Scope::Single(i) if target == i => Ok(0),
            _ => Err(Error::contract(format!("object {target} is not in scope {self:?}"))),
        }
    }

    /// Index among the `n(n+1)/2` scope choices for `n` objects.
    pub fn index(&self, n: usize) -> Result<usize> {
        let (i, j) = match *self {
            Scope::Pair(i, j) => (i, j),
            Scope::Single(i) => (i, n),
        };
        if i >= j || j > n || (j == n && matches!(self, Scope::Pair(..))) {
            return Err(Error::contract(format!("scope {self:?} invalid for {n} objects")));
        }
        // Rows before `i` contribute `n - r` entries each.
        Ok(i * n - i * i.saturating_sub(1) / 2 + (j - i - 1))
    }

    pub fn from_index(index: usize, n: usize) -> Result<Self> {
        let (i, j) = upper_pairs(n)
            .nth(index)
            .ok_or_else(|| Error::contract(format!("scope index {index} out of range for {n} objects")))?;
        Ok(if j == n { Scope::Single(i) } else { Scope::Pair(i, j) })
    }
}

#[derive(Clone, Debug)]
pub struct ScopePolicy {
    pub agent: Projection,
    pub ctrl: Projection,
    pub dummy: ParamId,
    pub layout: Layout,
    pub dim: usize,
}

impl ScopePolicy {
    pub fn new<T: Real>(store: &mut ParamStore<T>, layout: Layout, dim: usize) -> Result<Self> {
        let k = layout.tagged_width();
        Ok(ScopePolicy {
            agent: Projection::new(store, "pi_scope.agent", k, dim)?,
            ctrl: Projection::new(store, "pi_scope.ctrl", k, dim)?,
            dummy: store.init("pi_scope.dummy", &[dim], Init::Zeros, dim, dim)?,
            layout,
            dim,
        })
    }

    /// Log-probabilities over scope choices, `[B, n(n+1)/2]`, for objects
    /// stored as `[B * n, width]`.
    pub fn log_probs<T: Real>(&self, tape: &mut Tape<'_, T>, objects: Var, n: usize) -> Result<Var> {
        let k = tape.select_cols(objects, &self.layout.control())?;
        let q = self.agent.forward(tape, k)?;
        let c = self.ctrl.forward(tape, k)?;
        let dummy = tape.param(self.dummy);
        let scores = tape.pair_scores(q, c, dummy, n, T::one() / T::lit(self.dim as f64))?;
        tape.log_softmax_rows(scores)
    }

    pub fn choices(n: usize) -> usize {
        upper_pair_count(n)
    }
}

#[derive(Clone, Debug)]
pub struct AttributionPolicy {
    pub agent: Projection,
    pub ctrl: Projection,
    pub force: Layout,
    pub object: Layout,
    pub dim: usize,
}

impl AttributionPolicy {
    pub fn new<T: Real>(store: &mut ParamStore<T>, force: Layout, object: Layout, dim: usize) -> Result<Self> {
        Ok(AttributionPolicy {
            agent: Projection::new(store, "pi_attr.agent", force.tagged_width(), dim)?,
            ctrl: Projection::new(store, "pi_attr.ctrl", object.tagged_width(), dim)?,
            force,
            object,
            dim,
        })
    }

    /// Log-probabilities `[F, 2]` over the scope members of each force; the
    /// second column is `-inf` for single scopes. `members` index rows of
    /// `objects`.
    pub fn log_probs<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        forces: Var,
        objects: Var,
        members: &[(usize, Option<usize>)],
    ) -> Result<Var> {
        if members.len() != tape.shape(forces)[0] {
            return Err(Error::contract("one scope per force required"));
        }
        let kf = tape.select_cols(forces, &self.force.control())?;
        let ko = tape.select_cols(objects, &self.object.control())?;
        let q = self.agent.forward(tape, kf)?;
        let c = self.ctrl.forward(tape, ko)?;
        let scores = tape.member_scores(q, c, members, T::one() / T::lit(self.dim as f64))?;
        tape.log_softmax_rows(scores)
    }
}
