//! Learned rewards for the two controllers.
//!
//! Each head is an MLP over control-relevant slots of the nodes touched by a
//! step. A chosen edge is encoded as the selected node's control slots plus
//! a one-hot of its index: over `slots + 1` positions (the last one is the
//! "no choice" token) for scope edges, over the two scope positions for
//! attribution edges.

use crate::error::{Error, Result};
use crate::latent::Layout;
use crate::nn::{Mlp, ParamStore, Real, Tape, Tensor, Var};

use super::policy::Scope;

#[derive(Clone, Debug)]
pub struct RewardHeads {
    pub scope: Mlp,
    pub attr: Mlp,
    pub object: Layout,
    pub force: Layout,
    pub slots: usize,
}

impl RewardHeads {
    pub fn new<T: Real>(store: &mut ParamStore<T>, object: Layout, force: Layout, slots: usize, hidden: usize) -> Result<Self> {
        let ko = object.tagged_width();
        let kf = force.tagged_width();
        let scope_in = ko + kf + 2 * (ko + slots + 1) + kf;
        let attr_in = kf + ko + 2 + ko;
        Ok(RewardHeads {
            scope: Mlp::new(store, "r_scope", &[scope_in, hidden, 1])?,
            attr: Mlp::new(store, "r_attr", &[attr_in, hidden, 1])?,
            object,
            force,
            slots,
        })
    }

    fn object_control<T: Real>(&self, tape: &mut Tape<'_, T>, objects: Var, rows: &[usize]) -> Result<Var> {
        let k = tape.select_cols(objects, &self.object.control())?;
        tape.gather_rows(k, rows)
    }

    /// Scope reward for each sample: `objects: [B*n, w]`, forces `[B, w_f]`.
    pub fn scope_reward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        objects: Var,
        force_in: Var,
        force_out: Var,
        scopes: &[Scope],
        n: usize,
    ) -> Result<Var> {
        let b = scopes.len();
        if n > self.slots || tape.shape(objects)[0] != b * n {
            return Err(Error::shape("scope reward: objects do not match scopes"));
        }
        let k = tape.select_cols(objects, &self.object.control())?;
        let pooled = tape.sum_row_groups(k, n)?;
        let pooled = tape.scale(pooled, T::one() / T::lit(n as f64));
        let kf_in = tape.select_cols(force_in, &self.force.control())?;
        let kf_out = tape.select_cols(force_out, &self.force.control())?;

        let positions = self.slots + 1;
        let kw = self.object.tagged_width();
        let mut first_rows = Vec::with_capacity(b);
        let mut second_rows = Vec::with_capacity(b);
        let mut second_mask = Vec::with_capacity(b * kw);
        let mut first_hot = vec![T::zero(); b * positions];
        let mut second_hot = vec![T::zero(); b * positions];
        for (s, scope) in scopes.iter().enumerate() {
            let (i, j) = scope.slots();
            first_rows.push(s * n + i);
            first_hot[s * positions + i] = T::one();
            match j {
                Some(j) => {
                    second_rows.push(s * n + j);
                    second_mask.extend(std::iter::repeat_n(T::one(), kw));
                    second_hot[s * positions + j] = T::one();
                }
                None => {
                    second_rows.push(s * n + i);
                    second_mask.extend(std::iter::repeat_n(T::zero(), kw));
                    second_hot[s * positions + self.slots] = T::one();
                }
            }
        }
        let first = self.object_control(tape, objects, &first_rows)?;
        let second = self.object_control(tape, objects, &second_rows)?;
        let second = tape.mul_const(second, second_mask)?;
        let fh = tape.constant(Tensor::from_vec(&[b, positions], first_hot)?);
        let sh = tape.constant(Tensor::from_vec(&[b, positions], second_hot)?);
        let x = tape.concat_cols(&[pooled, kf_in, first, fh, second, sh, kf_out])?;
        self.scope.forward(tape, x)
    }

    /// Attribution reward for each force: the selected object's control slots
    /// before (`objects`) and after (`next_objects`) the update.
    #[allow(clippy::too_many_arguments)]
    pub fn attr_reward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        force_out: Var,
        objects: Var,
        next_objects: Var,
        scopes: &[Scope],
        targets: &[usize],
        n: usize,
    ) -> Result<Var> {
        let b = scopes.len();
        if targets.len() != b {
            return Err(Error::shape("attribution reward: one target per scope"));
        }
        let mut rows = Vec::with_capacity(b);
        let mut hot = vec![T::zero(); b * 2];
        for (s, (scope, &t)) in scopes.iter().zip(targets).enumerate() {
            hot[s * 2 + scope.position(t)?] = T::one();
            rows.push(s * n + t);
        }
        let kf = tape.select_cols(force_out, &self.force.control())?;
        let before = self.object_control(tape, objects, &rows)?;
        let after = self.object_control(tape, next_objects, &rows)?;
        let h = tape.constant(Tensor::from_vec(&[b, 2], hot)?);
        let x = tape.concat_cols(&[kf, before, h, after])?;
        self.attr.forward(tape, x)
    }
}
