//! Causal process blocks: the node update shared by all force nodes and the
//! one shared by all object nodes.

use crate::error::{Error, Result};
use crate::latent::Layout;
use crate::nn::{LayerNorm, Mlp, ParamStore, Projection, Real, Tape, Var};

/// Updates the mutable slots of a destination node from the causal slots of
/// its parents:
///
/// ```text
/// gate      = mean_parents(C(parent) W_gate) W_out
/// residual  = gate + M(dst)
/// M'(dst)   = flag * FFN(Norm(residual)) + residual
/// ```
///
/// `flag` is 1 when the node has at least one parent. Immutable slots are
/// copied unchanged.
#[derive(Clone, Debug)]
pub struct CausalBlock {
    pub gate: Projection,
    pub out: Projection,
    pub norm: LayerNorm,
    pub ffn: Mlp,
    pub dst: Layout,
    pub src: Layout,
}

/// Parent structure of one block application, in dense form.
#[derive(Clone, Debug, PartialEq)]
pub struct Parents<T> {
    /// `[dst_rows x src_rows]`, row `r` holds `1/|parents(r)|` at each parent.
    pub weights: Vec<T>,
    /// `1` for rows with parents, `0` otherwise.
    pub flags: Vec<T>,
    pub dst_rows: usize,
    pub src_rows: usize,
}

impl<T: Real> Parents<T> {
    pub fn from_lists(lists: &[Vec<usize>], src_rows: usize) -> Result<Self> {
        let dst_rows = lists.len();
        let mut weights = vec![T::zero(); dst_rows * src_rows];
        let mut flags = vec![T::zero(); dst_rows];
        for (r, ps) in lists.iter().enumerate() {
            if ps.is_empty() {
                continue;
            }
            let w = T::one() / T::lit(ps.len() as f64);
            for &p in ps {
                if p >= src_rows {
                    return Err(Error::contract(format!("parent row {p} out of range")));
                }
                weights[r * src_rows + p] += w;
            }
            flags[r] = T::one();
        }
        Ok(Parents {
            weights,
            flags,
            dst_rows,
            src_rows,
        })
    }
}

impl CausalBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dst: Layout,
        src: Layout,
        attention_dim: usize,
        ffn_hidden: usize,
    ) -> Result<Self> {
        let mw = dst.tagged_width();
        Ok(CausalBlock {
            gate: Projection::new(store, &format!("{name}.gate"), src.tagged_width(), attention_dim)?,
            out: Projection::new(store, &format!("{name}.out"), attention_dim, mw)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), mw)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[mw, ffn_hidden, mw])?,
            dst,
            src,
        })
    }

    /// `dst: [R, dst.width()]`, `src: [S, src.width()]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, dst: Var, src: Var, parents: &Parents<T>) -> Result<Var> {
        if tape.shape(dst) != [parents.dst_rows, self.dst.width()]
            || tape.shape(src) != [parents.src_rows, self.src.width()]
        {
            return Err(Error::shape(format!(
                "block inputs {:?} and {:?} do not match {} x {} parents",
                tape.shape(dst),
                tape.shape(src),
                parents.dst_rows,
                parents.src_rows
            )));
        }
        let causal = tape.select_cols(src, &self.src.causal())?;
        let pooled = tape.const_matmul(parents.weights.clone(), parents.dst_rows, causal)?;
        let g = self.gate.forward(tape, pooled)?;
        let gate = self.out.forward(tape, g)?;
        let m = tape.select_cols(dst, &self.dst.mutable())?;
        let residual = tape.add(gate, m)?;
        let h = self.norm.forward(tape, residual)?;
        let h = self.ffn.forward(tape, h)?;
        let h = tape.scale_rows(h, parents.flags.clone())?;
        let new_m = tape.add(h, residual)?;
        let fixed = tape.select_cols(dst, &self.dst.immutable())?;
        tape.concat_cols(&[new_m, fixed])
    }
}
