//! Comparison transition functions: a one-round message-passing GNN and a
//! per-slot modular MLP. Both read whole latents and predict the next
//! object latents directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Gnn,
    Modular,
}

fn force_rows<T: Real>(tape: &mut Tape<'_, T>, force: Var, b: usize, n: usize) -> Result<Var> {
    let idx: Vec<usize> = (0..b * n).map(|r| r / n).collect();
    tape.gather_rows(force, &idx)
}

fn check_batch<T: Real>(tape: &Tape<'_, T>, objects: Var, force: Var, n: usize) -> Result<usize> {
    let b = tape.shape(force)[0];
    if n == 0 || tape.shape(objects)[0] != b * n {
        return Err(Error::shape(format!(
            "objects {:?} do not hold {n} rows per force",
            tape.shape(objects)
        )));
    }
    Ok(b)
}

/// Edge model over ordered pairs, summed messages, node model over
/// `(object, message, force)`.
#[derive(Clone, Debug)]
pub struct Gnn {
    pub edge: Mlp,
    pub node: Mlp,
    pub hidden: usize,
}

impl Gnn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, object: usize, force: usize, hidden: usize) -> Result<Self> {
        Ok(Gnn {
            edge: Mlp::new(store, "gnn.edge", &[2 * object, hidden, hidden])?,
            node: Mlp::new(store, "gnn.node", &[object + hidden + force, hidden, object])?,
            hidden,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, objects: Var, force: Var, n: usize) -> Result<Var> {
        let b = check_batch(tape, objects, force, n)?;
        let msg = if n == 1 {
            tape.constant(Tensor::zeros(&[b, self.hidden]))
        } else {
            let mut dst = Vec::with_capacity(b * n * (n - 1));
            let mut src = Vec::with_capacity(b * n * (n - 1));
            for s in 0..b {
                for i in 0..n {
                    for j in (0..n).filter(|&j| j != i) {
                        dst.push(s * n + i);
                        src.push(s * n + j);
                    }
                }
            }
            let d = tape.gather_rows(objects, &dst)?;
            let o = tape.gather_rows(objects, &src)?;
            let x = tape.concat_cols(&[d, o])?;
            let e = self.edge.forward(tape, x)?;
            tape.sum_row_groups(e, n - 1)?
        };
        let f = force_rows(tape, force, b, n)?;
        let x = tape.concat_cols(&[objects, msg, f])?;
        self.node.forward(tape, x)
    }
}

/// One MLP per object slot over `(object, force)`.
#[derive(Clone, Debug)]
pub struct Modular {
    pub slots: Vec<Mlp>,
    pub object: usize,
}

impl Modular {
    pub fn new<T: Real>(store: &mut ParamStore<T>, n: usize, object: usize, force: usize, hidden: usize) -> Result<Self> {
        let slots = (0..n)
            .map(|i| Mlp::new(store, &format!("mod.{i}"), &[object + force, hidden, object]))
            .collect::<Result<_>>()?;
        Ok(Modular { slots, object })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, objects: Var, force: Var, n: usize) -> Result<Var> {
        if n != self.slots.len() {
            return Err(Error::input(format!("modular model has {} slots, got {n} objects", self.slots.len())));
        }
        let b = check_batch(tape, objects, force, n)?;
        let mut outs = Vec::with_capacity(n);
        for (i, mlp) in self.slots.iter().enumerate() {
            let rows: Vec<usize> = (0..b).map(|s| s * n + i).collect();
            let o = tape.gather_rows(objects, &rows)?;
            let x = tape.concat_cols(&[o, force])?;
            outs.push(mlp.forward(tape, x)?);
        }
        let y = tape.concat_cols(&outs)?;
        tape.reshape(y, &[b * n, self.object])
    }
}
