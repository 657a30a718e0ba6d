//! Central finite-difference comparison for tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `|g_tape - g_fd| / max(|g_tape|, |g_fd|)` over all checked coordinates.
    pub rel_error: f64,
    pub tape_norm: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol
    }
}

/// Compares reverse-mode gradients of `loss` against central differences with
/// step `h`, perturbing every coordinate of every parameter accepted by
/// `filter`.
pub fn check<F>(store: &mut ParamStore<f64>, h: f64, filter: impl Fn(&str) -> bool, loss: F) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.scalar(l)
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| filter(&p.name))
        .map(|(id, p)| (id, p.value.len()))
        .collect();
    let (mut diff, mut na, mut nf, mut checked) = (0.0, 0.0, 0.0, 0);
    for (id, len) in ids {
        for i in 0..len {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = grads.get(id).map_or(0.0, |t| t.data()[i]);
            diff += (g - fd) * (g - fd);
            na += g * g;
            nf += fd * fd;
            checked += 1;
        }
    }
    let denom = na.sqrt().max(nf.sqrt());
    let rel_error = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
    Ok(GradCheck {
        rel_error,
        tape_norm: na.sqrt(),
        checked,
    })
}
