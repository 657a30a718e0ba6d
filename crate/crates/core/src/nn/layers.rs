//! Parameterized building blocks recorded onto a [`Tape`].

use super::params::{Init, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
    ) -> Result<Self> {
        let w = store.init(&format!("{name}.w"), &[input, output], init, input, output)?;
        let b = store.init(&format!("{name}.b"), &[output], Init::Zeros, input, output)?;
        Ok(Linear { w, b, input, output })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        if tape.shape(x).last() != Some(&self.input) {
            return Err(Error::input(format!(
                "linear layer expects width {}, got shape {:?}",
                self.input,
                tape.shape(x)
            )));
        }
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }
}

/// Weight-only projection `x W`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub w: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Projection {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize) -> Result<Self> {
        let w = store.init(name, &[input, output], Init::XavierUniform, input, output)?;
        Ok(Projection { w, input, output })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        tape.matmul(x, w)
    }
}

/// Stack of [`Linear`] layers with ReLU between them; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config(format!("mlp `{name}` needs at least two widths")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i == last { Init::XavierUniform } else { Init::KaimingUniform };
                Linear::new(store, &format!("{name}.{i}"), w[0], w[1], init)
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Row-wise layer normalization with a learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        let gain = store.init(&format!("{name}.gain"), &[width], Init::Ones, width, width)?;
        let shift = store.init(&format!("{name}.shift"), &[width], Init::Zeros, width, width)?;
        Ok(LayerNorm { gain, shift, eps: 1e-6 })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, self.eps)?;
        let g = tape.param(self.gain);
        let s = tape.param(self.shift);
        let h = tape.mul_row(n, g)?;
        tape.add_row(h, s)
    }
}

/// Square-kernel convolution over NHWC input.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let w = store.init(&format!("{name}.w"), &[out_ch, fan_in], Init::KaimingUniform, fan_in, out_ch)?;
        let b = store.init(&format!("{name}.b"), &[out_ch], Init::Zeros, fan_in, out_ch)?;
        Ok(Conv2d {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: 0,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.conv2d(x, w, b, self.kernel, self.stride, self.pad)
    }
}
