//! Finite-difference cases for every differentiable tape primitive.

use cpm::nn::gradcheck::{check, GradCheck};
use cpm::nn::{ParamStore, Tape, Tensor, Var};
use cpm::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

pub type Build = for<'a> fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub inputs: &'static [(&'static str, &'static [usize])],
    pub build: Build,
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn store_with(inputs: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    for (name, shape) in inputs {
        let n = shape.iter().product();
        store.insert(name, Tensor::from_vec(shape, rand_vec(&mut rng, n)).unwrap()).unwrap();
    }
    store
}

/// Reduces `y` to a scalar through a fixed random weighting.
pub fn weighted_sum(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = tape.value(y).len();
    let w = rand_vec(&mut rng, n);
    let z = tape.mul_const(y, w)?;
    Ok(tape.sum(z))
}

pub fn run(case: &Case) -> Result<GradCheck> {
    let names: Vec<&str> = case.inputs.iter().map(|(n, _)| *n).collect();
    let mut store = store_with(case.inputs, 7);
    check(&mut store, H, |_| true, |tape| {
        let vars: Vec<Var> = names.iter().map(|n| tape.param(tape.store().id(n).unwrap())).collect();
        let y = (case.build)(tape, &vars)?;
        weighted_sum(tape, y, 3)
    })
}

pub const CASES: &[Case] = &[
    Case {
        name: "matmul",
        inputs: &[("a", &[3, 4]), ("b", &[4, 5])],
        build: |t, v| t.matmul(v[0], v[1]),
    },
    Case {
        name: "const_matmul",
        inputs: &[("x", &[4, 3])],
        build: |t, v| t.const_matmul(vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, -2.0], 2, v[0]),
    },
    Case {
        name: "add sub mul affine abs",
        inputs: &[("a", &[2, 3]), ("b", &[2, 3])],
        build: |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let m = t.mul(s, d)?;
            let a = t.affine(m, 1.5, 0.2);
            Ok(t.abs(a))
        },
    },
    Case {
        name: "add_row mul_row",
        inputs: &[("x", &[3, 4]), ("b", &[4]), ("g", &[4])],
        build: |t, v| {
            let y = t.add_row(v[0], v[1])?;
            t.mul_row(y, v[2])
        },
    },
    Case {
        name: "relu sigmoid scale",
        inputs: &[("x", &[5, 3])],
        build: |t, v| {
            let r = t.relu(v[0]);
            let s = t.sigmoid(v[0]);
            let s = t.scale(s, -0.7);
            t.add(r, s)
        },
    },
    Case {
        name: "scale_rows",
        inputs: &[("x", &[3, 2])],
        build: |t, v| t.scale_rows(v[0], vec![0.5, -1.0, 2.0]),
    },
    Case {
        name: "select_cols concat_cols gather_rows",
        inputs: &[("x", &[4, 5]), ("y", &[4, 2])],
        build: |t, v| {
            let s = t.select_cols(v[0], &[4, 0, 2])?;
            let c = t.concat_cols(&[s, v[1]])?;
            t.gather_rows(c, &[3, 3, 0])
        },
    },
    Case {
        name: "permute_021 reshape",
        inputs: &[("x", &[2, 3, 4])],
        build: |t, v| {
            let p = t.permute_021(v[0], 2, 3, 4)?;
            t.reshape(p, &[6, 4])
        },
    },
    Case {
        name: "layer_norm",
        inputs: &[("x", &[3, 6])],
        build: |t, v| t.layer_norm(v[0], 1e-6),
    },
    Case {
        name: "softmax_rows log_softmax_rows",
        inputs: &[("x", &[3, 4])],
        build: |t, v| {
            let a = t.softmax_rows(v[0])?;
            let b = t.log_softmax_rows(v[0])?;
            t.add(a, b)
        },
    },
    Case {
        name: "pick max_rows sum_groups sum mean",
        inputs: &[("x", &[4, 3])],
        build: |t, v| {
            let p = t.pick(v[0], &[0, 2, 1, 1])?;
            let m = t.max_rows(v[0])?;
            let s = t.add(p, m)?;
            let g = t.sum_groups(v[0], 2)?;
            let gs = t.sum(g);
            let mean = t.mean(v[0]);
            let a = t.add(gs, mean)?;
            let r = t.reshape(s, &[4, 1])?;
            let rs = t.sum(r);
            t.add(rs, a)
        },
    },
    Case {
        name: "sum_row_groups",
        inputs: &[("x", &[6, 3])],
        build: |t, v| t.sum_row_groups(v[0], 3),
    },
    Case {
        name: "conv2d stride 2",
        inputs: &[("x", &[2, 5, 6, 3]), ("w", &[4, 12]), ("b", &[4])],
        build: |t, v| t.conv2d(v[0], v[1], v[2], 2, 2, 0),
    },
    Case {
        name: "conv2d padded",
        inputs: &[("x", &[1, 4, 4, 2]), ("w", &[3, 18]), ("b", &[3])],
        build: |t, v| t.conv2d(v[0], v[1], v[2], 3, 1, 1),
    },
    Case {
        name: "pair_scores",
        inputs: &[("q", &[6, 4]), ("k", &[6, 4]), ("d", &[4])],
        build: |t, v| {
            let s = t.pair_scores(v[0], v[1], v[2], 3, 0.25)?;
            t.log_softmax_rows(s)
        },
    },
    Case {
        name: "member_scores",
        inputs: &[("q", &[3, 4]), ("k", &[5, 4])],
        build: |t, v| {
            let s = t.member_scores(v[0], v[1], &[(0, Some(3)), (4, None), (2, Some(1))], 0.25)?;
            let l = t.log_softmax_rows(s)?;
            t.pick(l, &[1, 0, 0])
        },
    },
];
