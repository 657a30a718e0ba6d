mod common;

use common::fixtures::{latents, randomize, rng, FORCE, OBJ};
use cpm::baselines::{Gnn, Modular};
use cpm::nn::{Mlp, ParamStore, Tape, Tensor};
use cpm::Error;

const HIDDEN: usize = 16;

fn gnn(seed: u64) -> (ParamStore<f32>, Gnn) {
    let mut store = ParamStore::new(seed);
    let g = Gnn::new(&mut store, OBJ, FORCE, HIDDEN).unwrap();
    randomize(&mut store, &mut rng(seed + 100), 0.5);
    (store, g)
}

fn modular(n: usize, seed: u64) -> (ParamStore<f32>, Modular) {
    let mut store = ParamStore::new(seed);
    let m = Modular::new(&mut store, n, OBJ, FORCE, HIDDEN).unwrap();
    randomize(&mut store, &mut rng(seed + 100), 0.5);
    (store, m)
}

/// Plain-loop evaluation of an MLP on one input row.
#[allow(clippy::needless_range_loop)]
fn mlp_row(store: &ParamStore<f32>, mlp: &Mlp, x: &[f32]) -> Vec<f64> {
    let mut h: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    for (k, layer) in mlp.layers.iter().enumerate() {
        let w = store.value(layer.w);
        let b = store.value(layer.b);
        let (i, o) = (w.shape()[0], w.shape()[1]);
        let mut y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
        for r in 0..i {
            for c in 0..o {
                y[c] += h[r] * w.data()[r * o + c] as f64;
            }
        }
        if k + 1 < mlp.layers.len() {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = y;
    }
    h
}

#[test]
fn gnn_with_two_objects_matches_dense_oracle() {
    let (store, g) = gnn(1);
    let mut r = rng(2);
    let objects = latents(&mut r, 4, OBJ);
    let force = latents(&mut r, 2, FORCE);
    let mut tape = Tape::new(&store);
    let o = tape.constant(objects.clone());
    let f = tape.constant(force.clone());
    let y = g.forward(&mut tape, o, f, 2).unwrap();
    let y = tape.value(y);
    for s in 0..2 {
        for i in 0..2 {
            let j = 1 - i;
            let me = objects.row(s * 2 + i);
            let other = objects.row(s * 2 + j);
            let msg = mlp_row(&store, &g.edge, &[me, other].concat());
            let msg: Vec<f32> = msg.iter().map(|&v| v as f32).collect();
            let expect = mlp_row(&store, &g.node, &[me, &msg, force.row(s)].concat());
            for (a, b) in y.row(s * 2 + i).iter().zip(&expect) {
                assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn gnn_with_one_object_uses_a_zero_message() {
    let (store, g) = gnn(3);
    let mut r = rng(4);
    let objects = latents(&mut r, 3, OBJ);
    let force = latents(&mut r, 3, FORCE);
    let mut tape = Tape::new(&store);
    let o = tape.constant(objects.clone());
    let f = tape.constant(force.clone());
    let y = g.forward(&mut tape, o, f, 1).unwrap();
    let y = tape.value(y);
    for s in 0..3 {
        let expect = mlp_row(&store, &g.node, &[objects.row(s), &[0.0; HIDDEN], force.row(s)].concat());
        for (a, b) in y.row(s).iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }
}

#[test]
fn gnn_is_permutation_equivariant() {
    let (store, g) = gnn(5);
    let mut r = rng(6);
    let objects = latents(&mut r, 5, OBJ);
    let perm = [4usize, 2, 0, 1, 3];
    let permuted: Vec<f32> = perm.iter().flat_map(|&i| objects.row(i).to_vec()).collect();
    let force = latents(&mut r, 1, FORCE);
    let mut tape = Tape::new(&store);
    let o = tape.constant(objects);
    let p = tape.constant(Tensor::from_vec(&[5, OBJ], permuted).unwrap());
    let f = tape.constant(force);
    let a = g.forward(&mut tape, o, f, 5).unwrap();
    let b = g.forward(&mut tape, p, f, 5).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for (x, y) in tape.value(b).row(k).iter().zip(tape.value(a).row(i)) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn modular_slots_are_independent() {
    let (store, m) = modular(3, 7);
    let mut r = rng(8);
    let objects = latents(&mut r, 3, OBJ);
    let force = latents(&mut r, 1, FORCE);
    let mut other = objects.clone();
    other.data_mut()[2 * OBJ..].iter_mut().for_each(|v| *v += 1.0);
    let mut tape = Tape::new(&store);
    let f = tape.constant(force.clone());
    let a = tape.constant(objects.clone());
    let b = tape.constant(other);
    let ya = m.forward(&mut tape, a, f, 3).unwrap();
    let yb = m.forward(&mut tape, b, f, 3).unwrap();
    for i in 0..2 {
        assert_eq!(tape.value(ya).row(i), tape.value(yb).row(i));
        let expect = mlp_row(&store, &m.slots[i], &[objects.row(i), force.row(0)].concat());
        for (x, y) in tape.value(ya).row(i).iter().zip(&expect) {
            assert!((*x as f64 - y).abs() < 1e-4);
        }
    }
    assert_ne!(tape.value(ya).row(2), tape.value(yb).row(2));
}

#[test]
fn modular_with_zero_weights_returns_output_biases() {
    let (mut store, m) = modular(2, 9);
    for slot in &m.slots {
        for layer in &slot.layers {
            store.value_mut(layer.w).data_mut().fill(0.0);
        }
    }
    let mut r = rng(10);
    let mut tape = Tape::new(&store);
    let o = tape.constant(latents(&mut r, 4, OBJ));
    let f = tape.constant(latents(&mut r, 2, FORCE));
    let y = m.forward(&mut tape, o, f, 2).unwrap();
    for s in 0..2 {
        for i in 0..2 {
            let bias = store.value(m.slots[i].layers[1].b);
            assert_eq!(tape.value(y).row(s * 2 + i), bias.data());
        }
    }
}

#[test]
fn modular_rejects_a_different_object_count() {
    let (store, m) = modular(3, 11);
    let mut r = rng(12);
    let mut tape = Tape::new(&store);
    let o = tape.constant(latents(&mut r, 4, OBJ));
    let f = tape.constant(latents(&mut r, 1, FORCE));
    assert!(matches!(m.forward(&mut tape, o, f, 4), Err(Error::Input(_))));
}

#[test]
fn baselines_reject_misaligned_batches() {
    let (store, g) = gnn(13);
    let mut r = rng(14);
    let mut tape = Tape::new(&store);
    let o = tape.constant(latents(&mut r, 7, OBJ));
    let f = tape.constant(latents(&mut r, 2, FORCE));
    assert!(matches!(g.forward(&mut tape, o, f, 3), Err(Error::Shape(_))));
}
