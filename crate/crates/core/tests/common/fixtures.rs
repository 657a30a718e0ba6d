use cpm::config::ModelConfig;
use cpm::cpm::CpmNet;
use cpm::nn::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OBJ: usize = 32;
pub const FORCE: usize = 28;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn net_with(cfg: &ModelConfig, seed: u64) -> (ParamStore<f32>, CpmNet) {
    let mut store = ParamStore::new(seed);
    let net = CpmNet::new(&mut store, cfg).unwrap();
    (store, net)
}

pub fn net(seed: u64) -> (ParamStore<f32>, CpmNet) {
    net_with(&ModelConfig::default(), seed)
}

/// Overwrites every parameter with uniform noise in `[-scale, scale]`.
pub fn randomize(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, scale: f32) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

pub fn latents(rng: &mut ChaCha8Rng, rows: usize, width: usize) -> Tensor<f32> {
    let data = (0..rows * width).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    Tensor::from_vec(&[rows, width], data).unwrap()
}

pub fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Replaces the columns `cols` of every row with fresh noise.
pub fn perturb(t: &Tensor<f32>, cols: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let mut out = t.clone();
    let w = t.cols();
    for r in 0..t.rows() {
        for &c in cols {
            out.data_mut()[r * w + c] += rng.gen_range(0.5f32..3.0);
        }
    }
    out
}
