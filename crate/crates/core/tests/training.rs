mod common;

use std::collections::BTreeMap;

use cpm::config::{ModelConfig, TrainConfig};
use cpm::dataset::{Dataset, Encoding, StepRef};
use cpm::env::EnvConfig;
use cpm::model::{ModelKind, WorldModel};
use cpm::nn::gradcheck::check;
use cpm::nn::{ParamStore, Tape, Tensor, Var};
use cpm::training::{
    contrastive_from, discounted_returns, make_batch, q_regularizer, reinforce_loss, sample_distance, Stage, Trainer,
};
use cpm::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

fn scalar(f: impl for<'a> FnOnce(&mut Tape<'a, f64>) -> Result<Var>) -> f64 {
    let store = ParamStore::<f64>::new(0);
    let mut tape = Tape::new(&store);
    let v = f(&mut tape).unwrap();
    tape.scalar(v).unwrap()
}

#[test]
fn contrastive_is_zero_for_exact_prediction_and_far_negative() {
    let v = scalar(|t| {
        let next = t.constant(tensor(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let neg = t.constant(tensor(&[2, 2], vec![5.0, 2.0, 3.0, 4.0]));
        contrastive_from(t, next, next, neg, 2, 1.0)
    });
    assert_eq!(v, 0.0);
}

#[test]
fn contrastive_is_beta_when_negative_equals_next() {
    for beta in [0.5, 1.0, 3.0] {
        let v = scalar(|t| {
            let next = t.constant(tensor(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
            contrastive_from(t, next, next, next, 2, beta)
        });
        assert_eq!(v, beta);
    }
}

#[test]
fn contrastive_matches_hand_computation() {
    // Two samples of two one-dimensional objects.
    let pred = vec![0.0, 1.0, 2.0, 2.0];
    let next = vec![1.0, 1.0, 2.0, 4.0];
    let neg = vec![1.5, 1.0, 2.0, 3.0];
    // Sample 0: d_pos = 1, d_neg = 0.25, hinge = 0.75.
    // Sample 1: d_pos = 4, d_neg = 1, hinge = 0.
    let expect = (1.0 + 0.75 + 4.0) / 2.0;
    let v = scalar(|t| {
        let p = t.constant(tensor(&[4, 1], pred));
        let x = t.constant(tensor(&[4, 1], next));
        let n = t.constant(tensor(&[4, 1], neg));
        contrastive_from(t, p, x, n, 2, 1.0)
    });
    assert!((v - expect).abs() < 1e-12);
    let d = scalar(|t| {
        let a = t.constant(tensor(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]));
        let b = t.constant(tensor(&[2, 3], vec![0.0; 6]));
        let s = sample_distance(t, a, b, 2)?;
        Ok(t.sum(s))
    });
    assert_eq!(d, 5.0);
}

fn random_store(specs: &[(&str, usize, usize)], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    for &(name, r, c) in specs {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.insert(name, tensor(&[r, c], data)).unwrap();
    }
    store
}

fn param(t: &mut Tape<'_, f64>, name: &str) -> Var {
    let id = t.store().id(name).unwrap();
    t.param(id)
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let mut store = random_store(&[("pred", 6, 4), ("next", 6, 4), ("neg", 6, 4)], 1);
    let res = check(&mut store, 1e-5, |_| true, |t| {
        let (p, x, n) = (param(t, "pred"), param(t, "next"), param(t, "neg"));
        contrastive_from(t, p, x, n, 3, 6.0)
    })
    .unwrap();
    assert!(res.tape_norm > 0.0);
    assert!(res.passes(1e-6), "{}", res.rel_error);
}

#[test]
fn reinforce_gradient_matches_finite_differences_and_returns() {
    let rewards = [0.3, -1.0, 2.0, 0.5, 0.0, 1.0];
    let mut store = random_store(&[("logp", 6, 1)], 2);
    let res = check(&mut store, 1e-5, |_| true, |t| {
        let lp = param(t, "logp");
        reinforce_loss(t, lp, &rewards, 3, 0.9)
    })
    .unwrap();
    assert!(res.passes(1e-8), "{}", res.rel_error);

    let returns = discounted_returns(&rewards, 3, 0.9);
    assert!((returns[0] - (0.3 - 0.9 + 0.81 * 2.0)).abs() < 1e-12);
    assert!((returns[1] - (0.5 + 0.81)).abs() < 1e-12);
    let mut tape = Tape::new(&store);
    let lp = param(&mut tape, "logp");
    let loss = reinforce_loss(&mut tape, lp, &rewards, 3, 0.9).unwrap();
    let g = tape.backward(loss).unwrap();
    let g = g.get(store.id("logp").unwrap()).unwrap();
    for (i, v) in g.data().iter().enumerate() {
        assert!((v + returns[i / 3] / 2.0).abs() < 1e-12);
    }
}

#[test]
fn late_rewards_are_discounted_by_gamma_squared() {
    assert!((discounted_returns(&[0.0, 0.0, 1.0], 3, 0.9)[0] - 0.81).abs() < 1e-12);
}

#[test]
fn zero_rewards_give_zero_gradient() {
    let store = random_store(&[("logp", 8, 1)], 3);
    let mut tape = Tape::new(&store);
    let lp = param(&mut tape, "logp");
    let loss = reinforce_loss(&mut tape, lp, &[0.0; 8], 4, 0.9).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(store.id("logp").unwrap()).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn reinforce_rejects_partial_episodes() {
    let store = random_store(&[("logp", 5, 1)], 4);
    let mut tape = Tape::new(&store);
    let lp = param(&mut tape, "logp");
    assert!(matches!(reinforce_loss(&mut tape, lp, &[0.0; 5], 2, 0.9), Err(Error::Shape(_))));
}

#[test]
fn bandit_gradient_is_unbiased() {
    let logits = [0.2, -0.5, 0.9];
    let payoff = [1.0, 3.0, -2.0];
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    let p: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
    let mean: f64 = p.iter().zip(&payoff).map(|(a, b)| a * b).sum();
    let exact: Vec<f64> = (0..3).map(|k| p[k] * (payoff[k] - mean)).collect();

    let draws = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let arms: Vec<usize> = (0..draws)
        .map(|_| {
            let u: f64 = rng.gen();
            if u < p[0] {
                0
            } else if u < p[0] + p[1] {
                1
            } else {
                2
            }
        })
        .collect();
    let rewards: Vec<f64> = arms.iter().map(|&a| payoff[a]).collect();
    let mut store = ParamStore::<f64>::new(0);
    let id = store.insert("logits", tensor(&[1, 3], logits.to_vec())).unwrap();
    let mut tape = Tape::new(&store);
    let l = tape.param(id);
    let rows = tape.gather_rows(l, &vec![0; draws]).unwrap();
    let lp = tape.log_softmax_rows(rows).unwrap();
    let picked = tape.pick(lp, &arms).unwrap();
    let loss = reinforce_loss(&mut tape, picked, &rewards, 1, 0.9).unwrap();
    let g = tape.backward(loss).unwrap();
    let est: Vec<f64> = g.get(id).unwrap().data().iter().map(|v| -v).collect();

    for k in 0..3 {
        let samples: Vec<f64> = arms
            .iter()
            .map(|&a| payoff[a] * (if a == k { 1.0 } else { 0.0 } - p[k]))
            .collect();
        let m = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!((m - est[k]).abs() < 1e-9);
        assert!((est[k] - exact[k]).abs() < 3.0 * se, "arm {k}: {} vs {} (se {se})", est[k], exact[k]);
    }
}

#[test]
fn q_regularizer_gradient_matches_finite_differences() {
    let mut store = random_store(&[("r", 6, 1), ("lp", 6, 1), ("mx", 6, 1)], 6);
    let res = check(&mut store, 1e-6, |_| true, |t| {
        let (r, lp, mx) = (param(t, "r"), param(t, "lp"), param(t, "mx"));
        q_regularizer(t, r, lp, mx, 3, 0.9, 0.1)
    })
    .unwrap();
    assert!(res.passes(1e-6), "{}", res.rel_error);
}

#[test]
fn q_regularizer_vanishes_on_consistent_rewards_and_zero_weight() {
    let lp = vec![-0.5, -1.0, -0.2, -2.0];
    let mx = vec![-0.1, -0.3, -0.05, -0.4];
    let gamma = 0.9;
    // Episodes of length two; the terminal step has no successor term.
    let r = vec![lp[0] - gamma * mx[1], lp[1], lp[2] - gamma * mx[3], lp[3]];
    let run = |rv: Vec<f64>, mu: f64| {
        scalar(|t| {
            let a = t.constant(tensor(&[4, 1], rv));
            let b = t.constant(tensor(&[4, 1], lp.clone()));
            let c = t.constant(tensor(&[4, 1], mx.clone()));
            q_regularizer(t, a, b, c, 2, gamma, mu)
        })
    };
    assert!(run(r.clone(), 0.1).abs() < 1e-12);
    assert_eq!(run(vec![5.0; 4], 0.0), 0.0);
    let expect = 0.1 / 2.0 * 4.0;
    assert!((run(r.iter().map(|x| x + 1.0).collect(), 0.1) - expect).abs() < 1e-12);
}

fn small_data(episodes: usize, seed: u64) -> Dataset {
    let cfg = EnvConfig {
        episode_len: 10,
        ..EnvConfig::default()
    };
    Dataset::generate(&cfg, episodes, seed, Encoding::U8).unwrap()
}

fn small_model(kind: ModelKind, seed: u64) -> WorldModel {
    WorldModel::new(kind, &ModelConfig::default(), [50, 50, 3], seed).unwrap()
}

fn snapshot(m: &WorldModel) -> BTreeMap<String, Vec<f32>> {
    m.store.iter().map(|(_, p)| (p.name.clone(), p.value.data().to_vec())).collect()
}

fn changed(a: &BTreeMap<String, Vec<f32>>, b: &BTreeMap<String, Vec<f32>>, prefix: &str) -> (bool, bool) {
    let mut inside = false;
    let mut outside = false;
    for (k, v) in a {
        if v != &b[k] {
            if k.starts_with(prefix) {
                inside = true;
            } else {
                outside = true;
            }
        }
    }
    (inside, outside)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        stage1_epochs: epochs,
        stage2_epochs: 1,
        stage3_rounds: 1,
        episode_batch: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn stages_respect_the_freezing_contract() {
    let data = small_data(8, 7);
    let mut model = small_model(ModelKind::Cpm, 1);
    let mut trainer = Trainer::new(quick(1), &data, 2).unwrap();

    let s0 = snapshot(&model);
    trainer.run(&mut model, Some(Stage::One)).unwrap();
    let s1 = snapshot(&model);
    for (k, v) in &s0 {
        let frozen = k.starts_with("pi_") || k.starts_with("r_");
        assert_eq!(v == &s1[k], frozen, "{k}");
    }

    trainer.run(&mut model, Some(Stage::Two)).unwrap();
    let s2 = snapshot(&model);
    assert_eq!(changed(&s1, &s2, "pi_"), (true, false));

    trainer.run(&mut model, Some(Stage::Three)).unwrap();
    let s3 = snapshot(&model);
    assert!(s2.iter().any(|(k, v)| k.starts_with("r_") && v != &s3[k]));
    assert_eq!(model.stage, 3);
    assert_eq!(trainer.log.series(3, "q_reg").len(), 1);
}

#[test]
fn stage_one_loss_decreases() {
    let data = small_data(20, 8);
    assert_eq!(data.transitions(), 200);
    let mut model = small_model(ModelKind::Cpm, 3);
    let mut trainer = Trainer::new(quick(20), &data, 4).unwrap();
    trainer.stage1(&mut model).unwrap();
    let s = trainer.log.series(1, "contrastive");
    assert_eq!(s.len(), 20);
    assert!(s[19] < 0.5 * s[0], "{s:?}");
}

#[test]
fn training_is_deterministic_given_seeds() {
    let data = small_data(4, 9);
    let run = || {
        let mut model = small_model(ModelKind::Cpm, 5);
        let mut trainer = Trainer::new(quick(1), &data, 6).unwrap();
        trainer.run(&mut model, None).unwrap();
        let mut buf = Vec::new();
        trainer.log.write_csv(&mut buf).unwrap();
        (snapshot(&model), buf)
    };
    assert_eq!(run(), run());
}

#[test]
fn out_of_order_stages_are_pipeline_errors() {
    let data = small_data(2, 10);
    let mut trainer = Trainer::new(quick(1), &data, 0).unwrap();
    let mut model = small_model(ModelKind::Cpm, 0);
    assert!(matches!(trainer.run(&mut model, Some(Stage::Two)), Err(Error::Pipeline(_))));
    assert!(matches!(trainer.run(&mut model, Some(Stage::Three)), Err(Error::Pipeline(_))));
    for kind in [ModelKind::Gnn, ModelKind::Modular] {
        let mut model = small_model(kind, 0);
        trainer.run(&mut model, None).unwrap();
        assert_eq!(model.stage, 1);
        assert!(matches!(trainer.run(&mut model, Some(Stage::Two)), Err(Error::Pipeline(_))));
    }
}

#[test]
fn non_finite_weights_abort_as_divergence() {
    let data = small_data(2, 11);
    let mut model = small_model(ModelKind::Cpm, 0);
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.name.starts_with("enc.mlp")).map(|(id, _)| id).collect();
    for id in ids {
        model.store.value_mut(id).data_mut().fill(f32::NAN);
    }
    let mut trainer = Trainer::new(quick(1), &data, 0).unwrap();
    let res = trainer.stage1(&mut model);
    assert!(matches!(res, Err(Error::Diverged(_))), "{res:?}");
}

#[test]
fn batches_draw_negatives_from_other_transitions() {
    let data = small_data(3, 12);
    let all: Vec<StepRef> = data.steps().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = make_batch(&data, &all, &all, &mut rng).unwrap();
    assert_eq!(b.len(), 30);
    for (i, s) in all.iter().enumerate() {
        assert!(std::ptr::eq(b.obs[i], data.frame(s.episode, s.t)));
        assert!(!std::ptr::eq(b.neg[i], b.obs[i]));
    }
    assert!(make_batch(&data, &[], &all, &mut rng).is_err());
    assert!(make_batch(&data, &all[..1], &all[..1], &mut rng).is_err());
}
