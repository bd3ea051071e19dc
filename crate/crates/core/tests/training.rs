mod common;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dpoe::autodiff::Graph;
use dpoe::data::make_synthetic;
use dpoe::latent::infer_with_noise;
use dpoe::loss::{derangement, discriminator_loss, discriminator_loss_var, permute_rows};
use dpoe::model::{DpoeModel, Noise};
use dpoe::networks::{decode_view, discriminator_prob, Mode};
use dpoe::params::Adam;
use dpoe::train::{fit, train_step, TrainState};
use dpoe::{Dataset, ModelConfig, ViewSpec};

#[test]
fn total_loss_falls_over_fifty_epochs() {
    let mut data: Dataset = make_synthetic(common::VIEWS, common::CLUSTERS, 2000, common::DIM, 0);
    data.normalize();
    let mut cfg = ModelConfig::desk(data.specs.clone(), common::CLUSTERS);
    cfg.epochs = 50;
    let (state, _) = fit(&cfg, &data).unwrap();
    let first = state.history[0].total;
    let last = state.history[49].total;
    assert!(last < first, "epoch 1 {first}, epoch 50 {last}");
}

#[test]
fn one_repeated_instance_is_reconstructed() {
    let mut cfg = ModelConfig::new(vec![ViewSpec::vector("a", 6), ViewSpec::vector("b", 6)], 3);
    cfg.latent_dims = vec![2];
    cfg.architecture.hidden_width = 32;
    cfg.architecture.disc_mapping_width = 8;
    cfg.architecture.disc_score_width = 8;
    cfg.learning_rate = 1e-2;
    let mut state = TrainState::<f32>::from_config(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Array2<f32>> = (0..2)
        .map(|_| Array2::from_shape_simple_fn((1, 6), || rng.random_range(-1.0..1.0)))
        .collect();
    let batch: Vec<Array2<f32>> = rows.iter().map(|r| r.broadcast((16, 6)).unwrap().to_owned()).collect();
    let views: Vec<_> = batch.iter().map(|b| b.view()).collect();
    for _ in 0..400 {
        train_step(&mut state, &views).unwrap();
    }
    // Batch statistics: a batch of one repeated row has zero variance, which
    // the running statistics cannot represent.
    let model = &state.model;
    let latent = infer_with_noise(model, &views, &Noise::zeros(model, 16), Mode::Train).unwrap();
    for (v, x) in batch.iter().enumerate() {
        let z = ndarray::concatenate(Axis(1), &[latent.c.view(), latent.s[v].view()]).unwrap();
        let back = decode_view(&model.decoders[v], &model.params, z.view()).unwrap();
        let mse = (&back - x).mapv(|e| e * e).mean().unwrap();
        assert!(mse < 1e-2, "view {v}: mse {mse}");
    }
}

#[test]
fn discriminator_separates_dependent_codes() {
    let mut cfg = ModelConfig::new(vec![ViewSpec::vector("a", 4), ViewSpec::vector("b", 4)], 3);
    cfg.latent_dims = vec![2];
    cfg.architecture.disc_mapping_width = 16;
    cfg.architecture.disc_score_width = 32;
    let mut model = DpoeModel::<f64>::new(&cfg).unwrap();
    let disc = model.discriminators[0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let centers = [[3.0, 0.0], [-3.0, 2.0], [0.0, -3.0]];
    // s sits near the center of the cluster that c points at.
    let mut codes = |n: usize| {
        let mut c = Array2::<f64>::zeros((n, 3));
        let mut s = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            let k = rng.random_range(0..3);
            c[[i, k]] = 1.0;
            for j in 0..2 {
                let e: f64 = StandardNormal.sample(&mut rng);
                s[[i, j]] = centers[k][j] + 0.3 * e;
            }
        }
        let shuffled = permute_rows(s.view(), &derangement(n, &mut rng));
        (c, s, shuffled)
    };
    let (hc, hs, hsh) = codes(256);
    let held_out = |m: &DpoeModel<f64>| discriminator_loss(&disc, &m.disc_params, hc.view(), hs.view(), hsh.view()).unwrap();

    let mut adam = Adam::new(&model.disc_params, 1e-3);
    let mut trace = vec![held_out(&model)];
    for _ in 0..6 {
        for _ in 0..25 {
            let (c, s, sh) = codes(64);
            let grads = {
                let mut g = Graph::new();
                let dp = model.disc_params.bind(&mut g, true);
                let (cv, sv, shv) = (g.constant(c), g.constant(s), g.constant(sh));
                let loss = discriminator_loss_var(&mut g, &disc, &dp, cv, sv, shv);
                let mut grads = g.backward(loss);
                dp.gradients(&mut grads, &model.disc_params)
            };
            adam.step(&mut model.disc_params, &grads);
        }
        trace.push(held_out(&model));
    }
    assert!(trace.windows(2).all(|w| w[1] < w[0]), "{trace:?}");

    let joint = discriminator_prob(&disc, &model.disc_params, hc.view(), hs.view()).unwrap();
    let marginal = discriminator_prob(&disc, &model.disc_params, hc.view(), hsh.view()).unwrap();
    let (pj, pm) = (joint.mean().unwrap(), marginal.mean().unwrap());
    assert!(pj > pm + 0.2, "joint {pj}, shuffled {pm}");
}
