//! Central finite-difference checks of every differentiable primitive and of
//! a complete small network, in f64.

use lifelong_bn::segnet::TrainScope;
use lifelong_bn::{DomainId, Mode, SegNet, SegNetConfig, Tensor};
use rand::Rng;

use super::*;

/// Largest relative error over [`GRAD_TRIALS`] seeded trials.
fn trials(mut one: impl FnMut(u64) -> f64) -> f64 {
    (0..GRAD_TRIALS as u64).map(&mut one).fold(0.0, f64::max)
}

pub fn conv2d() -> f64 {
    trials(|t| {
        let mut r = rng(100 + t);
        let k = if t % 3 == 0 { 1 } else { 3 };
        let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let x = random_tensor(&mut r, &[n, cin, 5, 4], -1.0, 1.0);
        let w = random_tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0);
        grad_check(&[x, w], t, |g, ids| g.conv2d(ids[0], ids[1]))
    })
}

pub fn maxpool2() -> f64 {
    trials(|t| {
        let mut r = rng(200 + t);
        let x = random_tensor(&mut r, &[2, 2, 6, 4], -1.0, 1.0);
        grad_check(&[x], t, |g, ids| g.maxpool2(ids[0]))
    })
}

pub fn upsample() -> f64 {
    trials(|t| {
        let mut r = rng(300 + t);
        let x = random_tensor(&mut r, &[1, 2, 3, 4], -1.0, 1.0);
        grad_check(&[x], t, |g, ids| g.upsample_bilinear2(ids[0]))
    })
}

pub fn batch_norm_train() -> f64 {
    trials(|t| {
        let mut r = rng(400 + t);
        let x = random_tensor(&mut r, &[3, 2, 3, 3], -2.0, 2.0);
        let gamma = random_tensor(&mut r, &[2], 0.5, 1.5);
        let beta = random_tensor(&mut r, &[2], -0.5, 0.5);
        grad_check(&[x, gamma, beta], t, |g, ids| g.batch_norm_train(ids[0], ids[1], ids[2], 1e-5))
    })
}

pub fn batch_norm_eval() -> f64 {
    trials(|t| {
        let mut r = rng(450 + t);
        let x = random_tensor(&mut r, &[2, 3, 2, 2], -2.0, 2.0);
        let gamma = random_tensor(&mut r, &[3], 0.5, 1.5);
        let beta = random_tensor(&mut r, &[3], -0.5, 0.5);
        let mean: Vec<f64> = (0..3).map(|_| r.random_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..3).map(|_| r.random_range(0.5..2.0)).collect();
        grad_check(&[x, gamma, beta], t, |g, ids| g.batch_norm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5))
    })
}

pub fn softmax() -> f64 {
    trials(|t| {
        let mut r = rng(500 + t);
        let x = random_tensor(&mut r, &[2, 4, 3, 2], -3.0, 3.0);
        grad_check(&[x], t, |g, ids| g.softmax_channels(ids[0]))
    })
}

pub fn dice_loss() -> f64 {
    trials(|t| {
        let mut r = rng(600 + t);
        let p = random_tensor(&mut r, &[2, 3, 3, 3], 0.05, 1.0);
        let labels: Vec<u8> = (0..18).map(|_| r.random_range(0..3)).collect();
        grad_check(&[p], t, |g, ids| g.dice_loss(ids[0], &labels, 1e-5))
    })
}

pub fn relu_bias_concat() -> f64 {
    trials(|t| {
        let mut r = rng(700 + t);
        let a = random_tensor(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
        let bias = random_tensor(&mut r, &[3], -0.5, 0.5);
        grad_check(&[a, b, bias], t, |g, ids| {
            let c = g.concat_channels(&[ids[0], ids[1]])?;
            let c = g.add_channel_bias(c, ids[2])?;
            g.relu(c)
        })
    })
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn network_loss(net: &SegNet<f64>, x: &Tensor<f64>, labels: &[u8]) -> f64 {
    let mut pass = net.forward_graph(x, DomainId(1), Mode::Train, TrainScope::ALL).unwrap();
    let loss = pass.graph.dice_loss(pass.probs, labels, 1e-5).unwrap();
    pass.graph.value(loss).item()
}

/// Whole U-Net in train mode with dice loss: gradients of a 3x3 filter bank,
/// the head weight and bias, and one BN layer's gamma and beta.
pub fn micro_network() -> f64 {
    let cfg = SegNetConfig { enc_channels: vec![2, 3], dec_channels: vec![2], num_classes: 3, image_size: [4, 4], ..SegNetConfig::default() };
    trials(|t| {
        let mut net = SegNet::<f64>::build(cfg.clone(), &[DomainId(1)], t).unwrap();
        let mut r = rng(800 + t);
        for l in net.bank.get_mut(DomainId(1)).unwrap() {
            for g in &mut l.params.gamma {
                *g += r.random_range(-0.3..0.3);
            }
            for b in &mut l.params.beta {
                *b = r.random_range(-0.3..0.3);
            }
        }
        let x = random_tensor(&mut r, &[2, 1, 4, 4], 0.0, 1.0);
        let labels: Vec<u8> = (0..32).map(|_| r.random_range(0..3)).collect();

        let mut pass = net.forward_graph(&x, DomainId(1), Mode::Train, TrainScope::ALL).unwrap();
        let loss = pass.graph.dice_loss(pass.probs, &labels, 1e-5).unwrap();
        pass.graph.backward(loss).unwrap();
        let n_shared = net.shared.len();
        let mut worst = 0.0f64;
        for i in [1, n_shared - 2, n_shared - 1] {
            let analytic = pass.graph.grad(pass.shared_leaves[i]).unwrap().to_vec();
            let numeric: Vec<f64> = (0..net.shared[i].value.numel())
                .map(|j| {
                    let mut plus = net.clone();
                    plus.shared[i].value.data_mut()[j] += FD_STEP;
                    let mut minus = net.clone();
                    minus.shared[i].value.data_mut()[j] -= FD_STEP;
                    (network_loss(&plus, &x, &labels) - network_loss(&minus, &x, &labels)) / (2.0 * FD_STEP)
                })
                .collect();
            worst = worst.max(rel_error(&analytic, &numeric));
        }
        let (gamma, beta) = pass.bn_leaves[2];
        for (leaf, is_gamma) in [(gamma, true), (beta, false)] {
            let analytic = pass.graph.grad(leaf).unwrap().to_vec();
            let numeric: Vec<f64> = (0..analytic.len())
                .map(|j| {
                    let bumped = |delta: f64| {
                        let mut n = net.clone();
                        let p = &mut n.bank.get_mut(DomainId(1)).unwrap()[2].params;
                        if is_gamma {
                            p.gamma[j] += delta;
                        } else {
                            p.beta[j] += delta;
                        }
                        network_loss(&n, &x, &labels)
                    };
                    (bumped(FD_STEP) - bumped(-FD_STEP)) / (2.0 * FD_STEP)
                })
                .collect();
            worst = worst.max(rel_error(&analytic, &numeric));
        }
        worst
    })
}
