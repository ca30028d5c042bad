#![allow(dead_code)]

pub mod gradsuite;

use lifelong_bn::autodiff::{Graph, NodeId};
use lifelong_bn::data::DomainDataset;
use lifelong_bn::harness::ExperimentConfig;
use lifelong_bn::lifelong::TrainRegime;
use lifelong_bn::synth::{generate_domain, DomainTransform, PhantomSpec, SplitCounts};
use lifelong_bn::{DomainId, Result, SegNetConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_TRIALS: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Compares reverse-mode gradients of `sum(w * f(inputs))` (random fixed `w`)
/// against central differences for every coordinate of every input.
/// Returns the largest relative error `|a - n| / max(|a|, |n|)` over inputs,
/// measured on whole gradient vectors.
pub fn grad_check<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let numel = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &ids).expect("forward");
        g.value(out).numel()
    };
    let mut r = rng(seed);
    let weights: Vec<f64> = (0..numel).map(|_| r.random_range(-1.0..1.0)).collect();
    let eval = |values: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &ids).expect("forward");
        let loss = g.dot_const(out, weights.clone()).unwrap();
        let value = g.value(loss).item();
        g.backward(loss).unwrap();
        (value, ids.iter().map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_default()).collect())
    };
    let (_, analytic) = eval(inputs);
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fp = eval(&plus).0;
            let fm = eval(&minus).0;
            numeric[j] = (fp - fm) / (2.0 * FD_STEP);
        }
        let a = &analytic[i];
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if na.max(nn) < 1e-12 { diff } else { diff / na.max(nn) };
        worst = worst.max(rel);
    }
    worst
}

/// Small phantoms, two slices per volume, 32x32.
pub fn micro_phantom() -> PhantomSpec {
    PhantomSpec { image_size: [32, 32], ..PhantomSpec::default() }
}

pub fn micro_network() -> SegNetConfig {
    SegNetConfig { enc_channels: vec![4, 8, 16], dec_channels: vec![8, 4], image_size: [32, 32], ..SegNetConfig::default() }
}

pub fn micro_transform(kind: u32) -> DomainTransform {
    let base = DomainTransform { noise_std: 0.02, bias_amplitude: 0.05, seed: kind as u64, ..DomainTransform::identity() };
    match kind {
        1 => base,
        2 => DomainTransform { scale: -1.0, offset: 1.1, ..base },
        3 => DomainTransform { gamma: 0.5, ..base },
        _ => DomainTransform { gamma: 0.4, offset: 0.9, ..base },
    }
}

pub fn micro_dataset(domain: u32, kind: u32, counts: SplitCounts, seed: u64) -> DomainDataset {
    generate_domain(&micro_phantom(), &micro_transform(kind), DomainId(domain), counts, seed).unwrap()
}

pub fn micro_regime(steps: usize) -> TrainRegime {
    TrainRegime { max_steps: steps, batch_size: 4, eval_every: 0, seed: 5, ..TrainRegime::default() }
}

/// A complete experiment small enough to run in seconds.
pub fn micro_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.benchmark.phantom = micro_phantom();
    cfg.network = SegNetConfig { enc_channels: vec![4, 8], dec_channels: vec![4], image_size: [32, 32], ..SegNetConfig::default() };
    cfg.benchmark.initial_counts = SplitCounts { train: 3, val: 1, test: 2 };
    cfg.benchmark.new_counts = SplitCounts { train: 3, val: 1, test: 2 };
    cfg.benchmark.few_shot_volumes = 2;
    let r = &mut cfg.regimes;
    r.lifelong.max_steps = 12;
    r.shared.max_steps = 12;
    r.dedicated.max_steps = 6;
    for t in [&mut r.lifelong, &mut r.shared, &mut r.dedicated] {
        t.eval_every = 5;
    }
    for t in [&mut r.adapt, &mut r.finetune] {
        t.max_steps = 8;
        t.eval_every = 2;
        t.early_stop = Some(lifelong_bn::lifelong::EarlyStop { patience: 2 });
    }
    cfg
}
