//! Reduced U-Net with shared convolution filters and a per-domain BN bank.
//!
//! Contracting path: one block per entry of `enc_channels`, max-pooling
//! between blocks. Expanding path: bilinear x2 upsampling, skip
//! concatenation, then one block per entry of `dec_channels`. Each block is
//! `convs_per_block` x (3x3 conv, BN, ReLU). A 1x1 conv with bias maps to
//! class scores, followed by a channel softmax.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::norm::{DomainBnBank, DomainId, Mode, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::optim::{Optimizer, ParamSlot};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub convs_per_block: usize,
    pub image_size: [usize; 2],
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 4,
            enc_channels: vec![32, 64, 128, 256],
            dec_channels: vec![128, 64, 32],
            convs_per_block: 2,
            image_size: [64, 64],
            bn_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl SegNetConfig {
    pub fn pool_levels(&self) -> usize {
        self.enc_channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("network.{k}");
        if self.in_channels == 0 {
            return Err(Error::config(key("in_channels"), "must be positive"));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::config(key("num_classes"), "must lie in [2, 256]"));
        }
        if self.enc_channels.len() < 2 || self.enc_channels.contains(&0) {
            return Err(Error::config(key("enc_channels"), "need at least two positive levels"));
        }
        if self.dec_channels.len() != self.enc_channels.len() - 1 || self.dec_channels.contains(&0) {
            return Err(Error::config(
                key("dec_channels"),
                format!("need {} positive entries, one per pooling level", self.enc_channels.len() - 1),
            ));
        }
        if self.convs_per_block == 0 {
            return Err(Error::config(key("convs_per_block"), "must be positive"));
        }
        let div = 1usize << self.pool_levels();
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::config(key("image_size"), format!("{h}x{w} is not divisible by {div}")));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config(key("bn_eps"), "must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config(key("bn_momentum"), "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// `(cin, cout)` of every 3x3 conv in forward order; each is followed by one BN layer.
    pub fn conv_layout(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for &c in &self.enc_channels {
            for i in 0..self.convs_per_block {
                out.push((if i == 0 { cin } else { c }, c));
            }
            cin = c;
        }
        let levels = self.enc_channels.len();
        for (j, &c) in self.dec_channels.iter().enumerate() {
            let skip = self.enc_channels[levels - 2 - j];
            for i in 0..self.convs_per_block {
                out.push((if i == 0 { cin + skip } else { c }, c));
            }
            cin = c;
        }
        out
    }

    pub fn bn_channels(&self) -> Vec<usize> {
        self.conv_layout().into_iter().map(|(_, c)| c).collect()
    }

    fn head_in(&self) -> usize {
        *self.dec_channels.last().expect("validated")
    }
}

/// A named domain-agnostic parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedParam<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Which parameter groups receive gradients in a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainScope {
    pub shared: bool,
    pub bn: bool,
}

impl TrainScope {
    pub const ALL: TrainScope = TrainScope { shared: true, bn: true };
    pub const BN_ONLY: TrainScope = TrainScope { shared: false, bn: true };
    pub const NONE: TrainScope = TrainScope { shared: false, bn: false };
}

/// Graph of one forward pass plus handles on its parameter leaves.
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    pub probs: NodeId,
    pub domain: DomainId,
    pub shared_leaves: Vec<NodeId>,
    pub bn_leaves: Vec<(NodeId, NodeId)>,
    pub bn_outputs: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNet<T> {
    pub config: SegNetConfig,
    pub shared: Vec<SharedParam<T>>,
    pub bank: DomainBnBank<T>,
    /// For each domain added after initial training, the domain whose BN set seeded it.
    pub provenance: BTreeMap<DomainId, DomainId>,
}

impl<T: Scalar> SegNet<T> {
    /// He-uniform conv init from `seed`; every initial domain starts with
    /// gamma = 1, beta = 0.
    pub fn build(config: SegNetConfig, initial_domains: &[DomainId], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shared = Vec::new();
        let layout = config.conv_layout();
        let n_enc = config.enc_channels.len() * config.convs_per_block;
        for (i, &(cin, cout)) in layout.iter().enumerate() {
            let name = if i < n_enc {
                format!("enc{}.conv{}", i / config.convs_per_block, i % config.convs_per_block)
            } else {
                let j = i - n_enc;
                format!("dec{}.conv{}", j / config.convs_per_block, j % config.convs_per_block)
            };
            shared.push(SharedParam { name, value: he_uniform(&mut rng, cout, cin, 3) });
        }
        shared.push(SharedParam { name: "head.weight".into(), value: he_uniform(&mut rng, config.num_classes, config.head_in(), 1) });
        shared.push(SharedParam { name: "head.bias".into(), value: Tensor::zeros(vec![config.num_classes]) });

        let mut bank = DomainBnBank::new(config.bn_channels());
        for &d in initial_domains {
            bank.register(d, T::lit(config.bn_eps), T::lit(config.bn_momentum))?;
        }
        Ok(Self { config, shared, bank, provenance: BTreeMap::new() })
    }

    pub fn domains(&self) -> Vec<DomainId> {
        self.bank.domains()
    }

    pub fn shared_value_count(&self) -> usize {
        self.shared.iter().map(|p| p.value.numel()).sum()
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<usize> {
        let [n, c, h, w] = batch.dims4("segnet.forward")?;
        if c != self.config.in_channels || [h, w] != self.config.image_size {
            return Err(Error::shape(
                "segnet.forward",
                format!(
                    "input {:?} does not match configured [N,{},{},{}]",
                    batch.shape(),
                    self.config.in_channels,
                    self.config.image_size[0],
                    self.config.image_size[1]
                ),
            ));
        }
        Ok(n)
    }

    /// Builds the forward graph for one domain. Only that domain's BN set is
    /// placed in the graph. Running statistics are not touched here.
    pub fn forward_graph(&self, batch: &Tensor<T>, domain: DomainId, mode: Mode, scope: TrainScope) -> Result<ForwardPass<T>> {
        self.check_input(batch)?;
        let bn_set = self.bank.get(domain)?;
        let mut g = Graph::new();
        let shared_leaves: Vec<NodeId> = self.shared.iter().map(|p| g.leaf(p.value.clone(), scope.shared)).collect();
        let mut bn_leaves = Vec::with_capacity(bn_set.len());
        let mut bn_outputs = Vec::with_capacity(bn_set.len());
        let mut layer = 0usize;
        let cfg = &self.config;

        let mut conv_bn_relu = |g: &mut Graph<T>, x: NodeId, layer: &mut usize| -> Result<NodeId> {
            let l = &bn_set[*layer];
            let trainable = scope.bn && l.params.trainable;
            let y = g.conv2d(x, shared_leaves[*layer])?;
            let gamma = g.leaf(Tensor::new(vec![l.channels()], l.params.gamma.clone())?, trainable);
            let beta = g.leaf(Tensor::new(vec![l.channels()], l.params.beta.clone())?, trainable);
            let y = match mode {
                Mode::Train => g.batch_norm_train(y, gamma, beta, l.params.eps)?,
                Mode::Eval => g.batch_norm_eval(y, gamma, beta, &l.state.running_mean, &l.state.running_var, l.params.eps)?,
            };
            bn_leaves.push((gamma, beta));
            bn_outputs.push(y);
            *layer += 1;
            g.relu(y)
        };

        let mut x = g.leaf(batch.clone(), false);
        let mut skips = Vec::new();
        for level in 0..cfg.enc_channels.len() {
            for _ in 0..cfg.convs_per_block {
                x = conv_bn_relu(&mut g, x, &mut layer)?;
            }
            if level + 1 < cfg.enc_channels.len() {
                skips.push(x);
                x = g.maxpool2(x)?;
            }
        }
        for _ in 0..cfg.dec_channels.len() {
            let up = g.upsample_bilinear2(x)?;
            let skip = skips.pop().expect("one skip per pooling level");
            x = g.concat_channels(&[up, skip])?;
            for _ in 0..cfg.convs_per_block {
                x = conv_bn_relu(&mut g, x, &mut layer)?;
            }
        }
        let n_shared = shared_leaves.len();
        let logits = g.conv2d(x, shared_leaves[n_shared - 2])?;
        let logits = g.add_channel_bias(logits, shared_leaves[n_shared - 1])?;
        let probs = g.softmax_channels(logits)?;
        Ok(ForwardPass { graph: g, probs, domain, shared_leaves, bn_leaves, bn_outputs })
    }

    /// Folds a train-mode pass's batch statistics into the domain's running estimates.
    pub fn update_running_stats(&mut self, pass: &ForwardPass<T>) -> Result<()> {
        let set = self.bank.get_mut(pass.domain)?;
        for (i, (&node, layer)) in pass.bn_outputs.iter().zip(set.iter_mut()).enumerate() {
            let (mean, var) = pass
                .graph
                .bn_batch_stats(node)
                .ok_or_else(|| Error::Contract("running statistics need a train-mode pass".into()))?;
            layer.state.update(i, mean, var)?;
        }
        Ok(())
    }

    /// Class probabilities `[N, K, H, W]`. Train mode uses the batch
    /// statistics and updates the selected domain's running estimates only.
    pub fn forward(&mut self, batch: &Tensor<T>, domain: DomainId, mode: Mode) -> Result<Tensor<T>> {
        let pass = self.forward_graph(batch, domain, mode, TrainScope::NONE)?;
        if mode == Mode::Train {
            self.update_running_stats(&pass)?;
        }
        Ok(pass.graph.value(pass.probs).clone())
    }

    pub fn forward_eval(&self, batch: &Tensor<T>, domain: DomainId) -> Result<Tensor<T>> {
        let pass = self.forward_graph(batch, domain, Mode::Eval, TrainScope::NONE)?;
        Ok(pass.graph.value(pass.probs).clone())
    }

    /// Per-image argmax label maps under eval-mode semantics.
    pub fn predict_labels(&self, batch: &Tensor<T>, domain: DomainId) -> Result<Vec<Vec<u8>>> {
        let probs = self.forward_eval(batch, domain)?;
        argmax_channels(&probs)
    }

    /// One optimizer step over the parameters a pass exposed as trainable.
    /// Returns how many parameter tensors were trainable.
    pub fn apply_gradients(&mut self, pass: &ForwardPass<T>, opt: &mut Optimizer<T>) -> Result<usize> {
        let g = &pass.graph;
        let mut slots = Vec::new();
        for (p, &leaf) in self.shared.iter_mut().zip(&pass.shared_leaves) {
            let frozen = !g.requires_grad(leaf);
            slots.push(ParamSlot { key: p.name.clone(), value: p.value.data_mut(), grad: g.grad(leaf), frozen });
        }
        let set = self.bank.get_mut(pass.domain)?;
        for (i, (layer, &(gamma, beta))) in set.iter_mut().zip(&pass.bn_leaves).enumerate() {
            let frozen = !g.requires_grad(gamma);
            let key = format!("bn[{}].{i}", pass.domain);
            slots.push(ParamSlot { key: format!("{key}.gamma"), value: &mut layer.params.gamma, grad: g.grad(gamma), frozen });
            slots.push(ParamSlot { key: format!("{key}.beta"), value: &mut layer.params.beta, grad: g.grad(beta), frozen });
        }
        let trainable = slots.iter().filter(|s| !s.frozen).count();
        opt.step(&mut slots)?;
        Ok(trainable)
    }
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Tensor<T> {
    let fan_in = (cin * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..cout * cin * k * k).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(vec![cout, cin, k, k], data).expect("consistent shape")
}

/// Per-pixel argmax over channels; ties go to the lower class index.
pub fn argmax_channels<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
    let [n, k, h, w] = probs.dims4("argmax_channels")?;
    let plane = h * w;
    let d = probs.data();
    Ok((0..n)
        .map(|b| {
            (0..plane)
                .map(|p| {
                    let mut best = 0usize;
                    for c in 1..k {
                        if d[(b * k + c) * plane + p] > d[(b * k + best) * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> SegNetConfig {
        SegNetConfig {
            num_classes: 3,
            enc_channels: vec![2, 3, 4, 4],
            dec_channels: vec![3, 3, 2],
            image_size: [16, 16],
            ..SegNetConfig::default()
        }
    }

    #[test]
    fn default_layout_matches_reduced_unet() {
        let cfg = SegNetConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.pool_levels(), 3);
        let layout = cfg.conv_layout();
        let enc: Vec<usize> = layout[..8].iter().step_by(2).map(|&(_, c)| c).collect();
        let dec: Vec<usize> = layout[8..].iter().step_by(2).map(|&(_, c)| c).collect();
        assert_eq!(enc, vec![32, 64, 128, 256]);
        assert_eq!(dec, vec![128, 64, 32]);
        // skip audit: decoder input = upsampled + encoder skip channels
        assert_eq!(layout[8].0, 256 + 128);
        assert_eq!(layout[10].0, 128 + 64);
        assert_eq!(layout[12].0, 64 + 32);
    }

    #[test]
    fn image_size_must_divide_by_eight() {
        let cfg = SegNetConfig { image_size: [60, 64], ..SegNetConfig::default() };
        assert!(matches!(SegNet::<f32>::build(cfg, &[DomainId(1)], 0), Err(Error::Config { .. })));
    }

    #[test]
    fn initial_domains_are_identical_at_birth() {
        let net = SegNet::<f64>::build(micro(), &[DomainId(1), DomainId(2), DomainId(3)], 5).unwrap();
        assert_eq!(net.domains().len(), 3);
        let a = net.bank.get(DomainId(1)).unwrap();
        for d in [2, 3] {
            assert_eq!(net.bank.get(DomainId(d)).unwrap(), a);
        }
        assert!(a.iter().all(|l| l.params.gamma.iter().all(|&g| g == 1.0) && l.params.beta.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SegNet::<f32>::build(micro(), &[DomainId(1)], 11).unwrap();
        let b = SegNet::<f32>::build(micro(), &[DomainId(1)], 11).unwrap();
        let c = SegNet::<f32>::build(micro(), &[DomainId(1)], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.shared, c.shared);
    }

    #[test]
    fn forward_shape_and_normalization() {
        let mut net = SegNet::<f64>::build(micro(), &[DomainId(1)], 1).unwrap();
        let x = Tensor::new(vec![2, 1, 16, 16], (0..512).map(|i| (i as f64 * 0.1).sin().abs()).collect()).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let p = net.forward(&x, DomainId(1), mode).unwrap();
            assert_eq!(p.shape(), &[2, 3, 16, 16]);
            for b in 0..2 {
                for px in 0..256 {
                    let s: f64 = (0..3).map(|c| p.data()[(b * 3 + c) * 256 + px]).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn unknown_domain_and_bad_shape() {
        let net = SegNet::<f64>::build(micro(), &[DomainId(1)], 1).unwrap();
        let x = Tensor::zeros(vec![1, 1, 16, 16]);
        assert!(matches!(net.forward_eval(&x, DomainId(4)), Err(Error::UnknownDomain { .. })));
        let bad = Tensor::zeros(vec![1, 1, 8, 16]);
        assert!(matches!(net.forward_eval(&bad, DomainId(1)), Err(Error::Shape { .. })));
    }

    #[test]
    fn argmax_tie_and_one_hot() {
        let uniform = Tensor::<f64>::full(vec![1, 3, 2, 2], 1.0 / 3.0);
        assert_eq!(argmax_channels(&uniform).unwrap(), vec![vec![0; 4]]);
        let mut hot = Tensor::<f64>::zeros(vec![1, 3, 1, 2]);
        hot.data_mut()[2 * 2] = 1.0; // class 2, pixel 0
        hot.data_mut()[3] = 1.0; // class 1, pixel 1
        assert_eq!(argmax_channels(&hot).unwrap(), vec![vec![2, 1]]);
    }

    #[test]
    fn argmax_ignores_monotone_rescaling() {
        let p = Tensor::<f64>::new(vec![1, 3, 1, 3], vec![0.2, 0.5, 0.3, 0.5, 0.1, 0.3, 0.3, 0.4, 0.4]).unwrap();
        let q = Tensor::new(vec![1, 3, 1, 3], p.data().iter().map(|v| (3.0 * v).exp() - 7.0).collect()).unwrap();
        assert_eq!(argmax_channels(&p).unwrap(), argmax_channels(&q).unwrap());
    }
}
