//! Batch normalization and the per-domain parameter bank.
//!
//! A [`DomainBnBank`] holds one complete set of BN layers per domain: scale and
//! shift (`gamma`, `beta`) plus the running population statistics used at
//! evaluation time. The shared convolution filters never live here.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Identifier of a data domain (scanner/protocol, or synthetic transform).
///
/// Id 0 is reserved for the single BN set of a fully shared network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub u32);

impl DomainId {
    pub const SHARED: DomainId = DomainId(0);
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::SHARED {
            f.write_str("s")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
    pub trainable: bool,
}

impl<T: Scalar> BnParams<T> {
    pub fn identity(channels: usize, eps: T) -> Self {
        Self { gamma: vec![T::one(); channels], beta: vec![T::zero(); channels], eps, trainable: true }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub batches_seen: u64,
}

impl<T: Scalar> BnState<T> {
    pub fn fresh(channels: usize, momentum: T) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            batches_seen: 0,
        }
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, layer: usize, batch_mean: &[T], batch_var: &[T]) -> Result<()> {
        if batch_mean.len() != self.running_mean.len() || batch_var.len() != self.running_var.len() {
            return Err(Error::shape(
                "bn_update_running",
                format!(
                    "layer {layer}: {} channels tracked, batch statistics have {}/{}",
                    self.running_mean.len(),
                    batch_mean.len(),
                    batch_var.len()
                ),
            ));
        }
        if !batch_mean.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer, what: "batch mean" });
        }
        if !batch_var.iter().all(|v| v.is_finite() && *v >= T::zero()) {
            return Err(Error::NonFinite { layer, what: "batch variance" });
        }
        let keep = self.momentum;
        let take = T::one() - keep;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = keep * *r + take * b;
        }
        self.batches_seen += 1;
        Ok(())
    }
}

/// One BN layer's parameters and statistics for a single domain.
#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer<T> {
    pub params: BnParams<T>,
    pub state: BnState<T>,
}

impl<T: Scalar> BnLayer<T> {
    pub fn new(channels: usize, eps: T, momentum: T) -> Self {
        Self { params: BnParams::identity(channels, eps), state: BnState::fresh(channels, momentum) }
    }

    pub fn channels(&self) -> usize {
        self.params.channels()
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` on a plain tensor. Train
    /// mode normalizes with batch statistics and folds them into the running
    /// estimates; eval mode uses the running estimates.
    pub fn forward(&mut self, layer: usize, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.dims4("bn_forward")?;
        if c != self.channels() {
            return Err(Error::shape("bn_forward", format!("input has {c} channels, layer has {}", self.channels())));
        }
        let plane = h * w;
        let y = match mode {
            Mode::Train => {
                let out = batch_norm_train(x.data(), n, c, plane, &self.params.gamma, &self.params.beta, self.params.eps)?;
                self.state.update(layer, &out.stats.mean, &out.stats.var)?;
                out.y
            }
            Mode::Eval => batch_norm_eval(
                x.data(),
                n,
                c,
                plane,
                &self.params.gamma,
                &self.params.beta,
                &self.state.running_mean,
                &self.state.running_var,
                self.params.eps,
            ),
        };
        Tensor::new(x.shape().to_vec(), y)
    }
}

#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

pub struct TrainForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub stats: BatchStats<T>,
}

/// Train-mode BN over `[n, c, plane]`: normalizes with the biased batch
/// variance across the N, H, W axes.
pub fn batch_norm_train<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<TrainForward<T>> {
    let count = n * plane;
    if count < 2 {
        return Err(Error::Contract(format!(
            "train-mode batch norm needs at least 2 values per channel, got {count}"
        )));
    }
    let inv_count = T::one() / T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for k in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let start = (b * c + k) * plane;
            s += x[start..start + plane].iter().copied().sum::<T>();
        }
        let m = s * inv_count;
        let mut v = T::zero();
        for b in 0..n {
            let start = (b * c + k) * plane;
            for &xv in &x[start..start + plane] {
                let d = xv - m;
                v += d * d;
            }
        }
        mean[k] = m;
        var[k] = v * inv_count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for k in 0..c {
            let start = (b * c + k) * plane;
            for i in start..start + plane {
                let h = (x[i] - mean[k]) * inv_std[k];
                xhat[i] = h;
                y[i] = gamma[k] * h + beta[k];
            }
        }
    }
    Ok(TrainForward { y, xhat, stats: BatchStats { mean, var, inv_std } })
}

/// Backward of [`batch_norm_train`], including the path through the batch
/// statistics. Gradients are accumulated into the provided buffers.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_train_backward<T: Scalar>(
    grad_y: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    plane: usize,
    grad_x: Option<&mut [T]>,
    grad_gamma: Option<&mut [T]>,
    grad_beta: Option<&mut [T]>,
) {
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for b in 0..n {
        for k in 0..c {
            let start = (b * c + k) * plane;
            for i in start..start + plane {
                sum_g[k] += grad_y[i];
                sum_gx[k] += grad_y[i] * xhat[i];
            }
        }
    }
    if let Some(gg) = grad_gamma {
        for (g, s) in gg.iter_mut().zip(&sum_gx) {
            *g += *s;
        }
    }
    if let Some(gb) = grad_beta {
        for (g, s) in gb.iter_mut().zip(&sum_g) {
            *g += *s;
        }
    }
    if let Some(gx) = grad_x {
        let inv_count = T::one() / T::from_usize(n * plane).unwrap();
        for b in 0..n {
            for k in 0..c {
                let scale = gamma[k] * inv_std[k];
                let mg = sum_g[k] * inv_count;
                let mgx = sum_gx[k] * inv_count;
                let start = (b * c + k) * plane;
                for i in start..start + plane {
                    gx[i] += scale * (grad_y[i] - mg - xhat[i] * mgx);
                }
            }
        }
    }
}

/// Eval-mode BN: a per-channel affine map built from the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_eval<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for k in 0..c {
            let inv = T::one() / (var[k] + eps).sqrt();
            let start = (b * c + k) * plane;
            for i in start..start + plane {
                y[i] = gamma[k] * ((x[i] - mean[k]) * inv) + beta[k];
            }
        }
    }
    y
}

/// Per-domain BN sets, one [`BnLayer`] per BN layer of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBnBank<T> {
    layer_channels: Vec<usize>,
    domains: BTreeMap<DomainId, Vec<BnLayer<T>>>,
}

impl<T: Scalar> DomainBnBank<T> {
    pub fn new(layer_channels: Vec<usize>) -> Self {
        Self { layer_channels, domains: BTreeMap::new() }
    }

    pub fn layer_count(&self) -> usize {
        self.layer_channels.len()
    }

    pub fn layer_channels(&self) -> &[usize] {
        &self.layer_channels
    }

    pub fn domains(&self) -> Vec<DomainId> {
        self.domains.keys().copied().collect()
    }

    pub fn contains(&self, domain: DomainId) -> bool {
        self.domains.contains_key(&domain)
    }

    /// Registers a fresh domain with gamma = 1, beta = 0, mean 0, variance 1.
    pub fn register(&mut self, domain: DomainId, eps: T, momentum: T) -> Result<()> {
        if self.contains(domain) {
            return Err(Error::DuplicateDomain(domain));
        }
        let set = self.layer_channels.iter().map(|&c| BnLayer::new(c, eps, momentum)).collect();
        self.domains.insert(domain, set);
        Ok(())
    }

    /// Inserts an explicit BN set, validating its layer/channel layout.
    pub fn insert(&mut self, domain: DomainId, set: Vec<BnLayer<T>>) -> Result<()> {
        if self.contains(domain) {
            return Err(Error::DuplicateDomain(domain));
        }
        self.check_layout(&set)?;
        self.domains.insert(domain, set);
        Ok(())
    }

    fn check_layout(&self, set: &[BnLayer<T>]) -> Result<()> {
        if set.len() != self.layer_count() {
            return Err(Error::Validation(format!(
                "BN set has {} layers, network has {}",
                set.len(),
                self.layer_count()
            )));
        }
        for (i, (layer, &c)) in set.iter().zip(&self.layer_channels).enumerate() {
            let ok = layer.params.gamma.len() == c
                && layer.params.beta.len() == c
                && layer.state.running_mean.len() == c
                && layer.state.running_var.len() == c;
            if !ok {
                return Err(Error::Validation(format!("BN layer {i} does not have {c} channels")));
            }
            if layer.params.eps <= T::zero() {
                return Err(Error::Validation(format!("BN layer {i} has non-positive eps")));
            }
        }
        Ok(())
    }

    fn unknown(&self, requested: DomainId) -> Error {
        Error::UnknownDomain { requested, registered: self.domains() }
    }

    pub fn get(&self, domain: DomainId) -> Result<&[BnLayer<T>]> {
        self.domains.get(&domain).map(Vec::as_slice).ok_or_else(|| self.unknown(domain))
    }

    pub fn get_mut(&mut self, domain: DomainId) -> Result<&mut [BnLayer<T>]> {
        if !self.contains(domain) {
            return Err(self.unknown(domain));
        }
        Ok(self.domains.get_mut(&domain).expect("checked").as_mut_slice())
    }

    /// Replaces an existing domain's BN set wholesale (used to restore snapshots).
    pub fn replace(&mut self, domain: DomainId, set: Vec<BnLayer<T>>) -> Result<()> {
        self.check_layout(&set)?;
        if !self.contains(domain) {
            return Err(self.unknown(domain));
        }
        self.domains.insert(domain, set);
        Ok(())
    }

    /// Deep-copies `source`'s parameters and statistics into a new domain.
    pub fn clone_domain(&mut self, source: DomainId, new: DomainId) -> Result<()> {
        if self.contains(new) {
            return Err(Error::DuplicateDomain(new));
        }
        let copy = self.get(source)?.to_vec();
        self.domains.insert(new, copy);
        Ok(())
    }

    /// Scalar count of one domain's BN set (gamma, beta, running mean, running var).
    pub fn values_per_domain(&self) -> usize {
        4 * self.layer_channels.iter().sum::<usize>()
    }
}
