//! Multi-domain training, closest-domain selection, BN-only adaptation and
//! the full fine-tuning baseline.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_of, by_volume, DomainDataset, LabelledSlice};
use crate::error::{Error, Result};
use crate::metrics::{DiceCounts, DiceReport, DEFAULT_DICE_SMOOTH};
use crate::norm::{BnLayer, DomainId, Mode};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::scalar::Scalar;
use crate::segnet::{SegNet, SharedParam, TrainScope};
use crate::synth::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Each step draws a batch from one domain, cycling through domains in order.
    PerDomainRoundrobin,
    /// Each step draws from the pooled images of all domains.
    MixedAllDomains,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    All,
    BnOnly,
}

impl ParamScope {
    fn train_scope(self) -> TrainScope {
        match self {
            ParamScope::All => TrainScope::ALL,
            ParamScope::BnOnly => TrainScope::BN_ONLY,
        }
    }
}

/// Stop once mean validation dice has not improved for `patience` evaluations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRegime {
    pub batch_mode: BatchMode,
    pub scope: ParamScope,
    pub max_steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Validation interval in steps; 0 disables intermediate validation.
    pub eval_every: usize,
    pub early_stop: Option<EarlyStop>,
    pub dice_smooth: f64,
    pub seed: u64,
}

impl Default for TrainRegime {
    fn default() -> Self {
        Self {
            batch_mode: BatchMode::PerDomainRoundrobin,
            scope: ParamScope::All,
            max_steps: 600,
            batch_size: 4,
            optimizer: OptimizerConfig::default(),
            eval_every: 50,
            early_stop: None,
            dice_smooth: DEFAULT_DICE_SMOOTH,
            seed: 0,
        }
    }
}

impl TrainRegime {
    /// BN-only fine-tuning with early stopping, as used for new domains.
    pub fn adaptation() -> Self {
        Self {
            scope: ParamScope::BnOnly,
            max_steps: 1000,
            early_stop: Some(EarlyStop { patience: 5 }),
            ..Self::default()
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::config(format!("{key}.max_steps"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{key}.batch_size"), "must be positive"));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::config(format!("{key}.dice_smooth"), "must be positive"));
        }
        self.optimizer.validate(&format!("{key}.optimizer"))?;
        if let Some(es) = self.early_stop {
            if es.patience == 0 {
                return Err(Error::config(format!("{key}.early_stop.patience"), "must be positive"));
            }
            if self.eval_every == 0 || self.max_steps < self.eval_every {
                return Err(Error::config(
                    format!("{key}.max_steps"),
                    format!("validation every {} steps never runs within {} steps", self.eval_every, self.max_steps),
                ));
            }
        }
        Ok(())
    }
}

/// One row of a training curve. Loss rows and validation rows share the
/// format; absent values stay `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub domain: DomainId,
    pub loss: Option<f64>,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub curve: Vec<CurvePoint>,
    /// Mean validation dice per dataset after the last step.
    pub final_val: BTreeMap<DomainId, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub domain: DomainId,
    /// Mean foreground dice of the probe under each registered BN set, by domain id.
    pub scores: Vec<(DomainId, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptOutcome {
    pub selection: Selection,
    pub steps: usize,
    pub best_step: usize,
    pub best_val: f64,
    pub curve: Vec<CurvePoint>,
}

/// Cycles through a shuffled index order, reshuffling every epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

const EVAL_CHUNK: usize = 8;

/// Eval-mode label maps for `slices` under one BN set, in input order.
pub fn predict_slices<T: Scalar>(net: &SegNet<T>, slices: &[&LabelledSlice], domain: DomainId) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(EVAL_CHUNK) {
        let (batch, _) = batch_of::<T>(chunk)?;
        out.extend(net.predict_labels(&batch, domain)?);
    }
    Ok(out)
}

/// Volume-level dice (pixel counts pooled over each volume's slices),
/// averaged over volumes.
pub fn evaluate<T: Scalar>(net: &SegNet<T>, slices: &[LabelledSlice], domain: DomainId) -> Result<DiceReport> {
    if slices.is_empty() {
        return Err(Error::Contract("evaluation needs at least one slice".into()));
    }
    let k = net.config.num_classes;
    let mut reports = Vec::new();
    for volume in by_volume(slices) {
        let preds = predict_slices(net, &volume, domain)?;
        let mut counts = DiceCounts::new(k);
        for (p, s) in preds.iter().zip(&volume) {
            counts.add(p, &s.labels)?;
        }
        reports.push(counts.report());
    }
    Ok(DiceReport::mean(&reports).expect("non-empty"))
}

/// One optimization step on a batch; returns the dice loss.
fn train_step<T: Scalar>(
    net: &mut SegNet<T>,
    batch: &[&LabelledSlice],
    domain: DomainId,
    scope: TrainScope,
    smooth: f64,
    opt: &mut Optimizer<T>,
) -> Result<f64> {
    let (x, labels) = batch_of::<T>(batch)?;
    let mut pass = net.forward_graph(&x, domain, Mode::Train, scope)?;
    let loss = pass.graph.dice_loss(pass.probs, &labels, T::lit(smooth))?;
    pass.graph.backward(loss)?;
    let value = pass.graph.value(loss).item().as_f64();
    net.apply_gradients(&pass, opt)?;
    net.update_running_stats(&pass)?;
    Ok(value)
}

fn check_datasets<T: Scalar>(net: &SegNet<T>, datasets: &[DomainDataset]) -> Result<()> {
    if datasets.is_empty() {
        return Err(Error::Contract("training needs at least one dataset".into()));
    }
    for ds in datasets {
        if ds.train.is_empty() {
            return Err(Error::Validation(format!("domain {} has no training images", ds.domain)));
        }
        if ds.image_size != net.config.image_size || ds.num_classes != net.config.num_classes {
            return Err(Error::Validation(format!(
                "domain {} holds {:?} images with {} classes; the network expects {:?} with {}",
                ds.domain, ds.image_size, ds.num_classes, net.config.image_size, net.config.num_classes
            )));
        }
    }
    Ok(())
}

/// BN set a dataset is trained and evaluated with under `mode`.
fn bn_for<T: Scalar>(net: &SegNet<T>, mode: BatchMode, ds: &DomainDataset) -> DomainId {
    match mode {
        BatchMode::PerDomainRoundrobin => ds.domain,
        BatchMode::MixedAllDomains => net.domains()[0],
    }
}

fn validation_rows<T: Scalar>(net: &SegNet<T>, datasets: &[DomainDataset], mode: BatchMode, step: usize) -> Result<Vec<CurvePoint>> {
    let mut rows = Vec::new();
    for ds in datasets.iter().filter(|d| !d.val.is_empty()) {
        let dice = evaluate(net, &ds.val, bn_for(net, mode, ds))?.average;
        rows.push(CurvePoint { step, domain: ds.domain, loss: None, val_dice: Some(dice) });
    }
    Ok(rows)
}

/// Initial training on several domains for a fixed step budget.
///
/// Round-robin mode needs every dataset's domain registered in the BN bank
/// and only places the active domain's BN set in each step's graph. Mixed
/// mode needs a network with exactly one BN set, shared by all domains.
pub fn train_initial<T: Scalar>(net: &mut SegNet<T>, datasets: &[DomainDataset], regime: &TrainRegime) -> Result<TrainOutcome> {
    regime.validate("regime")?;
    check_datasets(net, datasets)?;
    match regime.batch_mode {
        BatchMode::PerDomainRoundrobin => {
            for ds in datasets {
                if !net.bank.contains(ds.domain) {
                    return Err(Error::UnknownDomain { requested: ds.domain, registered: net.domains() });
                }
            }
        }
        BatchMode::MixedAllDomains => {
            if net.domains().len() != 1 {
                return Err(Error::Contract(format!("mixed-batch training needs one shared BN set, found {}", net.domains().len())));
            }
        }
    }
    let scope = regime.scope.train_scope();
    let mut opt = Optimizer::new(regime.optimizer.clone());
    let mut curve = Vec::new();
    match regime.batch_mode {
        BatchMode::PerDomainRoundrobin => {
            let mut samplers: Vec<Sampler> =
                datasets.iter().map(|ds| Sampler::new(ds.train.len(), mix_seed(regime.seed, &[ds.domain.0 as u64]))).collect();
            for step in 1..=regime.max_steps {
                let i = (step - 1) % datasets.len();
                let ds = &datasets[i];
                let batch: Vec<&LabelledSlice> = samplers[i].next_batch(regime.batch_size).into_iter().map(|j| &ds.train[j]).collect();
                let loss = train_step(net, &batch, ds.domain, scope, regime.dice_smooth, &mut opt)?;
                curve.push(CurvePoint { step, domain: ds.domain, loss: Some(loss), val_dice: None });
                if regime.eval_every > 0 && step % regime.eval_every == 0 && step < regime.max_steps {
                    curve.extend(validation_rows(net, datasets, regime.batch_mode, step)?);
                }
            }
        }
        BatchMode::MixedAllDomains => {
            let pool: Vec<&LabelledSlice> = datasets.iter().flat_map(|d| d.train.iter()).collect();
            let bn = net.domains()[0];
            let mut sampler = Sampler::new(pool.len(), mix_seed(regime.seed, &[u32::MAX as u64]));
            for step in 1..=regime.max_steps {
                let batch: Vec<&LabelledSlice> = sampler.next_batch(regime.batch_size).into_iter().map(|j| pool[j]).collect();
                let loss = train_step(net, &batch, bn, scope, regime.dice_smooth, &mut opt)?;
                curve.push(CurvePoint { step, domain: bn, loss: Some(loss), val_dice: None });
                if regime.eval_every > 0 && step % regime.eval_every == 0 && step < regime.max_steps {
                    curve.extend(validation_rows(net, datasets, regime.batch_mode, step)?);
                }
            }
        }
    }
    let last = validation_rows(net, datasets, regime.batch_mode, regime.max_steps)?;
    let final_val = last.iter().map(|r| (r.domain, r.val_dice.expect("validation row"))).collect();
    curve.extend(last);
    Ok(TrainOutcome { steps: regime.max_steps, curve, final_val })
}

/// Scores the probe under every registered BN set and picks the best.
/// Ties go to the lowest domain id.
pub fn select_closest_domain<T: Scalar>(net: &SegNet<T>, probe: &[LabelledSlice]) -> Result<Selection> {
    if probe.is_empty() {
        return Err(Error::Contract("closest-domain selection needs a non-empty probe".into()));
    }
    let domains = net.domains();
    if domains.is_empty() {
        return Err(Error::Contract("network has no BN sets to select from".into()));
    }
    let mut scores = Vec::with_capacity(domains.len());
    for d in domains {
        scores.push((d, evaluate(net, probe, d)?.average));
    }
    Ok(Selection { domain: best_score(&scores), scores })
}

/// Argmax over `(domain, score)` pairs; ties go to the lowest domain id.
pub fn best_score(scores: &[(DomainId, f64)]) -> DomainId {
    let mut best = scores[0];
    for &(d, s) in &scores[1..] {
        if s > best.1 || (s == best.1 && d < best.0) {
            best = (d, s);
        }
    }
    best.0
}

/// Runs steps on one dataset with validation-based early stopping and
/// restores the best-validation snapshot. `snapshot`/`restore` decide which
/// part of the network is saved.
fn fit_with_early_stop<T: Scalar, S>(
    net: &mut SegNet<T>,
    data: &DomainDataset,
    bn: DomainId,
    regime: &TrainRegime,
    snapshot: impl Fn(&SegNet<T>) -> S,
    restore: impl Fn(&mut SegNet<T>, S) -> Result<()>,
) -> Result<(usize, usize, f64, Vec<CurvePoint>)> {
    let patience = regime.early_stop.map(|e| e.patience).unwrap_or(usize::MAX);
    let scope = regime.scope.train_scope();
    let mut opt = Optimizer::new(regime.optimizer.clone());
    let mut sampler = Sampler::new(data.train.len(), mix_seed(regime.seed, &[data.domain.0 as u64, 1]));
    let mut curve = Vec::new();
    let mut best_val = evaluate(net, &data.val, bn)?.average;
    curve.push(CurvePoint { step: 0, domain: data.domain, loss: None, val_dice: Some(best_val) });
    let mut best = (0usize, snapshot(net));
    let mut stale = 0usize;
    let mut steps = 0usize;
    for step in 1..=regime.max_steps {
        let batch: Vec<&LabelledSlice> = sampler.next_batch(regime.batch_size).into_iter().map(|j| &data.train[j]).collect();
        let loss = train_step(net, &batch, bn, scope, regime.dice_smooth, &mut opt)?;
        curve.push(CurvePoint { step, domain: data.domain, loss: Some(loss), val_dice: None });
        steps = step;
        if regime.eval_every > 0 && step % regime.eval_every == 0 {
            let val = evaluate(net, &data.val, bn)?.average;
            curve.push(CurvePoint { step, domain: data.domain, loss: None, val_dice: Some(val) });
            if val > best_val {
                best_val = val;
                best = (step, snapshot(net));
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    let best_step = best.0;
    restore(net, best.1)?;
    Ok((steps, best_step, best_val, curve))
}

fn check_new_domain<T: Scalar>(net: &SegNet<T>, new: &DomainDataset, regime: &TrainRegime) -> Result<()> {
    regime.validate("adaptation")?;
    check_datasets(net, std::slice::from_ref(new))?;
    if new.val.is_empty() {
        return Err(Error::Validation(format!("domain {} has no validation images", new.domain)));
    }
    if regime.early_stop.is_none() {
        return Err(Error::config("adaptation.early_stop", "adaptation needs validation-based early stopping"));
    }
    Ok(())
}

/// Adds `new.domain` to the BN bank: selects the closest existing domain on
/// the training images, clones its BN set and fine-tunes only that copy.
/// Shared filters and every other BN set are left untouched.
pub fn adapt_new_domain<T: Scalar>(net: &mut SegNet<T>, new: &DomainDataset, regime: &TrainRegime) -> Result<AdaptOutcome> {
    check_new_domain(net, new, regime)?;
    if regime.scope != ParamScope::BnOnly {
        return Err(Error::config("adaptation.scope", "adaptation trains BN parameters only"));
    }
    if net.bank.contains(new.domain) {
        return Err(Error::DuplicateDomain(new.domain));
    }
    let selection = select_closest_domain(net, &new.train)?;
    net.bank.clone_domain(selection.domain, new.domain)?;
    net.provenance.insert(new.domain, selection.domain);
    let d = new.domain;
    let (steps, best_step, best_val, curve) = fit_with_early_stop(
        net,
        new,
        d,
        regime,
        |n| n.bank.get(d).expect("registered").to_vec(),
        |n, set: Vec<BnLayer<T>>| n.bank.replace(d, set),
    )?;
    Ok(AdaptOutcome { selection, steps, best_step, best_val, curve })
}

/// Fine-tunes every parameter of a single-BN network on a new domain. Old
/// domains are not protected; this is the forgetting baseline.
pub fn finetune_all<T: Scalar>(net: &mut SegNet<T>, new: &DomainDataset, regime: &TrainRegime) -> Result<AdaptOutcome> {
    check_new_domain(net, new, regime)?;
    let domains = net.domains();
    if domains.len() != 1 {
        return Err(Error::Contract(format!("full fine-tuning expects one shared BN set, found {}", domains.len())));
    }
    let bn = domains[0];
    let selection = Selection { domain: bn, scores: vec![(bn, evaluate(net, &new.train, bn)?.average)] };
    let (steps, best_step, best_val, curve) = fit_with_early_stop(
        net,
        new,
        bn,
        regime,
        |n| (n.shared.clone(), n.bank.get(bn).expect("registered").to_vec()),
        |n, (shared, set): (Vec<SharedParam<T>>, Vec<BnLayer<T>>)| {
            n.shared = shared;
            n.bank.replace(bn, set)
        },
    )?;
    Ok(AdaptOutcome { selection, steps, best_step, best_val, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lowest_domain() {
        let s = [(DomainId(3), 0.5), (DomainId(1), 0.5), (DomainId(2), 0.5)];
        assert_eq!(best_score(&s), DomainId(1));
        let s = [(DomainId(1), 0.43), (DomainId(2), 0.032), (DomainId(3), 0.461)];
        assert_eq!(best_score(&s), DomainId(3));
        let s = [(DomainId(1), 0.013), (DomainId(2), 0.288), (DomainId(3), 0.005)];
        assert_eq!(best_score(&s), DomainId(2));
    }

    #[test]
    fn sampler_visits_every_index_each_epoch() {
        let mut s = Sampler::new(5, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(1)).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.next_batch(9).len(), 5);
    }

    #[test]
    fn early_stopping_needs_a_validation_round() {
        let r = TrainRegime { max_steps: 20, eval_every: 50, ..TrainRegime::adaptation() };
        match r.validate("adaptation") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "adaptation.max_steps"),
            other => panic!("{other:?}"),
        }
        TrainRegime::adaptation().validate("adaptation").unwrap();
    }
}
