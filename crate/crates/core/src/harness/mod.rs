//! Experiment orchestration: dataset generation, the network matrix,
//! adaptation, evaluation and reporting, all rooted in one run directory.

mod config;
mod report;

pub use config::{BenchmarkConfig, DomainRole, DomainSpec, ExperimentConfig, HistEqConfig, Regimes, ReportConfig, ReportFormat};
pub use report::{report, Verdict, VerdictStatus, ReportOutcome, CSV_FIXED_COLUMNS};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint, Footprint};
use crate::data::{by_volume, DomainDataset, LabelledSlice, Split};
use crate::error::{Error, Result};
use crate::lifelong::{adapt_new_domain, evaluate, finetune_all, train_initial, CurvePoint, Selection, TrainRegime};
use crate::norm::DomainId;
use crate::preproc::{histogram_match, ReferenceCdf};
use crate::segnet::SegNet;
use crate::synth::{generate_domain, mix_seed, read_dataset, write_dataset};

/// Scalar type used for every experiment network.
pub type Real = f32;

/// Layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn dataset(&self, d: DomainId) -> PathBuf {
        self.root.join("datasets").join(format!("D{d}.lbnd"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("datasets").join("manifest.toml")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn curves(&self, name: &str) -> PathBuf {
        self.root.join("curves").join(format!("{name}.csv"))
    }

    pub fn train_summary(&self, name: &str) -> PathBuf {
        self.root.join("train").join(format!("{name}.json"))
    }

    pub fn adapt_summary(&self, name: &str) -> PathBuf {
        self.root.join("adapt").join(format!("{name}.json"))
    }

    pub fn cells(&self) -> PathBuf {
        self.root.join("eval").join("cells.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Header(e.to_string()))?;
    text.push('\n');
    write_file(path, text)
}

pub(crate) fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Header(format!("{}: {e}", path.display())))
}

/// Filters and parallelism shared by every stage.
#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    /// Worker threads for independent jobs; 0 or 1 runs sequentially.
    pub jobs: usize,
    /// Network names or families (`dedicated`, `shared`, `lifelong`) to include.
    pub networks: Option<Vec<String>>,
    pub domains: Option<Vec<DomainId>>,
}

impl StageOptions {
    fn wants_domain(&self, d: DomainId) -> bool {
        self.domains.as_ref().is_none_or(|ds| ds.contains(&d))
    }

    fn wants_network(&self, name: &str, family: &str) -> bool {
        self.networks.as_ref().is_none_or(|ns| ns.iter().any(|n| n == name || n == family))
    }
}

/// Runs `jobs` closures on up to `workers` threads; results keep input order.
fn run_jobs<R: Send>(workers: usize, jobs: Vec<Box<dyn FnOnce() -> Result<R> + Send + '_>>) -> Result<Vec<R>> {
    let n = jobs.len();
    if workers <= 1 || n <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let queue = Mutex::new(jobs.into_iter().enumerate().collect::<Vec<_>>());
    let results: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(n) {
            s.spawn(|| loop {
                let next = queue.lock().expect("job queue").pop();
                let Some((i, job)) = next else { break };
                let r = job();
                results.lock().expect("results")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results").into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Names of the network families in a run.
#[derive(Clone, Debug)]
pub struct Names {
    tag: String,
}

impl Names {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { tag: cfg.domains_with(DomainRole::Initial).iter().map(|d| d.to_string()).collect() }
    }

    pub fn dedicated(&self, d: DomainId) -> String {
        format!("N{d}")
    }

    pub fn shared(&self) -> String {
        format!("N{}", self.tag)
    }

    pub fn lifelong(&self) -> String {
        format!("N{}bn", self.tag)
    }

    pub fn adapted(&self, d: DomainId) -> String {
        format!("N{}bn+{d}", self.tag)
    }

    pub fn finetuned(&self, d: DomainId) -> String {
        format!("N{}ft{d}", self.tag)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestDomain {
    id: u32,
    role: DomainRole,
    transform: crate::synth::DomainTransform,
    file: String,
    slices: usize,
    crc32: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    phantom: crate::synth::PhantomSpec,
    domains: Vec<ManifestDomain>,
}

/// Generates and writes every requested domain's dataset plus a manifest.
pub fn gen(cfg: &ExperimentConfig, run: &RunDir, opts: &StageOptions) -> Result<Vec<DomainId>> {
    cfg.validate()?;
    let specs: Vec<&DomainSpec> = cfg.benchmark.domains.iter().filter(|d| opts.wants_domain(DomainId(d.id))).collect();
    let jobs: Vec<Box<dyn FnOnce() -> Result<ManifestDomain> + Send + '_>> = specs
        .iter()
        .map(|&spec| {
            Box::new(move || {
                let d = DomainId(spec.id);
                let ds = generate_domain(&cfg.benchmark.phantom, &spec.transform, d, cfg.counts(spec.role), cfg.seed)?;
                let path = run.dataset(d);
                ensure_parent(&path)?;
                write_dataset(&path, &ds)?;
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                Ok(ManifestDomain {
                    id: spec.id,
                    role: spec.role,
                    transform: spec.transform.clone(),
                    file: format!("D{d}.lbnd"),
                    slices: ds.train.len() + ds.val.len() + ds.test.len(),
                    crc32: crc32fast::hash(&bytes),
                })
            }) as Box<dyn FnOnce() -> Result<ManifestDomain> + Send + '_>
        })
        .collect();
    let domains = run_jobs(opts.jobs, jobs)?;
    let manifest = Manifest { seed: cfg.seed, phantom: cfg.benchmark.phantom.clone(), domains };
    let text = toml::to_string(&manifest).map_err(|e| Error::Header(e.to_string()))?;
    write_file(&run.manifest(), text)?;
    Ok(specs.iter().map(|s| DomainId(s.id)).collect())
}

pub fn load_dataset(cfg: &ExperimentConfig, run: &RunDir, d: DomainId) -> Result<DomainDataset> {
    let ds = read_dataset(&run.dataset(d))?;
    if ds.domain != d {
        return Err(Error::Validation(format!("{} holds domain {}, expected {d}", run.dataset(d).display(), ds.domain)));
    }
    if ds.image_size != cfg.network.image_size || ds.num_classes != cfg.network.num_classes {
        return Err(Error::Validation(format!("dataset for domain {d} does not match the configured network")));
    }
    Ok(ds)
}

pub fn load_net(run: &RunDir, name: &str) -> Result<SegNet<Real>> {
    Ok(load_checkpoint::<Real>(&run.checkpoint(name))?.0)
}

/// Serializes a header and rows as RFC 4180 CSV.
pub(crate) fn csv_table<I, R>(header: &[String], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let bad = |e: csv::Error| Error::Header(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(bad)?;
    for row in rows {
        w.write_record(row).map_err(bad)?;
    }
    w.into_inner().map_err(|e| Error::Header(format!("csv: {e}")))
}

pub fn curves_csv(curve: &[CurvePoint]) -> Result<Vec<u8>> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let header = ["step", "domain", "loss", "val_dice"].map(String::from);
    csv_table(&header, curve.iter().map(|p| [p.step.to_string(), p.domain.to_string(), opt(p.loss), opt(p.val_dice)]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub name: String,
    pub steps: usize,
    /// Mean validation dice per domain after training, under the BN set used in training.
    pub final_val: BTreeMap<DomainId, f64>,
    pub footprint: Footprint,
}

enum Family {
    Dedicated(DomainId),
    Shared,
    Lifelong,
}

/// Trains the requested networks and writes checkpoints, curves and summaries.
pub fn train(cfg: &ExperimentConfig, run: &RunDir, opts: &StageOptions) -> Result<Vec<TrainSummary>> {
    cfg.validate()?;
    let names = Names::new(cfg);
    let initial = cfg.domains_with(DomainRole::Initial);
    let mut plan = Vec::new();
    for spec in &cfg.benchmark.domains {
        let d = DomainId(spec.id);
        if opts.wants_domain(d) && opts.wants_network(&names.dedicated(d), "dedicated") {
            plan.push((names.dedicated(d), Family::Dedicated(d)));
        }
    }
    if opts.wants_network(&names.shared(), "shared") {
        plan.push((names.shared(), Family::Shared));
    }
    if opts.wants_network(&names.lifelong(), "lifelong") {
        plan.push((names.lifelong(), Family::Lifelong));
    }
    let mut needed: Vec<DomainId> = Vec::new();
    for (_, f) in &plan {
        match f {
            Family::Dedicated(d) => needed.push(*d),
            _ => needed.extend(&initial),
        }
    }
    needed.sort_unstable();
    needed.dedup();
    let mut data = BTreeMap::new();
    for d in needed {
        data.insert(d, load_dataset(cfg, run, d)?);
    }
    let data = &data;
    let jobs: Vec<Box<dyn FnOnce() -> Result<TrainSummary> + Send + '_>> = plan
        .into_iter()
        .map(|(name, family)| {
            let initial = initial.clone();
            Box::new(move || {
                let (domains, sets, regime, tag): (Vec<DomainDataset>, Vec<DomainId>, &TrainRegime, u64) = match family {
                    Family::Dedicated(d) => (vec![data[&d].clone()], vec![d], &cfg.regimes.dedicated, 100 + d.0 as u64),
                    Family::Shared => (initial.iter().map(|d| data[d].clone()).collect(), vec![DomainId::SHARED], &cfg.regimes.shared, 1),
                    Family::Lifelong => (initial.iter().map(|d| data[d].clone()).collect(), initial.clone(), &cfg.regimes.lifelong, 2),
                };
                let seed = mix_seed(cfg.seed, &[tag]);
                let mut net = SegNet::<Real>::build(cfg.network.clone(), &sets, seed)?;
                let regime = TrainRegime { seed, ..regime.clone() };
                let outcome = train_initial(&mut net, &domains, &regime)?;
                let path = run.checkpoint(&name);
                ensure_parent(&path)?;
                save_checkpoint(&net, seed, &path)?;
                write_file(&run.curves(&name), curves_csv(&outcome.curve)?)?;
                let summary = TrainSummary { name: name.clone(), steps: outcome.steps, final_val: outcome.final_val, footprint: Footprint::of(&net) };
                write_json(&run.train_summary(&name), &summary)?;
                Ok(summary)
            }) as Box<dyn FnOnce() -> Result<TrainSummary> + Send + '_>
        })
        .collect();
    run_jobs(opts.jobs, jobs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub name: String,
    pub domain: DomainId,
    /// `lifelong` for BN-only adaptation, `finetune` for full fine-tuning.
    pub method: String,
    pub selection: Selection,
    pub designed_nearest: Option<DomainId>,
    pub steps: usize,
    pub best_step: usize,
    pub best_val: f64,
    /// Eval-mode outputs on every old-domain test image are bit-identical before and after.
    pub old_outputs_identical: bool,
    /// Every parameter and statistic outside the new domain's BN set is bit-identical.
    pub only_new_bn_changed: bool,
    pub shared_weights_changed: bool,
    /// Save, load and re-save reproduce the same network and the same bytes.
    pub checkpoint_round_trip_exact: bool,
}

fn bits_eq(a: &[Real], b: &[Real]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn shared_identical(a: &SegNet<Real>, b: &SegNet<Real>) -> bool {
    a.shared.len() == b.shared.len() && a.shared.iter().zip(&b.shared).all(|(p, q)| p.name == q.name && bits_eq(p.value.data(), q.value.data()))
}

fn bn_identical(a: &SegNet<Real>, b: &SegNet<Real>, d: DomainId) -> bool {
    match (a.bank.get(d), b.bank.get(d)) {
        (Ok(x), Ok(y)) => x.len() == y.len()
            && x.iter().zip(y).all(|(p, q)| {
                bits_eq(&p.params.gamma, &q.params.gamma)
                    && bits_eq(&p.params.beta, &q.params.beta)
                    && bits_eq(&p.state.running_mean, &q.state.running_mean)
                    && bits_eq(&p.state.running_var, &q.state.running_var)
                    && p.state.batches_seen == q.state.batches_seen
                    && p.params.eps.to_bits() == q.params.eps.to_bits()
                    && p.state.momentum.to_bits() == q.state.momentum.to_bits()
            }),
        _ => false,
    }
}

fn eval_outputs(net: &SegNet<Real>, slices: &[LabelledSlice], d: DomainId) -> Result<Vec<Real>> {
    let mut out = Vec::new();
    for chunk in slices.chunks(8) {
        let refs: Vec<&LabelledSlice> = chunk.iter().collect();
        let (x, _) = crate::data::batch_of::<Real>(&refs)?;
        out.extend_from_slice(net.forward_eval(&x, d)?.data());
    }
    Ok(out)
}

fn round_trip_exact(net: &SegNet<Real>, seed: u64, path: &Path) -> Result<bool> {
    let written = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (back, back_seed) = crate::checkpoint::decode_checkpoint::<Real>(&written)?;
    Ok(&back == net && back_seed == seed && encode_checkpoint(&back, back_seed)? == written)
}

/// Adapts the lifelong network to each requested new domain (one adapted
/// copy per domain) and fine-tunes the shared network as the baseline.
pub fn adapt(cfg: &ExperimentConfig, run: &RunDir, opts: &StageOptions) -> Result<Vec<AdaptSummary>> {
    cfg.validate()?;
    let names = Names::new(cfg);
    let initial = cfg.domains_with(DomainRole::Initial);
    let new: Vec<DomainId> = cfg.domains_with(DomainRole::New).into_iter().filter(|&d| opts.wants_domain(d)).collect();
    let do_lifelong = opts.wants_network(&names.lifelong(), "lifelong");
    let do_finetune = opts.wants_network(&names.shared(), "shared");
    let lifelong = if do_lifelong { Some(load_net(run, &names.lifelong())?) } else { None };
    let shared = if do_finetune { Some(load_net(run, &names.shared())?) } else { None };
    let mut old = BTreeMap::new();
    if do_lifelong {
        for &k in &initial {
            old.insert(k, load_dataset(cfg, run, k)?);
        }
    }
    let mut few = BTreeMap::new();
    for &d in &new {
        let ds = load_dataset(cfg, run, d)?;
        few.insert(d, ds.few_shot(cfg.benchmark.few_shot_volumes, mix_seed(cfg.seed, &[3, d.0 as u64]))?);
    }
    let (old, few, names) = (&old, &few, &names);
    let mut jobs: Vec<Box<dyn FnOnce() -> Result<AdaptSummary> + Send + '_>> = Vec::new();
    for &d in &new {
        let designed = cfg.domain(d).and_then(|s| s.nearest).map(DomainId);
        if let Some(base) = &lifelong {
            jobs.push(Box::new(move || {
                let name = names.adapted(d);
                let seed = mix_seed(cfg.seed, &[4, d.0 as u64]);
                let mut net = base.clone();
                let before: Vec<Vec<Real>> = old.iter().map(|(&k, ds)| eval_outputs(&net, &ds.test, k)).collect::<Result<_>>()?;
                let regime = TrainRegime { seed, ..cfg.regimes.adapt.clone() };
                let outcome = adapt_new_domain(&mut net, &few[&d], &regime)?;
                let after: Vec<Vec<Real>> = old.iter().map(|(&k, ds)| eval_outputs(&net, &ds.test, k)).collect::<Result<_>>()?;
                let old_outputs_identical = before.iter().zip(&after).all(|(a, b)| bits_eq(a, b));
                let only_new_bn_changed = shared_identical(base, &net)
                    && base.domains().iter().all(|&k| bn_identical(base, &net, k))
                    && net.domains().len() == base.domains().len() + 1;
                let path = run.checkpoint(&name);
                ensure_parent(&path)?;
                save_checkpoint(&net, seed, &path)?;
                let exact = round_trip_exact(&net, seed, &path)?;
                write_file(&run.curves(&name), curves_csv(&outcome.curve)?)?;
                let summary = AdaptSummary {
                    name: name.clone(),
                    domain: d,
                    method: "lifelong".into(),
                    selection: outcome.selection,
                    designed_nearest: designed,
                    steps: outcome.steps,
                    best_step: outcome.best_step,
                    best_val: outcome.best_val,
                    old_outputs_identical,
                    only_new_bn_changed,
                    shared_weights_changed: !shared_identical(base, &net),
                    checkpoint_round_trip_exact: exact,
                };
                write_json(&run.adapt_summary(&name), &summary)?;
                Ok(summary)
            }));
        }
        if let Some(base) = &shared {
            jobs.push(Box::new(move || {
                let name = names.finetuned(d);
                let seed = mix_seed(cfg.seed, &[5, d.0 as u64]);
                let mut net = base.clone();
                let regime = TrainRegime { seed, ..cfg.regimes.finetune.clone() };
                let outcome = finetune_all(&mut net, &few[&d], &regime)?;
                let path = run.checkpoint(&name);
                ensure_parent(&path)?;
                save_checkpoint(&net, seed, &path)?;
                let exact = round_trip_exact(&net, seed, &path)?;
                write_file(&run.curves(&name), curves_csv(&outcome.curve)?)?;
                let summary = AdaptSummary {
                    name: name.clone(),
                    domain: d,
                    method: "finetune".into(),
                    selection: outcome.selection,
                    designed_nearest: None,
                    steps: outcome.steps,
                    best_step: outcome.best_step,
                    best_val: outcome.best_val,
                    old_outputs_identical: false,
                    only_new_bn_changed: false,
                    shared_weights_changed: !shared_identical(base, &net),
                    checkpoint_round_trip_exact: exact,
                };
                write_json(&run.adapt_summary(&name), &summary)?;
                Ok(summary)
            }));
        }
    }
    run_jobs(opts.jobs, jobs)
}

/// One evaluated (network, test set, BN set) combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub network: String,
    /// `D{id}` or `D{id}-histeq`.
    pub test: String,
    /// `bn{id}`, or `s` for the shared set.
    pub bn: String,
    /// Foreground classes 1..K-1.
    pub dice: Vec<f64>,
    pub avg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub cells: Vec<Cell>,
    /// Networks whose checkpoint was not found; their cells are absent.
    pub missing: Vec<String>,
}

pub fn test_label(d: DomainId, histeq: bool) -> String {
    if histeq {
        format!("D{d}-histeq")
    } else {
        format!("D{d}")
    }
}

pub fn bn_label(d: DomainId) -> String {
    if d == DomainId::SHARED {
        "s".into()
    } else {
        format!("bn{d}")
    }
}

/// `(test domain, histogram-matched?, BN set)`.
type CellKey = (DomainId, bool, DomainId);

/// Test cells of each network with its family name.
fn cell_plan(cfg: &ExperimentConfig, opts: &StageOptions) -> Vec<(String, &'static str, Vec<CellKey>)> {
    let names = Names::new(cfg);
    let initial = cfg.domains_with(DomainRole::Initial);
    let new = cfg.domains_with(DomainRole::New);
    let all: Vec<DomainId> = cfg.benchmark.domains.iter().map(|d| DomainId(d.id)).collect();
    let s = DomainId::SHARED;
    let mut plan = Vec::new();
    for &d in &all {
        plan.push((names.dedicated(d), "dedicated", vec![(d, false, d)]));
    }
    let mut shared: Vec<_> = all.iter().map(|&d| (d, false, s)).collect();
    shared.extend(new.iter().map(|&d| (d, true, s)));
    plan.push((names.shared(), "shared", shared));
    let mut lifelong: Vec<_> = initial.iter().map(|&k| (k, false, k)).collect();
    for &d in &new {
        lifelong.extend(initial.iter().map(|&k| (d, false, k)));
    }
    plan.push((names.lifelong(), "lifelong", lifelong));
    for &d in &new {
        let mut cells: Vec<_> = initial.iter().map(|&k| (k, false, k)).collect();
        cells.push((d, false, d));
        plan.push((names.adapted(d), "lifelong", cells));
        plan.push((names.finetuned(d), "shared", all.iter().map(|&k| (k, false, s)).collect()));
    }
    plan.into_iter()
        .filter(|(name, family, _)| opts.wants_network(name, family))
        .map(|(name, family, cells)| {
            let cells = cells.into_iter().filter(|&(d, _, _)| opts.wants_domain(d)).collect();
            (name, family, cells)
        })
        .filter(|(_, _, cells): &(String, &str, Vec<_>)| !cells.is_empty())
        .collect()
}

fn histeq_reference(cfg: &ExperimentConfig, data: &BTreeMap<DomainId, DomainDataset>) -> Result<ReferenceCdf> {
    let initial = cfg.domains_with(DomainRole::Initial);
    let images = initial.iter().flat_map(|k| data[k].train.iter().map(|s| s.image.as_slice()));
    ReferenceCdf::build(images, cfg.histeq.bins)
}

fn matched(slices: &[LabelledSlice], reference: &ReferenceCdf) -> Vec<LabelledSlice> {
    slices.iter().map(|s| LabelledSlice { image: histogram_match(&s.image, reference), ..s.clone() }).collect()
}

/// Evaluates every planned cell whose network checkpoint exists.
pub fn eval(cfg: &ExperimentConfig, run: &RunDir, opts: &StageOptions) -> Result<EvalOutput> {
    cfg.validate()?;
    let plan = cell_plan(cfg, opts);
    let mut data = BTreeMap::new();
    for spec in &cfg.benchmark.domains {
        let d = DomainId(spec.id);
        data.insert(d, load_dataset(cfg, run, d)?);
    }
    let needs_histeq = plan.iter().any(|(_, _, cells)| cells.iter().any(|c| c.1));
    let mut histeq = BTreeMap::new();
    if needs_histeq {
        let reference = histeq_reference(cfg, &data)?;
        for d in cfg.domains_with(DomainRole::New) {
            histeq.insert(d, matched(&data[&d].test, &reference));
        }
    }
    let mut missing = Vec::new();
    let mut present = Vec::new();
    for (name, _, cells) in plan {
        if run.checkpoint(&name).exists() {
            present.push((name, cells));
        } else {
            missing.push(name);
        }
    }
    let (data, histeq) = (&data, &histeq);
    let jobs: Vec<Box<dyn FnOnce() -> Result<Vec<Cell>> + Send + '_>> = present
        .into_iter()
        .map(|(name, cells)| {
            Box::new(move || {
                let net = load_net(run, &name)?;
                let mut out = Vec::new();
                for (d, he, bn) in cells {
                    let slices = if he { &histeq[&d] } else { &data[&d].test };
                    let r = evaluate(&net, slices, bn)?;
                    out.push(Cell { network: name.clone(), test: test_label(d, he), bn: bn_label(bn), dice: r.per_class[1..].to_vec(), avg: r.average });
                }
                Ok(out)
            }) as Box<dyn FnOnce() -> Result<Vec<Cell>> + Send + '_>
        })
        .collect();
    let cells = run_jobs(opts.jobs, jobs)?.into_iter().flatten().collect();
    let output = EvalOutput { cells, missing };
    write_json(&run.cells(), &output)?;
    Ok(output)
}

/// Test slice shown in the graymap panels for a domain.
pub(crate) fn overlay_slice<'a>(cfg: &ExperimentConfig, ds: &'a DomainDataset, d: DomainId) -> &'a LabelledSlice {
    let vols = by_volume(ds.split(Split::Test));
    let all: Vec<&LabelledSlice> = vols.into_iter().flatten().collect();
    all[(mix_seed(cfg.seed, &[6, d.0 as u64]) % all.len() as u64) as usize]
}
