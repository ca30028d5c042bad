use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Footprint;
use crate::data::LabelledSlice;
use crate::error::Result;
use crate::lifelong::predict_slices;
use crate::norm::DomainId;
use crate::segnet::{SegNet, SegNetConfig};

use super::{
    bn_label, csv_table, load_dataset, load_net, overlay_slice, read_json, test_label, write_file, write_json, AdaptSummary, Cell, DomainRole,
    EvalOutput, ExperimentConfig, Names, Real, ReportFormat, RunDir,
};

/// Leading CSV columns; one `c{k}` column per foreground class and `avg` follow.
pub const CSV_FIXED_COLUMNS: [&str; 3] = ["network", "test", "bn"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    Fail,
    NotEvaluable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: String,
    pub status: VerdictStatus,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOutcome {
    pub verdicts: Vec<Verdict>,
    pub footprint: Footprint,
}

impl ReportOutcome {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.status == VerdictStatus::Pass)
    }
}

pub fn csv_header(num_classes: usize) -> Vec<String> {
    let mut cols: Vec<String> = CSV_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.extend((1..num_classes).map(|k| format!("c{k}")));
    cols.push("avg".into());
    cols
}

fn csv(cells: &[Cell], num_classes: usize) -> Result<Vec<u8>> {
    csv_table(
        &csv_header(num_classes),
        cells.iter().map(|c| {
            let mut row = vec![c.network.clone(), c.test.clone(), c.bn.clone()];
            row.extend(c.dice.iter().map(|v| format!("{v:.3}")));
            row.push(format!("{:.3}", c.avg));
            row
        }),
    )
}

struct Table<'a> {
    cells: &'a [Cell],
}

impl Table<'_> {
    fn get(&self, network: &str, test: &str, bn: &str) -> Option<f64> {
        self.cells.iter().find(|c| c.network == network && c.test == test && c.bn == bn).map(|c| c.avg)
    }
}

/// Collects per-domain checks into one verdict: any missing value makes it
/// not evaluable, otherwise every check must hold.
struct Check {
    id: &'static str,
    notes: Vec<String>,
    missing: Vec<String>,
    ok: bool,
}

impl Check {
    fn new(id: &'static str) -> Self {
        Self { id, notes: Vec::new(), missing: Vec::new(), ok: true }
    }

    fn need(&mut self, what: String, v: Option<f64>) -> Option<f64> {
        if v.is_none() {
            self.missing.push(what);
        }
        v
    }

    fn record(&mut self, ok: bool, note: String) {
        self.ok &= ok;
        self.notes.push(format!("{}{note}", if ok { "" } else { "FAILED " }));
    }

    fn finish(self) -> Verdict {
        let (status, detail) = if !self.missing.is_empty() {
            (VerdictStatus::NotEvaluable, format!("missing: {}", self.missing.join(", ")))
        } else if self.notes.is_empty() {
            (VerdictStatus::NotEvaluable, "nothing to check".into())
        } else {
            (if self.ok { VerdictStatus::Pass } else { VerdictStatus::Fail }, self.notes.join("; "))
        };
        Verdict { id: self.id.into(), status, detail }
    }
}

fn verdicts(cfg: &ExperimentConfig, cells: &[Cell], adapted: &[Option<AdaptSummary>], finetuned: &[Option<AdaptSummary>], footprint: &Footprint) -> Vec<Verdict> {
    let t = Table { cells };
    let names = Names::new(cfg);
    let initial = cfg.domains_with(DomainRole::Initial);
    let new = cfg.domains_with(DomainRole::New);
    let s = bn_label(DomainId::SHARED);
    let cell = |net: &str, d: DomainId, bn: &str| (format!("{net}/{}/{bn}", test_label(d, false)), t.get(net, &test_label(d, false), bn));
    let mut out = Vec::new();

    let mut c = Check::new("no-forgetting");
    for (d, a) in new.iter().zip(adapted) {
        match a {
            None => c.missing.push(format!("adaptation summary for D{d}")),
            Some(a) => c.record(
                a.old_outputs_identical && a.only_new_bn_changed,
                format!("D{d}: old outputs identical {}, only bn{d} changed {}", a.old_outputs_identical, a.only_new_bn_changed),
            ),
        }
    }
    out.push(c.finish());

    let mut c = Check::new("multi-domain-parity");
    for &k in &initial {
        let (wa, a) = cell(&names.lifelong(), k, &bn_label(k));
        let (wb, b) = cell(&names.dedicated(k), k, &bn_label(k));
        if let (Some(a), Some(b)) = (c.need(wa, a), c.need(wb, b)) {
            c.record((a - b).abs() <= 0.03, format!("D{k}: lifelong {a:.3} vs dedicated {b:.3}"));
        }
    }
    out.push(c.finish());

    let mut c = Check::new("domain-shift-and-selection");
    for (d, a) in new.iter().zip(adapted) {
        let (w, dedicated) = cell(&names.dedicated(*d), *d, &bn_label(*d));
        let Some(dedicated) = c.need(w, dedicated) else { continue };
        let (w, shared) = cell(&names.shared(), *d, &s);
        if let Some(v) = c.need(w, shared) {
            c.record(v <= 0.6 * dedicated, format!("D{d}: shared {v:.3} vs dedicated {dedicated:.3}"));
        }
        for &k in &initial {
            let (w, v) = cell(&names.lifelong(), *d, &bn_label(k));
            if let Some(v) = c.need(w, v) {
                c.record(v <= 0.6 * dedicated, format!("D{d}: lifelong with bn{k} {v:.3}"));
            }
        }
        match a {
            None => c.missing.push(format!("adaptation summary for D{d}")),
            Some(a) => match a.designed_nearest {
                Some(n) => c.record(a.selection.domain == n, format!("D{d}: selected bn{} (designed bn{n})", a.selection.domain)),
                None => c.notes.push(format!("D{d}: selected bn{} (no designed nearest)", a.selection.domain)),
            },
        }
    }
    out.push(c.finish());

    let mut c = Check::new("bn-adaptation");
    for &d in &new {
        let (wa, a) = cell(&names.adapted(d), d, &bn_label(d));
        let (wb, b) = cell(&names.dedicated(d), d, &bn_label(d));
        if let (Some(a), Some(b)) = (c.need(wa, a), c.need(wb, b)) {
            c.record(a >= 0.9 * b, format!("D{d}: adapted {a:.3} vs dedicated {b:.3}"));
        }
    }
    out.push(c.finish());

    let mut c = Check::new("finetune-forgetting");
    for &d in &new {
        let (wa, before) = cell(&names.shared(), d, &s);
        let (wb, after) = cell(&names.finetuned(d), d, &s);
        if let (Some(before), Some(after)) = (c.need(wa, before), c.need(wb, after)) {
            c.record(after - before >= 0.2, format!("D{d}: {before:.3} -> {after:.3}"));
        }
        let mut worst: Option<(DomainId, f64)> = None;
        for &k in &initial {
            let (wa, before) = cell(&names.shared(), k, &s);
            let (wb, after) = cell(&names.finetuned(d), k, &s);
            if let (Some(before), Some(after)) = (c.need(wa, before), c.need(wb, after)) {
                if worst.is_none_or(|w| before - after > w.1) {
                    worst = Some((k, before - after));
                }
            }
        }
        if let Some((k, drop)) = worst {
            c.record(drop >= 0.1, format!("after ft{d} D{k} drops {drop:.3}"));
        }
    }
    out.push(c.finish());

    let mut c = Check::new("histeq-insufficient");
    for &d in &new {
        let base = c.need(format!("{}/D{d}/s", names.shared()), t.get(&names.shared(), &test_label(d, false), &s));
        let he = c.need(format!("{}/D{d}-histeq/s", names.shared()), t.get(&names.shared(), &test_label(d, true), &s));
        let (w, adapted) = cell(&names.adapted(d), d, &bn_label(d));
        let adapted = c.need(w, adapted);
        if let (Some(base), Some(he), Some(ad)) = (base, he, adapted) {
            c.record(he - base < ad - base, format!("D{d}: shared {base:.3}, histeq {he:.3}, adapted {ad:.3}"));
        }
    }
    out.push(c.finish());

    let mut c = Check::new("persistence-and-footprint");
    for (d, a) in new.iter().zip(adapted.iter().chain(finetuned)) {
        if let Some(a) = a {
            c.record(a.checkpoint_round_trip_exact, format!("{} round trip exact {}", a.name, a.checkpoint_round_trip_exact));
        } else {
            c.missing.push(format!("adaptation summary for D{d}"));
        }
    }
    let frac = footprint.bn_fraction();
    c.record(frac < 0.01, format!("default architecture: one BN set is {:.3}% of shared weights", 100.0 * frac));
    out.push(c.finish());
    out
}

fn gray_labels(labels: &[u8], k: usize) -> Vec<u8> {
    let step = 255 / (k.max(2) - 1);
    labels.iter().map(|&l| (l as usize * step).min(255) as u8).collect()
}

fn gray_image(image: &[f32]) -> Vec<u8> {
    let max = image.iter().copied().fold(0.0f32, f32::max).max(1e-6);
    image.iter().map(|&v| (v / max * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

pub fn pgm(size: [usize; 2], pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", size[1], size[0]).into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn predict_one(net: &SegNet<Real>, s: &LabelledSlice, bn: DomainId) -> Result<Vec<u8>> {
    Ok(predict_slices(net, &[s], bn)?.remove(0))
}

fn overlays(cfg: &ExperimentConfig, run: &RunDir, adapted: &[Option<AdaptSummary>], dir: &Path) -> Result<()> {
    let names = Names::new(cfg);
    let k = cfg.network.num_classes;
    let load = |name: &str| if run.checkpoint(name).exists() { load_net(run, name).map(Some) } else { Ok(None) };
    let lifelong = load(&names.lifelong())?;
    let new = cfg.domains_with(DomainRole::New);
    for spec in &cfg.benchmark.domains {
        let d = DomainId(spec.id);
        let ds = load_dataset(cfg, run, d)?;
        let s = overlay_slice(cfg, &ds, d);
        let mut panels: Vec<(&str, Vec<u8>)> = vec![("input", gray_image(&s.image))];
        match spec.role {
            DomainRole::Initial => {
                if let Some(net) = &lifelong {
                    panels.push(("lifelong", gray_labels(&predict_one(net, s, d)?, k)));
                }
            }
            DomainRole::New => {
                let summary = new.iter().position(|&n| n == d).and_then(|i| adapted[i].as_ref());
                if let (Some(net), Some(a)) = (&lifelong, summary) {
                    panels.push(("before-adaptation", gray_labels(&predict_one(net, s, a.selection.domain)?, k)));
                }
                if let Some(net) = load(&names.adapted(d))? {
                    panels.push(("adapted", gray_labels(&predict_one(&net, s, d)?, k)));
                }
            }
        }
        if let Some(net) = load(&names.dedicated(d))? {
            panels.push(("dedicated", gray_labels(&predict_one(&net, s, d)?, k)));
        }
        panels.push(("truth", gray_labels(&s.labels, k)));
        for (panel, pixels) in panels {
            write_file(&dir.join(format!("D{d}_{panel}.pgm")), pgm(s.size, &pixels))?;
        }
    }
    Ok(())
}

fn summary_text(cfg: &ExperimentConfig, cells: &[Cell], verdicts: &[Verdict], missing: &[String]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<14} {:<12} {:<5} {}", "network", "test", "bn", (1..cfg.network.num_classes).map(|k| format!("{:>6}", format!("c{k}"))).collect::<String>() + "    avg");
    for c in cells {
        let dice: String = c.dice.iter().map(|v| format!("{v:>6.3}")).collect();
        let _ = writeln!(out, "{:<14} {:<12} {:<5} {dice} {:>6.3}", c.network, c.test, c.bn, c.avg);
    }
    if !missing.is_empty() {
        let _ = writeln!(out, "\nnot evaluated: {}", missing.join(", "));
    }
    let _ = writeln!(out);
    for v in verdicts {
        let status = match v.status {
            VerdictStatus::Pass => "PASS",
            VerdictStatus::Fail => "FAIL",
            VerdictStatus::NotEvaluable => "NOT EVALUABLE",
        };
        let _ = writeln!(out, "{status:<13} {:<27} {}", v.id, v.detail);
    }
    out
}

/// Writes the report files and returns the verdicts.
pub fn report(cfg: &ExperimentConfig, run: &RunDir) -> Result<ReportOutcome> {
    cfg.validate()?;
    let eval: EvalOutput = read_json(&run.cells())?;
    let names = Names::new(cfg);
    let new = cfg.domains_with(DomainRole::New);
    let summary = |name: String| -> Result<Option<AdaptSummary>> {
        let p = run.adapt_summary(&name);
        if p.exists() {
            read_json(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let adapted: Vec<Option<AdaptSummary>> = new.iter().map(|&d| summary(names.adapted(d))).collect::<Result<_>>()?;
    let finetuned: Vec<Option<AdaptSummary>> = new.iter().map(|&d| summary(names.finetuned(d))).collect::<Result<_>>()?;
    let default_net = SegNet::<Real>::build(SegNetConfig::default(), &[DomainId(1)], 0)?;
    let footprint = Footprint::of(&default_net);
    let verdicts = verdicts(cfg, &eval.cells, &adapted, &finetuned, &footprint);
    let dir = run.report_dir();
    let k = cfg.network.num_classes;
    for format in &cfg.report.formats {
        match format {
            ReportFormat::Csv => write_file(&dir.join("report.csv"), csv(&eval.cells, k)?)?,
            ReportFormat::Json => {
                #[derive(Serialize)]
                struct Doc<'a> {
                    columns: Vec<String>,
                    rows: &'a [Cell],
                    missing: &'a [String],
                    verdicts: &'a [Verdict],
                    footprint: &'a Footprint,
                }
                let doc = Doc { columns: csv_header(k), rows: &eval.cells, missing: &eval.missing, verdicts: &verdicts, footprint: &footprint };
                write_json(&dir.join("report.json"), &doc)?;
            }
        }
    }
    let status = |v: &Verdict| serde_json::to_value(v.status).ok().and_then(|s| s.as_str().map(str::to_string)).unwrap_or_default();
    let vcsv = csv_table(&["id", "status", "detail"].map(String::from), verdicts.iter().map(|v| [v.id.clone(), status(v), v.detail.clone()]))?;
    write_file(&dir.join("verdicts.csv"), vcsv)?;
    write_file(&dir.join("summary.txt"), summary_text(cfg, &eval.cells, &verdicts, &eval.missing))?;
    if cfg.report.overlays {
        overlays(cfg, run, &adapted, &dir.join("overlays"))?;
    }
    Ok(ReportOutcome { verdicts, footprint })
}
