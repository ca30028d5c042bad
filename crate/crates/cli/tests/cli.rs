use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lifelong-bn");

fn micro_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.toml")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(BIN).args(args).arg("--out").arg(out).env_remove("LIFELONG_BN_OUT").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(tree(&path));
        } else {
            out.insert(path.clone(), std::fs::read(&path).unwrap());
        }
    }
    out
}

fn pipeline(out: &Path) {
    let cfg = micro_config();
    let o = run(&["gen", "--config", cfg.to_str().unwrap()], out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for stage in ["train", "adapt", "eval"] {
        let o = run(&[stage], out);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn gen_creates_missing_directories_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a/b/run");
    let cfg = micro_config();
    assert_eq!(code(&run(&["gen", "--config", cfg.to_str().unwrap()], &out)), 0);
    let first = tree(&out);
    assert!(first.keys().any(|p| p.ends_with("datasets/D5.lbnd")));
    assert!(first.keys().any(|p| p.ends_with("config.toml")));
    assert_eq!(code(&run(&["gen", "--config", cfg.to_str().unwrap()], &out)), 0);
    assert_eq!(tree(&out), first);
}

#[test]
fn invalid_config_exits_one_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[[benchmark.domains]]\nid = 1\nrole = \"initial\"\ntransform = { gamma = -1.0 }\n").unwrap();
    let o = run(&["gen", "--config", cfg.to_str().unwrap()], &dir.path().join("run"));
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma"), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["gen", "--bogus"], &dir.path().join("run"));
    assert_eq!(code(&o), 1);
    let o = run(&["gen", "--config", "/definitely/not/here.toml"], &dir.path().join("run"));
    assert_ne!(code(&o), 0);
}

#[test]
fn micro_pipeline_report_matches_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let o = run(&["report"], dir.path());
    // too few steps for the verdicts to hold: either outcome is a valid exit
    assert!([0, 2].contains(&code(&o)), "{}", String::from_utf8_lossy(&o.stderr));
    let report = dir.path().join("report");
    let mut rdr = csv::Reader::from_path(report.join("report.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["network", "test", "bn", "c1", "c2", "c3", "avg"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    // 5 dedicated, shared on 5 plus 2 histeq, lifelong on 3 + 2x3,
    // each adapted net on 4, each fine-tuned net on 5
    assert_eq!(rows.len(), 5 + 7 + 9 + 2 * 4 + 2 * 5);
    for r in &rows {
        for v in r.iter().skip(3) {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), rows.len());
    assert_eq!(json["verdicts"].as_array().unwrap().len(), 7);
    assert!(report.join("overlays/D4_adapted.pgm").exists());

    // a second report over the same cells is byte-identical
    let before = tree(&report);
    run(&["report"], dir.path());
    assert_eq!(tree(&report), before);

    // losing an adapted checkpoint leaves cells missing: eval exits 2 and the
    // dependent verdicts become not-evaluable
    std::fs::remove_file(dir.path().join("checkpoints/N123bn+4.ckpt")).unwrap();
    assert_eq!(code(&run(&["eval"], dir.path())), 2);
    assert_eq!(code(&run(&["report"], dir.path())), 2);
    let mut rdr = csv::Reader::from_path(report.join("verdicts.csv")).unwrap();
    let status: BTreeMap<String, String> = rdr.records().map(|r| r.unwrap()).map(|r| (r[0].to_string(), r[1].to_string())).collect();
    assert_eq!(status["bn-adaptation"], "not_evaluable");
    assert_eq!(status["histeq-insufficient"], "not_evaluable");
}

#[test]
fn out_root_defaults_to_the_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-env");
    let cfg = micro_config();
    let o = Command::new(BIN)
        .args(["gen", "--config", cfg.to_str().unwrap(), "--domains", "1,4"])
        .env("LIFELONG_BN_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("datasets/D1.lbnd").exists());
    assert!(out.join("datasets/D4.lbnd").exists());
    assert!(!out.join("datasets/D2.lbnd").exists());
}

#[test]
fn stages_without_inputs_report_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["train"], dir.path())), 2);
    assert_eq!(code(&run(&["report"], dir.path())), 2);
}
