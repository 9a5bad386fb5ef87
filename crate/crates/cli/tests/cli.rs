use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn soapopt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soapopt")).args(args).current_dir(dir).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    for f in ["dialogues.csv", "lexicon.tsv", "mock_script.json", "pipeline.toml"] {
        std::fs::copy(fixtures().join(f), tmp.path().join(f)).unwrap();
    }
    tmp
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(soapopt(tmp.path(), &["optimize"]).status.code(), Some(2));
    assert_eq!(soapopt(tmp.path(), &["optimize", "--config", "x.toml", "--bogus"]).status.code(), Some(2));
    assert_eq!(soapopt(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(soapopt(tmp.path(), &["optimize", "--config", "x.toml", "--parallel-sections", "0"]).status.code(), Some(2));
}

#[test]
fn help_and_version() {
    let tmp = tempfile::tempdir().unwrap();
    let v = soapopt(tmp.path(), &["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&v.stdout).trim(), format!("soapopt {}", env!("CARGO_PKG_VERSION")));
    let h = soapopt(tmp.path(), &["optimize", "--help"]);
    assert_eq!(h.status.code(), Some(0));
    let text = String::from_utf8_lossy(&h.stdout);
    for flag in ["--config", "--sections", "--parallel-sections"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    let s = String::from_utf8_lossy(&soapopt(tmp.path(), &["serve", "--help"]).stdout).into_owned();
    for flag in ["--run", "--port", "--unblinded", "--ui-dir", "--reviewer"] {
        assert!(s.contains(flag), "{flag} missing from serve help");
    }
}

#[test]
fn config_errors_name_the_key() {
    let tmp = workspace();
    let cfg = std::fs::read_to_string(tmp.path().join("pipeline.toml")).unwrap();
    std::fs::write(tmp.path().join("no_seed.toml"), cfg.lines().filter(|l| !l.starts_with("seed")).collect::<Vec<_>>().join("\n")).unwrap();
    let o = soapopt(tmp.path(), &["optimize", "--config", "no_seed.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));

    std::fs::write(tmp.path().join("bad_lexicon.toml"), cfg.replace("lexicon.tsv", "missing.tsv")).unwrap();
    let o = soapopt(tmp.path(), &["optimize", "--config", "bad_lexicon.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lexicon"), "{}", stderr(&o));

    let o = soapopt(tmp.path(), &["optimize", "--config", "absent.toml"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn section_filter_and_missing_prompt() {
    let tmp = workspace();
    let o = soapopt(tmp.path(), &["optimize", "--config", "pipeline.toml", "--sections", "cc,GENHX"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let traces: Vec<String> = std::fs::read_dir(tmp.path().join("run/traces"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let mut traces = traces;
    traces.sort();
    assert_eq!(traces, vec!["CC.json", "GENHX.json"]);

    let o = soapopt(tmp.path(), &["optimize", "--config", "pipeline.toml", "--sections", "PLAN"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("PLAN"));

    // apo.json only covers the optimized sections.
    let o = soapopt(tmp.path(), &["evaluate", "--run", "run", "--group", "prompts/apo.json", "--mentee", "mock-mentee"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ALLERGY"), "{}", stderr(&o));
}

#[test]
fn ingest_prints_the_inventory_and_report_needs_results() {
    let tmp = workspace();
    let o = soapopt(tmp.path(), &["ingest", "dialogues.csv", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("CC\t15\t10"));
    assert!(out.contains("total\t60\t40"));

    let o = soapopt(tmp.path(), &["ingest", "size_gate.csv", "--out", "gate"]);
    assert_eq!(o.status.code(), Some(1), "missing file is a domain error");
    std::fs::copy(fixtures().join("size_gate.csv"), tmp.path().join("size_gate.csv")).unwrap();
    let o = soapopt(tmp.path(), &["ingest", "size_gate.csv", "--out", "gate"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("dropped\tPLAN\t9"), "{out}");

    let o = soapopt(tmp.path(), &["report", "--run", "run"]);
    assert_eq!(o.status.code(), Some(1));
}
