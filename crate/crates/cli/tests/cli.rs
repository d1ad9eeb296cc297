use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml");

fn deskalign(out: &Path, args: &[&str]) -> Output {
    deskalign_with(Path::new(TINY), out, args)
}

fn deskalign_with(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deskalign"))
        .env_remove("DESKALIGN_CONFIG")
        .env_remove("DESKALIGN_SEED")
        .env_remove("DESKALIGN_OUT")
        .env_remove("DESKALIGN_THREADS")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> Vec<serde_json::Value> {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn error_kind(o: &Output) -> String {
    assert!(!o.status.success());
    let rec: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).expect("one JSON error record");
    assert!(rec["message"].as_str().is_some_and(|m| !m.is_empty()));
    rec["error"].as_str().unwrap().to_string()
}

/// Every file under `root` except manifests, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

const STAGES: [&str; 8] = ["gen-data", "sft", "build-pairs", "train-rm", "build-set", "rs", "dpo", "eval"];

#[test]
fn stage_commands_and_all_agree_byte_for_byte_across_threads() {
    let a = tempfile::tempdir().unwrap();
    for s in STAGES {
        let lines = ok(&deskalign(a.path(), &["--threads", "1", s]));
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0]["stage"], s);
        assert!(a.path().join(s).join("manifest.json").exists());
    }
    ok(&deskalign(a.path(), &["--threads", "1", "experiment", "upperbound"]));

    let b = tempfile::tempdir().unwrap();
    let lines = ok(&deskalign(b.path(), &["--threads", "3", "all"]));
    assert_eq!(lines.len(), STAGES.len());
    ok(&deskalign(b.path(), &["--threads", "3", "experiment", "upperbound"]));

    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.keys().any(|p| p.ends_with("fig_upperbound.csv")));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (p, bytes) in &sa {
        assert!(bytes == &sb[p], "{} differs", p.display());
    }
    for s in STAGES {
        let ma: serde_json::Value =
            serde_json::from_slice(&fs::read(a.path().join(s).join("manifest.json")).unwrap()).unwrap();
        let mb: serde_json::Value =
            serde_json::from_slice(&fs::read(b.path().join(s).join("manifest.json")).unwrap()).unwrap();
        assert_eq!(ma["run_id"], mb["run_id"]);
        assert_eq!(ma["outputs"], mb["outputs"]);
    }

    // Completed stages are never overwritten; `all` skips them.
    assert_eq!(error_kind(&deskalign(a.path(), &["sft"])), "already_complete");
    assert!(ok(&deskalign(a.path(), &["all"])).is_empty());

    let pairs = a.path().join("build-pairs/pairs.jsonl");
    let mut text = fs::read(&pairs).unwrap();
    text.push(b'\n');
    fs::write(&pairs, text).unwrap();
    fs::remove_dir_all(a.path().join("train-rm")).unwrap();
    assert_eq!(error_kind(&deskalign(a.path(), &["train-rm"])), "digest_mismatch");
}

#[test]
fn out_of_order_stage_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(error_kind(&deskalign(d.path(), &["dpo"])), "stage_order");
    assert_eq!(error_kind(&deskalign(d.path(), &["experiment", "reject_selection"])), "stage_order");
    assert!(!d.path().join("dpo").exists());
}

#[test]
fn locked_run_directory_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join(".lock"), b"").unwrap();
    assert_eq!(error_kind(&deskalign(d.path(), &["gen-data"])), "locked");
}

#[test]
fn invalid_configs_produce_config_errors() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.toml");
    for text in ["[dpo]\nbeta = -1.0\n", "[sft]\nnot_a_key = 1\n", "seed = [1]\n", "[data\n"] {
        fs::write(&bad, text).unwrap();
        let o = deskalign_with(&bad, d.path(), &["gen-data"]);
        assert_eq!(error_kind(&o), "config", "{text}");
    }
    let o = deskalign_with(&d.path().join("missing.toml"), d.path(), &["gen-data"]);
    assert_eq!(error_kind(&o), "io");
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = deskalign(d.path(), &["experiment", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data_scale"));
}

fn shown_seed(o: &Output) -> u64 {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout.clone()).unwrap();
    let line = text.lines().find(|l| l.starts_with("seed = ")).unwrap();
    line["seed = ".len()..].trim_matches('"').parse().unwrap()
}

#[test]
fn flag_beats_env_beats_config_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    fs::write(&cfg, "seed = 5\n").unwrap();
    let run = |env_seed: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_deskalign"));
        c.env_remove("DESKALIGN_SEED").env("DESKALIGN_CONFIG", &cfg);
        if let Some(s) = env_seed {
            c.env("DESKALIGN_SEED", s);
        }
        c.arg("show-config");
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        c.output().unwrap()
    };
    assert_eq!(shown_seed(&run(None, None)), 5);
    assert_eq!(shown_seed(&run(Some("6"), None)), 6);
    assert_eq!(shown_seed(&run(Some("6"), Some("7"))), 7);
    assert_eq!(shown_seed(&run(None, Some("18446744073709551615"))), u64::MAX);

    let o = Command::new(env!("CARGO_BIN_EXE_deskalign"))
        .env_remove("DESKALIGN_CONFIG")
        .env_remove("DESKALIGN_SEED")
        .arg("show-config")
        .output()
        .unwrap();
    assert_eq!(shown_seed(&o), 0);
}
