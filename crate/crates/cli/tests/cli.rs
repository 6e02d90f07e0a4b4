use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshrecon"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dataset(dir: &Path) {
    let o = run(dir, &["synth", "--count", "4", "--out", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(tmp.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(run(tmp.path(), &["train-cond", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(run(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(d, &["synth", "--count", "many"]).status.code(), Some(1));
    assert_eq!(run(d, &["--threads", "0", "gradcheck"]).status.code(), Some(1));
    // --out is mandatory for commands that only write files.
    assert_eq!(run(d, &["synth"]).status.code(), Some(1));

    let o = run(d, &["shot", "--mesh", "missing.obj", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.obj"), "{}", stderr(&o));

    let o = run(d, &["eval", "--model", "nowhere", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn unknown_config_keys_are_rejected_with_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("cfg.json"), r#"{"synth": {"count": 3, "colour": "red"}}"#).unwrap();
    let o = run(d, &["synth", "--config", "cfg.json", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("cfg.json") && e.contains("colour"), "{e}");
    assert!(!d.join("x").exists());

    let o = run(d, &["synth", "--config", "absent.json", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.json"));
}

#[test]
fn invalid_values_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("w.json"), r#"{"weights": {"lambda": -1}}"#).unwrap();
    dataset(d);
    let o = run(d, &["loss", "--config", "w.json", "--pred", "data/0000.obj", "--gt", "data/0000.obj"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = run(d, &["synth", "--count", "0", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    // A batch larger than the training split cannot be filled.
    let o = run(d, &["train-cond", "--data", "data", "--epochs", "1", "--out", "t"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn print_config_shows_resolved_values_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("cfg.json"), r#"{"synth": {"count": 3}}"#).unwrap();
    let o = run(d, &["synth", "--config", "cfg.json", "--seed", "9", "--print-config", "--out", "x"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["synth"]["count"], 3);
    assert_eq!(v["synth"]["seed"], 9);
    assert_eq!(v["synth"]["image_size"], 32);
    assert_eq!(v["mode"], "coupled");
    assert!(!d.join("x").exists());

    // The printed config is itself a valid config.
    std::fs::write(d.join("again.json"), &o.stdout).unwrap();
    let o2 = run(d, &["synth", "--config", "again.json", "--print-config"]);
    assert_eq!(o.stdout, o2.stdout);
}

#[test]
fn every_subcommand_prints_a_loadable_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for cmd in ["synth", "shot", "loss", "gradcheck", "fit", "train-cond", "train-cycle", "train-enhancer", "eval", "ablate"] {
        let o = run(d, &[cmd, "--print-config"]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        let path = d.join(format!("{cmd}.json"));
        std::fs::write(&path, &o.stdout).unwrap();
        let o2 = run(d, &[cmd, "--config", path.to_str().unwrap(), "--print-config"]);
        assert_eq!(o.stdout, o2.stdout, "{cmd}");
    }
}

#[test]
fn loss_of_identical_meshes_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d);
    let o = run(d, &["loss", "--pred", "data/0001.obj", "--gt", "data/0001.obj", "--out", "l"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("l/loss.json")).unwrap()).unwrap();
    for (k, x) in v.as_object().unwrap() {
        assert!(x.as_f64().unwrap().abs() <= 1e-12, "{k} = {x}");
    }
    let o = run(d, &["loss", "--pred", "data/0000.obj", "--gt", "data/0001.obj"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["total"].as_f64().unwrap() > 0.0);
}

#[test]
fn loss_rejects_meshes_of_different_size() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d);
    let o = run(d, &["loss", "--pred", "data/0000.obj", "--gt", "data/0000_fine.obj"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gradcheck_over_tolerance_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ok = run(d, &["gradcheck", "--seeds", "1", "--filter", "sigmoid"]);
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("max rel err"));
    let bad = run(d, &["gradcheck", "--seeds", "1", "--filter", "sigmoid", "--tolerance", "1e-300"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn trained_enhancer_upsamples_to_the_fine_template() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d);
    let o = run(d, &["train-enhancer", "--data", "data", "--epochs", "2", "--out", "enh"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(d, &["upsample", "--model", "enh", "--mesh", "data/0000.obj", "--out", "up"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let fine = meshrecon::mesh::load_mesh(d.join("up/fine.obj")).unwrap();
    let template = meshrecon::mesh::load_mesh(d.join("data/0000_fine.obj")).unwrap();
    assert_eq!(fine.num_vertices(), template.num_vertices());
    assert_eq!(fine.faces(), template.faces());
}

#[test]
fn summary_is_written_next_to_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = run(d, &["fit", "--steps", "20", "--out", "f"]);
    assert!(o.status.success());
    let summary = std::fs::read_to_string(d.join("f/summary.txt")).unwrap();
    assert_eq!(summary.as_bytes(), &o.stdout[..]);
    for f in ["fit.json", "fitted.obj", "start.obj", "history.csv"] {
        assert!(d.join("f").join(f).is_file(), "{f}");
    }
}
