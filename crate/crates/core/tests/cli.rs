use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 4

[data]
train_mocap = 2
train_real = 2
test_mocap = 2
test_real = 2
frames = 12
points = 16

[train]
iterations = 3
batch_mocap = 4
batch_real = 4
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xrmbt"))
        .args(args)
        .current_dir(dir)
        .env_remove("XRMBT_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn snapshot(dir: &Path, root: &Path, into: &mut BTreeMap<String, Vec<u8>>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            snapshot(&p, root, into);
        } else {
            into.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
        }
    }
}

/// Every subcommand once, returning all files written and everything printed.
fn session(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::write(dir.join("run.toml"), CONFIG).unwrap();
    let mut printed = Vec::new();
    printed.extend(ok(dir, &["gen-data", "-c", "run.toml", "-o", "data"]));
    printed.extend(ok(dir, &["train", "-c", "run.toml", "--data", "data", "-o", "m", "--mode", "mpe_spc_decoder_spcloss"]));
    printed.extend(ok(dir, &["eval", "-c", "run.toml", "--data", "data", "--checkpoint", "m/model.ckpt", "-o", "eval_mocap.csv"]));
    printed.extend(ok(dir, &["eval", "-c", "run.toml", "--data", "data", "--checkpoint", "m/model.ckpt", "--split", "test_real", "-o", "eval_real.csv"]));
    printed.extend(ok(dir, &["ablate", "-c", "run.toml", "--data", "data", "-o", "ladder", "--iterations", "2"]));
    printed.extend(ok(dir, &["export-ply", "--sequence", "data/test_mocap/00000.seq", "--frame", "3", "-o", "gt.ply"]));
    printed.extend(ok(dir, &["export-ply", "--sequence", "data/test_real/00001.seq", "--checkpoint", "m/model.ckpt", "--world", "-o", "pred.ply"]));
    printed.extend(ok(dir, &["export-pose", "-c", "run.toml", "--sequence", "data/test_mocap/00001.seq", "--checkpoint", "m/model.ckpt", "-o", "pose.csv"]));
    let mut files = BTreeMap::new();
    snapshot(dir, dir, &mut files);
    files.insert("<stdout>".into(), printed);
    files
}

#[test]
fn repeated_runs_are_bit_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (session(a.path()), session(b.path()));
    for name in ["m/model.ckpt", "m/log.csv", "eval_real.csv", "ladder/report_test_mocap.csv", "pose.csv", "pred.ply"] {
        assert!(fa.contains_key(name), "{name} missing; have {:?}", fa.keys().collect::<Vec<_>>());
    }
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{name} differs between runs");
    }
}

#[test]
fn seed_sources_take_precedence_in_order() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let cfg = |extra: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_xrmbt"));
        c.current_dir(dir.path()).env_remove("XRMBT_SEED");
        if let Some(v) = env {
            c.env("XRMBT_SEED", v);
        }
        let out = c.args(["gen-data", "-c", "run.toml", "-o", "d"]).args(extra).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read_to_string(dir.path().join("d/config.toml")).unwrap()
    };
    assert!(cfg(&[], None).contains("seed = 4"));
    assert!(cfg(&[], Some("9")).contains("seed = 9"));
    assert!(cfg(&["--seed", "12"], Some("9")).contains("seed = 12"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[train]\nlr = -1.0\n").unwrap();
    assert_eq!(run(d, &["gen-data", "-c", "bad.toml", "-o", "x"]).status.code(), Some(2));
    assert_eq!(run(d, &["gen-data", "-c", "missing.toml", "-o", "x"]).status.code(), Some(2));
    let env_bad = Command::new(env!("CARGO_BIN_EXE_xrmbt"))
        .current_dir(d)
        .env("XRMBT_SEED", "abc")
        .args(["gen-data", "-o", "x"])
        .output()
        .unwrap();
    assert_eq!(env_bad.status.code(), Some(2));
    assert_ne!(run(d, &["eval", "--data", "nowhere", "--checkpoint", "none.ckpt"]).status.code(), Some(0));

    fs::write(d.join("run.toml"), CONFIG).unwrap();
    ok(d, &["gen-data", "-c", "run.toml", "-o", "data"]);
    fs::write(d.join("explode.toml"), format!("{CONFIG}lr = 1e30\n")).unwrap();
    let out = run(d, &["train", "-c", "explode.toml", "--data", "data", "-o", "boom", "--mode", "mpe"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
