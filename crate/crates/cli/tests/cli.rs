//! End-to-end runs of the binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mmkg(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mmkg"));
    cmd.args(args).env_remove("SNAG_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL_EA: &str = "run.task = ea
synth_ea.entities = 60
synth_ea.triples = 200
ea.dim = 16
ea.ffn_dim = 32
ea.epochs = 10
ea.iterative_epochs = 10
ea.batch_size = 512
ea.lr = 0.005
data.relation_dim = 12
data.attribute_dim = 40
";

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

#[test]
fn gen_train_eval_alignment_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run").display().to_string();
    let base = write(dir.path(), "base.cfg", SMALL_EA);
    ok(&mmkg(&["gen", "-c", &base, "--out", &out], &[]));
    let data = format!("{out}/data");
    assert!(Path::new(&data).join("kg1/triples.tsv").exists());
    let cfg = write(
        dir.path(),
        "files.cfg",
        &format!("{SMALL_EA}data.source = files\ndata.dir = {data}\n"),
    );
    ok(&mmkg(&["train-ea", "-c", &cfg, "--out", &out, "--iterative"], &[]));
    ok(&mmkg(&["eval-ea", "--out", &out], &[]));
    let trained = fs::read_to_string(format!("{out}/metrics.csv")).unwrap();
    let evaluated = fs::read_to_string(format!("{out}/eval_metrics.csv")).unwrap();
    assert_eq!(trained, evaluated);
    assert!(Path::new(&out).join("promotions.tsv").exists());
    assert!(fs::read_to_string(format!("{out}/manifest.cfg")).unwrap().contains("ea.iterative = true"));
}

#[test]
fn completion_round_trip_and_manifest_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "k.cfg",
        "kgc.dim = 8\nkgc.ffn_dim = 16\nkgc.epochs = 5\nkgc.batch_size = 16\nkgc.negatives = 4\nsynth_kgc.test_fraction = 0.2\n",
    );
    let a = dir.path().join("a").display().to_string();
    let b = dir.path().join("b").display().to_string();
    ok(&mmkg(&["train-kgc", "-c", &cfg, "--out", &a], &[]));
    ok(&mmkg(&["eval-kgc", "--out", &a], &[]));
    assert_eq!(
        fs::read_to_string(format!("{a}/metrics.csv")).unwrap(),
        fs::read_to_string(format!("{a}/eval_metrics.csv")).unwrap()
    );
    ok(&mmkg(&["train-kgc", "-c", &format!("{a}/manifest.cfg"), "--out", &b], &[]));
    for f in ["metrics.csv", "train_trace.csv"] {
        assert_eq!(fs::read(format!("{a}/{f}")).unwrap(), fs::read(format!("{b}/{f}")).unwrap(), "{f}");
    }
}

#[test]
fn seed_env_var_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    ok(&mmkg(&["gen", "--out", &out], &[("SNAG_SEED", "17")]));
    let manifest = fs::read_to_string(format!("{out}/manifest.cfg")).unwrap();
    assert!(manifest.contains("run.seed = 17"), "{manifest}");
    assert!(!mmkg(&["gen", "--out", &out], &[("SNAG_SEED", "x")]).status.success());
}

#[test]
fn bad_configs_exit_nonzero_with_the_key_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let typo = write(dir.path(), "typo.cfg", "kgc.epoch = 3\n");
    let res = mmkg(&["train-kgc", "-c", &typo, "--out", &out], &[]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("kgc.epoch"));
    let files = write(dir.path(), "files.cfg", "data.source = files\n");
    let res = mmkg(&["train-kgc", "-c", &files, "--out", &out], &[]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("data.dir"));
    assert!(!mmkg(&["eval-ea", "--out", &out], &[]).status.success());
}

#[test]
fn ablation_writes_every_grid_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let cfg = write(
        dir.path(),
        "a.cfg",
        "kgc.dim = 4\nkgc.ffn_dim = 8\nkgc.epochs = 2\nkgc.negatives = 2\nkgc.batch_size = 64\n",
    );
    ok(&mmkg(&["ablate", "-c", &cfg, "--out", &out], &[]));
    let csv = fs::read_to_string(format!("{out}/ablation.csv")).unwrap();
    for row in ["full,", "rho=0.3 eps=0.6", "rho=0.7 eps=0.2", "fusion fc", "fusion ts", "only h^g", "dropout p=0.4", "no noise"] {
        assert!(csv.contains(row), "missing {row}:\n{csv}");
    }
    assert_eq!(csv.lines().count(), 1 + 1 + 6 + 4 + 1 + 4 + 1);
}
