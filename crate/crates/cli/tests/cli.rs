use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "per_class=20\nd_model=16\nlayers=1\nheads=2\ndisc_d_model=16\n";

fn discup(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_discup")).args(args).current_dir(dir).output().expect("spawn discup")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&discup(dir.path(), &["bogus"])), 1);
    assert_eq!(code(&discup(dir.path(), &["--help"])), 0);
}

#[test]
fn invalid_config_value_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = discup(dir.path(), &["gen-data", "--set", "alpha=-1", "--out", "x.tsv"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
    assert_eq!(code(&discup(dir.path(), &["gen-data", "--set", "no_such_key=3", "--out", "x.tsv"])), 1);
    assert!(!dir.path().join("x.tsv").exists());
}

#[test]
fn gen_data_honours_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), SMALL).unwrap();
    let out = discup(dir.path(), &["gen-data", "--config", "c.txt", "--out", "d.tsv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("d.tsv")).unwrap();
    assert_eq!(text.lines().count(), 40);
    let again = discup(dir.path(), &["gen-data", "--config", "c.txt", "--out", "e.tsv"]);
    assert_eq!(code(&again), 0);
    assert_eq!(text, fs::read_to_string(dir.path().join("e.tsv")).unwrap());
}

#[test]
fn train_and_tune_chain_records_alpha() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), SMALL).unwrap();
    let steps: [&[&str]; 3] = [
        &["gen-data", "--config", "c.txt", "--out", "d.tsv"],
        &["train-clm", "--config", "c.txt", "--epochs", "1", "--data", "d.tsv", "--out", "clm.ckpt"],
        &["train-disc", "--config", "c.txt", "--epochs", "1", "--data", "d.tsv", "--out", "disc.ckpt"],
    ];
    for args in steps {
        let out = discup(dir.path(), args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = discup(
        dir.path(),
        &[
            "tune-discup",
            "--config",
            "c.txt",
            "--epochs",
            "1",
            "--alpha",
            "0.005",
            "--clm",
            "clm.ckpt",
            "--disc",
            "disc.ckpt",
            "--data",
            "d.tsv",
            "--out",
            "p.ckpt",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(dir.path().join("p.ckpt.log")).unwrap();
    assert!(log.lines().next().unwrap().contains("alpha=0.005"), "{log}");
    assert!(dir.path().join("p.ckpt").exists());

    let out = discup(
        dir.path(),
        &["tune-discup", "--clm", "disc.ckpt", "--disc", "disc.ckpt", "--data", "d.tsv", "--out", "q.ckpt"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn probe_gradients_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = discup(dir.path(), &["probe-gradients", "--trials", "200"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("200/200"));
    assert!(!text.contains("FAIL"));
}
