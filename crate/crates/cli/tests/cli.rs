use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fernnet");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/configs")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("spawn fernnet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> (PathBuf, PathBuf) {
    let (train, test) = (dir.join("train.fds"), dir.join("test.fds"));
    let o = run(&[
        "synth",
        "--n-train",
        &n_train.to_string(),
        "--n-test",
        &n_test.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        p(&train),
        "--test-out",
        p(&test),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    (train, test)
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ta, sa) = synth(a.path(), 8, 4, 3);
    let (tb, sb) = synth(b.path(), 8, 4, 3);
    assert_eq!(std::fs::read(ta).unwrap(), std::fs::read(tb).unwrap());
    assert_eq!(std::fs::read(&sa).unwrap(), std::fs::read(sb).unwrap());
    let data = fernnet::io::read_dataset(&sa).unwrap();
    assert_eq!(data.len(), 4);
    assert_eq!(data.sample_shape(), fernnet::io::SAMPLE_SHAPE);
}

#[test]
fn train_prints_one_line_per_epoch_and_eval_reads_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = synth(dir.path(), 16, 8, 1);
    let ckpt = dir.path().join("conv.ckpt");
    let o = run(&[
        "train",
        "--config",
        p(&configs().join("vanilla.cfg")),
        "--data",
        p(&train),
        "--test-data",
        p(&test),
        "--out",
        p(&ckpt),
        "--epochs",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<_> = stdout(&o)
        .lines()
        .filter(|l| l.starts_with("epoch="))
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 2, "{}", stdout(&o));
    for key in ["train_loss=", "test_acc=", "wall_seconds="] {
        assert!(lines[0].contains(key), "{}", lines[0]);
    }
    assert!(ckpt.exists());

    let o = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&test)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("acc"), "{}", stdout(&o));
}

#[test]
fn double_precision_training_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(dir.path(), 8, 2, 5);
    let ckpt = dir.path().join("f64.ckpt");
    let o = run(&[
        "train",
        "--config",
        p(&configs().join("fern.cfg")),
        "--data",
        p(&train),
        "--out",
        p(&ckpt),
        "--epochs",
        "1",
        "--dtype",
        "f64",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c = fernnet::io::Checkpoint::load(&ckpt).unwrap();
    assert!(c
        .entries
        .iter()
        .any(|(_, e)| matches!(e, fernnet::io::Entry::F64(_))));
}

#[test]
fn missing_dataset_exits_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.fds");
    let o = run(&[
        "train",
        "--config",
        p(&configs().join("fern.cfg")),
        "--data",
        p(&missing),
        "--out",
        p(&dir.path().join("x.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.fds"), "{}", stderr(&o));
}

#[test]
fn zero_gradcheck_trials_is_a_config_error() {
    let o = run(&[
        "gradcheck",
        "--config",
        p(&configs().join("fern.cfg")),
        "--trials",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn report_lists_reference_parameter_counts_and_energy_order() {
    let cfgs: Vec<_> = ["fern.cfg", "vanilla.cfg", "binconv.cfg"]
        .iter()
        .map(|c| configs().join(c))
        .collect();
    let mut args = vec!["report"];
    for c in &cfgs {
        args.extend(["--config", p(c)]);
    }
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for n in ["trainable=37920", "trainable=79234"] {
        assert!(text.contains(n), "{text}");
    }
    assert!(text.contains("energy ordering: fern"), "{text}");

    args.push("--json");
    let o = run(&args);
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let models = json["models"].as_array().unwrap();
    assert_eq!(models.len(), 3);
    assert_eq!(models[0]["params"]["trainable"], 37920);
    assert_eq!(json["energy_ordering"][0], "fern");
}

#[test]
fn checkpoint_with_wrong_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(dir.path(), 4, 2, 9);
    let ckpt = dir.path().join("m.ckpt");
    let o = run(&[
        "train",
        "--config",
        p(&configs().join("vanilla.cfg")),
        "--data",
        p(&train),
        "--out",
        p(&ckpt),
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let o = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&train)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));
}
