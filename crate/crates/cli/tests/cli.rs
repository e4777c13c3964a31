use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn debias(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debias"))
        .current_dir(dir)
        .env_remove("DEBIAS_CHECKPOINTS")
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
seed = 5

[data]
n_train = 40
n_dev = 8
n_test = 8

[encoder]
d = 16
layers = 1
heads = 2
ffn_width = 32

[classifier]
epochs = 1

[embedder]
epochs = 1

[latent.train]
epochs = 1

[decoder.train]
epochs = 1

[masker]
n_samples = 50
"#;

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), TINY).unwrap();
    dir
}

#[test]
fn lambda_out_of_range_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[latent]\nlambda = 1.5\n").unwrap();
    let o = debias(dir.path(), &["-c", "bad.toml", "synth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda"));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "sed = 1\n").unwrap();
    assert_eq!(debias(dir.path(), &["-c", "bad.toml", "train"]).status.code(), Some(1));
}

#[test]
fn missing_corpus_is_a_config_error() {
    let dir = tiny_dir();
    assert_eq!(debias(dir.path(), &["-c", "run.toml", "train"]).status.code(), Some(1));
}

#[test]
fn transfer_without_checkpoints_names_the_stage() {
    let dir = tiny_dir();
    assert!(debias(dir.path(), &["-c", "run.toml", "synth"]).status.success());
    let o = debias(dir.path(), &["-c", "run.toml", "transfer"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("style_classifier"));
}

#[test]
fn constraint_flag_requires_latent_flag() {
    let dir = tiny_dir();
    let o = debias(dir.path(), &["-c", "run.toml", "transfer", "--no-class-constraint"]);
    assert!(!o.status.success());
}

#[test]
fn synth_train_evaluate_transfer() {
    let dir = tiny_dir();
    let p = dir.path();
    assert!(debias(p, &["-c", "run.toml", "synth"]).status.success());
    for f in ["train.tsv", "dev.tsv", "test.tsv", "vocab.json", "test.gold"] {
        assert!(p.join("data").join(f).is_file(), "{f}");
    }

    let first = debias(p, &["-c", "run.toml", "train"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(stdout(&first).matches(" trained ").count(), 10);
    let ckpts = p.join("checkpoints");
    assert!(ckpts.join("run_config.toml").is_file());
    let stamp = fs::metadata(ckpts.join("decoder.ckpt")).unwrap().modified().unwrap();

    let second = debias(p, &["-c", "run.toml", "train"]);
    assert!(second.status.success());
    assert_eq!(stdout(&second).matches(" reused ").count(), 10);
    assert_eq!(fs::metadata(ckpts.join("decoder.ckpt")).unwrap().modified().unwrap(), stamp);

    let ev = debias(p, &["-c", "run.toml", "evaluate"]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let table = stdout(&ev);
    for row in ["original", "full", "no-latent", "no-latent-no-constraint"] {
        assert!(table.lines().any(|l| l.starts_with(&format!("{row} "))), "{row}");
    }
    let kv = fs::read_to_string(p.join("reports/metrics.txt")).unwrap();
    assert!(kv.contains("transfer_accuracy"));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("reports/metrics.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 4);

    let tr = debias(p, &["-c", "run.toml", "transfer", "--no-latent", "--output", "out/transferred.tsv"]);
    assert!(tr.status.success());
    let lines = fs::read_to_string(p.join("out/transferred.tsv")).unwrap();
    assert_eq!(lines.lines().count(), 16);
    for l in lines.lines() {
        let cols: Vec<&str> = l.split('\t').collect();
        assert_eq!(cols.len(), 3);
        assert_eq!(cols[0].split(' ').count(), cols[1].split(' ').count());
        cols[2].parse::<usize>().unwrap();
    }

    let ex = debias(p, &["-c", "run.toml", "explain", "--input", "data/dev.tsv"]);
    assert!(ex.status.success());
    assert!(stdout(&ex).lines().filter(|l| !l.is_empty()).all(|l| l.split('\t').count() == 3));
}

#[test]
fn checkpoint_dir_from_environment() {
    let dir = tiny_dir();
    let p = dir.path();
    assert!(debias(p, &["-c", "run.toml", "synth"]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_debias"))
        .current_dir(p)
        .env("DEBIAS_CHECKPOINTS", p.join("elsewhere"))
        .args(["-c", "run.toml", "transfer"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    let o = Command::new(env!("CARGO_BIN_EXE_debias"))
        .current_dir(p)
        .env("DEBIAS_CHECKPOINTS", p.join("elsewhere"))
        .args(["-c", "run.toml", "train"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(p.join("elsewhere/decoder.ckpt").is_file());
    assert!(!p.join("checkpoints").exists());
}
