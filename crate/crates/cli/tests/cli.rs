use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use bsrnn::audio::{read_wav, write_wav};
use bsrnn::datagen::{write_synthetic_dataset, Split};
use bsrnn::{Source, Waveform};
use tempfile::TempDir;

const TOY_CONFIG: &str = r#"
scheme_file = "schemes.toml"
sample_rate = 4000
label = "toy"

[frame]
window_size = 256
hop = 64

[model]
latent_dim = 8
depth = 1

[train]
batch_size = 2
reference_batch = 2
max_epochs = 2
patience = 5

[data]
chunk_s = 1.0
regime = "umx"
epoch_size = 4

[inference]
method = "fader"

[inference.ola]
segment_s = 1.0
hop_s = 0.25

[inference.fader]
segment_s = 2.0
overlap = 0.1
"#;

const TOY_SCHEMES: &str = r#"
[vocals]
ranges = [[2000, 250]]
[bass]
ranges = [[2000, 250]]
[drums]
ranges = [[2000, 250]]
[other]
ranges = [[2000, 250]]
"#;

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    config: PathBuf,
    runs: PathBuf,
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bsrnn"));
    c.env_remove("BSRNN_DATASET_ROOT").env("RUST_LOG", "warn");
    c
}

fn run(c: &mut Command) -> Output {
    let out = c.output().expect("spawn bsrnn");
    eprintln!("stdout:\n{}", String::from_utf8_lossy(&out.stdout));
    eprintln!("stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// One dataset plus a trained run for every source, shared by the tests.
fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().join("data");
        write_synthetic_dataset(&root, [(Split::Train, 2), (Split::Valid, 1), (Split::Test, 1)], 4.0, 4000, 7).unwrap();
        let config = dir.path().join("toy.toml");
        std::fs::write(&config, TOY_CONFIG).unwrap();
        std::fs::write(dir.path().join("schemes.toml"), TOY_SCHEMES).unwrap();
        let runs = dir.path().join("runs");
        let out = run(bin()
            .args(["train", "--source", "all", "-c"])
            .arg(&config)
            .arg("--dataset-root")
            .arg(&root)
            .arg("--set")
            .arg(format!("output_dir=\"{}\"", runs.display())));
        assert_eq!(code(&out), 0, "toy training failed");
        Fixture { _dir: dir, root, config, runs }
    })
}

fn checkpoint(source: Source) -> PathBuf {
    fixture().runs.join(format!("toy-{source}-seed0")).join("checkpoints").join("best.ckpt")
}

fn test_song(root: &Path) -> PathBuf {
    let dir = root.join("test");
    let mut songs: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    songs.sort();
    songs.remove(0)
}

#[test]
fn training_writes_checkpoints_reports_and_snapshot() {
    let f = fixture();
    for s in Source::ALL {
        assert!(checkpoint(s).is_file(), "missing {}", checkpoint(s).display());
        let run_dir = f.runs.join(format!("toy-{s}-seed0"));
        assert!(run_dir.join("run_report.json").is_file());
        let snap = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
        assert!(snap.contains("sample_rate = 4000"));
    }
    assert_eq!(std::fs::read_to_string(f.runs.join("runs.jsonl")).unwrap().lines().count(), 4);
}

#[test]
fn patience_flag_reaches_the_resolved_config() {
    let f = fixture();
    let out = run(bin().args(["train", "-s", "vocals", "--patience", "30", "--print-config", "-c"]).arg(&f.config));
    assert_eq!(code(&out), 0);
    let cfg: toml::Table = toml::from_str(&stdout(&out)).unwrap();
    assert_eq!(cfg["train"]["patience"].as_integer(), Some(30));
    assert_eq!(cfg["model"]["latent_dim"].as_integer(), Some(8));
}

#[test]
fn bad_input_exits_with_one() {
    let f = fixture();
    let out = run(bin().args(["train", "-s", "kazoo", "-c"]).arg(&f.config).arg("--dataset-root").arg(&f.root));
    assert_eq!(code(&out), 1);
    let out = run(bin().args(["train", "-s", "vocals", "--set", "train.patiense=3", "--print-config"]));
    assert_eq!(code(&out), 1);
    let out = run(bin().args(["train", "-s", "vocals", "-c"]).arg(&f.config));
    assert_eq!(code(&out), 1, "missing dataset root");
    let out = run(bin().args(["frobnicate"]));
    assert_eq!(code(&out), 1);
}

#[test]
fn dataset_root_comes_from_the_environment() {
    let f = fixture();
    let out = run(bin()
        .env("BSRNN_DATASET_ROOT", &f.root)
        .args(["train", "-s", "vocals", "--print-config", "-c"])
        .arg(&f.config));
    assert_eq!(code(&out), 0);
    let cfg: toml::Table = toml::from_str(&stdout(&out)).unwrap();
    assert_eq!(cfg["dataset_root"].as_str(), Some(f.root.to_str().unwrap()));
}

#[test]
fn separate_writes_four_stems_of_input_length() {
    let f = fixture();
    let mixture = test_song(&f.root).join("mixture.wav");
    let len = read_wav::<f32>(&mixture).unwrap().len();
    for method in [vec!["--method", "ola", "--hop", "0.5"], vec!["--method", "fader"]] {
        let out_dir = TempDir::new().unwrap();
        let mut cmd = bin();
        cmd.arg("separate").arg("-c").arg(&f.config).args(&method);
        for s in Source::ALL {
            cmd.arg("--checkpoint").arg(checkpoint(s));
        }
        let out = run(cmd.arg("-o").arg(out_dir.path()).arg(&mixture));
        assert_eq!(code(&out), 0);
        for s in Source::ALL {
            let est = read_wav::<f32>(&out_dir.path().join("mixture").join(format!("{s}.wav"))).unwrap();
            assert_eq!(est.len(), len, "{s} with {method:?}");
            assert_eq!(est.channels(), 2);
        }
    }
}

#[test]
fn separate_with_missing_checkpoint_exits_with_one() {
    let f = fixture();
    let out_dir = TempDir::new().unwrap();
    let out = run(bin()
        .args(["separate", "--checkpoint", "/nonexistent/vocals.ckpt", "-o"])
        .arg(out_dir.path())
        .arg(test_song(&f.root).join("mixture.wav")));
    assert_eq!(code(&out), 1);
}

#[test]
fn evaluate_scores_known_estimates() {
    let f = fixture();
    let est_dir = TempDir::new().unwrap();
    let song = test_song(&f.root);
    let id = song.file_name().unwrap().to_str().unwrap().to_string();
    for s in Source::ALL {
        let reference = read_wav::<f64>(&song.join(format!("{s}.wav"))).unwrap();
        let half = Waveform::new(reference.samples.mapv(|x| 0.5 * x), reference.sample_rate).unwrap();
        write_wav(&est_dir.path().join(&id).join(format!("{s}.wav")), &half).unwrap();
    }
    let report = est_dir.path().join("eval").join("report.json");
    let out = run(bin()
        .args(["evaluate", "--split", "test", "--estimates"])
        .arg(est_dir.path())
        .arg("--dataset-root")
        .arg(&f.root)
        .arg("-o")
        .arg(&report));
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("uSDR") && text.contains("cSDR"), "{text}");
    assert!(text.contains("6.02"), "{text}");
    assert!(report.is_file() && report.with_extension("txt").is_file());
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let mut found = 0;
    let mut stack = vec![&json];
    while let Some(v) = stack.pop() {
        match v {
            serde_json::Value::Number(n) if (n.as_f64().unwrap() - 6.0206).abs() < 1e-3 => found += 1,
            serde_json::Value::Array(a) => stack.extend(a),
            serde_json::Value::Object(o) => stack.extend(o.values()),
            _ => {}
        }
    }
    assert!(found >= 8, "expected 6.0206 dB per source and metric, found {found}");
}

#[test]
fn evaluate_with_empty_estimates_exits_with_one() {
    let f = fixture();
    let empty = TempDir::new().unwrap();
    let out = run(bin().args(["evaluate", "--estimates"]).arg(empty.path()).arg("--dataset-root").arg(&f.root));
    assert_eq!(code(&out), 1);
}

#[test]
fn evaluate_runs_checkpoints_on_a_split() {
    let f = fixture();
    let out = run(bin()
        .args(["evaluate", "--split", "test", "-c"])
        .arg(&f.config)
        .arg("--dataset-root")
        .arg(&f.root)
        .arg("--checkpoint")
        .arg(checkpoint(Source::Bass)));
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("bass"));
}

#[test]
fn report_prints_table_and_pareto_front() {
    let f = fixture();
    let out_file = f.runs.join("summary.txt");
    let out = run(bin().arg("report").arg(&f.runs).arg("-o").arg(&out_file));
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("Pareto front"), "{text}");
    for s in Source::ALL {
        assert!(text.contains(s.as_str()), "{s} missing from\n{text}");
    }
    assert_eq!(std::fs::read_to_string(out_file).unwrap(), text);
    let out = run(bin().arg("report").arg(f.runs.join("runs.jsonl")));
    assert_eq!(code(&out), 0);
    let out = run(bin().args(["report", "/nonexistent/runs"]));
    assert_eq!(code(&out), 1);
}
