use std::path::Path;
use std::process::{Command, Output};

use twm::align::{load_pairs, loss_history_csv, save_pairs, train_projection, ProjectionLayer, TrainConfig};
use twm::audio::{mel_spectrogram, save_wav, Waveform};
use twm::bench::{generate_scenario, oracle_topk, rotation_pairs, run_bench, AblationArm, ScenarioGen};
use twm::io::{indices_json, save_embeddings, save_query};
use twm::pipeline::{default_encoder, neural_search, AudioFrontend, AudioInput};
use twm::visual::select_visual;
use twm::TwmConfig;

fn twm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twm")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let inst = generate_scenario::<f64>(&ScenarioGen::default().scenario(11)).unwrap();
        save_embeddings(&inst.sequence, dir.path().join("frames.twm")).unwrap();
        save_query(&inst.query, dir.path().join("query.json")).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn select_frames_matches_library() {
    let f = Fixture::new();
    let out = twm(&[
        "select-frames",
        "--embeddings",
        s(&f.path("frames.twm")),
        "--query",
        s(&f.path("query.json")),
        "--preset",
        "cmd",
        "--mode",
        "commit-argmax",
        "--trace",
        s(&f.path("trace.json")),
        "--out",
        s(&f.path("sel.json")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let seq = twm::io::load_embeddings::<f64>(f.path("frames.twm")).unwrap();
    let q = twm::io::load_query::<f64>(f.path("query.json")).unwrap();
    let cfg = TwmConfig::cmd().with_mode(twm::CommitMode::CommitArgmax);
    let sel = select_visual(&seq, &q, &ProjectionLayer::identity(seq.dim()), &cfg).unwrap();
    assert_eq!(std::fs::read_to_string(f.path("sel.json")).unwrap(), indices_json(&sel.buffer.indices()));
    assert_eq!(std::fs::read_to_string(f.path("trace.json")).unwrap(), sel.trace.to_json());
}

#[test]
fn missing_input_is_io_error_naming_path() {
    let f = Fixture::new();
    let out = twm(&["select-frames", "--embeddings", "/no/such/frames.twm", "--query", s(&f.path("query.json")), "--out", s(&f.path("o.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/frames.twm"));
}

#[test]
fn invalid_config_is_validation_error() {
    let f = Fixture::new();
    std::fs::write(f.path("cfg.json"), r#"{"k": 3, "iterations": 3, "alpha1": 0.7, "alpha2": 0.7}"#).unwrap();
    let out = twm(&[
        "select-frames",
        "--embeddings",
        s(&f.path("frames.twm")),
        "--query",
        s(&f.path("query.json")),
        "--config",
        s(&f.path("cfg.json")),
        "--out",
        s(&f.path("o.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!f.path("o.json").exists());
}

#[test]
fn oracle_matches_library() {
    let f = Fixture::new();
    let out = twm(&["oracle", "--embeddings", s(&f.path("frames.twm")), "--query", s(&f.path("query.json")), "--budget", "7", "--out", s(&f.path("o.json"))]);
    assert!(out.status.success());
    let seq = twm::io::load_embeddings::<f64>(f.path("frames.twm")).unwrap();
    let q = twm::io::load_query::<f64>(f.path("query.json")).unwrap();
    let top = oracle_topk(&seq, &q, &ProjectionLayer::identity(seq.dim()), 7).unwrap();
    assert_eq!(std::fs::read_to_string(f.path("o.json")).unwrap(), indices_json(&top));
}

#[test]
fn train_align_outputs() {
    let f = Fixture::new();
    save_pairs(&rotation_pairs::<f64>(16, 4, 2), f.path("pairs.json")).unwrap();
    let pairs = load_pairs::<f64>(f.path("pairs.json")).unwrap();

    let out = twm(&["train-align", "--pairs", s(&f.path("pairs.json")), "--lr", "0", "--epochs", "3", "--seed", "9", "--out", s(&f.path("zero.twmp"))]);
    assert!(out.status.success());
    let cfg0 = TrainConfig { lr: 0.0, epochs: 3, seed: 9, ..TrainConfig::default() };
    let lib = train_projection(&pairs, &cfg0).unwrap();
    assert_eq!(std::fs::read(f.path("zero.twmp")).unwrap(), lib.layer.to_bytes());
    let fresh = train_projection(&pairs, &TrainConfig { epochs: 0, ..cfg0.clone() }).unwrap();
    assert_eq!(lib.layer, fresh.layer);

    let out = twm(&[
        "train-align", "--pairs", s(&f.path("pairs.json")), "--lr", "0.01", "--epochs", "40", "--out", s(&f.path("p.twmp")),
        "--loss-out", s(&f.path("loss.csv")),
    ]);
    assert!(out.status.success());
    let cfg = TrainConfig { lr: 0.01, epochs: 40, ..TrainConfig::default() };
    let lib = train_projection(&pairs, &cfg).unwrap();
    let csv = std::fs::read_to_string(f.path("loss.csv")).unwrap();
    assert_eq!(csv, loss_history_csv(&lib.loss_history));
    let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(losses.last().unwrap() < losses.first().unwrap());

    save_pairs(&pairs[..1], f.path("one.json")).unwrap();
    let out = twm(&["train-align", "--pairs", s(&f.path("one.json")), "--out", s(&f.path("x.twmp"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mel_and_select_audio_match_library() {
    let f = Fixture::new();
    let wave = Waveform::<f64>::tone(660.0, 0.4, 2.0, 16_000);
    save_wav(&wave, f.path("tone.wav")).unwrap();
    let out = twm(&["mel", "--input", s(&f.path("tone.wav")), "--n-mels", "32", "--out", s(&f.path("tone.twmm"))]);
    assert!(out.status.success());
    let reloaded = twm::audio::load_waveform::<f64>(f.path("tone.wav"), None).unwrap();
    let spec = mel_spectrogram(&reloaded, 512, 160, 32).unwrap();
    assert_eq!(std::fs::read(f.path("tone.twmm")).unwrap(), spec.to_bytes());

    let out = twm(&[
        "select-audio",
        "--embeddings", s(&f.path("frames.twm")),
        "--query", s(&f.path("query.json")),
        "--audio", s(&f.path("tone.wav")),
        "--seed", "5",
        "--out", s(&f.path("audio.json")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let seq = twm::io::load_embeddings::<f64>(f.path("frames.twm")).unwrap();
    let q = twm::io::load_query::<f64>(f.path("query.json")).unwrap();
    let cfg = TwmConfig::msr_vtt();
    let segments = AudioFrontend::from_config(&cfg).load_segments::<f64>(f.path("tone.wav")).unwrap();
    let enc = default_encoder(seq.dim(), &segments, &cfg, 5).unwrap();
    let result = neural_search(
        &seq,
        Some(AudioInput { segments: &segments, encoder: &enc }),
        &q,
        &ProjectionLayer::identity(seq.dim()),
        &cfg,
    )
    .unwrap();
    assert_eq!(std::fs::read_to_string(f.path("audio.json")).unwrap(), result.summary(Some(&segments)).to_json());
}

#[test]
fn bench_rows_and_library_equivalence() {
    let f = Fixture::new();
    let out = twm(&["bench", "--generate", "10", "--ablation", "none", "--out", s(&f.path("b"))]);
    assert!(out.status.success());
    let csv = std::fs::read_to_string(f.path("b/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("none")));

    let out = twm(&["bench", "--generate", "10", "--ablation", "full,none", "--preset", "music-avqa", "--out", s(&f.path("c"))]);
    assert!(out.status.success());
    let scenarios = ScenarioGen::default().scenarios(10, 0);
    let lib = run_bench::<f64>(&scenarios, &TwmConfig::music_avqa(), &[AblationArm::Full, AblationArm::None]).unwrap();
    assert_eq!(std::fs::read_to_string(f.path("c/summary.json")).unwrap(), lib.summary_json());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), lib.summary_table());
    assert!(lib.summary[0].mean_planted_recall > lib.summary[1].mean_planted_recall);

    let out = twm(&["bench", "--generate", "2", "--ablation", "sideways", "--out", s(&f.path("d"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_and_usage_errors() {
    let out = twm(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["select-frames", "select-audio", "train-align", "mel", "bench", "oracle"] {
        assert!(text.contains(sub));
    }
    let out = twm(&["select-frames", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--embeddings", "--query", "--projection", "--config", "--trace", "--mode", "--out"] {
        assert!(text.contains(flag), "{flag}");
    }
    assert_eq!(twm(&["select-frames", "--wat"]).status.code(), Some(2));
    assert_eq!(twm(&[]).status.code(), Some(2));
    assert_eq!(twm(&["bench", "--out", "/tmp/x"]).status.code(), Some(2));
}
