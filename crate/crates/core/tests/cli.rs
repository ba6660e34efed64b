use std::path::Path;
use std::process::{Command, Output};

fn hypercut(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypercut"))
        .args(args)
        .current_dir(cwd)
        .env("HYPERCUT_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = hypercut(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_data(dir: &Path) {
    ok(&["gen-data", "--count", "10", "--size", "8", "--frames", "5", "--seed", "3", "--out", "data"], dir);
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let help = hypercut(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("gen-data"));
    assert_eq!(hypercut(&["gen-data", "--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(hypercut(&["no-such-subcommand"], dir.path()).status.code(), Some(2));
    let bad_regime = hypercut(&["train-deblur", "--regime", "sideways"], dir.path());
    assert_eq!(bad_regime.status.code(), Some(2));
    assert!(!bad_regime.stderr.is_empty());
}

#[test]
fn empty_alpha_list_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hypercut(&["ablate-alpha", "--encoder", "enc", "--alphas", ""], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = hypercut(&["train-hypercut", "--data", "missing", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_is_reproducible_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--seed", "7", "--count", "6", "--size", "8", "--out", "a"], dir.path());
    ok(&["gen-data", "--seed", "7", "--count", "6", "--size", "8", "--out", "b"], dir.path());
    for entry in std::fs::read_dir(dir.path().join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
    let cfg: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["alpha"], 0.2);
    assert_eq!(cfg["dim"], 128);
    assert_eq!(cfg["frames"], 7);
    assert_eq!(cfg["size"], 8);
    assert_eq!(cfg["regime"], "oi+hypercut");
}

#[test]
fn train_and_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_data(d);
    let manifest_before = std::fs::read(d.join("data/manifest.json")).unwrap();
    let report = ok(&["train-hypercut", "--data", "data", "--epochs", "1", "--dim", "8", "--out", "enc"], d);
    assert!(report.contains("hit="));
    let eval = ok(&["eval-hypercut", "--data", "data", "--encoder", "enc", "--out", "ev"], d);
    assert_eq!(eval, std::fs::read_to_string(d.join("ev/report.txt")).unwrap());
    assert!(report.ends_with(&eval));

    let needs_encoder = hypercut(&["train-deblur", "--data", "data", "--epochs", "1", "--out", "x"], d);
    assert_eq!(needs_encoder.status.code(), Some(2));

    let log = ok(
        &["train-deblur", "--data", "data", "--encoder", "enc", "--epochs", "1", "--batch", "4", "--out", "db"],
        d,
    );
    assert!(log.starts_with("epoch=0 loss="));
    assert!(d.join("db/predictor.hckpt").exists());
    assert!(d.join("db/prediction_00.png").exists());
    ok(&["eval-deblur", "--data", "data", "--model", "db", "--encoder", "enc", "--out", "edb"], d);
    assert_eq!(
        std::fs::read(d.join("db/metrics.json")).unwrap(),
        std::fs::read(d.join("edb/metrics.json")).unwrap()
    );
    let rec = ok(&["train-deblur", "--data", "data", "--regime", "rec", "--epochs", "1", "--out", "rec"], d);
    assert!(rec.contains("order_agreement=nan"));

    let emb = ok(&["dump-embeddings", "--data", "data", "--encoder", "enc", "--out", "emb"], d);
    assert!(emb.contains("separability="));
    assert_eq!(std::fs::read(d.join("data/manifest.json")).unwrap(), manifest_before);
}

#[test]
fn align_finds_the_window() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-data", "--count", "2", "--size", "8", "--frames", "12", "--channels", "3", "--out", "s"], d);
    // the stream's own blurry slot is not a window blur; build the probe
    // from frames 3..10 instead
    let stream = hypercut::scenes::decode_sample(&std::fs::read(d.join("s/sample_000000.b2v")).unwrap()).unwrap();
    let fake = hypercut::pipeline::synth_fake_blur(&stream.sequence.frames[3..10]).unwrap();
    let probe = hypercut::scenes::Sample {
        blurry: hypercut::scenes::BlurryObservation { image: fake, source: 0 },
        sequence: hypercut::scenes::FrameSequence::new(vec![], 0).unwrap(),
    };
    std::fs::write(d.join("probe.b2v"), hypercut::scenes::encode_sample(&probe)).unwrap();
    let out = ok(&["align", "--data", "s/sample_000000.b2v", "--blurry", "probe.b2v", "--out", "al"], d);
    assert!(out.starts_with("p=3 "), "{out}");
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("al/alignment.json")).unwrap()).unwrap();
    assert_eq!(json["p"], 3);
    let aligned = hypercut::scenes::decode_sample(&std::fs::read(d.join("al/aligned.b2v")).unwrap()).unwrap();
    assert_eq!(aligned.sequence.len(), 7);
}
