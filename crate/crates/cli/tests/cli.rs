use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use evidence_core::evidence::EvidenceConfig;
use evidence_core::spectra::{
    read_spectrogram_csv, write_spectrogram_csv, write_wav, AudioClip, Spectrogram,
};

fn evidence(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evidence"))
        .args(args)
        .env_remove("EVIDENCE_SEED")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn tone_wav(path: &Path, seconds: f64) {
    let n = (seconds * 22_050.0) as usize;
    let samples = (0..n)
        .map(|i| 0.4 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 22_050.0).sin())
        .collect();
    write_wav(&AudioClip::new(samples, 22_050), path).unwrap();
}

/// 12 rows; rows 4-6 hold 2.0, everything else 1.0.
fn planted_csv(path: &Path) {
    let rows: Vec<Vec<f64>> = (0..12)
        .map(|i| vec![if (4..=6).contains(&i) { 2.0 } else { 1.0 }; 5])
        .collect();
    write_spectrogram_csv(&Spectrogram::from_rows(&rows).unwrap(), path).unwrap();
}

#[test]
fn melspec_ten_seconds() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("tone.wav");
    tone_wav(&wav, 10.0);
    let csv = dir.path().join("tone.csv");
    let out = evidence(&["melspec", "--in", p(&wav), "--out", p(&csv)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let spec = read_spectrogram_csv(&csv).unwrap();
    assert_eq!(spec.shape(), (150, 1 + 220_500 / 344));
    assert_eq!(spec.row_frequencies().unwrap().len(), 150);
    assert!(fs::read_to_string(&csv).unwrap().starts_with("# freqs: "));
}

#[test]
fn padding_matches_a_native_clip() {
    let dir = tempfile::tempdir().unwrap();
    let (short, long) = (dir.path().join("short.wav"), dir.path().join("long.wav"));
    tone_wav(&short, 4.0);
    tone_wav(&long, 10.0);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let png = dir.path().join("a.png");
    assert!(evidence(&[
        "melspec",
        "--in",
        p(&short),
        "--out",
        p(&a),
        "--pad-seconds",
        "10",
        "--png",
        p(&png)
    ])
    .status
    .success());
    assert!(evidence(&["melspec", "--in", p(&long), "--out", p(&b)])
        .status
        .success());
    let (a, b) = (
        read_spectrogram_csv(&a).unwrap(),
        read_spectrogram_csv(&b).unwrap(),
    );
    assert_eq!(a.cols(), b.cols());
    let img = image::open(&png).unwrap();
    assert_eq!(
        (img.width() as usize, img.height() as usize),
        (a.cols(), a.rows())
    );
}

#[test]
fn missing_input_is_a_usage_error() {
    let out = evidence(&["melspec", "--in", "/no/such.wav", "--out", "/tmp/x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--in"));
}

#[test]
fn unknown_flags_and_bad_values() {
    assert_eq!(evidence(&["melspec", "--bogus"]).status.code(), Some(1));
    assert_eq!(evidence(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    planted_csv(&csv);
    let base = [
        "explain",
        "--in",
        p(&csv),
        "--label",
        "1",
        "--out",
        p(dir.path()),
    ];
    let with = |extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        evidence(&args).status.code()
    };
    assert_eq!(
        with(&["--builtin", "planted:rows=4-6", "--select", "middle:3"]),
        Some(1)
    );
    assert_eq!(
        with(&["--builtin", "planted:rows=4-6", "--num-chunks", "40"]),
        Some(1)
    );
    assert_eq!(
        with(&["--builtin", "planted:rows=4-6", "--label", "5"]),
        Some(1)
    );
    assert_eq!(with(&["--builtin", "nonsense"]), Some(1));
    assert_eq!(with(&[]), Some(1));
}

#[test]
fn model_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    planted_csv(&csv);
    let out = evidence(&[
        "explain",
        "--in",
        p(&csv),
        "--label",
        "0",
        "--model",
        "/no/such/model --serve",
        "--num-chunks",
        "4",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("spawn"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "1,2\n3\n").unwrap();
    let out = evidence(&[
        "explain",
        "--in",
        p(&bad),
        "--label",
        "0",
        "--builtin",
        "uniform:classes=2",
        "--num-chunks",
        "1",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn explain_finds_the_planted_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    planted_csv(&csv);
    let out_dir = dir.path().join("out");
    let out = evidence(&[
        "explain",
        "--in",
        p(&csv),
        "--label",
        "1",
        "--builtin",
        "planted:rows=4-6,k=2,bias=1",
        "--num-chunks",
        "12",
        "--features",
        "4",
        "--iterations",
        "2000",
        "--out",
        p(&out_dir),
        "--png",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("survivors: 500 of 2000"), "{stdout}");
    let hist = fs::read_to_string(out_dir.join("histogram.csv")).unwrap();
    let mut lines = hist.lines();
    assert_eq!(lines.next(), Some("chunk,count,hz_lo,hz_hi,important"));
    let important: Vec<usize> = lines
        .filter(|l| l.ends_with(",true"))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(important, vec![4, 5, 6]);
    let filtered = read_spectrogram_csv(out_dir.join("filtered.csv")).unwrap();
    for i in 0..12 {
        let kept = filtered.row(i).iter().any(|&v| v != 0.0);
        assert_eq!(kept, (4..=6).contains(&i), "row {i}");
    }
    assert!(out_dir.join("chi.csv").is_file());
    assert!(out_dir.join("filtered.png").is_file());
}

#[test]
fn five_thousand_iterations_keep_1250() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    planted_csv(&csv);
    let out_dir = dir.path().join("out");
    let out = evidence(&[
        "explain",
        "--in",
        p(&csv),
        "--label",
        "0",
        "--builtin",
        "planted:rows=4-6",
        "--num-chunks",
        "12",
        "--iterations",
        "5000",
        "--select",
        "top:0.25",
        "--out",
        p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("result.json")).unwrap()).unwrap();
    assert_eq!(doc["n_survivors"], 1250);
    assert_eq!(doc["n_variants"], 5000);
}

#[test]
fn config_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    planted_csv(&csv);
    let out = Command::new(env!("CARGO_BIN_EXE_evidence"))
        .args([
            "explain",
            "--in",
            p(&csv),
            "--label",
            "1",
            "--builtin",
            "planted:rows=4-6",
            "--num-chunks",
            "6",
            "--features",
            "3",
            "--iterations",
            "50",
            "--select",
            "abs:0.9",
            "--estimator",
            "weighted",
            "--weight-source",
            "raw",
            "--out",
            p(dir.path()),
        ])
        .env("EVIDENCE_SEED", "31")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let err = stderr(&out);
    let line = err
        .lines()
        .find_map(|l| l.strip_prefix("config: "))
        .expect("config echo");
    let echoed: EvidenceConfig = serde_json::from_str(line).unwrap();
    assert_eq!(echoed.seed, 31);
    assert_eq!(
        (echoed.num_chunks, echoed.features, echoed.iterations),
        (6, 3, 50)
    );
    assert_eq!(serde_json::to_string(&echoed).unwrap(), line);
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
    let written: EvidenceConfig = serde_json::from_value(doc["config"].clone()).unwrap();
    assert_eq!(written, echoed);
}

#[test]
fn explicit_seed_beats_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    planted_csv(&csv);
    let out = Command::new(env!("CARGO_BIN_EXE_evidence"))
        .args([
            "explain",
            "--in",
            p(&csv),
            "--label",
            "1",
            "--builtin",
            "planted:rows=4-6",
            "--num-chunks",
            "6",
            "--iterations",
            "20",
            "--seed",
            "4",
            "--out",
            p(dir.path()),
        ])
        .env("EVIDENCE_SEED", "31")
        .output()
        .unwrap();
    assert!(stderr(&out).contains("\"seed\":4"));
}

fn write_manifest(dir: &Path, items: &[(&str, usize)]) -> std::path::PathBuf {
    let doc = serde_json::json!({
        "classes": ["absent", "present"],
        "items": items.iter().map(|(p, l)| serde_json::json!({"path": p, "label": l})).collect::<Vec<_>>(),
    });
    let path = dir.join("manifest.json");
    fs::write(&path, doc.to_string()).unwrap();
    path
}

#[test]
fn evaluate_writes_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut items = Vec::new();
    for k in 0..6 {
        let label = k % 2;
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let planted = (4..=6).contains(&i);
                vec![if planted { 3.0 * label as f64 } else { 1.0 }; 4]
            })
            .collect();
        let name = format!("item{k}.csv");
        write_spectrogram_csv(
            &Spectrogram::from_rows(&rows).unwrap(),
            dir.path().join(&name),
        )
        .unwrap();
        items.push((name, label));
    }
    let refs: Vec<(&str, usize)> = items.iter().map(|(n, l)| (n.as_str(), *l)).collect();
    let manifest = write_manifest(dir.path(), &refs);
    let out_dir = dir.path().join("out");
    let out = evidence(&[
        "evaluate",
        "--manifest",
        p(&manifest),
        "--builtin",
        "planted:rows=4-6,k=20,bias=1.5",
        "--num-chunks",
        "12",
        "--features",
        "4",
        "--iterations",
        "200",
        "--out",
        p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["baseline.csv", "evidence.csv"] {
        let csv = fs::read_to_string(out_dir.join(name)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "category,precision,sensitivity,f1,support");
        assert!(lines.last().unwrap().starts_with("AUC,"));
        let macro_row: Vec<&str> = lines[3].split(',').collect();
        assert_eq!(macro_row[0], "Macro Average");
        assert_eq!(macro_row[3].parse::<f64>().unwrap(), 1.0, "{name}: {csv}");
    }
    assert_eq!(
        fs::read_to_string(out_dir.join("items.jsonl"))
            .unwrap()
            .lines()
            .count(),
        6
    );
}

#[test]
fn evaluate_rejects_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_manifest(dir.path(), &[]);
    let out = evidence(&[
        "evaluate",
        "--manifest",
        p(&manifest),
        "--builtin",
        "uniform:classes=2",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
