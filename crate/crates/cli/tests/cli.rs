use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bachprop::midi::write_midi;
use bachprop::pipeline::{score_from_midi, Manifest};
use bachprop::score::{build_grid, Score};
use bachprop::synthetic::chorale_corpus;

fn bachprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bachprop")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bachprop(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_corpus(dir: &Path, songs: &[Score]) {
    fs::create_dir_all(dir).unwrap();
    for (i, song) in songs.iter().enumerate() {
        fs::write(dir.join(format!("song{i:02}.mid")), write_midi(song, 480).unwrap()).unwrap();
    }
}

#[test]
fn preprocess_records_rejections_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("midi");
    write_corpus(&corpus, &chorale_corpus(3, 1));
    fs::write(corpus.join("broken.mid"), b"MThd\0\0\0\x06\0\x02").unwrap();

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["preprocess", s(&corpus), "--out", s(&a)]);
    ok(&["preprocess", s(&corpus), "--out", s(&b)]);
    for f in ["manifest.json", "dictionaries.json", "report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = Manifest::load(&a.join("manifest.json")).unwrap();
    assert_eq!(manifest.songs.len(), 3);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rejected"].as_array().unwrap().len(), 1);
    assert_eq!(report["converted"].as_array().unwrap().len(), 3);

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = bachprop(&["preprocess", s(&empty), "--out", s(&a)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no MIDI files"));
}

#[test]
fn train_sample_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("midi");
    write_corpus(&corpus, &chorale_corpus(6, 2));
    let data = tmp.path().join("data");
    ok(&["preprocess", s(&corpus), "--out", s(&data)]);
    let manifest = data.join("manifest.json");

    let train = |out: &Path| {
        ok(&[
            "train",
            s(&manifest),
            "--variant",
            "indepbp",
            "--epochs",
            "2",
            "--batch-size",
            "2",
            "--trunc-len",
            "64",
            "--seed",
            "5",
            "--out",
            s(out),
        ])
    };
    let run1 = tmp.path().join("run1");
    let run2 = tmp.path().join("run2");
    train(&run1);
    train(&run2);
    let log = fs::read_to_string(run1.join("trainlog.csv")).unwrap();
    assert_eq!(log, fs::read_to_string(run2.join("trainlog.csv")).unwrap());
    assert_eq!(fs::read(run1.join("checkpoint.bin")).unwrap(), fs::read(run2.join("checkpoint.bin")).unwrap());
    assert!(log.starts_with("# bachprop "));
    assert!(log.contains("# config {"));
    let rows: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "epoch,train_nll,val_nll,val_acc_dt,val_acc_t,val_acc_p");
    assert_eq!(rows.len(), 3);

    let samples = tmp.path().join("samples");
    let checkpoint = run1.join("checkpoint.bin");
    ok(&["sample", s(&checkpoint), "--count", "3", "--max-notes", "40", "--seed", "9", "--out", s(&samples)]);
    let grid = build_grid(16);
    for idx in 0..3 {
        let midi = fs::read(samples.join(format!("sample_9_{idx:04}.mid"))).unwrap();
        let text = fs::read_to_string(samples.join(format!("sample_9_{idx:04}.txt"))).unwrap();
        assert!(text.starts_with("# bachprop "));
        let from_midi = score_from_midi(&midi, &grid).unwrap();
        assert_eq!(from_midi.notes, Score::from_note_list(&text).unwrap().notes);
        assert!(from_midi.len() <= 40);
    }
    let again = tmp.path().join("again");
    ok(&["sample", s(&checkpoint), "--count", "3", "--max-notes", "40", "--seed", "9", "--out", s(&again)]);
    assert_eq!(fs::read(samples.join("sample_9_0002.txt")).unwrap(), fs::read(again.join("sample_9_0002.txt")).unwrap());

    let none = tmp.path().join("none");
    ok(&["sample", s(&checkpoint), "--count", "0", "--out", s(&none)]);
    assert_eq!(fs::read_dir(&none).unwrap().count(), 0);

    let eval = tmp.path().join("eval");
    let out = ok(&["evaluate", s(&manifest), s(&manifest), "--pattern-sizes", "2,4,6", "--out", s(&eval)]);
    for f in [
        "dt_hist.csv",
        "t_hist.csv",
        "intervals_chord.csv",
        "intervals_all.csv",
        "lengths.csv",
        "novelty.json",
        "auto_novelty.json",
        "distances.csv",
    ] {
        assert!(eval.join(f).exists(), "{f}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().all(|l| l.ends_with("0.0000")), "{stdout}");
    let novelty: serde_json::Value = serde_json::from_slice(&fs::read(eval.join("novelty.json")).unwrap()).unwrap();
    for row in novelty["profile"].as_array().unwrap() {
        assert!(row["scores"].as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));
    }

    let single = tmp.path().join("single.json");
    let one = Manifest::load(&manifest).unwrap().scores().unwrap();
    fs::write(&single, Manifest::from_scores(&one[..1], 16).to_json()).unwrap();
    let out = bachprop(&["evaluate", s(&manifest), s(&single), "--out", s(&eval)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 2 songs"));
}

#[test]
fn unknown_variant_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("midi");
    write_corpus(&corpus, &chorale_corpus(2, 3));
    ok(&["preprocess", s(&corpus), "--out", s(tmp.path())]);
    let out = bachprop(&["train", s(&tmp.path().join("manifest.json")), "--variant", "deepbach", "--out", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown model variant \"deepbach\""));
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("midi");
    write_corpus(&corpus, &chorale_corpus(3, 4));
    ok(&["preprocess", s(&corpus), "--out", s(tmp.path())]);
    let config = tmp.path().join("config.json");
    fs::write(&config, r#"{"variant": "mlp", "train": {"max_epochs": 1, "batch_size": 3, "seed": 11}}"#).unwrap();
    let out = tmp.path().join("run");
    ok(&["train", s(&tmp.path().join("manifest.json")), "--config", s(&config), "--seed", "12", "--out", s(&out)]);
    let log = fs::read_to_string(out.join("trainlog.csv")).unwrap();
    let echo = log.lines().nth(1).unwrap().strip_prefix("# config ").unwrap();
    let echo: serde_json::Value = serde_json::from_str(echo).unwrap();
    assert_eq!(echo["variant"], "mlp");
    assert_eq!(echo["train"]["batch_size"], 3);
    assert_eq!(echo["train"]["seed"], 12);
    assert_eq!(echo["train"]["trunc_len"], 128);
}
