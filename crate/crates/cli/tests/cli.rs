use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

/// C major triad for one beat at 120 BPM under a 1900-tick pedal press.
fn triad_midi() -> Vec<u8> {
    let track: &[u8] = &[
        0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20, // tempo 500000
        0x00, 0xB0, 0x40, 0x7F, // pedal down
        0x00, 0x90, 0x3C, 0x50, 0x00, 0x90, 0x40, 0x50, 0x00, 0x90, 0x43, 0x50, //
        0x83, 0x60, 0x80, 0x3C, 0x00, 0x00, 0x80, 0x40, 0x00, 0x00, 0x80, 0x43, 0x00, // +480
        0x8B, 0x0C, 0xB0, 0x40, 0x00, // +1420: pedal up at 1900
        0x00, 0xFF, 0x2F, 0x00,
    ];
    let mut out = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xe0MTrk".to_vec();
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(track);
    out
}

const GOLDEN_TEXT: &str = "M\tB\t_\t_\t_\t_\t_\n\
                           M\tS0\t120\tC:maj\t1920\t_\t_\n\
                           N\t_\t_\t_\t_\t60\t480\n\
                           N\t_\t_\t_\t_\t64\t480\n\
                           N\t_\t_\t_\t_\t67\t480\n\
                           E\t_\t_\t_\t_\t_\t_\n";

const GOLDEN_INTEGER: &str = "pedalcw-tokens v1\n0,1,0,0,0,0,0\n0,2,23,1,6,0,0\n1,0,0,0,0,61,8\n\
                              1,0,0,0,0,65,8\n1,0,0,0,0,68,8\n2,0,0,0,0,0,0\n";

const TINY_CONFIG: &str = r#"{"d_model": 16, "n_layers": 1, "n_heads": 2, "ff_width": 32, "context": 32,
    "embed": {"family": 4, "position": 4, "tempo": 4, "chord": 4, "pedal": 4, "pitch": 8, "duration": 4}}"#;

fn pedalcw(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pedalcw"))
        .args(args)
        .current_dir(dir)
        .env("PEDALCW_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = pedalcw(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("triad.mid"), triad_midi()).unwrap();
    dir
}

#[test]
fn encode_matches_golden_and_decode_round_trips() {
    let dir = setup();
    let p = dir.path();
    ok(&["encode", "triad.mid", "-o", "triad.tokens"], p);
    assert_eq!(
        fs::read_to_string(p.join("triad.tokens")).unwrap(),
        GOLDEN_TEXT
    );
    ok(
        &[
            "encode",
            "triad.mid",
            "-o",
            "triad.ints",
            "--format",
            "integer",
        ],
        p,
    );
    assert_eq!(
        fs::read_to_string(p.join("triad.ints")).unwrap(),
        GOLDEN_INTEGER
    );

    for tokens in ["triad.tokens", "triad.ints"] {
        ok(&["decode", tokens, "-o", "back.mid"], p);
        ok(&["encode", "back.mid", "-o", "back.tokens"], p);
        assert_eq!(
            fs::read_to_string(p.join("back.tokens")).unwrap(),
            GOLDEN_TEXT
        );
    }
}

#[test]
fn directory_encode_and_stats_are_ordered() {
    let dir = setup();
    let p = dir.path();
    fs::create_dir(p.join("songs")).unwrap();
    for name in ["b.mid", "a.mid", "c.MID"] {
        fs::write(p.join("songs").join(name), triad_midi()).unwrap();
    }
    fs::write(p.join("songs/notes.txt.bak"), "ignored").unwrap();
    ok(&["encode", "songs", "-o", "out"], p);
    for stem in ["a", "b", "c"] {
        assert_eq!(
            fs::read_to_string(p.join(format!("out/{stem}.tokens"))).unwrap(),
            GOLDEN_TEXT
        );
    }
    let out = ok(&["stats", "songs", "-o", "report.json", "--table"], p);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(p.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregate"]["pedal_count"], 3);
    assert_eq!(report["aggregate"]["beat_fraction"], 1.0);
    let names: Vec<&str> = report["songs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["a.mid", "b.mid", "c.MID"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("TOTAL"));
}

#[test]
fn training_and_generation_are_reproducible() {
    let dir = setup();
    let p = dir.path();
    fs::create_dir(p.join("corpus")).unwrap();
    fs::copy(p.join("triad.mid"), p.join("corpus/one.mid")).unwrap();
    fs::write(p.join("corpus/two.tokens"), GOLDEN_TEXT).unwrap();
    fs::write(p.join("tiny.json"), TINY_CONFIG).unwrap();

    let train = |out: &str, log: &str, extra: &[&str]| {
        let mut args = vec![
            "train",
            "--corpus",
            "corpus",
            "--config",
            "tiny.json",
            "-o",
            out,
            "--steps",
            "60",
            "--seed",
            "3",
            "--log",
            log,
        ];
        args.extend_from_slice(extra);
        ok(&args, p);
    };
    train("a.ckpt", "a.csv", &[]);
    train("b.ckpt", "b.csv", &["--sequential"]);
    assert_eq!(
        fs::read(p.join("a.csv")).unwrap(),
        fs::read(p.join("b.csv")).unwrap()
    );
    assert_eq!(
        fs::read(p.join("a.ckpt")).unwrap(),
        fs::read(p.join("b.ckpt")).unwrap()
    );
    let log = fs::read_to_string(p.join("a.csv")).unwrap();
    assert_eq!(log.lines().count(), 61);
    assert!(log.starts_with("step,total,family,position,tempo,chord,pedal,pitch,duration\n1,"));

    let generate = |out: &str| {
        ok(
            &[
                "generate",
                "--checkpoint",
                "a.ckpt",
                "--bars",
                "4",
                "--seed",
                "7",
                "-o",
                out,
                "--emit-tokens",
                "g.tokens",
            ],
            p,
        );
        fs::read(p.join(out)).unwrap()
    };
    let first = generate("g1.mid");
    assert_eq!(first, generate("g2.mid"));
    assert!(first.starts_with(b"MThd"));
    ok(&["encode", "g1.mid", "-o", "g1.tokens"], p);

    let primer = GOLDEN_TEXT.trim_end_matches("E\t_\t_\t_\t_\t_\t_\n");
    fs::write(p.join("primer.tokens"), primer).unwrap();
    fs::write(p.join("ended.tokens"), GOLDEN_TEXT).unwrap();
    let ended = [
        "generate",
        "--checkpoint",
        "a.ckpt",
        "--primer",
        "ended.tokens",
        "-o",
        "e.mid",
        "--seed",
        "1",
    ];
    assert_eq!(pedalcw(&ended, p).status.code(), Some(3));
    ok(
        &[
            "generate",
            "--checkpoint",
            "a.ckpt",
            "--bars",
            "2",
            "--primer",
            "primer.tokens",
            "--temperature",
            "0.5",
            "--temperature",
            "pedal=0",
            "--top-p",
            "0.9",
            "-o",
            "p.mid",
        ],
        p,
    );
}

#[test]
fn exit_codes() {
    let dir = setup();
    let p = dir.path();
    let code = |args: &[&str]| pedalcw(args, p).status.code();
    assert_eq!(
        code(&["encode", "triad.mid", "-o", "x.tokens", "--bogus"]),
        Some(1)
    );
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&[]), Some(1));
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["--version"]), Some(0));
    assert_eq!(code(&["encode", "missing.mid", "-o", "x.tokens"]), Some(2));

    fs::write(p.join("junk.mid"), b"not midi").unwrap();
    assert_eq!(code(&["encode", "junk.mid", "-o", "x.tokens"]), Some(2));
    fs::write(p.join("bad.tokens"), "M\tS3\t_\t_\t_\t_\t_\n").unwrap();
    assert_eq!(code(&["decode", "bad.tokens", "-o", "x.mid"]), Some(2));

    fs::write(p.join("junk.ckpt"), b"{}\0").unwrap();
    assert_eq!(
        code(&[
            "generate",
            "--checkpoint",
            "junk.ckpt",
            "-o",
            "x.mid",
            "--seed",
            "1"
        ]),
        Some(3)
    );
    fs::write(p.join("bad.json"), r#"{"d_model": 10, "n_heads": 3}"#).unwrap();
    fs::create_dir(p.join("c")).unwrap();
    fs::copy(p.join("triad.mid"), p.join("c/t.mid")).unwrap();
    assert_eq!(
        code(&["train", "--corpus", "c", "--config", "bad.json", "-o", "m.ckpt"]),
        Some(3)
    );
    assert_eq!(
        code(&[
            "generate",
            "--checkpoint",
            "junk.ckpt",
            "-o",
            "x.mid",
            "--temperature",
            "pitch=hot"
        ]),
        Some(1)
    );
    assert!(!p.join("x.mid").exists() && !p.join("x.tokens").exists());
}
