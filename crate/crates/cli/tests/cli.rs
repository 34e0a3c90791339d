use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fgdisc::midi::{parse_smf, write_smf};
use fgdisc::model::checksum;
use fgdisc::remi::{from_text, validate, CodecConfig, Token};
use fgdisc::synth::{synth_score, SynthConfig};
use fgdisc::train::load_checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fgdisc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgdisc")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = fgdisc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Four synthetic MIDI pieces in `dir`.
fn midi_corpus(dir: &Path) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..4)
        .map(|i| {
            let p = dir.join(format!("piece{i}.mid"));
            let score = synth_score(&mut rng, &SynthConfig { bars: 2, ..SynthConfig::default() });
            std::fs::write(&p, write_smf(&score).unwrap()).unwrap();
            p
        })
        .collect()
}

#[test]
fn every_flag_is_documented() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let root = fgdisc_cli::command();
    let mut checked = 0;
    let mut cmds = vec![root.clone()];
    cmds.extend(root.get_subcommands().cloned());
    for cmd in &cmds {
        for arg in cmd.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "help" || id == "version" {
                continue;
            }
            assert!(arg.get_help().is_some() || arg.get_long_help().is_some(), "{} {id} has no help", cmd.get_name());
            if let Some(long) = arg.get_long() {
                assert!(readme.contains(&format!("--{long}")), "README does not mention --{long}");
            }
            checked += 1;
        }
        if cmd.get_name() != "fgdisc" {
            assert!(readme.contains(&format!("fgdisc {}", cmd.get_name())), "README does not show `fgdisc {}`", cmd.get_name());
        }
    }
    assert!(checked > 30);
    let help = String::from_utf8(ok(&["train", "--help"]).stdout).unwrap();
    for flag in ["--phase", "--data", "--out", "--resume", "--steps", "--alpha", "--beta"] {
        assert!(help.contains(flag), "{flag} missing from train --help");
    }
}

#[test]
fn encode_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mid = &midi_corpus(&dir.path().join("data"))[0];
    let tokens = dir.path().join("piece.txt");
    let back = dir.path().join("back.mid");
    ok(&["encode", s(mid), "-o", s(&tokens)]);
    let seq = from_text(&std::fs::read_to_string(&tokens).unwrap()).unwrap();
    validate(&seq, &CodecConfig::default()).unwrap();
    ok(&["decode", s(&tokens), "-o", s(&back)]);
    let a = parse_smf(&std::fs::read(mid).unwrap()).unwrap();
    let b = parse_smf(&std::fs::read(&back).unwrap()).unwrap();
    // synthetic pieces sit on the grid, so only the tick resolution changes
    let scale = b.ticks_per_quarter as u64 / a.ticks_per_quarter as u64;
    let key = |n: &fgdisc::midi::NoteEvent, k: u64| (n.onset_ticks * k, n.pitch);
    let mut ka: Vec<_> = a.notes.iter().map(|n| key(n, scale)).collect();
    let mut kb: Vec<_> = b.notes.iter().map(|n| key(n, 1)).collect();
    ka.sort();
    kb.sort();
    assert_eq!(ka, kb);

    let json = dir.path().join("piece.json");
    ok(&["encode", s(mid), "-o", s(&json)]);
    ok(&["decode", s(&json), "-o", s(&back)]);
}

#[test]
fn views_and_augmentation() {
    let dir = tempfile::tempdir().unwrap();
    let mid = &midi_corpus(&dir.path().join("data"))[0];
    let tokens = dir.path().join("piece.txt");
    ok(&["encode", s(mid), "-o", s(&tokens)]);
    let melody = String::from_utf8(ok(&["decouple", "--view", "melody", s(&tokens)]).stdout).unwrap();
    let seq = from_text(&melody).unwrap();
    assert!(seq.iter().all(|t| !matches!(t, Token::NoteVelocity(_))));
    assert!(seq.iter().any(|t| *t == Token::Mask));

    let up = String::from_utf8(ok(&["augment", "--offset", "-2", s(&tokens)]).stdout).unwrap();
    let orig = from_text(&std::fs::read_to_string(&tokens).unwrap()).unwrap();
    for (a, b) in orig.iter().zip(from_text(&up).unwrap().iter()) {
        match (a, b) {
            (Token::NoteOnPitch(p), Token::NoteOnPitch(q)) => assert_eq!(*p, q + 2),
            _ => assert_eq!(a, b),
        }
    }
    let r1 = ok(&["augment", "--random", "--max-shift", "3", "--seed", "5", s(&tokens)]).stdout;
    let r2 = ok(&["augment", "--random", "--max-shift", "3", "--seed", "5", s(&tokens)]).stdout;
    assert_eq!(r1, r2);
}

#[test]
fn exit_codes_and_json_errors() {
    assert_eq!(fgdisc(&["encode"]).status.code(), Some(1));
    assert_eq!(fgdisc(&["augment", "x.txt"]).status.code(), Some(1));
    assert_eq!(fgdisc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fgdisc(&["--help"]).status.code(), Some(0));

    let missing = fgdisc(&["encode", "/nonexistent/x.mid", "--json-errors"]);
    assert_eq!(missing.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(err["error"], "data");
    assert_eq!(err["exit_code"], 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.mid");
    std::fs::write(&bad, b"MThd garbage").unwrap();
    assert_eq!(fgdisc(&["encode", s(&bad)]).status.code(), Some(2));

    let usage = fgdisc(&["--json-errors", "train"]);
    assert_eq!(usage.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&usage.stderr).unwrap();
    assert_eq!(err["error"], "usage");
}

#[test]
fn eval_of_identical_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    midi_corpus(&data);
    let report = dir.path().join("report.json");
    let hist = dir.path().join("hist");
    let out = ok(&["eval", "--gen", s(&data), "--real", s(&data), "-o", s(&report), "--table", "--histograms", s(&hist)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["pitch_divergence"].as_f64().unwrap() < 1e-9);
    assert!(r["velocity_divergence"].as_f64().unwrap() < 1e-9);
    assert!(String::from_utf8(out.stdout).unwrap().contains("generated"));
    assert!(hist.join("velocity_histogram.csv").exists());
}

const SMALL: &str = "[model]\nd_model = 16\nn_heads = 2\nn_layers = 1\nd_ff = 32\nmax_len = 128\n";

#[test]
fn zero_weight_adversarial_phase_matches_nll_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    midi_corpus(&data);
    let config = dir.path().join("small.toml");
    std::fs::write(&config, format!("batch_size = 2\n{SMALL}")).unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let common = ["--data", s(&data), "--config", s(&config)];
    ok(&[&["train", "--phase", "nll", "--preset", "toy", "--steps", "2", "--out", s(&a)], &common[..]].concat());
    ok(&[&["train", "--phase", "adv", "--resume", s(&a), "--steps", "3", "--alpha", "0", "--beta", "0", "--out", s(&b)], &common[..]].concat());
    ok(&[&["train", "--phase", "nll", "--resume", s(&a), "--steps", "3", "--out", s(&c)], &common[..]].concat());
    let (sb, sc) = (load_checkpoint(&b).unwrap(), load_checkpoint(&c).unwrap());
    assert_eq!(sb.step, 5);
    assert_eq!(checksum(&sb.generator.params()), checksum(&sc.generator.params()));
    let csv = std::fs::read_to_string(b.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,nll,adv_melody,adv_rhythm,d_m_loss,d_r_loss,d_m_acc,d_r_acc\n"));
    assert_eq!(csv.lines().count(), 6);

    // a resumed checkpoint fixes the model
    let other = dir.path().join("other.toml");
    std::fs::write(&other, "[model]\nd_model = 8\n").unwrap();
    let out = fgdisc(&["train", "--phase", "nll", "--resume", s(&a), "--data", s(&data), "--out", s(&c), "--config", s(&other)]);
    assert_eq!(out.status.code(), Some(1));

    let cond = dir.path().join("cond.txt");
    ok(&["encode", s(&data.join("piece0.mid")), "-o", s(&cond)]);
    let g1 = ok(&["generate", "--ckpt", s(&b), "--condition", s(&cond), "--seed", "4", "--max-new-tokens", "40"]).stdout;
    let g2 = ok(&["generate", "--ckpt", s(&b), "--condition", s(&cond), "--seed", "4", "--max-new-tokens", "40"]).stdout;
    assert_eq!(g1, g2);
    validate(&from_text(&String::from_utf8(g1).unwrap()).unwrap(), &CodecConfig::default()).unwrap();
    let midi_out = dir.path().join("gen.mid");
    ok(&["generate", "--ckpt", s(&b), "--condition", s(&cond), "--top-k", "5", "--temperature", "0.8", "-o", s(&midi_out)]);
    parse_smf(&std::fs::read(&midi_out).unwrap()).unwrap();
}
