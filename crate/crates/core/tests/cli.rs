mod common;

use std::fs;
use std::path::{Path, PathBuf};

use posnmt::cli::main_with_args;

use common::*;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["posnmt"];
    full.extend_from_slice(args);
    let code = main_with_args(full, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn write(dir: &Path, name: &str, lines: &[String]) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, lines.join("\n") + "\n").unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

#[test]
fn stats_and_perfect_score() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(
        dir.path(),
        "a.src",
        &lines(&["the report was tabled", "it was"]),
    );
    let tgt = write(dir.path(), "a.tgt", &lines(&["x y z", "y"]));
    let r = run(&["stats", "--source", s(&src), "--target", s(&tgt)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("Sentences"));
    assert!(r.stdout.lines().next().unwrap().ends_with('2'));

    let r = run(&["score", "--candidate", s(&src), "--reference", s(&src)]);
    assert_eq!(r.code, 0);
    assert!(r.stdout.starts_with("BLEU = 100.00"), "{}", r.stdout);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a", &lines(&["one two", "three"]));
    let b = write(dir.path(), "b", &lines(&["one"]));
    let missing = dir.path().join("missing");

    assert_eq!(run(&["frobnicate"]).code, 1);
    assert_eq!(run(&["stats", "--source", s(&a)]).code, 1);
    let bad = write(dir.path(), "bad.toml", &lines(&["[model]", "layers = 3"]));
    let r = run(&[
        "--config",
        s(&bad),
        "stats",
        "--source",
        s(&a),
        "--target",
        s(&a),
    ]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("bad.toml"));

    assert_eq!(
        run(&["stats", "--source", s(&missing), "--target", s(&a)]).code,
        2
    );
    assert_eq!(
        run(&["score", "--candidate", s(&a), "--reference", s(&b)]).code,
        2
    );
    assert_eq!(run(&["--help"]).code, 0);
}

#[test]
fn preprocess_drops_noise_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(
        dir.path(),
        "s",
        &lines(&[
            "the budget was tabled in parliament",
            "2021",
            "12/03/2021",
            "ABC12",
            "it was tabled",
        ]),
    );
    let tgt = write(
        dir.path(),
        "t",
        &lines(&["a b c d e", "a", "b", "c", "d e f"]),
    );
    let (os, ot) = (dir.path().join("os"), dir.path().join("ot"));
    let r = run(&[
        "preprocess",
        "--source",
        s(&src),
        "--target",
        s(&tgt),
        "--out-source",
        s(&os),
        "--out-target",
        s(&ot),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.stdout.trim(), "kept 2 of 5 pairs");
    assert_eq!(
        fs::read_to_string(&os).unwrap(),
        "the budget was tabled in parliament\nit was tabled\n"
    );
    assert_eq!(fs::read_to_string(&ot).unwrap(), "a b c d e\nd e f\n");

    let r = run(&[
        "preprocess",
        "--test",
        "--source",
        s(&src),
        "--target",
        s(&tgt),
        "--out-source",
        s(&os),
        "--out-target",
        s(&ot),
    ]);
    assert_eq!(r.stdout.trim(), "kept 1 of 5 pairs");
}

#[test]
fn bpe_and_tag_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = lines(&["low lower newest widest", "the lowest report was tabled"]);
    let input = write(dir.path(), "in.txt", &text);
    let model = dir.path().join("m.bpe");
    let r = run(&[
        "learn-bpe",
        "--input",
        s(&input),
        "--output",
        s(&model),
        "--merges",
        "10",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    // Stops early once no pair repeats.
    let learned: usize = r.stdout.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((3..=10).contains(&learned), "{}", r.stdout);

    let tagged = dir.path().join("in.tag");
    let r = run(&["tag", "--input", s(&input), "--output", s(&tagged)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let r = run(&["tag", "--validate", s(&tagged)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("2 tagged sentences"));

    let (seg, seg_tags) = (dir.path().join("seg"), dir.path().join("seg.tag"));
    let r = run(&[
        "apply-bpe",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--output",
        s(&seg),
        "--tags",
        s(&tagged),
        "--tags-output",
        s(&seg_tags),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let units = fs::read_to_string(&seg).unwrap();
    let merged: Vec<String> = units
        .lines()
        .map(|l| {
            let u: Vec<String> = l.split_whitespace().map(str::to_owned).collect();
            posnmt::bpe::merge_subwords(&u).join(" ")
        })
        .collect();
    assert_eq!(merged, text);
    let unit_tags = fs::read_to_string(&seg_tags).unwrap();
    for (u, t) in units.lines().zip(unit_tags.lines()) {
        assert_eq!(u.split_whitespace().count(), t.split_whitespace().count());
    }
}

#[test]
fn train_translate_score_copy_task() {
    let dir = tempfile::tempdir().unwrap();
    let (sources, targets) = copy_corpus(32, 11);
    let src_lines: Vec<String> = sources.iter().map(|t| t.tokens.join(" ")).collect();
    let tgt_lines: Vec<String> = targets.iter().map(|t| t.join(" ")).collect();
    let src = write(dir.path(), "train.src", &src_lines);
    let tgt = write(dir.path(), "train.tgt", &tgt_lines);
    let config = write(
        dir.path(),
        "run.toml",
        &lines(&[
            "[train]",
            "batch_sentences = 32",
            "max_steps = 500",
            "checkpoint_every = 250",
        ]),
    );
    let ck = dir.path().join("ck");
    let r = run(&[
        "--desk",
        "--config",
        s(&config),
        "train",
        "--train-source",
        s(&src),
        "--train-target",
        s(&tgt),
        "--valid-source",
        s(&src),
        "--valid-target",
        s(&tgt),
        "--checkpoint-dir",
        s(&ck),
        "--mode",
        "embed_concat",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("trained to step 500"));
    let metrics = fs::read_to_string(ck.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 500);
    assert_eq!(metrics.lines().nth(249).unwrap().split('\t').count(), 4);

    let hyp = dir.path().join("hyp");
    let r = run(&[
        "--desk",
        "translate",
        "--checkpoint",
        s(&ck.join("best.ckpt")),
        "--input",
        s(&src),
        "--output",
        s(&hyp),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let r = run(&["score", "--candidate", s(&hyp), "--reference", s(&tgt)]);
    assert_eq!(r.code, 0);
    let bleu: f64 = r.stdout["BLEU = ".len()..]
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(bleu >= 90.0, "{}", r.stdout);

    let r = run(&[
        "--desk",
        "train",
        "--resume",
        s(&ck.join(posnmt::train::checkpoint_name(250))),
        "--train-source",
        s(&src),
        "--train-target",
        s(&tgt),
        "--checkpoint-dir",
        s(&dir.path().join("ck2")),
        "--max-steps",
        "260",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let resumed = fs::read_to_string(dir.path().join("ck2").join("metrics.tsv")).unwrap();
    let first = resumed.lines().next().unwrap();
    assert!(first.starts_with("251\t"));
    let orig_251 = metrics.lines().nth(250).unwrap();
    assert_eq!(first, orig_251);
}
