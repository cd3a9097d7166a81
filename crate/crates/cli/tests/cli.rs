use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use im2tex::config::KEYS;
use im2tex::data::pgm::Pgm;

const TINY: &[&str] = &[
    "--preset", "desk", "-s", "d_model=8", "-s", "cnn_maps=2,2,4,4,8,8", "-s", "embed_dim=4", "-s", "batch_size=4",
    "-s", "validate_every=3", "-s", "decode_max_len=12",
];

fn im2tex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_im2tex"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn gen(dir: &Path, count: usize) -> PathBuf {
    let out = im2tex(&["gen-data", "--preset", "desk", "--seed", "7", "--count", &count.to_string(), "--out", s(dir)]);
    ok(&out);
    dir.join("manifest.tsv")
}

fn train(manifest: &Path, out: &Path, steps: u64, extra: &[&str]) -> Output {
    let steps = format!("max_steps={steps}");
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["-s", &steps, "--train", s(manifest), "--out", s(out)]);
    args.extend_from_slice(extra);
    im2tex(&args)
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible_and_counts_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = im2tex(&["gen-data", "--preset", "desk", "--seed", "7", "--count", "32", "--out", s(&a)]);
    ok(&out);
    gen(&b, 32);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 33);
    assert_eq!(ta, tb);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines = std::fs::read_to_string(a.join("manifest.tsv")).unwrap().lines().count();
    assert!(stdout.starts_with(&format!("count {lines} ")), "{stdout}");
    let histogram: usize = stdout
        .lines()
        .filter(|l| l.starts_with("length"))
        .map(|l| l.split_whitespace().last().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(histogram, 32);
}

#[test]
fn zero_count_writes_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen(dir.path(), 0);
    assert_eq!(std::fs::read_to_string(m).unwrap(), "");
}

#[test]
fn rl_phase_needs_an_mle_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen(&dir.path().join("d"), 4);
    let out = train(&m, &dir.path().join("r"), 2, &["--phase", "rl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));

    let mle = dir.path().join("mle");
    ok(&train(&m, &mle, 3, &[]));
    let rl = dir.path().join("rl");
    let init = mle.join("last.ckpt");
    let out = train(&m, &rl, 2, &["--phase", "rl", "--init", s(&init), "-s", "k_samples=2"]);
    ok(&out);
    let log = std::fs::read_to_string(rl.join("train.tsv")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\trl\t")).count(), 2, "{log}");
}

#[test]
fn usage_and_missing_files_have_stable_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen(&dir.path().join("d"), 2);
    let missing = dir.path().join("none.ckpt");
    assert_eq!(im2tex(&["predict", "--checkpoint", s(&missing), "--manifest", s(&m)]).status.code(), Some(2));
    assert_eq!(train(&m, &dir.path().join("r"), 2, &["-s", "no_such_key=1"]).status.code(), Some(2));
    let absent = dir.path().join("absent.tsv");
    assert_eq!(train(&absent, &dir.path().join("r"), 2, &[]).status.code(), Some(1));
    assert_eq!(im2tex(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_three_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen(&dir.path().join("d"), 8);
    let run = dir.path().join("r");
    ok(&train(&m, &run, 3, &[]));
    let good = std::fs::read(run.join("last.ckpt")).unwrap();
    let out = im2tex(&[
        "train", "--resume", s(&run.join("last.ckpt")), "--train", s(&m), "--out", s(&run),
        "-s", "lr_mle=inf", "-s", "clip_norm=0", "-s", "max_steps=9", "-s", "validate_every=1",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step 3"));
    assert_eq!(std::fs::read(run.join("last.ckpt")).unwrap(), good);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen(&dir.path().join("d"), 12);
    let whole = dir.path().join("whole");
    ok(&train(&m, &whole, 6, &[]));
    let part = dir.path().join("part");
    ok(&train(&m, &part, 3, &[]));
    ok(&im2tex(&["train", "--resume", s(&part.join("last.ckpt")), "--train", s(&m), "--out", s(&part), "-s", "max_steps=6"]));
    assert_eq!(std::fs::read(whole.join("last.ckpt")).unwrap(), std::fs::read(part.join("last.ckpt")).unwrap());
}

#[test]
fn beam_one_predictions_equal_greedy_and_evaluation_of_references_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen(&dir.path().join("d"), 6);
    let run = dir.path().join("r");
    ok(&train(&m, &run, 3, &[]));
    let ck = run.join("last.ckpt");
    let (p1, pg, p5) = (dir.path().join("p1.tsv"), dir.path().join("pg.tsv"), dir.path().join("p5.tsv"));
    ok(&im2tex(&["predict", "--checkpoint", s(&ck), "--manifest", s(&m), "--beam", "1", "--out", s(&p1)]));
    ok(&im2tex(&["predict", "--checkpoint", s(&ck), "--manifest", s(&m), "--greedy", "--out", s(&pg)]));
    ok(&im2tex(&["predict", "--checkpoint", s(&ck), "--manifest", s(&m), "--out", s(&p5)]));
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&pg).unwrap());
    assert_eq!(std::fs::read_to_string(&p5).unwrap().lines().count(), 7);

    let refs = dir.path().join("refs.tsv");
    let mut text = String::from("id\tprediction\n");
    for line in std::fs::read_to_string(&m).unwrap().lines() {
        text.push_str(line);
        text.push('\n');
    }
    std::fs::write(&refs, text).unwrap();
    let out = im2tex(&["evaluate", "--manifest", s(&m), "--predictions", s(&refs)]);
    ok(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "id\tbleu\tedit_distance\texact_match\texact_match_ws");
    assert_eq!(lines.len(), 8);
    for row in &lines[1..7] {
        assert!(row.ends_with("\t1.000000\t1.000000\t1\t1"), "{row}");
    }
    assert_eq!(lines[7], "ALL\t1.000000\t1.000000\t1.000000\t1.000000");
}

#[test]
fn inspect_heatmaps_recover_attention_distributions() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen(&dir.path().join("d"), 4);
    let run = dir.path().join("r");
    ok(&train(&m, &run, 3, &[]));
    let heat = dir.path().join("h");
    let img = dir.path().join("d/images/00001.pgm");
    ok(&im2tex(&["inspect", "--checkpoint", s(&run.join("last.ckpt")), "--image", s(&img), "--out", s(&heat), "--greedy"]));
    let input = Pgm::parse(&std::fs::read(heat.join("input.pgm")).unwrap()).unwrap();
    let meta = std::fs::read_to_string(heat.join("heatmaps.tsv")).unwrap();
    let rows: Vec<&str> = meta.lines().skip(1).collect();
    assert!(!rows.is_empty());
    for row in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        let pgm = Pgm::parse(&std::fs::read(heat.join(cols[2])).unwrap()).unwrap();
        assert_eq!((pgm.width, pgm.height), (input.width, input.height));
        let grid: (usize, usize) = (cols[3].parse().unwrap(), cols[4].parse().unwrap());
        assert_eq!((grid.0 * 8, grid.1 * 8), (pgm.height, pgm.width));
        let scale: f64 = cols[5].parse().unwrap();
        let total: f64 = pgm.samples.iter().map(|&v| v as f64 * scale).sum();
        assert!((total - 1.0).abs() <= 1e-4, "{row}: {total}");
    }
}

#[test]
fn help_lists_every_key_with_both_defaults() {
    let out = im2tex(&["--help"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    for k in KEYS {
        let line = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(k.key))
            .unwrap_or_else(|| panic!("{} missing", k.key));
        let show = |v: &str| if v.is_empty() { "\"\"".to_string() } else { v.to_string() };
        assert!(line.contains(&show(k.paper)) && line.contains(&show(k.desk)), "{line}");
    }
}
