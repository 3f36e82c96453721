use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
seed = 3
world.english_vocab = 60
world.foreign_vocab = 60
world.corpus_size = 120
world.train_queries = 30
world.eval_queries = 20
world.parallel_pairs = 60
world.negatives_per_query = 4
world.distractors_per_query = 2
";

fn xlcolbert(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xlcolbert"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn xlcolbert")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = xlcolbert(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.conf"), SMALL).unwrap();
    ok(dir.path(), &["gen-synthetic", "--config", "small.conf", "--out", "data"]);
    dir
}

fn teacher(dir: &Path) {
    ok(dir, &["train-teacher", "--config", "small.conf", "--data", "data", "--out", "teacher.ckpt"]);
}

#[test]
fn distill_xor_requires_a_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let out = xlcolbert(
        dir.path(),
        &["distill-xor", "--data", "d", "--checkpoint", "s.ckpt", "--out", "o.ckpt"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--teacher-checkpoint"));
}

#[test]
fn gen_synthetic_is_deterministic() {
    let dir = setup();
    ok(dir.path(), &["gen-synthetic", "--config", "small.conf", "--out", "again"]);
    for file in ["corpus.tsv", "triples_en.tsv", "triples_xl.tsv", "parallel.tsv", "eval.tsv", "world.conf"] {
        let body = |d: &str| {
            // Provenance headers name the output directory; compare the rest.
            fs::read_to_string(dir.path().join(d).join(file))
                .unwrap()
                .lines()
                .filter(|l| !l.starts_with("# command"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(body("data"), body("again"), "{file}");
    }
    let header = fs::read_to_string(dir.path().join("data/corpus.tsv")).unwrap();
    assert!(header.contains("# config = small.conf"));
    assert!(header.contains("# seed = 3"));
}

#[test]
fn seed_flag_overrides_config_file() {
    let dir = setup();
    ok(dir.path(), &["gen-synthetic", "--config", "small.conf", "--seed", "4", "--out", "other"]);
    let world = fs::read_to_string(dir.path().join("other/world.conf")).unwrap();
    assert!(world.contains("seed = 4"));
    assert_ne!(
        fs::read_to_string(dir.path().join("data/corpus.tsv")).unwrap(),
        fs::read_to_string(dir.path().join("other/corpus.tsv")).unwrap()
    );
}

#[test]
fn train_distill_and_eval() {
    let dir = setup();
    let d = dir.path();
    teacher(d);
    ok(d, &["train-baseline", "--config", "small.conf", "--data", "data", "--checkpoint", "teacher.ckpt", "--out", "baseline.ckpt"]);
    ok(d, &[
        "distill-pc", "--config", "small.conf", "--data", "data", "--checkpoint", "baseline.ckpt",
        "--teacher-checkpoint", "teacher.ckpt", "--out", "pc.ckpt",
    ]);
    ok(d, &[
        "distill-xor", "--config", "small.conf", "--data", "data", "--checkpoint", "pc.ckpt",
        "--teacher-checkpoint", "teacher.ckpt", "--out", "full.ckpt", "--tau", "3",
    ]);
    let ckpt = fs::read_to_string(d.join("full.ckpt")).unwrap();
    assert!(ckpt.contains("lineage = random(seed=3) > finetune_triples:teacher > finetune_triples:baseline > kd_representation:kd_pc > kd_relevance:kd_xor"));
    assert!(ckpt.contains("provenance = seed = 3"));
    assert!(d.join("full.log").exists());

    let report = ok(d, &[
        "eval", "--config", "small.conf", "--data", "data", "--checkpoint", "teacher=teacher.ckpt",
        "--checkpoint", "full=full.ckpt", "--budget", "300", "--out", "report.txt",
    ]);
    assert!(report.contains("R@0.3kt"));
    assert!(report.lines().any(|l| l.starts_with("teacher")));
    assert!(report.lines().any(|l| l.starts_with("full")));
    assert_eq!(fs::read_to_string(d.join("report.txt")).unwrap(), report);
}

#[test]
fn training_is_reproducible() {
    let dir = setup();
    teacher(dir.path());
    ok(dir.path(), &["train-teacher", "--config", "small.conf", "--data", "data", "--out", "again.ckpt"]);
    let body = |f: &str| {
        fs::read_to_string(dir.path().join(f))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("provenance = command"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(body("teacher.ckpt"), body("again.ckpt"));
}

#[test]
fn search_rejects_a_foreign_encoder() {
    let dir = setup();
    let d = dir.path();
    teacher(d);
    ok(d, &["train-baseline", "--config", "small.conf", "--data", "data", "--checkpoint", "teacher.ckpt", "--out", "baseline.ckpt"]);
    ok(d, &["index", "--config", "small.conf", "--data", "data", "--checkpoint", "teacher.ckpt", "--out", "corpus.idx"]);

    let hits = ok(d, &["search", "--index", "corpus.idx", "--checkpoint", "teacher.ckpt", "--query", "1 2 3", "--k", "4"]);
    assert_eq!(hits.lines().count(), 5);

    let out = xlcolbert(d, &["search", "--index", "corpus.idx", "--checkpoint", "baseline.ckpt", "--query", "1 2 3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint mismatch"));
}

#[test]
fn align_identity_pair() {
    let dir = setup();
    teacher(dir.path());
    let out = ok(dir.path(), &["align", "--checkpoint", "teacher.ckpt", "--english", "5 9 2 7", "--foreign", "5 9 2 7"]);
    assert!(out.lines().any(|l| l == "permutation: 0 1 2 3"), "{out}");
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = setup();
    teacher(dir.path());
    let path = dir.path().join("teacher.ckpt");
    let text = fs::read_to_string(&path).unwrap();
    let at = text.find("[projection]\n").unwrap() + "[projection]\n".len();
    let end = at + text[at..].find(' ').unwrap();
    fs::write(&path, format!("{}0e0{}", &text[..at], &text[end..])).unwrap();
    let out = xlcolbert(dir.path(), &["align", "--checkpoint", "teacher.ckpt", "--english", "1", "--foreign", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt"));
}
