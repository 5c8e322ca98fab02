use std::path::{Path, PathBuf};

use embl::harness::cli::{EXIT_CONTRACT, EXIT_IO, EXIT_OK, EXIT_USAGE};
use embl::harness::cli_dispatch;
use embl::harness::pipeline::DefenseRow;
use embl::harness::report::read_csv;

const TINY: &str = r#"
seed = 3
output_dir = "ROOT/out"
[corpus]
path = "ROOT/corpus.jsonl"
utility_path = "ROOT/utility.jsonl"
[corpus.synth]
authors = 5
books_per_author = 4
sentences_per_book = 10
filler_words = 200
utility_books = 12
[word.sgns]
d = 8
epochs = 1
[sentence]
d_w = 8
epochs = 1
[attack]
n_targets = 7
[attack.mlc]
epochs = 2
[attack.attribute]
classes = 4
n_aux = [2, 4]
n_target = 3
trials = 1
[attack.attribute.baseline]
epochs = 2
[attack.membership.learned]
epochs = 1
[defense]
lambda_w = [0.0, 0.5]
lambda_s = [0.0, 0.5]
[defense.utility]
epochs = 2
"#;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: String,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("c.toml");
        std::fs::write(&cfg, TINY.replace("ROOT", root.to_str().unwrap())).unwrap();
        Run {
            cfg: cfg.to_str().unwrap().to_string(),
            root,
            _dir: dir,
        }
    }

    fn embl(&self, args: &[&str]) -> i32 {
        let mut argv = vec!["embl"];
        argv.extend_from_slice(args);
        argv.extend_from_slice(&["--config", &self.cfg]);
        cli_dispatch(argv)
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.root.join("out").join(rel)
    }
}

fn lines(p: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn end_to_end_produces_every_artifact() {
    let r = Run::new();
    for args in [
        &["corpus", "synth"][..],
        &["corpus", "build"],
        &["train", "word"],
        &["train", "sentence"],
        &["attack", "invert", "--mode", "sparse"],
        &["attack", "invert", "--mode", "mlc"],
        &["attack", "attribute"],
        &["attack", "membership", "--level", "word"],
        &["attack", "membership", "--level", "sentence"],
        &["defend", "sweep", "--kind", "attribute"],
    ] {
        assert_eq!(r.embl(args), EXIT_OK, "{args:?}");
    }
    assert!(r.out("vocab.tsv").exists() && r.out("split.json").exists());

    let rows = lines(&r.out("results/invert_sparse.jsonl"));
    assert_eq!(rows.len(), 7);
    for row in &rows {
        for key in ["target_id", "truth_words", "predicted_words", "precision", "recall", "f1", "mode", "config_hash", "seed"] {
            assert!(row.get(key).is_some(), "missing {key}");
        }
        assert_eq!(row["mode"], "sparse");
    }
    assert!(r.out("results/invert_sparse.config.json").exists());

    let csv_path = r.out("results/defense_attribute.csv");
    assert!(std::fs::read_to_string(&csv_path).unwrap().starts_with("# config: {"));
    let table: Vec<DefenseRow> = read_csv(&csv_path).unwrap();
    // two weights, two aux sizes
    assert_eq!(table.len(), 4);

    let results = r.out("results");
    assert_eq!(cli_dispatch(["embl", "report", "--from", results.to_str().unwrap()]), EXIT_OK);
    for f in ["inversion_summary.csv", "f1_vs_lambda.csv", "advantage_vs_decile.csv", "attribute_summary.csv"] {
        assert!(results.join("report").join(f).exists(), "{f}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let r = Run::new();
    let mut first = Vec::new();
    for pass in 0..2 {
        for args in [&["corpus", "synth"][..], &["train", "sentence"], &["attack", "invert", "--mode", "sparse"]] {
            assert_eq!(r.embl(args), EXIT_OK);
        }
        let got = (std::fs::read(r.out("sentence.embl")).unwrap(), std::fs::read(r.out("results/invert_sparse.jsonl")).unwrap());
        if pass == 0 {
            first.push(got);
        } else {
            assert!(first[0] == got);
        }
    }
}

#[test]
fn exit_codes_follow_error_classes() {
    let r = Run::new();
    assert_eq!(r.embl(&["attack", "invert", "--mode", "bogus"]), EXIT_USAGE);
    // no corpus on disk yet
    assert_eq!(r.embl(&["train", "word"]), EXIT_IO);
    assert_eq!(r.embl(&["corpus", "synth"]), EXIT_OK);
    assert_eq!(r.embl(&["train", "sentence"]), EXIT_OK);

    // a checkpoint from a different corpus
    let other = Run::new();
    std::fs::write(&other.cfg, TINY.replace("ROOT", other.root.to_str().unwrap()).replace("seed = 3", "seed = 4")).unwrap();
    assert_eq!(other.embl(&["corpus", "synth"]), EXIT_OK);
    std::fs::create_dir_all(other.out("")).unwrap();
    std::fs::copy(r.out("sentence.embl"), other.out("sentence.embl")).unwrap();
    assert_eq!(other.embl(&["attack", "invert", "--mode", "sparse"]), EXIT_CONTRACT);

    let mut bytes = std::fs::read(r.out("sentence.embl")).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(r.out("sentence.embl"), bytes).unwrap();
    assert_eq!(r.embl(&["attack", "invert", "--mode", "sparse"]), EXIT_IO);
}
