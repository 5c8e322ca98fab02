//! The whole command-line flow in a temporary directory: synthesise a
//! corpus, train, attack, defend, report.
//!
//!     cargo run --release --example cli_pipeline

use embl::harness::cli_dispatch;

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    let cfg = include_str!("../../../configs/small.toml")
        .replace("out/small", &root.join("out").display().to_string())
        .replace("data/", &format!("{}/", root.display()));
    let cfg_path = root.join("small.toml");
    std::fs::write(&cfg_path, cfg).expect("write config");
    let c = cfg_path.to_str().unwrap();
    let results = root.join("out/results");
    let steps: Vec<Vec<&str>> = vec![
        vec!["corpus", "synth", "--config", c],
        vec!["train", "word", "--config", c],
        vec!["train", "sentence", "--config", c],
        vec!["attack", "invert", "--mode", "sparse", "--config", c],
        vec!["attack", "invert", "--mode", "mlc", "--config", c],
        vec!["attack", "attribute", "--config", c],
        vec!["attack", "membership", "--level", "word", "--config", c],
        vec!["attack", "membership", "--level", "sentence", "--config", c],
        vec!["defend", "sweep", "--kind", "word", "--config", c],
        vec!["report", "--from", results.to_str().unwrap()],
    ];
    for args in steps {
        println!("$ embl {}", args.join(" "));
        let code = cli_dispatch(std::iter::once("embl").chain(args.iter().copied()));
        assert_eq!(code, 0, "exit code {code}");
    }
    let mut names: Vec<String> = std::fs::read_dir(&results).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    println!("results: {}", names.join(" "));
}
