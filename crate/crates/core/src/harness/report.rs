//! Result files and the aggregate report.
//!
//! JSON-lines results get a `<stem>.config.json` sidecar holding the run
//! config; CSV files carry it on a leading `# config: ` comment line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::defense::isotonic_nonincreasing;
use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::io::{read_text, write_atomic};
use super::pipeline::{AttributeRow, DefenseRow, InversionRow, MembershipRow};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

pub fn jsonl_string<T: Serialize>(rows: &[T]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("row serializes"));
        out.push('\n');
    }
    out
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    path.with_file_name(format!("{stem}.config.json"))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T], cfg: &ExperimentConfig) -> Result<()> {
    write_atomic(&sidecar_path(path), cfg.embedded_json().as_bytes())?;
    write_atomic(path, jsonl_string(rows).as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

/// CSV text with an optional leading comment line.
pub fn csv_string<T: Serialize>(rows: &[T], comment: Option<&str>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(format!("csv: {e}")))?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Parse(format!("csv: {e}")))?).expect("csv is UTF-8");
    Ok(match comment {
        Some(c) => format!("# {c}\n{body}"),
        None => body,
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], cfg: &ExperimentConfig) -> Result<()> {
    let text = csv_string(rows, Some(&format!("config: {}", cfg.embedded_json())))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSummaryRow {
    pub mode: String,
    pub n_targets: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda_kind: String,
    pub metric: String,
    pub lambda: f64,
    pub attack_metric: f64,
    /// Non-increasing least-squares fit of `attack_metric` over lambda.
    pub attack_isotonic: f64,
    pub utility_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    pub level: String,
    pub metric: String,
    pub bucket: usize,
    pub advantage: f64,
    pub n_member: usize,
    pub n_nonmember: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSummaryRow {
    pub model: String,
    pub n_aux: usize,
    pub trials: usize,
    pub top1: f64,
    pub top5: f64,
}

fn files_with(dir: &Path, prefix: &str, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with(prefix) && name.ends_with(ext) && !name.ends_with(".config.json") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Reads every result file in `from` and writes the aggregate CSVs into
/// `out`. Returns the written paths.
pub fn build_report(from: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    if !from.is_dir() {
        return Err(Error::io(from, std::io::Error::new(std::io::ErrorKind::NotFound, "results directory not found")));
    }
    let mut written = Vec::new();
    let mut emit = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        write_atomic(&p, text.as_bytes())?;
        written.push(p);
        Ok(())
    };

    let mut inv = Vec::new();
    for p in files_with(from, "invert_", ".jsonl")? {
        let rows: Vec<InversionRow> = read_jsonl(&p)?;
        if let Some(first) = rows.first() {
            inv.push(InversionSummaryRow {
                mode: first.mode.clone(),
                n_targets: rows.len(),
                precision: mean(rows.iter().map(|r| r.precision)),
                recall: mean(rows.iter().map(|r| r.recall)),
                f1: mean(rows.iter().map(|r| r.f1)),
                config_hash: first.config_hash.clone(),
            });
        }
    }
    emit("inversion_summary.csv", csv_string(&inv, None)?)?;

    let mut lam = Vec::new();
    for p in files_with(from, "defense_", ".csv")? {
        let rows: Vec<DefenseRow> = read_csv(&p)?;
        let mut by: BTreeMap<(String, String), Vec<&DefenseRow>> = BTreeMap::new();
        for r in &rows {
            let kind = serde_json::to_value(r.lambda_kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            by.entry((kind, r.metric.clone())).or_default().push(r);
        }
        for ((kind, metric), rs) in by {
            let mut lambdas: Vec<f64> = rs.iter().map(|r| r.lambda).collect();
            lambdas.sort_by(f64::total_cmp);
            lambdas.dedup();
            let attack: Vec<f64> = lambdas.iter().map(|l| mean(rs.iter().filter(|r| r.lambda == *l).map(|r| r.attack_metric))).collect();
            let smooth = isotonic_nonincreasing(&attack);
            for (i, l) in lambdas.iter().enumerate() {
                lam.push(LambdaRow {
                    lambda_kind: kind.clone(),
                    metric: metric.clone(),
                    lambda: *l,
                    attack_metric: attack[i],
                    attack_isotonic: smooth[i],
                    utility_accuracy: mean(rs.iter().filter(|r| r.lambda == *l).map(|r| r.utility_accuracy)),
                });
            }
        }
    }
    emit("f1_vs_lambda.csv", csv_string(&lam, None)?)?;

    let mut dec = Vec::new();
    for p in files_with(from, "membership_", ".csv")? {
        let rows: Vec<MembershipRow> = read_csv(&p)?;
        for r in rows {
            if let Some(b) = r.bucket {
                dec.push(DecileRow {
                    level: r.level,
                    metric: r.metric,
                    bucket: b,
                    advantage: r.advantage,
                    n_member: r.n_member,
                    n_nonmember: r.n_nonmember,
                });
            }
        }
    }
    emit("advantage_vs_decile.csv", csv_string(&dec, None)?)?;

    let mut att = Vec::new();
    for p in files_with(from, "attribute", ".csv")? {
        let rows: Vec<AttributeRow> = read_csv(&p)?;
        let mut by: BTreeMap<(String, usize), Vec<&AttributeRow>> = BTreeMap::new();
        for r in &rows {
            by.entry((r.model.clone(), r.n_aux)).or_default().push(r);
        }
        for ((model, n_aux), rs) in by {
            att.push(AttributeSummaryRow {
                model,
                n_aux,
                trials: rs.len(),
                top1: mean(rs.iter().map(|r| r.top1)),
                top5: mean(rs.iter().map(|r| r.top5)),
            });
        }
    }
    emit("attribute_summary.csv", csv_string(&att, None)?)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::LambdaKind;

    #[test]
    fn csv_round_trip_skips_the_config_line() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let rows = vec![
            DefenseRow {
                lambda_kind: LambdaKind::Word,
                lambda: 0.0,
                seed: 1,
                attack_metric: 0.5,
                utility_accuracy: 0.9,
                metric: "mlc_f1".into(),
                config_hash: cfg.hash(),
            },
            DefenseRow {
                lambda_kind: LambdaKind::Word,
                lambda: 0.4,
                seed: 1,
                attack_metric: 0.3,
                utility_accuracy: 0.85,
                metric: "mlc_f1".into(),
                config_hash: cfg.hash(),
            },
        ];
        let p = dir.path().join("defense_word.csv");
        write_csv(&p, &rows, &cfg).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# config: {"));
        assert!(text.lines().nth(1).unwrap().starts_with("lambda_kind,lambda,seed,attack_metric,utility_accuracy"));
        assert_eq!(read_csv::<DefenseRow>(&p).unwrap(), rows);

        let written = build_report(dir.path(), &dir.path().join("report")).unwrap();
        assert_eq!(written.len(), 4);
        let lam: Vec<LambdaRow> = read_csv(&dir.path().join("report/f1_vs_lambda.csv")).unwrap();
        assert_eq!(lam.len(), 2);
        assert_eq!(lam[1].attack_isotonic, 0.3);
    }

    #[test]
    fn missing_results_dir_is_io() {
        let e = build_report(Path::new("/nonexistent/results"), Path::new("/tmp/x")).unwrap_err();
        assert!(e.is_io_class());
    }
}
