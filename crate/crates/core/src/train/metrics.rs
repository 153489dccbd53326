//! Regression metrics and the evaluation report: per-crop and pooled
//! R²/RMSE/MAE tables plus scatter pairs for external plotting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("need at least 2 observations for r2, got {n}")]
    TooShort { n: usize },
    #[error("r2 undefined: observations are constant (zero variance)")]
    ConstantObs,
    #[error("length mismatch: {a} observations vs {b} predictions")]
    LengthMismatch { a: usize, b: usize },
    #[error("empty input")]
    Empty,
}

fn check_lengths(obs: &[f64], pred: &[f64]) -> Result<(), MetricError> {
    if obs.len() != pred.len() {
        return Err(MetricError::LengthMismatch {
            a: obs.len(),
            b: pred.len(),
        });
    }
    if obs.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Coefficient of determination: 1 − Σ(o−p)² / Σ(o−ō)².
pub fn r2(obs: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    check_lengths(obs, pred)?;
    if obs.len() < 2 {
        return Err(MetricError::TooShort { n: obs.len() });
    }
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let ss_tot: f64 = obs.iter().map(|o| (o - mean) * (o - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ConstantObs);
    }
    let ss_res: f64 = obs
        .iter()
        .zip(pred)
        .map(|(o, p)| (o - p) * (o - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse_mae(obs: &[f64], pred: &[f64]) -> Result<(f64, f64), MetricError> {
    check_lengths(obs, pred)?;
    let n = obs.len() as f64;
    let mut sq = 0.0;
    let mut ab = 0.0;
    for (o, p) in obs.iter().zip(pred) {
        let d = o - p;
        sq += d * d;
        ab += d.abs();
    }
    Ok(((sq / n).sqrt(), ab / n))
}

/// One evaluated (sample, prediction) pair with its identity columns.
#[derive(Debug, Clone)]
pub struct ScatterRow {
    pub observed: f64,
    pub predicted: f64,
    pub crop: String,
    pub year: i32,
    pub county: String,
    pub split: String,
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub crop: String,
    pub split: String,
    pub n: usize,
    /// None when R² is undefined for the group (constant or singleton obs).
    pub r2: Option<f64>,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub scatter: Vec<ScatterRow>,
}

impl EvalReport {
    /// Builds per-crop rows, a pooled row, and a macro-averaged row for
    /// each split present, in deterministic order.
    pub fn from_scatter(scatter: Vec<ScatterRow>) -> Self {
        let mut splits: Vec<String> = Vec::new();
        for r in &scatter {
            if !splits.contains(&r.split) {
                splits.push(r.split.clone());
            }
        }
        let mut rows = Vec::new();
        for split in &splits {
            let in_split: Vec<&ScatterRow> =
                scatter.iter().filter(|r| &r.split == split).collect();
            let mut by_crop: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for r in &in_split {
                let e = by_crop.entry(r.crop.as_str()).or_default();
                e.0.push(r.observed);
                e.1.push(r.predicted);
            }
            let mut crop_r2 = Vec::new();
            let mut crop_rmse = Vec::new();
            let mut crop_mae = Vec::new();
            for (crop, (obs, pred)) in &by_crop {
                let (rmse, mae) = rmse_mae(obs, pred).expect("nonempty group");
                let r = r2(obs, pred).ok();
                if let Some(v) = r {
                    crop_r2.push(v);
                }
                crop_rmse.push(rmse);
                crop_mae.push(mae);
                rows.push(MetricRow {
                    crop: crop.to_string(),
                    split: split.clone(),
                    n: obs.len(),
                    r2: r,
                    rmse,
                    mae,
                });
            }
            let obs: Vec<f64> = in_split.iter().map(|r| r.observed).collect();
            let pred: Vec<f64> = in_split.iter().map(|r| r.predicted).collect();
            let (rmse, mae) = rmse_mae(&obs, &pred).expect("nonempty split");
            rows.push(MetricRow {
                crop: "ALL (pooled)".into(),
                split: split.clone(),
                n: obs.len(),
                r2: r2(&obs, &pred).ok(),
                rmse,
                mae,
            });
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            rows.push(MetricRow {
                crop: "ALL (macro)".into(),
                split: split.clone(),
                n: obs.len(),
                r2: if crop_r2.is_empty() {
                    None
                } else {
                    Some(mean(&crop_r2))
                },
                rmse: mean(&crop_rmse),
                mae: mean(&crop_mae),
            });
        }
        EvalReport { rows, scatter }
    }

    /// Pooled metric row for one split, if present.
    pub fn pooled(&self, split: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.crop == "ALL (pooled)")
    }
}

fn fmt_r2(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "nan".into(),
    }
}

/// Writes `metrics.tsv` (tab-separated, with header) and one
/// `scatter_<split>.tsv` per split (one data line per prediction, no
/// header). Identical reports produce identical bytes.
pub fn write_report(report: &EvalReport, out_dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mpath = out_dir.join("metrics.tsv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&mpath)?);
    writeln!(f, "crop\tsplit\tn\tr2\trmse_t_ha\tmae_t_ha")?;
    for r in &report.rows {
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            r.crop,
            r.split,
            r.n,
            fmt_r2(r.r2),
            r.rmse,
            r.mae
        )?;
    }
    f.into_inner()?.sync_all().ok();
    written.push(mpath);

    let mut splits: Vec<&str> = Vec::new();
    for r in &report.scatter {
        if !splits.contains(&r.split.as_str()) {
            splits.push(&r.split);
        }
    }
    for split in splits {
        let spath = out_dir.join(format!("scatter_{split}.tsv"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&spath)?);
        for r in report.scatter.iter().filter(|r| r.split == split) {
            writeln!(
                f,
                "{:.6}\t{:.6}\t{}\t{}\t{}",
                r.observed, r.predicted, r.crop, r.year, r.county
            )?;
        }
        f.into_inner()?.sync_all().ok();
        written.push(spath);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn r2_worked_examples() {
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        let mean = [1.0, 2.0, 3.0].iter().sum::<f64>() / 3.0;
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[mean, mean, mean]).unwrap(), 0.0);
        let v = r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15, "got {v}");
        assert_eq!(
            r2(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(MetricError::ConstantObs)
        );
        assert_eq!(r2(&[1.0], &[1.0]), Err(MetricError::TooShort { n: 1 }));
    }

    #[test]
    fn rmse_mae_worked_examples() {
        assert_eq!(rmse_mae(&[5.0, 6.0], &[5.0, 6.0]).unwrap(), (0.0, 0.0));
        let (rmse, mae) = rmse_mae(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((rmse - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((mae - 3.5).abs() < 1e-15);
        assert_eq!(rmse_mae(&[], &[]), Err(MetricError::Empty));
        assert_eq!(
            rmse_mae(&[1.0], &[1.0, 2.0]),
            Err(MetricError::LengthMismatch { a: 1, b: 2 })
        );
    }

    #[test]
    fn metrics_match_brute_force_on_1000_random_vectors() {
        let mut r = rng::stream(0x6e7, "metric-oracle", &[]);
        for trial in 0..1000 {
            let n = 2 + rng::below(&mut r, 40) as usize;
            let obs: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r, -50.0, 50.0)).collect();
            let pred: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r, -50.0, 50.0)).collect();
            // Brute force with independent arithmetic.
            let mean: f64 = obs.iter().sum::<f64>() / n as f64;
            let mut ss_res = 0.0;
            let mut ss_tot = 0.0;
            let mut sq = 0.0;
            let mut ab = 0.0;
            for i in 0..n {
                ss_res += (obs[i] - pred[i]).powi(2);
                ss_tot += (obs[i] - mean).powi(2);
                sq += (obs[i] - pred[i]).powi(2);
                ab += (obs[i] - pred[i]).abs();
            }
            let want_r2 = 1.0 - ss_res / ss_tot;
            let want_rmse = (sq / n as f64).sqrt();
            let want_mae = ab / n as f64;
            let got_r2 = r2(&obs, &pred).unwrap();
            let (got_rmse, got_mae) = rmse_mae(&obs, &pred).unwrap();
            assert!((got_r2 - want_r2).abs() <= 1e-9, "trial {trial} r2");
            assert!((got_rmse - want_rmse).abs() <= 1e-9, "trial {trial} rmse");
            assert!((got_mae - want_mae).abs() <= 1e-9, "trial {trial} mae");
            assert!(got_rmse >= got_mae - 1e-15, "power-mean inequality");
        }
    }

    fn demo_report() -> EvalReport {
        let mut scatter = Vec::new();
        for (i, crop) in ["rice", "almonds", "wheat"].iter().enumerate() {
            for k in 0..4 {
                scatter.push(ScatterRow {
                    observed: 2.0 * i as f64 + k as f64,
                    predicted: 2.0 * i as f64 + k as f64 * 0.9,
                    crop: crop.to_string(),
                    year: 2021 + (k % 2),
                    county: format!("c{k}"),
                    split: "test".into(),
                });
            }
        }
        EvalReport::from_scatter(scatter)
    }

    #[test]
    fn report_has_per_crop_plus_overall_rows() {
        let rep = demo_report();
        let test_rows: Vec<_> = rep.rows.iter().filter(|r| r.split == "test").collect();
        assert_eq!(test_rows.len(), 3 + 2, "3 crops + pooled + macro");
        assert!(rep.pooled("test").is_some());
        for r in &rep.rows {
            assert!(r.rmse >= r.mae && r.mae >= 0.0);
        }
        let n_total: usize = rep
            .rows
            .iter()
            .filter(|r| r.split == "test" && !r.crop.starts_with("ALL"))
            .map(|r| r.n)
            .sum();
        assert_eq!(n_total, rep.scatter.len());
    }

    #[test]
    fn report_bytes_are_deterministic() {
        let rep = demo_report();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_report(&rep, d1.path()).unwrap();
        write_report(&rep, d2.path()).unwrap();
        for name in ["metrics.tsv", "scatter_test.tsv"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
            assert!(!a.is_empty());
        }
        let metrics = std::fs::read_to_string(d1.path().join("metrics.tsv")).unwrap();
        assert!(metrics.starts_with("crop\tsplit\tn\tr2\trmse_t_ha\tmae_t_ha\n"));
        let scatter = std::fs::read_to_string(d1.path().join("scatter_test.tsv")).unwrap();
        assert_eq!(scatter.lines().count(), 12);
        let first = scatter.lines().next().unwrap();
        assert_eq!(first.split('\t').count(), 5);
    }
}
