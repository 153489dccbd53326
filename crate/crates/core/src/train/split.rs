//! Year-wise data splits: held-out test years, contiguous chronological
//! cross-validation folds over the remaining years, and the two training
//! drivers (cross-validated and fixed-split).

use super::metrics::{rmse_mae, EvalReport, ScatterRow};
use super::{Prepared, TrainConfig, TrainError, Trainer};
use crate::data::CountyCropSample;
use crate::model::ModelConfig;
use std::collections::BTreeSet;

/// A full split of the available years: which years are held out for the
/// final test and how the remaining years are grouped into validation folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub test_years: Vec<i32>,
    pub folds: Vec<Vec<i32>>,
}

impl SplitPlan {
    /// Every non-test year in chronological order.
    pub fn non_test_years(&self) -> Vec<i32> {
        let mut ys: Vec<i32> = self.folds.iter().flatten().copied().collect();
        ys.sort_unstable();
        ys
    }

    /// Checks the invariants the rest of the pipeline relies on: folds are
    /// pairwise disjoint and no fold year is a test year.
    pub fn audit(&self) -> Result<(), TrainError> {
        let test: BTreeSet<i32> = self.test_years.iter().copied().collect();
        let mut seen = BTreeSet::new();
        for (i, fold) in self.folds.iter().enumerate() {
            for &y in fold {
                if test.contains(&y) {
                    return Err(TrainError::BadConfig(format!(
                        "split hygiene: test year {y} appears in fold {i}"
                    )));
                }
                if !seen.insert(y) {
                    return Err(TrainError::BadConfig(format!(
                        "split hygiene: year {y} appears in two folds"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Partitions the non-test years into `n_folds` contiguous chronological
/// groups. When the years do not divide evenly the earlier folds take one
/// extra year, e.g. 13 years in 5 folds gives sizes 3,3,3,2,2.
pub fn make_folds(
    years_present: &[i32],
    test_years: &[i32],
    n_folds: usize,
) -> Result<SplitPlan, TrainError> {
    let test: BTreeSet<i32> = test_years.iter().copied().collect();
    let mut rest: Vec<i32> = years_present
        .iter()
        .copied()
        .collect::<BTreeSet<i32>>()
        .into_iter()
        .filter(|y| !test.contains(y))
        .collect();
    rest.sort_unstable();
    if n_folds == 0 {
        return Err(TrainError::BadConfig("fold count must be >= 1".into()));
    }
    if rest.len() < n_folds {
        return Err(TrainError::TooFewYears {
            non_test: rest.len(),
            folds: n_folds,
        });
    }
    let base = rest.len() / n_folds;
    let rem = rest.len() % n_folds;
    let mut folds = Vec::with_capacity(n_folds);
    let mut start = 0;
    for f in 0..n_folds {
        let len = base + usize::from(f < rem);
        folds.push(rest[start..start + len].to_vec());
        start += len;
    }
    let plan = SplitPlan {
        test_years: {
            let mut t: Vec<i32> = test.into_iter().collect();
            t.sort_unstable();
            t
        },
        folds,
    };
    plan.audit()?;
    Ok(plan)
}

fn refs_for_years<'a>(samples: &'a [CountyCropSample], years: &[i32]) -> Vec<&'a CountyCropSample> {
    let set: BTreeSet<i32> = years.iter().copied().collect();
    samples.iter().filter(|s| set.contains(&s.year)).collect()
}

fn scatter_rows(set: &[Prepared], preds: &[f64], split: &str) -> Vec<ScatterRow> {
    set.iter()
        .zip(preds)
        .map(|(p, &pred)| ScatterRow {
            observed: p.y_raw,
            predicted: pred,
            crop: p.crop_name.clone(),
            year: p.year,
            county: p.county.clone(),
            split: split.to_string(),
        })
        .collect()
}

/// One cross-validation fold after training: its year assignment, the
/// validation RMSE trace, and the validation report at the chosen epoch.
#[derive(Debug)]
pub struct FoldRun {
    pub fold: usize,
    pub train_years: Vec<i32>,
    pub val_years: Vec<i32>,
    pub val_rmse_by_epoch: Vec<f64>,
    pub report: EvalReport,
}

/// Everything `run_cv` produces: the split, per-fold traces, the epoch
/// count selected by validation, the held-out test report, and the final
/// trainer (for checkpointing).
pub struct CvOutcome {
    pub plan: SplitPlan,
    pub folds: Vec<FoldRun>,
    pub chosen_epochs: usize,
    pub test_report: EvalReport,
    pub trainer: Trainer,
}

/// Year-wise cross-validation: trains one model per fold, picks the epoch
/// count with the lowest mean validation RMSE, retrains on all non-test
/// years for that many epochs, and evaluates once on the test years.
pub fn run_cv(
    samples: &[CountyCropSample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    test_years: &[i32],
    n_folds: usize,
    log: &mut dyn FnMut(&str),
) -> Result<CvOutcome, TrainError> {
    let years_present: Vec<i32> = samples.iter().map(|s| s.year).collect();
    let plan = make_folds(&years_present, test_years, n_folds)?;
    let non_test = plan.non_test_years();

    let mut fold_traces: Vec<Vec<f64>> = Vec::new();
    let mut fold_preds: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut fold_sets: Vec<(Vec<i32>, Vec<i32>, Vec<Prepared>)> = Vec::new();

    for (f, val_years) in plan.folds.iter().enumerate() {
        let val_set: BTreeSet<i32> = val_years.iter().copied().collect();
        let train_years: Vec<i32> = non_test
            .iter()
            .copied()
            .filter(|y| !val_set.contains(y))
            .collect();
        let train_refs = refs_for_years(samples, &train_years);
        let val_refs = refs_for_years(samples, val_years);
        if val_refs.is_empty() {
            return Err(TrainError::NoSamples(format!(
                "validation fold {f} (years {val_years:?})"
            )));
        }
        let mut tr = Trainer::new(model_cfg.clone(), train_cfg.clone(), &train_refs)?;
        let val_prepared = tr.prepare(&val_refs)?;
        let mut rmses = Vec::with_capacity(train_cfg.epochs);
        let mut preds_by_epoch = Vec::with_capacity(train_cfg.epochs);
        for e in 0..train_cfg.epochs {
            let loss = tr.run_epoch(e)?;
            let preds = tr.predictions(&val_prepared)?;
            let obs: Vec<f64> = val_prepared.iter().map(|p| p.y_raw).collect();
            let (rmse, _) = rmse_mae(&obs, &preds)?;
            log(&format!(
                "fold {f} epoch {e:>3}  train_loss {loss:.6}  val_rmse {rmse:.4}"
            ));
            rmses.push(rmse);
            preds_by_epoch.push(preds);
        }
        fold_traces.push(rmses);
        fold_preds.push(preds_by_epoch);
        fold_sets.push((train_years, val_years.clone(), val_prepared));
    }

    // Epoch with the lowest mean validation RMSE across folds; earliest wins ties.
    let mut chosen = 0usize;
    let mut best = f64::INFINITY;
    for e in 0..train_cfg.epochs {
        let mean: f64 =
            fold_traces.iter().map(|t| t[e]).sum::<f64>() / fold_traces.len() as f64;
        if mean < best {
            best = mean;
            chosen = e;
        }
    }
    let chosen_epochs = chosen + 1;
    log(&format!(
        "selected {chosen_epochs} epoch(s): mean val rmse {best:.4}"
    ));

    let mut folds = Vec::with_capacity(plan.folds.len());
    for (f, (train_years, val_years, val_prepared)) in fold_sets.into_iter().enumerate() {
        let rows = scatter_rows(&val_prepared, &fold_preds[f][chosen], "val");
        folds.push(FoldRun {
            fold: f,
            train_years,
            val_years,
            val_rmse_by_epoch: std::mem::take(&mut fold_traces[f]),
            report: EvalReport::from_scatter(rows),
        });
    }

    let train_refs = refs_for_years(samples, &non_test);
    let test_refs = refs_for_years(samples, &plan.test_years);
    if test_refs.is_empty() {
        return Err(TrainError::NoSamples(format!(
            "test years {:?}",
            plan.test_years
        )));
    }
    let mut final_tr = Trainer::new(model_cfg.clone(), train_cfg.clone(), &train_refs)?;
    for e in 0..chosen_epochs {
        let loss = final_tr.run_epoch(e)?;
        log(&format!("final epoch {e:>3}  train_loss {loss:.6}"));
    }
    let train_prepared = final_tr.prepare(&train_refs)?;
    let test_prepared = final_tr.prepare(&test_refs)?;
    let mut rows = scatter_rows(&train_prepared, &final_tr.predictions(&train_prepared)?, "train");
    rows.extend(scatter_rows(&test_prepared, &final_tr.predictions(&test_prepared)?, "test"));
    let test_report = EvalReport::from_scatter(rows);

    Ok(CvOutcome {
        plan,
        folds,
        chosen_epochs,
        test_report,
        trainer: final_tr,
    })
}

/// Result of a single fixed-split training run with best-epoch selection
/// on the validation years.
pub struct FixedOutcome {
    pub best_epoch: usize,
    pub val_rmse_by_epoch: Vec<f64>,
    pub report: EvalReport,
    pub trainer: Trainer,
}

/// Trains once on `train_years`, tracks validation RMSE each epoch, keeps
/// the best-validation parameters, and reports train/val/test metrics with
/// those parameters.
pub fn run_fixed(
    samples: &[CountyCropSample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_years: &[i32],
    val_years: &[i32],
    test_years: &[i32],
    log: &mut dyn FnMut(&str),
) -> Result<FixedOutcome, TrainError> {
    for (a, b, what) in [
        (train_years, val_years, "train/val"),
        (train_years, test_years, "train/test"),
        (val_years, test_years, "val/test"),
    ] {
        let sa: BTreeSet<i32> = a.iter().copied().collect();
        if b.iter().any(|y| sa.contains(y)) {
            return Err(TrainError::BadConfig(format!(
                "split hygiene: {what} years overlap"
            )));
        }
    }
    let train_refs = refs_for_years(samples, train_years);
    let val_refs = refs_for_years(samples, val_years);
    let test_refs = refs_for_years(samples, test_years);
    for (refs, what) in [(&train_refs, "train"), (&val_refs, "val"), (&test_refs, "test")] {
        if refs.is_empty() {
            return Err(TrainError::NoSamples(format!("{what} years")));
        }
    }
    let mut tr = Trainer::new(model_cfg.clone(), train_cfg.clone(), &train_refs)?;
    let val_prepared = tr.prepare(&val_refs)?;
    let val_obs: Vec<f64> = val_prepared.iter().map(|p| p.y_raw).collect();

    let mut best_epoch = 0usize;
    let mut best_rmse = f64::INFINITY;
    let mut best_params = tr.params.clone();
    let mut trace = Vec::with_capacity(train_cfg.epochs);
    for e in 0..train_cfg.epochs {
        let loss = tr.run_epoch(e)?;
        let preds = tr.predictions(&val_prepared)?;
        let (rmse, _) = rmse_mae(&val_obs, &preds)?;
        log(&format!(
            "epoch {e:>3}  train_loss {loss:.6}  val_rmse {rmse:.4}"
        ));
        if rmse < best_rmse {
            best_rmse = rmse;
            best_epoch = e;
            best_params = tr.params.clone();
        }
        trace.push(rmse);
    }
    tr.params = best_params;
    log(&format!(
        "restored epoch {best_epoch} parameters (val rmse {best_rmse:.4})"
    ));

    let train_prepared = tr.prepare(&train_refs)?;
    let test_prepared = tr.prepare(&test_refs)?;
    let mut rows = scatter_rows(&train_prepared, &tr.predictions(&train_prepared)?, "train");
    rows.extend(scatter_rows(&val_prepared, &tr.predictions(&val_prepared)?, "val"));
    rows.extend(scatter_rows(&test_prepared, &tr.predictions(&test_prepared)?, "test"));
    Ok(FixedOutcome {
        best_epoch,
        val_rmse_by_epoch: trace,
        report: EvalReport::from_scatter(rows),
        trainer: tr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthConfig;
    use crate::train::TrainConfig;

    #[test]
    fn folds_are_contiguous_and_balanced() {
        let years: Vec<i32> = (2008..=2022).collect();
        let plan = make_folds(&years, &[2021, 2022], 5).unwrap();
        assert_eq!(plan.test_years, vec![2021, 2022]);
        let sizes: Vec<usize> = plan.folds.iter().map(|f| f.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 2, 2]);
        assert_eq!(plan.folds[0], vec![2008, 2009, 2010]);
        assert_eq!(plan.folds[4], vec![2019, 2020]);
        assert_eq!(plan.non_test_years(), (2008..=2020).collect::<Vec<_>>());

        let even = make_folds(&(2011..=2020).collect::<Vec<_>>(), &[], 5).unwrap();
        assert!(even.folds.iter().all(|f| f.len() == 2));
    }

    #[test]
    fn too_few_years_is_an_error_with_guidance() {
        let years: Vec<i32> = (2018..=2022).collect();
        let err = make_folds(&years, &[2021, 2022], 5).unwrap_err();
        match err {
            TrainError::TooFewYears { non_test, folds } => {
                assert_eq!((non_test, folds), (3, 5));
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(err.to_string().contains("--folds 3"));
    }

    #[test]
    fn audit_catches_leaks() {
        let ok = SplitPlan {
            test_years: vec![2022],
            folds: vec![vec![2020], vec![2021]],
        };
        assert!(ok.audit().is_ok());
        let dup = SplitPlan {
            test_years: vec![2022],
            folds: vec![vec![2020], vec![2020]],
        };
        assert!(dup.audit().is_err());
        let leak = SplitPlan {
            test_years: vec![2021],
            folds: vec![vec![2020, 2021]],
        };
        assert!(leak.audit().is_err());
    }

    fn tiny_dataset() -> crate::synth::GeneratedDataset {
        let cfg = SynthConfig {
            n_counties: 2,
            n_crops: 2,
            years: (2015..=2020).collect(),
            pixels_n: (4, 4),
            pixels_m: (1, 1),
            noise_frac: 0.0,
            seed: 11,
            ..SynthConfig::default()
        };
        crate::synth::generate(&cfg).unwrap()
    }

    #[test]
    fn run_cv_selects_an_epoch_and_keeps_test_years_out_of_folds() {
        let data = tiny_dataset();
        let mcfg = crate::model::ModelConfig::tiny(2);
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut lines = Vec::new();
        let out = run_cv(&data.samples, &mcfg, &tcfg, &[2019, 2020], 2, &mut |m| {
            lines.push(m.to_string())
        })
        .unwrap();
        assert_eq!(out.plan.folds.len(), 2);
        assert!(out.chosen_epochs >= 1 && out.chosen_epochs <= 2);
        for fr in &out.folds {
            assert_eq!(fr.val_rmse_by_epoch.len(), 2);
            for y in &fr.val_years {
                assert!(!out.plan.test_years.contains(y));
            }
            for row in &fr.report.scatter {
                assert!(fr.val_years.contains(&row.year));
                assert_eq!(row.split, "val");
            }
        }
        // The test report contains test years only under the "test" split.
        let mut saw_test = false;
        for row in &out.test_report.scatter {
            if out.plan.test_years.contains(&row.year) {
                assert_eq!(row.split, "test");
                saw_test = true;
            } else {
                assert_eq!(row.split, "train");
            }
        }
        assert!(saw_test);
        assert_eq!(
            out.test_report.scatter.iter().filter(|r| r.split == "test").count(),
            2 * 2 * 2
        );
        assert!(out.test_report.pooled("test").is_some());
        assert!(!lines.is_empty());
    }

    #[test]
    fn run_fixed_tracks_best_epoch_and_reports_three_splits() {
        let data = tiny_dataset();
        let mcfg = crate::model::ModelConfig::tiny(2);
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = run_fixed(
            &data.samples,
            &mcfg,
            &tcfg,
            &[2015, 2016, 2017],
            &[2018],
            &[2019, 2020],
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(out.val_rmse_by_epoch.len(), 3);
        assert!(out.best_epoch < 3);
        let splits: BTreeSet<&str> =
            out.report.rows.iter().map(|r| r.split.as_str()).collect();
        assert_eq!(splits, ["test", "train", "val"].into_iter().collect());
        for row in &out.report.scatter {
            let expected = match row.year {
                2015..=2017 => "train",
                2018 => "val",
                _ => "test",
            };
            assert_eq!(row.split, expected, "year {}", row.year);
        }
        // Overlapping splits are rejected up front.
        let err = run_fixed(
            &data.samples,
            &mcfg,
            &tcfg,
            &[2015, 2016],
            &[2016],
            &[2019],
            &mut |_| {},
        );
        assert!(err.is_err());
    }
}
