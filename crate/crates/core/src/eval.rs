//! Metrics over prediction dumps: F-beta of binary expertise predictions, system
//! accuracy, coverage, relative performance, subgroup bias, and the reference
//! accuracies of each team member alone.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::defer::{predict_rows, DeferRule, PredictionRow, TeamModel};
use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};

/// F-beta score with `true` as the positive class; 0 when the score's denominator is 0.
pub fn f_beta(predictions: &[bool], truths: &[bool], beta: f64) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Precondition("F-beta of an empty sequence".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Precondition(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let b2 = beta * beta;
    // (1+b²)PR / (b²P + R) with P = tp/(tp+fp), R = tp/(tp+fn), multiplied through
    let denom = (1.0 + b2) * tp as f64 + b2 * fneg as f64 + fp as f64;
    Ok(if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * tp as f64 / denom
    })
}

/// Fraction of rows whose team prediction is the true class; 0 for an empty dump.
pub fn system_accuracy(rows: &[PredictionRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.correct()).count() as f64 / rows.len() as f64
}

/// Fraction of rows the classifier handles (not deferred); 0 for an empty dump.
pub fn coverage(rows: &[PredictionRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| !r.deferred).count() as f64 / rows.len() as f64
}

/// Budgeted accuracy as a percentage of the complete-regime accuracy.
pub fn relative_performance(budgeted: f64, complete: f64) -> Result<f64> {
    if complete <= 0.0 {
        return Err(Error::Numeric(format!(
            "relative performance against complete-regime accuracy {complete}"
        )));
    }
    Ok(100.0 * budgeted / complete)
}

pub const AGE_BINS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeBin {
    pub min_age: f64,
    pub max_age: f64,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub accuracy_male: f64,
    pub accuracy_female: f64,
    pub gender_gap: f64,
    pub age_mad: f64,
    pub age_bins: Vec<AgeBin>,
}

/// Per-row inputs to the bias report.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasRecord {
    pub correct: bool,
    pub male: bool,
    pub age: f64,
}

fn accuracy<'a>(records: impl Iterator<Item = &'a BiasRecord>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for r in records {
        n += 1;
        hit += usize::from(r.correct);
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Gender accuracy gap and mean absolute deviation of accuracy across five
/// equal-population age bins (by age rank; ties keep input order).
pub fn bias_from_records(records: &[BiasRecord]) -> Result<BiasReport> {
    if records.len() < AGE_BINS {
        return Err(Error::EmptyBin {
            bin: records.len(),
            bins: AGE_BINS,
        });
    }
    let male = accuracy(records.iter().filter(|r| r.male))
        .ok_or_else(|| Error::Metadata("no male instances".into()))?;
    let female = accuracy(records.iter().filter(|r| !r.male))
        .ok_or_else(|| Error::Metadata("no female instances".into()))?;
    let overall = accuracy(records.iter()).expect("nonempty");
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].age.total_cmp(&records[b].age));
    let n = records.len();
    let mut bins = Vec::with_capacity(AGE_BINS);
    for b in 0..AGE_BINS {
        let members: Vec<&BiasRecord> = order[b * n / AGE_BINS..(b + 1) * n / AGE_BINS]
            .iter()
            .map(|&i| &records[i])
            .collect();
        bins.push(AgeBin {
            min_age: members.first().expect("nonempty bin").age,
            max_age: members.last().expect("nonempty bin").age,
            count: members.len(),
            accuracy: accuracy(members.into_iter()).expect("nonempty bin"),
        });
    }
    let age_mad = bins.iter().map(|b| (b.accuracy - overall).abs()).sum::<f64>() / AGE_BINS as f64;
    Ok(BiasReport {
        accuracy_male: male,
        accuracy_female: female,
        gender_gap: (male - female).abs(),
        age_mad,
        age_bins: bins,
    })
}

fn parse_gender(text: &str) -> Option<bool> {
    match text.trim().to_ascii_lowercase().as_str() {
        "m" | "male" => Some(true),
        "f" | "female" => Some(false),
        _ => None,
    }
}

/// Bias report for a prediction dump, reading `gender` and `age` metadata of each id.
pub fn bias_report(rows: &[PredictionRow], dataset: &Dataset) -> Result<BiasReport> {
    let mut missing = Vec::new();
    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        let ex = dataset.position(&row.id).map(|i| dataset.example(i));
        let gender = ex.and_then(|e| e.meta("gender")).and_then(parse_gender);
        let age = ex
            .and_then(|e| e.meta("age"))
            .and_then(|a| a.trim().parse::<f64>().ok())
            .filter(|a| a.is_finite());
        match (gender, age) {
            (Some(male), Some(age)) => records.push(BiasRecord {
                correct: row.correct(),
                male,
                age,
            }),
            _ => missing.push(row.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Metadata(format!(
            "gender/age missing or malformed for ids: {}",
            missing.join(", ")
        )));
    }
    bias_from_records(&records)
}

/// Reference accuracies: each team member alone, and the complete-regime team.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boundaries {
    pub classifier_alone: f64,
    pub expert_alone: f64,
    pub complete: Option<f64>,
}

pub fn boundaries(
    dataset: &Dataset,
    test: &[usize],
    classifier: &EmbeddingModel,
    complete_team: Option<&TeamModel>,
) -> Result<Boundaries> {
    let mut correct = 0usize;
    for &i in test {
        let ex = dataset.example(i);
        let h = ex.h.ok_or_else(|| {
            Error::Precondition(format!("test instance {} has no expert prediction", ex.id))
        })?;
        correct += usize::from(h == ex.y);
    }
    let expert_alone = if test.is_empty() {
        0.0
    } else {
        correct as f64 / test.len() as f64
    };
    let complete = complete_team
        .map(|team| predict_rows(team, dataset, test, DeferRule::Learned).map(|r| system_accuracy(&r)))
        .transpose()?;
    Ok(Boundaries {
        classifier_alone: classifier.accuracy(dataset, test)?,
        expert_alone,
        complete,
    })
}

/// One grid cell's metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub expert: String,
    pub algorithm: String,
    pub variant: String,
    pub m: usize,
    pub l: usize,
    pub seed: u64,
    pub system_accuracy: f64,
    pub coverage: f64,
    /// F0.5 of the expertise predictor on the test split.
    pub f05: f64,
    pub relative_performance: Option<f64>,
    pub gender_gap: Option<f64>,
    pub age_mad: Option<f64>,
    pub config_fp: String,
}

/// Mean and standard deviation over seeds for one (dataset, expert, algorithm, variant, m).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub dataset: String,
    pub expert: String,
    pub algorithm: String,
    pub variant: String,
    pub m: usize,
    pub l: usize,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub f05_mean: f64,
    pub f05_std: f64,
    pub relative_mean: Option<f64>,
    pub gender_gap_mean: Option<f64>,
    pub age_mad_mean: Option<f64>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn optional_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean_std(&v).0)
}

pub fn summarize(records: &[MetricRecord]) -> Vec<SummaryRecord> {
    let mut groups: BTreeMap<(String, String, String, String, usize), Vec<&MetricRecord>> =
        BTreeMap::new();
    for r in records {
        groups
            .entry((
                r.dataset.clone(),
                r.expert.clone(),
                r.algorithm.clone(),
                r.variant.clone(),
                r.m,
            ))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, expert, algorithm, variant, m), rs)| {
            let col = |f: fn(&MetricRecord) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (accuracy_mean, accuracy_std) = col(|r| r.system_accuracy);
            let (coverage_mean, coverage_std) = col(|r| r.coverage);
            let (f05_mean, f05_std) = col(|r| r.f05);
            SummaryRecord {
                dataset,
                expert,
                algorithm,
                variant,
                m,
                l: rs[0].l,
                seeds: rs.len(),
                accuracy_mean,
                accuracy_std,
                coverage_mean,
                coverage_std,
                f05_mean,
                f05_std,
                relative_mean: optional_mean(rs.iter().map(|r| r.relative_performance)),
                gender_gap_mean: optional_mean(rs.iter().map(|r| r.gender_gap)),
                age_mad_mean: optional_mean(rs.iter().map(|r| r.age_mad)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f_beta_examples() {
        let t = [true, false, true, true];
        assert_eq!(f_beta(&t, &t, 0.5).unwrap(), 1.0);
        assert_eq!(f_beta(&[false; 4], &t, 0.5).unwrap(), 0.0);
        assert!(matches!(f_beta(&[], &[], 0.5), Err(Error::Precondition(_))));
        // P = 4/5, R = 4/8
        let pred = [true, true, true, true, true, false, false, false, false, false];
        let truth = [true, true, true, true, false, true, true, true, true, false];
        let f = f_beta(&pred, &truth, 0.5).unwrap();
        assert!((f - 1.25 * 0.4 / 0.7).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn f_beta_matches_precision_recall_form(
            pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60)
        ) {
            let (p, t): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let tp = p.iter().zip(&t).filter(|(a, b)| **a && **b).count() as f64;
            let pp = p.iter().filter(|a| **a).count() as f64;
            let ap = t.iter().filter(|a| **a).count() as f64;
            let precision = if pp > 0.0 { tp / pp } else { 0.0 };
            let recall = if ap > 0.0 { tp / ap } else { 0.0 };
            let denom = 0.25 * precision + recall;
            let expected = if denom > 0.0 { 1.25 * precision * recall / denom } else { 0.0 };
            prop_assert!((f_beta(&p, &t, 0.5).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_performance_examples() {
        assert_eq!(relative_performance(0.8, 0.8).unwrap(), 100.0);
        assert!((relative_performance(0.75, 0.8).unwrap() - 93.75).abs() < 1e-12);
        assert!(relative_performance(0.5, 0.0).is_err());
    }

    #[test]
    fn too_few_rows_for_bins() {
        let r = BiasRecord {
            correct: true,
            male: true,
            age: 40.0,
        };
        assert!(matches!(
            bias_from_records(&vec![r; 4]),
            Err(Error::EmptyBin { .. })
        ));
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
