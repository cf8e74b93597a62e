//! Metrics, evaluation scopes, report aggregation and ablations.

mod ablation;
mod report;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ablation::{ablate, AblationOutcome, AblationSpec, Variant};
pub use report::{
    report, summarize, write_gnuplot, write_report_csv, write_report_table, MetricsReport,
    ReportRow, RunResult, Summary,
};

use crate::dataset::{CounterfactualTable, Example};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::numerics::{ParamStore, Tensor2D};
use crate::task::Target;

/// Area under the ROC curve as the Mann–Whitney statistic. Tied scores
/// share their average rank, so a tie between a positive and a negative
/// counts one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "auc",
            left: (scores.len(), 1),
            right: (labels.len(), 1),
        });
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Domain(format!("auc score {s}")));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let rank = (i + 1 + j) as f64 / 2.0;
        let positives = order[i..j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += rank * positives as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// `auc`, with an undefined metric mapped to `None`.
pub fn auc_opt(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    match auc(scores, labels) {
        Ok(a) => Ok(Some(a)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Rows whose label was observed.
    ObservedOnly,
    /// Every applicant, scored against counterfactual labels.
    #[default]
    FullPopulation,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::ObservedOnly => "observed_only",
            Scope::FullPopulation => "full_population",
        }
    }
}

/// Per-target AUC; `None` marks an undefined metric.
pub type AucMap = BTreeMap<Target, Option<f64>>;

pub fn features_of(examples: &[Example]) -> Result<Tensor2D<f64>> {
    let dim = examples.first().map_or(0, |e| e.features.len());
    let data = examples.iter().flat_map(|e| e.features.iter().copied()).collect();
    Tensor2D::from_vec(examples.len(), dim, data)
}

/// AUC of precomputed scores under `scope`.
pub fn score_auc(
    examples: &[Example],
    scores: &BTreeMap<Target, Vec<f64>>,
    scope: Scope,
    counterfactuals: Option<&CounterfactualTable>,
) -> Result<AucMap> {
    let mut out = AucMap::new();
    for (&t, s) in scores {
        let (sel, labels): (Vec<f64>, Vec<bool>) = match scope {
            Scope::ObservedOnly => examples
                .iter()
                .zip(s)
                .filter_map(|(e, &p)| e.label(t).map(|y| (p, y)))
                .unzip(),
            Scope::FullPopulation => {
                let table = counterfactuals.ok_or_else(|| {
                    Error::config(
                        "counterfactuals",
                        "full-population evaluation needs the counterfactual table",
                    )
                })?;
                let labels = examples
                    .iter()
                    .map(|e| {
                        table.get(&e.id).map(|c| c.labels[t.index()]).ok_or_else(|| {
                            Error::config(
                                "counterfactuals",
                                format!("no counterfactual record for id {}", e.id),
                            )
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (s.clone(), labels)
            }
        };
        out.insert(t, auc_opt(&sel, &labels)?);
    }
    Ok(out)
}

/// Scores `examples` with a trained model and measures AUC under `scope`.
pub fn evaluate(
    arch: &Architecture,
    params: &ParamStore<f64>,
    examples: &[Example],
    scope: Scope,
    counterfactuals: Option<&CounterfactualTable>,
) -> Result<AucMap> {
    if scope == Scope::FullPopulation && counterfactuals.is_none() {
        return Err(Error::config(
            "counterfactuals",
            "full-population evaluation needs the counterfactual table",
        ));
    }
    let scores = arch.predict(params, &features_of(examples)?)?;
    score_auc(examples, &scores, scope, counterfactuals)
}

/// Mean of the defined AUCs over `targets`.
pub fn mean_auc(aucs: &AucMap, targets: &[Target]) -> Option<f64> {
    let vals: Vec<f64> = targets.iter().filter_map(|t| aucs.get(t).copied().flatten()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let a = auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((a - 0.75).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_tied() {
        assert_eq!(auc(&[0.1, 0.2, 0.3], &[false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.3], &[true, false, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.7; 5], &[true, false, true, false, false]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert_eq!(auc_opt(&[0.1], &[false]).unwrap(), None);
        assert!(matches!(auc(&[f64::NAN, 0.2], &[true, false]), Err(Error::Domain(_))));
    }

    fn ex(id: u64, labels: [Option<bool>; 6]) -> Example {
        Example {
            id,
            timestamp: 0,
            features: vec![id as f64],
            labels,
        }
    }

    #[test]
    fn observed_scope_on_rejected_rows_is_undefined() {
        let rejected = [Some(false), None, None, None, None, None];
        let examples = vec![ex(0, rejected), ex(1, rejected)];
        let scores = BTreeMap::from([(Target::Mob6, vec![0.2, 0.9])]);
        let r = score_auc(&examples, &scores, Scope::ObservedOnly, None).unwrap();
        assert_eq!(r[&Target::Mob6], None);
    }

    #[test]
    fn full_scope_needs_counterfactuals() {
        let examples = vec![ex(0, [Some(false), None, None, None, None, None])];
        let scores = BTreeMap::from([(Target::Mob6, vec![0.2])]);
        assert!(matches!(
            score_auc(&examples, &scores, Scope::FullPopulation, None),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn mean_skips_undefined_targets() {
        let m = AucMap::from([(Target::Mob1, Some(0.6)), (Target::Mob3, None), (Target::Mob6, Some(0.8))]);
        assert!((mean_auc(&m, &Target::GB).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(mean_auc(&AucMap::new(), &Target::GB), None);
    }
}
