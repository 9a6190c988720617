//! Stage selection: which parameter combinations beat the baselines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::percentile_nearest_rank;
use crate::sweep::study::AggregateScore;
use crate::{Error, Result};

/// How stage 2 turns replicate scores into a keep/drop decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyRule {
    /// Every replicate beats the threshold.
    #[default]
    AllReplicates,
    /// More than half of the replicates beat the threshold.
    Majority,
    /// The mean over replicates beats the threshold.
    MeanAboveThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionOutcome {
    /// Selected combo indices, ascending.
    pub selected: Vec<usize>,
    /// The 99th-percentile score each baseline group imposed.
    pub thresholds: BTreeMap<String, f64>,
    pub warning: Option<String>,
}

fn p99_thresholds(baselines: &BTreeMap<String, Vec<f64>>) -> Result<BTreeMap<String, f64>> {
    if baselines.is_empty() {
        return Err(Error::Parameter("no baseline groups supplied".into()));
    }
    let mut thresholds = BTreeMap::new();
    for (group, scores) in baselines {
        if scores.is_empty() {
            return Err(Error::Parameter(format!(
                "baseline group {group} has no samples"
            )));
        }
        thresholds.insert(group.clone(), percentile_nearest_rank(scores, 99.0));
    }
    Ok(thresholds)
}

/// Stage 1 shortlist: combos whose valid aggregate exceeds the 99th
/// percentile of the random-substrate baseline in every group. Combos with no
/// valid aggregate are never selected; if nothing met quorum the shortlist is
/// empty and carries a warning.
pub fn stage1_select(
    aggregates: &[AggregateScore],
    baselines: &BTreeMap<String, Vec<f64>>,
) -> Result<SelectionOutcome> {
    let thresholds = p99_thresholds(baselines)?;
    let mut per_combo: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut any_valid = false;
    for agg in aggregates {
        if !agg.valid {
            continue;
        }
        any_valid = true;
        per_combo.entry(agg.combo_index).or_default().push(agg.mean);
    }
    if !any_valid {
        return Ok(SelectionOutcome {
            selected: Vec::new(),
            thresholds,
            warning: Some("no aggregate met the report quorum; nothing to select".into()),
        });
    }
    let selected = per_combo
        .into_iter()
        .filter(|(_, means)| {
            means
                .iter()
                .all(|m| thresholds.values().all(|t| m > t))
        })
        .map(|(combo, _)| combo)
        .collect();
    Ok(SelectionOutcome {
        selected,
        thresholds,
        warning: None,
    })
}

/// Stage 2 keep set: combos whose replicate scores consistently beat the 99th
/// percentile of the culture baseline, under the configured rule. Only valid
/// aggregates count as replicates; combos with none are dropped.
pub fn stage2_select(
    aggregates: &[AggregateScore],
    culture_baseline: &[f64],
    rule: ConsistencyRule,
) -> Result<SelectionOutcome> {
    if culture_baseline.is_empty() {
        return Err(Error::Parameter("culture baseline has no samples".into()));
    }
    let threshold = percentile_nearest_rank(culture_baseline, 99.0);
    let mut per_combo: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for agg in aggregates {
        if agg.valid {
            per_combo.entry(agg.combo_index).or_default().push(agg.mean);
        }
    }
    let selected = per_combo
        .into_iter()
        .filter(|(_, means)| {
            if means.is_empty() {
                return false;
            }
            match rule {
                ConsistencyRule::AllReplicates => means.iter().all(|m| *m > threshold),
                ConsistencyRule::Majority => {
                    2 * means.iter().filter(|m| **m > threshold).count() > means.len()
                }
                ConsistencyRule::MeanAboveThreshold => {
                    means.iter().sum::<f64>() / means.len() as f64 > threshold
                }
            }
        })
        .map(|(combo, _)| combo)
        .collect();
    let mut thresholds = BTreeMap::new();
    thresholds.insert("culture".to_string(), threshold);
    Ok(SelectionOutcome {
        selected,
        thresholds,
        warning: None,
    })
}
