//! Ranking metrics and per-class reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "metric inputs",
            &[scores.len()],
            &[labels.len()],
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("NaN score".into()));
    }
    Ok(())
}

/// Mean of precision@k over the ranks k of the positives, with scores sorted
/// descending and ties kept in input order. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_lengths(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives (Mann–Whitney U).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] != 0 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos * n_neg) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_ap: BTreeMap<String, f64>,
    pub map: f64,
    pub per_class_auc: BTreeMap<String, f64>,
    pub auc: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricReport {
    /// Per-class and macro metrics for the columns of `scores` (one row per
    /// instance) against `labels`. Classes where a metric is undefined are
    /// left out of its average with a warning.
    pub fn from_scores(
        classes: &[String],
        scores: &[Vec<f64>],
        labels: &[Vec<u8>],
        seed: u64,
        config_hash: &str,
    ) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim("report rows", &[scores.len()], &[labels.len()]));
        }
        let mut per_class_ap = BTreeMap::new();
        let mut per_class_auc = BTreeMap::new();
        for (c, name) in classes.iter().enumerate() {
            let col = |m: &[Vec<f64>]| -> Result<Vec<f64>> {
                m.iter()
                    .map(|r| {
                        r.get(c).copied().ok_or_else(|| {
                            Error::dim("report columns", &[r.len()], &[classes.len()])
                        })
                    })
                    .collect()
            };
            let s = col(scores)?;
            let l: Vec<u8> = labels
                .iter()
                .map(|r| {
                    r.get(c)
                        .copied()
                        .ok_or_else(|| Error::dim("label columns", &[r.len()], &[classes.len()]))
                })
                .collect::<Result<_>>()?;
            match average_precision(&s, &l)? {
                Some(ap) => {
                    per_class_ap.insert(name.clone(), ap);
                }
                None => log::warn!("class {name} has no positives; skipped in mAP"),
            }
            match roc_auc(&s, &l)? {
                Some(auc) => {
                    per_class_auc.insert(name.clone(), auc);
                }
                None => log::warn!("class {name} has a single label value; skipped in AUC"),
            }
        }
        if per_class_ap.is_empty() || per_class_auc.is_empty() {
            return Err(Error::Empty("classes with defined metrics"));
        }
        let mean = |m: &BTreeMap<String, f64>| m.values().sum::<f64>() / m.len() as f64;
        Ok(MetricReport {
            map: mean(&per_class_ap),
            auc: mean(&per_class_auc),
            per_class_ap,
            per_class_auc,
            seed,
            config_hash: config_hash.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.7], &[0, 1, 0]).unwrap(),
            Some(0.5)
        );
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(),
            Some(1.0)
        );
        assert_eq!(average_precision(&[0.9, 0.8], &[0, 0]).unwrap(), None);
        assert_eq!(roc_auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), Some(0.5));
        assert_eq!(roc_auc(&[0.9, 0.1, 0.8], &[1, 0, 1]).unwrap(), Some(1.0));
        assert_eq!(roc_auc(&[0.9, 0.1], &[1, 1]).unwrap(), None);
    }

    #[test]
    fn report_skips_undefined_classes() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.3]];
        let labels = vec![vec![1, 0], vec![0, 0]];
        let r = MetricReport::from_scores(&classes, &scores, &labels, 1, "h").unwrap();
        assert_eq!(r.per_class_ap.len(), 1);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.auc, 1.0);
        let none = vec![vec![0, 0], vec![0, 0]];
        assert!(MetricReport::from_scores(&classes, &scores, &none, 1, "h").is_err());
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(average_precision(&[0.1], &[1, 0]).is_err());
        assert!(roc_auc(&[f64::NAN, 0.2], &[1, 0]).is_err());
    }
}
