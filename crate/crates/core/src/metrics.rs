//! Evaluation metrics: regression errors, recovered-segment precision and
//! recall, retrieval ranks, and time-aligned recovery distances.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use crate::geo::haversine;
use crate::geo::LngLat;
use crate::roadnet::{RoadNetwork, RoadPos, SegmentId};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub mae: f64,
    pub rmse: f64,
    /// Percent, over samples with a nonzero truth.
    pub mape_pct: f64,
    pub mape_excluded: usize,
}

pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<Regression> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Metric(format!("need equal non-empty lengths, got {} and {}", pred.len(), truth.len())));
    }
    let n = pred.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut excluded = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
        if t == 0.0 {
            excluded += 1;
        } else {
            pct += (e / t).abs();
        }
    }
    let kept = pred.len() - excluded;
    let mape_pct = if kept == 0 { f64::NAN } else { 100.0 * pct / kept as f64 };
    Ok(Regression { mae: abs / n, rmse: (sq / n).sqrt(), mape_pct, mape_excluded: excluded })
}

/// `(|E_R ∩ E_G| / |E_R|, |E_R ∩ E_G| / |E_G|)`.
pub fn seg_precision_recall(recovered: &BTreeSet<SegmentId>, truth: &BTreeSet<SegmentId>) -> Result<(f64, f64)> {
    if recovered.is_empty() || truth.is_empty() {
        return Err(Error::Metric("precision and recall need non-empty segment sets".into()));
    }
    let hit = recovered.intersection(truth).count() as f64;
    Ok((hit / recovered.len() as f64, hit / truth.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub samples: usize,
    /// Samples with an empty set, left out of the averages.
    pub excluded: usize,
}

/// Per-sample precision/recall averaged over samples.
pub fn mean_precision_recall(samples: &[(BTreeSet<SegmentId>, BTreeSet<SegmentId>)]) -> Result<PrecisionRecall> {
    let (mut p, mut r, mut n, mut excluded) = (0.0, 0.0, 0, 0);
    for (rec, truth) in samples {
        match seg_precision_recall(rec, truth) {
            Ok((a, b)) => {
                p += a;
                r += b;
                n += 1;
            }
            Err(_) => excluded += 1,
        }
    }
    if n == 0 {
        return Err(Error::Metric("no sample with non-empty segment sets".into()));
    }
    Ok(PrecisionRecall { precision: p / n as f64, recall: r / n as f64, samples: n, excluded })
}

/// Mean 1-based rank of each truth id and the percentage ranked first.
pub fn rank_metrics(rankings: &[Vec<u64>], truths: &[u64]) -> Result<(f64, f64)> {
    if rankings.is_empty() || rankings.len() != truths.len() {
        return Err(Error::Metric("need one truth id per non-empty ranking list".into()));
    }
    let mut sum = 0.0;
    let mut first = 0usize;
    for (q, (ranking, truth)) in rankings.iter().zip(truths).enumerate() {
        let pos = ranking
            .iter()
            .position(|id| id == truth)
            .ok_or_else(|| Error::Metric(format!("query {q}: truth id {truth} absent from ranking")))?;
        sum += (pos + 1) as f64;
        if pos == 0 {
            first += 1;
        }
    }
    let n = truths.len() as f64;
    Ok((sum / n, 100.0 * first as f64 / n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPoint {
    pub t: f64,
    pub pos: LngLat,
    pub road: RoadPos,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryErrors {
    pub mae_coor_m: f64,
    pub mae_road_m: f64,
    pub mae_time_s: f64,
    pub aligned: usize,
    /// Truth points with no recovered point within the tolerance.
    pub unaligned: usize,
}

/// Pairs every truth point with the recovered point nearest in time (lower
/// index on ties) if within `tolerance_s`, and averages the great-circle,
/// road-network and time gaps over aligned pairs.
pub fn recovery_errors(
    net: &RoadNetwork,
    recovered: &[TimedPoint],
    truth: &[TimedPoint],
    tolerance_s: f64,
) -> Result<RecoveryErrors> {
    let mut out = RecoveryErrors::default();
    let (mut c, mut r, mut t) = (0.0, 0.0, 0.0);
    for g in truth {
        let mut best: Option<(f64, &TimedPoint)> = None;
        for p in recovered {
            let dt = (p.t - g.t).abs();
            if dt <= tolerance_s && best.is_none_or(|(b, _)| dt < b) {
                best = Some((dt, p));
            }
        }
        match best {
            Some((dt, p)) => {
                c += haversine(p.pos, g.pos);
                r += net.road_distance(p.road, g.road)?;
                t += dt;
                out.aligned += 1;
            }
            None => out.unaligned += 1,
        }
    }
    if out.aligned > 0 {
        let n = out.aligned as f64;
        out.mae_coor_m = c / n;
        out.mae_road_m = r / n;
        out.mae_time_s = t / n;
    }
    Ok(out)
}

/// Named metric values for one evaluated task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub samples: usize,
    pub excluded: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(task: impl Into<String>, samples: usize) -> Self {
        Self { task: task.into(), samples, excluded: 0, metrics: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Metric(format!("{}: no samples", self.task)));
        }
        if let Some((k, v)) = self.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Metric(format!("{}: {k} is {v}", self.task)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regression_small_cases() {
        let r = regression_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((r.mae, r.rmse, r.mape_pct), (0.0, 0.0, 0.0));
        let r = regression_metrics(&[1.1], &[1.0]).unwrap();
        assert!((r.mae - 0.1).abs() < 1e-12 && (r.rmse - 0.1).abs() < 1e-12 && (r.mape_pct - 10.0).abs() < 1e-9);
    }

    #[test]
    fn zero_truth_excluded_from_mape() {
        let r = regression_metrics(&[1.0, 2.0], &[0.0, 1.0]).unwrap();
        assert_eq!(r.mape_excluded, 1);
        assert!((r.mape_pct - 100.0).abs() < 1e-12);
    }

    #[test]
    fn precision_recall_sets() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
        let (p, r) = seg_precision_recall(&s(&[1, 2, 3]), &s(&[2, 3, 4])).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-12 && (r - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(seg_precision_recall(&s(&[1]), &s(&[2])).unwrap(), (0.0, 0.0));
        assert!(seg_precision_recall(&s(&[]), &s(&[2])).is_err());
        let m = mean_precision_recall(&[(s(&[]), s(&[1])), (s(&[1]), s(&[1]))]).unwrap();
        assert_eq!((m.precision, m.recall, m.excluded), (1.0, 1.0, 1));
    }

    #[test]
    fn ranks() {
        assert_eq!(rank_metrics(&[vec![1, 2], vec![3, 4]], &[1, 3]).unwrap(), (1.0, 100.0));
        assert_eq!(rank_metrics(&[vec![1, 2, 3], vec![3, 4, 5]], &[1, 5]).unwrap(), (2.0, 50.0));
        assert!(rank_metrics(&[vec![1]], &[9]).is_err());
    }

    #[test]
    fn one_degree_of_latitude() {
        let d = haversine(LngLat::new(0.0, 0.0), LngLat::new(0.0, 1.0));
        assert!((d - 111_195.0).abs() <= 1.0, "{d}");
    }
}
