//! Top-k precision, mean average precision and the per-epoch metrics CSV.

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("metric over an empty evaluation set")]
    Empty,
    #[error("mAP undefined: no class has a positive sample")]
    NoPositives,
    #[error("{what}: expected {expected} entries, got {actual}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
}

/// Class indices ordered by descending score; ties go to the lower index.
pub fn rank_classes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Fraction of samples with at least one true class among the first `k` ranked classes.
pub fn topk_precision(ranked: &[Vec<usize>], truth: &[Vec<usize>], k: usize) -> Result<f64, MetricError> {
    if ranked.is_empty() {
        return Err(MetricError::Empty);
    }
    if ranked.len() != truth.len() {
        return Err(MetricError::Length {
            what: "ground truth",
            expected: ranked.len(),
            actual: truth.len(),
        });
    }
    let hits = ranked
        .iter()
        .zip(truth)
        .filter(|(r, t)| r.iter().take(k).any(|c| t.contains(c)))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

/// Average precision of one class: `(1/N_pos) Σ_k P(k)·rel(k)` over the ranking by
/// descending score, ties broken by ascending sample index. `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let order = rank_classes(scores);
    let npos = positive.iter().filter(|&&p| p).count();
    if npos == 0 {
        return None;
    }
    let mut seen = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            seen += 1;
            total += seen as f64 / (rank + 1) as f64;
        }
    }
    Some(total / npos as f64)
}

/// Mean of per-class AP over classes that have at least one positive.
/// `scores[i][j]` and `labels[i][j]` index sample `i`, class `j`.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(MetricError::Length {
            what: "labels",
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    let classes = scores[0].len();
    if let Some(bad) = scores.iter().find(|s| s.len() != classes) {
        return Err(MetricError::Length {
            what: "score row",
            expected: classes,
            actual: bad.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|l| l.len() != classes) {
        return Err(MetricError::Length {
            what: "label row",
            expected: classes,
            actual: bad.len(),
        });
    }
    let aps: Vec<f64> = (0..classes)
        .filter_map(|j| {
            let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
            let y: Vec<bool> = labels.iter().map(|r| r[j]).collect();
            average_precision(&s, &y)
        })
        .collect();
    if aps.is_empty() {
        return Err(MetricError::NoPositives);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    /// Multi-label runs only.
    pub map: Option<f64>,
    /// Seconds; kept out of the CSV so seeded runs compare byte-for-byte.
    pub wall_time: f64,
}

pub const CSV_HEADER: [&str; 6] = ["epoch", "split", "loss", "top1", "top5", "map"];

/// Writes the metrics CSV: fixed header, 6-decimal values, LF line endings.
pub fn write_metrics_csv<W: Write>(out: W, reports: &[MetricsReport]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        w.write_record([
            r.epoch.to_string(),
            r.split.name().to_string(),
            format!("{:.6}", r.loss),
            format!("{:.6}", r.top1),
            format!("{:.6}", r.top5),
            r.map.map(|m| format!("{m:.6}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn metrics_csv_string(reports: &[MetricsReport]) -> String {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, reports).expect("in-memory write");
    String::from_utf8(buf).expect("ascii csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn brute_topk(scores: &[Vec<f64>], truth: &[usize], k: usize) -> f64 {
        let mut hits = 0;
        for (s, &t) in scores.iter().zip(truth) {
            // t is in the top k iff fewer than k classes outrank it
            let better = (0..s.len()).filter(|&j| s[j] > s[t] || (s[j] == s[t] && j < t)).count();
            if better < k {
                hits += 1;
            }
        }
        hits as f64 / scores.len() as f64
    }

    fn brute_map(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Option<f64> {
        let n = scores.len();
        let rank = |j: usize, i: usize| {
            1 + (0..n)
                .filter(|&m| scores[m][j] > scores[i][j] || (scores[m][j] == scores[i][j] && m < i))
                .count()
        };
        let mut aps = Vec::new();
        for j in 0..scores[0].len() {
            let pos: Vec<usize> = (0..n).filter(|&i| labels[i][j]).collect();
            if pos.is_empty() {
                continue;
            }
            // Σ_k P(k)·rel(k), walking k = 1..n
            let mut ap = 0.0;
            for k in 1..=n {
                if pos.iter().any(|&i| rank(j, i) == k) {
                    let above = pos.iter().filter(|&&m| rank(j, m) <= k).count();
                    ap += above as f64 / k as f64;
                }
            }
            aps.push(ap / pos.len() as f64);
        }
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    }

    #[test]
    fn topk_examples() {
        let truth = vec![vec![0], vec![1]];
        let ranked = vec![vec![1, 0, 2], vec![1, 2, 0]];
        assert_eq!(topk_precision(&ranked, &truth, 1).unwrap(), 0.5);
        assert_eq!(topk_precision(&ranked, &truth, 2).unwrap(), 1.0);
        let perfect = vec![vec![0, 1, 2, 3, 4, 5], vec![1, 0, 2, 3, 4, 5]];
        assert_eq!(topk_precision(&perfect, &truth, 1).unwrap(), 1.0);
        assert_eq!(topk_precision(&perfect, &truth, 5).unwrap(), 1.0);
        assert_eq!(topk_precision(&[], &[], 1), Err(MetricError::Empty));
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!((ap - 0.8333).abs() < 1e-4);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[3.0, 2.0, 1.0], &[true, true, false]), Some(1.0));
        let n = 7;
        let reversed: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut pos = vec![false; n];
        pos[0] = true;
        assert!((average_precision(&reversed, &pos).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        assert_eq!(average_precision(&[1.0], &[false]), None);
    }

    #[test]
    fn ties_rank_lower_index_first() {
        assert_eq!(rank_classes(&[1.0, 2.0, 2.0, 0.5]), vec![1, 2, 0, 3]);
        let ap = average_precision(&[0.5, 0.5, 0.5], &[false, false, true]).unwrap();
        assert!((ap - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn map_errors() {
        assert_eq!(mean_average_precision(&[], &[]), Err(MetricError::Empty));
        assert_eq!(
            mean_average_precision(&[vec![0.1, 0.2]], &[vec![false, false]]),
            Err(MetricError::NoPositives)
        );
        assert!(mean_average_precision(&[vec![0.1, 0.2]], &[vec![true]]).is_err());
    }

    #[test]
    fn random_instances_match_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let n = rng.random_range(1..=8);
            let k = rng.random_range(1..=5);
            // coarse scores so ties occur
            let scores: Vec<Vec<f64>> =
                (0..n).map(|_| (0..k).map(|_| rng.random_range(0..4) as f64 / 4.0).collect()).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let labels: Vec<Vec<bool>> = (0..n).map(|_| (0..k).map(|_| rng.random_bool(0.4)).collect()).collect();
            let ranked: Vec<Vec<usize>> = scores.iter().map(|s| rank_classes(s)).collect();
            let sets: Vec<Vec<usize>> = truth.iter().map(|&t| vec![t]).collect();
            for kk in 1..=k {
                assert_eq!(topk_precision(&ranked, &sets, kk).unwrap(), brute_topk(&scores, &truth, kk));
            }
            assert_eq!(mean_average_precision(&scores, &labels).ok(), brute_map(&scores, &labels));
        }
    }

    #[test]
    fn csv_format() {
        let r = MetricsReport {
            epoch: 3,
            split: Split::Val,
            loss: 1.0 / 3.0,
            top1: 0.5,
            top5: 1.0,
            map: None,
            wall_time: 9.0,
        };
        let multi = MetricsReport {
            map: Some(0.25),
            split: Split::Train,
            ..r.clone()
        };
        let s = metrics_csv_string(&[r, multi]);
        assert_eq!(
            s,
            "epoch,split,loss,top1,top5,map\n3,val,0.333333,0.500000,1.000000,\n3,train,0.333333,0.500000,1.000000,0.250000\n"
        );
    }

    proptest! {
        #[test]
        fn top1_never_exceeds_top5(scores in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..10),
                                   seed in 0u64..1000) {
            let truth: Vec<Vec<usize>> = (0..scores.len()).map(|i| vec![((seed as usize) + i * 7) % 6]).collect();
            let ranked: Vec<Vec<usize>> = scores.iter().map(|s| rank_classes(s)).collect();
            let t1 = topk_precision(&ranked, &truth, 1).unwrap();
            let t5 = topk_precision(&ranked, &truth, 5).unwrap();
            prop_assert!(t1 <= t5);
            prop_assert!((0.0..=1.0).contains(&t1) && (0.0..=1.0).contains(&t5));
        }
    }
}
