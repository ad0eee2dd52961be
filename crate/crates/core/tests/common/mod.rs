//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use afpa_core::metrics::{Label, ScoreRecord};

pub fn records(scores: &[(f64, bool)]) -> Vec<ScoreRecord> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &(score, anomalous))| ScoreRecord {
            clip_id: format!("c{i}"),
            machine_type: "fan".into(),
            machine_id: "id_00".into(),
            label: if anomalous { Label::Anomalous } else { Label::Normal },
            score,
        })
        .collect()
}

/// Fraction of (anomalous, normal) pairs ordered correctly, ties counting ½.
pub fn pairwise_auc(scores: &[(f64, bool)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for &(a, _) in scores.iter().filter(|s| s.1) {
        for &(n, _) in scores.iter().filter(|s| !s.1) {
            pairs += 1.0;
            wins += if a > n {
                1.0
            } else if a == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

/// Partial ROC area over FPR in `[0, p]`, divided by `p`, from ROC points
/// taken at `steps` evenly spaced thresholds spanning the scores.
pub fn sweep_pauc(scores: &[(f64, bool)], p: f64, steps: usize) -> f64 {
    let positives = scores.iter().filter(|s| s.1).count() as f64;
    let negatives = scores.len() as f64 - positives;
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let hi = sorted[0].0 + 1.0;
    let lo = sorted[sorted.len() - 1].0 - 1.0;
    let (mut tp, mut fp, mut next) = (0.0, 0.0, 0);
    let mut points = vec![(0.0, 0.0)];
    for k in 0..=steps {
        let t = hi - (hi - lo) * k as f64 / steps as f64;
        while next < sorted.len() && sorted[next].0 >= t {
            if sorted[next].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            next += 1;
        }
        let pt = (fp / negatives, tp / positives);
        if *points.last().unwrap() != pt {
            points.push(pt);
        }
    }
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= p {
            break;
        }
        if x1 <= p {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (p - x0) / (x1 - x0);
            area += (p - x0) * (y0 + y) / 2.0;
        }
    }
    area / p
}
