//! Span decoding, temporal IoU and retrieval metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::MomentAnnotation;
use crate::error::{ImgError, Result};

/// Recall thresholds, as literal constants so that `0.3` is exactly `0.3`.
pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Softmax over the positions where `keep` is true; masked entries become 0.
pub fn masked_probs(logits: &[f64], keep: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != keep.len() {
        return Err(ImgError::InvalidInput(format!(
            "{} logits with a mask of {}",
            logits.len(),
            keep.len()
        )));
    }
    let max = logits
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ImgError::InvalidInput("every position is masked".into()));
    }
    let e: Vec<f64> = logits
        .iter()
        .zip(keep)
        .map(|(&v, &k)| if k { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// `argmax_{i ≤ j} p_s[i]·p_e[j]` over unmasked pairs, ties to the smallest
/// `(i, j)`. Single pass with a running best start.
pub fn decode_span_probs(p_start: &[f64], p_end: &[f64], keep: &[bool]) -> Result<(usize, usize)> {
    if p_start.len() != keep.len() || p_end.len() != keep.len() {
        return Err(ImgError::InvalidInput("probability and mask lengths differ".into()));
    }
    let mut best_start: Option<usize> = None;
    let mut best: Option<(f64, usize, usize)> = None;
    for j in 0..keep.len() {
        if !keep[j] {
            continue;
        }
        match best_start {
            Some(i) if p_start[j] <= p_start[i] => {}
            _ => best_start = Some(j),
        }
        let i = best_start.expect("set above");
        let score = p_start[i] * p_end[j];
        match best {
            Some((s, bi, _)) if score < s || (score == s && i >= bi) => {}
            _ => best = Some((score, i, j)),
        }
    }
    best.map(|(_, i, j)| (i, j))
        .ok_or_else(|| ImgError::InvalidInput("cannot decode a span with every frame masked".into()))
}

pub fn decode_span(start_logits: &[f64], end_logits: &[f64], keep: &[bool]) -> Result<(usize, usize)> {
    decode_span_probs(&masked_probs(start_logits, keep)?, &masked_probs(end_logits, keep)?, keep)
}

/// Frame indices to seconds with frame 0 ↦ 0 and frame `T − 1` ↦ duration.
pub fn span_to_seconds(span: (usize, usize), t: usize, duration: f64) -> (f64, f64) {
    if t <= 1 {
        return (0.0, duration);
    }
    let scale = duration / (t - 1) as f64;
    (span.0 as f64 * scale, span.1 as f64 * scale)
}

pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for s in [a, b] {
        if !(s.0 <= s.1) {
            return Err(ImgError::InvalidInput(format!("span ({}, {}) is reversed", s.0, s.1)));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union <= 0.0 {
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub pred: (f64, f64),
    pub gt: (f64, f64),
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percentage of queries with IoU strictly greater than each threshold, keyed "0.3" etc.
    pub r1_at: BTreeMap<String, f64>,
    pub miou: f64,
    pub count: usize,
    /// How recall thresholds are applied.
    pub threshold_rule: String,
    pub per_query: Vec<QueryResult>,
}

impl EvalReport {
    /// Recall at threshold `mu` ∈ {0.3, 0.5, 0.7}.
    pub fn r1(&self, mu: f64) -> Option<f64> {
        self.r1_at.get(&threshold_key(mu)).copied()
    }
}

fn threshold_key(mu: f64) -> String {
    format!("{mu:.1}")
}

/// Metrics from predicted spans in seconds against ground-truth moments.
pub fn evaluate(preds: &[(f64, f64)], gts: &[MomentAnnotation]) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(ImgError::InvalidInput("cannot evaluate zero queries".into()));
    }
    if preds.len() != gts.len() {
        return Err(ImgError::InvalidInput(format!(
            "{} predictions for {} annotations",
            preds.len(),
            gts.len()
        )));
    }
    let per_query = preds
        .iter()
        .zip(gts)
        .map(|(&pred, gt)| {
            let gt = (gt.start_sec, gt.end_sec);
            Ok(QueryResult {
                pred,
                gt,
                iou: temporal_iou(pred, gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_query.len() as f64;
    let r1_at = IOU_THRESHOLDS
        .iter()
        .map(|&mu| {
            let hits = per_query.iter().filter(|q| q.iou > mu).count() as f64;
            (threshold_key(mu), 100.0 * hits / n)
        })
        .collect();
    let miou = 100.0 * per_query.iter().map(|q| q.iou).sum::<f64>() / n;
    Ok(EvalReport {
        r1_at,
        miou,
        count: per_query.len(),
        threshold_rule: "iou > threshold (strict)".into(),
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(ps: &[f64], pe: &[f64], keep: &[bool]) -> Option<(usize, usize)> {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..ps.len() {
            for j in i..ps.len() {
                if !(keep[i] && keep[j]) {
                    continue;
                }
                let s = ps[i] * pe[j];
                if best.is_none_or(|(b, _, _)| s > b) {
                    best = Some((s, i, j));
                }
            }
        }
        best.map(|(_, i, j)| (i, j))
    }

    fn gt(start: f64, end: f64) -> MomentAnnotation {
        MomentAnnotation::from_seconds(start, end, 10.0, 11).unwrap()
    }

    #[test]
    fn decode_worked_example() {
        let span = decode_span_probs(&[0.1, 0.6, 0.3], &[0.2, 0.1, 0.7], &[true; 3]).unwrap();
        assert_eq!(span, (1, 2));
    }

    #[test]
    fn decode_ordered_argmax_and_single_frame() {
        assert_eq!(decode_span(&[0.0, 5.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 4.0], &[true; 4]).unwrap(), (1, 3));
        assert_eq!(decode_span(&[1.3], &[-2.0], &[true]).unwrap(), (0, 0));
    }

    #[test]
    fn decode_ties_break_lexicographically() {
        assert_eq!(decode_span(&[0.0; 5], &[0.0; 5], &[true; 5]).unwrap(), (0, 0));
        assert_eq!(decode_span(&[0.0; 4], &[0.0; 4], &[false, true, true, true]).unwrap(), (1, 1));
    }

    #[test]
    fn decode_all_masked_rejected() {
        assert!(matches!(decode_span(&[0.0; 3], &[0.0; 3], &[false; 3]), Err(ImgError::InvalidInput(_))));
    }

    #[test]
    fn seconds_mapping() {
        assert_eq!(span_to_seconds((0, 9), 10, 7.5), (0.0, 7.5));
        assert_eq!(span_to_seconds((2, 6), 9, 16.0), (4.0, 12.0));
        assert_eq!(span_to_seconds((0, 0), 1, 3.0), (0.0, 3.0));
    }

    #[test]
    fn iou_cases() {
        assert_eq!(temporal_iou((1.0, 4.0), (1.0, 4.0)).unwrap(), 1.0);
        assert_eq!(temporal_iou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert!((temporal_iou((2.0, 6.0), (4.0, 8.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(temporal_iou((2.0, 2.0), (2.0, 2.0)).unwrap(), 1.0);
        assert_eq!(temporal_iou((2.0, 2.0), (3.0, 3.0)).unwrap(), 0.0);
        assert!(matches!(temporal_iou((3.0, 1.0), (0.0, 1.0)), Err(ImgError::InvalidInput(_))));
    }

    #[test]
    fn evaluate_worked_example() {
        // IoU 0.6 and 0.4 against ground truth [0, 10].
        let gts = [gt(0.0, 10.0), gt(0.0, 10.0)];
        let report = evaluate(&[(0.0, 6.0), (0.0, 4.0)], &gts).unwrap();
        assert!((report.r1(0.3).unwrap() - 100.0).abs() < 1e-9);
        assert!((report.r1(0.5).unwrap() - 50.0).abs() < 1e-9);
        assert!(report.r1(0.7).unwrap().abs() < 1e-9);
        assert!((report.miou - 50.0).abs() < 1e-9);
    }

    #[test]
    fn evaluate_boundary_is_strict() {
        let report = evaluate(&[(0.0, 5.0)], &[gt(0.0, 10.0)]).unwrap();
        assert_eq!(report.per_query[0].iou, 0.5);
        assert_eq!(report.r1(0.5).unwrap(), 0.0);
        assert_eq!(report.r1(0.3).unwrap(), 100.0);
    }

    #[test]
    fn evaluate_perfect_and_empty() {
        let gts = [gt(1.0, 3.0), gt(2.0, 9.0)];
        let report = evaluate(&[(1.0, 3.0), (2.0, 9.0)], &gts).unwrap();
        assert_eq!(report.miou, 100.0);
        assert!(report.r1_at.values().all(|&v| v == 100.0));
        assert!(matches!(evaluate(&[], &[]), Err(ImgError::InvalidInput(_))));
    }

    fn logits_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
        (1usize..=64).prop_flat_map(|t| {
            (
                proptest::collection::vec(-6.0f64..6.0, t),
                proptest::collection::vec(-6.0f64..6.0, t),
                proptest::collection::vec(any::<bool>(), t),
                0..t,
            )
                .prop_map(|(s, e, mut keep, force)| {
                    keep[force] = true;
                    (s, e, keep)
                })
        })
    }

    fn span() -> impl Strategy<Value = (f64, f64)> {
        (0.0f64..20.0, 0.0f64..10.0).prop_map(|(a, len)| (a, a + len))
    }

    proptest! {
        #[test]
        fn decode_matches_brute_force((s, e, keep) in logits_and_mask()) {
            let ps = masked_probs(&s, &keep).unwrap();
            let pe = masked_probs(&e, &keep).unwrap();
            prop_assert_eq!(decode_span(&s, &e, &keep).unwrap(), brute_force(&ps, &pe, &keep).unwrap());
        }

        #[test]
        fn iou_symmetric_and_bounded(a in span(), b in span()) {
            let x = temporal_iou(a, b).unwrap();
            prop_assert_eq!(x, temporal_iou(b, a).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
            if a.1 > a.0 {
                prop_assert_eq!(temporal_iou(a, a).unwrap(), 1.0);
            }
            if x == 1.0 && a.1 > a.0 {
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn evaluate_permutation_invariant_and_miou_is_mean(
            preds in proptest::collection::vec(span(), 1..20),
            rot in 0usize..20,
        ) {
            let gts: Vec<MomentAnnotation> = preds
                .iter()
                .enumerate()
                .map(|(i, _)| MomentAnnotation::from_seconds(i as f64 % 7.0, 8.0 + (i % 5) as f64, 30.0, 31).unwrap())
                .collect();
            let a = evaluate(&preds, &gts).unwrap();
            let k = rot % preds.len();
            let mut p2 = preds.clone();
            let mut g2 = gts.clone();
            p2.rotate_left(k);
            g2.rotate_left(k);
            p2.reverse();
            g2.reverse();
            let b = evaluate(&p2, &g2).unwrap();
            prop_assert!((a.miou - b.miou).abs() < 1e-9);
            prop_assert_eq!(&a.r1_at, &b.r1_at);
            let mean = a.per_query.iter().map(|q| q.iou).sum::<f64>() / a.count as f64 * 100.0;
            prop_assert!((a.miou - mean).abs() < 1e-9);
        }
    }
}
