//! Keyshot f1, annotator consensus, actionness distributions and
//! classification accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{ActionnessRank, UserAnnotation};
use crate::segmentation::SegmentList;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    #[default]
    Average,
    Max,
}

impl std::str::FromStr for F1Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" => Ok(F1Mode::Average),
            "max" => Ok(F1Mode::Max),
            other => Err(Error::InvalidArgument(format!("unknown f1 mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub summary_distribution: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub video_distribution: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chance: Option<f64>,
}

/// Precision, recall and f1 from overlap and set sizes.
///
/// Two empty sets agree perfectly (f1 = 1); exactly one empty set scores 0.
pub fn f1_from_counts(overlap: usize, pred: usize, gt: usize) -> (f64, f64, f64) {
    match (pred, gt) {
        (0, 0) => (1.0, 1.0, 1.0),
        (0, _) => (0.0, 0.0, 0.0),
        (_, 0) => (0.0, 0.0, 0.0),
        _ => {
            let p = overlap as f64 / pred as f64;
            let r = overlap as f64 / gt as f64;
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (p, r, f1)
        }
    }
}

/// Precision, recall and f1 between two frame masks.
pub fn mask_f1(pred: &[bool], gt: &[bool]) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    let mut overlap = 0;
    let mut np = 0;
    let mut ng = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        overlap += usize::from(p && g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    Ok(f1_from_counts(overlap, np, ng))
}

/// Keyshot f1 of a predicted summary against every reference summary,
/// combined by mean or by the best-matching reference.
pub fn keyshot_f1(pred: &[bool], gts: &[Vec<bool>], mode: F1Mode) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::EmptyInput("no reference summaries"));
    }
    let scores = gts.iter().map(|g| mask_f1(pred, g)).collect::<Result<Vec<_>>>()?;
    let (precision, recall, f1) = match mode {
        F1Mode::Average => {
            let k = scores.len() as f64;
            scores
                .iter()
                .fold((0.0, 0.0, 0.0), |acc, s| (acc.0 + s.0 / k, acc.1 + s.1 / k, acc.2 + s.2 / k))
        }
        F1Mode::Max => scores
            .iter()
            .cloned()
            .fold((0.0, 0.0, f64::NEG_INFINITY), |best, s| if s.2 > best.2 { s } else { best }),
    };
    Ok(EvalReport {
        f1,
        precision,
        recall,
        ..Default::default()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    /// Mean pairwise f1 per scale; `None` when every pair was empty-empty.
    pub per_scale: [Option<f64>; 4],
    pub overall: Option<f64>,
}

/// Mean pairwise f1 between annotators' per-scale frame masks.
pub fn pairwise_consensus_f1(annotations: &[UserAnnotation], segments: &SegmentList) -> Result<ConsensusReport> {
    if annotations.len() < 2 {
        return Err(Error::TooFewUsers(annotations.len()));
    }
    let frame_ranks = annotations
        .iter()
        .map(|u| segments.expand(&u.segment_ranks))
        .collect::<Result<Vec<_>>>()?;
    let mut per_scale = [None; 4];
    for scale in ActionnessRank::all() {
        let masks: Vec<Vec<bool>> = frame_ranks
            .iter()
            .map(|r| r.iter().map(|&v| v == scale).collect())
            .collect();
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for a in 0..masks.len() {
            for b in a + 1..masks.len() {
                if !masks[a].contains(&true) && !masks[b].contains(&true) {
                    continue;
                }
                sum += mask_f1(&masks[a], &masks[b])?.2;
                pairs += 1;
            }
        }
        if pairs > 0 {
            per_scale[scale.index()] = Some(sum / pairs as f64);
        }
    }
    let counted: Vec<f64> = per_scale.iter().flatten().cloned().collect();
    let overall = (!counted.is_empty()).then(|| counted.iter().sum::<f64>() / counted.len() as f64);
    Ok(ConsensusReport { per_scale, overall })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankWeighting {
    #[default]
    Frames,
    Segments,
}

/// Per-user normalized histogram of the chosen actionness scales.
pub fn rank_frequency(
    annotations: &[UserAnnotation],
    segments: &SegmentList,
    weighting: RankWeighting,
) -> Result<Vec<[f64; 4]>> {
    annotations
        .iter()
        .map(|u| {
            if u.segment_ranks.len() != segments.len() {
                return Err(Error::LengthMismatch {
                    left: u.segment_ranks.len(),
                    right: segments.len(),
                });
            }
            let mut hist = [0.0; 4];
            let mut total = 0.0;
            for (seg, r) in segments.iter().zip(&u.segment_ranks) {
                let w = match weighting {
                    RankWeighting::Frames => seg.len() as f64,
                    RankWeighting::Segments => 1.0,
                };
                hist[r.index()] += w;
                total += w;
            }
            hist.iter_mut().for_each(|h| *h /= total);
            Ok(hist)
        })
        .collect()
}

/// Fraction of selected frames at each scale; `None` selects every frame.
pub fn actionness_distribution(mask: Option<&[bool]>, frame_ranks: &[ActionnessRank]) -> Result<[f64; 4]> {
    let mut counts = [0usize; 4];
    match mask {
        Some(m) => {
            if m.len() != frame_ranks.len() {
                return Err(Error::LengthMismatch {
                    left: m.len(),
                    right: frame_ranks.len(),
                });
            }
            for (&sel, r) in m.iter().zip(frame_ranks) {
                if sel {
                    counts[r.index()] += 1;
                }
            }
        }
        None => frame_ranks.iter().for_each(|r| counts[r.index()] += 1),
    }
    normalize_counts(counts)
}

/// Pools per-video frame counts into one distribution.
pub fn pooled_distribution<'a, I>(parts: I) -> Result<[f64; 4]>
where
    I: IntoIterator<Item = (Option<&'a [bool]>, &'a [ActionnessRank])>,
{
    let mut counts = [0usize; 4];
    for (mask, ranks) in parts {
        if let Some(m) = mask {
            if m.len() != ranks.len() {
                return Err(Error::LengthMismatch {
                    left: m.len(),
                    right: ranks.len(),
                });
            }
        }
        for (i, r) in ranks.iter().enumerate() {
            if mask.is_none_or(|m| m[i]) {
                counts[r.index()] += 1;
            }
        }
    }
    normalize_counts(counts)
}

fn normalize_counts(counts: [usize; 4]) -> Result<[f64; 4]> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptySelection);
    }
    Ok(counts.map(|c| c as f64 / total as f64))
}

/// Classification accuracy and the majority-class chance level.
pub fn actionness_accuracy(pred: &[ActionnessRank], oracle: &[ActionnessRank]) -> Result<(f64, f64)> {
    if pred.len() != oracle.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: oracle.len(),
        });
    }
    if oracle.is_empty() {
        return Err(Error::EmptySelection);
    }
    let n = oracle.len() as f64;
    let correct = pred.iter().zip(oracle).filter(|(a, b)| a == b).count();
    let mut counts = [0usize; 4];
    oracle.iter().for_each(|r| counts[r.index()] += 1);
    let majority = *counts.iter().max().expect("four classes");
    Ok((correct as f64 / n, majority as f64 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn r(v: &[u8]) -> Vec<ActionnessRank> {
        v.iter().map(|&x| ActionnessRank::new(x).unwrap()).collect()
    }

    fn mask(n: usize, on: impl Fn(usize) -> bool) -> Vec<bool> {
        (0..n).map(on).collect()
    }

    #[test]
    fn keyshot_cases() {
        let a = mask(30, |i| i < 10);
        let rep = keyshot_f1(&a, &[a.clone()], F1Mode::Average).unwrap();
        assert_eq!(rep.f1, 1.0);
        let b = mask(30, |i| i >= 20);
        assert_eq!(keyshot_f1(&a, &[b], F1Mode::Average).unwrap().f1, 0.0);
        // |pred| = 10, |gt| = 20, overlap 5
        let pred = mask(40, |i| i < 10);
        let gt = mask(40, |i| (5..25).contains(&i));
        let rep = keyshot_f1(&pred, &[gt], F1Mode::Average).unwrap();
        assert!((rep.precision - 0.5).abs() < 1e-15);
        assert!((rep.recall - 0.25).abs() < 1e-15);
        assert!((rep.f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn keyshot_empty_conventions_and_modes() {
        let empty = vec![false; 5];
        let some = mask(5, |i| i == 2);
        assert_eq!(keyshot_f1(&empty, &[empty.clone()], F1Mode::Average).unwrap().f1, 1.0);
        assert_eq!(keyshot_f1(&empty, &[some.clone()], F1Mode::Average).unwrap().f1, 0.0);
        assert_eq!(keyshot_f1(&some, &[empty.clone()], F1Mode::Average).unwrap().f1, 0.0);
        let avg = keyshot_f1(&some, &[some.clone(), empty.clone()], F1Mode::Average).unwrap();
        assert_eq!(avg.f1, 0.5);
        let max = keyshot_f1(&some, &[empty, some.clone()], F1Mode::Max).unwrap();
        assert_eq!(max.f1, 1.0);
        assert!(matches!(
            keyshot_f1(&some, &[vec![true; 3]], F1Mode::Average),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn ann(ranks: &[u8]) -> UserAnnotation {
        UserAnnotation {
            summary: vec![false; 8],
            segment_ranks: r(ranks),
        }
    }

    #[test]
    fn consensus_cases() {
        let segs = SegmentList::from_boundaries(8, &[2, 4, 6]).unwrap();
        let same = vec![ann(&[0, 1, 2, 3]), ann(&[0, 1, 2, 3])];
        assert_eq!(pairwise_consensus_f1(&same, &segs).unwrap().overall, Some(1.0));
        let disjoint3 = vec![ann(&[3, 1, 2, 0]), ann(&[0, 1, 2, 3])];
        let rep = pairwise_consensus_f1(&disjoint3, &segs).unwrap();
        assert_eq!(rep.per_scale[3], Some(0.0));
        assert_eq!(rep.per_scale[1], Some(1.0));
        assert!(matches!(
            pairwise_consensus_f1(&same[..1], &segs),
            Err(Error::TooFewUsers(1))
        ));
    }

    #[test]
    fn consensus_three_users_by_hand() {
        // Segments of lengths 1, 2, 3, 2.
        let segs = SegmentList::from_boundaries(8, &[1, 3, 6]).unwrap();
        let users = vec![ann(&[0, 3, 3, 1]), ann(&[0, 3, 1, 1]), ann(&[1, 0, 3, 1])];
        let rep = pairwise_consensus_f1(&users, &segs).unwrap();
        // scale 0: masks {0}, {0}, {1,2} → pairs f1 1, 0, 0
        assert!((rep.per_scale[0].unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // scale 1: {6,7}, {3,4,5,6,7}, {0,6,7} → 2·2/(2+5)=4/7, 2·2/(2+3)=4/5, 2·2/(5+3)=1/2
        let want1 = (4.0 / 7.0 + 0.8 + 0.5) / 3.0;
        assert!((rep.per_scale[1].unwrap() - want1).abs() < 1e-15);
        // scale 2: all empty → skipped
        assert_eq!(rep.per_scale[2], None);
        // scale 3: {1..6}, {1,2}, {3,4,5} → 2·2/(5+2)=4/7, 2·3/(5+3)=3/4, 0
        let want3 = (4.0 / 7.0 + 0.75 + 0.0) / 3.0;
        assert!((rep.per_scale[3].unwrap() - want3).abs() < 1e-15);
        let overall = (1.0 / 3.0 + want1 + want3) / 3.0;
        assert!((rep.overall.unwrap() - overall).abs() < 1e-15);
    }

    #[test]
    fn rank_frequency_cases() {
        let segs = SegmentList::from_boundaries(20, &[10]).unwrap();
        let u = UserAnnotation {
            summary: vec![false; 20],
            segment_ranks: r(&[0, 3]),
        };
        assert_eq!(
            rank_frequency(std::slice::from_ref(&u), &segs, RankWeighting::Frames).unwrap(),
            vec![[0.5, 0.0, 0.0, 0.5]]
        );
        let uneven = SegmentList::from_boundaries(20, &[15]).unwrap();
        let h = rank_frequency(&[u], &uneven, RankWeighting::Segments).unwrap();
        assert_eq!(h, vec![[0.5, 0.0, 0.0, 0.5]]);
        let zeros = UserAnnotation {
            summary: vec![false; 20],
            segment_ranks: r(&[0, 0]),
        };
        assert_eq!(rank_frequency(&[zeros], &segs, RankWeighting::Frames).unwrap(), vec![[1.0, 0.0, 0.0, 0.0]]);
    }

    #[test]
    fn distribution_and_accuracy() {
        let ranks = r(&[3, 3, 0, 1]);
        let sel = [true, true, false, false];
        assert_eq!(actionness_distribution(Some(&sel), &ranks).unwrap(), [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(actionness_distribution(None, &ranks).unwrap(), [0.25, 0.25, 0.0, 0.5]);
        assert!(matches!(
            actionness_distribution(Some(&[false; 4]), &ranks),
            Err(Error::EmptySelection)
        ));
        let (acc, chance) = actionness_accuracy(&r(&[0, 0, 1, 1]), &r(&[0, 0, 0, 1])).unwrap();
        assert_eq!((acc, chance), (0.75, 0.75));
        let oracle = r(&[2, 2, 0, 1, 2]);
        let (acc, chance) = actionness_accuracy(&r(&[2; 5]), &oracle).unwrap();
        assert_eq!(acc, chance);
        assert_eq!(actionness_accuracy(&oracle, &oracle).unwrap().0, 1.0);
        assert!(actionness_accuracy(&oracle[..2], &oracle).is_err());
    }

    proptest! {
        #[test]
        fn keyshot_symmetric_and_bounded(a in proptest::collection::vec(any::<bool>(), 1..40), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<bool> = a.iter().map(|_| rng.random_bool(0.4)).collect();
            let ab = keyshot_f1(&a, &[b.clone()], F1Mode::Average).unwrap();
            let ba = keyshot_f1(&b, &[a.clone()], F1Mode::Average).unwrap();
            prop_assert_eq!(ab.f1, ba.f1);
            for v in [ab.f1, ab.precision, ab.recall] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn consensus_order_invariant(seed in any::<u64>(), users in 2usize..6) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let segs = SegmentList::from_boundaries(12, &[3, 5, 9]).unwrap();
            let mut anns: Vec<UserAnnotation> = (0..users)
                .map(|_| UserAnnotation {
                    summary: vec![false; 12],
                    segment_ranks: (0..4).map(|_| ActionnessRank::new(rng.random_range(0..4)).unwrap()).collect(),
                })
                .collect();
            let a = pairwise_consensus_f1(&anns, &segs).unwrap();
            anns.shuffle(&mut rng);
            let b = pairwise_consensus_f1(&anns, &segs).unwrap();
            for (x, y) in a.per_scale.iter().zip(&b.per_scale) {
                match (x, y) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                    (None, None) => {}
                    _ => prop_assert!(false),
                }
            }
            let hist = rank_frequency(&anns, &segs, RankWeighting::Frames).unwrap();
            for h in hist {
                prop_assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
