//! Training targets derived from multi-annotator data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::f1_from_counts;
use crate::segmentation::SegmentList;

/// Actionness scale: 0 no action, 1 background action, 2 partial foreground
/// action, 3 active foreground action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ActionnessRank(u8);

impl ActionnessRank {
    pub const COUNT: usize = 4;
    pub const NONE: Self = Self(0);
    pub const BACKGROUND: Self = Self(1);
    pub const PARTIAL: Self = Self(2);
    pub const ACTIVE: Self = Self(3);

    pub fn new(value: u8) -> Result<Self> {
        if usize::from(value) < Self::COUNT {
            Ok(Self(value))
        } else {
            Err(Error::InvalidArgument(format!("actionness rank {value} outside 0..=3")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn all() -> [Self; 4] {
        [Self(0), Self(1), Self(2), Self(3)]
    }
}

impl TryFrom<u8> for ActionnessRank {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ActionnessRank> for u8 {
    fn from(r: ActionnessRank) -> u8 {
        r.0
    }
}

/// One annotator's output for a video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserAnnotation {
    pub summary: Vec<bool>,
    pub segment_ranks: Vec<ActionnessRank>,
}

/// All annotations of one video, aligned to a shared segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub video_id: String,
    pub segments: SegmentList,
    pub users: Vec<UserAnnotation>,
}

impl AnnotationSet {
    pub fn new(video_id: impl Into<String>, segments: SegmentList, users: Vec<UserAnnotation>) -> Result<Self> {
        check_aligned(&users, &segments)?;
        Ok(Self {
            video_id: video_id.into(),
            segments,
            users,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.segments.n_frames()
    }

    pub fn user_masks(&self) -> Vec<Vec<bool>> {
        self.users.iter().map(|u| u.summary.clone()).collect()
    }
}

fn check_aligned(users: &[UserAnnotation], segments: &SegmentList) -> Result<()> {
    for u in users {
        if u.summary.len() != segments.n_frames() {
            return Err(Error::LengthMismatch {
                left: u.summary.len(),
                right: segments.n_frames(),
            });
        }
        if u.segment_ranks.len() != segments.len() {
            return Err(Error::LengthMismatch {
                left: u.segment_ranks.len(),
                right: segments.len(),
            });
        }
    }
    Ok(())
}

/// Width of the Gaussian placed on each annotated frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SigmaRule {
    /// σ = segment length / divisor.
    SegmentFraction { divisor: f64 },
    /// σ fixed in frames.
    Fixed { sigma: f64 },
}

impl Default for SigmaRule {
    fn default() -> Self {
        SigmaRule::SegmentFraction { divisor: 6.0 }
    }
}

impl SigmaRule {
    pub fn sigma(&self, segment_len: usize) -> f64 {
        match *self {
            SigmaRule::SegmentFraction { divisor } => segment_len as f64 / divisor,
            SigmaRule::Fixed { sigma } => sigma,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    #[default]
    Stochastic,
    Deterministic,
}

/// Consensus targets for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleLabels {
    pub summary_mask: Vec<bool>,
    pub smoothed: Vec<f64>,
    pub frame_ranks: Vec<ActionnessRank>,
}

/// Greedy oracle run: segments in the order they were added and the mean f1
/// reached after each addition.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTrace {
    pub selected: Vec<usize>,
    pub mean_f1: Vec<f64>,
}

/// Greedily adds whole segments maximizing the mean f1 against all users,
/// stopping at the first step without a strictly positive gain.
pub fn oracle_trace(annotations: &[UserAnnotation], segments: &SegmentList) -> Result<OracleTrace> {
    if annotations.is_empty() {
        return Err(Error::EmptyAnnotations);
    }
    check_aligned(annotations, segments)?;
    let n_users = annotations.len();
    let gt_sizes: Vec<usize> = annotations
        .iter()
        .map(|u| u.summary.iter().filter(|&&b| b).count())
        .collect();
    // hits[s][u]: frames of segment s in user u's summary
    let hits: Vec<Vec<usize>> = segments
        .iter()
        .map(|s| {
            annotations
                .iter()
                .map(|u| u.summary[s.frames()].iter().filter(|&&b| b).count())
                .collect()
        })
        .collect();
    let lengths = segments.lengths();

    let mean_f1 = |overlap: &[usize], pred: usize| -> f64 {
        overlap
            .iter()
            .zip(&gt_sizes)
            .map(|(&o, &g)| f1_from_counts(o, pred, g).2)
            .sum::<f64>()
            / n_users as f64
    };

    let mut chosen = vec![false; segments.len()];
    let mut overlap = vec![0usize; n_users];
    let mut pred = 0usize;
    let mut current = mean_f1(&overlap, pred);
    let mut trace = OracleTrace {
        selected: Vec::new(),
        mean_f1: Vec::new(),
    };
    let mut cand = vec![0usize; n_users];
    loop {
        let mut best: Option<(usize, f64)> = None;
        for s in (0..segments.len()).filter(|&s| !chosen[s]) {
            for u in 0..n_users {
                cand[u] = overlap[u] + hits[s][u];
            }
            let score = mean_f1(&cand, pred + lengths[s]);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((s, score));
            }
        }
        match best {
            Some((s, score)) if score - current > 0.0 => {
                chosen[s] = true;
                for u in 0..n_users {
                    overlap[u] += hits[s][u];
                }
                pred += lengths[s];
                current = score;
                trace.selected.push(s);
                trace.mean_f1.push(score);
            }
            _ => break,
        }
    }
    Ok(trace)
}

/// Frame mask of the greedy consensus summary.
pub fn oracle_summary(annotations: &[UserAnnotation], segments: &SegmentList) -> Result<Vec<bool>> {
    let trace = oracle_trace(annotations, segments)?;
    Ok(segments.mask_of(&trace.selected))
}

/// Per-segment median of user ranks; even counts take the lower half-value.
pub fn oracle_actionness(annotations: &[UserAnnotation]) -> Result<Vec<ActionnessRank>> {
    let first = annotations.first().ok_or(Error::EmptyAnnotations)?;
    let n_seg = first.segment_ranks.len();
    if let Some(u) = annotations.iter().find(|u| u.segment_ranks.len() != n_seg) {
        return Err(Error::LengthMismatch {
            left: u.segment_ranks.len(),
            right: n_seg,
        });
    }
    let mut out = Vec::with_capacity(n_seg);
    let mut buf = Vec::with_capacity(annotations.len());
    for s in 0..n_seg {
        buf.clear();
        buf.extend(annotations.iter().map(|u| u.segment_ranks[s].value()));
        buf.sort_unstable();
        let k = buf.len();
        let median = if k % 2 == 1 {
            buf[k / 2]
        } else {
            (buf[k / 2 - 1] + buf[k / 2]) / 2
        };
        out.push(ActionnessRank(median));
    }
    Ok(out)
}

/// Gaussian-smoothed importance: each selected frame spreads
/// `exp(−(i−f)²/(2σ²))` over its own segment, overlapping bumps combine by
/// max, and frames outside key segments stay at 0.
pub fn gaussian_smooth(mask: &[bool], segments: &SegmentList, sigma_rule: SigmaRule) -> Result<Vec<f64>> {
    if mask.len() != segments.n_frames() {
        return Err(Error::LengthMismatch {
            left: mask.len(),
            right: segments.n_frames(),
        });
    }
    let mut out = vec![0.0; mask.len()];
    for seg in segments {
        let sigma = sigma_rule.sigma(seg.len());
        for f in seg.frames().filter(|&f| mask[f]) {
            for i in seg.frames() {
                let w = if i == f {
                    1.0
                } else {
                    let d = i as f64 - f as f64;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                };
                if w > out[i] {
                    out[i] = w;
                }
            }
        }
    }
    Ok(out)
}

/// Builds the consensus summary, smoothed importance and per-frame ranks.
pub fn build_oracle_labels(set: &AnnotationSet, sigma_rule: SigmaRule) -> Result<OracleLabels> {
    let summary_mask = oracle_summary(&set.users, &set.segments)?;
    let smoothed = gaussian_smooth(&summary_mask, &set.segments, sigma_rule)?;
    let ranks = oracle_actionness(&set.users)?;
    let frame_ranks = set.segments.expand(&ranks)?;
    Ok(OracleLabels {
        summary_mask,
        smoothed,
        frame_ranks,
    })
}

/// Draws one frame per key segment (segments with positive weight) in
/// proportion to `smoothed`; deterministic mode takes each segment's peak,
/// breaking ties toward the segment centre.
pub fn sample_training_subset<R: Rng + ?Sized>(
    smoothed: &[f64],
    segments: &SegmentList,
    mode: SubsetMode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if smoothed.len() != segments.n_frames() {
        return Err(Error::LengthMismatch {
            left: smoothed.len(),
            right: segments.n_frames(),
        });
    }
    let mut subset = Vec::new();
    for seg in segments {
        let w = &smoothed[seg.frames()];
        if w.iter().all(|&v| v == 0.0) {
            continue;
        }
        if w.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::DegenerateWeights {
                start: seg.start,
                end: seg.end,
            });
        }
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateWeights {
                start: seg.start,
                end: seg.end,
            });
        }
        let pick = match mode {
            SubsetMode::Deterministic => {
                let peak = w.iter().cloned().fold(f64::MIN, f64::max);
                // twice the distance to the centre, to stay in integers
                let centre2 = seg.len() - 1;
                (0..w.len())
                    .filter(|&i| w[i] == peak)
                    .min_by_key(|&i| (2 * i).abs_diff(centre2))
                    .expect("non-empty segment")
            }
            SubsetMode::Stochastic => {
                let mut u = rng.random::<f64>() * total;
                let mut idx = w.len() - 1;
                for (i, &v) in w.iter().enumerate() {
                    if u < v {
                        idx = i;
                        break;
                    }
                    u -= v;
                }
                // float slack at the top end must not land on a zero weight
                while w[idx] == 0.0 {
                    idx -= 1;
                }
                idx
            }
        };
        subset.push(seg.start + pick);
    }
    Ok(subset)
}
