//! Keyshot selection: frame scores → shot means → 0/1 knapsack under a
//! duration budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, ModelParameters};
use crate::numerics::Matrix;
use crate::segmentation::{Segment, SegmentList};

pub const DEFAULT_BUDGET: f64 = 0.15;

/// Frame-level summary made of whole shots.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryMask {
    pub selected: Vec<bool>,
    pub shots: SegmentList,
    pub selected_shots: Vec<usize>,
    pub budget_frames: usize,
}

impl SummaryMask {
    pub fn n_selected(&self) -> usize {
        self.selected.iter().filter(|&&b| b).count()
    }

    pub fn to_record(&self, budget: f64) -> SummaryRecord {
        SummaryRecord {
            n_frames: self.shots.n_frames(),
            budget,
            budget_frames: self.budget_frames,
            selected: self
                .selected_shots
                .iter()
                .map(|&i| *self.shots.get(i).expect("valid shot index"))
                .collect(),
        }
    }
}

/// On-disk form of a summary: the selected shot intervals in order plus
/// the budget used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub n_frames: usize,
    pub budget: f64,
    pub budget_frames: usize,
    pub selected: Vec<Segment>,
}

impl SummaryRecord {
    pub fn mask(&self) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.n_frames];
        for s in &self.selected {
            if s.is_empty() || s.end > self.n_frames {
                return Err(Error::IndexOutOfRange {
                    start: s.start,
                    end: s.end,
                    len: self.n_frames,
                });
            }
            mask[s.frames()].iter_mut().for_each(|m| *m = true);
        }
        Ok(mask)
    }
}

/// `⌊budget · n⌋` frames.
pub fn budget_frames(n: usize, budget: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::InvalidArgument(format!("budget {budget} outside [0, 1]")));
    }
    // Nudge so products like 0.15·20 that land a hair under an integer round correctly.
    Ok(((budget * n as f64) + 1e-9).floor() as usize)
}

/// Per-frame importance: the quality head output.
pub fn frame_scores(model: &ModelParameters, features: &Matrix) -> Result<Vec<f64>> {
    Ok(predict(model, features)?.quality)
}

/// Mean frame score of every shot.
pub fn shot_scores(scores: &[f64], shots: &SegmentList) -> Result<Vec<f64>> {
    if scores.len() != shots.n_frames() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: shots.n_frames(),
        });
    }
    Ok(shots
        .iter()
        .map(|s| scores[s.frames()].iter().sum::<f64>() / s.len() as f64)
        .collect())
}

#[derive(Clone, Copy, Debug)]
struct Packed {
    value: f64,
    length: usize,
}

fn value_ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// `a` strictly preferable to `b`: more value, or equal value with less length.
fn prefer(a: Packed, b: Packed) -> bool {
    if value_ties(a.value, b.value) {
        a.length < b.length
    } else {
        a.value > b.value
    }
}

/// Exact 0/1 knapsack maximizing the summed shot scores within
/// `budget_frames`. Value ties (1e-12) go to the shorter total length, then
/// to the lexicographically smallest index set. Returns sorted indices.
pub fn knapsack_select(scores: &[f64], lengths: &[usize], budget_frames: usize) -> Result<Vec<usize>> {
    if scores.len() != lengths.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: lengths.len(),
        });
    }
    if lengths.contains(&0) {
        return Err(Error::InvalidArgument("shot lengths must be at least 1".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::non_finite("shot scores"));
    }
    let k = scores.len();
    let cap = budget_frames.min(lengths.iter().sum());
    let width = cap + 1;
    // table[i][c]: best packing of items i.. within capacity c
    let empty = Packed { value: 0.0, length: 0 };
    let mut table = vec![empty; (k + 1) * width];
    for i in (0..k).rev() {
        for c in 0..=cap {
            let skip = table[(i + 1) * width + c];
            let mut best = skip;
            if lengths[i] <= c {
                let rest = table[(i + 1) * width + c - lengths[i]];
                let take = Packed {
                    value: scores[i] + rest.value,
                    length: lengths[i] + rest.length,
                };
                if prefer(take, skip) {
                    best = take;
                }
            }
            table[i * width + c] = best;
        }
    }
    let mut chosen = Vec::new();
    let mut c = cap;
    for i in 0..k {
        if lengths[i] > c {
            continue;
        }
        let target = table[i * width + c];
        let rest = table[(i + 1) * width + c - lengths[i]];
        let take_value = scores[i] + rest.value;
        if value_ties(take_value, target.value) && lengths[i] + rest.length == target.length {
            chosen.push(i);
            c -= lengths[i];
        }
    }
    Ok(chosen)
}

/// Knapsack summary from arbitrary frame scores.
pub fn summarize_scores(scores: &[f64], shots: &SegmentList, budget: f64) -> Result<SummaryMask> {
    let per_shot = shot_scores(scores, shots)?;
    let limit = budget_frames(shots.n_frames(), budget)?;
    let selected_shots = knapsack_select(&per_shot, &shots.lengths(), limit)?;
    Ok(SummaryMask {
        selected: shots.mask_of(&selected_shots),
        shots: shots.clone(),
        selected_shots,
        budget_frames: limit,
    })
}

/// Model scores → shot means → knapsack.
pub fn generate_summary(
    model: &ModelParameters,
    features: &Matrix,
    shots: &SegmentList,
    budget: f64,
) -> Result<SummaryMask> {
    if features.rows() != shots.n_frames() {
        return Err(Error::LengthMismatch {
            left: features.rows(),
            right: shots.n_frames(),
        });
    }
    let scores = frame_scores(model, features)?;
    summarize_scores(&scores, shots, budget)
}
