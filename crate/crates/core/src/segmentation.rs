//! Kernel temporal segmentation.
//!
//! Frames are unit-normalized and compared with a linear kernel. A partition
//! into `m` shots is scored by the total within-shot scatter plus
//! `penalty · m · (ln(n/m) + 1)`, and the optimum over `m ≤ max_segments` is
//! found exactly by dynamic programming over change points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Half-open frame interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }
}

impl From<(usize, usize)> for Segment {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<Segment> for (usize, usize) {
    fn from(s: Segment) -> Self {
        (s.start, s.end)
    }
}

/// Ordered, contiguous partition of `[0, n)` into non-empty segments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct SegmentList {
    segments: Vec<Segment>,
}

impl SegmentList {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let Some(first) = segments.first() else {
            return Err(Error::EmptyInput("segment list"));
        };
        if first.start != 0 {
            return Err(Error::InvalidArgument(format!(
                "first segment starts at {}, expected 0",
                first.start
            )));
        }
        let mut expected = 0;
        for (i, s) in segments.iter().enumerate() {
            if s.start != expected || s.end <= s.start {
                return Err(Error::InvalidArgument(format!(
                    "segment {i} = [{}, {}) breaks the partition at frame {expected}",
                    s.start, s.end
                )));
            }
            expected = s.end;
        }
        Ok(Self { segments })
    }

    /// Builds a partition of `[0, n)` from strictly increasing interior
    /// change points.
    pub fn from_boundaries(n: usize, boundaries: &[usize]) -> Result<Self> {
        let mut segments = Vec::with_capacity(boundaries.len() + 1);
        let mut start = 0;
        for &b in boundaries.iter().chain(std::iter::once(&n)) {
            segments.push(Segment::new(start, b));
            start = b;
        }
        Self::new(segments)
    }

    /// A single segment spanning `[0, n)`.
    pub fn whole(n: usize) -> Result<Self> {
        Self::new(vec![Segment::new(0, n)])
    }

    pub fn n_frames(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Segment> {
        self.segments.iter()
    }

    pub fn as_slice(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get(&self, i: usize) -> Option<&Segment> {
        self.segments.get(i)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.segments.iter().map(Segment::len).collect()
    }

    /// Interior change points (segment starts after the first).
    pub fn boundaries(&self) -> Vec<usize> {
        self.segments.iter().skip(1).map(|s| s.start).collect()
    }

    /// Segment index of every frame.
    pub fn frame_to_segment(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_frames());
        for (i, s) in self.segments.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, s.len()));
        }
        out
    }

    /// Broadcasts one value per segment onto its frames.
    pub fn expand<T: Clone>(&self, per_segment: &[T]) -> Result<Vec<T>> {
        if per_segment.len() != self.len() {
            return Err(Error::LengthMismatch {
                left: per_segment.len(),
                right: self.len(),
            });
        }
        let mut out = Vec::with_capacity(self.n_frames());
        for (s, v) in self.segments.iter().zip(per_segment) {
            out.extend(std::iter::repeat_n(v.clone(), s.len()));
        }
        Ok(out)
    }

    /// Frame mask of the union of the given segments.
    pub fn mask_of(&self, selected: &[usize]) -> Vec<bool> {
        let mut mask = vec![false; self.n_frames()];
        for &i in selected {
            mask[self.segments[i].frames()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    /// Reverses time: frame `i` maps to `n - 1 - i`.
    pub fn reversed(&self) -> Self {
        let n = self.n_frames();
        let segments = self
            .segments
            .iter()
            .rev()
            .map(|s| Segment::new(n - s.end, n - s.start))
            .collect();
        Self { segments }
    }
}

impl TryFrom<Vec<Segment>> for SegmentList {
    type Error = Error;

    fn try_from(v: Vec<Segment>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SegmentList> for Vec<Segment> {
    fn from(s: SegmentList) -> Self {
        s.segments
    }
}

impl<'a> IntoIterator for &'a SegmentList {
    type Item = &'a Segment;
    type IntoIter = std::slice::Iter<'a, Segment>;

    fn into_iter(self) -> Self::IntoIter {
        self.segments.iter()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KtsConfig {
    /// Upper bound on the number of shots; `None` means `⌈n/10⌉`.
    pub max_segments: Option<usize>,
    pub penalty: f64,
}

impl Default for KtsConfig {
    fn default() -> Self {
        Self {
            max_segments: None,
            penalty: 1.0,
        }
    }
}

impl KtsConfig {
    pub fn max_segments_for(&self, n: usize) -> usize {
        self.max_segments.unwrap_or_else(|| n.div_ceil(10)).clamp(1, n.max(1))
    }
}

/// Copy of `features` with every non-zero row scaled to unit norm.
pub fn normalize_rows(features: &Matrix) -> Matrix {
    let mut out = features.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Linear Gram kernel of the unit-normalized frames.
pub fn gram_kernel(features: &Matrix) -> Matrix {
    let x = normalize_rows(features);
    x.matmul_t(&x).expect("conformable")
}

/// Within-segment scatter `Σ K_ii − (1/len) Σ K_ij` over `[start, end)`.
pub fn segment_cost(kernel: &Matrix, start: usize, end: usize) -> Result<f64> {
    let n = kernel.rows();
    if kernel.cols() != n {
        return Err(Error::shape("segment_cost", "square kernel", format!("{:?}", kernel.shape())));
    }
    if start >= end || end > n {
        return Err(Error::IndexOutOfRange { start, end, len: n });
    }
    let diag: f64 = (start..end).map(|i| kernel[(i, i)]).sum();
    let block: f64 = (start..end)
        .map(|i| kernel.row(i)[start..end].iter().sum::<f64>())
        .sum();
    Ok(diag - block / (end - start) as f64)
}

/// Penalty shape `m · (ln(n/m) + 1)`.
pub fn segment_count_penalty(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    m * ((n / m).ln() + 1.0)
}

/// Full objective of a partition: total scatter plus the weighted count penalty.
pub fn kts_objective(kernel: &Matrix, segments: &SegmentList, penalty: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in segments {
        total += segment_cost(kernel, s.start, s.end)?;
    }
    Ok(total + penalty * segment_count_penalty(segments.n_frames(), segments.len()))
}

/// O(1) segment costs from 2-D prefix sums of the kernel.
struct ScatterTable {
    n: usize,
    diag: Vec<f64>,
    block: Vec<f64>,
}

impl ScatterTable {
    fn new(kernel: &Matrix) -> Self {
        let n = kernel.rows();
        let w = n + 1;
        let mut diag = vec![0.0; w];
        let mut block = vec![0.0; w * w];
        for i in 0..n {
            diag[i + 1] = diag[i] + kernel[(i, i)];
            let mut row_acc = 0.0;
            for j in 0..n {
                row_acc += kernel[(i, j)];
                block[(i + 1) * w + j + 1] = block[i * w + j + 1] + row_acc;
            }
        }
        Self { n, diag, block }
    }

    fn cost(&self, a: usize, b: usize) -> f64 {
        let w = self.n + 1;
        let s = self.block[b * w + b] - self.block[a * w + b] - self.block[b * w + a]
            + self.block[a * w + a];
        (self.diag[b] - self.diag[a]) - s / (b - a) as f64
    }
}

fn ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1.0)
}

/// Optimal shot boundaries for `features` (rows are frames).
///
/// Among equal objectives the partition with fewer segments wins, then the
/// one with lexicographically earliest boundaries.
pub fn kts_segment(features: &Matrix, max_segments: usize, penalty: f64) -> Result<SegmentList> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::EmptyInput("feature matrix has no frames"));
    }
    if max_segments == 0 {
        return Err(Error::InvalidArgument("max_segments must be at least 1".into()));
    }
    if !(penalty >= 0.0) || !penalty.is_finite() {
        return Err(Error::InvalidArgument(format!("penalty must be a nonnegative real, got {penalty}")));
    }
    let kernel = gram_kernel(features);
    kts_from_kernel(&kernel, max_segments, penalty)
}

pub fn kts_from_kernel(kernel: &Matrix, max_segments: usize, penalty: f64) -> Result<SegmentList> {
    let n = kernel.rows();
    if n == 0 {
        return Err(Error::EmptyInput("kernel has no frames"));
    }
    let max_m = max_segments.min(n);
    let table = ScatterTable::new(kernel);

    // best[k][i]: minimal scatter of [i, n) split into exactly k+1 segments.
    let mut best = vec![vec![f64::INFINITY; n + 1]; max_m];
    for i in 0..n {
        best[0][i] = table.cost(i, n);
    }
    for k in 1..max_m {
        let (done, rest) = best.split_at_mut(k);
        let prev = &done[k - 1];
        let cur = &mut rest[0];
        // Need at least k+1 frames in [i, n).
        for i in 0..n.saturating_sub(k) {
            let mut v = f64::INFINITY;
            for t in i + 1..=n - k {
                let c = table.cost(i, t) + prev[t];
                if c < v {
                    v = c;
                }
            }
            cur[i] = v;
        }
    }

    let objectives: Vec<f64> = (1..=max_m)
        .map(|m| best[m - 1][0] + penalty * segment_count_penalty(n, m))
        .collect();
    let min_obj = objectives.iter().cloned().fold(f64::INFINITY, f64::min);
    let m = 1 + objectives
        .iter()
        .position(|&o| ties(o, min_obj) || o <= min_obj)
        .expect("at least one segment count");

    let mut boundaries = Vec::with_capacity(m - 1);
    let mut start = 0;
    for k in (1..m).rev() {
        let target = best[k][start];
        let t = (start + 1..=n - k)
            .find(|&t| {
                let c = table.cost(start, t) + best[k - 1][t];
                ties(c, target) || c <= target
            })
            .expect("optimal split exists");
        boundaries.push(t);
        start = t;
    }
    SegmentList::from_boundaries(n, &boundaries)
}

/// `kts_segment` driven by a [`KtsConfig`].
pub fn kts_with_config(features: &Matrix, config: &KtsConfig) -> Result<SegmentList> {
    kts_segment(features, config.max_segments_for(features.rows()), config.penalty)
}
