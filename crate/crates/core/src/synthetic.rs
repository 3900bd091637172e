//! Seeded synthetic corpus with planted shots, actionness and summaries.
//!
//! Every planted segment gets its own random unit-scale centroid. Frames are
//! pushed along a corpus-wide action direction in proportion to their
//! segment's actionness rank, then perturbed by isotropic noise. Annotators
//! see the planted ranks with occasional off-by-one disagreements and pick
//! mostly the highest-actionness segments for their summaries.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_json, write_video, DatasetIndex, INDEX_FILE};
use crate::labels::{ActionnessRank, AnnotationSet, UserAnnotation};
use crate::numerics::Matrix;
use crate::segmentation::SegmentList;
use crate::summary::{budget_frames, DEFAULT_BUDGET};
use crate::training::seeded;

const STREAM_CORPUS: u64 = 11;
/// Target share of frames at each rank, lowest rank first.
const RANK_SHARES: [f64; 4] = [0.55, 0.20, 0.15, 0.10];
const MIN_FRAMES: usize = 40;
const MAX_FRAMES: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub dim: usize,
    /// Number of planted segments at the highest actionness rank.
    pub n_key_segments: usize,
    /// Standard deviation of the per-frame noise, relative to the unit
    /// scale of the segment centroids.
    pub noise_level: f64,
    /// Displacement along the action direction at the highest rank.
    pub action_strength: f64,
    pub n_users: usize,
    /// Probability that an annotator shifts a segment's rank by one.
    pub rank_noise: f64,
    /// Probability that an annotator keeps each top-rank segment.
    pub key_recall: f64,
    /// Shortest and longest lengths of the non-key segments.
    pub segment_len: (usize, usize),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_videos: 20,
            min_frames: 60,
            max_frames: 120,
            dim: 64,
            n_key_segments: 2,
            noise_level: 0.1,
            action_strength: 1.5,
            n_users: 3,
            rank_noise: 0.15,
            key_recall: 0.9,
            segment_len: (4, 10),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_videos == 0 {
            return bad("n_videos must be positive".into());
        }
        if self.min_frames < MIN_FRAMES || self.max_frames > MAX_FRAMES || self.min_frames > self.max_frames {
            return bad(format!(
                "frame range [{}, {}] must lie within [{MIN_FRAMES}, {MAX_FRAMES}]",
                self.min_frames, self.max_frames
            ));
        }
        if self.dim < 2 {
            return bad(format!("dim {} must be at least 2", self.dim));
        }
        let key_frames = rank_quotas(self.min_frames)[3];
        if self.n_key_segments == 0 || self.n_key_segments > key_frames {
            return bad(format!(
                "n_key_segments {} must lie in [1, {key_frames}] for {} frames",
                self.n_key_segments, self.min_frames
            ));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise_level {} must be a nonnegative real", self.noise_level));
        }
        if !self.action_strength.is_finite() {
            return bad("action_strength must be finite".into());
        }
        if self.n_users < 2 {
            return bad(format!("n_users {} must be at least 2", self.n_users));
        }
        if !(0.0..=1.0).contains(&self.rank_noise) || !(self.key_recall > 0.0 && self.key_recall <= 1.0) {
            return bad("rank_noise must lie in [0, 1] and key_recall in (0, 1]".into());
        }
        let (lo, hi) = self.segment_len;
        if lo < 2 || lo > hi {
            return bad(format!("segment_len ({lo}, {hi}) must satisfy 2 <= lo <= hi"));
        }
        Ok(())
    }
}

/// A generated video together with what was planted in it.
#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub features: Matrix,
    pub annotations: AnnotationSet,
    pub planted_ranks: Vec<ActionnessRank>,
}

impl SyntheticVideo {
    pub fn planted_segments(&self) -> &SegmentList {
        &self.annotations.segments
    }
}

/// Frame counts per rank by largest-remainder rounding of `RANK_SHARES`.
fn rank_quotas(n: usize) -> [usize; 4] {
    let exact: Vec<f64> = RANK_SHARES.iter().map(|s| s * n as f64).collect();
    let mut q = [0usize; 4];
    for (k, e) in exact.iter().enumerate() {
        q[k] = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(b.cmp(&a))
    });
    let short = n - q.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        q[k] += 1;
    }
    q
}

fn chunk_lengths<R: Rng + ?Sized>(total: usize, (lo, hi): (usize, usize), rng: &mut R) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = total;
    while left > 0 {
        let mut len = rng.random_range(lo..=hi).min(left);
        if left - len < lo {
            len = left;
        }
        out.push(len);
        left -= len;
    }
    out
}

fn gaussian_vec<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn user_summary<R: Rng + ?Sized>(
    segments: &SegmentList,
    ranks: &[ActionnessRank],
    spec: &SyntheticSpec,
    rng: &mut R,
) -> Result<Vec<bool>> {
    let budget = budget_frames(segments.n_frames(), DEFAULT_BUDGET)?;
    let of_rank = |r: u8| -> Vec<usize> { (0..ranks.len()).filter(|&i| ranks[i].value() == r).collect() };
    let mut keys = of_rank(3);
    keys.shuffle(rng);
    let mut kept: Vec<usize> = keys.iter().copied().filter(|_| rng.random_bool(spec.key_recall)).collect();
    if kept.is_empty() {
        kept.push(keys[0]);
    }
    let mut chosen = Vec::new();
    let mut used = 0;
    for &i in &kept {
        let len = segments.as_slice()[i].len();
        if used + len <= budget {
            chosen.push(i);
            used += len;
        }
    }
    // At least 60% of the summary stays at the top rank.
    let mut allowance = (budget - used).min(used * 2 / 3);
    let mut fill = of_rank(2);
    fill.shuffle(rng);
    for i in fill {
        let len = segments.as_slice()[i].len();
        if len <= allowance {
            chosen.push(i);
            allowance -= len;
        }
    }
    Ok(segments.mask_of(&chosen))
}

fn generate_video<R: Rng + ?Sized>(
    id: String,
    spec: &SyntheticSpec,
    action_dir: &[f64],
    rng: &mut R,
) -> Result<SyntheticVideo> {
    let n = rng.random_range(spec.min_frames..=spec.max_frames);
    let quotas = rank_quotas(n);
    let mut chunks: Vec<(usize, u8)> = Vec::new();
    let k = spec.n_key_segments.min(quotas[3]);
    for j in 0..k {
        chunks.push((quotas[3] / k + usize::from(j < quotas[3] % k), 3));
    }
    for rank in 0..3u8 {
        for len in chunk_lengths(quotas[rank as usize], spec.segment_len, rng) {
            chunks.push((len, rank));
        }
    }
    chunks.shuffle(rng);

    let mut boundaries = Vec::with_capacity(chunks.len());
    let mut at = 0;
    for &(len, _) in &chunks[..chunks.len() - 1] {
        at += len;
        boundaries.push(at);
    }
    let segments = SegmentList::from_boundaries(n, &boundaries)?;
    let planted: Vec<ActionnessRank> = chunks
        .iter()
        .map(|&(_, r)| ActionnessRank::new(r))
        .collect::<Result<_>>()?;

    let d = spec.dim;
    let unit = 1.0 / (d as f64).sqrt();
    let mut data = Vec::with_capacity(n * d);
    for (seg, rank) in segments.iter().zip(&planted) {
        let centroid = gaussian_vec(d, unit, rng);
        let shift = spec.action_strength * rank.value() as f64 / 3.0;
        for _ in seg.frames() {
            for j in 0..d {
                let noise = spec.noise_level * unit * rng.sample::<f64, _>(StandardNormal);
                // Stored as f32 on disk; round here so memory and disk agree.
                data.push((centroid[j] + shift * action_dir[j] + noise) as f32 as f64);
            }
        }
    }
    let features = Matrix::new(n, d, data)?;

    let mut users = Vec::with_capacity(spec.n_users);
    for _ in 0..spec.n_users {
        let segment_ranks = planted
            .iter()
            .map(|r| {
                let v = r.value() as i32;
                let shifted = if rng.random_bool(spec.rank_noise) {
                    v + if rng.random_bool(0.5) { 1 } else { -1 }
                } else {
                    v
                };
                ActionnessRank::new(shifted.clamp(0, 3) as u8)
            })
            .collect::<Result<Vec<_>>>()?;
        let summary = user_summary(&segments, &planted, spec, rng)?;
        users.push(UserAnnotation { summary, segment_ranks });
    }
    let annotations = AnnotationSet::new(id, segments, users)?;
    Ok(SyntheticVideo {
        features,
        annotations,
        planted_ranks: planted,
    })
}

pub fn video_id(i: usize) -> String {
    format!("video_{i:03}")
}

/// Generates a corpus; identical `(spec, seed)` give identical output.
pub fn generate_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    let mut rng = seeded(seed, STREAM_CORPUS);
    let mut action_dir = gaussian_vec(spec.dim, 1.0, &mut rng);
    let norm = action_dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    action_dir.iter_mut().for_each(|x| *x /= norm);
    (0..spec.n_videos)
        .map(|i| generate_video(video_id(i), spec, &action_dir, &mut rng))
        .collect()
}

#[derive(Serialize)]
struct GeneratorRecord<'a> {
    spec: &'a SyntheticSpec,
    seed: u64,
}

/// Writes a generated corpus as a dataset directory.
pub fn write_corpus(dir: &Path, spec: &SyntheticSpec, seed: u64) -> Result<Vec<SyntheticVideo>> {
    let corpus = generate_corpus(spec, seed)?;
    for v in &corpus {
        write_video(dir, &v.features, &v.annotations)?;
    }
    let index = DatasetIndex {
        videos: corpus.iter().map(|v| v.annotations.video_id.clone()).collect(),
        generator: Some(serde_json::to_value(GeneratorRecord { spec, seed }).expect("plain data")),
    };
    write_json(&dir.join(INDEX_FILE), &index)?;
    Ok(corpus)
}
