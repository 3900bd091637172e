//! Adam training of the joint loss with validation-f1 early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Video;
use crate::error::{Error, Result};
use crate::evaluation::{actionness_accuracy, keyshot_f1, pooled_distribution, EvalReport, F1Mode};
use crate::labels::{sample_training_subset, ActionnessRank, SigmaRule, SubsetMode};
use crate::model::{loss_and_gradient, predict, ModelConfig, ModelParameters, Targets};
use crate::segmentation::KtsConfig;
use crate::summary::{generate_summary, summarize_scores};

// Independent generator streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_ratio: f64,
    pub budget: f64,
    pub seed: u64,
    pub subset_mode: SubsetMode,
    pub sigma_rule: SigmaRule,
    pub kts: KtsConfig,
    /// Global gradient-norm clip applied before each Adam step.
    pub grad_clip: Option<f64>,
    pub f1_mode: F1Mode,
    pub hidden: usize,
    pub head_hidden: usize,
    pub phi_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            lambda: 0.003,
            learning_rate: 0.001,
            max_epochs: 100,
            patience: 5,
            val_ratio: 0.2,
            budget: 0.15,
            seed: 0,
            subset_mode: SubsetMode::Stochastic,
            sigma_rule: SigmaRule::default(),
            kts: KtsConfig::default(),
            grad_clip: Some(5.0),
            f1_mode: F1Mode::Average,
            hidden: model.hidden,
            head_hidden: model.head_hidden,
            phi_dim: model.phi_dim,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.val_ratio > 0.0 && self.val_ratio < 1.0) {
            return bad(format!("val_ratio {} must lie in (0, 1)", self.val_ratio));
        }
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return bad(format!("budget {} must lie in (0, 1]", self.budget));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda {} must be a nonnegative real", self.lambda));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        if self.hidden == 0 || self.head_hidden == 0 || self.phi_dim == 0 {
            return bad("model widths must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden: self.hidden,
            head_hidden: self.head_hidden,
            phi_dim: self.phi_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if theta.len() != grad.len() || state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(Error::LengthMismatch {
            left: theta.len(),
            right: grad.len(),
        });
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::non_finite(format!("gradient coordinate {i}")));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Seeded shuffle, then `⌈ratio·N⌉` items to validation. Both index lists
/// come back sorted.
pub fn split_validation(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyDataset("nothing to split"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("validation ratio {ratio} must lie in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed, STREAM_SPLIT));
    let n_val = ((ratio * n as f64) - 1e-9).ceil() as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Patience-based stopping on a score that should increase.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records the score of `epoch`; returns `true` when it is a new best.
    pub fn record(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if score <= b => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub summarization: f64,
    pub regularizer: f64,
    pub joint: f64,
    pub val_f1: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

impl TrainHistory {
    /// One line per epoch.
    pub fn log_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "epoch {:3}  S {:.6}  R {:.6}  joint {:.6}  val_f1 {:.4}  {:.2}s\n",
                e.epoch, e.summarization, e.regularizer, e.joint, e.val_f1, e.wall_seconds
            ));
        }
        out.push_str(&format!(
            "stopped at epoch {}, best epoch {} (val f1 {:.4})\n",
            self.stopped_epoch, self.best_epoch, self.best_val_f1
        ));
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub history: TrainHistory,
}

fn clip_gradient(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Trains from scratch, returning the parameters of the best validation epoch.
pub fn train(videos: &[Video], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let first = videos.first().ok_or(Error::EmptyDataset("no videos"))?;
    let input_dim = first.features.cols();
    if let Some(v) = videos.iter().find(|v| v.features.cols() != input_dim) {
        return Err(Error::Video {
            video: v.id.clone(),
            source: Box::new(Error::shape("feature width", input_dim, v.features.cols())),
        });
    }
    let (train_idx, val_idx) = split_validation(videos.len(), config.val_ratio, config.seed)?;
    if train_idx.is_empty() {
        return Err(Error::EmptyDataset("no training videos left after the validation split"));
    }
    let val_videos: Vec<&Video> = val_idx.iter().map(|&i| &videos[i]).collect();

    let mut params = ModelParameters::init(config.model_config(input_dim), &mut seeded(config.seed, STREAM_INIT));
    let mut theta = params.flatten();
    let mut adam = AdamState::new(theta.len());
    let mut rng = seeded(config.seed, STREAM_TRAIN);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_params = params.clone();
    let mut epochs = Vec::new();
    let mut order = train_idx.clone();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut s_sum, mut r_sum, mut j_sum) = (0.0, 0.0, 0.0);
        for &vi in &order {
            let video = &videos[vi];
            let wrap = |e: Error| Error::Training {
                epoch,
                video: video.id.clone(),
                source: Box::new(e),
            };
            let subset = sample_training_subset(
                &video.labels.smoothed,
                &video.annotations.segments,
                config.subset_mode,
                &mut rng,
            )
            .map_err(wrap)?;
            let targets = Targets {
                subset,
                frame_ranks: video.labels.frame_ranks.clone(),
            };
            let (loss, grad) = loss_and_gradient(&params, &video.features, &targets, config.lambda).map_err(wrap)?;
            let mut grad = grad.flatten();
            if let Some(c) = config.grad_clip {
                clip_gradient(&mut grad, c);
            }
            adam_step(&mut theta, &grad, &mut adam, config.learning_rate).map_err(wrap)?;
            params.assign_flat(&theta)?;
            s_sum += loss.summarization;
            r_sum += loss.regularizer;
            j_sum += loss.joint;
        }
        let k = order.len() as f64;
        let val_f1 = validation_f1(&params, &val_videos, config.budget, config.f1_mode).map_err(|e| {
            Error::Training {
                epoch,
                video: "<validation>".into(),
                source: Box::new(e),
            }
        })?;
        epochs.push(EpochRecord {
            epoch,
            summarization: s_sum / k,
            regularizer: r_sum / k,
            joint: j_sum / k,
            val_f1,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if stopper.record(epoch, val_f1) {
            best_params = params.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    let (best_epoch, best_val_f1) = stopper.best().expect("at least one epoch");
    let history = TrainHistory {
        stopped_epoch: epochs.len(),
        epochs,
        best_epoch,
        best_val_f1,
        train_ids: train_idx.iter().map(|&i| videos[i].id.clone()).collect(),
        val_ids: val_idx.iter().map(|&i| videos[i].id.clone()).collect(),
    };
    Ok(TrainOutcome {
        params: best_params,
        history,
    })
}

/// Mean keyshot f1 over videos, reduced in video order.
pub fn validation_f1(params: &ModelParameters, videos: &[&Video], budget: f64, mode: F1Mode) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::EmptyDataset("no validation videos"));
    }
    let mut total = 0.0;
    for v in videos {
        let summary = generate_summary(params, &v.features, &v.annotations.segments, budget)?;
        total += keyshot_f1(&summary.selected, &v.annotations.user_masks(), mode)?.f1;
    }
    Ok(total / videos.len() as f64)
}

/// Per-video and pooled evaluation of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub overall: EvalReport,
    pub per_video: Vec<(String, EvalReport)>,
}

pub fn evaluate_videos(params: &ModelParameters, videos: &[&Video], budget: f64, mode: F1Mode) -> Result<DatasetReport> {
    if videos.is_empty() {
        return Err(Error::EmptyDataset("no videos to evaluate"));
    }
    let mut per_video = Vec::with_capacity(videos.len());
    let mut masks = Vec::with_capacity(videos.len());
    let mut pred_ranks: Vec<ActionnessRank> = Vec::new();
    let mut oracle_ranks: Vec<ActionnessRank> = Vec::new();
    for v in videos {
        let out = predict(params, &v.features)?;
        let summary = summarize_scores(&out.quality, &v.annotations.segments, budget)?;
        let mut report = keyshot_f1(&summary.selected, &v.annotations.user_masks(), mode)?;
        let ranks = out.predicted_ranks();
        let (acc, chance) = actionness_accuracy(&ranks, &v.labels.frame_ranks)?;
        report.accuracy = Some(acc);
        report.chance = Some(chance);
        report.video_distribution = Some(crate::evaluation::actionness_distribution(None, &v.labels.frame_ranks)?);
        report.summary_distribution =
            crate::evaluation::actionness_distribution(Some(&summary.selected), &v.labels.frame_ranks).ok();
        pred_ranks.extend(ranks);
        oracle_ranks.extend(v.labels.frame_ranks.iter().copied());
        per_video.push((v.id.clone(), report));
        masks.push(summary.selected);
    }
    let k = videos.len() as f64;
    let (acc, chance) = actionness_accuracy(&pred_ranks, &oracle_ranks)?;
    let overall = EvalReport {
        f1: per_video.iter().map(|(_, r)| r.f1).sum::<f64>() / k,
        precision: per_video.iter().map(|(_, r)| r.precision).sum::<f64>() / k,
        recall: per_video.iter().map(|(_, r)| r.recall).sum::<f64>() / k,
        summary_distribution: pooled_distribution(
            videos
                .iter()
                .zip(&masks)
                .map(|(v, m)| (Some(m.as_slice()), v.labels.frame_ranks.as_slice())),
        )
        .ok(),
        video_distribution: Some(pooled_distribution(
            videos.iter().map(|v| (None, v.labels.frame_ranks.as_slice())),
        )?),
        accuracy: Some(acc),
        chance: Some(chance),
    };
    Ok(DatasetReport { overall, per_video })
}

/// Mean keyshot f1 of summaries built from uniformly random shot scores.
pub fn random_baseline_f1<R: Rng + ?Sized>(
    videos: &[&Video],
    budget: f64,
    mode: F1Mode,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    if videos.is_empty() || draws == 0 {
        return Err(Error::EmptyDataset("random baseline needs videos and draws"));
    }
    let mut total = 0.0;
    for v in videos {
        let shots = &v.annotations.segments;
        let gts = v.annotations.user_masks();
        for _ in 0..draws {
            let shot_values: Vec<f64> = (0..shots.len()).map(|_| rng.random::<f64>()).collect();
            let frame_values = shots.expand(&shot_values)?;
            let summary = summarize_scores(&frame_values, shots, budget)?;
            total += keyshot_f1(&summary.selected, &gts, mode)?.f1;
        }
    }
    Ok(total / (videos.len() * draws) as f64)
}
