use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actsum::dataset::Video;
use actsum::evaluation::{
    actionness_distribution, keyshot_f1, pairwise_consensus_f1, pooled_distribution, rank_frequency, F1Mode,
    RankWeighting,
};
use actsum::io::{read_annotations, read_features, read_json, write_json, Checkpoint};
use actsum::labels::build_oracle_labels;
use actsum::segmentation::{kts_with_config, SegmentList};
use actsum::summary::{generate_summary, SummaryRecord};
use actsum::synthetic::{write_corpus, SyntheticSpec};
use actsum::training::{evaluate_videos, split_validation, train, TrainConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "actsum", version, about = "Actionness-regularized keyshot video summarization")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with `[train]` and `[synthetic]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Summary length as a fraction of the video.
    #[arg(long, global = true)]
    budget: Option<f64>,
    /// Weight of the actionness loss.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// How multiple reference summaries are combined.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Average,
    Max,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a feature file into shots.
    Segment {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        max_segments: Option<usize>,
        #[arg(long)]
        penalty: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build consensus labels from an annotation file.
    Oracle {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset directory.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        min_frames: Option<usize>,
        #[arg(long)]
        max_frames: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        key_segments: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        /// Write the per-epoch history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Build a keyshot summary from a checkpoint and a feature file.
    Summarize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Shots as a JSON list of `[start, end)` pairs.
        #[arg(long, conflicts_with = "annotations")]
        shots: Option<PathBuf>,
        /// Take the shots from an annotation file.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a summary file, or a checkpoint over a dataset directory.
    Evaluate {
        #[arg(long, requires = "annotations", conflicts_with_all = ["checkpoint", "data"])]
        summary: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print annotation and summary statistics as tab-separated tables.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        /// Also tabulate the summaries of this model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    All,
    Val,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    train: TrainConfig,
    synthetic: SyntheticSpec,
}

fn resolve(global: &GlobalArgs) -> Result<FileConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.train.seed = seed;
    }
    if let Some(b) = global.budget {
        cfg.train.budget = b;
    }
    if let Some(l) = global.lambda {
        cfg.train.lambda = l;
    }
    if let Some(m) = global.mode {
        cfg.train.f1_mode = match m {
            ModeArg::Average => F1Mode::Average,
            ModeArg::Max => F1Mode::Max,
        };
    }
    Ok(cfg)
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(path) => write_json(path, value)?,
        None => println!("{}", serde_json::to_string_pretty(value)?),
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

fn dist_row(label: &str, d: Option<[f64; 4]>) -> String {
    let cells: Vec<String> = (0..4).map(|k| fmt_opt(d.map(|d| d[k]))).collect();
    format!("{label}\t{}", cells.join("\t"))
}

fn load_videos(dir: &Path, cfg: &TrainConfig) -> Result<Vec<Video>> {
    actsum::io::load_dataset(dir, cfg.sigma_rule).with_context(|| format!("loading dataset {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli.global)?;
    match &cli.command {
        Command::Segment {
            max_segments, penalty, ..
        } => {
            if max_segments.is_some() {
                cfg.train.kts.max_segments = *max_segments;
            }
            if let Some(p) = penalty {
                cfg.train.kts.penalty = *p;
            }
        }
        Command::GenSynthetic {
            videos,
            min_frames,
            max_frames,
            dim,
            key_segments,
            noise,
            ..
        } => {
            let s = &mut cfg.synthetic;
            s.n_videos = videos.unwrap_or(s.n_videos);
            s.min_frames = min_frames.unwrap_or(s.min_frames);
            s.max_frames = max_frames.unwrap_or(s.max_frames);
            s.dim = dim.unwrap_or(s.dim);
            s.n_key_segments = key_segments.unwrap_or(s.n_key_segments);
            s.noise_level = noise.unwrap_or(s.noise_level);
        }
        Command::Train {
            epochs,
            learning_rate,
            patience,
            hidden,
            ..
        } => {
            let t = &mut cfg.train;
            t.max_epochs = epochs.unwrap_or(t.max_epochs);
            t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
            t.patience = patience.unwrap_or(t.patience);
            if let Some(h) = hidden {
                t.hidden = *h;
                t.head_hidden = *h;
                t.phi_dim = *h;
            }
        }
        _ => {}
    }
    eprintln!("resolved config: {}", serde_json::to_string(&cfg)?);
    eprintln!("seed: {}", cfg.train.seed);
    let tc = &cfg.train;

    match cli.command {
        Command::Segment { features, out, .. } => {
            let x = read_features(&features)?;
            let shots = kts_with_config(&x, &tc.kts)?;
            emit(out.as_deref(), &shots)
        }
        Command::Oracle { annotations, out } => {
            let set = read_annotations(&annotations)?;
            let labels = build_oracle_labels(&set, tc.sigma_rule)?;
            emit(out.as_deref(), &labels)
        }
        Command::GenSynthetic { out, .. } => {
            let corpus = write_corpus(&out, &cfg.synthetic, tc.seed)?;
            eprintln!("wrote {} videos to {}", corpus.len(), out.display());
            Ok(())
        }
        Command::Train { data, out, history, .. } => {
            let videos = load_videos(&data, tc)?;
            let outcome = train(&videos, tc)?;
            eprint!("{}", outcome.history.log_lines());
            Checkpoint {
                params: outcome.params,
                train_config: Some(tc.clone()),
                seed: tc.seed,
            }
            .save(&out)?;
            if let Some(h) = history {
                write_json(&h, &outcome.history)?;
            }
            eprintln!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Summarize {
            checkpoint,
            features,
            shots,
            annotations,
            out,
        } => {
            let model = Checkpoint::load(&checkpoint)?.params;
            let x = read_features(&features)?;
            let shots: SegmentList = match (shots, annotations) {
                (Some(p), _) => read_json(&p)?,
                (None, Some(p)) => read_annotations(&p)?.segments,
                (None, None) => kts_with_config(&x, &tc.kts)?,
            };
            let summary = generate_summary(&model, &x, &shots, tc.budget)?;
            emit(out.as_deref(), &summary.to_record(tc.budget))
        }
        Command::Evaluate {
            summary: Some(summary),
            annotations: Some(annotations),
            out,
            ..
        } => {
            let record: SummaryRecord = read_json(&summary)?;
            let set = read_annotations(&annotations)?;
            if record.n_frames != set.n_frames() {
                bail!(
                    "summary covers {} frames but the annotations cover {}",
                    record.n_frames,
                    set.n_frames()
                );
            }
            let mask = record.mask()?;
            let labels = build_oracle_labels(&set, tc.sigma_rule)?;
            let mut report = keyshot_f1(&mask, &set.user_masks(), tc.f1_mode)?;
            report.summary_distribution = actionness_distribution(Some(&mask), &labels.frame_ranks).ok();
            report.video_distribution = Some(actionness_distribution(None, &labels.frame_ranks)?);
            emit(out.as_deref(), &report)
        }
        Command::Evaluate {
            checkpoint: Some(checkpoint),
            data: Some(data),
            split,
            out,
            ..
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let videos = load_videos(&data, tc)?;
            let chosen: Vec<&Video> = match split {
                Split::All => videos.iter().collect(),
                Split::Val => {
                    let trained = ck.train_config.clone().unwrap_or_default();
                    let (_, val) = split_validation(videos.len(), trained.val_ratio, ck.seed)?;
                    val.iter().map(|&i| &videos[i]).collect()
                }
            };
            let report = evaluate_videos(&ck.params, &chosen, tc.budget, tc.f1_mode)?;
            emit(out.as_deref(), &report)
        }
        Command::Evaluate { .. } => bail!("evaluate needs --summary with --annotations, or --checkpoint with --data"),
        Command::Analyze { data, checkpoint } => analyze(&data, checkpoint.as_deref(), tc),
    }
}

fn analyze(data: &Path, checkpoint: Option<&Path>, tc: &TrainConfig) -> Result<()> {
    let videos = load_videos(data, tc)?;
    println!("# pairwise annotator f1 per actionness scale");
    println!("video\tscale0\tscale1\tscale2\tscale3\toverall");
    let mut sums = [0.0; 5];
    let mut counts = [0usize; 5];
    for v in &videos {
        let c = pairwise_consensus_f1(&v.annotations.users, &v.annotations.segments)?;
        let cells: Vec<Option<f64>> = c.per_scale.iter().copied().chain([c.overall]).collect();
        for (k, x) in cells.iter().enumerate() {
            if let Some(x) = x {
                sums[k] += x;
                counts[k] += 1;
            }
        }
        let text: Vec<String> = cells.into_iter().map(fmt_opt).collect();
        println!("{}\t{}", v.id, text.join("\t"));
    }
    let means: Vec<String> = (0..5)
        .map(|k| fmt_opt((counts[k] > 0).then(|| sums[k] / counts[k] as f64)))
        .collect();
    println!("mean\t{}", means.join("\t"));

    println!();
    println!("# share of frames at each actionness scale");
    println!("source\tscale0\tscale1\tscale2\tscale3");
    let mut per_user = [0.0; 4];
    let mut n_users = 0usize;
    for v in &videos {
        for h in rank_frequency(&v.annotations.users, &v.annotations.segments, RankWeighting::Frames)? {
            (0..4).for_each(|k| per_user[k] += h[k]);
            n_users += 1;
        }
    }
    per_user.iter_mut().for_each(|x| *x /= n_users as f64);
    println!("{}", dist_row("annotator_ranks", Some(per_user)));
    let video_dist = pooled_distribution(videos.iter().map(|v| (None, v.labels.frame_ranks.as_slice())))?;
    println!("{}", dist_row("videos", Some(video_dist)));
    let user_masks: Vec<(Vec<bool>, &Video)> = videos
        .iter()
        .flat_map(|v| v.annotations.user_masks().into_iter().map(move |m| (m, v)))
        .collect();
    let user_dist = pooled_distribution(
        user_masks
            .iter()
            .map(|(m, v)| (Some(m.as_slice()), v.labels.frame_ranks.as_slice())),
    )
    .ok();
    println!("{}", dist_row("user_summaries", user_dist));
    let oracle_dist = pooled_distribution(
        videos
            .iter()
            .map(|v| (Some(v.labels.summary_mask.as_slice()), v.labels.frame_ranks.as_slice())),
    )
    .ok();
    println!("{}", dist_row("oracle_summaries", oracle_dist));
    if let Some(path) = checkpoint {
        let model = Checkpoint::load(path)?.params;
        let masks = videos
            .iter()
            .map(|v| generate_summary(&model, &v.features, &v.annotations.segments, tc.budget).map(|s| s.selected))
            .collect::<actsum::Result<Vec<_>>>()?;
        let model_dist = pooled_distribution(
            videos
                .iter()
                .zip(&masks)
                .map(|(v, m)| (Some(m.as_slice()), v.labels.frame_ranks.as_slice())),
        )
        .ok();
        println!("{}", dist_row("model_summaries", model_dist));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
