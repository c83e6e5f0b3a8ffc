//! Command-line front end: corpus generation, training, sampling, evaluation,
//! round-trip checks and SVG rendering.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod render;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gloss2pose::acd::AcdModel;
use gloss2pose::data::{
    generate_synthetic_corpus, read_manifest, read_pose_file, sample_id, write_manifest,
    write_pose_file, Corpus, ManifestEntry, PoseSequence,
};
use gloss2pose::diffusion::{build_cosine_schedule, sample, sample_with_length};
use gloss2pose::disentangle::{disentangle, reassemble};
use gloss2pose::eval::evaluate_set;
use gloss2pose::exec::Execution;
use gloss2pose::skeleton::SkeletonTopology;
use gloss2pose::training::{train_with_progress, write_loss_csv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use config::{set, RunConfig};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SIGN_IDD_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "gloss2pose",
    version,
    about = "Gloss-to-pose diffusion toolkit"
)]
pub struct Cli {
    /// JSON file overriding default settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run batch work on one thread even when built with parallelism.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic gloss→pose corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a denoiser on a corpus.
    Train(TrainArgs),
    /// Sample pose sequences for gloss sequences.
    Generate(GenerateArgs),
    /// Compare predicted pose sequences with references.
    Evaluate(EvaluateArgs),
    /// Check that disentangling and reassembling reproduces poses.
    Roundtrip(RoundtripArgs),
    /// Draw pose frames as SVG stick figures.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub frames_per_gloss: Option<usize>,
    #[arg(long)]
    pub topology: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory holding manifest.jsonl and vocab.txt.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub topology: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Diffusion steps T.
    #[arg(long)]
    pub schedule_steps: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint to write.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Loss history CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Space-separated gloss tokens.
    #[arg(long, conflicts_with = "manifest")]
    pub gloss: Option<String>,
    /// Manifest whose gloss sequences are generated in one run.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sampling iterations I.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frame count; predicted from the gloss when absent.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Use the reference pose lengths from --manifest instead of predicting.
    #[arg(long, requires = "manifest")]
    pub reference_lengths: bool,
    /// Pose file for --gloss, directory for --manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Reference manifest.
    #[arg(long)]
    pub reference: PathBuf,
    /// Prediction manifest; samples pair up by pose-file stem.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub topology: Option<String>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    /// Pose files to check.
    #[arg(long, num_args = 1..)]
    pub poses: Vec<PathBuf>,
    /// Manifest whose pose files are checked.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub topology: Option<String>,
    /// Largest coordinate deviation accepted.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub pose: PathBuf,
    /// Reference pose drawn beside the main one.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Comma-separated frame indices; all frames when absent.
    #[arg(long, value_delimiter = ',')]
    pub frames: Vec<usize>,
    #[arg(long)]
    pub topology: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Short machine-readable name for an error's category.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    use gloss2pose::Error as E;
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<E>()) else {
        return "cli";
    };
    let mut e = e;
    while let E::Stage { source, .. } = e {
        e = source;
    }
    match e {
        E::Io { .. } => "io",
        E::Parse(_) => "parse",
        E::Topology(_) => "topology",
        E::Shape(_) => "shape",
        E::InvalidArgument(_) => "invalid-argument",
        E::UnknownToken(_) => "unknown-token",
        E::Diverged { .. } => "diverged",
        E::Checkpoint(_) => "checkpoint",
        E::Stage { .. } => "stage",
    }
}

/// Single-line rendering of an error and its causes.
pub fn error_line(err: &anyhow::Error) -> String {
    let chain: Vec<String> = err.chain().map(|c| c.to_string()).collect();
    let mut parts: Vec<&str> = Vec::new();
    for c in &chain {
        if !parts.iter().any(|p| p.contains(c.as_str())) {
            parts.push(c);
        }
    }
    format!(
        "error[{}]: {}",
        error_kind(err),
        parts.join(": ").replace('\n', " ")
    )
}

fn execution(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

/// Applies the thread cap from [`THREADS_ENV`], if set.
pub fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker threads")?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn announce(command: &str, cfg: &impl serde::Serialize) {
    println!(
        "{command} settings: {}",
        serde_json::to_string(cfg).expect("settings serialize")
    );
}

fn required(path: Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    path.with_context(|| format!("missing --{what} (or the matching config entry)"))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let exec = execution(&cli);
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(&mut cfg, a),
        Command::Train(a) => train(&mut cfg, a, exec),
        Command::Generate(a) => generate(&mut cfg, a),
        Command::Evaluate(a) => evaluate(&mut cfg, a, exec),
        Command::Roundtrip(a) => roundtrip(&mut cfg, a),
        Command::Render(a) => render_cmd(&mut cfg, a),
    }
}

fn gen_corpus(cfg: &mut RunConfig, a: GenCorpusArgs) -> anyhow::Result<()> {
    set(&mut cfg.corpus.vocab_size, a.vocab);
    set(&mut cfg.corpus.samples, a.samples);
    set(&mut cfg.corpus.frames_per_gloss, a.frames_per_gloss);
    set(&mut cfg.topology, a.topology);
    set(&mut cfg.seed, a.seed);
    let out = a
        .out
        .or(cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("corpus"));
    announce(
        "gen-corpus",
        &serde_json::json!({
            "vocab": cfg.corpus.vocab_size,
            "samples": cfg.corpus.samples,
            "frames_per_gloss": cfg.corpus.frames_per_gloss,
            "topology": cfg.topology,
            "seed": cfg.seed,
            "out": out,
        }),
    );
    let topo = SkeletonTopology::resolve(&cfg.topology)?;
    let corpus = generate_synthetic_corpus(
        cfg.corpus.vocab_size,
        cfg.corpus.samples,
        cfg.corpus.frames_per_gloss,
        &topo,
        cfg.seed,
    )?;
    corpus.write(&out)?;
    println!(
        "wrote {} samples, vocabulary of {} to {}",
        corpus.samples.len(),
        corpus.vocabulary.len(),
        out.display()
    );
    Ok(())
}

fn load_corpus(dir: &Path, topo: &SkeletonTopology) -> anyhow::Result<Corpus> {
    Ok(Corpus::read(
        dir.join("manifest.jsonl"),
        dir.join("vocab.txt"),
        topo,
    )?)
}

fn train(cfg: &mut RunConfig, a: TrainArgs, exec: Execution) -> anyhow::Result<()> {
    set(&mut cfg.topology, a.topology);
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.batch_size, a.batch_size);
    set(&mut cfg.train.lambda_bone, a.lambda);
    set(&mut cfg.train.learning_rate, a.lr);
    set(&mut cfg.schedule_steps, a.schedule_steps);
    set(&mut cfg.model.d_model, a.d_model);
    set(&mut cfg.model.heads, a.heads);
    set(&mut cfg.seed, a.seed);
    cfg.corpus_dir = a.corpus.or(cfg.corpus_dir.take());
    cfg.checkpoint = Some(
        a.checkpoint
            .or(cfg.checkpoint.take())
            .unwrap_or_else(|| PathBuf::from("model.ckpt")),
    );
    announce("train", cfg);
    let corpus_dir = required(cfg.corpus_dir.clone(), "corpus")?;
    let checkpoint = cfg.checkpoint.clone().expect("set above");
    let csv = a
        .loss_csv
        .unwrap_or_else(|| checkpoint.with_extension("csv"));

    let topo = SkeletonTopology::resolve(&cfg.topology)?;
    let corpus = load_corpus(&corpus_dir, &topo)?;
    let sched = build_cosine_schedule(cfg.schedule_steps)?;
    let mut model = AcdModel::new(
        cfg.model.clone(),
        topo,
        corpus.vocabulary.clone(),
        cfg.schedule_steps,
        cfg.seed,
    )?;
    println!(
        "training on {} samples, {} parameters",
        corpus.samples.len(),
        model.num_parameters()
    );
    let every = (cfg.train.epochs / 10).max(1);
    let history = train_with_progress(
        &corpus,
        &mut model,
        &sched,
        &cfg.train_config(),
        exec,
        |e| {
            if e.epoch % every == 0 {
                println!(
                    "epoch {} loss_total {:.6} loss_joint {:.6} loss_bone {:.6}",
                    e.epoch, e.loss_total, e.loss_joint, e.loss_bone
                );
            }
        },
    )?;
    model.save(&checkpoint)?;
    write_loss_csv(&history, &csv)?;
    if let Some(last) = history.last() {
        println!(
            "final loss_total {:.6} loss_joint {:.6} loss_bone {:.6}",
            last.loss_total, last.loss_joint, last.loss_bone
        );
    }
    println!(
        "checkpoint {} loss history {}",
        checkpoint.display(),
        csv.display()
    );
    Ok(())
}

fn generate(cfg: &mut RunConfig, a: GenerateArgs) -> anyhow::Result<()> {
    set(&mut cfg.inference_steps, a.steps);
    set(&mut cfg.seed, a.seed);
    cfg.checkpoint = a.checkpoint.or(cfg.checkpoint.take());
    cfg.output = a.out.or(cfg.output.take());
    announce(
        "generate",
        &serde_json::json!({
            "inference_steps": cfg.inference_steps,
            "seed": cfg.seed,
            "checkpoint": cfg.checkpoint,
            "out": cfg.output,
            "frames": a.frames,
        }),
    );
    let model = AcdModel::load(required(cfg.checkpoint.clone(), "checkpoint")?)?;
    let sched = build_cosine_schedule(model.schedule_steps())?;

    if let Some(manifest) = &a.manifest {
        let out = cfg
            .output
            .clone()
            .unwrap_or_else(|| PathBuf::from("generated"));
        let poses = out.join("poses");
        std::fs::create_dir_all(&poses).with_context(|| format!("creating {}", poses.display()))?;
        let entries = read_manifest(manifest)?;
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut written = Vec::with_capacity(entries.len());
        for e in &entries {
            let gloss = model.tokenize(&e.gloss)?;
            let frames = match (a.frames, a.reference_lengths) {
                (Some(n), _) => n,
                (None, true) => read_pose_file(base.join(&e.pose_file), None)?.num_frames(),
                (None, false) => model.predict_length(&gloss)?,
            };
            let mut sample_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let seq = sample_with_length(
                &gloss,
                &model,
                &sched,
                cfg.inference_steps,
                frames,
                &mut sample_rng,
            )?;
            let rel = format!("poses/{}.json", sample_id(&e.pose_file));
            write_pose_file(&seq, out.join(&rel))?;
            written.push(ManifestEntry {
                gloss: e.gloss.clone(),
                pose_file: rel,
            });
        }
        write_manifest(&written, out.join("manifest.jsonl"))?;
        println!(
            "generated {} sequences into {}",
            written.len(),
            out.display()
        );
        return Ok(());
    }

    let words: Vec<String> = required_gloss(a.gloss.as_deref())?;
    let gloss = model.tokenize(&words)?;
    let seq = match a.frames {
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            sample_with_length(&gloss, &model, &sched, cfg.inference_steps, n, &mut rng)?
        }
        None => sample(&gloss, &model, &sched, cfg.inference_steps, cfg.seed)?,
    };
    let out = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("pose.json"));
    write_pose_file(&seq, &out)?;
    println!(
        "S={} J={} written to {}",
        seq.num_frames(),
        seq.num_joints(),
        out.display()
    );
    Ok(())
}

fn required_gloss(gloss: Option<&str>) -> anyhow::Result<Vec<String>> {
    let words: Vec<String> = gloss
        .context("missing --gloss or --manifest")?
        .split_whitespace()
        .map(str::to_string)
        .collect();
    if words.is_empty() {
        bail!("--gloss is empty");
    }
    Ok(words)
}

fn manifest_poses(manifest: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(read_manifest(manifest)?
        .into_iter()
        .map(|e| (sample_id(&e.pose_file), base.join(&e.pose_file)))
        .collect())
}

fn evaluate(cfg: &mut RunConfig, a: EvaluateArgs, exec: Execution) -> anyhow::Result<()> {
    set(&mut cfg.topology, a.topology);
    announce(
        "evaluate",
        &serde_json::json!({
            "reference": a.reference,
            "predictions": a.predictions,
            "topology": cfg.topology,
        }),
    );
    let topo = SkeletonTopology::resolve(&cfg.topology)?;
    let reference = manifest_poses(&a.reference)?;
    let predictions = manifest_poses(&a.predictions)?;
    let missing: Vec<&String> = reference
        .keys()
        .filter(|k| !predictions.contains_key(*k))
        .collect();
    let extra: Vec<&String> = predictions
        .keys()
        .filter(|k| !reference.contains_key(*k))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        bail!(
            "sample ids differ: missing predictions {missing:?}, unmatched predictions {extra:?}"
        );
    }
    let pairs = reference
        .iter()
        .map(|(id, path)| {
            Ok((
                id.clone(),
                read_pose_file(path, Some(&topo))?,
                read_pose_file(&predictions[id], Some(&topo))?,
            ))
        })
        .collect::<anyhow::Result<Vec<(String, PoseSequence, PoseSequence)>>>()?;
    let report = evaluate_set(&pairs, &topo, exec)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &a.out {
        Some(p) => {
            std::fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
            println!(
                "mpjpe {:.6} mpjae {:.4} fid {:.6} over {} sequences ({} failed); report {}",
                report.mpjpe,
                report.mpjae,
                report.fid,
                report.evaluated,
                report.failed,
                p.display()
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn roundtrip(cfg: &mut RunConfig, a: RoundtripArgs) -> anyhow::Result<()> {
    set(&mut cfg.topology, a.topology);
    announce(
        "roundtrip",
        &serde_json::json!({
            "topology": cfg.topology,
            "tolerance": a.tolerance,
        }),
    );
    let topo = SkeletonTopology::resolve(&cfg.topology)?;
    let mut files = a.poses.clone();
    if let Some(m) = &a.manifest {
        files.extend(manifest_poses(m)?.into_values());
    }
    if files.is_empty() {
        bail!("no pose files given (use --poses or --manifest)");
    }
    let mut worst = 0.0f64;
    let mut frames = 0usize;
    for f in &files {
        let seq = read_pose_file(f, Some(&topo))?;
        for s in 0..seq.num_frames() {
            let pose = seq.frame(s);
            let back = reassemble(&disentangle(&pose, &topo), pose.coords[topo.root()], &topo);
            for (p, q) in pose.coords.iter().zip(&back.coords) {
                for k in 0..3 {
                    worst = worst.max((p[k] - q[k]).abs());
                }
            }
            frames += 1;
        }
    }
    println!(
        "checked {} files, {frames} frames, max deviation {worst:e}",
        files.len()
    );
    if !(worst <= a.tolerance) {
        bail!("round trip deviation {worst:e} exceeds {:e}", a.tolerance);
    }
    println!("pass");
    Ok(())
}

fn render_cmd(cfg: &mut RunConfig, a: RenderArgs) -> anyhow::Result<()> {
    set(&mut cfg.topology, a.topology);
    let out = a
        .out
        .or(cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("render"));
    announce(
        "render",
        &serde_json::json!({
            "topology": cfg.topology,
            "frames": a.frames,
            "out": out,
        }),
    );
    let topo = SkeletonTopology::resolve(&cfg.topology)?;
    let main = read_pose_file(&a.pose, Some(&topo))?;
    let reference = a
        .compare
        .as_ref()
        .map(|p| read_pose_file(p, Some(&topo)))
        .transpose()?;
    let mut seqs = vec![&main];
    seqs.extend(reference.as_ref());
    let available = seqs.iter().map(|s| s.num_frames()).min().expect("nonempty");
    let frames: Vec<usize> = if a.frames.is_empty() {
        (0..available).collect()
    } else {
        a.frames.clone()
    };
    if let Some(&bad) = frames.iter().find(|&&f| f >= available) {
        bail!(gloss2pose::Error::InvalidArgument(format!(
            "frame index {bad} out of range (sequence has {available} frames)"
        )));
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for &f in &frames {
        let path = out.join(format!("frame_{f:04}.svg"));
        std::fs::write(&path, render::render_frame(&seqs, f, &topo))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    println!("rendered {} frames into {}", frames.len(), out.display());
    Ok(())
}
