//! Joint and bone-orientation losses, Adam, and the single-step denoising
//! training loop.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acd::{AcdModel, DurationTable, GlossSequence};
use crate::data::Corpus;
use crate::diffusion::{forward_noise, standard_normal, NoiseSchedule};
use crate::disentangle::{disentangle, fuse_frames};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numeric::{Bound, Graph, ParamStore, Tensor, Var};
use crate::skeleton::{Pose3D, SkeletonTopology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_bone: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule_steps: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_bone: 0.1,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 100,
            schedule_steps: 1000,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_bone >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda_bone must be ≥ 0, got {}",
                self.lambda_bone
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.schedule_steps == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and schedule_steps must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// The three reported loss terms. `total` applies λ; `bone` is unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub joint: f64,
    pub bone: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_joint: f64,
    pub loss_bone: f64,
}

fn check_pair(target: &Tensor, pred: &Tensor) -> Result<()> {
    if target.shape() != pred.shape() {
        return Err(Error::Shape(format!(
            "target {:?} vs prediction {:?}",
            target.shape(),
            pred.shape()
        )));
    }
    Ok(())
}

/// Mean absolute coordinate error.
pub fn loss_joint(target: &Tensor, pred: &Tensor) -> Result<f64> {
    check_pair(target, pred)?;
    let sum: f64 = target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / target.len() as f64)
}

fn frames_of(t: &Tensor, topology: &SkeletonTopology) -> Result<Vec<Pose3D>> {
    let width = topology.num_joints() * 3;
    if t.is_empty() || !t.len().is_multiple_of(width) {
        return Err(Error::Shape(format!(
            "{} values is not a whole number of {}-joint frames",
            t.len(),
            topology.num_joints()
        )));
    }
    Ok(t.data()
        .chunks_exact(width)
        .map(|f| Pose3D::new(f.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
        .collect())
}

/// Mean squared error between bone directions, over frames, bones and the
/// three direction components.
pub fn loss_bone(target: &Tensor, pred: &Tensor, topology: &SkeletonTopology) -> Result<f64> {
    check_pair(target, pred)?;
    let (ft, fp) = (frames_of(target, topology)?, frames_of(pred, topology)?);
    let root = topology.root();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in ft.iter().zip(&fp) {
        let (da, db) = (disentangle(a, topology), disentangle(b, topology));
        for c in (0..topology.num_joints()).filter(|&c| c != root) {
            let (u, v) = (da.direction(c), db.direction(c));
            for k in 0..3 {
                sum += (u[k] - v[k]).powi(2);
            }
            count += 3;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

pub fn loss_total(
    target: &Tensor,
    pred: &Tensor,
    topology: &SkeletonTopology,
    lambda_bone: f64,
) -> Result<LossParts> {
    let joint = loss_joint(target, pred)?;
    let bone = loss_bone(target, pred, topology)?;
    Ok(LossParts {
        total: joint + lambda_bone * bone,
        joint,
        bone,
    })
}

/// Graph form of the combined loss. `target` and `pred` are `S×(J·3)`.
/// Returns `(total, joint, bone)`.
pub fn loss_total_graph(
    g: &mut Graph,
    target: Var,
    pred: Var,
    topology: &SkeletonTopology,
    lambda_bone: f64,
) -> Result<(Var, Var, Var)> {
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff);
    let joint = g.mean(abs);

    let j = topology.num_joints();
    let frames = g.value(pred).len() / (j * 3);
    let (mut child, mut parent) = (Vec::new(), Vec::new());
    for s in 0..frames {
        for c in (0..j).filter(|&c| c != topology.root()) {
            child.push(s * j + c);
            parent.push(s * j + topology.parents()[c]);
        }
    }
    let directions = |g: &mut Graph, x: Var| -> Result<Var> {
        let rows = g.reshape(x, &[frames * j, 3])?;
        let c = g.gather_rows(rows, &child)?;
        let p = g.gather_rows(rows, &parent)?;
        let v = g.sub(c, p)?;
        Ok(g.normalize_rows(v))
    };
    let bone = if child.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let dt = directions(g, target)?;
        let dp = directions(g, pred)?;
        let e = g.sub(dp, dt)?;
        let sq = g.square(e);
        g.mean(sq)
    };
    let weighted = g.scale(bone, lambda_bone);
    let total = g.add(joint, weighted)?;
    Ok((total, joint, bone))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// One noised training example: the clean pose as `S×(J·3)`, its gloss, the
/// diffusion step and the seed of its noise.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub pose: Tensor,
    pub gloss: &'a GlossSequence,
    pub t: usize,
    pub noise_seed: u64,
}

/// Noisy input for a clean pose at step `t`, as a fused `S×(J·7)` tensor.
pub fn noisy_input(
    pose: &Tensor,
    t: usize,
    noise_seed: u64,
    sched: &NoiseSchedule,
    topology: &SkeletonTopology,
) -> Result<Tensor> {
    let frames = pose.rows();
    let eps = standard_normal(pose.shape(), &mut ChaCha8Rng::seed_from_u64(noise_seed));
    let p_t = forward_noise(pose, t, &eps, sched)?;
    Tensor::new(
        vec![frames, topology.num_joints() * 7],
        fuse_frames(p_t.data(), topology),
    )
}

/// Builds the loss for one example on `g`, with parameters already bound.
pub fn example_loss(
    g: &mut Graph,
    b: &Bound,
    model: &AcdModel,
    ex: &Example<'_>,
    sched: &NoiseSchedule,
    lambda_bone: f64,
) -> Result<(Var, Var, Var)> {
    let fused = noisy_input(&ex.pose, ex.t, ex.noise_seed, sched, model.topology())?;
    let gloss_var = model.encode_gloss_graph(g, b, ex.gloss)?;
    let fused_var = g.constant(fused);
    let trace = model.denoise_graph(g, b, fused_var, gloss_var, ex.t)?;
    let target = g.constant(ex.pose.clone());
    loss_total_graph(g, target, trace.pose, model.topology(), lambda_bone)
}

fn example_gradients(
    model: &AcdModel,
    ex: &Example<'_>,
    sched: &NoiseSchedule,
    lambda_bone: f64,
) -> Result<(LossParts, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let (total, joint, bone) = example_loss(&mut g, &b, model, ex, sched, lambda_bone)?;
    let parts = LossParts {
        total: g.value(total).item(),
        joint: g.value(joint).item(),
        bone: g.value(bone).item(),
    };
    if !parts.total.is_finite() {
        return Ok((parts, Vec::new()));
    }
    g.backward(total)?;
    Ok((parts, b.gradients(&g, model.params())))
}

/// Clean pose of a sample as `S×(J·3)`.
pub fn pose_matrix(seq: &crate::data::PoseSequence) -> Tensor {
    let s = seq.num_frames();
    Tensor::new(vec![s, seq.num_joints() * 3], seq.to_flat()).expect("validated sequence")
}

/// Trains `model` in place. Also refits the model's duration table on the
/// corpus. Returns the per-epoch mean losses.
pub fn train(
    corpus: &Corpus,
    model: &mut AcdModel,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<Vec<EpochLoss>> {
    train_with_progress(corpus, model, sched, cfg, exec, |_| {})
}

pub fn train_with_progress(
    corpus: &Corpus,
    model: &mut AcdModel,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    if corpus.samples.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if sched.steps() != model.schedule_steps() {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} steps, model expects {}",
            sched.steps(),
            model.schedule_steps()
        )));
    }
    corpus.validate(model.topology())?;
    for s in &corpus.samples {
        model.check_gloss(&s.gloss)?;
    }
    model.durations = DurationTable::fit(
        model.vocab().len(),
        corpus
            .samples
            .iter()
            .map(|s| (s.gloss.tokens.as_slice(), s.pose.num_frames())),
    );
    let poses: Vec<Tensor> = corpus
        .samples
        .iter()
        .map(|s| pose_matrix(&s.pose))
        .collect();
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_index = 0usize;

    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut sum = LossParts::default();
        for chunk in order.chunks(cfg.batch_size) {
            let draws: Vec<Example<'_>> = chunk
                .iter()
                .map(|&i| Example {
                    pose: poses[i].clone(),
                    gloss: &corpus.samples[i].gloss,
                    t: rng.random_range(1..=sched.steps()),
                    noise_seed: rng.random(),
                })
                .collect();
            let frozen: &AcdModel = model;
            let results = exec.map(&draws, |d| {
                example_gradients(frozen, d, sched, cfg.lambda_bone)
            });

            let mut grads: Vec<Vec<f64>> = model
                .params()
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect();
            let mut batch = LossParts::default();
            for r in results {
                let (parts, g) = r?;
                if !parts.total.is_finite() {
                    return Err(Error::Diverged { batch: batch_index });
                }
                batch.total += parts.total;
                batch.joint += parts.joint;
                batch.bone += parts.bone;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                }
            }
            let n = draws.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { batch: batch_index });
            }
            if let Some(max) = cfg.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            adam.update(model.params_mut(), &grads);
            sum.total += batch.total;
            sum.joint += batch.joint;
            sum.bone += batch.bone;
            batch_index += 1;
        }
        let n = corpus.samples.len() as f64;
        let rec = EpochLoss {
            epoch,
            loss_total: sum.total / n,
            loss_joint: sum.joint / n,
            loss_bone: sum.bone / n,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// Single-step reconstruction `p̂0` of a clean pose from its noised version at
/// step `t`, as `S×(J·3)`.
pub fn reconstruct(
    model: &AcdModel,
    sched: &NoiseSchedule,
    pose: &Tensor,
    gloss: &GlossSequence,
    t: usize,
    noise_seed: u64,
) -> Result<Tensor> {
    let fused = noisy_input(pose, t, noise_seed, sched, model.topology())?;
    let emb = model.encode_gloss(gloss)?;
    model.denoise(fused.data(), pose.rows(), &emb, t)
}

pub fn loss_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,loss_total,loss_joint,loss_bone\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.loss_total, h.loss_joint, h.loss_bone
        ));
    }
    out
}

pub fn write_loss_csv(history: &[EpochLoss], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_csv(history)).map_err(|e| Error::io(path, e))
}
