//! Noise schedule, forward noising, the reverse update, and the sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::acd::{AcdModel, GlossSequence};
use crate::data::PoseSequence;
use crate::disentangle::fuse_frames;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

/// Arrays are indexed by timestep `0..=T`. Index 0 is the clean state:
/// `alpha_bar[0] == 1` and `beta[0] == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [0, {}]",
                self.steps
            )));
        }
        Ok(())
    }
}

fn cosine_f(t: f64, steps: f64) -> f64 {
    let x = ((t / steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

/// Closed-form cosine `ᾱ_t = f(t)/f(0)` without clipping.
pub fn cosine_alpha_bar(t: usize, steps: usize) -> f64 {
    cosine_f(t as f64, steps as f64) / cosine_f(0.0, steps as f64)
}

/// Cosine schedule. `β_t = 1 − ᾱ_t/ᾱ_{t−1}` clipped to [`MAX_BETA`]; `ᾱ` is the
/// running product of the clipped `1 − β`, so it equals the closed form
/// wherever no clipping happened.
pub fn build_cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs T ≥ 1".into()));
    }
    let mut beta = vec![0.0; steps + 1];
    let mut alpha = vec![1.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        let ratio = cosine_alpha_bar(t, steps) / cosine_alpha_bar(t - 1, steps);
        beta[t] = (1.0 - ratio).clamp(f64::MIN_POSITIVE, MAX_BETA);
        alpha[t] = 1.0 - beta[t];
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
    })
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `√ᾱ_t · p0 + √(1 − ᾱ_t) · eps`.
pub fn forward_noise(p0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    check_same(p0, eps, "forward_noise")?;
    let ab = sched.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = p0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Tensor::new(p0.shape().to_vec(), data)
}

/// Stochasticity of the reverse step from `t` to `t_prev`.
pub fn sigma(sched: &NoiseSchedule, t: usize, t_prev: usize) -> f64 {
    let (ab_t, ab_prev) = (sched.alpha_bar[t], sched.alpha_bar[t_prev]);
    ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
}

/// One reverse update from `t` to `t_prev` given the clean-pose estimate.
pub fn ddim_step(
    p_t: &Tensor,
    p0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    fresh_eps: &Tensor,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "ddim_step needs t_prev < t, got {t_prev} ≥ {t}"
        )));
    }
    check_same(p_t, p0_hat, "ddim_step")?;
    check_same(p_t, fresh_eps, "ddim_step")?;
    let (ab_t, ab_prev) = (sched.alpha_bar[t], sched.alpha_bar[t_prev]);
    if ab_prev <= ab_t {
        return Err(Error::InvalidArgument(format!(
            "schedule violation: alpha_bar[{t_prev}]={ab_prev} ≤ alpha_bar[{t}]={ab_t}"
        )));
    }
    let sig = sigma(sched, t, t_prev);
    let (sqrt_ab_t, sqrt_one_minus_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let dir_coef = (1.0 - ab_prev - sig * sig).max(0.0).sqrt();
    let sqrt_ab_prev = ab_prev.sqrt();
    let data = p_t
        .data()
        .iter()
        .zip(p0_hat.data())
        .zip(fresh_eps.data())
        .map(|((&x, &x0), &z)| {
            let eps_t = (x - sqrt_ab_t * x0) / sqrt_one_minus_t;
            sqrt_ab_prev * x0 + dir_coef * eps_t + sig * z
        })
        .collect();
    Tensor::new(p_t.shape().to_vec(), data)
}

/// Noise implied by `p_t` and a clean estimate at step `t`.
pub fn implied_noise(
    p_t: &Tensor,
    p0_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    check_same(p_t, p0_hat, "implied_noise")?;
    let ab = sched.alpha_bar[t];
    let data = p_t
        .data()
        .iter()
        .zip(p0_hat.data())
        .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
        .collect();
    Tensor::new(p_t.shape().to_vec(), data)
}

/// `I` evenly spaced `(t, t_prev)` pairs from `T` down to 0.
pub fn inference_timesteps(steps: usize, iterations: usize) -> Result<Vec<(usize, usize)>> {
    if iterations == 0 || iterations > steps {
        return Err(Error::InvalidArgument(format!(
            "inference iterations must be in [1, {steps}], got {iterations}"
        )));
    }
    let at = |k: usize| -> usize {
        (steps as f64 * (1.0 - k as f64 / iterations as f64)).round() as usize
    };
    Ok((0..iterations).map(|k| (at(k), at(k + 1))).collect())
}

pub fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Generates a pose sequence for `gloss` by iterating the denoiser from pure
/// noise. Deterministic given `seed`.
pub fn sample(
    gloss: &GlossSequence,
    model: &AcdModel,
    sched: &NoiseSchedule,
    iterations: usize,
    seed: u64,
) -> Result<PoseSequence> {
    let frames = model.predict_length(gloss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_length(gloss, model, sched, iterations, frames, &mut rng)
}

/// Like [`sample`] but with an explicit frame count.
pub fn sample_with_length(
    gloss: &GlossSequence,
    model: &AcdModel,
    sched: &NoiseSchedule,
    iterations: usize,
    frames: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PoseSequence> {
    let topology = model.topology();
    let j = topology.num_joints();
    if frames == 0 {
        return Err(Error::InvalidArgument("cannot sample zero frames".into()));
    }
    let shape = [frames, j, 3];
    let schedule = inference_timesteps(sched.steps(), iterations)?;
    let g = model.encode_gloss(gloss)?;
    let mut p_t = standard_normal(&shape, rng);
    let mut p0_hat = Tensor::zeros(&shape);
    for (t, t_prev) in schedule {
        let fused = fuse_frames(p_t.data(), topology);
        p0_hat = model.denoise(&fused, frames, &g, t)?.reshape(&shape)?;
        let z = standard_normal(&shape, rng);
        p_t = ddim_step(&p_t, &p0_hat, t, t_prev, sched, &z)?;
    }
    PoseSequence::from_flat(p0_hat.data(), frames, topology)
}
