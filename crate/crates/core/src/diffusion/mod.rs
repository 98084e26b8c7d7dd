//! Forward noising, the noise-matching loss, training, and the reverse
//! (ancestral) chain with its image-to-image and purification variants.

mod denoiser;
mod schedule;

pub use denoiser::{time_embedding, Denoiser, DenoiserConfig, NoisePredictor};
pub use schedule::{DiffusionSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::tensor::{RngStream, Tape, Tensor, Var};

/// One Monte-Carlo term of the diffusion loss.
#[derive(Clone, Debug)]
pub struct DiffusionLossSample {
    pub t: usize,
    pub eps: Tensor,
    pub x_t: Tensor,
    pub loss: f32,
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    x0.expect_same_shape(eps)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Traced forward diffusion with one step per row of `x0`.
pub fn diffuse_var<'t>(
    tape: &'t Tape,
    x0: Var<'t>,
    steps: &[usize],
    eps: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Var<'t>> {
    for &t in steps {
        sched.check_step(t)?;
    }
    let signal: Vec<f32> = steps.iter().map(|&t| sched.alpha_bar(t).sqrt()).collect();
    let noise: Vec<f32> = steps.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt()).collect();
    let e = tape.constant(eps.clone()).scale_rows(&noise)?;
    x0.scale_rows(&signal)?.add(&e)
}

/// Per-row `||eps - eps_theta(x_t, t, c)||^2` as a `[batch]` variable.
pub fn l_dm_rows<'t, P: NoisePredictor + ?Sized>(
    model: &P,
    tape: &'t Tape,
    sched: &DiffusionSchedule,
    x0: Var<'t>,
    cond: Var<'t>,
    steps: &[usize],
    eps: &Tensor,
) -> Result<Var<'t>> {
    let x_t = diffuse_var(tape, x0, steps, eps, sched)?;
    let pred = model.predict(tape, x_t, steps, cond)?;
    Ok(pred.sub(&tape.constant(eps.clone()))?.square().row_sums())
}

/// Untraced diffusion loss at a single step `t`; rows of `x0` are averaged.
pub fn l_dm<P: NoisePredictor + ?Sized>(
    model: &P,
    sched: &DiffusionSchedule,
    x0: &Tensor,
    cond: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<f32> {
    let x0 = as_matrix(x0)?;
    let eps = eps.reshape(x0.shape())?;
    let tape = Tape::new();
    let c = tape.constant(cond.clone()).broadcast_rows(x0.rows());
    let steps = vec![t; x0.rows()];
    let rows = l_dm_rows(model, &tape, sched, tape.constant(x0), c, &steps, &eps)?;
    Ok(rows.mean().value().data()[0])
}

/// Draws `(t, eps)` for every row and evaluates the loss once.
pub fn sample_loss<P: NoisePredictor + ?Sized>(
    model: &P,
    sched: &DiffusionSchedule,
    x0: &Tensor,
    cond: &Tensor,
    rng: &mut RngStream,
) -> Result<DiffusionLossSample> {
    let t = rng.uniform_int(1, sched.steps);
    let eps = rng.gaussian(x0.shape());
    let x_t = forward_diffuse(x0, t, &eps, sched)?;
    let loss = l_dm(model, sched, x0, cond, t, &eps)?;
    Ok(DiffusionLossSample { t, eps, x_t, loss })
}

pub(crate) fn as_matrix(x: &Tensor) -> Result<Tensor> {
    match x.shape().len() {
        1 => x.reshape(&[1, x.len()]),
        2 => Ok(x.clone()),
        _ => Err(Error::Dimension(format!("expected a vector or matrix, got {:?}", x.shape()))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Probability of replacing the class condition with the null condition.
    pub cond_dropout: f32,
    pub seed: u64,
    /// Fail when the mean loss over the last 10% of steps exceeds this.
    pub loss_threshold: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 4000, batch_size: 128, lr: 2e-3, cond_dropout: 0.2, seed: 0, loss_threshold: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<f32>,
    /// Mean minibatch loss over the last 10% of steps.
    pub final_loss: f32,
}

pub(crate) fn tail_mean(curve: &[f32]) -> f32 {
    let n = (curve.len() / 10).max(1).min(curve.len());
    if n == 0 {
        return f32::NAN;
    }
    curve[curve.len() - n..].iter().sum::<f32>() / n as f32
}

/// Fits the network and class table by minimizing the noise-matching loss.
pub fn train_denoiser(
    mut model: Denoiser,
    data: &Tensor,
    labels: &[usize],
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<(Denoiser, TrainReport)> {
    if data.rows() == 0 || data.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if labels.len() != data.rows() {
        return Err(Error::CountMismatch { images: data.rows(), labels: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.config.classes) {
        return Err(Error::Precondition(format!(
            "label {bad} outside condition table of {} classes",
            model.config.classes
        )));
    }
    if data.cols() != model.config.data_dim {
        return Err(Error::Dimension(format!(
            "data width {} vs denoiser {}",
            data.cols(),
            model.config.data_dim
        )));
    }
    let mut rng = RngStream::new(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let dc = model.config.cond_dim;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.uniform_int(0, data.rows() - 1)).collect();
        let x0 = data.select_rows(&idx);
        let steps: Vec<usize> = idx.iter().map(|_| rng.uniform_int(1, sched.steps)).collect();
        let eps = rng.gaussian(x0.shape());
        let mut mask = Vec::with_capacity(idx.len() * dc);
        let mut gather = Vec::with_capacity(idx.len() * dc);
        for &i in &idx {
            let keep = if rng.uniform() < cfg.cond_dropout as f64 { 0.0 } else { 1.0 };
            mask.extend(std::iter::repeat_n(keep, dc));
            gather.extend((0..dc).map(|j| labels[i] * dc + j));
        }

        let tape = Tape::new();
        let net = model.net.bind(&tape, true);
        let table = tape.leaf(model.class_table.clone());
        let cond = table
            .gather(&gather)?
            .reshape(&[idx.len(), dc])?
            .mul(&tape.constant(Tensor::new(vec![idx.len(), dc], mask)?))?;
        let x_t = diffuse_var(&tape, tape.constant(x0), &steps, &eps, sched)?;
        let pred = model.forward_bound(&tape, &net, x_t, &steps, cond)?;
        let loss = pred.sub(&tape.constant(eps))?.square().row_sums().mean();
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: value });
        }
        curve.push(value);
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = net.params.iter().map(|p| grads.wrt(p)).collect::<Result<_>>()?;
        let mut all = model.net.params().to_vec();
        all.push(model.class_table.clone());
        let mut all_g = g;
        all_g.push(grads.wrt(&table)?);
        let mut updated = opt.step(&all, &all_g);
        model.class_table = updated.pop().expect("table");
        model.net.set_params(updated)?;
    }
    let final_loss = tail_mean(&curve);
    if let Some(th) = cfg.loss_threshold {
        if !(final_loss < th) {
            return Err(Error::Underfit { what: "final training loss", value: final_loss, threshold: th });
        }
    }
    Ok((model, TrainReport { curve, final_loss }))
}

/// Runs the reverse chain from step `from` down to 0.
///
/// `x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_theta) / sqrt(alpha_t) + sigma_t z`
/// with `sigma_t^2 = beta_t` and no noise on the final step.
pub fn reverse_chain(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    x_from: &Tensor,
    from: usize,
    cond: &Tensor,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if from > sched.steps {
        return Err(Error::Step { t: from, max: sched.steps });
    }
    let mut x = x_from.clone();
    for t in (1..=from).rev() {
        let eps = model.predict_eps(&x, &vec![t; x.rows()], cond)?;
        let beta = sched.beta(t);
        let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv = 1.0 / sched.alpha(t).sqrt();
        let mean = x.zip_map(&eps, |xv, e| inv * (xv - coef * e))?;
        x = if t > 1 {
            let z = rng.gaussian(x.shape());
            let sigma = beta.sqrt();
            mean.zip_map(&z, |m, zv| m + sigma * zv)?
        } else {
            mean
        };
    }
    Ok(x)
}

/// Ancestral sampling of `count` rows conditioned on `cond`.
pub fn sample(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    cond: &Tensor,
    rng: &mut RngStream,
    count: usize,
) -> Result<Tensor> {
    let x_t = rng.gaussian(&[count, model.config.data_dim]);
    if count == 0 {
        return Ok(x_t);
    }
    reverse_chain(model, sched, &x_t, sched.steps, cond, rng)
}

/// `round(strength * T)`, at least 1.
pub fn strength_to_step(strength: f32, sched: &DiffusionSchedule) -> Result<usize> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::Config(format!("strength {strength} outside (0, 1]")));
    }
    Ok(((strength * sched.steps as f32).round() as usize).clamp(1, sched.steps))
}

/// Noises `source` to `round(strength * T)` and denoises it under `cond`.
pub fn img2img(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    cond: &Tensor,
    source: &Tensor,
    strength: f32,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let s = strength_to_step(strength, sched)?;
    let source = as_matrix(source)?;
    let eps = rng.gaussian(source.shape());
    let x_s = forward_diffuse(&source, s, &eps, sched)?;
    reverse_chain(model, sched, &x_s, s, cond, rng)
}

/// Noises `x` to `t_star` and runs the unconditional reverse chain back.
pub fn diffpure(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    x: &Tensor,
    t_star: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    sched.check_step(t_star)?;
    let x = as_matrix(x)?;
    let eps = rng.gaussian(x.shape());
    let x_s = forward_diffuse(&x, t_star, &eps, sched)?;
    reverse_chain(model, sched, &x_s, t_star, &model.null_condition(), rng)
}
