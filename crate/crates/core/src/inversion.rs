//! Condition inversion: fit a free condition vector `S*` so the frozen
//! denoiser reconstructs a small group, then generate from it.

use serde::{Deserialize, Serialize};

use crate::diffusion::{as_matrix, img2img, l_dm_rows, sample, Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::tensor::{RngStream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    ClassTable { class: usize },
    Inverted { init_class: usize, steps: usize, group_size: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    /// `[cond_dim]`
    pub vector: Tensor,
    pub provenance: Provenance,
}

impl ConditionEmbedding {
    pub fn from_class(model: &Denoiser, class: usize) -> Result<Self> {
        Ok(Self { vector: model.class_condition(class)?, provenance: Provenance::ClassTable { class } })
    }

    /// Class whose table entry has the highest cosine similarity.
    pub fn nearest_class(&self, model: &Denoiser) -> usize {
        let v = self.vector.data();
        let norm = |x: &[f32]| x.iter().map(|a| a * a).sum::<f32>().sqrt().max(1e-12);
        (0..model.config.classes)
            .map(|k| {
                let row = model.class_table.row(k);
                let dot: f32 = row.iter().zip(v).map(|(a, b)| a * b).sum();
                (k, dot / (norm(row) * norm(v)))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub steps: usize,
    /// Adam step length.
    pub lr: f32,
    pub group_size: usize,
    /// Noise draws per group image per step.
    pub draws_per_step: usize,
    /// Std of the noise added to the initial table entry.
    pub init_noise: f32,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { steps: 1000, lr: 0.02, group_size: 5, draws_per_step: 4, init_noise: 0.1 }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be at least 1".into()));
        }
        if self.draws_per_step == 0 {
            return Err(Error::Config("draws_per_step must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("inversion lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionReport {
    pub curve: Vec<f32>,
}

/// Mean diffusion loss of the rows of `x0` with the shared condition `s`.
pub fn inversion_objective_var<'t>(
    model: &Denoiser,
    tape: &'t Tape,
    sched: &DiffusionSchedule,
    x0: &Tensor,
    s: Var<'t>,
    steps: &[usize],
    eps: &Tensor,
) -> Result<Var<'t>> {
    let cond = s.broadcast_rows(x0.rows());
    Ok(l_dm_rows(model, tape, sched, tape.constant(x0.clone()), cond, steps, eps)?.mean())
}

/// Minimizes the mean diffusion loss over `group` (rows in the denoiser's
/// data space) with respect to the condition only.
pub fn invert(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    group: &Tensor,
    cfg: &InversionConfig,
    rng: &mut RngStream,
) -> Result<(ConditionEmbedding, InversionReport)> {
    cfg.validate()?;
    let group = as_matrix(group)?;
    if group.rows() == 0 {
        return Err(Error::Precondition("inversion group is empty".into()));
    }
    if group.cols() != model.config.data_dim {
        return Err(Error::Dimension(format!("group width {} vs denoiser {}", group.cols(), model.config.data_dim)));
    }
    let init_class = rng.uniform_int(0, model.config.classes - 1);
    let noise = rng.gaussian(&[model.config.cond_dim]);
    let mut s = model.class_condition(init_class)?.zip_map(&noise, |c, n| c + cfg.init_noise * n)?;

    let rows: Vec<usize> = (0..cfg.draws_per_step).flat_map(|_| 0..group.rows()).collect();
    let x0 = group.select_rows(&rows);
    let mut opt = Adam::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let steps: Vec<usize> = rows.iter().map(|_| rng.uniform_int(1, sched.steps)).collect();
        let eps = rng.gaussian(x0.shape());
        let tape = Tape::new();
        let sv = tape.leaf(s.clone());
        let loss = inversion_objective_var(model, &tape, sched, &x0, sv, &steps, &eps)?;
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric { step: step + 1 });
        }
        curve.push(value);
        let g = tape.grad_wrt(loss, sv)?;
        s = opt.step(&[s], &[g]).pop().expect("one parameter");
    }
    let provenance = Provenance::Inverted { init_class, steps: cfg.steps, group_size: group.rows() };
    Ok((ConditionEmbedding { vector: s, provenance }, InversionReport { curve }))
}

/// Mean diffusion loss of `group` under condition `s` over `draws` fresh
/// `(t, eps)` draws per row.
pub fn inversion_loss(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    group: &Tensor,
    s: &Tensor,
    draws: usize,
    rng: &mut RngStream,
) -> Result<f32> {
    let group = as_matrix(group)?;
    let rows: Vec<usize> = (0..draws).flat_map(|_| 0..group.rows()).collect();
    let x0 = group.select_rows(&rows);
    let steps: Vec<usize> = rows.iter().map(|_| rng.uniform_int(1, sched.steps)).collect();
    let eps = rng.gaussian(x0.shape());
    let tape = Tape::new();
    let loss = inversion_objective_var(model, &tape, sched, &x0, tape.constant(s.clone()), &steps, &eps)?;
    Ok(loss.value().data()[0])
}

/// Conditional ancestral samples under `s_star`.
pub fn generate_from_inversion(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    s_star: &ConditionEmbedding,
    count: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    sample(model, sched, &s_star.vector, rng, count)
}

/// Image-to-image from `source` toward `s_star`.
pub fn style_transfer(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    s_star: &ConditionEmbedding,
    source: &Tensor,
    strength: f32,
    rng: &mut RngStream,
) -> Result<Tensor> {
    img2img(model, sched, &s_star.vector, source, strength, rng)
}

pub const DEFAULT_STRENGTH: f32 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserConfig;

    fn tiny() -> (Denoiser, DiffusionSchedule) {
        let mut rng = RngStream::new(0);
        let cfg = DenoiserConfig { data_dim: 2, cond_dim: 3, time_dim: 4, hidden: 8, layers: 2, classes: 3 };
        (Denoiser::new(cfg, &mut rng), DiffusionSchedule::linear(10, 1e-3, 0.2).unwrap())
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (model, sched) = tiny();
        let cfg = InversionConfig { steps: 0, ..InversionConfig::default() };
        let group = Tensor::zeros(&[2, 2]);
        let (a, report) = invert(&model, &sched, &group, &cfg, &mut RngStream::new(5)).unwrap();
        assert!(report.curve.is_empty());
        let mut rng = RngStream::new(5);
        let k = rng.uniform_int(0, 2);
        let n = rng.gaussian(&[3]);
        let expect = model.class_condition(k).unwrap().zip_map(&n, |c, z| c + 0.1 * z).unwrap();
        assert_eq!(a.vector, expect);
    }

    #[test]
    fn empty_group_rejected() {
        let (model, sched) = tiny();
        let r = invert(&model, &sched, &Tensor::zeros(&[0, 2]), &InversionConfig::default(), &mut RngStream::new(0));
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn model_untouched() {
        let (model, sched) = tiny();
        let before = model.clone();
        let cfg = InversionConfig { steps: 20, ..InversionConfig::default() };
        invert(&model, &sched, &Tensor::full(&[3, 2], 0.5), &cfg, &mut RngStream::new(1)).unwrap();
        assert_eq!(model, before);
    }
}
