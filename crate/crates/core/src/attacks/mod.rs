//! L∞-bounded attacks on diffusion pipelines, selected by name.
//!
//! | name             | objective                                         |
//! |------------------|---------------------------------------------------|
//! | `none`           | identity                                          |
//! | `advdm`          | diffusion loss, fresh `(t, ε)` draw every step    |
//! | `pgd_dm`         | diffusion loss, one `(t, ε)` draw held fixed      |
//! | `embedding`      | encoder displacement `‖E(x) − E(x0)‖₂`            |
//! | `pgd_classifier` | classifier cross-entropy on the true label        |
//!
//! Every method takes signed ascent steps of length `alpha`, clips the
//! perturbation to `epsilon` and then clamps to the data range after each
//! step.

mod budget;
mod methods;

pub use budget::{verify_budget, BudgetReport, BUDGET_TOLERANCE};
pub use methods::{
    advdm, embedding_attack, embedding_objective_var, expected_diffusion_loss, pgd_classifier, pgd_dm,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::codec::LatentCodec;
use crate::data::DataRange;
use crate::diffusion::{as_matrix, Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

/// Where the diffusion loss is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Directly on the input.
    Pixel,
    /// On the codec latent `E(x)`, differentiated back through the encoder.
    Latent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Total L∞ budget.
    pub epsilon: f32,
    /// Per-step length.
    pub alpha: f32,
    /// Iterations (Monte-Carlo draws for `advdm`).
    pub n_steps: usize,
    pub mode: AttackMode,
    /// Loss draws averaged per gradient step; 1 is a single fresh draw.
    pub draws_per_step: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { epsilon: 8.0 / 255.0, alpha: 1.0 / 255.0, n_steps: 40, mode: AttackMode::Latent, draws_per_step: 1 }
    }
}

impl AttackConfig {
    /// A zero budget is accepted and makes every attack the identity.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} must be > 0", self.alpha)));
        }
        if self.epsilon > 0.0 && self.alpha > self.epsilon {
            return Err(Error::Config(format!("alpha {} exceeds epsilon {}", self.alpha, self.epsilon)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        if self.draws_per_step == 0 {
            return Err(Error::Config("draws_per_step must be >= 1".into()));
        }
        Ok(())
    }
}

/// The evolving adversarial candidate and its anchor.
#[derive(Clone, Debug)]
pub struct PerturbationState {
    pub x0: Tensor,
    pub x_cur: Tensor,
    pub step: usize,
    epsilon: f32,
    range: DataRange,
}

impl PerturbationState {
    pub fn new(x0: &Tensor, epsilon: f32, range: DataRange) -> Result<Self> {
        let x0 = as_matrix(x0)?;
        Ok(Self { x_cur: x0.clone(), x0, step: 0, epsilon, range })
    }

    /// Clips `candidate` into the ε-ball around `x0`, then into the data range.
    pub fn project(&mut self, candidate: &Tensor) -> Result<()> {
        let eps = self.epsilon;
        let clipped = candidate.zip_map(&self.x0, |c, o| o + (c - o).clamp(-eps, eps))?;
        self.x_cur = self.range.clamp(&clipped);
        Ok(())
    }

    /// `x_cur + alpha * sign(grad)`, projected.
    pub fn ascend(&mut self, grad: &Tensor, alpha: f32) -> Result<()> {
        let cand = self.x_cur.zip_map(grad, |x, g| x + alpha * crate::tensor::sign(g))?;
        self.project(&cand)?;
        self.step += 1;
        Ok(())
    }

    pub fn max_delta(&self) -> f32 {
        self.x_cur.max_abs_diff(&self.x0).unwrap_or(f32::NAN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Diffusion step drawn for the first row, when the objective uses one.
    pub t: Option<usize>,
    pub loss: f32,
    pub max_delta: f32,
}

/// Per-iteration audit log of one attack run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackTrace {
    pub rows: Vec<TraceRow>,
}

impl AttackTrace {
    pub const CSV_HEADER: &'static str = "step,t,loss,max_delta";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let t = r.t.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.step, t, r.loss, r.max_delta);
        }
        s
    }

    pub(crate) fn push(trace: &mut Option<&mut AttackTrace>, row: TraceRow) {
        if let Some(t) = trace.as_deref_mut() {
            t.rows.push(row);
        }
    }
}

/// Models an attack may target. Which fields are needed depends on the method.
#[derive(Clone)]
pub struct AttackContext<'a> {
    pub denoiser: Option<&'a Denoiser>,
    pub schedule: &'a DiffusionSchedule,
    pub codec: Option<&'a LatentCodec>,
    pub classifier: Option<&'a Classifier>,
    /// Condition fed to the denoiser while attacking.
    pub condition: Tensor,
    pub range: DataRange,
}

impl<'a> AttackContext<'a> {
    pub(crate) fn denoiser(&self) -> Result<&'a Denoiser> {
        self.denoiser.ok_or_else(|| Error::Config("attack needs a denoiser".into()))
    }

    pub(crate) fn codec(&self) -> Result<&'a LatentCodec> {
        self.codec.ok_or_else(|| Error::Config("attack needs a latent codec".into()))
    }

    pub(crate) fn classifier(&self) -> Result<&'a Classifier> {
        self.classifier.ok_or_else(|| Error::Config("attack needs a classifier".into()))
    }
}

/// One interchangeable attack method.
pub trait Attack: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the method reads the diffusion model.
    fn diffusion_aware(&self) -> bool {
        false
    }

    /// Returns the adversarial batch for `x0: [batch, dim]` with true `labels`.
    fn perturb(
        &self,
        ctx: &AttackContext<'_>,
        x0: &Tensor,
        labels: &[usize],
        cfg: &AttackConfig,
        rng: &mut RngStream,
        trace: Option<&mut AttackTrace>,
    ) -> Result<Tensor>;
}

struct NoAttack;
struct AdvDm;
struct PgdDm;
struct Embedding;
struct PgdClassifier;

impl Attack for NoAttack {
    fn name(&self) -> &'static str {
        "none"
    }
    fn perturb(&self, _: &AttackContext<'_>, x0: &Tensor, _: &[usize], _: &AttackConfig, _: &mut RngStream, _: Option<&mut AttackTrace>) -> Result<Tensor> {
        as_matrix(x0)
    }
}

impl Attack for AdvDm {
    fn name(&self) -> &'static str {
        "advdm"
    }
    fn diffusion_aware(&self) -> bool {
        true
    }
    fn perturb(&self, ctx: &AttackContext<'_>, x0: &Tensor, _: &[usize], cfg: &AttackConfig, rng: &mut RngStream, trace: Option<&mut AttackTrace>) -> Result<Tensor> {
        advdm(ctx, x0, cfg, rng, trace)
    }
}

impl Attack for PgdDm {
    fn name(&self) -> &'static str {
        "pgd_dm"
    }
    fn diffusion_aware(&self) -> bool {
        true
    }
    fn perturb(&self, ctx: &AttackContext<'_>, x0: &Tensor, _: &[usize], cfg: &AttackConfig, rng: &mut RngStream, trace: Option<&mut AttackTrace>) -> Result<Tensor> {
        pgd_dm(ctx, x0, cfg, rng, trace)
    }
}

impl Attack for Embedding {
    fn name(&self) -> &'static str {
        "embedding"
    }
    fn diffusion_aware(&self) -> bool {
        true
    }
    fn perturb(&self, ctx: &AttackContext<'_>, x0: &Tensor, _: &[usize], cfg: &AttackConfig, rng: &mut RngStream, trace: Option<&mut AttackTrace>) -> Result<Tensor> {
        embedding_attack(ctx.codec()?, x0, cfg, ctx.range, rng, trace)
    }
}

impl Attack for PgdClassifier {
    fn name(&self) -> &'static str {
        "pgd_classifier"
    }
    fn perturb(&self, ctx: &AttackContext<'_>, x0: &Tensor, labels: &[usize], cfg: &AttackConfig, _: &mut RngStream, trace: Option<&mut AttackTrace>) -> Result<Tensor> {
        pgd_classifier(ctx.classifier()?, x0, labels, cfg, ctx.range, trace)
    }
}

/// Attacks keyed by name.
pub struct AttackRegistry {
    entries: BTreeMap<&'static str, Box<dyn Attack>>,
}

impl Default for AttackRegistry {
    fn default() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register(Box::new(NoAttack));
        r.register(Box::new(AdvDm));
        r.register(Box::new(PgdDm));
        r.register(Box::new(Embedding));
        r.register(Box::new(PgdClassifier));
        r
    }
}

impl AttackRegistry {
    pub fn register(&mut self, attack: Box<dyn Attack>) {
        self.entries.insert(attack.name(), attack);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Attack> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Unknown { kind: "attack", name: name.to_string() })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}
