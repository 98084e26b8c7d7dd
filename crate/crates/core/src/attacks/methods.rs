use super::{AttackConfig, AttackContext, AttackMode, AttackTrace, PerturbationState, TraceRow};
use crate::classifier::Classifier;
use crate::codec::LatentCodec;
use crate::data::DataRange;
use crate::diffusion::{as_matrix, l_dm_rows, NoisePredictor};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tape, Tensor, Var};

/// One Monte-Carlo draw: a step per row and matching noise.
struct Draw {
    steps: Vec<usize>,
    eps: Tensor,
}

fn draw(ctx: &AttackContext<'_>, rows: usize, dim: usize, rng: &mut RngStream) -> Draw {
    let steps = (0..rows).map(|_| rng.uniform_int(1, ctx.schedule.steps)).collect();
    let eps = rng.gaussian(&[rows, dim]);
    Draw { steps, eps }
}

fn diffusion_dim(ctx: &AttackContext<'_>, mode: AttackMode) -> Result<usize> {
    Ok(match mode {
        AttackMode::Latent => ctx.codec()?.latent_dim(),
        AttackMode::Pixel => ctx.denoiser()?.data_dim(),
    })
}

/// Diffusion loss at `x` for one draw and its gradient with respect to `x`.
fn loss_and_grad(ctx: &AttackContext<'_>, mode: AttackMode, x: &Tensor, d: &Draw) -> Result<(f32, Tensor)> {
    let model = ctx.denoiser()?;
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let z0 = match mode {
        AttackMode::Latent => ctx.codec()?.encode_var(&tape, xv)?,
        AttackMode::Pixel => xv,
    };
    let cond = tape.constant(ctx.condition.clone()).broadcast_rows(x.rows());
    let loss = l_dm_rows(model, &tape, ctx.schedule, z0, cond, &d.steps, &d.eps)?.mean();
    let value = loss.value().data()[0];
    let grad = tape.grad_wrt(loss, xv)?;
    Ok((value, grad))
}

fn diffusion_ascent(
    ctx: &AttackContext<'_>,
    x0: &Tensor,
    cfg: &AttackConfig,
    rng: &mut RngStream,
    mut trace: Option<&mut AttackTrace>,
    fresh_draws: bool,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut state = PerturbationState::new(x0, cfg.epsilon, ctx.range)?;
    if cfg.epsilon == 0.0 {
        return Ok(state.x_cur);
    }
    let rows = state.x0.rows();
    let dim = diffusion_dim(ctx, cfg.mode)?;
    let mut fixed: Option<Vec<Draw>> = None;
    for i in 0..cfg.n_steps {
        if fresh_draws || fixed.is_none() {
            fixed = Some((0..cfg.draws_per_step).map(|_| draw(ctx, rows, dim, rng)).collect());
        }
        let draws = fixed.as_ref().expect("drawn above");
        let mut grad: Option<Tensor> = None;
        let mut loss = 0.0;
        for d in draws {
            let (l, g) = loss_and_grad(ctx, cfg.mode, &state.x_cur, d)?;
            loss += l / draws.len() as f32;
            grad = Some(match grad {
                Some(acc) => acc.add(&g)?,
                None => g,
            });
        }
        let grad = grad.expect("at least one draw");
        if !grad.is_finite() {
            return Err(Error::Numeric { step: i + 1 });
        }
        state.ascend(&grad, cfg.alpha)?;
        AttackTrace::push(
            &mut trace,
            TraceRow { step: i + 1, t: Some(draws[0].steps[0]), loss, max_delta: state.max_delta() },
        );
    }
    Ok(state.x_cur)
}

/// Monte-Carlo signed ascent on the diffusion loss: every iteration draws a
/// fresh `t ~ U(1, T)` and `ε ~ N(0, I)`, steps `alpha · sgn(∇_x L_DM)`, and
/// projects back into the budget.
pub fn advdm(
    ctx: &AttackContext<'_>,
    x0: &Tensor,
    cfg: &AttackConfig,
    rng: &mut RngStream,
    trace: Option<&mut AttackTrace>,
) -> Result<Tensor> {
    diffusion_ascent(ctx, x0, cfg, rng, trace, true)
}

/// PGD on the diffusion loss with a single `(t, ε)` draw reused for every
/// iteration. With one step it coincides with [`advdm`] under the same stream.
pub fn pgd_dm(
    ctx: &AttackContext<'_>,
    x0: &Tensor,
    cfg: &AttackConfig,
    rng: &mut RngStream,
    trace: Option<&mut AttackTrace>,
) -> Result<Tensor> {
    diffusion_ascent(ctx, x0, cfg, rng, trace, false)
}

/// `Σ_rows ‖E(x) − target‖₂` on the tape.
pub fn embedding_objective_var<'t>(codec: &LatentCodec, tape: &'t Tape, x: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let diff = codec.encode_var(tape, x)?.sub(&tape.constant(target.clone()))?;
    Ok(diff.square().row_sums().sqrt().sum())
}

/// Maximizes `Σ_rows ‖E(x0) − E(x)‖₂` starting from `x0 + ε z`, `z ~ N(0, 1)`.
pub fn embedding_attack(
    codec: &LatentCodec,
    x0: &Tensor,
    cfg: &AttackConfig,
    range: DataRange,
    rng: &mut RngStream,
    mut trace: Option<&mut AttackTrace>,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut state = PerturbationState::new(x0, cfg.epsilon, range)?;
    if cfg.epsilon == 0.0 {
        return Ok(state.x_cur);
    }
    let target = codec.encode(&state.x0)?;
    let z = rng.gaussian(state.x0.shape());
    let init = state.x0.zip_map(&z, |x, n| x + cfg.epsilon * n)?;
    state.project(&init)?;
    for i in 0..cfg.n_steps {
        let tape = Tape::new();
        let xv = tape.leaf(state.x_cur.clone());
        let objective = embedding_objective_var(codec, &tape, xv, &target)?;
        let value = objective.value().data()[0];
        let grad = tape.grad_wrt(objective, xv)?;
        if !grad.is_finite() {
            return Err(Error::Numeric { step: i + 1 });
        }
        state.ascend(&grad, cfg.alpha)?;
        AttackTrace::push(&mut trace, TraceRow { step: i + 1, t: None, loss: value, max_delta: state.max_delta() });
    }
    Ok(state.x_cur)
}

/// Signed ascent on the classifier's cross-entropy for the true labels.
pub fn pgd_classifier(
    classifier: &Classifier,
    x0: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    range: DataRange,
    mut trace: Option<&mut AttackTrace>,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut state = PerturbationState::new(x0, cfg.epsilon, range)?;
    if labels.len() != state.x0.rows() {
        return Err(Error::CountMismatch { images: state.x0.rows(), labels: labels.len() });
    }
    if cfg.epsilon == 0.0 {
        return Ok(state.x_cur);
    }
    for i in 0..cfg.n_steps {
        let tape = Tape::new();
        let xv = tape.leaf(state.x_cur.clone());
        let loss = classifier.logits_var(&tape, xv)?.cross_entropy(labels)?;
        let value = loss.value().data()[0];
        let grad = tape.grad_wrt(loss, xv)?;
        if !grad.is_finite() {
            return Err(Error::Numeric { step: i + 1 });
        }
        state.ascend(&grad, cfg.alpha)?;
        AttackTrace::push(&mut trace, TraceRow { step: i + 1, t: None, loss: value, max_delta: state.max_delta() });
    }
    Ok(state.x_cur)
}

/// Mean diffusion loss at `x` over `draws` fresh `(t, ε)` samples.
pub fn expected_diffusion_loss(
    ctx: &AttackContext<'_>,
    mode: AttackMode,
    x: &Tensor,
    draws: usize,
    rng: &mut RngStream,
) -> Result<f32> {
    let x = as_matrix(x)?;
    let dim = diffusion_dim(ctx, mode)?;
    let mut total = 0.0;
    for _ in 0..draws {
        let d = draw(ctx, x.rows(), dim, rng);
        total += loss_and_grad(ctx, mode, &x, &d)?.0;
    }
    Ok(total / draws as f32)
}
