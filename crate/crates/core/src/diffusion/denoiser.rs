use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, BoundMlp, Mlp};
use crate::tensor::{RngStream, Tape, Tensor, Var};

/// Anything that predicts the noise component of `x_t`.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;

    /// `x_t: [batch, data_dim]`, one step per row, `cond: [batch, cond_dim]`.
    fn predict<'t>(
        &self,
        tape: &'t Tape,
        x_t: Var<'t>,
        steps: &[usize],
        cond: Var<'t>,
    ) -> Result<Var<'t>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub classes: usize,
}

impl DenoiserConfig {
    pub fn new(data_dim: usize, classes: usize) -> Self {
        Self { data_dim, cond_dim: 8, time_dim: 16, hidden: 128, layers: 3, classes }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut d = vec![self.data_dim + self.time_dim + self.cond_dim];
        d.extend(std::iter::repeat_n(self.hidden, self.layers));
        d.push(self.data_dim);
        d
    }
}

/// ε-prediction MLP over `[x_t, time embedding, condition]` plus a learned
/// per-class condition table.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub net: Mlp,
    /// `[classes, cond_dim]`
    pub class_table: Tensor,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut RngStream) -> Self {
        let net = Mlp::new(&config.layer_dims(), Activation::Silu, Activation::Identity, rng);
        let class_table = rng.gaussian(&[config.classes, config.cond_dim]);
        Self { config, net, class_table }
    }

    pub fn from_parts(config: DenoiserConfig, params: Vec<Tensor>, class_table: Tensor) -> Result<Self> {
        if class_table.shape() != [config.classes, config.cond_dim] {
            return Err(Error::Dimension(format!(
                "class table {:?} vs [{}, {}]",
                class_table.shape(),
                config.classes,
                config.cond_dim
            )));
        }
        let net = Mlp::from_params(&config.layer_dims(), Activation::Silu, Activation::Identity, params)?;
        Ok(Self { config, net, class_table })
    }

    /// Condition vector of class `label`.
    pub fn class_condition(&self, label: usize) -> Result<Tensor> {
        if label >= self.config.classes {
            return Err(Error::Config(format!("class {label} out of {}", self.config.classes)));
        }
        Ok(Tensor::vector(self.class_table.row(label).to_vec()))
    }

    /// The all-zero condition used for unconditional generation.
    pub fn null_condition(&self) -> Tensor {
        Tensor::zeros(&[self.config.cond_dim])
    }

    pub(crate) fn forward_bound<'t>(
        &self,
        tape: &'t Tape,
        net: &BoundMlp<'t>,
        x_t: Var<'t>,
        steps: &[usize],
        cond: Var<'t>,
    ) -> Result<Var<'t>> {
        let shape = x_t.shape();
        if shape.len() != 2 || shape[1] != self.config.data_dim || shape[0] != steps.len() {
            return Err(Error::Dimension(format!(
                "denoiser input {shape:?} with {} steps, data dim {}",
                steps.len(),
                self.config.data_dim
            )));
        }
        let temb = tape.constant(time_embedding(steps, self.config.time_dim));
        let input = Var::concat_cols(&[x_t, temb, cond])?;
        net.forward(input)
    }

    /// Untraced noise prediction with one condition shared by every row.
    pub fn predict_eps(&self, x_t: &Tensor, steps: &[usize], cond: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let c = tape.constant(cond.clone()).broadcast_rows(x_t.rows());
        let y = self.predict(&tape, tape.constant(x_t.clone()), steps, c)?;
        Ok(y.value())
    }
}

impl NoisePredictor for Denoiser {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn cond_dim(&self) -> usize {
        self.config.cond_dim
    }

    fn predict<'t>(
        &self,
        tape: &'t Tape,
        x_t: Var<'t>,
        steps: &[usize],
        cond: Var<'t>,
    ) -> Result<Var<'t>> {
        let net = self.net.bind(tape, false);
        self.forward_bound(tape, &net, x_t, steps, cond)
    }
}

/// Sinusoidal embedding `[sin(t f_i), cos(t f_i)]` with geometric frequencies.
pub fn time_embedding(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let mut row = vec![0.0f32; dim];
        for i in 0..half {
            let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = arg.sin() as f32;
            row[half + i] = arg.cos() as f32;
        }
        data.extend(row);
    }
    Tensor::new(vec![steps.len(), dim], data).expect("sized above")
}
