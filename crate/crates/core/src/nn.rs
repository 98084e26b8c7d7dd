//! Multilayer perceptrons and the Adam optimizer shared by every model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Silu,
    Sigmoid,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => x,
            Activation::Silu => x.silu(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

/// Fully connected stack: `dims[0] -> dims[1] -> ... -> dims[last]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    /// Alternating weight `[in, out]` and bias `[out]` tensors.
    params: Vec<Tensor>,
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp<'t> {
    pub params: Vec<Var<'t>>,
    hidden: Activation,
    output: Activation,
}

impl Mlp {
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut RngStream) -> Self {
        let mut params = Vec::new();
        for w in dims.windows(2) {
            let std = (1.0 / w[0] as f32).sqrt();
            params.push(rng.gaussian(&[w[0], w[1]]).scale(std));
            params.push(Tensor::zeros(&[w[1]]));
        }
        Self { dims: dims.to_vec(), hidden, output, params }
    }

    pub fn from_params(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        let mut mlp = Self { dims: dims.to_vec(), hidden, output, params: Vec::new() };
        mlp.set_params(params)?;
        Ok(mlp)
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let expected: Vec<Vec<usize>> = self
            .dims
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect();
        if params.len() != expected.len()
            || params.iter().zip(&expected).any(|(p, e)| p.shape() != e.as_slice())
        {
            return Err(Error::Dimension(format!(
                "parameters do not fit an MLP with dims {:?}",
                self.dims
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("mlp has at least one layer")
    }

    /// Names used when persisting parameters.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        Self::names_for(&self.dims, prefix)
    }

    pub fn names_for(dims: &[usize], prefix: &str) -> Vec<String> {
        (0..dims.len().saturating_sub(1))
            .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
            .collect()
    }

    /// Pushes the parameters on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let params = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        BoundMlp { params, hidden: self.hidden, output: self.output }
    }

    /// Untraced forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let y = bound.forward(tape.constant(x.clone()))?;
        Ok(y.value())
    }
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let layers = self.params.len() / 2;
        let mut h = x;
        for i in 0..layers {
            h = h.affine(&self.params[2 * i], &self.params[2 * i + 1])?;
            h = if i + 1 == layers { self.output.apply(h) } else { self.hidden.apply(h) };
        }
        Ok(h)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Returns updated copies of `params`.
    pub fn step(&mut self, params: &[Tensor], grads: &[Tensor]) -> Vec<Tensor> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        params
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(i, (p, g))| {
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                let data = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .enumerate()
                    .map(|(j, (&w, &gj))| {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        w - self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps)
                    })
                    .collect();
                Tensor::new(p.shape().to_vec(), data).expect("same shape")
            })
            .collect()
    }
}
