//! Small MLP classifier, the white-box target of the transfer baseline.

use serde::{Deserialize, Serialize};

use crate::diffusion::as_matrix;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp};
use crate::tensor::{RngStream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], steps: 1500, batch_size: 64, lr: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub net: Mlp,
}

impl Classifier {
    pub fn classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn logits_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.net.bind(tape, false).forward(x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.net.forward(&as_matrix(x)?)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f32> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f32 / labels.len().max(1) as f32)
    }
}

pub fn train_classifier(data: &Tensor, labels: &[usize], classes: usize, cfg: &ClassifierConfig) -> Result<(Classifier, Vec<f32>)> {
    if data.rows() == 0 || data.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if labels.len() != data.rows() {
        return Err(Error::CountMismatch { images: data.rows(), labels: labels.len() });
    }
    let mut rng = RngStream::new(cfg.seed);
    let mut dims = vec![data.cols()];
    dims.extend(&cfg.hidden);
    dims.push(classes);
    let mut model = Classifier { net: Mlp::new(&dims, Activation::Silu, Activation::Identity, &mut rng) };
    let mut opt = Adam::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.uniform_int(0, data.rows() - 1)).collect();
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let tape = Tape::new();
        let net = model.net.bind(&tape, true);
        let loss = net.forward(tape.constant(data.select_rows(&idx)))?.cross_entropy(&batch_labels)?;
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: value });
        }
        curve.push(value);
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = net.params.iter().map(|p| grads.wrt(p)).collect::<Result<_>>()?;
        let next = opt.step(model.net.params(), &g);
        model.net.set_params(next)?;
    }
    Ok((model, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_mixture_2d;

    #[test]
    fn separates_mixture() {
        let ds = gaussian_mixture_2d(2, 100, 1.0, 0.1, 1);
        let cfg = ClassifierConfig { steps: 300, ..Default::default() };
        let (clf, _) = train_classifier(&ds.data, &ds.labels, 2, &cfg).unwrap();
        assert!(clf.accuracy(&ds.data, &ds.labels).unwrap() > 0.99);
    }
}
