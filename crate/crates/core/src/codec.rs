//! Deterministic autoencoder whose latent space hosts latent diffusion,
//! the embedding attack, and metric features.

use serde::{Deserialize, Serialize};

use crate::data::DataRange;
use crate::diffusion::{as_matrix, tail_mean};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp};
use crate::tensor::{RngStream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Maximum validation mean squared reconstruction error.
    pub threshold: f32,
    pub validation_fraction: f32,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: vec![256, 128],
            steps: 6000,
            batch_size: 64,
            lr: 1e-3,
            threshold: 0.02,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub range: DataRange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecReport {
    pub curve: Vec<f32>,
    pub validation_mse: f32,
}

impl LatentCodec {
    pub fn new(input_dim: usize, cfg: &CodecConfig, range: DataRange, rng: &mut RngStream) -> Self {
        let mut enc_dims = vec![input_dim];
        enc_dims.extend(&cfg.hidden);
        enc_dims.push(cfg.latent_dim);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        let out = match range {
            DataRange::Unit => Activation::Sigmoid,
            DataRange::Unbounded => Activation::Identity,
        };
        Self {
            encoder: Mlp::new(&enc_dims, Activation::Silu, Activation::Identity, rng),
            decoder: Mlp::new(&dec_dims, Activation::Silu, out, rng),
            range,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(&as_matrix(x)?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(&as_matrix(z)?)
    }

    /// Traced encoder with frozen weights; differentiable in `x`.
    pub fn encode_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.encoder.bind(tape, false).forward(x)
    }

    /// Rescales the latent space to zero mean and unit variance per
    /// coordinate on `data`, without changing `decode(encode(x))`.
    fn standardize(&mut self, data: &Tensor) -> Result<()> {
        let z = self.encode(data)?;
        let (n, d) = (z.rows(), z.cols());
        let mut mean = vec![0.0f64; d];
        let mut var = vec![0.0f64; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(z.row(r)) {
                *m += *v as f64 / n as f64;
            }
        }
        for r in 0..n {
            for (j, v) in z.row(r).iter().enumerate() {
                var[j] += (*v as f64 - mean[j]).powi(2) / (n.max(2) - 1) as f64;
            }
        }
        let std: Vec<f32> = var.iter().map(|v| (v.sqrt() as f32).max(1e-6)).collect();
        let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();

        let mut enc = self.encoder.params().to_vec();
        let last = enc.len() - 2;
        let (w, b) = (&enc[last], &enc[last + 1]);
        let cols = w.cols();
        let w_new: Vec<f32> = w.data().iter().enumerate().map(|(i, v)| v / std[i % cols]).collect();
        let b_new: Vec<f32> = b.data().iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect();
        enc[last] = Tensor::new(w.shape().to_vec(), w_new)?;
        enc[last + 1] = Tensor::vector(b_new);
        self.encoder.set_params(enc)?;

        let mut dec = self.decoder.params().to_vec();
        let (w, b) = (&dec[0], &dec[1]);
        let out = w.cols();
        let w_new: Vec<f32> = w.data().iter().enumerate().map(|(i, v)| v * std[i / out]).collect();
        let mut b_new = b.to_vec();
        for (j, bj) in b_new.iter_mut().enumerate() {
            for (k, m) in mean.iter().enumerate() {
                *bj += w.data()[k * out + j] * m;
            }
        }
        dec[0] = Tensor::new(w.shape().to_vec(), w_new)?;
        dec[1] = Tensor::vector(b_new);
        self.decoder.set_params(dec)
    }
}

fn reconstruction_mse(codec: &LatentCodec, x: &Tensor) -> Result<f32> {
    let y = codec.decode(&codec.encode(x)?)?;
    Ok(y.sub(x)?.sq_norm() / x.len().max(1) as f32)
}

/// Trains encoder and decoder on mean squared reconstruction error, then
/// standardizes the latent space. Fails when the held-out error stays above
/// `cfg.threshold`.
pub fn train_codec(data: &Tensor, range: DataRange, cfg: &CodecConfig) -> Result<(LatentCodec, CodecReport)> {
    if data.rows() == 0 || data.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let mut rng = RngStream::new(cfg.seed);
    let perm = rng.permutation(data.rows());
    let n_val = ((data.rows() as f32 * cfg.validation_fraction) as usize).min(data.rows() - 1);
    let val = data.select_rows(&perm[..n_val]);
    let train = data.select_rows(&perm[n_val..]);

    let mut codec = LatentCodec::new(data.cols(), cfg, range, &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.uniform_int(0, train.rows() - 1)).collect();
        let x = train.select_rows(&idx);
        let tape = Tape::new();
        let enc = codec.encoder.bind(&tape, true);
        let dec = codec.decoder.bind(&tape, true);
        let xv = tape.constant(x);
        let recon = dec.forward(enc.forward(xv)?)?;
        let loss = recon.sub(&xv)?.square().mean();
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: value });
        }
        curve.push(value);
        let grads = tape.backward(loss)?;
        let mut params = codec.encoder.params().to_vec();
        params.extend(codec.decoder.params().iter().cloned());
        let g: Vec<Tensor> = enc.params.iter().chain(&dec.params).map(|p| grads.wrt(p)).collect::<Result<_>>()?;
        let mut updated = opt.step(&params, &g);
        let dec_params = updated.split_off(enc.params.len());
        codec.encoder.set_params(updated)?;
        codec.decoder.set_params(dec_params)?;
    }
    codec.standardize(&train)?;
    let validation_mse = if val.rows() > 0 { reconstruction_mse(&codec, &val)? } else { tail_mean(&curve) };
    if !(validation_mse < cfg.threshold) {
        return Err(Error::Underfit { what: "validation reconstruction error", value: validation_mse, threshold: cfg.threshold });
    }
    Ok((codec, CodecReport { curve, validation_mse }))
}
