#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use advdm_core::attacks::embedding_objective_var;
use advdm_core::codec::{CodecConfig, LatentCodec};
use advdm_core::data::{gaussian_mixture_2d, load_dataset, DataRange, Dataset};
use advdm_core::defenses::{tv_objective_var, TV_SMOOTHING};
use advdm_core::diffusion::{l_dm_rows, train_denoiser, Denoiser, DenoiserConfig, DiffusionSchedule, TrainConfig};
use advdm_core::experiment::{prepare_models, ExperimentConfig, Models, TrainPolicy};
use advdm_core::inversion::inversion_objective_var;
use advdm_core::tensor::{RngStream, Tape, Tensor};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-3;

/// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` with central differences of step `h`
/// taken on an f64 evaluation of the objective.
pub fn fd_relative_error(f: impl Fn(&[f64]) -> f64, x: &Tensor, grad: &Tensor, h: f64) -> f64 {
    assert_eq!(x.shape(), grad.shape());
    let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut fd = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let bump = |d: f64| {
            let mut v = x64.clone();
            v[i] += d;
            f(&v)
        };
        fd.push((bump(h) - bump(-h)) / (2.0 * h));
    }
    let g: Vec<f64> = grad.data().iter().map(|&v| v as f64).collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
    let scale = norm(&g).max(norm(&fd));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Double-precision re-implementations of the traced objectives, sharing
/// only parameters with the library.
pub mod reference {
    use advdm_core::diffusion::{time_embedding, Denoiser, DiffusionSchedule};
    use advdm_core::nn::{Activation, Mlp};
    use advdm_core::tensor::Tensor;

    pub type Rows = Vec<Vec<f64>>;

    pub fn rows(t: &Tensor) -> Rows {
        (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect()
    }

    pub fn split(flat: &[f64], cols: usize) -> Rows {
        flat.chunks(cols).map(|c| c.to_vec()).collect()
    }

    fn act(a: Activation, v: f64) -> f64 {
        match a {
            Activation::Identity => v,
            Activation::Silu => v / (1.0 + (-v).exp()),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }

    pub fn mlp(m: &Mlp, x: &Rows) -> Rows {
        let p = m.params();
        let layers = p.len() / 2;
        let mut h = x.clone();
        for l in 0..layers {
            let (w, b) = (&p[2 * l], &p[2 * l + 1]);
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let a = if l + 1 == layers { m.output } else { m.hidden };
            h = h
                .iter()
                .map(|row| {
                    (0..dout)
                        .map(|j| {
                            let s: f64 = (0..din).map(|i| row[i] * w.data()[i * dout + j] as f64).sum();
                            act(a, s + b.data()[j] as f64)
                        })
                        .collect()
                })
                .collect();
        }
        h
    }

    /// Mean over rows of `‖ε − ε_θ(√ᾱ x0 + √(1−ᾱ) ε, t, c)‖²`.
    pub fn l_dm(model: &Denoiser, sched: &DiffusionSchedule, x0: &Rows, cond: &Rows, steps: &[usize], eps: &Rows) -> f64 {
        let temb = rows(&time_embedding(steps, model.config.time_dim));
        let mut inputs = Vec::new();
        for (r, &t) in steps.iter().enumerate() {
            let ab = sched.alpha_bar(t) as f64;
            let mut row: Vec<f64> =
                x0[r].iter().zip(&eps[r]).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect();
            row.extend(&temb[r]);
            row.extend(&cond[r]);
            inputs.push(row);
        }
        let pred = mlp(&model.net, &inputs);
        let total: f64 = pred.iter().zip(eps).map(|(p, e)| p.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum();
        total / steps.len() as f64
    }

    pub fn embedding(encoder: &Mlp, x: &Rows, target: &Rows) -> f64 {
        mlp(encoder, x)
            .iter()
            .zip(target)
            .map(|(z, t)| z.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .sum()
    }

    /// `‖y − x‖² + λ Σ sqrt(d² + ε_s²)` over horizontal and vertical
    /// neighbours of a single `h×w` image.
    pub fn tv(y: &[f64], x: &[f64], (h, w): (usize, usize), lambda: f64, eps_s: f64) -> f64 {
        let fid: f64 = y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
        let mut tv = 0.0;
        for r in 0..h {
            for c in 0..w {
                let v = y[r * w + c];
                if c + 1 < w {
                    tv += ((y[r * w + c + 1] - v).powi(2) + eps_s * eps_s).sqrt();
                }
                if r + 1 < h {
                    tv += ((y[(r + 1) * w + c] - v).powi(2) + eps_s * eps_s).sqrt();
                }
            }
        }
        fid + lambda * tv
    }

    /// Full O(n²) distance table, full sort per row, then membership.
    pub fn precision_recall(real: &Tensor, gen: &Tensor, k: usize) -> (f64, f64) {
        let d2 = |a: &[f32], b: &[f32]| -> f64 { a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum() };
        let radii = |x: &Tensor| -> Vec<f64> {
            (0..x.rows())
                .map(|i| {
                    let mut ds: Vec<f64> = (0..x.rows()).filter(|&j| j != i).map(|j| d2(x.row(i), x.row(j))).collect();
                    ds.sort_by(f64::total_cmp);
                    ds[k - 1]
                })
                .collect()
        };
        let share = |support: &Tensor, probe: &Tensor| {
            let r = radii(support);
            let hits = (0..probe.rows())
                .filter(|&p| (0..support.rows()).any(|s| d2(probe.row(p), support.row(s)) <= r[s]))
                .count();
            hits as f64 / probe.rows() as f64
        };
        (share(real, gen), share(gen, real))
    }
}

pub fn tiny_denoiser(seed: u64, data_dim: usize) -> (Denoiser, DiffusionSchedule) {
    let mut rng = RngStream::new(seed);
    let cfg = DenoiserConfig { data_dim, cond_dim: 3, time_dim: 4, hidden: 6, layers: 2, classes: 2 };
    (Denoiser::new(cfg, &mut rng), DiffusionSchedule::linear(20, 1e-3, 0.2).unwrap())
}

/// Random small instance of `l_dm` differentiated with respect to `x0`.
pub fn l_dm_case(seed: u64) -> f64 {
    let (model, sched) = tiny_denoiser(seed, 3);
    let mut rng = RngStream::new(seed).derive(7);
    let x0 = rng.gaussian(&[2, 3]);
    let cond = rng.gaussian(&[2, 3]);
    let steps: Vec<usize> = (0..2).map(|_| rng.uniform_int(1, sched.steps)).collect();
    let eps = rng.gaussian(&[2, 3]);
    let tape = Tape::new();
    let xv = tape.leaf(x0.clone());
    let loss = l_dm_rows(&model, &tape, &sched, xv, tape.constant(cond.clone()), &steps, &eps).unwrap().mean();
    let g = tape.grad_wrt(loss, xv).unwrap();
    let (c, e) = (reference::rows(&cond), reference::rows(&eps));
    fd_relative_error(|x| reference::l_dm(&model, &sched, &reference::split(x, 3), &c, &steps, &e), &x0, &g, FD_STEP)
}

/// Random small instance of the inversion objective differentiated with
/// respect to the condition vector.
pub fn inversion_case(seed: u64) -> f64 {
    let (model, sched) = tiny_denoiser(seed, 2);
    let mut rng = RngStream::new(seed).derive(8);
    let group = rng.gaussian(&[3, 2]);
    let s = rng.gaussian(&[3]);
    let steps: Vec<usize> = (0..3).map(|_| rng.uniform_int(1, sched.steps)).collect();
    let eps = rng.gaussian(&[3, 2]);
    let tape = Tape::new();
    let sv = tape.leaf(s.clone());
    let loss = inversion_objective_var(&model, &tape, &sched, &group, sv, &steps, &eps).unwrap();
    let g = tape.grad_wrt(loss, sv).unwrap();
    let (x0, e) = (reference::rows(&group), reference::rows(&eps));
    fd_relative_error(|s| reference::l_dm(&model, &sched, &x0, &vec![s.to_vec(); 3], &steps, &e), &s, &g, FD_STEP)
}

pub fn tiny_codec(seed: u64, input: usize) -> LatentCodec {
    let cfg = CodecConfig { latent_dim: 3, hidden: vec![6], ..CodecConfig::default() };
    LatentCodec::new(input, &cfg, DataRange::Unit, &mut RngStream::new(seed))
}

/// Random small instance of the embedding-attack objective differentiated
/// with respect to the perturbed input.
pub fn embedding_case(seed: u64) -> f64 {
    let codec = tiny_codec(seed, 5);
    let mut rng = RngStream::new(seed).derive(9);
    let x0 = rng.uniform_tensor(&[2, 5], 0.0, 1.0);
    let target = codec.encode(&x0).unwrap();
    let x = x0.zip_map(&rng.uniform_tensor(&[2, 5], -0.2, 0.2), |a, b| a + b).unwrap();
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let f = embedding_objective_var(&codec, &tape, xv, &target).unwrap();
    let g = tape.grad_wrt(f, xv).unwrap();
    let t = reference::rows(&target);
    fd_relative_error(|x| reference::embedding(&codec.encoder, &reference::split(x, 5), &t), &x, &g, FD_STEP)
}

/// Smallest adjacent difference allowed in a TV instance. Below roughly ten
/// times the smoothing constant, central differences at `FD_STEP` no longer
/// resolve the curvature of `sqrt(d² + ε_s²)`.
pub const TV_MIN_GAP: f32 = 0.01;

/// Random small instance of the TV objective differentiated with respect
/// to the iterate. Draws are redrawn until every adjacent difference of the
/// iterate clears [`TV_MIN_GAP`].
pub fn tv_case(seed: u64) -> f64 {
    let size = (3, 4);
    let mut rng = RngStream::new(seed).derive(10);
    let x = rng.uniform_tensor(&[1, 12], 0.0, 1.0);
    let y = loop {
        let y = rng.uniform_tensor(&[1, 12], 0.0, 1.0);
        let v = y.data();
        let ok = (0..size.0).all(|r| {
            (0..size.1).all(|c| {
                let i = r * size.1 + c;
                (c + 1 == size.1 || (v[i + 1] - v[i]).abs() >= TV_MIN_GAP)
                    && (r + 1 == size.0 || (v[i + size.1] - v[i]).abs() >= TV_MIN_GAP)
            })
        });
        if ok {
            break y;
        }
    };
    let lambda = 0.05 + rng.uniform() as f32 * 0.3;
    let tape = Tape::new();
    let yv = tape.leaf(y.clone());
    let f = tv_objective_var(&tape, yv, &x, size, lambda).unwrap();
    let g = tape.grad_wrt(f, yv).unwrap();
    let x64 = reference::rows(&x).remove(0);
    fd_relative_error(|y| reference::tv(y, &x64, size, lambda as f64, TV_SMOOTHING as f64), &y, &g, FD_STEP)
}

/// Pixel-space denoiser trained on the two-component 2-D mixture.
pub struct MixtureLab {
    pub data: Dataset,
    pub model: Denoiser,
    pub schedule: DiffusionSchedule,
    pub curve: Vec<f32>,
}

pub fn train_mixture(seed: u64) -> MixtureLab {
    let data = gaussian_mixture_2d(2, 500, 1.0, 0.1, seed);
    let schedule = DiffusionSchedule::default();
    let model = Denoiser::new(DenoiserConfig::new(2, 2), &mut RngStream::new(seed).derive(3));
    let cfg = TrainConfig { seed, steps: 3000, ..TrainConfig::default() };
    let (model, report) = train_denoiser(model, &data.data, &data.labels, &schedule, &cfg).unwrap();
    MixtureLab { data, model, schedule, curve: report.curve }
}

pub fn mixture_lab() -> &'static MixtureLab {
    static LAB: OnceLock<MixtureLab> = OnceLock::new();
    LAB.get_or_init(|| train_mixture(0))
}

pub fn scratch_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("advdm").join(name)
}

/// The default experiment configuration with its run directory redirected
/// under the cargo scratch area.
pub fn lab_config(name: &str) -> ExperimentConfig {
    ExperimentConfig { output_dir: scratch_dir(name), ..ExperimentConfig::default() }
}

/// The default shapes models, cached on disk across test binaries.
pub struct ShapesLab {
    pub data: Dataset,
    pub models: Models,
}

pub fn shapes_lab() -> &'static ShapesLab {
    static LAB: OnceLock<ShapesLab> = OnceLock::new();
    LAB.get_or_init(|| {
        let mut cfg = lab_config("models");
        cfg.attack.methods = vec!["none".into(), "pgd_classifier".into()];
        let data = load_dataset(&cfg.dataset).unwrap();
        let models = prepare_models(&cfg, &data, TrainPolicy::IfMissing).unwrap();
        ShapesLab { data, models }
    })
}

/// Largest `|z|` of the Monte-Carlo mean and variance of `forward_diffuse`
/// against `√ᾱ_t x0` and `1 − ᾱ_t`, over `n` noise draws at each step in
/// `steps`. Each value is returned as `(t, z_mean, z_var)`.
pub fn forward_moment_zscores(x0: f32, steps: &[usize], n: usize, seed: u64) -> Vec<(usize, f64, f64)> {
    use advdm_core::diffusion::forward_diffuse;
    let sched = DiffusionSchedule::default();
    let mut rng = RngStream::new(seed);
    let x = Tensor::full(&[n, 1], x0);
    steps
        .iter()
        .map(|&t| {
            let eps = rng.gaussian(&[n, 1]);
            let y = forward_diffuse(&x, t, &eps, &sched).unwrap();
            let vals: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let ab = sched.alpha_bar(t) as f64;
            let sd = (1.0 - ab).sqrt();
            let z_mean = (mean - ab.sqrt() * x0 as f64) / (sd / (n as f64).sqrt());
            // sample variance of a Gaussian has std σ² sqrt(2 / (n − 1))
            let z_var = (var - (1.0 - ab)) / ((1.0 - ab) * (2.0 / (n - 1) as f64).sqrt());
            (t, z_mean, z_var)
        })
        .collect()
}
