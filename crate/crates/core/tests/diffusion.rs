mod common;

use advdm_core::data::{DataRange, Dataset};
use advdm_core::diffusion::{
    diffpure, img2img, l_dm, sample, train_denoiser, Denoiser, DenoiserConfig, DiffusionSchedule, TrainConfig,
};
use advdm_core::metrics::{frechet, FeatureBatch, FeatureSource};
use advdm_core::tensor::{RngStream, Tensor};
use common::*;

fn fd(a: &Tensor, b: &Tensor) -> f64 {
    frechet(
        &FeatureBatch::new(a.clone(), FeatureSource::Generated).unwrap(),
        &FeatureBatch::new(b.clone(), FeatureSource::Real).unwrap(),
    )
    .unwrap()
}

fn mean_abs_dev(a: &Tensor, b: &Tensor) -> f32 {
    a.sub(b).unwrap().map(f32::abs).mean()
}

fn head_tail(curve: &[f32]) -> (f32, f32) {
    let n = curve.len() / 10;
    let m = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
    (m(&curve[..n]), m(&curve[curve.len() - n..]))
}

#[test]
fn forward_moments_match_closed_form() {
    let steps: Vec<usize> = (1..=10).map(|i| i * 10).collect();
    for (t, zm, zv) in forward_moment_zscores(0.8, &steps, 10_000, 3) {
        assert!(zm.abs() < 3.0 && zv.abs() < 3.0, "t = {t}: z_mean {zm}, z_var {zv}");
    }
}

#[test]
fn mixture_training_halves_loss() {
    for seed in 0..3 {
        let curve = if seed == 0 { mixture_lab().curve.clone() } else { train_mixture(seed).curve };
        let (head, tail) = head_tail(&curve);
        assert!(tail < 0.5 * head, "seed {seed}: {head} -> {tail}");
    }
}

#[test]
fn samples_cover_both_modes() {
    let lab = mixture_lab();
    let x = sample(&lab.model, &lab.schedule, &lab.model.null_condition(), &mut RngStream::new(11), 1000).unwrap();
    let centers: Vec<Vec<f32>> = (0..2).map(|c| lab.data.class_data(c).row(0).to_vec()).collect();
    let near_first = (0..x.rows())
        .filter(|&r| {
            let d = |c: &[f32]| x.row(r).iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f32>();
            d(&centers[0]) < d(&centers[1])
        })
        .count();
    let share = near_first as f32 / 1000.0;
    assert!((share - 0.5).abs() <= 0.1, "first mode share {share}");
}

#[test]
fn single_gaussian_sample_mean() {
    let mu = [0.7f32, -0.4];
    let noise = RngStream::new(5).gaussian(&[1000, 2]);
    let pts: Vec<f32> = noise.data().chunks(2).flat_map(|p| [mu[0] + 0.1f32.sqrt() * p[0], mu[1] + 0.1f32.sqrt() * p[1]]).collect();
    let data = Dataset {
        data: Tensor::new(vec![1000, 2], pts).unwrap(),
        labels: vec![0; 1000],
        classes: 1,
        range: DataRange::Unbounded,
        image_size: None,
    };
    let sched = DiffusionSchedule::default();
    let model = Denoiser::new(DenoiserConfig::new(2, 1), &mut RngStream::new(1));
    let (model, _) = train_denoiser(model, &data.data, &data.labels, &sched, &TrainConfig::default()).unwrap();
    let x = sample(&model, &sched, &model.class_condition(0).unwrap(), &mut RngStream::new(2), 1000).unwrap();
    for (d, &m) in mu.iter().enumerate() {
        let mean = (0..x.rows()).map(|r| x.row(r)[d]).sum::<f32>() / 1000.0;
        assert!((mean - m).abs() < 0.1, "dim {d}: {mean} vs {m}");
    }
}

#[test]
fn sampling_is_seeded() {
    let lab = mixture_lab();
    let c = lab.model.class_condition(1).unwrap();
    let a = sample(&lab.model, &lab.schedule, &c, &mut RngStream::new(4), 64).unwrap();
    let b = sample(&lab.model, &lab.schedule, &c, &mut RngStream::new(4), 64).unwrap();
    assert_eq!(a, b);
}

#[test]
fn img2img_low_strength_keeps_source() {
    let lab = mixture_lab();
    let source = lab.data.class_data(0);
    let strength = 1.0 / lab.schedule.steps as f32;
    let out = img2img(&lab.model, &lab.schedule, &lab.model.class_condition(0).unwrap(), &source, strength, &mut RngStream::new(6))
        .unwrap();
    let mad = mean_abs_dev(&out, &source);
    assert!(mad < 0.05, "mean absolute deviation {mad}");
    let again = img2img(&lab.model, &lab.schedule, &lab.model.class_condition(0).unwrap(), &source, strength, &mut RngStream::new(6))
        .unwrap();
    assert_eq!(out, again);
}

#[test]
fn img2img_full_strength_matches_conditional_sampling() {
    let lab = mixture_lab();
    let source = lab.data.class_data(1);
    let c = lab.model.class_condition(0).unwrap();
    let out = img2img(&lab.model, &lab.schedule, &c, &source, 1.0, &mut RngStream::new(7)).unwrap();
    let fresh = sample(&lab.model, &lab.schedule, &c, &mut RngStream::new(8), source.rows()).unwrap();
    let between = fd(&out, &fresh);
    assert!(between < fd(&out, &source) && between < fd(&fresh, &source), "{between}");
}

#[test]
fn diffpure_first_step_is_near_identity() {
    let lab = mixture_lab();
    let x = lab.data.data.clone();
    let y = diffpure(&lab.model, &lab.schedule, &x, 1, &mut RngStream::new(9)).unwrap();
    let mad = mean_abs_dev(&x, &y);
    assert!(mad < 0.1, "mean absolute deviation {mad}");
}

#[test]
fn diffpure_full_depth_behaves_like_sampling() {
    let lab = mixture_lab();
    let x = lab.data.data.clone();
    let purified = diffpure(&lab.model, &lab.schedule, &x, lab.schedule.steps, &mut RngStream::new(10)).unwrap();
    let fresh = sample(&lab.model, &lab.schedule, &lab.model.null_condition(), &mut RngStream::new(12), x.rows()).unwrap();
    let (p, f) = (fd(&purified, &x), fd(&fresh, &x));
    assert!(p <= 2.0 * f.max(1e-3) && f <= 2.0 * p.max(1e-3), "purified {p}, fresh {f}");
}

#[test]
fn zero_learning_rate_leaves_loss_flat() {
    let data = advdm_core::data::gaussian_mixture_2d(2, 100, 1.0, 0.1, 0);
    let sched = DiffusionSchedule::default();
    let model = Denoiser::new(DenoiserConfig::new(2, 2), &mut RngStream::new(0));
    let cfg = TrainConfig { lr: 0.0, steps: 400, ..TrainConfig::default() };
    let (trained, report) = train_denoiser(model.clone(), &data.data, &data.labels, &sched, &cfg).unwrap();
    assert_eq!(trained, model);
    // Welch t statistic between the two halves of the curve
    let (a, b) = report.curve.split_at(200);
    let stats = |s: &[f32]| {
        let m = s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
        let v = s.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64;
        (m, v / s.len() as f64)
    };
    let ((ma, va), (mb, vb)) = (stats(a), stats(b));
    let t = (ma - mb) / (va + vb).sqrt();
    assert!(t.abs() < 2.6, "t = {t}");
}

#[test]
fn loss_is_nonnegative() {
    let lab = mixture_lab();
    let mut rng = RngStream::new(13);
    for t in [1, 50, 100] {
        let eps = rng.gaussian(&[8, 2]);
        let x0 = lab.data.data.select_rows(&(0..8).collect::<Vec<_>>());
        let v = l_dm(&lab.model, &lab.schedule, &x0, &lab.model.null_condition(), t, &eps).unwrap();
        assert!(v >= 0.0);
    }
}
