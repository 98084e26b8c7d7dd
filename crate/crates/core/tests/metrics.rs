mod common;

use advdm_core::data::synthetic_shapes;
use advdm_core::metrics::{embed, frechet, precision_recall, FeatureBatch, FeatureMode, FeatureSource, DEFAULT_K};
use advdm_core::tensor::{RngStream, Tensor};
use common::*;

fn real(t: Tensor) -> FeatureBatch {
    FeatureBatch::new(t, FeatureSource::Real).unwrap()
}

fn gen(t: Tensor) -> FeatureBatch {
    FeatureBatch::new(t, FeatureSource::Generated).unwrap()
}

#[test]
fn precision_recall_matches_brute_force() {
    for seed in 0..10 {
        let mut rng = RngStream::new(seed);
        let d = 2 + seed as usize % 4;
        let a = rng.gaussian(&[200, d]);
        // shifted and scaled so the two sets overlap only partly
        let b = rng.gaussian(&[200, d]).map(|v| 1.3 * v + 0.7);
        for k in [1, DEFAULT_K, 7] {
            let fast = precision_recall(&real(a.clone()), &gen(b.clone()), k).unwrap();
            let slow = reference::precision_recall(&a, &b, k);
            assert_eq!(fast, slow, "seed {seed} k {k}");
        }
    }
}

#[test]
fn precision_recall_brute_force_with_ties() {
    // coarse grid, so many distances coincide with k-NN radii exactly
    let grid = |t: Tensor| t.map(|v| (v * 2.0).round() / 2.0);
    for seed in 0..5 {
        let mut rng = RngStream::new(50 + seed);
        let a = grid(rng.gaussian(&[200, 2]));
        let b = grid(rng.gaussian(&[200, 2]).map(|v| v + 0.5));
        let fast = precision_recall(&real(a.clone()), &gen(b.clone()), DEFAULT_K).unwrap();
        assert_eq!(fast, reference::precision_recall(&a, &b, DEFAULT_K), "seed {seed}");
    }
}

#[test]
fn self_comparison_scores_one() {
    let a = RngStream::new(3).gaussian(&[50, 3]);
    let pr = precision_recall(&real(a.clone()), &gen(a.clone()), DEFAULT_K).unwrap();
    assert_eq!(pr, (1.0, 1.0));
    assert_eq!(reference::precision_recall(&a, &a, DEFAULT_K), (1.0, 1.0));
}

#[test]
fn frechet_matches_one_dimensional_closed_form() {
    let n = 10_000;
    for (seed, (m, s)) in [(1.0f32, 1.0f32), (2.0, 1.0), (1.0, 2.0), (0.0, 3.0)].into_iter().enumerate() {
        let mut rng = RngStream::new(seed as u64);
        let a = rng.gaussian(&[n, 1]);
        let b = rng.gaussian(&[n, 1]).map(|v| s * v + m);
        let expected = (m as f64).powi(2) + (1.0 - s as f64).powi(2);
        let got = frechet(&real(a), &gen(b)).unwrap();
        assert!((got - expected).abs() < 0.1 * expected, "m {m} s {s}: {got} vs {expected}");
    }
}

#[test]
fn frechet_of_a_batch_with_itself_is_zero() {
    for seed in 0..5 {
        let a = RngStream::new(seed).gaussian(&[300, 6]).map(|v| 3.0 * v + 1.0);
        assert!(frechet(&real(a.clone()), &gen(a)).unwrap().abs() < 1e-6);
    }
}

/// Random orthogonal `d x d` matrix by Gram-Schmidt.
fn orthogonal(d: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = rng.gaussian(&[d]).data().iter().map(|&x| x as f64).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-3 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q
}

fn rotate(x: &Tensor, q: &[Vec<f64>]) -> Tensor {
    let rows: Vec<Vec<f32>> = (0..x.rows())
        .map(|r| q.iter().map(|qi| qi.iter().zip(x.row(r)).map(|(a, &b)| a * b as f64).sum::<f64>() as f32).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn frechet_is_rotation_invariant() {
    for seed in 0..5 {
        let mut rng = RngStream::new(10 + seed);
        let a = rng.gaussian(&[200, 4]);
        let b = rng.gaussian(&[200, 4]).map(|v| 0.5 * v - 0.3);
        let q = orthogonal(4, &mut rng);
        let before = frechet(&real(a.clone()), &gen(b.clone())).unwrap();
        let after = frechet(&real(rotate(&a, &q)), &gen(rotate(&b, &q))).unwrap();
        assert!((before - after).abs() < 1e-4, "seed {seed}: {before} vs {after}");
    }
}

#[test]
fn precision_recall_survive_rigid_motion() {
    // grid data with axis swaps, sign flips and a dyadic shift is moved exactly in f32
    let grid = |t: Tensor| t.map(|v| (v * 64.0).round() / 64.0);
    let motion = |x: &Tensor| {
        let rows: Vec<Vec<f32>> = (0..x.rows()).map(|r| {
            let p = x.row(r);
            vec![-p[2] + 3.0, p[0] - 0.5, p[1] + 1.25]
        }).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    for seed in 0..5 {
        let mut rng = RngStream::new(20 + seed);
        let a = grid(rng.gaussian(&[150, 3]));
        let b = grid(rng.gaussian(&[120, 3]).map(|v| v * 1.2 + 0.4));
        let before = precision_recall(&real(a.clone()), &gen(b.clone()), DEFAULT_K).unwrap();
        let after = precision_recall(&real(motion(&a)), &gen(motion(&b)), DEFAULT_K).unwrap();
        assert_eq!(before, after, "seed {seed}");
    }
}

#[test]
fn encoder_and_pixel_features_rank_alike() {
    let lab = shapes_lab();
    let codec = lab.models.codec.as_ref().unwrap();
    // pixel covariances need more rows than the 256 pixels
    let data = synthetic_shapes(lab.data.classes, 600, 31).unwrap();
    let idx = data.indices_of(0);
    let (half_a, half_b) = idx.split_at(idx.len() / 2);
    let reference = data.data.select_rows(half_a);
    let same = data.data.select_rows(half_b);
    let mut rng = RngStream::new(30);
    let noisy = advdm_core::data::DataRange::Unit.clamp(&same.add(&rng.gaussian(same.shape()).map(|v| 0.15 * v)).unwrap());
    let noise = rng.uniform_tensor(same.shape(), 0.0, 1.0);
    for mode in [FeatureMode::Encoder, FeatureMode::Pixel] {
        let feats = |x: &Tensor, src| embed(Some(codec), x, mode, src).unwrap();
        let r = feats(&reference, FeatureSource::Real);
        let fids: Vec<f64> = [&same, &noisy, &noise].iter().map(|x| frechet(&r, &feats(x, FeatureSource::Generated)).unwrap()).collect();
        assert!(fids[0] < fids[1] && fids[1] < fids[2], "{mode:?}: {fids:?}");
    }
}

#[test]
fn identical_images_share_features() {
    let lab = shapes_lab();
    let codec = lab.models.codec.as_ref().unwrap();
    let x = lab.data.data.select_rows(&[7, 7, 7]);
    let f = embed(Some(codec), &x, FeatureMode::Encoder, FeatureSource::Real).unwrap();
    assert_eq!(f.dim(), codec.latent_dim());
    assert_eq!(f.features.row(0), f.features.row(2));
}
