mod common;

use std::sync::OnceLock;

use advdm_core::attacks::{AttackConfig, AttackRegistry};
use advdm_core::experiment::run::attack_context;
use advdm_core::inversion::{
    generate_from_inversion, invert, inversion_loss, style_transfer, ConditionEmbedding, InversionConfig, InversionReport,
    DEFAULT_STRENGTH,
};
use advdm_core::metrics::{embed, frechet, FeatureMode, FeatureSource};
use advdm_core::tensor::{RngStream, Tensor};
use common::*;

const GROUPS: usize = 10;
const GROUP_SIZE: usize = 5;

struct Group {
    class: usize,
    /// Pixel images.
    images: Tensor,
    embedding: ConditionEmbedding,
    report: InversionReport,
}

fn group_images(class: usize, seed: u64) -> Tensor {
    let lab = shapes_lab();
    let idx = lab.data.indices_of(class);
    let perm = RngStream::new(seed).permutation(idx.len());
    lab.data.data.select_rows(&perm[..GROUP_SIZE].iter().map(|&p| idx[p]).collect::<Vec<_>>())
}

fn invert_images(images: &Tensor, seed: u64) -> (ConditionEmbedding, InversionReport) {
    let m = &shapes_lab().models;
    let z = m.to_model_space(images).unwrap();
    invert(&m.denoiser, &m.schedule, &z, &InversionConfig::default(), &mut RngStream::new(seed)).unwrap()
}

fn clean_groups() -> &'static [Group] {
    static GROUPS_CELL: OnceLock<Vec<Group>> = OnceLock::new();
    GROUPS_CELL.get_or_init(|| {
        let classes = shapes_lab().data.classes;
        (0..GROUPS)
            .map(|g| {
                let class = g % classes;
                let images = group_images(class, 500 + g as u64);
                let (embedding, report) = invert_images(&images, 600 + g as u64);
                Group { class, images, embedding, report }
            })
            .collect()
    })
}

fn advdm(images: &Tensor, seed: u64) -> Tensor {
    let lab = shapes_lab();
    let ctx = attack_context(&lab.models, &lab.data);
    AttackRegistry::default()
        .get("advdm")
        .unwrap()
        .perturb(&ctx, images, &[], &AttackConfig::default(), &mut RngStream::new(seed), None)
        .unwrap()
}

/// Encoder-feature Fréchet distance from `x` to the images of `class`.
fn distance_to_class(x: &Tensor, class: usize) -> f64 {
    let lab = shapes_lab();
    let codec = lab.models.codec.as_ref();
    let real = embed(codec, &lab.data.class_data(class), FeatureMode::Encoder, FeatureSource::Real).unwrap();
    frechet(&real, &embed(codec, x, FeatureMode::Encoder, FeatureSource::Generated).unwrap()).unwrap()
}

fn generate(s: &ConditionEmbedding, seed: u64) -> Tensor {
    let lab = shapes_lab();
    let m = &lab.models;
    let z = generate_from_inversion(&m.denoiser, &m.schedule, s, 50, &mut RngStream::new(seed)).unwrap();
    m.to_data_space(&z, lab.data.range).unwrap()
}

fn cosine(a: &Tensor, b: &Tensor) -> f32 {
    let dot: f32 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    dot / (a.sq_norm().sqrt() * b.sq_norm().sqrt())
}

#[test]
fn inverted_condition_retrieves_the_class() {
    let model = &shapes_lab().models.denoiser;
    let hits = clean_groups().iter().filter(|g| g.embedding.nearest_class(model) == g.class).count();
    assert!(hits * 10 >= GROUPS * 8, "{hits}/{GROUPS}");
}

/// Means of the first and last tenth of an inversion curve.
fn head_tail(curve: &[f32]) -> (f32, f32) {
    let tenth = curve.len() / 10;
    let mean = |c: &[f32]| c.iter().sum::<f32>() / c.len() as f32;
    (mean(&curve[..tenth]), mean(&curve[curve.len() - tenth..]))
}

#[test]
fn inversion_curve_settles_below_its_start() {
    let (head, tail) = clean_groups().iter().map(|g| head_tail(&g.report.curve)).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    assert!(tail <= head, "{tail} vs {head}");
}

#[test]
#[ignore = "when the random start is already the group's class, single-draw curve noise exceeds the remaining descent"]
fn every_inversion_curve_settles_below_its_start() {
    for (i, g) in clean_groups().iter().enumerate() {
        let (head, tail) = head_tail(&g.report.curve);
        assert!(tail <= head, "group {i}: {tail} vs {head}");
    }
}

#[test]
fn inversion_lowers_the_expected_loss() {
    let m = &shapes_lab().models;
    for (i, g) in clean_groups().iter().enumerate() {
        // same draws as invert() uses for its starting point
        let mut rng = RngStream::new(600 + i as u64);
        let init_class = rng.uniform_int(0, m.denoiser.config.classes - 1);
        let noise = rng.gaussian(&[m.denoiser.config.cond_dim]);
        let cfg = InversionConfig::default();
        let start = m.denoiser.class_condition(init_class).unwrap().zip_map(&noise, |c, n| c + cfg.init_noise * n).unwrap();
        let z = m.to_model_space(&g.images).unwrap();
        let loss = |s: &Tensor| inversion_loss(&m.denoiser, &m.schedule, &z, s, 4000, &mut RngStream::new(5)).unwrap();
        let (before, after) = (loss(&start), loss(&g.embedding.vector));
        assert!(after <= before, "group {i}: {after} vs {before}");
    }
}

#[test]
fn attacked_groups_converge_to_higher_loss() {
    let m = &shapes_lab().models;
    for (i, g) in clean_groups().iter().enumerate() {
        let attacked = advdm(&g.images, 700 + i as u64);
        let (s_adv, _) = invert_images(&attacked, 600 + i as u64);
        let loss = |images: &Tensor, s: &ConditionEmbedding| {
            let z = m.to_model_space(images).unwrap();
            inversion_loss(&m.denoiser, &m.schedule, &z, &s.vector, 400, &mut RngStream::new(800 + i as u64)).unwrap()
        };
        let (clean, adv) = (loss(&g.images, &g.embedding), loss(&attacked, &s_adv));
        assert!(adv > clean, "group {i}: {adv} vs {clean}");
    }
}

#[test]
fn generated_batch_is_closest_to_its_own_class() {
    let classes = shapes_lab().data.classes;
    for (i, g) in clean_groups().iter().take(classes).enumerate() {
        let x = generate(&g.embedding, 900 + i as u64);
        let d: Vec<f64> = (0..classes).map(|c| distance_to_class(&x, c)).collect();
        let best = (0..classes).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
        assert_eq!(best, g.class, "group {i}: {d:?}");
    }
}

#[test]
fn generation_is_seeded() {
    let g = &clean_groups()[0];
    assert_eq!(generate(&g.embedding, 1), generate(&g.embedding, 1));
}

#[test]
fn repeated_inversions_agree_more_than_other_classes() {
    let classes = shapes_lab().data.classes;
    let g = &clean_groups()[0];
    let repeats: Vec<Tensor> = (0..3).map(|s| invert_images(&g.images, 1000 + s).0.vector).collect();
    let others: Vec<&Tensor> = clean_groups()[1..classes].iter().map(|o| &o.embedding.vector).collect();
    let worst_same = (0..3).flat_map(|a| (a + 1..3).map(move |b| (a, b))).map(|(a, b)| cosine(&repeats[a], &repeats[b])).fold(f32::INFINITY, f32::min);
    let best_other = repeats.iter().flat_map(|r| others.iter().map(move |o| cosine(r, o))).fold(f32::NEG_INFINITY, f32::max);
    assert!(worst_same > best_other, "{worst_same} vs {best_other}");
}

#[test]
fn attacked_style_lands_farther_from_the_style_class() {
    let lab = shapes_lab();
    let m = &lab.models;
    let g = &clean_groups()[0];
    let (s_adv, _) = invert_images(&advdm(&g.images, 1100), 600);
    let pool = lab.data.indices_of((g.class + 1) % lab.data.classes);
    let sources = m.to_model_space(&lab.data.data.select_rows(&pool[..50])).unwrap();
    let render = |s: &ConditionEmbedding| {
        let z = style_transfer(&m.denoiser, &m.schedule, s, &sources, DEFAULT_STRENGTH, &mut RngStream::new(1200)).unwrap();
        m.to_data_space(&z, lab.data.range).unwrap()
    };
    let (clean, adv) = (distance_to_class(&render(&g.embedding), g.class), distance_to_class(&render(&s_adv), g.class));
    assert!(adv > clean, "{adv} vs {clean}");
}

