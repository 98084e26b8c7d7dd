//! Conditional-generation scenarios, selected by name.
//!
//! | name                 | condition from the group       | generation                          |
//! |----------------------|--------------------------------|-------------------------------------|
//! | `text2img_inversion` | inverted `S*`                  | ancestral samples under `S*`        |
//! | `style_transfer`     | inverted `S*`                  | img2img of another class toward `S*`|
//! | `img2img`            | the group's own latents        | img2img under the class condition   |

use std::collections::BTreeMap;

use super::config::ExperimentConfig;
use super::models::Models;
use crate::data::Dataset;
use crate::diffusion::img2img;
use crate::error::{Error, Result};
use crate::inversion::{generate_from_inversion, invert, style_transfer, ConditionEmbedding};
use crate::tensor::{RngStream, Tensor};

/// Read-only inputs shared by every cell.
#[derive(Clone, Copy)]
pub struct CellEnv<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a Dataset,
    pub models: &'a Models,
}

/// Random streams of one image group.
#[derive(Clone, Debug)]
pub struct GroupStreams {
    pub attack: RngStream,
    pub defense: RngStream,
    pub inversion: RngStream,
    pub generation: RngStream,
}

impl GroupStreams {
    pub fn new(seed: u64, group: usize) -> Self {
        let root = RngStream::new(seed);
        let g = group as u64;
        Self {
            attack: root.derive(100 + g),
            inversion: root.derive(200 + g),
            generation: root.derive(300 + g),
            defense: root.derive(400 + g),
        }
    }
}

pub trait Scenario: Send + Sync {
    fn name(&self) -> &'static str;

    /// Generated samples, in data space, from a (possibly perturbed) group
    /// of images of `class`.
    fn generate(&self, env: &CellEnv<'_>, group: &Tensor, class: usize, streams: &mut GroupStreams) -> Result<Tensor>;
}

/// Fits `S*` to the group in the denoiser's space.
pub fn invert_group(env: &CellEnv<'_>, group: &Tensor, rng: &mut RngStream) -> Result<ConditionEmbedding> {
    let m = env.models;
    let z = m.to_model_space(group)?;
    Ok(invert(&m.denoiser, &m.schedule, &z, &env.cfg.inversion, rng)?.0)
}

struct Text2ImgInversion;
struct StyleTransfer;
struct Img2Img;

impl Scenario for Text2ImgInversion {
    fn name(&self) -> &'static str {
        "text2img_inversion"
    }
    fn generate(&self, env: &CellEnv<'_>, group: &Tensor, _: usize, s: &mut GroupStreams) -> Result<Tensor> {
        let m = env.models;
        let s_star = invert_group(env, group, &mut s.inversion)?;
        let z = generate_from_inversion(&m.denoiser, &m.schedule, &s_star, env.cfg.scenario.samples_per_group, &mut s.generation)?;
        m.to_data_space(&z, env.data.range)
    }
}

impl Scenario for StyleTransfer {
    fn name(&self) -> &'static str {
        "style_transfer"
    }
    /// Sources are drawn from the next class, so the style has to come
    /// from `S*`.
    fn generate(&self, env: &CellEnv<'_>, group: &Tensor, class: usize, s: &mut GroupStreams) -> Result<Tensor> {
        let m = env.models;
        let s_star = invert_group(env, group, &mut s.inversion)?;
        let pool = env.data.indices_of((class + 1) % env.data.classes);
        if pool.is_empty() {
            return Err(Error::Precondition(format!("class {} has no source images", (class + 1) % env.data.classes)));
        }
        let picks: Vec<usize> = (0..env.cfg.scenario.samples_per_group)
            .map(|_| pool[s.generation.uniform_int(0, pool.len() - 1)])
            .collect();
        let sources = m.to_model_space(&env.data.data.select_rows(&picks))?;
        let z = style_transfer(&m.denoiser, &m.schedule, &s_star, &sources, env.cfg.scenario.strength, &mut s.generation)?;
        m.to_data_space(&z, env.data.range)
    }
}

impl Scenario for Img2Img {
    fn name(&self) -> &'static str {
        "img2img"
    }
    fn generate(&self, env: &CellEnv<'_>, group: &Tensor, class: usize, s: &mut GroupStreams) -> Result<Tensor> {
        let m = env.models;
        let z = m.to_model_space(group)?;
        let rows: Vec<usize> = (0..env.cfg.scenario.samples_per_group).map(|i| i % z.rows()).collect();
        let cond = m.denoiser.class_condition(class)?;
        let out = img2img(&m.denoiser, &m.schedule, &cond, &z.select_rows(&rows), env.cfg.scenario.strength, &mut s.generation)?;
        m.to_data_space(&out, env.data.range)
    }
}

/// Scenarios keyed by name.
pub struct ScenarioRegistry {
    entries: BTreeMap<&'static str, Box<dyn Scenario>>,
}

impl Default for ScenarioRegistry {
    fn default() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register(Box::new(Text2ImgInversion));
        r.register(Box::new(StyleTransfer));
        r.register(Box::new(Img2Img));
        r
    }
}

impl ScenarioRegistry {
    pub fn register(&mut self, scenario: Box<dyn Scenario>) {
        self.entries.insert(scenario.name(), scenario);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Scenario> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Unknown { kind: "scenario", name: name.to_string() })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}
