//! Input preprocessing applied to (possibly adversarial) images before they
//! reach the generation pipeline.
//!
//! | name       | operation                                                   |
//! |------------|-------------------------------------------------------------|
//! | `identity` | no-op                                                       |
//! | `jpeg_like`| 8×8 block DCT, quality-scaled quantization, inverse DCT     |
//! | `tvm`      | gradient descent on `‖y − x‖² + λ·TV(y)`                     |
//! | `resample` | bilinear down- then up-sampling; stands in for learned super-resolution |
//! | `diffpure` | forward diffusion to `t*`, then the unconditional reverse chain |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::data::DataRange;
use crate::diffusion::{as_matrix, diffpure, Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    /// JPEG quality, 1..=100.
    pub quality: u8,
    pub tv_lambda: f32,
    pub tv_iters: usize,
    /// Down-up resampling factor, at least 1.
    pub resample_factor: f32,
    /// Purification depth; `None` means a quarter of the schedule.
    pub t_star: Option<usize>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self { quality: 75, tv_lambda: 0.1, tv_iters: 50, resample_factor: 2.0, t_star: None }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.quality) {
            return Err(Error::Config(format!("jpeg quality {} outside 1..=100", self.quality)));
        }
        if !(self.tv_lambda >= 0.0) {
            return Err(Error::Config(format!("tv_lambda {} must be non-negative", self.tv_lambda)));
        }
        if !(self.resample_factor >= 1.0) {
            return Err(Error::Config(format!("resample factor {} below 1", self.resample_factor)));
        }
        if self.t_star == Some(0) {
            return Err(Error::Config("t_star must be at least 1".into()));
        }
        Ok(())
    }
}

/// What a defense may read besides the images themselves.
#[derive(Clone, Copy)]
pub struct DefenseContext<'a> {
    pub image_size: Option<(usize, usize)>,
    pub range: DataRange,
    pub denoiser: Option<&'a Denoiser>,
    pub schedule: Option<&'a DiffusionSchedule>,
    /// Present when the denoiser works in latent space.
    pub codec: Option<&'a LatentCodec>,
}

impl DefenseContext<'_> {
    fn pixel_size(&self, x: &Tensor) -> Result<(usize, usize)> {
        match (self.range, self.image_size) {
            (DataRange::Unit, Some((h, w))) if h * w == x.cols() => Ok((h, w)),
            (DataRange::Unit, Some((h, w))) => {
                Err(Error::Dimension(format!("rows of width {} are not {h}x{w} images", x.cols())))
            }
            _ => Err(Error::Mode("defense needs pixel images in [0, 1]".into())),
        }
    }
}

pub trait Defense: Send + Sync {
    fn name(&self) -> &'static str;

    fn apply(&self, ctx: &DefenseContext<'_>, x: &Tensor, cfg: &DefenseConfig, rng: &mut RngStream) -> Result<Tensor>;
}

struct Identity;
struct JpegLike;
struct Tvm;
struct Resample;
struct DiffPure;

impl Defense for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }
    fn apply(&self, _: &DefenseContext<'_>, x: &Tensor, _: &DefenseConfig, _: &mut RngStream) -> Result<Tensor> {
        as_matrix(x)
    }
}

impl Defense for JpegLike {
    fn name(&self) -> &'static str {
        "jpeg_like"
    }
    fn apply(&self, ctx: &DefenseContext<'_>, x: &Tensor, cfg: &DefenseConfig, _: &mut RngStream) -> Result<Tensor> {
        let x = as_matrix(x)?;
        jpeg_like(&x, ctx.pixel_size(&x)?, cfg.quality)
    }
}

impl Defense for Tvm {
    fn name(&self) -> &'static str {
        "tvm"
    }
    fn apply(&self, ctx: &DefenseContext<'_>, x: &Tensor, cfg: &DefenseConfig, _: &mut RngStream) -> Result<Tensor> {
        let x = as_matrix(x)?;
        Ok(tvm(&x, ctx.pixel_size(&x)?, cfg.tv_lambda, cfg.tv_iters)?.0)
    }
}

impl Defense for Resample {
    fn name(&self) -> &'static str {
        "resample"
    }
    fn apply(&self, ctx: &DefenseContext<'_>, x: &Tensor, cfg: &DefenseConfig, _: &mut RngStream) -> Result<Tensor> {
        let x = as_matrix(x)?;
        resample(&x, ctx.pixel_size(&x)?, cfg.resample_factor)
    }
}

impl Defense for DiffPure {
    fn name(&self) -> &'static str {
        "diffpure"
    }
    fn apply(&self, ctx: &DefenseContext<'_>, x: &Tensor, cfg: &DefenseConfig, rng: &mut RngStream) -> Result<Tensor> {
        let model = ctx.denoiser.ok_or_else(|| Error::Config("diffpure needs a denoiser".into()))?;
        let sched = ctx.schedule.ok_or_else(|| Error::Config("diffpure needs a schedule".into()))?;
        let t_star = cfg.t_star.unwrap_or((sched.steps / 4).max(1));
        let x = as_matrix(x)?;
        let y = match ctx.codec {
            Some(codec) => codec.decode(&diffpure(model, sched, &codec.encode(&x)?, t_star, rng)?)?,
            None => diffpure(model, sched, &x, t_star, rng)?,
        };
        Ok(ctx.range.clamp(&y))
    }
}

/// Defenses keyed by name.
pub struct DefenseRegistry {
    entries: BTreeMap<&'static str, Box<dyn Defense>>,
}

impl Default for DefenseRegistry {
    fn default() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register(Box::new(Identity));
        r.register(Box::new(JpegLike));
        r.register(Box::new(Tvm));
        r.register(Box::new(Resample));
        r.register(Box::new(DiffPure));
        r
    }
}

impl DefenseRegistry {
    pub fn register(&mut self, defense: Box<dyn Defense>) {
        self.entries.insert(defense.name(), defense);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Defense> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Unknown { kind: "defense", name: name.to_string() })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

const LUMINANCE: [f32; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Luminance table scaled the way the IJG encoder does it.
pub fn quant_table(quality: u8) -> [f32; 64] {
    let q = quality.clamp(1, 100) as f32;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    LUMINANCE.map(|b| ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))
}

/// `C[u][x]` of the orthonormal 8-point DCT-II.
fn dct_matrix() -> [[f32; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = (a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos()) as f32;
        }
    }
    c
}

/// `C B Cᵀ`
pub fn dct8x8(block: &[f32; 64]) -> [f32; 64] {
    let c = dct_matrix();
    let mut tmp = [0.0f32; 64];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| c[u][y] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0f32; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|x| tmp[u * 8 + x] * c[v][x]).sum();
        }
    }
    out
}

/// `Cᵀ F C`
pub fn idct8x8(coef: &[f32; 64]) -> [f32; 64] {
    let c = dct_matrix();
    let mut tmp = [0.0f32; 64];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|u| c[u][y] * coef[u * 8 + v]).sum();
        }
    }
    let mut out = [0.0f32; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| tmp[y * 8 + v] * c[v][x]).sum();
        }
    }
    out
}

/// Quantizes every 8×8 block on the 0..255 level scale. Images whose sides
/// are not multiples of 8 are edge-padded and cropped back.
pub fn jpeg_like(x: &Tensor, (h, w): (usize, usize), quality: u8) -> Result<Tensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Config(format!("jpeg quality {quality} outside 1..=100")));
    }
    let x = as_matrix(x)?;
    if x.cols() != h * w {
        return Err(Error::Dimension(format!("rows of width {} are not {h}x{w} images", x.cols())));
    }
    let table = quant_table(quality);
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let img = x.row(r);
        let mut plane = vec![0.0f32; ph * pw];
        for y in 0..ph {
            for xx in 0..pw {
                plane[y * pw + xx] = img[y.min(h - 1) * w + xx.min(w - 1)] * 255.0 - 128.0;
            }
        }
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [0.0f32; 64];
                for i in 0..64 {
                    block[i] = plane[(by + i / 8) * pw + bx + i % 8];
                }
                let mut coef = dct8x8(&block);
                for (c, q) in coef.iter_mut().zip(&table) {
                    *c = (*c / q).round() * q;
                }
                let back = idct8x8(&coef);
                for i in 0..64 {
                    plane[(by + i / 8) * pw + bx + i % 8] = back[i];
                }
            }
        }
        for y in 0..h {
            for xx in 0..w {
                out.push(((plane[y * pw + xx] + 128.0) / 255.0).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Flat indices `(a, b)` of every horizontally and vertically adjacent pixel
/// pair across a batch of `n` images.
fn neighbour_pairs(n: usize, (h, w): (usize, usize)) -> (Vec<usize>, Vec<usize>) {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for img in 0..n {
        let base = img * h * w;
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    a.push(base + y * w + x + 1);
                    b.push(base + y * w + x);
                }
                if y + 1 < h {
                    a.push(base + (y + 1) * w + x);
                    b.push(base + y * w + x);
                }
            }
        }
    }
    (a, b)
}

pub const TV_SMOOTHING: f32 = 1e-3;

/// Traced `‖y − x‖² + λ Σ sqrt(d² + ε_s²)` over all adjacent-pixel
/// differences `d`, summed over the batch.
pub fn tv_objective_var<'t>(
    tape: &'t Tape,
    y: Var<'t>,
    x: &Tensor,
    size: (usize, usize),
    lambda: f32,
) -> Result<Var<'t>> {
    let (a, b) = neighbour_pairs(x.rows(), size);
    let fidelity = y.sub(&tape.constant(x.clone()))?.square().sum();
    let tv = y.gather(&a)?.sub(&y.gather(&b)?)?.smooth_abs(TV_SMOOTHING).sum();
    fidelity.add(&tv.scale(lambda))
}

fn tv_value_and_grad(y: &Tensor, x: &Tensor, size: (usize, usize), lambda: f32) -> Result<(f32, Tensor)> {
    let tape = Tape::new();
    let yv = tape.leaf(y.clone());
    let f = tv_objective_var(&tape, yv, x, size, lambda)?;
    let value = f.value().data()[0];
    Ok((value, tape.grad_wrt(f, yv)?))
}

/// Gradient descent from `y = x` with backtracking, so the recorded objective
/// never increases. Returns the clamped result and the objective per iterate.
pub fn tvm(x: &Tensor, size: (usize, usize), lambda: f32, iters: usize) -> Result<(Tensor, Vec<f32>)> {
    let x = as_matrix(x)?;
    if x.cols() != size.0 * size.1 {
        return Err(Error::Dimension(format!("rows of width {} are not {}x{} images", x.cols(), size.0, size.1)));
    }
    let mut y = x.clone();
    let (mut f, mut g) = tv_value_and_grad(&y, &x, size, lambda)?;
    let mut trace = vec![f];
    let mut step = 0.25f32;
    for _ in 0..iters {
        let g2 = g.sq_norm();
        if g2 == 0.0 {
            break;
        }
        let mut accepted = None;
        for _ in 0..40 {
            let cand = y.zip_map(&g, |a, d| a - step * d)?;
            let (fc, gc) = tv_value_and_grad(&cand, &x, size, lambda)?;
            if fc <= f - 1e-4 * step * g2 {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc, gc)) = accepted else { break };
        y = cand;
        f = fc;
        g = gc;
        trace.push(f);
        step *= 2.0;
    }
    Ok((DataRange::Unit.clamp(&y), trace))
}

/// Half-pixel-centred bilinear resize of one `h×w` plane to `oh×ow`.
fn bilinear(src: &[f32], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f32> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let s = ((i as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).clamp(0.0, (n_in - 1) as f32);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f32)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Bilinear downscale by `factor`, then back up to the original size.
pub fn resample(x: &Tensor, (h, w): (usize, usize), factor: f32) -> Result<Tensor> {
    if !(factor >= 1.0) {
        return Err(Error::Config(format!("resample factor {factor} below 1")));
    }
    let x = as_matrix(x)?;
    if x.cols() != h * w {
        return Err(Error::Dimension(format!("rows of width {} are not {h}x{w} images", x.cols())));
    }
    let small = (((h as f32 / factor).round() as usize).max(1), ((w as f32 / factor).round() as usize).max(1));
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let down = bilinear(x.row(r), (h, w), small);
        out.extend(bilinear(&down, small, (h, w)).into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIZE: (usize, usize) = (16, 16);

    fn checkerboard() -> Tensor {
        let v = (0..256).map(|i| ((i / 16 + i % 16) % 2) as f32).collect();
        Tensor::new(vec![1, 256], v).unwrap()
    }

    #[test]
    fn dct_round_trip_is_identity() {
        let mut rng = RngStream::new(0);
        let b: [f32; 64] = rng.gaussian(&[64]).to_vec().try_into().unwrap();
        let back = idct8x8(&dct8x8(&b));
        for (a, c) in b.iter().zip(&back) {
            assert!((a - c).abs() < 1e-4);
        }
    }

    #[test]
    fn quant_table_endpoints() {
        assert!(quant_table(100).iter().all(|&q| q == 1.0));
        assert_eq!(quant_table(50), LUMINANCE);
    }

    #[test]
    fn representable_constant_survives_jpeg() {
        let x = Tensor::full(&[2, 256], 128.0 / 255.0);
        let y = jpeg_like(&x, SIZE, 10).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn jpeg_pads_odd_sizes() {
        let x = Tensor::full(&[1, 100], 0.3);
        let y = jpeg_like(&x, (10, 10), 75).unwrap();
        assert_eq!(y.shape(), &[1, 100]);
        assert!(y.max_abs_diff(&x).unwrap() < 0.02);
    }

    #[test]
    fn pixel_defenses_reject_unbounded_data() {
        let ctx = DefenseContext {
            image_size: None,
            range: DataRange::Unbounded,
            denoiser: None,
            schedule: None,
            codec: None,
        };
        let r = DefenseRegistry::default();
        let x = Tensor::zeros(&[1, 2]);
        let err = r.get("jpeg_like").unwrap().apply(&ctx, &x, &DefenseConfig::default(), &mut RngStream::new(0));
        assert!(matches!(err, Err(Error::Mode(_))));
    }

    #[test]
    fn tvm_without_weight_is_identity() {
        let x = RngStream::new(1).uniform_tensor(&[2, 256], 0.0, 1.0);
        let (y, _) = tvm(&x, SIZE, 0.0, 20).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn tvm_objective_never_increases() {
        let x = RngStream::new(2).uniform_tensor(&[1, 256], 0.0, 1.0);
        let (_, trace) = tvm(&x, SIZE, 0.1, 50).unwrap();
        assert!(trace.len() > 1);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn resample_identity_and_nyquist() {
        let x = RngStream::new(3).uniform_tensor(&[1, 256], 0.0, 1.0);
        assert_eq!(resample(&x, SIZE, 1.0).unwrap(), x);
        let c = Tensor::full(&[1, 256], 0.4);
        assert!(resample(&c, SIZE, 2.0).unwrap().max_abs_diff(&c).unwrap() < 1e-6);
        assert!(matches!(resample(&x, SIZE, 0.5), Err(Error::Config(_))));
        let cb = checkerboard();
        let y = resample(&cb, SIZE, 2.0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }
}
