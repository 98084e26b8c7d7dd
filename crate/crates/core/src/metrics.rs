//! Sample-quality measures over feature embeddings: Fréchet distance and
//! k-nearest-neighbour precision/recall.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Real,
    Generated,
}

/// How samples are turned into feature vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Codec encoder outputs.
    Encoder,
    /// Raw flattened samples.
    Pixel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    /// `[n, d]`
    pub features: Tensor,
    pub source: FeatureSource,
}

impl FeatureBatch {
    pub fn new(features: Tensor, source: FeatureSource) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Dimension(format!("features must be [n, d], got {:?}", features.shape())));
        }
        if !features.is_finite() {
            return Err(Error::Precondition("non-finite feature values".into()));
        }
        Ok(Self { features, source })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    fn check_fid_size(&self) -> Result<()> {
        if self.len() < self.dim() + 1 {
            return Err(Error::SampleSize { needed: self.dim() + 1, got: self.len(), dim: self.dim() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_real: usize,
    pub n_gen: usize,
    pub k: usize,
}

pub fn embed(codec: Option<&LatentCodec>, samples: &Tensor, mode: FeatureMode, source: FeatureSource) -> Result<FeatureBatch> {
    let features = match (mode, codec) {
        (FeatureMode::Pixel, _) => samples.reshape(&[samples.rows(), samples.cols()])?,
        (FeatureMode::Encoder, Some(c)) => c.encode(samples)?,
        (FeatureMode::Encoder, None) => {
            return Err(Error::Config("encoder features need a trained codec".into()))
        }
    };
    FeatureBatch::new(features, source)
}

fn moments(x: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let m = DMatrix::from_row_slice(n, d, &x.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `Tr((A^{1/2} B A^{1/2})^{1/2}) = Tr((A B)^{1/2})`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let sa = psd_sqrt(a);
    let inner = &sa * b * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})` with unbiased
/// covariances.
pub fn frechet(a: &FeatureBatch, b: &FeatureBatch) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    a.check_fid_size()?;
    b.check_fid_size()?;
    let (ma, ca) = moments(&a.features);
    let (mb, cb) = moments(&b.features);
    // both orders, so the result is exactly symmetric
    let cross = 0.5 * (trace_sqrt_product(&ca, &cb) + trace_sqrt_product(&cb, &ca));
    let mean_term = (&ma - &mb).norm_squared();
    Ok((mean_term + (ca.trace() + cb.trace()) - 2.0 * cross).max(0.0))
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// Squared distance from each row to its k-th nearest other row.
fn knn_radii(x: &Tensor, k: usize) -> Vec<f64> {
    let n = x.rows();
    let mut scratch = Vec::with_capacity(n);
    (0..n)
        .map(|i| {
            scratch.clear();
            scratch.extend((0..n).filter(|&j| j != i).map(|j| sq_dist(x.row(i), x.row(j))));
            let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Fraction of `probe` rows that fall inside some `support` row's k-NN ball.
fn coverage(support: &Tensor, radii: &[f64], probe: &Tensor) -> f64 {
    let mut order: Vec<usize> = (0..support.rows()).collect();
    // large balls first: most probes are accepted after a few checks
    order.sort_by(|&a, &b| radii[b].total_cmp(&radii[a]));
    let inside = (0..probe.rows())
        .filter(|&p| order.iter().any(|&s| sq_dist(probe.row(p), support.row(s)) <= radii[s]))
        .count();
    inside as f64 / probe.rows() as f64
}

/// Improved precision/recall: precision is the share of generated points
/// inside the real manifold, recall the share of real points inside the
/// generated manifold.
pub fn precision_recall(real: &FeatureBatch, gen: &FeatureBatch, k: usize) -> Result<(f64, f64)> {
    if real.dim() != gen.dim() {
        return Err(Error::Dimension(format!("feature dims {} vs {}", real.dim(), gen.dim())));
    }
    let limit = real.len().min(gen.len());
    if k == 0 || k >= limit {
        return Err(Error::K { k, limit });
    }
    let precision = coverage(&real.features, &knn_radii(&real.features, k), &gen.features);
    let recall = coverage(&gen.features, &knn_radii(&gen.features, k), &real.features);
    Ok((precision, recall))
}

pub fn report(real: &FeatureBatch, gen: &FeatureBatch, k: usize) -> Result<MetricReport> {
    let fid = frechet(real, gen)?;
    let (precision, recall) = precision_recall(real, gen, k)?;
    Ok(MetricReport { fid, precision, recall, n_real: real.len(), n_gen: gen.len(), k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    fn batch(t: Tensor) -> FeatureBatch {
        FeatureBatch::new(t, FeatureSource::Real).unwrap()
    }

    #[test]
    fn self_distance_is_zero_and_symmetric() {
        let mut rng = RngStream::new(1);
        let a = batch(rng.gaussian(&[200, 4]));
        let b = batch(rng.gaussian(&[150, 4]).map(|v| 2.0 * v + 1.0));
        assert!(frechet(&a, &a).unwrap().abs() < 1e-6);
        assert_eq!(frechet(&a, &b).unwrap(), frechet(&b, &a).unwrap());
    }

    #[test]
    fn too_few_samples() {
        let a = batch(Tensor::zeros(&[4, 4]));
        assert!(matches!(frechet(&a, &a), Err(Error::SampleSize { needed: 5, .. })));
    }

    #[test]
    fn k_must_be_below_sizes() {
        let mut rng = RngStream::new(1);
        let a = batch(rng.gaussian(&[10, 2]));
        let b = batch(rng.gaussian(&[5, 2]));
        assert!(matches!(precision_recall(&a, &b, 5), Err(Error::K { k: 5, limit: 5 })));
        assert!(precision_recall(&a, &b, 0).is_err());
    }

    #[test]
    fn identical_sets_score_one() {
        let mut rng = RngStream::new(2);
        let a = batch(rng.gaussian(&[50, 3]));
        let (p, r) = precision_recall(&a, &a, 3).unwrap();
        assert_eq!((p, r), (1.0, 1.0));
    }

    #[test]
    fn separated_sets_score_zero() {
        let mut rng = RngStream::new(3);
        let real = batch(rng.gaussian(&[50, 2]));
        let gen = batch(rng.gaussian(&[50, 2]).map(|v| v + 100.0));
        let (p, r) = precision_recall(&real, &gen, 3).unwrap();
        assert_eq!((p, r), (0.0, 0.0));
    }
}
