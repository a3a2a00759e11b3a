//! Disentanglement scores, correlation curves and a Fréchet quality score.
//!
//! Every scorer takes an explicit seed and owns its random stream, so two
//! calls with the same inputs return the same numbers.

mod curves;
mod factor;
mod quality;
mod report;
mod vp;

use ndarray::{Array2, ArrayD, Axis};

use crate::datasets::FactorDataset;
use crate::error::{ObeError, Result};
use crate::networks::{Generator, LatentSample};
use crate::trainer::{infer_codes, RepresentationSource, TrainState};

pub use curves::{correlation_curves, sweep_grid, total_variation, CurveSet};
pub use factor::{factorvae_score, mig_score, sap_score, FactorScore};
pub use quality::{frechet_distance, gaussian_fit, quality_score, FeatureExtractor, FlattenFeatures, FrechetDistance};
pub use report::{evaluate, Aggregate, AggregateTable, MetricKind, MetricProtocol, MetricReport, SkippedMetric};
pub use vp::{pair_latents, vp_pairs, vp_score, PairLatents, VpClassifier, VpOutcome, VpPairs, VpSettings};

/// Maps dataset records to code vectors `[B, k]`.
pub trait Representation {
    fn code_dim(&self) -> usize;
    fn encode(&self, data: &FactorDataset, indices: &[usize]) -> Result<Array2<f64>>;
}

/// The ground-truth labels as codes, one dimension per factor.
pub struct FactorLabels {
    pub factors: usize,
}

impl FactorLabels {
    pub fn of(data: &FactorDataset) -> Self {
        FactorLabels {
            factors: data.cardinalities().len(),
        }
    }
}

impl Representation for FactorLabels {
    fn code_dim(&self) -> usize {
        self.factors
    }

    fn encode(&self, data: &FactorDataset, indices: &[usize]) -> Result<Array2<f64>> {
        data.factor_rows(indices)
            .map(|rows| rows.mapv(|v| v as f64))
            .ok_or_else(|| ObeError::Metric("identity representation requires factor labels".into()))
    }
}

/// Codes that ignore the image: a fixed pseudo-random value per (record, dimension).
pub struct NoiseRepresentation {
    pub dim: usize,
    pub seed: u64,
}

impl Representation for NoiseRepresentation {
    fn code_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, _data: &FactorDataset, indices: &[usize]) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn((indices.len(), self.dim), |(r, j)| {
            let h = splitmix(self.seed ^ splitmix(indices[r] as u64) ^ splitmix(j as u64).rotate_left(17));
            (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        }))
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Any function of the normalized image batch `[B, C, n, n]`.
pub struct ImageRepresentation<F> {
    pub dim: usize,
    pub chunk: usize,
    pub map: F,
}

impl<F> Representation for ImageRepresentation<F>
where
    F: Fn(&ArrayD<f64>) -> Result<Array2<f64>>,
{
    fn code_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, data: &FactorDataset, indices: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((indices.len(), self.dim));
        for (n, chunk) in indices.chunks(self.chunk.max(1)).enumerate() {
            let codes = (self.map)(&data.images(chunk))?;
            if codes.dim() != (chunk.len(), self.dim) {
                return Err(ObeError::shape(format!(
                    "representation returned {:?} for {} images of a {}-dim code",
                    codes.shape(),
                    chunk.len(),
                    self.dim
                )));
            }
            let start = n * self.chunk.max(1);
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&codes);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ObeError::NonFinite {
                stage: "representation".into(),
                detail: "codes contain NaN or infinity".into(),
            });
        }
        Ok(out)
    }
}

/// Codes inferred by a trained model, through the OBE path or the encoder.
pub fn model_representation(
    state: &TrainState,
    source: RepresentationSource,
) -> ImageRepresentation<impl Fn(&ArrayD<f64>) -> Result<Array2<f64>> + '_> {
    ImageRepresentation {
        dim: state.generator.spec.code_dim,
        chunk: 128,
        map: move |images: &ArrayD<f64>| infer_codes(state, images, source),
    }
}

/// Generators that can be queried with explicit latents.
pub trait ImageGenerator {
    fn noise_dim(&self) -> usize;
    fn code_dim(&self) -> usize;
    /// Images `[B, C, n, n]` for `z: [B, d]`, `c: [B, k]`.
    fn render(&self, z: &Array2<f64>, c: &Array2<f64>) -> Result<ArrayD<f64>>;
}

impl ImageGenerator for Generator {
    fn noise_dim(&self) -> usize {
        self.spec.noise_dim
    }

    fn code_dim(&self) -> usize {
        self.spec.code_dim
    }

    fn render(&self, z: &Array2<f64>, c: &Array2<f64>) -> Result<ArrayD<f64>> {
        let _guard = obe_autodiff::no_grad();
        let sample = LatentSample { z: z.clone(), c: c.clone() };
        Ok(self.generate(&sample)?.value().clone())
    }
}

pub(crate) fn column_std(x: &Array2<f64>) -> Vec<f64> {
    x.std_axis(Axis(0), 0.0).to_vec()
}
