use ndarray::{Array1, Array2, Axis};
use obe_autodiff::{no_grad, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ImageGenerator;
use crate::error::{ObeError, Result};
use crate::networks::sample_latent_with;
use crate::objectives::ObeModule;

/// Selected coefficients `c'` recorded while one code dimension sweeps `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSet {
    pub dim: usize,
    pub sweep: Vec<f64>,
    /// `[steps, k]`; column `j` is the curve of coefficient `m(j)`.
    pub values: Array2<f64>,
    /// Total variation of each curve after scaling by `|a_j|`.
    pub variation: Vec<f64>,
    /// Matched variation over the largest unmatched one; `None` if every unmatched curve is flat.
    pub selectivity: Option<f64>,
}

/// `steps` evenly spaced points on `[-1, 1]`; a single step sits at 0.
pub fn sweep_grid(steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => Array1::linspace(-1.0, 1.0, steps).to_vec(),
    }
}

pub fn total_variation(curve: &[f64]) -> f64 {
    curve.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

pub fn correlation_curves(
    generator: &dyn ImageGenerator,
    obe: &ObeModule,
    dim: usize,
    steps: usize,
    seed: u64,
) -> Result<CurveSet> {
    let k = generator.code_dim();
    if dim >= k {
        return Err(ObeError::config("dim", format!("code dimension {dim} out of range (k = {k})")));
    }
    if obe.code_dim() != k {
        return Err(ObeError::shape(format!("OBE selects {} coefficients for a {k}-dim code", obe.code_dim())));
    }
    if steps == 0 {
        return Err(ObeError::config("steps", "at least one sweep value required"));
    }
    let sweep = sweep_grid(steps);
    let base = sample_latent_with(1, generator.noise_dim(), k, &mut ChaCha8Rng::seed_from_u64(seed));
    let z = base.z.broadcast((steps, generator.noise_dim())).expect("row").to_owned();
    let mut c = base.c.broadcast((steps, k)).expect("row").to_owned();
    c.column_mut(dim).assign(&Array1::from(sweep.clone()));

    let images = generator.render(&z, &c)?;
    let values = {
        let _guard = no_grad();
        obe.coefficients(&Var::constant(images))?
            .value()
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| ObeError::shape(e.to_string()))?
    };
    let scale: Vec<f64> = obe.scale.value().iter().map(|a| a.abs()).collect();
    let variation: Vec<f64> = values
        .axis_iter(Axis(1))
        .zip(&scale)
        .map(|(col, a)| a * total_variation(&col.to_vec()))
        .collect();
    let other = (0..k)
        .filter(|&j| j != dim)
        .map(|j| variation[j])
        .fold(0.0, f64::max);
    Ok(CurveSet {
        dim,
        sweep,
        values,
        selectivity: (other > 0.0).then(|| variation[dim] / other),
        variation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints() {
        assert_eq!(sweep_grid(1), vec![0.0]);
        assert_eq!(sweep_grid(3), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn variation_of_a_zigzag() {
        assert_eq!(total_variation(&[0.0, 1.0, -1.0, 0.5]), 4.5);
        assert_eq!(total_variation(&[2.0]), 0.0);
    }
}
