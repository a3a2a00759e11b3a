//! Orthogonal basis expansion.
//!
//! An orthogonal matrix `P` with columns `p_i` induces the rank-one basis
//! `{p_i p_j^T}` of `n x n` images. Expanding an image gives the coefficient
//! grid `C' = P^T X P`, and `X = P C' P^T` reconstructs it. A learned `P` is
//! kept near the orthogonal group by the L1 loss `sum |P P^T - I|`.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use obe_autodiff::Var;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ObeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisMode {
    /// Trained jointly with the generator and re-orthogonalized every step.
    Learned,
    /// Fixed orthonormal DCT-II basis.
    Dct,
}

/// Square matrix whose columns are the 1-D basis vectors `p_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisMatrix {
    entries: Array2<f64>,
    mode: BasisMode,
}

impl BasisMatrix {
    pub fn new(entries: Array2<f64>, mode: BasisMode) -> Result<Self> {
        if entries.nrows() != entries.ncols() || entries.is_empty() {
            return Err(ObeError::shape(format!(
                "basis must be square and non-empty, got {:?}",
                entries.shape()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(ObeError::NonFinite {
                stage: "basis".into(),
                detail: "basis matrix has non-finite entries".into(),
            });
        }
        Ok(BasisMatrix { entries, mode })
    }

    pub fn identity(n: usize) -> Self {
        BasisMatrix {
            entries: Array2::eye(n),
            mode: BasisMode::Learned,
        }
    }

    /// Identity plus i.i.d. Gaussian noise of standard deviation `noise`.
    pub fn perturbed_identity<R: Rng>(n: usize, noise: f64, rng: &mut R) -> Self {
        let mut entries = Array2::eye(n);
        for v in entries.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += noise * e;
        }
        BasisMatrix {
            entries,
            mode: BasisMode::Learned,
        }
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> Array2<f64> {
        self.entries
    }

    pub fn mode(&self) -> BasisMode {
        self.mode
    }

    pub fn side(&self) -> usize {
        self.entries.nrows()
    }

    /// Largest entry of `|P P^T - I|`.
    pub fn gram_deviation(&self) -> f64 {
        gram_residual(&self.entries)
            .iter()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn gram_residual(p: &Array2<f64>) -> Array2<f64> {
    p.dot(&p.t()) - Array2::<f64>::eye(p.nrows())
}

/// Expansion coefficients of one image channel on a basis.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientGrid {
    pub coefficients: Array2<f64>,
}

impl CoefficientGrid {
    pub fn side(&self) -> usize {
        self.coefficients.nrows()
    }
}

fn check_side(what: &str, x: &Array2<f64>, n: usize) -> Result<()> {
    if x.shape() != [n, n] {
        return Err(ObeError::shape(format!(
            "{what} has shape {:?} but the basis side is {n}",
            x.shape()
        )));
    }
    Ok(())
}

/// `C' = P^T X P`.
pub fn expand(image: &Array2<f64>, basis: &BasisMatrix) -> Result<CoefficientGrid> {
    check_side("image", image, basis.side())?;
    let p = basis.entries();
    Ok(CoefficientGrid {
        coefficients: p.t().dot(image).dot(p),
    })
}

/// `X = P C' P^T`.
pub fn reconstruct(grid: &CoefficientGrid, basis: &BasisMatrix) -> Result<Array2<f64>> {
    check_side("coefficient grid", &grid.coefficients, basis.side())?;
    let p = basis.entries();
    Ok(p.dot(&grid.coefficients).dot(&p.t()))
}

/// `sum |P P^T - I|`.
pub fn orthogonality_loss(basis: &BasisMatrix) -> f64 {
    orthogonality_loss_of(basis.entries())
}

pub(crate) fn orthogonality_loss_of(p: &Array2<f64>) -> f64 {
    gram_residual(p).iter().map(|v| v.abs()).sum()
}

/// Subgradient of [`orthogonality_loss`]: `(S + S^T) P` with `S = sign(P P^T - I)`, `sign(0) = 0`.
pub fn orthogonality_grad(p: &Array2<f64>) -> Array2<f64> {
    let s = gram_residual(p).mapv(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    });
    (&s + &s.t()).dot(p)
}

/// Graph form of [`orthogonality_loss`] for use inside a joint objective.
pub fn orthogonality_loss_var(p: &Var) -> Var {
    let n = p.shape()[0];
    let eye = Var::constant(Array2::<f64>::eye(n).into_dyn());
    p.matmul(&p.t()).sub(&eye).abs().sum()
}

/// Classical orthonormal DCT-II matrix `D` with `D[u, x] = s(u) cos((x + 1/2) pi u / n)`.
pub fn dct_matrix(n: usize) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(ObeError::config("side", "DCT basis needs n >= 1"));
    }
    let nf = n as f64;
    Ok(Array2::from_shape_fn((n, n), |(u, x)| {
        let scale = if u == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        scale * ((x as f64 + 0.5) * PI * u as f64 / nf).cos()
    }))
}

/// DCT basis as a [`BasisMatrix`]: column `u` is the `u`-th cosine vector, so
/// `expand` yields the 2-D DCT-II coefficients `D X D^T`.
pub fn dct_basis(n: usize) -> Result<BasisMatrix> {
    let d = dct_matrix(n)?;
    Ok(BasisMatrix {
        entries: d.t().to_owned(),
        mode: BasisMode::Dct,
    })
}

/// Grid positions from low to high frequency: by anti-diagonal `u + v`, then by ascending `u`.
pub fn zigzag_order(n: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = (0..n).flat_map(|u| (0..n).map(move |v| (u, v))).collect();
    order.sort_by_key(|&(u, v)| (u + v, u));
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentOrder {
    Diagonal,
    ZigzagHighFrequency,
    Explicit,
}

/// Which coefficient `c'_{m(i)}` each latent dimension `i` is matched to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoefficientAssignment {
    pub positions: Vec<(usize, usize)>,
    pub ordering: AssignmentOrder,
    pub side: usize,
}

impl CoefficientAssignment {
    /// Positions `(1,1) .. (k,k)`; the mean-intensity term `(0,0)` is skipped.
    pub fn diagonal(n: usize, k: usize) -> Result<Self> {
        if k + 1 > n {
            return Err(ObeError::config(
                "assignment",
                format!("diagonal assignment of {k} codes needs side > {k}, got {n}"),
            ));
        }
        Ok(CoefficientAssignment {
            positions: (1..=k).map(|i| (i, i)).collect(),
            ordering: AssignmentOrder::Diagonal,
            side: n,
        })
    }

    /// The last `k` positions of [`zigzag_order`], in zigzag order.
    pub fn zigzag_high_frequency(n: usize, k: usize) -> Result<Self> {
        if k > n * n {
            return Err(ObeError::config(
                "assignment",
                format!("cannot pick {k} coefficients from a {n}x{n} grid"),
            ));
        }
        let order = zigzag_order(n);
        Ok(CoefficientAssignment {
            positions: order[order.len() - k..].to_vec(),
            ordering: AssignmentOrder::ZigzagHighFrequency,
            side: n,
        })
    }

    pub fn explicit(n: usize, positions: Vec<(usize, usize)>) -> Result<Self> {
        let assignment = CoefficientAssignment {
            positions,
            ordering: AssignmentOrder::Explicit,
            side: n,
        };
        assignment.validate()?;
        Ok(assignment)
    }

    pub fn build(ordering: AssignmentOrder, n: usize, k: usize, explicit: &[(usize, usize)]) -> Result<Self> {
        let a = match ordering {
            AssignmentOrder::Diagonal => Self::diagonal(n, k)?,
            AssignmentOrder::ZigzagHighFrequency => Self::zigzag_high_frequency(n, k)?,
            AssignmentOrder::Explicit => Self::explicit(n, explicit.to_vec())?,
        };
        if a.len() != k {
            return Err(ObeError::config(
                "assignment",
                format!("assignment has {} positions for {k} latent codes", a.len()),
            ));
        }
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &(u, v)) in self.positions.iter().enumerate() {
            if u >= self.side || v >= self.side {
                return Err(ObeError::shape(format!(
                    "assignment position ({u},{v}) out of bounds for side {}",
                    self.side
                )));
            }
            if self.positions[..i].contains(&(u, v)) {
                return Err(ObeError::config("assignment", format!("duplicate position ({u},{v})")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// One-hot gather matrix `[n*n, k]` mapping a flattened grid to the selected coefficients.
    pub fn gather_matrix(&self) -> Array2<f64> {
        let n = self.side;
        let mut m = Array2::zeros((n * n, self.len()));
        for (i, &(u, v)) in self.positions.iter().enumerate() {
            m[[u * n + v, i]] = 1.0;
        }
        m
    }
}

/// Gathers the assigned coefficients in assignment order.
pub fn select_coefficients(grid: &CoefficientGrid, assignment: &CoefficientAssignment) -> Result<Vec<f64>> {
    let n = grid.side();
    if assignment.side != n {
        return Err(ObeError::shape(format!(
            "assignment built for side {} applied to side {n}",
            assignment.side
        )));
    }
    assignment.validate()?;
    Ok(assignment
        .positions
        .iter()
        .map(|&(u, v)| grid.coefficients[[u, v]])
        .collect())
}

/// Per-position weighted sum of channel grids plus a bias (a 1x1 convolution to one channel).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelCombiner {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl ChannelCombiner {
    pub fn identity(channels: usize) -> Self {
        ChannelCombiner {
            weights: Array1::from_elem(channels, 1.0 / channels as f64),
            bias: 0.0,
        }
    }
}

pub fn combine_channels(grids: &[CoefficientGrid], combiner: &ChannelCombiner) -> Result<CoefficientGrid> {
    if grids.len() != combiner.weights.len() {
        return Err(ObeError::shape(format!(
            "{} channel grids for a combiner with {} weights",
            grids.len(),
            combiner.weights.len()
        )));
    }
    let n = grids.first().map(CoefficientGrid::side).unwrap_or(0);
    let mut out = Array2::from_elem((n, n), combiner.bias);
    for (grid, &w) in grids.iter().zip(combiner.weights.iter()) {
        if grid.side() != n {
            return Err(ObeError::shape("channel grids differ in side".to_string()));
        }
        out.scaled_add(w, &grid.coefficients);
    }
    Ok(CoefficientGrid { coefficients: out })
}

/// Batched graph form of [`expand`]: `[B, C, n, n]` images to `[B, C, n, n]` grids.
pub fn expand_var(images: &Var, basis: &Var) -> Var {
    let shape = images.shape().to_vec();
    let (b, c, n) = (shape[0], shape[1], shape[2]);
    let m = b * c;
    let right = images.reshape(&[m * n, n]).matmul(basis).reshape(&[m, n, n]);
    // (XP)^T P = (P^T X P)^T
    right
        .permute(&[0, 2, 1])
        .reshape(&[m * n, n])
        .matmul(basis)
        .reshape(&[m, n, n])
        .permute(&[0, 2, 1])
        .reshape(&[b, c, n, n])
}

/// Batched graph form of [`combine_channels`]: `[B, C, n, n]` to `[B, n, n]`.
pub fn combine_var(grids: &Var, weights: &Var, bias: &Var) -> Var {
    let shape = grids.shape().to_vec();
    let (b, c, n) = (shape[0], shape[1], shape[2]);
    grids
        .mul(&weights.reshape(&[1, c, 1, 1]))
        .sum_to(&[b, 1, n, n])
        .reshape(&[b, n, n])
        .add(bias)
}

/// Batched graph form of [`select_coefficients`]: `[B, n, n]` to `[B, k]`.
pub fn select_var(grid: &Var, gather: &Var) -> Var {
    let shape = grid.shape().to_vec();
    grid.reshape(&[shape[0], shape[1] * shape[2]]).matmul(gather)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceWarning {
    pub final_loss: f64,
    pub max_iters: usize,
}

#[derive(Clone, Debug)]
pub struct Orthogonalized {
    pub basis: BasisMatrix,
    pub final_loss: f64,
    pub iterations: usize,
    pub warning: Option<ConvergenceWarning>,
}

/// Drives `orthogonality_loss` below `eps` by subgradient descent on `P` alone.
///
/// Each step moves along `-(S + S^T) P` with length `min(lr, L / |g|^2)`.
/// The cap `L / |g|^2` is the Polyak step for a target loss of 0; a fixed
/// step on this L1 objective stalls at a floor proportional to the step.
pub fn orthogonalize(basis: &BasisMatrix, eps: f64, max_iters: usize, lr: f64) -> Result<Orthogonalized> {
    if basis.mode() != BasisMode::Learned {
        return Err(ObeError::config("basis", "only a learned basis can be orthogonalized"));
    }
    if !(eps >= 0.0) || !(lr > 0.0) {
        return Err(ObeError::config("epsilon", format!("need eps >= 0 and lr > 0, got eps={eps}, lr={lr}")));
    }
    let mut p = basis.entries().clone();
    let mut loss = orthogonality_loss_of(&p);
    let mut iterations = 0;
    while loss >= eps && iterations < max_iters {
        let g = orthogonality_grad(&p);
        let norm_sq: f64 = g.iter().map(|v| v * v).sum();
        if norm_sq == 0.0 {
            break;
        }
        let step = lr.min(loss / norm_sq);
        p.scaled_add(-step, &g);
        loss = orthogonality_loss_of(&p);
        iterations += 1;
        if !loss.is_finite() {
            return Err(ObeError::NonFinite {
                stage: "orthogonalize".into(),
                detail: format!("orthogonality loss became {loss} after {iterations} steps"),
            });
        }
    }
    let warning = (loss >= eps).then_some(ConvergenceWarning {
        final_loss: loss,
        max_iters,
    });
    Ok(Orthogonalized {
        basis: BasisMatrix {
            entries: p,
            mode: BasisMode::Learned,
        },
        final_loss: loss,
        iterations,
        warning,
    })
}
