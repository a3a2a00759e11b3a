use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{column_std, Representation};
use crate::datasets::{fixed_factor_indices, FactorDataset};
use crate::error::{ObeError, Result};

const COLLAPSED_STD: f64 = 1e-6;

/// A score with its per-factor breakdown; excluded factors are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorScore {
    pub score: f64,
    pub per_factor: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

fn labels(data: &FactorDataset) -> Result<&Array2<usize>> {
    data.factors()
        .ok_or_else(|| ObeError::Metric("requires factor labels".into()))
}

fn sample_indices(rng: &mut ChaCha8Rng, len: usize, samples: usize) -> Result<Vec<usize>> {
    if len == 0 || samples == 0 {
        return Err(ObeError::Metric("no samples to score".into()));
    }
    Ok((0..samples).map(|_| rng.random_range(0..len)).collect())
}

/// Majority-vote accuracy of "which factor was fixed" from the lowest-variance normalized dimension.
///
/// Per-dimension scales come from the whole dataset, or from `std_samples`
/// random records when given. Dimensions whose scale is below 1e-6 take no part.
pub fn factorvae_score(
    rep: &dyn Representation,
    data: &FactorDataset,
    train_votes: usize,
    eval_votes: usize,
    batch: usize,
    std_samples: Option<usize>,
    seed: u64,
) -> Result<FactorScore> {
    let table = labels(data)?;
    let cards = data.cardinalities();
    let candidates: Vec<usize> = (0..cards.len()).filter(|&f| cards[f] >= 2).collect();
    if candidates.len() < 2 {
        return Err(ObeError::Metric(format!(
            "needs at least 2 factors with more than one value, found {}",
            candidates.len()
        )));
    }
    if batch < 2 || train_votes == 0 || eval_votes == 0 {
        return Err(ObeError::config("metrics.factorvae", "batch >= 2 and non-zero vote counts required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let pool: Vec<usize> = match std_samples {
        Some(n) if n < data.len() => rand::seq::index::sample(&mut rng, data.len(), n).into_vec(),
        _ => (0..data.len()).collect(),
    };
    let scale = column_std(&rep.encode(data, &pool)?);
    let kept: Vec<usize> = (0..scale.len()).filter(|&j| scale[j] >= COLLAPSED_STD).collect();
    if kept.is_empty() {
        return Err(ObeError::Metric(format!(
            "all {} representation dimensions collapsed (std < {COLLAPSED_STD})",
            scale.len()
        )));
    }
    let mut warnings = Vec::new();
    if kept.len() < scale.len() {
        warnings.push(format!("{} collapsed dimensions ignored", scale.len() - kept.len()));
    }
    let present: Vec<Vec<usize>> = (0..cards.len())
        .map(|f| {
            let mut seen = vec![false; cards[f]];
            table.column(f).iter().for_each(|&v| seen[v] = true);
            (0..cards[f]).filter(|&v| seen[v]).collect()
        })
        .collect();

    let vote = |rng: &mut ChaCha8Rng| -> Result<(usize, usize)> {
        let f = candidates[rng.random_range(0..candidates.len())];
        let v = present[f][rng.random_range(0..present[f].len())];
        let (idx, _) = fixed_factor_indices(data, f, v, batch, rng)?;
        let codes = rep.encode(data, &idx)?;
        let mut best = (f64::INFINITY, 0);
        for (slot, &j) in kept.iter().enumerate() {
            let var = codes.column(j).mapv(|x| x / scale[j]).var(1.0);
            if var < best.0 {
                best = (var, slot);
            }
        }
        Ok((best.1, f))
    };

    let mut counts = Array2::<usize>::zeros((kept.len(), cards.len()));
    for _ in 0..train_votes {
        let (dim, f) = vote(&mut rng)?;
        counts[[dim, f]] += 1;
    }
    // ties and unseen dimensions go to the lowest factor index
    let majority: Vec<usize> = counts
        .axis_iter(Axis(0))
        .map(|row| {
            let top = row.iter().copied().max().unwrap_or(0);
            row.iter().position(|&c| c == top).unwrap_or(0)
        })
        .collect();

    let mut hits = vec![(0usize, 0usize); cards.len()];
    for _ in 0..eval_votes {
        let (dim, f) = vote(&mut rng)?;
        hits[f].1 += 1;
        if majority[dim] == f {
            hits[f].0 += 1;
        }
    }
    let correct: usize = hits.iter().map(|h| h.0).sum();
    Ok(FactorScore {
        score: correct as f64 / eval_votes as f64,
        per_factor: hits
            .iter()
            .map(|&(c, n)| (n > 0).then(|| c as f64 / n as f64))
            .collect(),
        warnings,
    })
}

/// Equal-mass bin index for every entry of `x`.
///
/// Edges are the order statistics at `floor(N b / bins)`; a value's bin is the
/// number of edges not above it, which depends only on rank.
fn equal_mass_bins(x: &[f64], bins: usize) -> Vec<usize> {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let edges: Vec<f64> = (1..bins).map(|b| sorted[(n * b / bins).min(n - 1)]).collect();
    x.iter().map(|v| edges.partition_point(|e| e <= v)).collect()
}

fn entropy(labels: &[usize], card: usize) -> f64 {
    let mut counts = vec![0usize; card];
    labels.iter().for_each(|&v| counts[v] += 1);
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(a: &[usize], a_card: usize, b: &[usize], b_card: usize) -> f64 {
    let mut joint = Array2::<f64>::zeros((a_card, b_card));
    for (&x, &y) in a.iter().zip(b) {
        joint[[x, y]] += 1.0;
    }
    joint /= a.len() as f64;
    let pa = joint.sum_axis(Axis(1));
    let pb = joint.sum_axis(Axis(0));
    let mut mi = 0.0;
    for ((x, y), &p) in joint.indexed_iter() {
        if p > 0.0 {
            mi += p * (p / (pa[x] * pb[y])).ln();
        }
    }
    mi.max(0.0)
}

/// Mean over factors of the entropy-normalized gap between the two largest code-factor informations.
pub fn mig_score(rep: &dyn Representation, data: &FactorDataset, bins: usize, samples: usize, seed: u64) -> Result<FactorScore> {
    let table = labels(data)?;
    if bins < 2 {
        return Err(ObeError::config("metrics.mig_bins", "at least 2 bins required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let idx = sample_indices(&mut rng, data.len(), samples)?;
    let codes = rep.encode(data, &idx)?;
    let rows = table.select(Axis(0), &idx);
    let binned: Vec<Vec<usize>> = codes
        .axis_iter(Axis(1))
        .map(|col| equal_mass_bins(&col.to_vec(), bins))
        .collect();

    let mut per_factor = Vec::new();
    let mut warnings = Vec::new();
    for (f, &card) in data.cardinalities().iter().enumerate() {
        let truth = rows.column(f).to_vec();
        let h = entropy(&truth, card);
        if h <= 0.0 {
            log::warn!("mig: factor {} has zero entropy and is excluded", data.factor_names()[f]);
            warnings.push(format!("factor {} has zero entropy", data.factor_names()[f]));
            per_factor.push(None);
            continue;
        }
        let mut mi: Vec<f64> = binned.iter().map(|b| mutual_information(b, bins, &truth, card)).collect();
        mi.sort_by(|a, b| b.total_cmp(a));
        let second = mi.get(1).copied().unwrap_or(0.0);
        per_factor.push(Some((mi.first().copied().unwrap_or(0.0) - second) / h));
    }
    finish(per_factor, warnings, "mig")
}

/// Mean over factors of the gap between the best and second-best per-dimension linear R².
pub fn sap_score(rep: &dyn Representation, data: &FactorDataset, samples: usize, seed: u64) -> Result<FactorScore> {
    let table = labels(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let idx = sample_indices(&mut rng, data.len(), samples)?;
    let codes = rep.encode(data, &idx)?;
    let rows = table.select(Axis(0), &idx).mapv(|v| v as f64);

    let centered = |col: ndarray::ArrayView1<f64>| {
        let m = col.mean().unwrap_or(0.0);
        col.mapv(|v| v - m)
    };
    let dims: Vec<_> = codes.axis_iter(Axis(1)).map(centered).collect();
    let mut per_factor = Vec::new();
    let mut warnings = Vec::new();
    for f in 0..rows.ncols() {
        let y = centered(rows.column(f));
        let vy = y.dot(&y);
        if vy <= 0.0 {
            warnings.push(format!("factor {} is constant", data.factor_names()[f]));
            per_factor.push(None);
            continue;
        }
        let mut r2: Vec<f64> = dims
            .iter()
            .map(|x| {
                let vx = x.dot(x);
                if vx <= 1e-12 * x.len() as f64 {
                    0.0
                } else {
                    let c = x.dot(&y);
                    (c * c / (vx * vy)).min(1.0)
                }
            })
            .collect();
        r2.sort_by(|a, b| b.total_cmp(a));
        per_factor.push(Some(r2.first().copied().unwrap_or(0.0) - r2.get(1).copied().unwrap_or(0.0)));
    }
    finish(per_factor, warnings, "sap")
}

fn finish(per_factor: Vec<Option<f64>>, warnings: Vec<String>, name: &str) -> Result<FactorScore> {
    let valid: Vec<f64> = per_factor.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(ObeError::Metric(format!("{name}: every factor was excluded")));
    }
    Ok(FactorScore {
        score: valid.iter().sum::<f64>() / valid.len() as f64,
        per_factor,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_follow_rank_only() {
        let x = [0.3, -1.0, 2.0, 0.1, 5.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        assert_eq!(equal_mass_bins(&x, 3), equal_mass_bins(&y, 3));
        assert_eq!(equal_mass_bins(&x, 3), vec![1, 0, 1, 0, 2, 2]);
    }

    #[test]
    fn repeated_values_share_a_bin() {
        let x = [1.0, 1.0, 1.0, 2.0, 2.0, 2.0];
        let b = equal_mass_bins(&x, 4);
        assert_eq!(b[0], b[2]);
        assert_ne!(b[2], b[3]);
    }

    #[test]
    fn information_of_a_copy_is_its_entropy() {
        let a = [0, 1, 2, 3, 0, 1, 2, 3];
        let mi = mutual_information(&a, 4, &a, 4);
        assert!((mi - entropy(&a, 4)).abs() < 1e-12);
        assert!((mi - 4f64.ln()).abs() < 1e-12);
    }
}
