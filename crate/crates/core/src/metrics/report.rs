use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{factorvae_score, mig_score, quality_score, sap_score, vp_score, FlattenFeatures, ImageGenerator, Representation, VpSettings};
use crate::datasets::FactorDataset;
use crate::error::{ObeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Factorvae,
    Mig,
    Sap,
    Vp,
    Quality,
}

impl MetricKind {
    pub const DISENTANGLEMENT: [MetricKind; 4] = [MetricKind::Factorvae, MetricKind::Mig, MetricKind::Sap, MetricKind::Vp];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Factorvae => "factorvae",
            MetricKind::Mig => "mig",
            MetricKind::Sap => "sap",
            MetricKind::Vp => "vp",
            MetricKind::Quality => "quality",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = ObeError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "factorvae" => MetricKind::Factorvae,
            "mig" => MetricKind::Mig,
            "sap" => MetricKind::Sap,
            "vp" => MetricKind::Vp,
            "quality" | "fid" => MetricKind::Quality,
            other => return Err(ObeError::config("metrics", format!("unknown metric '{other}'"))),
        })
    }
}

/// Protocol constants; every report carries a copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricProtocol {
    pub factorvae_train_votes: usize,
    pub factorvae_eval_votes: usize,
    pub factorvae_batch: usize,
    /// Records used for the per-dimension scale; all of them when unset.
    pub factorvae_std_samples: Option<usize>,
    pub mig_bins: usize,
    pub mig_samples: usize,
    pub sap_samples: usize,
    pub vp: VpSettings,
    pub quality_samples: usize,
}

impl Default for MetricProtocol {
    fn default() -> Self {
        MetricProtocol {
            factorvae_train_votes: 800,
            factorvae_eval_votes: 100,
            factorvae_batch: 64,
            factorvae_std_samples: None,
            mig_bins: 20,
            mig_samples: 10_000,
            sap_samples: 10_000,
            vp: VpSettings::default(),
            quality_samples: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedMetric {
    pub metric: MetricKind,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_id: String,
    pub seed: u64,
    pub factorvae: Option<f64>,
    pub mig: Option<f64>,
    pub sap: Option<f64>,
    pub vp: Option<f64>,
    /// Fréchet distance on raw pixels; not bounded.
    pub quality: Option<f64>,
    pub protocol: MetricProtocol,
    pub skipped: Vec<SkippedMetric>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn new(model_id: impl Into<String>, seed: u64, protocol: MetricProtocol) -> Self {
        MetricReport {
            model_id: model_id.into(),
            seed,
            factorvae: None,
            mig: None,
            sap: None,
            vp: None,
            quality: None,
            protocol,
            skipped: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn get(&self, kind: MetricKind) -> Option<f64> {
        match kind {
            MetricKind::Factorvae => self.factorvae,
            MetricKind::Mig => self.mig,
            MetricKind::Sap => self.sap,
            MetricKind::Vp => self.vp,
            MetricKind::Quality => self.quality,
        }
    }

    fn set(&mut self, kind: MetricKind, value: f64) {
        let slot = match kind {
            MetricKind::Factorvae => &mut self.factorvae,
            MetricKind::Mig => &mut self.mig,
            MetricKind::Sap => &mut self.sap,
            MetricKind::Vp => &mut self.vp,
            MetricKind::Quality => &mut self.quality,
        };
        *slot = Some(value);
    }
}

/// Runs the requested metrics; a metric whose inputs are missing or that fails is listed in `skipped`.
pub fn evaluate(
    kinds: &[MetricKind],
    protocol: &MetricProtocol,
    rep: Option<&dyn Representation>,
    data: &FactorDataset,
    generator: Option<&dyn ImageGenerator>,
    seed: u64,
    model_id: &str,
) -> MetricReport {
    let mut report = MetricReport::new(model_id, seed, protocol.clone());
    for &kind in kinds {
        let needs_labels = matches!(kind, MetricKind::Factorvae | MetricKind::Mig | MetricKind::Sap);
        let missing = if needs_labels && !data.is_labeled() {
            Some("requires factor labels")
        } else if needs_labels && rep.is_none() {
            Some("requires a representation")
        } else if matches!(kind, MetricKind::Vp | MetricKind::Quality) && generator.is_none() {
            Some("requires a generator")
        } else {
            None
        };
        if let Some(reason) = missing {
            report.skipped.push(SkippedMetric {
                metric: kind,
                reason: reason.into(),
            });
            continue;
        }
        let outcome = match kind {
            MetricKind::Factorvae => factorvae_score(
                rep.expect("checked"),
                data,
                protocol.factorvae_train_votes,
                protocol.factorvae_eval_votes,
                protocol.factorvae_batch,
                protocol.factorvae_std_samples,
                seed,
            )
            .map(|s| (s.score, s.warnings)),
            MetricKind::Mig => {
                mig_score(rep.expect("checked"), data, protocol.mig_bins, protocol.mig_samples, seed).map(|s| (s.score, s.warnings))
            }
            MetricKind::Sap => sap_score(rep.expect("checked"), data, protocol.sap_samples, seed).map(|s| (s.score, s.warnings)),
            MetricKind::Vp => vp_score(generator.expect("checked"), &protocol.vp, seed).map(|o| {
                let notes = if o.retried { vec![format!("vp retried at lr {}", o.lr)] } else { Vec::new() };
                (o.score, notes)
            }),
            MetricKind::Quality => quality_against(generator.expect("checked"), data, protocol.quality_samples, seed),
        };
        match outcome {
            Ok((score, warnings)) => {
                report.set(kind, score);
                report.warnings.extend(warnings.into_iter().map(|w| format!("{kind}: {w}")));
            }
            Err(e) => report.skipped.push(SkippedMetric {
                metric: kind,
                reason: format!("failed: {e}"),
            }),
        }
    }
    report
}

fn quality_against(generator: &dyn ImageGenerator, data: &FactorDataset, samples: usize, seed: u64) -> Result<(f64, Vec<String>)> {
    let n = samples.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(6);
    let idx = rand::seq::index::sample(&mut rng, data.len(), n).into_vec();
    let real = data.images(&idx);
    let lat = crate::networks::sample_latent_with(n, generator.noise_dim(), generator.code_dim(), &mut rng);
    let fake = generator.render(&lat.z, &lat.c)?;
    let d = quality_score(&real, &fake, &FlattenFeatures)?;
    let notes = if d.clamped { vec!["negative eigenvalues clamped".to_string()] } else { Vec::new() };
    Ok((d.distance, notes))
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Aggregate { mean, std, count: n })
    }
}

/// Rows of `mean ± std` cells; `-` marks a gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub metrics: Vec<MetricKind>,
    pub rows: Vec<(String, Vec<Option<Aggregate>>)>,
}

const DIGITS: usize = 6;

impl AggregateTable {
    /// One row per distinct `model_id`, in first-seen order.
    pub fn from_reports(reports: &[MetricReport], metrics: &[MetricKind]) -> Self {
        let mut ids: Vec<&str> = Vec::new();
        for r in reports {
            if !ids.contains(&r.model_id.as_str()) {
                ids.push(&r.model_id);
            }
        }
        let rows = ids
            .into_iter()
            .map(|id| {
                let cells = metrics
                    .iter()
                    .map(|&m| {
                        let values: Vec<f64> = reports.iter().filter(|r| r.model_id == id).filter_map(|r| r.get(m)).collect();
                        Aggregate::of(&values)
                    })
                    .collect();
                (id.to_string(), cells)
            })
            .collect();
        AggregateTable {
            metrics: metrics.to_vec(),
            rows,
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::from("| model |");
        for m in &self.metrics {
            out.push_str(&format!(" {m} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(self.metrics.len()));
        out.push('\n');
        for (id, cells) in &self.rows {
            out.push_str(&format!("| {id} |"));
            for cell in cells {
                match cell {
                    Some(a) => out.push_str(&format!(" {:.DIGITS$} ± {:.DIGITS$} (n={}) |", a.mean, a.std, a.count)),
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: &str| ObeError::Metric(format!("malformed table line: {line}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| ObeError::Metric("empty table".into()))?;
        let head = cells(header).ok_or_else(|| bad(header))?;
        if head.first().map(String::as_str) != Some("model") {
            return Err(bad(header));
        }
        let metrics = head[1..].iter().map(|s| s.parse()).collect::<Result<Vec<MetricKind>>>()?;
        lines.next().filter(|l| l.starts_with("|---")).ok_or_else(|| bad("missing separator"))?;
        let mut rows = Vec::new();
        for line in lines {
            let fields = cells(line).ok_or_else(|| bad(line))?;
            if fields.len() != metrics.len() + 1 {
                return Err(bad(line));
            }
            let parsed = fields[1..]
                .iter()
                .map(|f| parse_cell(f).ok_or_else(|| bad(line)))
                .collect::<Result<Vec<_>>>()?;
            rows.push((fields[0].clone(), parsed));
        }
        Ok(AggregateTable { metrics, rows })
    }
}

fn cells(line: &str) -> Option<Vec<String>> {
    let inner = line.strip_prefix('|')?.strip_suffix('|')?;
    Some(inner.split('|').map(|s| s.trim().to_string()).collect())
}

fn parse_cell(cell: &str) -> Option<Option<Aggregate>> {
    if cell == "-" {
        return Some(None);
    }
    let (mean, rest) = cell.split_once(" ± ")?;
    let (std, count) = rest.split_once(" (n=")?;
    Some(Some(Aggregate {
        mean: mean.parse().ok()?,
        std: std.parse().ok()?,
        count: count.strip_suffix(')')?.parse().ok()?,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_uses_sample_std() {
        let a = Aggregate::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.mean, 2.0);
        assert_eq!(a.std, 1.0);
        assert_eq!(Aggregate::of(&[0.5]).unwrap().std, 0.0);
        assert!(Aggregate::of(&[]).is_none());
    }

    #[test]
    fn metric_names_parse() {
        for m in [MetricKind::Factorvae, MetricKind::Mig, MetricKind::Sap, MetricKind::Vp, MetricKind::Quality] {
            assert_eq!(m.name().parse::<MetricKind>().unwrap(), m);
        }
        assert!("beta".parse::<MetricKind>().is_err());
    }
}
