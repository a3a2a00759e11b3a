//! Image datasets with optional discrete factor labels.
//!
//! Pixels are kept as 8-bit source values and mapped to `[-1, 1]` by
//! `v / 127.5 - 1` when fetched.

use std::fs::File;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use ndarray_npy::NpzReader;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ObeError, Result};

pub const DSPRITES_LEN: usize = 737_280;
pub const DSPRITES_CARDINALITIES: [usize; 6] = [1, 3, 6, 40, 32, 32];
pub const DSPRITES_FACTORS: [&str; 6] = ["color", "shape", "scale", "orientation", "pos_x", "pos_y"];

pub fn normalize_pixel(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`normalize_pixel`] for values that came from an 8-bit source.
pub fn denormalize_pixel(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// One image and, for labeled data, its factor values.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub pixels: Array3<f64>,
    pub factors: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
enum PixelStore {
    Bytes(Vec<u8>),
    /// One bit per pixel for binary sources, 0 -> 0 and 1 -> 255.
    Bits(Vec<u64>),
}

/// Images plus an optional `[N, F]` table of integer factor labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorDataset {
    pixels: PixelStore,
    len: usize,
    channels: usize,
    side: usize,
    factors: Option<Array2<usize>>,
    cardinalities: Vec<usize>,
    factor_names: Vec<String>,
}

impl FactorDataset {
    /// Builds a dataset from raw 8-bit pixels laid out `[N, C, n, n]`.
    pub fn from_bytes(
        pixels: Vec<u8>,
        channels: usize,
        side: usize,
        factors: Option<(Array2<usize>, Vec<usize>, Vec<String>)>,
    ) -> Result<Self> {
        let per = channels * side * side;
        if per == 0 || pixels.len() % per != 0 {
            return Err(ObeError::Data(format!(
                "{} pixel bytes do not divide into {channels}x{side}x{side} images",
                pixels.len()
            )));
        }
        let len = pixels.len() / per;
        let mut data = FactorDataset {
            pixels: PixelStore::Bytes(pixels),
            len,
            channels,
            side,
            factors: None,
            cardinalities: Vec::new(),
            factor_names: Vec::new(),
        };
        if let Some((labels, cards, names)) = factors {
            data.set_factors(labels, cards, names)?;
        }
        Ok(data)
    }

    fn set_factors(&mut self, labels: Array2<usize>, cardinalities: Vec<usize>, names: Vec<String>) -> Result<()> {
        if labels.nrows() != self.len || labels.ncols() != cardinalities.len() || names.len() != cardinalities.len() {
            return Err(ObeError::Data(format!(
                "labels {:?}, {} cardinalities and {} names for {} images",
                labels.shape(),
                cardinalities.len(),
                names.len(),
                self.len
            )));
        }
        for (f, col) in labels.columns().into_iter().enumerate() {
            if let Some(bad) = col.iter().find(|&&v| v >= cardinalities[f]) {
                return Err(ObeError::Data(format!(
                    "factor {} has value {bad} but cardinality {}",
                    names[f], cardinalities[f]
                )));
            }
        }
        self.factors = Some(labels);
        self.cardinalities = cardinalities;
        self.factor_names = names;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_labeled(&self) -> bool {
        self.factors.is_some()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn factor_names(&self) -> &[String] {
        &self.factor_names
    }

    pub fn factors(&self) -> Option<&Array2<usize>> {
        self.factors.as_ref()
    }

    pub fn labels(&self, index: usize) -> Option<Vec<usize>> {
        self.factors.as_ref().map(|f| f.row(index).to_vec())
    }

    /// Source byte of pixel `offset` within image `index`.
    pub fn raw_pixel(&self, index: usize, offset: usize) -> u8 {
        let pos = index * self.channels * self.side * self.side + offset;
        match &self.pixels {
            PixelStore::Bytes(b) => b[pos],
            PixelStore::Bits(bits) => {
                if bits[pos / 64] >> (pos % 64) & 1 == 1 {
                    255
                } else {
                    0
                }
            }
        }
    }

    pub fn record(&self, index: usize) -> ImageRecord {
        let (c, n) = (self.channels, self.side);
        let pixels = Array3::from_shape_fn((c, n, n), |(ch, y, x)| {
            normalize_pixel(self.raw_pixel(index, (ch * n + y) * n + x))
        });
        ImageRecord {
            pixels,
            factors: self.labels(index),
        }
    }

    /// Normalized images `[B, C, n, n]` for the given record indices.
    pub fn images(&self, indices: &[usize]) -> ArrayD<f64> {
        let (c, n) = (self.channels, self.side);
        let per = c * n * n;
        let mut out = Array4::zeros((indices.len(), c, n, n));
        for (row, &i) in indices.iter().enumerate() {
            let slot = out.index_axis_mut(Axis(0), row);
            for (offset, v) in slot.into_iter().enumerate().take(per) {
                *v = normalize_pixel(self.raw_pixel(i, offset));
            }
        }
        out.into_dyn()
    }

    /// Label rows `[B, F]` for the given indices.
    pub fn factor_rows(&self, indices: &[usize]) -> Option<Array2<usize>> {
        self.factors.as_ref().map(|f| f.select(Axis(0), indices))
    }

    /// Record indices whose factor `factor` equals `value`.
    pub fn stratum(&self, factor: usize, value: usize) -> Result<Vec<usize>> {
        let labels = self.factors.as_ref().ok_or_else(|| ObeError::Data("dataset has no factor labels".into()))?;
        if factor >= labels.ncols() {
            return Err(ObeError::Data(format!("factor {factor} out of range ({} factors)", labels.ncols())));
        }
        Ok(labels
            .column(factor)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == value)
            .map(|(i, _)| i)
            .collect())
    }

    fn pack_binary(&mut self) {
        if let PixelStore::Bytes(bytes) = &self.pixels {
            let mut bits = vec![0u64; bytes.len().div_ceil(64)];
            for (i, &b) in bytes.iter().enumerate() {
                if b != 0 {
                    bits[i / 64] |= 1 << (i % 64);
                }
            }
            self.pixels = PixelStore::Bits(bits);
        }
    }
}

/// Procedural stand-in for dSprites: a filled square on a dark background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyFactorSpec {
    pub side: usize,
    pub pos_x: usize,
    pub pos_y: usize,
    pub scales: Vec<usize>,
}

impl Default for ToyFactorSpec {
    fn default() -> Self {
        ToyFactorSpec {
            side: 32,
            pos_x: 8,
            pos_y: 8,
            scales: vec![4, 6, 8, 10],
        }
    }
}

impl ToyFactorSpec {
    /// Centre coordinate for position index `i`; positions are spread evenly over the side.
    pub fn center(&self, i: usize, count: usize) -> usize {
        let margin = self.max_scale() / 2 + 4 * self.side / 32;
        let span = self.side - 2 * margin;
        if count <= 1 {
            return self.side / 2;
        }
        margin + i * span / (count - 1)
    }

    fn max_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(0)
    }

    /// Half-open pixel extent `[lo, hi)` of a square of side `scale` around `center`.
    pub fn extent(&self, center: usize, scale: usize) -> (usize, usize) {
        (center - scale / 2, center - scale / 2 + scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pos_x == 0 || self.pos_y == 0 || self.scales.is_empty() {
            return Err(ObeError::config("data.toy", "every factor needs at least one value"));
        }
        let margin = self.max_scale() / 2 + 4 * self.side / 32;
        if 2 * margin >= self.side || self.scales.contains(&0) {
            return Err(ObeError::config("data.toy", format!("squares up to {} do not fit a side of {}", self.max_scale(), self.side)));
        }
        let span = self.side - 2 * margin;
        if span < self.pos_x.max(self.pos_y) - 1 {
            return Err(ObeError::config("data.toy", "too many positions for the side"));
        }
        Ok(())
    }
}

/// Renders every (pos_x, pos_y, scale) combination once, in an order shuffled by `seed`.
pub fn toy_dataset(spec: &ToyFactorSpec, seed: u64) -> Result<FactorDataset> {
    spec.validate()?;
    let n = spec.side;
    let mut combos = Vec::new();
    for x in 0..spec.pos_x {
        for y in 0..spec.pos_y {
            for s in 0..spec.scales.len() {
                combos.push([x, y, s]);
            }
        }
    }
    combos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut pixels = vec![0u8; combos.len() * n * n];
    let mut labels = Array2::zeros((combos.len(), 3));
    for (i, &[x, y, s]) in combos.iter().enumerate() {
        let scale = spec.scales[s];
        let (x0, x1) = spec.extent(spec.center(x, spec.pos_x), scale);
        let (y0, y1) = spec.extent(spec.center(y, spec.pos_y), scale);
        let image = &mut pixels[i * n * n..(i + 1) * n * n];
        for row in y0..y1 {
            image[row * n + x0..row * n + x1].fill(255);
        }
        labels.row_mut(i).assign(&ndarray::arr1(&[x, y, s]));
    }
    let names = vec!["pos_x".to_string(), "pos_y".to_string(), "scale".to_string()];
    FactorDataset::from_bytes(pixels, 1, n, Some((labels, vec![spec.pos_x, spec.pos_y, spec.scales.len()], names)))
}

fn npz_error(path: &Path, e: impl std::fmt::Display) -> ObeError {
    ObeError::Data(format!("{}: {e}", path.display()))
}

/// Reads a dSprites-layout archive (`imgs` `[N, n, n]` binary, `latents_classes` `[N, F]`).
///
/// Cardinalities come from the label table itself, and the row-major stride
/// layout they imply is checked against 100 random records.
pub fn load_factor_npz(path: &Path) -> Result<FactorDataset> {
    let file = File::open(path)?;
    let mut npz = NpzReader::new(file).map_err(|e| npz_error(path, e))?;
    let imgs: Array3<u8> = npz.by_name("imgs").or_else(|_| npz.by_name("imgs.npy")).map_err(|e| npz_error(path, e))?;
    let classes: Array2<i64> = npz
        .by_name("latents_classes")
        .or_else(|_| npz.by_name("latents_classes.npy"))
        .map_err(|e| npz_error(path, e))?;
    let (len, h, w) = imgs.dim();
    if h != w || classes.nrows() != len {
        return Err(ObeError::Data(format!(
            "expected imgs [N, n, n] and latents_classes [N, F], got {:?} and {:?}",
            imgs.shape(),
            classes.shape()
        )));
    }
    if imgs.iter().any(|&v| v > 1) {
        return Err(ObeError::Data("expected binary images with values in {0, 1}".into()));
    }
    if classes.iter().any(|&v| v < 0) {
        return Err(ObeError::Data("negative factor class".into()));
    }
    let labels = classes.mapv(|v| v as usize);
    let cardinalities: Vec<usize> = labels.columns().into_iter().map(|c| c.iter().max().map_or(0, |m| m + 1)).collect();
    check_strides(&labels, &cardinalities, 100)?;
    let names = if cardinalities.len() == DSPRITES_FACTORS.len() {
        DSPRITES_FACTORS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..cardinalities.len()).map(|i| format!("factor{i}")).collect()
    };
    let (pixels, _) = imgs.into_raw_vec_and_offset();
    let mut data = FactorDataset::from_bytes(pixels.into_iter().map(|v| v * 255).collect(), 1, h, Some((labels, cardinalities, names)))?;
    data.pack_binary();
    Ok(data)
}

/// Record `i` must carry the labels obtained by unravelling `i` over the cardinalities.
fn check_strides(labels: &Array2<usize>, cardinalities: &[usize], probes: usize) -> Result<()> {
    let total: usize = cardinalities.iter().product();
    if total != labels.nrows() {
        return Err(ObeError::Data(format!(
            "cardinalities {cardinalities:?} enumerate {total} combinations but there are {} records",
            labels.nrows()
        )));
    }
    let mut strides = vec![1; cardinalities.len()];
    for f in (0..cardinalities.len().saturating_sub(1)).rev() {
        strides[f] = strides[f + 1] * cardinalities[f + 1];
    }
    let rows: Vec<usize> = if labels.nrows() <= probes {
        (0..labels.nrows()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..probes).map(|_| rng.random_range(0..labels.nrows())).collect()
    };
    for i in rows {
        let index: usize = labels.row(i).iter().zip(&strides).map(|(v, s)| v * s).sum();
        if index != i {
            return Err(ObeError::Data(format!("record {i} has labels {:?} which index record {index}", labels.row(i))));
        }
    }
    Ok(())
}

/// Loads the published dSprites archive and asserts its documented size and cardinalities.
pub fn load_dsprites(path: &Path) -> Result<FactorDataset> {
    let data = load_factor_npz(path)?;
    if data.len() != DSPRITES_LEN || data.cardinalities() != DSPRITES_CARDINALITIES || data.side() != 64 {
        return Err(ObeError::Data(format!(
            "expected {DSPRITES_LEN} images of 64x64 with cardinalities {DSPRITES_CARDINALITIES:?}, got {} of {}x{} with {:?}",
            data.len(),
            data.side(),
            data.side(),
            data.cardinalities()
        )));
    }
    Ok(data)
}

/// Loads up to `limit` face images from a directory, center-cropped and resized to `side`. Unlabeled.
pub fn load_celeba(dir: &Path, side: usize, limit: Option<usize>) -> Result<FactorDataset> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("jpg" | "jpeg" | "png")
            )
        })
        .collect();
    paths.sort();
    if let Some(limit) = limit {
        paths.truncate(limit);
    }
    if paths.is_empty() {
        return Err(ObeError::Data(format!("no images found in {}", dir.display())));
    }
    let mut pixels = Vec::with_capacity(paths.len() * 3 * side * side);
    for p in &paths {
        let img = image::open(p).map_err(|e| npz_error(p, e))?.to_rgb8();
        let crop = img.width().min(img.height());
        let (x0, y0) = ((img.width() - crop) / 2, (img.height() - crop) / 2);
        let square = image::imageops::crop_imm(&img, x0, y0, crop, crop).to_image();
        let small = image::imageops::resize(&square, side as u32, side as u32, image::imageops::FilterType::Triangle);
        for ch in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    pixels.push(small.get_pixel(x as u32, y as u32)[ch]);
                }
            }
        }
    }
    FactorDataset::from_bytes(pixels, 3, side, None)
}

/// Shuffled index stream; reshuffled each epoch from `(seed, epoch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStream {
    len: usize,
    batch: usize,
    seed: u64,
    cyclic: bool,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

impl BatchStream {
    pub fn new(len: usize, batch: usize, seed: u64, cyclic: bool) -> Result<Self> {
        Self::resume(len, batch, seed, cyclic, 0, 0)
    }

    /// Restarts a stream at a recorded `(epoch, cursor)` position.
    pub fn resume(len: usize, batch: usize, seed: u64, cyclic: bool, epoch: u64, cursor: usize) -> Result<Self> {
        if batch == 0 || len == 0 {
            return Err(ObeError::config("batch", "batch size and dataset must be non-empty"));
        }
        if batch > len && !cyclic {
            return Err(ObeError::config("batch", format!("batch {batch} exceeds dataset size {len}")));
        }
        if cursor > len {
            return Err(ObeError::config("cursor", format!("cursor {cursor} beyond dataset size {len}")));
        }
        Ok(BatchStream {
            len,
            batch,
            seed,
            cyclic,
            epoch,
            cursor,
            order: epoch_order(len, seed, epoch),
        })
    }

    pub fn position(&self) -> (u64, usize) {
        (self.epoch, self.cursor)
    }

    fn advance_epoch(&mut self) {
        self.epoch += 1;
        self.cursor = 0;
        self.order = epoch_order(self.len, self.seed, self.epoch);
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if !self.cyclic {
            if self.cursor >= self.len {
                return None;
            }
            let end = (self.cursor + self.batch).min(self.len);
            let out = self.order[self.cursor..end].to_vec();
            self.cursor = end;
            return Some(out);
        }
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.cursor == self.len {
                self.advance_epoch();
            }
            let take = (self.batch - out.len()).min(self.len - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        Some(out)
    }
}

/// A fetched batch of images and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub indices: Vec<usize>,
    pub images: ArrayD<f64>,
    pub factors: Option<Array2<usize>>,
    /// Set when the batch had to reuse records.
    pub with_replacement: bool,
}

impl ImageBatch {
    fn fetch(data: &FactorDataset, indices: Vec<usize>, with_replacement: bool) -> Self {
        ImageBatch {
            images: data.images(&indices),
            factors: data.factor_rows(&indices),
            indices,
            with_replacement,
        }
    }
}

/// Iterator of fetched batches over a dataset.
pub struct Batches<'a> {
    data: &'a FactorDataset,
    stream: BatchStream,
}

impl Batches<'_> {
    pub fn position(&self) -> (u64, usize) {
        self.stream.position()
    }
}

impl Iterator for Batches<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        self.stream.next().map(|idx| ImageBatch::fetch(self.data, idx, false))
    }
}

pub fn batches(data: &FactorDataset, batch: usize, seed: u64, cyclic: bool) -> Result<Batches<'_>> {
    Ok(Batches {
        data,
        stream: BatchStream::new(data.len(), batch, seed, cyclic)?,
    })
}

/// Indices of a batch sharing `factors[factor] = value`, drawn uniformly from that stratum.
///
/// Draws without replacement when the stratum is large enough and with
/// replacement otherwise; the second value reports which.
pub fn fixed_factor_indices<R: Rng>(
    data: &FactorDataset,
    factor: usize,
    value: usize,
    batch: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, bool)> {
    let stratum = data.stratum(factor, value)?;
    if stratum.is_empty() {
        return Err(ObeError::Data(format!("no records with factor {factor} = {value}")));
    }
    if stratum.len() >= batch {
        Ok((rand::seq::index::sample(rng, stratum.len(), batch).into_iter().map(|i| stratum[i]).collect(), false))
    } else {
        Ok(((0..batch).map(|_| stratum[rng.random_range(0..stratum.len())]).collect(), true))
    }
}

pub fn fixed_factor_batch(data: &FactorDataset, factor: usize, value: usize, batch: usize, seed: u64) -> Result<ImageBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (indices, with_replacement) = fixed_factor_indices(data, factor, value, batch, &mut rng)?;
    Ok(ImageBatch::fetch(data, indices, with_replacement))
}

/// Flat image tensor helper for callers that hold `[C, n, n]` records.
pub fn stack_records(records: &[ImageRecord]) -> Result<ArrayD<f64>> {
    let first = records.first().ok_or_else(|| ObeError::Data("no records to stack".into()))?;
    let shape = first.pixels.shape().to_vec();
    let mut out = ArrayD::zeros(IxDyn(&[records.len(), shape[0], shape[1], shape[2]]));
    for (i, r) in records.iter().enumerate() {
        if r.pixels.shape() != shape.as_slice() {
            return Err(ObeError::shape("records differ in shape".to_string()));
        }
        out.index_axis_mut(Axis(0), i).assign(&r.pixels.view().into_dyn());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_round_trips_every_byte() {
        for v in 0..=255u8 {
            assert_eq!(denormalize_pixel(normalize_pixel(v)), v);
        }
        assert_eq!(normalize_pixel(0), -1.0);
        assert_eq!(normalize_pixel(255), 1.0);
    }

    #[test]
    fn toy_default_geometry_fits() {
        let spec = ToyFactorSpec::default();
        spec.validate().unwrap();
        let (lo, _) = spec.extent(spec.center(0, 8), 10);
        let (_, hi) = spec.extent(spec.center(7, 8), 10);
        assert!(lo >= 1 && hi <= 31, "{lo}..{hi}");
    }

    #[test]
    fn binary_packing_preserves_pixels() {
        let bytes: Vec<u8> = (0..2 * 8 * 8).map(|i| if i % 3 == 0 { 255 } else { 0 }).collect();
        let plain = FactorDataset::from_bytes(bytes, 1, 8, None).unwrap();
        let mut packed = plain.clone();
        packed.pack_binary();
        assert_eq!(plain.images(&[0, 1]), packed.images(&[0, 1]));
    }

    #[test]
    fn stride_check_detects_misordered_labels() {
        let mut labels = Array2::zeros((6, 2));
        for i in 0..6 {
            labels[[i, 0]] = i / 3;
            labels[[i, 1]] = i % 3;
        }
        check_strides(&labels, &[2, 3], 100).unwrap();
        labels.swap([0, 1], [1, 1]);
        assert!(check_strides(&labels, &[2, 3], 100).is_err());
    }

    #[test]
    fn stream_resume_continues_identically() {
        let mut a = BatchStream::new(10, 4, 3, true).unwrap();
        for _ in 0..5 {
            a.next();
        }
        let (epoch, cursor) = a.position();
        let mut b = BatchStream::resume(10, 4, 3, true, epoch, cursor).unwrap();
        for _ in 0..5 {
            assert_eq!(a.next(), b.next());
        }
    }
}
