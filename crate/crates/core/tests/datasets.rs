use std::collections::HashSet;
use std::fs::File;

use ndarray::{Array2, Array3, Axis};
use ndarray_npy::NpzWriter;
use obe_core::datasets::*;

fn centroid_x(data: &FactorDataset, index: usize) -> f64 {
    let img = data.images(&[index]);
    let (mut sum, mut mass) = (0.0, 0.0);
    for ((_, _, _, col), &v) in img.into_dimensionality::<ndarray::Ix4>().unwrap().indexed_iter() {
        let w = (v + 1.0) / 2.0;
        sum += w * col as f64;
        mass += w;
    }
    sum / mass
}

#[test]
fn toy_images_are_distinct_and_fully_factorial() {
    let spec = ToyFactorSpec::default();
    let data = toy_dataset(&spec, 3).unwrap();
    assert_eq!(data.len(), 8 * 8 * 4);
    assert_eq!(data.cardinalities(), [8, 8, 4]);
    assert_eq!(data.factor_names(), ["pos_x", "pos_y", "scale"]);
    let labels: HashSet<Vec<usize>> = (0..data.len()).map(|i| data.labels(i).unwrap()).collect();
    assert_eq!(labels.len(), data.len());
    let images: HashSet<Vec<u8>> = (0..data.len())
        .map(|i| (0..32 * 32).map(|o| data.raw_pixel(i, o)).collect())
        .collect();
    assert_eq!(images.len(), data.len());

    let img = data.images(&[0]);
    assert!(img.iter().all(|&v| v == -1.0 || v == 1.0));
    assert_eq!(img.shape(), [1, 1, 32, 32]);
}

#[test]
fn square_area_follows_the_scale_factor() {
    let spec = ToyFactorSpec::default();
    let data = toy_dataset(&spec, 0).unwrap();
    for i in 0..data.len() {
        let s = data.labels(i).unwrap()[2];
        let lit = (0..32 * 32).filter(|&o| data.raw_pixel(i, o) == 255).count();
        assert_eq!(lit, spec.scales[s] * spec.scales[s]);
    }
}

#[test]
fn pos_x_moves_the_centroid_right() {
    let data = toy_dataset(&ToyFactorSpec::default(), 1).unwrap();
    let find = |x: usize| (0..data.len()).find(|&i| data.labels(i).unwrap() == [x, 4, 2]).unwrap();
    let xs: Vec<f64> = (0..8).map(|x| centroid_x(&data, find(x))).collect();
    assert!(xs.windows(2).all(|w| w[1] > w[0]), "{xs:?}");
}

#[test]
fn seed_changes_only_the_order() {
    let a = toy_dataset(&ToyFactorSpec::default(), 0).unwrap();
    let b = toy_dataset(&ToyFactorSpec::default(), 1).unwrap();
    assert_ne!(a, b);
    let key = |d: &FactorDataset| {
        let mut rows: Vec<(Vec<usize>, Vec<u8>)> = (0..d.len())
            .map(|i| (d.labels(i).unwrap(), (0..32 * 32).map(|o| d.raw_pixel(i, o)).collect()))
            .collect();
        rows.sort();
        rows
    };
    assert_eq!(key(&a), key(&b));
    assert_eq!(a, toy_dataset(&ToyFactorSpec::default(), 0).unwrap());
}

#[test]
fn oversized_toy_specs_are_rejected() {
    let spec = ToyFactorSpec {
        side: 16,
        pos_x: 4,
        pos_y: 4,
        scales: vec![14],
    };
    assert!(toy_dataset(&spec, 0).is_err());
    assert!(toy_dataset(&ToyFactorSpec { pos_x: 0, ..Default::default() }, 0).is_err());
}

/// A tiny archive in the dSprites layout: 2 x 3 x 2 factors over 4x4 binary images.
fn write_npz(path: &std::path::Path, shuffle_rows: bool) -> (Array3<u8>, Array2<i64>) {
    let cards = [2usize, 3, 2];
    let n: usize = cards.iter().product();
    let mut classes = Array2::<i64>::zeros((n, 3));
    let mut imgs = Array3::<u8>::zeros((n, 4, 4));
    for i in 0..n {
        let (a, b, c) = (i / 6, (i / 2) % 3, i % 2);
        classes.row_mut(i).assign(&ndarray::arr1(&[a as i64, b as i64, c as i64]));
        imgs[[i, a, b]] = 1;
        imgs[[i, 3, c + 2]] = 1;
    }
    if shuffle_rows {
        classes.swap([0, 0], [n - 1, 0]);
    }
    let mut npz = NpzWriter::new(File::create(path).unwrap());
    npz.add_array("imgs", &imgs).unwrap();
    npz.add_array("latents_classes", &classes).unwrap();
    npz.finish().unwrap();
    (imgs, classes)
}

#[test]
fn npz_archives_load_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.npz");
    let (imgs, classes) = write_npz(&path, false);
    let data = load_factor_npz(&path).unwrap();
    assert_eq!(data.len(), 12);
    assert_eq!(data.side(), 4);
    assert_eq!(data.channels(), 1);
    assert_eq!(data.cardinalities(), [2, 3, 2]);
    for i in 0..12 {
        let want: Vec<usize> = classes.row(i).iter().map(|&v| v as usize).collect();
        assert_eq!(data.labels(i).unwrap(), want);
        let img = data.images(&[i]);
        for ((r, c), &v) in imgs.index_axis(Axis(0), i).indexed_iter() {
            assert_eq!(img[[0, 0, r, c]], if v == 1 { 1.0 } else { -1.0 });
        }
    }
}

#[test]
fn npz_with_broken_stride_order_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.npz");
    write_npz(&path, true);
    assert!(load_factor_npz(&path).is_err());
    assert!(load_factor_npz(&dir.path().join("missing.npz")).is_err());
}

#[test]
fn an_epoch_covers_every_record_once() {
    let data = toy_dataset(&ToyFactorSpec::default(), 0).unwrap();
    let mut seen = vec![0; data.len()];
    let mut sizes = Vec::new();
    for batch in batches(&data, 48, 5, false).unwrap() {
        sizes.push(batch.indices.len());
        assert_eq!(batch.images.shape()[0], batch.indices.len());
        assert_eq!(batch.factors.as_ref().unwrap().nrows(), batch.indices.len());
        for &i in &batch.indices {
            seen[i] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert_eq!(sizes.iter().sum::<usize>(), data.len());
    assert_eq!(*sizes.last().unwrap(), data.len() % 48);
}

#[test]
fn cyclic_streams_resume_where_they_stopped() {
    let mut full = BatchStream::new(10, 4, 2, true).unwrap();
    let all: Vec<Vec<usize>> = (0..6).map(|_| full.next().unwrap()).collect();
    let mut head = BatchStream::new(10, 4, 2, true).unwrap();
    head.next();
    head.next();
    head.next();
    let (epoch, cursor) = head.position();
    let mut tail = BatchStream::resume(10, 4, 2, true, epoch, cursor).unwrap();
    let rest: Vec<Vec<usize>> = (0..3).map(|_| tail.next().unwrap()).collect();
    assert_eq!(rest, all[3..]);
    // each epoch of ten indices is a permutation
    let flat: Vec<usize> = all.concat();
    for epoch in flat.chunks(10).take(2) {
        let set: HashSet<_> = epoch.iter().collect();
        assert_eq!(set.len(), 10);
    }
    assert!(BatchStream::new(3, 4, 0, false).is_err());
}

#[test]
fn fixed_factor_batches_share_the_factor() {
    let data = toy_dataset(&ToyFactorSpec::default(), 0).unwrap();
    let batch = fixed_factor_batch(&data, 2, 1, 64, 3).unwrap();
    assert!(!batch.with_replacement);
    assert!(batch.factors.unwrap().column(2).iter().all(|&v| v == 1));
    let distinct: HashSet<_> = batch.indices.iter().collect();
    assert_eq!(distinct.len(), 64);

    // stratum of 32 records cannot fill 100 without replacement
    let big = fixed_factor_batch(&data, 0, 0, 100, 3).unwrap();
    assert!(big.with_replacement);
    assert!(big.factors.unwrap().column(0).iter().all(|&v| v == 0));
    assert!(fixed_factor_batch(&data, 0, 99, 4, 0).is_err());
    assert!(fixed_factor_batch(&data, 7, 0, 4, 0).is_err());
}

#[test]
fn pixel_mapping_round_trips() {
    for v in 0..=255u8 {
        let x = normalize_pixel(v);
        assert!((-1.0..=1.0).contains(&x));
        assert_eq!(denormalize_pixel(x), v);
    }
}
