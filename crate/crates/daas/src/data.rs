//! Datasets: a parametric synthetic benchmark, a binary batch-file reader
//! and writer, and the named splits the pipeline consumes.
//!
//! Images are stored channel-first with raw values in [0, 1]; per-channel
//! normalization statistics are computed over the full training pool and
//! carried alongside, so augmentation always sees raw pixels and
//! normalization happens last. The search splits are a seeded 50/50
//! partition of the training pool; evaluation trains on the whole pool.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::NormStats;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::search::SearchData;
use crate::tensor::{Scalar, Tensor};

/// Bytes per record in the binary batch format: one label byte plus a
/// 3x32x32 planar RGB image.
pub const RECORD_BYTES: usize = 3073;
const RECORD_SIDE: usize = 32;
const RECORD_CHANNELS: usize = 3;
const RECORD_CLASSES: usize = 10;
const RECORDS_PER_FILE: usize = 10_000;

/// One named split: images [N, C, H, W] in [0, 1] plus labels.
#[derive(Debug, Clone)]
pub struct Split<F: Scalar> {
    pub images: Tensor<F>,
    pub labels: Vec<u32>,
}

impl<F: Scalar> Split<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// All splits of one dataset. `search_train` and `search_val` are a
/// disjoint 50/50 partition of the training pool; `eval_train` is the whole
/// pool; `test` is untouched by any training.
#[derive(Debug, Clone)]
pub struct Dataset<F: Scalar> {
    pub search_train: Split<F>,
    pub search_val: Split<F>,
    pub eval_train: Split<F>,
    pub test: Split<F>,
    pub stats: NormStats,
    pub classes: usize,
}

impl<F: Scalar> Dataset<F> {
    /// Clone the search splits into the shape the search loop consumes.
    pub fn search_data(&self) -> SearchData<F> {
        SearchData {
            train_images: self.search_train.images.clone(),
            train_labels: self.search_train.labels.clone(),
            val_images: self.search_val.images.clone(),
            val_labels: self.search_val.labels.clone(),
            stats: self.stats.clone(),
        }
    }
}

/// Assemble a dataset from a training pool and a test split: seeded 50/50
/// partition of the pool, normalization statistics from the whole pool.
fn assemble<F: Scalar>(pool: Split<F>, test: Split<F>, seed: u64) -> Result<Dataset<F>> {
    if pool.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "training pool of {} images cannot be split",
            pool.len()
        )));
    }
    let classes = pool
        .labels
        .iter()
        .chain(&test.labels)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0);
    let stats = NormStats::from_batch(&pool.images)?;

    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut r = rng::stream(seed, &[tag::DATASET, 2]);
    for i in (1..order.len()).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    let half = pool.len() / 2;
    let gather = |idx: &[usize]| -> Split<F> {
        let shape = pool.images.shape();
        let chw: usize = shape[1..].iter().product();
        let mut images = Tensor::zeros(&[idx.len(), shape[1], shape[2], shape[3]]);
        let mut labels = Vec::with_capacity(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            images.data_mut()[row * chw..(row + 1) * chw]
                .copy_from_slice(&pool.images.data()[i * chw..(i + 1) * chw]);
            labels.push(pool.labels[i]);
        }
        Split { images, labels }
    };
    let search_train = gather(&order[..half]);
    let search_val = gather(&order[half..]);
    Ok(Dataset {
        search_train,
        search_val,
        eval_train: pool,
        test,
        stats,
        classes,
    })
}

/// Shape of the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub side: usize,
    pub channels: usize,
    pub train: usize,
    pub test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            side: 16,
            channels: 3,
            train: 4000,
            test: 1000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.side < 8 {
            return Err(Error::InvalidConfig(format!(
                "image side must be at least 8, got {}",
                self.side
            )));
        }
        if self.channels == 0 || self.train < 2 || self.test == 0 {
            return Err(Error::InvalidConfig(
                "channels, train, and test sizes must be positive (train at least 2)".to_string(),
            ));
        }
        Ok(())
    }
}

/// Pattern classes: oriented bars, rings, checkers, gradients. Classes past
/// four reuse the pattern kinds at a higher frequency band. Per-image
/// parameters jitter around class-typical values so the class mean stays
/// informative while single images vary.
fn render_image(
    spec: &SyntheticSpec,
    label: usize,
    rng_: &mut ChaCha8Rng,
    out: &mut [f64],
) {
    let side = spec.side;
    let band = 1.0 + (label / 4) as f64 * 0.6;
    let kind = label % 4;
    let n1 = rng::normal(rng_);
    let n2 = rng::normal(rng_);
    let n3 = rng::normal(rng_);
    let base = std::f64::consts::TAU / side as f64;
    let mut pattern = vec![0.0; side * side];
    match kind {
        0 => {
            // bars: stripes near a fixed orientation, phase jittered
            let theta = 0.45 + 0.25 * n1;
            let f = base * band * (3.0 + 0.5 * n2);
            let phase = 1.2 * n3;
            for y in 0..side {
                for x in 0..side {
                    let t = f * (x as f64 * theta.cos() + y as f64 * theta.sin()) + phase;
                    pattern[y * side + x] = 0.5 + 0.4 * t.sin();
                }
            }
        }
        1 => {
            // rings: concentric waves around a jittered center
            let cx = side as f64 / 2.0 + 2.0 * n1;
            let cy = side as f64 / 2.0 + 2.0 * n2;
            let f = base * band * (3.5 + 0.5 * n3);
            for y in 0..side {
                for x in 0..side {
                    let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    pattern[y * side + x] = 0.5 + 0.4 * (f * r).sin();
                }
            }
        }
        2 => {
            // checkers: product of two axis waves, phases jittered
            let f = base * band * (2.5 + 0.4 * n1);
            let (p1, p2) = (1.0 * n2, 1.0 * n3);
            for y in 0..side {
                for x in 0..side {
                    let v = (f * x as f64 + p1).sin() * (f * y as f64 + p2).sin();
                    pattern[y * side + x] = 0.5 + 0.4 * v;
                }
            }
        }
        _ => {
            // gradients: a ramp along a direction near horizontal
            let psi = 0.5 * n1;
            let span = (side - 1) as f64;
            for y in 0..side {
                for x in 0..side {
                    let p = (x as f64 * psi.cos() + y as f64 * psi.sin()) / span;
                    pattern[y * side + x] = (0.15 + 0.7 * p).clamp(0.0, 1.0);
                }
            }
        }
    }
    for c in 0..spec.channels {
        let gain = 0.7 + 0.3 * rng_.gen::<f64>();
        for (i, &p) in pattern.iter().enumerate() {
            let noise = 0.12 * (2.0 * rng_.gen::<f64>() - 1.0);
            out[c * side * side + i] = (gain * p + noise).clamp(0.0, 1.0);
        }
    }
}

fn synth_split<F: Scalar>(spec: &SyntheticSpec, seed: u64, split_id: u64, count: usize) -> Split<F> {
    let (c, side) = (spec.channels, spec.side);
    let chw = c * side * side;
    let mut images = Tensor::zeros(&[count, c, side, side]);
    let mut labels = Vec::with_capacity(count);
    let mut buf = vec![0.0; chw];
    for i in 0..count {
        let label = i % spec.classes;
        let mut r = rng::stream(seed, &[tag::DATASET, split_id, i as u64]);
        render_image(spec, label, &mut r, &mut buf);
        for (dst, &v) in images.data_mut()[i * chw..(i + 1) * chw]
            .iter_mut()
            .zip(&buf)
        {
            *dst = F::from_f64(v);
        }
        labels.push(label as u32);
    }
    Split { images, labels }
}

/// Generate the synthetic benchmark. Labels cycle through the classes, so
/// splits whose size divides evenly are exactly balanced. Each image draws
/// from its own (seed, split, index) stream, so the result is reproducible
/// bit for bit.
pub fn generate_synthetic<F: Scalar>(spec: &SyntheticSpec, seed: u64) -> Result<Dataset<F>> {
    spec.validate()?;
    let pool = synth_split(spec, seed, 0, spec.train);
    let test = synth_split(spec, seed, 1, spec.test);
    assemble(pool, test, seed)
}

fn read_pool<F: Scalar>(
    files: &[PathBuf],
    subset: Option<&[u8]>,
    cap: Option<usize>,
) -> Result<Split<F>> {
    let remap: Option<Vec<u8>> = subset.map(|s| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    });
    if let Some(list) = &remap {
        if list.is_empty() || list.iter().any(|&l| l as usize >= RECORD_CLASSES) {
            return Err(Error::InvalidConfig(format!(
                "class subset must name distinct labels below {RECORD_CLASSES}"
            )));
        }
    }
    let classes = remap.as_ref().map_or(RECORD_CLASSES, |l| l.len());
    let mut per_class = vec![0usize; classes];
    let mut pixels: Vec<F> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let chw = RECORD_CHANNELS * RECORD_SIDE * RECORD_SIDE;
    for path in files {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() % RECORD_BYTES != 0 {
            return Err(Error::TruncatedBatchFile {
                path: path.display().to_string(),
                record: RECORD_BYTES,
                offset: (bytes.len() / RECORD_BYTES * RECORD_BYTES) as u64,
            });
        }
        for (rec, chunk) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
            let raw = chunk[0];
            if raw as usize >= RECORD_CLASSES {
                return Err(Error::LabelOutOfRange {
                    label: raw,
                    classes: RECORD_CLASSES,
                    path: path.display().to_string(),
                    record: rec,
                });
            }
            let label = match &remap {
                None => raw as u32,
                Some(list) => match list.binary_search(&raw) {
                    Ok(pos) => pos as u32,
                    Err(_) => continue,
                },
            };
            if let Some(cap) = cap {
                if per_class[label as usize] >= cap {
                    continue;
                }
            }
            per_class[label as usize] += 1;
            labels.push(label);
            pixels.extend(chunk[1..].iter().map(|&b| F::from_f64(b as f64 / 255.0)));
        }
    }
    if labels.is_empty() {
        return Err(Error::InvalidConfig(
            "no records survived subsetting".to_string(),
        ));
    }
    let n = labels.len();
    let images = Tensor::from_vec(&[n, RECORD_CHANNELS, RECORD_SIDE, RECORD_SIDE], pixels)?;
    debug_assert_eq!(images.data().len(), n * chw);
    Ok(Split { images, labels })
}

/// Load a directory of binary batch files. Files whose name contains
/// "test" form the test split; all others form the training pool. The
/// optional class subset keeps only the named labels and remaps them, in
/// ascending label order, to 0..k; the optional cap limits images per
/// (remapped) class within each pool separately.
pub fn load_binary_batches<F: Scalar>(
    dir: &Path,
    subset: Option<&[u8]>,
    cap: Option<usize>,
    seed: u64,
) -> Result<Dataset<F>> {
    let mut train_files = Vec::new();
    let mut test_files = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir.display().to_string(), e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("bin") {
            continue;
        }
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("")
            .to_string();
        if name.contains("test") {
            test_files.push(path);
        } else {
            train_files.push(path);
        }
    }
    train_files.sort();
    test_files.sort();
    if train_files.is_empty() || test_files.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "{} needs at least one training .bin and one test .bin file",
            dir.display()
        )));
    }
    let pool = read_pool(&train_files, subset, cap)?;
    let test = read_pool(&test_files, subset, cap)?;
    assemble(pool, test, seed)
}

/// Write splits as binary batch files (chunks of at most 10,000 records):
/// data_batch_<k>.bin for training, test_batch<_k>.bin for test. Images
/// must be [N, 3, 32, 32] in [0, 1]; pixels quantize to bytes.
pub fn write_binary_batches<F: Scalar>(
    dir: &Path,
    train: &Split<F>,
    test: &Split<F>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write_split = |split: &Split<F>, base: &str, suffix_first: bool| -> Result<()> {
        let shape = split.images.shape();
        if shape[1..] != [RECORD_CHANNELS, RECORD_SIDE, RECORD_SIDE] {
            return Err(Error::invalid(
                "write_binary_batches",
                format!("format is fixed at 3x32x32 planar RGB, got {:?}", &shape[1..]),
            ));
        }
        let chw = RECORD_CHANNELS * RECORD_SIDE * RECORD_SIDE;
        for (k, chunk) in split.labels.chunks(RECORDS_PER_FILE).enumerate() {
            let name = if k == 0 && !suffix_first {
                format!("{base}.bin")
            } else {
                format!("{base}_{}.bin", k + 1)
            };
            let path = dir.join(name);
            let start = k * RECORDS_PER_FILE;
            let mut bytes = Vec::with_capacity(chunk.len() * RECORD_BYTES);
            for (row, &label) in chunk.iter().enumerate() {
                if label as usize >= RECORD_CLASSES {
                    return Err(Error::invalid(
                        "write_binary_batches",
                        format!("label {label} exceeds the 10-class format"),
                    ));
                }
                bytes.push(label as u8);
                let i = start + row;
                for &v in &split.images.data()[i * chw..(i + 1) * chw] {
                    bytes.push((v.to_f64() * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
            fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    };
    write_split(train, "data_batch", true)?;
    write_split(test, "test_batch", false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_linear, Binder, ParamStore};
    use crate::tape::Tape;
    use std::collections::HashSet;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            side: 16,
            channels: 3,
            train: 200,
            test: 80,
        }
    }

    #[test]
    fn same_seed_reproduces_bit_for_bit() {
        let spec = tiny_spec();
        let a: Dataset<f32> = generate_synthetic(&spec, 5).unwrap();
        let b: Dataset<f32> = generate_synthetic(&spec, 5).unwrap();
        assert_eq!(a.search_train.images.data(), b.search_train.images.data());
        assert_eq!(a.search_val.labels, b.search_val.labels);
        assert_eq!(a.test.images.data(), b.test.images.data());
        assert_eq!(a.stats, b.stats);
        let c: Dataset<f32> = generate_synthetic(&spec, 6).unwrap();
        assert_ne!(a.test.images.data(), c.test.images.data());
    }

    #[test]
    fn splits_are_balanced_where_size_divides() {
        let spec = SyntheticSpec {
            train: 4000,
            test: 1000,
            ..tiny_spec()
        };
        let ds: Dataset<f32> = generate_synthetic(&spec, 1).unwrap();
        let mut counts = vec![0usize; 4];
        for &l in &ds.test.labels {
            counts[l as usize] += 1;
        }
        assert_eq!(counts, vec![250; 4]);
        let mut counts = vec![0usize; 4];
        for &l in &ds.eval_train.labels {
            counts[l as usize] += 1;
        }
        assert_eq!(counts, vec![1000; 4]);
        assert_eq!(ds.classes, 4);
    }

    #[test]
    fn search_splits_partition_the_pool() {
        let ds: Dataset<f32> = generate_synthetic(&tiny_spec(), 9).unwrap();
        assert_eq!(ds.search_train.len(), 100);
        assert_eq!(ds.search_val.len(), 100);
        assert_eq!(ds.eval_train.len(), 200);
        let chw = 3 * 16 * 16;
        let key = |img: &[f32]| -> Vec<u32> { img.iter().map(|v| v.to_bits()).collect() };
        let mut pool: HashSet<Vec<u32>> = HashSet::new();
        for i in 0..ds.eval_train.len() {
            pool.insert(key(&ds.eval_train.images.data()[i * chw..(i + 1) * chw]));
        }
        assert_eq!(pool.len(), 200, "pool rows should be distinct");
        let mut seen = HashSet::new();
        for split in [&ds.search_train, &ds.search_val] {
            for i in 0..split.len() {
                let k = key(&split.images.data()[i * chw..(i + 1) * chw]);
                assert!(pool.contains(&k), "split row not from the pool");
                assert!(seen.insert(k), "row appears in both search splits");
            }
        }
    }

    #[test]
    fn linear_classifier_beats_chance_but_not_saturation() {
        let spec = SyntheticSpec {
            train: 1200,
            test: 400,
            ..tiny_spec()
        };
        let ds: Dataset<f64> = generate_synthetic(&spec, 3).unwrap();
        let d = 3 * 16 * 16;
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, &[tag::INIT, 9]);
        let (wid, bid) = init_linear(&mut store, &mut r, "lin", 4, d);

        let flat = |split: &Split<f64>| {
            Tensor::from_vec(&[split.len(), d], split.images.data().to_vec()).unwrap()
        };
        let xtr = flat(&ds.eval_train);
        let xte = flat(&ds.test);

        let batch = 100;
        for epoch in 0..6 {
            for s in 0..(spec.train / batch) {
                let lo = s * batch;
                let xs = Tensor::from_vec(
                    &[batch, d],
                    xtr.data()[lo * d..(lo + batch) * d].to_vec(),
                )
                .unwrap();
                let ys = &ds.eval_train.labels[lo..lo + batch];
                let mut tape = Tape::new();
                let mut binder = Binder::new(&store, true);
                let w = binder.bind(&mut tape, &store, wid);
                let b = binder.bind(&mut tape, &store, bid);
                let x = tape.constant(xs);
                let logits = tape.linear(x, w, b).unwrap();
                let loss = tape.cross_entropy_mean(logits, ys).unwrap();
                tape.backward(loss).unwrap();
                let grads = binder.read_grads(&tape);
                let lr = 0.5 / (1.0 + epoch as f64);
                for (id, g) in grads.iter() {
                    for (p, &gv) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * gv;
                    }
                }
            }
        }

        let mut tape = Tape::new();
        let mut binder = Binder::new(&store, false);
        let w = binder.bind(&mut tape, &store, wid);
        let b = binder.bind(&mut tape, &store, bid);
        let x = tape.constant(xte);
        let logits = tape.linear(x, w, b).unwrap();
        let vals = tape.value(logits);
        let mut correct = 0;
        for i in 0..spec.test {
            let row = &vals.data()[i * 4..(i + 1) * 4];
            let pred = (0..4).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            if pred as u32 == ds.test.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / spec.test as f64;
        assert!(acc > 0.4, "linear baseline too weak: {acc}");
        assert!(acc < 0.999, "benchmark is linearly saturated: {acc}");
    }

    fn temp_dir(tag_: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("daas-data-{tag_}-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn truncated_file_error_names_the_offset() {
        let dir = temp_dir("trunc");
        fs::write(dir.join("data_batch_1.bin"), vec![0u8; RECORD_BYTES * 2 + 5]).unwrap();
        fs::write(dir.join("test_batch.bin"), vec![0u8; RECORD_BYTES]).unwrap();
        match load_binary_batches::<f32>(&dir, None, None, 1) {
            Err(Error::TruncatedBatchFile { record, offset, .. }) => {
                assert_eq!(record, RECORD_BYTES);
                assert_eq!(offset, (RECORD_BYTES * 2) as u64);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn out_of_range_label_names_the_record() {
        let dir = temp_dir("label");
        let mut bytes = vec![0u8; RECORD_BYTES * 3];
        bytes[RECORD_BYTES] = 12; // second record's label
        fs::write(dir.join("data_batch_1.bin"), bytes).unwrap();
        fs::write(dir.join("test_batch.bin"), vec![1u8; RECORD_BYTES]).unwrap();
        match load_binary_batches::<f32>(&dir, None, None, 1) {
            Err(Error::LabelOutOfRange { label, record, .. }) => {
                assert_eq!(label, 12);
                assert_eq!(record, 1);
            }
            other => panic!("expected label error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn one_full_batch_file_yields_ten_thousand_images() {
        let dir = temp_dir("full");
        let mut bytes = vec![0u8; 30_730_000];
        for r in 0..10_000 {
            bytes[r * RECORD_BYTES] = (r % 10) as u8;
        }
        fs::write(dir.join("data_batch_1.bin"), bytes).unwrap();
        let mut test = vec![0u8; RECORD_BYTES * 10];
        for r in 0..10 {
            test[r * RECORD_BYTES] = r as u8;
        }
        fs::write(dir.join("test_batch.bin"), test).unwrap();
        let ds: Dataset<f32> = load_binary_batches(&dir, None, None, 1).unwrap();
        assert_eq!(ds.eval_train.len(), 10_000);
        assert_eq!(ds.search_train.len(), 5_000);
        assert_eq!(ds.classes, 10);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn subset_remaps_and_cap_limits_per_class() {
        let dir = temp_dir("subset");
        let mut bytes = Vec::new();
        for r in 0..60 {
            let mut rec = vec![0u8; RECORD_BYTES];
            rec[0] = (r % 10) as u8;
            rec[1] = r as u8; // marker pixel
            bytes.extend(rec);
        }
        fs::write(dir.join("data_batch_1.bin"), &bytes).unwrap();
        fs::write(dir.join("test_batch.bin"), &bytes[..RECORD_BYTES * 20]).unwrap();
        let ds: Dataset<f32> =
            load_binary_batches(&dir, Some(&[9, 3, 5]), Some(4), 1).unwrap();
        assert_eq!(ds.classes, 3);
        // 60 records cycle labels 0..9, so 6 per original class; cap 4
        assert_eq!(ds.eval_train.len(), 12);
        let mut counts = vec![0; 3];
        for &l in &ds.eval_train.labels {
            counts[l as usize] += 1;
        }
        assert_eq!(counts, vec![4, 4, 4]);
        // test pool: 20 records cover labels 0..9 twice
        assert_eq!(ds.test.len(), 6);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn binary_files_roundtrip_quantized_pixels() {
        let dir = temp_dir("rt");
        let spec = SyntheticSpec {
            classes: 4,
            side: 32,
            channels: 3,
            train: 30,
            test: 10,
        };
        let ds: Dataset<f32> = generate_synthetic(&spec, 7).unwrap();
        write_binary_batches(&dir, &ds.eval_train, &ds.test).unwrap();
        let back: Dataset<f32> = load_binary_batches(&dir, None, None, 7).unwrap();
        assert_eq!(back.eval_train.labels, ds.eval_train.labels);
        assert_eq!(back.test.labels, ds.test.labels);
        for (&a, &b) in back
            .eval_train
            .images
            .data()
            .iter()
            .zip(ds.eval_train.images.data())
        {
            let q = (b * 255.0).round() / 255.0;
            assert_eq!(a, q);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn writer_rejects_wrong_geometry() {
        let dir = temp_dir("geom");
        let ds: Dataset<f32> = generate_synthetic(&tiny_spec(), 7).unwrap();
        assert!(write_binary_batches(&dir, &ds.eval_train, &ds.test).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
