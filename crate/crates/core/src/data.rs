//! Synthetic multi-scale sequence data, feature-file I/O, and padding.
//!
//! Each synthetic class is defined by one fixed random waveform with a
//! distinct temporal extent; a sample is Gaussian background noise with its
//! class waveform added at a random offset. Classes therefore differ in the
//! time scale at which their evidence lives, which is what the multi-scale
//! stack is meant to exploit.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"MSF1";

/// Peak amplitude budget shared by all class templates; the per-frame peak
/// of a template with extent `len` is `AMPLITUDE / sqrt(len)`, so template
/// energy is roughly equal across classes and long templates are faint per
/// frame but coherent across their whole extent.
pub const TEMPLATE_AMPLITUDE: f64 = 3.5;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Inclusive range of raw (unpadded) sequence lengths.
    pub t_range: (usize, usize),
    pub input_dim: usize,
    /// Temporal extent of each class's template; one entry per class.
    pub pattern_scales: Vec<usize>,
    pub noise_std: f64,
    pub samples_per_class: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.pattern_scales.len() != self.num_classes {
            return Err(Error::config(format!(
                "{} pattern scales for {} classes",
                self.pattern_scales.len(),
                self.num_classes
            )));
        }
        if self.t_range.0 < 1 || self.t_range.0 > self.t_range.1 {
            return Err(Error::config(format!(
                "invalid T range {:?}",
                self.t_range
            )));
        }
        if let Some(&too_long) = self.pattern_scales.iter().find(|&&s| s == 0 || s > self.t_range.0)
        {
            return Err(Error::config(format!(
                "pattern scale {too_long} does not fit the minimum length {}",
                self.t_range.0
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be at least 1"));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be finite and >= 0"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class must be at least 1"));
        }
        Ok(())
    }
}

/// One padded sequence with its genuine length and class id.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: Tensor<f32>,
    pub valid_len: usize,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::config(format!(
                "unknown split '{other}' (expected train, val, or test)"
            ))),
        }
    }
}

/// Appends zero rows up to the least multiple of `p^L`; returns the padded
/// tensor and the original length.
pub fn pad_to_multiple(features: &Tensor<f32>, p: usize, levels: usize) -> Result<(Tensor<f32>, usize)> {
    let multiple = p
        .checked_pow(levels as u32)
        .ok_or_else(|| Error::config(format!("p^L overflows for p={p}, L={levels}")))?;
    let valid_len = features.rows();
    let padded_len = valid_len.div_ceil(multiple) * multiple;
    if padded_len == valid_len {
        return Ok((features.clone(), valid_len));
    }
    let mut padded = Tensor::zeros(padded_len, features.cols());
    for r in 0..valid_len {
        padded.row_mut(r).copy_from_slice(features.row(r));
    }
    Ok((padded, valid_len))
}

/// Gram-Schmidt-orthonormalized class directions (falls back to plain
/// normalization when there are more classes than dimensions).
fn class_directions(rng: &mut ChaCha8Rng, num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        if num_classes <= dim {
            for prev in &dirs {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        for x in &mut v {
            *x /= norm;
        }
        dirs.push(v);
    }
    dirs
}

/// The fixed waveform for one class: a half-sine envelope over the class's
/// temporal extent along a fixed random direction.
fn build_template(direction: &[f64], len: usize) -> Tensor<f32> {
    let amp = TEMPLATE_AMPLITUDE / (len as f64).sqrt();
    let mut t = Tensor::zeros(len, direction.len());
    for row in 0..len {
        let envelope = (std::f64::consts::PI * (row as f64 + 0.5) / len as f64).sin();
        for (c, &d) in direction.iter().enumerate() {
            t.set(row, c, (amp * envelope * d) as f32);
        }
    }
    t
}

/// Deterministic synthetic dataset with disjoint 8:1:1 splits per class.
/// Returns the dataset and the per-class templates. Sequence content
/// depends only on `(spec, seed)`; `p` and `L` control padding only.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    seed: u64,
    p: usize,
    levels: usize,
) -> Result<(Dataset, Vec<Tensor<f32>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions = class_directions(&mut rng, spec.num_classes, spec.input_dim);
    let templates: Vec<Tensor<f32>> = directions
        .iter()
        .zip(&spec.pattern_scales)
        .map(|(dir, &len)| build_template(dir, len))
        .collect();

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let n = spec.samples_per_class;
    let n_train = n * 8 / 10;
    let n_val = (n - n_train) / 2;

    let mut dataset = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        num_classes: spec.num_classes,
        input_dim: spec.input_dim,
    };

    for (label, template) in templates.iter().enumerate() {
        for idx in 0..n {
            let t_len = rng.random_range(spec.t_range.0..=spec.t_range.1);
            let offset = rng.random_range(0..=t_len - template.rows());
            let mut features = Tensor::zeros(t_len, spec.input_dim);
            for v in features.data_mut() {
                *v = noise.sample(&mut rng) as f32;
            }
            for r in 0..template.rows() {
                for c in 0..spec.input_dim {
                    let v = features.get(offset + r, c) + template.get(r, c);
                    features.set(offset + r, c, v);
                }
            }
            let (padded, valid_len) = pad_to_multiple(&features, p, levels)?;
            let sample = Sample {
                features: padded,
                valid_len,
                label,
            };
            if idx < n_train {
                dataset.train.push(sample);
            } else if idx < n_train + n_val {
                dataset.val.push(sample);
            } else {
                dataset.test.push(sample);
            }
        }
    }
    Ok((dataset, templates))
}

// ── MSF1 feature files ──────────────────────────────────────────────

/// Writes magic "MSF1", u32 rows, u32 cols, then row-major f32, all
/// little-endian.
pub fn write_feature_file(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let rows = u32::try_from(features.rows())
        .map_err(|_| Error::config("feature rows exceed u32 range".to_string()))?;
    let cols = u32::try_from(features.cols())
        .map_err(|_| Error::config("feature cols exceed u32 range".to_string()))?;
    let mut buf = Vec::with_capacity(12 + features.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {:02x?}, expected \"MSF1\"", bytes.get(0..4).unwrap_or(&bytes)),
        ));
    }
    if bytes.len() < 12 {
        return Err(Error::format(
            4,
            format!("truncated header: {} bytes total", bytes.len()),
        ));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    if rows == 0 || cols == 0 {
        return Err(Error::format(4, format!("empty shape {rows}x{cols}")));
    }
    let count = rows
        .checked_mul(cols)
        .filter(|&c| c <= (usize::MAX as u64) / 4)
        .ok_or_else(|| Error::format(4, format!("dimension overflow: {rows}x{cols}")))?;
    let expected = 12 + count as usize * 4;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated payload: expected {} value bytes, found {}",
                expected - 12,
                bytes.len() - 12
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            expected as u64,
            format!("{} trailing bytes", bytes.len() - expected),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(rows as usize, cols as usize, data)
}

// ── Dataset directory layout ────────────────────────────────────────

fn split_names() -> [&'static str; 3] {
    ["train", "val", "test"]
}

/// Writes `{train,val,test}/manifest.csv` plus one MSF1 file per sample.
/// Feature files contain the raw (unpadded) rows.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    for (name, samples) in split_names()
        .into_iter()
        .zip([&dataset.train, &dataset.val, &dataset.test])
    {
        let split_dir = dir.join(name);
        fs::create_dir_all(&split_dir)?;
        let mut writer = csv::Writer::from_path(split_dir.join("manifest.csv"))
            .map_err(|e| Error::config(e.to_string()))?;
        writer
            .write_record(["path", "label"])
            .map_err(|e| Error::config(e.to_string()))?;
        for (i, sample) in samples.iter().enumerate() {
            let file = format!("sample_{i:05}.msf");
            let mut raw = Tensor::zeros(sample.valid_len, sample.features.cols());
            for r in 0..sample.valid_len {
                raw.row_mut(r).copy_from_slice(sample.features.row(r));
            }
            write_feature_file(&split_dir.join(&file), &raw)?;
            writer
                .write_record([file.as_str(), &sample.label.to_string()])
                .map_err(|e| Error::config(e.to_string()))?;
        }
        writer.flush()?;
    }
    Ok(())
}

fn load_split(split_dir: &Path, p: usize, levels: usize) -> Result<Vec<Sample>> {
    let manifest = split_dir.join("manifest.csv");
    let mut reader = csv::Reader::from_path(&manifest)
        .map_err(|e| Error::format(0, format!("{}: {e}", manifest.display())))?;
    let mut rows: Vec<(String, usize)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(0, e.to_string()))?;
        let path = record
            .get(0)
            .ok_or_else(|| Error::format(0, "manifest row missing path".to_string()))?
            .to_string();
        let label: usize = record
            .get(1)
            .ok_or_else(|| Error::format(0, "manifest row missing label".to_string()))?
            .parse()
            .map_err(|e| Error::format(0, format!("bad label: {e}")))?;
        rows.push((path, label));
    }
    // Canonical order: sort by file name so training does not depend on
    // manifest row order.
    rows.sort();
    let mut samples = Vec::with_capacity(rows.len());
    for (file, label) in rows {
        let raw = read_feature_file(&split_dir.join(&file))?;
        let (features, valid_len) = pad_to_multiple(&raw, p, levels)?;
        samples.push(Sample {
            features,
            valid_len,
            label,
        });
    }
    Ok(samples)
}

/// Loads a dataset directory, padding every sequence to a multiple of `p^L`.
pub fn load_dataset(dir: &Path, p: usize, levels: usize) -> Result<Dataset> {
    let train = load_split(&dir.join("train"), p, levels)?;
    let val = load_split(&dir.join("val"), p, levels)?;
    let test = load_split(&dir.join("test"), p, levels)?;
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let input_dim = train[0].features.cols();
    let num_classes = train
        .iter()
        .chain(&val)
        .chain(&test)
        .map(|s| s.label + 1)
        .max()
        .unwrap_or(0);
    Ok(Dataset {
        train,
        val,
        test,
        num_classes,
        input_dim,
    })
}

/// Deterministic shuffled index batches; the final partial batch is kept.
pub fn batch_iter(num_samples: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    if num_samples == 0 {
        return Err(Error::Empty("batch iteration over an empty dataset"));
    }
    let mut order: Vec<usize> = (0..num_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    // Fisher-Yates.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            t_range: (30, 40),
            input_dim: 6,
            pattern_scales: vec![1, 9, 27],
            noise_std: 0.5,
            samples_per_class: 20,
        }
    }

    /// Independent classifier: best normalized cross-correlation of each
    /// class template over all offsets.
    fn matched_filter_predict(sample: &Sample, templates: &[Tensor<f32>]) -> usize {
        let mut best_class = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (class, tpl) in templates.iter().enumerate() {
            let norm: f64 = tpl
                .data()
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            for offset in 0..=(sample.valid_len - tpl.rows()) {
                let mut corr = 0.0f64;
                for r in 0..tpl.rows() {
                    for c in 0..tpl.cols() {
                        corr += sample.features.get(offset + r, c) as f64 * tpl.get(r, c) as f64;
                    }
                }
                let score = corr / norm;
                if score > best_score {
                    best_score = score;
                    best_class = class;
                }
            }
        }
        best_class
    }

    fn oracle_accuracy(samples: &[Sample], templates: &[Tensor<f32>]) -> f64 {
        let correct = samples
            .iter()
            .filter(|s| matched_filter_predict(s, templates) == s.label)
            .count();
        correct as f64 / samples.len() as f64
    }

    #[test]
    fn pad_examples() {
        let t81 = Tensor::<f32>::zeros(81, 4);
        assert_eq!(pad_to_multiple(&t81, 3, 4).unwrap().0.rows(), 81);

        let t80 = Tensor::<f32>::zeros(80, 4);
        let (padded, valid) = pad_to_multiple(&t80, 3, 4).unwrap();
        assert_eq!((padded.rows(), valid), (81, 80));
        assert!(padded.row(80).iter().all(|&v| v == 0.0));

        let t1 = Tensor::<f32>::zeros(1, 4);
        assert_eq!(pad_to_multiple(&t1, 3, 4).unwrap().0.rows(), 81);
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = small_spec();
        let (d1, tpl1) = generate_synthetic_dataset(&spec, 7, 3, 3).unwrap();
        let (d2, tpl2) = generate_synthetic_dataset(&spec, 7, 3, 3).unwrap();
        assert_eq!(d1.train.len(), d2.train.len());
        for (a, b) in d1.train.iter().zip(&d2.train) {
            assert!(a.features.bit_eq(&b.features));
            assert_eq!((a.valid_len, a.label), (b.valid_len, b.label));
        }
        for (a, b) in tpl1.iter().zip(&tpl2) {
            assert!(a.bit_eq(b));
        }

        // 20 per class -> 16 train / 2 val / 2 test, exactly balanced.
        assert_eq!(d1.train.len(), 48);
        assert_eq!(d1.val.len(), 6);
        assert_eq!(d1.test.len(), 6);
        for class in 0..3 {
            assert_eq!(d1.train.iter().filter(|s| s.label == class).count(), 16);
            assert_eq!(d1.val.iter().filter(|s| s.label == class).count(), 2);
            assert_eq!(d1.test.iter().filter(|s| s.label == class).count(), 2);
        }
    }

    #[test]
    fn every_sample_is_padded_with_zeros() {
        let spec = small_spec();
        let (d, _) = generate_synthetic_dataset(&spec, 3, 3, 3).unwrap();
        for s in d.train.iter().chain(&d.val).chain(&d.test) {
            assert_eq!(s.features.rows() % 27, 0);
            for r in s.valid_len..s.features.rows() {
                assert!(s.features.row(r).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn matched_filter_is_perfect_without_noise() {
        let mut spec = small_spec();
        spec.noise_std = 0.0;
        let (d, templates) = generate_synthetic_dataset(&spec, 11, 3, 3).unwrap();
        assert_eq!(oracle_accuracy(&d.train, &templates), 1.0);
    }

    #[test]
    fn matched_filter_degrades_with_noise() {
        let mut means = Vec::new();
        for noise in [0.0, 0.5, 1.0] {
            let mut acc = 0.0;
            for seed in 0..5 {
                let mut spec = small_spec();
                spec.noise_std = noise;
                let (d, templates) = generate_synthetic_dataset(&spec, seed, 3, 3).unwrap();
                acc += oracle_accuracy(&d.train, &templates);
            }
            means.push(acc / 5.0);
        }
        assert!(means[0] >= means[1] && means[1] >= means[2], "{means:?}");
        assert_eq!(means[0], 1.0);
    }

    #[test]
    fn infeasible_spec_is_rejected() {
        let mut spec = small_spec();
        spec.pattern_scales = vec![1, 9, 50]; // longer than t_range.0
        assert!(matches!(
            generate_synthetic_dataset(&spec, 0, 3, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn feature_file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.msf");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::new(
            7,
            5,
            (0..35).map(|_| rng.random_range(-3.0f32..3.0)).collect(),
        )
        .unwrap();
        write_feature_file(&path, &t).unwrap();
        let back = read_feature_file(&path).unwrap();
        assert!(t.bit_eq(&back));

        // Writing the reloaded tensor reproduces the file byte for byte.
        let path2 = dir.path().join("t2.msf");
        write_feature_file(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn feature_file_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.msf");
        fs::write(&path, b"XSF1\x02\x00\x00\x00\x03\x00\x00\x00").unwrap();
        let err = read_feature_file(&path).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn feature_file_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.msf");
        // Header says 2x3 but only 5 floats follow.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MSF1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for _ in 0..5 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        fs::write(&path, bytes).unwrap();
        let err = read_feature_file(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn dataset_round_trip_and_row_order_invariance() {
        let spec = small_spec();
        let (d, _) = generate_synthetic_dataset(&spec, 13, 3, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &d).unwrap();
        let loaded = load_dataset(dir.path(), 3, 3).unwrap();
        assert_eq!(loaded.train.len(), d.train.len());
        assert_eq!(loaded.num_classes, 3);
        for (a, b) in d.train.iter().zip(&loaded.train) {
            assert!(a.features.bit_eq(&b.features));
            assert_eq!((a.valid_len, a.label), (b.valid_len, b.label));
        }

        // Reverse the manifest rows; loading still yields canonical order.
        let manifest = dir.path().join("train").join("manifest.csv");
        let text = fs::read_to_string(&manifest).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let (header, rows) = lines.split_at_mut(1);
        rows.reverse();
        let mut permuted = header[0].to_string();
        for r in rows {
            permuted.push('\n');
            permuted.push_str(r);
        }
        permuted.push('\n');
        fs::write(&manifest, permuted).unwrap();
        let reloaded = load_dataset(dir.path(), 3, 3).unwrap();
        for (a, b) in loaded.train.iter().zip(&reloaded.train) {
            assert!(a.features.bit_eq(&b.features));
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn batch_iteration_contract() {
        let batches = batch_iter(10, 3, 42).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);

        let again = batch_iter(10, 3, 42).unwrap();
        assert_eq!(batches, again);

        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        assert!(matches!(batch_iter(0, 3, 1), Err(Error::Empty(_))));
        assert!(matches!(batch_iter(5, 0, 1), Err(Error::Contract(_))));
    }
}
