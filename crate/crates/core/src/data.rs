//! Synthetic temporal tasks and ingestion of external TSTN tensors. Class
//! evidence in the synthetic tasks lives at single timesteps, so solving them
//! requires temporal discrimination.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Dims, SpikeTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    PulsePosition,
    MovingBar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task: SyntheticTask,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub class_count: usize,
    pub noise_std: f32,
    pub samples_per_class: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// In-memory dataset: samples in a fixed order with labels below
/// `class_count`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<(SpikeTensor, u32)>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    /// SHA-256 over dims, payload bits, and labels; equal hashes mean equal
    /// datasets.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (x, label) in &self.samples {
            let d = x.dims();
            for v in [d.t, d.c, d.h, d.w] {
                hasher.update((v as u64).to_le_bytes());
            }
            for v in x.data() {
                hasher.update(v.to_le_bytes());
            }
            hasher.update(label.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

pub fn generate(spec: &SyntheticTaskSpec, split: Split) -> Result<Dataset> {
    match spec.task {
        SyntheticTask::PulsePosition => gen_pulse_position_split(spec, split),
        SyntheticTask::MovingBar => gen_moving_bar_split(spec, split),
    }
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 10,
        Split::Test => 20,
    }
}

fn check_common(spec: &SyntheticTaskSpec) -> Result<Dims> {
    if spec.noise_std < 0.0 {
        return Err(Error::Config(format!(
            "noise_std must be >= 0, got {}",
            spec.noise_std
        )));
    }
    if spec.class_count == 0 {
        return Err(Error::Config("class_count must be >= 1".into()));
    }
    Ok(Dims::new(spec.t, spec.c, spec.h, spec.w))
}

/// Pulse-position task: a sample of class `k` has a bright frame at timestep
/// `k` and Gaussian noise elsewhere.
pub fn gen_pulse_position(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    gen_pulse_position_split(spec, Split::Train)
}

fn gen_pulse_position_split(spec: &SyntheticTaskSpec, split: Split) -> Result<Dataset> {
    let dims = check_common(spec)?;
    if spec.class_count > spec.t {
        return Err(Error::Config(format!(
            "pulse_position needs class_count <= T (one class per pulse timestep), got {} classes over {} timesteps",
            spec.class_count, spec.t
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split_stream(split));
    let frame = dims.c * dims.h * dims.w;
    let mut samples = Vec::with_capacity(spec.class_count * spec.samples_per_class);
    for class in 0..spec.class_count {
        for _ in 0..spec.samples_per_class {
            let mut data = vec![0.0f32; dims.numel()];
            for t in 0..dims.t {
                if t == class {
                    for v in &mut data[t * frame..(t + 1) * frame] {
                        *v = 1.0;
                    }
                } else if spec.noise_std > 0.0 {
                    for v in &mut data[t * frame..(t + 1) * frame] {
                        let n: f32 = StandardNormal.sample(&mut rng);
                        *v = spec.noise_std * n;
                    }
                }
            }
            samples.push((SpikeTensor::from_vec(dims, data)?, class as u32));
        }
    }
    Ok(Dataset { samples, class_count: spec.class_count, split })
}

/// Moving-bar task: a short bar starts centred and translates one pixel per
/// timestep; the class is its direction (right, left, down, up).
pub fn gen_moving_bar(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    gen_moving_bar_split(spec, Split::Train)
}

const BAR_DIRECTIONS: [(i64, i64); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];

fn gen_moving_bar_split(spec: &SyntheticTaskSpec, split: Split) -> Result<Dataset> {
    let dims = check_common(spec)?;
    if spec.class_count > 4 {
        return Err(Error::Config(format!(
            "moving_bar enumerates at most 4 directions, got class_count {}",
            spec.class_count
        )));
    }
    if spec.h < 3 || spec.w < 3 {
        return Err(Error::Config("moving_bar needs at least a 3x3 frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split_stream(split));
    let cy = (dims.h as i64 - 1) / 2;
    let cx = (dims.w as i64 - 1) / 2;
    let mut samples = Vec::with_capacity(spec.class_count * spec.samples_per_class);
    for class in 0..spec.class_count {
        let (dy, dx) = BAR_DIRECTIONS[class];
        for _ in 0..spec.samples_per_class {
            let mut data = vec![0.0f32; dims.numel()];
            if spec.noise_std > 0.0 {
                for v in data.iter_mut() {
                    let n: f32 = StandardNormal.sample(&mut rng);
                    *v = spec.noise_std * n;
                }
            }
            for t in 0..dims.t {
                let by = cy + dy * t as i64;
                let bx = cx + dx * t as i64;
                // Vertical 3-pixel bar centred on (by, bx); off-frame pixels
                // are clipped.
                for arm in -1..=1i64 {
                    let y = by + arm;
                    if y < 0 || y >= dims.h as i64 || bx < 0 || bx >= dims.w as i64 {
                        continue;
                    }
                    for c in 0..dims.c {
                        let idx = dims.index(t, c, y as usize, bx as usize);
                        data[idx] = 1.0;
                    }
                }
            }
            samples.push((SpikeTensor::from_vec(dims, data)?, class as u32));
        }
    }
    Ok(Dataset { samples, class_count: spec.class_count, split })
}

/// Load a directory of TSTN files listed by a `labels.csv` manifest with
/// header `filename,label`. Samples keep manifest order; shapes must agree
/// across the whole set.
pub fn load_tensor_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("labels.csv");
    let text = std::fs::read_to_string(&manifest)
        .map_err(|e| Error::Ingest(format!("cannot read manifest {}: {}", manifest.display(), e)))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == "filename,label" => {}
        other => {
            return Err(Error::Ingest(format!(
                "manifest header must be 'filename,label', got {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut samples: Vec<(SpikeTensor, u32)> = Vec::new();
    let mut dims: Option<Dims> = None;
    let mut max_label = 0u32;
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (filename, label) = line.split_once(',').ok_or_else(|| {
            Error::Ingest(format!("manifest line {}: expected 'filename,label'", lineno + 2))
        })?;
        let label: u32 = label.trim().parse().map_err(|_| {
            Error::Ingest(format!("manifest line {}: bad label '{}'", lineno + 2, label))
        })?;
        let path = dir.join(filename.trim());
        let tensor = SpikeTensor::load_tstn(&path)
            .map_err(|e| Error::Ingest(format!("{}: {}", path.display(), e)))?;
        match dims {
            None => dims = Some(tensor.dims()),
            Some(d) if d != tensor.dims() => {
                return Err(Error::Ingest(format!(
                    "{}: shape {} disagrees with dataset shape {}",
                    path.display(),
                    tensor.dims(),
                    d
                )))
            }
            _ => {}
        }
        max_label = max_label.max(label);
        samples.push((tensor, label));
    }
    let class_count = if samples.is_empty() { 0 } else { max_label as usize + 1 };
    Ok(Dataset { samples, class_count, split: Split::Train })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pulse_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task: SyntheticTask::PulsePosition,
            t: 6,
            c: 1,
            h: 4,
            w: 4,
            class_count: 6,
            noise_std: 0.0,
            samples_per_class: 3,
            seed: 5,
        }
    }

    #[test]
    fn pulse_class_zero_is_first_frame_only() {
        let ds = gen_pulse_position(&pulse_spec()).unwrap();
        let (x, label) = &ds.samples[0];
        assert_eq!(*label, 0);
        let frame = 16;
        assert!(x.data()[..frame].iter().all(|&v| v == 1.0));
        assert!(x.data()[frame..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pulse_uniform_class_counts() {
        let ds = gen_pulse_position(&pulse_spec()).unwrap();
        let mut counts = vec![0usize; 6];
        for (_, label) in &ds.samples {
            counts[*label as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c == 3));
    }

    #[test]
    fn pulse_generation_is_deterministic() {
        let spec = SyntheticTaskSpec { noise_std: 0.4, ..pulse_spec() };
        let a = gen_pulse_position(&spec).unwrap();
        let b = gen_pulse_position(&spec).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = gen_pulse_position(&SyntheticTaskSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn pulse_rejects_too_many_classes() {
        let spec = SyntheticTaskSpec { class_count: 7, ..pulse_spec() };
        assert!(matches!(gen_pulse_position(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn pulse_noiseless_classes_linearly_separable() {
        // Nearest-centroid over temporally pooled frames classifies the
        // noiseless task perfectly.
        let ds = gen_pulse_position(&pulse_spec()).unwrap();
        let frame = 16;
        let pool = |x: &SpikeTensor| -> Vec<f32> {
            (0..6)
                .map(|t| x.data()[t * frame..(t + 1) * frame].iter().sum::<f32>())
                .collect()
        };
        let mut centroids = vec![vec![0.0f32; 6]; 6];
        let mut counts = vec![0usize; 6];
        for (x, label) in &ds.samples {
            let p = pool(x);
            for (a, b) in centroids[*label as usize].iter_mut().zip(&p) {
                *a += b;
            }
            counts[*label as usize] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *n as f32;
            }
        }
        let mut correct = 0;
        for (x, label) in &ds.samples {
            let p = pool(x);
            let mut best = 0;
            let mut best_d = f32::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                let d: f32 = c.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if best == *label as usize {
                correct += 1;
            }
        }
        assert_eq!(correct, ds.samples.len());
    }

    fn bar_spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task: SyntheticTask::MovingBar,
            t: 4,
            c: 1,
            h: 9,
            w: 9,
            class_count: 4,
            noise_std: 0.0,
            samples_per_class: 1,
            seed: 7,
        }
    }

    #[test]
    fn bar_advances_one_pixel_per_timestep() {
        let ds = gen_moving_bar(&bar_spec()).unwrap();
        let (x, label) = &ds.samples[0];
        assert_eq!(*label, 0); // rightward
        for t in 0..4 {
            let bx = 4 + t;
            for (y, expect) in [(3, 1.0), (4, 1.0), (5, 1.0), (0, 0.0)] {
                assert_eq!(x.get(t, 0, y, bx), expect, "t={} y={} bx={}", t, y, bx);
            }
        }
    }

    #[test]
    fn bar_single_timestep_classes_identical() {
        let spec = SyntheticTaskSpec { t: 1, ..bar_spec() };
        let ds = gen_moving_bar(&spec).unwrap();
        let first = ds.samples[0].0.data();
        for (x, _) in &ds.samples {
            assert_eq!(x.data(), first);
        }
    }

    #[test]
    fn bar_flip_symmetry() {
        // Horizontally flipping a left-moving sample gives the right-moving
        // sample (noiseless, odd width).
        let ds = gen_moving_bar(&bar_spec()).unwrap();
        let right = &ds.samples[0].0;
        let left = &ds.samples[1].0;
        let d = right.dims();
        for t in 0..d.t {
            for y in 0..d.h {
                for xpix in 0..d.w {
                    assert_eq!(
                        left.get(t, 0, y, d.w - 1 - xpix),
                        right.get(t, 0, y, xpix)
                    );
                }
            }
        }
    }

    #[test]
    fn bar_rejects_more_than_four_classes() {
        let spec = SyntheticTaskSpec { class_count: 5, ..bar_spec() };
        assert!(matches!(gen_moving_bar(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn tensor_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_pulse_position(&pulse_spec()).unwrap();
        let mut manifest = String::from("filename,label\n");
        for (i, (x, label)) in ds.samples.iter().enumerate().take(4) {
            let name = format!("sample{:03}.tstn", i);
            x.save_tstn(&dir.path().join(&name)).unwrap();
            manifest.push_str(&format!("{},{}\n", name, label));
        }
        std::fs::write(dir.path().join("labels.csv"), manifest).unwrap();
        let loaded = load_tensor_dataset(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), 4);
        // Manifest order preserved.
        for i in 0..4 {
            assert_eq!(loaded.samples[i].0, ds.samples[i].0);
            assert_eq!(loaded.samples[i].1, ds.samples[i].1);
        }
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("labels.csv"), "filename,label\n").unwrap();
        let ds = load_tensor_dataset(dir.path()).unwrap();
        assert!(ds.samples.is_empty());
    }

    #[test]
    fn malformed_member_fails_without_partial_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let good = SpikeTensor::filled(Dims::new(1, 1, 2, 2), 1.0).unwrap();
        good.save_tstn(&dir.path().join("a.tstn")).unwrap();
        std::fs::write(dir.path().join("b.tstn"), b"not a tensor").unwrap();
        std::fs::write(
            dir.path().join("labels.csv"),
            "filename,label\na.tstn,0\nb.tstn,1\n",
        )
        .unwrap();
        let err = load_tensor_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("b.tstn"), "{}", err);
    }

    #[test]
    fn shape_disagreement_names_file() {
        let dir = tempfile::tempdir().unwrap();
        SpikeTensor::filled(Dims::new(1, 1, 2, 2), 1.0)
            .unwrap()
            .save_tstn(&dir.path().join("a.tstn"))
            .unwrap();
        SpikeTensor::filled(Dims::new(1, 1, 3, 3), 1.0)
            .unwrap()
            .save_tstn(&dir.path().join("odd.tstn"))
            .unwrap();
        std::fs::write(
            dir.path().join("labels.csv"),
            "filename,label\na.tstn,0\nodd.tstn,1\n",
        )
        .unwrap();
        let err = load_tensor_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("odd.tstn"), "{}", err);
    }
}
