//! Planted-patch classification.
//!
//! Each image is a `√K × √K` grid of cells. One cell holds a square of
//! brightness +1 at a random offset; the label is that cell's row-major
//! index. Every pixel then gets uniform noise in `[-noise, noise]`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use graft::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TaskConfig;
use crate::error::{HarnessError, Result};

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Images stored `[n, size, size, channels]` in 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub channels: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn stride(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.images[i * s..(i + 1) * s]
    }

    /// Stacks the chosen samples into `[len, size, size, channels]`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.stride());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::lit(v)));
        }
        let shape = vec![indices.len(), self.image_size, self.image_size, self.channels];
        let images = Tensor::from_vec(shape, data).expect("batch shape matches data");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Little-endian 32-bit image bytes.
    pub fn image_bytes(&self) -> Vec<u8> {
        self.images.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

fn grid_side(classes: usize) -> Result<usize> {
    let side = (classes as f64).sqrt().round() as usize;
    if classes == 0 || side * side != classes {
        return Err(HarnessError::Invalid(format!("task.classes = {classes} is not a perfect square")));
    }
    Ok(side)
}

fn generate(task: &TaskConfig, image_size: usize, channels: usize, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let side = (task.classes as f64).sqrt().round() as usize;
    let cell = image_size / side;
    let mut images = Vec::with_capacity(n * image_size * image_size * channels);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..task.classes);
        let y0 = (label / side) * cell + rng.random_range(0..=cell - task.patch);
        let x0 = (label % side) * cell + rng.random_range(0..=cell - task.patch);
        for y in 0..image_size {
            for x in 0..image_size {
                let inside = (y0..y0 + task.patch).contains(&y) && (x0..x0 + task.patch).contains(&x);
                for _ in 0..channels {
                    let noise = if task.noise > 0.0 { rng.random_range(-task.noise..=task.noise) } else { 0.0 };
                    images.push(if inside { 1.0 } else { 0.0 } + noise);
                }
            }
        }
        labels.push(label);
    }
    Dataset { image_size, channels, images, labels }
}

/// Train and test splits drawn from separate streams of the same seed.
pub fn generate_dataset(task: &TaskConfig, image_size: usize, channels: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let side = grid_side(task.classes)?;
    if image_size % side != 0 || task.patch == 0 || task.patch > image_size / side {
        return Err(HarnessError::Invalid(format!(
            "a {p}-pixel patch does not fit the {side}x{side} cells of a {image_size}-pixel image",
            p = task.patch
        )));
    }
    let stream = |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    };
    let train = generate(task, image_size, channels, task.train_size, &mut stream(TRAIN_STREAM));
    let test = generate(task, image_size, channels, task.test_size, &mut stream(TEST_STREAM));
    Ok((train, test))
}

/// Cell of the brightest `patch × patch` square, summed over channels.
pub fn oracle_label(data: &Dataset, i: usize, classes: usize, patch: usize) -> usize {
    let (s, c) = (data.image_size, data.channels);
    let img = data.image(i);
    let mut sat = vec![0.0f64; (s + 1) * (s + 1)];
    for y in 0..s {
        for x in 0..s {
            let v: f64 = img[(y * s + x) * c..(y * s + x + 1) * c].iter().sum();
            sat[(y + 1) * (s + 1) + x + 1] = v + sat[y * (s + 1) + x + 1] + sat[(y + 1) * (s + 1) + x] - sat[y * (s + 1) + x];
        }
    }
    let side = (classes as f64).sqrt().round() as usize;
    let cell = s / side;
    let mut best = (f64::NEG_INFINITY, 0);
    for y in 0..=s - patch {
        for x in 0..=s - patch {
            let (y1, x1) = (y + patch, x + patch);
            let sum = sat[y1 * (s + 1) + x1] - sat[y * (s + 1) + x1] - sat[y1 * (s + 1) + x] + sat[y * (s + 1) + x];
            if sum > best.0 {
                best = (sum, ((y + patch / 2) / cell) * side + (x + patch / 2) / cell);
            }
        }
    }
    best.1
}

/// Fraction of samples whose oracle label matches the stored one.
pub fn oracle_accuracy(data: &Dataset, classes: usize, patch: usize) -> f64 {
    let hits = (0..data.len()).filter(|&i| oracle_label(data, i, classes, patch) == data.labels[i]).count();
    hits as f64 / data.len() as f64
}

/// Writes `{split}_images.f32` and `{split}_labels.csv` for both splits.
pub fn emit(dir: &Path, train: &Dataset, test: &Dataset) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut written = Vec::new();
    for (split, data) in [("train", train), ("test", test)] {
        let img = dir.join(format!("{split}_images.f32"));
        std::fs::write(&img, data.image_bytes()).map_err(|e| HarnessError::io(&img, e))?;
        let mut csv = String::from("index,label\n");
        for (i, l) in data.labels.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l}");
        }
        let lab = dir.join(format!("{split}_labels.csv"));
        std::fs::write(&lab, csv).map_err(|e| HarnessError::io(&lab, e))?;
        written.extend([img, lab]);
    }
    Ok(written)
}
