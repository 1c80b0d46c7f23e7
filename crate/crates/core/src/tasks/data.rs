//! Seeded procedural images and their degradations.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ens_tensor::{mix_seed, Rng, Shape, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{EnsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Denoise,
    Deblur,
    Derain,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<TaskKind> {
        match s.to_ascii_lowercase().as_str() {
            "denoise" => Ok(TaskKind::Denoise),
            "deblur" => Ok(TaskKind::Deblur),
            "derain" => Ok(TaskKind::Derain),
            _ => Err(EnsError::config(format!("unknown task {s:?} (expected denoise, deblur or derain)"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Denoise => "denoise",
            TaskKind::Deblur => "deblur",
            TaskKind::Derain => "derain",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Side length of the square images.
    pub size: usize,
    /// Standard deviation of the additive noise (denoise).
    pub noise_sigma: f64,
    /// Length in pixels of the line blur kernel (deblur); odd.
    pub blur_length: usize,
    /// Number of streaks per image (derain).
    pub streaks: usize,
    /// Peak brightness added by one streak (derain).
    pub streak_intensity: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Denoise,
            size: 32,
            noise_sigma: 0.1,
            blur_length: 7,
            streaks: 10,
            streak_intensity: 0.5,
            train: 256,
            val: 64,
            test: 64,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 8 != 0 {
            return Err(EnsError::config(format!("task size {} must be a positive multiple of 8", self.size)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(EnsError::config("noise_sigma must be finite and >= 0"));
        }
        if self.blur_length == 0 || self.blur_length % 2 == 0 || self.blur_length > self.size {
            return Err(EnsError::config("blur_length must be odd, >= 1 and <= size"));
        }
        if !(self.streak_intensity >= 0.0) || !self.streak_intensity.is_finite() {
            return Err(EnsError::config("streak_intensity must be finite and >= 0"));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(EnsError::config("train, val and test sizes must be >= 1"));
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// Seed-partition tag: each split draws from its own stream.
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7a1,
            Split::Val => 0x7a2,
            Split::Test => 0x7a3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

/// One `(degraded, clean)` image pair, each of shape `(1, 3, s, s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub degraded: Tensor,
    pub clean: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskConfig,
    pub split: Split,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn degraded(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.degraded.clone()).collect()
    }

    /// Writes `{split}.bin` (little-endian f64, degraded then clean per
    /// sample) and `{split}.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(fs::File::create(dir.join(format!("{}.bin", self.split)))?);
        for s in &self.samples {
            for v in s.degraded.data().iter().chain(s.clean.data()) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        let manifest = DatasetManifest {
            version: DATASET_VERSION,
            task: self.task.clone(),
            split: self.split,
            seed: self.seed,
            count: self.samples.len(),
            shape: [1, 3, self.task.size, self.task.size],
        };
        fs::write(dir.join(format!("{}.json", self.split)), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, split: Split) -> Result<Dataset> {
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(format!("{split}.json")))?)?;
        if manifest.version != DATASET_VERSION {
            return Err(EnsError::config(format!("unsupported dataset version {}", manifest.version)));
        }
        let shape = Shape(manifest.shape);
        let mut input = BufReader::new(fs::File::open(dir.join(format!("{split}.bin")))?);
        let mut read_tensor = || -> Result<Tensor> {
            let mut bytes = vec![0u8; shape.numel() * 8];
            input.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Ok(Tensor::from_vec(shape, data)?)
        };
        let mut samples = Vec::with_capacity(manifest.count);
        for _ in 0..manifest.count {
            let degraded = read_tensor()?;
            let clean = read_tensor()?;
            samples.push(Sample { degraded, clean });
        }
        Ok(Dataset {
            task: manifest.task,
            split: manifest.split,
            seed: manifest.seed,
            samples,
        })
    }
}

const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    version: u32,
    task: TaskConfig,
    split: Split,
    seed: u64,
    count: usize,
    shape: [usize; 4],
}

/// `n` deterministic pairs of `split`. Image `k` depends only on
/// `(seed, split, k)` and the task parameters.
pub fn generate_dataset(task: &TaskConfig, split: Split, n: usize, seed: u64) -> Result<Dataset> {
    task.validate()?;
    if n == 0 {
        return Err(EnsError::config("dataset size must be >= 1"));
    }
    let base = mix_seed(seed, split.tag());
    let samples = (0..n)
        .into_par_iter()
        .map(|k| {
            let rng = Rng::new(mix_seed(base, k as u64));
            let clean = clean_image(task.size, &mut rng.fork(0));
            let degraded = degrade(task, &clean, &mut rng.fork(1));
            Sample { degraded, clean }
        })
        .collect();
    Ok(Dataset {
        task: task.clone(),
        split,
        seed,
        samples,
    })
}

/// Gradient field plus oriented sinusoids with random polygons on top,
/// clamped to `[0, 1]`.
pub fn clean_image(size: usize, rng: &mut Rng) -> Tensor {
    let s = size as f64;
    let mut img = Tensor::zeros(Shape::new(1, 3, size, size));
    let mut base = [[0.0; 3]; 3];
    for b in &mut base {
        *b = [rng.uniform_range(0.2, 0.8), rng.uniform_range(-0.3, 0.3), rng.uniform_range(-0.3, 0.3)];
    }
    struct Wave {
        dir: (f64, f64),
        freq: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..1 + rng.below(3))
        .map(|_| {
            let theta = rng.uniform_range(0.0, PI);
            let freq = rng.uniform_range(1.0, 6.0);
            let phase = rng.uniform_range(0.0, 2.0 * PI);
            let a = rng.uniform_range(0.05, 0.2);
            let amp = [a * rng.uniform_range(0.5, 1.0), a * rng.uniform_range(0.5, 1.0), a * rng.uniform_range(0.5, 1.0)];
            Wave {
                dir: (theta.cos(), theta.sin()),
                freq,
                phase,
                amp,
            }
        })
        .collect();
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / s, y as f64 / s);
                let mut val = base[c][0] + base[c][1] * (u - 0.5) + base[c][2] * (v - 0.5);
                for w in &waves {
                    val += w.amp[c] * (2.0 * PI * w.freq * (u * w.dir.0 + v * w.dir.1) + w.phase).sin();
                }
                img.set(0, c, y, x, val);
            }
        }
    }
    for _ in 0..rng.below(3) {
        let poly = random_polygon(s, rng);
        let color = [rng.uniform(), rng.uniform(), rng.uniform()];
        for y in 0..size {
            for x in 0..size {
                if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &poly) {
                    for (c, &col) in color.iter().enumerate() {
                        img.set(0, c, y, x, col);
                    }
                }
            }
        }
    }
    img.map(|v| v.clamp(0.0, 1.0))
}

/// Star-shaped polygon: vertices at sorted random angles around a center.
fn random_polygon(s: f64, rng: &mut Rng) -> Vec<(f64, f64)> {
    let (cx, cy) = (rng.uniform_range(0.2, 0.8) * s, rng.uniform_range(0.2, 0.8) * s);
    let radius = rng.uniform_range(0.15, 0.35) * s;
    let mut angles: Vec<f64> = (0..3 + rng.below(3)).map(|_| rng.uniform_range(0.0, 2.0 * PI)).collect();
    angles.sort_by(f64::total_cmp);
    angles
        .into_iter()
        .map(|a| {
            let r = radius * rng.uniform_range(0.6, 1.0);
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

/// Even-odd ray casting.
fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub fn degrade(task: &TaskConfig, clean: &Tensor, rng: &mut Rng) -> Tensor {
    match task.kind {
        TaskKind::Denoise => {
            let mut out = clean.clone();
            for v in out.data_mut() {
                *v += task.noise_sigma * rng.normal();
            }
            out
        }
        TaskKind::Deblur => {
            let theta = rng.uniform_range(0.0, PI);
            convolve_same(clean, &line_kernel(task.blur_length, theta))
        }
        TaskKind::Derain => add_streaks(clean, task.streaks, task.streak_intensity, rng),
    }
}

/// `len x len` kernel with unit mass spread along a centered line at `theta`.
pub fn line_kernel(len: usize, theta: f64) -> Vec<Vec<f64>> {
    let mut k = vec![vec![0.0; len]; len];
    let half = (len / 2) as f64;
    for i in 0..len {
        let t = i as f64 - half;
        let x = (half + t * theta.cos()).round() as usize;
        let y = (half + t * theta.sin()).round() as usize;
        k[y.min(len - 1)][x.min(len - 1)] += 1.0;
    }
    for row in &mut k {
        for v in row.iter_mut() {
            *v /= len as f64;
        }
    }
    k
}

/// Per-channel correlation with edge-clamped borders.
fn convolve_same(img: &Tensor, kernel: &[Vec<f64>]) -> Tensor {
    let s = img.shape();
    let (h, w) = (s.h() as isize, s.w() as isize);
    let half = (kernel.len() / 2) as isize;
    let mut out = Tensor::zeros(s);
    for c in 0..s.c() {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ky, row) in kernel.iter().enumerate() {
                    for (kx, &kv) in row.iter().enumerate() {
                        if kv == 0.0 {
                            continue;
                        }
                        let sy = (y + ky as isize - half).clamp(0, h - 1) as usize;
                        let sx = (x + kx as isize - half).clamp(0, w - 1) as usize;
                        acc += kv * img.at(0, c, sy, sx);
                    }
                }
                out.set(0, c, y as usize, x as usize, acc);
            }
        }
    }
    out
}

/// Bright near-vertical line segments sharing one slant per image.
fn add_streaks(clean: &Tensor, count: usize, intensity: f64, rng: &mut Rng) -> Tensor {
    let mut out = clean.clone();
    let size = clean.shape().h();
    let s = size as f64;
    let slant = PI / 2.0 + rng.uniform_range(-0.35, 0.35);
    let (dx, dy) = (slant.cos(), slant.sin());
    for _ in 0..count {
        let (x0, y0) = (rng.uniform_range(0.0, s), rng.uniform_range(-0.25 * s, s));
        let len = rng.uniform_range(0.25, 0.6) * s;
        let bright = intensity * rng.uniform_range(0.5, 1.0);
        let mut last = None;
        for step in 0..len.ceil() as usize {
            let x = (x0 + step as f64 * dx).floor();
            let y = (y0 + step as f64 * dy).floor();
            if x < 0.0 || y < 0.0 || x >= s || y >= s || last == Some((x, y)) {
                continue;
            }
            last = Some((x, y));
            for c in 0..3 {
                let v = out.at(0, c, y as usize, x as usize);
                out.set(0, c, y as usize, x as usize, v + bright);
            }
        }
    }
    out
}
