use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetManifest, ManifestEntry, SequenceSample};
use crate::error::{Error, Result};
use crate::format::write_tensor_file;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["open", "narrow", "synechiae"];
pub const GENERATOR_FILE: &str = "generator.txt";

const BACKGROUND: f64 = 0.1;
const FOREGROUND: f64 = 0.85;
const SUPERSAMPLE: usize = 4;
/// Wedge length, contact blob radius and apex jitter as fractions of the image size.
const WEDGE_RADIUS: f64 = 0.45;
const BLOB_RADIUS: f64 = 0.09;
const APEX_JITTER: f64 = 1.0 / 16.0;
/// Measurement annulus, clear of the blob and inside the wedge.
const ANNULUS: (f64, f64) = (0.2, 0.4);
const MEASURE_RING_STEP: f64 = 0.5;
const MEASURE_ANGLES: usize = 720;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_eyes: usize,
    pub sequences_per_eye: usize,
    pub seq_len: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    /// Aperture range in degrees for open, narrow and synechiae.
    pub class_ranges: [(f64, f64); 3],
    /// Relative class frequencies; normalized internally.
    pub class_proportions: [f64; 3],
    /// Probability that a sequence takes its eye's dominant class.
    pub dominant_bias: f64,
    /// Largest aperture change across one sequence, in degrees.
    pub max_drift: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_eyes: 20,
            sequences_per_eye: 24,
            seq_len: 5,
            image_size: 32,
            noise_sigma: 0.05,
            class_ranges: [(55.0, 80.0), (18.0, 35.0), (0.0, 8.0)],
            class_proportions: [1.0, 1.0, 1.0],
            dominant_bias: 0.6,
            max_drift: 2.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_eyes == 0 || self.sequences_per_eye == 0 || self.seq_len == 0 {
            return bad("eyes, sequences per eye and sequence length must be positive".into());
        }
        if self.image_size < 16 {
            return bad(format!("image size {} is below the minimum of 16", self.image_size));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.dominant_bias) {
            return bad(format!("dominant bias must lie in [0,1], got {}", self.dominant_bias));
        }
        if !(self.max_drift >= 0.0 && self.max_drift.is_finite()) {
            return bad(format!("max drift must be finite and non-negative, got {}", self.max_drift));
        }
        for (k, &(lo, hi)) in self.class_ranges.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi < 180.0) {
                return bad(format!("{} range [{lo},{hi}] must satisfy 0 <= lo <= hi < 180", CLASS_NAMES[k]));
            }
        }
        for a in 0..3 {
            for b in a + 1..3 {
                let (l1, h1) = self.class_ranges[a];
                let (l2, h2) = self.class_ranges[b];
                if l1 <= h2 && l2 <= h1 {
                    return bad(format!("class ranges of {} and {} overlap", CLASS_NAMES[a], CLASS_NAMES[b]));
                }
            }
        }
        if self.class_proportions.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || self.class_proportions.iter().sum::<f64>() <= 0.0 {
            return bad(format!("class proportions {:?} must be non-negative with a positive sum", self.class_proportions));
        }
        Ok(())
    }

    pub fn num_sequences(&self) -> usize {
        self.num_eyes * self.sequences_per_eye
    }

    /// Per-class totals by largest remainder; ties go to the lower class.
    pub fn class_totals(&self) -> [usize; 3] {
        let n = self.num_sequences();
        let sum: f64 = self.class_proportions.iter().sum();
        let exact: Vec<f64> = self.class_proportions.iter().map(|p| p / sum * n as f64).collect();
        let mut totals = [0usize; 3];
        for k in 0..3 {
            totals[k] = exact[k].floor() as usize;
        }
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let mut left = n - totals.iter().sum::<usize>();
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            totals[k] += 1;
            left -= 1;
        }
        totals
    }
}

/// Ground-truth geometry of one rendered sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceGeometry {
    /// Apex position as (row, column) in pixel coordinates.
    pub apex: (f64, f64),
    /// Direction of the wedge bisector in degrees.
    pub orientation: f64,
    /// Aperture of each slice in degrees.
    pub apertures: Vec<f64>,
    pub contact_blob: bool,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub config: GeneratorConfig,
    pub manifest: DatasetManifest,
    pub samples: Vec<SequenceSample>,
    pub geometry: Vec<SequenceGeometry>,
}

fn draw_weighted(rng: &mut ChaCha8Rng, weights: &[usize; 3]) -> usize {
    let total: usize = weights.iter().sum();
    let mut r = rng.random_range(0..total);
    for (k, &w) in weights.iter().enumerate() {
        if r < w {
            return k;
        }
        r -= w;
    }
    unreachable!("weights sum to total")
}

/// Labels drawn without replacement from the exact class pool, biased
/// towards a per-eye dominant class.
fn assign_labels(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut remaining = config.class_totals();
    let mut labels = Vec::with_capacity(config.num_sequences());
    for _ in 0..config.num_eyes {
        let dominant = draw_weighted(rng, &remaining);
        for _ in 0..config.sequences_per_eye {
            let label = if remaining[dominant] > 0 && rng.random_bool(config.dominant_bias) {
                dominant
            } else {
                draw_weighted(rng, &remaining)
            };
            remaining[label] -= 1;
            labels.push(label);
        }
    }
    labels
}

fn sample_geometry(config: &GeneratorConfig, label: usize, rng: &mut ChaCha8Rng) -> SequenceGeometry {
    let s = config.image_size as f64;
    let centre = (s - 1.0) / 2.0;
    let jitter = APEX_JITTER * s;
    let apex = (centre + rng.random_range(-jitter..=jitter), centre + rng.random_range(-jitter..=jitter));
    let orientation = rng.random_range(0.0..360.0);
    let (lo, hi) = config.class_ranges[label];
    let base = rng.random_range(lo..=hi);
    let down = (lo - base).max(-config.max_drift);
    let up = (hi - base).min(config.max_drift);
    let drift = if up > down { rng.random_range(down..=up) } else { 0.0 };
    let t = config.seq_len;
    let apertures = (0..t)
        .map(|i| if t == 1 { base } else { base + drift * i as f64 / (t - 1) as f64 })
        .collect();
    SequenceGeometry {
        apex,
        orientation,
        apertures,
        contact_blob: label == 2,
    }
}

fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Renders one noise-free slice by supersampled coverage of the wedge and blob.
fn render_slice(size: usize, geom: &SequenceGeometry, aperture: f64, out: &mut [f32]) {
    let s = size as f64;
    let radius = WEDGE_RADIUS * s;
    let blob = BLOB_RADIUS * s;
    let half = aperture.to_radians() / 2.0;
    let dir = geom.orientation.to_radians();
    let step = 1.0 / SUPERSAMPLE as f64;
    for r in 0..size {
        for c in 0..size {
            let mut hits = 0usize;
            for sr in 0..SUPERSAMPLE {
                for sc in 0..SUPERSAMPLE {
                    let y = r as f64 - 0.5 + (sr as f64 + 0.5) * step - geom.apex.0;
                    let x = c as f64 - 0.5 + (sc as f64 + 0.5) * step - geom.apex.1;
                    let dist = x.hypot(y);
                    let inside = (dist <= radius && angular_distance(y.atan2(x), dir) <= half)
                        || (geom.contact_blob && dist <= blob);
                    hits += inside as usize;
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            out[r * size + c] = (BACKGROUND + (FOREGROUND - BACKGROUND) * cover) as f32;
        }
    }
}

/// Renders a `T*S*S` sequence from `geom` and adds clamped Gaussian noise.
pub fn render_sequence(size: usize, geom: &SequenceGeometry, noise_sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    let area = size * size;
    let mut pixels = vec![0f32; geom.apertures.len() * area];
    for (t, &a) in geom.apertures.iter().enumerate() {
        render_slice(size, geom, a, &mut pixels[t * area..(t + 1) * area]);
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("sigma validated");
        for p in &mut pixels {
            *p = (*p as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    pixels
}

/// Estimates the wedge aperture of one slice. Circles around `apex` spanning
/// the measurement annulus are sampled at fixed angular steps with bilinear
/// interpolation; the bright fraction of samples is scaled to 360 degrees.
pub fn measure_aperture(slice: &[f32], size: usize, apex: (f64, f64)) -> f64 {
    let s = size as f64;
    let (inner, outer) = (ANNULUS.0 * s, ANNULUS.1 * s);
    let threshold = (BACKGROUND + FOREGROUND) / 2.0;
    let pixel = |r: isize, c: isize| {
        let (r, c) = (r.clamp(0, size as isize - 1) as usize, c.clamp(0, size as isize - 1) as usize);
        slice[r * size + c] as f64
    };
    let sample = |y: f64, x: f64| {
        let (r0, c0) = (y.floor(), x.floor());
        let (fy, fx) = (y - r0, x - c0);
        let (r, c) = (r0 as isize, c0 as isize);
        let top = pixel(r, c) * (1.0 - fx) + pixel(r, c + 1) * fx;
        let bottom = pixel(r + 1, c) * (1.0 - fx) + pixel(r + 1, c + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    };
    let rings = ((outer - inner) / MEASURE_RING_STEP).round() as usize + 1;
    let (mut total, mut bright) = (0usize, 0usize);
    for i in 0..rings {
        let radius = inner + i as f64 * MEASURE_RING_STEP;
        for a in 0..MEASURE_ANGLES {
            let theta = std::f64::consts::TAU * a as f64 / MEASURE_ANGLES as f64;
            let v = sample(apex.0 + radius * theta.sin(), apex.1 + radius * theta.cos());
            total += 1;
            bright += (v > threshold) as usize;
        }
    }
    360.0 * bright as f64 / total as f64
}

fn sequence_path(i: usize) -> String {
    format!("sequences/seq_{i:06}.smat")
}

/// Builds the full dataset in memory. Every byte depends only on `config`.
pub fn generate_synthetic(config: &GeneratorConfig) -> Result<GeneratedDataset> {
    config.validate()?;
    let mut label_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let labels = assign_labels(config, &mut label_rng);
    let mut entries = Vec::with_capacity(labels.len());
    let mut samples = Vec::with_capacity(labels.len());
    let mut geometry = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let eye_id = (i / config.sequences_per_eye) as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        let geom = sample_geometry(config, label, &mut rng);
        let pixels = render_sequence(config.image_size, &geom, config.noise_sigma, &mut rng);
        entries.push(ManifestEntry {
            sequence_id: i,
            path: sequence_path(i),
            label,
            eye_id,
        });
        samples.push(SequenceSample {
            pixels,
            seq_len: config.seq_len,
            size: config.image_size,
            label,
            eye_id,
            sequence_id: i,
        });
        geometry.push(geom);
    }
    Ok(GeneratedDataset {
        config: config.clone(),
        manifest: DatasetManifest {
            root: Default::default(),
            entries,
        },
        samples,
        geometry,
    })
}

/// Writes the manifest, sequence files and generator echo under `root`.
pub fn write_dataset(dataset: &GeneratedDataset, root: &Path) -> Result<DatasetManifest> {
    let dir = root.join("sequences");
    fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    for (entry, sample) in dataset.manifest.entries.iter().zip(&dataset.samples) {
        let t = Tensor::new(&[sample.seq_len, sample.size, sample.size], sample.pixels.clone())?;
        write_tensor_file(&root.join(&entry.path), &t)?;
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        entries: dataset.manifest.entries.clone(),
    };
    manifest.write()?;
    let echo = root.join(GENERATOR_FILE);
    fs::write(&echo, crate::config::render_generator(&dataset.config))
        .map_err(|e| Error::io(format!("writing {}", echo.display()), e))?;
    Ok(manifest)
}
