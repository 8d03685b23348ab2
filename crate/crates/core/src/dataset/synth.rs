//! Deterministic synthetic face renderer: gaze is encoded by where the
//! iris/pupil sits inside each eye.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{quantize, write_manifest, Image, Sample};
use crate::error::{Error, Result};
use crate::gaze::GazeLabel;
use crate::vision::{landmarks_to_eye_boxes, EyeCorners, RoiBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub num_subjects: usize,
    pub samples_per_subject: usize,
    pub pitch_range: [f64; 2],
    pub yaw_range: [f64; 2],
    /// Pupil displacement in pixels per radian of gaze.
    pub pupil_gain: f64,
    /// Gaussian pixel noise, as a fraction of the 0–255 range.
    pub noise_sigma: f64,
    /// Per-sample multiplicative brightness change, uniform in `±jitter`.
    pub brightness_jitter: f64,
    pub seed: u64,
    /// Subject `i` gets the two-digit ID `first_subject + i·subject_stride`.
    pub first_subject: usize,
    pub subject_stride: usize,
    /// Eye box side as a multiple of the corner distance, minus one.
    pub eye_box_margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            num_subjects: 20,
            samples_per_subject: 200,
            pitch_range: [-0.7, 0.7],
            yaw_range: [-0.7, 0.7],
            pupil_gain: 8.0,
            noise_sigma: 8.0 / 255.0,
            brightness_jitter: 0.1,
            seed: 0,
            first_subject: 3,
            subject_stride: 5,
            eye_box_margin: 0.25,
        }
    }
}

/// Eye geometry at image size 64; scaled linearly for other sizes.
const SCLERA_A: f64 = 11.0;
const SCLERA_B: f64 = 9.0;
const IRIS_R: f64 = 2.75;
const PUPIL_R: f64 = 1.25;
const SCLERA_LEVEL: f64 = 235.0;
const PUPIL_LEVEL: f64 = 15.0;
const SUPERSAMPLE: usize = 4;

fn quarter(x: f64) -> f64 {
    (x * 4.0).round() / 4.0
}

impl SynthConfig {
    fn scale(&self) -> f64 {
        self.image_size as f64 / 64.0
    }

    /// Sclera semi-axes and iris/pupil radii in pixels.
    pub fn eye_geometry(&self) -> (f64, f64, f64, f64) {
        let s = self.scale();
        (quarter(SCLERA_A * s), quarter(SCLERA_B * s), IRIS_R * s, PUPIL_R * s)
    }

    pub fn subject_id(&self, i: usize) -> String {
        format!("{:02}", self.first_subject + i * self.subject_stride)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 32 {
            return bad(format!("image_size {} is below 32", self.image_size));
        }
        if self.num_subjects == 0 || self.samples_per_subject == 0 || self.subject_stride == 0 {
            return bad("num_subjects, samples_per_subject and subject_stride must be positive".into());
        }
        for (name, r) in [("pitch_range", self.pitch_range), ("yaw_range", self.yaw_range)] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) || r[0] < -1.5 || r[1] > 1.5 {
                return bad(format!("{name} {r:?} must be an increasing interval within ±1.5 rad"));
            }
        }
        if !(self.noise_sigma >= 0.0 && (0.0..1.0).contains(&self.brightness_jitter) && self.pupil_gain >= 0.0) {
            return bad("noise_sigma, pupil_gain must be ≥ 0 and brightness_jitter in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.eye_box_margin) {
            return bad(format!("eye_box_margin {} outside [0, 1]", self.eye_box_margin));
        }
        let (a, b, _, rp) = self.eye_geometry();
        let ymax = self.yaw_range[0].abs().max(self.yaw_range[1].abs());
        let pmax = self.pitch_range[0].abs().max(self.pitch_range[1].abs());
        let (ox, oy) = (self.pupil_gain * ymax + rp, self.pupil_gain * pmax + rp);
        if (ox / a).powi(2) + (oy / b).powi(2) >= 1.0 {
            return bad(format!(
                "pupil_gain {} moves the pupil outside the eye for the configured ranges",
                self.pupil_gain
            ));
        }
        Ok(())
    }
}

/// Fixed appearance of one synthetic person.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub skin: [f64; 3],
    pub iris: [f64; 3],
    pub background: f64,
    pub face_center: (f64, f64),
    pub face_axes: (f64, f64),
    /// Left and right eye centers in pixels (quarter-pixel grid).
    pub eyes: [(f64, f64); 2],
}

/// Deterministic per-stream seed from `(seed, a, b)` (SplitMix64 finalizer).
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SUBJECT_STREAM: u64 = u64::MAX;

pub fn make_subject(cfg: &SynthConfig, i: usize) -> Subject {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, i as u64, SUBJECT_STREAM));
    let s = cfg.image_size as f64;
    let tone: f64 = rng.random_range(0.3..0.85);
    let skin = [90.0 + 140.0 * tone, 60.0 + 120.0 * tone, 45.0 + 100.0 * tone];
    let hue: f64 = rng.random_range(0.0..1.0);
    let iris = [40.0 + 60.0 * hue, 35.0 + 40.0 * (1.0 - hue), 30.0 + 70.0 * hue];
    let background = rng.random_range(20.0..90.0);
    let fc = (s / 2.0 + rng.random_range(-2.0..2.0) * s / 64.0, s / 2.0 + rng.random_range(-1.0..3.0) * s / 64.0);
    let face_axes = (0.40 * s, 0.48 * s);
    let cx = quarter(fc.0);
    let ey = quarter(0.40 * s + rng.random_range(-2.0..2.0) * s / 64.0);
    let half = quarter(0.22 * s + rng.random_range(-1.5..1.5) * s / 64.0);
    Subject {
        id: cfg.subject_id(i),
        skin,
        iris,
        background,
        face_center: fc,
        face_axes,
        eyes: [(cx - half, ey), (cx + half, ey)],
    }
}

/// Pupil centers for a label: eye center + (gain·yaw, gain·pitch).
pub fn pupil_centers(cfg: &SynthConfig, subject: &Subject, label: GazeLabel) -> [(f64, f64); 2] {
    let (dx, dy) = (cfg.pupil_gain * label.yaw, cfg.pupil_gain * label.pitch);
    subject.eyes.map(|(x, y)| (x + dx, y + dy))
}

fn inside_ellipse(x: f64, y: f64, c: (f64, f64), a: f64, b: f64) -> bool {
    let (u, v) = ((x - c.0) / a, (y - c.1) / b);
    u * u + v * v <= 1.0
}

/// Anti-aliased, noise-free render as floating-point RGB (HWC).
pub fn render_clean(cfg: &SynthConfig, subject: &Subject, label: GazeLabel) -> Vec<f64> {
    let n = cfg.image_size;
    let (a, b, ri, rp) = cfg.eye_geometry();
    let pupils = pupil_centers(cfg, subject, label);
    let shade = |x: f64, y: f64| -> [f64; 3] {
        for (eye, p) in subject.eyes.iter().zip(&pupils) {
            if inside_ellipse(x, y, *eye, a, b) {
                let d2 = (x - p.0).powi(2) + (y - p.1).powi(2);
                return if d2 <= rp * rp {
                    [PUPIL_LEVEL; 3]
                } else if d2 <= ri * ri {
                    subject.iris
                } else {
                    [SCLERA_LEVEL; 3]
                };
            }
        }
        if inside_ellipse(x, y, subject.face_center, subject.face_axes.0, subject.face_axes.1) {
            subject.skin
        } else {
            [subject.background; 3]
        }
    };
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut out = vec![0.0; n * n * 3];
    for py in 0..n {
        for px in 0..n {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let c = shade(x, y);
                    acc.iter_mut().zip(c).for_each(|(s, v)| *s += v);
                }
            }
            let o = (py * n + px) * 3;
            out[o..o + 3].iter_mut().zip(acc).for_each(|(d, v)| *d = v * inv);
        }
    }
    out
}

/// Renders sample `k` of subject `i`: label, eye boxes and final 8-bit image.
pub fn render_sample(cfg: &SynthConfig, subject_index: usize, subject: &Subject, k: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, subject_index as u64, k as u64));
    let pitch = quantize(rng.random_range(cfg.pitch_range[0]..=cfg.pitch_range[1]), 1e6);
    let yaw = quantize(rng.random_range(cfg.yaw_range[0]..=cfg.yaw_range[1]), 1e6);
    let label = GazeLabel::validated(pitch, yaw)?;
    let gain = 1.0 + rng.random_range(-1.0..=1.0) * cfg.brightness_jitter;
    let noise = Normal::new(0.0, cfg.noise_sigma * 255.0).map_err(|e| Error::Config(e.to_string()))?;
    let clean = render_clean(cfg, subject, label);
    let rgb = clean
        .iter()
        .map(|&v| {
            let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v * gain + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    let (a, _, _, _) = cfg.eye_geometry();
    let size = cfg.image_size as f64;
    let corners = subject.eyes.map(|(x, y)| EyeCorners {
        a: (x - a, y),
        b: (x + a, y),
    });
    let (left, right) = landmarks_to_eye_boxes(&corners[0], &corners[1], cfg.eye_box_margin, size, size)?;
    // quarter-pixel boxes survive the 2-decimal manifest and mirror exactly
    let snap = |b: RoiBox| RoiBox::new(quantize(b.x0, 4.0), quantize(b.y0, 4.0), quantize(b.x1, 4.0), quantize(b.y1, 4.0));
    Ok(Sample {
        id: format!("{}_{k:04}", subject.id),
        subject: subject.id.clone(),
        face: Image::new(cfg.image_size, cfg.image_size, rgb)?,
        eye_boxes: [snap(left)?, snap(right)?],
        label,
    })
}

/// Generates the whole set in memory, in manifest order.
pub fn generate_samples(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let subjects: Vec<Subject> = (0..cfg.num_subjects).map(|i| make_subject(cfg, i)).collect();
    let jobs: Vec<(usize, usize)> = (0..cfg.num_subjects)
        .flat_map(|i| (0..cfg.samples_per_subject).map(move |k| (i, k)))
        .collect();
    jobs.par_iter()
        .map(|&(i, k)| render_sample(cfg, i, &subjects[i], k))
        .collect()
}

/// Writes `images/<id>.ppm` and `manifest.csv` under `out_dir`.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<super::Dataset> {
    let samples = generate_samples(cfg)?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    samples
        .par_iter()
        .try_for_each(|s| s.face.write_ppm(&images.join(format!("{}.ppm", s.id))))?;
    let ds = super::Dataset {
        root: out_dir.to_path_buf(),
        samples,
    };
    write_manifest(&ds, &out_dir.join("manifest.csv"))?;
    Ok(ds)
}
