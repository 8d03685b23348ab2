//! Gaze samples on disk and in memory: PPM images plus a CSV manifest,
//! subject-based splits, flip augmentation and batch assembly.

mod synth;

pub use synth::{
    generate_samples, generate_synthetic, make_subject, pupil_centers, render_clean, render_sample, stream_seed,
    Subject, SynthConfig,
};

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaze::{flip_label, GazeLabel};
use crate::models::Batch;
use crate::tensor::{no_grad, Real, Tensor};
use crate::vision::{bilinear_resize, RoiBox};

pub const MANIFEST_HEADER: [&str; 13] = [
    "id", "subject", "pitch", "yaw", "face_path", "lx0", "ly0", "lx1", "ly1", "rx0", "ry0", "rx1", "ry1",
];

pub(crate) fn quantize(x: f64, per_unit: f64) -> f64 {
    (x * per_unit).round() / per_unit
}

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || rgb.len() != width * height * 3 {
            return Err(Error::Data(format!(
                "{} bytes do not form a {width}x{height} RGB image",
                rgb.len()
            )));
        }
        Ok(Image { width, height, rgb })
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if !matches!(img, image::DynamicImage::ImageRgb8(_)) {
            return Err(Error::Data(format!("{}: expected an 8-bit RGB (P6) image", path.display())));
        }
        let rgb = img.into_rgb8();
        let (w, h) = rgb.dimensions();
        Image::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.rgb.len() + 20);
        image::codecs::pnm::PnmEncoder::new(&mut out)
            .with_subtype(image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary))
            .encode(self.rgb.as_slice(), self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn hflip(&self) -> Image {
        let mut rgb = Vec::with_capacity(self.rgb.len());
        for row in self.rgb.chunks_exact(self.width * 3) {
            for px in row.chunks_exact(3).rev() {
                rgb.extend_from_slice(px);
            }
        }
        Image { rgb, ..*self }
    }

    /// Planar `[3, H, W]` pixel values in 0..=255.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f64;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub subject: String,
    pub face: Image,
    /// `[left, right]` in image coordinates.
    pub eye_boxes: [RoiBox; 2],
    pub label: GazeLabel,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.face.width as f64, self.face.height as f64);
        for (side, b) in ["left", "right"].iter().zip(&self.eye_boxes) {
            b.validate().map_err(|_| Error::Data(format!("degenerate {side} eye box {b:?}")))?;
            if !b.within(w, h) {
                return Err(Error::Data(format!("{side} eye box {b:?} outside the {w}x{h} image")));
            }
        }
        GazeLabel::validated(self.label.pitch, self.label.yaw)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    /// Directory the manifest's relative image paths resolve against.
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<String> {
        self.samples.iter().map(|s| s.subject.clone()).collect()
    }

    pub fn labels(&self) -> Vec<GazeLabel> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

fn image_rel_path(id: &str) -> String {
    format!("images/{id}.ppm")
}

pub fn write_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(MANIFEST_HEADER).map_err(wrap)?;
    for s in &ds.samples {
        let [l, r] = s.eye_boxes;
        let mut rec = vec![
            s.id.clone(),
            s.subject.clone(),
            format!("{:.6}", s.label.pitch),
            format!("{:.6}", s.label.yaw),
            image_rel_path(&s.id),
        ];
        rec.extend([l.x0, l.y0, l.x1, l.y1, r.x0, r.y0, r.x1, r.y1].iter().map(|v| format!("{v:.2}")));
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Row {
    id: String,
    subject: String,
    label: GazeLabel,
    face_path: PathBuf,
    boxes: [RoiBox; 2],
}

fn parse_row(rec: &csv::StringRecord, root: &Path) -> Result<Row> {
    if rec.len() != MANIFEST_HEADER.len() {
        return Err(Error::Data(format!("expected {} fields, found {}", MANIFEST_HEADER.len(), rec.len())));
    }
    let num = |i: usize| -> Result<f64> {
        let v: f64 = rec[i]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("{} = {:?} is not a number", MANIFEST_HEADER[i], &rec[i])))?;
        if !v.is_finite() {
            return Err(Error::Data(format!("{} is not finite", MANIFEST_HEADER[i])));
        }
        Ok(v)
    };
    let label = GazeLabel::validated(num(2)?, num(3)?)?;
    let boxes = [5, 9].map(|o| -> Result<RoiBox> {
        let b = RoiBox {
            x0: num(o)?,
            y0: num(o + 1)?,
            x1: num(o + 2)?,
            y1: num(o + 3)?,
        };
        if b.x1 <= b.x0 || b.y1 <= b.y0 {
            return Err(Error::Data(format!(
                "{} box needs x1 > x0 and y1 > y0, got {b:?}",
                if o == 5 { "left" } else { "right" }
            )));
        }
        Ok(b)
    });
    let [l, r] = boxes;
    let face = PathBuf::from(rec[4].trim());
    if rec[0].trim().is_empty() || rec[1].trim().is_empty() {
        return Err(Error::Data("empty id or subject".into()));
    }
    Ok(Row {
        id: rec[0].trim().to_string(),
        subject: rec[1].trim().to_string(),
        label,
        face_path: if face.is_absolute() { face } else { root.join(face) },
        boxes: [l?, r?],
    })
}

/// Reads and validates a manifest plus every referenced image. Errors name
/// the 1-based data row.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
        return Err(Error::Data(format!(
            "{}: header must be `{}`",
            path.display(),
            MANIFEST_HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let at = |e: Error| Error::Data(format!("{} row {}: {}", path.display(), i + 1, strip(e)));
        let rec = rec.map_err(|e| at(Error::Data(e.to_string())))?;
        let row = parse_row(&rec, &root).map_err(at)?;
        if !ids.insert(row.id.clone()) {
            return Err(at(Error::Data(format!("duplicate id {:?}", row.id))));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: manifest contains no samples (empty dataset)", path.display())));
    }
    let samples = rows
        .into_par_iter()
        .enumerate()
        .map(|(i, row)| {
            let at = |e: Error| Error::Data(format!("{} row {}: {}", path.display(), i + 1, strip(e)));
            let face = Image::read_ppm(&row.face_path).map_err(at)?;
            let s = Sample {
                id: row.id,
                subject: row.subject,
                face,
                eye_boxes: row.boxes,
                label: row.label,
            };
            s.validate().map_err(at)?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { root, samples })
}

fn strip(e: Error) -> String {
    match e {
        Error::Data(m) | Error::Input(m) => m,
        other => other.to_string(),
    }
}

/// Subject IDs routed to validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub val_subjects: Vec<String>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            val_subjects: ["03", "32", "33", "48", "52", "62", "80", "88", "101", "109"]
                .map(String::from)
                .to_vec(),
        }
    }
}

/// Integer-looking IDs compare numerically ("3" == "03"), others verbatim.
pub fn same_subject(a: &str, b: &str) -> bool {
    match (a.trim().parse::<u64>(), b.trim().parse::<u64>()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a.trim() == b.trim(),
    }
}

impl SplitSpec {
    /// Parses a comma-separated ID list.
    pub fn parse(list: &str) -> Result<Self> {
        let val_subjects: Vec<String> = list
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if val_subjects.is_empty() {
            return Err(Error::Config("validation subject list is empty".into()));
        }
        Ok(SplitSpec { val_subjects })
    }

    pub fn contains(&self, subject: &str) -> bool {
        self.val_subjects.iter().any(|v| same_subject(v, subject))
    }
}

pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    /// Validation IDs that matched no sample.
    pub absent: Vec<String>,
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    if spec.val_subjects.is_empty() {
        return Err(Error::Config("validation subject list is empty".into()));
    }
    let (val, train): (Vec<Sample>, Vec<Sample>) = ds.samples.iter().cloned().partition(|s| spec.contains(&s.subject));
    let subjects = ds.subjects();
    let absent = spec
        .val_subjects
        .iter()
        .filter(|v| !subjects.iter().any(|s| same_subject(v, s)))
        .cloned()
        .collect();
    if val.is_empty() || train.is_empty() {
        return Err(Error::Data(format!(
            "split leaves {} training and {} validation samples; both must be non-empty",
            train.len(),
            val.len()
        )));
    }
    let part = |samples| Dataset {
        root: ds.root.clone(),
        samples,
    };
    Ok(Split {
        train: part(train),
        val: part(val),
        absent,
    })
}

/// Horizontal mirror: image flipped, boxes mirrored with left/right
/// swapped, yaw negated.
pub fn augment_flip(s: &Sample) -> Sample {
    let w = s.face.width as f64;
    let [l, r] = s.eye_boxes;
    Sample {
        id: s.id.clone(),
        subject: s.subject.clone(),
        face: s.face.hflip(),
        eye_boxes: [r.mirrored(w), l.mirrored(w)],
        label: flip_label(s.label),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BatchItem {
    pub index: usize,
    pub flipped: bool,
}

/// Shuffled batch plan over `n` samples. With `flip_augment` every sample
/// appears twice (original and mirrored) before shuffling.
pub fn make_batches(n: usize, batch_size: usize, shuffle_seed: u64, flip_augment: bool) -> Result<Vec<Vec<BatchItem>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut items: Vec<BatchItem> = (0..n).map(|index| BatchItem { index, flipped: false }).collect();
    if flip_augment {
        items.extend((0..n).map(|index| BatchItem { index, flipped: true }));
    }
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(items.chunks(batch_size).map(<[BatchItem]>::to_vec).collect())
}

/// Model input and `[B, 2]` (pitch, yaw) targets for a batch plan. Images
/// whose size differs from `input_size` are bilinearly resized and their
/// boxes rescaled.
pub fn assemble_batch<T: Real>(samples: &[Sample], items: &[BatchItem], input_size: usize) -> Result<(Batch<T>, Tensor<T>)> {
    if items.is_empty() {
        return Err(Error::Input("cannot assemble an empty batch".into()));
    }
    let s = input_size;
    let mut pixels = Vec::with_capacity(items.len() * 3 * s * s);
    let mut boxes = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len() * 2);
    for it in items {
        let src = samples
            .get(it.index)
            .ok_or_else(|| Error::Input(format!("batch index {} out of range", it.index)))?;
        let flipped;
        let sample = if it.flipped {
            flipped = augment_flip(src);
            &flipped
        } else {
            src
        };
        let (w, h) = (sample.face.width, sample.face.height);
        let chw = sample.face.to_chw();
        if (w, h) == (s, s) {
            pixels.extend_from_slice(&chw);
            boxes.push(sample.eye_boxes);
        } else {
            let t = Tensor::<f64>::from_f64(&[3, h, w], &chw)?;
            let r = no_grad(|| bilinear_resize(&t, s, s))?;
            pixels.extend(r.to_vec());
            let (sx, sy) = (s as f64 / w as f64, s as f64 / h as f64);
            boxes.push(sample.eye_boxes.map(|b| b.scaled(sx, sy)));
        }
        labels.extend([sample.label.pitch, sample.label.yaw]);
    }
    let b = items.len();
    Ok((
        Batch {
            images: Tensor::from_f64(&[b, 3, s, s], &pixels)?,
            eye_boxes: Some(boxes),
        },
        Tensor::from_f64(&[b, 2], &labels)?,
    ))
}
