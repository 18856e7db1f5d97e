//! Deterministic synthetic two-task datasets.
//!
//! `Faces` pairs scalar regression (ellipse radius latent) with binary
//! classification (texture frequency); `Scans` pairs dense regression (a
//! fixed nonlinear per-region intensity remap) with 3-class segmentation
//! of the same blob map. Both tasks share the localisation subproblem by
//! construction, so shared early features are genuinely useful.
//!
//! Generation is a pure function of (n, shape, seed, version): image i is
//! drawn from its own counter-mode RNG stream, so regeneration is bitwise
//! identical and index-deterministic under parallel generation.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const GENERATOR_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SFGD";
const PIXEL_NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Scalar regression + image classification (portrait-like roles).
    Faces,
    /// Dense regression + segmentation (medical-like roles).
    Scans,
}

/// A two-task dataset. For `Faces`, `reg` holds one scalar per image and
/// `cls` one label per image; for `Scans` both are per-pixel maps.
pub struct SynthDataset {
    pub kind: DatasetKind,
    pub n: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub images: Vec<f64>,
    pub reg: Vec<f64>,
    pub cls: Vec<i32>,
    pub seed: u64,
    pub version: u32,
}

impl SynthDataset {
    pub fn num_classes(&self) -> usize {
        match self.kind {
            DatasetKind::Faces => 2,
            DatasetKind::Scans => 3,
        }
    }

    /// Fixed dynamic range of the regression target, used for PSNR.
    pub fn reg_range(&self) -> f64 {
        1.0
    }

    fn image_len(&self) -> usize {
        self.channels * self.h * self.w
    }

    fn reg_stride(&self) -> usize {
        match self.kind {
            DatasetKind::Faces => 1,
            DatasetKind::Scans => self.h * self.w,
        }
    }

    /// Split into a leading training set and trailing held-out set.
    pub fn split_at(&self, n_train: usize) -> Result<(SynthDataset, SynthDataset)> {
        if n_train == 0 || n_train >= self.n {
            return Err(Error::Invalid(format!(
                "split_at({n_train}) on a dataset of {} items",
                self.n
            )));
        }
        let take = |lo: usize, hi: usize| SynthDataset {
            kind: self.kind,
            n: hi - lo,
            channels: self.channels,
            h: self.h,
            w: self.w,
            images: self.images[lo * self.image_len()..hi * self.image_len()].to_vec(),
            reg: self.reg[lo * self.reg_stride()..hi * self.reg_stride()].to_vec(),
            cls: self.cls[lo * self.reg_stride()..hi * self.reg_stride()].to_vec(),
            seed: self.seed,
            version: self.version,
        };
        Ok((take(0, n_train), take(n_train, self.n)))
    }

    /// Assemble a batch of images plus targets for the given indices.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let il = self.image_len();
        let rs = self.reg_stride();
        let mut images = Vec::with_capacity(indices.len() * il);
        let mut reg = Vec::with_capacity(indices.len() * rs);
        let mut cls = Vec::with_capacity(indices.len() * rs);
        for &i in indices {
            if i >= self.n {
                return Err(Error::Invalid(format!("batch index {i} out of range")));
            }
            images.extend_from_slice(&self.images[i * il..(i + 1) * il]);
            reg.extend_from_slice(&self.reg[i * rs..(i + 1) * rs]);
            cls.extend(self.cls[i * rs..(i + 1) * rs].iter().map(|&v| v as usize));
        }
        let images = Tensor::from_vec(images, &[indices.len(), self.channels, self.h, self.w])?;
        Ok(Batch {
            images,
            reg,
            cls,
            kind: self.kind,
            h: self.h,
            w: self.w,
        })
    }
}

/// One mini-batch of inputs and raw targets.
pub struct Batch {
    pub images: Tensor,
    pub reg: Vec<f64>,
    pub cls: Vec<usize>,
    pub kind: DatasetKind,
    pub h: usize,
    pub w: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Regression target tensor shaped to match the model head output.
    pub fn reg_target(&self) -> Result<Tensor> {
        let b = self.len();
        Ok(match self.kind {
            DatasetKind::Faces => Tensor::from_vec(self.reg.clone(), &[b, 1])?,
            DatasetKind::Scans => Tensor::from_vec(self.reg.clone(), &[b, 1, self.h, self.w])?,
        })
    }
}

fn stream_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().clamp(1e-12, 1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Ellipse-radius regression + texture-frequency classification.
pub fn gen_faces_like(n: usize, h: usize, w: usize, seed: u64) -> Result<SynthDataset> {
    if n == 0 || h < 16 || w < 16 {
        return Err(Error::Invalid(format!(
            "gen_faces_like: need n >= 1 and at least 16x16 images, got n={n} {h}x{w}"
        )));
    }
    let mut images = vec![0.0; n * h * w];
    let mut reg = vec![0.0; n];
    let mut cls = vec![0i32; n];
    let r_min = 0.125 * h.min(w) as f64;
    let r_max = 0.375 * h.min(w) as f64;
    for i in 0..n {
        let mut rng = stream_rng(seed, i as u64);
        // latent factors first, in a fixed order
        let a: f64 = rng.gen();
        let class = rng.gen_bool(0.5) as usize;
        let margin = r_max.ceil() as usize;
        let cx = rng.gen_range(margin..w - margin) as f64;
        let cy = rng.gen_range(margin..h - margin) as f64;
        let rx = r_min + a * (r_max - r_min);
        let ry = 0.75 * rx;
        let freq = if class == 0 { 2.0 } else { 5.0 };
        let img = &mut images[i * h * w..(i + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let inside = dx * dx + dy * dy <= 1.0;
                let base = if inside {
                    0.55 + 0.35
                        * (2.0 * std::f64::consts::PI * freq * (x + y) as f64 / w as f64).sin()
                } else {
                    0.08
                };
                img[y * w + x] = base + PIXEL_NOISE_SIGMA * gaussian(&mut rng);
            }
        }
        reg[i] = a;
        cls[i] = class as i32;
    }
    Ok(SynthDataset {
        kind: DatasetKind::Faces,
        n,
        channels: 1,
        h,
        w,
        images,
        reg,
        cls,
        seed,
        version: GENERATOR_VERSION,
    })
}

/// Integer radius of the class-1 and class-2 blobs for a given image size.
pub fn scan_blob_radii(h: usize, w: usize) -> (usize, usize) {
    let m = h.min(w) as f64;
    (((0.1875 * m).round() as usize).max(2), ((0.15 * m).round() as usize).max(2))
}

/// Count of lattice points inside a disc of integer radius r; with integer
/// blob centers every generated blob covers exactly this many pixels.
pub fn disc_pixel_count(r: usize) -> usize {
    let r2 = (r * r) as i64;
    let mut count = 0;
    for dy in -(r as i64)..=r as i64 {
        for dx in -(r as i64)..=r as i64 {
            if dx * dx + dy * dy <= r2 {
                count += 1;
            }
        }
    }
    count
}

const SCAN_BASE: [f64; 3] = [0.1, 0.45, 0.8];

/// The fixed nonlinear intensity remap applied per region (dense
/// regression target).
pub fn scan_remap(base: f64) -> f64 {
    base * base
}

/// Blob image + per-region remap target + blob label map.
pub fn gen_scans_like(n: usize, h: usize, w: usize, seed: u64) -> Result<SynthDataset> {
    if n == 0 || h < 16 || w < 16 {
        return Err(Error::Invalid(format!(
            "gen_scans_like: need n >= 1 and at least 16x16 images, got n={n} {h}x{w}"
        )));
    }
    let (r1, r2) = scan_blob_radii(h, w);
    let mut images = vec![0.0; n * h * w];
    let mut reg = vec![0.0; n * h * w];
    let mut cls = vec![0i32; n * h * w];
    for i in 0..n {
        let mut rng = stream_rng(seed, i as u64);
        // one blob per foreground class, integer centers, no overlap
        let (c1x, c1y) = (
            rng.gen_range(r1..w - r1) as i64,
            rng.gen_range(r1..h - r1) as i64,
        );
        let (c2x, c2y) = loop {
            let x = rng.gen_range(r2..w - r2) as i64;
            let y = rng.gen_range(r2..h - r2) as i64;
            let d2 = (x - c1x).pow(2) + (y - c1y).pow(2);
            let min_d = (r1 + r2 + 1) as i64;
            if d2 > min_d * min_d {
                break (x, y);
            }
        };
        let img = &mut images[i * h * w..(i + 1) * h * w];
        let rm = &mut reg[i * h * w..(i + 1) * h * w];
        let lm = &mut cls[i * h * w..(i + 1) * h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let in1 = (x - c1x).pow(2) + (y - c1y).pow(2) <= (r1 * r1) as i64;
                let in2 = (x - c2x).pow(2) + (y - c2y).pow(2) <= (r2 * r2) as i64;
                let label = if in1 { 1 } else if in2 { 2 } else { 0 };
                let s = (y as usize) * w + x as usize;
                lm[s] = label;
                rm[s] = scan_remap(SCAN_BASE[label as usize]);
                img[s] = SCAN_BASE[label as usize] + PIXEL_NOISE_SIGMA * gaussian(&mut rng);
            }
        }
    }
    Ok(SynthDataset {
        kind: DatasetKind::Scans,
        n,
        channels: 1,
        h,
        w,
        images,
        reg,
        cls,
        seed,
        version: GENERATOR_VERSION,
    })
}

pub fn generate(kind: DatasetKind, n: usize, h: usize, w: usize, seed: u64) -> Result<SynthDataset> {
    match kind {
        DatasetKind::Faces => gen_faces_like(n, h, w, seed),
        DatasetKind::Scans => gen_scans_like(n, h, w, seed),
    }
}

/// Write the dataset: header (magic, version, kind, seed, shapes) followed
/// by raw little-endian f64 / i32 sections.
pub fn save(ds: &SynthDataset, path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io = |e| Error::io(path.display().to_string(), e);
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&ds.version.to_le_bytes()).map_err(io)?;
    f.write_all(&[match ds.kind {
        DatasetKind::Faces => 0u8,
        DatasetKind::Scans => 1u8,
    }])
    .map_err(io)?;
    f.write_all(&ds.seed.to_le_bytes()).map_err(io)?;
    for v in [ds.n as u32, ds.channels as u32, ds.h as u32, ds.w as u32] {
        f.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    f.write_all(&(ds.reg.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&(ds.cls.len() as u64).to_le_bytes()).map_err(io)?;
    let mut buf = Vec::with_capacity(ds.images.len() * 8);
    for v in &ds.images {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &ds.reg {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in &ds.cls {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SynthDataset> {
    let mut f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 49 || &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a dataset file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != GENERATOR_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported dataset version {version}",
            path.display()
        )));
    }
    let kind = match bytes[8] {
        0 => DatasetKind::Faces,
        1 => DatasetKind::Scans,
        k => return Err(Error::Format(format!("{}: unknown kind tag {k}", path.display()))),
    };
    let seed = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
    let mut off = 17;
    let next_u32 = |bytes: &[u8], off: &mut usize| {
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap()) as usize;
        *off += 4;
        v
    };
    let n = next_u32(&bytes, &mut off);
    let channels = next_u32(&bytes, &mut off);
    let h = next_u32(&bytes, &mut off);
    let w = next_u32(&bytes, &mut off);
    let reg_len = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    let cls_len = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    let img_len = n * channels * h * w;
    let need = off + img_len * 8 + reg_len * 8 + cls_len * 4;
    if bytes.len() != need {
        return Err(Error::Format(format!(
            "{}: truncated or oversized payload ({} bytes, expected {need})",
            path.display(),
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(img_len);
    for c in bytes[off..off + img_len * 8].chunks_exact(8) {
        images.push(f64::from_le_bytes(c.try_into().unwrap()));
    }
    off += img_len * 8;
    let mut reg = Vec::with_capacity(reg_len);
    for c in bytes[off..off + reg_len * 8].chunks_exact(8) {
        reg.push(f64::from_le_bytes(c.try_into().unwrap()));
    }
    off += reg_len * 8;
    let mut cls = Vec::with_capacity(cls_len);
    for c in bytes[off..off + cls_len * 4].chunks_exact(4) {
        cls.push(i32::from_le_bytes(c.try_into().unwrap()));
    }
    Ok(SynthDataset {
        kind,
        n,
        channels,
        h,
        w,
        images,
        reg,
        cls,
        seed,
        version,
    })
}

/// Mini-batch index stream in a seeded shuffle order; reshuffles per epoch
/// deterministically and drops the trailing partial batch.
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> BatchStream {
        let mut s = BatchStream {
            n,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order = (0..self.n).collect();
        // Fisher-Yates
        for i in (1..self.n).rev() {
            let j = rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let b = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        b
    }
}

/// Optional augmentation: nearest-neighbour scale (about 1.0) and rotation
/// (radians) around the image center.
pub fn augment_scale_rotate(img: &[f64], h: usize, w: usize, scale: f64, angle: f64) -> Vec<f64> {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (s, c) = angle.sin_cos();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            // inverse map
            let dy = (y as f64 - cy) / scale;
            let dx = (x as f64 - cx) / scale;
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let ix = sx.round() as i64;
            let iy = sy.round() as i64;
            if ix >= 0 && ix < w as i64 && iy >= 0 && iy < h as i64 {
                out[y * w + x] = img[iy as usize * w + ix as usize];
            }
        }
    }
    out
}
