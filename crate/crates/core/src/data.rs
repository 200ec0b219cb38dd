//! Image datasets: the synthetic shape generator and the `VIGD` file format.
//!
//! `VIGD` layout, integers little-endian:
//!
//! ```text
//! "VIGD"  version:u8  count:u32  H:u16  W:u16  C:u8  num_classes:u16
//! count × { H·W·C pixels:u8 (row-major, channels last)  label:u16 }
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Result, VigError};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"VIGD";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 2 + 2 + 1 + 2;

/// Uniform-resolution `u8` images with class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<u16>,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let rec = height * width * channels;
        if rec == 0 || pixels.len() != rec * labels.len() {
            return Err(VigError::Format(format!(
                "{} pixel bytes for {} records of {height}×{width}×{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(VigError::Index(format!("label {bad} with {num_classes} classes")));
        }
        Ok(Dataset {
            height,
            width,
            channels,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn record_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let r = self.record_len();
        &self.pixels[i * r..(i + 1) * r]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.record_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_classes: self.num_classes,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// First `n` records and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let all: Vec<usize> = (0..self.len()).collect();
        (self.subset(&all[..n]), self.subset(&all[n..]))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let too_big = |what: &str| VigError::Format(format!("{what} does not fit the VIGD header"));
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (self.record_len() + 2));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&u32::try_from(self.len()).map_err(|_| too_big("count"))?.to_le_bytes());
        out.extend_from_slice(&u16::try_from(self.height).map_err(|_| too_big("height"))?.to_le_bytes());
        out.extend_from_slice(&u16::try_from(self.width).map_err(|_| too_big("width"))?.to_le_bytes());
        out.push(u8::try_from(self.channels).map_err(|_| too_big("channels"))?);
        out.extend_from_slice(&u16::try_from(self.num_classes).map_err(|_| too_big("classes"))?.to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(self.image(i));
            out.extend_from_slice(&self.labels[i].to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(VigError::Format("not a VIGD dataset".into()));
        }
        if bytes[4] != VERSION {
            return Err(VigError::Format(format!("unsupported dataset version {}", bytes[4])));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
        let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let (h, w, c, classes) = (u16_at(9), u16_at(11), bytes[13] as usize, u16_at(14));
        let rec = h * w * c;
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * (rec + 2) {
            return Err(VigError::Format(format!(
                "expected {} record bytes, found {}",
                count * (rec + 2),
                body.len()
            )));
        }
        let mut pixels = Vec::with_capacity(count * rec);
        let mut labels = Vec::with_capacity(count);
        for r in body.chunks_exact(rec + 2) {
            pixels.extend_from_slice(&r[..rec]);
            labels.push(u16::from_le_bytes([r[rec], r[rec + 1]]));
        }
        Dataset::new(h, w, c, classes, pixels, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Normalized batch `[B × H × W × C]` with values `(p/255 − 0.5)/0.5`.
    pub fn batch<T: Element>(&self, indices: &[usize], aug: Option<(&Augment, &mut ChaCha8Rng)>) -> Result<Tensor<T>> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = Vec::with_capacity(indices.len() * self.record_len());
        let mut aug = aug;
        for &i in indices {
            let img = self.image(i);
            let (flip, dy, dx) = match aug.as_mut() {
                Some((a, rng)) => a.draw(rng),
                None => (false, 0, 0),
            };
            for y in 0..h {
                for x in 0..w {
                    // source pixel after crop offset and optional mirror
                    let sx = if flip { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                    for ch in 0..c {
                        let p = if inside { img[(sy as usize * w + sx as usize) * c + ch] } else { 0 };
                        data.push(T::lit((p as f64 / 255.0 - 0.5) / 0.5));
                    }
                }
            }
        }
        Tensor::new([indices.len(), h, w, c], data)
    }
}

/// Training-time augmentation: horizontal mirror and zero-padded random crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub flip: bool,
    /// Padding on each side before cropping back to the original size; 0 disables.
    pub crop_pad: usize,
}

impl Augment {
    fn draw(&self, rng: &mut ChaCha8Rng) -> (bool, isize, isize) {
        let flip = self.flip && rng.gen::<bool>();
        let p = self.crop_pad as isize;
        let (dy, dx) = if p > 0 {
            (rng.gen_range(-p..=p), rng.gen_range(-p..=p))
        } else {
            (0, 0)
        };
        (flip, dy, dx)
    }
}

/// Names of the synthetic shape classes, by label.
pub const SHAPES: [&str; 10] = [
    "disk", "square", "triangle", "plus", "ring", "diamond", "saltire", "frame", "bars", "crescent",
];

/// Whether local coordinates `(u, v)` (unit radius, y down) fall inside shape `class`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    let box_n = u.abs().max(v.abs());
    let plus = |u: f64, v: f64| (u.abs() <= 0.25 && v.abs() <= 0.9) || (v.abs() <= 0.25 && u.abs() <= 0.9);
    match class {
        0 => r2 <= 1.0,
        1 => box_n <= 0.8,
        2 => {
            // apex up at (0, −0.9), base along v = 0.7
            v <= 0.7 && v >= -0.9 && u.abs() <= (v + 0.9) * 0.5625
        }
        3 => plus(u, v),
        4 => (0.3025..=1.0).contains(&r2),
        5 => u.abs() + v.abs() <= 1.0,
        6 => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            plus(s * (u - v), s * (u + v))
        }
        7 => (0.55..=0.85).contains(&box_n),
        8 => u.abs() <= 0.9 && ((v - 0.45).abs() <= 0.2 || (v + 0.45).abs() <= 0.2),
        9 => r2 <= 1.0 && (u - 0.45).powi(2) + v * v > 0.49,
        _ => false,
    }
}

/// Deterministic, class-stratified images of filled and outlined figures.
///
/// Each image draws its figure with random center, size, small rotation, foreground and
/// background colors, plus Gaussian pixel noise. Labels cycle through the classes before
/// a seeded shuffle, so every class gets `n / num_classes` or one more images.
pub fn synth_shapes(n: usize, resolution: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || num_classes > SHAPES.len() {
        return Err(VigError::config("num_classes", format!("must be in 1..={}", SHAPES.len())));
    }
    if resolution < 4 {
        return Err(VigError::config("resolution", "must be at least 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u16> = (0..n).map(|i| (i % num_classes) as u16).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, 10.0).map_err(|e| VigError::Contract(e.to_string()))?;
    let res = resolution as f64;
    let mut pixels = Vec::with_capacity(n * resolution * resolution * 3);
    for &label in &labels {
        let radius = res * rng.gen_range(0.22..0.36);
        let cx = rng.gen_range(radius..res - radius);
        let cy = rng.gen_range(radius..res - radius);
        let theta: f64 = rng.gen_range(-0.2..0.2) * PI / 2.0;
        let (sin, cos) = theta.sin_cos();
        let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
        // redraw the foreground until it stands out from the background
        let fg = loop {
            let c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
            if c.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() >= 150.0 {
                break c;
            }
        };
        for y in 0..resolution {
            for x in 0..resolution {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (cos * px + sin * py) / radius;
                let v = (-sin * px + cos * py) / radius;
                let color = if inside(label as usize, u, v) { &fg } else { &bg };
                for &c in color {
                    let p: f64 = c + rng.sample(noise);
                    pixels.push(p.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Dataset::new(resolution, resolution, 3, num_classes, pixels, labels)
}
