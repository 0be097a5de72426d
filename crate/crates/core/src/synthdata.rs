//! Seeded multi-domain synthetic segmentation scenes.
//!
//! The label map of a scene depends only on `(seed, K, size)`; the domain
//! style only changes how it is rendered.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};

pub const MIN_CLASSES: usize = 2;
pub const MAX_CLASSES: usize = 8;
/// Class drawn with reduced probability.
pub const RARE_CLASS: usize = 4;
pub const RARE_PROBABILITY: f64 = 0.2;
pub const COMMON_PROBABILITY: f64 = 0.97;

/// Base hue per class in degrees; background is rendered unsaturated.
const CLASS_HUES: [f64; MAX_CLASSES] = [0.0, 0.0, 220.0, 120.0, 50.0, 280.0, 30.0, 180.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum DomainStyle {
    Source,
    HueShift { degrees: f64 },
    TextureNoise { amplitude: f64 },
    Sketch { strength: f64 },
}

impl DomainStyle {
    pub fn hue_shift() -> Self {
        Self::HueShift { degrees: 120.0 }
    }

    pub fn texture_noise() -> Self {
        Self::TextureNoise { amplitude: 0.15 }
    }

    pub fn sketch() -> Self {
        Self::Sketch { strength: 2.0 }
    }

    /// The three shifted target styles.
    pub fn targets() -> [Self; 3] {
        [Self::hue_shift(), Self::texture_noise(), Self::sketch()]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Source => "source",
            Self::HueShift { .. } => "hue_shift",
            Self::TextureNoise { .. } => "texture_noise",
            Self::Sketch { .. } => "sketch",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Source => true,
            Self::HueShift { degrees } => (0.0..360.0).contains(&degrees),
            Self::TextureNoise { amplitude } => (0.0..=1.0).contains(&amplitude),
            Self::Sketch { strength } => strength > 0.0 && strength <= 10.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("style parameters out of range: {self:?}")))
        }
    }
}

impl fmt::Display for DomainStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Self::Source),
            "hue_shift" => Ok(Self::hue_shift()),
            "texture_noise" => Ok(Self::texture_noise()),
            "sketch" => Ok(Self::sketch()),
            other => Err(Error::Config(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub image: ImageTensor<f64>,
    pub labels: LabelMap,
    pub domain: DomainStyle,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Triangle { pts: [(f64, f64); 3] },
    Band { angle: f64, offset: f64, half_width: f64 },
    Ring { cy: f64, cx: f64, r_in: f64, r_out: f64 },
    Cross { cy: f64, cx: f64, arm: f64, half_width: f64 },
    Diamond { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn random<R: Rng>(class: usize, size: f64, rng: &mut R) -> Self {
        let mut center = |margin: f64| {
            (
                rng.random_range(margin..size - margin),
                rng.random_range(margin..size - margin),
            )
        };
        let (cy, cx) = center(0.12 * size);
        let s = size;
        match class {
            1 => Shape::Disc {
                cy,
                cx,
                r: rng.random_range(0.08..0.14) * s,
            },
            2 => {
                let hh = rng.random_range(0.06..0.13) * s;
                let hw = rng.random_range(0.06..0.13) * s;
                Shape::Rect {
                    y0: cy - hh,
                    x0: cx - hw,
                    y1: cy + hh,
                    x1: cx + hw,
                }
            }
            3 => {
                let r = rng.random_range(0.10..0.16) * s;
                let a0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let pts = [0.0, 1.0, 2.0].map(|i| {
                    let a = a0 + i * std::f64::consts::TAU / 3.0;
                    (cy + r * a.sin(), cx + r * a.cos())
                });
                Shape::Triangle { pts }
            }
            4 => Shape::Band {
                angle: rng.random_range(0.0..std::f64::consts::PI),
                offset: rng.random_range(-0.25..0.25) * s,
                half_width: rng.random_range(0.04..0.06) * s,
            },
            5 => {
                let r_out = rng.random_range(0.10..0.15) * s;
                Shape::Ring {
                    cy,
                    cx,
                    r_in: r_out * rng.random_range(0.45..0.6),
                    r_out,
                }
            }
            6 => Shape::Cross {
                cy,
                cx,
                arm: rng.random_range(0.10..0.15) * s,
                half_width: rng.random_range(0.03..0.05) * s,
            },
            _ => Shape::Diamond {
                cy,
                cx,
                r: rng.random_range(0.09..0.15) * s,
            },
        }
    }

    /// Point-in-shape test at pixel centre `(y, x)`; `size` locates the band's centre line.
    fn contains(&self, y: f64, x: f64, size: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::Triangle { pts } => {
                let side = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d = [side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
            Shape::Band {
                angle,
                offset,
                half_width,
            } => {
                let c = size / 2.0;
                let dist = (y - c) * angle.cos() - (x - c) * angle.sin() - offset;
                dist.abs() <= half_width
            }
            Shape::Ring { cy, cx, r_in, r_out } => {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
            Shape::Cross {
                cy,
                cx,
                arm,
                half_width,
            } => {
                let (dy, dx) = ((y - cy).abs(), (x - cx).abs());
                (dy <= half_width && dx <= arm) || (dx <= half_width && dy <= arm)
            }
            Shape::Diamond { cy, cx, r } => (y - cy).abs() + (x - cx).abs() <= r,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Geometry and flat colours of a scene; shared by every style.
fn layout(seed: u64, num_classes: usize, size: usize) -> (LabelMap, Vec<[f64; 3]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let bg = hsv_to_rgb(
        rng.random_range(0.0..360.0),
        rng.random_range(0.0..0.15),
        rng.random_range(0.55..0.9),
    );
    let mut placed: Vec<(usize, Shape, [f64; 3])> = Vec::new();
    for class in 1..num_classes {
        let p = if class == RARE_CLASS {
            RARE_PROBABILITY
        } else {
            COMMON_PROBABILITY
        };
        // draw every random quantity regardless of placement so streams stay aligned
        let hit = rng.random::<f64>() < p;
        let shape = Shape::random(class, s, &mut rng);
        let color = hsv_to_rgb(
            CLASS_HUES[class] + rng.random_range(-12.0..12.0),
            rng.random_range(0.75..1.0),
            rng.random_range(0.65..1.0),
        );
        if hit {
            placed.push((class, shape, color));
        }
    }
    // random paint order
    for i in (1..placed.len()).rev() {
        let j = rng.random_range(0..=i);
        placed.swap(i, j);
    }
    let mut labels = LabelMap::filled(size, size, 0);
    let paint = |labels: &mut LabelMap, class: usize, shape: &Shape| {
        for y in 0..size {
            for x in 0..size {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5, s) {
                    labels.set(y, x, class as u8);
                }
            }
        }
    };
    for (class, shape, _) in &placed {
        paint(&mut labels, *class, shape);
    }
    // shapes hidden behind later ones are repainted on top
    for _ in 0..num_classes {
        let hidden: Vec<&(usize, Shape, [f64; 3])> =
            placed.iter().filter(|(c, _, _)| !labels.contains(*c)).collect();
        if hidden.is_empty() {
            break;
        }
        for (class, shape, _) in hidden {
            paint(&mut labels, *class, shape);
        }
    }
    let mut palette = vec![bg; num_classes];
    for (class, _, color) in &placed {
        palette[*class] = *color;
    }
    (labels, palette)
}

fn box_blur(src: &[f64], size: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let n = size as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < n && xx >= 0 && xx < n {
                        acc += src[(yy * n + xx) as usize];
                        cnt += 1.0;
                    }
                }
            }
            out[(y * n + x) as usize] = acc / cnt;
        }
    }
    out
}

/// Zero-mean, unit-variance difference of box-blurred white noise.
fn bandpass_noise<R: Rng>(size: usize, rng: &mut R) -> Vec<f64> {
    let white: Vec<f64> = (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fine = box_blur(&white, size, 1);
    let coarse = box_blur(&white, size, 3);
    let band: Vec<f64> = fine.iter().zip(&coarse).map(|(a, b)| a - b).collect();
    let mean = band.iter().sum::<f64>() / band.len() as f64;
    let var = band.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / band.len() as f64;
    let std = var.sqrt().max(1e-12);
    band.iter().map(|v| (v - mean) / std).collect()
}

fn render(labels: &LabelMap, palette: &[[f64; 3]], style: DomainStyle, seed: u64) -> Vec<f64> {
    let size = labels.width;
    let mut rgb: Vec<f64> = labels
        .labels
        .iter()
        .flat_map(|&l| palette[l as usize])
        .collect();
    match style {
        DomainStyle::Source => {}
        DomainStyle::HueShift { degrees } => {
            for px in rgb.chunks_mut(3) {
                let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
                px.copy_from_slice(&hsv_to_rgb(h + degrees, s, v));
            }
        }
        DomainStyle::TextureNoise { amplitude } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            for c in 0..3 {
                let noise = bandpass_noise(size, &mut rng);
                for (i, n) in noise.iter().enumerate() {
                    rgb[i * 3 + c] += amplitude * n;
                }
            }
        }
        DomainStyle::Sketch { strength } => {
            let lum: Vec<f64> = rgb
                .chunks(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect();
            let n = size as isize;
            let at = |y: isize, x: isize| lum[(y.clamp(0, n - 1) * n + x.clamp(0, n - 1)) as usize];
            for y in 0..n {
                for x in 0..n {
                    let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                        - at(y - 1, x - 1)
                        - 2.0 * at(y, x - 1)
                        - at(y + 1, x - 1);
                    let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                        - at(y - 1, x - 1)
                        - 2.0 * at(y - 1, x)
                        - at(y - 1, x + 1);
                    let ink = (strength * (gx * gx + gy * gy).sqrt()).min(1.0);
                    let i = (y * n + x) as usize * 3;
                    rgb[i..i + 3].fill(1.0 - ink);
                }
            }
        }
    }
    rgb.into_iter().map(quantize).collect()
}

pub fn generate_scene(
    seed: u64,
    num_classes: usize,
    size: usize,
    domain: DomainStyle,
) -> Result<LabeledScene> {
    if !(MIN_CLASSES..=MAX_CLASSES).contains(&num_classes) {
        return Err(Error::Config(format!(
            "class count {num_classes} outside [{MIN_CLASSES}, {MAX_CLASSES}]"
        )));
    }
    if size < 8 {
        return Err(Error::Config(format!("scene size {size} too small")));
    }
    domain.validate()?;
    let (labels, palette) = layout(seed, num_classes, size);
    let pixels = render(&labels, &palette, domain, seed);
    Ok(LabeledScene {
        image: ImageTensor::new(size, size, pixels)?,
        labels,
        domain,
        seed,
    })
}

pub fn flip_horizontal(scene: &LabeledScene) -> LabeledScene {
    let (h, w) = (scene.labels.height, scene.labels.width);
    let mut px = Vec::with_capacity(h * w * 3);
    let mut lab = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in (0..w).rev() {
            for c in 0..3 {
                px.push(scene.image.get(y, x, c));
            }
            lab.push(scene.labels.get(y, x));
        }
    }
    LabeledScene {
        image: ImageTensor::new(h, w, px).expect("same shape"),
        labels: LabelMap::new(h, w, lab).expect("same shape"),
        ..scene.clone()
    }
}

/// Crop window `(top, left)` of size `out` inside a `scaled` square.
pub fn crop_window<R: Rng>(scaled: usize, out: usize, rng: &mut R) -> (usize, usize) {
    let slack = scaled - out;
    (rng.random_range(0..=slack), rng.random_range(0..=slack))
}

/// Upscales by `scale` (bilinear image, nearest labels) and crops `out x out` at `(top, left)`.
pub fn scale_crop(scene: &LabeledScene, scale: f64, top: usize, left: usize) -> LabeledScene {
    let (h, w) = (scene.labels.height, scene.labels.width);
    let sh = ((h as f64) * scale).round() as usize;
    let sw = ((w as f64) * scale).round() as usize;
    assert!(top + h <= sh && left + w <= sw, "crop outside scaled image");
    let mut px = Vec::with_capacity(h * w * 3);
    let mut lab = Vec::with_capacity(h * w);
    let (ry, rx) = (h as f64 / sh as f64, w as f64 / sw as f64);
    for y in top..top + h {
        let fy = ((y as f64 + 0.5) * ry - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        let ny = (((y as f64 + 0.5) * ry) as usize).min(h - 1);
        for x in left..left + w {
            let fx = ((x as f64 + 0.5) * rx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..3 {
                let v = (1.0 - ty) * ((1.0 - tx) * scene.image.get(y0, x0, c) + tx * scene.image.get(y0, x1, c))
                    + ty * ((1.0 - tx) * scene.image.get(y1, x0, c) + tx * scene.image.get(y1, x1, c));
                px.push(v.clamp(0.0, 1.0));
            }
            let nx = (((x as f64 + 0.5) * rx) as usize).min(w - 1);
            lab.push(scene.labels.get(ny, nx));
        }
    }
    LabeledScene {
        image: ImageTensor::new(h, w, px).expect("crop shape"),
        labels: LabelMap::new(h, w, lab).expect("crop shape"),
        ..scene.clone()
    }
}

/// Brightness, contrast and saturation jitter; labels untouched.
pub fn color_jitter(scene: &LabeledScene, brightness: f64, contrast: f64, saturation: f64) -> LabeledScene {
    let px = scene.image.pixels();
    let n = px.len() / 3;
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    let mut out = Vec::with_capacity(px.len());
    for p in px.chunks(3) {
        let gray = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        for &v in p {
            let s = gray + saturation * (v - gray);
            let c = mean + contrast * (s - mean);
            out.push((c * brightness).clamp(0.0, 1.0));
        }
    }
    debug_assert_eq!(out.len(), n * 3);
    LabeledScene {
        image: ImageTensor::new(scene.labels.height, scene.labels.width, out).expect("same shape"),
        ..scene.clone()
    }
}

/// Random scaling in `[1, 1.5]`, crop back to the original size, horizontal
/// flip with probability 1/2 and colour jitter.
pub fn augment(scene: &LabeledScene, seed: u64) -> LabeledScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = scene.labels.height;
    let scale = rng.random_range(1.0..=1.5);
    let scaled = ((size as f64) * scale).round() as usize;
    let (top, left) = crop_window(scaled, size, &mut rng);
    let mut out = scale_crop(scene, scale, top, left);
    if rng.random::<bool>() {
        out = flip_horizontal(&out);
    }
    let b = rng.random_range(0.8..1.2);
    let c = rng.random_range(0.8..1.2);
    let s = rng.random_range(0.8..1.2);
    color_jitter(&out, b, c, s)
}

fn ppm_header(magic: &str, h: usize, w: usize) -> String {
    format!("{magic}\n{w} {h}\n255\n")
}

pub fn write_ppm(path: &Path, image: &ImageTensor<f64>) -> Result<()> {
    let mut bytes = ppm_header("P6", image.height(), image.width()).into_bytes();
    bytes.extend(image.pixels().iter().map(|&v| (v * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut bytes = ppm_header("P5", labels.height, labels.width).into_bytes();
    bytes.extend_from_slice(&labels.labels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Parses a binary netpbm header; returns `(width, height, payload offset)`.
fn parse_header(bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed netpbm header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields.push(
            text.parse::<usize>()
                .map_err(|e| Error::Format(format!("header field {text:?}: {e}")))?,
        );
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing whitespace after maxval".into()));
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("maxval {} unsupported", fields[2])));
    }
    Ok((fields[0], fields[1], pos + 1))
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor<f64>> {
    let bytes = fs::read(path)?;
    let (w, h, off) = parse_header(&bytes, b"P6")?;
    let payload = &bytes[off..];
    if payload.len() != w * h * 3 {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, expected {}",
            path.display(),
            payload.len(),
            w * h * 3
        )));
    }
    ImageTensor::new(h, w, payload.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn read_pgm(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let (w, h, off) = parse_header(&bytes, b"P5")?;
    let payload = &bytes[off..];
    if payload.len() != w * h {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, expected {}",
            path.display(),
            payload.len(),
            w * h
        )));
    }
    if let Some(&bad) = payload
        .iter()
        .find(|&&l| l != IGNORE_LABEL && l as usize >= num_classes)
    {
        return Err(Error::Validation(format!(
            "{}: label {bad} not below {num_classes}",
            path.display()
        )));
    }
    LabelMap::new(h, w, payload.to_vec())
}

/// One row of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path_image: PathBuf,
    pub path_label: PathBuf,
    pub domain: String,
    pub seed: u64,
    pub split: String,
}

pub fn write_scene(dir: &Path, stem: &str, scene: &LabeledScene) -> Result<(PathBuf, PathBuf)> {
    let img = dir.join(format!("{stem}.ppm"));
    let lab = dir.join(format!("{stem}.pgm"));
    write_ppm(&img, &scene.image)?;
    write_pgm(&lab, &scene.labels)?;
    Ok((img, lab))
}

pub fn read_scene(entry: &ManifestEntry, num_classes: usize) -> Result<LabeledScene> {
    let image = read_ppm(&entry.path_image)?;
    let labels = read_pgm(&entry.path_label, num_classes)?;
    if (image.height(), image.width()) != (labels.height, labels.width) {
        return Err(Error::Validation(format!(
            "image {}x{} and labels {}x{} differ",
            image.height(),
            image.width(),
            labels.height,
            labels.width
        )));
    }
    Ok(LabeledScene {
        image,
        labels,
        domain: entry.domain.parse()?,
        seed: entry.seed,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Relative paths in the manifest are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let root = path.parent().unwrap_or(Path::new(""));
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry = serde_json::from_str(&line)?;
        entry.path_image = root.join(&entry.path_image);
        entry.path_label = root.join(&entry.path_label);
        out.push(entry);
    }
    Ok(out)
}

/// Split sizes and seed layout of a generated benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub num_classes: usize,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            size: 64,
            train: 500,
            val: 100,
            test: 100,
            seed: 0,
        }
    }
}

/// Seed offsets keep the splits disjoint; every target domain reuses the test seeds.
const VAL_OFFSET: u64 = 1_000_000;
const TEST_OFFSET: u64 = 2_000_000;

impl SplitConfig {
    pub fn train_seeds(&self) -> impl Iterator<Item = u64> {
        let base = self.seed * 10_000_000;
        base..base + self.train as u64
    }

    pub fn val_seeds(&self) -> impl Iterator<Item = u64> {
        let base = self.seed * 10_000_000 + VAL_OFFSET;
        base..base + self.val as u64
    }

    pub fn test_seeds(&self) -> impl Iterator<Item = u64> {
        let base = self.seed * 10_000_000 + TEST_OFFSET;
        base..base + self.test as u64
    }

    /// `(split, domain, seeds)` for every split of the benchmark.
    pub fn plan(&self) -> Vec<(&'static str, DomainStyle, Vec<u64>)> {
        let mut plan = vec![
            ("train", DomainStyle::Source, self.train_seeds().collect()),
            ("val", DomainStyle::Source, self.val_seeds().collect()),
        ];
        for d in DomainStyle::targets() {
            plan.push(("test", d, self.test_seeds().collect()));
        }
        plan
    }
}

/// In-memory split.
pub fn generate_split(cfg: &SplitConfig, seeds: &[u64], domain: DomainStyle) -> Result<Vec<LabeledScene>> {
    seeds
        .iter()
        .map(|&s| generate_scene(s, cfg.num_classes, cfg.size, domain))
        .collect()
}

fn relative_to(path: &Path, root: &Path) -> PathBuf {
    path.strip_prefix(root).map_or_else(|_| path.to_path_buf(), Path::to_path_buf)
}

/// Writes every split under `out` and returns the manifest rows, with paths relative to `out`.
pub fn write_benchmark(out: &Path, cfg: &SplitConfig) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (split, domain, seeds) in cfg.plan() {
        let dir = out.join(split).join(domain.name());
        fs::create_dir_all(&dir)?;
        for seed in seeds {
            let scene = generate_scene(seed, cfg.num_classes, cfg.size, domain)?;
            let (img, lab) = write_scene(&dir, &format!("{seed:08}"), &scene)?;
            entries.push(ManifestEntry {
                path_image: relative_to(&img, out),
                path_label: relative_to(&lab, out),
                domain: domain.name().to_string(),
                seed,
                split: split.to_string(),
            });
        }
    }
    write_manifest(&out.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_style_invariant_and_deterministic() {
        let src = generate_scene(7, 8, 32, DomainStyle::Source).unwrap();
        for d in DomainStyle::targets() {
            let s = generate_scene(7, 8, 32, d).unwrap();
            assert_eq!(s.labels, src.labels);
            assert_ne!(s.image, src.image);
        }
        assert_eq!(generate_scene(7, 8, 32, DomainStyle::sketch()).unwrap(), generate_scene(7, 8, 32, DomainStyle::sketch()).unwrap());
        assert!(generate_scene(7, 1, 32, DomainStyle::Source).is_err());
        assert!(generate_scene(7, 9, 32, DomainStyle::Source).is_err());
    }

    #[test]
    fn rare_class_frequency_and_background_majority() {
        let mut rare = 0;
        let mut pixel_counts = [0usize; 8];
        for seed in 0..1000 {
            let (labels, _) = layout(seed, 8, 32);
            if labels.contains(RARE_CLASS) {
                rare += 1;
            }
            for &l in &labels.labels {
                pixel_counts[l as usize] += 1;
            }
        }
        let freq = rare as f64 / 1000.0;
        assert!((freq - RARE_PROBABILITY).abs() < 0.03, "rare frequency {freq}");
        let bg = pixel_counts[0];
        assert!(pixel_counts[1..].iter().all(|&c| c < bg));
    }

    #[test]
    fn common_classes_cover_the_source_split() {
        let mut seen = [0usize; 8];
        for seed in 0..500 {
            let (labels, _) = layout(seed, 8, 32);
            for (c, n) in seen.iter_mut().enumerate() {
                if labels.contains(c) {
                    *n += 1;
                }
            }
        }
        for (c, &n) in seen.iter().enumerate() {
            if c != RARE_CLASS {
                assert!(n >= 450, "class {c} in {n} scenes");
            }
        }
    }

    #[test]
    fn augment_geometry() {
        let s = generate_scene(3, 8, 32, DomainStyle::Source).unwrap();
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
        let j = color_jitter(&s, 1.1, 0.9, 1.2);
        assert_eq!(j.labels, s.labels);
        assert_eq!(scale_crop(&s, 1.0, 0, 0), s);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let scale: f64 = rng.random_range(1.0..=1.5);
            let scaled = (32.0 * scale).round() as usize;
            let (t, l) = crop_window(scaled, 32, &mut rng);
            assert!(t + 32 <= scaled && l + 32 <= scaled);
        }
        let a = augment(&s, 5);
        assert_eq!(a, augment(&s, 5));
        assert!(a.labels.validate(8).is_ok());
    }

    #[test]
    fn netpbm_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(11, 8, 64, DomainStyle::texture_noise()).unwrap();
        let (img, lab) = write_scene(dir.path(), "a", &s).unwrap();
        let header = "P6\n64 64\n255\n".len();
        assert_eq!(fs::metadata(&img).unwrap().len() as usize, header + 64 * 64 * 3);
        let entry = ManifestEntry {
            path_image: img.clone(),
            path_label: lab.clone(),
            domain: "texture_noise".into(),
            seed: 11,
            split: "test".into(),
        };
        assert_eq!(read_scene(&entry, 8).unwrap(), s);

        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_ppm(&img), Err(Error::Format(_))));
        fs::write(&img, b"P3\n1 1\n255\n000").unwrap();
        assert!(matches!(read_ppm(&img), Err(Error::Format(_))));
        assert!(matches!(read_pgm(&lab, 3), Err(Error::Validation(_))));
    }

    #[test]
    fn benchmark_manifest_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SplitConfig {
            size: 16,
            train: 4,
            val: 2,
            test: 3,
            ..SplitConfig::default()
        };
        let entries = write_benchmark(dir.path(), &cfg).unwrap();
        assert_eq!(entries.len(), 4 + 2 + 3 * 3);
        let read = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(read.len(), entries.len());
        for (r, e) in read.iter().zip(&entries) {
            assert!(e.path_image.is_relative());
            assert_eq!(r.path_image, dir.path().join(&e.path_image));
        }
        let scene = read_scene(&read[5], cfg.num_classes).unwrap();
        assert_eq!(scene, generate_scene(read[5].seed, cfg.num_classes, 16, DomainStyle::Source).unwrap());
        let train: Vec<u64> = cfg.train_seeds().collect();
        assert!(cfg.val_seeds().all(|s| !train.contains(&s)));
    }
}
