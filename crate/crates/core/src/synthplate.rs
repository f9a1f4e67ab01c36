//! Synthetic plate rendering and corpus generation.
//!
//! Plates are deliberately simple: flat background, one bitmap font, a blue
//! band on Mercosur plates, and seeded jitter in shade, ink colour, rotation,
//! blur and brightness. Output is 3x60x120 on the 8-bit grid.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::font::{ink, GLYPH_COLS, GLYPH_ROWS};
use crate::metrics::PLATE_LEN;
use crate::ocr::{PlateLayout, OCR_HEIGHT, OCR_WIDTH};
use crate::pixelops::ImageTensor;

pub const PLATE_HEIGHT: usize = OCR_HEIGHT;
pub const PLATE_WIDTH: usize = OCR_WIDTH;
pub const MANIFEST_NAME: &str = "manifest.csv";

const SUPERSAMPLE: usize = 4;
const CELL_W: f32 = 2.4;
const CELL_H: f32 = 4.8;
const GAP: f32 = 3.0;
const BAND_H: f32 = 11.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PlateSample {
    pub image: ImageTensor,
    pub label: String,
    pub layout: PlateLayout,
    pub seed: u64,
}

struct Style {
    background: [f32; 3],
    ink: [f32; 3],
    band: [f32; 3],
    angle: f32,
    scale: f32,
    dx: f32,
    dy: f32,
    blur: f32,
    brightness: f32,
}

impl Style {
    fn draw(layout: PlateLayout, rng: &mut ChaCha8Rng) -> Self {
        let tint = |rng: &mut ChaCha8Rng, base: f32, spread: f32| {
            let b = base + rng.random_range(-spread..=spread);
            [0.0f32; 3].map(|_| (b + rng.random_range(-0.03..=0.03)).clamp(0.0, 1.0))
        };
        let background = match layout {
            PlateLayout::Brazilian => tint(rng, 0.75, 0.1),
            PlateLayout::Mercosur => tint(rng, 0.92, 0.06),
        };
        // Weathered plates: ink sits a modest, variable step below the background.
        let contrast = rng.random_range(0.25f32..=0.45);
        let ink = background.map(|b| (b - contrast + rng.random_range(-0.03..=0.03)).clamp(0.0, 1.0));
        let band = [
            rng.random_range(0.05..0.2),
            rng.random_range(0.2..0.35),
            rng.random_range(0.55..0.75),
        ];
        Self {
            background,
            ink,
            band,
            angle: rng.random_range(-4.0f32..=4.0).to_radians(),
            scale: rng.random_range(0.95..=1.05),
            dx: rng.random_range(-1.5..=1.5),
            dy: rng.random_range(-1.5..=1.5),
            blur: rng.random_range(0.0..=0.5),
            brightness: rng.random_range(0.88..=1.08),
        }
    }
}

/// Horizontal centre of character slot `position` on an unjittered plate.
pub fn slot_center(position: usize) -> f32 {
    let glyph_w = CELL_W * GLYPH_COLS as f32;
    let text_w = PLATE_LEN as f32 * glyph_w + (PLATE_LEN - 1) as f32 * GAP;
    (PLATE_WIDTH as f32 - text_w) / 2.0 + glyph_w / 2.0 + position as f32 * (glyph_w + GAP)
}

/// Render one plate; deterministic per `(label, layout, seed)`.
pub fn render_plate(label: &str, layout: PlateLayout, seed: u64) -> Result<PlateSample> {
    layout.check_label(label)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = Style::draw(layout, &mut rng);
    let chars: Vec<char> = label.chars().collect();

    let glyph_w = CELL_W * GLYPH_COLS as f32;
    let glyph_h = CELL_H * GLYPH_ROWS as f32;
    let text_w = PLATE_LEN as f32 * glyph_w + (PLATE_LEN - 1) as f32 * GAP;
    let left = (PLATE_WIDTH as f32 - text_w) / 2.0;
    let top = match layout {
        PlateLayout::Brazilian => (PLATE_HEIGHT as f32 - glyph_h) / 2.0,
        PlateLayout::Mercosur => BAND_H + (PLATE_HEIGHT as f32 - BAND_H - glyph_h) / 2.0,
    };
    let (cx, cy) = (PLATE_WIDTH as f32 / 2.0, PLATE_HEIGHT as f32 / 2.0);
    let (sin, cos) = style.angle.sin_cos();

    // Fraction of each pixel covered by glyph ink and by the band, measured
    // in plate coordinates (inverse rotation/scale of the sample point).
    let mut ink_cov = vec![0f32; PLATE_HEIGHT * PLATE_WIDTH];
    let mut band_cov = vec![0f32; PLATE_HEIGHT * PLATE_WIDTH];
    let step = 1.0 / SUPERSAMPLE as f32;
    let weight = step * step;
    for y in 0..PLATE_HEIGHT {
        for x in 0..PLATE_WIDTH {
            let (mut inked, mut banded) = (0.0, 0.0);
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f32 + (sx as f32 + 0.5) * step - cx - style.dx;
                    let py = y as f32 + (sy as f32 + 0.5) * step - cy - style.dy;
                    let u = (cos * px + sin * py) / style.scale + cx;
                    let v = (-sin * px + cos * py) / style.scale + cy;
                    if layout == PlateLayout::Mercosur && v < BAND_H {
                        banded += weight;
                        continue;
                    }
                    if v < top || u < left {
                        continue;
                    }
                    let row = ((v - top) / CELL_H) as usize;
                    let slot = ((u - left) / (glyph_w + GAP)) as usize;
                    let within = u - left - slot as f32 * (glyph_w + GAP);
                    if row >= GLYPH_ROWS || slot >= PLATE_LEN || within >= glyph_w {
                        continue;
                    }
                    if ink(chars[slot], row, (within / CELL_W) as usize) {
                        inked += weight;
                    }
                }
            }
            ink_cov[y * PLATE_WIDTH + x] = inked;
            band_cov[y * PLATE_WIDTH + x] = banded;
        }
    }

    let mut image = ImageTensor::from_fn(3, PLATE_HEIGHT, PLATE_WIDTH, |c, y, x| {
        let i = y * PLATE_WIDTH + x;
        let (a, b) = (ink_cov[i], band_cov[i]);
        let base = style.background[c] * (1.0 - b) + style.band[c] * b;
        base * (1.0 - a) + style.ink[c] * a
    })?;
    if style.blur > 0.05 {
        image = gaussian_blur(&image, style.blur);
    }
    for v in image.data_mut() {
        *v *= style.brightness;
    }
    image.clamp_unit();
    image.quantize_u8();
    Ok(PlateSample {
        image,
        label: label.to_string(),
        layout,
        seed,
    })
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &ImageTensor, sigma: f32) -> ImageTensor {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    let (c, h, w) = img.shape();
    let tap = |n: usize, i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = img.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * img.get(ch, y, tap(w, x as isize + j as isize - radius)))
                    .sum();
                tmp.set(ch, y, x, v);
            }
        }
    }
    let mut out = tmp.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp.get(ch, tap(h, y as isize + j as isize - radius), x))
                    .sum();
                out.set(ch, y, x, v);
            }
        }
    }
    out
}

pub fn random_label(layout: PlateLayout, rng: &mut impl Rng) -> String {
    layout
        .pattern()
        .bytes()
        .map(|p| {
            if p == b'L' {
                (b'A' + rng.random_range(0..26u8)) as char
            } else {
                (b'0' + rng.random_range(0..10u8)) as char
            }
        })
        .collect()
}

/// Number of distinct legal labels for a layout.
pub fn label_space(layout: PlateLayout) -> u64 {
    layout
        .pattern()
        .bytes()
        .map(|p| if p == b'L' { 26u64 } else { 10 })
        .product()
}

/// `ceil(n * mix)` Mercosur plates, the rest Brazilian, in seeded random
/// order with no repeated label.
pub fn sample_corpus(n: usize, mix: f64, seed: u64) -> Result<Vec<PlateSample>> {
    if n == 0 {
        return Err(Error::arg("corpus size must be at least 1"));
    }
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::arg(format!("mix must be in [0, 1], got {mix}")));
    }
    let n_merc = ((n as f64 * mix) - 1e-9).ceil().max(0.0) as usize;
    let counts = [
        (PlateLayout::Mercosur, n_merc),
        (PlateLayout::Brazilian, n - n_merc),
    ];
    for &(layout, count) in &counts {
        if count as u64 > label_space(layout) {
            return Err(Error::arg(format!(
                "{count} {layout} labels requested but only {} exist",
                label_space(layout)
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut plan = Vec::with_capacity(n);
    for &(layout, count) in &counts {
        let mut made = 0;
        while made < count {
            let label = random_label(layout, &mut rng);
            if seen.insert(label.clone()) {
                plan.push((layout, label, rng.next_u64()));
                made += 1;
            }
        }
    }
    rand::seq::SliceRandom::shuffle(plan.as_mut_slice(), &mut rng);
    plan.into_iter()
        .map(|(layout, label, s)| render_plate(&label, layout, s))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub filename: String,
    pub label: String,
    pub layout: PlateLayout,
    pub seed: u64,
}

/// Write `plate_NNNNN.png` files plus `manifest.csv`.
pub fn write_corpus(samples: &[PlateSample], dir: impl AsRef<Path>) -> Result<Vec<CorpusRecord>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let filename = format!("plate_{i:05}.png");
        s.image.save_png(dir.join(&filename))?;
        records.push(CorpusRecord {
            filename,
            label: s.label.clone(),
            layout: s.layout,
            seed: s.seed,
        });
    }
    let mut w = csv::Writer::from_path(dir.join(MANIFEST_NAME))?;
    for r in &records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(records)
}

/// Read a corpus directory (or its manifest path) back into samples.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<PlateSample>> {
    let path = path.as_ref();
    let (dir, manifest) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_NAME))
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, path.to_path_buf())
    };
    let mut r = csv::Reader::from_path(&manifest)?;
    let mut out = Vec::new();
    for (i, rec) in r.deserialize::<CorpusRecord>().enumerate() {
        let rec = rec?;
        rec.layout.check_label(&rec.label).map_err(|e| {
            Error::Data(format!("{} row {}: {e}", manifest.display(), i + 1))
        })?;
        out.push(PlateSample {
            image: ImageTensor::load_png(dir.join(&rec.filename))?,
            label: rec.label,
            layout: rec.layout,
            seed: rec.seed,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} lists no plates", manifest.display())));
    }
    Ok(out)
}
