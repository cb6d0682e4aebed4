//! Synthetic occluded-character datasets, per-pixel normalization and noise.
//!
//! Randomness is counter-based: every sample's stream is a ChaCha8 generator
//! keyed by a 64-bit seed, and per-sample seeds come from the dataset seed via
//! [`derive_seed`]. Any generation order therefore yields the same files.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// High-resolution pixels per bitmap cell.
pub const GLYPH_SCALE: usize = 12;
/// Outline thickness in high-resolution pixels (one output pixel at 256 -> 32).
pub const OUTLINE: usize = 8;
pub const CANVAS: usize = 256;
pub const IMAGE_SIZE: usize = 32;
pub const INK: u8 = 255;
pub const BACKGROUND: u8 = 0;
/// Floor applied to per-pixel standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

const BITMAP_W: usize = 5;
const BITMAP_H: usize = 7;

const DIGITS: [[&str; BITMAP_H]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

const LETTERS: [[&str; BITMAP_H]; 26] = [
    [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
    [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
    ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."],
    ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
    ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
    [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"],
    ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
    ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
    ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
    ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
    ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
    ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"],
    [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
    [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"],
    ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
    [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
    ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
    ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
    ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."],
    ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
    ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."],
    ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],
];

/// A fixed-font symbol set with pre-rendered high-resolution masks.
///
/// Each glyph's footprint is its scaled bitmap padded by [`OUTLINE`] on every
/// side; `outline` holds the dilated ring around the ink.
#[derive(Clone, Debug)]
pub struct GlyphSet {
    pub charset: Vec<char>,
    /// Footprint size in high-resolution pixels (height, width).
    pub footprint: (usize, usize),
    ink: Vec<Vec<bool>>,
    outline: Vec<Vec<bool>>,
}

impl GlyphSet {
    pub fn digits() -> Self {
        Self::from_bitmaps(('0'..='9').collect(), &DIGITS)
    }

    pub fn letters() -> Self {
        Self::from_bitmaps(('A'..='Z').collect(), &LETTERS)
    }

    fn from_bitmaps(charset: Vec<char>, bitmaps: &[[&str; BITMAP_H]]) -> Self {
        let fh = BITMAP_H * GLYPH_SCALE + 2 * OUTLINE;
        let fw = BITMAP_W * GLYPH_SCALE + 2 * OUTLINE;
        let mut inks = Vec::new();
        let mut outlines = Vec::new();
        for bm in bitmaps {
            let cells: Vec<bool> = bm.iter().flat_map(|row| row.bytes()).map(|c| c == b'#').collect();
            assert_eq!(cells.len(), BITMAP_W * BITMAP_H, "bitmap size");
            let mut ink = vec![false; fh * fw];
            for y in 0..BITMAP_H * GLYPH_SCALE {
                for x in 0..BITMAP_W * GLYPH_SCALE {
                    ink[(y + OUTLINE) * fw + x + OUTLINE] = cells[(y / GLYPH_SCALE) * BITMAP_W + x / GLYPH_SCALE];
                }
            }
            let mut outline = vec![false; fh * fw];
            for y in 0..fh {
                for x in 0..fw {
                    if ink[y * fw + x] {
                        continue;
                    }
                    let ys = y.saturating_sub(OUTLINE)..(y + OUTLINE + 1).min(fh);
                    outline[y * fw + x] = ys.into_iter().any(|yy| {
                        let xs = x.saturating_sub(OUTLINE)..(x + OUTLINE + 1).min(fw);
                        ink[yy * fw + xs.start..yy * fw + xs.end].iter().any(|&v| v)
                    });
                }
            }
            inks.push(ink);
            outlines.push(outline);
        }
        GlyphSet {
            charset,
            footprint: (fh, fw),
            ink: inks,
            outline: outlines,
        }
    }

    pub fn len(&self) -> usize {
        self.charset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charset.is_empty()
    }

    pub fn ink_mask(&self, glyph: usize) -> &[bool] {
        &self.ink[glyph]
    }

    pub fn outline_mask(&self, glyph: usize) -> &[bool] {
        &self.outline[glyph]
    }
}

/// A rendered sample together with how it was drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct ClutterSample {
    pub image: Vec<u8>,
    pub labels: u64,
    /// Glyph indices, back to front.
    pub draw_order: Vec<usize>,
    /// Top-left footprint corner `(y, x)` on the high-resolution canvas, per drawn glyph.
    pub positions: Vec<(usize, usize)>,
    pub seed: u64,
}

/// The stored form of a sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: Vec<u8>,
    pub labels: u64,
    pub seed: u64,
}

impl From<ClutterSample> for Sample {
    fn from(c: ClutterSample) -> Self {
        Sample {
            image: c.image,
            labels: c.labels,
            seed: c.seed,
        }
    }
}

/// Canvas pixels, draw order and top-left positions.
pub type Highres = (Vec<u8>, Vec<usize>, Vec<(usize, usize)>);

/// Draw `k` distinct glyphs onto a `canvas`-sized square and return the
/// high-resolution canvas, draw order and positions.
pub fn render_highres(seed: u64, glyphs: &GlyphSet, k: usize, canvas: usize) -> Result<Highres> {
    if k == 0 || k > glyphs.len() {
        return Err(Error::Config(format!("glyph count k={k} outside 1..={}", glyphs.len())));
    }
    let (fh, fw) = glyphs.footprint;
    if fh > canvas || fw > canvas {
        return Err(Error::Config(format!(
            "glyph footprint {fh}x{fw} does not fit a {canvas}x{canvas} canvas"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = index::sample(&mut rng, glyphs.len(), k).into_vec();
    let mut img = vec![BACKGROUND; canvas * canvas];
    let mut positions = Vec::with_capacity(k);
    for &g in &order {
        let y0 = rng.random_range(0..=canvas - fh);
        let x0 = rng.random_range(0..=canvas - fw);
        positions.push((y0, x0));
        let (ink, outline) = (glyphs.ink_mask(g), glyphs.outline_mask(g));
        for y in 0..fh {
            let row = &mut img[(y0 + y) * canvas + x0..][..fw];
            for x in 0..fw {
                if ink[y * fw + x] {
                    row[x] = INK;
                } else if outline[y * fw + x] {
                    row[x] = BACKGROUND;
                }
            }
        }
    }
    Ok((img, order, positions))
}

/// Render a cluttered image of `k` distinct symbols and downsample it to `size`.
pub fn render_clutter(seed: u64, glyphs: &GlyphSet, k: usize, canvas: usize, size: usize) -> Result<ClutterSample> {
    let (hi, order, positions) = render_highres(seed, glyphs, k, canvas)?;
    let image = downsample(&hi, canvas, size)?;
    let labels = order.iter().fold(0u64, |m, &g| m | (1 << g));
    Ok(ClutterSample {
        image,
        labels,
        draw_order: order,
        positions,
        seed,
    })
}

/// Box-filter a `side x side` image to `target x target`, rounding half up.
pub fn downsample(src: &[u8], side: usize, target: usize) -> Result<Vec<u8>> {
    if src.len() != side * side {
        return Err(Error::shape(
            "downsample",
            format!("{} bytes for a {side}x{side} image", src.len()),
        ));
    }
    if target == 0 || !side.is_multiple_of(target) {
        return Err(Error::Config(format!(
            "source side {side} is not an integer multiple of {target}"
        )));
    }
    let f = side / target;
    let n = (f * f) as u32;
    let mut out = vec![0u8; target * target];
    for ty in 0..target {
        for tx in 0..target {
            let mut sum = 0u32;
            for y in ty * f..(ty + 1) * f {
                sum += src[y * side + tx * f..][..f].iter().map(|&v| v as u32).sum::<u32>();
            }
            out[ty * target + tx] = ((sum + n / 2) / n) as u8;
        }
    }
    Ok(out)
}

/// Per-sample seed for `(stream, index)` under a dataset seed: the `index`-th
/// 64-bit word of ChaCha8 stream `stream` keyed by `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * 2);
    rng.next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Digits5,
    Mixed5,
    Letters5,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Digits5 => "digits5",
            DatasetKind::Mixed5 => "mixed5",
            DatasetKind::Letters5 => "letters5",
        }
    }

    pub fn glyphs(self) -> GlyphSet {
        match self {
            DatasetKind::Letters5 => GlyphSet::letters(),
            _ => GlyphSet::digits(),
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            DatasetKind::Letters5 => 26,
            _ => 10,
        }
    }

    /// Glyphs drawn in sample `i`; mixed sets cycle through 1..=5.
    pub fn count_for(self, i: usize) -> usize {
        match self {
            DatasetKind::Mixed5 => 1 + i % 5,
            _ => 5,
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "digits5" => Ok(DatasetKind::Digits5),
            "mixed5" => Ok(DatasetKind::Mixed5),
            "letters5" => Ok(DatasetKind::Letters5),
            _ => Err(Error::Config(format!(
                "unknown dataset kind {s:?}; expected digits5, mixed5 or letters5"
            ))),
        }
    }
}

/// Full-scale split sizes (train, val, test).
pub const FULL_SIZES: [usize; 3] = [100_000, 10_000, 10_000];

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Multiplier on [`FULL_SIZES`].
    pub scale: f64,
    pub seed: u64,
    /// Explicit split sizes; overrides `scale` when set.
    pub sizes: Option<[usize; 3]>,
    pub canvas: usize,
    pub image_size: usize,
}

impl DatasetConfig {
    pub fn new(kind: DatasetKind) -> Self {
        DatasetConfig {
            kind,
            scale: 1.0,
            seed: 0,
            sizes: None,
            canvas: CANVAS,
            image_size: IMAGE_SIZE,
        }
    }

    pub fn split_sizes(&self) -> Result<[usize; 3]> {
        let sizes = match self.sizes {
            Some(s) => s,
            None => {
                if !(self.scale > 0.0 && self.scale.is_finite()) {
                    return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
                }
                FULL_SIZES.map(|n| (n as f64 * self.scale).round() as usize)
            }
        };
        if sizes.contains(&0) {
            return Err(Error::Config(format!("split sizes must be positive, got {sizes:?}")));
        }
        Ok(sizes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        self as u64
    }
}

/// Generate one split. Samples are rendered in parallel; output is order-independent.
pub fn make_split(cfg: &DatasetConfig, split: Split) -> Result<Dataset> {
    let n = cfg.split_sizes()?[split as usize];
    let glyphs = cfg.kind.glyphs();
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, split.stream(), i as u64);
            render_clutter(seed, &glyphs, cfg.kind.count_for(i), cfg.canvas, cfg.image_size).map(Sample::from)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        height: cfg.image_size,
        width: cfg.image_size,
        n_classes: cfg.kind.n_classes(),
        samples,
    })
}

/// Generate all three splits.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<[Dataset; 3]> {
    Ok([
        make_split(cfg, Split::Train)?,
        make_split(cfg, Split::Val)?,
        make_split(cfg, Split::Test)?,
    ])
}

const DATASET_MAGIC: &[u8; 4] = b"HBDS";
const DATASET_VERSION: u16 = 1;

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn mask_bytes(&self) -> usize {
        self.n_classes.div_ceil(8)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.n_classes > 64 {
            return Err(Error::Config(format!(
                "at most 64 classes supported, got {}",
                self.n_classes
            )));
        }
        let per = self.height * self.width + self.mask_bytes() + 8;
        let mut out = Vec::with_capacity(16 + per * self.len());
        out.extend_from_slice(DATASET_MAGIC);
        codec::put_u16(&mut out, DATASET_VERSION);
        codec::put_u32(&mut out, codec::fit(self.len(), "sample count")?);
        codec::put_u16(&mut out, codec::fit(self.height, "height")?);
        codec::put_u16(&mut out, codec::fit(self.width, "width")?);
        codec::put_u16(&mut out, codec::fit(self.n_classes, "n_classes")?);
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.len() != self.height * self.width {
                return Err(Error::shape(
                    "dataset",
                    format!("sample {i} has {} pixels", s.image.len()),
                ));
            }
            out.extend_from_slice(&s.image);
            out.extend_from_slice(&s.labels.to_le_bytes()[..self.mask_bytes()]);
            codec::put_u64(&mut out, s.seed);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        r.magic(DATASET_MAGIC)?;
        let version = r.u16()?;
        if version != DATASET_VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let n_classes = r.u16()? as usize;
        if n_classes > 64 {
            return Err(r.fail(format!("{n_classes} classes exceeds 64")));
        }
        let mut ds = Dataset {
            height,
            width,
            n_classes,
            samples: Vec::new(),
        };
        let mb = ds.mask_bytes();
        for _ in 0..count {
            let image = r.take(height * width)?.to_vec();
            let mut mask = [0u8; 8];
            mask[..mb].copy_from_slice(r.take(mb)?);
            let labels = u64::from_le_bytes(mask);
            let seed = r.u64()?;
            ds.samples.push(Sample { image, labels, seed });
        }
        r.finish()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    /// Label bits of sample `i` as 0/1 reals.
    pub fn label_row(&self, i: usize) -> Vec<f64> {
        let m = self.samples[i].labels;
        (0..self.n_classes).map(|j| ((m >> j) & 1) as f64).collect()
    }

    /// Normalized inputs `[B, 1, H, W]` and targets `[B, n]` for `indices`.
    ///
    /// Noise seeds are keyed by the sample's position in this dataset, so a
    /// sample sees the same corruption regardless of batching.
    pub fn batch(
        &self,
        indices: &[usize],
        stats: &NormStats,
        corruption: Corruption,
        noise_seed: u64,
    ) -> Result<(Tensor, Tensor)> {
        if stats.height != self.height || stats.width != self.width {
            return Err(Error::shape(
                "normalization",
                format!(
                    "stats are {}x{}, images are {}x{}",
                    stats.height, stats.width, self.height, self.width
                ),
            ));
        }
        let hw = self.height * self.width;
        let mut x = Vec::with_capacity(indices.len() * hw);
        let mut y = Vec::with_capacity(indices.len() * self.n_classes);
        for &i in indices {
            let raw = &self.samples[i].image;
            let px = match corruption {
                Corruption::SaltPepper { snr } => {
                    let noisy = add_salt_pepper(raw, snr, noise_seed, i as u64);
                    stats.normalize(&noisy)?
                }
                _ => stats.normalize(raw)?,
            };
            let px = match corruption {
                Corruption::Gaussian { sigma } => add_gaussian_noise(&px, sigma, noise_seed, i as u64),
                _ => px,
            };
            x.extend(px);
            y.extend(self.label_row(i));
        }
        Ok((
            Tensor::new([indices.len(), 1, self.height, self.width], x)?,
            Tensor::new([indices.len(), self.n_classes], y)?,
        ))
    }
}

/// Per-pixel mean and population standard deviation of a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub height: usize,
    pub width: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
}

const NORM_MAGIC: &[u8; 4] = b"HBNS";

impl NormStats {
    pub fn compute(train: &Dataset) -> Result<Self> {
        let n = train.len();
        if n < 2 {
            return Err(Error::Config(format!(
                "normalization needs at least 2 training images, got {n}"
            )));
        }
        let hw = train.height * train.width;
        let mut mean = vec![0.0; hw];
        for s in &train.samples {
            for (m, &v) in mean.iter_mut().zip(&s.image) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; hw];
        for s in &train.samples {
            for ((acc, &v), m) in var.iter_mut().zip(&s.image).zip(&mean) {
                let d = v as f64 - m;
                *acc += d * d;
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(NormStats {
            height: train.height,
            width: train.width,
            mean,
            std,
            count: n,
        })
    }

    pub fn normalize(&self, image: &[u8]) -> Result<Vec<f64>> {
        if image.len() != self.mean.len() {
            return Err(Error::shape(
                "normalize",
                format!("{} pixels vs {} in stats", image.len(), self.mean.len()),
            ));
        }
        Ok(image
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (m, s))| (v as f64 - m) / s)
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(NORM_MAGIC);
        codec::put_u16(&mut out, codec::fit(self.height, "height")?);
        codec::put_u16(&mut out, codec::fit(self.width, "width")?);
        codec::put_u32(&mut out, codec::fit(self.count, "count")?);
        codec::put_f64s(&mut out, &self.mean);
        codec::put_f64s(&mut out, &self.std);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "norm stats");
        r.magic(NORM_MAGIC)?;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let count = r.u32()? as usize;
        let mean = r.f64s(height * width)?;
        let std = r.f64s(height * width)?;
        r.finish()?;
        Ok(NormStats {
            height,
            width,
            mean,
            std,
            count,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

/// Test-time corruption applied while batching.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Corruption {
    None,
    /// Additive N(0, sigma^2) in the normalized domain.
    Gaussian {
        sigma: f64,
    },
    /// Raw-domain impulse noise; each pixel survives with probability `snr`.
    SaltPepper {
        snr: f64,
    },
}

fn noise_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn add_gaussian_noise(image: &[f64], sigma: f64, seed: u64, index: u64) -> Vec<f64> {
    if sigma == 0.0 {
        return image.to_vec();
    }
    let mut rng = noise_rng(seed, index);
    image
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + sigma * z
        })
        .collect()
}

pub fn add_salt_pepper(image: &[u8], snr: f64, seed: u64, index: u64) -> Vec<u8> {
    let mut rng = noise_rng(seed, index);
    image
        .iter()
        .map(|&v| {
            if rng.random::<f64>() < snr {
                v
            } else if rng.random::<bool>() {
                255
            } else {
                0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digits() -> GlyphSet {
        GlyphSet::digits()
    }

    #[test]
    fn glyphs_are_distinct_and_fit() {
        for set in [GlyphSet::digits(), GlyphSet::letters()] {
            let (fh, fw) = set.footprint;
            assert!(fh <= CANVAS && fw <= CANVAS);
            for a in 0..set.len() {
                assert!(set.ink_mask(a).iter().any(|&v| v));
                for b in 0..a {
                    assert_ne!(
                        set.ink_mask(a),
                        set.ink_mask(b),
                        "{} vs {}",
                        set.charset[a],
                        set.charset[b]
                    );
                }
                for (i, o) in set.ink_mask(a).iter().zip(set.outline_mask(a)) {
                    assert!(!(i & o));
                }
            }
        }
    }

    #[test]
    fn outline_surrounds_ink_on_the_border() {
        let set = digits();
        let (fh, fw) = set.footprint;
        let (ink, outline) = (set.ink_mask(1), set.outline_mask(1));
        // Row 0 of the footprint lies OUTLINE pixels above the top bitmap row.
        let top_ink: Vec<usize> = (0..fw).filter(|&x| ink[OUTLINE * fw + x]).collect();
        assert!(!top_ink.is_empty());
        for &x in &top_ink {
            assert!(outline[x]);
        }
        // Footprint corners are farther than OUTLINE from any ink cell.
        assert!(!outline[fh * fw - 1] && !outline[0]);
    }

    #[test]
    fn single_glyph_sets_one_label() {
        let s = render_clutter(3, &digits(), 1, CANVAS, IMAGE_SIZE).unwrap();
        assert_eq!(s.labels.count_ones(), 1);
        assert_eq!(s.draw_order.len(), 1);
        assert!(s.image.iter().any(|&v| v > 0));
    }

    #[test]
    fn five_glyphs_five_labels() {
        for seed in 0..20 {
            let s = render_clutter(seed, &digits(), 5, CANVAS, IMAGE_SIZE).unwrap();
            assert_eq!(s.labels.count_ones(), 5);
            let union = s.draw_order.iter().fold(0u64, |m, &g| m | 1 << g);
            assert_eq!(union, s.labels);
        }
    }

    #[test]
    fn render_is_deterministic() {
        let a = render_clutter(42, &GlyphSet::letters(), 5, CANVAS, IMAGE_SIZE).unwrap();
        let b = render_clutter(42, &GlyphSet::letters(), 5, CANVAS, IMAGE_SIZE).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn k_out_of_range_rejected() {
        assert!(render_clutter(0, &digits(), 0, CANVAS, IMAGE_SIZE).is_err());
        assert!(render_clutter(0, &digits(), 11, CANVAS, IMAGE_SIZE).is_err());
    }

    #[test]
    fn front_glyph_is_never_overdrawn() {
        let set = digits();
        let (fh, fw) = set.footprint;
        for seed in 0..10 {
            let (img, order, pos) = render_highres(seed, &set, 5, CANVAS).unwrap();
            let g = *order.last().unwrap();
            let (y0, x0) = *pos.last().unwrap();
            for y in 0..fh {
                for x in 0..fw {
                    let v = img[(y0 + y) * CANVAS + x0 + x];
                    if set.ink_mask(g)[y * fw + x] {
                        assert_eq!(v, INK);
                    } else if set.outline_mask(g)[y * fw + x] {
                        assert_eq!(v, BACKGROUND);
                    }
                }
            }
        }
    }

    #[test]
    fn downsample_cases() {
        assert_eq!(downsample(&[77; 64 * 64], 64, 32).unwrap(), vec![77; 1024]);
        let checker: Vec<u8> = (0..64 * 64)
            .map(|i| if (i / 64 + i % 64) % 2 == 0 { 0 } else { 255 })
            .collect();
        assert_eq!(downsample(&checker, 64, 32).unwrap(), vec![128; 1024]);
        assert!(downsample(&[0; 100 * 100], 100, 32).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src: Vec<u8> = (0..256 * 256).map(|_| rng.random()).collect();
        let out = downsample(&src, 256, 32).unwrap();
        for ty in 0..32 {
            for tx in 0..32 {
                let mut sum = 0.0;
                for dy in 0..8 {
                    for dx in 0..8 {
                        sum += src[(ty * 8 + dy) * 256 + tx * 8 + dx] as f64;
                    }
                }
                let mean = sum / 64.0;
                assert_eq!(out[ty * 32 + tx], (mean + 0.5).floor() as u8);
            }
        }
    }

    #[test]
    fn split_sizes_scale() {
        let mut cfg = DatasetConfig::new(DatasetKind::Digits5);
        assert_eq!(cfg.split_sizes().unwrap(), [100_000, 10_000, 10_000]);
        cfg.scale = 0.1;
        assert_eq!(cfg.split_sizes().unwrap(), [10_000, 1_000, 1_000]);
        cfg.sizes = Some([5, 0, 1]);
        assert!(cfg.split_sizes().is_err());
    }

    #[test]
    fn mixed_counts_are_stratified() {
        let mut cfg = DatasetConfig::new(DatasetKind::Mixed5);
        cfg.sizes = Some([50, 5, 10]);
        let train = make_split(&cfg, Split::Train).unwrap();
        let mut per = [0usize; 6];
        for s in &train.samples {
            per[s.labels.count_ones() as usize] += 1;
        }
        assert_eq!(per, [0, 10, 10, 10, 10, 10]);
        let cfg = DatasetConfig::new(DatasetKind::Letters5);
        assert_eq!(cfg.kind.n_classes(), 26);
        assert_eq!(cfg.kind.count_for(17), 5);
    }

    #[test]
    fn splits_use_distinct_streams() {
        let mut cfg = DatasetConfig::new(DatasetKind::Digits5);
        cfg.sizes = Some([4, 4, 4]);
        let [tr, va, te] = make_dataset(&cfg).unwrap();
        assert_ne!(tr.samples[0].seed, va.samples[0].seed);
        assert_ne!(va.samples[0].seed, te.samples[0].seed);
        let again = make_split(&cfg, Split::Train).unwrap();
        assert_eq!(tr, again);
    }

    #[test]
    fn dataset_round_trip() {
        let mut cfg = DatasetConfig::new(DatasetKind::Letters5);
        cfg.sizes = Some([6, 1, 1]);
        let ds = make_split(&cfg, Split::Train).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(bytes.len(), 16 + 6 * (1024 + 4 + 8));
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    fn two_image_set(a: u8, b: u8) -> Dataset {
        let mk = |v: u8| Sample {
            image: vec![v; 4],
            labels: 0,
            seed: 0,
        };
        Dataset {
            height: 2,
            width: 2,
            n_classes: 1,
            samples: vec![mk(a), mk(b)],
        }
    }

    #[test]
    fn norm_stats_small_cases() {
        let st = NormStats::compute(&two_image_set(0, 2)).unwrap();
        assert_eq!(st.mean, vec![1.0; 4]);
        assert_eq!(st.std, vec![1.0; 4]);
        assert_eq!(st.normalize(&[0; 4]).unwrap(), vec![-1.0; 4]);
        assert_eq!(st.normalize(&[2; 4]).unwrap(), vec![1.0; 4]);

        let st = NormStats::compute(&two_image_set(9, 9)).unwrap();
        assert_eq!(st.std, vec![STD_FLOOR; 4]);
        assert_eq!(st.normalize(&[9; 4]).unwrap(), vec![0.0; 4]);

        let mut one = two_image_set(0, 0);
        one.samples.pop();
        assert!(NormStats::compute(&one).is_err());
    }

    #[test]
    fn normalized_training_set_has_unit_moments() {
        let mut cfg = DatasetConfig::new(DatasetKind::Digits5);
        cfg.sizes = Some([200, 1, 1]);
        let ds = make_split(&cfg, Split::Train).unwrap();
        let st = NormStats::compute(&ds).unwrap();
        let all: Vec<Vec<f64>> = ds.samples.iter().map(|s| st.normalize(&s.image).unwrap()).collect();
        for p in 0..1024 {
            let vals: Vec<f64> = all.iter().map(|v| v[p]).collect();
            let m = vals.iter().sum::<f64>() / 200.0;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 200.0).sqrt();
            assert!(m.abs() <= 1e-10);
            if st.std[p] > STD_FLOOR {
                assert!((sd - 1.0).abs() < 1e-10);
            } else {
                assert_eq!(sd, 0.0);
            }
        }
        let bytes = st.to_bytes().unwrap();
        assert_eq!(NormStats::from_bytes(&bytes).unwrap(), st);
    }

    #[test]
    fn gaussian_noise_properties() {
        let zero = vec![0.0; 1024];
        assert_eq!(add_gaussian_noise(&zero, 0.0, 1, 2), zero);
        let n = add_gaussian_noise(&zero, 1.0, 1, 2);
        let m = n.iter().sum::<f64>() / 1024.0;
        let sd = (n.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 1024.0).sqrt();
        assert!((0.9..=1.1).contains(&sd), "{sd}");
        assert_eq!(n, add_gaussian_noise(&zero, 1.0, 1, 2));
        assert_ne!(n, add_gaussian_noise(&zero, 1.0, 1, 3));
    }

    #[test]
    fn salt_pepper_properties() {
        let img: Vec<u8> = (0..1024).map(|i| (i % 200 + 20) as u8).collect();
        assert_eq!(add_salt_pepper(&img, 1.0, 4, 0), img);
        assert!(add_salt_pepper(&img, 0.0, 4, 0).iter().all(|&v| v == 0 || v == 255));
        let half = add_salt_pepper(&img, 0.5, 4, 0);
        let changed = half.iter().zip(&img).filter(|(a, b)| a != b).count() as f64 / 1024.0;
        assert!((changed - 0.5).abs() <= 0.05, "{changed}");
    }

    #[test]
    fn batch_noise_does_not_depend_on_batching() {
        let mut cfg = DatasetConfig::new(DatasetKind::Digits5);
        cfg.sizes = Some([8, 1, 1]);
        let ds = make_split(&cfg, Split::Train).unwrap();
        let st = NormStats::compute(&ds).unwrap();
        for c in [Corruption::Gaussian { sigma: 3.0 }, Corruption::SaltPepper { snr: 0.5 }] {
            let (all, _) = ds.batch(&[0, 1, 2, 3], &st, c, 9).unwrap();
            let (one, _) = ds.batch(&[2], &st, c, 9).unwrap();
            assert_eq!(&all.data()[2048..3072], one.data());
        }
        let (clean, y) = ds.batch(&[0, 1], &st, Corruption::None, 9).unwrap();
        let (g0, _) = ds.batch(&[0, 1], &st, Corruption::Gaussian { sigma: 0.0 }, 9).unwrap();
        assert_eq!(clean, g0);
        assert_eq!(y.shape(), &[2, 10]);
        assert_eq!(y.data()[..10].iter().sum::<f64>(), 5.0);
    }
}
