//! Synthetic multi-object scenes: layouts, glyph sources, rendering and the
//! dataset archive.
//!
//! Boxes are sampled on the pixel lattice (integer top-left corner) so that
//! glyphs paste without resampling and annotations are exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canvas::{Canvas, Glyph};
use crate::constraints::f1_pairwise_overlap;
use crate::error::{AsrError, Result};
use crate::latent::BoundingBox;

const MAGIC: &[u8; 8] = b"ASRDATA\0";
pub const DATASET_FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// One image with its ground-truth boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetExample {
    pub image: Canvas,
    pub boxes: Vec<BoundingBox>,
}

impl DatasetExample {
    pub fn gt_count(&self) -> usize {
        self.boxes.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GlyphSource {
    /// Digits from an IDX image file (the standard MNIST distribution format).
    MnistGlyphs { images: PathBuf },
    /// Squares, ellipses and triangles rasterized at glyph resolution.
    ProceduralSprites,
}

/// How overlapping glyphs combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composite {
    #[default]
    Max,
    SumClamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: GlyphSource,
    /// `(object count, number of examples)` pairs, emitted in this order.
    pub counts: Vec<(usize, usize)>,
    pub canvas_size: usize,
    pub glyph_size: usize,
    pub non_overlap: bool,
    pub seed: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    #[serde(default)]
    pub composite: Composite,
}

fn default_attempts() -> usize {
    100_000
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.glyph_size == 0 || self.glyph_size > self.canvas_size {
            return Err(AsrError::Config(format!("glyph side {} must lie in 1..={}", self.glyph_size, self.canvas_size)));
        }
        if self.counts.is_empty() {
            return Err(AsrError::Config("dataset lists no counts".into()));
        }
        if let Some((c, _)) = self.counts.iter().find(|(_, e)| *e == 0) {
            return Err(AsrError::Config(format!("count {c} has zero examples")));
        }
        if self.max_attempts == 0 {
            return Err(AsrError::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.counts.iter().map(|(_, e)| e).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Expected `count → examples` histogram.
    pub fn histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for &(c, e) in &self.counts {
            *h.entry(c).or_insert(0) += e;
        }
        h
    }
}

pub fn histogram(examples: &[DatasetExample]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for ex in examples {
        *h.entry(ex.gt_count()).or_insert(0) += 1;
    }
    h
}

/// `n` boxes of the given side with corners on the pixel lattice, centres
/// uniform over the positions that keep the box inside the canvas. With
/// `non_overlap`, whole layouts are redrawn until no pair overlaps.
pub fn sample_layout(
    n: usize,
    size: usize,
    side: usize,
    non_overlap: bool,
    rng: &mut impl Rng,
    max_attempts: usize,
) -> Result<Vec<BoundingBox>> {
    if side > size {
        return Err(AsrError::Contract(format!("box side {side} exceeds canvas {size}")));
    }
    let half = side as f64 / 2.0;
    let span = size - side;
    for _ in 0..max_attempts.max(1) {
        let layout: Vec<BoundingBox> = (0..n)
            .map(|_| {
                let x0 = rng.gen_range(0..=span) as f64;
                let y0 = rng.gen_range(0..=span) as f64;
                BoundingBox::new(x0 + half, y0 + half, side as f64)
            })
            .collect();
        if !non_overlap || f1_pairwise_overlap(&layout) == 0.0 {
            return Ok(layout);
        }
    }
    Err(AsrError::Infeasible { n, size, side: side as f64, attempts: max_attempts })
}

/// Supplies glyphs for rendering.
#[derive(Clone, Debug)]
pub enum GlyphBank {
    Images(Vec<Glyph>),
    Sprites { size: usize },
}

impl GlyphBank {
    pub fn load(source: &GlyphSource, glyph_size: usize) -> Result<Self> {
        match source {
            GlyphSource::ProceduralSprites => Ok(GlyphBank::Sprites { size: glyph_size }),
            GlyphSource::MnistGlyphs { images } => {
                let digits = read_idx_images(images)?;
                if digits.is_empty() {
                    return Err(AsrError::Corrupt { what: "IDX file", detail: "holds no images".into() });
                }
                Ok(GlyphBank::Images(digits.iter().map(|d| digit_glyph(d, glyph_size)).collect()))
            }
        }
    }

    pub fn glyph_size(&self) -> usize {
        match self {
            GlyphBank::Images(g) => g[0].size,
            GlyphBank::Sprites { size } => *size,
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Glyph {
        match self {
            GlyphBank::Images(g) => g.choose(rng).expect("nonempty bank").clone(),
            GlyphBank::Sprites { size } => {
                let shape = match rng.gen_range(0..3) {
                    0 => Sprite::Square,
                    1 => Sprite::Ellipse,
                    _ => Sprite::Triangle,
                };
                sprite(shape, *size)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sprite {
    Square,
    Ellipse,
    Triangle,
}

/// Binary shape filling the glyph box, antialiased by 4×4 supersampling.
pub fn sprite(shape: Sprite, size: usize) -> Glyph {
    let n = size as f64;
    let inside = |x: f64, y: f64| -> bool {
        // unit coordinates in [-1, 1]
        let (u, v) = (2.0 * x / n - 1.0, 2.0 * y / n - 1.0);
        match shape {
            Sprite::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Sprite::Ellipse => (u / 0.95).powi(2) + (v / 0.7).powi(2) <= 1.0,
            Sprite::Triangle => (-0.85..=0.85).contains(&v) && u.abs() <= (v + 0.85) / 1.7 * 0.95,
        }
    };
    let mut g = Canvas::zeros(size);
    for r in 0..size {
        for c in 0..size {
            let mut hits = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = c as f64 + (sx as f64 + 0.5) / 4.0;
                    let y = r as f64 + (sy as f64 + 0.5) / 4.0;
                    hits += inside(x, y) as u32;
                }
            }
            g.set(r, c, quantize(hits as f64 / 16.0));
        }
    }
    g
}

/// Round to the nearest multiple of 1/255, the archive's pixel resolution.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Read an IDX3 unsigned-byte image file into `[0,1]` canvases.
pub fn read_idx_images(path: &Path) -> Result<Vec<Canvas>> {
    let bytes = fs::read(path).map_err(|e| AsrError::io(path, e))?;
    let corrupt = |d: String| AsrError::corrupt("IDX file", d);
    if bytes.len() < 16 {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(0) != 0x0000_0803 {
        return Err(corrupt(format!("magic {:#010x} is not an unsigned-byte 3-d array", word(0))));
    }
    let (n, rows, cols) = (word(4) as usize, word(8) as usize, word(12) as usize);
    if rows != cols || rows == 0 {
        return Err(corrupt(format!("images are {rows}x{cols}, expected square")));
    }
    let need = 16 + n * rows * cols;
    if bytes.len() != need {
        return Err(corrupt(format!("expected {need} bytes, found {}", bytes.len())));
    }
    Ok(bytes[16..]
        .chunks_exact(rows * cols)
        .map(|px| Canvas { size: rows, pixels: px.iter().map(|&b| b as f64 / 255.0).collect() })
        .collect())
}

/// Central crop of a digit to its 20-pixel normalisation box, resampled to
/// the glyph size when that differs.
fn digit_glyph(digit: &Canvas, size: usize) -> Glyph {
    let crop = 20.min(digit.size);
    let off = (digit.size - crop) / 2;
    let mut c = Canvas::zeros(crop);
    for r in 0..crop {
        for k in 0..crop {
            c.set(r, k, digit.get(r + off, k + off));
        }
    }
    if crop == size {
        return c;
    }
    let mut out = Canvas::zeros(size);
    let scale = crop as f64 / size as f64;
    for r in 0..size {
        for k in 0..size {
            let y = ((r as f64 + 0.5) * scale - 0.5).clamp(0.0, (crop - 1) as f64);
            let x = ((k as f64 + 0.5) * scale - 0.5).clamp(0.0, (crop - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(crop - 1), (x0 + 1).min(crop - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let v = c.get(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + c.get(y0, x1) * (1.0 - fy) * fx
                + c.get(y1, x0) * fy * (1.0 - fx)
                + c.get(y1, x1) * fy * fx;
            out.set(r, k, quantize(v));
        }
    }
    out
}

/// Paste glyphs at lattice-aligned layout boxes.
pub fn render_example(glyphs: &[Glyph], layout: &[BoundingBox], size: usize, composite: Composite) -> Result<DatasetExample> {
    if glyphs.len() != layout.len() {
        return Err(AsrError::Contract(format!("{} glyphs for {} boxes", glyphs.len(), layout.len())));
    }
    let mut image = Canvas::zeros(size);
    for (g, b) in glyphs.iter().zip(layout) {
        let x0 = b.x_min();
        let y0 = b.y_min();
        let aligned = x0.fract() == 0.0 && y0.fract() == 0.0 && b.side == g.size as f64;
        if !aligned || x0 < 0.0 || y0 < 0.0 || b.x_max() > size as f64 || b.y_max() > size as f64 {
            return Err(AsrError::Contract(format!("box {b:?} is not a lattice-aligned in-canvas box of side {}", g.size)));
        }
        let (x0, y0) = (x0 as usize, y0 as usize);
        for r in 0..g.size {
            for c in 0..g.size {
                let v = g.get(r, c);
                let px = &mut image.pixels[(y0 + r) * size + x0 + c];
                *px = match composite {
                    Composite::Max => px.max(v),
                    Composite::SumClamp => (*px + v).min(1.0),
                };
            }
        }
    }
    Ok(DatasetExample { image, boxes: layout.to_vec() })
}

/// Deterministic dataset: example `i` draws from its own stream of the seed.
pub fn synth_dataset(spec: &DatasetSpec, bank: &GlyphBank) -> Result<Vec<DatasetExample>> {
    spec.validate()?;
    if bank.glyph_size() != spec.glyph_size {
        return Err(AsrError::Contract(format!("glyph bank has side {}, spec asks for {}", bank.glyph_size(), spec.glyph_size)));
    }
    let mut out = Vec::with_capacity(spec.len());
    let mut index = 0u64;
    for &(n, examples) in &spec.counts {
        for _ in 0..examples {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index);
            index += 1;
            let layout = sample_layout(n, spec.canvas_size, spec.glyph_size, spec.non_overlap, &mut rng, spec.max_attempts)?;
            let glyphs: Vec<Glyph> = (0..n).map(|_| bank.draw(&mut rng)).collect();
            let mut ex = render_example(&glyphs, &layout, spec.canvas_size, spec.composite)?;
            ex.image.pixels.iter_mut().for_each(|p| *p = quantize(*p));
            out.push(ex);
        }
    }
    Ok(out)
}

/// Header fields of a dataset archive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub canvas_size: usize,
    pub seed: u64,
    pub histogram: BTreeMap<usize, usize>,
}

fn encode(examples: &[DatasetExample], size: usize, seed: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&DATASET_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(size as u32).to_le_bytes());
    buf.extend_from_slice(&(examples.len() as u64).to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    let hist = histogram(examples);
    buf.extend_from_slice(&(hist.len() as u32).to_le_bytes());
    for (c, e) in &hist {
        buf.extend_from_slice(&(*c as u32).to_le_bytes());
        buf.extend_from_slice(&(*e as u64).to_le_bytes());
    }
    for ex in examples {
        if ex.image.size != size {
            return Err(AsrError::Contract("examples of mixed canvas size".into()));
        }
        for &p in &ex.image.pixels {
            let q = (p * 255.0).round();
            if !(0.0..=255.0).contains(&q) || q / 255.0 != p {
                return Err(AsrError::Contract(format!("pixel {p} is not a multiple of 1/255 in [0,1]")));
            }
            buf.push(q as u8);
        }
    }
    let total: usize = examples.iter().map(|e| e.boxes.len()).sum();
    buf.extend_from_slice(&(total as u64).to_le_bytes());
    for (i, ex) in examples.iter().enumerate() {
        for b in &ex.boxes {
            buf.extend_from_slice(&(i as u64).to_le_bytes());
            for v in [b.cx, b.cy, b.side] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Write an archive; `size` is needed for empty datasets.
pub fn write_dataset(path: &Path, examples: &[DatasetExample], size: usize, seed: u64) -> Result<()> {
    let buf = encode(examples, size, seed)?;
    fs::write(path, buf).map_err(|e| AsrError::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AsrError::corrupt("dataset", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetExample>)> {
    let bytes = fs::read(path).map_err(|e| AsrError::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<(DatasetHeader, Vec<DatasetExample>)> {
    if bytes.len() < MAGIC.len() + CHECKSUM_LEN {
        return Err(AsrError::corrupt("dataset", format!("only {} bytes", bytes.len())));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(AsrError::corrupt("dataset", "bad magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(AsrError::corrupt("dataset", "checksum mismatch (truncated or modified)"));
    }
    let mut cur = Cursor { buf: body, pos: MAGIC.len() };
    let version = cur.u32()?;
    if version != DATASET_FORMAT_VERSION {
        return Err(AsrError::corrupt("dataset", format!("format version {version}, expected {DATASET_FORMAT_VERSION}")));
    }
    let size = cur.u32()? as usize;
    let n = cur.u64()? as usize;
    let seed = cur.u64()?;
    let hist_len = cur.u32()? as usize;
    let mut hist = BTreeMap::new();
    for _ in 0..hist_len {
        let c = cur.u32()? as usize;
        let e = cur.u64()? as usize;
        hist.insert(c, e);
    }
    let px = size
        .checked_mul(size)
        .and_then(|p| p.checked_mul(n))
        .filter(|&p| p <= body.len())
        .ok_or_else(|| AsrError::corrupt("dataset", "image block larger than file"))?;
    let block = cur.take(px)?;
    if size == 0 && n > 0 {
        return Err(AsrError::corrupt("dataset", "zero canvas size with examples"));
    }
    let mut examples: Vec<DatasetExample> = (0..n)
        .map(|i| DatasetExample {
            image: Canvas { size, pixels: block[i * size * size..(i + 1) * size * size].iter().map(|&b| b as f64 / 255.0).collect() },
            boxes: vec![],
        })
        .collect();
    let total = cur.u64()? as usize;
    for _ in 0..total {
        let i = cur.u64()? as usize;
        let b = BoundingBox::new(cur.f64()?, cur.f64()?, cur.f64()?);
        examples.get_mut(i).ok_or_else(|| AsrError::corrupt("dataset", format!("annotation for missing example {i}")))?.boxes.push(b);
    }
    if cur.pos != body.len() {
        return Err(AsrError::corrupt("dataset", "trailing bytes"));
    }
    if histogram(&examples) != hist {
        return Err(AsrError::corrupt("dataset", "header histogram disagrees with annotations"));
    }
    Ok((DatasetHeader { version, canvas_size: size, seed, histogram: hist }, examples))
}
