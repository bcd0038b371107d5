//! Figure grids: originals beside reconstructions, or prior samples, with
//! boxes outlined in one colour per inference step.

use rand::Rng;

use crate::canvas::Canvas;
use crate::error::Result;
use crate::generative::{NoiseModel, BERNOULLI_CLAMP};
use crate::latent::BoundingBox;
use crate::model::{AsrModel, LatentDraw, TrajectoryOptions};
use crate::tape::Graph;

/// Outline colours by step, cycled past the end.
pub const STEP_COLOURS: [[u8; 3]; 6] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25], [240, 50, 230], [70, 240, 240]];

const BACKGROUND: [u8; 3] = [96, 96, 96];

/// Packed 8-bit RGB image, row major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        RgbImage { width, height, data: fill.iter().copied().cycle().take(width * height * 3).collect() }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Paste all of `src` with its top-left corner at `(dx, dy)`.
    fn blit(&mut self, src: &RgbImage, dx: usize, dy: usize) {
        for y in 0..src.height {
            for x in 0..src.width {
                self.put(dx + x, dy + y, src.get(x, y));
            }
        }
    }

    /// The `w×h` block at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
        let mut out = RgbImage::new(w, h, [0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.put(x, y, self.get(x0 + x, y0 + y));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridOptions {
    /// Cells per row.
    pub columns: usize,
    /// Background pixels between cells.
    pub gap: usize,
    /// Draw box outlines.
    pub overlay: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { columns: 4, gap: 2, overlay: true }
    }
}

fn grey(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Inclusive pixel extent `(x0, y0, x1, y1)` of a box outline on an `S×S`
/// canvas, or `None` when nothing of it is visible. Edges are rounded to the
/// nearest pixel boundary, so a lattice-aligned box outlines exactly the
/// pixels it covers.
pub fn outline_extent(b: &BoundingBox, size: usize) -> Option<(usize, usize, usize, usize)> {
    let s = size as f64;
    let (l, r) = (b.x_min().round(), b.x_max().round() - 1.0);
    let (t, d) = (b.y_min().round(), b.y_max().round() - 1.0);
    if !(r >= l && d >= t) || r < 0.0 || d < 0.0 || l > s - 1.0 || t > s - 1.0 {
        return None;
    }
    let c = |v: f64| v.clamp(0.0, s - 1.0) as usize;
    Some((c(l), c(t), c(r), c(d)))
}

/// One cell: the canvas in grey with optional step-coloured outlines.
pub fn draw_cell(canvas: &Canvas, boxes: &[BoundingBox], overlay: bool) -> RgbImage {
    let s = canvas.size;
    let mut img = RgbImage::new(s, s, [0; 3]);
    for y in 0..s {
        for x in 0..s {
            let v = grey(canvas.get(y, x));
            img.put(x, y, [v, v, v]);
        }
    }
    if overlay {
        for (step, b) in boxes.iter().enumerate() {
            let colour = STEP_COLOURS[step % STEP_COLOURS.len()];
            if let Some((x0, y0, x1, y1)) = outline_extent(b, s) {
                for x in x0..=x1 {
                    img.put(x, y0, colour);
                    img.put(x, y1, colour);
                }
                for y in y0..=y1 {
                    img.put(x0, y, colour);
                    img.put(x1, y, colour);
                }
            }
        }
    }
    img
}

/// Cells laid out `columns` wide.
pub fn grid(cells: &[RgbImage], opts: &GridOptions) -> RgbImage {
    let (cw, ch) = cells.first().map(|c| (c.width, c.height)).unwrap_or((0, 0));
    let cols = opts.columns.max(1).min(cells.len().max(1));
    let rows = cells.len().div_ceil(cols).max(1);
    let g = opts.gap;
    let mut out = RgbImage::new(g + cols * (cw + g), g + rows * (ch + g), BACKGROUND);
    for (i, c) in cells.iter().enumerate() {
        out.blit(c, g + (i % cols) * (cw + g), g + (i / cols) * (ch + g));
    }
    out
}

/// Two grids side by side: originals on the left, reconstructions with
/// inferred boxes on the right. Both halves have the same width.
pub fn reconstruction_grid(originals: &[Canvas], recons: &[(Canvas, Vec<BoundingBox>)], opts: &GridOptions) -> RgbImage {
    let left: Vec<RgbImage> = originals.iter().map(|c| draw_cell(c, &[], false)).collect();
    let right: Vec<RgbImage> = recons.iter().map(|(c, b)| draw_cell(c, b, opts.overlay)).collect();
    let (l, r) = (grid(&left, opts), grid(&right, opts));
    let mut out = RgbImage::new(l.width + r.width, l.height.max(r.height), BACKGROUND);
    out.blit(&l, 0, 0);
    out.blit(&r, l.width, 0);
    out
}

/// Posterior-mean reconstructions and inferred boxes, in step order.
pub fn reconstruct(model: &AsrModel, images: &[&Canvas], rng: &mut impl Rng) -> Result<Vec<(Canvas, Vec<BoundingBox>)>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, |_| false);
    let x = g.constant(model.images_tensor(images)?);
    let opts = TrajectoryOptions { draw: LatentDraw::Mean, ..Default::default() };
    let tr = model.posterior_trajectory(&mut g, &p, x, rng, &opts);
    let mean = g.value(tr.mean);
    Ok((0..images.len())
        .map(|b| {
            let mut c = Canvas { size: model.config.canvas_size, pixels: mean.row(b).to_vec() };
            if model.config.noise == NoiseModel::Bernoulli {
                c.pixels.iter_mut().for_each(|v| *v = v.clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP));
            }
            (c, tr.boxes(&g, b))
        })
        .collect())
}

/// Grid of `n` scenes drawn from the generative model.
pub fn generation_grid(model: &AsrModel, n: usize, rng: &mut impl Rng, opts: &GridOptions) -> RgbImage {
    let (scenes, canvases) = model.sample_prior_batch(n, model.config.max_steps, rng);
    let cells: Vec<RgbImage> = scenes.iter().zip(&canvases).map(|(s, c)| draw_cell(c, &s.boxes(), opts.overlay)).collect();
    grid(&cells, opts)
}
