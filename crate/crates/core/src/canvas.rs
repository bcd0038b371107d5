//! Square pixel grids and the differentiable glyph write/read pair.
//!
//! Writing maps a `G×G` glyph onto the square box extent of a `S×S` canvas.
//! Each canvas pixel takes the clamped bilinear sample of the glyph at its
//! centre, scaled by the fraction of the pixel covered by the box. The result
//! is exactly zero on pixels that do not touch the box and is piecewise
//! smooth in the box centre, side, and the glyph pixels.
//!
//! Reading is the inverse warp: glyph pixel centres are mapped into the box
//! and the canvas is sampled bilinearly with zero padding.

use serde::{Deserialize, Serialize};

use crate::error::{AsrError, Result};
use crate::latent::BoundingBox;
use crate::tape::{Graph, Tensor, Var};

/// Row-major `size×size` grid of reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub size: usize,
    pub pixels: Vec<f64>,
}

/// Glyphs share the canvas representation at the glyph resolution.
pub type Glyph = Canvas;

impl Canvas {
    pub fn zeros(size: usize) -> Self {
        Canvas { size, pixels: vec![0.0; size * size] }
    }

    pub fn filled(size: usize, v: f64) -> Self {
        Canvas { size, pixels: vec![v; size * size] }
    }

    pub fn from_pixels(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(AsrError::Contract(format!("{} pixels cannot form a {size}x{size} grid", pixels.len())));
        }
        Ok(Canvas { size, pixels })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.size + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.size + col] = v;
    }

    pub fn max_abs_diff(&self, other: &Canvas) -> f64 {
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Per-axis sampling record for one canvas column (or row) touched by a box.
#[derive(Clone, Copy, Debug)]
struct WriteTap {
    pixel: usize,
    cov: f64,
    dcov_dc: f64,
    dcov_ds: f64,
    i0: usize,
    i1: usize,
    frac: f64,
    dg_dc: f64,
    dg_ds: f64,
}

fn write_taps(center: f64, side: f64, glyph: usize, size: usize) -> Vec<WriteTap> {
    if !(side > 0.0) || !center.is_finite() {
        return Vec::new();
    }
    let lo = center - side / 2.0;
    let hi = center + side / 2.0;
    let first = lo.floor().max(0.0);
    let last = hi.ceil().min(size as f64);
    if first >= last {
        return Vec::new();
    }
    let gscale = glyph as f64 / side;
    let mut taps = Vec::with_capacity((last - first) as usize);
    for j in first as usize..last as usize {
        let jf = j as f64;
        let right = (jf + 1.0).min(hi);
        let left = jf.max(lo);
        let raw = right - left;
        if raw <= 0.0 {
            continue;
        }
        let (cov, dcov_dc, dcov_ds) = if raw >= 1.0 {
            (1.0, 0.0, 0.0)
        } else {
            let hi_active = (hi < jf + 1.0) as u8 as f64;
            let lo_active = (lo > jf) as u8 as f64;
            (raw, hi_active - lo_active, 0.5 * (hi_active + lo_active))
        };
        let offset = jf + 0.5 - center;
        let gpos = offset * gscale + glyph as f64 / 2.0 - 0.5;
        let gmax = (glyph - 1) as f64;
        let (gc, dg_dc, dg_ds) = if gpos <= 0.0 {
            (0.0, 0.0, 0.0)
        } else if gpos >= gmax {
            (gmax, 0.0, 0.0)
        } else {
            (gpos, -gscale, -offset * gscale / side)
        };
        let (i0, i1, frac) = if glyph == 1 {
            (0, 0, 0.0)
        } else {
            let i0 = (gc.floor() as usize).min(glyph - 2);
            (i0, i0 + 1, gc - i0 as f64)
        };
        taps.push(WriteTap { pixel: j, cov, dcov_dc, dcov_ds, i0, i1, frac, dg_dc, dg_ds });
    }
    taps
}

/// Adds one glyph write into `out`.
fn write_forward(glyph: &[f64], gsize: usize, b: [f64; 3], size: usize, out: &mut [f64]) {
    let xs = write_taps(b[0], b[2], gsize, size);
    let ys = write_taps(b[1], b[2], gsize, size);
    for ty in &ys {
        let r0 = &glyph[ty.i0 * gsize..(ty.i0 + 1) * gsize];
        let r1 = &glyph[ty.i1 * gsize..(ty.i1 + 1) * gsize];
        let row = &mut out[ty.pixel * size..(ty.pixel + 1) * size];
        for tx in &xs {
            let top = r0[tx.i0] + tx.frac * (r0[tx.i1] - r0[tx.i0]);
            let bot = r1[tx.i0] + tx.frac * (r1[tx.i1] - r1[tx.i0]);
            let v = top + ty.frac * (bot - top);
            row[tx.pixel] += tx.cov * ty.cov * v;
        }
    }
}

/// Accumulates gradients of one glyph write.
fn write_backward(glyph: &[f64], gsize: usize, b: [f64; 3], size: usize, gout: &[f64], gglyph: Option<&mut [f64]>) -> [f64; 3] {
    let xs = write_taps(b[0], b[2], gsize, size);
    let ys = write_taps(b[1], b[2], gsize, size);
    let mut gb = [0.0; 3];
    let mut gglyph = gglyph;
    for ty in &ys {
        let r0 = &glyph[ty.i0 * gsize..(ty.i0 + 1) * gsize];
        let r1 = &glyph[ty.i1 * gsize..(ty.i1 + 1) * gsize];
        for tx in &xs {
            let go = gout[ty.pixel * size + tx.pixel];
            if go == 0.0 {
                continue;
            }
            let (a00, a01, a10, a11) = (r0[tx.i0], r0[tx.i1], r1[tx.i0], r1[tx.i1]);
            let top = a00 + tx.frac * (a01 - a00);
            let bot = a10 + tx.frac * (a11 - a10);
            let v = top + ty.frac * (bot - top);
            let dv_dx = (1.0 - ty.frac) * (a01 - a00) + ty.frac * (a11 - a10);
            let dv_dy = bot - top;
            let cov = tx.cov * ty.cov;
            gb[0] += go * ty.cov * (tx.dcov_dc * v + tx.cov * dv_dx * tx.dg_dc);
            gb[1] += go * tx.cov * (ty.dcov_dc * v + ty.cov * dv_dy * ty.dg_dc);
            gb[2] += go * (ty.cov * (tx.dcov_ds * v + tx.cov * dv_dx * tx.dg_ds) + tx.cov * (ty.dcov_ds * v + ty.cov * dv_dy * ty.dg_ds));
            if let Some(gg) = gglyph.as_deref_mut() {
                let w = go * cov;
                gg[ty.i0 * gsize + tx.i0] += w * (1.0 - ty.frac) * (1.0 - tx.frac);
                gg[ty.i0 * gsize + tx.i1] += w * (1.0 - ty.frac) * tx.frac;
                gg[ty.i1 * gsize + tx.i0] += w * ty.frac * (1.0 - tx.frac);
                gg[ty.i1 * gsize + tx.i1] += w * ty.frac * tx.frac;
            }
        }
    }
    gb
}

/// Per-axis bilinear read position for glyph index `u`.
#[inline]
fn read_pos(center: f64, side: f64, u: usize, gsize: usize) -> (f64, f64) {
    let t = (u as f64 + 0.5) / gsize as f64;
    (center - side / 2.0 + t * side - 0.5, t - 0.5)
}

#[inline]
fn split(p: f64) -> (isize, f64) {
    // far outside the canvas every tap reads zero; clamping keeps the
    // neighbour index arithmetic from overflowing
    let p = p.clamp(-1e9, 1e9);
    let f = p.floor();
    (f as isize, p - f)
}

#[inline]
fn pix(img: &[f64], size: usize, r: isize, c: isize) -> f64 {
    if r < 0 || c < 0 || r >= size as isize || c >= size as isize {
        0.0
    } else {
        img[r as usize * size + c as usize]
    }
}

fn read_forward(img: &[f64], size: usize, b: [f64; 3], gsize: usize, out: &mut [f64]) {
    for v in 0..gsize {
        let (py, _) = read_pos(b[1], b[2], v, gsize);
        let (y0, fy) = split(py);
        for u in 0..gsize {
            let (px, _) = read_pos(b[0], b[2], u, gsize);
            let (x0, fx) = split(px);
            let top = pix(img, size, y0, x0) * (1.0 - fx) + pix(img, size, y0, x0 + 1) * fx;
            let bot = pix(img, size, y0 + 1, x0) * (1.0 - fx) + pix(img, size, y0 + 1, x0 + 1) * fx;
            out[v * gsize + u] = top * (1.0 - fy) + bot * fy;
        }
    }
}

fn read_backward(img: &[f64], size: usize, b: [f64; 3], gsize: usize, gout: &[f64], gimg: Option<&mut [f64]>) -> [f64; 3] {
    let mut gb = [0.0; 3];
    let mut gimg = gimg;
    for v in 0..gsize {
        let (py, dpy_ds) = read_pos(b[1], b[2], v, gsize);
        let (y0, fy) = split(py);
        for u in 0..gsize {
            let go = gout[v * gsize + u];
            if go == 0.0 {
                continue;
            }
            let (px, dpx_ds) = read_pos(b[0], b[2], u, gsize);
            let (x0, fx) = split(px);
            let a00 = pix(img, size, y0, x0);
            let a01 = pix(img, size, y0, x0 + 1);
            let a10 = pix(img, size, y0 + 1, x0);
            let a11 = pix(img, size, y0 + 1, x0 + 1);
            let dv_dx = (1.0 - fy) * (a01 - a00) + fy * (a11 - a10);
            let top = a00 + fx * (a01 - a00);
            let bot = a10 + fx * (a11 - a10);
            let dv_dy = bot - top;
            gb[0] += go * dv_dx;
            gb[1] += go * dv_dy;
            gb[2] += go * (dv_dx * dpx_ds + dv_dy * dpy_ds);
            if let Some(gi) = gimg.as_deref_mut() {
                let mut put = |r: isize, c: isize, w: f64| {
                    if r >= 0 && c >= 0 && (r as usize) < size && (c as usize) < size {
                        gi[r as usize * size + c as usize] += go * w;
                    }
                };
                put(y0, x0, (1.0 - fy) * (1.0 - fx));
                put(y0, x0 + 1, (1.0 - fy) * fx);
                put(y0 + 1, x0, fy * (1.0 - fx));
                put(y0 + 1, x0 + 1, fy * fx);
            }
        }
    }
    gb
}

fn box_array(b: &BoundingBox) -> [f64; 3] {
    [b.cx, b.cy, b.side]
}

/// Write `glyph` into an empty `size×size` canvas at `bbox`.
/// Distance from `bbox` to the nearest configuration where the write is not
/// differentiable, measured per axis in pixels (a box edge crossing a pixel
/// boundary) or glyph texels (a pixel centre crossing a texel centre, where
/// bilinear weights and the border clamp switch).
pub fn write_kink_distance(bbox: &BoundingBox, gsize: usize, size: usize) -> f64 {
    let to_int = |v: f64| (v - v.round()).abs();
    let gmax = gsize as f64 - 1.0;
    let axis = |c: f64| {
        let (lo, hi) = (c - bbox.side / 2.0, c + bbox.side / 2.0);
        let mut d = to_int(lo).min(to_int(hi));
        let first = lo.floor().max(0.0) as usize;
        let last = hi.ceil().min(size as f64).max(0.0) as usize;
        for j in first..last {
            let gpos = (j as f64 + 0.5 - c) * gsize as f64 / bbox.side + gsize as f64 / 2.0 - 0.5;
            let dj = if gpos < 0.0 {
                -gpos
            } else if gpos > gmax {
                gpos - gmax
            } else {
                to_int(gpos)
            };
            d = d.min(dj);
        }
        d
    };
    axis(bbox.cx).min(axis(bbox.cy))
}

pub fn place_glyph(glyph: &Glyph, bbox: &BoundingBox, size: usize) -> Canvas {
    let mut out = Canvas::zeros(size);
    write_forward(&glyph.pixels, glyph.size, box_array(bbox), size, &mut out.pixels);
    out
}

/// Inverse warp: sample `canvas` at the glyph-pixel centres mapped into `bbox`.
pub fn read_glyph(canvas: &Canvas, bbox: &BoundingBox, glyph_size: usize) -> Glyph {
    let mut out = Canvas::zeros(glyph_size);
    read_forward(&canvas.pixels, canvas.size, box_array(bbox), glyph_size, &mut out.pixels);
    out
}

fn row_box(t: &Tensor, r: usize) -> [f64; 3] {
    [t.at(r, 0), t.at(r, 1), t.at(r, 2)]
}

/// Batched write: glyphs `B×G²`, boxes `B×3` (cx, cy, side) → canvases `B×S²`.
pub fn write_glyphs(g: &mut Graph, glyphs: Var, boxes: Var, gsize: usize, size: usize) -> Var {
    let (tg, tb) = (g.value(glyphs), g.value(boxes));
    assert_eq!(tg.cols, gsize * gsize, "glyph tensor width");
    assert_eq!((tg.rows, 3), tb.shape(), "box tensor shape");
    let mut out = Tensor::zeros(tg.rows, size * size);
    for r in 0..tg.rows {
        write_forward(tg.row(r), gsize, row_box(tb, r), size, &mut out.data[r * size * size..(r + 1) * size * size]);
    }
    let want_glyph = g.requires_grad(glyphs);
    let want_box = g.requires_grad(boxes);
    g.custom(&[glyphs, boxes], out, move |gout, parents, _| {
        let (tg, tb) = (parents[0], parents[1]);
        let mut gg = want_glyph.then(|| Tensor::zeros(tg.rows, tg.cols));
        let mut gbx = Tensor::zeros(tb.rows, 3);
        for r in 0..tg.rows {
            let slot = gg.as_mut().map(|t| &mut t.data[r * tg.cols..(r + 1) * tg.cols]);
            let d = write_backward(tg.row(r), gsize, row_box(tb, r), size, gout.row(r), slot);
            gbx.data[r * 3..r * 3 + 3].copy_from_slice(&d);
        }
        vec![gg, want_box.then_some(gbx)]
    })
}

/// Batched read: images `B×S²`, boxes `B×3` → crops `B×G²`.
pub fn read_glyphs(g: &mut Graph, images: Var, boxes: Var, size: usize, gsize: usize) -> Var {
    let (ti, tb) = (g.value(images), g.value(boxes));
    assert_eq!(ti.cols, size * size, "image tensor width");
    assert_eq!((ti.rows, 3), tb.shape(), "box tensor shape");
    let mut out = Tensor::zeros(ti.rows, gsize * gsize);
    for r in 0..ti.rows {
        read_forward(ti.row(r), size, row_box(tb, r), gsize, &mut out.data[r * gsize * gsize..(r + 1) * gsize * gsize]);
    }
    let want_img = g.requires_grad(images);
    let want_box = g.requires_grad(boxes);
    g.custom(&[images, boxes], out, move |gout, parents, _| {
        let (ti, tb) = (parents[0], parents[1]);
        let mut gi = want_img.then(|| Tensor::zeros(ti.rows, ti.cols));
        let mut gbx = Tensor::zeros(tb.rows, 3);
        for r in 0..ti.rows {
            let slot = gi.as_mut().map(|t| &mut t.data[r * ti.cols..(r + 1) * ti.cols]);
            let d = read_backward(ti.row(r), size, row_box(tb, r), gsize, gout.row(r), slot);
            gbx.data[r * 3..r * 3 + 3].copy_from_slice(&d);
        }
        vec![gi, want_box.then_some(gbx)]
    })
}
