//! Raster images, the fixed 8×8 patch grid, bicubic resampling and
//! seam-feathered reassembly.
//!
//! Pixels are stored planar (`[3, H, W]`, R then G then B) in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GRID_ROWS: usize = 8;
pub const GRID_COLS: usize = 8;
pub const PATCH_COUNT: usize = GRID_ROWS * GRID_COLS;
pub const MIN_SIDE: usize = 8;

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
}

impl Image {
    pub fn from_tensor(pixels: Tensor) -> Result<Self> {
        let (c, h, w) = pixels.dims3()?;
        if c != 3 {
            return Err(Error::invalid(format!("image needs 3 channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image must be at least {MIN_SIDE}×{MIN_SIDE}, got {h}×{w}"
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self { pixels })
    }

    /// Clamps into `[0, 1]` (NaN becomes 0) before validating the shape.
    pub fn from_tensor_clamped(pixels: Tensor) -> Result<Self> {
        Self::from_tensor(pixels.map(clamp01))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_tensor(Tensor::from_vec(&[3, height, width], data)?)
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        let (h, w) = self.dims();
        self.pixels.data()[(c * h + y) * w + x]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_tensor(self) -> Tensor {
        self.pixels
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::load(path, e))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
            }
        }
        Self::from_tensor(Tensor::from_vec(&[3, h, w], data)?).map_err(|e| Error::load(path, e))
    }

    /// Writes an 8-bit RGB PNG, quantizing with round-half-up.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = self.dims();
        let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| quantize(self.get(y as usize, x as usize, c));
            image::Rgb([px(0), px(1), px(2)])
        });
        buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }
}

pub fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// `[0,1] → u8` with halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (clamp01(v) * 255.0 + 0.5).floor() as u8
}

/// Per-pixel `Y = 0.299R + 0.587G + 0.114B` as an `[H, W]` tensor.
pub fn luminance(img: &Image) -> Tensor {
    luminance_chw(img.tensor()).expect("image tensors are 3-channel")
}

pub(crate) fn luminance_chw(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::invalid("luminance needs an RGB tensor"));
    }
    let n = h * w;
    let d = t.data();
    let y = (0..n)
        .map(|i| LUMA[0] * d[i] + LUMA[1] * d[n + i] + LUMA[2] * d[2 * n + i])
        .collect();
    Tensor::from_vec(&[h, w], y)
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// 4-tap weights per output coordinate, half-pixel aligned, edge-clamped.
fn axis_taps(src: usize, dst: usize) -> Vec<[(usize, f64); 4]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let frac = s - base;
            let mut taps = [(0, 0.0); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let off = k as isize - 1;
                let idx = (base as isize + off).clamp(0, src as isize - 1) as usize;
                *tap = (idx, cubic(frac - off as f64));
            }
            taps
        })
        .collect()
}

/// Separable bicubic resampling of a `[C,H,W]` tensor (Keys kernel, a = −0.5).
/// Values are not clamped.
pub fn resize_bicubic(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("resize to or from an empty raster"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(t.clone());
    }
    let tx = axis_taps(w, out_w);
    let ty = axis_taps(h, out_h);
    let src = t.data();
    let mut tmp = vec![0.0; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = &mut tmp[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (o, taps) in tx.iter().enumerate() {
                dst[o] = taps.iter().map(|&(i, wt)| wt * row[i]).sum();
            }
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for (oy, taps) in ty.iter().enumerate() {
            let dst = &mut out[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
            for &(iy, wt) in taps {
                let row = &tmp[(ch * h + iy) * out_w..(ch * h + iy + 1) * out_w];
                for (d, s) in dst.iter_mut().zip(row) {
                    *d += wt * s;
                }
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out)
}

/// Bicubic resize of an image, clamped back into `[0, 1]`.
pub fn resize_image(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    Image::from_tensor_clamped(resize_bicubic(img.tensor(), out_h, out_w)?)
}

/// Bicubically grows `img` to the smallest dimensions that are multiples of `m`.
pub fn resize_to_multiple(img: &Image, m: i64) -> Result<Image> {
    if m <= 0 {
        return Err(Error::invalid(format!("multiple must be positive, got {m}")));
    }
    let m = m as usize;
    let (h, w) = img.dims();
    let (nh, nw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (nh, nw) == (h, w) {
        return Ok(img.clone());
    }
    resize_image(img, nh, nw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGrid {
    pub fn for_dims(height: usize, width: usize) -> Result<Self> {
        if height % GRID_ROWS != 0 || width % GRID_COLS != 0 || height == 0 || width == 0 {
            return Err(Error::Precondition(format!(
                "{height}×{width} is not divisible by the {GRID_ROWS}×{GRID_COLS} grid"
            )));
        }
        Ok(Self {
            rows: GRID_ROWS,
            cols: GRID_COLS,
            patch_h: height / GRID_ROWS,
            patch_w: width / GRID_COLS,
        })
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_h
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct GridPos {
    pub row: usize,
    pub col: usize,
}

impl GridPos {
    pub fn index(&self) -> usize {
        self.row * GRID_COLS + self.col
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            row: i / GRID_COLS,
            col: i % GRID_COLS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pixels: Tensor,
    pub pos: GridPos,
}

impl Patch {
    pub fn new(pixels: Tensor, pos: GridPos) -> Result<Self> {
        let (c, h, w) = pixels.dims3()?;
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "patch must be 3×H×W with H,W ≥ 1, got {:?}",
                pixels.shape()
            )));
        }
        if pos.row >= GRID_ROWS || pos.col >= GRID_COLS {
            return Err(Error::invalid(format!("grid position {pos:?} out of range")));
        }
        Ok(Self { pixels, pos })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Cuts an image into 64 row-major patches.
pub fn partition(img: &Image) -> Result<Vec<Patch>> {
    partition_tensor(img.tensor())
}

pub(crate) fn partition_tensor(t: &Tensor) -> Result<Vec<Patch>> {
    let (_, h, w) = t.dims3()?;
    let grid = PatchGrid::for_dims(h, w)?;
    (0..PATCH_COUNT)
        .map(|i| {
            let pos = GridPos::from_index(i);
            let px = crate::autograd::crop_chw(
                t,
                pos.row * grid.patch_h,
                pos.col * grid.patch_w,
                grid.patch_h,
                grid.patch_w,
            )?;
            Ok(Patch { pixels: px, pos })
        })
        .collect()
}

/// Feather ramp weight of the far-side patch for offset `i` in `[0, 2b)`.
pub(crate) fn feather_weight(i: usize, b: usize) -> f64 {
    (i as f64 + 0.5) / (2 * b) as f64
}

fn place(patches: &[Patch]) -> Result<(Tensor, PatchGrid)> {
    if patches.len() != PATCH_COUNT {
        return Err(Error::invalid(format!(
            "assembly needs {PATCH_COUNT} patches, got {}",
            patches.len()
        )));
    }
    let (ph, pw) = (patches[0].height(), patches[0].width());
    let grid = PatchGrid {
        rows: GRID_ROWS,
        cols: GRID_COLS,
        patch_h: ph,
        patch_w: pw,
    };
    let (h, w) = (grid.height(), grid.width());
    let mut seen = [false; PATCH_COUNT];
    let mut out = vec![0.0; 3 * h * w];
    for p in patches {
        if p.height() != ph || p.width() != pw {
            return Err(Error::invalid("patches have inconsistent sizes"));
        }
        let i = p.pos.index();
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid(format!("duplicate grid position {:?}", p.pos)));
        }
        let (y0, x0) = (p.pos.row * ph, p.pos.col * pw);
        for c in 0..3 {
            for y in 0..ph {
                let src = &p.pixels.data()[(c * ph + y) * pw..(c * ph + y + 1) * pw];
                let d = (c * h + y0 + y) * w + x0;
                out[d..d + pw].copy_from_slice(src);
            }
        }
    }
    Ok((Tensor::from_vec(&[3, h, w], out)?, grid))
}

fn check_band(grid: &PatchGrid, b: usize) -> Result<()> {
    if 2 * b > grid.patch_h.min(grid.patch_w) {
        return Err(Error::invalid(format!(
            "blend width {b} too wide for {}×{} patches",
            grid.patch_h, grid.patch_w
        )));
    }
    Ok(())
}

/// Blends across every interior seam along one axis. `stride`/`len` select
/// the axis within a plane; the pass is linear in its input.
fn feather_axis(t: &mut [f64], planes: usize, outer: usize, len: usize, period: usize, b: usize, along_rows: bool) {
    // along_rows: seams between columns (x axis); otherwise between rows (y axis)
    if b == 0 {
        return;
    }
    let segments = len / period;
    let mut line = vec![0.0; len];
    for p in 0..planes {
        for o in 0..outer {
            let get = |t: &[f64], i: usize| {
                if along_rows {
                    t[(p * outer + o) * len + i]
                } else {
                    t[(p * len + i) * outer + o]
                }
            };
            for (i, v) in line.iter_mut().enumerate() {
                *v = get(t, i);
            }
            for k in 1..segments {
                let s = k * period;
                for i in 0..2 * b {
                    let x = s - b + i;
                    let wr = feather_weight(i, b);
                    let left = line[x.min(s - 1)];
                    let right = line[x.max(s)];
                    let v = (1.0 - wr) * left + wr * right;
                    if along_rows {
                        t[(p * outer + o) * len + x] = v;
                    } else {
                        t[(p * len + x) * outer + o] = v;
                    }
                }
            }
        }
    }
}

/// Adjoint of [`feather_axis`].
fn feather_axis_adjoint(g: &mut [f64], planes: usize, outer: usize, len: usize, period: usize, b: usize, along_rows: bool) {
    if b == 0 {
        return;
    }
    let segments = len / period;
    let mut line = vec![0.0; len];
    for p in 0..planes {
        for o in 0..outer {
            let idx = |i: usize| {
                if along_rows {
                    (p * outer + o) * len + i
                } else {
                    (p * len + i) * outer + o
                }
            };
            for (i, v) in line.iter_mut().enumerate() {
                *v = g[idx(i)];
            }
            // band outputs do not pass through; redistribute them
            for k in 1..segments {
                let s = k * period;
                for i in 0..2 * b {
                    line[s - b + i] = 0.0;
                }
            }
            for k in 1..segments {
                let s = k * period;
                for i in 0..2 * b {
                    let x = s - b + i;
                    let wr = feather_weight(i, b);
                    let gy = g[idx(x)];
                    line[x.min(s - 1)] += (1.0 - wr) * gy;
                    line[x.max(s)] += wr * gy;
                }
            }
            for (i, v) in line.iter().enumerate() {
                g[idx(i)] = *v;
            }
        }
    }
}

/// Reassembles 64 patches, linearly feathering a `2b`-pixel band across
/// each interior seam (columns first, then rows).
pub fn assemble(patches: &[Patch], b: usize) -> Result<Image> {
    Image::from_tensor_clamped(assemble_tensor(patches, b)?)
}

/// As [`assemble`] but without clamping, for use inside the training loss path.
pub fn assemble_tensor(patches: &[Patch], b: usize) -> Result<Tensor> {
    let (mut t, grid) = place(patches)?;
    check_band(&grid, b)?;
    let (h, w) = (grid.height(), grid.width());
    feather_axis(t.data_mut(), 3, h, w, grid.patch_w, b, true);
    feather_axis(t.data_mut(), 3, w, h, grid.patch_h, b, false);
    Ok(t)
}

/// Maps a gradient on the assembled image back onto the 64 patches
/// (row-major), the transpose of [`assemble_tensor`].
pub fn assemble_adjoint(grad: &Tensor, grid: &PatchGrid, b: usize) -> Result<Vec<Tensor>> {
    check_band(grid, b)?;
    let (h, w) = (grid.height(), grid.width());
    if grad.shape() != [3, h, w] {
        return Err(Error::invalid("gradient does not match the grid"));
    }
    let mut g = grad.clone();
    feather_axis_adjoint(g.data_mut(), 3, w, h, grid.patch_h, b, false);
    feather_axis_adjoint(g.data_mut(), 3, h, w, grid.patch_w, b, true);
    Ok(partition_tensor(&g)?.into_iter().map(|p| p.pixels).collect())
}
