//! Full-image quality metrics, metric reports and loss-curve utilities.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::imaging::{luminance, Image};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
pub const PROXY_BACKEND: &str = "lpips-proxy";
pub const SMOOTHING_WINDOW: usize = 25;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("image sizes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (x, y) = (a.tensor().data(), b.tensor().data());
    Ok(x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64)
}

/// Peak signal-to-noise ratio with peak 1, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode filtering of an `[H,W]` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = k.iter().enumerate().map(|(i, kv)| kv * rows[(yo + i) * ow + xo]).sum();
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM on luminance with an 11×11 Gaussian window (σ 1.5),
/// averaged over every position where the window fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = a.dims();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs both sides ≥ {SSIM_WINDOW}, got {h}×{w}")));
    }
    ssim_planes(luminance(a).data(), luminance(b).data(), h, w)
}

pub(crate) fn ssim_planes(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    let k = ssim_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<_>>();
    let (mx, _, _) = filter_valid(x, h, w, &k);
    let (my, _, _) = filter_valid(y, h, w, &k);
    let (sxx, _, _) = filter_valid(&prod(x, x), h, w, &k);
    let (syy, _, _) = filter_valid(&prod(y, y), h, w, &k);
    let (sxy, _, _) = filter_valid(&prod(x, y), h, w, &k);
    let mut acc = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(acc / mx.len() as f64)
}

/// Scales every spatial position's channel vector to unit length.
fn unit_channels(f: &Tensor) -> Result<Tensor> {
    let (c, h, w) = f.dims3()?;
    let n = h * w;
    let mut out = f.data().to_vec();
    for p in 0..n {
        let norm = (0..c).map(|ch| out[ch * n + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
        for ch in 0..c {
            out[ch * n + p] /= norm;
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Layer-averaged mean squared distance between channel-normalized tap
/// activations. Returns the distance and the backend tag.
pub fn perceptual_distance(a: &Image, b: &Image, backbone: Option<&Backbone>) -> Result<(f64, &'static str)> {
    check_dims(a, b)?;
    let backbone = backbone.ok_or_else(|| Error::Config("perceptual distance needs a backbone".into()))?;
    let fa = backbone.features(a.tensor())?;
    let fb = backbone.features(b.tensor())?;
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (x, y) = (unit_channels(x)?, unit_channels(y)?);
        let (_, h, w) = x.dims3()?;
        let d: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum();
        total += d / (h * w) as f64;
    }
    Ok((total / fa.len() as f64, PROXY_BACKEND))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual_distance: f64,
    pub backend: String,
}

impl MetricRow {
    pub fn compute(id: impl Into<String>, pred: &Image, gt: &Image, backbone: Option<&Backbone>) -> Result<Self> {
        let (perceptual_distance, backend) = perceptual_distance(pred, gt, backbone)?;
        Ok(Self {
            id: id.into(),
            psnr_db: psnr(pred, gt)?,
            ssim: ssim(pred, gt)?,
            perceptual_distance,
            backend: backend.into(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub psnr_db: f64,
    pub ssim: f64,
    pub perceptual_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricMeans,
    /// Color space SSIM is computed in.
    pub ssim_space: String,
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = MetricMeans {
            psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            perceptual_distance: rows.iter().map(|r| r.perceptual_distance).sum::<f64>() / n,
        };
        Self {
            rows,
            mean,
            ssim_space: "luminance".into(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr_db,ssim,perceptual_distance,backend\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.id, r.psnr_db, r.ssim, r.perceptual_distance, r.backend);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let idw = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(2).max(4);
        let mut s = format!("{:<idw$}  {:>9}  {:>7}  {:>10}  backend\n", "id", "psnr_db", "ssim", "perceptual");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<idw$}  {:>9.4}  {:>7.4}  {:>10.5}  {}",
                r.id, r.psnr_db, r.ssim, r.perceptual_distance, r.backend
            );
        }
        let _ = writeln!(
            s,
            "{:<idw$}  {:>9.4}  {:>7.4}  {:>10.5}",
            "mean", self.mean.psnr_db, self.mean.ssim, self.mean.perceptual_distance
        );
        s
    }
}

/// Trailing moving average in valid mode: `len − window + 1` outputs.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() + 1 - window);
    let mut acc: f64 = xs[..window].iter().sum();
    out.push(acc / window as f64);
    for i in window..xs.len() {
        acc += xs[i] - xs[i - window];
        out.push(acc / window as f64);
    }
    out
}

/// A parsed loss log: the header's column names and one row per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLog {
    pub columns: Vec<String>,
    pub iterations: Vec<u64>,
    pub values: Vec<Vec<f64>>,
}

impl LossLog {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        Self::parse(&text).map_err(|e| Error::load(path, e))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or("empty loss log")?;
        let mut cols = header.split(',').map(str::trim);
        if cols.next() != Some("iteration") {
            return Err("first column must be `iteration`".into());
        }
        let columns: Vec<String> = cols.map(str::to_owned).collect();
        let mut log = LossLog {
            values: vec![Vec::new(); columns.len()],
            columns,
            iterations: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != log.columns.len() + 1 {
                return Err(format!("row {} has {} fields", i + 2, fields.len()));
            }
            log.iterations
                .push(fields[0].parse().map_err(|e| format!("row {}: {e}", i + 2))?);
            for (c, f) in fields[1..].iter().enumerate() {
                log.values[c].push(f.parse().map_err(|e| format!("row {}: {e}", i + 2))?);
            }
        }
        Ok(log)
    }

    /// CSV of the smoothed series, aligned to the last iteration of each window.
    pub fn smoothed_csv(&self, window: usize) -> String {
        let mut s = format!("iteration,{}\n", self.columns.join(","));
        let smooth: Vec<Vec<f64>> = self.values.iter().map(|v| moving_average(v, window)).collect();
        let n = smooth.first().map_or(0, Vec::len);
        for i in 0..n {
            let it = self.iterations[i + window - 1];
            let row: Vec<String> = smooth.iter().map(|c| c[i].to_string()).collect();
            let _ = writeln!(s, "{it},{}", row.join(","));
        }
        s
    }

    /// One panel per loss column arranged two wide: raw series in a light
    /// tone, moving average on top in a dark tone.
    pub fn render(&self, window: usize, panel: (u32, u32)) -> image::RgbImage {
        let (pw, ph) = panel;
        let cols = 2u32;
        let rows = (self.columns.len() as u32).div_ceil(cols).max(1);
        let mut img = image::RgbImage::from_pixel(pw * cols, ph * rows, image::Rgb([255, 255, 255]));
        for (k, series) in self.values.iter().enumerate() {
            let (ox, oy) = ((k as u32 % cols) * pw, (k as u32 / cols) * ph);
            draw_frame(&mut img, ox, oy, pw, ph);
            let finite: Vec<f64> = series.iter().copied().filter(|v| v.is_finite()).collect();
            if finite.is_empty() {
                continue;
            }
            let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let n = series.len().max(2);
            let to_px = |i: usize, v: f64| {
                let x = ox + 4 + ((pw - 9) as f64 * i as f64 / (n - 1) as f64) as u32;
                let y = oy + 4 + ((ph - 9) as f64 * (1.0 - (v - lo) / span)) as u32;
                (x, y)
            };
            plot_series(&mut img, series.iter().copied().enumerate(), &to_px, [170, 190, 230]);
            let smooth = moving_average(series, window);
            plot_series(
                &mut img,
                smooth.into_iter().enumerate().map(|(i, v)| (i + window - 1, v)),
                &to_px,
                [20, 40, 140],
            );
        }
        img
    }
}

fn draw_frame(img: &mut image::RgbImage, ox: u32, oy: u32, w: u32, h: u32) {
    let c = image::Rgb([160, 160, 160]);
    for x in ox + 2..ox + w - 2 {
        img.put_pixel(x, oy + 2, c);
        img.put_pixel(x, oy + h - 3, c);
    }
    for y in oy + 2..oy + h - 2 {
        img.put_pixel(ox + 2, y, c);
        img.put_pixel(ox + w - 3, y, c);
    }
}

fn plot_series(
    img: &mut image::RgbImage,
    pts: impl Iterator<Item = (usize, f64)>,
    to_px: &dyn Fn(usize, f64) -> (u32, u32),
    color: [u8; 3],
) {
    let mut prev: Option<(u32, u32)> = None;
    for (i, v) in pts {
        if !v.is_finite() {
            prev = None;
            continue;
        }
        let p = to_px(i, v);
        if let Some(q) = prev {
            draw_line(img, q, p, image::Rgb(color));
        }
        prev = Some(p);
    }
}

fn draw_line(img: &mut image::RgbImage, a: (u32, u32), b: (u32, u32), c: image::Rgb<u8>) {
    let (x0, y0, x1, y1) = (a.0 as i64, a.1 as i64, b.0 as i64, b.1 as i64);
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}
