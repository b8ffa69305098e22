//! Training objectives and the patch critic.
//!
//! Generator side: latent content loss, Gram-based visual loss and their
//! sum. Image side: seam consistency across patch borders, perceptual
//! distance to the ground truth, and their sum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{gram_matrix, Graph, Var};
use crate::backbone::{Backbone, TAP_NAMES};
use crate::error::{Error, Result};
use crate::imaging::{Image, Patch, PatchGrid};
use crate::optim::{BoundParams, ParamSet};
use crate::tensor::Tensor;

pub const DEFAULT_BLEND: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Per tap layer, in [`TAP_NAMES`] order.
    pub layers: [f64; 3],
    /// Seam band / feather width in output pixels.
    pub band: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            layers: [1.0 / 3.0; 3],
            band: DEFAULT_BLEND,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.layers.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("layer weights must be non-negative".into()));
        }
        if (self.layers.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("layer weights must sum to 1".into()));
        }
        if self.band == 0 {
            return Err(Error::Config("seam band must be at least 1 px".into()));
        }
        Ok(())
    }

    fn taps_needed(&self) -> usize {
        self.layers.iter().rposition(|w| *w > 0.0).map_or(0, |i| i + 1)
    }
}

/// Mean squared difference of two latents.
pub fn content_loss(original: &Tensor, generated: &Tensor) -> Result<f64> {
    original.check_same_shape(generated)?;
    let n = original.len() as f64;
    Ok(original
        .data()
        .iter()
        .zip(generated.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Gram matrices of each tap layer's activations.
pub fn tap_grams(backbone: &Backbone, x: &Tensor) -> Result<Vec<Tensor>> {
    backbone.features(x)?.iter().map(gram_matrix).collect()
}

/// `Σ_l w_l·‖G_l(generated) − G_l(narrow)‖²_F`.
pub fn visual_loss(backbone: &Backbone, generated: &Patch, narrow: &Patch, w: &LossWeights) -> Result<f64> {
    let target = tap_grams(backbone, narrow.pixels())?;
    let mut g = Graph::new();
    let x = g.constant(generated.pixels().clone());
    let l = visual_loss_graph(&mut g, backbone, x, &target, w)?;
    Ok(g.value(l).item())
}

pub fn visual_loss_graph(g: &mut Graph, backbone: &Backbone, x: Var, target: &[Tensor], w: &LossWeights) -> Result<Var> {
    let taps = backbone.taps(g, x, w.taps_needed())?;
    let mut terms = Vec::new();
    for (l, tap) in taps.into_iter().enumerate() {
        if w.layers[l] == 0.0 {
            continue;
        }
        let gm = g.gram(tap)?;
        let t = g.constant(target[l].clone());
        terms.push((g.squared_distance(gm, t, false)?, w.layers[l]));
    }
    zero_if_empty(g, &terms)
}

fn zero_if_empty(g: &mut Graph, terms: &[(Var, f64)]) -> Result<Var> {
    if terms.is_empty() {
        Ok(g.constant(Tensor::scalar(0.0)))
    } else {
        g.weighted_sum(terms)
    }
}

fn check_non_negative(a: f64, b: f64) -> Result<()> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(Error::invalid(format!("loss terms must be non-negative, got {a} and {b}")));
    }
    Ok(())
}

/// Unit-weighted generator total.
pub fn generator_loss(content: f64, visual: f64) -> Result<f64> {
    check_non_negative(content, visual)?;
    Ok(content + visual)
}

/// Unit-weighted image-level total.
pub fn discriminator_loss(seam: f64, perceptual: f64) -> Result<f64> {
    check_non_negative(seam, perceptual)?;
    Ok(seam + perceptual)
}

/// Feature map `φ` applied to seam bands.
pub trait BandEmbedding: Sync {
    fn embed(&self, g: &mut Graph, band: Var) -> Result<Var>;
}

/// `φ_l`: backbone activations at one tap layer.
pub struct TapLayer<'a> {
    pub backbone: &'a Backbone,
    pub layer: usize,
}

impl BandEmbedding for TapLayer<'_> {
    fn embed(&self, g: &mut Graph, band: Var) -> Result<Var> {
        let taps = self.backbone.taps(g, band, self.layer + 1)?;
        Ok(taps[self.layer])
    }
}

/// Raw pixels: a 1×1 receptive field.
pub struct PixelEmbedding;

impl BandEmbedding for PixelEmbedding {
    fn embed(&self, _g: &mut Graph, band: Var) -> Result<Var> {
        Ok(band)
    }
}

/// The pair of `b`-pixel bands on either side of every interior seam:
/// `(y, x, h, w)` of the near-side band and of the far-side band.
pub fn seam_bands(grid: &PatchGrid, b: usize) -> Result<Vec<[(usize, usize, usize, usize); 2]>> {
    if b == 0 || b >= grid.patch_h.min(grid.patch_w) {
        return Err(Error::invalid(format!(
            "seam band {b} must be in [1, patch side {})",
            grid.patch_h.min(grid.patch_w)
        )));
    }
    let (ph, pw) = (grid.patch_h, grid.patch_w);
    let mut out = Vec::new();
    for r in 0..grid.rows {
        for k in 1..grid.cols {
            let s = k * pw;
            out.push([(r * ph, s - b, ph, b), (r * ph, s, ph, b)]);
        }
    }
    for k in 1..grid.rows {
        for c in 0..grid.cols {
            let s = k * ph;
            out.push([(s - b, c * pw, b, pw), (s, c * pw, b, pw)]);
        }
    }
    Ok(out)
}

/// `(1/b)·Σ‖φ(R_j) − φ(R_i)‖²` over all interior seams of `img`.
pub fn seam_loss(img: &Image, grid: &PatchGrid, b: usize, embedding: &dyn BandEmbedding) -> Result<f64> {
    if (grid.height(), grid.width()) != img.dims() {
        return Err(Error::invalid("grid does not tile the image"));
    }
    let mut g = Graph::new();
    let x = g.constant(img.tensor().clone());
    let l = seam_loss_graph(&mut g, x, grid, b, embedding)?;
    Ok(g.value(l).item())
}

pub fn seam_loss_graph(g: &mut Graph, x: Var, grid: &PatchGrid, b: usize, embedding: &dyn BandEmbedding) -> Result<Var> {
    let mut terms = Vec::new();
    for [(y0, x0, h, w), (y1, x1, h1, w1)] in seam_bands(grid, b)? {
        let ri = g.crop(x, y0, x0, h, w)?;
        let rj = g.crop(x, y1, x1, h1, w1)?;
        let fi = embedding.embed(g, ri)?;
        let fj = embedding.embed(g, rj)?;
        terms.push((g.squared_distance(fj, fi, false)?, 1.0 / b as f64));
    }
    zero_if_empty(g, &terms)
}

/// Layer-weighted seam loss over the backbone taps. Each band runs
/// through the backbone once and feeds every weighted layer.
pub fn weighted_seam_graph(g: &mut Graph, x: Var, grid: &PatchGrid, backbone: &Backbone, w: &LossWeights) -> Result<Var> {
    let n_taps = w.taps_needed();
    let mut terms = Vec::new();
    for [(y0, x0, h, wd), (y1, x1, h1, w1)] in seam_bands(grid, w.band)? {
        let ri = g.crop(x, y0, x0, h, wd)?;
        let rj = g.crop(x, y1, x1, h1, w1)?;
        let fi = backbone.taps(g, ri, n_taps)?;
        let fj = backbone.taps(g, rj, n_taps)?;
        for (l, (a, b)) in fi.into_iter().zip(fj).enumerate() {
            if w.layers[l] > 0.0 {
                terms.push((g.squared_distance(b, a, false)?, w.layers[l] / w.band as f64));
            }
        }
    }
    zero_if_empty(g, &terms)
}

/// `Σ_l w_l·mean(φ_l(generated) − φ_l(ground truth))²`.
pub fn perceptual_loss(backbone: &Backbone, generated: &Image, gt: &Image, w: &LossWeights) -> Result<f64> {
    if generated.dims() != gt.dims() {
        return Err(Error::invalid(format!(
            "image sizes differ: {:?} vs {:?}",
            generated.dims(),
            gt.dims()
        )));
    }
    let target = backbone.features(gt.tensor())?;
    let mut g = Graph::new();
    let x = g.constant(generated.tensor().clone());
    let l = perceptual_loss_graph(&mut g, backbone, x, &target, w)?;
    Ok(g.value(l).item())
}

pub fn perceptual_loss_graph(g: &mut Graph, backbone: &Backbone, x: Var, target: &[Tensor], w: &LossWeights) -> Result<Var> {
    let taps = backbone.taps(g, x, w.taps_needed())?;
    let mut terms = Vec::new();
    for (l, tap) in taps.into_iter().enumerate() {
        if w.layers[l] > 0.0 {
            let t = g.constant(target[l].clone());
            terms.push((g.squared_distance(tap, t, true)?, w.layers[l]));
        }
    }
    zero_if_empty(g, &terms)
}

const CRITIC_WIDTHS: [usize; 4] = [16, 32, 32, 64];
pub const CRITIC_MIN_SIDE: usize = 64;

/// Four stride-2 convolutions, global average pooling, linear head.
#[derive(Clone, Debug, Default)]
pub struct Critic {
    params: ParamSet,
}

impl Critic {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut in_c = 3;
        for (i, &out_c) in CRITIC_WIDTHS.iter().enumerate() {
            let bound = (6.0 / (in_c * 9) as f64).sqrt();
            let w = (0..out_c * in_c * 9).map(|_| rng.random_range(-bound..bound)).collect();
            params.insert(format!("c{i}.w"), Tensor::from_vec(&[out_c, in_c, 3, 3], w).expect("shape"));
            params.insert(format!("c{i}.b"), Tensor::zeros(&[out_c]));
            in_c = out_c;
        }
        let bound = (3.0 / in_c as f64).sqrt();
        let w = (0..in_c).map(|_| rng.random_range(-bound..bound)).collect();
        params.insert("head.w", Tensor::from_vec(&[in_c, 1], w).expect("shape"));
        params.insert("head.b", Tensor::zeros(&[1, 1]));
        Self { params }
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let template = Self::init(0);
        for (name, t) in template.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::State(format!("critic parameter `{name}` has the wrong shape")));
            }
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn score_graph(g: &mut Graph, b: &BoundParams, x: Var) -> Result<Var> {
        let (_, h, w) = g.value(x).dims3()?;
        if h < CRITIC_MIN_SIDE || w < CRITIC_MIN_SIDE {
            return Err(Error::invalid(format!(
                "critic needs at least {CRITIC_MIN_SIDE}×{CRITIC_MIN_SIDE}, got {h}×{w}"
            )));
        }
        let mut cur = x;
        for i in 0..CRITIC_WIDTHS.len() {
            let y = g.conv2d(cur, b.var(&format!("c{i}.w"))?, b.var(&format!("c{i}.b"))?, 2)?;
            cur = g.leaky_relu(y, 0.2);
        }
        let pooled = g.global_avg_pool(cur)?;
        let c = g.value(pooled).len();
        let row = g.reshape(pooled, &[1, c])?;
        let s = g.matmul(row, b.var("head.w")?)?;
        let s = g.add(s, b.var("head.b")?)?;
        g.reshape(s, &[1])
    }

    /// Realism score of an image (higher reads as more real).
    pub fn score(&self, img: &Image) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(img.tensor().clone());
        let s = Self::score_graph(&mut g, &b, x)?;
        Ok(g.value(s).item())
    }
}

pub fn critic_score(img: &Image, critic: &Critic) -> Result<f64> {
    critic.score(img)
}

pub fn tap_name(layer: usize) -> &'static str {
    TAP_NAMES[layer]
}
