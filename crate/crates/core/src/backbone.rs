//! Frozen convolutional feature extractor tapped at three mid-depth layers.
//!
//! Two topologies share one implementation: the 19-layer classifier layout
//! (loaded from a weight container) and a narrow seeded-random variant of
//! the same layout that needs no downloaded weights.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::imaging::{resize_bicubic, Patch};
use crate::tensor::Tensor;

pub const TAP_NAMES: [&str; 3] = ["conv2_2", "conv3_2", "conv4_2"];

/// Smallest side fed to the backbone by [`Backbone::embed`].
pub const MIN_EMBED_SIDE: usize = 32;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// (block, convs in block) up to and including conv4_2.
const LAYOUT: [(usize, usize); 4] = [(1, 2), (2, 2), (3, 2), (4, 2)];
const VGG19_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const MINI_WIDTHS: [usize; 4] = [8, 16, 32, 32];

#[derive(Clone, Debug)]
enum Layer {
    Conv { name: String, w: Tensor, b: Tensor },
    Relu { tap: Option<usize> },
    Pool,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    layers: Vec<Layer>,
    mean: [f64; 3],
    std: [f64; 3],
    tag: String,
}

fn layer_names() -> impl Iterator<Item = (usize, usize, String)> {
    LAYOUT.iter().flat_map(|&(block, n)| {
        (1..=n).map(move |i| (block, i, format!("conv{block}_{i}")))
    })
}

fn build_layers(mut conv: impl FnMut(&str, usize, usize) -> Result<(Tensor, Tensor)>, widths: [usize; 4]) -> Result<Vec<Layer>> {
    let mut layers = Vec::new();
    let mut in_c = 3;
    for (block, i, name) in layer_names() {
        if block > 1 && i == 1 {
            layers.push(Layer::Pool);
        }
        let out_c = widths[block - 1];
        let (w, b) = conv(&name, in_c, out_c)?;
        let tap = TAP_NAMES.iter().position(|t| *t == name);
        layers.push(Layer::Conv { name, w, b });
        layers.push(Layer::Relu { tap });
        in_c = out_c;
    }
    Ok(layers)
}

impl Backbone {
    /// Seeded random-weight variant (Kaiming-normal fan-in, zero bias).
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = build_layers(
            |_, in_c, out_c| {
                let fan_in = (in_c * 9) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                let w = (0..out_c * in_c * 9).map(|_| normal.sample(&mut rng)).collect();
                Ok((Tensor::from_vec(&[out_c, in_c, 3, 3], w)?, Tensor::zeros(&[out_c])))
            },
            MINI_WIDTHS,
        )
        .expect("static layout is consistent");
        Self {
            layers,
            mean: [0.5; 3],
            std: [1.0; 3],
            tag: format!("random-mini-vgg(seed={seed})"),
        }
    }

    /// Pretrained 19-layer weights from a tensor container holding
    /// `conv{b}_{i}.weight` / `conv{b}_{i}.bias` up to `conv4_2`.
    pub fn vgg19_from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = TensorFile::read(path)?;
        let layers = build_layers(
            |name, in_c, out_c| {
                let w = file.tensor(&format!("{name}.weight"))?;
                let b = file.tensor(&format!("{name}.bias"))?;
                if w.shape() != [out_c, in_c, 3, 3] || b.shape() != [out_c] {
                    return Err(Error::load(path, format!("{name} has unexpected shape {:?}", w.shape())));
                }
                Ok((w, b))
            },
            VGG19_WIDTHS,
        )?;
        Ok(Self {
            layers,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            tag: format!("vgg19({})", path.display()),
        })
    }

    /// Identifies the weights in reports and config hashes.
    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn is_random(&self) -> bool {
        self.tag.starts_with("random")
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { name, .. } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Runs the frozen network on a `[3,H,W]` input var, returning the
    /// first `n_taps` tap activations (post-ReLU). Gradients flow to `x` only.
    pub fn taps(&self, g: &mut Graph, x: Var, n_taps: usize) -> Result<Vec<Var>> {
        let (c, h, w) = g.value(x).dims3()?;
        if c != 3 {
            return Err(Error::invalid("backbone input must have 3 channels"));
        }
        let n = h * w;
        let mut mean = Vec::with_capacity(3 * n);
        let mut inv_std = Vec::with_capacity(3 * n);
        for ch in 0..3 {
            mean.extend(std::iter::repeat_n(self.mean[ch], n));
            inv_std.extend(std::iter::repeat_n(1.0 / self.std[ch], n));
        }
        let mean = g.constant(Tensor::from_vec(&[3, h, w], mean)?);
        let inv_std = g.constant(Tensor::from_vec(&[3, h, w], inv_std)?);
        let centered = g.sub(x, mean)?;
        let mut cur = g.mul(centered, inv_std)?;

        let mut out = Vec::with_capacity(n_taps);
        if n_taps == 0 {
            return Ok(out);
        }
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv { w, b, .. } => {
                    let wv = g.constant(w.clone());
                    let bv = g.constant(b.clone());
                    g.conv2d(cur, wv, bv, 1)?
                }
                Layer::Relu { tap } => {
                    let r = g.relu(cur);
                    if tap.is_some() {
                        out.push(r);
                        if out.len() == n_taps {
                            return Ok(out);
                        }
                    }
                    r
                }
                Layer::Pool => g.max_pool2(cur)?,
            };
        }
        Ok(out)
    }

    /// Forward-only tap activations of a `[3,H,W]` tensor.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let taps = self.taps(&mut g, xv, TAP_NAMES.len())?;
        Ok(taps.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Patch embedding: per-tap global average pooled activations,
    /// concatenated. Patches smaller than [`MIN_EMBED_SIDE`] are upsampled first.
    pub fn embed(&self, p: &Patch) -> Result<Vec<f64>> {
        self.embed_tensor(p.pixels())
    }

    pub fn embed_tensor(&self, t: &Tensor) -> Result<Vec<f64>> {
        let (_, h, w) = t.dims3()?;
        if h == 0 || w == 0 {
            return Err(Error::invalid("cannot embed an empty patch"));
        }
        let input = if h.min(w) < MIN_EMBED_SIDE {
            let s = MIN_EMBED_SIDE as f64 / h.min(w) as f64;
            let (nh, nw) = ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize);
            resize_bicubic(t, nh.max(MIN_EMBED_SIDE), nw.max(MIN_EMBED_SIDE))?
        } else {
            t.clone()
        };
        let mut v = Vec::new();
        for f in self.features(&input)? {
            let (c, fh, fw) = f.dims3()?;
            let n = (fh * fw) as f64;
            v.extend(f.data().chunks(fh * fw).take(c).map(|p| p.iter().sum::<f64>() / n));
        }
        Ok(v)
    }

    /// Serializes weights under the names [`Backbone::vgg19_from_file`] expects.
    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(serde_json::json!({ "backbone": self.tag }));
        for l in &self.layers {
            if let Layer::Conv { name, w, b } = l {
                f.push(format!("{name}.weight"), w.clone());
                f.push(format!("{name}.bias"), b.clone());
            }
        }
        f
    }
}
