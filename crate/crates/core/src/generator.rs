//! The patch generator: a structural encoder for wide patches, a visual
//! encoder producing augmented Gram tokens for narrow patches, a stack of
//! cross-attention residual blocks, and a sub-pixel upsampler.
//!
//! ```text
//! wide ─ encoder(÷4) ─┬─ block × n ─ conv ─ shuffle(×4r) ─ conv ─(+ bicubic×r wide)─ out
//! narrow ─ encoder ─ gram ─ ⊕ cue row ─┘ (keys / values)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::config_hash;
use crate::error::{Error, Result};
use crate::imaging::{resize_bicubic, Patch};
use crate::optim::{BoundParams, ParamSet};
use crate::tensor::{self, Tensor};
use crate::visual::{augment_gram, cue_row, cues_of, gram, AugmentedGram, CUE_COUNT};

pub const ENCODER_STRIDE: usize = 4;
/// Channels after the sub-pixel shuffle, before the output convolution.
pub const UP_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Model width `d`; also the projected key width `d_n`.
    pub width: usize,
    pub blocks: usize,
    /// Output scale `r`.
    pub upscale: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 4,
            upscale: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < CUE_COUNT {
            return Err(Error::Config(format!(
                "width {} is below the {CUE_COUNT} visual cues",
                self.width
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config("at least one residual block is required".into()));
        }
        if !matches!(self.upscale, 1 | 2) {
            return Err(Error::Config(format!("upscale must be 1 or 2, got {}", self.upscale)));
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        format!("gen:width={};blocks={};upscale={}", self.width, self.blocks, self.upscale)
    }

    pub fn hash(&self) -> String {
        config_hash(&self.canonical())
    }

    /// Total sub-pixel factor: undoes the encoder stride and applies `r`.
    pub fn shuffle_factor(&self) -> usize {
        ENCODER_STRIDE * self.upscale
    }
}

/// Spatial feature map flattened to `T = H'·W'` tokens of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tokens: Tensor,
    pub spatial: (usize, usize),
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d_n)·K`, where the key
/// matrix doubles as the value matrix and `d_n` is its width.
pub fn cross_attention(query: &Tensor, key_value: &Tensor) -> Result<Tensor> {
    let (_, dq) = query.dims2()?;
    let (s, dn) = key_value.dims2()?;
    if dq != dn {
        return Err(Error::invalid(format!(
            "query width {dq} differs from key width {dn}"
        )));
    }
    if s == 0 {
        return Err(Error::invalid("attention needs at least one key"));
    }
    let scores = query.matmul(&key_value.transpose2()?)?.map(|v| v / (dn as f64).sqrt());
    tensor::softmax_rows(&scores)?.matmul(key_value)
}

/// `E = E_w + attention`.
pub fn residual_fuse(wide: &Tensor, attended: &Tensor) -> Result<Tensor> {
    wide.zip_map(attended, |a, b| a + b)
}

pub use crate::tensor::pixel_shuffle;

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
}

struct Shapes {
    names: Vec<(String, Vec<usize>, Init)>,
}

#[derive(Clone, Copy)]
enum Init {
    Kaiming,
    Linear,
    Zero,
}

fn shapes(c: &GeneratorConfig) -> Shapes {
    let d = c.width;
    let mut names = Vec::new();
    let mut conv = |name: String, out: usize, inp: usize, init: Init| {
        names.push((format!("{name}.w"), vec![out, inp, 3, 3], init));
        names.push((format!("{name}.b"), vec![out], Init::Zero));
    };
    for enc in ["wenc", "nenc"] {
        conv(format!("{enc}.s1"), d, 3, Init::Kaiming);
        for s in ["s2", "s3"] {
            conv(format!("{enc}.{s}"), d, d, Init::Kaiming);
            conv(format!("{enc}.{s}.res1"), d, d, Init::Kaiming);
            conv(format!("{enc}.{s}.res2"), d, d, Init::Kaiming);
        }
    }
    for i in 0..c.blocks {
        conv(format!("block{i}.conv1"), d, d, Init::Kaiming);
        conv(format!("block{i}.conv2"), d, d, Init::Zero);
    }
    let s = c.shuffle_factor();
    conv("up".into(), UP_CHANNELS * s * s, d, Init::Kaiming);
    conv("out".into(), 3, UP_CHANNELS, Init::Zero);
    for i in 0..c.blocks {
        for p in ["wq", "wk", "wv"] {
            names.push((format!("block{i}.{p}"), vec![d, d], Init::Linear));
        }
    }
    Shapes { names }
}

impl Generator {
    /// Fresh parameters: Kaiming-uniform (fan-in) convolutions, zeroed
    /// final convolution of every residual branch and of the output layer.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in shapes(&config).names {
            let n: usize = shape.iter().product();
            let fan_in: usize = shape[1..].iter().product();
            let bound = match init {
                Init::Kaiming => (6.0 / fan_in as f64).sqrt(),
                Init::Linear => (3.0 / fan_in as f64).sqrt(),
                Init::Zero => 0.0,
            };
            let data = (0..n)
                .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
                .collect();
            params.insert(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters, checking every expected tensor is present.
    pub fn from_params(config: GeneratorConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in shapes(&config).names {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::State(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn conv(g: &mut Graph, b: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = b.var(&format!("{name}.w"))?;
        let bias = b.var(&format!("{name}.b"))?;
        g.conv2d(x, w, bias, stride)
    }

    fn residual_unit(g: &mut Graph, b: &BoundParams, name: &str, x: Var) -> Result<Var> {
        let h = Self::conv(g, b, &format!("{name}.res1"), x, 1)?;
        let h = g.relu(h);
        let h = Self::conv(g, b, &format!("{name}.res2"), h, 1)?;
        g.add(x, h)
    }

    /// Three convolutional stages (stride 1, 2, 2), the last two with a
    /// residual unit. `[3,H,W] → [d, H/4, W/4]`.
    pub fn encoder(g: &mut Graph, b: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
        Ok(*Self::encoder_stages(g, b, prefix, x)?.last().expect("three stages"))
    }

    /// Output of every encoder stage, finest first.
    pub fn encoder_stages(g: &mut Graph, b: &BoundParams, prefix: &str, x: Var) -> Result<Vec<Var>> {
        let (_, h, w) = g.value(x).dims3()?;
        if h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(Error::invalid(format!(
                "patch {h}×{w} is not divisible by the encoder stride {ENCODER_STRIDE}"
            )));
        }
        let x = Self::conv(g, b, &format!("{prefix}.s1"), x, 1)?;
        let mut x = g.relu(x);
        let mut stages = vec![x];
        for s in ["s2", "s3"] {
            let name = format!("{prefix}.{s}");
            let y = Self::conv(g, b, &name, x, 2)?;
            let y = g.relu(y);
            x = Self::residual_unit(g, b, &name, y)?;
            stages.push(x);
        }
        Ok(stages)
    }

    /// Augmented Gram tokens `[d+1, d]` of a narrow patch, built in-graph.
    pub fn narrow_tokens(g: &mut Graph, b: &BoundParams, narrow: &Tensor) -> Result<Var> {
        let x = g.constant(narrow.clone());
        let f = Self::encoder(g, b, "nenc", x)?;
        let width = g.value(f).shape()[0];
        let gm = g.gram(f)?;
        let cues = g.constant(cue_row(&cues_of(narrow)?, width)?);
        g.concat_rows(gm, cues)
    }

    /// Cross-attention residual block on `[T,d]` tokens laid out `h×w`.
    fn block(g: &mut Graph, b: &BoundParams, i: usize, tokens: Var, en: Var, h: usize, w: usize) -> Result<Var> {
        let p = |s: &str| b.var(&format!("block{i}.{s}"));
        let q = g.matmul(tokens, p("wq")?)?;
        let k = g.matmul(en, p("wk")?)?;
        let v = g.matmul(en, p("wv")?)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let dn = g.value(k).shape()[1] as f64;
        let scores = g.scale(scores, 1.0 / dn.sqrt());
        let attn = g.softmax_rows(scores)?;
        let attended = g.matmul(attn, v)?;
        let fused = g.add(tokens, attended)?;

        let x = g.tokens_to_chw(fused, h, w)?;
        let y = Self::conv(g, b, &format!("block{i}.conv1"), x, 1)?;
        let y = g.relu(y);
        let y = Self::conv(g, b, &format!("block{i}.conv2"), y, 1)?;
        let x = g.add(x, y)?;
        g.chw_to_tokens(x)
    }

    /// Raw (unclamped) generator output `[3, rH, rW]` for a wide patch and
    /// narrow tokens already in the graph.
    pub fn forward(&self, g: &mut Graph, b: &BoundParams, wide: &Tensor, en: Var) -> Result<Var> {
        let (_, h, w) = wide.dims3()?;
        let x = g.constant(wide.clone());
        let feat = Self::encoder(g, b, "wenc", x)?;
        let (_, fh, fw) = g.value(feat).dims3()?;
        let mut tokens = g.chw_to_tokens(feat)?;
        for i in 0..self.config.blocks {
            tokens = Self::block(g, b, i, tokens, en, fh, fw)?;
        }
        let x = g.tokens_to_chw(tokens, fh, fw)?;
        let up = Self::conv(g, b, "up", x, 1)?;
        let up = g.pixel_shuffle(up, self.config.shuffle_factor())?;
        let up = g.leaky_relu(up, 0.2);
        let residual = Self::conv(g, b, "out", up, 1)?;
        let r = self.config.upscale;
        let base = g.constant(resize_bicubic(wide, r * h, r * w)?);
        g.add(base, residual)
    }

    /// Full trainable pass from raw wide and narrow pixels.
    pub fn forward_pair(&self, g: &mut Graph, b: &BoundParams, wide: &Tensor, narrow: &Tensor) -> Result<Var> {
        let en = Self::narrow_tokens(g, b, narrow)?;
        self.forward(g, b, wide, en)
    }

    pub fn encode_structure(&self, p: &Patch) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(p.pixels().clone());
        let f = Self::encoder(&mut g, &b, "wenc", x)?;
        let (_, h, w) = g.value(f).dims3()?;
        Ok(FeatureMap {
            tokens: tensor::chw_to_tokens(g.value(f))?,
            spatial: (h, w),
        })
    }

    /// `E_n` of a narrow patch.
    pub fn encode_visual(&self, p: &Patch) -> Result<AugmentedGram> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(p.pixels().clone());
        let f = Self::encoder(&mut g, &b, "nenc", x)?;
        augment_gram(gram(g.value(f))?, cues_of(p.pixels())?)
    }

    /// Enhanced patch at `r×` the input size, clamped to `[0, 1]`.
    pub fn generate(&self, wide: &Patch, en: &AugmentedGram) -> Result<Patch> {
        let raw = self.generate_raw(wide.pixels(), en.token_view())?;
        Patch::new(raw.map(crate::imaging::clamp01), wide.pos)
    }

    pub(crate) fn generate_raw(&self, wide: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (s, d) = tokens.dims2()?;
        if d != self.config.width || s != d + 1 {
            return Err(Error::invalid(format!(
                "E_n tokens are {s}×{d}, expected {}×{}",
                self.config.width + 1,
                self.config.width
            )));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let en = g.constant(tokens.clone());
        let out = self.forward(&mut g, &b, wide, en)?;
        Ok(g.value(out).clone())
    }
}
