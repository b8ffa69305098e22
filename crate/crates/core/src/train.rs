//! Two-phase training: generator pretraining on the patch objectives, then
//! alternating generator / image-objective steps.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::Backbone;
use crate::checkpoint::{config_hash, TensorFile};
use crate::data::{load_manifest, synthesize_pair, FoVPair, NARROW_ZOOM};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::imaging::{partition, resize_bicubic, resize_image, resize_to_multiple, Image, PatchGrid, PATCH_COUNT};
use crate::losses::{perceptual_loss_graph, tap_grams, visual_loss_graph, weighted_seam_graph, Critic, LossWeights};
use crate::matching::match_patches;
use crate::optim::{sum_gradients, Adam, ParamSet};
use crate::tensor::Tensor;

/// Images are resized to a multiple of this before partitioning.
pub const SIZE_MULTIPLE: i64 = 64;
pub const DECAY_EVERY_EPOCHS: usize = 10;
pub const LOSS_FIELDS: [&str; 6] = ["L_content", "L_visual", "L_G", "L_seam", "L_perceptual", "L_D"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative decay applied every ten epochs.
    pub gamma: f64,
    /// Patch pairs per optimizer step.
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub adv_epochs: usize,
    pub samples_per_epoch: usize,
    pub tau: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub generator: GeneratorConfig,
    pub weights: LossWeights,
    /// Adds a non-saturating real/fake critic term in the adversarial phase.
    pub adv_bce: bool,
    pub zoom: f64,
    /// `down_size = min side / down_factor` when synthesizing wide views.
    pub down_factor: usize,
    /// `random:<seed>` or the path of a VGG-19 tensor container.
    pub backbone: String,
    /// Save `ckpt_{iter}.bin` every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    /// Pairs whose prepared patches are kept in memory.
    pub cache_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            gamma: 0.9,
            batch_size: 16,
            pretrain_epochs: 50,
            adv_epochs: 2000,
            samples_per_epoch: 10,
            tau: 0.7,
            seed: 0,
            deterministic: true,
            generator: GeneratorConfig::default(),
            weights: LossWeights::default(),
            adv_bce: false,
            zoom: NARROW_ZOOM,
            down_factor: 2,
            backbone: "random:0".into(),
            checkpoint_every: 0,
            cache_limit: 64,
        }
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

impl TrainConfig {
    /// Parses flat `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "lr" => c.lr = parse_field(k, v)?,
                "gamma" => c.gamma = parse_field(k, v)?,
                "batch_size" => c.batch_size = parse_field(k, v)?,
                "pretrain_epochs" => c.pretrain_epochs = parse_field(k, v)?,
                "adv_epochs" => c.adv_epochs = parse_field(k, v)?,
                "samples_per_epoch" => c.samples_per_epoch = parse_field(k, v)?,
                "tau" => c.tau = parse_field(k, v)?,
                "seed" => c.seed = parse_field(k, v)?,
                "deterministic" => c.deterministic = parse_field(k, v)?,
                "width" => c.generator.width = parse_field(k, v)?,
                "blocks" => c.generator.blocks = parse_field(k, v)?,
                "upscale" => c.generator.upscale = parse_field(k, v)?,
                "band" => c.weights.band = parse_field(k, v)?,
                "layer_weights" => {
                    let ws: Vec<f64> = v.split(',').map(|s| parse_field(k, s.trim())).collect::<Result<_>>()?;
                    c.weights.layers = ws
                        .try_into()
                        .map_err(|_| Error::Config("`layer_weights` needs three values".into()))?;
                }
                "adv_bce" => c.adv_bce = parse_field(k, v)?,
                "zoom" => c.zoom = parse_field(k, v)?,
                "down_factor" => c.down_factor = parse_field(k, v)?,
                "backbone" => c.backbone = v.to_owned(),
                "checkpoint_every" => c.checkpoint_every = parse_field(k, v)?,
                "cache_limit" => c.cache_limit = parse_field(k, v)?,
                _ => return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::load(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("pretrain_epochs", self.pretrain_epochs),
            ("adv_epochs", self.adv_epochs),
            ("samples_per_epoch", self.samples_per_epoch),
            ("down_factor", self.down_factor),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be at least 1")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [-1, 1], got {}", self.tau)));
        }
        if !(self.zoom > 1.0) {
            return Err(Error::Config(format!("zoom must exceed 1, got {}", self.zoom)));
        }
        self.generator.validate()?;
        self.weights.validate()
    }

    /// The fields that define a run, one `key=value` per line. Output
    /// paths, caching and checkpoint cadence are left out.
    pub fn canonical(&self) -> String {
        let [w0, w1, w2] = self.weights.layers;
        format!(
            "lr={}\ngamma={}\nbatch_size={}\npretrain_epochs={}\nadv_epochs={}\nsamples_per_epoch={}\ntau={}\nseed={}\n{}\nband={}\nlayer_weights={w0},{w1},{w2}\nadv_bce={}\nzoom={}\ndown_factor={}\nbackbone={}\n",
            self.lr,
            self.gamma,
            self.batch_size,
            self.pretrain_epochs,
            self.adv_epochs,
            self.samples_per_epoch,
            self.tau,
            self.seed,
            self.generator.canonical(),
            self.weights.band,
            self.adv_bce,
            self.zoom,
            self.down_factor,
            self.backbone,
        )
    }

    pub fn hash(&self) -> String {
        config_hash(&self.canonical())
    }

    /// `lr₀·γ^⌊epoch/10⌋`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.gamma.powi((epoch / DECAY_EVERY_EPOCHS) as i32)
    }

    pub fn pretrain_iterations(&self) -> u64 {
        (self.pretrain_epochs * self.samples_per_epoch) as u64
    }

    pub fn adversarial_iterations(&self) -> u64 {
        (self.adv_epochs * self.samples_per_epoch) as u64
    }

    pub fn total_iterations(&self) -> u64 {
        self.pretrain_iterations() + self.adversarial_iterations()
    }

    pub fn epoch_of(&self, iteration: u64) -> usize {
        iteration as usize / self.samples_per_epoch
    }

    /// Optimizer steps per image for a full 64-patch grid.
    pub fn steps_per_image(&self) -> usize {
        PATCH_COUNT.div_ceil(self.batch_size)
    }

    pub fn load_backbone(&self) -> Result<Backbone> {
        match self.backbone.strip_prefix("random:") {
            Some(seed) => Ok(Backbone::random(parse_field("backbone", seed)?)),
            None if self.backbone == "random" => Ok(Backbone::random(0)),
            None => Backbone::vgg19_from_file(&self.backbone),
        }
    }
}

/// The six logged loss components of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    #[serde(rename = "L_content")]
    pub content: f64,
    #[serde(rename = "L_visual")]
    pub visual: f64,
    #[serde(rename = "L_G")]
    pub generator: f64,
    #[serde(rename = "L_seam")]
    pub seam: f64,
    #[serde(rename = "L_perceptual")]
    pub perceptual: f64,
    #[serde(rename = "L_D")]
    pub discriminator: f64,
}

impl LossRecord {
    pub fn values(&self) -> [f64; 6] {
        [self.content, self.visual, self.generator, self.seam, self.perceptual, self.discriminator]
    }

    pub fn csv_header() -> String {
        format!("iteration,{}", LOSS_FIELDS.join(","))
    }

    pub fn csv_row(&self, iteration: u64) -> String {
        let v: Vec<String> = self.values().iter().map(|x| x.to_string()).collect();
        format!("{iteration},{}", v.join(","))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Adversarial,
}

/// Everything needed to resume or deploy a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub generator: Generator,
    pub critic: Critic,
    gen_opt: Adam,
    critic_opt: Adam,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn fresh(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::init(config.generator, config.seed)?;
        let critic = Critic::init(config.seed.wrapping_add(1));
        Ok(Self {
            gen_opt: Adam::new(generator.params()),
            critic_opt: Adam::new(critic.params()),
            config: config.clone(),
            generator,
            critic,
            iteration: 0,
        })
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// Refuses to continue under a different configuration.
    pub fn ensure_config(&self, config: &TrainConfig) -> Result<()> {
        let (expected, found) = (config.hash(), self.config_hash());
        if expected != found {
            return Err(Error::HashMismatch { expected, found });
        }
        Ok(())
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::new(serde_json::json!({
            "kind": "checkpoint",
            "iteration": self.iteration,
            "config": self.config,
        }));
        f.config_hash = self.config_hash();
        self.generator.params().export("gen.", &mut f);
        self.critic.params().export("critic.", &mut f);
        self.gen_opt.export("opt_g.", &mut f);
        self.critic_opt.export("opt_c.", &mut f);
        f
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor_file().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = TensorFile::read(path)?;
        let bad = |why: String| Error::load(path, why);
        let config: TrainConfig = serde_json::from_value(f.meta["config"].clone())
            .map_err(|e| bad(format!("checkpoint config: {e}")))?;
        let iteration = f.meta["iteration"]
            .as_u64()
            .ok_or_else(|| bad("checkpoint has no iteration counter".into()))?;
        if config.hash() != f.config_hash {
            return Err(Error::HashMismatch {
                expected: config.hash(),
                found: f.config_hash.clone(),
            });
        }
        let template = Checkpoint::fresh(&config)?;
        let gen_params = ParamSet::import(template.generator.params(), "gen.", &f)?;
        let critic_params = ParamSet::import(template.critic.params(), "critic.", &f)?;
        Ok(Self {
            gen_opt: Adam::import(&gen_params, "opt_g.", &f)?,
            critic_opt: Adam::import(&critic_params, "opt_c.", &f)?,
            generator: Generator::from_params(config.generator, gen_params)?,
            critic: Critic::from_params(critic_params)?,
            config,
            iteration,
        })
    }
}

/// Per-pair tensors that stay fixed during training: patches, matches,
/// narrow Gram targets, upscaled ground truth and its features.
pub(crate) struct Prepared {
    id: String,
    out_grid: PatchGrid,
    wide: Vec<Tensor>,
    narrow: Vec<Tensor>,
    visual_on: Vec<bool>,
    narrow_grams: Vec<Vec<Tensor>>,
    originals: Vec<Vec<Tensor>>,
    gt_up: Tensor,
    gt_features: Vec<Tensor>,
}

fn prepare(pair: &FoVPair, cfg: &TrainConfig, backbone: &Backbone, encoder: &ParamSet) -> Result<Prepared> {
    let wide = resize_to_multiple(&pair.wide, SIZE_MULTIPLE)?;
    let narrow = resize_to_multiple(&pair.narrow, SIZE_MULTIPLE)?;
    let gt = resize_to_multiple(&pair.gt, SIZE_MULTIPLE)?;
    let (wp, np, gp) = (partition(&wide)?, partition(&narrow)?, partition(&gt)?);
    let matches = match_patches(backbone, &wp, &np, cfg.tau)?;
    let r = cfg.generator.upscale;
    let (h, w) = wide.dims();
    let gt_up = resize_image(&gt, r * h, r * w)?;
    let narrow_t: Vec<Tensor> = matches.iter().map(|m| np[m.narrow_pos.index()].pixels().clone()).collect();
    let narrow_grams = narrow_t
        .par_iter()
        .map(|t| {
            let (_, ph, pw) = t.dims3()?;
            tap_grams(backbone, &resize_bicubic(t, r * ph, r * pw)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let originals = gp
        .par_iter()
        .map(|p| encode_latents(encoder, &resize_bicubic(p.pixels(), r * p.height(), r * p.width())?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        id: pair.source_id.clone(),
        out_grid: PatchGrid::for_dims(r * h, r * w)?,
        wide: wp.iter().map(|p| p.pixels().clone()).collect(),
        narrow: narrow_t,
        visual_on: matches.iter().map(|m| m.above_threshold).collect(),
        narrow_grams,
        originals,
        gt_features: backbone.features(gt_up.tensor())?,
        gt_up: gt_up.into_tensor(),
    })
}

struct PatchOut {
    grads: ParamSet,
    content: f64,
    visual: f64,
    output: Tensor,
}

/// The wide encoder as initialized from the run's seed. It stays fixed
/// for the whole run so content distances are comparable across iterations.
pub fn content_encoder(cfg: &TrainConfig) -> Result<ParamSet> {
    let init = Generator::init(cfg.generator, cfg.seed)?;
    let mut p = ParamSet::new();
    for (k, t) in init.params().iter().filter(|(k, _)| k.starts_with("wenc.")) {
        p.insert(k, t.clone());
    }
    Ok(p)
}

/// Latents of every encoder stage, finest first.
pub fn encode_latents(encoder: &ParamSet, x: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let b = encoder.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let stages = Generator::encoder_stages(&mut g, &b, "wenc", xv)?;
    Ok(stages.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Mean squared latent distance, averaged over the encoder stages.
pub fn content_graph(g: &mut Graph, encoder: &crate::optim::BoundParams, generated: Var, original: &[Tensor]) -> Result<Var> {
    let fg = Generator::encoder_stages(g, encoder, "wenc", generated)?;
    let mut terms = Vec::new();
    for (a, o) in fg.into_iter().zip(original) {
        let b = g.constant(o.clone());
        terms.push((g.squared_distance(a, b, true)?, 1.0 / original.len() as f64));
    }
    g.weighted_sum(&terms)
}

struct Models<'a> {
    gen: &'a Generator,
    backbone: &'a Backbone,
    encoder: &'a ParamSet,
    weights: &'a LossWeights,
}

fn generator_pass(m: &Models, prep: &Prepared, i: usize, scale: f64) -> Result<PatchOut> {
    let (gen, backbone, w) = (m.gen, m.backbone, m.weights);
    let mut g = Graph::new();
    let b = gen.params().bind(&mut g, true);
    let enc = m.encoder.bind(&mut g, false);
    let out = gen.forward_pair(&mut g, &b, &prep.wide[i], &prep.narrow[i])?;
    let content = content_graph(&mut g, &enc, out, &prep.originals[i])?;
    let visual = if prep.visual_on[i] {
        visual_loss_graph(&mut g, backbone, out, &prep.narrow_grams[i], w)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let total = g.weighted_sum(&[(content, scale), (visual, scale)])?;
    let grads = g.backward(total)?;
    Ok(PatchOut {
        grads: b.gradients(&grads, gen.params()),
        content: g.value(content).item(),
        visual: g.value(visual).item(),
        output: g.value(out).clone(),
    })
}

/// Parameter gradient of `Σ output ⊙ upstream` for one patch.
fn vjp_pass(gen: &Generator, prep: &Prepared, i: usize, upstream: &Tensor) -> Result<ParamSet> {
    let mut g = Graph::new();
    let b = gen.params().bind(&mut g, true);
    let out = gen.forward_pair(&mut g, &b, &prep.wide[i], &prep.narrow[i])?;
    let u = g.constant(upstream.clone());
    let prod = g.mul(out, u)?;
    let s = g.sum(prod);
    Ok(b.gradients(&g.backward(s)?, gen.params()))
}

fn raw_output(gen: &Generator, prep: &Prepared, i: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = gen.params().bind(&mut g, false);
    let out = gen.forward_pair(&mut g, &b, &prep.wide[i], &prep.narrow[i])?;
    Ok(g.value(out).clone())
}

fn assemble_raw(outputs: &[Tensor], band: usize) -> Result<Tensor> {
    let patches = outputs
        .iter()
        .enumerate()
        .map(|(i, t)| crate::imaging::Patch::new(t.clone(), crate::imaging::GridPos::from_index(i)))
        .collect::<Result<Vec<_>>>()?;
    crate::imaging::assemble_tensor(&patches, band)
}

struct ImageObjective {
    seam: f64,
    perceptual: f64,
    grad: Option<Tensor>,
}

fn reduce(parts: Vec<ParamSet>, deterministic: bool) -> Option<ParamSet> {
    if deterministic {
        return sum_gradients(&parts);
    }
    parts.into_par_iter().reduce_with(|mut a, b| {
        for ((_, x), (_, y)) in a.iter_mut().zip(b.iter()) {
            x.add_assign(y);
        }
        a
    })
}

/// Owns a run: model state, frozen backbone, curriculum-ordered data and
/// optional on-disk outputs.
pub struct Trainer {
    state: Checkpoint,
    backbone: Backbone,
    encoder: ParamSet,
    dataset: Vec<FoVPair>,
    cache: Vec<Option<Arc<Prepared>>>,
    out_dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, dataset: Vec<FoVPair>) -> Result<Self> {
        Self::resume(Checkpoint::fresh(cfg)?, dataset)
    }

    pub fn resume(state: Checkpoint, dataset: Vec<FoVPair>) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Precondition("training needs a non-empty dataset".into()));
        }
        let dataset = crate::data::curriculum_order(dataset)?;
        Ok(Self {
            backbone: state.config.load_backbone()?,
            encoder: content_encoder(&state.config)?,
            cache: (0..dataset.len()).map(|_| None).collect(),
            state,
            dataset,
            out_dir: None,
            log: None,
        })
    }

    /// Appends to `dir/losses.csv` and writes checkpoints into `dir`.
    pub fn with_output(mut self, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let path = dir.join("losses.csv");
        let fresh = !path.exists() || self.state.iteration == 0;
        let mut f = if fresh {
            File::create(&path)?
        } else {
            OpenOptions::new().append(true).open(&path)?
        };
        if fresh {
            writeln!(f, "{}", LossRecord::csv_header())?;
        }
        self.log = Some(BufWriter::new(f));
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Dataset in curriculum order.
    pub fn dataset(&self) -> &[FoVPair] {
        &self.dataset
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn phase(&self) -> Phase {
        if self.state.iteration < self.config().pretrain_iterations() {
            Phase::Pretrain
        } else {
            Phase::Adversarial
        }
    }

    /// Dataset indices visited during `epoch`: the next `samples_per_epoch`
    /// positions of the curriculum (wrapping), in curriculum order.
    pub fn epoch_indices(&self, epoch: usize) -> Vec<usize> {
        let s = self.config().samples_per_epoch;
        let n = self.dataset.len();
        let mut idx: Vec<usize> = (0..s).map(|k| (epoch * s + k) % n).collect();
        idx.sort_unstable();
        idx
    }

    pub fn index_at(&self, iteration: u64) -> usize {
        let cfg = self.config();
        self.epoch_indices(cfg.epoch_of(iteration))[iteration as usize % cfg.samples_per_epoch]
    }

    fn prepared(&mut self, idx: usize) -> Result<Arc<Prepared>> {
        if let Some(p) = &self.cache[idx] {
            return Ok(p.clone());
        }
        let pair = &self.dataset[idx];
        let p = Arc::new(prepare(pair, &self.state.config, &self.backbone, &self.encoder).map_err(|e| with_pair(&pair.source_id, e))?);
        if idx < self.state.config.cache_limit {
            self.cache[idx] = Some(p.clone());
        }
        Ok(p)
    }

    /// One scheduled iteration: picks the curriculum pair, runs the full
    /// pipeline and updates the model. Appends to the loss log if open.
    pub fn step(&mut self) -> Result<LossRecord> {
        let idx = self.index_at(self.state.iteration);
        let prep = self.prepared(idx)?;
        let rec = self.run_iteration(&prep)?;
        if let Some(log) = &mut self.log {
            writeln!(log, "{}", rec.csv_row(self.state.iteration - 1))?;
            log.flush()?;
        }
        let every = self.state.config.checkpoint_every as u64;
        if every > 0 && self.state.iteration % every == 0 {
            self.save_checkpoint()?;
        }
        Ok(rec)
    }

    /// Runs the pipeline on an arbitrary pair at the current iteration.
    pub fn training_step(&mut self, pair: &FoVPair) -> Result<LossRecord> {
        let prep = prepare(pair, &self.state.config, &self.backbone, &self.encoder).map_err(|e| with_pair(&pair.source_id, e))?;
        self.run_iteration(&prep)
    }

    pub fn run_until(&mut self, iteration: u64) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        while self.state.iteration < iteration {
            out.push(self.step()?);
        }
        Ok(out)
    }

    /// Writes `ckpt_{iter}.bin` into the output directory.
    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.out_dir else { return Ok(None) };
        let p = dir.join(format!("ckpt_{}.bin", self.state.iteration));
        self.state.save(&p)?;
        Ok(Some(p))
    }

    fn run_iteration(&mut self, prep: &Prepared) -> Result<LossRecord> {
        let phase = self.phase();
        let it = self.state.iteration;
        let lr = self.config().lr_at_epoch(self.config().epoch_of(it));
        let rec = self
            .iteration_body(prep, phase, lr)
            .map_err(|e| match e {
                Error::NonFinite { .. } => e,
                e => with_pair(&prep.id, e),
            })?;
        debug_assert!(self.state.generator.params().is_finite());
        self.state.iteration += 1;
        Ok(rec)
    }

    fn non_finite(&self, prep: &Prepared, detail: String) -> Error {
        Error::NonFinite {
            iteration: self.state.iteration as usize,
            pair_id: prep.id.clone(),
            detail,
        }
    }

    fn iteration_body(&mut self, prep: &Prepared, phase: Phase, lr: f64) -> Result<LossRecord> {
        let cfg = self.state.config.clone();
        let bs = cfg.batch_size;
        let mut outputs = vec![Tensor::scalar(0.0); PATCH_COUNT];
        let (mut content, mut visual) = (0.0, 0.0);
        for start in (0..PATCH_COUNT).step_by(bs) {
            let ids: Vec<usize> = (start..(start + bs).min(PATCH_COUNT)).collect();
            let scale = 1.0 / ids.len() as f64;
            let models = Models {
                gen: &self.state.generator,
                backbone: &self.backbone,
                encoder: &self.encoder,
                weights: &cfg.weights,
            };
            let parts = ids
                .par_iter()
                .map(|&i| generator_pass(&models, prep, i, scale))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Vec::with_capacity(parts.len());
            for (&i, p) in ids.iter().zip(parts) {
                if !(p.content.is_finite() && p.visual.is_finite()) {
                    return Err(self.non_finite(
                        prep,
                        format!("patch {i}: content {} visual {}", p.content, p.visual),
                    ));
                }
                content += p.content;
                visual += p.visual;
                outputs[i] = p.output;
                grads.push(p.grads);
            }
            let g = reduce(grads, cfg.deterministic).expect("non-empty batch");
            if !g.is_finite() {
                return Err(self.non_finite(prep, format!("patches {start}..{}: non-finite gradient", start + ids.len())));
            }
            self.state.gen_opt.update(self.state.generator.params_mut(), &g, lr);
        }
        content /= PATCH_COUNT as f64;
        visual /= PATCH_COUNT as f64;

        let image = match phase {
            Phase::Pretrain => self.image_objective(prep, &assemble_raw(&outputs, cfg.weights.band)?, false)?,
            Phase::Adversarial => self.adversarial_step(prep, lr)?,
        };
        let rec = LossRecord {
            content,
            visual,
            generator: content + visual,
            seam: image.seam,
            perceptual: image.perceptual,
            discriminator: image.seam + image.perceptual,
        };
        if !rec.values().iter().all(|v| v.is_finite()) {
            return Err(self.non_finite(prep, format!("{rec:?}")));
        }
        Ok(rec)
    }

    /// Seam + perceptual objective on an assembled output, optionally with
    /// its gradient (plus the critic term when enabled) w.r.t. the image.
    fn image_objective(&self, prep: &Prepared, assembled: &Tensor, with_grad: bool) -> Result<ImageObjective> {
        let cfg = &self.state.config;
        let mut g = Graph::new();
        let x = g.param(assembled.clone());
        let seam = weighted_seam_graph(&mut g, x, &prep.out_grid, &self.backbone, &cfg.weights)?;
        let perc = perceptual_loss_graph(&mut g, &self.backbone, x, &prep.gt_features, &cfg.weights)?;
        let (sv, pv) = (g.value(seam).item(), g.value(perc).item());
        let grad = if with_grad {
            let mut terms = vec![(seam, 1.0), (perc, 1.0)];
            if cfg.adv_bce {
                let cb = self.state.critic.params().bind(&mut g, false);
                let s = Critic::score_graph(&mut g, &cb, x)?;
                let neg = g.scale(s, -1.0);
                terms.push((g.softplus(neg), 1.0));
            }
            let total = g.weighted_sum(&terms)?;
            let grads = g.backward(total)?;
            Some(grads.get_or_zeros(x, assembled))
        } else {
            None
        };
        Ok(ImageObjective {
            seam: sv,
            perceptual: pv,
            grad,
        })
    }

    fn adversarial_step(&mut self, prep: &Prepared, lr: f64) -> Result<ImageObjective> {
        let cfg = self.state.config.clone();
        let gen = &self.state.generator;
        let outputs = (0..PATCH_COUNT)
            .into_par_iter()
            .map(|i| raw_output(gen, prep, i))
            .collect::<Result<Vec<_>>>()?;
        let assembled = assemble_raw(&outputs, cfg.weights.band)?;
        let obj = self.image_objective(prep, &assembled, true)?;
        let upstream = crate::imaging::assemble_adjoint(obj.grad.as_ref().expect("requested"), &prep.out_grid, cfg.weights.band)?;
        let gen = &self.state.generator;
        let parts = (0..PATCH_COUNT)
            .into_par_iter()
            .map(|i| vjp_pass(gen, prep, i, &upstream[i]))
            .collect::<Result<Vec<_>>>()?;
        let g = reduce(parts, cfg.deterministic).expect("64 patches");
        if !g.is_finite() {
            return Err(self.non_finite(prep, "image objective gradient is non-finite".into()));
        }
        self.state.gen_opt.update(self.state.generator.params_mut(), &g, lr);
        if cfg.adv_bce {
            self.critic_step(prep, &assembled, lr)?;
        }
        Ok(obj)
    }

    /// Non-saturating real/fake update of the critic.
    fn critic_step(&mut self, prep: &Prepared, fake: &Tensor, lr: f64) -> Result<()> {
        let mut g = Graph::new();
        let b = self.state.critic.params().bind(&mut g, true);
        let real = g.constant(prep.gt_up.clone());
        let fake = g.constant(fake.clone());
        let sr = Critic::score_graph(&mut g, &b, real)?;
        let sf = Critic::score_graph(&mut g, &b, fake)?;
        let nr = g.scale(sr, -1.0);
        let lr_term = g.softplus(nr);
        let lf_term = g.softplus(sf);
        let loss = g.add(lr_term, lf_term)?;
        let grads = b.gradients(&g.backward(loss)?, self.state.critic.params());
        self.state.critic_opt.update(self.state.critic.params_mut(), &grads, lr);
        Ok(())
    }
}

fn with_pair(id: &str, e: Error) -> Error {
    match e {
        Error::Pair { .. } => e,
        e => Error::Pair {
            pair_id: id.to_owned(),
            source: Box::new(e),
        },
    }
}

/// Generator-only phase over `pretrain_epochs × samples_per_epoch` iterations.
pub fn pretrain(cfg: &TrainConfig, dataset: Vec<FoVPair>) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg, dataset)?;
    t.run_until(cfg.pretrain_iterations())?;
    Ok(t.into_checkpoint())
}

/// Continues a pretrained checkpoint through the adversarial phase.
pub fn train_adversarial(cfg: &TrainConfig, dataset: Vec<FoVPair>, ckpt: Checkpoint) -> Result<Checkpoint> {
    ckpt.ensure_config(cfg)?;
    if ckpt.iteration < cfg.pretrain_iterations() {
        return Err(Error::Precondition(format!(
            "checkpoint at iteration {} has not finished pretraining ({} iterations)",
            ckpt.iteration,
            cfg.pretrain_iterations()
        )));
    }
    let mut t = Trainer::resume(ckpt, dataset)?;
    t.run_until(cfg.total_iterations())?;
    Ok(t.into_checkpoint())
}

/// Synthesizes training pairs for the `train` split (or untagged rows)
/// of a manifest.
pub fn dataset_from_manifest(path: impl AsRef<Path>, cfg: &TrainConfig) -> Result<Vec<FoVPair>> {
    let mut out = Vec::new();
    for (i, rec) in load_manifest(path)?.into_iter().enumerate() {
        if rec.split.as_deref().is_some_and(|s| s != "train") {
            continue;
        }
        let gt = Image::open(&rec.path)?;
        let gt = resize_to_multiple(&gt, SIZE_MULTIPLE)?;
        let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        out.push(synthesize_pair(&rec.source_id, &gt, cfg.zoom, cfg.down_factor, seed)?.0);
    }
    if out.is_empty() {
        return Err(Error::Precondition("manifest has no training rows".into()));
    }
    Ok(out)
}
