//! Full-image enhancement and cascading across a lens stack.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::imaging::{assemble, partition, resize_image, resize_to_multiple, Image, Patch};
use crate::matching::{match_patches, MatchReport, MatchRecord};
use crate::train::{Checkpoint, SIZE_MULTIPLE};
use crate::visual::visual_cues;

/// Anything that turns a (reference, wide) pair into an enhanced wide image.
pub trait Enhancer {
    fn enhance(&self, narrow: &Image, wide: &Image) -> Result<Image>;
}

/// Trained generator plus the matching backbone and blending settings.
pub struct Model {
    pub generator: Generator,
    pub backbone: Backbone,
    pub tau: f64,
    pub band: usize,
}

pub struct Enhanced {
    pub image: Image,
    pub matches: Vec<MatchRecord>,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            generator: ckpt.generator.clone(),
            backbone: ckpt.config.load_backbone()?,
            tau: ckpt.config.tau,
            band: ckpt.config.weights.band,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Resize → partition both views → match → generate each wide patch
    /// with its matched narrow encoding → feathered assembly.
    pub fn enhance_with_matches(&self, narrow: &Image, wide: &Image) -> Result<Enhanced> {
        let wide = resize_to_multiple(wide, SIZE_MULTIPLE)?;
        let mut narrow = resize_to_multiple(narrow, SIZE_MULTIPLE)?;
        if narrow.dims() != wide.dims() {
            narrow = resize_image(&narrow, wide.height(), wide.width())?;
        }
        let (wp, np) = (partition(&wide)?, partition(&narrow)?);
        let matches = match_patches(&self.backbone, &wp, &np, self.tau)?;
        let out: Vec<Patch> = wp
            .par_iter()
            .zip(&matches)
            .map(|(p, m)| {
                let en = self.generator.encode_visual(&np[m.narrow_pos.index()])?;
                self.generator.generate(p, &en)
            })
            .collect::<Result<_>>()?;
        let records = matches
            .iter()
            .map(|m| MatchRecord {
                pair: *m,
                narrow_cues: visual_cues(&np[m.narrow_pos.index()]).to_array(),
            })
            .collect();
        Ok(Enhanced {
            image: assemble(&out, self.band)?,
            matches: records,
        })
    }

    pub fn match_report<'a>(&'a self, matches: Vec<MatchRecord>) -> MatchReport<'a> {
        MatchReport {
            backbone: self.backbone.tag(),
            threshold: self.tau,
            matches,
        }
    }
}

impl Enhancer for Model {
    fn enhance(&self, narrow: &Image, wide: &Image) -> Result<Image> {
        Ok(self.enhance_with_matches(narrow, wide)?.image)
    }
}

/// Enhances `wide` using `narrow` as the detail reference.
pub fn enhance(narrow: &Image, wide: &Image, ckpt: &Checkpoint) -> Result<Image> {
    Model::from_checkpoint(ckpt)?.enhance(narrow, wide)
}

#[derive(Clone, Debug)]
pub struct Shot {
    pub zoom: f64,
    pub image: Image,
}

/// Co-captured shots ordered from the narrowest (largest zoom) outward.
#[derive(Clone, Debug)]
pub struct LensStack {
    shots: Vec<Shot>,
}

impl LensStack {
    pub fn new(shots: Vec<Shot>) -> Result<Self> {
        if shots.len() < 2 {
            return Err(Error::invalid(format!("a lens stack needs at least 2 shots, got {}", shots.len())));
        }
        if let Some(w) = shots.windows(2).find(|w| !(w[0].zoom > w[1].zoom)) {
            return Err(Error::invalid(format!(
                "zoom factors must strictly decrease, got {} then {}",
                w[0].zoom, w[1].zoom
            )));
        }
        if let Some(s) = shots.iter().find(|s| !(s.zoom > 0.0 && s.zoom.is_finite())) {
            return Err(Error::invalid(format!("zoom factor {} is not positive", s.zoom)));
        }
        Ok(Self { shots })
    }

    pub fn shots(&self) -> &[Shot] {
        &self.shots
    }

    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    /// Reads a JSON list of `{"zoom": .., "path": ..}` entries; relative
    /// paths resolve against the list's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize, Serialize)]
        struct Entry {
            zoom: f64,
            path: std::path::PathBuf,
        }
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        let entries: Vec<Entry> = serde_json::from_str(&text).map_err(|e| Error::load(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let shots = entries
            .into_iter()
            .map(|e| {
                Ok(Shot {
                    zoom: e.zoom,
                    image: Image::open(base.join(&e.path))?,
                })
            })
            .collect::<Result<_>>()?;
        Self::new(shots)
    }
}

/// One cascade stage: zooms of the reference and wide shots, and the
/// output dimensions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stage {
    pub reference_zoom: f64,
    pub wide_zoom: f64,
    pub output_dims: (usize, usize),
}

pub struct CascadeOutput {
    pub image: Image,
    pub stages: Vec<Stage>,
}

/// Carries detail from the narrowest shot outward: each stage's output
/// becomes the next stage's reference, resized to the next wide shot.
pub fn cascade(stack: &LensStack, enhancer: &dyn Enhancer) -> Result<CascadeOutput> {
    let shots = stack.shots();
    let mut reference = shots[0].image.clone();
    let mut stages = Vec::with_capacity(shots.len() - 1);
    for k in 1..shots.len() {
        let wide = &shots[k].image;
        let target = resize_to_multiple(wide, SIZE_MULTIPLE)?.dims();
        if reference.dims() != target {
            reference = resize_image(&reference, target.0, target.1)?;
        }
        let out = enhancer.enhance(&reference, wide)?;
        stages.push(Stage {
            reference_zoom: shots[k - 1].zoom,
            wide_zoom: shots[k].zoom,
            output_dims: out.dims(),
        });
        reference = out;
    }
    Ok(CascadeOutput {
        image: reference,
        stages,
    })
}
