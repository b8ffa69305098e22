//! Training-pair synthesis, curriculum ordering and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{luminance, resize_bicubic, Image};
use crate::tensor::Tensor;

pub const NARROW_ZOOM: f64 = 5.0 / 3.0;
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.2, 3.0);
pub const NOISE_SIGMA_MAX: f64 = 25.0 / 255.0;

#[derive(Clone, Debug)]
pub struct FoVPair {
    pub narrow: Image,
    pub wide: Image,
    pub gt: Image,
    pub source_id: String,
    pub variance: f64,
}

impl FoVPair {
    pub fn new(source_id: impl Into<String>, narrow: Image, wide: Image, gt: Image) -> Result<Self> {
        if narrow.dims() != gt.dims() || wide.dims() != gt.dims() {
            return Err(Error::invalid("narrow, wide and ground truth must share dimensions"));
        }
        Ok(Self {
            variance: luminance_variance(&gt),
            narrow,
            wide,
            gt,
            source_id: source_id.into(),
        })
    }
}

/// Population variance of the luminance plane.
pub fn luminance_variance(img: &Image) -> f64 {
    let y = luminance(img);
    let m = y.mean();
    y.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub down_size: usize,
}

impl DegradationSpec {
    /// Uniform draw of blur and noise strengths from their allowed ranges.
    pub fn sample(rng: &mut impl Rng, down_size: usize) -> Self {
        Self {
            blur_sigma: rng.random_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1),
            noise_sigma: rng.random_range(0.0..=NOISE_SIGMA_MAX),
            down_size,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (lo, hi) = BLUR_SIGMA_RANGE;
        if !(lo..=hi).contains(&self.blur_sigma) {
            return Err(Error::invalid(format!("blur sigma {} outside [{lo}, {hi}]", self.blur_sigma)));
        }
        if !(0.0..=NOISE_SIGMA_MAX).contains(&self.noise_sigma) {
            return Err(Error::invalid(format!("noise sigma {} outside [0, 25/255]", self.noise_sigma)));
        }
        if self.down_size == 0 || self.down_size > height.min(width) {
            return Err(Error::invalid(format!(
                "down size {} must be in [1, {}]",
                self.down_size,
                height.min(width)
            )));
        }
        Ok(())
    }
}

fn even_floor(v: usize) -> usize {
    v - v % 2
}

/// Side of the central crop for `side` at `zoom`, floored to even.
pub fn crop_side(side: usize, zoom: f64) -> usize {
    even_floor((side as f64 / zoom).floor() as usize)
}

/// Central crop at `1/zoom` of each side, pasted unchanged onto a black
/// canvas of the original size.
pub fn simulate_narrow(gt: &Image, zoom: f64) -> Result<Image> {
    if !(zoom > 1.0) {
        return Err(Error::invalid(format!("zoom must exceed 1, got {zoom}")));
    }
    let (h, w) = gt.dims();
    let (ch, cw) = (crop_side(h, zoom), crop_side(w, zoom));
    let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
    let src = gt.tensor().data();
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in y0..y0 + ch {
            let row = (c * h + y) * w;
            out[row + x0..row + x0 + cw].copy_from_slice(&src[row + x0..row + x0 + cw]);
        }
    }
    Image::from_tensor(Tensor::from_vec(&[3, h, w], out)?)
}

/// Normalized 1-d Gaussian taps with radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicate borders.
pub fn gaussian_blur(t: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = t.data();
    let mut tmp = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            for x in 0..w {
                tmp[(ch * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * row[(x as isize + i as isize - r).clamp(0, w as isize - 1) as usize])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| {
                        let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                        kv * tmp[(ch * h + yy) * w + x]
                    })
                    .sum();
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

/// Blur → seeded Gaussian noise → bicubic down to `down_size²` → bicubic
/// back to the original size → clamp.
pub fn simulate_wide(gt: &Image, spec: &DegradationSpec, seed: u64) -> Result<Image> {
    let (h, w) = gt.dims();
    spec.validate(h, w)?;
    let mut t = gaussian_blur(gt.tensor(), spec.blur_sigma)?;
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        t.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    let down = resize_bicubic(&t, spec.down_size, spec.down_size)?;
    Image::from_tensor_clamped(resize_bicubic(&down, h, w)?)
}

/// Builds a pair from one high-quality image. The degradation is drawn
/// from `seed`, so the pair is fully determined by `(gt, seed)`.
pub fn synthesize_pair(source_id: &str, gt: &Image, zoom: f64, down_factor: usize, seed: u64) -> Result<(FoVPair, DegradationSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = gt.dims();
    let spec = DegradationSpec::sample(&mut rng, (h.min(w) / down_factor.max(1)).max(1));
    let wide = simulate_wide(gt, &spec, rng.random())?;
    let narrow = simulate_narrow(gt, zoom)?;
    Ok((FoVPair::new(source_id, narrow, wide, gt.clone())?, spec))
}

/// Stable ascending sort by ground-truth luminance variance.
pub fn curriculum_order(mut pairs: Vec<FoVPair>) -> Result<Vec<FoVPair>> {
    if pairs.is_empty() {
        return Err(Error::invalid("curriculum needs at least one pair"));
    }
    pairs.sort_by(|a, b| a.variance.total_cmp(&b.variance));
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub source_id: String,
    pub path: PathBuf,
    pub split: Option<String>,
}

/// Reads a `source_id<TAB>path[<TAB>split]` manifest. Relative paths are
/// resolved against the manifest's directory; every image header is
/// probed so unreadable entries fail early. Blank lines and `#` comments
/// are skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SourceRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let row = lineno + 1;
        let mut fields = line.split('\t');
        let (Some(id), Some(p)) = (fields.next(), fields.next()) else {
            return Err(Error::load(path, format!("row {row}: expected source_id<TAB>path[<TAB>split]")));
        };
        let split = fields.next().map(str::to_owned).filter(|s| !s.is_empty());
        let img_path = base.join(p);
        image::ImageReader::open(&img_path)
            .and_then(|r| r.with_guessed_format())
            .map_err(|e| Error::load(path, format!("row {row} ({id}): {}: {e}", img_path.display())))?
            .into_dimensions()
            .map_err(|e| Error::load(path, format!("row {row} ({id}): {}: {e}", img_path.display())))?;
        out.push(SourceRecord {
            source_id: id.to_owned(),
            path: img_path,
            split,
        });
    }
    Ok(out)
}

/// Sidecar written next to a cached pair.
#[derive(Debug, Serialize, Deserialize)]
pub struct PairSidecar {
    pub source_id: String,
    pub seed: u64,
    pub zoom: f64,
    pub degradation: DegradationSpec,
    pub variance: f64,
}

/// Writes `{id}_narrow.png`, `{id}_wide.png`, `{id}_gt.png` and `{id}.json`.
pub fn write_pair(dir: impl AsRef<Path>, pair: &FoVPair, spec: &DegradationSpec, zoom: f64, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let id = &pair.source_id;
    let mut written = Vec::new();
    for (suffix, img) in [("narrow", &pair.narrow), ("wide", &pair.wide), ("gt", &pair.gt)] {
        let p = dir.join(format!("{id}_{suffix}.png"));
        img.save_png(&p)?;
        written.push(p);
    }
    let side = PairSidecar {
        source_id: id.clone(),
        seed,
        zoom,
        degradation: *spec,
        variance: pair.variance,
    };
    let p = dir.join(format!("{id}.json"));
    fs::write(&p, serde_json::to_string_pretty(&side)?)?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::psnr;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn textured(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase: f64 = rng.random();
        Image::from_fn(h, w, |y, x, c| {
            0.5 + 0.4 * ((x as f64 * 0.3 + phase * 6.0 + c as f64).sin() * (y as f64 * 0.17).cos())
        })
        .unwrap()
    }

    #[test]
    fn narrow_crop_at_1024() {
        assert_eq!(crop_side(1024, NARROW_ZOOM), 614);
        let gt = Image::constant(1024, 1024, [1.0, 0.5, 0.25]).unwrap();
        let n = simulate_narrow(&gt, NARROW_ZOOM).unwrap();
        let y0 = (1024 - 614) / 2;
        assert_eq!(y0, 205);
        assert_eq!(n.get(y0, y0, 0), 1.0);
        assert_eq!(n.get(y0 + 613, y0 + 613, 2), 0.25);
        assert_eq!(n.get(y0 - 1, 512, 0), 0.0);
        assert_eq!(n.get(512, y0 + 614, 1), 0.0);
    }

    #[test]
    fn narrow_preserves_crop_and_blanks_border() {
        let gt = textured(64, 48, 1);
        let n = simulate_narrow(&gt, 2.5).unwrap();
        let (ch, cw) = (crop_side(64, 2.5), crop_side(48, 2.5));
        assert_eq!((ch, cw), (24, 18));
        let (y0, x0) = ((64 - ch) / 2, (48 - cw) / 2);
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..48 {
                    let inside = (y0..y0 + ch).contains(&y) && (x0..x0 + cw).contains(&x);
                    let expect = if inside { gt.get(y, x, c) } else { 0.0 };
                    assert_eq!(n.get(y, x, c), expect);
                }
            }
        }
    }

    #[test]
    fn narrow_zoom_limits() {
        let gt = textured(33, 33, 2);
        let n = simulate_narrow(&gt, 1.000001).unwrap();
        assert_eq!(crop_side(33, 1.000001), 32);
        assert_eq!(n.get(0, 0, 0), gt.get(0, 0, 0));
        assert!(simulate_narrow(&gt, 1.0).is_err());
        assert!(simulate_narrow(&gt, 0.5).is_err());
    }

    #[test]
    fn wide_dimensions_and_determinism() {
        let gt = textured(64, 64, 3);
        let spec = DegradationSpec { blur_sigma: 1.2, noise_sigma: 0.05, down_size: 32 };
        let a = simulate_wide(&gt, &spec, 7).unwrap();
        let b = simulate_wide(&gt, &spec, 7).unwrap();
        assert_eq!(a.dims(), (64, 64));
        assert_eq!(a, b);
        assert_ne!(a, simulate_wide(&gt, &spec, 8).unwrap());
        let bad = DegradationSpec { blur_sigma: 0.1, ..spec };
        assert!(simulate_wide(&gt, &bad, 7).is_err());
        let bad = DegradationSpec { noise_sigma: 0.2, ..spec };
        assert!(simulate_wide(&gt, &bad, 7).is_err());
        let bad = DegradationSpec { down_size: 65, ..spec };
        assert!(simulate_wide(&gt, &bad, 7).is_err());
    }

    #[test]
    fn wide_down_512_on_1024() {
        let gt = Image::constant(1024, 1024, [0.3, 0.6, 0.9]).unwrap();
        let spec = DegradationSpec { blur_sigma: 0.5, noise_sigma: 0.0, down_size: 512 };
        let w = simulate_wide(&gt, &spec, 0).unwrap();
        assert_eq!(w.dims(), (1024, 1024));
    }

    #[test]
    fn near_identity_chain() {
        let gt = textured(48, 48, 4);
        let spec = DegradationSpec { blur_sigma: 0.2, noise_sigma: 0.0, down_size: 48 };
        let w = simulate_wide(&gt, &spec, 1).unwrap();
        assert!(psnr(&w, &gt).unwrap() >= 50.0);
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((k[2] - k[4]).abs() < 1e-15);
    }

    fn pair_with_variance(id: &str, v: f64) -> FoVPair {
        let img = Image::constant(8, 8, [0.5; 3]).unwrap();
        FoVPair {
            narrow: img.clone(),
            wide: img.clone(),
            gt: img,
            source_id: id.into(),
            variance: v,
        }
    }

    #[test]
    fn curriculum_sorts_stably() {
        let pairs = vec![pair_with_variance("a", 0.3), pair_with_variance("b", 0.1), pair_with_variance("c", 0.2)];
        let ids: Vec<_> = curriculum_order(pairs).unwrap().into_iter().map(|p| p.source_id).collect();
        assert_eq!(ids, ["b", "c", "a"]);
        let same: Vec<_> = ["x", "y", "z"].iter().map(|i| pair_with_variance(i, 0.5)).collect();
        let ids: Vec<_> = curriculum_order(same).unwrap().into_iter().map(|p| p.source_id).collect();
        assert_eq!(ids, ["x", "y", "z"]);
        assert!(curriculum_order(vec![]).is_err());
    }

    #[test]
    fn pair_variance_is_luminance_variance() {
        let gt = Image::from_fn(8, 8, |_, x, _| if x < 4 { 0.0 } else { 1.0 }).unwrap();
        let p = FoVPair::new("v", gt.clone(), gt.clone(), gt).unwrap();
        assert!((p.variance - 0.25).abs() < 1e-12);
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::constant(8, 8, [0.1; 3]).unwrap();
        img.save_png(dir.path().join("a.png")).unwrap();
        img.save_png(dir.path().join("b.png")).unwrap();
        let m = dir.path().join("m.tsv");
        fs::write(&m, "# header\na\ta.png\ttrain\nb\tb.png\tval\nc\ta.png\n").unwrap();
        let recs = load_manifest(&m).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].split.as_deref(), Some("val"));
        assert_eq!(recs[2].split, None);
        assert_eq!(recs[0].path, dir.path().join("a.png"));

        fs::write(&m, "a\ta.png\ttrain\nmissing\tnope.png\ttrain\n").unwrap();
        let err = load_manifest(&m).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("nope.png"), "{err}");
        fs::write(&m, "only-one-field\n").unwrap();
        assert!(load_manifest(&m).is_err());
        assert!(load_manifest(dir.path().join("none.tsv")).is_err());
    }

    #[test]
    fn cached_pair_files() {
        let dir = tempfile::tempdir().unwrap();
        let (pair, spec) = synthesize_pair("img7", &textured(32, 32, 5), NARROW_ZOOM, 2, 7).unwrap();
        let files = write_pair(dir.path(), &pair, &spec, NARROW_ZOOM, 7).unwrap();
        assert_eq!(files.len(), 4);
        assert!(files.iter().all(|f| f.exists()));
        let side: PairSidecar = serde_json::from_str(&fs::read_to_string(&files[3]).unwrap()).unwrap();
        assert_eq!(side.seed, 7);
        assert_eq!(side.degradation, spec);
        assert_eq!(spec.down_size, 16);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn curriculum_is_sorted_permutation(vs in prop::collection::vec(0.0f64..1.0, 1..20)) {
            let pairs: Vec<_> = vs.iter().enumerate().map(|(i, v)| pair_with_variance(&i.to_string(), *v)).collect();
            let out = curriculum_order(pairs).unwrap();
            let mut ids: Vec<usize> = out.iter().map(|p| p.source_id.parse().unwrap()).collect();
            prop_assert!(out.windows(2).all(|w| w[0].variance <= w[1].variance));
            let mut reference: Vec<(f64, usize)> = vs.iter().copied().zip(0..).collect();
            reference.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let expected: Vec<usize> = reference.iter().map(|r| r.1).collect();
            prop_assert_eq!(&ids, &expected);
            ids.sort();
            prop_assert_eq!(ids, (0..vs.len()).collect::<Vec<_>>());
        }

        #[test]
        fn wide_stays_in_range(seed in 0u64..50, sigma in 0.2f64..3.0, noise in 0.0f64..0.098) {
            let gt = textured(24, 24, seed);
            let spec = DegradationSpec { blur_sigma: sigma, noise_sigma: noise, down_size: 12 };
            let w = simulate_wide(&gt, &spec, seed).unwrap();
            prop_assert_eq!(w.dims(), gt.dims());
        }
    }
}
