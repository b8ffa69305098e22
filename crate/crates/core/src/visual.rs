//! Narrow-patch texture encoding: Gram statistics plus scalar visual cues.

use crate::autograd::gram_matrix;
use crate::error::{Error, Result};
use crate::imaging::{luminance_chw, Patch};
use crate::tensor::Tensor;

pub const CUE_COUNT: usize = 6;

/// Symmetric positive semi-definite `C×C` channel correlation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix(Tensor);

impl GramMatrix {
    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.data()[i * self.channels() + j]
    }
}

/// `G[i][j] = Σ_p F[i][p]·F[j][p] / (C·H·W)` for a `[C,H,W]` feature map.
pub fn gram(features: &Tensor) -> Result<GramMatrix> {
    gram_matrix(features).map(GramMatrix)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct VisualCues {
    pub color_mean: [f64; 3],
    pub brightness: f64,
    pub contrast: f64,
    pub sharpness: f64,
}

impl VisualCues {
    pub fn to_array(&self) -> [f64; CUE_COUNT] {
        let [r, g, b] = self.color_mean;
        [r, g, b, self.brightness, self.contrast, self.sharpness]
    }
}

/// Mean absolute 4-neighbour Laplacian of an `[H,W]` plane, replicate borders.
pub(crate) fn mean_abs_laplacian(y: &[f64], h: usize, w: usize) -> f64 {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        y[r * w + c]
    };
    let mut acc = 0.0;
    for r in 0..h as isize {
        for c in 0..w as isize {
            let lap = at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c);
            acc += lap.abs();
        }
    }
    acc / (h * w) as f64
}

/// Per-channel means, mean/std luminance, and mean |Laplacian| of luminance.
pub fn visual_cues(p: &Patch) -> VisualCues {
    cues_of(p.pixels()).expect("patches are valid RGB rasters")
}

pub(crate) fn cues_of(t: &Tensor) -> Result<VisualCues> {
    let (_, h, w) = t.dims3()?;
    let n = h * w;
    let mut color_mean = [0.0; 3];
    for (c, m) in color_mean.iter_mut().enumerate() {
        *m = t.data()[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64;
    }
    let y = luminance_chw(t)?;
    let brightness = y.mean();
    let var = y.data().iter().map(|v| (v - brightness).powi(2)).sum::<f64>() / n as f64;
    Ok(VisualCues {
        color_mean,
        brightness,
        contrast: var.sqrt(),
        sharpness: mean_abs_laplacian(y.data(), h, w),
    })
}

/// Gram rows followed by one zero-padded cue row: a `(C+1)×C` token set.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedGram {
    pub gram: GramMatrix,
    pub cues: VisualCues,
    token_view: Tensor,
}

impl AugmentedGram {
    pub fn token_view(&self) -> &Tensor {
        &self.token_view
    }
}

pub fn cue_row(cues: &VisualCues, width: usize) -> Result<Tensor> {
    if width < CUE_COUNT {
        return Err(Error::Config(format!(
            "gram width {width} cannot hold {CUE_COUNT} visual cues"
        )));
    }
    let mut row = vec![0.0; width];
    row[..CUE_COUNT].copy_from_slice(&cues.to_array());
    Tensor::from_vec(&[1, width], row)
}

pub fn augment_gram(g: GramMatrix, cues: VisualCues) -> Result<AugmentedGram> {
    let c = g.channels();
    let row = cue_row(&cues, c)?;
    let mut data = g.tensor().data().to_vec();
    data.extend_from_slice(row.data());
    let token_view = Tensor::from_vec(&[c + 1, c], data)?;
    Ok(AugmentedGram {
        gram: g,
        cues,
        token_view,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::GridPos;
    use proptest::prelude::*;

    fn patch_from(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Patch {
        let mut d = Vec::new();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    d.push(f(c, y, x));
                }
            }
        }
        Patch::new(Tensor::from_vec(&[3, h, w], d).unwrap(), GridPos { row: 0, col: 0 }).unwrap()
    }

    #[test]
    fn gram_of_ones_is_one() {
        let g = gram(&Tensor::full(&[1, 5, 7], 1.0)).unwrap();
        assert_eq!(g.tensor().data(), &[1.0]);
    }

    #[test]
    fn disjoint_channels_are_orthogonal() {
        let mut d = vec![0.0; 2 * 16];
        d[..8].fill(1.0); // channel 0: first half
        d[16 + 8..].fill(2.0); // channel 1: second half
        let g = gram(&Tensor::from_vec(&[2, 4, 4], d).unwrap()).unwrap();
        assert_eq!(g.get(0, 1), 0.0);
        assert_eq!(g.get(1, 0), 0.0);
        assert!((g.get(0, 0) - 8.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn gram_rejects_non_finite() {
        let t = Tensor::from_vec(&[1, 1, 2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(gram(&t), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gray_patch_cues() {
        let c = visual_cues(&patch_from(8, 8, |_, _, _| 0.5));
        assert_eq!(c.color_mean, [0.5; 3]);
        assert!((c.brightness - 0.5).abs() < 1e-12);
        assert!(c.contrast.abs() < 1e-12);
        assert_eq!(c.sharpness, 0.0);
    }

    #[test]
    fn red_patch_cues() {
        let c = visual_cues(&patch_from(4, 6, |ch, _, _| if ch == 0 { 1.0 } else { 0.0 }));
        assert_eq!(c.color_mean, [1.0, 0.0, 0.0]);
        assert!((c.brightness - 0.299).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_cues() {
        let p = patch_from(6, 6, |_, y, x| ((x + y) % 2) as f64);
        let c = visual_cues(&p);
        assert!((c.brightness - 0.5).abs() < 1e-12);
        assert!((c.contrast - 0.5).abs() < 1e-12);
        // stencil oracle: interior |±4|, edges 3 or 2 depending on neighbours
        let at = |y: isize, x: isize| ((x.clamp(0, 5) + y.clamp(0, 5)) % 2) as f64;
        let mut s = 0.0;
        for y in 0..6 {
            for x in 0..6 {
                s += (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x)).abs();
            }
        }
        assert!((c.sharpness - s / 36.0).abs() < 1e-12);
    }

    #[test]
    fn augment_layout() {
        let mut eye = vec![0.0; 64];
        for i in 0..8 {
            eye[i * 9] = 1.0;
        }
        let g = GramMatrix(Tensor::from_vec(&[8, 8], eye.clone()).unwrap());
        let cues = VisualCues {
            color_mean: [0.1, 0.2, 0.3],
            brightness: 0.4,
            contrast: 0.5,
            sharpness: 0.6,
        };
        let a = augment_gram(g, cues).unwrap();
        assert_eq!(a.token_view().shape(), &[9, 8]);
        assert_eq!(&a.token_view().data()[..64], &eye[..]);
        assert_eq!(&a.token_view().data()[64..], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.0, 0.0]);

        let zero = VisualCues {
            color_mean: [0.0; 3],
            brightness: 0.0,
            contrast: 0.0,
            sharpness: 0.0,
        };
        let g = GramMatrix(Tensor::zeros(&[6, 6]));
        let a = augment_gram(g, zero).unwrap();
        assert!(a.token_view().data()[36..].iter().all(|&v| v == 0.0));
        let small = GramMatrix(Tensor::zeros(&[5, 5]));
        assert!(matches!(augment_gram(small, zero), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gram_properties(
            data in prop::collection::vec(-2.0f64..2.0, 3 * 12),
            k in -3.0f64..3.0,
            shift in 1usize..12,
        ) {
            let f = Tensor::from_vec(&[3, 3, 4], data.clone()).unwrap();
            let g = gram(&f).unwrap();
            // symmetry
            for i in 0..3 { for j in 0..3 { prop_assert_eq!(g.get(i, j), g.get(j, i)); } }
            // PSD: xᵀGx ≥ 0 on a few probes
            for x in [[1.0, -1.0, 0.5], [0.2, 0.9, -0.4], [1.0, 1.0, 1.0]] {
                let mut q = 0.0;
                for i in 0..3 { for j in 0..3 { q += x[i] * g.get(i, j) * x[j]; } }
                prop_assert!(q >= -1e-12);
            }
            // quadratic homogeneity
            let gk = gram(&f.map(|v| v * k)).unwrap();
            for i in 0..3 { for j in 0..3 {
                prop_assert!((gk.get(i, j) - k * k * g.get(i, j)).abs() < 1e-9);
            } }
            // spatial permutation (cyclic shift of positions, same for all channels)
            let mut perm = vec![0.0; 36];
            for c in 0..3 { for p in 0..12 { perm[c * 12 + (p + shift) % 12] = data[c * 12 + p]; } }
            let gp = gram(&Tensor::from_vec(&[3, 3, 4], perm).unwrap()).unwrap();
            for i in 0..3 { for j in 0..3 { prop_assert!((gp.get(i, j) - g.get(i, j)).abs() < 1e-12); } }
        }

        #[test]
        fn cues_are_bounded(data in prop::collection::vec(0.0f64..=1.0, 3 * 25)) {
            let p = Patch::new(Tensor::from_vec(&[3, 5, 5], data).unwrap(), GridPos { row: 0, col: 0 }).unwrap();
            let c = visual_cues(&p);
            prop_assert!(c.color_mean.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&c.brightness));
            prop_assert!(c.contrast >= 0.0 && c.contrast <= 0.5 + 1e-12);
            prop_assert!(c.sharpness >= 0.0 && c.sharpness <= 4.0);
            let flat = c.contrast < 1e-12;
            prop_assert_eq!(flat, c.sharpness < 1e-12);
        }
    }
}
