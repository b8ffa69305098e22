//! Cross-view patch matching: every wide patch is paired with the narrow
//! patch whose backbone embedding is most cosine-similar.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::imaging::{GridPos, Patch, PATCH_COUNT};

pub const DEFAULT_THRESHOLD: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub score: f64,
    /// Set when either vector is all zeros; the score is then 0.
    pub degenerate: bool,
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<Similarity> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "embedding lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(Similarity {
            score: 0.0,
            degenerate: true,
        });
    }
    Ok(Similarity {
        score: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMatch {
    pub wide_pos: GridPos,
    pub narrow_pos: GridPos,
    pub score: f64,
    pub above_threshold: bool,
}

/// Picks, for each wide embedding, the narrow embedding with maximal
/// similarity (lowest index wins ties).
pub fn match_embeddings(wide: &[Vec<f64>], narrow: &[Vec<f64>], threshold: f64) -> Result<Vec<PatchMatch>> {
    if wide.len() != PATCH_COUNT || narrow.len() != PATCH_COUNT {
        return Err(Error::invalid(format!(
            "matching needs {PATCH_COUNT} patches per view, got {} and {}",
            wide.len(),
            narrow.len()
        )));
    }
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [-1,1]")));
    }
    wide.par_iter()
        .enumerate()
        .map(|(wi, we)| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (ni, ne) in narrow.iter().enumerate() {
                let s = similarity(we, ne)?.score;
                if s > best.1 {
                    best = (ni, s);
                }
            }
            Ok(PatchMatch {
                wide_pos: GridPos::from_index(wi),
                narrow_pos: GridPos::from_index(best.0),
                score: best.1,
                above_threshold: best.1 >= threshold,
            })
        })
        .collect()
}

/// Embeds both patch sets and matches them.
pub fn match_patches(backbone: &Backbone, wide: &[Patch], narrow: &[Patch], threshold: f64) -> Result<Vec<PatchMatch>> {
    if wide.len() != PATCH_COUNT || narrow.len() != PATCH_COUNT {
        return Err(Error::invalid(format!(
            "matching needs {PATCH_COUNT} patches per view, got {} and {}",
            wide.len(),
            narrow.len()
        )));
    }
    let embed_all = |ps: &[Patch]| -> Result<Vec<Vec<f64>>> {
        let mut sorted: Vec<&Patch> = ps.iter().collect();
        sorted.sort_by_key(|p| p.pos.index());
        sorted.par_iter().map(|p| backbone.embed(p)).collect()
    };
    match_embeddings(&embed_all(wide)?, &embed_all(narrow)?, threshold)
}

/// JSON debug record of a match pool.
#[derive(Serialize)]
pub struct MatchReport<'a> {
    pub backbone: &'a str,
    pub threshold: f64,
    pub matches: Vec<MatchRecord>,
}

#[derive(Serialize)]
pub struct MatchRecord {
    #[serde(flatten)]
    pub pair: PatchMatch,
    /// Visual cues of the matched narrow patch: r, g, b, brightness, contrast, sharpness.
    pub narrow_cues: [f64; 6],
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_similarities() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((similarity(&v, &v).unwrap().score - 1.0).abs() < 1e-12);
        assert!((similarity(&v, &neg).unwrap().score + 1.0).abs() < 1e-12);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().score, 0.0);
        let z = similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(z.degenerate && z.score == 0.0);
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn argmax_and_threshold() {
        let narrow: Vec<Vec<f64>> = (0..64).map(|i| vec![1.0, i as f64 / 10.0]).collect();
        let wide = narrow.clone();
        let m = match_embeddings(&wide, &narrow, 0.7).unwrap();
        assert_eq!(m.len(), 64);
        for (i, pm) in m.iter().enumerate() {
            assert_eq!(pm.wide_pos.index(), i);
            // collinear vectors tie only with themselves here
            assert!((pm.score - 1.0).abs() < 1e-12);
            assert!(pm.above_threshold);
        }
        let orth: Vec<Vec<f64>> = (0..64).map(|_| vec![0.0, 0.0, 1.0]).collect();
        let wide3: Vec<Vec<f64>> = (0..64).map(|_| vec![1.0, 0.0, 0.0]).collect();
        let m = match_embeddings(&wide3, &orth, 0.7).unwrap();
        assert!(m.iter().all(|p| !p.above_threshold && p.narrow_pos.index() == 0));
        assert!(match_embeddings(&wide3[..3], &orth, 0.7).is_err());
        assert!(match_embeddings(&wide3, &orth, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
            k in 0.01f64..100.0,
        ) {
            let s_ab = similarity(&a, &b).unwrap().score;
            let s_ba = similarity(&b, &a).unwrap().score;
            prop_assert!((s_ab - s_ba).abs() < 1e-12);
            let ka: Vec<f64> = a.iter().map(|x| x * k).collect();
            prop_assert!((similarity(&ka, &b).unwrap().score - s_ab).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&s_ab));
        }
    }
}
