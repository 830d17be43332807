//! Target-class selection: pick the decoy identity whose feature-space
//! centroid the cloaks will steer toward.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{feature_distance, FeatureExtractor, FeatureVector};
use crate::imaging::Image;

/// How the target class is chosen from the candidate scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// The candidate with the largest min-distance score (hardest to link
    /// back to the user).
    Maximal,
    /// The candidate whose score is closest to the mean score; trades
    /// some feature-space separation for a less conspicuous cluster gap.
    Average,
}

/// Outcome of target selection, serializable for experiment provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetSelection {
    pub chosen_class: String,
    /// Number of candidate classes actually scored (K).
    pub candidate_count: usize,
    pub mode: TargetMode,
    /// Per-candidate score: min over user images of the distance between
    /// the user image embedding and the candidate centroid.
    pub scores: BTreeMap<String, f64>,
}

/// Default cap on how many candidate classes are scored.
pub const DEFAULT_CANDIDATE_CAP: usize = 20;

/// Arithmetic mean of the images' embeddings.
pub fn class_centroid(phi: &FeatureExtractor, images: &[Image]) -> Result<FeatureVector> {
    if images.is_empty() {
        return Err(Error::Dataset("centroid of an empty image list".into()));
    }
    let mut acc = vec![0.0; phi.embed_dim()];
    for img in images {
        let e = phi.embed(img)?;
        for (a, v) in acc.iter_mut().zip(e.values()) {
            *a += v;
        }
    }
    let n = images.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(FeatureVector::new(acc))
}

/// Scores up to [`DEFAULT_CANDIDATE_CAP`] candidate classes (sampled with
/// `rng` when more are offered) and picks the target.
///
/// Maximal mode returns the argmax of `min_x Dist(phi(x), C_k)`; average
/// mode the candidate whose score is closest to the mean score. Ties break
/// toward the lowest class id.
pub fn select_target(
    phi: &FeatureExtractor,
    user_images: &[Image],
    candidates: &BTreeMap<String, Vec<Image>>,
    mode: TargetMode,
    rng: &mut impl Rng,
) -> Result<TargetSelection> {
    if candidates.is_empty() {
        return Err(Error::Dataset("no candidate target classes".into()));
    }
    if user_images.is_empty() {
        return Err(Error::Dataset("no user images to protect".into()));
    }
    for (id, images) in candidates {
        if images.is_empty() {
            return Err(Error::Dataset(format!("candidate class {id} has no images")));
        }
    }

    let mut ids: Vec<&String> = candidates.keys().collect();
    if ids.len() > DEFAULT_CANDIDATE_CAP {
        ids.shuffle(rng);
        ids.truncate(DEFAULT_CANDIDATE_CAP);
        ids.sort();
    }

    let user_embeddings: Vec<FeatureVector> = user_images
        .iter()
        .map(|x| phi.embed(x))
        .collect::<Result<_>>()?;

    let mut scores = BTreeMap::new();
    for id in &ids {
        let centroid = class_centroid(phi, &candidates[*id])?;
        let mut min_dist = f64::INFINITY;
        for e in &user_embeddings {
            min_dist = min_dist.min(feature_distance(e, &centroid)?);
        }
        scores.insert((*id).clone(), min_dist);
    }

    let chosen = match mode {
        // BTreeMap iteration is id-ordered and `>` is strict, so the first
        // maximum wins: lowest id on ties.
        TargetMode::Maximal => scores
            .iter()
            .fold(None::<(&String, f64)>, |best, (id, &s)| match best {
                Some((_, bs)) if s <= bs => best,
                _ => Some((id, s)),
            })
            .map(|(id, _)| id.clone())
            .expect("non-empty scores"),
        TargetMode::Average => {
            let mean = scores.values().sum::<f64>() / scores.len() as f64;
            scores
                .iter()
                .fold(None::<(&String, f64)>, |best, (id, &s)| {
                    let gap = (s - mean).abs();
                    match best {
                        Some((_, bg)) if gap >= bg => best,
                        _ => Some((id, gap)),
                    }
                })
                .map(|(id, _)| id.clone())
                .expect("non-empty scores")
        }
    };

    Ok(TargetSelection {
        chosen_class: chosen,
        candidate_count: scores.len(),
        mode,
        scores,
    })
}
