//! Sybil decoy images: candidate images from a separate identity,
//! perturbed so their feature representations mimic the user's uncloaked
//! originals. Injected under their own label, they force extra decision
//! boundaries through the user's true feature-space region and blunt
//! leaked-image attacks.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloak::{compute_cloak, CloakParams, CloakResult};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::imaging::Image;

/// What to build a Sybil set from.
#[derive(Debug, Clone)]
pub struct SybilSpec {
    /// Candidate pool the decoy account's content is drawn from.
    pub candidates: Vec<Image>,
    /// The user's uncloaked originals whose feature positions the Sybil
    /// images should occupy.
    pub anchors: Vec<Image>,
    /// Sybil images generated per anchor.
    pub per_anchor: usize,
    pub params: CloakParams,
}

/// Manifest row describing one generated Sybil image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SybilRecord {
    pub sybil_index: usize,
    pub anchor_index: usize,
    pub candidate_index: usize,
    pub final_dssim: f64,
    pub initial_anchor_distance: f64,
    pub final_anchor_distance: f64,
}

/// One Sybil image plus its provenance.
#[derive(Debug, Clone)]
pub struct SybilImage {
    pub result: CloakResult,
    pub anchor_index: usize,
    pub candidate_index: usize,
}

/// Cloaks a candidate toward an anchor: the anchor plays the role of the
/// target image and the candidate is the image being perturbed.
pub fn make_sybil(
    phis: &[FeatureExtractor],
    candidate: &Image,
    anchor: &Image,
    params: &CloakParams,
) -> Result<CloakResult> {
    compute_cloak(phis, candidate, anchor, params)
}

/// Builds the full Sybil set: `per_anchor` candidates per anchor, drawn
/// without replacement until the pool runs dry (then with replacement),
/// each cloaked toward its anchor. Deterministic under the rng seed.
pub fn build_sybil_set(
    phis: &[FeatureExtractor],
    spec: &SybilSpec,
    rng: &mut impl Rng,
) -> Result<Vec<SybilImage>> {
    if spec.candidates.is_empty() {
        return Err(Error::Dataset("sybil candidate pool is empty".into()));
    }
    if spec.anchors.is_empty() {
        return Err(Error::Dataset("sybil anchor set is empty".into()));
    }
    if spec.per_anchor == 0 {
        return Err(Error::Param("per_anchor must be >= 1".into()));
    }

    // Candidate draw order: a reshuffled pass over the pool each time it
    // is exhausted.
    let mut order: Vec<usize> = Vec::new();
    let mut draw = |rng: &mut dyn rand::RngCore| -> usize {
        if order.is_empty() {
            order = (0..spec.candidates.len()).collect();
            order.shuffle(rng);
        }
        order.pop().expect("refilled above")
    };

    let mut jobs = Vec::with_capacity(spec.anchors.len() * spec.per_anchor);
    for anchor_index in 0..spec.anchors.len() {
        for _ in 0..spec.per_anchor {
            jobs.push((anchor_index, draw(rng)));
        }
    }

    jobs.par_iter()
        .map(|&(anchor_index, candidate_index)| {
            let result = make_sybil(
                phis,
                &spec.candidates[candidate_index],
                &spec.anchors[anchor_index],
                &spec.params,
            )?;
            Ok(SybilImage {
                result,
                anchor_index,
                candidate_index,
            })
        })
        .collect()
}

/// Manifest rows for a generated set.
pub fn sybil_manifest(set: &[SybilImage]) -> Vec<SybilRecord> {
    set.iter()
        .enumerate()
        .map(|(i, s)| SybilRecord {
            sybil_index: i,
            anchor_index: s.anchor_index,
            candidate_index: s.candidate_index,
            final_dssim: s.result.final_dssim,
            initial_anchor_distance: s.result.initial_target_distance,
            final_anchor_distance: s.result.final_target_distance,
        })
        .collect()
}
