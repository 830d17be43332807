//! Cloak detection on the tracker's training data: centroid-proximity
//! anomalies (cloaked class unusually close to its target class) and
//! 2-means bimodality (cloaked plus leaked-original images forming two
//! clusters under one label).

use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::harness::LabeledDataset;

/// Default z threshold for both detectors.
pub const DEFAULT_Z_THRESHOLD: f64 = 3.0;

/// Guards the zero-variance edge (all separations equal).
const ABS_GUARD: f64 = 1e-9;

fn embed_train_classes(
    phi: &FeatureExtractor,
    data: &LabeledDataset,
) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    let mut out = Vec::with_capacity(data.num_classes());
    for (id, split) in data.classes() {
        let mut embeddings = Vec::with_capacity(split.train.len());
        for img in &split.train {
            embeddings.push(phi.embed(img)?.values().to_vec());
        }
        out.push((id.to_string(), embeddings));
    }
    Ok(out)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mean_vec(points: &[Vec<f64>]) -> Vec<f64> {
    let dim = points[0].len();
    let mut acc = vec![0.0; dim];
    for p in points {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    let n = points.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Flags classes whose minimum centroid-to-other-centroid distance sits
/// more than `z_threshold` standard deviations below the mean pairwise
/// centroid separation (pairs not involving the class under test).
pub fn detect_centroid_anomaly(
    phi: &FeatureExtractor,
    data: &LabeledDataset,
    z_threshold: f64,
) -> Result<Vec<String>> {
    if data.num_classes() < 3 {
        return Err(Error::Dataset(format!(
            "centroid anomaly detection needs >= 3 classes, got {}",
            data.num_classes()
        )));
    }
    let classes = embed_train_classes(phi, data)?;
    for (id, embeddings) in &classes {
        if embeddings.is_empty() {
            return Err(Error::Dataset(format!("class {id} has no training images")));
        }
    }
    let centroids: Vec<Vec<f64>> = classes.iter().map(|(_, e)| mean_vec(e)).collect();
    let k = centroids.len();

    let mut pairwise = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let d = euclid(&centroids[i], &centroids[j]);
            pairwise[i][j] = d;
            pairwise[j][i] = d;
        }
    }

    let mut flagged = Vec::new();
    for i in 0..k {
        let min_dist = (0..k)
            .filter(|j| *j != i)
            .map(|j| pairwise[i][j])
            .fold(f64::INFINITY, f64::min);
        // Population: separations among the other classes only.
        let mut population = Vec::new();
        for a in 0..k {
            for b in (a + 1)..k {
                if a != i && b != i {
                    population.push(pairwise[a][b]);
                }
            }
        }
        let (mean, std) = mean_std(&population);
        if mean - min_dist > z_threshold * std + ABS_GUARD * mean.max(1.0) {
            flagged.push(classes[i].0.clone());
        }
    }
    Ok(flagged)
}

/// 2-means with deterministic farthest-pair initialization; returns the
/// final centroid pair.
fn two_means(points: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    // Farthest pair seeding (lowest index pair on ties).
    let (mut ia, mut ib, mut best) = (0usize, 1usize, -1.0);
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d = euclid(&points[i], &points[j]);
            if d > best {
                best = d;
                ia = i;
                ib = j;
            }
        }
    }
    let mut c0 = points[ia].clone();
    let mut c1 = points[ib].clone();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = if euclid(p, &c0) <= euclid(p, &c1) { 0 } else { 1 };
            if assign[i] != a {
                assign[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for cluster in 0..2 {
            let members: Vec<Vec<f64>> = points
                .iter()
                .zip(&assign)
                .filter(|(_, a)| **a == cluster)
                .map(|(p, _)| p.clone())
                .collect();
            if !members.is_empty() {
                let m = mean_vec(&members);
                if cluster == 0 {
                    c0 = m;
                } else {
                    c1 = m;
                }
            }
        }
    }
    (c0, c1)
}

/// Runs 2-means on each class's feature space and flags classes whose
/// two centroids separate by more than `z_threshold` standard deviations
/// above the other classes' mean separation.
pub fn detect_bimodal_classes(
    phi: &FeatureExtractor,
    data: &LabeledDataset,
    z_threshold: f64,
) -> Result<Vec<String>> {
    if data.num_classes() < 3 {
        return Err(Error::Dataset(format!(
            "bimodality detection needs >= 3 classes, got {}",
            data.num_classes()
        )));
    }
    let classes = embed_train_classes(phi, data)?;
    for (id, embeddings) in &classes {
        if embeddings.len() < 4 {
            return Err(Error::Dataset(format!(
                "class {id} has {} images, 2-means needs >= 4",
                embeddings.len()
            )));
        }
    }

    let separations: Vec<f64> = classes
        .iter()
        .map(|(_, embeddings)| {
            let (c0, c1) = two_means(embeddings);
            euclid(&c0, &c1)
        })
        .collect();

    let mut flagged = Vec::new();
    for (i, (id, _)) in classes.iter().enumerate() {
        let others: Vec<f64> = separations
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, s)| *s)
            .collect();
        let (mean, std) = mean_std(&others);
        if separations[i] - mean > z_threshold * std + ABS_GUARD * mean.max(1.0) {
            flagged.push(id.clone());
        }
    }
    Ok(flagged)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::harness::ClassSplit;
    use crate::imaging::Image;

    /// Images that light one 2x2 block per class: under the identity
    /// extractor the class centroids sit on (a scaled copy of) a regular
    /// simplex, every pairwise distance identical.
    fn block_image(block: usize, value: f64, jitter: f64) -> Image {
        let bx = (block % 8) * 2;
        let by = (block / 8) * 2;
        Image::from_fn(16, 16, 1, |_, y, x| {
            if y >= by && y < by + 2 && x >= bx && x < bx + 2 {
                (value + jitter).clamp(0.0, 1.0)
            } else {
                0.1
            }
        })
        .unwrap()
    }

    fn block_class(block: usize, value: f64, n: usize) -> ClassSplit {
        ClassSplit {
            train: (0..n).map(|_| block_image(block, value, 0.0)).collect(),
            test: Vec::new(),
        }
    }

    #[test]
    fn centroid_detector_flags_exactly_the_planted_pair() {
        let mut classes = BTreeMap::new();
        for k in 0..10 {
            classes.insert(format!("n{k:02}"), block_class(k, 0.9, 4));
        }
        // Planted pair shares block 12 at 1/100 of the normal separation.
        classes.insert("planted_a".into(), block_class(12, 0.9, 4));
        classes.insert("planted_b".into(), block_class(12, 0.9 - 0.008, 4));
        let data = crate::harness::LabeledDataset::from_parts(classes);
        let phi = FeatureExtractor::identity(16, 16, 1);

        let flagged = detect_centroid_anomaly(&phi, &data, 3.0).unwrap();
        assert_eq!(flagged, vec!["planted_a".to_string(), "planted_b".to_string()]);
    }

    #[test]
    fn centroid_detector_is_quiet_on_a_regular_simplex() {
        let mut classes = BTreeMap::new();
        for k in 0..10 {
            classes.insert(format!("n{k:02}"), block_class(k, 0.9, 4));
        }
        let data = crate::harness::LabeledDataset::from_parts(classes);
        let phi = FeatureExtractor::identity(16, 16, 1);
        assert!(detect_centroid_anomaly(&phi, &data, 3.0).unwrap().is_empty());
    }

    #[test]
    fn centroid_detector_requires_three_classes() {
        let mut classes = BTreeMap::new();
        classes.insert("a".into(), block_class(0, 0.9, 4));
        classes.insert("b".into(), block_class(1, 0.9, 4));
        let data = crate::harness::LabeledDataset::from_parts(classes);
        let phi = FeatureExtractor::identity(16, 16, 1);
        assert!(matches!(
            detect_centroid_anomaly(&phi, &data, 3.0),
            Err(Error::Dataset(_))
        ));
    }

    /// One tight blob per class, except the planted class which is two
    /// tight blobs far apart.
    fn blob_dataset(planted: bool) -> crate::harness::LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut classes = BTreeMap::new();
        for k in 0..6 {
            let center = 0.2 + k as f64 * 0.1;
            let train: Vec<Image> = (0..8)
                .map(|_| {
                    let v: f64 = center + rng.gen_range(-0.01..0.01);
                    Image::constant(16, 16, 1, v.clamp(0.0, 1.0)).unwrap()
                })
                .collect();
            classes.insert(format!("n{k:02}"), ClassSplit { train, test: Vec::new() });
        }
        if planted {
            let train: Vec<Image> = (0..8)
                .map(|i| {
                    let center = if i < 4 { 0.05 } else { 0.95 };
                    let v: f64 = center + rng.gen_range(-0.002..0.002);
                    Image::constant(16, 16, 1, v.clamp(0.0, 1.0)).unwrap()
                })
                .collect();
            classes.insert("planted".into(), ClassSplit { train, test: Vec::new() });
        }
        crate::harness::LabeledDataset::from_parts(classes)
    }

    #[test]
    fn bimodal_detector_flags_exactly_the_split_class() {
        let data = blob_dataset(true);
        let phi = FeatureExtractor::identity(16, 16, 1);
        let flagged = detect_bimodal_classes(&phi, &data, 3.0).unwrap();
        assert_eq!(flagged, vec!["planted".to_string()]);
    }

    #[test]
    fn bimodal_detector_is_quiet_on_unimodal_classes() {
        let data = blob_dataset(false);
        let phi = FeatureExtractor::identity(16, 16, 1);
        assert!(detect_bimodal_classes(&phi, &data, 3.0).unwrap().is_empty());
    }

    #[test]
    fn bimodal_detector_rejects_small_classes() {
        let mut classes = BTreeMap::new();
        for k in 0..3 {
            classes.insert(
                format!("n{k}"),
                ClassSplit {
                    train: (0..3).map(|_| block_image(k, 0.9, 0.0)).collect(),
                    test: Vec::new(),
                },
            );
        }
        let data = crate::harness::LabeledDataset::from_parts(classes);
        let phi = FeatureExtractor::identity(16, 16, 1);
        assert!(matches!(
            detect_bimodal_classes(&phi, &data, 3.0),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn detection_is_deterministic() {
        let data = blob_dataset(true);
        let phi = FeatureExtractor::identity(16, 16, 1);
        let a = detect_bimodal_classes(&phi, &data, 3.0).unwrap();
        let b = detect_bimodal_classes(&phi, &data, 3.0).unwrap();
        assert_eq!(a, b);
        let c = detect_centroid_anomaly(&phi, &data, 3.0).unwrap();
        let d = detect_centroid_anomaly(&phi, &data, 3.0).unwrap();
        assert_eq!(c, d);
    }
}
