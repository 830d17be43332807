//! Shared test fixtures.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::harness::{ClassSplit, LabeledDataset};
use crate::imaging::Image;
use crate::seed::derive_seed_indexed;

/// Tiny separable corpus: each class is a distinct smooth color/wave
/// pattern plus per-image jitter and noise.
pub(crate) fn tiny_dataset(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> LabeledDataset {
    tiny_dataset_with_spread(classes, per_class, size, seed, 0.38)
}

/// Like [`tiny_dataset`] but with an adjustable color-wheel radius; small
/// values pack the classes together (small decision margins).
pub(crate) fn tiny_dataset_with_spread(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
    spread: f64,
) -> LabeledDataset {
    let mut map = BTreeMap::new();
    for c in 0..classes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(seed, "class", c as u64));
        // Classes sit evenly on a color wheel, so any class count stays
        // separable.
        let hue = c as f64 / classes as f64;
        let base: Vec<f64> = (0..3)
            .map(|ch| {
                let angle = std::f64::consts::TAU * (hue + ch as f64 / 3.0);
                0.5 + spread * angle.cos()
            })
            .collect();
        let freq = 1.0 + c as f64 * 0.7;
        let make = |rng: &mut ChaCha8Rng| {
            let jitter: f64 = rng.gen_range(-0.06..0.06);
            let phase: f64 = rng.gen_range(0.0..1.0);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            Image::from_fn(size, size, 3, |ch, y, x| {
                let wave = 0.24
                    * ((x as f64 * freq / size as f64 * 6.0 + phase).sin()
                        * (y as f64 * freq / size as f64 * 4.0).cos());
                (base[ch] + wave + jitter + noise_rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0)
            })
            .unwrap()
        };
        let train: Vec<Image> = (0..per_class).map(|_| make(&mut rng)).collect();
        let test: Vec<Image> = (0..per_class.div_ceil(4)).map(|_| make(&mut rng)).collect();
        map.insert(format!("c{c:02}"), ClassSplit { train, test });
    }
    LabeledDataset::from_parts(map)
}
