//! Temporary calibration probe (removed before release).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloak::{cloak_album, CloakParams};
use crate::extractor::{pgd_perturb, train_extractor, ArchConfig, PgdConfig};
use crate::harness::{generate_class_images, DeskCorpusSpec, LabeledDataset};
use crate::imaging::Image;
use crate::targeting::{select_target, TargetMode};
use crate::tracker::{evaluate_protection, transfer_train};

fn build_dataset(spec: &DeskCorpusSpec, seed: u64, split: f64) -> LabeledDataset {
    let mut classes = BTreeMap::new();
    for k in 0..spec.classes {
        let images = generate_class_images(spec, seed, k);
        let n_train = ((images.len() as f64 * split).round() as usize).clamp(1, images.len());
        let (train, test) = images.split_at(n_train);
        classes.insert(
            format!("class_{k:02}"),
            crate::harness::ClassSplit {
                train: train.to_vec(),
                test: test.to_vec(),
            },
        );
    }
    LabeledDataset::from_parts(classes)
}

#[test]
#[ignore]
fn calibrate_desk_scale() {
    let spec = DeskCorpusSpec::default();
    let t0 = Instant::now();
    let data = build_dataset(&spec, 41, 0.8);
    println!("corpus built in {:?}", t0.elapsed());

    let arch = ArchConfig::default();
    let t0 = Instant::now();
    let phi = train_extractor(&data, &arch, 30, 42).unwrap();
    println!("extractor trained in {:?}", t0.elapsed());

    let test_items = data.test_items();
    let acc = test_items
        .iter()
        .filter(|(l, img)| phi.classify(img).unwrap().0 == *l)
        .count() as f64
        / test_items.len() as f64;
    println!("held-out accuracy: {acc:.3}");

    // PGD attack success at 8/255, default 100 steps.
    let t0 = Instant::now();
    let cfg = PgdConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut flips = 0;
    let mut total = 0;
    'outer: for (label, img) in data.train_items() {
        let adv = pgd_perturb(&phi, img, label, &cfg, &mut rng).unwrap();
        if phi.classify(&adv).unwrap().0 != label {
            flips += 1;
        }
        total += 1;
        if total >= 50 {
            break 'outer;
        }
    }
    println!(
        "pgd attack success: {}/{} in {:?}",
        flips,
        total,
        t0.elapsed()
    );

    // Cloak sweep: user class_03, candidates drawn from 5 held-out classes.
    let user = "class_03";
    let user_train = data.get(user).unwrap().train.clone();
    let pool: Vec<&str> = vec!["class_15", "class_16", "class_17", "class_18", "class_19"];
    let mut candidates = BTreeMap::new();
    for cid in &pool {
        candidates.insert(cid.to_string(), data.get(cid).unwrap().train.clone());
    }
    let sel = select_target(
        &phi,
        &user_train,
        &candidates,
        TargetMode::Maximal,
        &mut ChaCha8Rng::seed_from_u64(6),
    )
    .unwrap();
    println!("target: {} (scores {:?})", sel.chosen_class, sel.scores);
    let target_train = data.get(&sel.chosen_class).unwrap().train.clone();

    for rho in [0.06, 0.09, 0.12, 0.16] {
        for iters in [400usize] {
            let params = CloakParams {
                rho,
                iterations: iters,
                ..CloakParams::default()
            };
            let t0 = Instant::now();
            let sample: Vec<Image> = user_train.iter().take(6).cloned().collect();
            let cloaks = cloak_album(
                std::slice::from_ref(&phi),
                &sample,
                &target_train,
                &params,
                &mut ChaCha8Rng::seed_from_u64(7),
            )
            .unwrap();
            let ratio: f64 = cloaks
                .iter()
                .map(|c| c.final_target_distance / c.initial_target_distance)
                .sum::<f64>()
                / cloaks.len() as f64;
            let dssim: f64 =
                cloaks.iter().map(|c| c.final_dssim).sum::<f64>() / cloaks.len() as f64;
            println!(
                "rho={rho} iters={iters}: mean ratio {ratio:.3}, mean dssim {dssim:.4}, {:?}/img",
                t0.elapsed() / 6
            );
        }
    }

    // End-to-end protection per budget.
    for rho in [0.04, 0.08, 0.12, 0.16] {
    let t0 = Instant::now();
    let params = CloakParams {
        rho,
        iterations: 400,
        ..CloakParams::default()
    };
    let cloaks = cloak_album(
        std::slice::from_ref(&phi),
        &user_train,
        &target_train,
        &params,
        &mut ChaCha8Rng::seed_from_u64(8),
    )
    .unwrap();
    let cloaked: Vec<Image> = cloaks.into_iter().map(|c| c.cloaked).collect();
    println!("album cloaked in {:?}", t0.elapsed());

    let tracker_classes: Vec<&str> = (0..15).map(|k| data.class_ids()[k]).collect();
    let tracker_data = data
        .subset(&tracker_classes)
        .unwrap()
        .with_train_replaced(user, cloaked)
        .unwrap();
    let poisoned = transfer_train(&phi, &tracker_data, 20, 9).unwrap();
    let clean = transfer_train(&phi, &data.subset(&tracker_classes).unwrap(), 20, 9).unwrap();

    let user_images = data.get(user).unwrap().test.clone();
    let others_owned: Vec<(String, Image)> = tracker_data
        .test_items()
        .into_iter()
        .filter(|(l, _)| *l != user)
        .map(|(l, i)| (l.to_string(), i.clone()))
        .collect();
    let others: Vec<(&str, &Image)> = others_owned.iter().map(|(l, i)| (l.as_str(), i)).collect();
    let rp = evaluate_protection(&poisoned, user, &user_images, &others).unwrap();
    let rc = evaluate_protection(&clean, user, &user_images, &others).unwrap();
    println!(
        "rho={rho}: protection poisoned={:.2} clean={:.2}; normal acc poisoned={:.3} clean={:.3}",
        rp.protection_success_rate,
        rc.protection_success_rate,
        rp.normal_accuracy,
        rc.normal_accuracy
    );
    }
}
