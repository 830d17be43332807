//! The tracker simulation: recognition models trained on (possibly
//! poisoned) scraped data, protection scoring, and cloak detection.

mod detect;
mod persist;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::nn::{softmax, softmax_xent, Adam, Dense};
use crate::extractor::{train_extractor, ArchConfig, FeatureExtractor};
use crate::harness::LabeledDataset;
use crate::imaging::Image;
use crate::seed::derive_seed;

pub use detect::{detect_bimodal_classes, detect_centroid_anomaly};

/// How a classifier's backbone was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Frozen pretrained feature extractor, only the softmax head trained.
    Transfer,
    /// Backbone and head trained together on the tracker's data.
    Scratch,
}

/// A recognition model: feature extractor backbone plus a softmax head
/// over the tracker's label table.
#[derive(Debug, Clone)]
pub struct Classifier {
    backbone: FeatureExtractor,
    head: Dense,
    labels: Vec<String>,
    mode: TrainMode,
}

/// Per-image prediction kept for report self-consistency checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Stable item id, `user:<i>` or `other:<label>:<i>`.
    pub item: String,
    pub true_label: String,
    pub predicted_label: String,
    pub confidence: f64,
}

/// Protection outcome of one trained tracker model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtectionReport {
    pub user_label: String,
    /// Fraction of the user's clean test images NOT classified as the user.
    pub protection_success_rate: f64,
    /// Accuracy over the other classes' test images.
    pub normal_accuracy: f64,
    pub predictions: Vec<PredictionRecord>,
}

impl ProtectionReport {
    /// Recomputes both rates from the stored predictions.
    pub fn recompute_rates(&self) -> (f64, f64) {
        let user: Vec<&PredictionRecord> = self
            .predictions
            .iter()
            .filter(|p| p.true_label == self.user_label)
            .collect();
        let others: Vec<&PredictionRecord> = self
            .predictions
            .iter()
            .filter(|p| p.true_label != self.user_label)
            .collect();
        let protection = if user.is_empty() {
            0.0
        } else {
            user.iter()
                .filter(|p| p.predicted_label != self.user_label)
                .count() as f64
                / user.len() as f64
        };
        let normal = if others.is_empty() {
            0.0
        } else {
            others
                .iter()
                .filter(|p| p.predicted_label == p.true_label)
                .count() as f64
                / others.len() as f64
        };
        (protection, normal)
    }

    /// Prediction rows as CSV (item, true label, predicted label,
    /// confidence).
    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("item,true_label,predicted_label,confidence\n");
        for p in &self.predictions {
            out.push_str(&format!(
                "{},{},{},{:.6}\n",
                p.item, p.true_label, p.predicted_label, p.confidence
            ));
        }
        out
    }
}

/// Trains only a softmax head on top of the frozen extractor.
pub fn transfer_train(
    phi: &FeatureExtractor,
    data: &LabeledDataset,
    epochs: usize,
    seed: u64,
) -> Result<Classifier> {
    if phi.conv_net().is_none() || phi.provenance().epochs == 0 {
        return Err(Error::Model("transfer learning needs a trained extractor".into()));
    }
    if data.num_classes() < 2 {
        return Err(Error::Dataset(format!(
            "transfer training needs >= 2 classes, got {}",
            data.num_classes()
        )));
    }
    if epochs == 0 {
        return Err(Error::Param("epochs must be >= 1".into()));
    }

    let labels: Vec<String> = data.class_ids().iter().map(|s| s.to_string()).collect();
    let items = data.train_items();
    if items.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }

    // Backbone is frozen: embed every training image once.
    let mut embedded: Vec<(usize, Vec<f64>)> = Vec::with_capacity(items.len());
    for (label, img) in &items {
        let idx = labels.iter().position(|l| l == label).expect("known label");
        embedded.push((idx, phi.embed(img)?.values().to_vec()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "head-init"));
    let mut head = Dense::new_seeded(phi.embed_dim(), labels.len(), &mut rng);
    train_head(&mut head, &embedded, epochs, derive_seed(seed, "head-train"));

    Ok(Classifier {
        backbone: phi.clone(),
        head,
        labels,
        mode: TrainMode::Transfer,
    })
}

/// Head fine-tuning: Adam at lr 1e-2 over minibatches of 32.
fn train_head(head: &mut Dense, embedded: &[(usize, Vec<f64>)], epochs: usize, seed: u64) {
    use rand::seq::SliceRandom;

    let mut adam = Adam::new(&[head.w.len(), head.b.len()], 1e-2);
    let mut order: Vec<usize> = (0..embedded.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(32) {
            let mut dw = vec![0.0; head.w.len()];
            let mut db = vec![0.0; head.b.len()];
            for &i in batch {
                let (label, emb) = &embedded[i];
                let logits = head.forward(emb);
                let (_, d_logits) = softmax_xent(&logits, *label);
                head.backward_params(emb, &d_logits, &mut dw, &mut db);
            }
            let inv = 1.0 / batch.len() as f64;
            dw.iter_mut().for_each(|v| *v *= inv);
            db.iter_mut().for_each(|v| *v *= inv);
            let mut params = vec![&mut head.w, &mut head.b];
            adam.step(&mut params, &[&dw, &db]);
        }
    }
    for v in head.w.iter_mut().chain(head.b.iter_mut()) {
        *v = *v as f32 as f64;
    }
}

/// Trains backbone and head together on the tracker's own data.
pub fn scratch_train(
    arch: &ArchConfig,
    data: &LabeledDataset,
    epochs: usize,
    seed: u64,
) -> Result<Classifier> {
    let phi = train_extractor(data, arch, epochs, seed)?;
    let head = phi.head_layer().expect("training attaches a head").clone();
    let labels = phi.head_labels().to_vec();
    Ok(Classifier {
        backbone: phi,
        head,
        labels,
        mode: TrainMode::Scratch,
    })
}

impl Classifier {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn mode(&self) -> TrainMode {
        self.mode
    }

    pub fn backbone(&self) -> &FeatureExtractor {
        &self.backbone
    }

    /// Checksum of the backbone weights (freeze contract witness).
    pub fn backbone_checksum(&self) -> u64 {
        self.backbone.weight_checksum()
    }

    pub fn head_rows(&self) -> usize {
        self.head.out_dim
    }

    /// Predicted label and softmax confidence.
    pub fn predict(&self, img: &Image) -> Result<(String, f64)> {
        let emb = self.backbone.embed(img)?;
        let probs = softmax(&self.head.forward(emb.values()));
        let (idx, p) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .expect("head has outputs");
        Ok((self.labels[idx].clone(), *p))
    }

    /// Accuracy over labeled items.
    pub fn accuracy(&self, items: &[(&str, &Image)]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::Dataset("accuracy over an empty set".into()));
        }
        let mut hits = 0usize;
        for (label, img) in items {
            if self.predict(img)?.0 == *label {
                hits += 1;
            }
        }
        Ok(hits as f64 / items.len() as f64)
    }
}

/// Scores a trained tracker model against the protected user: protection
/// success over the user's clean test images, normal accuracy over
/// everyone else's.
pub fn evaluate_protection(
    model: &Classifier,
    user_label: &str,
    user_clean_test: &[Image],
    others_test: &[(&str, &Image)],
) -> Result<ProtectionReport> {
    if !model.labels.iter().any(|l| l == user_label) {
        return Err(Error::Model(format!("user label {user_label} not in the model's table")));
    }
    if user_clean_test.is_empty() || others_test.is_empty() {
        return Err(Error::Dataset("empty test sets".into()));
    }

    let mut predictions = Vec::with_capacity(user_clean_test.len() + others_test.len());
    let mut recognized = 0usize;
    for (i, img) in user_clean_test.iter().enumerate() {
        let (pred, conf) = model.predict(img)?;
        if pred == user_label {
            recognized += 1;
        }
        predictions.push(PredictionRecord {
            item: format!("user:{i}"),
            true_label: user_label.to_string(),
            predicted_label: pred,
            confidence: conf,
        });
    }
    let mut correct = 0usize;
    for (i, (label, img)) in others_test.iter().enumerate() {
        let (pred, conf) = model.predict(img)?;
        if pred == *label {
            correct += 1;
        }
        predictions.push(PredictionRecord {
            item: format!("other:{label}:{i}"),
            true_label: (*label).to_string(),
            predicted_label: pred,
            confidence: conf,
        });
    }

    Ok(ProtectionReport {
        user_label: user_label.to_string(),
        protection_success_rate: 1.0 - recognized as f64 / user_clean_test.len() as f64,
        normal_accuracy: correct as f64 / others_test.len() as f64,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::testutil::tiny_dataset;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            input_height: 16,
            input_width: 16,
            input_channels: 3,
            conv_channels: vec![8, 16],
            embed_dim: 16,
        }
    }

    #[test]
    fn transfer_keeps_backbone_bit_identical() {
        let data = tiny_dataset(3, 8, 16, 30);
        let phi = train_extractor(&data, &small_arch(), 20, 31).unwrap();
        let before = phi.weight_checksum();
        let model = transfer_train(&phi, &data, 20, 32).unwrap();
        assert_eq!(model.backbone_checksum(), before);
        assert_eq!(model.mode(), TrainMode::Transfer);
    }

    #[test]
    fn transfer_learns_the_tiny_corpus() {
        let data = tiny_dataset(4, 10, 16, 33);
        let phi = train_extractor(&data, &small_arch(), 60, 34).unwrap();
        let model = transfer_train(&phi, &data, 30, 35).unwrap();
        let acc = model.accuracy(&data.test_items()).unwrap();
        assert!(acc >= 0.75, "held-out accuracy {acc}");
    }

    #[test]
    fn transfer_head_shape_follows_class_count() {
        let data = tiny_dataset(4, 8, 16, 36);
        let phi = train_extractor(&data, &small_arch(), 10, 37).unwrap();
        let two = data.subset(&["c00", "c01"]).unwrap();
        let model = transfer_train(&phi, &two, 5, 38).unwrap();
        assert_eq!(model.head_rows(), 2);
        assert_eq!(model.labels(), &["c00".to_string(), "c01".to_string()]);
    }

    #[test]
    fn transfer_rejects_degenerate_inputs() {
        let data = tiny_dataset(3, 8, 16, 39);
        let phi = train_extractor(&data, &small_arch(), 5, 40).unwrap();
        let one = data.subset(&["c00"]).unwrap();
        assert!(matches!(
            transfer_train(&phi, &one, 5, 41),
            Err(Error::Dataset(_))
        ));
        let identity = FeatureExtractor::identity(16, 16, 3);
        assert!(matches!(
            transfer_train(&identity, &data, 5, 42),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn scratch_training_is_deterministic_and_marked() {
        let data = tiny_dataset(3, 8, 16, 43);
        let a = scratch_train(&small_arch(), &data, 10, 44).unwrap();
        let b = scratch_train(&small_arch(), &data, 10, 44).unwrap();
        assert_eq!(a.backbone_checksum(), b.backbone_checksum());
        assert_eq!(a.mode(), TrainMode::Scratch);
    }

    #[test]
    fn scratch_learns_the_tiny_corpus() {
        let data = tiny_dataset(4, 10, 16, 45);
        let model = scratch_train(&small_arch(), &data, 60, 46).unwrap();
        let acc = model.accuracy(&data.test_items()).unwrap();
        assert!(acc >= 0.7, "held-out accuracy {acc}");
    }

    /// A classifier whose head always produces the same argmax, built by
    /// zeroing weights and biasing one row.
    fn constant_classifier(data: &LabeledDataset, winner: usize) -> Classifier {
        let phi = train_extractor(data, &small_arch(), 2, 47).unwrap();
        let mut model = transfer_train(&phi, data, 1, 48).unwrap();
        model.head.w.iter_mut().for_each(|v| *v = 0.0);
        model.head.b.iter_mut().for_each(|v| *v = 0.0);
        model.head.b[winner] = 10.0;
        model
    }

    #[test]
    fn always_user_prediction_means_zero_protection() {
        let data = tiny_dataset(3, 8, 16, 49);
        let model = constant_classifier(&data, 0); // always predicts c00
        let user_images = data.get("c00").unwrap().test.clone();
        let others: Vec<(&str, &Image)> = data
            .test_items()
            .into_iter()
            .filter(|(l, _)| *l != "c00")
            .collect();
        let report = evaluate_protection(&model, "c00", &user_images, &others).unwrap();
        assert_eq!(report.protection_success_rate, 0.0);
    }

    #[test]
    fn never_user_prediction_means_full_protection() {
        let data = tiny_dataset(3, 8, 16, 50);
        let model = constant_classifier(&data, 1); // always predicts c01
        let user_images = data.get("c00").unwrap().test.clone();
        let others: Vec<(&str, &Image)> = data
            .test_items()
            .into_iter()
            .filter(|(l, _)| *l != "c00")
            .collect();
        let report = evaluate_protection(&model, "c00", &user_images, &others).unwrap();
        assert_eq!(report.protection_success_rate, 1.0);
    }

    #[test]
    fn report_rates_match_recomputation_from_predictions() {
        let data = tiny_dataset(4, 10, 16, 51);
        let phi = train_extractor(&data, &small_arch(), 30, 52).unwrap();
        let model = transfer_train(&phi, &data, 20, 53).unwrap();
        let user_images = data.get("c01").unwrap().test.clone();
        let others: Vec<(&str, &Image)> = data
            .test_items()
            .into_iter()
            .filter(|(l, _)| *l != "c01")
            .collect();
        let report = evaluate_protection(&model, "c01", &user_images, &others).unwrap();
        let (p, n) = report.recompute_rates();
        assert!((p - report.protection_success_rate).abs() < 1e-12);
        assert!((n - report.normal_accuracy).abs() < 1e-12);
        // protection + user-class recall = 1 exactly.
        let recall = 1.0 - report.protection_success_rate;
        assert!((recall + report.protection_success_rate - 1.0).abs() < 1e-15);

        let csv = report.predictions_csv();
        assert!(csv.lines().count() == report.predictions.len() + 1);
    }

    #[test]
    fn evaluate_rejects_bad_inputs() {
        let data = tiny_dataset(3, 8, 16, 54);
        let model = constant_classifier(&data, 0);
        let user_images = data.get("c00").unwrap().test.clone();
        assert!(matches!(
            evaluate_protection(&model, "c00", &user_images, &[]),
            Err(Error::Dataset(_))
        ));
        assert!(matches!(
            evaluate_protection(&model, "nope", &user_images, &[]),
            Err(Error::Model(_))
        ));
    }

    /// End-to-end poisoning on the tiny corpus: replacing the user's
    /// training images with cloaked versions must make the transfer-trained
    /// tracker misclassify the user's clean test images.
    #[test]
    fn poisoned_training_degrades_user_recognition() {
        use crate::cloak::{cloak_album, CloakParams};

        let data = tiny_dataset(8, 10, 16, 55);
        let phi = train_extractor(&data, &small_arch(), 60, 56).unwrap();

        // The user is a tracker class; target candidates are classes the
        // tracker never sees, picked by maximal feature-space distance.
        let user = "c02";
        let user_train = data.get(user).unwrap().train.clone();
        let mut candidates = std::collections::BTreeMap::new();
        for cid in ["c06", "c07"] {
            candidates.insert(cid.to_string(), data.get(cid).unwrap().train.clone());
        }
        let selection = crate::targeting::select_target(
            &phi,
            &user_train,
            &candidates,
            crate::targeting::TargetMode::Maximal,
            &mut ChaCha8Rng::seed_from_u64(59),
        )
        .unwrap();
        let target_train = data.get(&selection.chosen_class).unwrap().train.clone();
        let params = CloakParams {
            rho: 0.05,
            iterations: 300,
            ..CloakParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let cloaks =
            cloak_album(std::slice::from_ref(&phi), &user_train, &target_train, &params, &mut rng)
                .unwrap();
        let cloaked: Vec<Image> = cloaks.into_iter().map(|c| c.cloaked).collect();

        let tracker_classes: Vec<&str> = vec!["c00", "c01", "c02", "c03", "c04", "c05"];
        let tracker_data = data
            .subset(&tracker_classes)
            .unwrap()
            .with_train_replaced(user, cloaked)
            .unwrap();
        let poisoned = transfer_train(&phi, &tracker_data, 30, 58).unwrap();
        let clean = transfer_train(&phi, &data.subset(&tracker_classes).unwrap(), 30, 58).unwrap();

        let user_images = data.get(user).unwrap().test.clone();
        let others: Vec<(&str, &Image)> = tracker_data
            .test_items()
            .into_iter()
            .filter(|(l, _)| *l != user)
            .collect();
        let others_owned: Vec<(String, Image)> = others
            .iter()
            .map(|(l, i)| (l.to_string(), (*i).clone()))
            .collect();
        let others_ref: Vec<(&str, &Image)> = others_owned
            .iter()
            .map(|(l, i)| (l.as_str(), i))
            .collect();

        let poisoned_report =
            evaluate_protection(&poisoned, user, &user_images, &others_ref).unwrap();
        let clean_report = evaluate_protection(&clean, user, &user_images, &others_ref).unwrap();

        assert!(
            poisoned_report.protection_success_rate > clean_report.protection_success_rate,
            "poisoned {} vs clean {}",
            poisoned_report.protection_success_rate,
            clean_report.protection_success_rate
        );
        // Poisoning one class must not wreck accuracy on the others.
        assert!(
            poisoned_report.normal_accuracy >= clean_report.normal_accuracy - 0.25,
            "normal accuracy collapsed: {} vs {}",
            poisoned_report.normal_accuracy,
            clean_report.normal_accuracy
        );
    }
}

#[cfg(test)]
mod probe_tests {
    use super::*;
    use crate::testutil::tiny_dataset;

    #[test]
    #[ignore]
    fn probe_clean_transfer() {
        let data = tiny_dataset(5, 10, 16, 55);
        let arch = ArchConfig {
            input_height: 16, input_width: 16, input_channels: 3,
            conv_channels: vec![8, 16], embed_dim: 16,
        };
        let phi = train_extractor(&data, &arch, 60, 56).unwrap();
        println!("phi own-head acc: {}", {
            let items = data.test_items();
            items.iter().filter(|(l, img)| phi.classify(img).unwrap().0 == *l).count() as f64 / items.len() as f64
        });
        let sub = data.subset(&["c00", "c01", "c02", "c03"]).unwrap();
        let clean = transfer_train(&phi, &sub, 30, 58).unwrap();
        println!("clean transfer acc: {}", clean.accuracy(&sub.test_items()).unwrap());
        for (l, img) in sub.test_items() {
            let (p, c) = clean.predict(img).unwrap();
            println!("  true {l} -> pred {p} ({c:.3})");
        }
    }
}
