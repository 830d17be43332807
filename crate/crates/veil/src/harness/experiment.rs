//! Experiment orchestration: every protection scenario and
//! countermeasure sweep, driven by one seeded config and emitting a
//! reproducible report.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloak::{cloak_album, CloakParams};
use crate::error::{Error, Result};
use crate::extractor::{robust_train, train_extractor, ArchConfig, FeatureExtractor, PgdConfig};
use crate::harness::{generate_class_images, ClassSplit, DeskCorpusSpec, LabeledDataset};
use crate::imaging::{augment, gaussian_blur, gaussian_noise, jpeg_roundtrip, AugmentParams, Image};
use crate::seed::{derive_seed, derive_seed_indexed};
use crate::sybil::{build_sybil_set, SybilSpec};
use crate::targeting::{select_target, TargetMode, TargetSelection};
use crate::tracker::{
    detect_bimodal_classes, detect_centroid_anomaly, evaluate_protection, scratch_train,
    transfer_train, Classifier, ProtectionReport,
};

/// Experiment scenarios (the sweep axis meaning depends on the scenario).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// User and tracker share one feature extractor.
    SharedExtractor,
    /// Paired robust/non-robust user cloaks against a different tracker
    /// extractor.
    CrossExtractor,
    /// Tracker trains its model from scratch on the poisoned data.
    Scratch,
    /// Sweep the DSSIM budget rho.
    BudgetSweep,
    /// Sweep the number of labels in the tracker's model.
    LabelDensity,
    /// Sweep the fraction of leaked uncloaked originals.
    LeakSweep,
    /// Leak sweep with Sybil decoys injected at configured ratios.
    SybilSweep,
    /// Sybils jointly optimized across several user extractors.
    SybilJoint,
    /// Tracker transforms its training images (blur/noise/jpeg/augment).
    CountermeasureTransform,
    /// Robust user extractor vs an even more robust tracker extractor,
    /// sweeping the budget.
    RobustTracker,
    /// Cloak detection and the two evasion variants.
    Detection,
}

/// Training-data transformation the tracker applies as a countermeasure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Gaussian blur; grid value = kernel size (odd).
    Blur,
    /// Gaussian noise; grid value = standard deviation.
    Noise,
    /// JPEG recompression; grid value = quality.
    Jpeg,
    /// Random rotation/shift/zoom; grid value scales the default ranges.
    Augment,
}

/// Where the evaluation corpus comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// Generated desk corpus (class count, images, size).
    Desk(DeskCorpusSpec),
    /// Class directories of PNGs on disk.
    Path(PathBuf),
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Desk(DeskCorpusSpec::default())
    }
}

/// How to build one feature extractor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractorSpec {
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default = "default_extractor_epochs")]
    pub epochs: usize,
    /// Offsets the training seed so two specs yield different weights.
    #[serde(default)]
    pub seed_offset: u64,
    /// Adversarial-training phase, when present.
    #[serde(default)]
    pub robust: Option<RobustSpec>,
}

fn default_extractor_epochs() -> usize {
    30
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec {
            arch: ArchConfig::default(),
            epochs: default_extractor_epochs(),
            seed_offset: 0,
            robust: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustSpec {
    #[serde(default = "default_robust_epochs")]
    pub extra_epochs: usize,
    #[serde(default)]
    pub pgd: PgdConfig,
}

fn default_robust_epochs() -> usize {
    10
}

/// Full experiment description; every random choice derives from `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub corpus: CorpusSource,
    /// Desk corpus that pretrains the feature extractors (separate
    /// identities from the evaluation corpus).
    #[serde(default)]
    pub extractor_corpus: DeskCorpusSpec,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default = "default_user_extractors")]
    pub user_extractors: Vec<ExtractorSpec>,
    /// Tracker-side extractor; `None` shares the user's first extractor.
    #[serde(default)]
    pub tracker_extractor: Option<ExtractorSpec>,
    #[serde(default = "default_cloak_params")]
    pub cloak: CloakParams,
    #[serde(default = "default_target_mode")]
    pub target_mode: TargetMode,
    #[serde(default = "default_head_epochs")]
    pub head_epochs: usize,
    #[serde(default = "default_scratch_epochs")]
    pub scratch_epochs: usize,
    /// Sweep grid; meaning depends on the scenario.
    #[serde(default)]
    pub sweep: Vec<f64>,
    /// Evaluation-corpus classes held out as target/Sybil material.
    #[serde(default = "default_pool_classes")]
    pub target_pool_classes: usize,
    /// Leak ratio used by scenarios that need one fixed ratio.
    #[serde(default = "default_leak_ratio")]
    pub leak_ratio: f64,
    /// Leak ratios at which Sybil variants are generated (sybil_sweep).
    #[serde(default = "default_sybil_ratios")]
    pub sybil_ratios: Vec<f64>,
    /// Sybil images per anchor, per variant (sybil scenarios).
    #[serde(default = "default_per_anchor_variants")]
    pub per_anchor_variants: Vec<usize>,
    #[serde(default = "default_transform")]
    pub transform: TransformKind,
    #[serde(default = "default_detection_z")]
    pub detection_z: f64,
    #[serde(default = "default_early_stop")]
    pub early_stop_fraction: f64,
}

fn default_repetitions() -> usize {
    5
}
fn default_split() -> f64 {
    0.8
}
fn default_user_extractors() -> Vec<ExtractorSpec> {
    vec![ExtractorSpec::default()]
}
fn default_cloak_params() -> CloakParams {
    // Desk-scale calibration: a 32x32 box-window DSSIM needs a larger
    // budget than full-size photos, and the optimizer is converged well
    // before 400 iterations at this input size.
    CloakParams {
        rho: 0.05,
        iterations: 400,
        ..CloakParams::default()
    }
}
fn default_target_mode() -> TargetMode {
    TargetMode::Maximal
}
fn default_head_epochs() -> usize {
    20
}
fn default_scratch_epochs() -> usize {
    30
}
fn default_pool_classes() -> usize {
    5
}
fn default_leak_ratio() -> f64 {
    0.2
}
fn default_sybil_ratios() -> Vec<f64> {
    vec![0.2]
}
fn default_per_anchor_variants() -> Vec<usize> {
    vec![1, 2]
}
fn default_transform() -> TransformKind {
    TransformKind::Blur
}
fn default_detection_z() -> f64 {
    3.0
}
fn default_early_stop() -> f64 {
    0.2
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            scenario,
            seed,
            repetitions: default_repetitions(),
            output_dir: None,
            corpus: CorpusSource::default(),
            extractor_corpus: DeskCorpusSpec::default(),
            split_fraction: default_split(),
            user_extractors: default_user_extractors(),
            tracker_extractor: None,
            cloak: default_cloak_params(),
            target_mode: default_target_mode(),
            head_epochs: default_head_epochs(),
            scratch_epochs: default_scratch_epochs(),
            sweep: Vec::new(),
            target_pool_classes: default_pool_classes(),
            leak_ratio: default_leak_ratio(),
            sybil_ratios: default_sybil_ratios(),
            per_anchor_variants: default_per_anchor_variants(),
            transform: default_transform(),
            detection_z: default_detection_z(),
            early_stop_fraction: default_early_stop(),
        }
    }
}

/// One grid-point x repetition outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub grid_value: f64,
    pub repetition: usize,
    pub user_class: String,
    pub target_class: String,
    pub protection_success_rate: f64,
    pub normal_accuracy: f64,
    pub baseline_protection: f64,
    pub baseline_normal_accuracy: f64,
    /// Scenario-specific numeric outputs (paired variants, sybil uplifts).
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
    /// Scenario-specific text outputs (detector flags).
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

/// Aggregate per grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub grid_value: f64,
    pub mean_protection: f64,
    pub std_protection: f64,
    pub mean_normal_accuracy: f64,
}

/// Everything a run produced, reproducible from the embedded config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub records: Vec<ExperimentRecord>,
    pub curves: Vec<CurvePoint>,
    pub elapsed_secs: f64,
}

impl ExperimentReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("grid_value,mean_protection,std_protection,mean_normal_accuracy\n");
        for c in &self.curves {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                c.grid_value, c.mean_protection, c.std_protection, c.mean_normal_accuracy
            ));
        }
        out
    }

    /// Mean protection at one grid value.
    pub fn mean_protection_at(&self, grid_value: f64) -> Option<f64> {
        self.curves
            .iter()
            .find(|c| (c.grid_value - grid_value).abs() < 1e-12)
            .map(|c| c.mean_protection)
    }
}

/// Prepared inputs shared by every repetition.
struct Bench {
    eval_data: LabeledDataset,
    user_phis: Vec<FeatureExtractor>,
    tracker_phi: FeatureExtractor,
}

/// Per-repetition class split and cloaked album.
struct RepSetup {
    user: String,
    tracker_classes: Vec<String>,
    pool_classes: Vec<String>,
    selection: TargetSelection,
    /// Cloaked versions of the user's training album, input order.
    cloaked: Vec<Image>,
}

/// Runs the configured scenario over its sweep grid and repetitions.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    validate_config(config)?;
    let started = Instant::now();
    let bench = prepare_bench(config)?;

    let records = match config.scenario {
        Scenario::SharedExtractor => run_plain(config, &bench, Mode::Shared)?,
        Scenario::Scratch => run_plain(config, &bench, Mode::Scratch)?,
        Scenario::CrossExtractor => run_cross(config, &bench)?,
        Scenario::BudgetSweep | Scenario::RobustTracker => run_budget(config, &bench)?,
        Scenario::LabelDensity => run_label_density(config, &bench)?,
        Scenario::LeakSweep => run_leak(config, &bench, false)?,
        Scenario::SybilSweep => run_leak(config, &bench, true)?,
        Scenario::SybilJoint => run_sybil_joint(config, &bench)?,
        Scenario::CountermeasureTransform => run_transform(config, &bench)?,
        Scenario::Detection => run_detection(config, &bench)?,
    };

    let curves = aggregate(&records);
    Ok(ExperimentReport {
        config: config.clone(),
        records,
        curves,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

fn validate_config(config: &ExperimentConfig) -> Result<()> {
    if config.repetitions == 0 {
        return Err(Error::Config("repetitions must be >= 1".into()));
    }
    if config.user_extractors.is_empty() {
        return Err(Error::Config("at least one user extractor required".into()));
    }
    let needs_sweep = matches!(
        config.scenario,
        Scenario::BudgetSweep
            | Scenario::LabelDensity
            | Scenario::LeakSweep
            | Scenario::SybilSweep
            | Scenario::CountermeasureTransform
            | Scenario::RobustTracker
    );
    if needs_sweep && config.sweep.is_empty() {
        return Err(Error::Config(format!(
            "scenario {:?} needs a non-empty sweep grid",
            config.scenario
        )));
    }
    if config.scenario == Scenario::SybilJoint && config.user_extractors.len() < 2 {
        return Err(Error::Config(
            "sybil_joint needs at least two user extractors".into(),
        ));
    }
    Ok(())
}

/// Quantizes to the 8-bit grid so in-memory corpora match their PNG form.
fn quantize_byte(img: Image) -> Image {
    let px: Vec<f64> = img
        .pixels()
        .iter()
        .map(|p| (p * 255.0).round() / 255.0)
        .collect();
    Image::new(img.height(), img.width(), img.channels(), px).expect("quantized in range")
}

fn build_desk_dataset(spec: &DeskCorpusSpec, seed: u64, split: f64) -> LabeledDataset {
    let mut classes = BTreeMap::new();
    for k in 0..spec.classes {
        let images: Vec<Image> = generate_class_images(spec, seed, k)
            .into_iter()
            .map(quantize_byte)
            .collect();
        let n_train = ((images.len() as f64 * split).round() as usize).clamp(1, images.len());
        let (train, test) = images.split_at(n_train);
        classes.insert(
            format!("class_{k:02}"),
            ClassSplit {
                train: train.to_vec(),
                test: test.to_vec(),
            },
        );
    }
    LabeledDataset::from_parts(classes)
}

fn build_extractor(
    spec: &ExtractorSpec,
    corpus: &LabeledDataset,
    master_seed: u64,
    role: &str,
) -> Result<FeatureExtractor> {
    let seed = derive_seed(master_seed, &format!("extractor/{role}/{}", spec.seed_offset));
    let phi = train_extractor(corpus, &spec.arch, spec.epochs, seed)?;
    match &spec.robust {
        None => Ok(phi),
        Some(r) => robust_train(
            &phi,
            corpus,
            r.extra_epochs,
            &r.pgd,
            derive_seed(seed, "robust"),
        ),
    }
}

fn prepare_bench(config: &ExperimentConfig) -> Result<Bench> {
    let eval_data = match &config.corpus {
        CorpusSource::Desk(spec) => build_desk_dataset(
            spec,
            derive_seed(config.seed, "corpus/eval"),
            config.split_fraction,
        ),
        CorpusSource::Path(path) => {
            LabeledDataset::load(path, config.split_fraction, derive_seed(config.seed, "split"))?
        }
    };
    let extractor_corpus = build_desk_dataset(
        &config.extractor_corpus,
        derive_seed(config.seed, "corpus/extractor"),
        config.split_fraction,
    );

    let mut user_phis = Vec::with_capacity(config.user_extractors.len());
    for (i, spec) in config.user_extractors.iter().enumerate() {
        user_phis.push(build_extractor(
            spec,
            &extractor_corpus,
            config.seed,
            &format!("user{i}"),
        )?);
    }
    let tracker_phi = match &config.tracker_extractor {
        None => user_phis[0].clone(),
        Some(spec) => build_extractor(spec, &extractor_corpus, config.seed, "tracker")?,
    };

    Ok(Bench {
        eval_data,
        user_phis,
        tracker_phi,
    })
}

/// Splits the evaluation classes for one repetition and cloaks the user's
/// album with the given extractors and params.
fn setup_repetition(
    config: &ExperimentConfig,
    bench: &Bench,
    phis: &[FeatureExtractor],
    params: &CloakParams,
    rep: usize,
) -> Result<RepSetup> {
    let rep_seed = derive_seed_indexed(config.seed, "rep", rep as u64);
    let mut class_rng = ChaCha8Rng::seed_from_u64(derive_seed(rep_seed, "classes"));

    let mut ids: Vec<String> = bench.eval_data.class_ids().iter().map(|s| s.to_string()).collect();
    if ids.len() < config.target_pool_classes + 3 {
        return Err(Error::Dataset(format!(
            "corpus has {} classes; need at least {} (pool {} + 3)",
            ids.len(),
            config.target_pool_classes + 3,
            config.target_pool_classes
        )));
    }
    ids.shuffle(&mut class_rng);
    let pool_classes: Vec<String> = ids[..config.target_pool_classes].to_vec();
    let mut tracker_classes: Vec<String> = ids[config.target_pool_classes..].to_vec();
    tracker_classes.sort();
    let user = tracker_classes[class_rng.gen_range(0..tracker_classes.len())].clone();

    let user_album = &bench.eval_data.get(&user).expect("user class exists").train;
    let mut candidates = BTreeMap::new();
    for id in &pool_classes {
        candidates.insert(
            id.clone(),
            bench.eval_data.get(id).expect("pool class exists").train.clone(),
        );
    }
    let selection = select_target(
        &phis[0],
        user_album,
        &candidates,
        config.target_mode,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(rep_seed, "target")),
    )?;
    let target_images = &bench.eval_data.get(&selection.chosen_class).expect("target exists").train;

    let cloaks = cloak_album(
        phis,
        user_album,
        target_images,
        params,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(rep_seed, "pairing")),
    )?;

    Ok(RepSetup {
        user,
        tracker_classes,
        pool_classes,
        selection,
        cloaked: cloaks.into_iter().map(|c| c.cloaked).collect(),
    })
}

/// Test items of every tracker class except the user.
fn others_test<'a>(data: &'a LabeledDataset, user: &str) -> Vec<(&'a str, &'a Image)> {
    data.test_items()
        .into_iter()
        .filter(|(l, _)| *l != user)
        .collect()
}

fn train_and_score(
    config: &ExperimentConfig,
    bench: &Bench,
    tracker_data: &LabeledDataset,
    user: &str,
    rep: usize,
    stream: &str,
) -> Result<ProtectionReport> {
    let seed = derive_seed(derive_seed_indexed(config.seed, "rep", rep as u64), stream);
    let model = transfer_train(&bench.tracker_phi, tracker_data, config.head_epochs, seed)?;
    score(bench, &model, tracker_data, user)
}

fn score(
    bench: &Bench,
    model: &Classifier,
    tracker_data: &LabeledDataset,
    user: &str,
) -> Result<ProtectionReport> {
    let user_test = &bench.eval_data.get(user).expect("user class exists").test;
    let others = others_test(tracker_data, user);
    evaluate_protection(model, user, user_test, &others)
}

enum Mode {
    Shared,
    Scratch,
}

fn run_plain(config: &ExperimentConfig, bench: &Bench, mode: Mode) -> Result<Vec<ExperimentRecord>> {
    let mut records = Vec::new();
    for rep in 0..config.repetitions {
        let setup = setup_repetition(config, bench, &bench.user_phis, &config.cloak, rep)?;
        let tracker_ids: Vec<&str> = setup.tracker_classes.iter().map(String::as_str).collect();
        let clean_data = bench.eval_data.subset(&tracker_ids)?;
        let poisoned_data = clean_data.with_train_replaced(&setup.user, setup.cloaked.clone())?;

        let rep_seed = derive_seed_indexed(config.seed, "rep", rep as u64);
        let (report, baseline) = match mode {
            Mode::Shared => (
                train_and_score(config, bench, &poisoned_data, &setup.user, rep, "tracker")?,
                train_and_score(config, bench, &clean_data, &setup.user, rep, "tracker")?,
            ),
            Mode::Scratch => {
                let arch = config
                    .tracker_extractor
                    .as_ref()
                    .map(|s| s.arch.clone())
                    .unwrap_or_default();
                let poisoned = scratch_train(
                    &arch,
                    &poisoned_data,
                    config.scratch_epochs,
                    derive_seed(rep_seed, "scratch"),
                )?;
                let clean = scratch_train(
                    &arch,
                    &clean_data,
                    config.scratch_epochs,
                    derive_seed(rep_seed, "scratch"),
                )?;
                (
                    score(bench, &poisoned, &poisoned_data, &setup.user)?,
                    score(bench, &clean, &clean_data, &setup.user)?,
                )
            }
        };

        records.push(record(0.0, rep, &setup, &report, &baseline));
    }
    Ok(records)
}

fn record(
    grid_value: f64,
    rep: usize,
    setup: &RepSetup,
    report: &ProtectionReport,
    baseline: &ProtectionReport,
) -> ExperimentRecord {
    ExperimentRecord {
        grid_value,
        repetition: rep,
        user_class: setup.user.clone(),
        target_class: setup.selection.chosen_class.clone(),
        protection_success_rate: report.protection_success_rate,
        normal_accuracy: report.normal_accuracy,
        baseline_protection: baseline.protection_success_rate,
        baseline_normal_accuracy: baseline.normal_accuracy,
        extra: BTreeMap::new(),
        notes: BTreeMap::new(),
    }
}

/// Paired robust/non-robust cloaks against a separate tracker extractor.
/// The headline rates come from the robust-sourced cloaks; the non-robust
/// rates land in `extra`.
fn run_cross(config: &ExperimentConfig, bench: &Bench) -> Result<Vec<ExperimentRecord>> {
    let robust_phi = bench
        .user_phis
        .iter()
        .find(|p| p.is_robust())
        .ok_or_else(|| Error::Config("cross_extractor needs a robust user extractor".into()))?;
    let plain_phi = bench
        .user_phis
        .iter()
        .find(|p| !p.is_robust())
        .ok_or_else(|| Error::Config("cross_extractor needs a non-robust user extractor".into()))?;
    if config.tracker_extractor.is_none() {
        return Err(Error::Config(
            "cross_extractor needs a separate tracker extractor".into(),
        ));
    }

    let mut records = Vec::new();
    for rep in 0..config.repetitions {
        // Same repetition seed for both arms: identical user, target and
        // pairing, so the comparison is paired.
        let robust_setup = setup_repetition(
            config,
            bench,
            std::slice::from_ref(robust_phi),
            &config.cloak,
            rep,
        )?;
        let plain_setup = setup_repetition(
            config,
            bench,
            std::slice::from_ref(plain_phi),
            &config.cloak,
            rep,
        )?;

        let tracker_ids: Vec<&str> = robust_setup.tracker_classes.iter().map(String::as_str).collect();
        let clean_data = bench.eval_data.subset(&tracker_ids)?;

        let robust_data =
            clean_data.with_train_replaced(&robust_setup.user, robust_setup.cloaked.clone())?;
        let plain_data =
            clean_data.with_train_replaced(&plain_setup.user, plain_setup.cloaked.clone())?;

        let robust_report =
            train_and_score(config, bench, &robust_data, &robust_setup.user, rep, "tracker")?;
        let plain_report =
            train_and_score(config, bench, &plain_data, &plain_setup.user, rep, "tracker")?;
        let baseline =
            train_and_score(config, bench, &clean_data, &robust_setup.user, rep, "tracker")?;

        let mut rec = record(0.0, rep, &robust_setup, &robust_report, &baseline);
        rec.extra
            .insert("protection_nonrobust".into(), plain_report.protection_success_rate);
        rec.extra
            .insert("protection_robust".into(), robust_report.protection_success_rate);
        records.push(rec);
    }
    Ok(records)
}

/// Budget escalation: cloaks depend on the grid value, so each point gets
/// its own album.
fn run_budget(config: &ExperimentConfig, bench: &Bench) -> Result<Vec<ExperimentRecord>> {
    let mut records = Vec::new();
    for &rho in &config.sweep {
        for rep in 0..config.repetitions {
            let params = CloakParams {
                rho,
                ..config.cloak.clone()
            };
            let setup = setup_repetition(config, bench, &bench.user_phis, &params, rep)?;
            let tracker_ids: Vec<&str> = setup.tracker_classes.iter().map(String::as_str).collect();
            let clean_data = bench.eval_data.subset(&tracker_ids)?;
            let poisoned_data = clean_data.with_train_replaced(&setup.user, setup.cloaked.clone())?;

            let report = train_and_score(config, bench, &poisoned_data, &setup.user, rep, "tracker")?;
            let baseline = train_and_score(config, bench, &clean_data, &setup.user, rep, "tracker")?;
            records.push(record(rho, rep, &setup, &report, &baseline));
        }
    }
    Ok(records)
}

/// Label-density sweep: the cloaked album is grid-independent, so it is
/// computed once per repetition and reused across N.
fn run_label_density(config: &ExperimentConfig, bench: &Bench) -> Result<Vec<ExperimentRecord>> {
    let mut records = Vec::new();
    for rep in 0..config.repetitions {
        let setup = setup_repetition(config, bench, &bench.user_phis, &config.cloak, rep)?;
        let rep_seed = derive_seed_indexed(config.seed, "rep", rep as u64);

        for &n_raw in &config.sweep {
            let n = n_raw.round() as usize;
            if n < 2 || n > setup.tracker_classes.len() {
                return Err(Error::Config(format!(
                    "label count {n} outside [2, {}]",
                    setup.tracker_classes.len()
                )));
            }
            // The user plus n-1 other classes, sampled per grid point.
            let mut others: Vec<&String> = setup
                .tracker_classes
                .iter()
                .filter(|c| **c != setup.user)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                rep_seed,
                &format!("labels/{n}"),
            ));
            others.shuffle(&mut rng);
            let mut chosen: Vec<&str> = others[..n - 1].iter().map(|s| s.as_str()).collect();
            chosen.push(setup.user.as_str());
            chosen.sort();

            let clean_data = bench.eval_data.subset(&chosen)?;
            let poisoned_data = clean_data.with_train_replaced(&setup.user, setup.cloaked.clone())?;
            let report = train_and_score(
                config,
                bench,
                &poisoned_data,
                &setup.user,
                rep,
                &format!("tracker/{n}"),
            )?;
            let baseline = train_and_score(
                config,
                bench,
                &clean_data,
                &setup.user,
                rep,
                &format!("tracker/{n}"),
            )?;
            records.push(record(n as f64, rep, &setup, &report, &baseline));
        }
    }
    Ok(records)
}

/// Splits the album into a cloak-shared part A and leaked originals B.
fn leak_split(album_len: usize, ratio: f64) -> (usize, usize) {
    let leaked = ((album_len as f64) * ratio).round() as usize;
    let leaked = leaked.min(album_len);
    (album_len - leaked, leaked)
}

/// Leak degradation, optionally with Sybil decoys injected at the
/// configured ratios.
fn run_leak(
    config: &ExperimentConfig,
    bench: &Bench,
    with_sybil: bool,
) -> Result<Vec<ExperimentRecord>> {
    let mut records = Vec::new();
    for rep in 0..config.repetitions {
        let setup = setup_repetition(config, bench, &bench.user_phis, &config.cloak, rep)?;
        let rep_seed = derive_seed_indexed(config.seed, "rep", rep as u64);
        let album = &bench.eval_data.get(&setup.user).expect("user exists").train;

        let tracker_ids: Vec<&str> = setup.tracker_classes.iter().map(String::as_str).collect();
        let clean_data = bench.eval_data.subset(&tracker_ids)?;
        let baseline = train_and_score(config, bench, &clean_data, &setup.user, rep, "tracker")?;

        // Leak order fixed per repetition: B grows with the ratio.
        let mut order: Vec<usize> = (0..album.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(rep_seed, "leak")));

        for &ratio in &config.sweep {
            let (n_a, n_b) = leak_split(album.len(), ratio);
            let a_idx = &order[..n_a];
            let b_idx = &order[n_a..n_a + n_b];
            let mut user_train: Vec<Image> =
                a_idx.iter().map(|&i| setup.cloaked[i].clone()).collect();
            user_train.extend(b_idx.iter().map(|&i| album[i].clone()));
            let poisoned_data = clean_data.with_train_replaced(&setup.user, user_train)?;

            let report = train_and_score(
                config,
                bench,
                &poisoned_data,
                &setup.user,
                rep,
                &format!("tracker/leak{ratio}"),
            )?;
            let mut rec = record(ratio, rep, &setup, &report, &baseline);

            let sybil_here = with_sybil
                && config.sybil_ratios.iter().any(|r| (r - ratio).abs() < 1e-12)
                && n_a > 0;
            if sybil_here {
                // Candidates come from a pool class other than the target.
                let candidate_class = setup
                    .pool_classes
                    .iter()
                    .find(|c| **c != setup.selection.chosen_class)
                    .ok_or_else(|| Error::Config("no pool class left for sybil candidates".into()))?;
                let candidates = bench
                    .eval_data
                    .get(candidate_class)
                    .expect("pool class exists")
                    .train
                    .clone();
                let anchors: Vec<Image> = a_idx.iter().map(|&i| album[i].clone()).collect();

                for &per_anchor in &config.per_anchor_variants {
                    let sybils = build_sybil_set(
                        &bench.user_phis,
                        &SybilSpec {
                            candidates: candidates.clone(),
                            anchors: anchors.clone(),
                            per_anchor,
                            params: config.cloak.clone(),
                        },
                        &mut ChaCha8Rng::seed_from_u64(derive_seed(
                            rep_seed,
                            &format!("sybil/{ratio}/{per_anchor}"),
                        )),
                    )?;
                    let mut sybil_data = poisoned_data.clone();
                    sybil_data.insert_class(
                        "zz_sybil",
                        ClassSplit {
                            train: sybils.into_iter().map(|s| s.result.cloaked).collect(),
                            test: Vec::new(),
                        },
                    )?;
                    let model = transfer_train(
                        &bench.tracker_phi,
                        &sybil_data,
                        config.head_epochs,
                        derive_seed(rep_seed, &format!("tracker/sybil{ratio}/{per_anchor}")),
                    )?;
                    // Score against the same class set; the sybil label has
                    // no test images and stays out of normal accuracy.
                    let sybil_report = score(bench, &model, &poisoned_data, &setup.user)?;
                    rec.extra.insert(
                        format!("protection_sybil_per_anchor_{per_anchor}"),
                        sybil_report.protection_success_rate,
                    );
                    rec.extra.insert(
                        format!("normal_accuracy_sybil_per_anchor_{per_anchor}"),
                        sybil_report.normal_accuracy,
                    );
                }
            }
            records.push(rec);
        }
    }
    Ok(records)
}

/// Sybils jointly optimized across all user extractors, each extractor
/// then playing the tracker in turn; the record carries the mean.
fn run_sybil_joint(config: &ExperimentConfig, bench: &Bench) -> Result<Vec<ExperimentRecord>> {
    let mut records = Vec::new();
    let ratio = config.leak_ratio;
    for rep in 0..config.repetitions {
        let setup = setup_repetition(config, bench, &bench.user_phis, &config.cloak, rep)?;
        let rep_seed = derive_seed_indexed(config.seed, "rep", rep as u64);
        let album = &bench.eval_data.get(&setup.user).expect("user exists").train;

        let mut order: Vec<usize> = (0..album.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(rep_seed, "leak")));
        let (n_a, n_b) = leak_split(album.len(), ratio);
        let a_idx = &order[..n_a];
        let b_idx = &order[n_a..n_a + n_b];

        let mut user_train: Vec<Image> = a_idx.iter().map(|&i| setup.cloaked[i].clone()).collect();
        user_train.extend(b_idx.iter().map(|&i| album[i].clone()));

        let candidate_class = setup
            .pool_classes
            .iter()
            .find(|c| **c != setup.selection.chosen_class)
            .ok_or_else(|| Error::Config("no pool class left for sybil candidates".into()))?;
        let candidates = bench
            .eval_data
            .get(candidate_class)
            .expect("pool class exists")
            .train
            .clone();
        let anchors: Vec<Image> = a_idx.iter().map(|&i| album[i].clone()).collect();
        let per_anchor = config.per_anchor_variants.first().copied().unwrap_or(1);
        let sybils = build_sybil_set(
            &bench.user_phis,
            &SybilSpec {
                candidates,
                anchors,
                per_anchor,
                params: config.cloak.clone(),
            },
            &mut ChaCha8Rng::seed_from_u64(derive_seed(rep_seed, "sybil/joint")),
        )?;

        let tracker_ids: Vec<&str> = setup.tracker_classes.iter().map(String::as_str).collect();
        let clean_data = bench.eval_data.subset(&tracker_ids)?;
        let poisoned_data = clean_data.with_train_replaced(&setup.user, user_train)?;
        let mut sybil_data = poisoned_data.clone();
        sybil_data.insert_class(
            "zz_sybil",
            ClassSplit {
                train: sybils.into_iter().map(|s| s.result.cloaked).collect(),
                test: Vec::new(),
            },
        )?;

        let mut protections = Vec::new();
        let mut rec_extra = BTreeMap::new();
        for (i, tracker_phi) in bench.user_phis.iter().enumerate() {
            let model = transfer_train(
                tracker_phi,
                &sybil_data,
                config.head_epochs,
                derive_seed(rep_seed, &format!("tracker/joint{i}")),
            )?;
            let r = score(bench, &model, &poisoned_data, &setup.user)?;
            rec_extra.insert(format!("protection_tracker_{i}"), r.protection_success_rate);
            protections.push(r.protection_success_rate);
        }
        let mean = protections.iter().sum::<f64>() / protections.len() as f64;

        let baseline = train_and_score(config, bench, &clean_data, &setup.user, rep, "tracker")?;
        let mut rec = ExperimentRecord {
            grid_value: ratio,
            repetition: rep,
            user_class: setup.user.clone(),
            target_class: setup.selection.chosen_class.clone(),
            protection_success_rate: mean,
            normal_accuracy: f64::NAN,
            baseline_protection: baseline.protection_success_rate,
            baseline_normal_accuracy: baseline.normal_accuracy,
            extra: rec_extra,
            notes: BTreeMap::new(),
        };
        rec.normal_accuracy = baseline.normal_accuracy;
        records.push(rec);
    }
    Ok(records)
}

fn apply_transform(
    kind: TransformKind,
    value: f64,
    img: &Image,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    match kind {
        TransformKind::Blur => {
            let k = value.round() as usize;
            if k <= 1 {
                Ok(img.clone())
            } else {
                let k = if k % 2 == 0 { k + 1 } else { k };
                gaussian_blur(img, k, k as f64 / 3.0)
            }
        }
        TransformKind::Noise => gaussian_noise(img, value, rng),
        TransformKind::Jpeg => jpeg_roundtrip(img, value.round() as u8),
        TransformKind::Augment => {
            let p = AugmentParams::default();
            Ok(augment(
                img,
                &AugmentParams {
                    rotation_deg: p.rotation_deg * value,
                    shift_h: p.shift_h * value,
                    shift_v: p.shift_v * value,
                    zoom: p.zoom * value,
                },
                rng,
            ))
        }
    }
}

/// Tracker-side training-data transformation sweep. Cloaks are reused
/// across grid points; train images (cloaked and clean alike) pass
/// through the transformation before head training.
fn run_transform(config: &ExperimentConfig, bench: &Bench) -> Result<Vec<ExperimentRecord>> {
    let mut records = Vec::new();
    for rep in 0..config.repetitions {
        let setup = setup_repetition(config, bench, &bench.user_phis, &config.cloak, rep)?;
        let rep_seed = derive_seed_indexed(config.seed, "rep", rep as u64);
        let tracker_ids: Vec<&str> = setup.tracker_classes.iter().map(String::as_str).collect();
        let clean_data = bench.eval_data.subset(&tracker_ids)?;
        let poisoned_data = clean_data.with_train_replaced(&setup.user, setup.cloaked.clone())?;

        for &value in &config.sweep {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                rep_seed,
                &format!("transform/{value}"),
            ));
            let transform_all = |data: &LabeledDataset, rng: &mut ChaCha8Rng| -> Result<LabeledDataset> {
                let mut classes = BTreeMap::new();
                for (id, split) in data.classes() {
                    let train: Result<Vec<Image>> = split
                        .train
                        .iter()
                        .map(|img| apply_transform(config.transform, value, img, rng))
                        .collect();
                    classes.insert(
                        id.to_string(),
                        ClassSplit {
                            train: train?,
                            test: split.test.clone(),
                        },
                    );
                }
                Ok(LabeledDataset::from_parts(classes))
            };

            let transformed_poisoned = transform_all(&poisoned_data, &mut rng)?;
            let transformed_clean = transform_all(&clean_data, &mut rng)?;
            let report = train_and_score(
                config,
                bench,
                &transformed_poisoned,
                &setup.user,
                rep,
                &format!("tracker/t{value}"),
            )?;
            let baseline = train_and_score(
                config,
                bench,
                &transformed_clean,
                &setup.user,
                rep,
                &format!("tracker/t{value}"),
            )?;
            records.push(record(value, rep, &setup, &report, &baseline));
        }
    }
    Ok(records)
}

/// Detection scenario: grid value 0 = baseline maximal-target cloaks,
/// 1 = early-stop evasion (centroid detector), 2 = average-target evasion
/// (2-means detector). Flags land in the record notes.
fn run_detection(config: &ExperimentConfig, bench: &Bench) -> Result<Vec<ExperimentRecord>> {
    let mut records = Vec::new();
    for rep in 0..config.repetitions {
        for variant in 0..3u32 {
            let (params, mode) = match variant {
                0 => (config.cloak.clone(), config.target_mode),
                1 => (
                    CloakParams {
                        early_stop_fraction: Some(config.early_stop_fraction),
                        ..config.cloak.clone()
                    },
                    config.target_mode,
                ),
                _ => (config.cloak.clone(), TargetMode::Average),
            };
            let cfg_variant = ExperimentConfig {
                target_mode: mode,
                ..config.clone()
            };
            let setup = setup_repetition(&cfg_variant, bench, &bench.user_phis, &params, rep)?;
            let rep_seed = derive_seed_indexed(config.seed, "rep", rep as u64);
            let album = &bench.eval_data.get(&setup.user).expect("user exists").train;

            let tracker_ids: Vec<&str> = setup.tracker_classes.iter().map(String::as_str).collect();
            let clean_data = bench.eval_data.subset(&tracker_ids)?;
            let baseline = train_and_score(config, bench, &clean_data, &setup.user, rep, "tracker")?;

            // Centroid detection corpus: tracker classes plus the target
            // class's clean images (the tracker scraped the decoy too),
            // user fully cloaked.
            let mut centroid_data = clean_data.with_train_replaced(&setup.user, setup.cloaked.clone())?;
            centroid_data.insert_class(
                &setup.selection.chosen_class.clone(),
                bench
                    .eval_data
                    .get(&setup.selection.chosen_class)
                    .expect("target exists")
                    .clone(),
            )?;
            let centroid_flags =
                detect_centroid_anomaly(&bench.tracker_phi, &centroid_data, config.detection_z)?;

            // Bimodality detection corpus: leaked originals mixed in.
            let mut order: Vec<usize> = (0..album.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(rep_seed, "leak")));
            let (n_a, n_b) = leak_split(album.len(), config.leak_ratio);
            let mut user_train: Vec<Image> =
                order[..n_a].iter().map(|&i| setup.cloaked[i].clone()).collect();
            user_train.extend(order[n_a..n_a + n_b].iter().map(|&i| album[i].clone()));
            let bimodal_data = clean_data.with_train_replaced(&setup.user, user_train)?;
            let bimodal_flags =
                detect_bimodal_classes(&bench.tracker_phi, &bimodal_data, config.detection_z)?;

            // Protection of this variant's cloaks in the plain shared
            // setup (no leak, target class absent).
            let poisoned_data = clean_data.with_train_replaced(&setup.user, setup.cloaked.clone())?;
            let report = train_and_score(
                config,
                bench,
                &poisoned_data,
                &setup.user,
                rep,
                &format!("tracker/det{variant}"),
            )?;

            let mut rec = record(f64::from(variant), rep, &setup, &report, &baseline);
            rec.notes.insert("centroid_flags".into(), centroid_flags.join(","));
            rec.notes.insert("bimodal_flags".into(), bimodal_flags.join(","));
            rec.extra.insert(
                "centroid_flags_user".into(),
                f64::from(centroid_flags.iter().any(|f| *f == setup.user)),
            );
            rec.extra.insert(
                "bimodal_flags_user".into(),
                f64::from(bimodal_flags.iter().any(|f| *f == setup.user)),
            );
            records.push(rec);
        }
    }
    Ok(records)
}

fn aggregate(records: &[ExperimentRecord]) -> Vec<CurvePoint> {
    let mut grid_values: Vec<f64> = Vec::new();
    for r in records {
        if !grid_values.iter().any(|g| (g - r.grid_value).abs() < 1e-12) {
            grid_values.push(r.grid_value);
        }
    }
    grid_values
        .into_iter()
        .map(|g| {
            let slice: Vec<&ExperimentRecord> = records
                .iter()
                .filter(|r| (r.grid_value - g).abs() < 1e-12)
                .collect();
            let n = slice.len() as f64;
            let mean = slice.iter().map(|r| r.protection_success_rate).sum::<f64>() / n;
            let var = slice
                .iter()
                .map(|r| (r.protection_success_rate - mean).powi(2))
                .sum::<f64>()
                / n;
            let mean_norm = slice.iter().map(|r| r.normal_accuracy).sum::<f64>() / n;
            CurvePoint {
                grid_value: g,
                mean_protection: mean,
                std_protection: var.sqrt(),
                mean_normal_accuracy: mean_norm,
            }
        })
        .collect()
}

/// Writes the report (JSON), its curve (CSV) and per-record predictions
/// under `dir`.
pub fn write_report(report: &ExperimentReport, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Numerical(format!("report serialization: {e}")))?;
    let report_path = dir.join("report.json");
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    let curve_path = dir.join("curve.csv");
    std::fs::write(&curve_path, report.curve_csv()).map_err(|e| Error::io(&curve_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small config so scenario plumbing tests stay fast: tiny corpora,
    /// short training, few cloak iterations.
    pub(crate) fn fast_config(scenario: Scenario) -> ExperimentConfig {
        let mut config = ExperimentConfig::new(scenario, 11);
        config.repetitions = 1;
        config.corpus = CorpusSource::Desk(DeskCorpusSpec {
            classes: 8,
            images_per_class: 10,
            width: 32,
            height: 32,
        });
        config.extractor_corpus = DeskCorpusSpec {
            classes: 6,
            images_per_class: 10,
            width: 32,
            height: 32,
        };
        config.user_extractors = vec![ExtractorSpec {
            epochs: 10,
            ..ExtractorSpec::default()
        }];
        config.cloak.iterations = 60;
        config.head_epochs = 10;
        config.scratch_epochs = 10;
        config.target_pool_classes = 3;
        config
    }

    #[test]
    fn shared_extractor_produces_one_record_per_repetition() {
        let mut config = fast_config(Scenario::SharedExtractor);
        config.repetitions = 2;
        let report = run_experiment(&config).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.curves.len(), 1);
        for r in &report.records {
            assert!((0.0..=1.0).contains(&r.protection_success_rate));
            assert!((0.0..=1.0).contains(&r.normal_accuracy));
            assert!(!r.user_class.is_empty());
            assert_ne!(r.user_class, r.target_class);
        }
    }

    #[test]
    fn sweep_produces_grid_times_repetitions_records() {
        let mut config = fast_config(Scenario::LabelDensity);
        config.repetitions = 2;
        config.sweep = vec![2.0, 4.0];
        let report = run_experiment(&config).unwrap();
        assert_eq!(report.records.len(), 4);
        assert_eq!(report.curves.len(), 2);
    }

    #[test]
    fn reports_are_reproducible_from_config() {
        let mut config = fast_config(Scenario::LeakSweep);
        config.sweep = vec![0.0, 0.3];
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        let rates = |r: &ExperimentReport| -> Vec<(f64, f64)> {
            r.records
                .iter()
                .map(|x| (x.protection_success_rate, x.normal_accuracy))
                .collect()
        };
        assert_eq!(rates(&a), rates(&b));
        let users: Vec<&str> = a.records.iter().map(|r| r.user_class.as_str()).collect();
        let users_b: Vec<&str> = b.records.iter().map(|r| r.user_class.as_str()).collect();
        assert_eq!(users, users_b);
    }

    #[test]
    fn unknown_requirements_are_config_errors() {
        let config = fast_config(Scenario::BudgetSweep);
        // Empty sweep grid.
        assert!(matches!(run_experiment(&config), Err(Error::Config(_))));

        let mut joint = fast_config(Scenario::SybilJoint);
        joint.sweep = vec![0.2];
        // Only one user extractor.
        assert!(matches!(run_experiment(&joint), Err(Error::Config(_))));
    }

    #[test]
    fn report_round_trips_through_json() {
        let mut config = fast_config(Scenario::SharedExtractor);
        config.repetitions = 1;
        let report = run_experiment(&config).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: ExperimentReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.records.len(), report.records.len());
        assert_eq!(
            back.records[0].protection_success_rate,
            report.records[0].protection_success_rate
        );
    }

    #[test]
    fn write_report_emits_json_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = fast_config(Scenario::SharedExtractor);
        config.repetitions = 1;
        let report = run_experiment(&config).unwrap();
        write_report(&report, dir.path()).unwrap();
        assert!(dir.path().join("report.json").exists());
        let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
        assert!(csv.starts_with("grid_value,"));
        assert_eq!(csv.lines().count(), 2);
    }
}
