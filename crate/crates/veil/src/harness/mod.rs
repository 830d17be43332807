//! Dataset ingestion, desk corpus generation, experiment orchestration,
//! and plot-data emission.

#[cfg(test)]
mod calibrate_probe;
mod corpus;
mod dataset;
mod experiment;
mod pca;

pub use corpus::{corpus_seed, generate_class_images, make_desk_corpus, DeskCorpusSpec};
pub use dataset::{ClassSplit, DatasetManifest, LabeledDataset};
pub use experiment::{
    run_experiment, write_report, CorpusSource, CurvePoint, ExperimentConfig, ExperimentRecord,
    ExperimentReport, ExtractorSpec, RobustSpec, Scenario, TransformKind,
};
pub use pca::{emit_pca, PcaPoint, PcaTable};
