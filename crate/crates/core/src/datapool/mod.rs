//! Sample pool, label bookkeeping, synthetic data and PGM ingestion.

mod oracle;
mod pgm;
mod pool;
mod sample;
mod synth;

pub use oracle::{largest_remainder, stratified_bootstrap, stratified_sample, stratum_histogram, OracleView};
pub use pgm::{downscale, encode_pgm, export_pgm, ingest_pgm, parse_pgm, quantize, IngestIssue, IngestReport, Pgm};
pub use pool::{
    AuditEntry, HumanLabelOutcome, LabeledExample, LearnerSample, LearnerView, ManifestEntry, Pool, PoolCounts,
    PoolManifest, SampleState,
};
pub use sample::{Image, LabelProvenance, Sample};
pub use synth::{synth_generate, SynthConfig, TextureConfig, LUMINANCE};
