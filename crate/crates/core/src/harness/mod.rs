//! Synthetic fixtures, evaluation, calibration and reporting.

pub mod calibrate;
pub mod eval;
pub mod fixtures;
pub mod manifest;
pub mod report;
pub mod run;

pub use calibrate::{calibrate, Calibration, CalibrationSample, ThresholdGrid};
pub use eval::{evaluate, BinaryCounts, EvalRecord, EvalReport};
pub use fixtures::{
    gen_global, gen_patch, generate_suite, AttackKind, AttackSpec, Fixture, PatchFill, PatchSpec,
    SuiteSpec,
};
pub use manifest::{load_manifest, parse_manifest, ManifestEntry};
pub use report::{parse_report, write_distributions, write_report, ReportRow, Summary};
pub use run::{detect_samples, load_samples, run_samples, RunSample};
