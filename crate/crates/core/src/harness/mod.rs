//! Files, stages and checks around the core library: config, tensor
//! containers, manifests, synthetic data, ingest cache, checkpoints,
//! the pipeline stages, reports and the self-test suites.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod ingest;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod selftest;
pub mod stacks;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use container::Container;
pub use manifest::{Manifest, SplitName, TaskKind};
pub use pipeline::{run_embed, run_ingest, run_pretrain, run_probe, run_synth, ProbeSummary};
pub use report::run_report;
pub use selftest::{selftest, SuiteResult};
pub use stacks::StackSet;
