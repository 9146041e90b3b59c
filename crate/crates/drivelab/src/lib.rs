//! Desk-scale deterministic driving laboratory.
//!
//! The crate bundles everything needed to study conditional imitation
//! learning for driving on a single machine:
//!
//! - [`sim`] — a deterministic 2D world with procedurally generated towns,
//!   traffic lights, NPC vehicles and pedestrians. It renders ego-centric
//!   top-down image observations with photometric weather nuisances and
//!   emits clean ground-truth annotations (semantic segmentation and stop
//!   intentions) plus typed infraction events.
//! - [`route`] / [`oracle`] — lane-graph route planning and a rule-based
//!   expert driver with full world access, used for data collection and as
//!   the benchmark's sanity reference.
//! - [`data`] — dataset collection, on-disk storage (PNG frames + binary
//!   per-episode arrays + JSON manifest), splits, and the dataset
//!   transforms needed by the baselines (whitebox control annotation,
//!   coarse segmentation).
//! - [`nn`] / [`models`] — a small deterministic tensor/NN core (manual
//!   backprop, generic over `f32`/`f64`) and the policy architectures:
//!   squeeze, mimic, single-encoder, perception estimators and decoders.
//! - [`training`] — the control and embedding-mimicking losses and the
//!   training procedures for every method variant.
//! - [`bench`] — closed-loop episode execution and the four scoring
//!   protocols (`carla_old`, `nocrash`, `traffic_light`, `traffic_school`).
//! - [`cli`] — the `drivelab` binary: collect / train / eval / report /
//!   scenario-test, driven by flat key-value config files.
//!
//! Determinism is a hard contract throughout: identical seeds produce
//! bit-identical worlds, datasets, checkpoints and reports.

pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod geom;
pub mod models;
pub mod nn;
pub mod oracle;
pub mod route;
pub mod sim;
pub mod training;

pub use sim::{Command, Control, InfractionEvent, InfractionKind, WeatherParams, WorldState};
