//! Building blocks for running user applications in parallel with Linux
//! userspace initialization on duty-cycled IoT boards.
//!
//! The crate is split by concern:
//!
//! * [`graph`] holds the application manifest (stages and their stage and
//!   unit dependency sets) and does validation, ordering and
//!   earliest-start analysis.
//! * [`unitgen`] renders systemd unit files for stages, unit-configuration
//!   scripts and shutdown commands.
//! * [`handoff`] moves a stage's output to its successors over Unix domain
//!   sockets, with a small checksummed wire frame.
//! * [`sim`] is a deterministic discrete-event model of a boot cycle on a
//!   multi-core board, with blame and Gantt reporting.
//! * [`energy`] integrates power traces, detects completion markers and
//!   evaluates the battery lifetime model.

pub mod energy;
pub mod graph;
pub mod handoff;
pub mod sim;
pub mod time;
pub mod unitgen;

pub use time::Micros;
