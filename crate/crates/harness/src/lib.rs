//! Operational surface of the scheduling engine: synthetic task
//! generation, experiment configuration, pipeline orchestration, and the
//! `vlsched` CLI.

pub mod cli;
pub mod dataset;
pub mod experiment;
pub mod runner;
pub mod synthetic;
pub mod vocab;
