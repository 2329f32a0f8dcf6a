//! Bootstrap cross-validation for population PK/PD model selection.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bscv;
pub mod dataset;
pub mod estimate;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod seed;
pub mod simulate;
