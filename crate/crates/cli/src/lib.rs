//! Batch front-end over the estimation core: scenario validation, simulated
//! runs of each estimator, metrics and plot-ready outputs.
//!
//! Outputs of `run` (all CSVs use `time,variable,value` rows):
//!
//! | file | content |
//! |------|---------|
//! | `truth.csv` | simulated states and inputs |
//! | `estimates_<method>.csv` | estimated states and inputs |
//! | `mahalanobis_<method>.csv` | residual distances, one label per detector |
//! | `report.json` | metrics, alarms, rejections, timings, resolved scenario |

pub mod commands;
pub mod pipeline;
pub mod report;
