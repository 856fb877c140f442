//! Image- and pixel-level evaluation.

mod pro;
mod ranking;
mod report;

pub use pro::{connected_regions, integrate_pro_curve, pro, pro_curve, DEFAULT_FPR_LIMIT};
pub use ranking::{auroc, average_precision};
pub use report::{
    aggregate, evaluate, format_table, AggregateReport, AggregateSet, EvalReport, MeanStd, MetricSet, METRIC_NAMES,
};
