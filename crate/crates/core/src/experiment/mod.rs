//! Configuration, orchestration and persistence of experiments.
//!
//! An experiment is a [`TrainConfig`](crate::trainer::TrainConfig) plus a task
//! source, run over one or more instances. Each instance writes one JSONL
//! metrics file; a manifest is written last.

pub mod compare;
pub mod config;
pub mod export;
pub mod metrics;
pub mod report;
pub mod run;
pub mod verify;

pub use compare::{compare, ComparisonReport};
pub use config::{load_config, ExperimentConfig, TaskSource};
pub use export::export_csv;
pub use metrics::{read_jsonl, MetricsRecord};
pub use report::report;
pub use run::{run_experiment, run_instance, ExperimentOutcome};
pub use verify::{verify_suite, VerificationReport};

/// Window for every smoothed trend and final-value claim.
pub const SMOOTHING_WINDOW: usize = 20;

/// Mean of `values[start..end]`, clamped to the available range.
pub fn window_mean(values: &[f64], start: usize, end: usize) -> f64 {
    let end = end.min(values.len());
    let start = start.min(end);
    if start == end {
        return f64::NAN;
    }
    values[start..end].iter().sum::<f64>() / (end - start) as f64
}

/// Mean of the last [`SMOOTHING_WINDOW`] values.
pub fn smoothed_final(values: &[f64]) -> f64 {
    window_mean(values, values.len().saturating_sub(SMOOTHING_WINDOW), values.len())
}

/// Mean of the first [`SMOOTHING_WINDOW`] values.
pub fn smoothed_initial(values: &[f64]) -> f64 {
    window_mean(values, 0, SMOOTHING_WINDOW)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows() {
        let v: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert_eq!(smoothed_initial(&v), 9.5);
        assert_eq!(smoothed_final(&v), 19.5);
        assert_eq!(window_mean(&v, 25, 100), 27.0);
        assert!(window_mean(&v, 40, 50).is_nan());
        assert_eq!(smoothed_final(&[2.0, 4.0]), 3.0);
    }
}
