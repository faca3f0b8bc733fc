//! The verification suites: one module per CLI subcommand, each producing
//! the per-trial records the report bundle aggregates.
//!
//! Suites share one execution shape: records are independent, carry seeds
//! derived from the master seed and their index, and may run concurrently —
//! the collected order is always index order, so a bundle's bytes do not
//! depend on the thread count. A failing trial becomes an error record and
//! never aborts the bundle.

pub mod duality;
pub mod genbound;
pub mod kd_init;
pub mod offset;
pub mod rank;
pub mod riskgap;

use icl_kd_core::rng::derive_seed;
use rayon::prelude::*;

use crate::error::Result;
use crate::report::TrialRecord;

/// Runs `count` independent trials of `kind`, filling record `trial` via
/// `fill(trial, seed, record)` with `seed = derive_seed(master, trial)`.
/// Errors are captured per-record; collection preserves index order.
pub(crate) fn collect_parallel<F>(
    count: usize,
    kind: &str,
    master: u64,
    fill: F,
) -> Vec<TrialRecord>
where
    F: Fn(u64, u64, &mut TrialRecord) -> Result<()> + Sync,
{
    (0..count as u64)
        .into_par_iter()
        .map(|trial| {
            let seed = derive_seed(master, trial);
            let mut record = TrialRecord::new(trial, seed, kind);
            match fill(trial, seed, &mut record) {
                Ok(()) => record,
                Err(e) => TrialRecord::failed(trial, seed, kind, e.to_string()),
            }
        })
        .collect()
}

/// Largest-magnitude component, the scale reference for relative errors.
pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Componentwise gap between two vectors of equal length.
pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}
