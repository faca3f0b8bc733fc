//! Generalization-bound suite, four record kinds:
//!
//! - `rademacher`: Monte-Carlo linear-class complexity vs the B·C/√N bound
//!   on a grid of sample sizes;
//! - `bound`: held-out risk vs empirical risk + complexity + tail over many
//!   independent (task, student) draws;
//! - `contraction`: the composed loss-class estimate vs 2(D_T + BC) times
//!   the linear estimate on one shared token draw;
//! - `sup_gap`: the resampled uniform-deviation tail against its
//!   bounded-difference threshold.
//!
//! Monte-Carlo quantities carry standard errors and every asserted flag
//! allows three of them on top of the bound, so a raised flag signals a
//! wrong implementation rather than sampling noise.

use icl_kd_core::bounds::{
    contraction_check, estimate_rademacher_linear, estimate_rademacher_loss_class,
    generalization_bound_rhs, BoundConstant, NormBudget, SupGapConfig, TokenSampler,
    DEFAULT_ASCENT_STEPS,
};
use icl_kd_core::distill::{StudentModel, TeacherModel};
use icl_kd_core::features::FeatureMap;
use icl_kd_core::matrix::DenseMatrix;
use icl_kd_core::rng::{derive_seed, normal_matrix, stream};
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::report::TrialRecord;
use crate::suites::collect_parallel;
use crate::taskgen::{rescaled_gaussian, GaussianTokenSampler};

/// Sample sizes of the Rademacher lemma grid.
pub const RADEMACHER_GRID: [usize; 3] = [16, 64, 256];
/// Sign draws for the projected-ascent loss-class estimate (each draw is an
/// optimization run, so this stays far below the linear-class draw count).
const LOSS_CLASS_DRAWS: usize = 200;

/// Derived-stream tags for the suite-level records.
const STREAM_RADEMACHER: u64 = 1 << 32;
const STREAM_CONTRACTION: u64 = 2 << 32;
const STREAM_SUPGAP: u64 = 3 << 32;

fn max_column_norm(m: &DenseMatrix<f64>) -> f64 {
    let mut best = 0.0_f64;
    for i in 0..m.cols() {
        let norm = (0..m.rows())
            .map(|a| m.get(a, i).powi(2))
            .sum::<f64>()
            .sqrt();
        best = best.max(norm);
    }
    best
}

/// Shared per-suite fixtures: the feature map, key projection, and sampler.
struct SuiteContext {
    map: FeatureMap<f64>,
    wk: DenseMatrix<f64>,
    sampler: GaussianTokenSampler,
    r: usize,
}

fn context(cfg: &ExperimentConfig) -> Result<SuiteContext> {
    let map = FeatureMap::build(cfg.feature_spec())?;
    let r = map
        .feature_dim()
        .expect("validation rejects kernel-only maps for this suite");
    let wk = rescaled_gaussian(
        cfg.dims.k,
        cfg.dims.d,
        cfg.caps.weight_cap,
        &mut stream(derive_seed(cfg.seed, 1 << 40)),
    );
    Ok(SuiteContext {
        map,
        wk,
        sampler: GaussianTokenSampler {
            d: cfg.dims.d,
            m_x: cfg.caps.m_x,
        },
        r,
    })
}

pub fn records(cfg: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    let ctx = context(cfg)?;
    let caps = cfg.caps;
    let b = caps.weight_cap;

    let mut records = Vec::with_capacity(RADEMACHER_GRID.len() + cfg.trials + 2);

    // Linear-class lemma across the sample-size grid.
    for (i, n) in RADEMACHER_GRID.into_iter().enumerate() {
        let seed = derive_seed(cfg.seed, STREAM_RADEMACHER + i as u64);
        let mut rec = TrialRecord::new(i as u64, seed, "rademacher");
        let mut fill = || -> Result<()> {
            let tokens = ctx.sampler.sample(n, derive_seed(seed, 0))?;
            let features = ctx.map.apply(&ctx.wk.matmul(&tokens)?)?;
            let est = estimate_rademacher_linear(
                &features,
                b,
                cfg.samples.sign_draws,
                derive_seed(seed, 1),
            )?;
            rec.metric("n_tokens", n as f64)
                .metric("estimate", est.estimate)
                .metric("std_err", est.std_err)
                .metric("lemma_bound", est.lemma_bound)
                .flag(
                    "rademacher_violation",
                    est.estimate > est.lemma_bound + 3.0 * est.std_err,
                );
            Ok(())
        };
        records.push(match fill() {
            Ok(()) => rec,
            Err(e) => TrialRecord::failed(i as u64, seed, "rademacher", e.to_string()),
        });
    }

    // Deviation-bound draws: fresh task and student per record.
    let n_train = cfg.samples.n_train;
    let n_heldout = n_train * cfg.samples.heldout_factor;
    records.extend(collect_parallel(
        cfg.trials,
        "bound",
        cfg.seed,
        |_trial, seed, rec| {
            let wv = rescaled_gaussian(
                cfg.dims.m,
                cfg.dims.d,
                caps.m_t,
                &mut stream(derive_seed(seed, 0)),
            );
            let teacher = TeacherModel::new(wv)?;
            let mut rng = stream(derive_seed(seed, 1));
            let radius: f64 = rng.random::<f64>() * b;
            let w = {
                let raw = normal_matrix::<f64>(cfg.dims.m, ctx.r, &mut stream(derive_seed(seed, 2)));
                let norm = icl_kd_core::matrix::frobenius_norm(&raw).max(f64::MIN_POSITIVE);
                raw.scaled(radius / norm)
            };
            let student = StudentModel::new(w, ctx.wk.clone(), ctx.map.clone())?;

            let train = ctx.sampler.sample(n_train, derive_seed(seed, 3))?;
            let heldout = ctx.sampler.sample(n_heldout, derive_seed(seed, 4))?;

            let c_meas = max_column_norm(&ctx.map.apply(&ctx.wk.matmul(&train)?)?)
                .max(max_column_norm(&ctx.map.apply(&ctx.wk.matmul(&heldout)?)?));
            let d_meas = max_column_norm(&teacher.forward_batch(&train)?)
                .max(max_column_norm(&teacher.forward_batch(&heldout)?));
            let budget = NormBudget::new(
                BoundConstant::declared(b),
                BoundConstant::max_of(caps.m_phi, c_meas),
                BoundConstant::max_of(caps.m_t, d_meas),
            )?;

            let l_hat = icl_kd_core::bounds::empirical_risk(&student, &teacher, &train)?;
            let report = generalization_bound_rhs(l_hat, &budget, n_train, cfg.delta)?;

            // Held-out risk with a per-sample standard error.
            let student_out = student.weights().matmul(&student.features(&heldout)?)?;
            let teacher_out = teacher.forward_batch(&heldout)?;
            let mut losses = Vec::with_capacity(n_heldout);
            for i in 0..n_heldout {
                let mut sq = 0.0;
                for a in 0..cfg.dims.m {
                    let diff = student_out.get(a, i) - teacher_out.get(a, i);
                    sq += diff * diff;
                }
                losses.push(sq);
            }
            let lhs = losses.iter().sum::<f64>() / n_heldout as f64;
            let var = losses.iter().map(|l| (l - lhs).powi(2)).sum::<f64>()
                / (n_heldout.max(2) - 1) as f64;
            let lhs_std_err = (var / n_heldout as f64).sqrt();
            let report = report.observe_lhs(lhs)?;

            rec.metric("student_radius", radius)
                .metric("empirical_risk", report.empirical_risk)
                .metric("complexity_term", report.complexity_term)
                .metric("tail_term", report.tail_term)
                .metric("rhs", report.rhs)
                .metric("lhs", lhs)
                .metric("lhs_std_err", lhs_std_err)
                .flag("bound_violation", lhs > report.rhs + 3.0 * lhs_std_err);
            Ok(())
        },
    ));

    // Contraction of the loss class through 2(D_T + BC), one shared draw.
    {
        let seed = derive_seed(cfg.seed, STREAM_CONTRACTION);
        let mut rec = TrialRecord::new(0, seed, "contraction");
        let mut fill = || -> Result<()> {
            let tokens = ctx.sampler.sample(n_train, derive_seed(seed, 0))?;
            let wv = rescaled_gaussian(
                cfg.dims.m,
                cfg.dims.d,
                caps.m_t,
                &mut stream(derive_seed(seed, 1)),
            );
            let teacher = TeacherModel::new(wv)?;
            let template = StudentModel::new(
                DenseMatrix::zeros(cfg.dims.m, ctx.r),
                ctx.wk.clone(),
                ctx.map.clone(),
            )?;
            let features = template.features(&tokens)?;
            let linear =
                estimate_rademacher_linear(&features, b, LOSS_CLASS_DRAWS, derive_seed(seed, 2))?;
            let loss_class = estimate_rademacher_loss_class(
                &template,
                &teacher,
                &tokens,
                b,
                LOSS_CLASS_DRAWS,
                DEFAULT_ASCENT_STEPS,
                derive_seed(seed, 3),
            )?;
            let radius = max_column_norm(&teacher.forward_batch(&tokens)?)
                + b * max_column_norm(&features);
            let check = contraction_check(&loss_class, &linear, radius);
            rec.metric("composed_estimate", check.composed)
                .metric("linear_estimate", linear.estimate)
                .metric("contraction_bound", check.bound)
                .metric("combined_std_err", check.combined_std_err)
                .metric("radius", radius)
                .flag("contraction_violation", check.violated);
            Ok(())
        };
        records.push(match fill() {
            Ok(()) => rec,
            Err(e) => TrialRecord::failed(0, seed, "contraction", e.to_string()),
        });
    }

    // Resampled uniform-deviation tail.
    {
        let seed = derive_seed(cfg.seed, STREAM_SUPGAP);
        let mut rec = TrialRecord::new(0, seed, "sup_gap");
        let mut fill = || -> Result<()> {
            let wv = rescaled_gaussian(
                cfg.dims.m,
                cfg.dims.d,
                caps.m_t,
                &mut stream(derive_seed(seed, 0)),
            );
            let teacher = TeacherModel::new(wv)?;
            let template = StudentModel::new(
                DenseMatrix::zeros(cfg.dims.m, ctx.r),
                ctx.wk.clone(),
                ctx.map.clone(),
            )?;
            let gap_cfg = SupGapConfig {
                weight_cap: b,
                n_train,
                heldout_factor: cfg.samples.heldout_factor,
                ascent_steps: DEFAULT_ASCENT_STEPS,
                delta: cfg.delta,
            };
            let summary = icl_kd_core::bounds::estimate_sup_gap(
                &ctx.sampler,
                &teacher,
                &template,
                &gap_cfg,
                cfg.samples.resamples,
                derive_seed(seed, 1),
            )?;
            // Binomial allowance on the exceedance frequency itself.
            let freq_std_err =
                (cfg.delta * (1.0 - cfg.delta) / cfg.samples.resamples as f64).sqrt();
            rec.metric("gap_mean", summary.mean)
                .metric("gap_median", summary.quantiles[2].1)
                .metric("tail_offset", summary.t_value)
                .metric("tail_threshold", summary.tail_threshold)
                .metric("exceed_fraction", summary.exceed_fraction)
                .metric("radius", summary.radius)
                .flag(
                    "supgap_violation",
                    summary.exceed_fraction > cfg.delta + 3.0 * freq_std_err,
                );
            Ok(())
        };
        records.push(match fill() {
            Ok(()) => rec,
            Err(e) => TrialRecord::failed(0, seed, "sup_gap", e.to_string()),
        });
    }

    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Suite;

    #[test]
    fn all_bound_families_hold_at_desk_scale() {
        let mut cfg = ExperimentConfig::for_suite(Suite::Genbound, 2024);
        cfg.trials = 8;
        cfg.samples.sign_draws = 400;
        cfg.samples.n_train = 32;
        cfg.samples.heldout_factor = 10;
        cfg.samples.resamples = 30;
        cfg.dims.feature_dim = 8;
        let records = records(&cfg).unwrap();
        assert_eq!(records.len(), RADEMACHER_GRID.len() + 8 + 2);
        for rec in &records {
            assert!(rec.error.is_none(), "{:?}: {:?}", rec.kind, rec.error);
            for (name, raised) in &rec.flags {
                assert!(!raised, "unexpected violation {name} in {}", rec.kind);
            }
        }
        let kinds: Vec<&str> = records.iter().map(|r| r.kind.as_str()).collect();
        assert!(kinds.contains(&"rademacher"));
        assert!(kinds.contains(&"bound"));
        assert!(kinds.contains(&"contraction"));
        assert!(kinds.contains(&"sup_gap"));
    }

    #[test]
    fn bound_records_report_all_three_components() {
        let mut cfg = ExperimentConfig::for_suite(Suite::Genbound, 7);
        cfg.trials = 2;
        cfg.samples.sign_draws = 200;
        cfg.samples.n_train = 16;
        cfg.samples.heldout_factor = 5;
        cfg.samples.resamples = 30;
        cfg.dims.feature_dim = 4;
        let records = records(&cfg).unwrap();
        let bound = records.iter().find(|r| r.kind == "bound").unwrap();
        let sum = bound.metrics["empirical_risk"]
            + bound.metrics["complexity_term"]
            + bound.metrics["tail_term"];
        assert!((sum - bound.metrics["rhs"]).abs() <= 1e-15 * sum.max(1.0));
        assert!(bound.metrics["lhs"] >= 0.0);
    }
}
