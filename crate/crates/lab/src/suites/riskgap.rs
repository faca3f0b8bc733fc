//! Risk-gap suite: per trial, the target-domain risk difference between
//! students distilled from a severely and a mildly shifted prompt is checked
//! against the exact-form bound in the MMD difference; the small-step form
//! is checked too whenever its step condition 2·eta·M_phi² < 1 holds.

use icl_kd_core::features::FeatureMap;
use icl_kd_core::rng::derive_seed;
use icl_kd_core::shift::risk_gap_check;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::report::TrialRecord;
use crate::suites::collect_parallel;
use crate::taskgen::{attention_projections, prompt_sample, target_sample};

pub fn records(cfg: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    let map = FeatureMap::build(cfg.feature_spec())?;
    let eta = cfg.fixed_eta()?;
    let dims = cfg.dims;
    let caps = cfg.caps;

    Ok(collect_parallel(
        cfg.trials,
        "riskgap",
        cfg.seed,
        move |_trial, seed, rec| {
            let weights =
                attention_projections(dims.d, dims.k, dims.m, &caps, derive_seed(seed, 0))?;
            let target = target_sample(dims.d, cfg.samples.n_target, &caps, derive_seed(seed, 1))?;
            let good = prompt_sample(
                dims.d,
                cfg.samples.n_prompt,
                &cfg.shift_good,
                &caps,
                derive_seed(seed, 2),
            )?;
            let bad = prompt_sample(
                dims.d,
                cfg.samples.n_prompt,
                &cfg.shift_bad,
                &caps,
                derive_seed(seed, 3),
            )?;
            let report = risk_gap_check(
                &target,
                &good,
                &bad,
                weights.wv(),
                weights.wk(),
                &map,
                eta,
                false,
            )?;
            rec.metric("lhs", report.lhs)
                .metric("lhs_std_err", report.lhs_std_err)
                .metric("mmd_good", report.mmd_good)
                .metric("mmd_bad", report.mmd_bad)
                .metric("delta_mmd", report.delta_mmd)
                .metric("delta_mmd_std_err", report.delta_mmd_std_err)
                .metric("rhs_exact", report.rhs_exact)
                .metric("margin_std_err_exact", report.margin_std_err_exact)
                .metric("step_size_product", report.constants.step_size_product)
                .metric("m_t", report.constants.m_t)
                .metric("m_phi", report.constants.m_phi)
                .flag(
                    "exact_violation",
                    report.lhs > report.rhs_exact + 3.0 * report.margin_std_err_exact,
                )
                .flag("swapped", report.swapped);
            if let (Some(rhs_main), Some(margin_main)) =
                (report.rhs_main, report.margin_std_err_main)
            {
                rec.metric("rhs_main", rhs_main)
                    .metric("margin_std_err_main", margin_main)
                    .flag("main_violation", report.lhs > rhs_main + 3.0 * margin_main);
            }
            Ok(())
        },
    ))
}
