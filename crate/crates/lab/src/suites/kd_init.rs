//! Initialization-identity suite: per trial, one-step distillation at the
//! partition-matched step size must land exactly on the implicit initial
//! weights of the attention dual, for both the identity map and sampled
//! positive random features; the same trial also validates the distillation
//! gradient against central finite differences.
//!
//! The KD loss is quadratic in the mixing matrix, so central differences are
//! exact up to rounding and the relative tolerance is pure slack for
//! accumulated floating-point error.

use icl_kd_core::distill::{
    check_w0_identity, kd_gradient, kd_loss, EtaStarPolicy, StudentModel, TeacherModel,
};
use icl_kd_core::features::{FeatureMap, FeatureMapSpec};
use icl_kd_core::matrix::frobenius_norm;
use icl_kd_core::rng::{derive_seed, normal_matrix, stream};
use rand::Rng;

use crate::config::{EtaPolicy, ExperimentConfig};
use crate::error::Result;
use crate::report::TrialRecord;
use crate::suites::collect_parallel;
use crate::taskgen::{attention_projections, target_tokens};

/// Relative tolerance on ‖W* − W₀‖_F / ‖W₀‖_F.
pub const IDENTITY_REL_TOL: f64 = 1e-11;
/// Relative tolerance on the finite-difference gradient match.
pub const GRADIENT_REL_TOL: f64 = 1e-5;
/// Base step for the central differences (scaled by each entry's size).
const FD_STEP: f64 = 1e-6;

pub fn records(cfg: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    let dims = cfg.dims;
    let caps = cfg.caps;
    let eta = cfg.eta;
    Ok(collect_parallel(
        cfg.trials,
        "kd-init",
        cfg.seed,
        |_trial, seed, rec| {
            let mut rng = stream(derive_seed(seed, 0));
            let d = rng.random_range(1..=dims.d);
            let k = rng.random_range(1..=dims.k);
            let m = rng.random_range(1..=dims.m);
            let n_demo = rng.random_range(1..=dims.n_demo);
            let n_query = rng.random_range(0..=dims.m_query);

            let weights = attention_projections(d, k, m, &caps, derive_seed(seed, 1))?;
            let demos = target_tokens(d, n_demo, caps.m_x, &mut stream(derive_seed(seed, 2)));
            let queries = target_tokens(d, n_query, caps.m_x, &mut stream(derive_seed(seed, 3)));
            let next = target_tokens(d, 1, caps.m_x, &mut stream(derive_seed(seed, 4)));
            let tokens =
                icl_kd_core::attention::TokenMatrix::new(demos, queries, next.column(0))?;

            let policy = match eta {
                EtaPolicy::PartitionImplied => EtaStarPolicy::MatchPartition,
                EtaPolicy::Fixed { value } => EtaStarPolicy::Fixed(value),
            };
            let specs = [
                ("identity", FeatureMapSpec::identity(k)),
                (
                    "random",
                    FeatureMapSpec::positive_random(k, dims.feature_dim, derive_seed(seed, 5)),
                ),
            ];
            for (name, spec) in specs {
                let map = FeatureMap::build(spec)?;
                let result = check_w0_identity(&weights, &tokens, &map, policy)?;
                let denom = frobenius_norm(&result.matched_w0).max(f64::MIN_POSITIVE);
                let rel = result.identity_gap / denom;
                rec.metric(&format!("identity_rel_gap_{name}"), rel)
                    .flag(&format!("{name}_identity_violation"), rel > IDENTITY_REL_TOL);
                if name == "random" {
                    rec.metric("eta_star", result.eta_star);
                }
            }

            // Gradient check on an independent student at the same sizes.
            let map = FeatureMap::build(FeatureMapSpec::positive_random(
                k,
                dims.feature_dim,
                derive_seed(seed, 6),
            ))?;
            let w = normal_matrix::<f64>(m, dims.feature_dim, &mut stream(derive_seed(seed, 7)));
            let student = StudentModel::new(w, weights.wk().clone(), map)?;
            let teacher = TeacherModel::new(weights.wv().clone())?;
            let samples = tokens.demonstrations();
            let analytic = kd_gradient(&student, &teacher, samples)?;

            let mut fd = icl_kd_core::matrix::DenseMatrix::<f64>::zeros(m, dims.feature_dim);
            for a in 0..m {
                for b in 0..dims.feature_dim {
                    let h = FD_STEP * (1.0 + student.weights().get(a, b).abs());
                    let mut plus = student.weights().clone();
                    plus.set(a, b, plus.get(a, b) + h);
                    let mut minus = student.weights().clone();
                    minus.set(a, b, minus.get(a, b) - h);
                    let up = kd_loss(&student.with_weights(plus)?, &teacher, samples)?;
                    let down = kd_loss(&student.with_weights(minus)?, &teacher, samples)?;
                    fd.set(a, b, (up - down) / (2.0 * h));
                }
            }
            let grad_norm = frobenius_norm(&analytic).max(f64::MIN_POSITIVE);
            let grad_rel = frobenius_norm(&fd.sub(&analytic)?) / grad_norm;
            rec.metric("gradient_rel_err", grad_rel)
                .flag("gradient_violation", grad_rel > GRADIENT_REL_TOL);
            Ok(())
        },
    ))
}
