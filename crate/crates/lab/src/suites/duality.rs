//! Duality suite: per trial, one linear-attention/gradient-descent identity
//! at random sizes, one softmax-attention/kernel-dual comparison in exact
//! kernel mode, and the demonstration/query split of the same instance.
//!
//! The linear identity is checked componentwise in absolute terms (both
//! sides are exact polynomials of the inputs); the kernel-mode comparisons
//! are relative to the attention output's largest component, since partition
//! values vary across instances by orders of magnitude.

use icl_kd_core::attention::{
    dual_gd_prediction, linear_attention, one_step_linear_gd, partition_function,
    split_demo_query, LossKind, TokenMatrix,
};
use icl_kd_core::features::{FeatureMap, FeatureMapSpec};
use icl_kd_core::rng::{derive_seed, normal_matrix, normal_vec, stream};
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::report::TrialRecord;
use crate::suites::{collect_parallel, inf_norm, max_abs_diff};
use crate::taskgen::{attention_projections, target_tokens};

/// Componentwise tolerance for the linear one-step identity.
pub const LINEAR_ABS_TOL: f64 = 1e-12;
/// Relative tolerance for the softmax forward pass vs its kernel dual.
pub const SOFTMAX_REL_TOL: f64 = 1e-11;
/// Relative tolerance for the w0/gradient split reassembly.
pub const SPLIT_REL_TOL: f64 = 1e-11;

pub fn records(cfg: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    let dims = cfg.dims;
    let caps = cfg.caps;
    Ok(collect_parallel(
        cfg.trials,
        "duality",
        cfg.seed,
        |_trial, seed, rec| {
            let mut rng = stream(derive_seed(seed, 0));

            // Linear identity: one GD step on (X, Y) from W0, evaluated at
            // x, equals W0 x + LA(E, X, x) with error signals
            // e_i = eta (y_i - W0 x_i).
            let d = rng.random_range(1..=dims.d);
            let m = rng.random_range(1..=dims.m);
            let n = rng.random_range(1..=dims.n_demo);
            let eta = rng.random_range(0.05..1.0);
            let w0 = normal_matrix::<f64>(m, d, &mut stream(derive_seed(seed, 1)));
            let inputs = normal_matrix::<f64>(d, n, &mut stream(derive_seed(seed, 2)));
            let targets = normal_matrix::<f64>(m, n, &mut stream(derive_seed(seed, 3)));
            let x_test = normal_vec::<f64>(d, &mut stream(derive_seed(seed, 4)));

            let stepped =
                one_step_linear_gd(&w0, &inputs, &targets, LossKind::Squared, eta, &x_test)?;
            let errors = targets.sub(&w0.matmul(&inputs)?)?.scaled(eta);
            let mut dual = w0.matvec(&x_test)?;
            for (acc, term) in dual
                .iter_mut()
                .zip(linear_attention(&errors, &inputs, &x_test)?)
            {
                *acc += term;
            }
            let linear_diff = max_abs_diff(&stepped, &dual);
            rec.metric("linear_d", d as f64)
                .metric("linear_n", n as f64)
                .metric("linear_eta", eta)
                .metric("linear_max_abs_diff", linear_diff)
                .flag("linear_violation", linear_diff > LINEAR_ABS_TOL);

            // Softmax duality on a fresh instance; the query cap bounds both
            // context blocks so the exact-kernel sweep stays at the small
            // sizes where partition values are well scaled.
            let block_cap = dims.m_query.max(1);
            let d2 = rng.random_range(1..=dims.d);
            let k2 = rng.random_range(1..=dims.k);
            let m2 = rng.random_range(1..=dims.m);
            let n_demo = rng.random_range(1..=block_cap);
            let n_query = rng.random_range(0..=block_cap);
            let weights = attention_projections(d2, k2, m2, &caps, derive_seed(seed, 5))?;
            let demos = target_tokens(d2, n_demo, caps.m_x, &mut stream(derive_seed(seed, 6)));
            let queries = target_tokens(d2, n_query, caps.m_x, &mut stream(derive_seed(seed, 7)));
            let next = target_tokens(d2, 1, caps.m_x, &mut stream(derive_seed(seed, 8)));
            let tokens = TokenMatrix::new(demos, queries, next.column(0))?;

            let attention = icl_kd_core::attention::softmax_attention(&weights, &tokens)?;
            let exact = FeatureMap::build(FeatureMapSpec::exact_kernel(k2))?;
            let dual = dual_gd_prediction(&weights, &tokens, &exact)?;
            let scale = inf_norm(&attention).max(f64::MIN_POSITIVE);
            let softmax_rel = max_abs_diff(&attention, &dual) / scale;

            let split = split_demo_query(&weights, &tokens)?;
            let split_rel = split.max_abs_diff / scale;
            let partition = partition_function(&weights, &tokens)?;

            rec.metric("softmax_d", d2 as f64)
                .metric("softmax_n_demo", n_demo as f64)
                .metric("softmax_n_query", n_query as f64)
                .metric("partition_value", partition)
                .metric("softmax_rel_diff", softmax_rel)
                .metric("split_rel_diff", split_rel)
                .flag("softmax_violation", softmax_rel > SOFTMAX_REL_TOL)
                .flag("split_violation", split_rel > SPLIT_REL_TOL);
            Ok(())
        },
    ))
}
